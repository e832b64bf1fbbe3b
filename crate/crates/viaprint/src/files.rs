// SPDX-License-Identifier: Apache-2.0

//! On-disk formats: manifest, images, via cache, representative store and
//! the CSV reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use viaprint_core::detection::Verdict;
use viaprint_core::ingest::{CellInstance, DatasetManifest, TileRef};
use viaprint_core::representative::{BuildMeta, Representative};
use viaprint_core::similarity::RankedPair;
use viaprint_core::{GrayImage, RgbImage, ViaPoint, ViaSet};

use crate::error::{Error, Result};

pub const VIAS_CSV: &str = "vias.csv";
pub const EXTRACT_ERRORS_CSV: &str = "extract_errors.csv";
pub const REPRESENTATIVES_JSON: &str = "representatives.json";
pub const VERIFICATION_JSON: &str = "verification.json";
pub const OVERLAY_DIR: &str = "overlays";
pub const ANALYSIS_JSON: &str = "analysis.json";
pub const PAIRS_CSV: &str = "pairs.csv";
pub const TOP_PAIRS_CSV: &str = "top_pairs.csv";
pub const DONT_USE_TXT: &str = "dont_use.txt";
pub const VERDICTS_CSV: &str = "verdicts.csv";
pub const DETECT_ERRORS_CSV: &str = "detect_errors.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const TRUTH_JSON: &str = "truth.json";
pub const LIBRARY_JSON: &str = "library.json";

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling so readers never see half a file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_string(path)?).map_err(|e| Error::format(path, e))
}

/// Parses and validates a manifest.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = read_json(path)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Tile image paths are relative to the manifest's directory.
pub fn tile_path(manifest_path: &Path, tile: &TileRef) -> PathBuf {
    let p = Path::new(&tile.image_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new("")).join(p)
    }
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(GrayImage::new(w, h, img.into_raw())?)
}

fn encode_png(path: &Path, data: &[u8], w: u32, h: u32, color: image::ExtendedColorType) -> Result<()> {
    let mut buf = Vec::new();
    image::ImageEncoder::write_image(image::codecs::png::PngEncoder::new(&mut buf), data, w, h, color)
        .map_err(|e| Error::format(path, e))?;
    write_bytes(path, &buf)
}

pub fn save_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    encode_png(path, img.pixels(), img.width(), img.height(), image::ExtendedColorType::L8)
}

pub fn save_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    encode_png(path, img.data(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::format(path, e))?;
    write_bytes(path, &bytes)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path, e)
}

/// One row per via: `instance_id,type_id,x,y`, coordinates with six
/// decimals, rows ordered by instance id. Instances without vias have no row.
pub fn write_via_csv(path: &Path, instances: &[CellInstance]) -> Result<()> {
    let mut sorted: Vec<&CellInstance> = instances.iter().collect();
    sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    let mut w = csv_writer();
    w.write_record(["instance_id", "type_id", "x", "y"]).map_err(csv_err(path))?;
    for inst in sorted {
        for p in inst.vias.points() {
            w.write_record([
                inst.instance_id.as_str(),
                inst.type_id.as_str(),
                &format!("{:.6}", p.x),
                &format!("{:.6}", p.y),
            ])
            .map_err(csv_err(path))?;
        }
    }
    finish_csv(path, w)
}

#[derive(Debug, Deserialize)]
struct ViaRow {
    instance_id: String,
    type_id: String,
    x: f64,
    y: f64,
}

/// Via points per instance id, with the type each row was written under.
pub fn read_via_csv(path: &Path) -> Result<BTreeMap<String, (String, Vec<ViaPoint>)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out: BTreeMap<String, (String, Vec<ViaPoint>)> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: ViaRow = row.map_err(csv_err(path))?;
        let entry = out.entry(row.instance_id).or_insert_with(|| (row.type_id.clone(), Vec::new()));
        if entry.0 != row.type_id {
            return Err(Error::format(path, format!("instance rows disagree on type: {} vs {}", entry.0, row.type_id)));
        }
        entry.1.push(ViaPoint { x: row.x, y: row.y });
    }
    Ok(out)
}

/// `instance_id,error`, sorted by instance id.
pub fn write_error_csv(path: &Path, errors: &BTreeMap<String, String>) -> Result<()> {
    let mut w = csv_writer();
    w.write_record(["instance_id", "error"]).map_err(csv_err(path))?;
    for (id, msg) in errors {
        w.write_record([id, msg]).map_err(csv_err(path))?;
    }
    finish_csv(path, w)
}

pub fn read_error_ids(path: &Path) -> Result<BTreeSet<String>> {
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        out.insert(rec.get(0).unwrap_or_default().to_string());
    }
    Ok(out)
}

/// Cached instances of every manifest instance that extracted cleanly, in
/// manifest order.
pub fn load_instances(manifest: &DatasetManifest, out_dir: &Path) -> Result<Vec<CellInstance>> {
    let vias_path = out_dir.join(VIAS_CSV);
    if !vias_path.exists() {
        return Err(Error::Usage(format!(
            "{} not found; run `extract` first",
            vias_path.display()
        )));
    }
    let mut cache = read_via_csv(&vias_path)?;
    let failed = read_error_ids(&out_dir.join(EXTRACT_ERRORS_CSV))?;
    let mut out = Vec::with_capacity(manifest.instances.len());
    for rec in &manifest.instances {
        if failed.contains(&rec.instance_id) {
            continue;
        }
        let points = match cache.remove(&rec.instance_id) {
            Some((type_id, pts)) if type_id == rec.type_id => pts,
            Some((type_id, _)) => {
                return Err(Error::format(
                    &vias_path,
                    format!(
                        "instance `{}` is cached as `{type_id}` but the manifest says `{}`",
                        rec.instance_id, rec.type_id
                    ),
                ))
            }
            None => Vec::new(),
        };
        out.push(CellInstance {
            instance_id: rec.instance_id.clone(),
            type_id: rec.type_id.clone(),
            vias: ViaSet::new(rec.instance_id.clone(), points)?,
        });
    }
    if let Some(stray) = cache.keys().next() {
        return Err(Error::format(&vias_path, format!("instance `{stray}` is not in the manifest")));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredRepresentative {
    pub vias: ViaSet,
    pub support: Vec<f64>,
    #[serde(rename = "box")]
    pub scoring_box: [f64; 2],
    pub cell: [f64; 2],
    pub build_meta: BuildMeta,
}

/// Representatives keyed by type id.
pub type RepresentativeStore = BTreeMap<String, StoredRepresentative>;

pub fn to_store(reps: &[Representative]) -> RepresentativeStore {
    reps.iter()
        .map(|r| {
            (
                r.type_id.clone(),
                StoredRepresentative {
                    vias: r.vias.clone(),
                    support: r.support.clone(),
                    scoring_box: [r.box_width, r.box_height],
                    cell: [r.cell_width, r.cell_height],
                    build_meta: r.build_meta.clone(),
                },
            )
        })
        .collect()
}

/// Representatives sorted by type id.
pub fn from_store(store: RepresentativeStore) -> Vec<Representative> {
    store
        .into_iter()
        .map(|(type_id, s)| Representative {
            vias: s.vias.with_source(type_id.clone()),
            type_id,
            support: s.support,
            cell_width: s.cell[0],
            cell_height: s.cell[1],
            box_width: s.scoring_box[0],
            box_height: s.scoring_box[1],
            build_meta: s.build_meta,
        })
        .collect()
}

pub fn load_representatives(out_dir: &Path) -> Result<Vec<Representative>> {
    let path = out_dir.join(REPRESENTATIVES_JSON);
    if !path.exists() {
        return Err(Error::Usage(format!("{} not found; run `build-reps` first", path.display())));
    }
    let store: RepresentativeStore = read_json(&path)?;
    for (id, s) in &store {
        if s.support.len() != s.vias.len() {
            return Err(Error::format(&path, format!("`{id}`: support and vias differ in length")));
        }
    }
    Ok(from_store(store))
}

pub fn write_ranked_pairs(path: &Path, pairs: &[RankedPair]) -> Result<()> {
    let mut w = csv_writer();
    w.write_record(["rank", "type_a", "type_b", "func_a", "func_b", "n_a", "n_b", "score"])
        .map_err(csv_err(path))?;
    for p in pairs {
        w.write_record([
            p.rank.to_string(),
            p.type_a.clone(),
            p.type_b.clone(),
            p.func_a.clone(),
            p.func_b.clone(),
            p.n_a.to_string(),
            p.n_b.to_string(),
            format!("{:.6}", p.score),
        ])
        .map_err(csv_err(path))?;
    }
    finish_csv(path, w)
}

/// `instance_id,claimed,best,kind,score_claimed,score_best`; several best
/// types are joined with `;`.
pub fn write_verdicts(path: &Path, verdicts: &[Verdict]) -> Result<()> {
    let mut w = csv_writer();
    w.write_record(["instance_id", "claimed", "best", "kind", "score_claimed", "score_best"])
        .map_err(csv_err(path))?;
    for v in verdicts {
        w.write_record([
            v.instance_id.clone(),
            v.claimed.clone(),
            v.best.join(";"),
            v.kind.as_str().to_string(),
            format!("{:.6}", v.score_claimed),
            format!("{:.6}", v.score_best),
        ])
        .map_err(csv_err(path))?;
    }
    finish_csv(path, w)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct VerdictRow {
    pub instance_id: String,
    pub claimed: String,
    pub best: String,
    pub kind: String,
    pub score_claimed: f64,
    pub score_best: f64,
}

pub fn read_verdicts(path: &Path) -> Result<Vec<VerdictRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    rdr.deserialize().map(|r| r.map_err(csv_err(path))).collect()
}

/// One type id per line; blank lines and `#` comments are ignored.
pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    Ok(read_string(path)?
        .lines()
        .map(|l| l.split('#').next().unwrap_or_default().trim())
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_id_list(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}
