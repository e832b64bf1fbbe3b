// SPDX-License-Identifier: Apache-2.0

//! Pipeline stages. Each stage reads the files of the previous ones from the
//! output directory, does its work on a thread pool and writes its own files
//! in sorted order, so results do not depend on the worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use viaprint_core::detection::{
    beta_reports, classify_in_library, tally_planted, BetaErrorReport, LabelledInstance, PairScores,
    PlantedEvalReport, Verdict,
};
use viaprint_core::extract::ExtractionConfig;
use viaprint_core::ingest::{crop_instance, default_margin, extract_instance, CellInstance, DatasetManifest};
use viaprint_core::representative::{
    build_representative, fit_boxes, holdout_instances, rebuild_stricter, render_overlay, verify_representative,
    OverlayGeometry, Representative, VerificationReport,
};
use viaprint_core::similarity::{emit_dont_use, score_pair, summarize, top_k, valid_pairs, LibraryAnalysis};
use viaprint_core::synthetic::{gen_library, plan_dataset, TruthRecord};
use viaprint_core::GrayImage;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::files::*;

/// What a stage did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Done(String),
    /// Outputs already present and `--force` not given.
    UpToDate(String),
}

impl Outcome {
    pub fn message(&self) -> &str {
        match self {
            Outcome::Done(m) | Outcome::UpToDate(m) => m,
        }
    }
}

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub force: bool,
    pool: rayon::ThreadPool,
}

impl Context {
    /// `config` must already carry every flag override.
    pub fn new(config: RunConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let out = config
            .out
            .clone()
            .ok_or_else(|| Error::Usage("no output directory; pass --out or set `out` in the config".into()))?;
        let workers = config
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Usage(format!("cannot start {workers} workers: {e}")))?;
        Ok(Self {
            config,
            out,
            force,
            pool,
        })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn skip(&self, outputs: &[&str]) -> bool {
        !self.force && outputs.iter().all(|o| self.path(o).exists())
    }

    /// Configured manifest, else the one `gen-synthetic` writes into the
    /// output directory.
    pub fn manifest_path(&self) -> Result<PathBuf> {
        if let Some(p) = &self.config.manifest {
            return Ok(p.clone());
        }
        let fallback = self.path(MANIFEST_JSON);
        if fallback.exists() {
            Ok(fallback)
        } else {
            Err(Error::Usage("no manifest; pass --manifest or set `manifest` in the config".into()))
        }
    }

    fn manifest(&self) -> Result<(PathBuf, DatasetManifest)> {
        let path = self.manifest_path()?;
        let manifest = load_manifest(&path)?;
        Ok((path, manifest))
    }
}

fn up_to_date(ctx: &Context, what: &str) -> Outcome {
    Outcome::UpToDate(format!("{what} in {} is up to date; use --force to redo", ctx.out.display()))
}

pub fn cmd_extract(ctx: &Context) -> Result<Outcome> {
    if ctx.skip(&[VIAS_CSV]) {
        return Ok(up_to_date(ctx, VIAS_CSV));
    }
    let (manifest_path, manifest) = ctx.manifest()?;
    let margin = ctx.config.margin.unwrap_or_else(|| default_margin(&manifest.node));
    let cfg = ExtractionConfig {
        pixels_per_unit: manifest.node.pixels_per_unit,
        ..ctx.config.extraction.clone()
    };
    let mut by_tile: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, rec) in manifest.instances.iter().enumerate() {
        by_tile.entry(rec.tile_id.as_str()).or_default().push(i);
    }
    let tiles: Vec<(&str, Vec<usize>)> = by_tile.into_iter().collect();
    let results: Vec<(usize, std::result::Result<CellInstance, String>)> = ctx.pool.install(|| {
        tiles
            .par_iter()
            .flat_map_iter(|(tile_id, members)| {
                let tile = manifest.tile(tile_id).expect("validated manifest");
                let image = load_gray(&tile_path(&manifest_path, tile));
                members
                    .iter()
                    .map(|&i| {
                        let res = match &image {
                            Ok(img) => extract_instance(&manifest, img, &manifest.instances[i], &cfg, margin)
                                .map_err(|e| e.to_string()),
                            Err(e) => Err(format!("unreadable tile `{tile_id}`: {e}")),
                        };
                        (i, res)
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    });
    let mut instances = Vec::new();
    let mut errors = BTreeMap::new();
    for (i, res) in results {
        match res {
            Ok(inst) => instances.push(inst),
            Err(e) => {
                errors.insert(manifest.instances[i].instance_id.clone(), e);
            }
        }
    }
    write_via_csv(&ctx.path(VIAS_CSV), &instances)?;
    let err_path = ctx.path(EXTRACT_ERRORS_CSV);
    if errors.is_empty() {
        if err_path.exists() {
            std::fs::remove_file(&err_path).map_err(|e| Error::io(&err_path, e))?;
        }
    } else {
        write_error_csv(&err_path, &errors)?;
        let listed: Vec<&str> = errors.keys().map(String::as_str).collect();
        return Err(Error::Data(format!(
            "{} instance(s) failed to extract (see {}): {}",
            errors.len(),
            err_path.display(),
            listed.join(", ")
        )));
    }
    let vias: usize = instances.iter().map(|i| i.vias.len()).sum();
    Ok(Outcome::Done(format!("extracted {vias} vias from {} instances", instances.len())))
}

fn group_by_type(instances: &[CellInstance]) -> BTreeMap<&str, Vec<CellInstance>> {
    let mut out: BTreeMap<&str, Vec<CellInstance>> = BTreeMap::new();
    for i in instances {
        out.entry(i.type_id.as_str()).or_default().push(i.clone());
    }
    out
}

pub fn cmd_build_reps(ctx: &Context) -> Result<Outcome> {
    if ctx.skip(&[REPRESENTATIVES_JSON]) {
        return Ok(up_to_date(ctx, REPRESENTATIVES_JSON));
    }
    let (_, manifest) = ctx.manifest()?;
    let instances = load_instances(&manifest, &ctx.out)?;
    let groups = group_by_type(&instances);
    let cfg = &ctx.config.representatives;
    let built: Vec<viaprint_core::Result<Representative>> = ctx.pool.install(|| {
        manifest
            .cell_types
            .par_iter()
            .map(|cell| {
                let members = groups.get(cell.type_id.as_str()).map(Vec::as_slice).unwrap_or_default();
                build_representative(cell, members, cfg)
            })
            .collect()
    });
    let mut reps = Vec::new();
    let mut failures = Vec::new();
    for res in built {
        match res {
            Ok(r) => reps.push(r),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Data(format!("representative build failed:\n  {}", failures.join("\n  "))));
    }
    reps.sort_by(|a, b| a.type_id.cmp(&b.type_id));
    fit_boxes(&mut reps, ctx.config.analysis.box_pad);
    write_json(&ctx.path(REPRESENTATIVES_JSON), &to_store(&reps))?;
    Ok(Outcome::Done(format!("built {} representatives", reps.len())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    /// Types rebuilt from the rejects list in this run, with their attempt.
    pub rebuilt: BTreeMap<String, u32>,
    pub failed: Vec<String>,
    pub reports: Vec<VerificationReport>,
}

fn verification_outcome(summary: &VerificationSummary, skipped: bool, ctx: &Context) -> Result<Outcome> {
    if !summary.failed.is_empty() {
        return Err(Error::VerificationFailed(format!(
            "{} of {} representatives failed verification: {}",
            summary.failed.len(),
            summary.reports.len(),
            summary.failed.join(", ")
        )));
    }
    if skipped {
        Ok(up_to_date(ctx, VERIFICATION_JSON))
    } else {
        Ok(Outcome::Done(format!(
            "{} representatives verified, {} rebuilt",
            summary.reports.len(),
            summary.rebuilt.len()
        )))
    }
}

/// Verifies every representative on held-out instances and draws overlays.
/// Types named in `rejects` are first rebuilt with a stricter majority.
pub fn cmd_verify_reps(ctx: &Context, rejects: Option<&Path>) -> Result<Outcome> {
    let summary_path = ctx.path(VERIFICATION_JSON);
    if ctx.skip(&[VERIFICATION_JSON]) {
        let summary: VerificationSummary = read_json(&summary_path)?;
        return verification_outcome(&summary, true, ctx);
    }
    let (manifest_path, manifest) = ctx.manifest()?;
    let instances = load_instances(&manifest, &ctx.out)?;
    let mut reps = load_representatives(&ctx.out)?;
    let cfg = &ctx.config.representatives;

    let mut rebuilt = BTreeMap::new();
    if let Some(path) = rejects {
        let groups = group_by_type(&instances);
        let wanted: BTreeSet<String> = read_id_list(path)?.into_iter().collect();
        if let Some(unknown) = wanted.iter().find(|id| !reps.iter().any(|r| &r.type_id == *id)) {
            return Err(Error::Usage(format!("{}: unknown type `{unknown}`", path.display())));
        }
        let redone: Vec<(usize, viaprint_core::Result<Representative>)> = ctx.pool.install(|| {
            reps.par_iter()
                .enumerate()
                .filter(|(_, r)| wanted.contains(&r.type_id))
                .map(|(i, r)| {
                    let cell = manifest.cell_type(&r.type_id).expect("representative of a manifest type");
                    let members = groups.get(r.type_id.as_str()).map(Vec::as_slice).unwrap_or_default();
                    (i, rebuild_stricter(cell, members, cfg, r.build_meta.attempt + 1))
                })
                .collect()
        });
        for (i, res) in redone {
            let rep = res?;
            rebuilt.insert(rep.type_id.clone(), rep.build_meta.attempt);
            reps[i] = rep;
        }
        fit_boxes(&mut reps, ctx.config.analysis.box_pad);
        write_json(&ctx.path(REPRESENTATIVES_JSON), &to_store(&reps))?;
    }

    let holdouts: Vec<Vec<&CellInstance>> =
        reps.iter().map(|r| holdout_instances(r, &instances, cfg.holdout_size)).collect();
    let reports: Vec<VerificationReport> = ctx.pool.install(|| {
        reps.par_iter()
            .zip(&holdouts)
            .map(|(r, h)| verify_representative(r, h, cfg))
            .collect()
    });

    // Overlays: the first few holdout instances of each type.
    let margin = ctx.config.margin.unwrap_or_else(|| default_margin(&manifest.node));
    let mut jobs: BTreeMap<&str, Vec<(&Representative, &CellInstance)>> = BTreeMap::new();
    for (r, h) in reps.iter().zip(&holdouts) {
        for inst in h.iter().take(ctx.config.verification.overlays_per_type) {
            let rec = manifest.instances.iter().find(|x| x.instance_id == inst.instance_id).expect("cached instance");
            jobs.entry(rec.tile_id.as_str()).or_default().push((r, inst));
        }
    }
    let overlay_dir = ctx.path(OVERLAY_DIR);
    let jobs: Vec<(&str, Vec<(&Representative, &CellInstance)>)> = jobs.into_iter().collect();
    ctx.pool.install(|| {
        jobs.par_iter().try_for_each(|(tile_id, items)| -> Result<()> {
            let tile = manifest.tile(tile_id).expect("validated manifest");
            let image = load_gray(&tile_path(&manifest_path, tile))?;
            for (rep, inst) in items {
                let rec = manifest.instances.iter().find(|x| x.instance_id == inst.instance_id).expect("cached");
                let crop = crop_instance(&image, rec, margin)?;
                let geometry = OverlayGeometry {
                    origin_offset: crop.bbox_offset(&rec.bbox),
                    pixels_per_unit: manifest.node.pixels_per_unit,
                    orientation: rec.orientation,
                    matching_radius: cfg.matching_radius,
                };
                let overlay = render_overlay(rep, inst, &crop.image, &geometry);
                let name = format!("{}_overlay_{}.png", rep.type_id, inst.instance_id);
                save_rgb_png(&overlay_dir.join(name), &overlay)?;
            }
            Ok(())
        })
    })?;

    let summary = VerificationSummary {
        rebuilt,
        failed: reports.iter().filter(|r| !r.pass).map(|r| r.type_id.clone()).collect(),
        reports,
    };
    write_json(&summary_path, &summary)?;
    verification_outcome(&summary, false, ctx)
}

fn score_library(ctx: &Context, manifest: &DatasetManifest, reps: &[Representative]) -> Result<LibraryAnalysis> {
    let lookup = |id: &str| {
        reps.iter()
            .find(|r| r.type_id == id)
            .ok_or_else(|| Error::Core(viaprint_core::Error::MissingRepresentative(id.into())))
    };
    let pairs = valid_pairs(&manifest.cell_types);
    let resolved = pairs
        .iter()
        .map(|(a, b)| Ok((lookup(a)?, lookup(b)?)))
        .collect::<Result<Vec<_>>>()?;
    let r = ctx.config.representatives.matching_radius;
    let scored = ctx.pool.install(|| resolved.par_iter().map(|(a, b)| score_pair(a, b, r)).collect());
    Ok(summarize(&manifest.node.name, scored))
}

pub fn cmd_analyze(ctx: &Context) -> Result<Outcome> {
    if ctx.skip(&[ANALYSIS_JSON, PAIRS_CSV, TOP_PAIRS_CSV]) {
        return Ok(up_to_date(ctx, ANALYSIS_JSON));
    }
    let (_, manifest) = ctx.manifest()?;
    let reps = load_representatives(&ctx.out)?;
    let analysis = score_library(ctx, &manifest, &reps)?;
    write_json(&ctx.path(ANALYSIS_JSON), &analysis)?;
    let ranked = top_k(&analysis, &manifest.cell_types, analysis.pairs.len());
    write_ranked_pairs(&ctx.path(PAIRS_CSV), &ranked)?;
    let k = ctx.config.analysis.top_k.min(ranked.len());
    write_ranked_pairs(&ctx.path(TOP_PAIRS_CSV), &ranked[..k])?;
    let mean = analysis.mean.map_or("n/a".into(), |m| format!("{m:.4}"));
    Ok(Outcome::Done(format!("scored {} pairs, mean score {mean}", analysis.pairs.len())))
}

/// Types in any pair scoring at most `threshold`. Uses `analysis.json` when
/// present and scores the library otherwise.
pub fn cmd_dont_use(ctx: &Context, threshold: Option<f64>) -> Result<Outcome> {
    if ctx.skip(&[DONT_USE_TXT]) {
        return Ok(up_to_date(ctx, DONT_USE_TXT));
    }
    let threshold = threshold.unwrap_or(ctx.config.analysis.dont_use_threshold);
    let analysis_path = ctx.path(ANALYSIS_JSON);
    let analysis: LibraryAnalysis = if analysis_path.exists() {
        read_json(&analysis_path)?
    } else {
        let (_, manifest) = ctx.manifest()?;
        score_library(ctx, &manifest, &load_representatives(&ctx.out)?)?
    };
    let ids = emit_dont_use(&analysis, threshold);
    write_id_list(&ctx.path(DONT_USE_TXT), &ids)?;
    Ok(Outcome::Done(format!("{} type(s) at or below score {threshold}", ids.len())))
}

fn classify_all(
    ctx: &Context,
    instances: &[CellInstance],
    reps: &[Representative],
) -> (Vec<Verdict>, BTreeMap<String, String>) {
    let cfg = &ctx.config.detection;
    let results: Vec<(String, viaprint_core::Result<Verdict>)> = ctx.pool.install(|| {
        instances
            .par_iter()
            .map(|i| (i.instance_id.clone(), classify_in_library(i, reps, cfg)))
            .collect()
    });
    let mut verdicts = Vec::new();
    let mut errors = BTreeMap::new();
    for (id, res) in results {
        match res {
            Ok(v) => verdicts.push(v),
            Err(e) => {
                errors.insert(id, e.to_string());
            }
        }
    }
    verdicts.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    (verdicts, errors)
}

pub fn cmd_detect(ctx: &Context) -> Result<Outcome> {
    if ctx.skip(&[VERDICTS_CSV]) {
        return Ok(up_to_date(ctx, VERDICTS_CSV));
    }
    let (_, manifest) = ctx.manifest()?;
    let instances = load_instances(&manifest, &ctx.out)?;
    let reps = load_representatives(&ctx.out)?;
    let (verdicts, errors) = classify_all(ctx, &instances, &reps);
    write_verdicts(&ctx.path(VERDICTS_CSV), &verdicts)?;
    let err_path = ctx.path(DETECT_ERRORS_CSV);
    if !errors.is_empty() {
        write_error_csv(&err_path, &errors)?;
        return Err(Error::Data(format!(
            "{} instance(s) could not be classified (see {})",
            errors.len(),
            err_path.display()
        )));
    }
    if err_path.exists() {
        std::fs::remove_file(&err_path).map_err(|e| Error::io(&err_path, e))?;
    }
    let flagged = verdicts.iter().filter(|v| v.flagged).count();
    Ok(Outcome::Done(format!("{} instances classified, {flagged} flagged", verdicts.len())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub planted: PlantedEvalReport,
    /// Both directions of every valid pair with instances of both types.
    pub pairs: Vec<BetaErrorReport>,
}

/// Scores planted swaps against `truth` and runs the exhaustive pairwise
/// swap evaluation on the true types.
pub fn cmd_eval(ctx: &Context, truth: Option<&Path>) -> Result<Outcome> {
    if ctx.skip(&[EVAL_JSON]) {
        return Ok(up_to_date(ctx, EVAL_JSON));
    }
    let (manifest_path, manifest) = ctx.manifest()?;
    let truth_path = match truth {
        Some(p) => p.to_path_buf(),
        None => manifest_path.parent().unwrap_or(Path::new("")).join(TRUTH_JSON),
    };
    let truth: BTreeMap<String, TruthRecord> = read_json(&truth_path)?;
    let instances = load_instances(&manifest, &ctx.out)?;
    let reps = load_representatives(&ctx.out)?;
    let (verdicts, errors) = classify_all(ctx, &instances, &reps);
    if !errors.is_empty() {
        return Err(Error::Data(format!("{} instance(s) could not be classified; run `detect` for details", errors.len())));
    }
    let mut labelled = Vec::with_capacity(instances.len());
    for inst in &instances {
        let t = truth
            .get(&inst.instance_id)
            .ok_or_else(|| Error::format(&truth_path, format!("no truth for instance `{}`", inst.instance_id)))?;
        labelled.push(LabelledInstance {
            instance: inst.clone(),
            true_type: t.true_type.clone(),
        });
    }
    // `classify_all` returns verdicts sorted by id; line them up with `labelled`.
    let by_id: BTreeMap<&str, &Verdict> = verdicts.iter().map(|v| (v.instance_id.as_str(), v)).collect();
    let ordered: Vec<Verdict> = labelled.iter().map(|l| by_id[l.instance.instance_id.as_str()].clone()).collect();
    let planted = tally_planted(&labelled, &ordered);

    // A verdict scores its instance against every type of the claimed width,
    // which covers both types of any pair the instance's true type is in.
    let cfg = &ctx.config.detection;
    let mut pairs = Vec::new();
    for (a, b) in valid_pairs(&manifest.cell_types) {
        if !reps.iter().any(|r| r.type_id == a) || !reps.iter().any(|r| r.type_id == b) {
            continue;
        }
        let collect = |ty: &str| -> Vec<PairScores> {
            labelled
                .iter()
                .zip(&ordered)
                .filter(|(l, _)| l.true_type == ty)
                .filter_map(|(l, v)| {
                    Some(PairScores {
                        instance_id: l.instance.instance_id.clone(),
                        score_a: *v.scores.get(&a)?,
                        score_b: *v.scores.get(&b)?,
                    })
                })
                .collect()
        };
        let (sa, sb) = (collect(&a), collect(&b));
        if sa.is_empty() || sb.is_empty() {
            continue;
        }
        pairs.extend(beta_reports(&a, &b, &sa, &sb, cfg)?);
    }
    let summary = EvalSummary { planted, pairs };
    write_json(&ctx.path(EVAL_JSON), &summary)?;
    let p = &summary.planted;
    Ok(Outcome::Done(format!(
        "TP {} FN {} FP {} over {} planted and {} genuine instances; {} pair directions",
        p.true_positives,
        p.false_negatives,
        p.false_positives,
        p.planted,
        p.benign,
        summary.pairs.len()
    )))
}

/// Writes a synthetic library and its rendered dataset into the output
/// directory: manifest, tiles, ground truth and the library patterns.
pub fn cmd_gen_synthetic(ctx: &Context) -> Result<Outcome> {
    if ctx.skip(&[MANIFEST_JSON, TRUTH_JSON, LIBRARY_JSON]) {
        return Ok(up_to_date(ctx, MANIFEST_JSON));
    }
    let syn = &ctx.config.synthetic;
    // Everything that can go wrong here is a bad specification.
    let spec_err = |e: viaprint_core::Error| Error::Usage(format!("synthetic config: {e}"));
    let library = gen_library(&syn.library).map_err(spec_err)?;
    let plan = plan_dataset(&library, &syn.noise, &syn.dataset).map_err(spec_err)?;
    let tiles: Vec<GrayImage> = ctx.pool.install(|| (0..plan.tile_count()).into_par_iter().map(|t| plan.render_tile(t)).collect());
    for (tile, img) in plan.manifest.tiles.iter().zip(&tiles) {
        save_gray_png(&ctx.out.join(&tile.image_path), img)?;
    }
    write_json(&ctx.path(LIBRARY_JSON), &library)?;
    write_json(&ctx.path(TRUTH_JSON), &plan.truth)?;
    // The manifest goes last: its presence marks a complete dataset.
    write_json(&ctx.path(MANIFEST_JSON), &plan.manifest)?;
    Ok(Outcome::Done(format!(
        "{} types, {} instances on {} tiles",
        library.types.len(),
        plan.manifest.instances.len(),
        tiles.len()
    )))
}

