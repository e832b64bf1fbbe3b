// SPDX-License-Identifier: Apache-2.0

//! Seeded ground-truth libraries, noisy instances, rendered tiles and a
//! brute-force alignment oracle.
//!
//! Via patterns sit on interior lattice points of the cell box. Instances are
//! produced in two flavors: point sets (`sample_instance`), which skip imaging
//! and extraction, and rendered images (`render_instance`, `plan_dataset`).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{score_from_counts, similarity_score, Orientation, Translation, ViaPoint, ViaSet, MATCHING_RADIUS};
use crate::image::GrayImage;
use crate::ingest::{BBox, CellTypeInfo, DatasetManifest, InstanceRecord, NodeConfig, TileRef};
use crate::math;
use crate::rng::{self, domain, Rng};

/// Two library types whose patterns are built to score `target` against each
/// other. `a` and `b` index the type list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub a: usize,
    pub b: usize,
    pub target: f64,
    /// Via count of both patterns; drawn from the spec's range when absent.
    #[serde(default)]
    pub vias: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthLibrarySpec {
    pub seed: u64,
    pub type_count: usize,
    /// Inclusive via count range of unplanted types.
    pub vias_min: usize,
    pub vias_max: usize,
    /// Cell widths in units; each type draws one.
    pub widths: Vec<u32>,
    pub height: u32,
    pub planted: Vec<PlantedPair>,
    pub min_separation: f64,
    /// Every unplanted same-width pair must score above this.
    pub min_cross_score: f64,
    pub max_attempts: usize,
}

impl Default for SynthLibrarySpec {
    fn default() -> Self {
        Self {
            seed: 0,
            type_count: 20,
            vias_min: 4,
            vias_max: 16,
            widths: vec![10, 12, 14],
            height: 12,
            planted: Vec::new(),
            min_separation: 1.5,
            min_cross_score: 0.3,
            max_attempts: 2000,
        }
    }
}

impl SynthLibrarySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Infeasible(msg));
        if self.type_count == 0 {
            return bad("type_count must be positive".into());
        }
        if self.vias_min == 0 || self.vias_min > self.vias_max {
            return bad(format!("via range [{}, {}] is empty or starts at 0", self.vias_min, self.vias_max));
        }
        if self.widths.is_empty() || self.widths.iter().any(|&w| w < 2) || self.height < 2 {
            return bad("cells need width and height of at least 2 units".into());
        }
        if !(self.min_separation >= 2.0 * MATCHING_RADIUS) {
            return bad(format!(
                "min_separation {} is below twice the matching radius",
                self.min_separation
            ));
        }
        let mut is_b = vec![false; self.type_count];
        for p in &self.planted {
            if p.a >= self.type_count || p.b >= self.type_count || p.a >= p.b {
                return bad(format!("planted pair ({}, {}) needs a < b < type_count", p.a, p.b));
            }
            if !(0.0..=1.0).contains(&p.target) {
                return bad(format!("planted target {} outside [0, 1]", p.target));
            }
            if is_b[p.b] {
                return bad(format!("type {} is derived in two planted pairs", p.b));
            }
            is_b[p.b] = true;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthType {
    pub info: CellTypeInfo,
    pub pattern: ViaSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLibrary {
    pub types: Vec<SynthType>,
    pub planted: Vec<PlantedPair>,
}

impl SynthLibrary {
    pub fn get(&self, type_id: &str) -> Option<&SynthType> {
        self.types.iter().find(|t| t.info.type_id == type_id)
    }

    pub fn cell_types(&self) -> Vec<CellTypeInfo> {
        self.types.iter().map(|t| t.info.clone()).collect()
    }

    /// Type ids of the planted pairs, each pair ordered by id.
    pub fn planted_ids(&self) -> Vec<(String, String, f64)> {
        self.planted
            .iter()
            .map(|p| {
                let (a, b) = (&self.types[p.a].info.type_id, &self.types[p.b].info.type_id);
                if a <= b { (a.clone(), b.clone(), p.target) } else { (b.clone(), a.clone(), p.target) }
            })
            .collect()
    }
}

pub fn type_name(i: usize) -> String {
    format!("T{i:02}")
}

fn lattice(w: u32, h: u32) -> Vec<ViaPoint> {
    let mut pts = Vec::new();
    for x in 1..w {
        for y in 1..h {
            pts.push(ViaPoint::new(x as f64, y as f64));
        }
    }
    pts
}

/// Random sequential placement on shuffled lattice points.
fn place(rng: &mut Rng, n: usize, candidates: &mut [ViaPoint], fixed: &[ViaPoint], min_sep: f64) -> Option<Vec<ViaPoint>> {
    candidates.shuffle(rng);
    let sep2 = min_sep * min_sep;
    let mut out: Vec<ViaPoint> = Vec::with_capacity(n);
    for &c in candidates.iter() {
        if out.len() == n {
            break;
        }
        if fixed.iter().chain(out.iter()).all(|p| p.dist2(c) >= sep2) {
            out.push(c);
        }
    }
    (out.len() == n).then_some(out)
}

fn free_pattern(rng: &mut Rng, spec: &SynthLibrarySpec, w: u32, count: Option<usize>, id: &str) -> Result<ViaSet> {
    let n = count.unwrap_or_else(|| rng.random_range(spec.vias_min..=spec.vias_max));
    let mut candidates = lattice(w, spec.height);
    for _ in 0..spec.max_attempts.max(1) {
        if let Some(pts) = place(rng, n, &mut candidates, &[], spec.min_separation) {
            return ViaSet::new(id, pts);
        }
    }
    Err(Error::Infeasible(format!(
        "could not place {n} vias {} units apart on the interior lattice of a {w}x{} cell",
        spec.min_separation, spec.height
    )))
}

/// Shared via count realizing `target` for two `n`-via patterns.
fn shared_count(n: usize, target: f64) -> usize {
    math::round((1.0 - target) * n as f64) as usize
}

fn derived_pattern(rng: &mut Rng, spec: &SynthLibrarySpec, base: &ViaSet, w: u32, target: f64, id: &str) -> Result<ViaSet> {
    let n = base.len();
    if target == 0.0 {
        return Ok(base.clone().with_source(id));
    }
    let m = shared_count(n, target);
    if m == 0 {
        return Err(Error::Infeasible(format!(
            "target {target} leaves no shared via among {n}; any translation matches one"
        )));
    }
    let want = score_from_counts(m, n, n);
    let mut candidates = lattice(w, spec.height);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..spec.max_attempts.max(1) {
        order.shuffle(rng);
        let kept: Vec<ViaPoint> = order[..m].iter().map(|&i| base.points()[i]).collect();
        // New vias keep clear of every base via, so identity matches exactly m.
        let Some(fresh) = place(rng, n - m, &mut candidates, base.points(), spec.min_separation) else {
            continue;
        };
        let pattern = ViaSet::new(id, kept.into_iter().chain(fresh))?;
        if similarity_score(base, &pattern, MATCHING_RADIUS) == want {
            return Ok(pattern);
        }
    }
    Err(Error::Infeasible(format!(
        "could not realize planted score {target} on a {n}-via pattern in a {w}x{} cell",
        spec.height
    )))
}

fn family_roots(spec: &SynthLibrarySpec) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..spec.type_count).collect();
    fn root(parent: &[usize], mut i: usize) -> usize {
        while parent[i] != i {
            i = parent[i];
        }
        i
    }
    for p in &spec.planted {
        let (ra, rb) = (root(&parent, p.a), root(&parent, p.b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    (0..spec.type_count).map(|i| root(&parent, i)).collect()
}

/// Builds a library with the planted pairs realized and every other
/// same-width pair scoring above `min_cross_score`.
///
/// Types are generated in index order; a type clashing with an earlier one is
/// regenerated. Types linked through planted pairs are exempt from the check
/// among themselves. Each type gets a distinct function class.
pub fn gen_library(spec: &SynthLibrarySpec) -> Result<SynthLibrary> {
    spec.validate()?;
    let family = family_roots(spec);
    let parent_of: BTreeMap<usize, PlantedPair> = spec.planted.iter().map(|p| (p.b, *p)).collect();
    let mut types: Vec<SynthType> = Vec::with_capacity(spec.type_count);

    for i in 0..spec.type_count {
        let id = type_name(i);
        let mut rng = rng::stream(spec.seed, domain::LIBRARY + i as u64);
        let width = match parent_of.get(&i) {
            Some(p) => types[p.a].info.width,
            None => spec.widths[rng.random_range(0..spec.widths.len())],
        };
        let count = spec.planted.iter().find(|p| p.a == i).and_then(|p| p.vias);
        let mut accepted = None;
        for _ in 0..spec.max_attempts.max(1) {
            let pattern = match parent_of.get(&i) {
                Some(p) => derived_pattern(&mut rng, spec, &types[p.a].pattern, width, p.target, &id)?,
                None => free_pattern(&mut rng, spec, width, count, &id)?,
            };
            let clash = types.iter().enumerate().any(|(j, t)| {
                t.info.width == width
                    && family[j] != family[i]
                    && similarity_score(&t.pattern, &pattern, MATCHING_RADIUS) <= spec.min_cross_score
            });
            if !clash {
                accepted = Some(pattern);
                break;
            }
        }
        let pattern = accepted.ok_or_else(|| {
            Error::Infeasible(format!(
                "type {id}: every candidate pattern scored at most {} against an earlier type",
                spec.min_cross_score
            ))
        })?;
        types.push(SynthType {
            info: CellTypeInfo {
                type_id: id,
                function_class: format!("F{i:02}"),
                width,
                height: spec.height,
            },
            pattern,
        });
    }
    Ok(SynthLibrary {
        types,
        planted: spec.planted.clone(),
    })
}

/// Imaging and placement noise.
///
/// Rendered vias peak `illumination_gradient + contrast_margin` gray levels
/// above the local background, which itself ramps by `illumination_gradient`
/// from left to right. The dimmest via therefore clears the brightest
/// background by `contrast_margin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Per-coordinate standard deviation of via position jitter, in units.
    pub jitter_sigma: f64,
    pub dropout_prob: f64,
    /// Expected spurious vias per cell (Poisson), scattered over the cell
    /// grown by one unit on every side.
    pub spurious_rate: f64,
    pub intensity_noise_sigma: f64,
    /// Half-width of the uniform per-instance content offset, in units.
    pub offset_range: f64,
    pub contrast_margin: f64,
    pub illumination_gradient: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.0,
            dropout_prob: 0.0,
            spurious_rate: 0.0,
            intensity_noise_sigma: 0.0,
            offset_range: 0.0,
            contrast_margin: 150.0,
            illumination_gradient: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("jitter_sigma", self.jitter_sigma),
            ("dropout_prob", self.dropout_prob),
            ("spurious_rate", self.spurious_rate),
            ("intensity_noise_sigma", self.intensity_noise_sigma),
            ("offset_range", self.offset_range),
            ("contrast_margin", self.contrast_margin),
            ("illumination_gradient", self.illumination_gradient),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!("noise {name} must be finite and nonnegative, got {v}")));
        }
        if self.dropout_prob >= 1.0 {
            return Err(Error::InvalidInput("dropout_prob must be below 1".into()));
        }
        Ok(())
    }

    pub fn via_amplitude(&self) -> f64 {
        self.illumination_gradient + self.contrast_margin
    }
}

/// Background gray level at the dark (left) edge.
pub const BACKGROUND_LEVEL: f64 = 40.0;
/// Radius of the flat-topped via core, in units.
pub const VIA_CORE_RADIUS: f64 = 0.3;
/// Width of the cosine edge around the core, in units.
pub const VIA_EDGE_WIDTH: f64 = 0.2;
/// Spurious vias land within this many units outside the cell.
pub const SPURIOUS_MARGIN: f64 = 1.0;

/// One noisy realization of a pattern, in the canonical cell frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTruth {
    /// Pattern vias that survived dropout, at their jittered and offset
    /// positions.
    pub vias: Vec<ViaPoint>,
    pub spurious: Vec<ViaPoint>,
    pub offset: Translation,
}

impl InstanceTruth {
    /// Everything an ideal detector would report.
    pub fn observed(&self, source: &str) -> ViaSet {
        ViaSet::from_finite(source.into(), self.vias.iter().chain(&self.spurious).copied().collect())
    }
}

/// Draws one noisy instance of `pattern` in a `width` x `height` cell.
///
/// Draw order is fixed: offset, then a dropout and a jitter draw per pattern
/// via, then the spurious count and positions.
pub fn sample_instance(pattern: &ViaSet, width: f64, height: f64, noise: &NoiseSpec, rng: &mut Rng) -> InstanceTruth {
    let offset = if noise.offset_range > 0.0 {
        Translation::new(
            rng.random_range(-noise.offset_range..=noise.offset_range),
            rng.random_range(-noise.offset_range..=noise.offset_range),
        )
    } else {
        Translation::ZERO
    };
    let jitter = Normal::new(0.0, noise.jitter_sigma).expect("validated sigma");
    let mut vias = Vec::with_capacity(pattern.len());
    for &p in pattern.points() {
        let drop = rng.random::<f64>() < noise.dropout_prob;
        let (jx, jy) = (jitter.sample(rng), jitter.sample(rng));
        if !drop {
            vias.push(ViaPoint::new(p.x + jx + offset.dx, p.y + jy + offset.dy));
        }
    }
    let count = if noise.spurious_rate > 0.0 {
        Poisson::new(noise.spurious_rate).expect("validated rate").sample(rng) as usize
    } else {
        0
    };
    let m = SPURIOUS_MARGIN;
    let spurious = (0..count)
        .map(|_| {
            ViaPoint::new(
                rng.random_range(-m..width + m) + offset.dx,
                rng.random_range(-m..height + m) + offset.dy,
            )
        })
        .collect();
    InstanceTruth { vias, spurious, offset }
}

fn via_profile(d: f64) -> f64 {
    if d <= VIA_CORE_RADIUS {
        1.0
    } else if d < VIA_CORE_RADIUS + VIA_EDGE_WIDTH {
        0.5 * (1.0 + math::cos(core::f64::consts::PI * (d - VIA_CORE_RADIUS) / VIA_EDGE_WIDTH))
    } else {
        0.0
    }
}

/// Accumulates via blobs (pixel centers at integer coordinates) and turns
/// them into a gray image.
struct Canvas {
    width: u32,
    height: u32,
    profile: Vec<f64>,
}

impl Canvas {
    fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            profile: vec![0.0; width as usize * height as usize],
        }
    }

    /// `center` in pixels, `ppu` pixels per unit.
    fn stamp(&mut self, center: ViaPoint, ppu: f64) {
        let reach = (VIA_CORE_RADIUS + VIA_EDGE_WIDTH) * ppu;
        let x0 = math::floor(center.x - reach).max(0.0) as i64;
        let y0 = math::floor(center.y - reach).max(0.0) as i64;
        let x1 = (math::ceil(center.x + reach) as i64).min(self.width as i64 - 1);
        let y1 = (math::ceil(center.y + reach) as i64).min(self.height as i64 - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = ViaPoint::new(x as f64, y as f64).dist(center) / ppu;
                let v = via_profile(d);
                let cell = &mut self.profile[y as usize * self.width as usize + x as usize];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }

    fn finish(self, noise: &NoiseSpec, rng: &mut Rng) -> GrayImage {
        let amp = noise.via_amplitude();
        let grain = Normal::new(0.0, noise.intensity_noise_sigma).expect("validated sigma");
        let span = (self.width.max(2) - 1) as f64;
        let mut px = Vec::with_capacity(self.profile.len());
        for (i, &v) in self.profile.iter().enumerate() {
            let x = (i % self.width as usize) as f64;
            let bg = BACKGROUND_LEVEL + noise.illumination_gradient * x / span;
            let n = if noise.intensity_noise_sigma > 0.0 { grain.sample(rng) } else { 0.0 };
            px.push(math::round(bg + amp * v + n).clamp(0.0, 255.0) as u8);
        }
        GrayImage::new(self.width, self.height, px).expect("sized canvas")
    }
}

fn stamp_instance(canvas: &mut Canvas, truth: &InstanceTruth, bbox: &BBox, cell: (f64, f64), o: Orientation, ppu: f64) {
    for &p in truth.vias.iter().chain(&truth.spurious) {
        let q = o.apply(p, cell.0, cell.1);
        canvas.stamp(ViaPoint::new(bbox.x as f64 + q.x * ppu, bbox.y as f64 + q.y * ppu), ppu);
    }
}

fn px(units: f64, ppu: f64) -> i64 {
    math::round(units * ppu) as i64
}

/// A single instance rendered on its own image.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedInstance {
    pub image: GrayImage,
    pub record: InstanceRecord,
    pub truth: InstanceTruth,
}

/// Units of empty border around a single rendered instance.
pub const RENDER_PAD: f64 = 2.0;

/// Renders one noisy instance of `pattern` on an image with a
/// [`RENDER_PAD`]-unit border.
///
/// The record's bbox marks the nominal cell; `truth` holds the canonical
/// positions that extraction of `record` should return.
pub fn render_instance(
    pattern: &ViaSet,
    cell: &CellTypeInfo,
    noise: &NoiseSpec,
    orientation: Orientation,
    pixels_per_unit: f64,
    instance_id: &str,
    rng: &mut Rng,
) -> Result<RenderedInstance> {
    noise.validate()?;
    let (w, h) = (cell.width as f64, cell.height as f64);
    let truth = sample_instance(pattern, w, h, noise, rng);
    let pad = px(RENDER_PAD, pixels_per_unit);
    let bbox = BBox {
        x: pad,
        y: pad,
        w: px(w, pixels_per_unit),
        h: px(h, pixels_per_unit),
    };
    let mut canvas = Canvas::new((2 * pad + bbox.w) as u32, (2 * pad + bbox.h) as u32);
    stamp_instance(&mut canvas, &truth, &bbox, (w, h), orientation, pixels_per_unit);
    let image = canvas.finish(noise, rng);
    Ok(RenderedInstance {
        image,
        record: InstanceRecord {
            instance_id: instance_id.into(),
            type_id: cell.type_id.clone(),
            tile_id: instance_id.into(),
            bbox,
            orientation,
        },
        truth,
    })
}

/// One placed substitution: an instance recorded as `claimed` but drawn from
/// `actual`'s pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSwap {
    pub claimed: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub node: NodeConfig,
    pub instances_per_type: usize,
    pub cells_per_row: usize,
    /// Orientations instances are drawn from, uniformly.
    pub orientations: Vec<Orientation>,
    pub swaps: Vec<PlantedSwap>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            node: NodeConfig {
                name: "synthetic".into(),
                unit_length_nm: 1.0,
                matching_radius: MATCHING_RADIUS,
                pixels_per_unit: 8.0,
            },
            instances_per_type: 50,
            cells_per_row: 16,
            orientations: Orientation::ALL.to_vec(),
            swaps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub true_type: String,
    /// Surviving pattern vias in the canonical frame of the instance.
    pub vias: Vec<ViaPoint>,
    pub spurious: Vec<ViaPoint>,
}

/// Everything needed to render the tiles of a dataset, tile by tile.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPlan {
    pub manifest: DatasetManifest,
    pub truth: BTreeMap<String, TruthRecord>,
    pub noise: NoiseSpec,
    seed: u64,
    /// Per tile: pixel size and the instances placed on it (manifest indices).
    tiles: Vec<((u32, u32), Vec<usize>)>,
    samples: Vec<InstanceTruth>,
}

impl DatasetPlan {
    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    /// Renders tile `t`. Tiles are independent and may be rendered in any
    /// order or in parallel.
    pub fn render_tile(&self, t: usize) -> GrayImage {
        let ((w, h), members) = &self.tiles[t];
        let ppu = self.manifest.node.pixels_per_unit;
        let mut canvas = Canvas::new(*w, *h);
        for &i in members {
            let rec = &self.manifest.instances[i];
            let cell = self.manifest.cell_type(&rec.type_id).expect("planned type");
            stamp_instance(
                &mut canvas,
                &self.samples[i],
                &rec.bbox,
                (cell.width as f64, cell.height as f64),
                rec.orientation,
                ppu,
            );
        }
        canvas.finish(&self.noise, &mut rng::stream(self.seed, domain::TILE + t as u64))
    }
}

/// Lays out a dataset: instances of every type in abutted rows, with planted
/// swaps recorded under their claimed type in the manifest and under the real
/// type in `truth`.
///
/// Instance `k` (in manifest order) draws orientation and noise from its own
/// stream, so the plan does not depend on how tiles are later rendered.
pub fn plan_dataset(library: &SynthLibrary, noise: &NoiseSpec, spec: &DatasetSpec) -> Result<DatasetPlan> {
    noise.validate()?;
    spec.node.validate()?;
    if spec.cells_per_row == 0 || spec.orientations.is_empty() || spec.instances_per_type == 0 {
        return Err(Error::InvalidInput(
            "cells_per_row, instances_per_type and orientations must be non-empty".into(),
        ));
    }
    let lookup = |id: &str| {
        library
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("swap references unknown type `{id}`")))
    };
    for s in &spec.swaps {
        let (c, a) = (lookup(&s.claimed)?, lookup(&s.actual)?);
        if c.info.width != a.info.width {
            return Err(Error::InvalidInput(format!(
                "swap {} -> {} crosses widths {} and {}",
                s.claimed, s.actual, c.info.width, a.info.width
            )));
        }
    }

    let n = spec.instances_per_type;
    let mut ids = Vec::new();
    let mut claimed = Vec::new();
    for t in &library.types {
        for k in 0..n {
            ids.push(format!("{}_{k:04}", t.info.type_id));
            claimed.push(t.info.type_id.clone());
        }
    }
    let mut actual = claimed.clone();
    let mut swap_rng = rng::stream(spec.seed, domain::SWAPS);
    for s in &spec.swaps {
        let pool: Vec<usize> = (0..ids.len())
            .filter(|&i| claimed[i] == s.claimed && actual[i] == claimed[i])
            .collect();
        if pool.is_empty() {
            return Err(Error::InvalidInput(format!("no unswapped instance of {} left", s.claimed)));
        }
        let pick = pool[swap_rng.random_range(0..pool.len())];
        actual[pick] = s.actual.clone();
    }

    let ppu = spec.node.pixels_per_unit;
    let mut samples = Vec::with_capacity(ids.len());
    let mut orientations = Vec::with_capacity(ids.len());
    for i in 0..ids.len() {
        let mut r = rng::stream(spec.seed, domain::INSTANCE + i as u64);
        let o = spec.orientations[r.random_range(0..spec.orientations.len())];
        let t = lookup(&actual[i])?;
        samples.push(sample_instance(&t.pattern, t.info.width as f64, t.info.height as f64, noise, &mut r));
        orientations.push(o);
    }

    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut rng::stream(spec.seed, domain::TILE));
    let pad = px(RENDER_PAD, ppu);
    let mut bboxes = vec![BBox { x: 0, y: 0, w: 0, h: 0 }; ids.len()];
    let mut tile_of = vec![0usize; ids.len()];
    let mut tiles = Vec::new();
    for (t, row) in order.chunks(spec.cells_per_row).enumerate() {
        let mut x = pad;
        let mut tallest = 0;
        for &i in row {
            let cell = &lookup(&claimed[i])?.info;
            let (w, h) = (px(cell.width as f64, ppu), px(cell.height as f64, ppu));
            bboxes[i] = BBox { x, y: pad, w, h };
            tile_of[i] = t;
            x += w;
            tallest = tallest.max(h);
        }
        tiles.push((((x + pad) as u32, (tallest + 2 * pad) as u32), row.to_vec()));
    }

    let instances = (0..ids.len())
        .map(|i| InstanceRecord {
            instance_id: ids[i].clone(),
            type_id: claimed[i].clone(),
            tile_id: tile_name(tile_of[i]),
            bbox: bboxes[i],
            orientation: orientations[i],
        })
        .collect();
    let manifest = DatasetManifest {
        node: spec.node.clone(),
        tiles: (0..tiles.len())
            .map(|t| TileRef {
                tile_id: tile_name(t),
                image_path: format!("tiles/{}.png", tile_name(t)),
            })
            .collect(),
        cell_types: library.cell_types(),
        instances,
    };
    manifest.validate()?;
    let truth = (0..ids.len())
        .map(|i| {
            (
                ids[i].clone(),
                TruthRecord {
                    true_type: actual[i].clone(),
                    vias: samples[i].vias.clone(),
                    spurious: samples[i].spurious.clone(),
                },
            )
        })
        .collect();
    Ok(DatasetPlan {
        manifest,
        truth,
        noise: noise.clone(),
        seed: spec.seed,
        tiles,
        samples,
    })
}

pub fn tile_name(t: usize) -> String {
    format!("tile_{t:04}")
}

/// A fully rendered dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    /// In the order of `manifest.tiles`.
    pub tiles: Vec<GrayImage>,
    pub truth: BTreeMap<String, TruthRecord>,
}

pub fn gen_dataset(library: &SynthLibrary, noise: &NoiseSpec, spec: &DatasetSpec) -> Result<SynthDataset> {
    let plan = plan_dataset(library, noise, spec)?;
    let tiles = (0..plan.tile_count()).map(|t| plan.render_tile(t)).collect();
    Ok(SynthDataset {
        manifest: plan.manifest,
        tiles,
        truth: plan.truth,
    })
}

pub const ORACLE_MAX_POINTS: usize = 20;

fn kuhn(adj: &[Vec<usize>], nb: usize) -> usize {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                    owner[v] = Some(u);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; nb];
    let mut count = 0;
    for u in 0..adj.len() {
        let mut seen = vec![false; nb];
        if augment(u, adj, &mut seen, &mut owner) {
            count += 1;
        }
    }
    count
}

/// Maximum one-to-one match count over a dense translation grid.
///
/// Grid points are the multiples of `grid_step` within `r` of some difference
/// `b_j - a_i`; no other translation can match anything. Each grid point gets
/// an exact maximum bipartite matching.
pub fn oracle_align(a: &ViaSet, b: &ViaSet, r: f64, grid_step: f64) -> Result<usize> {
    if a.len() > ORACLE_MAX_POINTS || b.len() > ORACLE_MAX_POINTS {
        return Err(Error::InvalidInput(format!(
            "oracle_align is limited to {ORACLE_MAX_POINTS} points per set"
        )));
    }
    if !(grid_step > 0.0 && grid_step <= r / 8.0) {
        return Err(Error::InvalidInput(format!("grid_step must be in (0, r/8], got {grid_step}")));
    }
    if a.is_empty() || b.is_empty() {
        return Ok(0);
    }
    let (pa, pb) = (a.points(), b.points());
    let mut grid: Vec<(i64, i64)> = Vec::new();
    let k = math::ceil(r / grid_step) as i64;
    for p in pa {
        for q in pb {
            let (cx, cy) = (
                math::round((q.x - p.x) / grid_step) as i64,
                math::round((q.y - p.y) / grid_step) as i64,
            );
            for gy in cy - k - 1..=cy + k + 1 {
                for gx in cx - k - 1..=cx + k + 1 {
                    grid.push((gx, gy));
                }
            }
        }
    }
    grid.sort_unstable();
    grid.dedup();

    let r2 = r * r;
    let mut best = 0;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); pa.len()];
    for (gx, gy) in grid {
        let t = Translation::new(gx as f64 * grid_step, gy as f64 * grid_step);
        let mut edges = 0;
        for (i, p) in pa.iter().enumerate() {
            adj[i].clear();
            for (j, q) in pb.iter().enumerate() {
                let dx = (q.x - p.x) - t.dx;
                let dy = (q.y - p.y) - t.dy;
                if dx * dx + dy * dy < r2 {
                    adj[i].push(j);
                    edges += 1;
                }
            }
        }
        if edges <= best {
            continue;
        }
        best = best.max(kuhn(&adj, pb.len()));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::{ExtractionConfig, Method};
    use crate::geometry::{align, match_vias};
    use crate::ingest::{crop_instance, extract_instance};

    fn small_spec() -> SynthLibrarySpec {
        SynthLibrarySpec {
            type_count: 6,
            vias_min: 8,
            vias_max: 8,
            widths: vec![12],
            ..SynthLibrarySpec::default()
        }
    }

    #[test]
    fn library_is_deterministic_and_separated() {
        let spec = small_spec();
        let lib = gen_library(&spec).unwrap();
        assert_eq!(lib, gen_library(&spec).unwrap());
        for (i, t) in lib.types.iter().enumerate() {
            assert_eq!(t.pattern.len(), 8);
            assert!(t.pattern.min_separation().unwrap() >= spec.min_separation);
            for u in &lib.types[i + 1..] {
                assert!(similarity_score(&t.pattern, &u.pattern, 0.5) > 0.3);
            }
        }
    }

    #[test]
    fn planted_targets() {
        let spec = SynthLibrarySpec {
            planted: vec![
                PlantedPair { a: 0, b: 1, target: 0.0, vias: None },
                PlantedPair { a: 2, b: 3, target: 0.25, vias: None },
            ],
            ..small_spec()
        };
        let lib = gen_library(&spec).unwrap();
        assert_eq!(lib.types[0].pattern.points(), lib.types[1].pattern.points());
        let (a, b) = (&lib.types[2].pattern, &lib.types[3].pattern);
        assert_eq!(similarity_score(a, b, 0.5), 0.25);
        assert_eq!(match_vias(a, b, Translation::ZERO, 0.5).match_count, 6);
        assert_eq!(lib.types[2].info.width, lib.types[3].info.width);
    }

    #[test]
    fn infeasible_specs() {
        let crowded = SynthLibrarySpec {
            type_count: 1,
            vias_min: 30,
            vias_max: 30,
            widths: vec![4],
            height: 4,
            max_attempts: 10,
            ..SynthLibrarySpec::default()
        };
        assert!(matches!(gen_library(&crowded), Err(Error::Infeasible(_))));
        let tight = SynthLibrarySpec { min_separation: 0.9, ..small_spec() };
        assert!(gen_library(&tight).is_err());
    }

    #[test]
    fn clean_sample_is_the_pattern() {
        let lib = gen_library(&small_spec()).unwrap();
        let p = &lib.types[0].pattern;
        let s = sample_instance(p, 12.0, 12.0, &NoiseSpec::default(), &mut rng::stream(1, 0));
        assert_eq!(s.observed("x").points(), p.points());
    }

    #[test]
    fn clean_render_round_trip() {
        let lib = gen_library(&small_spec()).unwrap();
        let t = &lib.types[0];
        let cfg = ExtractionConfig { binarize_threshold: 115, ..ExtractionConfig::default() };
        for o in Orientation::ALL {
            let rendered = render_instance(&t.pattern, &t.info, &NoiseSpec::default(), o, 8.0, "i", &mut rng::stream(3, 0)).unwrap();
            let manifest = DatasetManifest {
                node: DatasetSpec::default().node,
                tiles: vec![TileRef { tile_id: "i".into(), image_path: "i.png".into() }],
                cell_types: vec![t.info.clone()],
                instances: vec![rendered.record.clone()],
            };
            for method in [Method::Threshold, Method::Persistence] {
                let cfg = ExtractionConfig { method, ..cfg.clone() };
                let inst = extract_instance(&manifest, &rendered.image, &rendered.record, &cfg, 8).unwrap();
                assert_eq!(inst.vias.len(), t.pattern.len(), "{o:?} {method:?}");
                let m = match_vias(&inst.vias, &t.pattern, Translation::ZERO, 0.05);
                assert_eq!(m.match_count, t.pattern.len(), "{o:?} {method:?}");
            }
        }
        let _ = crop_instance;
    }

    #[test]
    fn oracle_basics() {
        let a = ViaSet::from_xy("a", &[(0.0, 0.0), (2.0, 1.0), (4.0, 3.0)]).unwrap();
        assert_eq!(oracle_align(&a, &a, 0.5, 0.0625).unwrap(), 3);
        assert_eq!(oracle_align(&a, &a.translated(Translation::new(3.3, -1.7)), 0.5, 0.0625).unwrap(), 3);
        assert!(oracle_align(&a, &a, 0.5, 0.1).is_err());
        let big = ViaSet::new("b", (0..21).map(|i| ViaPoint::new(i as f64, 0.0))).unwrap();
        assert!(oracle_align(&big, &a, 0.5, 0.0625).is_err());
        // three pairwise-close differences, no single one reaching the others
        let tri = ViaSet::from_xy("t", &[(0.0, 0.0), (10.0, 0.0), (20.0, 0.0)]).unwrap();
        let shifted = ViaSet::from_xy("s", &[(0.45, 0.0), (9.55, 0.0), (20.0, 0.45)]).unwrap();
        assert_eq!(oracle_align(&tri, &shifted, 0.5, 0.0625).unwrap(), 3);
        assert_eq!(align(&tri, &shifted, 0.5).match_count, 3);
    }
}
