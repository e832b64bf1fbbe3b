// SPDX-License-Identifier: Apache-2.0

//! Consensus via patterns per cell type.
//!
//! A representative is built from a random sample of instances: the sample is
//! aligned into one frame, vias are pooled and clustered, clusters seen in a
//! majority of instances are kept, and k-means places the final centers. A
//! held-out set of instances then checks the result, and a rejected
//! representative is rebuilt from a fresh sample with a stricter vote.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{align, align_refined, Orientation, Translation, ViaPoint, ViaSet, MATCHING_RADIUS};
use crate::image::{GrayImage, RgbImage};
use crate::ingest::{CellInstance, CellTypeInfo};
use crate::math;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepresentativeConfig {
    pub sample_size: usize,
    pub seed: u64,
    /// A vote cluster survives when seen in more than this fraction of the
    /// sampled instances.
    pub majority_threshold: f64,
    pub matching_radius: f64,
    /// Single-linkage distance for pooling votes.
    pub vote_link_distance: f64,
    pub kmeans_tolerance: f64,
    pub kmeans_max_iter: usize,
    /// Verification passes when the mean fraction of matched representative
    /// vias reaches this value...
    pub min_match_fraction: f64,
    /// ...and the mean residual of matched vias stays at or below this.
    pub max_mean_residual: f64,
    pub holdout_size: usize,
}

impl Default for RepresentativeConfig {
    fn default() -> Self {
        Self {
            sample_size: 50,
            seed: 0,
            majority_threshold: 0.5,
            matching_radius: MATCHING_RADIUS,
            vote_link_distance: MATCHING_RADIUS / 2.0,
            kmeans_tolerance: 1e-4,
            kmeans_max_iter: 100,
            min_match_fraction: 0.9,
            max_mean_residual: MATCHING_RADIUS / 2.0,
            holdout_size: 50,
        }
    }
}

impl RepresentativeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size == 0 {
            return Err(Error::InvalidInput("sample_size must be at least 1".into()));
        }
        if !(0.5..1.0).contains(&self.majority_threshold) {
            return Err(Error::InvalidInput(alloc::format!(
                "majority_threshold must lie in [0.5, 1), got {}",
                self.majority_threshold
            )));
        }
        if !(self.matching_radius > 0.0) || !(self.vote_link_distance > 0.0) {
            return Err(Error::InvalidInput("radii must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildMeta {
    pub seed: u64,
    pub sample_size: usize,
    pub majority_threshold: f64,
    pub anchor_instance_id: String,
    /// 0 for the initial build, incremented by every stricter rebuild.
    pub attempt: u32,
    pub instance_count: usize,
    pub sample_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Representative {
    pub type_id: String,
    pub vias: ViaSet,
    /// Fraction of sampled instances contributing to each via, in `vias` order.
    pub support: Vec<f64>,
    pub cell_width: f64,
    pub cell_height: f64,
    /// Scoring box, centered on the cell center.
    pub box_width: f64,
    pub box_height: f64,
    pub build_meta: BuildMeta,
}

impl Representative {
    pub fn box_contains(&self, p: ViaPoint) -> bool {
        let (cx, cy) = (self.cell_width / 2.0, self.cell_height / 2.0);
        math::abs(p.x - cx) <= self.box_width / 2.0 && math::abs(p.y - cy) <= self.box_height / 2.0
    }
}

/// FNV-1a, used to give every cell type its own sampling stream.
fn stream_id(type_id: &str) -> u64 {
    type_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Uniform sample without replacement of `min(n, len)` instances, returned in
/// input order. `stream` separates independent draws under one seed.
pub fn sample_instances<'a>(
    instances: &'a [CellInstance],
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<&'a CellInstance>> {
    if instances.is_empty() {
        return Err(Error::InvalidInput("cannot sample from an empty instance list".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("sample size must be at least 1".into()));
    }
    let mut picked = if n >= instances.len() {
        (0..instances.len()).collect()
    } else {
        let mut rng = rng::stream(seed, stream);
        index::sample(&mut rng, instances.len(), n).into_vec()
    };
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| &instances[i]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedCohort {
    /// Instance vias moved into the anchor's frame, in input order.
    pub members: Vec<ViaSet>,
    pub translations: Vec<Translation>,
    pub anchor: usize,
}

/// Picks the instance with the highest total pairwise match count as anchor
/// (ties to the smallest instance id) and moves every other instance onto it.
pub fn align_cohort(subset: &[&CellInstance], r: f64) -> Result<AlignedCohort> {
    if subset.len() < 2 {
        return Err(Error::InvalidInput(alloc::format!(
            "a cohort needs at least two instances, got {}",
            subset.len()
        )));
    }
    let n = subset.len();
    let mut totals = vec![0usize; n];
    for i in 0..n {
        for j in i + 1..n {
            let m = align(&subset[i].vias, &subset[j].vias, r).match_count;
            totals[i] += m;
            totals[j] += m;
        }
    }
    let anchor = (0..n)
        .max_by(|&a, &b| {
            totals[a]
                .cmp(&totals[b])
                .then_with(|| subset[b].instance_id.cmp(&subset[a].instance_id))
        })
        .unwrap();
    let anchor_vias = &subset[anchor].vias;
    let translations: Vec<Translation> = subset
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            if i == anchor {
                Translation::ZERO
            } else {
                align_refined(&inst.vias, anchor_vias, r).translation
            }
        })
        .collect();
    let members = subset
        .iter()
        .zip(&translations)
        .map(|(inst, &t)| inst.vias.translated(t))
        .collect();
    Ok(AlignedCohort {
        members,
        translations,
        anchor,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteCluster {
    pub center: ViaPoint,
    pub members: Vec<ViaPoint>,
    /// Fraction of instances with at least one point in the cluster.
    pub support: f64,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Single-linkage clusters of all pooled points (link distance strictly below
/// `link`), sorted by center.
pub fn cluster_votes(aligned: &[ViaSet], link: f64) -> Vec<VoteCluster> {
    let pooled: Vec<(ViaPoint, usize)> = aligned
        .iter()
        .enumerate()
        .flat_map(|(k, s)| s.points().iter().map(move |&p| (p, k)))
        .collect();
    let mut by_x: Vec<usize> = (0..pooled.len()).collect();
    by_x.sort_by(|&a, &b| pooled[a].0.x.total_cmp(&pooled[b].0.x).then(a.cmp(&b)));
    let mut parent: Vec<usize> = (0..pooled.len()).collect();
    let link2 = link * link;
    for (pos, &a) in by_x.iter().enumerate() {
        for &b in &by_x[pos + 1..] {
            if pooled[b].0.x - pooled[a].0.x >= link {
                break;
            }
            if pooled[a].0.dist2(pooled[b].0) < link2 {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: alloc::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..pooled.len() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let total = aligned.len().max(1) as f64;
    let mut clusters: Vec<VoteCluster> = groups
        .into_values()
        .map(|idx| {
            let members: Vec<ViaPoint> = idx.iter().map(|&i| pooled[i].0).collect();
            let mut owners: Vec<usize> = idx.iter().map(|&i| pooled[i].1).collect();
            owners.sort_unstable();
            owners.dedup();
            VoteCluster {
                center: mean(&members),
                support: owners.len() as f64 / total,
                members,
            }
        })
        .collect();
    clusters.sort_by(|a, b| {
        a.center
            .x
            .total_cmp(&b.center.x)
            .then_with(|| a.center.y.total_cmp(&b.center.y))
    });
    clusters
}

fn mean(points: &[ViaPoint]) -> ViaPoint {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    ViaPoint::new(sx / n, sy / n)
}

/// Majority vote: clusters seen in more than `majority_threshold` of the
/// aligned instances.
pub fn vote_vias(aligned: &[ViaSet], link: f64, majority_threshold: f64) -> Vec<VoteCluster> {
    cluster_votes(aligned, link)
        .into_iter()
        .filter(|c| c.support > majority_threshold)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Final centers, in the order of the input clusters.
    pub centers: Vec<ViaPoint>,
    pub iterations: usize,
}

/// Lloyd iterations over the pooled points of the surviving clusters, seeded
/// with the cluster centroids and with `k` fixed to the cluster count.
pub fn refine_kmeans(clusters: &[VoteCluster], tolerance: f64, max_iter: usize) -> Result<KMeans> {
    if clusters.is_empty() {
        return Err(Error::InvalidInput("k-means needs at least one cluster".into()));
    }
    let points: Vec<ViaPoint> = clusters.iter().flat_map(|c| c.members.iter().copied()).collect();
    let mut centers: Vec<ViaPoint> = clusters.iter().map(|c| c.center).collect();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); centers.len()];
        for p in &points {
            let k = (0..centers.len())
                .min_by(|&a, &b| p.dist2(centers[a]).total_cmp(&p.dist2(centers[b])).then(a.cmp(&b)))
                .unwrap();
            sums[k].0 += p.x;
            sums[k].1 += p.y;
            sums[k].2 += 1;
        }
        let mut movement: f64 = 0.0;
        for (c, &(sx, sy, n)) in centers.iter_mut().zip(&sums) {
            if n == 0 {
                continue;
            }
            let next = ViaPoint::new(sx / n as f64, sy / n as f64);
            movement = movement.max(c.dist(next));
            *c = next;
        }
        if movement < tolerance {
            break;
        }
    }
    Ok(KMeans { centers, iterations })
}

/// Sample, align, vote and refine one cell type.
///
/// `instances` must all be of `cell`'s type. Coordinates of the result are in
/// the mean frame of the sampled instances, which coincides with the cell
/// frame when bounding-box errors average out.
pub fn build_representative(
    cell: &CellTypeInfo,
    instances: &[CellInstance],
    cfg: &RepresentativeConfig,
) -> Result<Representative> {
    build_attempt(cell, instances, cfg, 0)
}

fn build_attempt(
    cell: &CellTypeInfo,
    instances: &[CellInstance],
    cfg: &RepresentativeConfig,
    attempt: u32,
) -> Result<Representative> {
    cfg.validate()?;
    if instances.len() < 2 {
        return Err(Error::TooFewInstances {
            type_id: cell.type_id.clone(),
            count: instances.len(),
            required: 2,
        });
    }
    if let Some(stray) = instances.iter().find(|i| i.type_id != cell.type_id) {
        return Err(Error::InvalidInput(alloc::format!(
            "instance `{}` is of type `{}`, not `{}`",
            stray.instance_id,
            stray.type_id,
            cell.type_id
        )));
    }
    let r = cfg.matching_radius;
    let sample = sample_instances(instances, cfg.sample_size, cfg.seed, stream_id(&cell.type_id))?;
    let cohort = align_cohort(&sample, r)?;
    let survivors = vote_vias(&cohort.members, cfg.vote_link_distance, cfg.majority_threshold);

    // Shift from the anchor's frame to the sample's mean frame.
    let n = cohort.translations.len() as f64;
    let (sx, sy) = cohort
        .translations
        .iter()
        .fold((0.0, 0.0), |(x, y), t| (x + t.dx, y + t.dy));
    let recenter = Translation::new(-sx / n, -sy / n);

    let mut placed: Vec<(ViaPoint, f64)> = if survivors.is_empty() {
        Vec::new()
    } else {
        let km = refine_kmeans(&survivors, cfg.kmeans_tolerance, cfg.kmeans_max_iter)?;
        km.centers
            .into_iter()
            .zip(&survivors)
            .map(|(c, s)| (c.translated(recenter), s.support))
            .collect()
    };
    placed.sort_by(|a, b| a.0.x.total_cmp(&b.0.x).then_with(|| a.0.y.total_cmp(&b.0.y)));
    let vias = ViaSet::new(cell.type_id.clone(), placed.iter().map(|p| p.0))?;
    if let Some(d) = vias.min_separation() {
        if d < 2.0 * r {
            return Err(Error::DegenerateLibrary {
                type_id: cell.type_id.clone(),
                distance: d,
                required: 2.0 * r,
            });
        }
    }
    Ok(Representative {
        type_id: cell.type_id.clone(),
        support: placed.iter().map(|p| p.1).collect(),
        vias,
        cell_width: cell.width as f64,
        cell_height: cell.height as f64,
        box_width: cell.width as f64,
        box_height: cell.height as f64,
        build_meta: BuildMeta {
            seed: cfg.seed,
            sample_size: cfg.sample_size,
            majority_threshold: cfg.majority_threshold,
            anchor_instance_id: sample[cohort.anchor].instance_id.clone(),
            attempt,
            instance_count: instances.len(),
            sample_ids: sample.iter().map(|i| i.instance_id.clone()).collect(),
        },
    })
}

/// Majority threshold used by rebuild `attempt`: 0.5 plus 0.1 per attempt,
/// capped at 0.9.
pub fn stricter_threshold(attempt: u32) -> f64 {
    (5 + attempt.min(4)) as f64 / 10.0
}

/// Rebuilds with seed `cfg.seed + attempt` and [`stricter_threshold`].
pub fn rebuild_stricter(
    cell: &CellTypeInfo,
    instances: &[CellInstance],
    cfg: &RepresentativeConfig,
    attempt: u32,
) -> Result<Representative> {
    if attempt == 0 {
        return Err(Error::InvalidInput("rebuild attempts start at 1".into()));
    }
    let stricter = RepresentativeConfig {
        seed: cfg.seed.wrapping_add(attempt as u64),
        majority_threshold: stricter_threshold(attempt),
        ..cfg.clone()
    };
    build_attempt(cell, instances, &stricter, attempt)
}

/// Grows every box so that the vias of all representatives of the same width
/// fit when the two cells are centered on each other, plus `pad`.
pub fn fit_boxes(reps: &mut [Representative], pad: f64) {
    let extents: Vec<(f64, f64, f64)> = reps
        .iter()
        .map(|s| {
            let (cx, cy) = (s.cell_width / 2.0, s.cell_height / 2.0);
            let hx = s.vias.points().iter().map(|v| math::abs(v.x - cx) + pad).fold(0.0, f64::max);
            let hy = s.vias.points().iter().map(|v| math::abs(v.y - cy) + pad).fold(0.0, f64::max);
            (s.cell_width, hx, hy)
        })
        .collect();
    for rep in reps.iter_mut() {
        let mut hx = rep.cell_width / 2.0;
        let mut hy = rep.cell_height / 2.0;
        for &(w, ex, ey) in &extents {
            if w == rep.cell_width {
                hx = hx.max(ex);
                hy = hy.max(ey);
            }
        }
        rep.box_width = 2.0 * hx;
        rep.box_height = 2.0 * hy;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceCheck {
    pub instance_id: String,
    pub match_fraction: f64,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub type_id: String,
    pub instances: Vec<InstanceCheck>,
    /// `None` when no held-out instance was available.
    pub mean_match_fraction: Option<f64>,
    pub mean_residual: Option<f64>,
    pub pass: bool,
}

/// Instances not used to build `rep`, at most `n`, in input order.
pub fn holdout_instances<'a>(rep: &Representative, instances: &'a [CellInstance], n: usize) -> Vec<&'a CellInstance> {
    instances
        .iter()
        .filter(|i| i.type_id == rep.type_id && !rep.build_meta.sample_ids.contains(&i.instance_id))
        .take(n)
        .collect()
}

/// Aligns each held-out instance to `rep` and checks how many representative
/// vias it reproduces and how closely. An empty holdout passes vacuously.
pub fn verify_representative(
    rep: &Representative,
    holdout: &[&CellInstance],
    cfg: &RepresentativeConfig,
) -> VerificationReport {
    let r = cfg.matching_radius;
    let checks: Vec<InstanceCheck> = holdout
        .iter()
        .map(|inst| {
            let res = align_refined(&inst.vias, &rep.vias, r);
            let match_fraction = if rep.vias.is_empty() {
                if inst.vias.is_empty() { 1.0 } else { 0.0 }
            } else {
                res.match_count as f64 / rep.vias.len() as f64
            };
            let mean_residual = if res.match_count == 0 {
                if rep.vias.is_empty() { 0.0 } else { r }
            } else {
                res.matched_pairs
                    .iter()
                    .map(|&(i, j)| inst.vias.points()[i].translated(res.translation).dist(rep.vias.points()[j]))
                    .sum::<f64>()
                    / res.match_count as f64
            };
            InstanceCheck {
                instance_id: inst.instance_id.clone(),
                match_fraction,
                mean_residual,
            }
        })
        .collect();
    let n = checks.len() as f64;
    let (mean_match_fraction, mean_residual) = if checks.is_empty() {
        (None, None)
    } else {
        (
            Some(checks.iter().map(|c| c.match_fraction).sum::<f64>() / n),
            Some(checks.iter().map(|c| c.mean_residual).sum::<f64>() / n),
        )
    };
    let pass = match (mean_match_fraction, mean_residual) {
        (Some(mf), Some(res)) => mf >= cfg.min_match_fraction && res <= cfg.max_mean_residual,
        _ => true,
    };
    VerificationReport {
        type_id: rep.type_id.to_string(),
        instances: checks,
        mean_match_fraction,
        mean_residual,
        pass,
    }
}

/// Where an instance crop sits relative to its canonical cell frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlayGeometry {
    /// Pixel position of the un-margined bbox corner in the crop.
    pub origin_offset: (f64, f64),
    pub pixels_per_unit: f64,
    pub orientation: Orientation,
    pub matching_radius: f64,
}

const OVERLAY_COLOR: [u8; 3] = [255, 0, 0];

/// Draws the representative's vias as circles of the matching radius onto
/// the instance crop, at the translation that aligns the instance to it.
pub fn render_overlay(
    rep: &Representative,
    instance: &CellInstance,
    crop: &GrayImage,
    geometry: &OverlayGeometry,
) -> RgbImage {
    let mut out = RgbImage::from_gray(crop);
    if rep.vias.is_empty() {
        return out;
    }
    let t = align_refined(&instance.vias, &rep.vias, geometry.matching_radius).translation;
    let radius = geometry.matching_radius * geometry.pixels_per_unit;
    for &v in rep.vias.points() {
        let local = v.translated(t.neg());
        let observed = geometry.orientation.apply(local, rep.cell_width, rep.cell_height);
        let cx = observed.x * geometry.pixels_per_unit + geometry.origin_offset.0;
        let cy = observed.y * geometry.pixels_per_unit + geometry.origin_offset.1;
        let x0 = math::floor(cx - radius - 1.0).max(0.0) as u32;
        let y0 = math::floor(cy - radius - 1.0).max(0.0) as u32;
        let x1 = (math::ceil(cx + radius + 1.0).max(0.0) as u32).min(crop.width());
        let y1 = (math::ceil(cy + radius + 1.0).max(0.0) as u32).min(crop.height());
        for y in y0..y1 {
            for x in x0..x1 {
                let d = math::sqrt((x as f64 - cx) * (x as f64 - cx) + (y as f64 - cy) * (y as f64 - cy));
                if math::abs(d - radius) < 0.5 {
                    out.put(x, y, OVERLAY_COLOR);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: &str, xy: &[(f64, f64)]) -> CellInstance {
        CellInstance {
            instance_id: id.into(),
            type_id: "T".into(),
            vias: ViaSet::from_xy(id, xy).unwrap(),
        }
    }

    fn cell() -> CellTypeInfo {
        CellTypeInfo {
            type_id: "T".into(),
            function_class: "XOR".into(),
            width: 8,
            height: 8,
        }
    }

    const PATTERN: [(f64, f64); 5] = [(1.0, 1.0), (3.0, 2.0), (5.0, 5.0), (2.0, 6.0), (7.0, 3.0)];

    fn shifted(id: &str, dx: f64, dy: f64) -> CellInstance {
        let xy: Vec<(f64, f64)> = PATTERN.iter().map(|&(x, y)| (x + dx, y + dy)).collect();
        inst(id, &xy)
    }

    #[test]
    fn sample_smaller_population_returns_all() {
        let all: Vec<CellInstance> = (0..30).map(|i| shifted(&alloc::format!("i{i:02}"), 0.0, 0.0)).collect();
        assert_eq!(sample_instances(&all, 50, 7, 0).unwrap().len(), 30);
        let a = sample_instances(&all, 10, 7, 0).unwrap();
        let b = sample_instances(&all, 10, 7, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(sample_instances(&[], 5, 0, 0).is_err());
    }

    #[test]
    fn cohort_of_identical_instances_needs_no_shift() {
        let all: Vec<CellInstance> = (0..4).map(|i| shifted(&alloc::format!("i{i}"), 0.0, 0.0)).collect();
        let refs: Vec<&CellInstance> = all.iter().collect();
        let c = align_cohort(&refs, 0.5).unwrap();
        assert!(c.translations.iter().all(|t| *t == Translation::ZERO));
        assert_eq!(c.anchor, 0);
    }

    #[test]
    fn cohort_recovers_planted_shifts() {
        let shifts = [(0.0, 0.0), (0.25, -0.125), (-0.375, 0.5), (1.0, 2.0)];
        let all: Vec<CellInstance> = shifts
            .iter()
            .enumerate()
            .map(|(i, &(dx, dy))| shifted(&alloc::format!("i{i}"), dx, dy))
            .collect();
        let refs: Vec<&CellInstance> = all.iter().collect();
        let c = align_cohort(&refs, 0.5).unwrap();
        let (ax, ay) = shifts[c.anchor];
        for (t, &(dx, dy)) in c.translations.iter().zip(&shifts) {
            assert!((t.dx - (ax - dx)).abs() < 1e-12 && (t.dy - (ay - dy)).abs() < 1e-12);
        }
    }

    #[test]
    fn outlier_is_never_anchor() {
        let mut all: Vec<CellInstance> = (0..5).map(|i| shifted(&alloc::format!("i{i}"), 0.0, 0.0)).collect();
        all.insert(0, inst("a_outlier", &[(0.3, 7.7), (4.4, 0.2), (6.6, 6.1)]));
        let refs: Vec<&CellInstance> = all.iter().collect();
        let c = align_cohort(&refs, 0.5).unwrap();
        assert_ne!(all[c.anchor].instance_id, "a_outlier");
    }

    #[test]
    fn vote_support_and_majority() {
        let full: Vec<ViaSet> = (0..50).map(|i| shifted(&alloc::format!("i{i}"), 0.0, 0.0).vias).collect();
        let v = vote_vias(&full, 0.25, 0.5);
        assert_eq!(v.len(), PATTERN.len());
        assert!(v.iter().all(|c| c.support == 1.0));

        // extra via in 20 of 50 instances is dropped
        let mut mixed = full.clone();
        for s in mixed.iter_mut().take(20) {
            let mut pts = s.points().to_vec();
            pts.push(ViaPoint::new(6.0, 7.0));
            *s = ViaSet::new("x", pts).unwrap();
        }
        let all = cluster_votes(&mixed, 0.25);
        assert_eq!(all.len(), PATTERN.len() + 1);
        assert_eq!(vote_vias(&mixed, 0.25, 0.5).len(), PATTERN.len());
    }

    #[test]
    fn kmeans_fixed_point_and_symmetry() {
        let cluster = VoteCluster {
            center: ViaPoint::new(2.0, 3.0),
            members: vec![
                ViaPoint::new(1.9, 3.0),
                ViaPoint::new(2.1, 3.0),
                ViaPoint::new(2.0, 2.9),
                ViaPoint::new(2.0, 3.1),
            ],
            support: 1.0,
        };
        let km = refine_kmeans(&[cluster], 1e-4, 100).unwrap();
        assert_eq!(km.iterations, 1);
        assert!((km.centers[0].x - 2.0).abs() < 1e-12 && (km.centers[0].y - 3.0).abs() < 1e-12);
        assert!(refine_kmeans(&[], 1e-4, 100).is_err());
    }

    #[test]
    fn noise_free_build_is_exact() {
        let all: Vec<CellInstance> = (0..12).map(|i| shifted(&alloc::format!("i{i:02}"), 0.0, 0.0)).collect();
        let rep = build_representative(&cell(), &all, &RepresentativeConfig::default()).unwrap();
        assert_eq!(rep.vias, ViaSet::from_xy("T", &PATTERN).unwrap());
        assert!(rep.support.iter().all(|&s| s == 1.0));
        assert_eq!(rep.build_meta.sample_ids.len(), 12);
    }

    #[test]
    fn two_instance_type_builds() {
        let all = [shifted("a", 0.0, 0.0), shifted("b", 0.0, 0.0)];
        let rep = build_representative(&cell(), &all, &RepresentativeConfig::default()).unwrap();
        assert_eq!(rep.vias.len(), PATTERN.len());
    }

    #[test]
    fn too_few_instances_named() {
        let err = build_representative(&cell(), &[shifted("a", 0.0, 0.0)], &RepresentativeConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::TooFewInstances { ref type_id, count: 1, .. } if type_id == "T"));
    }

    #[test]
    fn crowded_consensus_is_degenerate() {
        let all: Vec<CellInstance> = (0..4).map(|i| inst(&alloc::format!("i{i}"), &[(1.0, 1.0), (1.6, 1.0), (5.0, 5.0)])).collect();
        let err = build_representative(&cell(), &all, &RepresentativeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateLibrary { .. }));
    }

    #[test]
    fn stricter_schedule() {
        assert_eq!(stricter_threshold(1), 0.6);
        assert_eq!(stricter_threshold(2), 0.7);
        assert_eq!(stricter_threshold(4), 0.9);
        assert_eq!(stricter_threshold(5), 0.9);
        let all: Vec<CellInstance> = (0..6).map(|i| shifted(&alloc::format!("i{i}"), 0.0, 0.0)).collect();
        let rep = rebuild_stricter(&cell(), &all, &RepresentativeConfig::default(), 1).unwrap();
        assert_eq!(rep.build_meta.majority_threshold, 0.6);
        assert_eq!(rep.build_meta.seed, 1);
        assert_eq!(rep.build_meta.attempt, 1);
        assert!(rebuild_stricter(&cell(), &all, &RepresentativeConfig::default(), 0).is_err());
    }

    #[test]
    fn verification_of_clean_and_defective_reps() {
        let all: Vec<CellInstance> = (0..8).map(|i| shifted(&alloc::format!("i{i}"), 0.1, -0.1)).collect();
        let cfg = RepresentativeConfig::default();
        let rep = build_representative(&cell(), &all[..4], &cfg).unwrap();
        let holdout: Vec<&CellInstance> = all[4..].iter().collect();
        let report = verify_representative(&rep, &holdout, &cfg);
        assert!(report.pass);
        assert_eq!(report.mean_match_fraction, Some(1.0));

        // move one via far away: (k-1)/k of the vias still match
        let mut bad = rep.clone();
        let mut pts = bad.vias.points().to_vec();
        pts[0] = ViaPoint::new(7.0, 7.5);
        bad.vias = ViaSet::new("T", pts).unwrap();
        let report = verify_representative(&bad, &holdout, &cfg);
        let k = PATTERN.len() as f64;
        assert!((report.mean_match_fraction.unwrap() - (k - 1.0) / k).abs() < 1e-12);
        assert!(!report.pass);

        let vacuous = verify_representative(&rep, &[], &cfg);
        assert!(vacuous.pass && vacuous.mean_match_fraction.is_none());
    }

    #[test]
    fn boxes_cover_same_width_neighbours() {
        let all: Vec<CellInstance> = (0..3).map(|i| shifted(&alloc::format!("i{i}"), 0.0, 0.0)).collect();
        let cfg = RepresentativeConfig::default();
        let a = build_representative(&cell(), &all, &cfg).unwrap();
        let mut b = a.clone();
        b.type_id = "U".into();
        b.vias = ViaSet::from_xy("U", &[(-0.5, 4.0), (4.0, 4.0)]).unwrap();
        let mut reps = [a, b];
        fit_boxes(&mut reps, 0.25);
        // b's via at x = -0.5 is 4.5 from the center; padded to 4.75
        assert_eq!(reps[0].box_width, 9.5);
        assert_eq!(reps[0].box_height, 8.0);
        assert!(reps[0].box_contains(ViaPoint::new(-0.5, 4.0)));
        assert!(!reps[0].box_contains(ViaPoint::new(-1.0, 4.0)));
    }

    #[test]
    fn overlay_of_empty_rep_is_unmodified() {
        let all = [inst("a", &[]), inst("b", &[])];
        let rep = build_representative(&cell(), &all, &RepresentativeConfig::default()).unwrap();
        assert!(rep.vias.is_empty());
        let crop = GrayImage::filled(20, 20, 33);
        let geo = OverlayGeometry {
            origin_offset: (2.0, 2.0),
            pixels_per_unit: 2.0,
            orientation: Orientation::R0,
            matching_radius: 0.5,
        };
        assert_eq!(render_overlay(&rep, &all[0], &crop, &geo), RgbImage::from_gray(&crop));
    }
}
