// SPDX-License-Identifier: Apache-2.0

//! Via point sets, canonical orientation, translation alignment and the
//! via-set similarity score.
//!
//! Coordinates are in technology units (the minimum feature spacing of the
//! node). Two vias match when their Euclidean distance is strictly below the
//! matching radius, which is half a unit.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Half of one technology unit.
pub const MATCHING_RADIUS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct ViaPoint {
    pub x: f64,
    pub y: f64,
}

impl ViaPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn translated(self, t: Translation) -> Self {
        Self::new(self.x + t.dx, self.y + t.dy)
    }

    pub fn dist2(self, other: ViaPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn dist(self, other: ViaPoint) -> f64 {
        math::sqrt(self.dist2(other))
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.x
            .total_cmp(&other.x)
            .then_with(|| self.y.total_cmp(&other.y))
    }
}

impl From<[f64; 2]> for ViaPoint {
    fn from([x, y]: [f64; 2]) -> Self {
        Self::new(x, y)
    }
}

impl From<ViaPoint> for [f64; 2] {
    fn from(p: ViaPoint) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Translation {
    pub dx: f64,
    pub dy: f64,
}

impl Translation {
    pub const ZERO: Translation = Translation::new(0.0, 0.0);

    pub const fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn norm2(self) -> f64 {
        self.dx * self.dx + self.dy * self.dy
    }

    pub fn neg(self) -> Self {
        Self::new(-self.dx, -self.dy)
    }

    /// Total order used for deterministic tie-breaking: squared norm first,
    /// then lexicographic on `(dx, dy)`.
    fn tie_cmp(&self, other: &Self) -> Ordering {
        self.norm2()
            .total_cmp(&other.norm2())
            .then_with(|| self.dx.total_cmp(&other.dx))
            .then_with(|| self.dy.total_cmp(&other.dy))
    }
}

impl From<[f64; 2]> for Translation {
    fn from([dx, dy]: [f64; 2]) -> Self {
        Self::new(dx, dy)
    }
}

impl From<Translation> for [f64; 2] {
    fn from(t: Translation) -> Self {
        [t.dx, t.dy]
    }
}

/// Via centers of one cell instance or representative.
///
/// Points are kept sorted by `(x, y)`, so two sets holding the same points
/// compare equal regardless of how they were assembled.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ViaSet {
    points: Vec<ViaPoint>,
    source: String,
}

/// Serialized as the bare point list; the source label is not stored.
impl Serialize for ViaSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        self.points.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ViaSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let points = Vec::<ViaPoint>::deserialize(d)?;
        ViaSet::new("", points).map_err(serde::de::Error::custom)
    }
}

impl ViaSet {
    pub fn new(source: impl Into<String>, points: impl IntoIterator<Item = ViaPoint>) -> Result<Self> {
        let points: Vec<ViaPoint> = points.into_iter().collect();
        if let Some(p) = points.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidInput(alloc::format!(
                "via coordinates must be finite, got ({}, {})",
                p.x,
                p.y
            )));
        }
        Ok(Self::from_finite(source.into(), points))
    }

    pub fn from_xy(source: impl Into<String>, xy: &[(f64, f64)]) -> Result<Self> {
        Self::new(source, xy.iter().map(|&(x, y)| ViaPoint::new(x, y)))
    }

    pub fn empty(source: impl Into<String>) -> Self {
        Self {
            points: Vec::new(),
            source: source.into(),
        }
    }

    pub(crate) fn from_finite(source: String, mut points: Vec<ViaPoint>) -> Self {
        points.sort_by(ViaPoint::canonical_cmp);
        Self { points, source }
    }

    pub fn points(&self) -> &[ViaPoint] {
        &self.points
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn translated(&self, t: Translation) -> Self {
        Self::from_finite(
            self.source.clone(),
            self.points.iter().map(|p| p.translated(t)).collect(),
        )
    }

    pub fn filtered(&self, mut keep: impl FnMut(&ViaPoint) -> bool) -> Self {
        Self {
            points: self.points.iter().copied().filter(|p| keep(p)).collect(),
            source: self.source.clone(),
        }
    }

    /// Smallest pairwise distance, `None` for fewer than two points.
    pub fn min_separation(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                let d = a.dist2(*b);
                best = Some(best.map_or(d, |m: f64| m.min(d)));
            }
        }
        best.map(math::sqrt)
    }

    /// Orders sets by size, then pointwise; used to make pairwise scores
    /// independent of argument order.
    fn content_cmp(&self, other: &Self) -> Ordering {
        self.points.len().cmp(&other.points.len()).then_with(|| {
            self.points
                .iter()
                .zip(&other.points)
                .map(|(a, b)| a.canonical_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    }
}

/// Placement orientation of a cell instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Orientation {
    R0,
    R180,
    MX,
    #[serde(rename = "MX_R180")]
    MxR180,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [
        Orientation::R0,
        Orientation::R180,
        Orientation::MX,
        Orientation::MxR180,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::R0 => "R0",
            Orientation::R180 => "R180",
            Orientation::MX => "MX",
            Orientation::MxR180 => "MX_R180",
        }
    }

    /// Maps a point of a `width` x `height` box. `MX` mirrors across the
    /// horizontal center line; `MX_R180` is the mirror followed by a half turn.
    /// Every variant is its own inverse.
    pub fn apply(self, p: ViaPoint, width: f64, height: f64) -> ViaPoint {
        match self {
            Orientation::R0 => p,
            Orientation::R180 => ViaPoint::new(width - p.x, height - p.y),
            Orientation::MX => ViaPoint::new(p.x, height - p.y),
            Orientation::MxR180 => ViaPoint::new(width - p.x, p.y),
        }
    }

    pub fn apply_set(self, vias: &ViaSet, width: f64, height: f64) -> ViaSet {
        ViaSet::from_finite(
            vias.source.clone(),
            vias.points
                .iter()
                .map(|&p| self.apply(p, width, height))
                .collect(),
        )
    }
}

impl core::str::FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Orientation::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(alloc::format!("unknown orientation `{s}`")))
    }
}

/// Undoes `orientation` on vias observed in an oriented cell box.
///
/// Every point must lie within the box, up to the matching radius.
pub fn canonicalize(
    vias: &ViaSet,
    orientation: Orientation,
    box_width: f64,
    box_height: f64,
) -> Result<ViaSet> {
    let tol = MATCHING_RADIUS;
    if let Some(p) = vias.points.iter().find(|p| {
        p.x < -tol || p.y < -tol || p.x > box_width + tol || p.y > box_height + tol
    }) {
        return Err(Error::OutsideBox {
            x: p.x,
            y: p.y,
            width: box_width,
            height: box_height,
        });
    }
    Ok(orientation.apply_set(vias, box_width, box_height))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignmentResult {
    /// Shift that moves the first set onto the second.
    pub translation: Translation,
    /// `(index in first, index in second)`, one-to-one.
    pub matched_pairs: Vec<(usize, usize)>,
    pub match_count: usize,
}

impl AlignmentResult {
    fn from_pairs(translation: Translation, matched_pairs: Vec<(usize, usize)>) -> Self {
        Self {
            translation,
            match_count: matched_pairs.len(),
            matched_pairs,
        }
    }
}

/// Every shift `b_j - a_i`, thinned so that at most one candidate survives per
/// cell of a `dedup_cell` grid. A non-positive cell only drops exact repeats.
pub fn candidate_translations(a: &ViaSet, b: &ViaSet, dedup_cell: f64) -> Vec<Translation> {
    let mut seen: BTreeSet<(i64, i64)> = BTreeSet::new();
    let mut seen_exact: BTreeSet<(u64, u64)> = BTreeSet::new();
    let mut out = Vec::new();
    for pa in &a.points {
        for pb in &b.points {
            let t = Translation::new(pb.x - pa.x, pb.y - pa.y);
            let fresh = if dedup_cell > 0.0 {
                seen.insert((
                    math::round(t.dx / dedup_cell) as i64,
                    math::round(t.dy / dedup_cell) as i64,
                ))
            } else {
                seen_exact.insert(((t.dx + 0.0).to_bits(), (t.dy + 0.0).to_bits()))
            };
            if fresh {
                out.push(t);
            }
        }
    }
    out
}

/// Squared distance between `a + t` and `b`, evaluated as `(b - a) - t` so
/// every code path here produces bit-identical values.
#[inline]
fn residual2(diff: (f64, f64), t: Translation) -> f64 {
    let ex = diff.0 - t.dx;
    let ey = diff.1 - t.dy;
    ex * ex + ey * ey
}

/// Accepts candidate pairs in order of increasing distance (ties by index)
/// while both endpoints are still free.
fn greedy_one_to_one(
    mut candidates: Vec<(f64, usize, usize)>,
    len_a: usize,
    len_b: usize,
) -> Vec<(usize, usize)> {
    candidates.sort_by(|x, y| {
        x.0.total_cmp(&y.0)
            .then_with(|| x.1.cmp(&y.1))
            .then_with(|| x.2.cmp(&y.2))
    });
    let mut used_a = alloc::vec![false; len_a];
    let mut used_b = alloc::vec![false; len_b];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// One-to-one matching of `a + translation` against `b` with radius `r`.
///
/// Greedy by distance; when both sets keep their vias at least `2r` apart the
/// result is the maximum matching, because every disk of radius `r` then holds
/// at most one candidate partner.
pub fn match_vias(a: &ViaSet, b: &ViaSet, translation: Translation, r: f64) -> AlignmentResult {
    let r2 = r * r;
    let mut candidates = Vec::new();
    for (i, pa) in a.points.iter().enumerate() {
        for (j, pb) in b.points.iter().enumerate() {
            let d2 = residual2((pb.x - pa.x, pb.y - pa.y), translation);
            if d2 < r2 {
                candidates.push((d2, i, j));
            }
        }
    }
    AlignmentResult::from_pairs(translation, greedy_one_to_one(candidates, a.len(), b.len()))
}

/// All pairwise differences `b_j - a_i`, sorted by x so a translation's
/// matching candidates are found with a window scan.
struct DiffIndex {
    diffs: Vec<(f64, f64, usize, usize)>,
    len_a: usize,
    len_b: usize,
}

impl DiffIndex {
    fn new(a: &ViaSet, b: &ViaSet) -> Self {
        let mut diffs = Vec::with_capacity(a.len() * b.len());
        for (i, pa) in a.points.iter().enumerate() {
            for (j, pb) in b.points.iter().enumerate() {
                diffs.push((pb.x - pa.x, pb.y - pa.y, i, j));
            }
        }
        diffs.sort_by(|p, q| p.0.total_cmp(&q.0));
        Self {
            diffs,
            len_a: a.len(),
            len_b: b.len(),
        }
    }

    fn match_at(&self, t: Translation, r: f64) -> Vec<(usize, usize)> {
        let r2 = r * r;
        let lo = self.diffs.partition_point(|d| d.0 < t.dx - r);
        let mut candidates = Vec::new();
        for &(dx, dy, i, j) in &self.diffs[lo..] {
            if dx > t.dx + r {
                break;
            }
            let d2 = residual2((dx, dy), t);
            if d2 < r2 {
                candidates.push((d2, i, j));
            }
        }
        greedy_one_to_one(candidates, self.len_a, self.len_b)
    }

    fn mean_residual(&self, pairs: &[(usize, usize)], a: &ViaSet, b: &ViaSet, t: Translation) -> Translation {
        let n = pairs.len() as f64;
        let (sx, sy) = pairs.iter().fold((0.0, 0.0), |(sx, sy), &(i, j)| {
            (
                sx + (b.points[j].x - a.points[i].x - t.dx),
                sy + (b.points[j].y - a.points[i].y - t.dy),
            )
        });
        Translation::new(sx / n, sy / n)
    }
}

fn best_candidate(index: &DiffIndex, candidates: &[Translation], r: f64) -> AlignmentResult {
    let mut best: Option<(Translation, Vec<(usize, usize)>)> = None;
    for &t in candidates {
        let pairs = index.match_at(t, r);
        let better = match &best {
            None => true,
            Some((bt, bp)) => {
                pairs.len() > bp.len() || (pairs.len() == bp.len() && t.tie_cmp(bt).is_lt())
            }
        };
        if better {
            best = Some((t, pairs));
        }
    }
    best.map(|(t, p)| AlignmentResult::from_pairs(t, p))
        .unwrap_or_default()
}

/// Shifts that can only beat `floor` matches if they are not centered on a
/// single difference: points just inside the lens of every pair of differences
/// closer than `2r`, plus differences dropped by candidate thinning.
///
/// A shift matching `m` pairs lies in the intersection of `m` open disks of
/// radius `r` around differences. That region either contains a disk center or
/// has a corner where two circles cross, so one of these points reaches it.
/// Differences with at most `floor` others within `2r` are skipped.
fn lens_candidates(index: &DiffIndex, r: f64, floor: usize) -> Vec<Translation> {
    let d = &index.diffs;
    let reach = 2.0 * r;
    let mut out = Vec::new();
    for (k, &(kx, ky, _, _)) in d.iter().enumerate() {
        let lo = d.partition_point(|p| p.0 < kx - reach);
        let near = d[lo..]
            .iter()
            .take_while(|p| p.0 <= kx + reach)
            .filter(|p| residual2((p.0, p.1), Translation::new(kx, ky)) < reach * reach)
            .count();
        if near <= floor {
            continue;
        }
        out.push(Translation::new(kx, ky));
        for &(lx, ly, _, _) in d[k + 1..].iter().take_while(|p| p.0 <= kx + reach) {
            let (ex, ey) = (lx - kx, ly - ky);
            let dist2 = ex * ex + ey * ey;
            if dist2 == 0.0 || dist2 >= reach * reach {
                continue;
            }
            let dist = math::sqrt(dist2);
            let (mx, my) = (kx + ex / 2.0, ky + ey / 2.0);
            let half_chord = math::sqrt(r * r - dist2 / 4.0);
            // Stay a hair inside the lens; its corners lie on both circles.
            let h = half_chord * (1.0 - 1e-9);
            let (ux, uy) = (-ey / dist, ex / dist);
            out.push(Translation::new(mx, my));
            out.push(Translation::new(mx + h * ux, my + h * uy));
            out.push(Translation::new(mx - h * ux, my - h * uy));
        }
    }
    out
}

/// Exhaustive translation search: tries every shift that lands one via of `a`
/// exactly on one via of `b` and keeps the one matching the most vias.
///
/// Candidates are thinned on an `r/4` grid. Ties go to the smallest shift,
/// then to the lexicographically smallest `(dx, dy)`. When a shift between
/// several nearby differences matches strictly more pairs than any difference
/// itself, that shift wins instead.
pub fn align(a: &ViaSet, b: &ViaSet, r: f64) -> AlignmentResult {
    search(a, b, r, f64::INFINITY)
}

/// [`align`] over shifts no longer than `max_shift`. With no admissible
/// candidate the result is the zero shift with no matches.
pub fn align_within(a: &ViaSet, b: &ViaSet, r: f64, max_shift: f64) -> AlignmentResult {
    search(a, b, r, max_shift)
}

fn search(a: &ViaSet, b: &ViaSet, r: f64, max_shift: f64) -> AlignmentResult {
    if a.is_empty() || b.is_empty() {
        return AlignmentResult::default();
    }
    let limit2 = max_shift * max_shift;
    let admissible = |t: &Translation| t.norm2() <= limit2;
    let index = DiffIndex::new(a, b);
    let mut candidates = candidate_translations(a, b, r / 4.0);
    candidates.retain(admissible);
    let best = best_candidate(&index, &candidates, r);
    let mut extra = lens_candidates(&index, r, best.match_count);
    extra.retain(admissible);
    if extra.is_empty() {
        return best;
    }
    let challenger = best_candidate(&index, &extra, r);
    if challenger.match_count > best.match_count {
        challenger
    } else {
        best
    }
}

/// [`align`], followed by least-squares polishing of the winning shift.
///
/// The candidate shift carries the positional noise of the single via pair
/// that generated it. Moving it to the mean residual of all matched pairs is
/// accepted only while the match count does not drop and the summed squared
/// residual shrinks.
pub fn align_refined(a: &ViaSet, b: &ViaSet, r: f64) -> AlignmentResult {
    refine(a, b, r, f64::INFINITY)
}

/// [`align_refined`] with every shift, polished or not, no longer than
/// `max_shift`.
pub fn align_refined_within(a: &ViaSet, b: &ViaSet, r: f64, max_shift: f64) -> AlignmentResult {
    refine(a, b, r, max_shift)
}

fn refine(a: &ViaSet, b: &ViaSet, r: f64, max_shift: f64) -> AlignmentResult {
    let mut best = search(a, b, r, max_shift);
    if best.match_count == 0 {
        return best;
    }
    let index = DiffIndex::new(a, b);
    let sse = |res: &AlignmentResult| -> f64 {
        res.matched_pairs
            .iter()
            .map(|&(i, j)| {
                residual2(
                    (b.points[j].x - a.points[i].x, b.points[j].y - a.points[i].y),
                    res.translation,
                )
            })
            .sum()
    };
    let mut best_sse = sse(&best);
    for _ in 0..8 {
        let step = index.mean_residual(&best.matched_pairs, a, b, best.translation);
        let t = Translation::new(best.translation.dx + step.dx, best.translation.dy + step.dy);
        if t.norm2() > max_shift * max_shift {
            break;
        }
        let next = AlignmentResult::from_pairs(t, index.match_at(t, r));
        let next_sse = sse(&next);
        let improves = next.match_count > best.match_count
            || (next.match_count == best.match_count && next_sse < best_sse);
        if !improves {
            break;
        }
        best_sse = next_sse;
        best = next;
    }
    best
}

/// `1 - 2m / (|a| + |b|)` where `m` is the aligned match count: 0 for
/// identical patterns, 1 for patterns sharing nothing.
///
/// Two empty sets score 0; exactly one empty set scores 1. The result does
/// not depend on argument order.
pub fn similarity_score(a: &ViaSet, b: &ViaSet, r: f64) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return 1.0,
        _ => {}
    }
    let (first, second) = if a.content_cmp(b).is_le() { (a, b) } else { (b, a) };
    let matched = align(first, second, r).match_count;
    score_from_counts(matched, a.len(), b.len())
}

pub fn score_from_counts(matched: usize, len_a: usize, len_b: usize) -> f64 {
    if len_a + len_b == 0 {
        return 0.0;
    }
    let total = len_a + len_b;
    // One rounding, so e.g. 18 matched of 20 gives exactly 0.1.
    total.saturating_sub(2 * matched) as f64 / total as f64
}
