// SPDX-License-Identifier: Apache-2.0

//! Via detection in grayscale cell images.
//!
//! Two detectors are provided. The threshold detector binarizes, erodes away
//! small clusters and takes the centroid of every surviving blob. The
//! persistence detector needs no global threshold: it computes the
//! 0-dimensional persistence of the superlevel-set filtration and keeps every
//! bright island that survives long enough before merging into a brighter one.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ViaPoint, ViaSet};
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Threshold,
    Persistence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub method: Method,
    /// Pixels at or above this intensity are foreground.
    pub binarize_threshold: u8,
    /// Radius of the erosion disk, in pixels.
    pub erosion_radius: u32,
    /// Blobs smaller than this (after erosion) are dropped.
    pub min_blob_area: usize,
    /// Minimum birth-to-death intensity drop of a retained island.
    pub persistence_threshold: f64,
    pub pixels_per_unit: f64,
    /// Pixel position of the unit-space origin.
    pub origin_offset: (f64, f64),
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            method: Method::Threshold,
            binarize_threshold: 128,
            erosion_radius: 1,
            min_blob_area: 1,
            persistence_threshold: 40.0,
            pixels_per_unit: 8.0,
            origin_offset: (0.0, 0.0),
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixels_per_unit > 0.0) || !self.pixels_per_unit.is_finite() {
            return Err(Error::InvalidInput(alloc::format!(
                "pixels_per_unit must be positive, got {}",
                self.pixels_per_unit
            )));
        }
        if self.min_blob_area == 0 {
            return Err(Error::InvalidInput("min_blob_area must be at least 1".into()));
        }
        if !(self.persistence_threshold > 0.0) {
            return Err(Error::InvalidInput(alloc::format!(
                "persistence_threshold must be positive, got {}",
                self.persistence_threshold
            )));
        }
        Ok(())
    }
}

/// `(p - origin_offset) / pixels_per_unit`.
pub fn pixels_to_units(points: &[ViaPoint], cfg: &ExtractionConfig) -> Vec<ViaPoint> {
    let (ox, oy) = cfg.origin_offset;
    points
        .iter()
        .map(|p| ViaPoint::new((p.x - ox) / cfg.pixels_per_unit, (p.y - oy) / cfg.pixels_per_unit))
        .collect()
}

pub fn units_to_pixels(points: &[ViaPoint], cfg: &ExtractionConfig) -> Vec<ViaPoint> {
    let (ox, oy) = cfg.origin_offset;
    points
        .iter()
        .map(|p| ViaPoint::new(p.x * cfg.pixels_per_unit + ox, p.y * cfg.pixels_per_unit + oy))
        .collect()
}

/// Runs the detector selected by `cfg.method`.
pub fn detect_vias(img: &GrayImage, cfg: &ExtractionConfig) -> Result<ViaSet> {
    match cfg.method {
        Method::Threshold => detect_vias_threshold(img, cfg),
        Method::Persistence => detect_vias_persistence(img, cfg),
    }
}

fn check_image(img: &GrayImage) -> Result<()> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::InvalidInput("image has zero size".into()));
    }
    Ok(())
}

const NEIGHBORS8: [(i32, i32); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

fn disk_offsets(radius: u32) -> Vec<(i32, i32)> {
    let r = radius as i32;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

#[inline]
fn offset(x: usize, y: usize, d: (i32, i32), w: usize, h: usize) -> Option<usize> {
    let nx = x as i64 + d.0 as i64;
    let ny = y as i64 + d.1 as i64;
    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
        None
    } else {
        Some(ny as usize * w + nx as usize)
    }
}

/// Intensity-weighted centroid in pixel coordinates.
#[derive(Default, Clone, Copy)]
struct Moments {
    w: f64,
    wx: f64,
    wy: f64,
    n: f64,
    x: f64,
    y: f64,
}

impl Moments {
    fn add(&mut self, x: usize, y: usize, v: u8) {
        let (xf, yf, vf) = (x as f64, y as f64, v as f64);
        self.w += vf;
        self.wx += vf * xf;
        self.wy += vf * yf;
        self.n += 1.0;
        self.x += xf;
        self.y += yf;
    }

    fn centroid(&self) -> ViaPoint {
        if self.w > 0.0 {
            ViaPoint::new(self.wx / self.w, self.wy / self.w)
        } else {
            ViaPoint::new(self.x / self.n, self.y / self.n)
        }
    }
}

/// Binarize, erode, label 8-connected blobs and return one via per blob that
/// survives `min_blob_area`.
///
/// The centroid is taken over the blob's pre-erosion pixels: every foreground
/// pixel within the erosion disk of the blob's eroded core. Out-of-image
/// pixels do not erode their neighbors.
pub fn detect_vias_threshold(img: &GrayImage, cfg: &ExtractionConfig) -> Result<ViaSet> {
    check_image(img)?;
    cfg.validate()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img.pixels();
    let mask: Vec<bool> = px.iter().map(|&v| v >= cfg.binarize_threshold).collect();

    let disk = disk_offsets(cfg.erosion_radius);
    let mut eroded = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            eroded[i] = mask[i]
                && disk
                    .iter()
                    .all(|&d| offset(x, y, d, w, h).is_none_or(|j| mask[j]));
        }
    }

    // 8-connected labeling, labels assigned in row-major discovery order.
    let mut label = vec![0u32; w * h];
    let mut areas: Vec<usize> = vec![0];
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !eroded[start] || label[start] != 0 {
            continue;
        }
        let id = areas.len() as u32;
        areas.push(0);
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            areas[id as usize] += 1;
            let (x, y) = (i % w, i / w);
            for d in NEIGHBORS8 {
                if let Some(j) = offset(x, y, d, w, h) {
                    if eroded[j] && label[j] == 0 {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
    }

    // Reconstruct each surviving blob's pre-erosion footprint.
    let survives = |id: u32| areas[id as usize] >= cfg.min_blob_area;
    let mut owner = vec![0u32; w * h];
    for i in 0..w * h {
        let id = label[i];
        if id == 0 || !survives(id) {
            continue;
        }
        let (x, y) = (i % w, i / w);
        for &d in &disk {
            if let Some(j) = offset(x, y, d, w, h) {
                if mask[j] && owner[j] == 0 {
                    owner[j] = id;
                }
            }
        }
    }

    let mut moments = vec![Moments::default(); areas.len()];
    for (i, &id) in owner.iter().enumerate() {
        if id != 0 {
            moments[id as usize].add(i % w, i / w, px[i]);
        }
    }
    let centers: Vec<ViaPoint> = (1..areas.len())
        .filter(|&id| survives(id as u32))
        .map(|id| moments[id].centroid())
        .collect();
    ViaSet::new("", pixels_to_units(&centers, cfg))
}

/// One island of the superlevel-set filtration.
#[derive(Debug, Clone)]
struct Island {
    birth: u8,
    /// Position of the birth pixel in processing order; earlier is elder.
    birth_rank: usize,
    death: Option<u8>,
    absorbed_by: Option<usize>,
}

/// A 0-dimensional persistence pair, exposed for diagnostics and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PersistencePair {
    pub birth: u8,
    /// `None` for the island holding the global maximum.
    pub death: Option<u8>,
    /// Pixel index of the island's maximum.
    pub peak: usize,
}

impl PersistencePair {
    pub fn persistence(&self, image_min: u8) -> f64 {
        self.birth as f64 - self.death.unwrap_or(image_min) as f64
    }
}

struct Filtration {
    islands: Vec<Island>,
    peaks: Vec<usize>,
    /// Island each pixel joined when it was activated.
    joined: Vec<usize>,
    /// `(level, surviving island, absorbed island)`
    merges: Vec<(u8, usize, usize)>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Sweeps pixels from bright to dark (ties in row-major order) with a
/// union-find over 8-connected active pixels. When islands meet, the one born
/// brighter survives and the other dies at the current level.
fn superlevel_filtration(img: &GrayImage) -> Filtration {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = img.pixels();

    // Counting sort: descending intensity, ascending index within a level.
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); 256];
    for (i, &v) in px.iter().enumerate() {
        buckets[v as usize].push(i);
    }
    let order = buckets.into_iter().rev().flatten();

    let mut parent: Vec<usize> = (0..w * h).collect();
    let mut active = vec![false; w * h];
    let mut island_of_root = vec![usize::MAX; w * h];
    let mut joined = vec![usize::MAX; w * h];
    let mut islands: Vec<Island> = Vec::new();
    let mut peaks = Vec::new();
    let mut merges = Vec::new();
    let mut roots: Vec<usize> = Vec::with_capacity(8);

    for (rank, p) in order.enumerate() {
        let level = px[p];
        active[p] = true;
        let (x, y) = (p % w, p / w);
        roots.clear();
        for d in NEIGHBORS8 {
            if let Some(q) = offset(x, y, d, w, h) {
                if active[q] {
                    let r = find(&mut parent, q);
                    if !roots.contains(&r) {
                        roots.push(r);
                    }
                }
            }
        }
        if roots.is_empty() {
            island_of_root[p] = islands.len();
            joined[p] = islands.len();
            peaks.push(p);
            islands.push(Island {
                birth: level,
                birth_rank: rank,
                death: None,
                absorbed_by: None,
            });
            continue;
        }
        let elder_root = *roots
            .iter()
            .min_by(|&&a, &&b| {
                let (ia, ib) = (&islands[island_of_root[a]], &islands[island_of_root[b]]);
                ib.birth.cmp(&ia.birth).then(ia.birth_rank.cmp(&ib.birth_rank))
            })
            .unwrap();
        let elder = island_of_root[elder_root];
        for &r in &roots {
            if r != elder_root {
                let younger = island_of_root[r];
                islands[younger].death = Some(level);
                islands[younger].absorbed_by = Some(elder);
                merges.push((level, elder, younger));
                parent[r] = elder_root;
            }
        }
        parent[p] = elder_root;
        joined[p] = elder;
    }
    Filtration {
        islands,
        peaks,
        joined,
        merges,
    }
}

/// All persistence pairs of the superlevel-set filtration, in birth order.
pub fn persistence_pairs(img: &GrayImage) -> Result<Vec<PersistencePair>> {
    check_image(img)?;
    let f = superlevel_filtration(img);
    Ok(f.islands
        .iter()
        .zip(&f.peaks)
        .map(|(isl, &peak)| PersistencePair {
            birth: isl.birth,
            death: isl.death,
            peak,
        })
        .collect())
}

/// Threshold-free via detection from 0-dimensional persistence.
///
/// Islands with persistence at least `persistence_threshold` become vias. The
/// island of the global maximum never dies; its persistence is measured
/// against the image minimum. Each via is the intensity-weighted centroid of
/// the island's pixels in the upper half of its lifetime (at or above
/// `death + persistence / 2`); for the immortal island, the highest level at
/// which a retained island merged into it stands in for its death. Pixels absorbed from short-lived islands count
/// toward the island that absorbed them, and pixels at or below the level
/// where another retained island merged in are shared skirt and are left out.
pub fn detect_vias_persistence(img: &GrayImage, cfg: &ExtractionConfig) -> Result<ViaSet> {
    check_image(img)?;
    cfg.validate()?;
    let w = img.width() as usize;
    let px = img.pixels();
    let image_min = *px.iter().min().unwrap();
    let f = superlevel_filtration(img);

    let retained: Vec<bool> = f
        .islands
        .iter()
        .map(|isl| {
            isl.birth as f64 - isl.death.unwrap_or(image_min) as f64 >= cfg.persistence_threshold
        })
        .collect();

    // Follow absorption chains up to the nearest retained island.
    let mut resolved: Vec<Option<usize>> = vec![None; f.islands.len()];
    for start in 0..f.islands.len() {
        let mut c = start;
        loop {
            if retained[c] {
                resolved[start] = Some(c);
                break;
            }
            match f.islands[c].absorbed_by {
                Some(next) => c = next,
                None => break,
            }
        }
    }

    let mut skirt_level: Vec<Option<u8>> = vec![None; f.islands.len()];
    for &(level, elder, younger) in &f.merges {
        if !retained[younger] {
            continue;
        }
        if let Some(owner) = resolved[elder] {
            skirt_level[owner] = Some(skirt_level[owner].map_or(level, |l| l.max(level)));
        }
    }

    // The immortal island is localized as if it died where the last retained
    // island merged into it; measuring from the image minimum would pull in
    // bright background that only ever connects to it.
    let cutoff: Vec<f64> = f
        .islands
        .iter()
        .zip(&skirt_level)
        .map(|(isl, skirt)| {
            let death = isl.death.or(*skirt).unwrap_or(image_min) as f64;
            death + (isl.birth as f64 - death) / 2.0
        })
        .collect();

    let mut moments = vec![Moments::default(); f.islands.len()];
    for (p, &j) in f.joined.iter().enumerate() {
        let Some(owner) = resolved[j] else { continue };
        let v = px[p];
        if (v as f64) < cutoff[owner] || skirt_level[owner].is_some_and(|l| v <= l) {
            continue;
        }
        moments[owner].add(p % w, p / w, v);
    }
    let centers: Vec<ViaPoint> = (0..f.islands.len())
        .filter(|&i| retained[i])
        .map(|i| moments[i].centroid())
        .collect();
    ViaSet::new("", pixels_to_units(&centers, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;

    fn disk_image(w: u32, h: u32, bg: u8, disks: &[(f64, f64, f64, u8)]) -> GrayImage {
        let mut img = GrayImage::filled(w, h, bg);
        for y in 0..h {
            for x in 0..w {
                for &(cx, cy, r, v) in disks {
                    let d2 = (x as f64 - cx) * (x as f64 - cx) + (y as f64 - cy) * (y as f64 - cy);
                    if d2 <= r * r {
                        img.put(x, y, v);
                    }
                }
            }
        }
        img
    }

    fn cfg(method: Method) -> ExtractionConfig {
        ExtractionConfig {
            method,
            pixels_per_unit: 10.0,
            ..ExtractionConfig::default()
        }
    }

    #[test]
    fn zero_sized_image_rejected() {
        let img = GrayImage::new(0, 0, Vec::new()).unwrap();
        assert!(detect_vias_threshold(&img, &cfg(Method::Threshold)).is_err());
        assert!(detect_vias_persistence(&img, &cfg(Method::Persistence)).is_err());
    }

    #[test]
    fn constant_image_has_no_vias() {
        let img = GrayImage::filled(30, 20, 10);
        assert!(detect_vias_threshold(&img, &cfg(Method::Threshold)).unwrap().is_empty());
        assert!(detect_vias_persistence(&img, &cfg(Method::Persistence)).unwrap().is_empty());
    }

    #[test]
    fn single_disk_centroid() {
        let img = disk_image(40, 40, 10, &[(20.0, 20.0, 5.0, 220)]);
        let vias = detect_vias_threshold(&img, &cfg(Method::Threshold)).unwrap();
        assert_eq!(vias.len(), 1);
        let p = vias.points()[0];
        assert!(math::abs(p.x - 2.0) <= 0.05 && math::abs(p.y - 2.0) <= 0.05, "{p:?}");
    }

    #[test]
    fn salt_noise_is_eroded() {
        let mut img = disk_image(60, 40, 10, &[(15.0, 20.0, 5.0, 220), (42.0, 18.0, 4.0, 200)]);
        for &(x, y) in &[(2u32, 2u32), (30, 35), (55, 5), (30, 3), (50, 30)] {
            img.put(x, y, 255);
        }
        let mut c = cfg(Method::Threshold);
        c.erosion_radius = 1;
        assert_eq!(detect_vias_threshold(&img, &c).unwrap().len(), 2);
        c.erosion_radius = 0;
        assert_eq!(detect_vias_threshold(&img, &c).unwrap().len(), 7);
    }

    #[test]
    fn min_blob_area_drops_small_blobs() {
        let img = disk_image(60, 40, 10, &[(15.0, 20.0, 6.0, 220), (42.0, 18.0, 2.0, 200)]);
        let mut c = cfg(Method::Threshold);
        c.erosion_radius = 0;
        assert_eq!(detect_vias_threshold(&img, &c).unwrap().len(), 2);
        c.min_blob_area = 20;
        assert_eq!(detect_vias_threshold(&img, &c).unwrap().len(), 1);
    }

    /// Two Gaussian peaks of height 200 and 180 joined by a ridge whose
    /// lowest point is 90, on a zero background.
    fn two_peaks() -> GrayImage {
        let (w, h) = (60u32, 30u32);
        let mut img = GrayImage::filled(w, h, 0);
        for y in 0..h {
            for x in 0..w {
                let g = |cx: f64, cy: f64, a: f64, s: f64| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    a * libm::exp(-d2 / (2.0 * s * s))
                };
                let v = g(18.0, 15.0, 200.0, 4.0).max(g(42.0, 15.0, 180.0, 4.0));
                // the ridge between the peaks bottoms out at 90
                let ridge = if (y as i32 - 15).abs() <= 1 && (18..=42).contains(&x) { 90.0 } else { 0.0 };
                img.put(x, y, math::round(v.max(ridge)) as u8);
            }
        }
        img
    }

    #[test]
    fn two_peak_persistence() {
        let img = two_peaks();
        let pairs = persistence_pairs(&img).unwrap();
        let mut pers: Vec<f64> = pairs.iter().map(|p| p.persistence(0)).filter(|&p| p >= 50.0).collect();
        pers.sort_by(f64::total_cmp);
        assert_eq!(pers, vec![90.0, 200.0]);
        let mut c = cfg(Method::Persistence);
        c.persistence_threshold = 50.0;
        let vias = detect_vias_persistence(&img, &c).unwrap();
        assert_eq!(vias.len(), 2);
        let p = vias.points();
        assert!(math::abs(p[0].x - 1.8) < 0.05 && math::abs(p[0].y - 1.5) < 0.05, "{p:?}");
        assert!(math::abs(p[1].x - 4.2) < 0.05 && math::abs(p[1].y - 1.5) < 0.05, "{p:?}");
    }

    #[test]
    fn persistence_is_deterministic_with_plateaus() {
        // plateaus force many equal-intensity ties
        let img = disk_image(40, 30, 5, &[(10.0, 10.0, 4.0, 150), (28.0, 18.0, 4.0, 150)]);
        let mut c = cfg(Method::Persistence);
        c.persistence_threshold = 40.0;
        let a = detect_vias_persistence(&img, &c).unwrap();
        let b = detect_vias_persistence(&img, &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn unit_conversion_round_trip() {
        let mut c = cfg(Method::Threshold);
        assert_eq!(pixels_to_units(&[ViaPoint::new(10.0, 10.0)], &c), vec![ViaPoint::new(1.0, 1.0)]);
        assert_eq!(pixels_to_units(&[ViaPoint::new(0.0, 0.0)], &c), vec![ViaPoint::new(0.0, 0.0)]);
        c.pixels_per_unit = 7.3;
        c.origin_offset = (3.25, -1.5);
        let pts = [ViaPoint::new(12.7, 3.1), ViaPoint::new(-4.0, 99.5)];
        let back = units_to_pixels(&pixels_to_units(&pts, &c), &c);
        for (p, q) in pts.iter().zip(&back) {
            assert!(math::abs(p.x - q.x) < 1e-9 && math::abs(p.y - q.y) < 1e-9);
        }
    }
}
