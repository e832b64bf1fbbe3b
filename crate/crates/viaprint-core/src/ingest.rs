// SPDX-License-Identifier: Apache-2.0

//! Dataset manifest types, instance cropping and per-instance via extraction.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{detect_vias, ExtractionConfig};
use crate::geometry::{Orientation, ViaSet, MATCHING_RADIUS};
use crate::image::GrayImage;

/// Technology-node parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    pub unit_length_nm: f64,
    #[serde(default = "default_radius")]
    pub matching_radius: f64,
    pub pixels_per_unit: f64,
}

fn default_radius() -> f64 {
    MATCHING_RADIUS
}

impl NodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.unit_length_nm > 0.0) {
            return Err(Error::InvalidInput(alloc::format!(
                "node `{}`: unit_length_nm must be positive",
                self.name
            )));
        }
        if !(self.pixels_per_unit > 0.0) {
            return Err(Error::InvalidInput(alloc::format!(
                "node `{}`: pixels_per_unit must be positive",
                self.name
            )));
        }
        if self.matching_radius != MATCHING_RADIUS {
            return Err(Error::InvalidInput(alloc::format!(
                "node `{}`: matching_radius is fixed at half a unit, got {}",
                self.name,
                self.matching_radius
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileRef {
    pub tile_id: String,
    pub image_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellTypeInfo {
    pub type_id: String,
    /// Logic function shared by drive-strength variants, e.g. `XOR`.
    pub function_class: String,
    /// Width in units.
    pub width: u32,
    /// Height in units.
    pub height: u32,
}

/// Pixel bounding box, serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl From<[i64; 4]> for BBox {
    fn from([x, y, w, h]: [i64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub type_id: String,
    pub tile_id: String,
    pub bbox: BBox,
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub node: NodeConfig,
    pub tiles: Vec<TileRef>,
    pub cell_types: Vec<CellTypeInfo>,
    pub instances: Vec<InstanceRecord>,
}

impl DatasetManifest {
    /// Checks id uniqueness, referential integrity and field ranges.
    pub fn validate(&self) -> Result<()> {
        self.node.validate()?;
        let mut tiles = BTreeSet::new();
        for t in &self.tiles {
            if !tiles.insert(t.tile_id.as_str()) {
                return Err(Error::DuplicateId {
                    kind: "tile",
                    id: t.tile_id.clone(),
                });
            }
        }
        let mut types = BTreeSet::new();
        for c in &self.cell_types {
            if !types.insert(c.type_id.as_str()) {
                return Err(Error::DuplicateId {
                    kind: "cell type",
                    id: c.type_id.clone(),
                });
            }
            if c.width == 0 || c.height == 0 {
                return Err(Error::InvalidInput(alloc::format!(
                    "cell type `{}` must have width and height of at least 1",
                    c.type_id
                )));
            }
        }
        let mut ids = BTreeSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.instance_id.as_str()) {
                return Err(Error::DuplicateId {
                    kind: "instance",
                    id: inst.instance_id.clone(),
                });
            }
            if !tiles.contains(inst.tile_id.as_str()) {
                return Err(Error::DanglingReference {
                    kind: "tile",
                    id: inst.tile_id.clone(),
                    instance_id: inst.instance_id.clone(),
                });
            }
            if !types.contains(inst.type_id.as_str()) {
                return Err(Error::DanglingReference {
                    kind: "cell type",
                    id: inst.type_id.clone(),
                    instance_id: inst.instance_id.clone(),
                });
            }
            if inst.bbox.w <= 0 || inst.bbox.h <= 0 {
                return Err(Error::InvalidInput(alloc::format!(
                    "instance `{}` has an empty bounding box",
                    inst.instance_id
                )));
            }
        }
        Ok(())
    }

    pub fn cell_type(&self, type_id: &str) -> Option<&CellTypeInfo> {
        self.cell_types.iter().find(|c| c.type_id == type_id)
    }

    pub fn tile(&self, tile_id: &str) -> Option<&TileRef> {
        self.tiles.iter().find(|t| t.tile_id == tile_id)
    }
}

/// A cropped instance image and the tile position of its top-left pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub image: GrayImage,
    pub origin: (u32, u32),
}

impl Crop {
    /// Position of the un-margined bbox corner inside the crop, in pixels.
    pub fn bbox_offset(&self, bbox: &BBox) -> (f64, f64) {
        (
            (bbox.x - self.origin.0 as i64) as f64,
            (bbox.y - self.origin.1 as i64) as f64,
        )
    }
}

/// Cuts `bbox` grown by `margin` pixels on every side, clamped to the tile.
pub fn crop_instance(tile: &GrayImage, record: &InstanceRecord, margin: u32) -> Result<Crop> {
    let b = record.bbox;
    let m = margin as i64;
    let (tw, th) = (tile.width() as i64, tile.height() as i64);
    let x0 = (b.x - m).max(0);
    let y0 = (b.y - m).max(0);
    let x1 = (b.x + b.w + m).min(tw);
    let y1 = (b.y + b.h + m).min(th);
    if b.w <= 0 || b.h <= 0 || b.x >= tw || b.y >= th || b.x + b.w <= 0 || b.y + b.h <= 0 || x1 <= x0 || y1 <= y0 {
        return Err(Error::BoxOutsideTile(record.instance_id.clone()));
    }
    Ok(Crop {
        image: tile.sub_image(x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32),
        origin: (x0 as u32, y0 as u32),
    })
}

/// Vias of one cell instance in canonical orientation and local cell units.
#[derive(Debug, Clone, PartialEq)]
pub struct CellInstance {
    pub instance_id: String,
    pub type_id: String,
    pub vias: ViaSet,
}

/// Safety margin of one unit, in pixels.
pub fn default_margin(node: &NodeConfig) -> u32 {
    libm::ceil(node.pixels_per_unit) as u32
}

/// Crop, detect and canonicalize one instance.
///
/// Coordinates are anchored at the un-margined bbox corner, so vias picked up
/// from neighboring cells in the margin land outside `[0, width] x [0, height]`.
pub fn extract_instance(
    manifest: &DatasetManifest,
    tile: &GrayImage,
    record: &InstanceRecord,
    cfg: &ExtractionConfig,
    margin: u32,
) -> Result<CellInstance> {
    let cell = manifest
        .cell_type(&record.type_id)
        .ok_or_else(|| Error::DanglingReference {
            kind: "cell type",
            id: record.type_id.clone(),
            instance_id: record.instance_id.clone(),
        })?;
    let crop = crop_instance(tile, record, margin)?;
    let local_cfg = ExtractionConfig {
        pixels_per_unit: manifest.node.pixels_per_unit,
        origin_offset: crop.bbox_offset(&record.bbox),
        ..cfg.clone()
    };
    let observed = detect_vias(&crop.image, &local_cfg)?;
    let vias = record
        .orientation
        .apply_set(&observed, cell.width as f64, cell.height as f64)
        .with_source(record.instance_id.clone());
    Ok(CellInstance {
        instance_id: record.instance_id.clone(),
        type_id: record.type_id.clone(),
        vias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn record(bbox: [i64; 4]) -> InstanceRecord {
        InstanceRecord {
            instance_id: "i0".into(),
            type_id: "T".into(),
            tile_id: "t0".into(),
            bbox: bbox.into(),
            orientation: Orientation::R0,
        }
    }

    fn manifest() -> DatasetManifest {
        DatasetManifest {
            node: NodeConfig {
                name: "n".into(),
                unit_length_nm: 100.0,
                matching_radius: 0.5,
                pixels_per_unit: 10.0,
            },
            tiles: vec![
                TileRef { tile_id: "t0".into(), image_path: "a.png".into() },
                TileRef { tile_id: "t1".into(), image_path: "b.png".into() },
            ],
            cell_types: vec![CellTypeInfo {
                type_id: "T".into(),
                function_class: "INV".into(),
                width: 4,
                height: 3,
            }],
            instances: vec![record([0, 0, 40, 30])],
        }
    }

    #[test]
    fn valid_manifest() {
        let m = manifest();
        m.validate().unwrap();
        assert_eq!(m.tiles.len(), 2);
    }

    #[test]
    fn dangling_tile_is_named() {
        let mut m = manifest();
        m.instances[0].tile_id = "nope".into();
        match m.validate() {
            Err(Error::DanglingReference { kind, id, .. }) => {
                assert_eq!(kind, "tile");
                assert_eq!(id, "nope");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dangling_type_and_duplicates() {
        let mut m = manifest();
        m.instances[0].type_id = "X".into();
        assert!(matches!(m.validate(), Err(Error::DanglingReference { kind: "cell type", .. })));
        let mut m = manifest();
        m.instances.push(m.instances[0].clone());
        assert!(matches!(m.validate(), Err(Error::DuplicateId { kind: "instance", .. })));
    }

    #[test]
    fn crop_plain_and_clamped() {
        let tile = GrayImage::filled(100, 80, 0);
        let c = crop_instance(&tile, &record([10, 10, 20, 20]), 0).unwrap();
        assert_eq!((c.image.width(), c.image.height()), (20, 20));
        assert_eq!(c.origin, (10, 10));

        let c = crop_instance(&tile, &record([0, 0, 20, 20]), 5).unwrap();
        assert_eq!((c.image.width(), c.image.height()), (25, 25));
        assert_eq!(c.origin, (0, 0));
        assert_eq!(c.bbox_offset(&record([0, 0, 20, 20]).bbox), (0.0, 0.0));

        let c = crop_instance(&tile, &record([90, 70, 20, 20]), 5).unwrap();
        assert_eq!((c.image.width(), c.image.height()), (15, 15));
        assert_eq!(c.bbox_offset(&record([90, 70, 20, 20]).bbox), (5.0, 5.0));
    }

    #[test]
    fn crop_outside_tile_rejected() {
        let tile = GrayImage::filled(100, 80, 0);
        assert!(matches!(
            crop_instance(&tile, &record([200, 10, 20, 20]), 3),
            Err(Error::BoxOutsideTile(_))
        ));
        assert!(crop_instance(&tile, &record([-30, 10, 20, 20]), 3).is_err());
    }

    #[test]
    fn empty_cell_yields_no_vias() {
        let m = manifest();
        let tile = GrayImage::filled(60, 50, 20);
        let inst = extract_instance(&m, &tile, &m.instances[0], &ExtractionConfig::default(), 10).unwrap();
        assert!(inst.vias.is_empty());
        assert_eq!(inst.vias.source(), "i0");
    }
}
