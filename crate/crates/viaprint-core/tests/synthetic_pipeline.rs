// SPDX-License-Identifier: Apache-2.0

//! Render, extract, build and classify on generated data, checked against
//! the generator's ground truth.

use viaprint_core::detection::{classify_in_library, DetectionConfig, VerdictKind};
use viaprint_core::extract::{ExtractionConfig, Method};
use viaprint_core::ingest::{default_margin, extract_instance, CellInstance};
use viaprint_core::representative::{build_representative, fit_boxes, RepresentativeConfig};
use viaprint_core::rng;
use viaprint_core::synthetic::{
    gen_dataset, gen_library, render_instance, DatasetSpec, NoiseSpec, PlantedSwap, SynthLibrarySpec,
};
use viaprint_core::{match_vias, Orientation, Translation, ViaSet};

const R: f64 = 0.5;

fn small_library() -> viaprint_core::synthetic::SynthLibrary {
    gen_library(&SynthLibrarySpec {
        seed: 3,
        type_count: 6,
        widths: vec![10],
        ..SynthLibrarySpec::default()
    })
    .unwrap()
}

#[test]
fn clean_extraction_recovers_truth_in_every_orientation() {
    let lib = small_library();
    let noise = NoiseSpec::default();
    for method in [Method::Threshold, Method::Persistence] {
        let cfg = ExtractionConfig {
            method,
            ..ExtractionConfig::default()
        };
        for ty in &lib.types {
            let mut canon: Vec<ViaSet> = Vec::new();
            for (k, o) in Orientation::ALL.into_iter().enumerate() {
                let mut rng = rng::stream(1, k as u64);
                let r = render_instance(&ty.pattern, &ty.info, &noise, o, 8.0, "i", &mut rng).unwrap();
                let manifest = viaprint_core::ingest::DatasetManifest {
                    node: DatasetSpec::default().node,
                    tiles: vec![viaprint_core::ingest::TileRef {
                        tile_id: r.record.tile_id.clone(),
                        image_path: "x.png".into(),
                    }],
                    cell_types: vec![ty.info.clone()],
                    instances: vec![r.record.clone()],
                };
                let inst = extract_instance(&manifest, &r.image, &r.record, &cfg, 8).unwrap();
                let truth = r.truth.observed("t");
                assert_eq!(inst.vias.len(), truth.len(), "{method:?} {o:?} {}", ty.info.type_id);
                let m = match_vias(&truth, &inst.vias, Translation::ZERO, R / 4.0);
                assert_eq!(m.match_count, truth.len());
                canon.push(inst.vias);
            }
            for c in &canon[1..] {
                let m = match_vias(&canon[0], c, Translation::ZERO, R / 4.0);
                assert_eq!(m.match_count, canon[0].len());
            }
        }
    }
}

#[test]
fn tile_dataset_end_to_end() {
    let lib = small_library();
    let noise = NoiseSpec {
        jitter_sigma: 0.05,
        dropout_prob: 0.05,
        offset_range: 0.2,
        intensity_noise_sigma: 3.0,
        ..NoiseSpec::default()
    };
    let spec = DatasetSpec {
        seed: 5,
        instances_per_type: 30,
        swaps: vec![PlantedSwap {
            claimed: "T01".into(),
            actual: "T04".into(),
        }],
        ..DatasetSpec::default()
    };
    let ds = gen_dataset(&lib, &noise, &spec).unwrap();
    let margin = default_margin(&ds.manifest.node);
    let cfg = ExtractionConfig::default();
    let instances: Vec<CellInstance> = ds
        .manifest
        .instances
        .iter()
        .map(|rec| {
            let t = ds.manifest.tiles.iter().position(|t| t.tile_id == rec.tile_id).unwrap();
            extract_instance(&ds.manifest, &ds.tiles[t], rec, &cfg, margin).unwrap()
        })
        .collect();

    // Extraction agrees with the rendered truth.
    for inst in &instances {
        let t = &ds.truth[&inst.instance_id];
        let truth = ViaSet::new("t", t.vias.iter().chain(&t.spurious).copied()).unwrap();
        let m = match_vias(&truth, &inst.vias, Translation::ZERO, R / 4.0);
        assert_eq!(m.match_count, truth.len(), "{}", inst.instance_id);
    }

    let rcfg = RepresentativeConfig::default();
    let mut reps: Vec<_> = ds
        .manifest
        .cell_types
        .iter()
        .map(|c| {
            let own: Vec<CellInstance> = instances.iter().filter(|i| i.type_id == c.type_id).cloned().collect();
            build_representative(c, &own, &rcfg).unwrap()
        })
        .collect();
    fit_boxes(&mut reps, R / 2.0);
    for (rep, ty) in reps.iter().zip(&lib.types) {
        assert_eq!(rep.vias.len(), ty.pattern.len(), "{}", rep.type_id);
    }

    let dcfg = DetectionConfig::default();
    let mut flagged = Vec::new();
    for inst in &instances {
        let v = classify_in_library(inst, &reps, &dcfg).unwrap();
        if v.flagged {
            flagged.push((inst.instance_id.clone(), v.kind, v.best.clone()));
        }
    }
    assert_eq!(flagged.len(), 1, "{flagged:?}");
    let (id, kind, best) = &flagged[0];
    assert_eq!(ds.truth[id].true_type, "T04");
    assert_eq!(*kind, VerdictKind::Trojan);
    assert_eq!(best, &vec!["T04".to_string()]);
}
