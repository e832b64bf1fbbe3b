// SPDX-License-Identifier: Apache-2.0

//! The binary's exit codes, caching and stage outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use viaprint::commands::{EvalSummary, VerificationSummary};
use viaprint::files;

fn viaprint(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_viaprint"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"seed = 3
[synthetic.library]
type_count = 6
widths = [10]
[synthetic.noise]
jitter_sigma = 0.05
dropout_prob = 0.05
[synthetic.dataset]
instances_per_type = 40
[representatives]
sample_size = 20
holdout_size = 10
"#;

/// Writes `config` and generates its dataset into `dir/out`.
fn setup(dir: &Path, config: &str) -> (PathBuf, PathBuf) {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    let o = viaprint(&cfg, &out, &["gen-synthetic"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (cfg, out)
}

fn run_ok(cfg: &Path, out: &Path, args: &[&str]) {
    let o = viaprint(cfg, out, args);
    assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_viaprint");
    assert_eq!(Command::new(bin).output().unwrap().status.code(), Some(1));
    assert_eq!(Command::new(bin).arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(0));
    // no output directory anywhere
    assert_eq!(Command::new(bin).arg("analyze").output().unwrap().status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&viaprint(&bad, dir.path(), &["extract"])), 1);
    std::fs::write(&bad, "[representatives]\nmajority_threshold = 0.3\n").unwrap();
    assert_eq!(code(&viaprint(&bad, dir.path(), &["build-reps"])), 1);
    std::fs::write(&bad, "").unwrap();
    assert_eq!(code(&viaprint(&bad, dir.path(), &["--workers", "0", "extract"])), 1);
    // extract without a manifest
    assert_eq!(code(&viaprint(&bad, &dir.path().join("empty"), &["extract"])), 1);
}

#[test]
fn full_pipeline_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), &format!("{SMALL}[[synthetic.dataset.swaps]]\nclaimed = \"T00\"\nactual = \"T02\"\n"));
    let stages = ["extract", "build-reps", "verify-reps", "analyze", "dont-use", "detect", "eval"];
    for s in stages {
        run_ok(&cfg, &out, &[s]);
    }
    let snapshot = |p: &Path| -> Vec<(PathBuf, Vec<u8>, std::time::SystemTime)> {
        let mut v: Vec<_> = std::fs::read_dir(p)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .map(|p| {
                let m = std::fs::metadata(&p).unwrap().modified().unwrap();
                (p.clone(), std::fs::read(&p).unwrap(), m)
            })
            .collect();
        v.sort();
        v
    };
    let before = snapshot(&out);
    for s in stages {
        let o = viaprint(&cfg, &out, &[s]);
        assert_eq!(code(&o), 0);
        assert!(String::from_utf8_lossy(&o.stdout).contains("up to date"), "{s}");
    }
    assert_eq!(before, snapshot(&out));

    let eval: EvalSummary = files::read_json(&out.join(files::EVAL_JSON)).unwrap();
    assert_eq!((eval.planted.true_positives, eval.planted.false_negatives), (1, 0));
    let verdicts = files::read_verdicts(&out.join(files::VERDICTS_CSV)).unwrap();
    assert_eq!(verdicts.len(), 240);
    let flagged: Vec<_> = verdicts.iter().filter(|v| v.kind != "Benign").collect();
    assert_eq!(flagged.len(), 1);
    assert_eq!(flagged[0].best, "T02");

    let verification: VerificationSummary = files::read_json(&out.join(files::VERIFICATION_JSON)).unwrap();
    assert!(verification.failed.is_empty());
    assert_eq!(verification.reports.len(), 6);
    let mut overlays: Vec<String> = std::fs::read_dir(out.join(files::OVERLAY_DIR))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    overlays.sort();
    assert_eq!(overlays.len(), 6);
    for (name, ty) in overlays.iter().zip(["T00", "T01", "T02", "T03", "T04", "T05"]) {
        assert!(name.starts_with(&format!("{ty}_overlay_{ty}_")) && name.ends_with(".png"), "{name}");
    }

    let top = std::fs::read_to_string(out.join(files::TOP_PAIRS_CSV)).unwrap();
    assert!(top.starts_with("rank,type_a,type_b,func_a,func_b,n_a,n_b,score\n1,"));
    // No identical pairs in a generated library without planted pairs.
    assert_eq!(std::fs::read_to_string(out.join(files::DONT_USE_TXT)).unwrap(), "");
}

#[test]
fn planted_library_dont_use_lists_planted_types() {
    let dir = tempfile::tempdir().unwrap();
    let config = format!(
        "{SMALL}[[synthetic.library.planted]]\na = 1\nb = 4\ntarget = 0.0\n[[synthetic.library.planted]]\na = 2\nb = 3\ntarget = 0.0\n"
    );
    let (cfg, out) = setup(dir.path(), &config);
    for s in ["extract", "build-reps", "analyze", "dont-use"] {
        run_ok(&cfg, &out, &[s]);
    }
    let ids = files::read_id_list(&out.join(files::DONT_USE_TXT)).unwrap();
    assert_eq!(ids, ["T01", "T02", "T03", "T04"]);
}

#[test]
fn corrupt_tile_is_a_data_error_naming_instances() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), SMALL);
    let manifest = files::load_manifest(&out.join(files::MANIFEST_JSON)).unwrap();
    let tile = &manifest.tiles[0];
    std::fs::write(out.join(&tile.image_path), b"not a png").unwrap();
    let o = viaprint(&cfg, &out, &["extract"]);
    assert_eq!(code(&o), 2);
    let victim = manifest.instances.iter().find(|i| i.tile_id == tile.tile_id).unwrap();
    assert!(stderr(&o).contains(&victim.instance_id), "{}", stderr(&o));
    let failed = files::read_error_ids(&out.join(files::EXTRACT_ERRORS_CSV)).unwrap();
    assert_eq!(failed.len(), manifest.instances.iter().filter(|i| i.tile_id == tile.tile_id).count());
    // The healthy instances were still cached.
    let cached = files::read_via_csv(&out.join(files::VIAS_CSV)).unwrap();
    assert!(!cached.contains_key(&victim.instance_id));
    assert!(!cached.is_empty());
}

#[test]
fn verification_failures_exit_3_and_rejects_rebuild() {
    let dir = tempfile::tempdir().unwrap();
    let strict = SMALL.replace("holdout_size = 10", "holdout_size = 10\nmin_match_fraction = 1.0");
    let strict = strict.replace("dropout_prob = 0.05", "dropout_prob = 0.3");
    let (cfg, out) = setup(dir.path(), &strict);
    run_ok(&cfg, &out, &["extract"]);
    run_ok(&cfg, &out, &["build-reps"]);
    let o = viaprint(&cfg, &out, &["verify-reps"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    // Cached result keeps the exit code.
    assert_eq!(code(&viaprint(&cfg, &out, &["verify-reps"])), 3);

    let rejects = dir.path().join("rejects.txt");
    std::fs::write(&rejects, "# reviewed\nT02\n").unwrap();
    let o = viaprint(&cfg, &out, &["--force", "verify-reps", "--rejects", rejects.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let summary: VerificationSummary = files::read_json(&out.join(files::VERIFICATION_JSON)).unwrap();
    assert_eq!(summary.rebuilt.get("T02"), Some(&1));
    let reps = files::load_representatives(&out).unwrap();
    let t02 = reps.iter().find(|r| r.type_id == "T02").unwrap();
    assert_eq!(t02.build_meta.attempt, 1);
    assert_eq!(t02.build_meta.majority_threshold, 0.6);
    assert!(t02.support.iter().all(|&s| s > 0.6));

    std::fs::write(&rejects, "NOPE\n").unwrap();
    let o = viaprint(&cfg, &out, &["--force", "verify-reps", "--rejects", rejects.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn single_instance_type_fails_build_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), SMALL);
    let mpath = out.join(files::MANIFEST_JSON);
    let mut manifest = files::load_manifest(&mpath).unwrap();
    let keep_one = manifest.instances.iter().position(|i| i.type_id == "T05").unwrap();
    let kept = manifest.instances[keep_one].instance_id.clone();
    manifest.instances.retain(|i| i.type_id != "T05" || i.instance_id == kept);
    files::write_json(&mpath, &manifest).unwrap();
    run_ok(&cfg, &out, &["extract"]);
    let o = viaprint(&cfg, &out, &["build-reps"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("T05"), "{}", stderr(&o));
}

#[test]
fn missing_representative_is_a_per_instance_error() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), SMALL);
    for s in ["extract", "build-reps"] {
        run_ok(&cfg, &out, &[s]);
    }
    let mut store: files::RepresentativeStore = files::read_json(&out.join(files::REPRESENTATIVES_JSON)).unwrap();
    store.remove("T03");
    files::write_json(&out.join(files::REPRESENTATIVES_JSON), &store).unwrap();
    let o = viaprint(&cfg, &out, &["detect"]);
    assert_eq!(code(&o), 2);
    let failed = files::read_error_ids(&out.join(files::DETECT_ERRORS_CSV)).unwrap();
    assert_eq!(failed.len(), 40);
    assert!(failed.iter().all(|id| id.starts_with("T03_")));
    assert_eq!(files::read_verdicts(&out.join(files::VERDICTS_CSV)).unwrap().len(), 200);
}

#[test]
fn no_swap_eval_has_undefined_fn_rate() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), SMALL);
    for s in ["extract", "build-reps", "eval"] {
        run_ok(&cfg, &out, &[s]);
    }
    let text = std::fs::read_to_string(out.join(files::EVAL_JSON)).unwrap();
    let eval: EvalSummary = serde_json::from_str(&text).unwrap();
    assert_eq!(eval.planted.planted, 0);
    assert_eq!(eval.planted.false_negative_rate, None);
    assert!(eval.planted.false_positive_rate.is_some());
    assert!(text.contains("\"false_negative_rate\": null"));
    // 6 types of one width: 15 pairs, two directions each
    assert_eq!(eval.pairs.len(), 30);
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("out");
    let o = viaprint(&cfg, &out, &["--seed", "9", "gen-synthetic", "--types", "4", "--instances-per-type", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = files::load_manifest(&out.join(files::MANIFEST_JSON)).unwrap();
    assert_eq!((m.cell_types.len(), m.instances.len()), (4, 20));
    let other = dir.path().join("other");
    let o = viaprint(&cfg, &other, &["--seed", "10", "gen-synthetic", "--types", "4", "--instances-per-type", "5"]);
    assert_eq!(code(&o), 0);
    assert_ne!(
        std::fs::read(out.join(files::LIBRARY_JSON)).unwrap(),
        std::fs::read(other.join(files::LIBRARY_JSON)).unwrap()
    );
}
