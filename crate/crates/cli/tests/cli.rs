use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::io::Write;

use vascsynth::io::manifest::{DatasetManifest, MANIFEST_FILE};
use vascsynth::io::nifti::{read_volume, write_volume, VolumeData};
use vascsynth::io::stream::{patch_file_name, write_patch_record};
use vascsynth::volume::{IntensityVolume, LabelVolume, Volume};

fn vascsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vascsynth")).arg("--quiet").args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn labels(path: &Path, data: Vec<i32>) {
    let v: LabelVolume = Volume::from_vec([data.len(), 1, 1], 20.0, data).unwrap();
    write_volume(path, &v.into()).unwrap();
}

const SMALL: &str = "[labels]\nvolume_shape = [32, 32, 32]\ntree_density = { family = \"uniform\", a = 20.0, b = 40.0 }\n";

#[test]
fn evaluate_reports() {
    let d = tempfile::tempdir().unwrap();
    let (pred, truth) = (d.path().join("pred.nii"), d.path().join("truth.nii"));
    labels(&pred, vec![1, 1, 0, 0]);
    labels(&truth, vec![1, 0, 1, 0]);

    let report = d.path().join("r.json");
    let out = vascsynth(&["evaluate", "--pred", p(&pred), "--truth", p(&truth), "--out", p(&report), "--kappa"]);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["dsc"], 0.5);
    assert_eq!(json["counts"]["fn"], 1);
    assert_eq!(json["kappa"], 0.0);

    let csv = d.path().join("r.csv");
    assert!(vascsynth(&["evaluate", "--pred", p(&truth), "--truth", p(&truth), "--out", p(&csv)]).status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("1,0,0,,"), "{text}");
}

#[test]
fn evaluate_errors() {
    let d = tempfile::tempdir().unwrap();
    let pred = d.path().join("pred.nii");
    labels(&pred, vec![1, 1, 0, 0]);
    let report = d.path().join("r.json");
    let out = vascsynth(&["evaluate", "--pred", p(&pred), "--truth", p(&d.path().join("missing.nii")), "--out", p(&report)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!report.exists());

    let other = d.path().join("other.nii");
    labels(&other, vec![1, 1, 0]);
    let out = vascsynth(&["evaluate", "--pred", p(&pred), "--truth", p(&other), "--out", p(&report)]);
    assert_eq!(out.status.code(), Some(3));

    let junk = d.path().join("junk.nii");
    std::fs::write(&junk, b"not a volume at all").unwrap();
    let out = vascsynth(&["evaluate", "--pred", p(&pred), "--truth", p(&junk), "--out", p(&report)]);
    assert_eq!(out.status.code(), Some(3));
}

fn constant_patch(value: f32) -> Vec<f32> {
    vec![value; 8 * 8 * 8]
}

#[test]
fn fuse_directory_and_stdin() {
    let d = tempfile::tempdir().unwrap();
    let patches = d.path().join("patches");
    std::fs::create_dir(&patches).unwrap();
    let origins: Vec<[usize; 3]> = (0..27).map(|i| [4 * (i % 3), 4 * ((i / 3) % 3), 4 * (i / 9)]).collect();
    for o in &origins {
        let v = IntensityVolume::from_vec([8, 8, 8], 20.0, constant_patch(0.7)).unwrap();
        write_volume(&patches.join(patch_file_name(*o, false)), &v.into()).unwrap();
    }
    let fused = d.path().join("fused.nii");
    let out = vascsynth(&[
        "fuse", "--patches", p(&patches), "--shape", "16", "--patch-size", "8", "--step", "4", "--out", p(&fused), "--threshold", "0.5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = read_volume(&fused).unwrap().1.into_intensity();
    assert!(v.data().iter().all(|&x| (x - 0.7).abs() < 1e-7));
    let mask = read_volume(&d.path().join("fused_mask.nii")).unwrap().1;
    assert!(matches!(mask, VolumeData::Labels(m) if m.data().iter().all(|&x| x == 1)));

    let mut stream = Vec::new();
    for o in &origins {
        write_patch_record(&mut stream, *o, &constant_patch(0.25)).unwrap();
    }
    let fused2 = d.path().join("fused2.nii");
    let mut child = Command::new(env!("CARGO_BIN_EXE_vascsynth"))
        .args(["--quiet", "fuse", "--stdin", "--shape", "16x16x16", "--patch-size", "8", "--step", "4", "--out", p(&fused2)])
        .stdin(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(&stream).unwrap();
    assert!(child.wait().unwrap().success());
    let v = read_volume(&fused2).unwrap().1.into_intensity();
    assert!(v.data().iter().all(|&x| (x - 0.25).abs() < 1e-7));
}

#[test]
fn fuse_reports_gaps() {
    let d = tempfile::tempdir().unwrap();
    let patches = d.path().join("patches");
    std::fs::create_dir(&patches).unwrap();
    let v = IntensityVolume::from_vec([8, 8, 8], 20.0, constant_patch(0.5)).unwrap();
    write_volume(&patches.join(patch_file_name([0, 0, 0], false)), &v.into()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vascsynth"))
        .args(["fuse", "--patches", p(&patches), "--shape", "12x8x8", "--patch-size", "8", "--step", "4", "--out", p(&d.path().join("f.nii"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no patch") && err.contains("[8, 0, 0]"), "{err}");
}

#[test]
fn components_summary() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("m.nii");
    labels(&input, vec![1, 1, 1, 0, 1, 0, 1, 1]);
    let out_path = d.path().join("cc.nii");
    let out = vascsynth(&["components", "--input", p(&input), "--out", p(&out_path), "--connectivity", "6"]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["sizes"], serde_json::json!([3, 2, 1]));
    let cc = read_volume(&out_path).unwrap().1;
    assert!(matches!(cc, VolumeData::Labels(v) if v.data() == [1, 1, 1, 0, 3, 0, 2, 2]));

    let bad = vascsynth(&["components", "--input", p(&input), "--out", p(&out_path), "--connectivity", "8"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn staged_generation_matches_one_shot() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let (one, staged) = (d.path().join("one"), d.path().join("staged"));
    let common = ["--seed", "3", "--n", "2", "--workers", "2", "--config", p(&cfg)];
    assert!(vascsynth(&[&["gen-dataset", "--out", p(&one)][..], &common].concat()).status.success());
    assert!(vascsynth(&[&["gen-labels", "--out", p(&staged)][..], &common].concat()).status.success());
    assert!(!staged.join("images").exists());
    let out = vascsynth(&["gen-images", "--from-manifest", p(&staged.join(MANIFEST_FILE)), "--config", p(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = DatasetManifest::load(&one.join(MANIFEST_FILE)).unwrap();
    let b = DatasetManifest::load(&staged.join(MANIFEST_FILE)).unwrap();
    assert_eq!(a, b);
    assert!(b.verify(&staged).is_empty());
}

#[test]
fn generation_errors() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("ds");
    let cfg = d.path().join("bad.toml");
    std::fs::write(&cfg, "[labels]\nno_such_key = 1\n").unwrap();
    let r = vascsynth(&["gen-dataset", "--seed", "1", "--n", "1", "--out", p(&out), "--config", p(&cfg)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.join(MANIFEST_FILE).exists());

    assert_eq!(vascsynth(&["gen-dataset", "--seed", "1", "--n", "1", "--out", p(&out), "--preset", "Q"]).status.code(), Some(1));
    assert_eq!(vascsynth(&["gen-dataset", "--n", "1", "--out", p(&out)]).status.code(), Some(1));
    assert_eq!(vascsynth(&["gen-dataset", "--seed", "1", "--n", "0", "--out", p(&out)]).status.code(), Some(1));
    assert_eq!(vascsynth(&["gen-dataset", "--seed", "1", "--n", "1", "--workers", "0", "--out", p(&out)]).status.code(), Some(1));
    assert_eq!(vascsynth(&["gen-dataset", "--bogus"]).status.code(), Some(1));
    assert_eq!(vascsynth(&["gen-dataset", "--seed", "1", "--n", "1", "--out", p(&out), "--config", p(&d.path().join("nope.toml"))]).status.code(), Some(2));

    let file = d.path().join("file");
    std::fs::write(&file, b"x").unwrap();
    let r = vascsynth(&["gen-dataset", "--seed", "1", "--n", "1", "--out", p(&file.join("sub"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&r.stderr).is_empty());
}

#[test]
fn shipped_presets_match_builtins() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let names = ["A", "B", "C", "D", "E", "F", "G", "H", "simple"];
    for name in names {
        let file = if name == "simple" { "simple.toml".to_string() } else { format!("ablate-{name}.toml") };
        let from_file = vascsynth::io::config::parse_config(&dir.join(file), None).unwrap();
        let (labels, images) = vascsynth::io::config::preset(name).unwrap();
        assert_eq!((from_file.labels, from_file.images), (labels, images), "preset {name}");
    }
    let shown = vascsynth(&["show-config", "--preset", "H"]);
    assert!(shown.status.success());
    let text = String::from_utf8(shown.stdout).unwrap();
    assert!(text.contains("enable_banding = false"));
}
