use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--set",
    "d_model=8",
    "--set",
    "n_heads=2",
    "--set",
    "d_head=4",
    "--set",
    "d_feed=16",
    "--mode",
    "apnt*",
];

fn apnt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apnt"))
        .arg("-q")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "{}\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn synth(dir: &Path, name: &str, bands: &str) -> PathBuf {
    let out = dir.join(name);
    ok(apnt(&[
        "synth",
        "--classes",
        "4",
        "--bands",
        bands,
        "--grid",
        "2x2",
        "--size",
        "40",
        "--seed",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]));
    out
}

fn train(scene: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--target",
        scene.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(apnt(&args))
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
}

#[test]
fn synth_is_deterministic_and_loadable() {
    let dir = TempDir::new().unwrap();
    let a = synth(dir.path(), "a.hsic", "16");
    let b = synth(dir.path(), "b.hsic", "16");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let (cube, labels) = apnt::hsi_data::load_cube(&a).unwrap();
    assert_eq!((cube.width(), cube.height(), cube.bands()), (40, 40, 16));
    assert_eq!(labels.present_classes(), vec![1, 2, 3, 4]);
}

#[test]
fn synth_rejects_small_grids() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.hsic");
    let o = apnt(&[
        "synth",
        "--classes",
        "5",
        "--bands",
        "8",
        "--grid",
        "2x2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("cannot hold 5 classes"),
        "{}",
        stderr(&o)
    );
    assert!(!out.exists());
    let o = apnt(&["synth", "--classes", "2", "--bands", "8", "--grid", "2by2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_logs_every_iteration() {
    let dir = TempDir::new().unwrap();
    let scene = synth(dir.path(), "s.hsic", "16");
    let log = dir.path().join("train.log");
    let out = train(
        &scene,
        &dir.path().join("m.ck"),
        &["--iterations", "300", "--log", log.to_str().unwrap()],
    );
    assert_eq!(field(&out, "iterations"), "300");
    let text = fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 300);
    assert!(lines[0].starts_with("1\ttarget\t"));
    assert!(lines[299].starts_with("300\ttarget\t"));
}

#[test]
fn same_seed_same_checkpoint_and_mix_modes_differ() {
    let dir = TempDir::new().unwrap();
    let scene = synth(dir.path(), "s.hsic", "16");
    let run = |name: &str, mix: &str| {
        let path = dir.path().join(name);
        train(
            &scene,
            &path,
            &["--iterations", "4", "--seed", "0", "--mix", mix],
        );
        fs::read(path).unwrap()
    };
    let t1 = run("t1.ck", "transmix");
    let t2 = run("t2.ck", "transmix");
    let c = run("c.ck", "cutmix");
    assert_eq!(t1, t2);
    assert_ne!(t1, c);
}

#[test]
fn resumed_training_matches_one_run() {
    let dir = TempDir::new().unwrap();
    let scene = synth(dir.path(), "s.hsic", "16");
    let whole = dir.path().join("whole.ck");
    let half = dir.path().join("half.ck");
    let rest = dir.path().join("rest.ck");
    let log = dir.path().join("log.tsv");
    train(&scene, &whole, &["--iterations", "8"]);
    train(
        &scene,
        &half,
        &["--iterations", "4", "--log", log.to_str().unwrap()],
    );
    train(
        &scene,
        &rest,
        &[
            "--iterations",
            "8",
            "--resume",
            half.to_str().unwrap(),
            "--log",
            log.to_str().unwrap(),
        ],
    );
    assert_eq!(fs::read(whole).unwrap(), fs::read(rest).unwrap());
    assert_eq!(fs::read_to_string(log).unwrap().lines().count(), 8);
}

#[test]
fn eval_report_and_map() {
    let dir = TempDir::new().unwrap();
    let scene = synth(dir.path(), "s.hsic", "16");
    let ck = dir.path().join("m.ck");
    let map = dir.path().join("map.ppm");
    let report = dir.path().join("report.txt");
    train(&scene, &ck, &["--iterations", "5"]);
    let out = ok(apnt(&[
        "eval",
        "--target",
        scene.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--map",
        map.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]));
    for key in ["OA", "AA", "Kappa", "boundary_OA"] {
        let v: f64 = field(&out, key).parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert_eq!(fs::read_to_string(report).unwrap(), out);
    let ppm = fs::read(&map).unwrap();
    let header = b"P6\n40 40\n255\n";
    assert_eq!(&ppm[..header.len()], header);
    assert_eq!(ppm.len(), header.len() + 40 * 40 * 3);

    let alone = dir.path().join("alone.ppm");
    ok(apnt(&[
        "map",
        "--target",
        scene.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        alone.to_str().unwrap(),
    ]));
    assert_eq!(fs::read(alone).unwrap(), ppm);
}

#[test]
fn boundary_accuracy_is_na_without_boundary_patches() {
    let dir = TempDir::new().unwrap();
    let scene = synth(dir.path(), "s.hsic", "16");
    let ck = dir.path().join("p1.ck");
    // single-pixel patches never see a neighbour
    train(
        &scene,
        &ck,
        &[
            "--iterations",
            "3",
            "--mix",
            "none",
            "--set",
            "patch_size=1",
        ],
    );
    let out = ok(apnt(&[
        "eval",
        "--target",
        scene.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
    ]));
    assert_eq!(field(&out, "boundary_OA"), "n/a");
    assert_eq!(field(&out, "boundary_samples"), "0");
}

#[test]
fn seed_lists_report_mean_and_spread() {
    let dir = TempDir::new().unwrap();
    let scene = synth(dir.path(), "s.hsic", "16");
    let mut args = vec![
        "eval",
        "--target",
        scene.to_str().unwrap(),
        "--seeds",
        "0..1",
        "--iterations",
        "3",
    ];
    args.extend_from_slice(SMALL);
    let out = ok(apnt(&args));
    assert!(out.contains("seed 0: OA "), "{out}");
    assert!(out.contains("seed 1: OA "), "{out}");
    assert_eq!(field(&out, "seeds"), "0,1");
    assert!(field(&out, "OA").contains(" ± "));
}

#[test]
fn error_exit_codes() {
    let dir = TempDir::new().unwrap();
    let scene = synth(dir.path(), "s.hsic", "16");
    let other = synth(dir.path(), "o.hsic", "12");
    let ck = dir.path().join("m.ck");
    let s = scene.to_str().unwrap();

    // APNT without a source scene
    let o = apnt(&[
        "train",
        "--target",
        s,
        "--out",
        ck.to_str().unwrap(),
        "--iterations",
        "1200",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("source"), "{}", stderr(&o));

    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "d_modle = 8\n").unwrap();
    let o = apnt(&[
        "train",
        "--target",
        s,
        "--out",
        ck.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("d_modle"));

    train(&scene, &ck, &["--iterations", "2"]);
    let o = apnt(&[
        "eval",
        "--target",
        other.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("bands"));

    let missing = dir.path().join("missing.hsic");
    let o = apnt(&[
        "eval",
        "--target",
        missing.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(apnt(&["--help"]).status.code(), Some(0));
}

#[test]
fn convert_packs_npy_arrays() {
    use ndarray::{Array2, Array3};
    let dir = TempDir::new().unwrap();
    let cube = Array3::from_shape_fn((3, 4, 2), |(r, c, b)| (r * 100 + c * 10 + b) as f64);
    let labels = Array2::from_shape_fn((3, 4), |(r, c)| ((r + c) % 3) as i64);
    let cube_path = dir.path().join("cube.npy");
    let label_path = dir.path().join("labels.npy");
    ndarray_npy::write_npy(&cube_path, &cube).unwrap();
    ndarray_npy::write_npy(&label_path, &labels).unwrap();
    let out = dir.path().join("scene.hsic");
    ok(apnt(&[
        "convert",
        "--cube",
        cube_path.to_str().unwrap(),
        "--labels",
        label_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let (c, l) = apnt::hsi_data::load_cube(&out).unwrap();
    assert_eq!((c.height(), c.width(), c.bands()), (3, 4, 2));
    assert_eq!(c.spectrum(2, 3), &[230.0, 231.0]);
    assert_eq!(l.get(1, 2), 0);
    assert_eq!(l.get(2, 3), 2);

    ndarray_npy::write_npy(&label_path, &Array2::<i64>::from_elem((2, 4), 1)).unwrap();
    let o = apnt(&[
        "convert",
        "--cube",
        cube_path.to_str().unwrap(),
        "--labels",
        label_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
