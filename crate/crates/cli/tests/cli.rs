use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use heightbev::bevgrid::{GridSpec, HeightMap};
use heightbev::geometry::{CameraModel, WorldPoint};
use heightbev::pgm::GrayImage;
use heightbev::predictor::PredictorParams;
use heightbev::synthscene::{generate, Scene, SIGNATURE_CHANNELS};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heightbev")).args(args).output().expect("binary runs")
}

fn stderr_lines(o: &Output) -> usize {
    String::from_utf8_lossy(&o.stderr).lines().count()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_grid() -> GridSpec {
    GridSpec::ego_square(48)
}

#[test]
fn invalid_input_exits_with_a_one_line_diagnostic() {
    let o = run(&["bounds", "--nope"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_lines(&o), 1);
    let o = run(&["bounds", "--calib", "/definitely/missing.json", "--eps", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_lines(&o), 1);
    let o = run(&["eval", "--scenes", "/definitely/missing"]);
    assert_eq!(o.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("scene.json");
    fs::write(&bad, "{ not json").unwrap();
    let o = run(&["gtmap", "--scene", p(&bad), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_lines(&o), 1);
}

#[test]
fn bounds_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cam = CameraModel::looking_along(900.0, 870.0, 640.0, 360.0, 1280, 720, WorldPoint::new(0.0, 0.0, 0.0), 0.3).unwrap();
    let calib = dir.path().join("cam.json");
    fs::write(&calib, serde_json::to_string(&cam).unwrap()).unwrap();
    let o = run(&["bounds", "--calib", p(&calib), "--eps", "0.8", "--sweep", "12"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<f64>> =
        text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 12);
    // principal point first: the depth bound is eps itself
    assert_eq!(rows[0][3], 0.8);
    for r in &rows {
        let (v, depth, height, emp_d, emp_h, ratio) = (r[1], r[3], r[4], r[5], r[6], r[7]);
        assert!(emp_d / depth >= 0.99 && emp_d / depth <= 1.0);
        if height > 0.0 {
            assert!(emp_h / height >= 0.99 && emp_h / height <= 1.0);
        }
        assert!((ratio - (v - 360.0).abs() / 870.0).abs() < 1e-12);
    }
}

#[test]
fn gtmap_outputs_reparse() {
    let dir = tempfile::tempdir().unwrap();
    let g = small_grid();
    let mut scene = generate(21, 5, &g).unwrap();
    let path = dir.path().join("scene.json");
    fs::write(&path, scene.to_json()).unwrap();
    let out = dir.path().join("maps");
    let o = run(&["gtmap", "--scene", p(&path), "--lidar", "--cells", "48", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let read = |stem: &str| HeightMap::from_csv(g, &fs::read_to_string(out.join(format!("{stem}.csv"))).unwrap()).unwrap();
    let (boxes, lidar, fused) = (read("boxes"), read("lidar"), read("fused"));
    for k in 0..g.num_cells() {
        let src = if boxes.indicator()[k] { &boxes } else { &lidar };
        assert_eq!((fused.indicator()[k], fused.y()[k], fused.h()[k]), (src.indicator()[k], src.y()[k], src.h()[k]));
    }
    let img = GrayImage::decode(&fs::read(out.join("fused.pgm")).unwrap()).unwrap();
    for k in 0..g.num_cells() {
        let (i, j) = g.cell_of(k);
        assert_eq!(img.get(i, g.cells_z - 1 - j), fused.gray_value(k));
    }

    scene.boxes.clear();
    fs::write(&path, scene.to_json()).unwrap();
    let o = run(&["gtmap", "--scene", p(&path), "--cells", "48", "--out", p(&out)]);
    assert!(o.status.success());
    assert_eq!(read("boxes").occupied_count(), 0);
    let img = GrayImage::decode(&fs::read(out.join("boxes.pgm")).unwrap()).unwrap();
    assert!(img.pixels.iter().all(|&v| v == 0));
}

#[test]
fn train_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let o = run(&["generate", "--out", p(&scenes), "--count", "2", "--seed", "5", "--cells", "48"]);
    assert!(o.status.success());
    let train = |tag: &str, lr: &str| {
        let ckpt = dir.path().join(format!("{tag}.ckpt"));
        let log = dir.path().join(format!("{tag}.csv"));
        let o = run(&[
            "train", "--scenes", p(&scenes), "--epochs", "3", "--seed", "4", "--lr", lr, "--cells", "48",
            "--out", p(&ckpt), "--log", p(&log),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (fs::read(ckpt).unwrap(), fs::read_to_string(log).unwrap())
    };
    let (a, log_a) = train("a", "0.004");
    let (b, log_b) = train("b", "0.004");
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.lines().count(), 4);

    let (zero, _) = train("zero", "0");
    let (params, header) = PredictorParams::read_checkpoint(&zero[..]).unwrap();
    assert_eq!(header.seed, 4);
    let init = PredictorParams::random(params.num_layers(), SIGNATURE_CHANNELS, params.hidden(), 4);
    assert_eq!(params, init);

    let ckpt = dir.path().join("a.ckpt");
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--scenes", p(&scenes), "--cells", "48"];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["nds"].as_f64().unwrap()
    };
    assert_eq!(eval(&["--gt-boxes"]), 1.0);
    let predicted = eval(&["--checkpoint", p(&ckpt)]);
    assert!((0.0..=1.0).contains(&predicted));
    assert!(eval(&["--gt-heights"]) > eval(&["--baseline"]));
    // eval without a height source is a usage error
    assert_eq!(run(&["eval", "--scenes", p(&scenes)]).status.code(), Some(1));

    let out = dir.path().join("queries");
    let scene = scenes.join("scene_000.json");
    assert!(Scene::load(&scene).is_ok());
    let o = run(&["sample", "--scene", p(&scene), "--gt-heights", "--cells", "48", "--out", p(&out)]);
    assert!(o.status.success());
    assert!(out.join("query_ch00.pgm").exists() && out.join("query_ch11.pgm").exists());
}
