use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mvhair_core::config::InputPaths;
use mvhair_core::fixtures::{write_pair, PortraitSpec};

const QUICK: [&str; 8] = [
    "--stage1-iters",
    "6",
    "--stage2-iters",
    "4",
    "--stage3-iters",
    "2",
    "--mean-samples",
    "100",
];

fn mvhair(args: &[&str], run_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvhair"))
        .args(args)
        .env("SALON_RUN_DIR", run_root)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn pair(dir: &Path) -> InputPaths {
    let hair = PortraitSpec {
        hair_length: 1.3,
        bangs: true,
        ..PortraitSpec::default()
    };
    fs::create_dir_all(dir).unwrap();
    write_pair(dir, &PortraitSpec::default(), &hair).unwrap()
}

fn input_args(p: &InputPaths) -> Vec<String> {
    [
        ("--face-image", &p.face_image),
        ("--face-semantics", &p.face_semantics),
        ("--face-keypoints", &p.face_keypoints),
        ("--hair-image", &p.hair_image),
        ("--hair-semantics", &p.hair_semantics),
        ("--hair-keypoints", &p.hair_keypoints),
    ]
    .into_iter()
    .flat_map(|(flag, path)| [flag.to_string(), path.display().to_string()])
    .collect()
}

fn run_with_inputs(cmd: &[&str], p: &InputPaths, run_root: &Path) -> Output {
    let inputs = input_args(p);
    let mut args: Vec<&str> = cmd.to_vec();
    args.extend(inputs.iter().map(String::as_str));
    mvhair(&args, run_root)
}

fn write_manifest(path: &Path, rows: &[(&str, &InputPaths)]) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record([
        "name",
        "face_image",
        "face_semantics",
        "face_keypoints",
        "hair_image",
        "hair_semantics",
        "hair_keypoints",
    ])
    .unwrap();
    for (name, p) in rows {
        let paths = [
            &p.face_image,
            &p.face_semantics,
            &p.face_keypoints,
            &p.hair_image,
            &p.hair_semantics,
            &p.hair_keypoints,
        ];
        let mut record = vec![name.to_string()];
        record.extend(paths.iter().map(|x| x.display().to_string()));
        w.write_record(&record).unwrap();
    }
    w.flush().unwrap();
}

#[test]
fn transfer_writes_a_run_directory_under_the_run_root() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pair(tmp.path());
    let root = tmp.path().join("runs");
    let mut cmd = vec!["transfer"];
    cmd.extend(QUICK);
    let out = run_with_inputs(&cmd, &p, &root);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = root.join("face__hair");
    for f in ["config.json", "stage3/summary.json", "final.png", "record.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final.png"), "{stdout}");
}

#[test]
fn missing_input_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let mut p = pair(tmp.path());
    p.hair_keypoints = tmp.path().join("nowhere.txt");
    let mut cmd = vec!["transfer"];
    cmd.extend(QUICK);
    let out = run_with_inputs(&cmd, &p, &tmp.path().join("runs"));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere.txt"), "{}", stderr(&out));
}

#[test]
fn external_backend_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mvhair(
        &[
            "mean-latent",
            "--external-backend",
            "-o",
            &tmp.path().join("w.f32").display().to_string(),
        ],
        tmp.path(),
    );
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));
}

#[test]
fn empty_batch_succeeds_with_an_empty_table() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("manifest.csv");
    write_manifest(&manifest, &[]);
    let root = tmp.path().join("out");
    let out = mvhair(
        &[
            "batch",
            &manifest.display().to_string(),
            "-o",
            &root.display().to_string(),
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let mut summary = csv::Reader::from_path(root.join("summary.csv")).unwrap();
    let headers = summary.headers().unwrap().clone();
    let count = headers.iter().position(|h| h == "count").unwrap();
    for rec in summary.records() {
        assert_eq!(&rec.unwrap()[count], "0");
    }
}

#[test]
fn batch_runs_every_row_and_summary_matches_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let a = pair(&tmp.path().join("a"));
    fs::create_dir_all(tmp.path().join("b")).unwrap();
    let b = write_pair(
        &tmp.path().join("b"),
        &PortraitSpec::default(),
        &PortraitSpec {
            hair_width: 2.0,
            ..PortraitSpec::default()
        },
    )
    .unwrap();
    let manifest = tmp.path().join("manifest.csv");
    write_manifest(&manifest, &[("first", &a), ("second", &b), ("third", &a)]);
    let root = tmp.path().join("out");
    let mut args = vec![
        "batch".to_string(),
        manifest.display().to_string(),
        "-o".into(),
        root.display().to_string(),
    ];
    args.extend(QUICK.iter().map(|s| s.to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = mvhair(&args, tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));

    for name in ["first", "second", "third"] {
        assert!(root.join(name).join("final.png").is_file(), "missing run {name}");
    }

    // Recompute the "all" line from the per-row table.
    let mut rows = csv::Reader::from_path(root.join("rows.csv")).unwrap();
    let h = rows.headers().unwrap().clone();
    let col = |n: &str| h.iter().position(|x| x == n).unwrap();
    let (status, small, psnr, ssim) = (col("status"), col("small_hair"), col("psnr"), col("ssim"));
    let records: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 3);
    let counted: Vec<&csv::StringRecord> = records
        .iter()
        .filter(|r| &r[status] == "ok" && &r[small] != "true")
        .collect();
    let mean = |c: usize| counted.iter().map(|r| r[c].parse::<f64>().unwrap()).sum::<f64>() / counted.len() as f64;

    let mut summary = csv::Reader::from_path(root.join("summary.csv")).unwrap();
    let sh = summary.headers().unwrap().clone();
    let scol = |n: &str| sh.iter().position(|x| x == n).unwrap();
    let all = summary
        .records()
        .map(Result::unwrap)
        .find(|r| &r[scol("config")] == "all")
        .unwrap();
    assert_eq!(all[scol("count")].parse::<usize>().unwrap(), counted.len());
    assert!(!counted.is_empty());
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1.0);
    assert!(close(all[scol("psnr")].parse().unwrap(), mean(psnr)));
    assert!(close(all[scol("ssim")].parse().unwrap(), mean(ssim)));
}

#[test]
fn eval_scores_a_manifest_of_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pair(tmp.path());
    let manifest = tmp.path().join("scores.csv");
    let mut w = csv::Writer::from_path(&manifest).unwrap();
    w.write_record([
        "name",
        "face_image",
        "face_semantics",
        "face_keypoints",
        "hair_image",
        "hair_semantics",
        "hair_keypoints",
        "output_image",
        "output_keypoints",
    ])
    .unwrap();
    let cells: Vec<String> = [
        &p.face_image,
        &p.face_semantics,
        &p.face_keypoints,
        &p.hair_image,
        &p.hair_semantics,
        &p.hair_keypoints,
        &p.face_image,
        &p.face_keypoints,
    ]
    .iter()
    .map(|x| x.display().to_string())
    .collect();
    let mut record = vec!["only".to_string()];
    record.extend(cells);
    w.write_record(&record).unwrap();
    w.flush().unwrap();

    let out = mvhair(&["eval", &manifest.display().to_string()], tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let mut rows = csv::Reader::from_path(tmp.path().join("rows.csv")).unwrap();
    let h = rows.headers().unwrap().clone();
    let rec = rows.records().next().unwrap().unwrap();
    let get = |n: &str| rec[h.iter().position(|x| x == n).unwrap()].to_string();
    assert_eq!(get("status"), "ok");
    assert_eq!(get("face_rmse").parse::<f64>().unwrap(), 0.0);
}

#[test]
fn classify_prints_a_label() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pair(tmp.path());
    let out = mvhair(
        &[
            "classify",
            "--face-semantics",
            &p.face_semantics.display().to_string(),
            "--face-keypoints",
            &p.face_keypoints.display().to_string(),
            "--hair-semantics",
            &p.hair_semantics.display().to_string(),
            "--hair-keypoints",
            &p.hair_keypoints.display().to_string(),
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(json["label"].is_object(), "{json}");
    assert!(json["config"].is_string());
}

#[test]
fn guide_writes_guides_and_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pair(tmp.path());
    let dir = tmp.path().join("g");
    let out = run_with_inputs(&["guide", "-o", &dir.display().to_string()], &p, tmp.path());
    assert!(out.status.success(), "{}", stderr(&out));
    for f in [
        "guides/face.png",
        "guides/hair.png",
        "masks/face_m_h.png",
        "masks/hair_m_raw.png",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn mean_latent_writes_a_state_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("sub/w0.f32");
    let out = mvhair(
        &["mean-latent", "--mean-samples", "50", "-o", &path.display().to_string()],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let (header, values) = mvhair_core::persist::read_array(&path).unwrap();
    assert_eq!(header.shape, vec![mvhair_core::latent::LATENT_DIM]);
    assert!(values.iter().all(|v| v.is_finite()));
}
