use std::fs;
use std::path::Path;

use mvhair_core::config::RunConfig;
use mvhair_core::fixtures::{write_pair, PortraitSpec};
use mvhair_core::optimizer::Stage;
use mvhair_core::pipeline::{run_transfer, RunOptions};
use mvhair_core::Error;

fn quick_config(dir: &Path) -> RunConfig {
    let hair = PortraitSpec {
        hair_length: 1.3,
        bangs: true,
        ..PortraitSpec::default()
    };
    let inputs = write_pair(dir, &PortraitSpec::default(), &hair).unwrap();
    let mut config = RunConfig::default().with_iterations(12, 8, 4);
    config.seeds.mean_latent_samples = 200;
    config.inputs = inputs;
    config.output_dir = Some(dir.join("run"));
    config
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn run_directory_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let config = quick_config(tmp.path());
    let record = run_transfer(&config, RunOptions::default()).unwrap();
    let run = tmp.path().join("run");
    for f in [
        "config.json",
        "mean_latent.f32",
        "guides/face.png",
        "guides/hair.png",
        "masks/face_m_f.png",
        "masks/hair_m_roni_h.png",
        "masks/face_m_raw.png",
        "stage1/w_face.f32",
        "stage1/noise_hair.f32",
        "stage1/losses.csv",
        "stage2/wplus_shared.f32",
        "stage2/target_face.png",
        "stage2/o_hair.png",
        "stage3/params.f32",
        "stage3/summary.json",
        "final.png",
        "record.json",
        "timing.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let snapshot = RunConfig::from_json(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot, config.snapshot());
    assert_eq!(record.stage(Stage::Stage1).trace.rows.len(), 12);
    assert_eq!(record.stage(Stage::Stage3).trace.rows.len(), 4);
}

#[test]
fn resume_reproduces_downstream_results() {
    let tmp = tempfile::tempdir().unwrap();
    let config = quick_config(tmp.path());
    let first = run_transfer(&config, RunOptions::default()).unwrap();
    let run = tmp.path().join("run");
    let kept = read(&run.join("final.png"));
    let record = read(&run.join("record.json"));

    // Drop everything after stage 1 and resume from there.
    fs::remove_dir_all(run.join("stage3")).unwrap();
    fs::remove_file(run.join("stage2/summary.json")).unwrap();
    fs::remove_file(run.join("final.png")).unwrap();
    let resumed = run_transfer(&config, RunOptions { resume: true }).unwrap();

    assert_eq!(resumed.timing.resumed, vec![Stage::Stage1]);
    assert_eq!(read(&run.join("final.png")), kept);
    assert_eq!(read(&run.join("record.json")), record);
    assert_eq!(resumed.final_image, first.final_image);
    assert_eq!(resumed.stage(Stage::Stage2).state, first.stage(Stage::Stage2).state);
    assert_eq!(resumed.stage(Stage::Stage1).o_face, first.stage(Stage::Stage1).o_face);
}

#[test]
fn resume_refuses_a_different_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = quick_config(tmp.path());
    run_transfer(&config, RunOptions::default()).unwrap();
    let mut changed = config.clone();
    changed.seeds.alpha += 1;
    assert!(matches!(
        run_transfer(&changed, RunOptions { resume: true }),
        Err(Error::Config(_))
    ));
}

#[test]
fn missing_keypoint_file_is_an_input_error_naming_it() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = quick_config(tmp.path());
    config.inputs.hair_keypoints = tmp.path().join("absent_kp.txt");
    let err = run_transfer(&config, RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("absent_kp.txt"), "{err}");
}

#[test]
fn numerical_failure_leaves_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = quick_config(tmp.path());
    config.stage2.weights.lambda_i = f64::MAX;
    config.stage2.weights.lambda_s = f64::MAX;
    let err = run_transfer(&config, RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    let diag = tmp.path().join("run/stage2/diagnostics");
    assert!(diag.join("error.json").is_file());
    assert!(diag.join("wplus_shared.f32").is_file());
    // Earlier stages stay inspectable.
    assert!(tmp.path().join("run/stage1/summary.json").is_file());
}
