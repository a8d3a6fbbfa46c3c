//! One transfer run end to end: inputs → guides → three stages → final image, with
//! every intermediate written into a run directory that a later invocation can
//! resume from.
//!
//! Run directory layout:
//!
//! ```text
//! config.json             config snapshot (no output location)
//! mean_latent.f32         w_0
//! guides/{face,hair}.png  composited guides
//! masks/<view>_<mask>.png the named masks of each view, plus m_raw
//! stageN/                 o_face.png, o_hair.png, losses.csv, summary.json,
//!                         state files (stage 3: params.f32)
//! stage2/target_*.png     updated targets
//! final.png
//! record.json             warnings, flags, per-stage losses
//! timing.json             wall-clock seconds; the only non-deterministic file
//! ```
//!
//! A stage counts as complete once its `summary.json` exists; it is written last.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alignment::aligner_for;
use crate::config::{BackendConfig, BackendKind, InputPaths, RunConfig};
use crate::error::{Error, Result};
use crate::guide::{build_guide_pair, GuidePair};
use crate::latent::{estimate_mean_latent, GeneratorBackend, LatentW, LATENT_DIM};
use crate::losses::ToyExtractor;
use crate::optimizer::{
    finalize, run_stage1, run_stage2, run_stage3, update_targets, InputBackgroundSegmenter, LatentState, LossTrace,
    Stage, StageEvent, StageResult,
};
use crate::persist::{load_state, read_array, save_state, write_array, ArrayHeader};
use crate::raster::Image;
use crate::semantics::{build_mraw, Keypoints, SemanticMap, View};
use crate::toy::ToyGenerator;

/// The six inputs of a run, parsed.
#[derive(Clone, Debug)]
pub struct RunInputs {
    pub face_image: Image,
    pub face_semantics: SemanticMap,
    pub face_keypoints: Keypoints,
    pub hair_image: Image,
    pub hair_semantics: SemanticMap,
    pub hair_keypoints: Keypoints,
}

impl RunInputs {
    /// Reads and checks every input; errors name the offending file.
    pub fn load(paths: &InputPaths, resolution: usize) -> Result<Self> {
        for (role, path) in paths.entries() {
            if path.as_os_str().is_empty() {
                return Err(Error::input(path, format!("no {role} given")));
            }
            if !path.is_file() {
                return Err(Error::input(path, format!("{role} not found")));
            }
        }
        let image = |p: &Path| -> Result<Image> {
            let img = Image::load_png(p)?;
            if img.width() != resolution || img.height() != resolution {
                return Err(Error::input(
                    p,
                    format!("{}x{} image, run resolution is {resolution}", img.width(), img.height()),
                ));
            }
            Ok(img)
        };
        let sem = |p: &Path, img: &Image| -> Result<SemanticMap> {
            let s = SemanticMap::load_png(p)?;
            if s.width() != img.width() || s.height() != img.height() {
                return Err(Error::input(p, "label map and image differ in size"));
            }
            Ok(s)
        };
        let kp = |p: &Path| Keypoints::load(p).map_err(|e| relabel(e, p));
        let face_image = image(&paths.face_image)?;
        let hair_image = image(&paths.hair_image)?;
        Ok(Self {
            face_semantics: sem(&paths.face_semantics, &face_image)?,
            face_keypoints: kp(&paths.face_keypoints)?,
            hair_semantics: sem(&paths.hair_semantics, &hair_image)?,
            hair_keypoints: kp(&paths.hair_keypoints)?,
            face_image,
            hair_image,
        })
    }

    pub fn guides(&self, config: &RunConfig) -> Result<GuidePair> {
        let aligner = aligner_for(config.aligner);
        build_guide_pair(
            self.face_image.clone(),
            self.face_semantics.clone(),
            self.face_keypoints.clone(),
            self.hair_image.clone(),
            self.hair_semantics.clone(),
            self.hair_keypoints.clone(),
            aligner.as_ref(),
        )
    }
}

/// Parse failures inside a file become input errors naming that file.
fn relabel(e: Error, path: &Path) -> Error {
    match e {
        e @ Error::Input { .. } => e,
        other => Error::input(path, other.to_string()),
    }
}

/// Instantiates the configured generator.
pub fn build_backend(config: &BackendConfig) -> Result<ToyGenerator> {
    match config.kind {
        BackendKind::Toy => {
            let mut gen = ToyGenerator::new(config.toy.clone())?;
            if let Some(path) = &config.checkpoint {
                let (_, params) = read_array(path)?;
                gen.set_params(params).map_err(|e| relabel(e, path))?;
            }
            Ok(gen)
        }
        BackendKind::External => Err(Error::UnsupportedBackend(
            "external generator checkpoints need an adapter that is not part of this build".into(),
        )),
    }
}

/// Writes both guides and every named mask of both views.
pub fn save_guides(dir: &Path, guides: &GuidePair) -> Result<()> {
    let gdir = dir.join("guides");
    let mdir = dir.join("masks");
    fs::create_dir_all(&gdir)?;
    fs::create_dir_all(&mdir)?;
    for view in View::BOTH {
        let vg = guides.view(view);
        vg.guide.save_png(&gdir.join(format!("{view}.png")))?;
        for (name, mask) in vg.masks.named() {
            mask.save_png(&mdir.join(format!("{view}_{name}.png")))?;
        }
        build_mraw(&vg.masks, view).save_png(&mdir.join(format!("{view}_m_raw.png")))?;
    }
    Ok(())
}

pub fn save_latent(path: &Path, w: &LatentW) -> Result<()> {
    write_array(path, &ArrayHeader::new(vec![LATENT_DIM]), w.as_slice())
}

pub fn load_latent(path: &Path) -> Result<LatentW> {
    let (_, values) = read_array(path)?;
    LatentW::new(values).map_err(|e| relabel(e, path))
}

/// What `summary.json` of a stage directory holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub iterations: usize,
    pub final_loss: f64,
    pub flags: Vec<String>,
}

/// Machine-readable digest of a run, written as `record.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordFile {
    pub config: RunConfig,
    pub warnings: Vec<String>,
    pub stages: Vec<StageSummary>,
    pub final_image: String,
}

/// Wall-clock seconds per step, written as `timing.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub steps: Vec<(String, f64)>,
    /// Stages taken from an earlier invocation instead of being run.
    pub resumed: Vec<Stage>,
    pub total: f64,
}

impl Timing {
    fn lap(&mut self, name: &str, since: Instant) {
        self.steps.push((name.to_string(), since.elapsed().as_secs_f64()));
    }
}

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub run_dir: PathBuf,
    pub config: RunConfig,
    pub guides: GuidePair,
    /// Guides after the target update, as used by stage 2.
    pub updated_guides: GuidePair,
    pub mean_latent: LatentW,
    pub stages: [StageResult; 3],
    pub final_image: Image,
    pub warnings: Vec<String>,
    pub timing: Timing,
}

impl RunRecord {
    pub fn stage(&self, stage: Stage) -> &StageResult {
        &self.stages[stage.index() - 1]
    }

    pub fn file(&self) -> RecordFile {
        RecordFile {
            config: self.config.snapshot(),
            warnings: self.warnings.clone(),
            stages: self.stages.iter().map(summary_of).collect(),
            final_image: "final.png".into(),
        }
    }
}

fn summary_of(r: &StageResult) -> StageSummary {
    StageSummary {
        stage: r.stage,
        iterations: r.trace.rows.len(),
        final_loss: r.final_loss,
        flags: r.flags.clone(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Reuse stages an earlier invocation completed in the same directory.
    pub resume: bool,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn stage_dir(run_dir: &Path, stage: Stage) -> PathBuf {
    run_dir.join(stage.name())
}

fn is_complete(run_dir: &Path, stage: Stage) -> bool {
    stage_dir(run_dir, stage).join("summary.json").is_file()
}

fn save_stage(dir: &Path, result: &StageResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    result.o_face.save_png(&dir.join("o_face.png"))?;
    result.o_hair.save_png(&dir.join("o_hair.png"))?;
    result.trace.write_csv(fs::File::create(dir.join("losses.csv"))?)?;
    match &result.params {
        Some(params) => write_array(&dir.join("params.f32"), &ArrayHeader::new(vec![params.len()]), params)?,
        None => save_state(dir, &result.state)?,
    }
    write_json(&dir.join("summary.json"), &summary_of(result))
}

/// Rebuilds a completed stage from its directory. Outputs are re-rendered from
/// the stored state, which reproduces them exactly.
fn load_stage<B: GeneratorBackend>(
    dir: &Path,
    stage: Stage,
    backend: &B,
    frozen: Option<&LatentState>,
    config: &RunConfig,
) -> Result<StageResult> {
    let summary: StageSummary = serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?;
    let trace = LossTrace::read_csv(fs::File::open(dir.join("losses.csv"))?)?;
    let (state, params, renderer) = match frozen {
        Some(state) => {
            let path = dir.join("params.f32");
            let (_, params) = read_array(&path)?;
            let mut tuned = backend.clone();
            if params.len() != tuned.params().len() {
                return Err(Error::input(&path, "parameter count does not match the backend"));
            }
            tuned.params_mut().copy_from_slice(&params);
            (state.clone(), Some(params), tuned)
        }
        None => (
            load_state(dir, backend.layer_count(), config.sharing)?,
            None,
            backend.clone(),
        ),
    };
    let render = |view| renderer.synthesize(&state.render_wplus(view), state.noise(view));
    Ok(StageResult {
        stage,
        o_face: render(View::Face)?,
        o_hair: render(View::Hair)?,
        state,
        params,
        trace,
        final_loss: summary.final_loss,
        flags: summary.flags,
    })
}

/// Runs one stage, or reloads it when resuming. On failure the last state the
/// optimizer reported and the error are left in `<stage>/diagnostics/`.
#[allow(clippy::too_many_arguments)]
fn stage_step<B: GeneratorBackend>(
    run_dir: &Path,
    stage: Stage,
    backend: &B,
    frozen: Option<&LatentState>,
    config: &RunConfig,
    opts: RunOptions,
    timing: &mut Timing,
    run: impl FnOnce(&mut dyn FnMut(&StageEvent<'_>)) -> Result<StageResult>,
) -> Result<StageResult> {
    let dir = stage_dir(run_dir, stage);
    if opts.resume && is_complete(run_dir, stage) {
        log::info!("{stage}: reusing completed results in {}", dir.display());
        timing.resumed.push(stage);
        return load_stage(&dir, stage, backend, frozen, config).map_err(|e| e.in_stage(stage.name()));
    }
    let started = Instant::now();
    log::info!("{stage}: running");
    let mut last: Option<(usize, LatentState)> = None;
    let mut observer = |ev: &StageEvent<'_>| last = Some((ev.iter, ev.state.clone()));
    let outcome = run(&mut observer);
    timing.lap(stage.name(), started);
    match outcome {
        Ok(result) => {
            save_stage(&dir, &result).map_err(|e| e.in_stage(stage.name()))?;
            Ok(result)
        }
        Err(err) => {
            if let Err(dump) = dump_diagnostics(&dir, &err, last.as_ref()) {
                log::warn!("{stage}: could not write diagnostics: {dump}");
            }
            Err(err.in_stage(stage.name()))
        }
    }
}

fn dump_diagnostics(dir: &Path, err: &Error, last: Option<&(usize, LatentState)>) -> Result<()> {
    let ddir = dir.join("diagnostics");
    fs::create_dir_all(&ddir)?;
    let mut report = serde_json::json!({ "error": err.to_string() });
    if let Some((iter, state)) = last {
        report["last_observed_iteration"] = (*iter).into();
        save_state(&ddir, state)?;
    }
    write_json(&ddir.join("error.json"), &report)
}

/// Executes a full transfer into `config.output_dir`.
pub fn run_transfer(config: &RunConfig, opts: RunOptions) -> Result<RunRecord> {
    let total = Instant::now();
    config.validate()?;
    let run_dir = config
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory given".into()))?;
    let mut timing = Timing::default();

    let snapshot = config.snapshot().to_json() + "\n";
    let config_path = run_dir.join("config.json");
    if opts.resume && config_path.is_file() && fs::read_to_string(&config_path)? != snapshot {
        return Err(Error::Config(format!(
            "{} was produced with a different configuration; cannot resume",
            run_dir.display()
        )));
    }

    let started = Instant::now();
    let inputs = RunInputs::load(&config.inputs, config.resolution)?;
    let backend = build_backend(&config.backend)?;
    if backend.output_resolution() != config.resolution {
        return Err(Error::Config(format!(
            "backend renders {}px, run resolution is {}px",
            backend.output_resolution(),
            config.resolution
        )));
    }
    let guides = inputs.guides(config).map_err(|e| e.in_stage("guide"))?;
    fs::create_dir_all(&run_dir)?;
    fs::write(&config_path, &snapshot)?;
    save_guides(&run_dir, &guides)?;
    let mut warnings: Vec<String> = guides
        .warnings()
        .into_iter()
        .map(|(view, w)| format!("{view} guide: {}", serde_json::to_string(&w).expect("plain data")))
        .collect();
    timing.lap("guides", started);

    let started = Instant::now();
    let w0 = estimate_mean_latent(&backend, config.seeds.mean_latent_samples, config.seeds.mean_latent)?;
    save_latent(&run_dir.join("mean_latent.f32"), &w0)?;
    timing.lap("mean_latent", started);

    let ext = ToyExtractor::new(config.seeds.extractor);
    let seeds = config.seeds;

    let s1 = stage_step(
        &run_dir,
        Stage::Stage1,
        &backend,
        None,
        config,
        opts,
        &mut timing,
        |obs| {
            run_stage1(
                &guides,
                &backend,
                &ext,
                &w0,
                &config.sharing,
                &config.stage1,
                seeds.noise,
                seeds.alpha,
                Some(obs),
            )
        },
    )?;

    let (updated, flags) =
        update_targets(&guides, &s1, &InputBackgroundSegmenter).map_err(|e| e.in_stage("update_targets"))?;
    warnings.extend(flags);
    fs::create_dir_all(stage_dir(&run_dir, Stage::Stage2))?;
    for view in View::BOTH {
        updated
            .view(view)
            .guide
            .save_png(&stage_dir(&run_dir, Stage::Stage2).join(format!("target_{view}.png")))?;
    }

    let s2 = stage_step(
        &run_dir,
        Stage::Stage2,
        &backend,
        None,
        config,
        opts,
        &mut timing,
        |obs| run_stage2(&updated, &s1.state, &backend, &ext, &config.stage2, Some(obs)),
    )?;

    let s3 = stage_step(
        &run_dir,
        Stage::Stage3,
        &backend,
        Some(&s2.state),
        config,
        opts,
        &mut timing,
        |obs| {
            run_stage3(
                &guides,
                &s2.state,
                &backend,
                &ext,
                &config.stage3,
                seeds.regularizer,
                Some(obs),
            )
        },
    )?;

    let final_image = finalize(&s3.o_face, &inputs.face_image, &guides.face.masks, config.paste_back)
        .map_err(|e| e.in_stage("finalize"))?;
    final_image.save_png(&run_dir.join("final.png"))?;

    for s in [&s1, &s2, &s3] {
        warnings.extend(s.flags.iter().map(|f| format!("{}: {f}", s.stage)));
    }
    let record = RunRecord {
        run_dir: run_dir.clone(),
        config: config.clone(),
        guides,
        updated_guides: updated,
        mean_latent: w0,
        stages: [s1, s2, s3],
        final_image,
        warnings,
        timing,
    };
    write_json(&run_dir.join("record.json"), &record.file())?;
    let mut timing = record.timing.clone();
    timing.total = total.elapsed().as_secs_f64();
    write_json(&run_dir.join("timing.json"), &timing)?;
    Ok(RunRecord { timing, ..record })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_inputs_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let paths = InputPaths {
            face_image: dir.path().join("nope.png"),
            ..InputPaths::default()
        };
        let err = RunInputs::load(&paths, 64).unwrap_err();
        assert!(
            matches!(&err, Error::Input { path, .. } if path.ends_with("nope.png")),
            "{err}"
        );
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn external_backend_is_refused() {
        let cfg = BackendConfig {
            kind: BackendKind::External,
            ..BackendConfig::default()
        };
        assert!(matches!(build_backend(&cfg), Err(Error::UnsupportedBackend(_))));
    }

    #[test]
    fn checkpoint_replaces_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let base = ToyGenerator::new(Default::default()).unwrap();
        let params: Vec<f64> = base.params().iter().map(|v| (v * 0.5) as f32 as f64).collect();
        let path = dir.path().join("theta.f32");
        write_array(&path, &ArrayHeader::new(vec![params.len()]), &params).unwrap();
        let gen = build_backend(&BackendConfig {
            checkpoint: Some(path),
            ..BackendConfig::default()
        })
        .unwrap();
        assert_eq!(gen.params(), &params[..]);
    }
}
