//! Many pairs at once: running transfers from a manifest, scoring finished
//! outputs, and the per-scenario breakdown table.
//!
//! Runs are independent and may execute concurrently; each one builds its own
//! backend and owns its run directory. A failing row is recorded and the rest of
//! the batch carries on.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::aligner_for;
use crate::config::{InputPaths, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    classify_scenario, face_shape_rmse, hair_region_metrics, yaw_from_keypoints, MetricReport, PoseBand,
    ScenarioConfig, ScenarioLabel, SCENARIO_CONFIGS,
};
use crate::guide::GuidePair;
use crate::losses::ToyExtractor;
use crate::pipeline::{run_transfer, RunOptions};
use crate::raster::Image;
use crate::semantics::{Keypoints, Label, SemanticMap};

/// One line of a transfer manifest. Relative paths are taken relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    #[serde(default)]
    pub name: Option<String>,
    pub face_image: PathBuf,
    pub face_semantics: PathBuf,
    pub face_keypoints: PathBuf,
    pub hair_image: PathBuf,
    pub hair_semantics: PathBuf,
    pub hair_keypoints: PathBuf,
}

impl TransferRow {
    pub fn inputs(&self) -> InputPaths {
        InputPaths {
            face_image: self.face_image.clone(),
            face_semantics: self.face_semantics.clone(),
            face_keypoints: self.face_keypoints.clone(),
            hair_image: self.hair_image.clone(),
            hair_semantics: self.hair_semantics.clone(),
            hair_keypoints: self.hair_keypoints.clone(),
        }
    }
}

/// One line of a scoring manifest: a transfer's inputs plus its output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    #[serde(default)]
    pub name: Option<String>,
    pub face_image: PathBuf,
    pub face_semantics: PathBuf,
    pub face_keypoints: PathBuf,
    pub hair_image: PathBuf,
    pub hair_semantics: PathBuf,
    pub hair_keypoints: PathBuf,
    pub output_image: PathBuf,
    /// Keypoints detected on the output, for the face-shape error.
    #[serde(default)]
    pub output_keypoints: Option<PathBuf>,
}

/// Reads a manifest, resolving relative paths and giving unnamed rows
/// `row0000`, `row0001`, ….
pub fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::input(path, e.to_string()))?;
    let mut reader = csv::Reader::from_reader(file);
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::input(path, format!("row {}: {e}", i + 1))))
        .collect()
}

fn row_name(name: &Option<String>, index: usize) -> String {
    match name.as_deref().map(str::trim) {
        Some(n) if !n.is_empty() => n.to_string(),
        _ => format!("row{index:04}"),
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

fn check_names(path: &Path, names: &[String]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for n in names {
        if n.contains(['/', '\\']) || n == "." || n == ".." {
            return Err(Error::input(
                path,
                format!("row name {n:?} is not a plain directory name"),
            ));
        }
        if !seen.insert(n) {
            return Err(Error::input(path, format!("row name {n:?} appears twice")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Failed,
}

/// Per-row line of the metrics CSV. Empty fields mean "not available".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub name: String,
    pub status: RowStatus,
    pub error: String,
    /// 1-based row of the breakdown table, if the pair falls into one.
    pub scenario: Option<usize>,
    pub pose_band: Option<PoseBand>,
    pub face_inpaint: Option<bool>,
    pub bg_inpaint: Option<bool>,
    pub hat: Option<bool>,
    pub small_hair: Option<bool>,
    pub yaw_face: Option<f64>,
    pub yaw_hair: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips_like: Option<f64>,
    pub face_rmse: Option<f64>,
}

impl RowMetrics {
    fn failed(name: String, err: &Error) -> Self {
        Self {
            name,
            status: RowStatus::Failed,
            error: err.to_string(),
            scenario: None,
            pose_band: None,
            face_inpaint: None,
            bg_inpaint: None,
            hat: None,
            small_hair: None,
            yaw_face: None,
            yaw_hair: None,
            psnr: None,
            ssim: None,
            lpips_like: None,
            face_rmse: None,
        }
    }

    fn scored(name: String, label: &ScenarioLabel, yaws: (f64, f64), report: Option<&MetricReport>) -> Self {
        Self {
            name,
            status: RowStatus::Ok,
            error: String::new(),
            scenario: ScenarioConfig::of(label).index(),
            pose_band: Some(label.pose_band),
            face_inpaint: Some(label.needs_face_inpaint),
            bg_inpaint: Some(label.needs_bg_inpaint),
            hat: Some(label.has_hat),
            small_hair: Some(label.skipped_small_hair),
            yaw_face: Some(yaws.0),
            yaw_hair: Some(yaws.1),
            psnr: report.map(|r| r.psnr),
            ssim: report.map(|r| r.ssim),
            lpips_like: report.map(|r| r.lpips_like),
            face_rmse: report.and_then(|r| r.face_rmse),
        }
    }

    /// Whether the row counts towards the breakdown table: it succeeded and the
    /// hair source has enough hair to be worth transferring.
    pub fn counted(&self) -> bool {
        self.status == RowStatus::Ok && self.small_hair != Some(true)
    }
}

/// One line of the breakdown table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// `1..=12` for the table rows, empty for the "other" and "all" lines.
    pub index: Option<usize>,
    pub config: String,
    pub count: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips_like: Option<f64>,
    pub face_rmse: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn summary_line(index: Option<usize>, config: String, rows: &[&RowMetrics]) -> SummaryRow {
    SummaryRow {
        index,
        config,
        count: rows.len(),
        psnr: mean(rows.iter().map(|r| r.psnr)),
        ssim: mean(rows.iter().map(|r| r.ssim)),
        lpips_like: mean(rows.iter().map(|r| r.lpips_like)),
        face_rmse: mean(rows.iter().map(|r| r.face_rmse)),
    }
}

/// Groups counted rows by scenario: the twelve table rows in order, then pairs
/// matching none of them, then everything.
pub fn summarize(rows: &[RowMetrics]) -> Vec<SummaryRow> {
    let counted: Vec<&RowMetrics> = rows.iter().filter(|r| r.counted()).collect();
    let mut out: Vec<SummaryRow> = SCENARIO_CONFIGS
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let members: Vec<&RowMetrics> = counted.iter().copied().filter(|r| r.scenario == Some(i + 1)).collect();
            summary_line(Some(i + 1), cfg.to_string(), &members)
        })
        .collect();
    let other: Vec<&RowMetrics> = counted.iter().copied().filter(|r| r.scenario.is_none()).collect();
    out.push(summary_line(None, "other".into(), &other));
    out.push(summary_line(None, "all".into(), &counted));
    out
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of a batch: per-row metrics and the breakdown table.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchReport {
    pub rows: Vec<RowMetrics>,
    pub summary: Vec<SummaryRow>,
}

impl BatchReport {
    fn new(rows: Vec<RowMetrics>) -> Self {
        let summary = summarize(&rows);
        Self { rows, summary }
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status == RowStatus::Failed).count()
    }

    /// Writes `rows.csv` and `summary.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join("rows.csv"), &self.rows)?;
        write_csv(&dir.join("summary.csv"), &self.summary)
    }
}

fn label_pair(
    face_sem: &SemanticMap,
    face_kp: &Keypoints,
    hair_sem_aligned: &SemanticMap,
    hair_kp_aligned: &Keypoints,
    hair_kp: &Keypoints,
) -> Result<(ScenarioLabel, (f64, f64))> {
    let yaws = (yaw_from_keypoints(face_kp)?, yaw_from_keypoints(hair_kp)?);
    let label = classify_scenario(face_sem, hair_sem_aligned, face_kp, hair_kp_aligned, yaws.0, yaws.1)?;
    Ok((label, yaws))
}

/// Hair-region fidelity of a finished transfer: the final image against the
/// face-view guide inside the face view's hair mask.
pub fn transfer_metrics(
    name: String,
    guides: &GuidePair,
    final_image: &Image,
    ext: &ToyExtractor,
) -> Result<RowMetrics> {
    let fv = &guides.face;
    let (label, yaws) = label_pair(
        &fv.face.sem,
        &fv.face.kp,
        &fv.hair.sem,
        &fv.hair.kp,
        &guides.hair.hair.kp,
    )?;
    let report = if fv.masks.m_h.is_empty() {
        None
    } else {
        Some(hair_region_metrics(final_image, &fv.guide, &fv.masks.m_h, ext)?)
    };
    Ok(RowMetrics::scored(name, &label, yaws, report.as_ref()))
}

/// Runs every row of a transfer manifest into `root/<name>` with `jobs` workers
/// and writes `rows.csv` and `summary.csv` into `root`.
pub fn run_batch(
    manifest: &Path,
    shared: &RunConfig,
    root: &Path,
    jobs: usize,
    opts: RunOptions,
) -> Result<BatchReport> {
    let rows: Vec<TransferRow> = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let names: Vec<String> = rows.iter().enumerate().map(|(i, r)| row_name(&r.name, i)).collect();
    check_names(manifest, &names)?;
    shared.validate()?;
    let ext = ToyExtractor::new(shared.seeds.extractor);

    let run_row = |(row, name): (&TransferRow, &String)| -> RowMetrics {
        let config = RunConfig {
            inputs: row.inputs().resolved(base),
            output_dir: Some(root.join(name)),
            ..shared.clone()
        };
        let outcome = run_transfer(&config, opts)
            .and_then(|rec| transfer_metrics(name.clone(), &rec.guides, &rec.final_image, &ext));
        outcome.unwrap_or_else(|e| {
            log::error!("{name}: {e}");
            RowMetrics::failed(name.clone(), &e)
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<RowMetrics> = pool.install(|| rows.par_iter().zip(&names).map(run_row).collect());

    let report = BatchReport::new(results);
    report.save(root)?;
    Ok(report)
}

fn score_row(row: &ScoreRow, name: String, base: &Path, config: &RunConfig, ext: &ToyExtractor) -> Result<RowMetrics> {
    let r = |p: &Path| resolve(base, p);
    let face_sem = SemanticMap::load_png(&r(&row.face_semantics))?;
    let face_kp = Keypoints::load(&r(&row.face_keypoints))?;
    let hair = crate::alignment::AlignedImage::new(
        Image::load_png(&r(&row.hair_image))?,
        SemanticMap::load_png(&r(&row.hair_semantics))?,
        Keypoints::load(&r(&row.hair_keypoints))?,
    )?;
    let output = Image::load_png(&r(&row.output_image))?;
    let hair_in_face = aligner_for(config.aligner).align(&hair, &face_kp)?;
    let (label, yaws) = label_pair(&face_sem, &face_kp, &hair_in_face.sem, &hair_in_face.kp, &hair.kp)?;

    let mask = hair_in_face.sem.region(Label::Hair).intersect(&hair_in_face.sem.valid);
    let mut report = if mask.is_empty() {
        None
    } else {
        Some(hair_region_metrics(&output, &hair_in_face.pixels, &mask, ext)?)
    };
    if let (Some(rep), Some(kp_path)) = (report.as_mut(), &row.output_keypoints) {
        rep.face_rmse = Some(face_shape_rmse(&face_kp, &Keypoints::load(&r(kp_path))?));
    }
    Ok(RowMetrics::scored(name, &label, yaws, report.as_ref()))
}

/// Scores finished outputs listed in a manifest against their inputs: hair-region
/// fidelity against the hair source aligned onto the face, optional face-shape
/// error, and the scenario label.
pub fn score_manifest(manifest: &Path, config: &RunConfig) -> Result<BatchReport> {
    let rows: Vec<ScoreRow> = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let names: Vec<String> = rows.iter().enumerate().map(|(i, r)| row_name(&r.name, i)).collect();
    check_names(manifest, &names)?;
    let ext = ToyExtractor::new(config.seeds.extractor);
    let results = rows
        .par_iter()
        .zip(&names)
        .map(|(row, name)| {
            score_row(row, name.clone(), base, config, &ext).unwrap_or_else(|e| RowMetrics::failed(name.clone(), &e))
        })
        .collect();
    Ok(BatchReport::new(results))
}
