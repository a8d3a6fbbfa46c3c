//! The three optimization stages: W-space hallucination, W+ refinement against
//! updated targets, and generator weight tuning.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::guide::{GuidePair, ViewGuide};
use crate::latent::{lr_at, GeneratorBackend, LatentW, LatentWPlus, LrSchedule, NoiseMaps, LATENT_DIM};
use crate::losses::{
    global_mse32_with_grad, initial_value_loss_with_grad, noise_regularization, pti_regularizer, GaussianBlur,
    LossTerms, LossWeights, PerceptualExtractor, PerceptualTarget, PtiTarget, Region,
};
use crate::raster::{Image, Mask};
use crate::semantics::{build_mc, build_mraw, dilate, erode, Label, MaskSet, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    RandomUniform,
    Fixed,
}

/// How the two views' codes are tied together in the late layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharingConfig {
    /// First shared layer; rows `l..L` are shared, rows `0..l` belong to each view.
    pub l: usize,
    pub alpha_mode: AlphaMode,
    pub alpha_fixed: f64,
}

impl Default for SharingConfig {
    fn default() -> Self {
        Self {
            l: 4,
            alpha_mode: AlphaMode::RandomUniform,
            alpha_fixed: 0.5,
        }
    }
}

impl SharingConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.l < 1 || self.l > layers {
            return Err(Error::Config(format!("sharing layer {} outside 1..={layers}", self.l)));
        }
        if !(0.0..=1.0).contains(&self.alpha_fixed) {
            return Err(Error::Config(format!(
                "alpha_fixed {} outside [0, 1]",
                self.alpha_fixed
            )));
        }
        Ok(())
    }

    /// Interpolation weight used when rendering stage-1 outputs and seeding W+:
    /// the fixed value, or the mean of the uniform draw.
    pub fn render_alpha(&self) -> f64 {
        match self.alpha_mode {
            AlphaMode::Fixed => self.alpha_fixed,
            AlphaMode::RandomUniform => 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    Stage3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Stage1, Stage::Stage2, Stage::Stage3];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
            Stage::Stage3 => 3,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-view W+ codes whose rows `l..L` live in one shared buffer, so the views'
/// tails cannot drift apart.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedWPlus {
    layers: usize,
    l: usize,
    face_own: Vec<f64>,
    hair_own: Vec<f64>,
    shared: Vec<f64>,
}

impl SharedWPlus {
    pub fn new(layers: usize, l: usize, face_own: Vec<f64>, hair_own: Vec<f64>, shared: Vec<f64>) -> Result<Self> {
        let own = l * LATENT_DIM;
        if l > layers || face_own.len() != own || hair_own.len() != own || shared.len() != (layers - l) * LATENT_DIM {
            return Err(Error::Schema(format!(
                "shared W+ buffers do not fit {layers} layers with l={l}"
            )));
        }
        Ok(Self {
            layers,
            l,
            face_own,
            hair_own,
            shared,
        })
    }

    /// Broadcasts stage-1 codes: own rows from each view, the tail from the
    /// interpolated code.
    pub fn from_codes(w_face: &LatentW, w_hair: &LatentW, layers: usize, l: usize, alpha: f64) -> Self {
        let f = assemble_wplus_stage1(w_face, w_hair, View::Face, alpha, l, layers);
        let h = assemble_wplus_stage1(w_face, w_hair, View::Hair, alpha, l, layers);
        let split = l * LATENT_DIM;
        Self {
            layers,
            l,
            face_own: f.as_slice()[..split].to_vec(),
            hair_own: h.as_slice()[..split].to_vec(),
            shared: f.as_slice()[split..].to_vec(),
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn own(&self, view: View) -> &[f64] {
        match view {
            View::Face => &self.face_own,
            View::Hair => &self.hair_own,
        }
    }

    pub fn shared(&self) -> &[f64] {
        &self.shared
    }

    pub fn wplus(&self, view: View) -> LatentWPlus {
        let mut rows = self.own(view).to_vec();
        rows.extend_from_slice(&self.shared);
        LatentWPlus::new(self.layers, rows).expect("consistent buffers")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Codes {
    W { face: LatentW, hair: LatentW },
    WPlus(SharedWPlus),
}

/// Everything the latent stages optimize, plus the sharing rule.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub codes: Codes,
    pub noise_face: NoiseMaps,
    pub noise_hair: NoiseMaps,
    pub sharing: SharingConfig,
    pub layers: usize,
}

impl LatentState {
    pub fn noise(&self, view: View) -> &NoiseMaps {
        match view {
            View::Face => &self.noise_face,
            View::Hair => &self.noise_hair,
        }
    }

    /// W+ code of `view`; `alpha` only matters for W-space codes.
    pub fn assemble(&self, view: View, alpha: f64) -> LatentWPlus {
        match &self.codes {
            Codes::W { face, hair } => assemble_wplus_stage1(face, hair, view, alpha, self.sharing.l, self.layers),
            Codes::WPlus(s) => s.wplus(view),
        }
    }

    /// The code outputs are rendered from.
    pub fn render_wplus(&self, view: View) -> LatentWPlus {
        self.assemble(view, self.sharing.render_alpha())
    }

    pub fn is_finite(&self) -> bool {
        let codes = match &self.codes {
            Codes::W { face, hair } => face.as_slice().iter().chain(hair.as_slice()).all(|v| v.is_finite()),
            Codes::WPlus(s) => s
                .face_own
                .iter()
                .chain(&s.hair_own)
                .chain(&s.shared)
                .all(|v| v.is_finite()),
        };
        codes && self.noise_face.is_finite() && self.noise_hair.is_finite()
    }

    /// Rounds every stored value to single precision, the precision of state files.
    pub fn quantize(&mut self) {
        match &mut self.codes {
            Codes::W { face, hair } => {
                quantize(face.as_mut_slice());
                quantize(hair.as_mut_slice());
            }
            Codes::WPlus(s) => {
                quantize(&mut s.face_own);
                quantize(&mut s.hair_own);
                quantize(&mut s.shared);
            }
        }
        quantize_noise(&mut self.noise_face);
        quantize_noise(&mut self.noise_hair);
    }
}

/// A diverged update surfaces as a numerical failure rather than a bad code.
fn check_state_finite(state: &LatentState, stage: Stage, iter: usize) -> Result<()> {
    if state.is_finite() {
        return Ok(());
    }
    Err(Error::NumericalFailure {
        stage: stage.name().into(),
        iter,
        detail: "non-finite latent or noise after the update".into(),
    })
}

pub fn quantize(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

fn quantize_noise(n: &mut NoiseMaps) {
    for v in n.iter_mut() {
        *v = *v as f32 as f64;
    }
}

/// Rows `0..l` take the view's own code; rows `l..L` take
/// `alpha · w_face + (1 − alpha) · w_hair`, identical for both views.
pub fn assemble_wplus_stage1(
    w_face: &LatentW,
    w_hair: &LatentW,
    view: View,
    alpha: f64,
    l: usize,
    layers: usize,
) -> LatentWPlus {
    let own = match view {
        View::Face => w_face,
        View::Hair => w_hair,
    };
    let mixed: Vec<f64> = w_face
        .as_slice()
        .iter()
        .zip(w_hair.as_slice())
        .map(|(f, h)| alpha * f + (1.0 - alpha) * h)
        .collect();
    let mut rows = Vec::with_capacity(layers * LATENT_DIM);
    for i in 0..layers {
        if i < l {
            rows.extend_from_slice(own.as_slice());
        } else {
            rows.extend_from_slice(&mixed);
        }
    }
    LatentWPlus::new(layers, rows).expect("row count matches")
}

/// Per-iteration loss log with named columns; the last column is the total.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub columns: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl LossTrace {
    fn latent_columns() -> Vec<String> {
        let mut cols = vec!["lr".to_string(), "alpha".to_string()];
        for v in View::BOTH {
            for t in ["per_f", "per_h", "per_bg", "global", "ini", "noise", "sim"] {
                cols.push(format!("{}_{t}", v.name()));
            }
        }
        cols.push("total".into());
        cols
    }

    fn tuning_columns() -> Vec<String> {
        ["lr", "pti_face", "pti_hair", "pti_loss", "regularizer", "total"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|(_, v)| *v.last().expect("total column"))
            .collect()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[i]).collect())
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iter".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (iter, vals) in &self.rows {
            let mut rec = vec![iter.to_string()];
            rec.extend(vals.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let columns = headers.iter().skip(1).map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let iter = rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Schema("loss trace row without iteration".into()))?;
            let vals = rec
                .iter()
                .skip(1)
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::Schema(format!("loss trace value {s:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push((iter, vals));
        }
        Ok(Self { columns, rows })
    }
}

/// Outputs and end state of one stage.
#[derive(Clone, Debug)]
pub struct StageResult {
    pub stage: Stage,
    pub o_face: Image,
    pub o_hair: Image,
    pub state: LatentState,
    /// Tuned generator parameters (weight-tuning stage only).
    pub params: Option<Vec<f64>>,
    pub trace: LossTrace,
    /// Objective of this stage evaluated at the returned state.
    pub final_loss: f64,
    pub flags: Vec<String>,
}

impl StageResult {
    pub fn output(&self, view: View) -> &Image {
        match view {
            View::Face => &self.o_face,
            View::Hair => &self.o_hair,
        }
    }
}

/// Settings of one latent stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStageOptions {
    pub iters: usize,
    pub weights: LossWeights,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
}

impl LatentStageOptions {
    pub fn stage1() -> Self {
        Self::new(1000, LossWeights::stage1())
    }

    pub fn stage2() -> Self {
        Self::new(500, LossWeights::stage2())
    }

    pub fn new(iters: usize, weights: LossWeights) -> Self {
        Self {
            iters,
            weights,
            schedule: LrSchedule::new(iters),
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.iters > 0 {
            self.schedule.validate()?;
            if self.schedule.total_iters != self.iters {
                return Err(Error::Config(format!(
                    "schedule covers {} iterations but the stage runs {}",
                    self.schedule.total_iters, self.iters
                )));
            }
        }
        Ok(())
    }
}

/// Settings of the weight-tuning stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningOptions {
    pub iters: usize,
    pub lr: f64,
    /// Step from the optimized code towards a random mapped code.
    pub alpha_reg: f64,
    pub lambda_reg: f64,
    pub adam: AdamConfig,
}

impl Default for TuningOptions {
    fn default() -> Self {
        Self {
            iters: 500,
            lr: 1e-3,
            alpha_reg: 30.0,
            lambda_reg: 0.01,
            adam: AdamConfig::default(),
        }
    }
}

/// What an observer sees once per iteration, before the update, and once more
/// after the last update (with `alpha == None`).
pub struct StageEvent<'a> {
    pub stage: Stage,
    pub iter: usize,
    pub alpha: Option<f64>,
    pub state: &'a LatentState,
    /// Codes the losses were evaluated at in this iteration.
    pub face: &'a LatentWPlus,
    pub hair: &'a LatentWPlus,
}

pub type Observer<'a> = &'a mut dyn FnMut(&StageEvent<'_>);

/// Prepared perceptual targets for one view.
struct ViewTargets {
    view: View,
    per_f: PerceptualTarget,
    per_h: PerceptualTarget,
    per_bg: PerceptualTarget,
    guide: Image,
}

impl ViewTargets {
    fn new<E: PerceptualExtractor>(ext: &E, vg: &ViewGuide, weights: &LossWeights, blur: bool) -> Result<Self> {
        let m = &vg.masks;
        let g = &vg.guide;
        let view = vg.view;
        // Less trustworthy regions: the pasted hair in the face view and the pasted
        // face in the hair view.
        let blur_kernel = || blur.then(|| GaussianBlur::for_resolution(g.width()));
        let (blur_f, blur_h) = match view {
            View::Face => (None, blur_kernel()),
            View::Hair => (blur_kernel(), None),
        };
        Ok(Self {
            view,
            per_f: PerceptualTarget::new(
                ext,
                g,
                &m.m_f,
                &m.m_roni_f,
                weights.region_scale(view, Region::Face),
                blur_f,
            )?,
            per_h: PerceptualTarget::new(
                ext,
                g,
                &m.m_h,
                &m.m_roni_h,
                weights.region_scale(view, Region::Hair),
                blur_h,
            )?,
            per_bg: PerceptualTarget::new(
                ext,
                g,
                &m.m_bg,
                &m.m_bg.not(),
                weights.region_scale(view, Region::Background),
                None,
            )?,
            guide: g.clone(),
        })
    }
}

struct ViewEval {
    terms: LossTerms,
    /// Weighted total excluding the similarity term.
    total: f64,
    grad_wplus: Vec<f64>,
    grad_noise: NoiseMaps,
}

fn check_finite(stage: Stage, iter: usize, view: View, terms: &LossTerms) -> Result<()> {
    if terms.is_finite() {
        return Ok(());
    }
    Err(Error::NumericalFailure {
        stage: stage.name().into(),
        iter,
        detail: format!("{view} view terms {terms:?}"),
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_view<B: GeneratorBackend, E: PerceptualExtractor>(
    backend: &B,
    ext: &E,
    targets: &ViewTargets,
    weights: &LossWeights,
    wplus: &LatentWPlus,
    noise: &NoiseMaps,
    anchor: &LatentW,
    stage: Stage,
    iter: usize,
) -> Result<ViewEval> {
    let syn = backend.forward(wplus, noise)?;
    let img = &syn.image;
    let (per_f, gf) = targets.per_f.loss_with_grad(ext, img)?;
    let (per_h, gh) = targets.per_h.loss_with_grad(ext, img)?;
    let (per_bg, gb) = targets.per_bg.loss_with_grad(ext, img)?;
    let (global, gg) = global_mse32_with_grad(img, &targets.guide, None)?;
    let mut grad_img = Image::new(img.width(), img.height());
    for (i, g) in grad_img.data_mut().iter_mut().enumerate() {
        *g = weights.lambda_p_f * gf.data()[i]
            + weights.lambda_p_h * gh.data()[i]
            + weights.lambda_p_bg * gb.data()[i]
            + weights.lambda_g * gg.data()[i];
    }
    let (ini, gini) = initial_value_loss_with_grad(wplus, anchor);
    let reg = noise_regularization(noise)?;
    let terms = LossTerms {
        per_f,
        per_h,
        per_bg,
        global,
        ini,
        noise: reg.value,
        sim: 0.0,
    };
    check_finite(stage, iter, targets.view, &terms)?;

    let grads = backend.backward(&syn, &grad_img, false);
    let mut grad_wplus = grads.wplus;
    for (g, gi) in grad_wplus.iter_mut().zip(&gini) {
        *g += weights.lambda_i * gi;
    }
    let mut grad_noise = grads.noise;
    for (g, gr) in grad_noise.iter_mut().zip(reg.grad.iter()) {
        *g += weights.lambda_eps * gr;
    }
    Ok(ViewEval {
        total: terms.total(weights),
        terms,
        grad_wplus,
        grad_noise,
    })
}

// The similarity term is a stiff quadratic in `face − hair`. Adam normalizes
// each coordinate separately, so when two codes are stepped directly the
// difference oscillates at the step size and its gradient swamps the second
// moments of the common motion. Stepping `(mean, half-difference)` instead keeps
// the two motions in separate Adam coordinates; the objective is unchanged.

/// `[ (a+b)/2, (a−b)/2 ]`.
fn to_mean_diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
    out.extend(a.iter().zip(b).map(|(x, y)| 0.5 * (x - y)));
    out
}

/// Chain rule for [`to_mean_diff`]: with `a = m + d`, `b = m − d`.
fn to_mean_diff_grad(ga: &[f64], gb: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = ga.iter().zip(gb).map(|(x, y)| x + y).collect();
    out.extend(ga.iter().zip(gb).map(|(x, y)| x - y));
    out
}

fn from_mean_diff(md: &[f64], a: &mut [f64], b: &mut [f64]) {
    let n = a.len();
    for k in 0..n {
        a[k] = md[k] + md[n + k];
        b[k] = md[k] - md[n + k];
    }
}

fn sq_dist_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let g: Vec<f64> = a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect();
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(), g)
}

fn flat_noise(state: &LatentState) -> Vec<f64> {
    state
        .noise_face
        .iter()
        .chain(state.noise_hair.iter())
        .copied()
        .collect()
}

fn set_flat_noise(state: &mut LatentState, v: &[f64]) {
    let n = state.noise_face.len();
    state.noise_face.iter_mut().zip(&v[..n]).for_each(|(a, b)| *a = *b);
    state.noise_hair.iter_mut().zip(&v[n..]).for_each(|(a, b)| *a = *b);
}

fn trace_row(lr: f64, alpha: f64, face: &LossTerms, hair: &LossTerms, total: f64) -> Vec<f64> {
    let mut row = vec![lr, alpha];
    for t in [face, hair] {
        row.extend([t.per_f, t.per_h, t.per_bg, t.global, t.ini, t.noise, t.sim]);
    }
    row.push(total);
    row
}

/// Stage-1 objective at fixed codes: both views' losses plus `λ_s·L_sim` in each.
struct Stage1Eval {
    face: ViewEval,
    hair: ViewEval,
    sim_grad: Vec<f64>,
    total: f64,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_stage1<B: GeneratorBackend, E: PerceptualExtractor>(
    backend: &B,
    ext: &E,
    targets: &[ViewTargets; 2],
    weights: &LossWeights,
    state: &LatentState,
    wp: [&LatentWPlus; 2],
    anchor: &LatentW,
    iter: usize,
) -> Result<Stage1Eval> {
    let Codes::W { face, hair } = &state.codes else {
        return Err(Error::Schema("stage 1 needs W-space codes".into()));
    };
    let mut fe = evaluate_view(
        backend,
        ext,
        &targets[0],
        weights,
        wp[0],
        &state.noise_face,
        anchor,
        Stage::Stage1,
        iter,
    )?;
    let mut he = evaluate_view(
        backend,
        ext,
        &targets[1],
        weights,
        wp[1],
        &state.noise_hair,
        anchor,
        Stage::Stage1,
        iter,
    )?;
    let (sim, sim_grad) = sq_dist_with_grad(face.as_slice(), hair.as_slice());
    fe.terms.sim = sim;
    he.terms.sim = sim;
    let total = fe.total + he.total + 2.0 * weights.lambda_s * sim;
    Ok(Stage1Eval {
        face: fe,
        hair: he,
        sim_grad,
        total,
    })
}

/// W-space hallucination. Both codes start at `w0`; noise starts from
/// `noise_seed`; the shared-tail interpolation weight is drawn from `alpha_seed`.
#[allow(clippy::too_many_arguments)]
pub fn run_stage1<B: GeneratorBackend, E: PerceptualExtractor>(
    guides: &GuidePair,
    backend: &B,
    ext: &E,
    w0: &LatentW,
    sharing: &SharingConfig,
    opts: &LatentStageOptions,
    noise_seed: u64,
    alpha_seed: u64,
    mut observer: Option<Observer<'_>>,
) -> Result<StageResult> {
    let layers = backend.layer_count();
    sharing.validate(layers)?;
    opts.validate()?;
    let schema = backend.noise_schema();
    let mut state = LatentState {
        codes: Codes::W {
            face: w0.clone(),
            hair: w0.clone(),
        },
        noise_face: NoiseMaps::random(&schema, noise_seed),
        noise_hair: NoiseMaps::random(&schema, noise_seed.wrapping_add(1)),
        sharing: *sharing,
        layers,
    };
    let w = &opts.weights;
    let targets = [
        ViewTargets::new(ext, &guides.face, w, false)?,
        ViewTargets::new(ext, &guides.hair, w, false)?,
    ];
    let mut alpha_rng = ChaCha8Rng::seed_from_u64(alpha_seed);
    let mut adam_w = Adam::new(2 * LATENT_DIM, opts.adam);
    let mut adam_n = Adam::new(2 * state.noise_face.len(), opts.adam);
    let mut trace = LossTrace {
        columns: LossTrace::latent_columns(),
        rows: Vec::with_capacity(opts.iters),
    };
    let l = sharing.l;

    for iter in 0..opts.iters {
        let alpha = match sharing.alpha_mode {
            AlphaMode::RandomUniform => alpha_rng.random::<f64>(),
            AlphaMode::Fixed => sharing.alpha_fixed,
        };
        let lr = lr_at(&opts.schedule, iter)?;
        let wp_f = state.assemble(View::Face, alpha);
        let wp_h = state.assemble(View::Hair, alpha);
        if let Some(obs) = observer.as_mut() {
            obs(&StageEvent {
                stage: Stage::Stage1,
                iter,
                alpha: Some(alpha),
                state: &state,
                face: &wp_f,
                hair: &wp_h,
            });
        }
        let ev = evaluate_stage1(backend, ext, &targets, w, &state, [&wp_f, &wp_h], w0, iter)?;
        trace
            .rows
            .push((iter, trace_row(lr, alpha, &ev.face.terms, &ev.hair.terms, ev.total)));

        // Own rows feed the view's code; shared rows split by α between both codes.
        let mut grad = vec![0.0; 2 * LATENT_DIM];
        for (vi, e) in [&ev.face, &ev.hair].into_iter().enumerate() {
            for row in 0..layers {
                let g = &e.grad_wplus[row * LATENT_DIM..(row + 1) * LATENT_DIM];
                if row < l {
                    for (k, v) in g.iter().enumerate() {
                        grad[vi * LATENT_DIM + k] += v;
                    }
                } else {
                    for (k, v) in g.iter().enumerate() {
                        grad[k] += alpha * v;
                        grad[LATENT_DIM + k] += (1.0 - alpha) * v;
                    }
                }
            }
        }
        for (k, s) in ev.sim_grad.iter().enumerate() {
            grad[k] += 2.0 * w.lambda_s * s;
            grad[LATENT_DIM + k] -= 2.0 * w.lambda_s * s;
        }
        let grad_noise: Vec<f64> = ev
            .face
            .grad_noise
            .iter()
            .chain(ev.hair.grad_noise.iter())
            .copied()
            .collect();

        if let Codes::W { face, hair } = &mut state.codes {
            let (f, h) = (face.as_mut_slice(), hair.as_mut_slice());
            let mut flat = to_mean_diff(f, h);
            adam_w.step(
                &mut flat,
                &to_mean_diff_grad(&grad[..LATENT_DIM], &grad[LATENT_DIM..]),
                lr,
            );
            from_mean_diff(&flat, f, h);
        }
        let mut noise = flat_noise(&state);
        adam_n.step(&mut noise, &grad_noise, lr);
        set_flat_noise(&mut state, &noise);
        check_state_finite(&state, Stage::Stage1, iter)?;
    }

    state.quantize();
    let alpha = sharing.render_alpha();
    let wp_f = state.assemble(View::Face, alpha);
    let wp_h = state.assemble(View::Hair, alpha);
    if let Some(obs) = observer.as_mut() {
        obs(&StageEvent {
            stage: Stage::Stage1,
            iter: opts.iters,
            alpha: None,
            state: &state,
            face: &wp_f,
            hair: &wp_h,
        });
    }
    let final_loss = evaluate_stage1(backend, ext, &targets, w, &state, [&wp_f, &wp_h], w0, opts.iters)?.total;
    Ok(StageResult {
        stage: Stage::Stage1,
        o_face: backend.synthesize(&wp_f, &state.noise_face)?,
        o_hair: backend.synthesize(&wp_h, &state.noise_hair)?,
        state,
        params: None,
        trace,
        final_loss,
        flags: Vec::new(),
    })
}

/// Stage-1 codes re-expressed in W+ with shared tail storage.
pub fn lift_to_wplus(state: &LatentState) -> LatentState {
    match &state.codes {
        Codes::W { face, hair } => LatentState {
            codes: Codes::WPlus(SharedWPlus::from_codes(
                face,
                hair,
                state.layers,
                state.sharing.l,
                state.sharing.render_alpha(),
            )),
            ..state.clone()
        },
        Codes::WPlus(_) => state.clone(),
    }
}

fn stage2_eval<B: GeneratorBackend, E: PerceptualExtractor>(
    backend: &B,
    ext: &E,
    targets: &[ViewTargets; 2],
    weights: &LossWeights,
    state: &LatentState,
    anchors: &[LatentW; 2],
    iter: usize,
) -> Result<(ViewEval, ViewEval, Vec<f64>, f64, LatentWPlus, LatentWPlus)> {
    let Codes::WPlus(s) = &state.codes else {
        return Err(Error::Schema("stage 2 needs W+ codes".into()));
    };
    let wp_f = s.wplus(View::Face);
    let wp_h = s.wplus(View::Hair);
    let mut fe = evaluate_view(
        backend,
        ext,
        &targets[0],
        weights,
        &wp_f,
        &state.noise_face,
        &anchors[0],
        Stage::Stage2,
        iter,
    )?;
    let mut he = evaluate_view(
        backend,
        ext,
        &targets[1],
        weights,
        &wp_h,
        &state.noise_hair,
        &anchors[1],
        Stage::Stage2,
        iter,
    )?;
    // Shared rows cancel, so the W+ distance reduces to the own rows.
    let (sim, sim_grad) = sq_dist_with_grad(s.own(View::Face), s.own(View::Hair));
    fe.terms.sim = sim;
    he.terms.sim = sim;
    let total = fe.total + he.total + 2.0 * weights.lambda_s * sim;
    Ok((fe, he, sim_grad, total, wp_f, wp_h))
}

/// W+ refinement against the updated guides. `stage1` supplies the starting codes
/// (and the initial-value anchors) and the noise.
pub fn run_stage2<B: GeneratorBackend, E: PerceptualExtractor>(
    new_guides: &GuidePair,
    stage1: &LatentState,
    backend: &B,
    ext: &E,
    opts: &LatentStageOptions,
    mut observer: Option<Observer<'_>>,
) -> Result<StageResult> {
    opts.validate()?;
    let Codes::W { face, hair } = &stage1.codes else {
        return Err(Error::Schema("stage 2 starts from stage-1 W codes".into()));
    };
    let anchors = [face.clone(), hair.clone()];
    let mut state = lift_to_wplus(stage1);
    let w = &opts.weights;
    let targets = [
        ViewTargets::new(ext, &new_guides.face, w, true)?,
        ViewTargets::new(ext, &new_guides.hair, w, true)?,
    ];
    let l = state.sharing.l;
    let own_len = l * LATENT_DIM;
    let mut adam_w = Adam::new(2 * own_len + (state.layers - l) * LATENT_DIM, opts.adam);
    let mut adam_n = Adam::new(2 * state.noise_face.len(), opts.adam);
    let mut trace = LossTrace {
        columns: LossTrace::latent_columns(),
        rows: Vec::with_capacity(opts.iters),
    };

    for iter in 0..opts.iters {
        let lr = lr_at(&opts.schedule, iter)?;
        let (fe, he, sim_grad, total, wp_f, wp_h) = stage2_eval(backend, ext, &targets, w, &state, &anchors, iter)?;
        if let Some(obs) = observer.as_mut() {
            obs(&StageEvent {
                stage: Stage::Stage2,
                iter,
                alpha: None,
                state: &state,
                face: &wp_f,
                hair: &wp_h,
            });
        }
        trace
            .rows
            .push((iter, trace_row(lr, f64::NAN, &fe.terms, &he.terms, total)));

        let mut grad = vec![0.0; 2 * own_len + (state.layers - l) * LATENT_DIM];
        for (vi, e) in [&fe, &he].into_iter().enumerate() {
            for (k, g) in e.grad_wplus.iter().enumerate() {
                if k < own_len {
                    grad[vi * own_len + k] += g;
                } else {
                    grad[2 * own_len + (k - own_len)] += g;
                }
            }
        }
        for (k, s) in sim_grad.iter().enumerate() {
            grad[k] += 2.0 * w.lambda_s * s;
            grad[own_len + k] -= 2.0 * w.lambda_s * s;
        }
        let grad_noise: Vec<f64> = fe.grad_noise.iter().chain(he.grad_noise.iter()).copied().collect();
        if let Codes::WPlus(s) = &mut state.codes {
            let mut flat = to_mean_diff(&s.face_own, &s.hair_own);
            flat.extend_from_slice(&s.shared);
            let mut g = to_mean_diff_grad(&grad[..own_len], &grad[own_len..2 * own_len]);
            g.extend_from_slice(&grad[2 * own_len..]);
            adam_w.step(&mut flat, &g, lr);
            from_mean_diff(&flat[..2 * own_len], &mut s.face_own, &mut s.hair_own);
            s.shared.copy_from_slice(&flat[2 * own_len..]);
        }
        let mut noise = flat_noise(&state);
        adam_n.step(&mut noise, &grad_noise, lr);
        set_flat_noise(&mut state, &noise);
        check_state_finite(&state, Stage::Stage2, iter)?;
    }

    state.quantize();
    let (_, _, _, final_loss, wp_f, wp_h) = stage2_eval(backend, ext, &targets, w, &state, &anchors, opts.iters)?;
    if let Some(obs) = observer.as_mut() {
        obs(&StageEvent {
            stage: Stage::Stage2,
            iter: opts.iters,
            alpha: None,
            state: &state,
            face: &wp_f,
            hair: &wp_h,
        });
    }
    Ok(StageResult {
        stage: Stage::Stage2,
        o_face: backend.synthesize(&wp_f, &state.noise_face)?,
        o_hair: backend.synthesize(&wp_h, &state.noise_hair)?,
        state,
        params: None,
        trace,
        final_loss,
        flags: Vec::new(),
    })
}

/// Reconstruction loss of both views at the given generator parameters.
fn tuning_reconstruction<B: GeneratorBackend, E: PerceptualExtractor>(
    tuned: &B,
    ext: &E,
    targets: &[PtiTarget; 2],
    codes: &[LatentWPlus; 2],
    noise: [&NoiseMaps; 2],
    want_grad: bool,
) -> Result<([f64; 2], Option<Vec<f64>>)> {
    let mut values = [0.0; 2];
    let mut grad: Option<Vec<f64>> = None;
    for v in 0..2 {
        let syn = tuned.forward(&codes[v], noise[v])?;
        let (value, gimg) = targets[v].loss_with_grad(ext, &syn.image)?;
        values[v] = value;
        if want_grad {
            let g = tuned.backward(&syn, &gimg, true).params.expect("parameter gradients");
            match &mut grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => grad = Some(g),
            }
        }
    }
    Ok((values, grad))
}

/// Generator weight tuning with the codes and noise frozen at `state`.
pub fn run_stage3<B: GeneratorBackend, E: PerceptualExtractor>(
    guides: &GuidePair,
    state: &LatentState,
    backend: &B,
    ext: &E,
    opts: &TuningOptions,
    seed: u64,
    mut observer: Option<Observer<'_>>,
) -> Result<StageResult> {
    if !(opts.lr >= 0.0) || !(opts.lambda_reg >= 0.0) {
        return Err(Error::Config("tuning lr and lambda_reg must be non-negative".into()));
    }
    let codes = [state.render_wplus(View::Face), state.render_wplus(View::Hair)];
    let noise = [&state.noise_face, &state.noise_hair];
    let targets = [
        PtiTarget::new(ext, &guides.face.guide, &build_mraw(&guides.face.masks, View::Face))?,
        PtiTarget::new(ext, &guides.hair.guide, &build_mraw(&guides.hair.masks, View::Hair))?,
    ];
    let w_opt = codes[0].row_mean();
    let mut tuned = backend.clone();
    let mut adam = Adam::new(tuned.params().len(), opts.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = LossTrace {
        columns: LossTrace::tuning_columns(),
        rows: Vec::with_capacity(opts.iters),
    };

    for iter in 0..opts.iters {
        if let Some(obs) = observer.as_mut() {
            obs(&StageEvent {
                stage: Stage::Stage3,
                iter,
                alpha: None,
                state,
                face: &codes[0],
                hair: &codes[1],
            });
        }
        let (values, grad) = tuning_reconstruction(&tuned, ext, &targets, &codes, noise, true)?;
        let mut grad = grad.expect("requested");
        let pti = values[0] + values[1];
        let reg_value = if opts.lambda_reg > 0.0 {
            let reg = pti_regularizer(
                &tuned,
                backend,
                &w_opt,
                opts.alpha_reg,
                &state.noise_face,
                ext,
                &mut rng,
            )?;
            grad.iter_mut()
                .zip(&reg.grad_params)
                .for_each(|(a, b)| *a += opts.lambda_reg * b);
            reg.value
        } else {
            0.0
        };
        let total = pti + opts.lambda_reg * reg_value;
        if !total.is_finite() {
            return Err(Error::NumericalFailure {
                stage: Stage::Stage3.name().into(),
                iter,
                detail: format!("reconstruction {values:?}, regularizer {reg_value}"),
            });
        }
        trace
            .rows
            .push((iter, vec![opts.lr, values[0], values[1], pti, reg_value, total]));
        adam.step(tuned.params_mut(), &grad, opts.lr);
    }

    quantize(tuned.params_mut());
    if let Some(obs) = observer.as_mut() {
        obs(&StageEvent {
            stage: Stage::Stage3,
            iter: opts.iters,
            alpha: None,
            state,
            face: &codes[0],
            hair: &codes[1],
        });
    }
    let (values, _) = tuning_reconstruction(&tuned, ext, &targets, &codes, noise, false)?;
    Ok(StageResult {
        stage: Stage::Stage3,
        o_face: tuned.synthesize(&codes[0], noise[0])?,
        o_hair: tuned.synthesize(&codes[1], noise[1])?,
        state: state.clone(),
        params: Some(tuned.params().to_vec()),
        trace,
        final_loss: values[0] + values[1],
        flags: Vec::new(),
    })
}

/// Source of the background mask of a stage-1 output.
pub trait BackgroundSegmenter: Send + Sync {
    fn background(&self, output: &Image, view: &ViewGuide) -> Result<Mask>;
}

/// Reuses the face image's background, as aligned onto the view's canvas, in place
/// of segmenting the output.
#[derive(Clone, Copy, Debug, Default)]
pub struct InputBackgroundSegmenter;

impl BackgroundSegmenter for InputBackgroundSegmenter {
    fn background(&self, _output: &Image, view: &ViewGuide) -> Result<Mask> {
        Ok(view.face.sem.region(Label::Background).intersect(&view.face.sem.valid))
    }
}

/// `guide ⊙ M_c + output ⊙ ¬M_c`.
pub fn blend_target(guide: &Image, output: &Image, m_c: &Mask) -> Result<Image> {
    guide.check_canvas(output, "target update")?;
    let mut out = output.clone();
    out.copy_from_masked(guide, m_c);
    Ok(out)
}

/// New targets for the W+ stage: guide pixels where the sources are trusted, the
/// stage-1 output elsewhere. Returns the updated pair and any fallback flags.
pub fn update_targets(
    guides: &GuidePair,
    stage1: &StageResult,
    segmenter: &dyn BackgroundSegmenter,
) -> Result<(GuidePair, Vec<String>)> {
    let mut out = guides.clone();
    let mut flags = Vec::new();
    for view in View::BOTH {
        let vg = guides.view(view);
        let o1 = stage1.output(view);
        let m_c = match segmenter.background(o1, vg) {
            Ok(o1_bg) => {
                let f_bg = vg.face.sem.region(Label::Background);
                build_mc(&vg.masks, &o1_bg, &f_bg)
            }
            Err(e) => {
                flags.push(format!(
                    "{view} view: background segmentation failed ({e}); copy mask built without it"
                ));
                erode(&vg.masks.m_f.union(&vg.masks.m_h), vg.masks.radii.copy)
            }
        };
        out.view_mut(view).guide = blend_target(&vg.guide, o1, &m_c)?;
    }
    Ok((out, flags))
}

/// The face-view output, optionally with the input background pasted back inside
/// the eroded `M_bg` behind a two-pixel feathered seam.
pub fn finalize(o_tune_face: &Image, face_input: &Image, masks: &MaskSet, paste_back: bool) -> Result<Image> {
    o_tune_face.check_canvas(face_input, "finalize")?;
    if !paste_back {
        return Ok(o_tune_face.clone());
    }
    let core = erode(&masks.m_bg, masks.radii.paste);
    let ring1 = dilate(&core, 1);
    let ring2 = dilate(&core, 2);
    let mut out = o_tune_face.clone();
    for y in 0..out.height() {
        for x in 0..out.width() {
            let t = if core.get(y, x) {
                1.0
            } else if ring1.get(y, x) {
                2.0 / 3.0
            } else if ring2.get(y, x) {
                1.0 / 3.0
            } else {
                continue;
            };
            let a = face_input.pixel(y, x);
            let b = o_tune_face.pixel(y, x);
            let px = if t == 1.0 {
                a
            } else {
                [0, 1, 2].map(|c| t * a[c] + (1.0 - t) * b[c])
            };
            out.put_pixel(y, x, px);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::MaskRadii;

    fn code(v: f64) -> LatentW {
        LatentW::new(vec![v; LATENT_DIM]).unwrap()
    }

    #[test]
    fn assemble_endpoints() {
        let (f, h) = (code(1.0), code(-1.0));
        let a1 = assemble_wplus_stage1(&f, &h, View::Hair, 1.0, 4, 8);
        for r in 0..4 {
            assert_eq!(a1.row(r), h.as_slice());
        }
        for r in 4..8 {
            assert_eq!(a1.row(r), f.as_slice());
        }
        let a0 = assemble_wplus_stage1(&f, &h, View::Face, 0.0, 4, 8);
        for r in 4..8 {
            assert_eq!(a0.row(r), h.as_slice());
        }
        let same = assemble_wplus_stage1(&f, &f, View::Hair, 0.37, 4, 8);
        for r in 0..8 {
            assert_eq!(same.row(r), f.as_slice());
        }
    }

    #[test]
    fn shared_storage_views_agree_on_tail() {
        let s = SharedWPlus::from_codes(&code(0.2), &code(0.8), 8, 4, 0.25);
        let (f, h) = (s.wplus(View::Face), s.wplus(View::Hair));
        for r in 4..8 {
            assert_eq!(f.row(r), h.row(r));
            assert!((f.row(r)[0] - (0.25 * 0.2 + 0.75 * 0.8)).abs() < 1e-15);
        }
        assert_eq!(f.row(0)[0], 0.2);
        assert_eq!(h.row(0)[0], 0.8);
    }

    #[test]
    fn sharing_bounds_checked() {
        let s = SharingConfig {
            l: 0,
            ..SharingConfig::default()
        };
        assert!(s.validate(8).is_err());
        let s = SharingConfig {
            l: 9,
            ..SharingConfig::default()
        };
        assert!(s.validate(8).is_err());
        assert!(SharingConfig::default().validate(8).is_ok());
    }

    #[test]
    fn blend_extremes() {
        let g = Image::filled(8, 8, [0.9, 0.1, 0.4]);
        let o = Image::filled(8, 8, [0.2, 0.3, 0.7]);
        assert_eq!(blend_target(&g, &o, &Mask::full(8, 8)).unwrap(), g);
        assert_eq!(blend_target(&g, &o, &Mask::empty(8, 8)).unwrap(), o);
    }

    #[test]
    fn finalize_without_background_is_identity() {
        let o = Image::filled(16, 16, [0.3; 3]);
        let i = Image::filled(16, 16, [0.8; 3]);
        let masks = MaskSet {
            m_f: Mask::empty(16, 16),
            m_h: Mask::empty(16, 16),
            m_bg: Mask::empty(16, 16),
            m_roni_f: Mask::empty(16, 16),
            m_roni_h: Mask::empty(16, 16),
            m_out: Mask::empty(16, 16),
            radii: MaskRadii::REFERENCE,
        };
        assert_eq!(finalize(&o, &i, &masks, true).unwrap(), o);
        let full = MaskSet {
            m_bg: Mask::full(16, 16),
            ..masks.clone()
        };
        assert_eq!(finalize(&o, &i, &full, false).unwrap(), o);
        let pasted = finalize(&o, &i, &full, true).unwrap();
        assert_eq!(pasted.pixel(8, 8), [0.8; 3]);
        assert_eq!(pasted.pixel(0, 0), [0.3; 3]);
    }
}
