//! Latent codes, noise maps, the generator backend contract and the
//! learning-rate schedule shared by the optimization stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, Image};

/// Width of one latent row.
pub const LATENT_DIM: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentW(Vec<f64>);

impl LatentW {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        if vector.len() != LATENT_DIM {
            return Err(Error::Schema(format!(
                "latent of length {}, expected {LATENT_DIM}",
                vector.len()
            )));
        }
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(Error::Range("non-finite latent entry".into()));
        }
        Ok(Self(vector))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; LATENT_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Broadcasts this code into every row of a W+ code.
    pub fn replicate(&self, layers: usize) -> LatentWPlus {
        let mut rows = Vec::with_capacity(layers * LATENT_DIM);
        for _ in 0..layers {
            rows.extend_from_slice(&self.0);
        }
        LatentWPlus { layers, rows }
    }

    pub fn distance(&self, other: &LatentW) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-layer latent code, `layers × 512`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentWPlus {
    layers: usize,
    rows: Vec<f64>,
}

impl LatentWPlus {
    pub fn new(layers: usize, rows: Vec<f64>) -> Result<Self> {
        if rows.len() != layers * LATENT_DIM {
            return Err(Error::Schema(format!(
                "W+ buffer of {} values for {layers} layers",
                rows.len()
            )));
        }
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::Range("non-finite W+ entry".into()));
        }
        Ok(Self { layers, rows })
    }

    pub fn layer_count(&self) -> usize {
        self.layers
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * LATENT_DIM..(i + 1) * LATENT_DIM]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.rows[i * LATENT_DIM..(i + 1) * LATENT_DIM]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rows
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.rows
    }

    /// Mean of all rows, used where a single W code stands for the whole stack.
    pub fn row_mean(&self) -> LatentW {
        let mut out = vec![0.0; LATENT_DIM];
        for i in 0..self.layers {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= self.layers as f64;
        }
        LatentW(out)
    }
}

/// One noise grid per generator noise input.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMaps {
    pub maps: Vec<Grid>,
}

impl NoiseMaps {
    pub fn zeros(schema: &[usize]) -> Self {
        Self {
            maps: schema.iter().map(|&r| Grid::zeros(r, r)).collect(),
        }
    }

    /// Standard-normal maps following `schema`.
    pub fn random(schema: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            maps: schema
                .iter()
                .map(|&r| Grid {
                    width: r,
                    height: r,
                    data: (0..r * r).map(|_| StandardNormal.sample(&mut rng)).collect(),
                })
                .collect(),
        }
    }

    pub fn check_schema(&self, schema: &[usize]) -> Result<()> {
        if self.maps.len() != schema.len()
            || self
                .maps
                .iter()
                .zip(schema)
                .any(|(m, &r)| m.width != r || m.height != r)
        {
            return Err(Error::Schema(format!(
                "noise maps {:?} do not match schema {schema:?}",
                self.maps.iter().map(|m| m.width).collect::<Vec<_>>()
            )));
        }
        if !self.is_finite() {
            return Err(Error::Range("non-finite noise entry".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.maps.iter().all(|m| m.data.iter().all(|v| v.is_finite()))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            maps: self.maps.iter().map(|m| Grid::zeros(m.width, m.height)).collect(),
        }
    }

    /// Flat view over all samples, map by map.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.maps.iter().flat_map(|m| m.data.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.maps.iter_mut().flat_map(|m| m.data.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.maps.iter().map(|m| m.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients produced by a backend's backward pass.
#[derive(Clone, Debug)]
pub struct BackendGrads {
    pub wplus: Vec<f64>,
    pub noise: NoiseMaps,
    /// Present only when parameter gradients were requested.
    pub params: Option<Vec<f64>>,
}

/// Output of a differentiable forward pass: the image plus whatever the backend
/// needs to run backward.
pub struct Synthesis<T> {
    pub image: Image,
    pub tape: T,
}

/// Contract for an image generator driven by per-layer latent codes and noise.
///
/// Synthesis must be deterministic in `(w+, noise, params)` and differentiable with
/// respect to all three.
pub trait GeneratorBackend: Clone + Send + Sync {
    type Tape: Send;

    fn layer_count(&self) -> usize;

    fn output_resolution(&self) -> usize;

    /// Side length of every noise input, in order.
    fn noise_schema(&self) -> Vec<usize>;

    /// Maps a standard-normal vector to W. Backends without a mapping network
    /// report [`Error::UnsupportedBackend`].
    fn map_latent(&self, _z: &[f64]) -> Result<LatentW> {
        Err(Error::UnsupportedBackend("backend exposes no mapping function".into()))
    }

    fn forward(&self, wplus: &LatentWPlus, noise: &NoiseMaps) -> Result<Synthesis<Self::Tape>>;

    /// Backpropagates `grad_image` (dLoss/dImage) through a previous forward pass.
    fn backward(&self, synthesis: &Synthesis<Self::Tape>, grad_image: &Image, want_params: bool) -> BackendGrads;

    /// Flat trainable parameter vector θ.
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn synthesize(&self, wplus: &LatentWPlus, noise: &NoiseMaps) -> Result<Image> {
        Ok(self.forward(wplus, noise)?.image)
    }

    fn check_inputs(&self, wplus: &LatentWPlus, noise: &NoiseMaps) -> Result<()> {
        if wplus.layer_count() != self.layer_count() {
            return Err(Error::Schema(format!(
                "W+ has {} layers, backend expects {}",
                wplus.layer_count(),
                self.layer_count()
            )));
        }
        noise.check_schema(&self.noise_schema())
    }
}

/// Maps one seeded standard-normal draw.
pub fn sample_latent<B: GeneratorBackend>(backend: &B, seed: u64) -> Result<LatentW> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..LATENT_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    backend.map_latent(&z)
}

/// Averages `sample_count` mapped standard-normal draws.
pub fn estimate_mean_latent<B: GeneratorBackend>(backend: &B, sample_count: usize, seed: u64) -> Result<LatentW> {
    if sample_count == 0 {
        return Err(Error::Range("sample_count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; LATENT_DIM];
    let mut z = vec![0.0; LATENT_DIM];
    for _ in 0..sample_count {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let w = backend.map_latent(&z)?;
        for (a, v) in acc.iter_mut().zip(w.as_slice()) {
            *a += v;
        }
    }
    let n = sample_count as f64;
    LatentW::new(acc.into_iter().map(|v| v / n).collect())
}

/// Linear warm-up, flat peak, cosine ramp-down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub ramp_up_frac: f64,
    pub ramp_down_frac: f64,
    pub total_iters: usize,
}

impl LrSchedule {
    pub fn new(total_iters: usize) -> Self {
        Self {
            peak: 0.1,
            ramp_up_frac: 0.05,
            ramp_down_frac: 0.25,
            total_iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ramp_up_frac < 0.0 || self.ramp_down_frac < 0.0 || self.ramp_up_frac + self.ramp_down_frac > 1.0 {
            return Err(Error::Config(format!(
                "ramp fractions {} + {} must be non-negative and sum to at most 1",
                self.ramp_up_frac, self.ramp_down_frac
            )));
        }
        if !(self.peak >= 0.0) {
            return Err(Error::Config(format!("peak lr {} must be >= 0", self.peak)));
        }
        Ok(())
    }

    /// Iteration at which the flat peak begins.
    pub fn ramp_up_iters(&self) -> usize {
        (self.ramp_up_frac * self.total_iters as f64).round() as usize
    }

    /// Length of the final cosine window.
    pub fn ramp_down_iters(&self) -> usize {
        (self.ramp_down_frac * self.total_iters as f64).round() as usize
    }
}

/// Learning rate at `iter`.
///
/// With `U` ramp-up and `D` ramp-down iterations out of `T`: `peak·iter/U` for
/// `iter < U`, `peak` until `T − D`, then `peak·½(1 + cos(π·t))` where
/// `t = (iter − (T − D))/D`.
pub fn lr_at(schedule: &LrSchedule, iter: usize) -> Result<f64> {
    if iter >= schedule.total_iters {
        return Err(Error::Range(format!(
            "iteration {iter} outside schedule of {} iterations",
            schedule.total_iters
        )));
    }
    let up = schedule.ramp_up_iters();
    let down = schedule.ramp_down_iters();
    let down_start = schedule.total_iters - down;
    if iter < up {
        return Ok(schedule.peak * iter as f64 / up as f64);
    }
    if iter < down_start || down == 0 {
        return Ok(schedule.peak);
    }
    let t = (iter - down_start) as f64 / down as f64;
    Ok(schedule.peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_breakpoints() {
        let s = LrSchedule::new(1000);
        assert_eq!(lr_at(&s, 0).unwrap(), 0.0);
        assert_eq!(lr_at(&s, 50).unwrap(), 0.1);
        assert_eq!(lr_at(&s, 749).unwrap(), 0.1);
        assert!((lr_at(&s, 875).unwrap() - 0.05).abs() < 1e-15);
        assert!(lr_at(&s, 999).unwrap() >= 0.0);
        assert!(matches!(lr_at(&s, 1000), Err(Error::Range(_))));
    }

    #[test]
    fn lr_half_length_schedule() {
        let s = LrSchedule::new(500);
        assert_eq!(s.ramp_up_iters(), 25);
        assert_eq!(s.ramp_down_iters(), 125);
        assert_eq!(lr_at(&s, 25).unwrap(), 0.1);
    }

    #[test]
    fn lr_continuity_at_boundaries() {
        // Each boundary may jump by at most one warm-up step or one cosine step.
        for total in [40usize, 100, 500, 1000, 1337] {
            let s = LrSchedule::new(total);
            let warm_step = s.peak / s.ramp_up_iters() as f64;
            let cos_step = s.peak * std::f64::consts::PI / (2.0 * s.ramp_down_iters() as f64);
            let up = s.ramp_up_iters();
            let jump = lr_at(&s, up).unwrap() - lr_at(&s, up - 1).unwrap();
            assert!(jump.abs() <= warm_step + 1e-12, "total {total}: warm-up jump {jump}");
            let down = total - s.ramp_down_iters();
            let jump = lr_at(&s, down - 1).unwrap() - lr_at(&s, down).unwrap();
            assert!(jump.abs() <= cos_step, "total {total}: ramp-down jump {jump}");
        }
    }

    #[test]
    fn invalid_ramps_rejected() {
        let mut s = LrSchedule::new(10);
        s.ramp_up_frac = 0.8;
        s.ramp_down_frac = 0.3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn latent_shape_checked() {
        assert!(LatentW::new(vec![0.0; 3]).is_err());
        assert!(LatentWPlus::new(2, vec![0.0; LATENT_DIM]).is_err());
        assert!(LatentW::new(vec![f64::NAN; LATENT_DIM]).is_err());
    }
}
