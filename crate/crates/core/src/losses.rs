//! Loss terms for the latent and weight-tuning stages.
//!
//! Every image loss returns its value together with the gradient with respect to
//! the generated image `O`; the guide is treated as a constant target.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{GeneratorBackend, LatentW, LatentWPlus, NoiseMaps, LATENT_DIM};
use crate::raster::{Grid, Image, Mask};
use crate::semantics::View;
use crate::toy::{conv3x3, conv3x3_backward};

/// One scale of deep features, `[channel][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl PixelRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

/// Patch-local deep feature extractor.
///
/// A feature at scale `s`, location `(y, x)` may depend only on input pixels inside
/// [`PerceptualExtractor::receptive_field`]; extraction is deterministic.
pub trait PerceptualExtractor: Send + Sync {
    type Tape: Send;

    /// Downsampling factor of each feature scale relative to the input.
    fn scale_factors(&self) -> Vec<usize>;

    /// Non-negative per-channel weights applied to squared feature differences.
    fn channel_weights(&self, scale: usize) -> &[f64];

    fn extract(&self, img: &Image) -> Result<(Vec<FeatureMap>, Self::Tape)>;

    /// Gradient with respect to the input image given feature gradients.
    fn backward(&self, tape: &Self::Tape, grads: &[FeatureMap]) -> Image;

    fn receptive_field(&self, scale: usize, y: usize, x: usize, height: usize, width: usize) -> PixelRect;

    fn features(&self, img: &Image) -> Result<Vec<FeatureMap>> {
        Ok(self.extract(img)?.0)
    }
}

/// Fixed-seed three-scale pyramid of 3×3 convolutions with `tanh`, standing in for
/// a learned perceptual network.
#[derive(Clone, Debug)]
pub struct ToyExtractor {
    channels: usize,
    kernels: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

pub struct ToyExtractorTape {
    pooled: Vec<Image>,
    features: Vec<FeatureMap>,
}

impl ToyExtractor {
    pub const SCALES: usize = 3;

    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        let channels = 8;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let scale = 2.0 / (27.0f64).sqrt();
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut weights = Vec::new();
        for _ in 0..Self::SCALES {
            kernels.push(
                (0..channels * 27)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        v * scale
                    })
                    .collect(),
            );
            biases.push(
                (0..channels)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        0.1 * v
                    })
                    .collect(),
            );
            weights.push(vec![1.0 / channels as f64; channels]);
        }
        Self {
            channels,
            kernels,
            biases,
            weights,
        }
    }
}

impl Default for ToyExtractor {
    fn default() -> Self {
        Self::new(0)
    }
}

impl PerceptualExtractor for ToyExtractor {
    type Tape = ToyExtractorTape;

    fn scale_factors(&self) -> Vec<usize> {
        (0..Self::SCALES).map(|s| 1 << s).collect()
    }

    fn channel_weights(&self, scale: usize) -> &[f64] {
        &self.weights[scale]
    }

    fn extract(&self, img: &Image) -> Result<(Vec<FeatureMap>, ToyExtractorTape)> {
        if img.width() != img.height() {
            return Err(Error::Schema("toy extractor needs square images".into()));
        }
        let mut pooled = Vec::with_capacity(Self::SCALES);
        let mut features = Vec::with_capacity(Self::SCALES);
        for (s, factor) in self.scale_factors().into_iter().enumerate() {
            let p = img.downsample(factor)?;
            let r = p.width();
            let plane = r * r;
            let mut out = vec![0.0; self.channels * plane];
            for (o, b) in self.biases[s].iter().enumerate() {
                out[o * plane..(o + 1) * plane].fill(*b);
            }
            conv3x3(p.data(), &self.kernels[s], 3, self.channels, r, &mut out);
            for v in &mut out {
                *v = v.tanh();
            }
            features.push(FeatureMap {
                channels: self.channels,
                height: r,
                width: r,
                data: out,
            });
            pooled.push(p);
        }
        Ok((features.clone(), ToyExtractorTape { pooled, features }))
    }

    fn backward(&self, tape: &ToyExtractorTape, grads: &[FeatureMap]) -> Image {
        let factors = self.scale_factors();
        let full = tape.pooled[0].width();
        let mut out = Image::new(full, full);
        for (s, g) in grads.iter().enumerate() {
            let f = &tape.features[s];
            let dpre: Vec<f64> = g.data.iter().zip(&f.data).map(|(g, t)| g * (1.0 - t * t)).collect();
            let p = &tape.pooled[s];
            let (_, dp) = conv3x3_backward(p.data(), &self.kernels[s], &dpre, 3, self.channels, p.width());
            let dp = Image::from_planar(p.width(), p.height(), dp).expect("pooled shape");
            let up = Image::downsample_backward(&dp, factors[s]);
            for (o, v) in out.data_mut().iter_mut().zip(up.data()) {
                *o += v;
            }
        }
        out
    }

    fn receptive_field(&self, scale: usize, y: usize, x: usize, height: usize, width: usize) -> PixelRect {
        let f = 1usize << scale;
        PixelRect {
            y0: y.saturating_sub(1) * f,
            y1: ((y + 2) * f).min(height),
            x0: x.saturating_sub(1) * f,
            x1: ((x + 2) * f).min(width),
        }
    }
}

/// Separable Gaussian blur with edge clamping.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBlur {
    taps: Vec<f64>,
    radius: usize,
}

impl GaussianBlur {
    pub fn new(sigma: f64, radius: usize) -> Self {
        let mut taps: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let d = i as f64 - radius as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let sum: f64 = taps.iter().sum();
        for t in &mut taps {
            *t /= sum;
        }
        Self { taps, radius }
    }

    /// 9×9, σ = 3 at a 256 px canvas, both scaled with the canvas size.
    pub fn for_resolution(resolution: usize) -> Self {
        let scale = resolution as f64 / 256.0;
        let radius = ((4.0 * scale).round() as usize).max(1);
        Self::new(3.0 * scale, radius)
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    fn pass(&self, img: &Image, horizontal: bool, adjoint: bool) -> Image {
        let (w, h) = (img.width(), img.height());
        let mut out = Image::new(w, h);
        let r = self.radius as isize;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = img.get(c, y, x);
                    for (i, &t) in self.taps.iter().enumerate() {
                        let d = i as isize - r;
                        let (sy, sx) = if horizontal {
                            (y as isize, (x as isize + d).clamp(0, w as isize - 1))
                        } else {
                            ((y as isize + d).clamp(0, h as isize - 1), x as isize)
                        };
                        let (sy, sx) = (sy as usize, sx as usize);
                        if adjoint {
                            let cur = out.get(c, sy, sx);
                            out.set(c, sy, sx, cur + t * v);
                        } else {
                            let cur = out.get(c, y, x);
                            out.set(c, y, x, cur + t * img.get(c, sy, sx));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn apply(&self, img: &Image) -> Image {
        self.pass(&self.pass(img, true, false), false, false)
    }

    /// Adjoint of [`GaussianBlur::apply`].
    pub fn backward(&self, grad: &Image) -> Image {
        self.pass(&self.pass(grad, false, true), true, true)
    }
}

/// Blur used to deprioritize less trustworthy guide regions.
pub fn blur_for_deprioritization(img: &Image) -> Image {
    GaussianBlur::for_resolution(img.width()).apply(img)
}

/// Weighted squared feature distance, optionally restricted to `roi` (downsampled to
/// each scale with any-coverage thresholding), averaged over locations and summed
/// over scales. Returns the distance and its gradient w.r.t. `a`'s features.
fn feature_distance(
    weights: impl Fn(usize) -> Vec<f64>,
    fa: &[FeatureMap],
    fb: &[FeatureMap],
    roi: Option<&[Mask]>,
) -> (f64, Vec<FeatureMap>) {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(fa.len());
    for (s, (a, b)) in fa.iter().zip(fb).enumerate() {
        let plane = a.height * a.width;
        let norm = 1.0 / plane as f64;
        let w = weights(s);
        let mut g = vec![0.0; a.data.len()];
        let mut acc = 0.0;
        for (ch, &wc) in w.iter().enumerate().take(a.channels) {
            for p in 0..plane {
                if let Some(m) = roi {
                    if !m[s].bits()[p] {
                        continue;
                    }
                }
                let i = ch * plane + p;
                let d = a.data[i] - b.data[i];
                acc += wc * d * d;
                g[i] = 2.0 * wc * d * norm;
            }
        }
        total += acc * norm;
        grads.push(FeatureMap {
            channels: a.channels,
            height: a.height,
            width: a.width,
            data: g,
        });
    }
    (total, grads)
}

fn roi_pyramid<E: PerceptualExtractor>(ext: &E, roi: &Mask) -> Vec<Mask> {
    ext.scale_factors().into_iter().map(|f| roi.downsample_any(f)).collect()
}

/// Unmasked perceptual distance between two images (LPIPS analogue).
pub fn perceptual_distance<E: PerceptualExtractor>(ext: &E, a: &Image, b: &Image) -> Result<f64> {
    Ok(perceptual_distance_with_grad(ext, a, b)?.0)
}

pub fn perceptual_distance_with_grad<E: PerceptualExtractor>(ext: &E, a: &Image, b: &Image) -> Result<(f64, Image)> {
    a.check_canvas(b, "perceptual distance")?;
    let (fa, tape) = ext.extract(a)?;
    let fb = ext.features(b)?;
    let (v, g) = feature_distance(|s| ext.channel_weights(s).to_vec(), &fa, &fb, None);
    Ok((v, ext.backward(&tape, &g)))
}

/// A guide prepared once for repeated masked-perceptual evaluation: pre-masked,
/// optionally blurred, features extracted.
pub struct PerceptualTarget {
    roi: Vec<Mask>,
    keep: Mask,
    roni: Mask,
    blur: Option<GaussianBlur>,
    features: Vec<FeatureMap>,
    weight: f64,
    empty: bool,
}

impl PerceptualTarget {
    pub fn new<E: PerceptualExtractor>(
        ext: &E,
        guide: &Image,
        roi: &Mask,
        roni: &Mask,
        weight: f64,
        blur: Option<GaussianBlur>,
    ) -> Result<Self> {
        if roi.width() != guide.width() || roi.height() != guide.height() || !roi.same_canvas(roni) {
            return Err(Error::Canvas("perceptual masks do not match the guide".into()));
        }
        let mut g = guide.zero_inside(roni);
        if let Some(b) = &blur {
            g = b.apply(&g);
        }
        Ok(Self {
            roi: roi_pyramid(ext, roi),
            keep: roni.not(),
            roni: roni.clone(),
            blur,
            features: ext.features(&g)?,
            weight,
            empty: roi.is_empty(),
        })
    }

    /// Loss and gradient w.r.t. the generated image.
    pub fn loss_with_grad<E: PerceptualExtractor>(&self, ext: &E, output: &Image) -> Result<(f64, Image)> {
        if self.empty || self.weight == 0.0 {
            return Ok((0.0, Image::new(output.width(), output.height())));
        }
        let mut o = output.zero_inside(&self.roni);
        if let Some(b) = &self.blur {
            o = b.apply(&o);
        }
        let (fo, tape) = ext.extract(&o)?;
        let (v, g) = feature_distance(
            |s| ext.channel_weights(s).to_vec(),
            &fo,
            &self.features,
            Some(&self.roi),
        );
        let mut grad = ext.backward(&tape, &g);
        if let Some(b) = &self.blur {
            grad = b.backward(&grad);
        }
        // Pre-masked pixels were replaced by constants.
        let n = grad.width() * grad.height();
        for (i, keep) in self.keep.bits().iter().enumerate() {
            if !keep {
                for c in 0..3 {
                    grad.data_mut()[c * n + i] = 0.0;
                }
            }
        }
        let w = self.weight;
        Ok((w * v, grad.map(|x| w * x)))
    }

    pub fn loss<E: PerceptualExtractor>(&self, ext: &E, output: &Image) -> Result<f64> {
        Ok(self.loss_with_grad(ext, output)?.0)
    }
}

/// Masked perceptual loss with RGB pre-masking: both images are zeroed inside
/// `m_roni`, features are compared only where `m_roi` (per scale) is set, and the
/// result is scaled by `lambda`.
pub fn masked_perceptual<E: PerceptualExtractor>(
    output: &Image,
    guide: &Image,
    m_roi: &Mask,
    m_roni: &Mask,
    ext: &E,
    lambda: f64,
) -> Result<f64> {
    output.check_canvas(guide, "masked perceptual")?;
    PerceptualTarget::new(ext, guide, m_roi, m_roni, lambda, None)?.loss(ext, output)
}

pub fn masked_perceptual_with_grad<E: PerceptualExtractor>(
    output: &Image,
    guide: &Image,
    m_roi: &Mask,
    m_roni: &Mask,
    ext: &E,
    lambda: f64,
    blur: bool,
) -> Result<(f64, Image)> {
    output.check_canvas(guide, "masked perceptual")?;
    let blur = blur.then(|| GaussianBlur::for_resolution(guide.width()));
    PerceptualTarget::new(ext, guide, m_roi, m_roni, lambda, blur)?.loss_with_grad(ext, output)
}

const MSE_GRID: usize = 32;

fn mse_factor(img: &Image) -> Result<usize> {
    if !img.width().is_multiple_of(MSE_GRID) || !img.height().is_multiple_of(MSE_GRID) || img.width() != img.height() {
        return Err(Error::Schema(format!(
            "32x32 MSE needs a square canvas that is a multiple of 32, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(img.width() / MSE_GRID)
}

/// Mean squared error between 32×32 area-downsampled images. With `mask`, only
/// coarse cells covered by the mask (any coverage) contribute; the mean still runs
/// over all 1024 cells.
pub fn global_mse32(output: &Image, guide: &Image, mask: Option<&Mask>) -> Result<f64> {
    Ok(global_mse32_with_grad(output, guide, mask)?.0)
}

pub fn global_mse32_with_grad(output: &Image, guide: &Image, mask: Option<&Mask>) -> Result<(f64, Image)> {
    output.check_canvas(guide, "global mse")?;
    let f = mse_factor(output)?;
    let a = output.downsample(f)?;
    let b = guide.downsample(f)?;
    let cells = mask.map(|m| m.downsample_any(f));
    let n = (3 * MSE_GRID * MSE_GRID) as f64;
    let mut g = Image::new(MSE_GRID, MSE_GRID);
    let mut acc = 0.0;
    for c in 0..3 {
        for y in 0..MSE_GRID {
            for x in 0..MSE_GRID {
                if let Some(m) = &cells {
                    if !m.get(y, x) {
                        continue;
                    }
                }
                let d = a.get(c, y, x) - b.get(c, y, x);
                acc += d * d;
                g.set(c, y, x, 2.0 * d / n);
            }
        }
    }
    Ok((acc / n, Image::downsample_backward(&g, f)))
}

/// Plain full-resolution mean squared error.
pub fn mse_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    a.check_canvas(b, "mse")?;
    let n = a.data().len() as f64;
    let mut g = Image::new(a.width(), a.height());
    let mut acc = 0.0;
    for ((gv, x), y) in g.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        let d = x - y;
        acc += d * d;
        *gv = 2.0 * d / n;
    }
    Ok((acc / n, g))
}

/// `Σ_rows ‖w_row − w0‖²`.
pub fn initial_value_loss(w: &LatentWPlus, w0: &LatentW) -> f64 {
    initial_value_loss_with_grad(w, w0).0
}

pub fn initial_value_loss_with_grad(w: &LatentWPlus, w0: &LatentW) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; w.as_slice().len()];
    let mut acc = 0.0;
    for i in 0..w.layer_count() {
        for (j, (a, b)) in w.row(i).iter().zip(w0.as_slice()).enumerate() {
            let d = a - b;
            acc += d * d;
            grad[i * LATENT_DIM + j] = 2.0 * d;
        }
    }
    (acc, grad)
}

/// `‖a − b‖²` over W or W+ codes; the gradient w.r.t. `b` is the negation.
pub fn latent_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(latent_similarity_with_grad(a, b)?.0)
}

pub fn latent_similarity_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::Schema(format!("latent lengths {} and {}", a.len(), b.len())));
    }
    let grad: Vec<f64> = a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect();
    let v = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((v, grad))
}

#[derive(Clone, Debug)]
pub struct NoiseRegularization {
    pub value: f64,
    pub grad: NoiseMaps,
    /// Indices of zero-variance maps, which contribute nothing.
    pub degenerate: Vec<usize>,
}

fn pool2(g: &Grid) -> Grid {
    let (w, h) = (g.width / 2, g.height / 2);
    let mut out = Grid::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let s =
                g.get(2 * y, 2 * x) + g.get(2 * y, 2 * x + 1) + g.get(2 * y + 1, 2 * x) + g.get(2 * y + 1, 2 * x + 1);
            out.set(y, x, 0.25 * s);
        }
    }
    out
}

fn pool2_backward(g: &Grid) -> Grid {
    let mut out = Grid::zeros(g.width * 2, g.height * 2);
    for y in 0..out.height {
        for x in 0..out.width {
            out.set(y, x, 0.25 * g.get(y / 2, x / 2));
        }
    }
    out
}

/// Horizontal one-pixel wrap-around shift: `H(n)[y][x] = n[y][(x + 1) mod w]`.
pub fn shift_h(g: &Grid) -> Grid {
    let mut out = Grid::zeros(g.width, g.height);
    for y in 0..g.height {
        for x in 0..g.width {
            out.set(y, x, g.get(y, (x + 1) % g.width));
        }
    }
    out
}

/// Vertical one-pixel wrap-around shift.
pub fn shift_v(g: &Grid) -> Grid {
    let mut out = Grid::zeros(g.width, g.height);
    for y in 0..g.height {
        for x in 0..g.width {
            out.set(y, x, g.get((y + 1) % g.height, x));
        }
    }
    out
}

/// Normalized spatial autocorrelation penalty over each map's 2× average-pooling
/// pyramid down to 8×8.
pub fn noise_regularization(noise: &NoiseMaps) -> Result<NoiseRegularization> {
    let mut value = 0.0;
    let mut grad = noise.zeros_like();
    let mut degenerate = Vec::new();
    for (idx, map) in noise.maps.iter().enumerate() {
        if map.width < 8 || map.height < 8 {
            return Err(Error::Schema(format!(
                "noise map {idx} is {}x{}, regularization needs at least 8x8",
                map.width, map.height
            )));
        }
        let n = map.data.len() as f64;
        let mean = map.data.iter().sum::<f64>() / n;
        let var = map.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        // Rounding leaves a tiny residual variance on constant maps.
        if !var.is_finite() || var.sqrt() <= 1e-12 * mean.abs().max(1.0) {
            degenerate.push(idx);
            continue;
        }
        let std = var.sqrt();
        let normalized = Grid {
            width: map.width,
            height: map.height,
            data: map.data.iter().map(|v| (v - mean) / std).collect(),
        };

        let mut levels = vec![normalized];
        loop {
            let cur = levels.last().expect("non-empty");
            if cur.width <= 8 || cur.height <= 8 {
                break;
            }
            if cur.width % 2 != 0 || cur.height % 2 != 0 {
                return Err(Error::Schema(format!(
                    "noise map {idx} level {}x{} cannot be halved",
                    cur.width, cur.height
                )));
            }
            let next = pool2(cur);
            levels.push(next);
        }

        let mut level_grads: Vec<Grid> = Vec::with_capacity(levels.len());
        for lvl in &levels {
            let m = lvl.data.len() as f64;
            let h = shift_h(lvl);
            let v = shift_v(lvl);
            let ch: f64 = lvl.data.iter().zip(&h.data).map(|(a, b)| a * b).sum::<f64>() / m;
            let cv: f64 = lvl.data.iter().zip(&v.data).map(|(a, b)| a * b).sum::<f64>() / m;
            value += ch * ch + cv * cv;
            // d/dn mean(n ⊙ shift(n)) = (shift(n) + shift⁻¹(n)) / m.
            let mut g = Grid::zeros(lvl.width, lvl.height);
            for y in 0..lvl.height {
                for x in 0..lvl.width {
                    let xl = (x + lvl.width - 1) % lvl.width;
                    let yu = (y + lvl.height - 1) % lvl.height;
                    let dh = lvl.get(y, (x + 1) % lvl.width) + lvl.get(y, xl);
                    let dv = lvl.get((y + 1) % lvl.height, x) + lvl.get(yu, x);
                    g.set(y, x, 2.0 * ch * dh / m + 2.0 * cv * dv / m);
                }
            }
            level_grads.push(g);
        }
        for k in (1..level_grads.len()).rev() {
            let up = pool2_backward(&level_grads[k]);
            for (a, b) in level_grads[k - 1].data.iter_mut().zip(&up.data) {
                *a += b;
            }
        }
        let gy = &level_grads[0];
        let y = &levels[0];
        let gmean = gy.data.iter().sum::<f64>() / n;
        let gymean = gy.data.iter().zip(&y.data).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((out, g), yv) in grad.maps[idx].data.iter_mut().zip(&gy.data).zip(&y.data) {
            *out = (g - gmean - yv * gymean) / std;
        }
    }
    Ok(NoiseRegularization {
        value,
        grad,
        degenerate,
    })
}

/// Balancing weights for one latent-optimization stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_p_f: f64,
    pub lambda_p_h: f64,
    pub lambda_p_bg: f64,
    pub lambda_g: f64,
    pub lambda_i: f64,
    pub lambda_eps: f64,
    pub lambda_s: f64,
    /// Boost for perceptual terms whose region holds the view's own original pixels.
    pub roi_boost: f64,
}

impl LossWeights {
    pub fn stage1() -> Self {
        Self {
            lambda_p_f: 2.0,
            lambda_p_h: 1.0,
            lambda_p_bg: 0.66,
            lambda_g: 2.0,
            lambda_i: 4.0,
            lambda_eps: 1e5,
            lambda_s: 3.0,
            roi_boost: 6.0,
        }
    }

    pub fn stage2() -> Self {
        Self {
            lambda_p_f: 1.0,
            lambda_p_h: 2.0,
            lambda_p_bg: 1.0,
            lambda_g: 2.0,
            lambda_i: 4.0,
            lambda_eps: 1e5,
            lambda_s: 2.0,
            roi_boost: 4.0,
        }
    }

    /// `(λ_p^f, λ_p^h, λ_p^bg, λ_g, λ_i, λ_ε, λ_s)`.
    pub fn as_tuple(&self) -> [f64; 7] {
        [
            self.lambda_p_f,
            self.lambda_p_h,
            self.lambda_p_bg,
            self.lambda_g,
            self.lambda_i,
            self.lambda_eps,
            self.lambda_s,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.as_tuple();
        if all.iter().chain(std::iter::once(&self.roi_boost)).any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }

    /// Λ for a perceptual term: boosted for the face and background terms in the face
    /// view and for the hair term in the hair view, 1 elsewhere.
    pub fn region_scale(&self, view: View, region: Region) -> f64 {
        match (view, region) {
            (View::Face, Region::Face | Region::Background) | (View::Hair, Region::Hair) => self.roi_boost,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Face,
    Hair,
    Background,
}

/// Unweighted values of each term for one view (perceptual terms already include Λ).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub per_f: f64,
    pub per_h: f64,
    pub per_bg: f64,
    pub global: f64,
    pub ini: f64,
    pub noise: f64,
    pub sim: f64,
}

impl LossTerms {
    /// `Σ_j λ_p^j L_per^j + λ_g L_global + λ_i L_ini + λ_ε L_ε + λ_s L_sim`.
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.lambda_p_f * self.per_f
            + w.lambda_p_h * self.per_h
            + w.lambda_p_bg * self.per_bg
            + w.lambda_g * self.global
            + w.lambda_i * self.ini
            + w.lambda_eps * self.noise
            + w.lambda_s * self.sim
    }

    pub fn add(&self, o: &LossTerms) -> LossTerms {
        LossTerms {
            per_f: self.per_f + o.per_f,
            per_h: self.per_h + o.per_h,
            per_bg: self.per_bg + o.per_bg,
            global: self.global + o.global,
            ini: self.ini + o.ini,
            noise: self.noise + o.noise,
            sim: self.sim + o.sim,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.per_f,
            self.per_h,
            self.per_bg,
            self.global,
            self.ini,
            self.noise,
            self.sim,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Weight-tuning reconstruction loss for one view: twice the perceptual distance
/// restricted to `M_raw` (pre-masked and feature-masked by it) plus the 32×32 MSE
/// over the complement.
pub struct PtiTarget {
    perceptual: PerceptualTarget,
    guide: Image,
    outside: Mask,
}

impl PtiTarget {
    pub const PERCEPTUAL_SCALE: f64 = 2.0;

    pub fn new<E: PerceptualExtractor>(ext: &E, guide: &Image, m_raw: &Mask) -> Result<Self> {
        let outside = m_raw.not();
        Ok(Self {
            perceptual: PerceptualTarget::new(ext, guide, m_raw, &outside, Self::PERCEPTUAL_SCALE, None)?,
            guide: guide.clone(),
            outside,
        })
    }

    pub fn loss_with_grad<E: PerceptualExtractor>(&self, ext: &E, output: &Image) -> Result<(f64, Image)> {
        let (p, mut g) = self.perceptual.loss_with_grad(ext, output)?;
        let (m, gm) = global_mse32_with_grad(output, &self.guide, Some(&self.outside))?;
        for (a, b) in g.data_mut().iter_mut().zip(gm.data()) {
            *a += b;
        }
        Ok((p + m, g))
    }
}

/// Sum over both views of the weight-tuning reconstruction loss.
pub fn pti_loss<E: PerceptualExtractor>(
    o_tune_face: &Image,
    o_tune_hair: &Image,
    guide_face: &Image,
    guide_hair: &Image,
    m_raw_face: &Mask,
    m_raw_hair: &Mask,
    ext: &E,
) -> Result<f64> {
    let f = PtiTarget::new(ext, guide_face, m_raw_face)?
        .loss_with_grad(ext, o_tune_face)?
        .0;
    let h = PtiTarget::new(ext, guide_hair, m_raw_hair)?
        .loss_with_grad(ext, o_tune_hair)?
        .0;
    Ok(f + h)
}

/// Locality regularizer for weight tuning.
#[derive(Clone, Debug)]
pub struct PtiRegularization {
    pub value: f64,
    pub grad_params: Vec<f64>,
    /// The interpolated code the two generators were compared at.
    pub w_r: LatentW,
}

/// Steps `alpha` from `w_opt` towards `w_z`.
pub fn locality_code(w_opt: &LatentW, w_z: &LatentW, alpha: f64) -> Option<LatentW> {
    let d: Vec<f64> = w_z
        .as_slice()
        .iter()
        .zip(w_opt.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    LatentW::new(
        w_opt
            .as_slice()
            .iter()
            .zip(&d)
            .map(|(o, v)| o + alpha * v / norm)
            .collect(),
    )
    .ok()
}

/// Samples `w_z` through the mapping, forms `w_r`, and compares the frozen and tuned
/// generators there: perceptual distance plus MSE, with the gradient w.r.t. the
/// tuned parameters.
pub fn pti_regularizer<B: GeneratorBackend, E: PerceptualExtractor, R: Rng>(
    tuned: &B,
    frozen: &B,
    w_opt: &LatentW,
    alpha: f64,
    noise: &NoiseMaps,
    ext: &E,
    rng: &mut R,
) -> Result<PtiRegularization> {
    if !(alpha > 0.0) {
        return Err(Error::Range(format!("regularizer alpha must be positive, got {alpha}")));
    }
    let w_r = loop {
        let z: Vec<f64> = (0..LATENT_DIM)
            .map(|_| StandardNormal.sample(&mut *rng))
            .collect::<Vec<f64>>();
        let w_z = tuned.map_latent(&z)?;
        if let Some(w) = locality_code(w_opt, &w_z, alpha) {
            break w;
        }
    };
    pti_regularizer_at(tuned, frozen, &w_r, noise, ext)
}

/// Regularizer evaluated at a fixed interpolated code.
pub fn pti_regularizer_at<B: GeneratorBackend, E: PerceptualExtractor>(
    tuned: &B,
    frozen: &B,
    w_r: &LatentW,
    noise: &NoiseMaps,
    ext: &E,
) -> Result<PtiRegularization> {
    let wplus = w_r.replicate(tuned.layer_count());
    let reference = frozen.synthesize(&wplus, noise)?;
    let syn = tuned.forward(&wplus, noise)?;
    let (p, mut g) = perceptual_distance_with_grad(ext, &syn.image, &reference)?;
    let (m, gm) = mse_with_grad(&syn.image, &reference)?;
    for (a, b) in g.data_mut().iter_mut().zip(gm.data()) {
        *a += b;
    }
    let grads = tuned.backward(&syn, &g, true);
    Ok(PtiRegularization {
        value: p + m,
        grad_params: grads.params.expect("requested parameter gradients"),
        w_r: w_r.clone(),
    })
}
