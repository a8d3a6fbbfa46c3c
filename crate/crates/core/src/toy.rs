//! Small deterministic differentiable generator used for desk-scale runs and tests.
//!
//! A learned 4×4 constant is pushed through `layers` synthesis layers. Layer `i`
//! optionally upsamples ×2 (nearest), applies a 3×3 convolution, adds a set of
//! learned spatial patterns weighted by its style values (an affine map of latent
//! row `i`), adds its noise map scaled by a learned per-layer strength and applies
//! `tanh`. Every layer also feeds a 1×1 RGB projection; the projections are
//! upsampled to the output size and summed, and `0.5 + 0.5·tanh` of the sum is the
//! image in `(0, 1)`.
//!
//! With the default 8 channels each layer has 64 style values, so 8 layers give
//! the 512 style dimensions needed to make the W code identifiable from the
//! image. The stacked style map is orthogonal and the per-layer RGB skips keep
//! early layers visible, so the latent-to-image Jacobian stays well conditioned.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{BackendGrads, GeneratorBackend, LatentW, LatentWPlus, NoiseMaps, Synthesis, LATENT_DIM};
use crate::raster::{Grid, Image};

const BASE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub layers: usize,
    pub resolution: usize,
    pub channels: usize,
    pub seed: u64,
    /// Standard deviation of the style response to a unit-variance latent.
    pub style_gain: f64,
    pub conv_gain: f64,
    /// Initial per-layer noise strength.
    pub noise_strength: f64,
    /// Standard deviation of mapped latents around the mapping offset, in units
    /// of `latent_scale`.
    pub mapping_gain: f64,
    /// Overall size of W. Mapped codes are multiplied by it and the style affines
    /// divided by it, so images are distributed the same for any value; smaller
    /// values make the image react more strongly to a given move of the code.
    pub latent_scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            resolution: 64,
            channels: 8,
            seed: 0,
            style_gain: 0.5,
            conv_gain: 1.5,
            noise_strength: 0.1,
            mapping_gain: 1.0,
            latent_scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerLayout {
    upsample: bool,
    res: usize,
    affine: usize,
    affine_bias: usize,
    kernel: usize,
    bias: usize,
    noise_gain: usize,
    /// `[out][slot][res][res]` patterns, one per style value.
    pattern: usize,
    /// `[3][channels]` skip projection.
    rgb: usize,
}

#[derive(Clone, Debug)]
pub struct ToyGenerator {
    config: ToyConfig,
    layout: Vec<LayerLayout>,
    rgb_bias: usize,
    params: Vec<f64>,
    mapping: Arc<Mapping>,
}

#[derive(Debug)]
struct Mapping {
    matrix: Vec<f64>,
    offset: Vec<f64>,
}

/// Activations kept from the forward pass.
pub struct ToyTape {
    wplus: LatentWPlus,
    noise: NoiseMaps,
    /// Layer inputs after upsampling.
    inputs: Vec<Vec<f64>>,
    styles: Vec<Vec<f64>>,
    /// Layer outputs after `tanh`.
    outputs: Vec<Vec<f64>>,
    /// `tanh` of the summed RGB skips.
    rgb_tanh: Vec<f64>,
}

impl ToyGenerator {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let ups = upsample_count(config.resolution)?;
        if config.layers < ups.max(1) {
            return Err(Error::Config(format!(
                "toy generator needs at least {ups} layers for resolution {}",
                config.resolution
            )));
        }
        if !(config.latent_scale > 0.0) {
            return Err(Error::Config("toy latent_scale must be positive".into()));
        }
        if config.channels == 0 {
            return Err(Error::Config("toy generator needs at least one channel".into()));
        }
        let c = config.channels;
        let l = config.layers;
        let mut offset = c * BASE * BASE;
        let mut layout = Vec::with_capacity(l);
        let mut res = BASE;
        for i in 0..l {
            let upsample = ((i + 1) * ups).div_ceil(l) > (i * ups).div_ceil(l);
            if upsample {
                res *= 2;
            }
            let affine = offset;
            let affine_bias = affine + c * c * LATENT_DIM;
            let kernel = affine_bias + c * c;
            let bias = kernel + c * c * 9;
            let noise_gain = bias + c;
            let pattern = noise_gain + 1;
            let rgb = pattern + c * c * res * res;
            offset = rgb + 3 * c;
            layout.push(LayerLayout {
                upsample,
                res,
                affine,
                affine_bias,
                kernel,
                bias,
                noise_gain,
                pattern,
                rgb,
            });
        }
        let rgb_bias = offset;
        let total = rgb_bias + 3;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
        let mut params = vec![0.0; total];
        for p in &mut params[..c * BASE * BASE] {
            *p = normal();
        }
        // The stacked per-layer affines form one (L·C²)×512 map; making it
        // orthogonal keeps every latent direction equally visible in the styles.
        let styles = l * c * c;
        let gaussian: Vec<f64> = (0..styles * LATENT_DIM).map(|_| normal()).collect();
        let stacked = orthonormalize(gaussian, styles, LATENT_DIM);
        let conv_scale = config.conv_gain / ((c * 9) as f64).sqrt();
        let pattern_scale = 1.0 / (c as f64).sqrt();
        let rgb_scale = 1.0 / ((c * l) as f64).sqrt();
        for (i, lay) in layout.iter().enumerate() {
            let block = &stacked[i * c * c * LATENT_DIM..(i + 1) * c * c * LATENT_DIM];
            for (p, q) in params[lay.affine..lay.affine_bias].iter_mut().zip(block) {
                *p = config.style_gain / config.latent_scale * q;
            }
            for p in &mut params[lay.kernel..lay.bias] {
                *p = normal() * conv_scale;
            }
            params[lay.noise_gain] = config.noise_strength;
            for p in &mut params[lay.pattern..lay.rgb] {
                *p = normal() * pattern_scale;
            }
            for p in &mut params[lay.rgb..lay.rgb + 3 * c] {
                *p = normal() * rgb_scale;
            }
        }

        let map_scale = config.latent_scale * config.mapping_gain / (LATENT_DIM as f64).sqrt();
        let matrix = (0..LATENT_DIM * LATENT_DIM).map(|_| normal() * map_scale).collect();
        let offset_vec = (0..LATENT_DIM).map(|_| 0.5 * config.latent_scale * normal()).collect();

        Ok(Self {
            config,
            layout,
            rgb_bias,
            params,
            mapping: Arc::new(Mapping {
                matrix,
                offset: offset_vec,
            }),
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// Replaces θ wholesale (checkpoint loading).
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Schema(format!(
                "checkpoint holds {} parameters, toy generator expects {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    fn style(&self, lay: &LayerLayout, row: &[f64]) -> Vec<f64> {
        let c2 = self.config.channels * self.config.channels;
        let a = &self.params[lay.affine..lay.affine_bias];
        (0..c2)
            .map(|j| {
                let r = &a[j * LATENT_DIM..(j + 1) * LATENT_DIM];
                self.params[lay.affine_bias + j] + dot(r, row)
            })
            .collect()
    }
}

/// Orthonormalizes the shorter side of a row-major `rows × cols` matrix with
/// modified Gram-Schmidt, then rescales so rows have unit norm on average.
fn orthonormalize(mut m: Vec<f64>, rows: usize, cols: usize) -> Vec<f64> {
    if rows <= cols {
        for i in 0..rows {
            for j in 0..i {
                let d = dot(&m[i * cols..(i + 1) * cols], &m[j * cols..(j + 1) * cols]);
                for k in 0..cols {
                    m[i * cols + k] -= d * m[j * cols + k];
                }
            }
            let n = dot(&m[i * cols..(i + 1) * cols], &m[i * cols..(i + 1) * cols]).sqrt();
            m[i * cols..(i + 1) * cols].iter_mut().for_each(|v| *v /= n);
        }
    } else {
        let col = |m: &[f64], j: usize| (0..rows).map(|r| m[r * cols + j]).collect::<Vec<f64>>();
        for i in 0..cols {
            let mut ci = col(&m, i);
            for j in 0..i {
                let cj = col(&m, j);
                let d = dot(&ci, &cj);
                ci.iter_mut().zip(&cj).for_each(|(a, b)| *a -= d * b);
            }
            let n = dot(&ci, &ci).sqrt();
            let scale = (rows as f64 / cols as f64).sqrt() / n;
            for r in 0..rows {
                m[r * cols + i] = ci[r] * scale;
            }
        }
    }
    m
}

fn upsample_count(resolution: usize) -> Result<usize> {
    if resolution < 2 * BASE || !resolution.is_power_of_two() {
        return Err(Error::Config(format!(
            "toy resolution must be a power of two >= {}, got {resolution}",
            2 * BASE
        )));
    }
    Ok(resolution.trailing_zeros() as usize - BASE.trailing_zeros() as usize)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn upsample2(x: &[f64], channels: usize, r: usize) -> Vec<f64> {
    upsample(x, channels, r, 2)
}

fn upsample2_backward(g: &[f64], channels: usize, r: usize) -> Vec<f64> {
    upsample_backward(g, channels, r, 2)
}

/// Nearest-neighbour ×`f` enlargement of `channels` planes of side `r`.
fn upsample(x: &[f64], channels: usize, r: usize, f: usize) -> Vec<f64> {
    let r2 = f * r;
    let mut out = vec![0.0; channels * r2 * r2];
    for c in 0..channels {
        for y in 0..r2 {
            for xx in 0..r2 {
                out[(c * r2 + y) * r2 + xx] = x[(c * r + y / f) * r + xx / f];
            }
        }
    }
    out
}

fn upsample_backward(g: &[f64], channels: usize, r: usize, f: usize) -> Vec<f64> {
    let r2 = f * r;
    let mut out = vec![0.0; channels * r * r];
    for c in 0..channels {
        for y in 0..r2 {
            for xx in 0..r2 {
                out[(c * r + y / f) * r + xx / f] += g[(c * r2 + y) * r2 + xx];
            }
        }
    }
    out
}

/// Valid output range along one axis for a tap at offset `d`.
#[inline]
fn tap_range(d: isize, r: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (r as isize - d.max(0)) as usize;
    (lo, hi)
}

/// Same-size 3×3 convolution with zero padding. `kernel` is `[out][in][3][3]`.
pub(crate) fn conv3x3(input: &[f64], kernel: &[f64], c_in: usize, c_out: usize, r: usize, out: &mut [f64]) {
    let plane = r * r;
    for o in 0..c_out {
        let dst = &mut out[o * plane..(o + 1) * plane];
        for c in 0..c_in {
            let src = &input[c * plane..(c + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(dy, r);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let w = kernel[((o * c_in + c) * 3 + ky) * 3 + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let (x0, x1) = tap_range(dx, r);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let d = &mut dst[y * r + x0..y * r + x1];
                        let s = &src[sy * r + (x0 as isize + dx) as usize..sy * r + (x1 as isize + dx) as usize];
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += w * b;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv3x3`] w.r.t. its kernel and input, given `grad_out`.
pub(crate) fn conv3x3_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    c_in: usize,
    c_out: usize,
    r: usize,
) -> (Vec<f64>, Vec<f64>) {
    let plane = r * r;
    let mut gk = vec![0.0; c_out * c_in * 9];
    let mut gi = vec![0.0; c_in * plane];
    for o in 0..c_out {
        let go = &grad_out[o * plane..(o + 1) * plane];
        for c in 0..c_in {
            let src = &input[c * plane..(c + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(dy, r);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(dx, r);
                    let kidx = ((o * c_in + c) * 3 + ky) * 3 + kx;
                    let w = kernel[kidx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let g = &go[y * r + x0..y * r + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let s = &src[sy * r + sx0..sy * r + sx0 + (x1 - x0)];
                        acc += dot(g, s);
                        let dst = &mut gi[c * plane + sy * r + sx0..c * plane + sy * r + sx0 + (x1 - x0)];
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += w * gv;
                        }
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    (gk, gi)
}

impl GeneratorBackend for ToyGenerator {
    type Tape = ToyTape;

    fn layer_count(&self) -> usize {
        self.config.layers
    }

    fn output_resolution(&self) -> usize {
        self.config.resolution
    }

    fn noise_schema(&self) -> Vec<usize> {
        self.layout.iter().map(|l| l.res).collect()
    }

    fn map_latent(&self, z: &[f64]) -> Result<LatentW> {
        if z.len() != LATENT_DIM {
            return Err(Error::Schema(format!("z of length {}", z.len())));
        }
        let m = &self.mapping;
        let w = (0..LATENT_DIM)
            .map(|i| m.offset[i] + dot(&m.matrix[i * LATENT_DIM..(i + 1) * LATENT_DIM], z))
            .collect();
        LatentW::new(w)
    }

    fn forward(&self, wplus: &LatentWPlus, noise: &NoiseMaps) -> Result<Synthesis<ToyTape>> {
        self.check_inputs(wplus, noise)?;
        let c = self.config.channels;
        let r_out = self.config.resolution;
        let mut acc = vec![0.0; 3 * r_out * r_out];
        let mut x = self.params[..c * BASE * BASE].to_vec();
        let mut r = BASE;
        let mut inputs = Vec::with_capacity(self.layout.len());
        let mut styles = Vec::with_capacity(self.layout.len());
        let mut outputs = Vec::with_capacity(self.layout.len());
        for (i, lay) in self.layout.iter().enumerate() {
            let h = if lay.upsample {
                let u = upsample2(&x, c, r);
                r *= 2;
                u
            } else {
                x
            };
            let s = self.style(lay, wplus.row(i));
            let plane = r * r;
            let mut y = vec![0.0; c * plane];
            let gamma = self.params[lay.noise_gain];
            let nmap = &noise.maps[i].data;
            for o in 0..c {
                let b = self.params[lay.bias + o];
                let dst = &mut y[o * plane..(o + 1) * plane];
                for (v, n) in dst.iter_mut().zip(nmap) {
                    *v = b + gamma * n;
                }
                for slot in 0..c {
                    let g = s[o * c + slot];
                    let pat = self.pattern(lay, o, slot);
                    for (v, p) in dst.iter_mut().zip(pat) {
                        *v += g * p;
                    }
                }
            }
            conv3x3(&h, &self.params[lay.kernel..lay.bias], c, c, r, &mut y);
            for v in &mut y {
                *v = v.tanh();
            }
            let skip = upsample(&self.project_rgb(lay, &y, plane), 3, r, r_out / r);
            for (a, v) in acc.iter_mut().zip(&skip) {
                *a += v;
            }
            inputs.push(h);
            styles.push(s);
            outputs.push(y.clone());
            x = y;
        }
        let plane = r_out * r_out;
        let rgb_tanh: Vec<f64> = acc
            .iter()
            .enumerate()
            .map(|(j, a)| (a + self.params[self.rgb_bias + j / plane]).tanh())
            .collect();
        let image = Image::from_planar(r_out, r_out, rgb_tanh.iter().map(|t| 0.5 + 0.5 * t).collect())?;
        Ok(Synthesis {
            image,
            tape: ToyTape {
                wplus: wplus.clone(),
                noise: noise.clone(),
                inputs,
                styles,
                outputs,
                rgb_tanh,
            },
        })
    }

    fn backward(&self, synthesis: &Synthesis<ToyTape>, grad_image: &Image, want_params: bool) -> BackendGrads {
        let tape = &synthesis.tape;
        let c = self.config.channels;
        let r_out = self.config.resolution;
        let out_plane = r_out * r_out;
        let mut gp = if want_params {
            Some(vec![0.0; self.params.len()])
        } else {
            None
        };
        let du: Vec<f64> = grad_image
            .data()
            .iter()
            .zip(&tape.rgb_tanh)
            .map(|(g, t)| g * 0.5 * (1.0 - t * t))
            .collect();
        if let Some(gp) = gp.as_mut() {
            for k in 0..3 {
                gp[self.rgb_bias + k] += du[k * out_plane..(k + 1) * out_plane].iter().sum::<f64>();
            }
        }

        let mut gw = vec![0.0; self.config.layers * LATENT_DIM];
        let mut gnoise = tape.noise.zeros_like();
        // Gradient w.r.t. the current layer's output, flowing back from the next layer.
        let mut dx = vec![0.0; c * out_plane];
        for (i, lay) in self.layout.iter().enumerate().rev() {
            let r = lay.res;
            let plane = r * r;
            let out = &tape.outputs[i];
            let dskip = upsample_backward(&du, 3, r, r_out / r);
            for ch in 0..c {
                let d = &mut dx[ch * plane..(ch + 1) * plane];
                for k in 0..3 {
                    let t = self.params[lay.rgb + k * c + ch];
                    let dk = &dskip[k * plane..(k + 1) * plane];
                    for (dv, g) in d.iter_mut().zip(dk) {
                        *dv += t * g;
                    }
                    if let Some(gp) = gp.as_mut() {
                        gp[lay.rgb + k * c + ch] += dot(dk, &out[ch * plane..(ch + 1) * plane]);
                    }
                }
            }
            let dy: Vec<f64> = dx.iter().zip(out).map(|(g, x)| g * (1.0 - x * x)).collect();
            let gamma = self.params[lay.noise_gain];
            let nmap = &tape.noise.maps[i].data;
            let gn = &mut gnoise.maps[i].data;
            let s = &tape.styles[i];
            let mut ds = vec![0.0; c * c];
            let mut dgamma = 0.0;
            for o in 0..c {
                let d = &dy[o * plane..(o + 1) * plane];
                dgamma += dot(d, nmap);
                for (g, v) in gn.iter_mut().zip(d) {
                    *g += gamma * v;
                }
                for slot in 0..c {
                    let j = o * c + slot;
                    ds[j] = dot(d, self.pattern(lay, o, slot));
                    if let Some(gp) = gp.as_mut() {
                        let start = lay.pattern + j * plane;
                        for (g, v) in gp[start..start + plane].iter_mut().zip(d) {
                            *g += s[j] * v;
                        }
                    }
                }
                if let Some(gp) = gp.as_mut() {
                    gp[lay.bias + o] += d.iter().sum::<f64>();
                }
            }
            let kernel = &self.params[lay.kernel..lay.bias];
            let (gk, dh) = conv3x3_backward(&tape.inputs[i], kernel, &dy, c, c, r);
            let row = tape.wplus.row(i);
            let a = &self.params[lay.affine..lay.affine_bias];
            let gwr = &mut gw[i * LATENT_DIM..(i + 1) * LATENT_DIM];
            for (j, &dsj) in ds.iter().enumerate() {
                let ar = &a[j * LATENT_DIM..(j + 1) * LATENT_DIM];
                for (g, av) in gwr.iter_mut().zip(ar) {
                    *g += dsj * av;
                }
            }
            if let Some(gp) = gp.as_mut() {
                gp[lay.noise_gain] += dgamma;
                for (g, v) in gp[lay.kernel..lay.bias].iter_mut().zip(&gk) {
                    *g += v;
                }
                for (j, &dsj) in ds.iter().enumerate() {
                    gp[lay.affine_bias + j] += dsj;
                    let dst = &mut gp[lay.affine + j * LATENT_DIM..lay.affine + (j + 1) * LATENT_DIM];
                    for (g, wv) in dst.iter_mut().zip(row) {
                        *g += dsj * wv;
                    }
                }
            }
            dx = if lay.upsample {
                upsample2_backward(&dh, c, r / 2)
            } else {
                dh
            };
        }
        if let Some(gp) = gp.as_mut() {
            for (g, d) in gp[..c * BASE * BASE].iter_mut().zip(&dx) {
                *g += d;
            }
        }
        BackendGrads {
            wplus: gw,
            noise: gnoise,
            params: gp,
        }
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}

impl ToyGenerator {
    fn pattern(&self, lay: &LayerLayout, out: usize, slot: usize) -> &[f64] {
        let plane = lay.res * lay.res;
        let start = lay.pattern + (out * self.config.channels + slot) * plane;
        &self.params[start..start + plane]
    }

    /// 1×1 RGB projection of a layer output (`channels` planes of `plane` samples).
    fn project_rgb(&self, lay: &LayerLayout, y: &[f64], plane: usize) -> Vec<f64> {
        let c = self.config.channels;
        let mut rgb = vec![0.0; 3 * plane];
        for k in 0..3 {
            let dst = &mut rgb[k * plane..(k + 1) * plane];
            for ch in 0..c {
                let t = self.params[lay.rgb + k * c + ch];
                for (d, v) in dst.iter_mut().zip(&y[ch * plane..(ch + 1) * plane]) {
                    *d += t * v;
                }
            }
        }
        rgb
    }
}

/// Noise grids all set to zero, handy for fixtures that plant a latent.
pub fn zero_noise<B: GeneratorBackend>(backend: &B) -> NoiseMaps {
    NoiseMaps {
        maps: backend.noise_schema().into_iter().map(|r| Grid::zeros(r, r)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyGenerator {
        ToyGenerator::new(ToyConfig {
            layers: 4,
            resolution: 16,
            channels: 4,
            ..ToyConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn default_schema() {
        let g = ToyGenerator::new(ToyConfig::default()).unwrap();
        assert_eq!(g.noise_schema(), vec![8, 8, 16, 16, 32, 32, 64, 64]);
        assert_eq!(g.output_resolution(), 64);
    }

    #[test]
    fn rejects_bad_resolution() {
        let cfg = ToyConfig {
            resolution: 48,
            ..ToyConfig::default()
        };
        assert!(ToyGenerator::new(cfg).is_err());
        let cfg = ToyConfig {
            layers: 2,
            resolution: 64,
            ..ToyConfig::default()
        };
        assert!(ToyGenerator::new(cfg).is_err());
    }

    #[test]
    fn shape_mismatch_is_schema_error() {
        let g = small();
        let w = LatentW::zeros().replicate(3);
        let n = NoiseMaps::zeros(&g.noise_schema());
        assert!(matches!(g.synthesize(&w, &n), Err(Error::Schema(_))));
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let (c_in, c_out, r) = (2, 3, 5);
        let input: Vec<f64> = (0..c_in * r * r).map(|i| (i as f64 * 0.7).sin()).collect();
        let kernel: Vec<f64> = (0..c_out * c_in * 9).map(|i| (i as f64 * 0.3).cos()).collect();
        let g: Vec<f64> = (0..c_out * r * r).map(|i| (i as f64 * 0.13).sin()).collect();
        let mut out = vec![0.0; c_out * r * r];
        conv3x3(&input, &kernel, c_in, c_out, r, &mut out);
        let (gk, gi) = conv3x3_backward(&input, &kernel, &g, c_in, c_out, r);
        // <conv(x), g> is bilinear in (x, k): both partial gradients reproduce it.
        let lhs = dot(&out, &g);
        assert!((lhs - dot(&gi, &input)).abs() < 1e-10);
        assert!((lhs - dot(&gk, &kernel)).abs() < 1e-10);
    }
}
