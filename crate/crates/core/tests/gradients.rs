//! Analytic gradients against central finite differences.

use mvhair_core::latent::{GeneratorBackend, LatentW, LatentWPlus, NoiseMaps, LATENT_DIM};
use mvhair_core::losses::{
    global_mse32_with_grad, initial_value_loss_with_grad, latent_similarity_with_grad, noise_regularization,
    perceptual_distance_with_grad, pti_regularizer_at, GaussianBlur, PerceptualTarget, PtiTarget, ToyExtractor,
};
use mvhair_core::raster::{Image, Mask};
use mvhair_core::toy::{ToyConfig, ToyGenerator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn generator() -> ToyGenerator {
    ToyGenerator::new(ToyConfig {
        layers: 4,
        resolution: 32,
        channels: 4,
        seed: 3,
        ..ToyConfig::default()
    })
    .unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
    assert!(
        rel <= TOL,
        "{what}: analytic {analytic:e} numeric {numeric:e} rel {rel:e}"
    );
}

/// Directional derivative check of `f` at `x` along a random unit direction.
fn check_direction(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], rng: &mut ChaCha8Rng, what: &str) {
    for _ in 0..3 {
        let d = unit(random_vec(rng, x.len(), 1.0));
        let plus: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + STEP * b).collect();
        let minus: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a - STEP * b).collect();
        let numeric = (f(&plus) - f(&minus)) / (2.0 * STEP);
        assert_close(dot(grad, &d), numeric, what);
    }
}

/// Per-coordinate check on a handful of the largest-gradient coordinates.
fn check_coordinates(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], what: &str) {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|a, b| grad[*b].abs().total_cmp(&grad[*a].abs()));
    for &i in idx.iter().take(6) {
        let mut p = x.to_vec();
        p[i] += STEP;
        let mut m = x.to_vec();
        m[i] -= STEP;
        let numeric = (f(&p) - f(&m)) / (2.0 * STEP);
        assert_close(grad[i], numeric, &format!("{what}[{i}]"));
    }
}

fn smooth_image(r: usize, phase: f64) -> Image {
    let mut img = Image::new(r, r);
    for c in 0..3 {
        for y in 0..r {
            for x in 0..r {
                let v = 0.5 + 0.3 * ((x as f64 * 0.4 + phase + c as f64).sin() * (y as f64 * 0.3).cos());
                img.set(c, y, x, v);
            }
        }
    }
    img
}

fn half_mask(r: usize) -> Mask {
    Mask::from_fn(r, r, |y, x| x + y < r)
}

struct Setup {
    gen: ToyGenerator,
    wplus: LatentWPlus,
    noise: NoiseMaps,
    ext: ToyExtractor,
    guide: Image,
    roi: Mask,
}

fn setup() -> Setup {
    let gen = generator();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z: Vec<f64> = random_vec(&mut rng, LATENT_DIM, 1.0);
    let w = gen.map_latent(&z).unwrap();
    let mut wplus = w.replicate(gen.layer_count());
    for v in wplus.as_mut_slice() {
        *v += 0.2 * (rng.random::<f64>() - 0.5);
    }
    let noise = NoiseMaps::random(&gen.noise_schema(), 5);
    Setup {
        guide: smooth_image(32, 0.7),
        roi: half_mask(32),
        gen,
        wplus,
        noise,
        ext: ToyExtractor::new(1),
    }
}

/// Image loss used to drive the generator checks: masked perceptual (blurred) plus
/// masked 32×32 MSE.
fn image_loss(s: &Setup, img: &Image) -> (f64, Image) {
    let roni = s.roi.not();
    let target = PerceptualTarget::new(&s.ext, &s.guide, &s.roi, &roni, 6.0, Some(GaussianBlur::new(1.0, 2))).unwrap();
    let (a, mut g) = target.loss_with_grad(&s.ext, img).unwrap();
    let (b, gb) = global_mse32_with_grad(img, &s.guide, Some(&s.roi)).unwrap();
    g.data_mut().iter_mut().zip(gb.data()).for_each(|(x, y)| *x += y);
    (a + b, g)
}

#[test]
fn generator_gradient_wrt_wplus() {
    let s = setup();
    let syn = s.gen.forward(&s.wplus, &s.noise).unwrap();
    let (_, gi) = image_loss(&s, &syn.image);
    let grads = s.gen.backward(&syn, &gi, false);
    let f = |x: &[f64]| {
        let w = LatentWPlus::new(s.gen.layer_count(), x.to_vec()).unwrap();
        image_loss(&s, &s.gen.synthesize(&w, &s.noise).unwrap()).0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check_direction(f, s.wplus.as_slice(), &grads.wplus, &mut rng, "w+");
    check_coordinates(f, s.wplus.as_slice(), &grads.wplus, "w+");
}

#[test]
fn generator_gradient_wrt_noise() {
    let s = setup();
    let syn = s.gen.forward(&s.wplus, &s.noise).unwrap();
    let (_, gi) = image_loss(&s, &syn.image);
    let grads = s.gen.backward(&syn, &gi, false);
    let flat: Vec<f64> = s.noise.iter().copied().collect();
    let gflat: Vec<f64> = grads.noise.iter().copied().collect();
    let f = |x: &[f64]| {
        let mut n = s.noise.clone();
        n.iter_mut().zip(x).for_each(|(a, b)| *a = *b);
        image_loss(&s, &s.gen.synthesize(&s.wplus, &n).unwrap()).0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check_direction(f, &flat, &gflat, &mut rng, "noise");
    check_coordinates(f, &flat, &gflat, "noise");
}

#[test]
fn generator_gradient_wrt_params() {
    let s = setup();
    let syn = s.gen.forward(&s.wplus, &s.noise).unwrap();
    let (_, gi) = image_loss(&s, &syn.image);
    let grads = s.gen.backward(&syn, &gi, true).params.unwrap();
    let f = |x: &[f64]| {
        let mut g = s.gen.clone();
        g.set_params(x.to_vec()).unwrap();
        image_loss(&s, &g.synthesize(&s.wplus, &s.noise).unwrap()).0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check_direction(f, s.gen.params(), &grads, &mut rng, "theta");
    check_coordinates(f, s.gen.params(), &grads, "theta");
}

#[test]
fn perceptual_distance_gradient() {
    let s = setup();
    let a = smooth_image(32, 0.1);
    let (_, g) = perceptual_distance_with_grad(&s.ext, &a, &s.guide).unwrap();
    let f = |x: &[f64]| {
        let img = Image::from_planar(32, 32, x.to_vec()).unwrap();
        perceptual_distance_with_grad(&s.ext, &img, &s.guide).unwrap().0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check_direction(f, a.data(), g.data(), &mut rng, "lpips");
    check_coordinates(f, a.data(), g.data(), "lpips");
}

#[test]
fn pti_reconstruction_gradient() {
    let s = setup();
    let a = smooth_image(32, 0.1);
    let target = PtiTarget::new(&s.ext, &s.guide, &s.roi).unwrap();
    let (_, g) = target.loss_with_grad(&s.ext, &a).unwrap();
    let f = |x: &[f64]| {
        let img = Image::from_planar(32, 32, x.to_vec()).unwrap();
        target.loss_with_grad(&s.ext, &img).unwrap().0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check_direction(f, a.data(), g.data(), &mut rng, "pti");
}

#[test]
fn pti_regularizer_gradient() {
    let s = setup();
    let mut tuned = s.gen.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bumped: Vec<f64> = tuned
        .params()
        .iter()
        .map(|p| p + 0.01 * (rng.random::<f64>() - 0.5))
        .collect();
    tuned.set_params(bumped).unwrap();
    let w_r = s.wplus.row_mean();
    let r = pti_regularizer_at(&tuned, &s.gen, &w_r, &s.noise, &s.ext).unwrap();
    let f = |x: &[f64]| {
        let mut g = tuned.clone();
        g.set_params(x.to_vec()).unwrap();
        pti_regularizer_at(&g, &s.gen, &w_r, &s.noise, &s.ext).unwrap().value
    };
    check_direction(f, tuned.params(), &r.grad_params, &mut rng, "pti_reg");
}

#[test]
fn noise_regularization_gradient() {
    let maps = NoiseMaps::random(&[8, 16, 32], 9);
    let r = noise_regularization(&maps).unwrap();
    let flat: Vec<f64> = maps.iter().copied().collect();
    let g: Vec<f64> = r.grad.iter().copied().collect();
    let f = |x: &[f64]| {
        let mut n = maps.clone();
        n.iter_mut().zip(x).for_each(|(a, b)| *a = *b);
        noise_regularization(&n).unwrap().value
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    check_direction(f, &flat, &g, &mut rng, "noise_reg");
    check_coordinates(f, &flat, &g, "noise_reg");
}

#[test]
fn latent_term_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = LatentWPlus::new(3, random_vec(&mut rng, 3 * LATENT_DIM, 1.0)).unwrap();
    let w0 = LatentW::new(random_vec(&mut rng, LATENT_DIM, 1.0)).unwrap();
    let (_, g) = initial_value_loss_with_grad(&w, &w0);
    let f = |x: &[f64]| initial_value_loss_with_grad(&LatentWPlus::new(3, x.to_vec()).unwrap(), &w0).0;
    check_direction(f, w.as_slice(), &g, &mut rng, "ini");

    let b = random_vec(&mut rng, LATENT_DIM, 1.0);
    let (_, g) = latent_similarity_with_grad(w0.as_slice(), &b).unwrap();
    let f = |x: &[f64]| latent_similarity_with_grad(x, &b).unwrap().0;
    check_direction(f, w0.as_slice(), &g, &mut rng, "sim");
}

#[test]
fn blur_backward_is_adjoint() {
    let b = GaussianBlur::new(1.5, 3);
    let x = smooth_image(16, 0.2);
    let y = smooth_image(16, 1.9);
    let lhs = dot(b.apply(&x).data(), y.data());
    let rhs = dot(x.data(), b.backward(&y).data());
    assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
}
