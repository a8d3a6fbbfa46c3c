//! Reconstruction metrics, face-shape error, head yaw, and scenario classification.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{perceptual_distance, PerceptualExtractor};
use crate::raster::{Image, Mask};
use crate::semantics::{face_area_from_keypoints, Keypoints, Label, SemanticMap, CONTOUR, KEYPOINT_COUNT};

/// Peak signal-to-noise ratio for data range 1, optionally over `mask` only.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    a.check_canvas(b, "psnr")?;
    let plane = a.width() * a.height();
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..plane {
        if let Some(m) = mask {
            if !m.bits()[i] {
                continue;
            }
        }
        for c in 0..3 {
            let d = a.data()[c * plane + i] - b.data()[c * plane + i];
            acc += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return Err(Error::EmptyRegion("psnr over an empty mask".into()));
    }
    let mse = acc / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut t: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Gaussian-window filtering over valid positions only.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            horiz[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * horiz[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, data range 1, averaged over valid window positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_canvas(b, "ssim")?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Canvas(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images"
        )));
    }
    let taps = ssim_taps();
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut total = 0.0;
    for c in 0..3 {
        let (x, y) = (a.plane(c), b.plane(c));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (mx, ow, oh) = filter_valid(x, w, h, &taps);
        let (my, _, _) = filter_valid(y, w, h, &taps);
        let (sxx, _, _) = filter_valid(&xx, w, h, &taps);
        let (syy, _, _) = filter_valid(&yy, w, h, &taps);
        let (sxy, _, _) = filter_valid(&xy, w, h, &taps);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let (mu_x, mu_y) = (mx[i], my[i]);
            let vx = sxx[i] - mu_x * mu_x;
            let vy = syy[i] - mu_y * mu_y;
            let cov = sxy[i] - mu_x * mu_y;
            acc += ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) / ((mu_x * mu_x + mu_y * mu_y + c1) * (vx + vy + c2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    /// dB; infinite for identical images.
    pub psnr: f64,
    pub ssim: f64,
    pub lpips_like: f64,
    /// Contour keypoint RMSE in pixels, when keypoints were supplied.
    pub face_rmse: Option<f64>,
}

/// Pastes the output's hair into the input and compares the result with the input,
/// so only the hair region can contribute.
pub fn hair_region_metrics<E: PerceptualExtractor>(
    output: &Image,
    input: &Image,
    hair_mask: &Mask,
    ext: &E,
) -> Result<MetricReport> {
    output.check_canvas(input, "hair metrics")?;
    if hair_mask.is_empty() {
        return Err(Error::EmptyRegion("hair mask is empty".into()));
    }
    let mut blended = input.clone();
    blended.copy_from_masked(output, hair_mask);
    Ok(MetricReport {
        psnr: psnr(&blended, input, None)?,
        ssim: ssim(&blended, input)?,
        lpips_like: perceptual_distance(ext, &blended, input)?,
        face_rmse: None,
    })
}

/// Root-mean-square distance over the contour keypoints 0–16.
pub fn face_shape_rmse(a: &Keypoints, b: &Keypoints) -> f64 {
    let n = CONTOUR.count() as f64;
    let ss: f64 = CONTOUR
        .map(|i| {
            let (p, q) = (a.get(i), b.get(i));
            (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)
        })
        .sum();
    (ss / n).sqrt()
}

/// Canonical 68-point landmark layout in head coordinates: x to the subject's
/// left in the image, y down, z towards the camera. Mirror-symmetric about x = 0.
pub fn landmark_template() -> Vec<[f64; 3]> {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(KEYPOINT_COUNT);
    // Jaw contour, ear to ear through the chin.
    for i in 0..17 {
        let phi = PI * (i as f64 / 16.0 - 0.5);
        pts.push([phi.sin(), 0.05 + 0.95 * phi.cos(), -0.35 + 0.75 * phi.cos()]);
    }
    // Eyebrows, five points each, outer to inner then inner to outer.
    for i in 0..5 {
        let x = -0.78 + 0.15 * i as f64;
        pts.push([
            x,
            -0.5 - 0.06 * (1.0 - (x + 0.48).abs() / 0.3),
            0.62 + 0.1 * (1.0 - x.abs()),
        ]);
    }
    for i in 0..5 {
        let x = 0.18 + 0.15 * i as f64;
        pts.push([
            x,
            -0.5 - 0.06 * (1.0 - (x - 0.48).abs() / 0.3),
            0.62 + 0.1 * (1.0 - x.abs()),
        ]);
    }
    // Nose bridge then nostrils.
    for i in 0..4 {
        let t = i as f64 / 3.0;
        pts.push([0.0, -0.38 + 0.45 * t, 0.8 + 0.25 * t]);
    }
    for i in 0..5 {
        let x = -0.2 + 0.1 * i as f64;
        pts.push([
            x,
            0.17 - 0.03 * (1.0 - x.abs() / 0.2),
            0.85 + 0.1 * (1.0 - x.abs() / 0.2),
        ]);
    }
    // Eyes: six points around each, starting at the outer corner.
    for cx in [-0.42, 0.42f64] {
        for i in 0..6 {
            let a = PI * i as f64 / 3.0;
            let dir = if cx < 0.0 { -1.0 } else { 1.0 };
            pts.push([cx + dir * 0.15 * a.cos(), -0.33 - 0.06 * a.sin(), 0.68]);
        }
    }
    // Outer lip (12) then inner lip (8).
    for i in 0..12 {
        let a = PI + 2.0 * PI * i as f64 / 12.0;
        pts.push([0.33 * a.cos(), 0.5 + 0.12 * a.sin(), 0.78 + 0.06 * a.cos().abs()]);
    }
    for i in 0..8 {
        let a = PI + 2.0 * PI * i as f64 / 8.0;
        pts.push([0.2 * a.cos(), 0.5 + 0.04 * a.sin(), 0.8]);
    }
    debug_assert_eq!(pts.len(), KEYPOINT_COUNT);
    pts
}

/// Projects the template after a yaw rotation (degrees, positive turns the
/// template's +x side away from the camera) with weak perspective.
pub fn template_keypoints(center: (f64, f64), scale: f64, yaw_deg: f64) -> Keypoints {
    let (s, c) = yaw_deg.to_radians().sin_cos();
    let pts = landmark_template()
        .into_iter()
        .map(|[x, y, z]| {
            let xr = c * x + s * z;
            (center.0 + scale * xr, center.1 + scale * y)
        })
        .collect();
    Keypoints::new(pts).expect("template has 68 finite points")
}

fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(m);
    if d.abs() < 1e-12 {
        return None;
    }
    let mut out = [0.0; 3];
    for (col, o) in out.iter_mut().enumerate() {
        let mut mc = m;
        for r in 0..3 {
            mc[r][col] = b[r];
        }
        *o = det(mc) / d;
    }
    Some(out)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Head yaw in degrees from a weak-perspective fit of the keypoints to
/// [`landmark_template`].
pub fn yaw_from_keypoints(kp: &Keypoints) -> Result<f64> {
    let tpl = landmark_template();
    let n = tpl.len() as f64;
    let mean3 = tpl
        .iter()
        .fold([0.0; 3], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n, a[2] + p[2] / n]);
    let (mx, my) = kp
        .points()
        .iter()
        .fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    // Normal equations for the 2×3 projection: rows of M solve (XᵀX) m = Xᵀu.
    let mut xtx = [[0.0; 3]; 3];
    let mut xtu = [0.0; 3];
    let mut xtv = [0.0; 3];
    for (p, q) in tpl.iter().zip(kp.points()) {
        let x = [p[0] - mean3[0], p[1] - mean3[1], p[2] - mean3[2]];
        let (u, v) = (q.0 - mx, q.1 - my);
        for r in 0..3 {
            for c in 0..3 {
                xtx[r][c] += x[r] * x[c];
            }
            xtu[r] += x[r] * u;
            xtv[r] += x[r] * v;
        }
    }
    let degenerate = || Error::InvalidKeypoints("keypoints do not determine a head pose".into());
    let r1 = solve3(xtx, xtu).ok_or_else(degenerate)?;
    let r2 = solve3(xtx, xtv).ok_or_else(degenerate)?;
    let n1 = norm(r1);
    if !(n1 > 1e-9) {
        return Err(degenerate());
    }
    let r1 = r1.map(|v| v / n1);
    let d = r1[0] * r2[0] + r1[1] * r2[1] + r1[2] * r2[2];
    let r2 = [r2[0] - d * r1[0], r2[1] - d * r1[1], r2[2] - d * r1[2]];
    let n2 = norm(r2);
    if !(n2 > 1e-9) {
        return Err(degenerate());
    }
    let r2 = r2.map(|v| v / n2);
    let r3 = cross(r1, r2);
    Ok((-r3[0]).atan2((r3[1] * r3[1] + r3[2] * r3[2]).sqrt()).to_degrees())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseBand {
    Aligned,
    Mis15,
    Mis30,
    Beyond,
}

impl PoseBand {
    pub fn from_yaw_difference(deg: f64) -> Self {
        let d = deg.abs();
        if d < 15.0 {
            PoseBand::Aligned
        } else if d < 30.0 {
            PoseBand::Mis15
        } else if d < 45.0 {
            PoseBand::Mis30
        } else {
            PoseBand::Beyond
        }
    }

    fn marker(self) -> &'static str {
        match self {
            PoseBand::Aligned => "-",
            PoseBand::Mis15 => "x",
            PoseBand::Mis30 => "xx",
            PoseBand::Beyond => ">45",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioLabel {
    pub pose_band: PoseBand,
    pub needs_face_inpaint: bool,
    pub needs_bg_inpaint: bool,
    pub has_hat: bool,
    pub skipped_small_hair: bool,
}

/// `count / total > percent / 100`, in integers.
fn exceeds(count: usize, total: usize, percent: usize) -> bool {
    count * 100 > percent * total
}

pub fn classify_scenario(
    face_sem: &SemanticMap,
    hair_sem: &SemanticMap,
    face_kp: &Keypoints,
    _hair_kp: &Keypoints,
    yaw_f: f64,
    yaw_h: f64,
) -> Result<ScenarioLabel> {
    face_sem.check_canvas(hair_sem)?;
    let (w, h) = (face_sem.width(), face_sem.height());
    let total = w * h;
    let h_hair = hair_sem.region(Label::Hair);
    let f_face_k = face_area_from_keypoints(face_kp, w, h)?;
    Ok(ScenarioLabel {
        pose_band: PoseBand::from_yaw_difference(yaw_f - yaw_h),
        needs_face_inpaint: exceeds(hair_sem.region(Label::Face).minus(&f_face_k).count(), total, 10),
        needs_bg_inpaint: exceeds(h_hair.minus(&face_sem.region(Label::Hair)).count(), total, 15),
        has_hat: exceeds(hair_sem.region(Label::Hat).count(), total, 5),
        skipped_small_hair: h_hair.count() * 100 < 5 * total,
    })
}

/// One row of the user-study breakdown: pose band plus the three flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub pose_band: PoseBand,
    pub face_inpaint: bool,
    pub bg_inpaint: bool,
    pub hat: bool,
}

impl ScenarioConfig {
    const fn new(pose_band: PoseBand, face_inpaint: bool, bg_inpaint: bool, hat: bool) -> Self {
        Self {
            pose_band,
            face_inpaint,
            bg_inpaint,
            hat,
        }
    }

    pub fn of(label: &ScenarioLabel) -> Self {
        Self::new(
            label.pose_band,
            label.needs_face_inpaint,
            label.needs_bg_inpaint,
            label.has_hat,
        )
    }

    /// 1-based row in [`SCENARIO_CONFIGS`], if this combination is one of them.
    pub fn index(&self) -> Option<usize> {
        SCENARIO_CONFIGS.iter().position(|c| c == self).map(|i| i + 1)
    }
}

impl fmt::Display for ScenarioConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |b: bool, s: &'static str| if b { s } else { "-" };
        write!(
            f,
            "pose:{} face:{} bg:{} hat:{}",
            self.pose_band.marker(),
            flag(self.face_inpaint, "F"),
            flag(self.bg_inpaint, "B"),
            flag(self.hat, "H")
        )
    }
}

/// The twelve evaluated combinations, in table order.
pub const SCENARIO_CONFIGS: [ScenarioConfig; 12] = {
    use PoseBand::{Aligned as A, Mis15 as P, Mis30 as PP};
    [
        ScenarioConfig::new(A, false, false, false),
        ScenarioConfig::new(P, false, false, false),
        ScenarioConfig::new(A, true, false, false),
        ScenarioConfig::new(A, false, true, false),
        ScenarioConfig::new(A, false, false, true),
        ScenarioConfig::new(PP, false, false, false),
        ScenarioConfig::new(P, true, false, false),
        ScenarioConfig::new(P, false, true, false),
        ScenarioConfig::new(P, false, false, true),
        ScenarioConfig::new(A, true, true, false),
        ScenarioConfig::new(A, true, false, true),
        ScenarioConfig::new(A, false, true, true),
    ]
};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_constant_offset() {
        let a = Image::filled(16, 16, [0.5; 3]);
        let b = Image::filled(16, 16, [0.5 + 16.0 / 255.0; 3]);
        let p = psnr(&a, &b, None).unwrap();
        assert!((p - 20.0 * (255.0f64 / 16.0).log10()).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b, Some(&Mask::empty(16, 16))).is_err());
    }

    #[test]
    fn ssim_identity_and_constant_offset() {
        let mut a = Image::new(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                a.put_pixel(y, x, [(x as f64) / 16.0, (y as f64) / 16.0, 0.3]);
            }
        }
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        // Constant images: only the luminance term survives.
        let p = Image::filled(16, 16, [0.2; 3]);
        let q = Image::filled(16, 16, [0.6; 3]);
        let c1 = 1e-4;
        let expect = (2.0 * 0.2 * 0.6 + c1) / (0.04 + 0.36 + c1);
        assert!((ssim(&p, &q).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn rmse_three_four_five() {
        let a = template_keypoints((32.0, 32.0), 20.0, 0.0);
        let b = a.map(|(x, y)| (x + 3.0, y + 4.0));
        assert!((face_shape_rmse(&a, &b) - 5.0).abs() < 1e-12);
        assert_eq!(face_shape_rmse(&a, &a), 0.0);
    }

    #[test]
    fn template_is_mirror_symmetric() {
        let kp = template_keypoints((0.0, 0.0), 1.0, 0.0);
        let (l, r) = (kp.get(0), kp.get(16));
        assert!((l.0 + r.0).abs() < 1e-12 && (l.1 - r.1).abs() < 1e-12);
        assert!(yaw_from_keypoints(&kp).unwrap().abs() < 1e-6);
    }

    #[test]
    fn yaw_recovers_rotation_and_mirror() {
        for deg in [-40.0, -20.0, 5.0, 20.0, 35.0] {
            let kp = template_keypoints((100.0, 80.0), 40.0, deg);
            let est = yaw_from_keypoints(&kp).unwrap();
            assert!((est - deg).abs() < 1.0, "{deg} vs {est}");
            let mirrored = kp.map(|(x, y)| (200.0 - x, y));
            let m = yaw_from_keypoints(&mirrored).unwrap();
            assert!((m + est).abs() < 1.0, "mirror {m} vs {est}");
        }
    }

    #[test]
    fn pose_bands() {
        assert_eq!(PoseBand::from_yaw_difference(14.99), PoseBand::Aligned);
        assert_eq!(PoseBand::from_yaw_difference(-20.0), PoseBand::Mis15);
        assert_eq!(PoseBand::from_yaw_difference(30.0), PoseBand::Mis30);
        assert_eq!(PoseBand::from_yaw_difference(45.0), PoseBand::Beyond);
    }

    #[test]
    fn configs_are_distinct() {
        for (i, c) in SCENARIO_CONFIGS.iter().enumerate() {
            assert_eq!(c.index(), Some(i + 1));
        }
    }
}
