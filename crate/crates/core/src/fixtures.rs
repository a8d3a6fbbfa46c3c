//! Synthetic portraits: label maps, keypoints, and flat-shaded images built from
//! a handful of geometric parameters. Used by tests, demos, and the CLI's
//! self-check.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignedImage;
use crate::config::InputPaths;
use crate::error::Result;
use crate::evaluation::template_keypoints;
use crate::guide::{GuidePair, ViewGuide};
use crate::latent::{sample_latent, GeneratorBackend, NoiseMaps};
use crate::raster::{Image, Mask, Rgb};
use crate::semantics::{face_area_from_keypoints, Keypoints, Label, MaskRadii, MaskSet, SemanticMap, View};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PortraitSpec {
    pub resolution: usize,
    /// Template origin in pixels (between the eyes, roughly at ear height).
    pub center: (f64, f64),
    /// Pixels per template unit; the face is about two units wide.
    pub scale: f64,
    pub yaw_deg: f64,
    /// Hair ellipse half-width and half-height, in template units.
    pub hair_width: f64,
    pub hair_height: f64,
    /// How far below the template origin the hair reaches, in template units.
    pub hair_length: f64,
    pub bangs: bool,
    pub hat: bool,
    pub ears: bool,
}

impl Default for PortraitSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            center: (32.0, 26.0),
            scale: 14.0,
            yaw_deg: 0.0,
            hair_width: 1.35,
            hair_height: 1.45,
            hair_length: 0.7,
            bangs: false,
            hat: false,
            ears: true,
        }
    }
}

impl PortraitSpec {
    pub fn keypoints(&self) -> Keypoints {
        template_keypoints(self.center, self.scale, self.yaw_deg)
    }

    pub fn semantics(&self) -> SemanticMap {
        let r = self.resolution;
        let kp = self.keypoints();
        let s = self.scale;
        let (cx, cy) = self.center;
        let face_area = face_area_from_keypoints(&kp, r, r).unwrap_or_else(|_| Mask::empty(r, r));
        let forehead_top = cy - 0.95 * s;
        let brow_top = (17..=26).map(|i| kp.get(i).1).fold(f64::INFINITY, f64::min);
        let (chin_x, chin_y) = kp.get(8);
        let hair_cy = cy - 0.1 * s;
        let nose = bbox(&kp, 27..=35);
        let ear_rows = (cy - 0.3 * s, cy + 0.3 * s);
        let (x0, x16) = (kp.get(0).0, kp.get(16).0);

        SemanticMap::from_fn(r, r, |y, x| {
            let (fy, fx) = (y as f64, x as f64);
            let mut label = Label::Background;
            if (fx - chin_x).abs() < 0.45 * s && fy > chin_y - 0.2 * s {
                label = Label::Neck;
            }
            let ex = (fx - cx) / (self.hair_width * s);
            let ey = (fy - hair_cy) / (self.hair_height * s);
            let in_hair = ex * ex + ey * ey <= 1.0 && fy <= cy + self.hair_length * s;
            if in_hair {
                label = Label::Hair;
            }
            if self.ears
                && fy >= ear_rows.0
                && fy <= ear_rows.1
                && ((fx >= x0 - 0.18 * s && fx < x0) || (fx > x16 && fx <= x16 + 0.18 * s))
            {
                label = Label::Ear;
            }
            if face_area.get(y, x) && fy >= forehead_top {
                label = Label::Face;
                if self.bangs && fy < brow_top - 0.05 * s {
                    label = Label::Hair;
                }
            }
            if fx >= nose.0 - 1.0 && fx <= nose.2 + 1.0 && fy >= nose.1 - 1.0 && fy <= nose.3 + 1.0 {
                label = Label::Nose;
            }
            if self.hat && in_hair && fy < hair_cy - 0.55 * self.hair_height * s {
                label = Label::Hat;
            }
            label
        })
    }

    /// Flat colors per label with a gentle gradient.
    pub fn image(&self) -> Image {
        paint(&self.semantics())
    }
}

/// Writes `<prefix>.png`, `<prefix>_sem.png` and `<prefix>_kp.txt` into `dir` and
/// returns their paths (image, semantics, keypoints).
pub fn write_portrait(dir: &Path, prefix: &str, spec: &PortraitSpec) -> Result<[std::path::PathBuf; 3]> {
    let paths = [
        dir.join(format!("{prefix}.png")),
        dir.join(format!("{prefix}_sem.png")),
        dir.join(format!("{prefix}_kp.txt")),
    ];
    spec.image().save_png(&paths[0])?;
    spec.semantics().save_png(&paths[1])?;
    spec.keypoints().save(&paths[2])?;
    Ok(paths)
}

/// Writes a face and a hair portrait into `dir` and returns the input paths of a
/// transfer between them.
pub fn write_pair(dir: &Path, face: &PortraitSpec, hair: &PortraitSpec) -> Result<InputPaths> {
    let [face_image, face_semantics, face_keypoints] = write_portrait(dir, "face", face)?;
    let [hair_image, hair_semantics, hair_keypoints] = write_portrait(dir, "hair", hair)?;
    Ok(InputPaths {
        face_image,
        face_semantics,
        face_keypoints,
        hair_image,
        hair_semantics,
        hair_keypoints,
    })
}

/// Writes a self-transfer pair: both portraits carry the labels and keypoints of
/// `spec`, and both images are the backend's rendering of the code drawn with
/// `latent_seed` under the noise drawn with `noise_seed`. Such an image lies in
/// the generator's range, so the transfer can in principle reproduce it.
pub fn write_rendered_self_pair<B: GeneratorBackend>(
    dir: &Path,
    spec: &PortraitSpec,
    backend: &B,
    latent_seed: u64,
    noise_seed: u64,
) -> Result<InputPaths> {
    let w = sample_latent(backend, latent_seed)?;
    let noise = NoiseMaps::random(&backend.noise_schema(), noise_seed);
    let image = backend.synthesize(&w.replicate(backend.layer_count()), &noise)?;
    let paths = write_pair(dir, spec, spec)?;
    image.save_png(&paths.face_image)?;
    image.save_png(&paths.hair_image)?;
    Ok(paths)
}

fn bbox(kp: &Keypoints, range: std::ops::RangeInclusive<usize>) -> (f64, f64, f64, f64) {
    range.fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |b, i| {
            let (x, y) = kp.get(i);
            (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y))
        },
    )
}

pub fn label_color(label: Label) -> Rgb {
    match label {
        Label::Background => [0.55, 0.7, 0.85],
        Label::Face => [0.92, 0.74, 0.62],
        Label::Ear => [0.88, 0.68, 0.56],
        Label::Nose => [0.85, 0.62, 0.52],
        Label::Neck => [0.8, 0.62, 0.5],
        Label::Hair => [0.3, 0.18, 0.1],
        Label::Hat => [0.7, 0.1, 0.15],
    }
}

pub fn paint(sem: &SemanticMap) -> Image {
    let (w, h) = (sem.width(), sem.height());
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let base = label_color(sem.get(y, x));
            let shade = 0.9 + 0.1 * (x as f64 / w as f64) - 0.05 * (y as f64 / h as f64);
            img.put_pixel(y, x, base.map(|c| (c * shade).clamp(0.0, 1.0)));
        }
    }
    img
}

/// A guide pair with both views showing `face_guide` / `hair_guide` and caller-
/// supplied masks; everything else is filled with plain placeholders. For
/// optimizer tests that bypass compositing.
pub fn direct_guide_pair(face_guide: Image, hair_guide: Image, face_masks: MaskSet, hair_masks: MaskSet) -> GuidePair {
    let r = face_guide.width();
    let spec = PortraitSpec {
        resolution: r,
        center: (r as f64 / 2.0, r as f64 * 0.4),
        scale: r as f64 * 0.22,
        ..PortraitSpec::default()
    };
    let sem = spec.semantics();
    let kp = spec.keypoints();
    let aligned = |img: &Image| AlignedImage::new(img.clone(), sem.clone(), kp.clone()).expect("same canvas");
    GuidePair {
        face: ViewGuide {
            view: View::Face,
            face: aligned(&face_guide),
            hair: aligned(&face_guide),
            guide: face_guide,
            masks: face_masks,
            warnings: Vec::new(),
        },
        hair: ViewGuide {
            view: View::Hair,
            face: aligned(&hair_guide),
            hair: aligned(&hair_guide),
            guide: hair_guide,
            masks: hair_masks,
            warnings: Vec::new(),
        },
    }
}

/// Mask set whose only non-empty member is `m_f`.
pub fn face_only_masks(m_f: Mask) -> MaskSet {
    let (w, h) = (m_f.width(), m_f.height());
    MaskSet {
        m_f,
        m_h: Mask::empty(w, h),
        m_bg: Mask::empty(w, h),
        m_roni_f: Mask::empty(w, h),
        m_roni_h: Mask::empty(w, h),
        m_out: Mask::empty(w, h),
        radii: MaskRadii::for_height(h),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_portrait_has_every_region() {
        let spec = PortraitSpec {
            hat: true,
            bangs: true,
            ..PortraitSpec::default()
        };
        let sem = spec.semantics();
        for label in Label::ALL {
            assert!(!sem.region(label).is_empty(), "{label:?} missing");
        }
    }

    #[test]
    fn keypoints_sit_on_canvas() {
        let kp = PortraitSpec::default().keypoints();
        for &(x, y) in kp.points() {
            assert!((0.0..64.0).contains(&x) && (0.0..64.0).contains(&y));
        }
    }
}
