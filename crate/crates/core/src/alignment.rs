//! Keypoint-driven alignment of one portrait into another's viewpoint.
//!
//! The 2D path only scales uniformly and translates: face widths and face centers
//! are matched. Rotation is left to a 3D aligner, which plugs in through
//! [`PoseAligner`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};
use crate::semantics::{Keypoints, Label, SemanticMap};

/// An image with its semantics and keypoints on a common canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedImage {
    pub pixels: Image,
    pub sem: SemanticMap,
    pub kp: Keypoints,
}

impl AlignedImage {
    pub fn new(pixels: Image, sem: SemanticMap, kp: Keypoints) -> Result<Self> {
        if pixels.width() != sem.width() || pixels.height() != sem.height() {
            return Err(Error::Canvas(format!(
                "image is {}x{} but semantic map is {}x{}",
                pixels.width(),
                pixels.height(),
                sem.width(),
                sem.height()
            )));
        }
        Ok(Self { pixels, sem, kp })
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

/// `x(k16) − x(k0)`.
pub fn face_width(kp: &Keypoints) -> Result<f64> {
    let w = kp.get(16).0 - kp.get(0).0;
    if !(w > 0.0) {
        return Err(Error::InvalidKeypoints(format!("non-positive face width {w}")));
    }
    Ok(w)
}

/// Horizontal center of the outer contour ends; vertical center halfway between
/// their midpoint and the chin.
pub fn face_center(kp: &Keypoints) -> (f64, f64) {
    let (x0, y0) = kp.get(0);
    let (x16, y16) = kp.get(16);
    let (_, y8) = kp.get(8);
    let mx = (x0 + x16) / 2.0;
    let my = (y0 + y16) / 2.0;
    (mx, (my + y8) / 2.0)
}

/// `p' = center_t + scale · (p − center_s)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub source_center: (f64, f64),
    pub target_center: (f64, f64),
}

impl SimilarityTransform {
    pub fn between(source: &Keypoints, target: &Keypoints) -> Result<Self> {
        Ok(Self {
            scale: face_width(target)? / face_width(source)?,
            source_center: face_center(source),
            target_center: face_center(target),
        })
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            self.target_center.0 + self.scale * (x - self.source_center.0),
            self.target_center.1 + self.scale * (y - self.source_center.1),
        )
    }

    pub fn invert(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (
            self.source_center.0 + (x - self.target_center.0) / self.scale,
            self.source_center.1 + (y - self.target_center.1) / self.scale,
        )
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.source_center == self.target_center
    }
}

fn bilinear(img: &Image, c: usize, y: f64, x: f64) -> f64 {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    if fx == 0.0 && fy == 0.0 {
        return img.get(c, y0, x0);
    }
    let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
    let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples `source` through `t`. Pixel centers sit at integer coordinates; a
/// target pixel is covered when its preimage falls inside the source rectangle
/// `[-0.5, w - 0.5) × [-0.5, h - 0.5)`.
pub fn warp(source: &AlignedImage, t: &SimilarityTransform) -> AlignedImage {
    if t.is_identity() {
        return source.clone();
    }
    let (w, h) = (source.width(), source.height());
    let mut pixels = Image::new(w, h);
    let mut sem = SemanticMap::filled(w, h, Label::Background);
    let mut valid = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.invert((x as f64, y as f64));
            let inside = sx >= -0.5 && sx < w as f64 - 0.5 && sy >= -0.5 && sy < h as f64 - 0.5;
            if !inside {
                continue;
            }
            let nx = (sx.round() as isize).clamp(0, w as isize - 1) as usize;
            let ny = (sy.round() as isize).clamp(0, h as isize - 1) as usize;
            if !source.sem.valid.get(ny, nx) {
                continue;
            }
            for c in 0..3 {
                pixels.set(c, y, x, bilinear(&source.pixels, c, sy, sx));
            }
            sem.set(y, x, source.sem.get(ny, nx));
            valid.set(y, x, true);
        }
    }
    let sem = sem.with_valid(valid).expect("same canvas");
    AlignedImage {
        pixels,
        sem,
        kp: source.kp.map(|p| t.apply(p)),
    }
}

/// Scales `source` about its face center to the target's face width and moves the
/// center onto the target's.
pub fn align_to(source: &AlignedImage, target_kp: &Keypoints) -> Result<AlignedImage> {
    let t = SimilarityTransform::between(&source.kp, target_kp)?;
    Ok(warp(source, &t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignerKind {
    Similarity2d,
    /// Inputs are already pose-aligned; passes them through untouched.
    Identity,
    External3d,
}

/// Contract for bringing a source portrait into the viewpoint given by `target_kp`.
pub trait PoseAligner: Send + Sync {
    fn kind(&self) -> AlignerKind;
    fn align(&self, source: &AlignedImage, target_kp: &Keypoints) -> Result<AlignedImage>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Similarity2d;

impl PoseAligner for Similarity2d {
    fn kind(&self) -> AlignerKind {
        AlignerKind::Similarity2d
    }

    fn align(&self, source: &AlignedImage, target_kp: &Keypoints) -> Result<AlignedImage> {
        align_to(source, target_kp)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityAligner;

impl PoseAligner for IdentityAligner {
    fn kind(&self) -> AlignerKind {
        AlignerKind::Identity
    }

    fn align(&self, source: &AlignedImage, _target_kp: &Keypoints) -> Result<AlignedImage> {
        Ok(source.clone())
    }
}

/// Slot for a 3D-aware aligner; no implementation ships.
#[derive(Clone, Copy, Debug, Default)]
pub struct External3d;

impl PoseAligner for External3d {
    fn kind(&self) -> AlignerKind {
        AlignerKind::External3d
    }

    fn align(&self, _source: &AlignedImage, _target_kp: &Keypoints) -> Result<AlignedImage> {
        Err(Error::UnsupportedAligner(
            "3D pose alignment is not available in this build".into(),
        ))
    }
}

pub fn aligner_for(kind: AlignerKind) -> Box<dyn PoseAligner> {
    match kind {
        AlignerKind::Similarity2d => Box::new(Similarity2d),
        AlignerKind::Identity => Box::new(IdentityAligner),
        AlignerKind::External3d => Box::new(External3d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp_with(k0: (f64, f64), k8: (f64, f64), k16: (f64, f64)) -> Keypoints {
        let mut pts: Vec<(f64, f64)> = (0..68).map(|i| (20.0 + i as f64 * 0.5, 30.0)).collect();
        pts[0] = k0;
        pts[8] = k8;
        pts[16] = k16;
        Keypoints::new(pts).unwrap()
    }

    #[test]
    fn width_and_center() {
        let kp = kp_with((10.0, 50.0), (50.0, 90.0), (90.0, 52.0));
        assert_eq!(face_width(&kp).unwrap(), 80.0);
        let kp = kp_with((0.0, 0.0), (5.0, 10.0), (10.0, 0.0));
        assert_eq!(face_center(&kp), (5.0, 5.0));
        let kp = kp_with((5.0, 0.0), (5.0, 10.0), (5.0, 0.0));
        assert!(matches!(face_width(&kp), Err(Error::InvalidKeypoints(_))));
    }

    #[test]
    fn external_aligner_is_unsupported() {
        let kp = kp_with((4.0, 8.0), (8.0, 14.0), (12.0, 8.0));
        let img = AlignedImage::new(Image::new(16, 16), SemanticMap::filled(16, 16, Label::Face), kp.clone()).unwrap();
        assert!(matches!(External3d.align(&img, &kp), Err(Error::UnsupportedAligner(_))));
    }

    #[test]
    fn same_keypoints_is_exact_identity() {
        let kp = kp_with((4.0, 8.0), (8.0, 14.0), (12.0, 8.0));
        let mut img = Image::new(16, 16);
        img.put_pixel(3, 5, [0.1, 0.2, 0.3]);
        let src = AlignedImage::new(img, SemanticMap::filled(16, 16, Label::Hair), kp.clone()).unwrap();
        let out = align_to(&src, &kp).unwrap();
        assert_eq!(out, src);
        assert_eq!(out.sem.valid.count(), 256);
    }
}
