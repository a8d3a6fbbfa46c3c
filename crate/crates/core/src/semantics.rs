//! Semantic label maps, facial keypoints, binary morphology and the named masks
//! that drive every loss term.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Face = 1,
    Ear = 2,
    Nose = 3,
    Neck = 4,
    Hair = 5,
    Hat = 6,
}

impl Label {
    pub const ALL: [Label; 7] = [
        Label::Background,
        Label::Face,
        Label::Ear,
        Label::Nose,
        Label::Neck,
        Label::Hair,
        Label::Hat,
    ];

    pub fn from_code(code: u8) -> Option<Label> {
        Label::ALL.get(code as usize).copied()
    }
}

/// Grouping of the 19 face-parsing classes (CelebAMask-HQ ordering) into our labels.
///
/// 0 background, 1 skin, 2/3 brows, 4/5 eyes, 6 glasses, 7/8 ears, 9 earring,
/// 10 nose, 11 mouth, 12/13 lips, 14 neck, 15 necklace, 16 cloth, 17 hair, 18 hat.
pub const FACE_PARSING_19: [Label; 19] = [
    Label::Background,
    Label::Face,
    Label::Face,
    Label::Face,
    Label::Face,
    Label::Face,
    Label::Face,
    Label::Ear,
    Label::Ear,
    Label::Ear,
    Label::Nose,
    Label::Face,
    Label::Face,
    Label::Face,
    Label::Neck,
    Label::Neck,
    Label::Background,
    Label::Hair,
    Label::Hat,
];

/// Per-pixel labels plus the footprint of real source content.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap {
    width: usize,
    height: usize,
    labels: Vec<Label>,
    /// Pixels covered by source content; the complement is the out-of-frame band.
    pub valid: Mask,
}

impl SemanticMap {
    pub fn new(width: usize, height: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Schema(format!(
                "{} labels for a {width}x{height} map",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
            valid: Mask::full(width, height),
        })
    }

    pub fn filled(width: usize, height: usize, label: Label) -> Self {
        Self {
            width,
            height,
            labels: vec![label; width * height],
            valid: Mask::full(width, height),
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Label) -> Self {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(y, x));
            }
        }
        Self {
            width,
            height,
            labels,
            valid: Mask::full(width, height),
        }
    }

    pub fn with_valid(mut self, valid: Mask) -> Result<Self> {
        if valid.width() != self.width || valid.height() != self.height {
            return Err(Error::Canvas("validity mask does not match label grid".into()));
        }
        self.valid = valid;
        Ok(self)
    }

    /// Maps raw 19-class face-parsing output through [`FACE_PARSING_19`].
    pub fn from_face_parsing(width: usize, height: usize, classes: &[u8]) -> Result<Self> {
        let labels = classes
            .iter()
            .map(|&c| {
                FACE_PARSING_19
                    .get(c as usize)
                    .copied()
                    .ok_or_else(|| Error::Range(format!("face-parsing class {c} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(width, height, labels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Label {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, label: Label) {
        self.labels[y * self.width + x] = label;
    }

    pub fn region(&self, label: Label) -> Mask {
        Mask::from_bits(
            self.width,
            self.height,
            self.labels.iter().map(|&l| l == label).collect(),
        )
        .expect("label grid matches canvas")
    }

    pub fn check_canvas(&self, other: &SemanticMap) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Canvas(format!(
                "semantic maps {}x{} and {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Reads an 8-bit label PNG; a second (alpha) channel, when present, is the validity mask.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::input(path, e.to_string()))?;
        let has_alpha = img.color().has_alpha();
        let la = img.to_luma_alpha8();
        let (w, h) = (la.width() as usize, la.height() as usize);
        let mut labels = Vec::with_capacity(w * h);
        let mut valid = Vec::with_capacity(w * h);
        for p in la.pixels() {
            let label = Label::from_code(p.0[0])
                .ok_or_else(|| Error::input(path, format!("label value {} out of range 0..=6", p.0[0])))?;
            labels.push(label);
            valid.push(!has_alpha || p.0[1] > 0);
        }
        Self::new(w, h, labels)?.with_valid(Mask::from_bits(w, h, valid)?)
    }

    /// Writes the label codes, adding an alpha validity channel only when some pixel is invalid.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.valid.count() == self.width * self.height {
            let buf = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                image::Luma([self.get(y as usize, x as usize) as u8])
            });
            buf.save(path)?;
        } else {
            let buf = image::GrayAlphaImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                let (y, x) = (y as usize, x as usize);
                image::LumaA([self.get(y, x) as u8, if self.valid.get(y, x) { 255 } else { 0 }])
            });
            buf.save(path)?;
        }
        Ok(())
    }
}

pub const KEYPOINT_COUNT: usize = 68;
/// Jaw contour, k0..=k16.
pub const CONTOUR: std::ops::RangeInclusive<usize> = 0..=16;
/// Both eyebrows, k17..=k26.
pub const EYEBROWS: std::ops::RangeInclusive<usize> = 17..=26;

/// 68 facial landmarks in pixel coordinates (`x` = column, `y` = row).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoints {
    points: Vec<(f64, f64)>,
}

impl Keypoints {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() != KEYPOINT_COUNT {
            return Err(Error::InvalidKeypoints(format!(
                "expected {KEYPOINT_COUNT} keypoints, got {}",
                points.len()
            )));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::InvalidKeypoints("non-finite coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn get(&self, i: usize) -> (f64, f64) {
        self.points[i]
    }

    pub fn map(&self, f: impl Fn((f64, f64)) -> (f64, f64)) -> Keypoints {
        Keypoints {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Parses 68 whitespace-separated `x y` records.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::with_capacity(KEYPOINT_COUNT);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y)), None) => points.push((x, y)),
                _ => {
                    return Err(Error::InvalidKeypoints(format!(
                        "line {}: expected \"x y\", got {line:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Self::new(points)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::input(path, e.to_string()))?;
        Self::parse(&text).map_err(|e| Error::input(path, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        self.points.iter().map(|(x, y)| format!("{x} {y}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Iterated binary erosion with a full 3×3 element; pixels outside the frame count as 0.
pub fn erode(mask: &Mask, iterations: usize) -> Mask {
    morph(mask, iterations, false, false)
}

/// Iterated binary dilation with a full 3×3 element; pixels outside the frame count as 0.
pub fn dilate(mask: &Mask, iterations: usize) -> Mask {
    morph(mask, iterations, true, false)
}

/// Erosion with a configurable out-of-frame value; `erode_with_border(m, k, true)` is
/// the exact complement-dual of [`dilate`].
pub fn erode_with_border(mask: &Mask, iterations: usize, border: bool) -> Mask {
    morph(mask, iterations, false, border)
}

fn morph(mask: &Mask, iterations: usize, grow: bool, border: bool) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut cur: Vec<bool> = mask.bits().to_vec();
    let mut tmp = vec![false; w * h];
    // `grow` keeps a pixel if any neighbour is set, otherwise only if all are.
    let combine = |a: bool, b: bool| if grow { a || b } else { a && b };
    for _ in 0..iterations {
        for y in 0..h {
            for x in 0..w {
                let mut acc = cur[y * w + x];
                acc = combine(acc, if x > 0 { cur[y * w + x - 1] } else { border });
                acc = combine(acc, if x + 1 < w { cur[y * w + x + 1] } else { border });
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = tmp[y * w + x];
                acc = combine(acc, if y > 0 { tmp[(y - 1) * w + x] } else { border });
                acc = combine(acc, if y + 1 < h { tmp[(y + 1) * w + x] } else { border });
                cur[y * w + x] = acc;
            }
        }
    }
    Mask::from_bits(w, h, cur).expect("same canvas")
}

fn check_contour(kp: &Keypoints) -> Result<()> {
    let (x0, _) = kp.get(0);
    let (x16, _) = kp.get(16);
    if x0 >= x16 {
        return Err(Error::InvalidKeypoints(format!(
            "degenerate jaw contour: x(k0) = {x0} >= x(k16) = {x16}"
        )));
    }
    Ok(())
}

/// Lowest jaw row at column `x` along the polyline k0..k16, if the contour spans `x`.
fn jaw_row(kp: &Keypoints, x: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..16 {
        let (ax, ay) = kp.get(i);
        let (bx, by) = kp.get(i + 1);
        let (lo, hi) = if ax <= bx { (ax, bx) } else { (bx, ax) };
        if x < lo || x > hi {
            continue;
        }
        let y = if hi == lo {
            ay.max(by)
        } else {
            ay + (by - ay) * (x - ax) / (bx - ax)
        };
        best = Some(best.map_or(y, |b: f64| b.max(y)));
    }
    best
}

/// Face area above the jaw contour (`F_face^k`): every column between `x(k0)` and
/// `x(k16)` is filled from row 0 down to the interpolated jaw row.
pub fn face_area_from_keypoints(kp: &Keypoints, width: usize, height: usize) -> Result<Mask> {
    check_contour(kp)?;
    let (x0, _) = kp.get(0);
    let (x16, _) = kp.get(16);
    let mut out = Mask::empty(width, height);
    let first = x0.ceil().max(0.0) as usize;
    let last = x16.floor();
    if last < 0.0 {
        return Ok(out);
    }
    let last = (last as usize).min(width.saturating_sub(1));
    for x in first..=last {
        let Some(jaw) = jaw_row(kp, x as f64) else {
            continue;
        };
        if jaw < 0.0 {
            continue;
        }
        let bottom = (jaw.floor() as usize).min(height - 1);
        for y in 0..=bottom {
            out.set(y, x, true);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Face,
    Hair,
}

impl View {
    pub const BOTH: [View; 2] = [View::Face, View::Hair];

    pub fn name(self) -> &'static str {
        match self {
            View::Face => "face",
            View::Hair => "hair",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Iteration counts of the 3×3 erosions and dilations in the mask formulas.
///
/// The reference values belong to 256-pixel canvases; [`MaskRadii::for_height`]
/// scales them to other sizes so the masks keep their proportions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRadii {
    /// Face-region erosion above the eyebrows.
    pub face_top: usize,
    /// Hair-region erosion.
    pub hair: usize,
    /// Hair dilation subtracted from the background.
    pub background: usize,
    /// Erosion of the copy mask used by the target update.
    pub copy: usize,
    /// Erosion of the face view's untouched-pixel mask.
    pub raw_face: usize,
    /// Erosion of the hair view's untouched-pixel mask.
    pub raw_hair: usize,
    /// Erosion of the background pasted back into the final image.
    pub paste: usize,
}

impl MaskRadii {
    pub const REFERENCE_HEIGHT: usize = 256;

    pub const REFERENCE: MaskRadii = MaskRadii {
        face_top: 5,
        hair: 5,
        background: 5,
        copy: 5,
        raw_face: 10,
        raw_hair: 5,
        paste: 5,
    };

    /// Reference radii scaled by `height / 256`, rounded, and at least 1.
    pub fn for_height(height: usize) -> Self {
        let s = |r: usize| (((r * height) as f64 / Self::REFERENCE_HEIGHT as f64).round() as usize).max(1);
        let r = Self::REFERENCE;
        MaskRadii {
            face_top: s(r.face_top),
            hair: s(r.hair),
            background: s(r.background),
            copy: s(r.copy),
            raw_face: s(r.raw_face),
            raw_hair: s(r.raw_hair),
            paste: s(r.paste),
        }
    }
}

/// The named masks for one viewpoint, plus the radii they were built with.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub m_f: Mask,
    pub m_h: Mask,
    pub m_bg: Mask,
    pub m_roni_f: Mask,
    pub m_roni_h: Mask,
    pub m_out: Mask,
    pub radii: MaskRadii,
}

impl MaskSet {
    pub fn named(&self) -> [(&'static str, &Mask); 6] {
        [
            ("m_f", &self.m_f),
            ("m_h", &self.m_h),
            ("m_bg", &self.m_bg),
            ("m_roni_f", &self.m_roni_f),
            ("m_roni_h", &self.m_roni_h),
            ("m_out", &self.m_out),
        ]
    }
}

/// Row index above which the face mask is eroded: 5 px (at 256 px canvas height,
/// scaled proportionally) above the highest eyebrow keypoint.
pub fn eyebrow_cutoff(kp: &Keypoints, height: usize) -> f64 {
    let top = EYEBROWS.map(|i| kp.get(i).1).fold(f64::INFINITY, f64::min);
    top - 5.0 * height as f64 / 256.0
}

/// Builds every per-view mask from the face and hair semantics aligned onto the
/// same canvas. `face_kp` are the face image's keypoints in that canvas.
pub fn build_mask_set(
    face_sem: &SemanticMap,
    hair_sem: &SemanticMap,
    face_kp: &Keypoints,
    view: View,
    radii: MaskRadii,
) -> Result<MaskSet> {
    face_sem.check_canvas(hair_sem)?;
    let (w, h) = (face_sem.width(), face_sem.height());
    let f_face = face_sem.region(Label::Face);
    let f_bg = face_sem.region(Label::Background);
    let h_hair = hair_sem.region(Label::Hair);
    let h_hat = hair_sem.region(Label::Hat);
    let h_face = hair_sem.region(Label::Face);
    let h_neck = hair_sem.region(Label::Neck);
    let h_ear = hair_sem.region(Label::Ear);
    let m_out = hair_sem.valid.not();
    let f_face_k = face_area_from_keypoints(face_kp, w, h)?;

    let base = f_face.minus(&h_hair).minus(&h_hat);
    let eroded = erode(&base, radii.face_top);
    let cutoff = eyebrow_cutoff(face_kp, h);
    let m_f = Mask::from_fn(w, h, |y, x| {
        if (y as f64) < cutoff {
            eroded.get(y, x)
        } else {
            base.get(y, x)
        }
    });
    let m_h = erode(&h_hair, radii.hair);
    let m_bg = match view {
        View::Face => f_bg.minus(&dilate(&h_hair.union(&m_out), radii.background)),
        View::Hair => Mask::empty(w, h),
    };
    let m_roni_f = f_face_k.union(&h_ear).minus(&m_f);
    let m_roni_h = h_hat.union(&h_face).union(&h_neck).union(&m_out);
    Ok(MaskSet {
        m_f,
        m_h,
        m_bg,
        m_roni_f,
        m_roni_h,
        m_out,
        radii,
    })
}

/// Regions copied from a source (`M_c`), given the background segmented from the
/// stage-1 output.
pub fn build_mc(masks: &MaskSet, o1_bg: &Mask, f_bg: &Mask) -> Mask {
    erode(
        &masks.m_f.union(&masks.m_h).union(&f_bg.intersect(o1_bg)),
        masks.radii.copy,
    )
}

/// Regions holding untouched source pixels (`M_raw`).
pub fn build_mraw(masks: &MaskSet, view: View) -> Mask {
    match view {
        View::Face => erode(&masks.m_bg.union(&masks.m_f), masks.radii.raw_face),
        View::Hair => erode(&masks.m_h, masks.radii.raw_hair),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_jaw(y: f64, width: usize) -> Keypoints {
        let mut pts = vec![(width as f64 / 2.0, y / 2.0); KEYPOINT_COUNT];
        for (i, p) in pts.iter_mut().enumerate().take(17) {
            *p = (i as f64 * (width - 1) as f64 / 16.0, y);
        }
        Keypoints::new(pts).unwrap()
    }

    #[test]
    fn erode_edge_cases() {
        let z = Mask::empty(5, 5);
        assert_eq!(erode(&z, 3), z);
        let m = Mask::full(5, 5);
        assert_eq!(erode(&m, 0), m);
        let e = erode(&m, 1);
        assert_eq!(e.count(), 9);
        assert!(e.get(2, 2) && e.get(1, 1) && !e.get(0, 0));
    }

    #[test]
    fn dilate_edge_cases() {
        let m = Mask::full(5, 5);
        assert_eq!(dilate(&m, 2), m);
        let mut c = Mask::empty(5, 5);
        c.set(2, 2, true);
        let d = dilate(&c, 1);
        assert_eq!(d.count(), 9);
        assert!(d.get(1, 1) && d.get(3, 3) && !d.get(0, 2));
    }

    #[test]
    fn flat_jaw_fills_rows() {
        let kp = flat_jaw(10.0, 32);
        let m = face_area_from_keypoints(&kp, 32, 32).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(m.get(y, x), y <= 10, "({y},{x})");
            }
        }
    }

    #[test]
    fn jaw_at_top_marks_only_row_zero() {
        let kp = flat_jaw(0.0, 16);
        let m = face_area_from_keypoints(&kp, 16, 16).unwrap();
        assert_eq!(m.count(), 16);
        assert!((0..16).all(|x| m.get(0, x)));
    }

    #[test]
    fn degenerate_contour_rejected() {
        let mut pts = vec![(5.0, 5.0); KEYPOINT_COUNT];
        pts[16] = (5.0, 8.0);
        let kp = Keypoints::new(pts).unwrap();
        assert!(matches!(
            face_area_from_keypoints(&kp, 16, 16),
            Err(Error::InvalidKeypoints(_))
        ));
    }

    #[test]
    fn keypoint_text_roundtrip() {
        let kp = flat_jaw(7.5, 20);
        assert_eq!(Keypoints::parse(&kp.to_text()).unwrap(), kp);
        assert!(Keypoints::parse("1 2\n3").is_err());
    }

    #[test]
    fn face_parsing_table() {
        let m = SemanticMap::from_face_parsing(3, 1, &[17, 18, 16]).unwrap();
        assert_eq!(m.labels(), &[Label::Hair, Label::Hat, Label::Background]);
        assert!(SemanticMap::from_face_parsing(1, 1, &[19]).is_err());
    }

    #[test]
    fn hair_view_background_is_empty() {
        let face = SemanticMap::filled(12, 12, Label::Background);
        let hair = SemanticMap::filled(12, 12, Label::Background);
        let kp = flat_jaw(6.0, 12);
        let m = build_mask_set(&face, &hair, &kp, View::Hair, MaskRadii::REFERENCE).unwrap();
        assert!(m.m_bg.is_empty());
        let m = build_mask_set(&face, &hair, &kp, View::Face, MaskRadii::REFERENCE).unwrap();
        assert_eq!(m.m_bg.count(), 144);
    }

    #[test]
    fn radii_scale_with_canvas() {
        assert_eq!(MaskRadii::for_height(256), MaskRadii::REFERENCE);
        let r = MaskRadii::for_height(64);
        assert_eq!((r.hair, r.raw_face), (1, 3));
        assert_eq!(MaskRadii::for_height(512).raw_face, 20);
        assert_eq!(MaskRadii::for_height(8).raw_face, 1);
    }

    #[test]
    fn mask_set_rejects_canvas_mismatch() {
        let face = SemanticMap::filled(12, 12, Label::Face);
        let hair = SemanticMap::filled(10, 12, Label::Face);
        let kp = flat_jaw(6.0, 12);
        assert!(matches!(
            build_mask_set(&face, &hair, &kp, View::Face, MaskRadii::REFERENCE),
            Err(Error::Canvas(_))
        ));
    }
}
