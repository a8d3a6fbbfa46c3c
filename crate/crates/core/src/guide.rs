//! Cut-and-paste guide composites for both viewpoints.

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignedImage, PoseAligner};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask, Rgb};
use crate::semantics::{
    build_mask_set, face_area_from_keypoints, Keypoints, Label, MaskRadii, MaskSet, SemanticMap, View,
};

const MID_GRAY: Rgb = [0.5, 0.5, 0.5];

/// Fallbacks taken while compositing a guide.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GuideWarning {
    /// No face-image background pixels; the old hair was filled with mid-gray.
    EmptyBackground,
    /// No nose pixels; skin color taken from the whole face region.
    EmptyNose,
    /// Neither nose nor face pixels; skin color fell back to mid-gray.
    EmptySkin,
    /// Rows of the narrow-face fill without reference hair used the global hair mean.
    HairRowFallback { rows: Vec<usize> },
    /// The reference image has no hair at all; the narrow-face fill used the
    /// background color.
    EmptyHair,
}

/// Channelwise mean over `region`.
pub fn average_color(img: &Image, region: &Mask) -> Result<Rgb> {
    if region.width() != img.width() || region.height() != img.height() {
        return Err(Error::Canvas("average color region does not match the image".into()));
    }
    let n = region.count();
    if n == 0 {
        return Err(Error::EmptyRegion("average color of an empty region".into()));
    }
    let mut acc = [0.0; 3];
    for (i, inside) in region.bits().iter().enumerate() {
        if *inside {
            let (y, x) = (i / img.width(), i % img.width());
            let p = img.pixel(y, x);
            for c in 0..3 {
                acc[c] += p[c];
            }
        }
    }
    Ok(acc.map(|v| v / n as f64))
}

/// Guide image, masks, and the aligned inputs they were built from, for one view.
#[derive(Clone, Debug)]
pub struct ViewGuide {
    pub view: View,
    pub guide: Image,
    pub masks: MaskSet,
    /// Face source on this view's canvas (raw in the face view).
    pub face: AlignedImage,
    /// Hair source on this view's canvas (raw in the hair view).
    pub hair: AlignedImage,
    pub warnings: Vec<GuideWarning>,
}

impl ViewGuide {
    /// The unwarped source photograph this view was shot from.
    pub fn own(&self) -> &AlignedImage {
        match self.view {
            View::Face => &self.face,
            View::Hair => &self.hair,
        }
    }

    pub fn keypoints(&self) -> &Keypoints {
        &self.own().kp
    }
}

#[derive(Clone, Debug)]
pub struct GuidePair {
    pub face: ViewGuide,
    pub hair: ViewGuide,
}

impl GuidePair {
    pub fn view(&self, view: View) -> &ViewGuide {
        match view {
            View::Face => &self.face,
            View::Hair => &self.hair,
        }
    }

    pub fn view_mut(&mut self, view: View) -> &mut ViewGuide {
        match view {
            View::Face => &mut self.face,
            View::Hair => &mut self.hair,
        }
    }

    pub fn guide_face(&self) -> &Image {
        &self.face.guide
    }

    pub fn guide_hair(&self) -> &Image {
        &self.hair.guide
    }

    pub fn warnings(&self) -> Vec<(View, GuideWarning)> {
        View::BOTH
            .iter()
            .flat_map(|v| self.view(*v).warnings.iter().map(move |w| (*v, w.clone())))
            .collect()
    }
}

/// Builds the temporary canvas then the guide for one viewpoint. `face` and `hair`
/// must already share the viewpoint's canvas.
pub fn build_guide(
    face: &AlignedImage,
    hair: &AlignedImage,
    view: View,
) -> Result<(Image, MaskSet, Vec<GuideWarning>)> {
    face.sem.check_canvas(&hair.sem)?;
    let (w, h) = (face.width(), face.height());
    let (i_f, i_h) = (&face.pixels, &hair.pixels);
    let f = &face.sem;
    let hs = &hair.sem;
    let mut warnings = Vec::new();

    let f_hair = f.region(Label::Hair);
    let h_hair = hs.region(Label::Hair);
    let f_face_k = face_area_from_keypoints(&face.kp, w, h)?;

    let bg_color = match average_color(i_f, &f.region(Label::Background).intersect(&f.valid)) {
        Ok(c) => c,
        Err(_) => {
            warnings.push(GuideWarning::EmptyBackground);
            MID_GRAY
        }
    };
    let skin = match average_color(i_f, &f.region(Label::Nose)) {
        Ok(c) => c,
        Err(_) => match average_color(i_f, &f.region(Label::Face)) {
            Ok(c) => {
                warnings.push(GuideWarning::EmptyNose);
                c
            }
            Err(_) => {
                warnings.push(GuideWarning::EmptySkin);
                MID_GRAY
            }
        },
    };

    let mut tmp = i_f.clone();
    // Old hair becomes background; the reference hair goes on top.
    tmp.fill_masked(&f_hair, bg_color);
    tmp.copy_from_masked(i_h, &h_hair);
    // Visible reference ears get skin.
    let h_ear = hs.region(Label::Ear);
    if !h_ear.is_empty() {
        tmp.fill_masked(&h_ear, skin);
    }
    // Remove bangs over the keypoint face area.
    let h_skin = hs.region(Label::Face).union(&hs.region(Label::Neck));
    tmp.fill_masked(&f_face_k, skin);
    tmp.fill_masked(&f_face_k.intersect(&h_skin), skin);
    // A narrower input face: reference skin outside it becomes hair, row by row.
    let narrow = h_skin.minus(&f_face_k);
    if !narrow.is_empty() {
        fill_rows_with_hair(&mut tmp, &narrow, i_h, &h_hair, bg_color, &mut warnings);
    }

    let mut guide = i_f.clone();
    guide.copy_from_masked(&tmp, &f_hair);
    let overlap_outside = f.region(Label::Face).minus(&f_face_k);
    let clipped = h_hair.minus(&overlap_outside);
    guide.copy_from_masked(i_h, &clipped);

    let masks = build_mask_set(f, hs, &face.kp, view, MaskRadii::for_height(f.height()))?;
    Ok((guide, masks, warnings))
}

fn fill_rows_with_hair(
    tmp: &mut Image,
    region: &Mask,
    i_h: &Image,
    h_hair: &Mask,
    fallback: Rgb,
    warnings: &mut Vec<GuideWarning>,
) {
    let global = match average_color(i_h, h_hair) {
        Ok(c) => c,
        Err(_) => {
            warnings.push(GuideWarning::EmptyHair);
            fallback
        }
    };
    let w = tmp.width();
    let mut fallback_rows = Vec::new();
    for y in 0..tmp.height() {
        if !(0..w).any(|x| region.get(y, x)) {
            continue;
        }
        let row = Mask::from_fn(w, tmp.height(), |yy, xx| yy == y && h_hair.get(yy, xx));
        let color = match average_color(i_h, &row) {
            Ok(c) => c,
            Err(_) => {
                fallback_rows.push(y);
                global
            }
        };
        for x in 0..w {
            if region.get(y, x) {
                tmp.put_pixel(y, x, color);
            }
        }
    }
    if !fallback_rows.is_empty() && !warnings.contains(&GuideWarning::EmptyHair) {
        warnings.push(GuideWarning::HairRowFallback { rows: fallback_rows });
    }
}

/// Aligns each source into the other's viewpoint and builds both guides.
#[allow(clippy::too_many_arguments)]
pub fn build_guide_pair(
    face_img: Image,
    face_sem: SemanticMap,
    face_kp: Keypoints,
    hair_img: Image,
    hair_sem: SemanticMap,
    hair_kp: Keypoints,
    aligner: &dyn PoseAligner,
) -> Result<GuidePair> {
    let face = AlignedImage::new(face_img, face_sem, face_kp)?;
    let hair = AlignedImage::new(hair_img, hair_sem, hair_kp)?;
    face.sem.check_canvas(&hair.sem)?;

    let hair_in_face = aligner.align(&hair, &face.kp)?;
    let (guide, masks, warnings) = build_guide(&face, &hair_in_face, View::Face)?;
    let face_view = ViewGuide {
        view: View::Face,
        guide,
        masks,
        face: face.clone(),
        hair: hair_in_face,
        warnings,
    };

    let face_in_hair = aligner.align(&face, &hair.kp)?;
    let (guide, masks, warnings) = build_guide(&face_in_hair, &hair, View::Hair)?;
    let hair_view = ViewGuide {
        view: View::Hair,
        guide,
        masks,
        face: face_in_hair,
        hair,
        warnings,
    };
    Ok(GuidePair {
        face: face_view,
        hair: hair_view,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_of_black_and_white_is_mid_gray() {
        let mut img = Image::new(4, 4);
        img.put_pixel(0, 1, [1.0; 3]);
        let region = Mask::from_fn(4, 4, |y, x| y == 0 && x < 2);
        assert_eq!(average_color(&img, &region).unwrap(), [0.5; 3]);
        assert_eq!(average_color(&img, &region).unwrap().map(|v| v * 255.0), [127.5; 3]);
    }

    #[test]
    fn average_of_empty_region_is_error() {
        let img = Image::new(4, 4);
        assert!(matches!(
            average_color(&img, &Mask::empty(4, 4)),
            Err(Error::EmptyRegion(_))
        ));
    }
}
