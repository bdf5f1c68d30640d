//! Editing operations over a trained model: single edits, AU sweeps,
//! interpolation sequences, mask export and the crop/edit/paste path for
//! images that are larger than the model.

use crate::aucode::{self, AuVector};
use crate::error::{Error, Result};
use crate::facedata::{crop_face, paste_back, FaceBox, ImageTensor};
use crate::models::{Masks, Model};

/// One edit. `alpha` blends from `source` to `target`; without it the
/// target is used directly.
#[derive(Clone, Debug, PartialEq)]
pub struct EditRequest {
    pub target: AuVector,
    pub alpha: Option<f64>,
    pub source: Option<AuVector>,
    /// Estimate a missing source with the critic's AU head.
    pub estimate_source: bool,
    pub dump_masks: bool,
    pub face_box: Option<FaceBox>,
}

impl EditRequest {
    pub fn new(target: AuVector) -> Self {
        EditRequest {
            target,
            alpha: None,
            source: None,
            estimate_source: true,
            dump_masks: false,
            face_box: None,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_source(mut self, source: AuVector) -> Self {
        self.source = Some(source);
        self
    }

    pub fn with_masks(mut self) -> Self {
        self.dump_masks = true;
        self
    }

    pub fn with_box(mut self, face_box: FaceBox) -> Self {
        self.face_box = Some(face_box);
        self
    }
}

/// Exportable masks: attention as gray (black where the color mask is
/// used), color as an ordinary image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskImages {
    pub attention: ImageTensor,
    pub color: ImageTensor,
}

impl MaskImages {
    fn from_masks(m: &Masks) -> Result<Self> {
        Ok(MaskImages {
            attention: m.attention_image()?,
            color: m.color.clone(),
        })
    }

    /// 8-bit grayscale PNG of the attention mask.
    pub fn attention_png(&self) -> Result<Vec<u8>> {
        self.attention.encode_gray_png()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditOutput {
    pub image: ImageTensor,
    /// The AU vector the generator was conditioned on.
    pub condition: AuVector,
    pub masks: Option<MaskImages>,
}

/// AU intensities predicted by the critic, clamped to `[0, 1]`.
pub fn estimate_aus(model: &Model<f32>, image: &ImageTensor) -> Result<AuVector> {
    Ok(AuVector::clamped(model.critic_forward(image)?.aus))
}

fn check_len(model: &Model<f32>, v: &AuVector) -> Result<()> {
    if v.len() != model.num_aus() {
        return Err(Error::AuLength {
            expected: model.num_aus(),
            got: v.len(),
        });
    }
    Ok(())
}

/// Conditioning vector for `req` on `face` (already at model size).
pub fn condition(model: &Model<f32>, face: &ImageTensor, req: &EditRequest) -> Result<AuVector> {
    check_len(model, &req.target)?;
    if let Some(s) = &req.source {
        check_len(model, s)?;
    }
    let Some(alpha) = req.alpha else {
        return Ok(req.target.clone());
    };
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let source = match &req.source {
        Some(s) => s.clone(),
        None if alpha == 1.0 => return Ok(req.target.clone()),
        None if req.estimate_source => estimate_aus(model, face)?,
        None => return Err(Error::invalid("alpha < 1 needs a source AU vector (estimation is disabled)")),
    };
    aucode::interpolate(&source, &req.target, alpha)
}

fn edit_face(model: &Model<f32>, face: &ImageTensor, req: &EditRequest) -> Result<EditOutput> {
    let cond = condition(model, face, req)?;
    let (image, masks) = model.apply_expression(face, &cond)?;
    Ok(EditOutput {
        image,
        condition: cond,
        masks: if req.dump_masks {
            Some(MaskImages::from_masks(&masks)?)
        } else {
            None
        },
    })
}

/// Applies `req` to `image`. With a face box the wild path is taken.
pub fn edit(model: &Model<f32>, image: &ImageTensor, req: &EditRequest) -> Result<EditOutput> {
    match req.face_box {
        Some(b) => edit_wild(model, image, b, req),
        None => edit_face(model, image, req),
    }
}

/// Crops `face_box` to model size, edits it and pastes it back. Pixels
/// outside the box are copied from `image` unchanged; masks stay at crop
/// size.
pub fn edit_wild(model: &Model<f32>, image: &ImageTensor, face_box: FaceBox, req: &EditRequest) -> Result<EditOutput> {
    let (face, rec) = crop_face(image, face_box, model.image_size())?;
    let out = edit_face(model, &face, req)?;
    Ok(EditOutput {
        image: paste_back(image, &out.image, &rec)?,
        ..out
    })
}

pub const DEFAULT_LEVELS: [f64; 4] = [0.0, 0.33, 0.66, 1.0];

/// One AU driven through a list of intensities on top of `base`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub au: usize,
    pub levels: Vec<f64>,
    /// Zeros when absent.
    pub base: Option<AuVector>,
}

impl SweepSpec {
    pub fn new(au: usize) -> Self {
        SweepSpec {
            au,
            levels: DEFAULT_LEVELS.to_vec(),
            base: None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.au >= n {
            return Err(Error::invalid(format!("AU index {} out of range for {n} AUs", self.au)));
        }
        if self.levels.is_empty() {
            return Err(Error::invalid("sweep needs at least one level"));
        }
        if self.levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::invalid("sweep levels must lie in [0, 1]"));
        }
        if self.levels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("sweep levels must be sorted"));
        }
        Ok(())
    }
}

/// One frame per level.
pub fn sweep(model: &Model<f32>, image: &ImageTensor, spec: &SweepSpec) -> Result<Vec<ImageTensor>> {
    spec.validate(model.num_aus())?;
    let base = match &spec.base {
        Some(b) => {
            check_len(model, b)?;
            b.clone()
        }
        None => AuVector::clamped(vec![0.0; model.num_aus()]),
    };
    spec.levels
        .iter()
        .map(|&l| Ok(model.apply_expression(image, &base.with(spec.au, l))?.0))
        .collect()
}

/// Frames at `alpha = i / (steps - 1)` for `req`; `req.alpha` is ignored.
/// Frame `i` is exactly `edit` with that alpha.
pub fn interpolate_request(
    model: &Model<f32>,
    image: &ImageTensor,
    req: &EditRequest,
    steps: usize,
) -> Result<Vec<EditOutput>> {
    if steps < 2 {
        return Err(Error::invalid(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let mut req = req.clone();
    // Estimate once so every frame shares the source.
    if req.source.is_none() && req.estimate_source {
        let face = match req.face_box {
            Some(b) => crop_face(image, b, model.image_size())?.0,
            None => image.clone(),
        };
        model.check_image(&face)?;
        req.source = Some(estimate_aus(model, &face)?);
    }
    (0..steps)
        .map(|i| {
            let alpha = i as f64 / (steps - 1) as f64;
            edit(model, image, &req.clone().with_alpha(alpha))
        })
        .collect()
}

/// Linear path from `source` to `target` in `steps` frames.
pub fn interpolate_sequence(
    model: &Model<f32>,
    image: &ImageTensor,
    source: &AuVector,
    target: &AuVector,
    steps: usize,
) -> Result<Vec<ImageTensor>> {
    let req = EditRequest::new(target.clone()).with_source(source.clone());
    Ok(interpolate_request(model, image, &req, steps)?
        .into_iter()
        .map(|o| o.image)
        .collect())
}
