//! Face crop and paste-back for editing faces inside larger images.
//!
//! Resampling is bilinear with corner-aligned sampling: output pixel `j` of
//! an `out`-wide axis reads source coordinate `j * (in - 1) / (out - 1)`.

use std::path::Path;

use super::image::ImageTensor;
use crate::error::{Error, Result};

pub const MIN_BOX_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaceBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl FaceBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        FaceBox { x, y, w, h }
    }

    pub fn full(img: &ImageTensor) -> Self {
        FaceBox::new(0, 0, img.width(), img.height())
    }

    pub fn check(&self, img: &ImageTensor) -> Result<()> {
        if self.w < MIN_BOX_SIDE || self.h < MIN_BOX_SIDE {
            return Err(Error::invalid(format!(
                "face box {}x{} is smaller than {MIN_BOX_SIDE}x{MIN_BOX_SIDE}",
                self.w, self.h
            )));
        }
        if self.x + self.w > img.width() || self.y + self.h > img.height() {
            return Err(Error::invalid(format!(
                "face box {:?} lies outside the {}x{} image",
                self,
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    /// Parses `x,y,w,h` (commas or whitespace).
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .collect();
        if parts.len() != 4 {
            return Err(Error::invalid(format!("expected `x,y,w,h`, got `{s}`")));
        }
        let mut v = [0usize; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| Error::invalid(format!("bad box coordinate `{p}`")))?;
        }
        Ok(FaceBox::new(v[0], v[1], v[2], v[3]))
    }

    /// Reads a sidecar file of `x y w h` lines.
    pub fn load_sidecar(path: &Path) -> Result<Vec<FaceBox>> {
        let text = std::fs::read_to_string(path)?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                FaceBox::parse(l).map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect()
    }
}

/// What [`paste_back`] needs to undo a [`crop_face`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRecord {
    pub face_box: FaceBox,
    pub size: usize,
    pub scale_x: f64,
    pub scale_y: f64,
    pub host_hw: (usize, usize),
}

/// Source coordinate and blend weight for each output index.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    (0..output)
        .map(|j| {
            let src = if output == 1 || input == 1 {
                0.0
            } else {
                (j * (input - 1)) as f64 / (output - 1) as f64
            };
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resample of the window `(x0, y0, w, h)` of `img` to `out_w x out_h`.
pub fn resample_region(
    img: &ImageTensor,
    region: FaceBox,
    out_h: usize,
    out_w: usize,
) -> Result<ImageTensor> {
    let ty = taps(region.h, out_h);
    let tx = taps(region.w, out_w);
    let mut data = vec![0.0f32; 3 * out_h * out_w];
    for c in 0..3 {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let p = |y: usize, x: usize| img.get(c, region.y + y, region.x + x);
                let top = if fx == 0.0 { p(y0, x0) } else { (1.0 - fx) * p(y0, x0) + fx * p(y0, x1) };
                let v = if fy == 0.0 {
                    top
                } else {
                    let bottom = if fx == 0.0 { p(y1, x0) } else { (1.0 - fx) * p(y1, x0) + fx * p(y1, x1) };
                    (1.0 - fy) * top + fy * bottom
                };
                data[(c * out_h + oy) * out_w + ox] = v;
            }
        }
    }
    ImageTensor::new(out_h, out_w, data)
}

pub fn resize(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    resample_region(img, FaceBox::full(img), out_h, out_w)
}

/// Crops `face_box` and resizes it to `size x size`.
pub fn crop_face(img: &ImageTensor, face_box: FaceBox, size: usize) -> Result<(ImageTensor, CropRecord)> {
    face_box.check(img)?;
    if size == 0 {
        return Err(Error::invalid("crop target size must be positive"));
    }
    let crop = resample_region(img, face_box, size, size)?;
    Ok((
        crop,
        CropRecord {
            face_box,
            size,
            scale_x: size as f64 / face_box.w as f64,
            scale_y: size as f64 / face_box.h as f64,
            host_hw: (img.height(), img.width()),
        },
    ))
}

/// Resizes `face` back to the recorded box and writes it into a copy of
/// `original`. Pixels outside the box are copied untouched.
pub fn paste_back(original: &ImageTensor, face: &ImageTensor, rec: &CropRecord) -> Result<ImageTensor> {
    if (original.height(), original.width()) != rec.host_hw {
        return Err(Error::shape(
            "paste_back",
            &[original.height(), original.width()],
            &[rec.host_hw.0, rec.host_hw.1],
        ));
    }
    if face.height() != rec.size || face.width() != rec.size {
        return Err(Error::shape("paste_back", &[face.height(), face.width()], &[rec.size, rec.size]));
    }
    let b = rec.face_box;
    let back = resize(face, b.h, b.w)?;
    let mut out = original.clone();
    for c in 0..3 {
        for y in 0..b.h {
            for x in 0..b.w {
                out.set(c, b.y + y, b.x + x, back.get(c, y, x));
            }
        }
    }
    Ok(out)
}
