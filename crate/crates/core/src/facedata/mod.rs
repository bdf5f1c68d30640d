//! Annotated face datasets, training triplets, the synthetic face renderer,
//! and crop/paste geometry.

pub mod geometry;
pub mod image;
pub mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

pub use self::geometry::{crop_face, paste_back, CropRecord, FaceBox};
pub use self::image::{batch_tensor, ImageTensor};
pub use self::synth::{FaceTrace, SyntheticAuMap, SyntheticFaceParams, SyntheticSpec};

use crate::aucode::{self, AuSchema, AuVector, TargetStrategy};
use crate::error::{Error, Result};
use crate::numerics::{seeded, Rng};

/// Annotation file name inside a dataset directory.
pub const ANNOTATIONS: &str = "annotations.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image: ImageTensor,
    pub aus: AuVector,
    pub source: String,
}

/// One training sample: an image, its own annotation, and a drawn target.
#[derive(Clone, Debug)]
pub struct TrainingTriplet<'a> {
    pub image: &'a ImageTensor,
    pub y_r: &'a AuVector,
    pub y_g: AuVector,
}

/// Reads `<relative path>;v1,...,vN` records. Images are resolved against
/// `image_root`; order follows the file.
pub fn load_dataset(annotations: &Path, image_root: &Path, schema: &AuSchema) -> Result<Vec<AnnotatedImage>> {
    let text = fs::read_to_string(annotations)?;
    let origin = annotations.display().to_string();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.clone(),
            line: i + 1,
            msg,
        };
        let (rel, values) = line
            .split_once(';')
            .ok_or_else(|| err("expected `<image path>;v1,...,vN`".into()))?;
        let values: Vec<f64> = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(format!("bad AU value: {e}")))?;
        let aus = aucode::validate(&values, schema).map_err(|e| err(e.to_string()))?.vector;
        let image = ImageTensor::load_png(&image_root.join(rel))?;
        out.push(AnnotatedImage {
            image,
            aus,
            source: rel.to_string(),
        });
    }
    Ok(out)
}

/// Loads `<dir>/annotations.txt` with images relative to `dir`.
pub fn load_dataset_dir(dir: &Path, schema: &AuSchema) -> Result<Vec<AnnotatedImage>> {
    load_dataset(&dir.join(ANNOTATIONS), dir, schema)
}

/// Writes PNGs plus `annotations.txt` into `dir`.
pub fn save_dataset(dir: &Path, items: &[AnnotatedImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut ann = fs::File::create(dir.join(ANNOTATIONS))?;
    for item in items {
        item.image.save_png(&dir.join(&item.source))?;
        let vals: Vec<String> = item.aus.values().iter().map(|v| format!("{v}")).collect();
        writeln!(ann, "{};{}", item.source, vals.join(","))?;
    }
    Ok(())
}

/// Deterministic split: shuffle `0..n` with `seed`, hold out the last
/// `fraction` (at least one sample when `n > 1`). Returns `(train, held_out)`.
pub fn split_indices(n: usize, seed: u64, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed ^ 0x5EED_5B17));
    let mut held = ((n as f64) * fraction).round() as usize;
    if n > 1 && fraction > 0.0 {
        held = held.max(1);
    }
    let held = held.min(n.saturating_sub(1));
    let train = idx[..n - held].to_vec();
    let hold = idx[n - held..].to_vec();
    (train, hold)
}

fn epoch_rng(seed: u64, epoch: usize) -> Rng {
    seeded(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Batches for one epoch over `indices` of `data`. The order and targets are
/// a pure function of `(seed, epoch)`; incomplete trailing batches are
/// dropped.
pub fn make_triplets<'a>(
    data: &'a [AnnotatedImage],
    indices: &[usize],
    seed: u64,
    epoch: usize,
    strategy: TargetStrategy,
    batch_size: usize,
) -> Result<Vec<Vec<TrainingTriplet<'a>>>> {
    if indices.is_empty() {
        return Err(Error::invalid("cannot draw triplets from an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut rng = epoch_rng(seed, epoch);
    let mut order = indices.to_vec();
    order.shuffle(&mut rng);
    let pool: Vec<&AuVector> = indices.iter().map(|&i| &data[i].aus).collect();
    let full = order.len() / batch_size;
    let mut batches = Vec::with_capacity(full);
    for chunk in order.chunks_exact(batch_size) {
        let mut batch = Vec::with_capacity(batch_size);
        for &i in chunk {
            batch.push(TrainingTriplet {
                image: &data[i].image,
                y_r: &data[i].aus,
                y_g: aucode::sample_target(&pool, strategy, &mut rng)?,
            });
        }
        batches.push(batch);
    }
    Ok(batches)
}
