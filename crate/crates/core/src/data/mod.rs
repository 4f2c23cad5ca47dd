//! Records, image access, set construction, augmentation and splits.

pub mod augment;
pub mod manifest;
pub mod sets;
pub mod split;
pub mod synth;

use std::cell::Cell;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use manifest::{load_manifest, parse_manifest};
pub use sets::{blackout, blackout_plan, build_set_plans, build_sets, materialize, SetPlan};
pub use split::{kfold_split, Fold};
pub use synth::{synth_generate, SynthConfig, SynthDataset};

/// One labelled image of one patient.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub image_id: String,
    pub patient_id: String,
    pub target: u8,
    pub path: PathBuf,
}

/// Indexed access to the images behind a record list.
pub trait ImageSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn image(&self, index: usize) -> Result<Tensor>;
}

/// Images held in memory, parallel to a record list.
#[derive(Clone, Debug, Default)]
pub struct InMemory {
    pub images: Vec<Tensor>,
}

impl ImageSource for InMemory {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn image(&self, index: usize) -> Result<Tensor> {
        self.images.get(index).cloned().ok_or_else(|| Error::Validation(format!("image index {index} out of range")))
    }
}

/// Wraps a source and counts every image read.
pub struct Counting<'a, S: ImageSource> {
    pub inner: &'a S,
    pub reads: Cell<Vec<usize>>,
}

impl<'a, S: ImageSource> Counting<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Counting { inner, reads: Cell::new(Vec::new()) }
    }

    /// Indices read so far, in order.
    pub fn take_reads(&self) -> Vec<usize> {
        self.reads.take()
    }
}

impl<S: ImageSource> ImageSource for Counting<'_, S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn image(&self, index: usize) -> Result<Tensor> {
        let mut r = self.reads.take();
        r.push(index);
        self.reads.set(r);
        self.inner.image(index)
    }
}

/// Reads an 8-bit RGB image into an `[h,w,3]` tensor scaled to [0,1].
pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Writes an `[h,w,3]` tensor in [0,1] as an 8-bit RGB PNG.
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Validation(format!("png output needs [h,w,3], got {s:?}")));
    }
    let raw: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(s[1] as u32, s[0] as u32, raw)
        .ok_or_else(|| Error::Validation("png buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}

/// Loads every record's image into memory, in record order.
pub fn load_images(records: &[Record]) -> Result<InMemory> {
    let images = records.iter().map(|r| read_png(&r.path)).collect::<Result<_>>()?;
    Ok(InMemory { images })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_of_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..4 * 5 * 3).map(|i| (i * 4 % 256) as f64 / 255.0).collect();
        let img = Tensor::new(vec![4, 5, 3], data).unwrap();
        let path = dir.path().join("x.png");
        write_png(&path, &img).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
        assert!(matches!(read_png(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }

    #[test]
    fn counting_source_records_reads() {
        let src = InMemory { images: vec![Tensor::zeros(&[1]); 3] };
        let counting = Counting::new(&src);
        counting.image(2).unwrap();
        counting.image(0).unwrap();
        assert!(counting.image(5).is_err());
        assert_eq!(counting.take_reads(), vec![2, 0, 5]);
    }
}
