//! Synthetic locality dataset and the MDAT container format.
//!
//! MDAT layout: magic "MDAT", version u32, sample count u32, height u32,
//! width u32, channels u32, f32 pixels sample-major, then u32 labels.
//! All integers and floats little-endian.

use crate::error::{Error, Result};
use crate::maskgen::PatchGrid;
use crate::numerics::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 4] = b"MDAT";
pub const DATASET_VERSION: u32 = 1;

/// Pixel level at or above which a 2x2 block counts as the bright motif.
pub const MOTIF_THRESHOLD: f64 = 0.9;
/// Background pixels stay below this, so negatives can never contain a
/// motif. Kept well below the motif threshold so the task trains reliably
/// at desk scale within a small epoch budget.
pub const BACKGROUND_MAX: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pairs(&self) -> Vec<(Tensor, usize)> {
        self.images
            .iter()
            .cloned()
            .zip(self.labels.iter().copied())
            .collect()
    }

    /// Deterministic head/tail split: first (1 - val_frac) for training.
    pub fn split(&self, val_frac: f64) -> (Vec<(Tensor, usize)>, Vec<(Tensor, usize)>) {
        let pairs = self.pairs();
        let cut = ((1.0 - val_frac) * pairs.len() as f64).round() as usize;
        let (a, b) = pairs.split_at(cut.min(pairs.len()));
        (a.to_vec(), b.to_vec())
    }
}

/// True if any 2x2 pixel window (channel 0) is entirely at or above the
/// motif threshold.
pub fn contains_motif(image: &Tensor, height: usize, width: usize, channels: usize) -> bool {
    // Pixels are stored at f32 precision, so a motif pixel drawn at
    // exactly the threshold may sit half an ulp below it.
    let threshold = MOTIF_THRESHOLD as f32 as f64;
    let at = |r: usize, c: usize| image.data()[(r * width + c) * channels];
    for r in 0..height.saturating_sub(1) {
        for c in 0..width.saturating_sub(1) {
            if at(r, c) >= threshold
                && at(r, c + 1) >= threshold
                && at(r + 1, c) >= threshold
                && at(r + 1, c + 1) >= threshold
            {
                return true;
            }
        }
    }
    false
}

/// Binary task: label 1 iff a 2x2 bright motif is present somewhere.
/// Backgrounds are uniform in [0, BACKGROUND_MAX); motif pixels are in
/// [MOTIF_THRESHOLD, 1], placed uniformly. Detectable from any single
/// patch that holds a bright pixel, so 3x3 neighborhoods suffice.
pub fn gen_local_task(
    grid: PatchGrid,
    patch_px: usize,
    samples: usize,
    seed: u64,
) -> Result<Dataset> {
    if grid.rows < 4 || grid.cols < 4 {
        return Err(Error::param(format!(
            "grid {}x{} too small for the locality task (need >= 4x4)",
            grid.rows, grid.cols
        )));
    }
    let height = grid.rows * patch_px;
    let width = grid.cols * patch_px;
    let channels = 1usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut img = Tensor::zeros(vec![height, width, channels]);
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..BACKGROUND_MAX);
        }
        let label = rng.gen_range(0..2usize);
        if label == 1 {
            let r = rng.gen_range(0..height - 1);
            let c = rng.gen_range(0..width - 1);
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let v = rng.gen_range(MOTIF_THRESHOLD..=1.0);
                img.data_mut()[((r + dr) * width + (c + dc)) * channels] = v;
            }
        }
        // Snap to f32 so an in-memory dataset is bit-identical to one
        // round-tripped through the on-disk format (f32 pixels).
        for v in img.data_mut() {
            *v = *v as f32 as f64;
        }
        images.push(img);
        labels.push(label);
    }
    Ok(Dataset {
        height,
        width,
        channels,
        images,
        labels,
    })
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(DATASET_MAGIC)?;
    for v in [
        DATASET_VERSION,
        dataset.len() as u32,
        dataset.height as u32,
        dataset.width as u32,
        dataset.channels as u32,
    ] {
        f.write_all(&v.to_le_bytes())?;
    }
    for img in &dataset.images {
        for &v in img.data() {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    for &label in &dataset.labels {
        f.write_all(&(label as u32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Dataset("file shorter than preamble".into()))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Dataset(format!("bad magic {magic:?}")));
    }
    let read_u32 = |f: &mut dyn Read| -> Result<u32> {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)
            .map_err(|_| Error::Dataset("truncated header".into()))?;
        Ok(u32::from_le_bytes(b))
    };
    let version = read_u32(&mut f)?;
    if version != DATASET_VERSION {
        return Err(Error::Dataset(format!("version {version} unsupported")));
    }
    let count = read_u32(&mut f)? as usize;
    let height = read_u32(&mut f)? as usize;
    let width = read_u32(&mut f)? as usize;
    let channels = read_u32(&mut f)? as usize;
    let pixels = height * width * channels;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let mut buf = vec![0u8; 4 * pixels];
        f.read_exact(&mut buf)
            .map_err(|_| Error::Dataset("truncated pixel data".into()))?;
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        images.push(Tensor::new(vec![height, width, channels], data)?);
    }
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)
            .map_err(|_| Error::Dataset("truncated labels".into()))?;
        labels.push(u32::from_le_bytes(b) as usize);
    }
    Ok(Dataset {
        height,
        width,
        channels,
        images,
        labels,
    })
}
