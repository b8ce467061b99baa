//! Synthetic fundus-like images for smoke tests and demos: an orange retinal
//! field on black, where the glaucoma class carries a bright disc and the
//! normal class does not.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetError, DatasetManifest, Label, ManifestEntry};
use crate::imaging::{ImageError, RawImage};

pub fn synthetic_fundus(size: usize, label: Label, seed: u64) -> RawImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let field_r = s * rng.gen_range(0.42..0.48);
    let tint: f64 = rng.gen_range(0.85..1.0);
    let disc = (label == Label::Glaucoma).then(|| {
        (
            s * rng.gen_range(0.35..0.65),
            s * rng.gen_range(0.35..0.65),
            s * rng.gen_range(0.12..0.18),
        )
    });
    let noise: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-12.0..12.0)).collect();
    RawImage::from_fn(size, size, |x, y| {
        let (fx, fy) = (x as f64 + 0.5 - s / 2.0, y as f64 + 0.5 - s / 2.0);
        let r = (fx * fx + fy * fy).sqrt();
        if r > field_r {
            return [0, 0, 0];
        }
        // Vignetting toward the rim.
        let shade = 1.0 - 0.45 * (r / field_r).powi(2);
        let n = noise[y * size + x];
        let mut px = [190.0 * tint * shade + n, 80.0 * tint * shade + n * 0.5, 30.0 * shade];
        if let Some((cx, cy, cr)) = disc {
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            let w = (1.0 - d / cr).clamp(0.0, 1.0).sqrt();
            px = [
                px[0] + (250.0 - px[0]) * w,
                px[1] + (235.0 - px[1]) * w,
                px[2] + (170.0 - px[2]) * w,
            ];
        }
        px.map(|v| v.round().clamp(0.0, 255.0) as u8)
    })
    .expect("size > 0")
}

/// `n` images with alternating labels, glaucoma first. Ids are `img000`, ...
pub fn synthetic_set(n: usize, size: usize, seed: u64) -> Vec<(String, Label, RawImage)> {
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Glaucoma } else { Label::Normal };
            let img_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
            (format!("img{i:03}"), label, synthetic_fundus(size, label, img_seed))
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Writes PNGs under `dir/images/` and the manifest `dir/<name>.csv`.
pub fn write_synthetic_dataset(dir: &Path, name: &str, n: usize, size: usize, seed: u64) -> Result<PathBuf, SynthError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|source| SynthError::Io {
        path: images.display().to_string(),
        source,
    })?;
    let mut entries = Vec::with_capacity(n);
    for (id, label, img) in synthetic_set(n, size, seed) {
        let path = images.join(format!("{id}.png"));
        img.save_png(&path)?;
        entries.push(ManifestEntry { id, path, label });
    }
    let manifest = DatasetManifest {
        name: name.to_string(),
        entries,
    };
    let path = dir.join(format!("{name}.csv"));
    manifest.save(&path)?;
    Ok(path)
}
