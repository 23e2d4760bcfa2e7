//! Labelled image datasets: synthetic class blobs, a small built-in pattern
//! set, and (with the `image-folder` feature) a directory of images per class.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    /// Each class is a smooth random prototype image; samples add Gaussian
    /// noise and a random brightness shift.
    Blobs {
        classes: usize,
        size: usize,
        channels: usize,
        samples: usize,
        noise: f32,
        seed: u64,
    },
    /// Four 1x8x8 texture classes (horizontal, vertical, checker, diagonal).
    Builtin { samples: usize, seed: u64 },
    /// `path/<class>/<image>`, classes sorted by directory name.
    ImageFolder { path: std::path::PathBuf, resolution: usize },
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let [c, h, w] = self.sample_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("index {i} out of range ({} samples)", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new([indices.len(), c, h, w], data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.gather(indices)?;
        Ok(Dataset {
            images,
            labels,
            classes: self.classes,
        })
    }

    /// First `n` samples (all if fewer).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Index batches; shuffled by `seed` when given. The last batch may be
    /// short.
    pub fn batch_indices(&self, batch_size: usize, seed: Option<u64>) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = seed {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Deterministic disjoint train/test split.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Dataset(format!("train fraction {train_fraction} outside [0, 1]")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        let cut = (self.len() as f64 * train_fraction).round() as usize;
        Ok((self.subset(&idx[..cut])?, self.subset(&idx[cut..])?))
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Blobs {
                classes,
                size,
                channels,
                samples,
                noise,
                seed,
            } => blobs(*classes, *size, *channels, *samples, *noise, *seed),
            DatasetSpec::Builtin { samples, seed } => builtin(*samples, *seed),
            DatasetSpec::ImageFolder { path, resolution } => image_folder(path, *resolution),
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    let z: f64 = StandardNormal.sample(rng);
    z as f32
}

fn finish(mut items: Vec<(Vec<f32>, usize)>, shape: [usize; 3], classes: usize, seed: u64) -> Result<Dataset> {
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
    let n = items.len();
    let mut data = Vec::with_capacity(n * shape.iter().product::<usize>());
    let mut labels = Vec::with_capacity(n);
    for (img, label) in items {
        data.extend(img);
        labels.push(label);
    }
    Ok(Dataset {
        images: Tensor::new([n, shape[0], shape[1], shape[2]], data)?,
        labels,
        classes,
    })
}

/// Synthetic class blobs with balanced labels.
pub fn blobs(classes: usize, size: usize, channels: usize, samples: usize, noise: f32, seed: u64) -> Result<Dataset> {
    if classes == 0 || size == 0 || channels == 0 || samples == 0 {
        return Err(Error::Dataset("blobs need positive classes, size, channels and samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // prototypes: a coarse 3x3 grid per channel, bilinearly upsampled
    let grid = 3;
    let prototypes: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let coarse: Vec<f32> = (0..channels * grid * grid).map(|_| gauss(&mut rng)).collect();
            let mut img = vec![0.0; channels * size * size];
            for c in 0..channels {
                for y in 0..size {
                    for x in 0..size {
                        let fy = y as f32 / (size.max(2) - 1) as f32 * (grid - 1) as f32;
                        let fx = x as f32 / (size.max(2) - 1) as f32 * (grid - 1) as f32;
                        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
                        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
                        let at = |yy: usize, xx: usize| coarse[(c * grid + yy) * grid + xx];
                        img[(c * size + y) * size + x] = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1))
                            + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1));
                    }
                }
            }
            img
        })
        .collect();
    let items = (0..samples)
        .map(|i| {
            let label = i % classes;
            let shift = 0.3 * gauss(&mut rng);
            let img = prototypes[label]
                .iter()
                .map(|&p| p + shift + noise * gauss(&mut rng))
                .collect();
            (img, label)
        })
        .collect();
    finish(items, [channels, size, size], classes, seed)
}

/// Four noisy 8x8 texture classes.
pub fn builtin(samples: usize, seed: u64) -> Result<Dataset> {
    if samples == 0 {
        return Err(Error::Dataset("builtin dataset needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 8;
    let pattern = |class: usize, y: usize, x: usize, phase: usize| -> f32 {
        let on = match class {
            0 => (y + phase).is_multiple_of(2),
            1 => (x + phase).is_multiple_of(2),
            2 => (x + y + phase).is_multiple_of(2),
            _ => (x + size - y + phase) % 4 < 2,
        };
        if on {
            1.0
        } else {
            -1.0
        }
    };
    let items = (0..samples)
        .map(|i| {
            let label = i % 4;
            let phase = rng.gen_range(0..4);
            let img = (0..size * size)
                .map(|k| pattern(label, k / size, k % size, phase) + 0.5 * gauss(&mut rng))
                .collect();
            (img, label)
        })
        .collect();
    finish(items, [1, size, size], 4, seed)
}

#[cfg(feature = "image-folder")]
fn image_folder(path: &std::path::Path, resolution: usize) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("{} has no class directories", path.display())));
    }
    let mut items = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
        files.sort();
        for file in files {
            let img = match image::open(&file) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    continue;
                }
            };
            let rgb = image::imageops::resize(
                &img.to_rgb8(),
                resolution as u32,
                resolution as u32,
                image::imageops::FilterType::Triangle,
            );
            let mut chw = vec![0.0f32; 3 * resolution * resolution];
            for (x, y, px) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    chw[(c * resolution + y as usize) * resolution + x as usize] = px[c] as f32 / 255.0 - 0.5;
                }
            }
            items.push((chw, label));
        }
    }
    if items.is_empty() {
        return Err(Error::Dataset(format!("no readable images under {}", path.display())));
    }
    let n = items.len();
    let mut data = Vec::with_capacity(n * 3 * resolution * resolution);
    let mut labels = Vec::with_capacity(n);
    for (img, label) in items {
        data.extend(img);
        labels.push(label);
    }
    Ok(Dataset {
        images: Tensor::new([n, 3, resolution, resolution], data)?,
        labels,
        classes: class_dirs.len(),
    })
}

#[cfg(not(feature = "image-folder"))]
fn image_folder(path: &std::path::Path, _resolution: usize) -> Result<Dataset> {
    Err(Error::Dataset(format!(
        "image-folder support not compiled in (cannot read {})",
        path.display()
    )))
}
