//! Synthetic grayscale classification task with a known flip-symmetric grammar.
//!
//! Classes: 0 centred blob, 1 horizontal bar, 2 vertical bar, 3 horizontal
//! pair of blobs. Every renderer is mirror-symmetric in its parameter
//! distribution, so a horizontally flipped sample is a valid sample of the
//! same class.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{load_images, quantize, save_images, RasterImage};
use crate::seed;

pub const MAX_CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub image_side: usize,
    pub num_classes: usize,
    /// Centre jitter as a fraction of the side, applied independently per axis.
    pub position_jitter: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub pixel_noise_std: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            image_side: 16,
            num_classes: 4,
            position_jitter: 0.2,
            intensity_min: 0.6,
            intensity_max: 1.0,
            pixel_noise_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<RasterImage>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_side < 8 {
            return Err(Error::Config(format!(
                "task.image_side={} is below the minimum of 8",
                self.image_side
            )));
        }
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "task.num_classes={} outside 2..={MAX_CLASSES}",
                self.num_classes
            )));
        }
        let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !unit(self.position_jitter) || self.position_jitter > 0.3 {
            return Err(Error::Config("task.position_jitter must lie in [0, 0.3]".into()));
        }
        if !unit(self.intensity_min) || !unit(self.intensity_max) || self.intensity_min > self.intensity_max {
            return Err(Error::Config("task intensity range must satisfy 0 <= min <= max <= 1".into()));
        }
        if !(self.pixel_noise_std.is_finite() && self.pixel_noise_std >= 0.0) {
            return Err(Error::Config("task.pixel_noise_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Renders one image of `class` with random nuisance parameters.
    pub fn render<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Result<RasterImage> {
        if class >= self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for {} classes",
                self.num_classes
            )));
        }
        let s = self.image_side as f64;
        let centre = (s - 1.0) / 2.0;
        let j = self.position_jitter * s;
        let cx = centre + rng.random_range(-1.0..=1.0) * j;
        let cy = centre + rng.random_range(-1.0..=1.0) * j;
        let intensity = rng.random_range(self.intensity_min..=self.intensity_max);

        let gauss = |dx: f64, dy: f64, sigma: f64| (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        let bar = |along: f64, across: f64| {
            let half_len = 0.22 * s;
            let thick = 0.05 * s;
            (-(across * across) / (2.0 * thick * thick)).exp() / (1.0 + ((along.abs() - half_len) / 0.5).exp())
        };
        let shape = |x: f64, y: f64| -> f64 {
            let (dx, dy) = (x - cx, y - cy);
            match class {
                0 => gauss(dx, dy, 0.09 * s),
                1 => bar(dx, dy),
                2 => bar(dy, dx),
                _ => {
                    let off = 0.18 * s;
                    let sigma = 0.06 * s;
                    gauss(dx - off, dy, sigma) + gauss(dx + off, dy, sigma)
                }
            }
        };
        let noise = Normal::new(0.0, self.pixel_noise_std)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let n = self.image_side;
        let pixels = (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f64, (i % n) as f64);
                intensity * shape(x, y) + noise.sample(rng)
            })
            .collect();
        Ok(quantize(&RasterImage::from_clamped(n, n, pixels)?))
    }

    /// Class-balanced train/test sets; index `i` has label `i % num_classes`.
    pub fn synth_dataset(&self, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        if n_train < self.num_classes || n_test < self.num_classes {
            return Err(Error::Config(format!(
                "need at least {} train and test images, got {n_train}/{n_test}",
                self.num_classes
            )));
        }
        let split = |tag: u64, n: usize| -> Result<Dataset> {
            let labels: Vec<usize> = (0..n).map(|i| i % self.num_classes).collect();
            let images = labels
                .iter()
                .enumerate()
                .map(|(i, &c)| self.render(c, &mut seed::rng(&[seed, seed::stream::DATASET, tag, i as u64])))
                .collect::<Result<_>>()?;
            Ok(Dataset { images, labels })
        };
        Ok((split(0, n_train)?, split(1, n_test)?))
    }
}

/// Ground-truth class read off the image geometry, or `None` if the image
/// does not look like any class of the grammar.
///
/// Uses only the set of occupied rows and the run structure of occupied
/// columns of the half-maximum mask, so the answer is exactly invariant
/// under horizontal flips.
pub fn grammar_label(img: &RasterImage) -> Option<usize> {
    let max = img.pixels().iter().copied().fold(0.0, f64::max);
    if max < 0.3 {
        return None;
    }
    let thresh = 0.5 * max;
    let (h, w) = (img.height(), img.width());
    let rows: Vec<bool> = (0..h).map(|r| (0..w).any(|c| img.get(r, c) > thresh)).collect();
    let cols: Vec<bool> = (0..w).map(|c| (0..h).any(|r| img.get(r, c) > thresh)).collect();
    let extent = |occ: &[bool]| {
        let first = occ.iter().position(|&b| b)?;
        let last = occ.iter().rposition(|&b| b)?;
        Some(last - first + 1)
    };
    let (row_extent, col_extent) = (extent(&rows)?, extent(&cols)?);
    let col_runs = cols.windows(2).filter(|p| !p[0] && p[1]).count() + usize::from(cols[0]);
    let long = w.max(h) / 3;
    if col_runs >= 2 {
        Some(3)
    } else if col_extent >= 2 * row_extent && col_extent >= long {
        Some(1)
    } else if row_extent >= 2 * col_extent && row_extent >= long {
        Some(2)
    } else if row_extent < long && col_extent < long {
        Some(0)
    } else {
        None
    }
}

fn labels_path(images: &Path) -> PathBuf {
    let stem = images.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    images.with_file_name(format!("{stem}_labels.csv"))
}

/// Writes `<dir>/<name>.bin` and `<dir>/<name>_labels.csv`; returns the image
/// path. A config hash, if given, goes on a leading `#` line of the CSV.
pub fn save_dataset(dir: &Path, name: &str, data: &Dataset, config_hash: Option<&str>) -> Result<PathBuf> {
    let bin = dir.join(format!("{name}.bin"));
    save_images(&bin, &data.images)?;
    let mut csv = config_hash.map_or(String::new(), |h| format!("# config_sha256={h}\n"));
    csv.push_str("index,label\n");
    for (i, l) in data.labels.iter().enumerate() {
        writeln!(csv, "{i},{l}").expect("writing to a String cannot fail");
    }
    let lp = labels_path(&bin);
    std::fs::write(&lp, csv).map_err(|e| Error::io(&lp, e))?;
    Ok(bin)
}

/// Loads a dataset from its `.bin` path and the sibling labels CSV.
pub fn load_dataset(bin: &Path) -> Result<Dataset> {
    let images = load_images(bin)?;
    if images.is_empty() {
        return Err(Error::format(bin, "dataset contains no images"));
    }
    let lp = labels_path(bin);
    let text = std::fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?;
    let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
    if lines.next() != Some("index,label") {
        return Err(Error::format(&lp, "expected header `index,label`"));
    }
    let labels = lines
        .enumerate()
        .map(|(i, line)| {
            let (idx, label) = line
                .split_once(',')
                .ok_or_else(|| Error::format(&lp, format!("row {i}: expected two fields")))?;
            if idx.trim().parse::<usize>().ok() != Some(i) {
                return Err(Error::format(&lp, format!("row {i}: index out of sequence")));
            }
            label
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::format(&lp, format!("row {i}: bad label {label:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != images.len() {
        return Err(Error::format(
            &lp,
            format!("{} labels for {} images", labels.len(), images.len()),
        ));
    }
    Ok(Dataset { images, labels })
}
