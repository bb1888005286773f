//! Sources of unlabeled virtual examples and a Fréchet distance for
//! ranking them against real data.
//!
//! Three samplers span the quality axis: the task's own renderer (a perfect
//! generator), a Gaussian kernel density estimate over training images whose
//! bandwidth degrades quality, and uniform noise.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::image::RasterImage;
use crate::seed;
use crate::task::SyntheticTaskSpec;

/// Dimension of the embedding used by [`embed_features`].
pub const FEATURE_DIM: usize = 32;
/// Smallest sample count accepted by [`quality_report`].
pub const MIN_QUALITY_SAMPLES: usize = 256;
/// Eigenvalues of the covariance product below this are treated as an error.
pub const EIGEN_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug)]
pub enum SamplerKind {
    TrueDistribution(SyntheticTaskSpec),
    Kde {
        bandwidth: f64,
        corpus: Arc<[RasterImage]>,
    },
    Noise {
        height: usize,
        width: usize,
    },
}

#[derive(Clone, Debug)]
pub struct SamplerHandle {
    kind: SamplerKind,
    seed: u64,
}

/// Fits the kernel density sampler: a uniformly chosen corpus image plus
/// i.i.d. Gaussian pixel noise of std `bandwidth`, clamped to `[0, 1]`.
pub fn fit_kde(corpus: &[RasterImage], bandwidth: f64, seed: u64) -> Result<SamplerHandle> {
    let first = corpus.first().ok_or(Error::Empty("kde corpus"))?;
    if corpus.iter().any(|c| !c.same_shape(first)) {
        return Err(Error::InvalidArgument("kde corpus images differ in shape".into()));
    }
    if !(bandwidth.is_finite() && bandwidth >= 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth {bandwidth} must be >= 0")));
    }
    Ok(SamplerHandle {
        kind: SamplerKind::Kde {
            bandwidth,
            corpus: corpus.into(),
        },
        seed,
    })
}

impl SamplerHandle {
    pub fn true_distribution(task: SyntheticTaskSpec, seed: u64) -> Result<Self> {
        task.validate()?;
        Ok(Self {
            kind: SamplerKind::TrueDistribution(task),
            seed,
        })
    }

    pub fn noise(height: usize, width: usize, seed: u64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("noise sampler needs positive dims".into()));
        }
        Ok(Self {
            kind: SamplerKind::Noise { height, width },
            seed,
        })
    }

    pub fn kind(&self) -> &SamplerKind {
        &self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Output image shape as `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        match &self.kind {
            SamplerKind::TrueDistribution(t) => (t.image_side, t.image_side),
            SamplerKind::Kde { corpus, .. } => (corpus[0].height(), corpus[0].width()),
            SamplerKind::Noise { height, width } => (*height, *width),
        }
    }

    pub fn description(&self) -> String {
        match &self.kind {
            SamplerKind::TrueDistribution(_) => "true_distribution".into(),
            SamplerKind::Kde { bandwidth, .. } => format!("kde_sigma={bandwidth}"),
            SamplerKind::Noise { .. } => "noise".into(),
        }
    }

    /// Draws `n` fresh images. Each item gets its own generator seeded from
    /// the handle seed and one value drawn from `rng`, so the batch is a pure
    /// function of `(handle, rng state)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<RasterImage>> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be >= 1".into()));
        }
        let item_seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
        item_seeds
            .into_iter()
            .map(|s| self.sample_one(&mut seed::rng(&[self.seed, s])))
            .collect()
    }

    fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<RasterImage> {
        match &self.kind {
            SamplerKind::TrueDistribution(task) => {
                let class = rng.random_range(0..task.num_classes);
                task.render(class, rng)
            }
            SamplerKind::Kde { bandwidth, corpus } => {
                let base = &corpus[rng.random_range(0..corpus.len())];
                if *bandwidth == 0.0 {
                    return Ok(base.clone());
                }
                let noise = Normal::new(0.0, *bandwidth).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let px = base.pixels().iter().map(|p| p + noise.sample(rng)).collect();
                RasterImage::from_clamped(base.height(), base.width(), px)
            }
            SamplerKind::Noise { height, width } => {
                let px = (0..height * width).map(|_| rng.random::<f64>()).collect();
                RasterImage::new(*height, *width, px)
            }
        }
    }
}

/// Frozen random-projection embedding: flattened pixels times a seeded
/// Gaussian matrix with entries `N(0, 1/npix)`, then `tanh`. One row per image.
///
/// Values from different `embedder_seed`s are not comparable.
pub fn embed_features(images: &[RasterImage], embedder_seed: u64) -> Result<DMatrix<f64>> {
    let first = images.first().ok_or(Error::Empty("images to embed"))?;
    if images.iter().any(|i| !i.same_shape(first)) {
        return Err(Error::InvalidArgument("images to embed differ in shape".into()));
    }
    let npix = first.height() * first.width();
    let mut rng = seed::rng(&[embedder_seed, seed::stream::EMBED, npix as u64]);
    let scale = 1.0 / (npix as f64).sqrt();
    let proj = DMatrix::<f64>::from_fn(npix, FEATURE_DIM, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });
    let pixels = DMatrix::from_fn(images.len(), npix, |r, c| images[r].pixels()[c]);
    Ok((pixels * proj).map(f64::tanh))
}

fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (n - 1.0);
    (mean, cov)
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` between the row distributions of
/// two feature matrices.
///
/// `Tr((Σ₁Σ₂)^{1/2})` is taken as `Tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`, whose
/// argument is symmetric positive semidefinite.
pub fn frechet_distance(real: &DMatrix<f64>, generated: &DMatrix<f64>) -> Result<f64> {
    if real.ncols() != generated.ncols() {
        return Err(Error::ShapeMismatch {
            op: "frechet_distance",
            left: vec![real.nrows(), real.ncols()],
            right: vec![generated.nrows(), generated.ncols()],
        });
    }
    if real.nrows() < 2 || generated.nrows() < 2 {
        return Err(Error::InvalidArgument("frechet_distance needs at least 2 rows per set".into()));
    }
    let (mu1, s1) = moments(real);
    let (mu2, s2) = moments(generated);
    let r1 = symmetric_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    if let Some(bad) = eig.eigenvalues.iter().find(|&&l| l < -EIGEN_TOLERANCE) {
        return Err(Error::InvalidArgument(format!(
            "covariance product has eigenvalue {bad} below -{EIGEN_TOLERANCE}"
        )));
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = (&mu1 - &mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub sampler: String,
    pub fid_analog: f64,
    pub sample_count: usize,
}

/// Fréchet distance between `n_samples` draws from `handle` and `real_corpus`
/// in the embedding selected by `embedder_seed`.
pub fn quality_report(
    handle: &SamplerHandle,
    real_corpus: &[RasterImage],
    n_samples: usize,
    embedder_seed: u64,
) -> Result<QualityReport> {
    if n_samples < MIN_QUALITY_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "quality report needs at least {MIN_QUALITY_SAMPLES} samples, got {n_samples}"
        )));
    }
    let mut rng = seed::rng(&[handle.seed, seed::stream::QUALITY, embedder_seed]);
    let generated = handle.sample(n_samples, &mut rng)?;
    let real = embed_features(real_corpus, embedder_seed)?;
    let fake = embed_features(&generated, embedder_seed)?;
    Ok(QualityReport {
        sampler: handle.description(),
        fid_analog: frechet_distance(&real, &fake)?,
        sample_count: n_samples,
    })
}
