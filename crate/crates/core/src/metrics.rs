//! FID, perceptual / identity distance and inter-generator semantic distance.

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{sample_z, Generator};
use crate::image::{stack, Image};
use crate::latent::LatentSpace;
use crate::losses::{identity_loss, lpips, IdentityNet, PerceptualNet};

/// Extractor id for discriminator penultimate features.
pub fn discriminator_extractor_id(disc: &Discriminator) -> Result<String> {
    Ok(format!("disc-penultimate:{}", &disc.content_hash()?[..16]))
}

#[derive(Debug, Clone)]
pub struct FeatureSet {
    features: DMatrix<f64>,
    extractor_id: String,
}

impl FeatureSet {
    pub fn new(features: DMatrix<f64>, extractor_id: impl Into<String>) -> Result<Self> {
        if features.nrows() < 2 {
            return Err(Error::InvalidParameter(format!("feature set needs at least 2 rows, got {}", features.nrows())));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("feature set has non-finite entries".into()));
        }
        Ok(Self {
            features,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], extractor_id: impl Into<String>) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::ShapeMismatch("feature rows differ in length".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]), extractor_id)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn extractor_id(&self) -> &str {
        &self.extractor_id
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.len() as f64;
        let mean = self.features.row_mean().transpose();
        let mut centered = self.features.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1.0);
        (mean, cov)
    }
}

/// Result of a Fréchet distance computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidDetail {
    pub value: f64,
    /// Negative eigenvalues floored to zero in the square roots.
    pub clamped: usize,
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric PSD square root with eigenvalue floor 0.
fn sqrtm_psd(m: &DMatrix<f64>, clamped: &mut usize) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(sym(m));
    let roots = eig.eigenvalues.map(|l| {
        if l < 0.0 {
            *clamped += 1;
            0.0
        } else {
            l.sqrt()
        }
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

pub fn fid_detail(a: &FeatureSet, b: &FeatureSet) -> Result<FidDetail> {
    if a.extractor_id != b.extractor_id {
        return Err(Error::InvalidParameter(format!(
            "feature extractors differ: {} vs {}",
            a.extractor_id, b.extractor_id
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("feature dims differ: {} vs {}", a.dim(), b.dim())));
    }
    let (mu_a, cov_a) = a.moments();
    let (mu_b, cov_b) = b.moments();
    let mut clamped = 0;
    // Tr (Σa Σb)^{1/2} = Tr (Σa^{1/2} Σb Σa^{1/2})^{1/2}, which is symmetric.
    let root_a = sqrtm_psd(&cov_a, &mut clamped);
    let inner = sym(&(&root_a * &cov_b * &root_a));
    let eig = SymmetricEigen::new(inner);
    let mut tr_cross = 0.0;
    for &l in eig.eigenvalues.iter() {
        if l < 0.0 {
            clamped += 1;
        } else {
            tr_cross += l.sqrt();
        }
    }
    if clamped > 0 {
        log::warn!("fid: clamped {clamped} negative eigenvalues to zero");
    }
    let diff = (&mu_a - &mu_b).norm_squared();
    let value = diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
    Ok(FidDetail {
        value: value.max(0.0),
        clamped,
    })
}

pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    Ok(fid_detail(a, b)?.value)
}

/// Discriminator penultimate features of `images`, in chunks of `chunk`.
pub fn extract_features(images: &[Image], disc: &Discriminator, chunk: usize) -> Result<FeatureSet> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("no images to extract features from".into()));
    }
    let mut rows = Vec::with_capacity(images.len());
    for batch in images.chunks(chunk.max(1)) {
        let f = disc.features(&stack(batch)?)?.to_dtype(DType::F64)?;
        rows.extend(f.to_vec2::<f64>()?);
    }
    FeatureSet::from_rows(&rows, discriminator_extractor_id(disc)?)
}

/// Mean LPIPS over (source, output) pairs.
pub fn perceptual_distance(pairs: &[(Image, Image)], net: &PerceptualNet) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("perceptual distance needs at least one pair".into()));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        total += lpips(a, b, net)? as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean `1 − cos` of identity embeddings over pairs.
pub fn identity_distance(pairs: &[(Image, Image)], net: &IdentityNet) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("identity distance needs at least one pair".into()));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        total += identity_loss(a, b, net)? as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean LPIPS between `g` and `g_prime` on `n` shared `Z` samples.
pub fn semantic_distance(g: &Generator, g_prime: &Generator, n: usize, seed: u64, net: &PerceptualNet) -> Result<f64> {
    if g.config() != g_prime.config() {
        return Err(Error::Config("semantic distance needs generators with the same config".into()));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("semantic distance needs n ≥ 1".into()));
    }
    let zs = sample_z(n, seed, LatentSpace::Z, g.config())?;
    let mut total = 0.0;
    for chunk in zs.chunks(4) {
        let z = Tensor::cat(&chunk.iter().map(|c| c.values().clone()).collect::<Vec<_>>(), 0)?;
        let a = g.generate_from_z(&z, 1.0)?;
        let b = g_prime.generate_from_z(&z, 1.0)?;
        total += net.distance_batch(&a, &b)?.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(total / n as f64)
}

/// One row of an `evaluate` report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub extractor_id: String,
    pub n: usize,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, m: usize, scale: f64, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = DMatrix::from_fn(n, m, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        });
        FeatureSet::new(data, "test").unwrap()
    }

    #[test]
    fn fid_rejects_mismatch() {
        let a = gaussian(10, 3, 1.0, 1);
        let b = gaussian(10, 4, 1.0, 2);
        assert!(fid(&a, &b).is_err());
        let c = FeatureSet::new(gaussian(10, 3, 1.0, 3).features().clone(), "other").unwrap();
        assert!(fid(&a, &c).is_err());
        assert!(FeatureSet::new(DMatrix::zeros(1, 3), "x").is_err());
    }

    #[test]
    fn fid_self_is_zero_and_symmetric() {
        let a = gaussian(200, 6, 1.0, 4);
        let b = gaussian(200, 6, 1.7, 5);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn fid_of_shifted_means() {
        // Identical covariances: only the mean term survives.
        let a = gaussian(300, 4, 1.0, 6);
        let shifted = a.features().map(|v| v + 0.5);
        let b = FeatureSet::new(shifted, "test").unwrap();
        assert!((fid(&a, &b).unwrap() - 4.0 * 0.25).abs() < 1e-6);
    }
}
