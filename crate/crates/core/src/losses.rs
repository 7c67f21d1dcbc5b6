//! Perceptual, identity, semantic-preservation, pseudo-paired, adversarial
//! and total losses.
//!
//! The perceptual and identity networks are pluggable: they are built from a
//! seed (fixed random convolutional features) or loaded from a checkpoint of
//! the same shape. Both resize their inputs to `loss_resolution` first.

use std::path::Path;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_manifest, verify_hash, write_checkpoint};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::image::{resize_square, Image};
use crate::layers::EqualConv;
use crate::params::{Init, ParamStore};

/// Default fine-tuning weights.
pub const LAMBDA_ID: f64 = 0.1;
pub const LAMBDA_SEMANTIC: f64 = 1.0;
pub const LAMBDA_PAIRED: f64 = 1.0;
/// Resolution both feature networks see.
pub const LOSS_RESOLUTION: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    pub loss_resolution: usize,
    pub seed: u64,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        Self {
            loss_resolution: LOSS_RESOLUTION,
            seed: 0x1f1f5,
        }
    }
}

/// Where the feature networks come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum FeatureNetSource {
    /// Fixed-seed random convolutional features.
    Random,
    /// Checkpoints produced by [`LossNets::save`] or converted pretrained
    /// weights of the same shapes.
    Checkpoint { dir: std::path::PathBuf },
}

impl Default for FeatureNetSource {
    fn default() -> Self {
        FeatureNetSource::Random
    }
}

const PERCEPTUAL_WIDTHS: [usize; 3] = [16, 32, 32];

/// LPIPS-style distance over a small convolutional feature pyramid.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    config: FeatureNetConfig,
    params: ParamStore,
    convs: Vec<EqualConv>,
}

impl PerceptualNet {
    pub fn new(config: FeatureNetConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed);
        let convs = feature_stack(&mut params, &mut init, "lpips")?;
        for (i, c) in PERCEPTUAL_WIDTHS.iter().enumerate() {
            // Non-negative channel weights normalized to sum to one per layer.
            let raw: Vec<f32> = init.normal_vec(*c, 1.0).iter().map(|v| v.abs() + 0.1).collect();
            let total: f32 = raw.iter().sum();
            let w: Vec<f32> = raw.iter().map(|v| v / total).collect();
            params.add_buffer(format!("lpips.lin{i}"), Tensor::from_vec(w, *c, &candle_core::Device::Cpu)?)?;
        }
        Ok(Self { config, params, convs })
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.config
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = resize_square(x, self.config.loss_resolution)?;
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            x = conv.forward(&self.params, false, &x)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Per-sample distances of two `B×3×H×W` batches, shape `B`.
    pub fn distance_batch(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        self.feature_distance(&self.features(a)?, &self.features(b)?)
    }

    fn feature_distance(&self, fa: &[Tensor], fb: &[Tensor]) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for (i, (xa, xb)) in fa.iter().zip(fb).enumerate() {
            let diff = (unit_channels(xa)?.broadcast_sub(&unit_channels(xb)?))?.sqr()?;
            let lin = self.params.get(&format!("lpips.lin{i}"), false)?;
            let d = diff
                .broadcast_mul(&lin.reshape((1, (), 1, 1))?)?
                .sum(1)?
                .mean(D::Minus1)?
                .mean(D::Minus1)?;
            total = Some(match total {
                None => d,
                Some(t) => (t + d)?,
            });
        }
        Ok(total.expect("feature stack is non-empty"))
    }

    /// Mean distance over the batch (scalar tensor).
    pub fn distance_mean(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(self.distance_batch(a, b)?.mean_all()?)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

fn feature_stack(params: &mut ParamStore, init: &mut Init, prefix: &str) -> Result<Vec<EqualConv>> {
    let [c0, c1, c2] = PERCEPTUAL_WIDTHS;
    Ok(vec![
        EqualConv::init(params, init, &format!("{prefix}.conv0"), 3, c0, 4, 4, true, true)?,
        EqualConv::init(params, init, &format!("{prefix}.conv1"), c0, c1, 2, 2, true, true)?,
        EqualConv::init(params, init, &format!("{prefix}.conv2"), c1, c2, 2, 2, true, true)?,
    ])
}

fn unit_channels(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

pub const IDENTITY_DIM: usize = 128;

/// Face-embedding surrogate producing unit-norm vectors.
#[derive(Debug, Clone)]
pub struct IdentityNet {
    config: FeatureNetConfig,
    params: ParamStore,
    convs: Vec<EqualConv>,
    pool: usize,
    in_dim: usize,
}

impl IdentityNet {
    pub fn new(config: FeatureNetConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed ^ 0x1d);
        let convs = feature_stack(&mut params, &mut init, "id")?;
        let spatial = (config.loss_resolution / 16).max(1);
        let pool = spatial.min(4);
        let in_dim = PERCEPTUAL_WIDTHS[2] * pool * pool;
        params.add_param("id.proj.weight", init.normal((IDENTITY_DIM, in_dim), 1.0)?)?;
        Ok(Self {
            config,
            params,
            convs,
            pool,
            in_dim,
        })
    }

    /// `B×3×H×W` → `B×128`, each row unit length.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = resize_square(x, self.config.loss_resolution)?;
        for conv in &self.convs {
            x = conv.forward(&self.params, false, &x)?;
        }
        let (b, _, h, _) = x.dims4()?;
        let k = (h / self.pool).max(1);
        let pooled = x.avg_pool2d(k)?.reshape((b, self.in_dim))?;
        let w = (self.params.get("id.proj.weight", false)? / (self.in_dim as f64).sqrt())?;
        let e = pooled.matmul(&w.t()?)?;
        let norm = (e.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
        Ok(e.broadcast_div(&norm)?)
    }

    /// Per-sample `1 − cos`, shape `B`.
    pub fn distance_batch(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        let cos = (self.embed(a)? * self.embed(b)?)?.sum(1)?;
        Ok(cos.affine(-1.0, 1.0)?)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

/// The perceptual and identity networks used by every loss.
#[derive(Debug, Clone)]
pub struct LossNets {
    pub perceptual: PerceptualNet,
    pub identity: IdentityNet,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureNetManifest {
    kind: String,
    config: FeatureNetConfig,
    content_hash: String,
}

impl LossNets {
    pub fn random(config: FeatureNetConfig) -> Result<Self> {
        Ok(Self {
            perceptual: PerceptualNet::new(config)?,
            identity: IdentityNet::new(config)?,
        })
    }

    pub fn from_source(source: &FeatureNetSource, config: FeatureNetConfig) -> Result<Self> {
        match source {
            FeatureNetSource::Random => Self::random(config),
            FeatureNetSource::Checkpoint { dir } => Self::load(dir),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (name, params, config) in [
            ("perceptual", &self.perceptual.params, self.perceptual.config),
            ("identity", &self.identity.params, self.identity.config),
        ] {
            let m = FeatureNetManifest {
                kind: format!("{name}_net"),
                config,
                content_hash: params.content_hash()?,
            };
            write_checkpoint(&dir.join(name), &m, params)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let pm: FeatureNetManifest = read_manifest(&dir.join("perceptual"), "perceptual_net", &["config", "content_hash"])?;
        let mut perceptual = PerceptualNet::new(pm.config)?;
        perceptual.params.load_safetensors(dir.join("perceptual").join(crate::checkpoint::WEIGHTS))?;
        verify_hash(&dir.join("perceptual"), &pm.content_hash, &perceptual.params.content_hash()?)?;
        let im: FeatureNetManifest = read_manifest(&dir.join("identity"), "identity_net", &["config", "content_hash"])?;
        let mut identity = IdentityNet::new(im.config)?;
        identity.params.load_safetensors(dir.join("identity").join(crate::checkpoint::WEIGHTS))?;
        verify_hash(&dir.join("identity"), &im.content_hash, &identity.params.content_hash()?)?;
        Ok(Self { perceptual, identity })
    }

    /// Per-sample semantic-preservation loss, `lpips + λ_id · (1 − cos)`.
    pub fn semantic_batch(&self, a: &Tensor, b: &Tensor, lambda_id: f64) -> Result<Tensor> {
        if lambda_id < 0.0 {
            return Err(Error::InvalidParameter(format!("lambda_id {lambda_id} must be >= 0")));
        }
        let lp = self.perceptual.distance_batch(a, b)?;
        if lambda_id == 0.0 {
            return Ok(lp);
        }
        Ok((lp + (self.identity.distance_batch(a, b)? * lambda_id)?)?)
    }

    pub fn semantic_mean(&self, a: &Tensor, b: &Tensor, lambda_id: f64) -> Result<Tensor> {
        Ok(self.semantic_batch(a, b, lambda_id)?.mean_all()?)
    }
}

/// Precomputed features of a fixed optimization target.
#[derive(Debug, Clone)]
pub struct SemanticTarget {
    features: Vec<Tensor>,
    embedding: Tensor,
}

impl LossNets {
    /// Caches the features of a `1×3×H×W` (or batch) target.
    pub fn semantic_target(&self, target: &Tensor) -> Result<SemanticTarget> {
        let target = target.detach();
        Ok(SemanticTarget {
            features: self.perceptual.features(&target)?,
            embedding: self.identity.embed(&target)?,
        })
    }

    /// Same value as [`LossNets::semantic_batch`] against the cached target;
    /// a single-image target broadcasts over the batch.
    pub fn semantic_to(&self, x: &Tensor, target: &SemanticTarget, lambda_id: f64) -> Result<Tensor> {
        if lambda_id < 0.0 {
            return Err(Error::InvalidParameter(format!("lambda_id {lambda_id} must be >= 0")));
        }
        let lp = self.perceptual.feature_distance(&self.perceptual.features(x)?, &target.features)?;
        if lambda_id == 0.0 {
            return Ok(lp);
        }
        let cos = self.identity.embed(x)?.broadcast_mul(&target.embedding)?.sum(1)?;
        Ok((lp + (cos.affine(-1.0, 1.0)? * lambda_id)?)?)
    }
}

fn pair_batches(a: &Image, b: &Image) -> Result<(Tensor, Tensor)> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )));
    }
    Ok((a.batch()?, b.batch()?))
}

pub fn lpips(a: &Image, b: &Image, net: &PerceptualNet) -> Result<f32> {
    let (a, b) = pair_batches(a, b)?;
    Ok(net.distance_mean(&a, &b)?.to_scalar::<f32>()?)
}

pub fn identity_loss(a: &Image, b: &Image, net: &IdentityNet) -> Result<f32> {
    let (a, b) = pair_batches(a, b)?;
    Ok(net.distance_batch(&a, &b)?.mean_all()?.to_scalar::<f32>()?)
}

pub fn semantic_loss(img_g: &Image, img_g_prime: &Image, lambda_id: f64, nets: &LossNets) -> Result<f32> {
    let (a, b) = pair_batches(img_g, img_g_prime)?;
    Ok(nets.semantic_mean(&a, &b, lambda_id)?.to_scalar::<f32>()?)
}

/// Pseudo-paired supervision: perceptual distance only.
pub fn paired_loss(generated: &Image, style_image: &Image, net: &PerceptualNet) -> Result<f32> {
    lpips(generated, style_image, net)
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Non-saturating logistic losses from discriminator logits.
#[derive(Debug, Clone)]
pub struct AdversarialLosses {
    /// `mean softplus(−D(fake))`
    pub g_loss: Tensor,
    /// `mean softplus(D(fake)) + mean softplus(−D(real))`
    pub d_loss: Tensor,
}

pub fn adversarial_from_logits(real_logits: &Tensor, fake_logits: &Tensor) -> Result<AdversarialLosses> {
    if real_logits.elem_count() == 0 || fake_logits.elem_count() == 0 {
        return Err(Error::EmptyDataset("adversarial loss needs non-empty batches".into()));
    }
    let g_loss = softplus(&fake_logits.neg()?)?.mean_all()?;
    let d_loss = (softplus(fake_logits)?.mean_all()? + softplus(&real_logits.neg()?)?.mean_all()?)?;
    Ok(AdversarialLosses { g_loss, d_loss })
}

pub fn adversarial_losses(real: &Tensor, fake: &Tensor, disc: &Discriminator) -> Result<AdversarialLosses> {
    if real.dims4()?.0 == 0 || fake.dims4()?.0 == 0 {
        return Err(Error::EmptyDataset("adversarial loss needs non-empty batches".into()));
    }
    adversarial_from_logits(&disc.forward(real)?, &disc.forward(fake)?)
}

/// `adv + λ_semantic·semantic + λ_paired·paired`.
pub fn total_loss(adv: f32, semantic: f32, paired: f32, lambda_semantic: f32, lambda_paired: f32) -> f32 {
    adv + lambda_semantic * semantic + lambda_paired * paired
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn small_nets() -> LossNets {
        LossNets::random(FeatureNetConfig {
            loss_resolution: 64,
            seed: 5,
        })
        .unwrap()
    }

    fn random_image(seed: u64, res: usize) -> Image {
        let t = Init::new(seed).normal((3, res, res), 0.5).unwrap().clamp(-1f32, 1f32).unwrap();
        Image::new(t).unwrap()
    }

    #[test]
    fn lpips_identity_and_symmetry() {
        let nets = small_nets();
        let a = random_image(1, 16);
        let b = random_image(2, 16);
        assert_eq!(lpips(&a, &a, &nets.perceptual).unwrap(), 0.0);
        let ab = lpips(&a, &b, &nets.perceptual).unwrap();
        let ba = lpips(&b, &a, &nets.perceptual).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-7);
    }

    #[test]
    fn lpips_resizes_before_extraction() {
        let nets = small_nets();
        let a = random_image(3, 16);
        let b = random_image(4, 16);
        let up = |i: &Image| Image::new(resize_square(&i.batch().unwrap(), 64).unwrap().get(0).unwrap()).unwrap();
        let low = lpips(&a, &b, &nets.perceptual).unwrap();
        let high = lpips(&up(&a), &up(&b), &nets.perceptual).unwrap();
        assert!((low - high).abs() < 1e-6, "{low} vs {high}");
    }

    #[test]
    fn identity_embeddings_are_unit_norm() {
        let nets = small_nets();
        let batch = Init::new(9).normal((4, 3, 16, 16), 0.5).unwrap();
        let e = nets.identity.embed(&batch).unwrap();
        for row in e.to_vec2::<f32>().unwrap() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let a = random_image(7, 16);
        assert!(identity_loss(&a, &a, &nets.identity).unwrap().abs() < 1e-6);
    }

    #[test]
    fn semantic_with_zero_lambda_is_lpips() {
        let nets = small_nets();
        let a = random_image(5, 16);
        let b = random_image(6, 16);
        assert_eq!(
            semantic_loss(&a, &b, 0.0, &nets).unwrap(),
            lpips(&a, &b, &nets.perceptual).unwrap()
        );
        assert_eq!(paired_loss(&a, &b, &nets.perceptual).unwrap(), lpips(&a, &b, &nets.perceptual).unwrap());
        assert!(semantic_loss(&a, &b, -1.0, &nets).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let nets = small_nets();
        let err = lpips(&random_image(1, 16), &random_image(1, 32), &nets.perceptual).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn zero_logits_give_log_two_per_term() {
        let z = Tensor::zeros(4, candle_core::DType::F32, &candle_core::Device::Cpu).unwrap();
        let l = adversarial_from_logits(&z, &z).unwrap();
        let ln2 = std::f32::consts::LN_2;
        assert!((l.g_loss.to_scalar::<f32>().unwrap() - ln2).abs() < 1e-6);
        assert!((l.d_loss.to_scalar::<f32>().unwrap() - 2.0 * ln2).abs() < 1e-6);
    }

    #[test]
    fn generator_loss_falls_as_fake_logits_rise() {
        let real = Tensor::zeros(3, candle_core::DType::F32, &candle_core::Device::Cpu).unwrap();
        let mut prev = f32::INFINITY;
        for v in [-3f32, -1.0, 0.0, 2.0, 5.0] {
            let fake = Tensor::full(v, 3, &candle_core::Device::Cpu).unwrap();
            let g = adversarial_from_logits(&real, &fake).unwrap().g_loss.to_scalar::<f32>().unwrap();
            assert!(g < prev);
            prev = g;
        }
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let x = Tensor::new(&[-100f32, 0.0, 100.0], &candle_core::Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f32>().unwrap();
        assert!(y[0] >= 0.0 && y[0] < 1e-30);
        assert!((y[1] - std::f32::consts::LN_2).abs() < 1e-7);
        assert!((y[2] - 100.0).abs() < 1e-5);
    }

    #[test]
    fn total_loss_weights() {
        assert_eq!(total_loss(0.7, 3.0, 5.0, 0.0, 0.0), 0.7);
        assert_eq!(total_loss(0.5, 0.25, 0.125, 1.0, 1.0), 0.875);
    }

    #[test]
    fn nets_round_trip_through_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let nets = small_nets();
        nets.save(dir.path()).unwrap();
        let back = LossNets::from_source(
            &FeatureNetSource::Checkpoint { dir: dir.path().to_path_buf() },
            FeatureNetConfig::default(),
        )
        .unwrap();
        let a = random_image(1, 16);
        let b = random_image(2, 16);
        assert_eq!(
            lpips(&a, &b, &nets.perceptual).unwrap(),
            lpips(&a, &b, &back.perceptual).unwrap()
        );
    }

    #[test]
    fn cached_target_matches_direct_semantic_loss() {
        let nets = small_nets();
        let a = random_image(1, 32).batch().unwrap();
        let b = random_image(2, 32).batch().unwrap();
        let direct = nets.semantic_batch(&a, &b, 0.1).unwrap().to_vec1::<f32>().unwrap();
        let target = nets.semantic_target(&b).unwrap();
        let cached = nets.semantic_to(&a, &target, 0.1).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(direct, cached);
    }
}

