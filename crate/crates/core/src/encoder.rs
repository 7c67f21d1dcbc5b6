//! Feature-pyramid image encoders targeting `W`, `W+` or `Z+`.
//!
//! A convolutional backbone produces fine, medium and coarse feature maps,
//! merged top-down into a pyramid. Each generator layer gets a mapping unit
//! (strided convolutions down to 1×1, then a linear projection) reading from
//! the pyramid level its layer group uses. The `W` variant shares a single
//! mapping unit and emits one row; the `Z+` variant's output is meant to go
//! through the generator's mapping network.

use std::path::Path;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_manifest, verify_hash, write_checkpoint};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::image::{stack, Image};
use crate::latent::{LatentCode, LatentSpace};
use crate::layers::{EqualConv, EqualLinear};
use crate::losses::{LossNets, LAMBDA_ID};
use crate::optim::{finite_scalar, Adam};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderTarget {
    W,
    WPlus,
    ZPlus,
}

impl EncoderTarget {
    pub fn space(self) -> LatentSpace {
        match self {
            EncoderTarget::W => LatentSpace::W,
            EncoderTarget::WPlus => LatentSpace::WPlus,
            EncoderTarget::ZPlus => LatentSpace::ZPlus,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderTarget::W => "w",
            EncoderTarget::WPlus => "wplus",
            EncoderTarget::ZPlus => "zplus",
        }
    }
}

impl std::str::FromStr for EncoderTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "w" => Ok(EncoderTarget::W),
            "wplus" | "w+" => Ok(EncoderTarget::WPlus),
            "zplus" | "z+" => Ok(EncoderTarget::ZPlus),
            other => Err(Error::InvalidParameter(format!("unknown encoder target `{other}`"))),
        }
    }
}

/// Pyramid level read by each generator layer: coarse, medium or fine.
pub fn layer_levels(layer_count: usize) -> Vec<usize> {
    let coarse_end = ((layer_count * 3) as f64 / 18.0).round().max(1.0) as usize;
    let medium_end = (((layer_count * 7) as f64 / 18.0).round() as usize).max(coarse_end + 1);
    (0..layer_count)
        .map(|i| {
            if i < coarse_end {
                2
            } else if i < medium_end {
                1
            } else {
                0
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
struct MappingUnit {
    convs: Vec<EqualConv>,
    linear: EqualLinear,
}

impl MappingUnit {
    fn init(p: &mut ParamStore, init: &mut Init, name: &str, width: usize, spatial: usize, d: usize) -> Result<Self> {
        let steps = spatial.trailing_zeros() as usize;
        let convs = (0..steps)
            .map(|i| EqualConv::init(p, init, &format!("{name}.conv{i}"), width, width, 2, 2, true, true))
            .collect::<Result<Vec<_>>>()?;
        let linear = EqualLinear::init(p, init, &format!("{name}.linear"), width, d, 0.0, 1.0, false)?;
        Ok(Self { convs, linear })
    }

    fn forward(&self, p: &ParamStore, t: bool, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for c in &self.convs {
            x = c.forward(p, t, &x)?;
        }
        let b = x.dims4()?.0;
        self.linear.forward(p, t, &x.reshape((b, ()))?)
    }
}

#[derive(Debug, Clone)]
struct Backbone {
    stem: EqualConv,
    down: [EqualConv; 3],
    refine: [EqualConv; 3],
    lateral: [EqualConv; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct EncoderManifest {
    kind: String,
    target: EncoderTarget,
    config: GeneratorConfig,
    seed: u64,
    head_count: usize,
    content_hash: String,
}

const KIND: &str = "encoder";

#[derive(Debug, Clone)]
pub struct Encoder {
    target: EncoderTarget,
    config: GeneratorConfig,
    params: ParamStore,
    backbone: Backbone,
    heads: Vec<MappingUnit>,
    levels: Vec<usize>,
    seed: u64,
    track: bool,
}

impl Encoder {
    /// `W` and `W+` encoders predict offsets from the generator's mean
    /// latent; `Z+` encoders predict raw normal-space codes.
    pub fn new(target: EncoderTarget, gen: &Generator, seed: u64) -> Result<Self> {
        let mut enc = Self::build(target, *gen.config(), seed)?;
        if target != EncoderTarget::ZPlus {
            enc.params.set_buffer("offset", gen.w_mean()?)?;
        }
        Ok(enc)
    }

    fn build(target: EncoderTarget, config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let p = &mut params;
        let r = config.resolution;
        let c = |res: usize| config.channels(res);
        let width = c(r / 8);
        let backbone = Backbone {
            stem: EqualConv::init(p, &mut init, "enc.stem", 3, c(r), 3, 1, true, true)?,
            down: [
                EqualConv::init(p, &mut init, "enc.down0", c(r), c(r / 2), 2, 2, true, true)?,
                EqualConv::init(p, &mut init, "enc.down1", c(r / 2), c(r / 4), 2, 2, true, true)?,
                EqualConv::init(p, &mut init, "enc.down2", c(r / 4), width, 2, 2, true, true)?,
            ],
            refine: [
                EqualConv::init(p, &mut init, "enc.refine0", c(r / 2), c(r / 2), 3, 1, true, true)?,
                EqualConv::init(p, &mut init, "enc.refine1", c(r / 4), c(r / 4), 3, 1, true, true)?,
                EqualConv::init(p, &mut init, "enc.refine2", width, width, 3, 1, true, true)?,
            ],
            lateral: [
                EqualConv::init(p, &mut init, "enc.lateral0", c(r / 2), width, 1, 1, true, false)?,
                EqualConv::init(p, &mut init, "enc.lateral1", c(r / 4), width, 1, 1, true, false)?,
            ],
        };
        let d = config.latent_dim;
        let (heads, levels) = match target {
            EncoderTarget::W => {
                let head = MappingUnit::init(p, &mut init, "enc.head", width, r / 8, d)?;
                (vec![head], vec![2])
            }
            EncoderTarget::WPlus | EncoderTarget::ZPlus => {
                let levels = layer_levels(config.layer_count());
                let heads = levels
                    .iter()
                    .enumerate()
                    .map(|(i, &lvl)| {
                        let spatial = (r / 2) >> lvl;
                        MappingUnit::init(p, &mut init, &format!("enc.head{i}"), width, spatial, d)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (heads, levels)
            }
        };
        params.add_buffer("offset", Tensor::zeros((1, d), candle_core::DType::F32, &candle_core::Device::Cpu)?)?;
        Ok(Self {
            target,
            config,
            params,
            backbone,
            heads,
            levels,
            seed,
            track: false,
        })
    }

    pub fn target(&self) -> EncoderTarget {
        self.target
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Number of distinct mapping-unit parameter blocks.
    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn set_tracking(&mut self, track: bool) {
        self.track = track;
    }

    /// `B×3×R×R` → `B×rows×d`, rows being 1 for `W` and `L` otherwise.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let r = self.config.resolution;
        if c != 3 || h != r || w != r {
            return Err(Error::InvalidImage(format!(
                "encoder expects 3×{r}×{r} images, got {:?}",
                &x.dims()[1..]
            )));
        }
        let p = &self.params;
        let t = self.track;
        let bb = &self.backbone;
        let x = bb.stem.forward(p, t, x)?;
        let c1 = bb.refine[0].forward(p, t, &bb.down[0].forward(p, t, &x)?)?;
        let c2 = bb.refine[1].forward(p, t, &bb.down[1].forward(p, t, &c1)?)?;
        let c3 = bb.refine[2].forward(p, t, &bb.down[2].forward(p, t, &c2)?)?;
        let up = |x: &Tensor| -> Result<Tensor> {
            let (_, _, h, w) = x.dims4()?;
            Ok(x.upsample_nearest2d(h * 2, w * 2)?)
        };
        let p2 = (up(&c3)? + bb.lateral[1].forward(p, t, &c2)?)?;
        let p1 = (up(&p2)? + bb.lateral[0].forward(p, t, &c1)?)?;
        let pyramid = [p1, p2, c3];

        let offset = p.get("offset", false)?;
        let rows = self
            .heads
            .iter()
            .zip(&self.levels)
            .map(|(head, &lvl)| Ok(head.forward(p, t, &pyramid[lvl])?.broadcast_add(&offset)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 1)?)
    }

    pub fn encode(&self, image: &Image) -> Result<LatentCode> {
        let out = self.encode_batch(&image.batch()?)?;
        LatentCode::new(self.target.space(), out.get(0)?.detach())
    }

    /// Generator input implied by an encoder output batch: `W` rows are
    /// broadcast, `Z+` rows go through the mapping network.
    pub fn decode_batch(&self, codes: &Tensor, gen: &Generator) -> Result<Tensor> {
        let (b, _, d) = codes.dims3()?;
        let l = gen.layer_count();
        let ws = match self.target {
            EncoderTarget::W => codes.broadcast_as((b, l, d))?.contiguous()?,
            EncoderTarget::WPlus => codes.clone(),
            EncoderTarget::ZPlus => gen.map_plus_batch(codes)?,
        };
        gen.synthesize_batch(&ws)
    }

    pub fn content_hash(&self) -> Result<String> {
        self.params.content_hash()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let m = EncoderManifest {
            kind: KIND.into(),
            target: self.target,
            config: self.config,
            seed: self.seed,
            head_count: self.head_count(),
            content_hash: self.content_hash()?,
        };
        write_checkpoint(dir.as_ref(), &m, &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: EncoderManifest = read_manifest(dir, KIND, &["target", "config", "seed", "content_hash"])?;
        let mut enc = Self::build(m.target, m.config, m.seed)?;
        enc.params.load_safetensors(dir.join(crate::checkpoint::WEIGHTS))?;
        verify_hash(dir, &m.content_hash, &enc.content_hash()?)?;
        Ok(enc)
    }
}

/// Reconstruction-training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_l2: f64,
    pub lambda_lpips: f64,
    pub lambda_id: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            lr: 0.002,
            lambda_l2: 1.0,
            lambda_lpips: 1.0,
            lambda_id: LAMBDA_ID,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EncoderTrainReport {
    pub losses: Vec<f32>,
}

/// Trains `enc` to reconstruct `images` through the frozen generator.
pub fn train_encoder(
    enc: &mut Encoder,
    gen: &Generator,
    images: &[Image],
    cfg: &EncoderTrainConfig,
    nets: &LossNets,
    mut on_step: impl FnMut(usize, f32),
) -> Result<EncoderTrainReport> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("encoder training set is empty".into()));
    }
    if gen.is_tracking() {
        return Err(Error::InvalidParameter("generator must be frozen during encoder training".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut report = EncoderTrainReport::default();
    if cfg.iterations == 0 {
        return Ok(report);
    }
    enc.set_tracking(true);
    let mut opt = Adam::new(enc.params.trainable(), cfg.lr)?;
    let mut init = Init::new(cfg.seed);
    let result = (|| {
        for step in 0..cfg.iterations {
            let batch: Vec<Image> = (0..cfg.batch_size)
                .map(|_| images[init.rng().random_range(0..images.len())].clone())
                .collect();
            let x = stack(&batch)?;
            let recon = enc.decode_batch(&enc.encode_batch(&x)?, gen)?;
            let l2 = (&recon - &x)?.sqr()?.mean_all()?;
            let lp = nets.perceptual.distance_mean(&recon, &x)?;
            let mut loss = ((l2 * cfg.lambda_l2)? + (lp * cfg.lambda_lpips)?)?;
            if cfg.lambda_id > 0.0 {
                let id = nets.identity.distance_batch(&recon, &x)?.mean_all()?;
                loss = (loss + (id * cfg.lambda_id)?)?;
            }
            let value = finite_scalar(&loss, || format!("encoder step {step}"))?;
            report.losses.push(value);
            on_step(step, value);
            opt.backward_step(&loss)?;
        }
        Ok(())
    })();
    enc.set_tracking(false);
    result.map(|_| report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::FeatureNetConfig;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 16,
            latent_dim: 32,
            channel_base: 64,
            channel_max: 8,
            mapping_layers: 2,
        }
    }

    fn gen() -> Generator {
        Generator::with_w_mean_samples(tiny(), 1, 200).unwrap()
    }

    fn img(seed: u64) -> Image {
        Image::new(Init::new(seed).normal((3, 16, 16), 0.5).unwrap().clamp(-1f32, 1f32).unwrap()).unwrap()
    }

    #[test]
    fn layer_levels_follow_coarse_medium_fine_split() {
        let l18 = layer_levels(18);
        assert_eq!(l18.iter().filter(|&&l| l == 2).count(), 3);
        assert_eq!(l18.iter().filter(|&&l| l == 1).count(), 4);
        assert_eq!(l18.iter().filter(|&&l| l == 0).count(), 11);
        assert_eq!(layer_levels(10), vec![2, 2, 1, 1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn variant_row_counts() {
        let g = gen();
        let x = img(1);
        for (target, rows, heads) in [
            (EncoderTarget::W, 1, 1),
            (EncoderTarget::WPlus, 6, 6),
            (EncoderTarget::ZPlus, 6, 6),
        ] {
            let e = Encoder::new(target, &g, 3).unwrap();
            let code = e.encode(&x).unwrap();
            assert_eq!(code.rows(), rows);
            assert_eq!(code.space(), target.space());
            assert_eq!(e.head_count(), heads);
            assert!(code.bit_eq(&e.encode(&x).unwrap()));
        }
    }

    #[test]
    fn rejects_wrong_image_size() {
        let e = Encoder::new(EncoderTarget::W, &gen(), 3).unwrap();
        let big = Image::new(Init::new(1).normal((3, 32, 32), 0.5).unwrap()).unwrap();
        assert!(matches!(e.encode(&big), Err(Error::InvalidImage(_))));
    }

    #[test]
    fn zero_iterations_leave_parameters_unchanged() {
        let g = gen();
        let mut e = Encoder::new(EncoderTarget::WPlus, &g, 3).unwrap();
        let before = e.params().deep_copy().unwrap();
        let nets = LossNets::random(FeatureNetConfig { loss_resolution: 32, seed: 1 }).unwrap();
        let cfg = EncoderTrainConfig { iterations: 0, ..Default::default() };
        train_encoder(&mut e, &g, &[img(1)], &cfg, &nets, |_, _| {}).unwrap();
        assert!(before.bit_eq(e.params()).unwrap());
        assert!(matches!(
            train_encoder(&mut e, &g, &[], &cfg, &nets, |_, _| {}),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn w_variant_keeps_one_head_through_training_and_save() {
        let g = gen();
        let mut e = Encoder::new(EncoderTarget::W, &g, 3).unwrap();
        let nets = LossNets::random(FeatureNetConfig { loss_resolution: 32, seed: 1 }).unwrap();
        let cfg = EncoderTrainConfig { iterations: 3, batch_size: 2, ..Default::default() };
        let report = train_encoder(&mut e, &g, &[img(1), img(2)], &cfg, &nets, |_, _| {}).unwrap();
        assert_eq!(report.losses.len(), 3);
        assert_eq!(e.head_count(), 1);
        let dir = tempfile::tempdir().unwrap();
        e.save(dir.path().join("e")).unwrap();
        let back = Encoder::load(dir.path().join("e")).unwrap();
        let head_blocks: std::collections::BTreeSet<_> = back
            .params()
            .names()
            .filter(|n| n.starts_with("enc.head"))
            .map(|n| n.split('.').nth(1).unwrap().to_string())
            .collect();
        assert_eq!(head_blocks.len(), 1);
        assert!(back.encode(&img(4)).unwrap().bit_eq(&e.encode(&img(4)).unwrap()));
    }
}
