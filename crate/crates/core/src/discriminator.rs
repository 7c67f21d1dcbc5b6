//! Residual convolutional critic producing one logit per image.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_manifest, verify_hash, write_checkpoint};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::layers::{EqualConv, EqualLinear};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
struct Block {
    conv0: EqualConv,
    conv1: EqualConv,
    skip: EqualConv,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: GeneratorConfig,
    params: ParamStore,
    from_rgb: EqualConv,
    blocks: Vec<Block>,
    final_conv: EqualConv,
    fc: EqualLinear,
    out: EqualLinear,
    seed: u64,
    track: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct DiscriminatorManifest {
    kind: String,
    config: GeneratorConfig,
    seed: u64,
    content_hash: String,
}

const KIND: &str = "discriminator";

impl Discriminator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let p = &mut params;
        let r = config.resolution;
        let from_rgb = EqualConv::init(p, &mut init, "d.from_rgb", 3, config.channels(r), 1, 1, true, true)?;
        let mut blocks = Vec::new();
        let mut res = r;
        while res > 4 {
            let cin = config.channels(res);
            let cout = config.channels(res / 2);
            blocks.push(Block {
                conv0: EqualConv::init(p, &mut init, &format!("d.b{res}.conv0"), cin, cin, 3, 1, true, true)?,
                conv1: EqualConv::init(p, &mut init, &format!("d.b{res}.conv1"), cin, cout, 3, 1, true, true)?,
                skip: EqualConv::init(p, &mut init, &format!("d.b{res}.skip"), cin, cout, 1, 1, false, false)?,
            });
            res /= 2;
        }
        let c4 = config.channels(4);
        let final_conv = EqualConv::init(p, &mut init, "d.final_conv", c4, c4, 3, 1, true, true)?;
        let fc = EqualLinear::init(p, &mut init, "d.fc", c4 * 16, c4, 0.0, 1.0, true)?;
        let out = EqualLinear::init(p, &mut init, "d.out", c4, 1, 0.0, 1.0, false)?;
        Ok(Self {
            config,
            params,
            from_rgb,
            blocks,
            final_conv,
            fc,
            out,
            seed,
            track: false,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn set_tracking(&mut self, track: bool) {
        self.track = track;
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            params: self.params.deep_copy()?,
            ..self.clone()
        })
    }

    /// Penultimate activations, `B×C4`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != 3 || h != self.config.resolution || w != self.config.resolution {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects B×3×{r}×{r}, got {:?}",
                x.dims(),
                r = self.config.resolution
            )));
        }
        let p = &self.params;
        let t = self.track;
        let mut x = self.from_rgb.forward(p, t, x)?;
        for block in &self.blocks {
            let main = block.conv1.forward(p, t, &block.conv0.forward(p, t, &x)?)?.avg_pool2d(2)?;
            let skip = block.skip.forward(p, t, &x.avg_pool2d(2)?)?;
            x = ((main + skip)? / std::f64::consts::SQRT_2)?;
        }
        let x = self.final_conv.forward(p, t, &x)?;
        let x = x.reshape((b, ()))?;
        self.fc.forward(p, t, &x)
    }

    /// Logits, shape `B`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.features(x)?;
        Ok(self.out.forward(&self.params, self.track, &f)?.squeeze(1)?)
    }

    pub fn content_hash(&self) -> Result<String> {
        self.params.content_hash()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let m = DiscriminatorManifest {
            kind: KIND.into(),
            config: self.config,
            seed: self.seed,
            content_hash: self.content_hash()?,
        };
        write_checkpoint(dir.as_ref(), &m, &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: DiscriminatorManifest = read_manifest(dir, KIND, &["config", "seed", "content_hash"])?;
        let mut d = Self::new(m.config, m.seed)?;
        d.params.load_safetensors(dir.join(crate::checkpoint::WEIGHTS))?;
        verify_hash(dir, &m.content_hash, &d.content_hash()?)?;
        Ok(d)
    }
}

/// Stochastic finite-difference estimate of `E‖∇ₓD(x)‖²`:
/// `((D(x + εv) − D(x)) / ε)²` averaged over the batch with `v ~ N(0, I)`.
/// Differentiable with respect to the critic's parameters.
pub fn r1_estimate(disc: &Discriminator, real: &Tensor, eps: f64, seed: u64) -> Result<Tensor> {
    let mut init = Init::new(seed);
    let v = init.normal(real.dims(), 1.0)?;
    let shifted = (real + (v * eps)?)?;
    let diff = ((disc.forward(&shifted)? - disc.forward(real)?)? / eps)?;
    Ok(diff.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 16,
            latent_dim: 32,
            channel_base: 64,
            channel_max: 8,
            mapping_layers: 2,
        }
    }

    #[test]
    fn one_logit_per_image() {
        let d = Discriminator::new(tiny(), 2).unwrap();
        let x = Init::new(1).normal((5, 3, 16, 16), 1.0).unwrap();
        assert_eq!(d.forward(&x).unwrap().dims(), &[5]);
        assert_eq!(d.features(&x).unwrap().dims(), &[5, tiny().channels(4)]);
    }

    #[test]
    fn features_do_not_depend_on_batch_company() {
        let d = Discriminator::new(tiny(), 2).unwrap();
        let x = Init::new(1).normal((3, 3, 16, 16), 1.0).unwrap();
        let all = d.features(&x).unwrap().to_vec2::<f32>().unwrap();
        let one = d.features(&x.narrow(0, 1, 1).unwrap()).unwrap().to_vec2::<f32>().unwrap();
        for (a, b) in all[1].iter().zip(&one[0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn r1_estimate_matches_linear_critic_gradient_norm() {
        // For a critic that is linear in its input near x, the estimate's
        // expectation is exactly the squared gradient norm. Average many
        // draws and compare with the finite-difference gradient norm.
        let d = Discriminator::new(tiny(), 4).unwrap();
        let x = Init::new(3).normal((1, 3, 16, 16), 0.5).unwrap();
        let mut est = 0.0;
        let draws = 400;
        for s in 0..draws {
            est += r1_estimate(&d, &x, 1e-2, s).unwrap().to_scalar::<f32>().unwrap() as f64;
        }
        est /= draws as f64;

        let base = d.forward(&x).unwrap().to_vec1::<f32>().unwrap()[0] as f64;
        let flat = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let mut norm_sq = 0.0;
        let h = 1e-2f32;
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += h;
            let xp = Tensor::from_vec(p, x.dims(), x.device()).unwrap();
            let g = (d.forward(&xp).unwrap().to_vec1::<f32>().unwrap()[0] as f64 - base) / h as f64;
            norm_sq += g * g;
        }
        let rel = (est - norm_sq).abs() / norm_sq;
        assert!(rel < 0.25, "estimate {est} vs {norm_sq}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Discriminator::new(tiny(), 6).unwrap();
        d.save(dir.path().join("d")).unwrap();
        let back = Discriminator::load(dir.path().join("d")).unwrap();
        assert!(d.params().bit_eq(back.params()).unwrap());
    }
}
