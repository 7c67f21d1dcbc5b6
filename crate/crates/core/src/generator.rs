//! Style-based generator: a `Z → W` mapping network, a synthesis network
//! conditioned per layer on a `W+` code, truncation toward the mean latent,
//! and checkpoint I/O.
//!
//! Layer indexing follows the usual skip-architecture layout: the 4×4 block
//! has one convolution (row 0) and a to-RGB (row 1); every further block has
//! two convolutions (rows `2j-1`, `2j`) and a to-RGB (row `2j+1`). A
//! resolution `2^n` model therefore consumes `2(n-1)` rows.

use std::path::Path;

use candle_core::{Device, IndexOp, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_manifest, verify_hash, write_checkpoint};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::{LatentCode, LatentSpace};
use crate::layers::{lrelu, normalize_rows, EqualLinear, ModulatedConv};
use crate::params::{Init, ParamStore};

/// Number of mapped samples averaged into the mean latent.
pub const W_MEAN_SAMPLES: usize = 10_000;
const NOISE_SALT: u64 = 0x6e6f_6973_65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub channel_base: usize,
    pub channel_max: usize,
    pub mapping_layers: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorConfig {
    /// 64×64, 512-d latents, 10 layers.
    pub fn desk() -> Self {
        Self {
            resolution: 64,
            latent_dim: 512,
            channel_base: 512,
            channel_max: 32,
            mapping_layers: 4,
        }
    }

    /// 1024×1024 with StyleGAN2 widths, 18 layers.
    pub fn paper() -> Self {
        Self {
            resolution: 1024,
            latent_dim: 512,
            channel_base: 32768,
            channel_max: 512,
            mapping_layers: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "resolution must be a power of two >= 16, got {}",
                self.resolution
            )));
        }
        if self.latent_dim == 0 || self.channel_base == 0 || self.channel_max == 0 {
            return Err(Error::Config("latent_dim and channel widths must be positive".into()));
        }
        if self.mapping_layers == 0 {
            return Err(Error::Config("mapping network needs at least one layer".into()));
        }
        Ok(())
    }

    pub fn log2_resolution(&self) -> usize {
        self.resolution.trailing_zeros() as usize
    }

    pub fn layer_count(&self) -> usize {
        2 * (self.log2_resolution() - 1)
    }

    pub fn channels(&self, res: usize) -> usize {
        (self.channel_base / res).clamp(1, self.channel_max)
    }

    /// Scales a layer index chosen for an 18-layer model to this model.
    pub fn scale_layer_index(&self, paper_index: usize) -> usize {
        let l = self.layer_count();
        ((paper_index * l) as f64 / 18.0).round().min(l as f64) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorRole {
    Pretrained,
    UnconstrainedFinetuned,
    ConstrainedFinetuned,
}

impl GeneratorRole {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorRole::Pretrained => "pretrained",
            GeneratorRole::UnconstrainedFinetuned => "unconstrained_finetuned",
            GeneratorRole::ConstrainedFinetuned => "constrained_finetuned",
        }
    }
}

#[derive(Debug, Clone)]
struct StyleConv {
    conv: ModulatedConv,
    name: String,
    layer: usize,
}

#[derive(Debug, Clone)]
struct ToRgb {
    conv: ModulatedConv,
    name: String,
    layer: usize,
}

#[derive(Debug, Clone)]
struct Architecture {
    mapping: Vec<EqualLinear>,
    convs: Vec<StyleConv>,
    to_rgbs: Vec<ToRgb>,
}

impl Architecture {
    fn build(config: &GeneratorConfig, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        let d = config.latent_dim;
        let mapping = (0..config.mapping_layers)
            .map(|i| EqualLinear::init(store, init, &format!("mapping.{i}"), d, d, 0.0, 0.01, true))
            .collect::<Result<Vec<_>>>()?;

        let c4 = config.channels(4);
        store.add_param("synthesis.const", init.normal((1, c4, 4, 4), 1.0)?)?;

        let mut convs = Vec::new();
        let mut to_rgbs = Vec::new();
        let style_conv = |store: &mut ParamStore,
                              init: &mut Init,
                              name: String,
                              cin: usize,
                              cout: usize,
                              res: usize,
                              up: bool,
                              layer: usize|
         -> Result<StyleConv> {
            let conv = ModulatedConv::init(store, init, &name, d, cin, cout, 3, true, up)?;
            store.add_param(format!("{name}.noise_strength"), init.constant(1, 0.0)?)?;
            store.add_param(format!("{name}.bias"), init.constant(cout, 0.0)?)?;
            store.add_buffer(format!("noise.{name}"), Tensor::zeros((1, 1, res, res), candle_core::DType::F32, &Device::Cpu)?)?;
            Ok(StyleConv { conv, name, layer })
        };
        let to_rgb = |store: &mut ParamStore, init: &mut Init, name: String, cin: usize, layer: usize| -> Result<ToRgb> {
            let conv = ModulatedConv::init(store, init, &name, d, cin, 3, 1, false, false)?;
            store.add_param(format!("{name}.bias"), init.constant(3, 0.0)?)?;
            Ok(ToRgb { conv, name, layer })
        };

        convs.push(style_conv(store, init, "synthesis.b4.conv".into(), c4, c4, 4, false, 0)?);
        to_rgbs.push(to_rgb(store, init, "synthesis.b4.torgb".into(), c4, 1)?);
        for j in 1..=(config.log2_resolution() - 2) {
            let res = 4usize << j;
            let cin = config.channels(res / 2);
            let cout = config.channels(res);
            convs.push(style_conv(store, init, format!("synthesis.b{res}.conv0"), cin, cout, res, true, 2 * j - 1)?);
            convs.push(style_conv(store, init, format!("synthesis.b{res}.conv1"), cout, cout, res, false, 2 * j)?);
            to_rgbs.push(to_rgb(store, init, format!("synthesis.b{res}.torgb"), cout, 2 * j + 1)?);
        }
        Ok(Self {
            mapping,
            convs,
            to_rgbs,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GeneratorManifest {
    kind: String,
    version: u32,
    role: GeneratorRole,
    config: GeneratorConfig,
    init_seed: u64,
    w_mean_seed: u64,
    w_mean_samples: usize,
    content_hash: String,
}

const GENERATOR_KIND: &str = "generator";

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    role: GeneratorRole,
    params: ParamStore,
    arch: Architecture,
    init_seed: u64,
    w_mean_seed: u64,
    w_mean_samples: usize,
    track: bool,
}

impl Generator {
    /// Fresh generator with seeded weights, frozen noise maps and a mean
    /// latent computed from [`W_MEAN_SAMPLES`] samples.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        Self::with_w_mean_samples(config, seed, W_MEAN_SAMPLES)
    }

    pub fn with_w_mean_samples(config: GeneratorConfig, seed: u64, w_mean_samples: usize) -> Result<Self> {
        config.validate()?;
        if w_mean_samples == 0 {
            return Err(Error::InvalidParameter("w_mean needs at least one sample".into()));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let arch = Architecture::build(&config, &mut params, &mut init)?;
        let mut noise_init = Init::new(seed ^ NOISE_SALT);
        for conv in &arch.convs {
            let name = format!("noise.{}", conv.name);
            let dims = params.get(&name, false)?.dims().to_vec();
            params.set_buffer(&name, noise_init.normal(dims, 1.0)?)?;
        }
        params.add_buffer("w_mean", Tensor::zeros((1, config.latent_dim), candle_core::DType::F32, &Device::Cpu)?)?;
        let mut gen = Self {
            config,
            role: GeneratorRole::Pretrained,
            params,
            arch,
            init_seed: seed,
            w_mean_seed: seed,
            w_mean_samples,
            track: false,
        };
        gen.refresh_w_mean()?;
        Ok(gen)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn role(&self) -> GeneratorRole {
        self.role
    }

    pub fn set_role(&mut self, role: GeneratorRole) {
        self.role = role;
    }

    pub fn layer_count(&self) -> usize {
        self.config.layer_count()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// When set, forward passes stay connected to the trainable variables.
    pub fn set_tracking(&mut self, track: bool) {
        self.track = track;
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn w_mean_seed(&self) -> u64 {
        self.w_mean_seed
    }

    pub fn w_mean_samples(&self) -> usize {
        self.w_mean_samples
    }

    /// Independent copy with fresh parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            params: self.params.deep_copy()?,
            ..self.clone()
        })
    }

    /// Mean latent, `1×d`.
    pub fn w_mean(&self) -> Result<Tensor> {
        self.params.get("w_mean", false)
    }

    pub fn w_mean_code(&self) -> Result<LatentCode> {
        LatentCode::new(LatentSpace::W, self.w_mean()?)
    }

    /// Monte-Carlo mean of mapped standard-normal samples.
    pub fn compute_w_mean(&self, seed: u64, samples: usize) -> Result<Tensor> {
        let d = self.config.latent_dim;
        let mut init = Init::new(seed);
        let mut sum = vec![0f64; d];
        let mut done = 0;
        while done < samples {
            let n = (samples - done).min(1000);
            let z = init.normal((n, d), 1.0)?;
            let w = self.map_inner(&z, false)?;
            for row in w.to_vec2::<f32>()? {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v as f64;
                }
            }
            done += n;
        }
        let mean: Vec<f32> = sum.iter().map(|s| (s / samples as f64) as f32).collect();
        Ok(Tensor::from_vec(mean, (1, d), &Device::Cpu)?)
    }

    /// Recomputes the cached mean latent from the current mapping weights.
    pub fn refresh_w_mean(&mut self) -> Result<()> {
        let mean = self.compute_w_mean(self.w_mean_seed, self.w_mean_samples)?;
        self.params.set_buffer("w_mean", mean)
    }

    /// Maps `N×d` normal samples to `W`.
    pub fn map_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.map_inner(z, self.track)
    }

    fn map_inner(&self, z: &Tensor, track: bool) -> Result<Tensor> {
        let d = self.config.latent_dim;
        if z.rank() != 2 || z.dims()[1] != d {
            return Err(Error::InvalidCode(format!(
                "mapping expects N×{d} input, got {:?}",
                z.dims()
            )));
        }
        let mut x = normalize_rows(z)?;
        for layer in &self.arch.mapping {
            x = layer.forward(&self.params, track, &x)?;
        }
        Ok(x)
    }

    /// Maps a `B×L×d` batch of `Z+` codes row by row.
    pub fn map_plus_batch(&self, z: &Tensor) -> Result<Tensor> {
        let (b, l, d) = z.dims3()?;
        Ok(self.map_batch(&z.reshape((b * l, d))?)?.reshape((b, l, d))?)
    }

    /// Truncation toward the mean latent for any `…×d` tensor.
    pub fn truncate_tensor(&self, w: &Tensor, psi: f64) -> Result<Tensor> {
        check_psi(psi)?;
        if psi == 1.0 {
            return Ok(w.clone());
        }
        let mean = self.w_mean()?.flatten_all()?;
        if psi == 0.0 {
            return Ok(mean.broadcast_as(w.shape())?.contiguous()?);
        }
        Ok(w.broadcast_sub(&mean)?.affine(psi, 0.0)?.broadcast_add(&mean)?)
    }

    /// Renders a `B×L×d` batch of `W+` codes to `B×3×R×R` in `[-1, 1]`.
    pub fn synthesize_batch(&self, ws: &Tensor) -> Result<Tensor> {
        let (b, l, d) = ws.dims3()?;
        if l != self.layer_count() || d != self.config.latent_dim {
            return Err(Error::InvalidCode(format!(
                "synthesis expects B×{}×{} codes, got {:?}",
                self.layer_count(),
                self.config.latent_dim,
                ws.dims()
            )));
        }
        let p = &self.params;
        let t = self.track;
        let row = |i: usize| -> Result<Tensor> { Ok(ws.i((.., i))?.contiguous()?) };

        let constant = p.get("synthesis.const", t)?;
        let (_, c, h, w) = constant.dims4()?;
        let mut x = constant.broadcast_as((b, c, h, w))?.contiguous()?;
        let mut rgb: Option<Tensor> = None;
        let mut convs = self.arch.convs.iter();
        for to_rgb in &self.arch.to_rgbs {
            let n = if to_rgb.layer == 1 { 1 } else { 2 };
            for conv in convs.by_ref().take(n) {
                let y = conv.conv.forward(p, t, &x, &row(conv.layer)?)?;
                let noise = p.get(&format!("noise.{}", conv.name), t)?;
                let strength = p.get(&format!("{}.noise_strength", conv.name), t)?;
                let bias = p.get(&format!("{}.bias", conv.name), t)?;
                let y = y.broadcast_add(&noise.broadcast_mul(&strength.reshape((1, 1, 1, 1))?)?)?;
                let y = y.broadcast_add(&bias.reshape((1, (), 1, 1))?)?;
                x = lrelu(&y)?;
            }
            let bias = p.get(&format!("{}.bias", to_rgb.name), t)?;
            let y = to_rgb
                .conv
                .forward(p, t, &x, &row(to_rgb.layer)?)?
                .broadcast_add(&bias.reshape((1, 3, 1, 1))?)?;
            rgb = Some(match rgb {
                None => y,
                Some(prev) => {
                    let (_, _, h, w) = prev.dims4()?;
                    (prev.upsample_nearest2d(h * 2, w * 2)? + y)?
                }
            });
        }
        let rgb = rgb.expect("at least one to-RGB layer");
        Ok(rgb.tanh()?)
    }

    /// `B×d` noise → images, via mapping, optional truncation and broadcast.
    pub fn generate_from_z(&self, z: &Tensor, psi: f64) -> Result<Tensor> {
        let w = self.truncate_tensor(&self.map_batch(z)?, psi)?;
        let (b, d) = w.dims2()?;
        let ws = w.unsqueeze(1)?.broadcast_as((b, self.layer_count(), d))?.contiguous()?;
        self.synthesize_batch(&ws)
    }

    /// Effective `C×d` style-affine weights of every modulated layer, in
    /// layer order (convolutions before to-RGB within a row tie).
    pub fn style_affine_weights(&self) -> Result<Vec<Tensor>> {
        let mut layers: Vec<(usize, &ModulatedConv)> = self
            .arch
            .convs
            .iter()
            .map(|c| (c.layer, &c.conv))
            .chain(self.arch.to_rgbs.iter().map(|r| (r.layer, &r.conv)))
            .collect();
        layers.sort_by_key(|(l, _)| *l);
        layers
            .into_iter()
            .map(|(_, c)| c.affine.effective_weight(&self.params, false))
            .collect()
    }

    /// Hash of weights, role and config; identifies a checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        let params = self.params.content_hash()?;
        let meta = serde_json::json!({
            "role": self.role,
            "config": self.config,
            "params": params,
        });
        crate::checkpoint::json_hash(&meta)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let manifest = GeneratorManifest {
            kind: GENERATOR_KIND.into(),
            version: 1,
            role: self.role,
            config: self.config,
            init_seed: self.init_seed,
            w_mean_seed: self.w_mean_seed,
            w_mean_samples: self.w_mean_samples,
            content_hash: self.content_hash()?,
        };
        write_checkpoint(dir.as_ref(), &manifest, &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: GeneratorManifest = read_manifest(
            dir,
            GENERATOR_KIND,
            &["role", "config", "init_seed", "w_mean_seed", "w_mean_samples", "content_hash"],
        )?;
        m.config
            .validate()
            .map_err(|e| Error::load(dir.join(crate::checkpoint::MANIFEST), "config", e))?;
        let mut params = ParamStore::new();
        let arch = Architecture::build(&m.config, &mut params, &mut Init::new(0))?;
        params.add_buffer("w_mean", Tensor::zeros((1, m.config.latent_dim), candle_core::DType::F32, &Device::Cpu)?)?;
        params.load_safetensors(dir.join(crate::checkpoint::WEIGHTS))?;
        let gen = Self {
            config: m.config,
            role: m.role,
            params,
            arch,
            init_seed: m.init_seed,
            w_mean_seed: m.w_mean_seed,
            w_mean_samples: m.w_mean_samples,
            track: false,
        };
        verify_hash(dir, &m.content_hash, &gen.content_hash()?)?;
        Ok(gen)
    }

    /// Reads only the role tag of a checkpoint.
    pub fn peek_role(dir: impl AsRef<Path>) -> Result<GeneratorRole> {
        let m: GeneratorManifest = read_manifest(dir.as_ref(), GENERATOR_KIND, &["role"])?;
        Ok(m.role)
    }
}

fn check_psi(psi: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&psi) {
        return Err(Error::InvalidParameter(format!("truncation psi {psi} outside [0, 1]")));
    }
    Ok(())
}

fn check_dim(code: &LatentCode, gen: &Generator) -> Result<()> {
    if code.dim() != gen.config.latent_dim {
        return Err(Error::InvalidCode(format!(
            "code dimension {} does not match latent_dim {}",
            code.dim(),
            gen.config.latent_dim
        )));
    }
    if code.space().is_per_layer() && code.rows() != gen.layer_count() {
        return Err(Error::InvalidCode(format!(
            "{} code has {} rows, generator has {} layers",
            code.space(),
            code.rows(),
            gen.layer_count()
        )));
    }
    Ok(())
}

/// `Z → W` or `Z+ → W+`, row by row.
pub fn map_latent(code: &LatentCode, gen: &Generator) -> Result<LatentCode> {
    let target = match code.space() {
        LatentSpace::Z => LatentSpace::W,
        LatentSpace::ZPlus => LatentSpace::WPlus,
        other => {
            return Err(Error::InvalidCode(format!("map_latent expects Z or ZPlus, got {other}")))
        }
    };
    check_dim(code, gen)?;
    let w = gen.map_inner(code.values(), false)?;
    LatentCode::new(target, w)
}

/// Row-wise `w_mean + psi·(w − w_mean)`.
pub fn truncate(code: &LatentCode, psi: f64, gen: &Generator) -> Result<LatentCode> {
    if !matches!(code.space(), LatentSpace::W | LatentSpace::WPlus) {
        return Err(Error::InvalidCode(format!("truncate expects W or WPlus, got {}", code.space())));
    }
    check_dim(code, gen)?;
    LatentCode::new(code.space(), gen.truncate_tensor(code.values(), psi)?)
}

pub fn synthesize(code: &LatentCode, gen: &Generator) -> Result<Image> {
    if code.space() != LatentSpace::WPlus {
        return Err(Error::InvalidCode(format!("synthesize expects WPlus, got {}", code.space())));
    }
    check_dim(code, gen)?;
    let batch = gen.synthesize_batch(&code.values().unsqueeze(0)?)?;
    Image::new(batch.get(0)?.detach())
}

/// Standard-normal codes; `ZPlus` codes get one independent row per layer.
pub fn sample_z(count: usize, seed: u64, space: LatentSpace, config: &GeneratorConfig) -> Result<Vec<LatentCode>> {
    let rows = match space {
        LatentSpace::Z => 1,
        LatentSpace::ZPlus => config.layer_count(),
        other => return Err(Error::InvalidParameter(format!("cannot sample {other} codes"))),
    };
    if count == 0 {
        return Err(Error::InvalidParameter("sample count must be at least 1".into()));
    }
    let d = config.latent_dim;
    let mut init = Init::new(seed);
    (0..count)
        .map(|_| LatentCode::from_vec(space, rows, d, init.normal_vec(rows * d, 1.0)))
        .collect()
}

/// Images of `count` seeded `Z` samples at truncation `psi`, in chunks of 8.
pub fn generate_samples(gen: &Generator, count: usize, seed: u64, psi: f64) -> Result<Vec<Image>> {
    let zs = sample_z(count, seed, LatentSpace::Z, gen.config())?;
    let mut out = Vec::with_capacity(count);
    for chunk in zs.chunks(8) {
        let z = Tensor::cat(&chunk.iter().map(|c| c.values().clone()).collect::<Vec<_>>(), 0)?;
        let batch = gen.generate_from_z(&z, psi)?.detach();
        for i in 0..chunk.len() {
            out.push(Image::new(batch.get(i)?)?);
        }
    }
    Ok(out)
}
