//! Generator fine-tuning with adversarial, semantic-preservation and
//! pseudo-paired losses; with both constraint weights at zero it produces the
//! unconstrained `G*`. Pretraining the desk-scale real-face generator reuses
//! the same adversarial loop.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::{r1_estimate, Discriminator};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, GeneratorRole};
use crate::image::{stack, Image};
use crate::losses::{adversarial_from_logits, softplus, total_loss, LossNets, LAMBDA_ID, LAMBDA_PAIRED, LAMBDA_SEMANTIC};
use crate::optim::{finite_scalar, Adam};
use crate::params::Init;
use crate::pseudo_pairs::{PairLevel, PairedDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lambda_id: f64,
    pub lambda_semantic: f64,
    pub lambda_paired: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub pair_level: PairLevel,
    pub truncation_psi_eval: f64,
    pub seed: u64,
    pub r1_weight: f64,
    pub r1_interval: usize,
    pub r1_eps: f64,
    pub checkpoint_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lambda_id: LAMBDA_ID,
            lambda_semantic: LAMBDA_SEMANTIC,
            lambda_paired: LAMBDA_PAIRED,
            lr: 0.02,
            batch_size: 4,
            iterations: 1000,
            pair_level: PairLevel::Two,
            truncation_psi_eval: 0.7,
            seed: 0,
            r1_weight: 10.0,
            r1_interval: 16,
            r1_eps: 1e-2,
            checkpoint_every: 250,
        }
    }
}

impl FinetuneConfig {
    /// Cartoon preset: 1000 iterations, ψ = 0.7.
    pub fn cartoon() -> Self {
        Self::default()
    }

    /// Anime preset: 3000 iterations, ψ = 0.6.
    pub fn anime() -> Self {
        Self {
            iterations: 3000,
            truncation_psi_eval: 0.6,
            ..Self::default()
        }
    }

    /// Both constraint weights zeroed; the result is `G*`.
    pub fn unconstrained(self) -> Self {
        Self {
            lambda_semantic: 0.0,
            lambda_paired: 0.0,
            ..self
        }
    }

    /// Plain GAN training of the real-face generator.
    pub fn pretrain() -> Self {
        Self {
            lambda_semantic: 0.0,
            lambda_paired: 0.0,
            lr: 0.002,
            iterations: 2000,
            checkpoint_every: 500,
            ..Self::default()
        }
    }

    pub fn is_constrained(&self) -> bool {
        self.lambda_semantic > 0.0 || self.lambda_paired > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_id", self.lambda_id),
            ("lambda_semantic", self.lambda_semantic),
            ("lambda_paired", self.lambda_paired),
            ("lr", self.lr),
            ("r1_weight", self.r1_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.r1_interval == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("r1_interval and checkpoint_every must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.truncation_psi_eval) {
            return Err(Error::Config(format!("truncation_psi_eval {} outside [0, 1]", self.truncation_psi_eval)));
        }
        if !(self.r1_eps > 0.0) {
            return Err(Error::Config("r1_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub adv: f32,
    pub semantic: f32,
    pub paired: f32,
    pub total: f32,
    pub d_loss: f32,
    pub r1: Option<f32>,
}

/// Generator under training, its frozen reference and the critic, with
/// their optimizer state.
pub struct TrainState {
    g: Generator,
    frozen: Option<Generator>,
    disc: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    cfg: FinetuneConfig,
    step: usize,
}

impl TrainState {
    /// `G′` and the critic start as copies of `g_init` / `disc_init`.
    pub fn new(g_init: &Generator, disc_init: &Discriminator, frozen: Option<&Generator>, cfg: &FinetuneConfig) -> Result<Self> {
        cfg.validate()?;
        if g_init.config() != disc_init.config() {
            return Err(Error::Config("generator and discriminator configs differ".into()));
        }
        let mut g = g_init.deep_clone()?;
        g.set_tracking(true);
        let disc = disc_init.deep_clone()?;
        let frozen = match frozen {
            Some(f) => {
                if f.config() != g.config() {
                    return Err(Error::Config("frozen generator config differs".into()));
                }
                let mut f = f.clone();
                f.set_tracking(false);
                Some(f)
            }
            None => None,
        };
        let opt_g = Adam::new(g.params().trainable(), cfg.lr)?;
        let opt_d = Adam::new(disc.params().trainable(), cfg.lr)?;
        Ok(Self {
            g,
            frozen,
            disc,
            opt_g,
            opt_d,
            cfg: *cfg,
            step: 0,
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.g
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Frozen copies of the current generator (with a refreshed mean latent)
    /// and critic.
    pub fn snapshot(&self, role: GeneratorRole) -> Result<(Generator, Discriminator)> {
        let mut g = self.g.deep_clone()?;
        g.set_tracking(false);
        g.set_role(role);
        g.refresh_w_mean()?;
        let mut d = self.disc.deep_clone()?;
        d.set_tracking(false);
        Ok((g, d))
    }
}

fn step_seed(seed: u64, step: usize, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((step as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
        ^ salt
}

fn abort(step: usize, parts: &[(&str, f32)]) -> Error {
    let detail = parts.iter().map(|(n, v)| format!("{n}={v}")).collect::<Vec<_>>().join(", ");
    Error::NumericAbort {
        at: format!("fine-tuning step {step}"),
        detail,
    }
}

/// Generator objective for one batch of noise: the differentiable total and
/// the scalar value of each term.
pub struct GeneratorLoss {
    pub total: Tensor,
    pub adv: f32,
    pub semantic: f32,
    pub paired: f32,
}

/// Terms whose weight is zero are still evaluated (detached) for logging.
pub fn generator_loss(
    g: &Generator,
    frozen: Option<&Generator>,
    disc: &Discriminator,
    z: &Tensor,
    pair_batch: Option<(&Tensor, &Tensor)>,
    nets: &LossNets,
    cfg: &FinetuneConfig,
) -> Result<GeneratorLoss> {
    let fake = g.generate_from_z(z, 1.0)?;
    let adv = softplus(&disc.forward(&fake)?.neg()?)?.mean_all()?;
    let adv_v = adv.to_scalar::<f32>()?;
    let mut total = adv;

    let mut sem_v = 0.0;
    if let Some(frozen) = frozen {
        let base = frozen.generate_from_z(z, 1.0)?.detach();
        if cfg.lambda_semantic > 0.0 {
            let sem = nets.semantic_mean(&fake, &base, cfg.lambda_id)?;
            sem_v = sem.to_scalar::<f32>()?;
            total = (total + (sem * cfg.lambda_semantic)?)?;
        } else {
            sem_v = nets.semantic_mean(&fake.detach(), &base, cfg.lambda_id)?.to_scalar::<f32>()?;
        }
    }

    let mut paired_v = 0.0;
    if let Some((codes, targets)) = pair_batch {
        if cfg.lambda_paired > 0.0 {
            let gen = g.synthesize_batch(codes)?;
            let paired = nets.perceptual.distance_mean(&gen, targets)?;
            paired_v = paired.to_scalar::<f32>()?;
            total = (total + (paired * cfg.lambda_paired)?)?;
        } else {
            let gen = g.synthesize_batch(codes)?.detach();
            paired_v = nets.perceptual.distance_mean(&gen, targets)?.to_scalar::<f32>()?;
        }
    }
    Ok(GeneratorLoss {
        total,
        adv: adv_v,
        semantic: sem_v,
        paired: paired_v,
    })
}

/// One critic update followed by one generator update.
///
/// `pair_batch` is `(B×L×d codes, B×3×R×R style images)` and may be absent
/// only when `λ_paired = 0`. The semantic term feeds the same noise through
/// the frozen and the trained generator.
pub fn finetune_step(state: &mut TrainState, style_batch: &Tensor, pair_batch: Option<(&Tensor, &Tensor)>, nets: &LossNets) -> Result<StepReport> {
    let cfg = state.cfg;
    let step = state.step;
    let b = style_batch.dims4()?.0;
    if b == 0 {
        return Err(Error::EmptyDataset("style batch is empty".into()));
    }
    if pair_batch.is_none() && cfg.lambda_paired > 0.0 {
        return Err(Error::Config("lambda_paired > 0 needs a pair batch".into()));
    }
    let d = state.g.config().latent_dim;

    // Critic.
    state.disc.set_tracking(true);
    let z_d = Init::new(step_seed(cfg.seed, step, 0xd)).normal((b, d), 1.0)?;
    let fake_d = state.g.generate_from_z(&z_d, 1.0)?.detach();
    let adv_d = adversarial_from_logits(&state.disc.forward(style_batch)?, &state.disc.forward(&fake_d)?)?;
    let d_value = finite_scalar(&adv_d.d_loss, || format!("critic step {step}"))?;
    let mut d_total = adv_d.d_loss;
    let mut r1 = None;
    if step % cfg.r1_interval == 0 && cfg.r1_weight > 0.0 {
        let pen = r1_estimate(&state.disc, style_batch, cfg.r1_eps, step_seed(cfg.seed, step, 0x41))?;
        r1 = Some(finite_scalar(&pen, || format!("R1 at step {step}"))?);
        // Lazy regularization: scaled by the interval it is applied at.
        d_total = (d_total + (pen * (cfg.r1_weight / 2.0 * cfg.r1_interval as f64))?)?;
    }
    state.opt_d.backward_step(&d_total)?;
    state.disc.set_tracking(false);

    // Generator.
    let z = Init::new(step_seed(cfg.seed, step, 0x9)).normal((b, d), 1.0)?;
    let GeneratorLoss {
        total,
        adv: adv_v,
        semantic: sem_v,
        paired: paired_v,
    } = generator_loss(&state.g, state.frozen.as_ref(), &state.disc, &z, pair_batch, nets, &cfg)?;

    let total_v = total_loss(adv_v, sem_v, paired_v, cfg.lambda_semantic as f32, cfg.lambda_paired as f32);
    let parts = [("adv", adv_v), ("semantic", sem_v), ("paired", paired_v), ("total", total_v)];
    if parts.iter().any(|(_, v)| !v.is_finite()) {
        return Err(abort(step, &parts));
    }
    state.opt_g.backward_step(&total)?;
    state.step += 1;
    Ok(StepReport {
        step,
        adv: adv_v,
        semantic: sem_v,
        paired: paired_v,
        total: total_v,
        d_loss: d_value,
        r1,
    })
}

/// Run directory `runs/<name>/{config.json, log.jsonl, ckpt_<step>/}`, held
/// under an exclusive lock file while open.
pub struct RunDir {
    root: PathBuf,
    log: File,
}

const LOCK: &str = ".lock";

impl RunDir {
    pub fn create(root: impl AsRef<Path>, config: &impl Serialize) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root)?;
        match std::fs::OpenOptions::new().write(true).create_new(true).open(root.join(LOCK)) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Config(format!("run directory {} is locked by another process", root.display())));
            }
            Err(e) => return Err(e.into()),
        }
        let setup = (|| -> Result<File> {
            std::fs::write(root.join("config.json"), serde_json::to_vec_pretty(config)?)?;
            Ok(File::create(root.join("log.jsonl"))?)
        })();
        match setup {
            Ok(log) => Ok(Self { root, log }),
            Err(e) => {
                let _ = std::fs::remove_file(root.join(LOCK));
                Err(e)
            }
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log(&mut self, report: &StepReport) -> Result<()> {
        serde_json::to_writer(&mut self.log, report)?;
        self.log.write_all(b"\n")?;
        Ok(())
    }

    pub fn checkpoint(&self, step: usize, g: &Generator, d: &Discriminator) -> Result<PathBuf> {
        let dir = self.root.join(format!("ckpt_{step}"));
        g.save(dir.join("generator"))?;
        d.save(dir.join("discriminator"))?;
        Ok(dir)
    }

    /// Highest-numbered `ckpt_<step>` directory of a run.
    pub fn latest_checkpoint(root: impl AsRef<Path>) -> Result<PathBuf> {
        let root = root.as_ref();
        let best = std::fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                name.strip_prefix("ckpt_")?.parse::<usize>().ok().map(|s| (s, e.path()))
            })
            .max_by_key(|(s, _)| *s);
        best.map(|(_, p)| p)
            .ok_or_else(|| Error::Config(format!("no checkpoints in {}", root.display())))
    }

    pub fn read_log(root: impl AsRef<Path>) -> Result<Vec<StepReport>> {
        let text = std::fs::read_to_string(root.as_ref().join("log.jsonl"))?;
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.root.join(LOCK));
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub reports: Vec<StepReport>,
}

/// Trains `G′` from the pretrained generator (and `disc_init`, or a fresh
/// critic) on `style_images`, with pairs drawn uniformly with replacement.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    g_pretrained: &Generator,
    disc_init: Option<&Discriminator>,
    style_images: &[Image],
    pairs: Option<&PairedDataset>,
    cfg: &FinetuneConfig,
    nets: &LossNets,
    mut run: Option<&mut RunDir>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if style_images.is_empty() {
        return Err(Error::EmptyDataset("style dataset is empty".into()));
    }
    if cfg.lambda_paired > 0.0 && pairs.is_none() {
        return Err(Error::Config("lambda_paired > 0 requires a pair dataset".into()));
    }
    let role = if cfg.is_constrained() {
        GeneratorRole::ConstrainedFinetuned
    } else {
        GeneratorRole::UnconstrainedFinetuned
    };
    let fresh;
    let disc_init = match disc_init {
        Some(d) => d,
        None => {
            fresh = Discriminator::new(*g_pretrained.config(), cfg.seed ^ 0xd15c)?;
            &fresh
        }
    };
    let mut state = TrainState::new(g_pretrained, disc_init, Some(g_pretrained), cfg)?;
    let pair_data = match pairs {
        Some(p) if !p.is_empty() => Some((p.codes(cfg.pair_level)?, stack(&p.style_images())?)),
        Some(_) => return Err(Error::EmptyDataset("pair dataset is empty".into())),
        None => None,
    };
    let reports = train_loop(&mut state, style_images, pair_data.as_ref(), nets, role, &mut run, &mut on_step)?;
    let (generator, discriminator) = state.snapshot(role)?;
    Ok(FinetuneOutcome {
        generator,
        discriminator,
        reports,
    })
}

/// GAN training of a fresh desk-scale generator on real-face images.
pub fn pretrain(
    config: GeneratorConfig,
    real_images: &[Image],
    cfg: &FinetuneConfig,
    nets: &LossNets,
    mut run: Option<&mut RunDir>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<FinetuneOutcome> {
    if cfg.is_constrained() {
        return Err(Error::Config("pretraining takes no constraint weights".into()));
    }
    if real_images.is_empty() {
        return Err(Error::EmptyDataset("real-face dataset is empty".into()));
    }
    let g = Generator::new(config, cfg.seed)?;
    let d = Discriminator::new(config, cfg.seed ^ 0xd15c)?;
    let mut state = TrainState::new(&g, &d, None, cfg)?;
    let reports = train_loop(&mut state, real_images, None, nets, GeneratorRole::Pretrained, &mut run, &mut on_step)?;
    let (generator, discriminator) = state.snapshot(GeneratorRole::Pretrained)?;
    Ok(FinetuneOutcome {
        generator,
        discriminator,
        reports,
    })
}

fn train_loop(
    state: &mut TrainState,
    images: &[Image],
    pairs: Option<&(Tensor, Tensor)>,
    nets: &LossNets,
    role: GeneratorRole,
    run: &mut Option<&mut RunDir>,
    on_step: &mut impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    let cfg = state.cfg;
    let all = stack(images)?;
    let mut sampler = Init::new(cfg.seed ^ 0x5a3b1e_u64);
    let mut reports = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let pick: Vec<u32> = (0..cfg.batch_size)
            .map(|_| sampler.rng().random_range(0..images.len()) as u32)
            .collect();
        let idx = Tensor::new(pick.as_slice(), all.device())?;
        let style_batch = all.index_select(&idx, 0)?;
        let pair_batch = match pairs {
            Some((codes, targets)) => {
                let n = codes.dims()[0];
                let pick: Vec<u32> = (0..cfg.batch_size)
                    .map(|_| sampler.rng().random_range(0..n) as u32)
                    .collect();
                let idx = Tensor::new(pick.as_slice(), all.device())?;
                Some((codes.index_select(&idx, 0)?, targets.index_select(&idx, 0)?))
            }
            None => None,
        };
        let report = finetune_step(state, &style_batch, pair_batch.as_ref().map(|(c, t)| (c, t)), nets)?;
        if let Some(run) = run.as_deref_mut() {
            run.log(&report)?;
            if (it + 1) % cfg.checkpoint_every == 0 || it + 1 == cfg.iterations {
                let (g, d) = state.snapshot(role)?;
                run.checkpoint(it + 1, &g, &d)?;
            }
        }
        on_step(&report);
        reports.push(report);
    }
    Ok(reports)
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

    fn images(n: usize) -> Vec<Image> {
        (0..n)
            .map(|i| Image::new(Init::new(i as u64).normal((3, 16, 16), 0.4).unwrap().clamp(-1f32, 1f32).unwrap()).unwrap())
            .collect()
    }

    fn nets() -> LossNets {
        LossNets::random(FeatureNetConfig { loss_resolution: 32, seed: 1 }).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(FinetuneConfig::default().validate().is_ok());
        assert!(FinetuneConfig { iterations: 0, ..Default::default() }.validate().is_err());
        assert!(FinetuneConfig { lambda_paired: -1.0, ..Default::default() }.validate().is_err());
        assert_eq!(FinetuneConfig::anime().iterations, 3000);
    }

    #[test]
    fn missing_pairs_is_a_config_error() {
        let g = Generator::with_w_mean_samples(tiny(), 1, 100).unwrap();
        let cfg = FinetuneConfig { iterations: 1, ..Default::default() };
        let err = finetune(&g, None, &images(2), None, &cfg, &nets(), None, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn unconstrained_run_tags_role_and_logs_every_step() {
        let g = Generator::with_w_mean_samples(tiny(), 1, 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = FinetuneConfig { iterations: 3, batch_size: 2, checkpoint_every: 2, ..Default::default() }.unconstrained();
        let mut run = RunDir::create(dir.path().join("run"), &cfg).unwrap();
        assert!(RunDir::create(dir.path().join("run"), &cfg).is_err(), "second writer must be refused");
        let out = finetune(&g, None, &images(3), None, &cfg, &nets(), Some(&mut run), |_| {}).unwrap();
        drop(run);
        assert_eq!(out.generator.role(), GeneratorRole::UnconstrainedFinetuned);
        for r in &out.reports {
            assert_eq!(r.total, r.adv);
        }
        let log = RunDir::read_log(dir.path().join("run")).unwrap();
        assert_eq!(log, out.reports);
        let latest = RunDir::latest_checkpoint(dir.path().join("run")).unwrap();
        assert!(latest.ends_with("ckpt_3"));
        assert!(dir.path().join("run/ckpt_2/generator/manifest.json").exists());
        let back = Generator::load(latest.join("generator")).unwrap();
        assert_eq!(back.content_hash().unwrap(), out.generator.content_hash().unwrap());
        assert!(!dir.path().join("run/.lock").exists());
    }
}
