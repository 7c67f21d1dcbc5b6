use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use portraitgan::discriminator::Discriminator;
use portraitgan::encoder::{train_encoder, Encoder, EncoderTarget};
use portraitgan::faces::{write_dataset, FaceStyle};
use portraitgan::finetune::{finetune, pretrain, FinetuneOutcome, RunDir, StepReport};
use portraitgan::generator::{generate_samples, synthesize};
use portraitgan::image::{center_square, list_images, load_dir};
use portraitgan::inversion::{embed_reference, invert, sefa_basis, InvertConfig, LatentDecoder, ReferenceCache};
use portraitgan::losses::LossNets;
use portraitgan::metrics::{
    extract_features, fid, identity_distance, perceptual_distance, semantic_distance, FeatureSet, MetricRecord,
};
use portraitgan::pseudo_pairs::{build_pair_dataset, PairLevel, PairModels, PairedDataset};
use portraitgan::stylize::{
    content_code, stylize_general, stylize_multimodal, stylize_reference, MixSpec, StylePolicy,
};
use portraitgan::{Error, Generator, Image, LatentSpace, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::Config;
use crate::workspace::Workspace;
use crate::{Command, Global, RenderArgs, StudyKind};

pub(crate) struct Ctx {
    pub cfg: Config,
    pub ws: Workspace,
    pub g: Global,
}

pub(crate) fn dispatch(ctx: &Ctx, command: Command) -> Result<()> {
    check_style_name(&ctx.g.style)?;
    match command {
        Command::MakeData => ctx.make_data(),
        Command::Pretrain => ctx.pretrain(),
        Command::TrainEncoder { target } => ctx.train_encoder(target),
        Command::FinetuneUnconstrained => ctx.finetune_unconstrained(),
        Command::MakePairs => ctx.make_pairs(),
        Command::Finetune {
            lambda_semantic,
            lambda_paired,
            name,
        } => ctx.finetune(lambda_semantic, lambda_paired, &name),
        Command::Stylize(args) => ctx.stylize(&args),
        Command::Mix { render, reference } => ctx.mix(&render, reference.as_deref()),
        Command::InvertRef { input, model } => ctx.invert_ref(&input, &model),
        Command::Evaluate => ctx.evaluate(),
        Command::Study { kind, model } => match kind {
            StudyKind::ContentSpace => ctx.study_content_space(&model),
            StudyKind::RefSpace => ctx.study_ref_space(&model),
            StudyKind::PairLevel => ctx.study_pair_level(),
            StudyKind::Sweep => ctx.study_sweep(),
        },
        Command::Serve {
            host,
            port,
            static_dir,
            workers,
        } => ctx.serve(&host, port, static_dir, workers),
    }
}

fn check_style_name(style: &str) -> Result<()> {
    let ok = !style.is_empty()
        && style.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        && !matches!(style, "pretrained" | "encoders");
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid style name `{style}`")))
    }
}

/// Resolved config plus the subcommand that consumed it, as stored with runs.
#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    style: &'a str,
    config: &'a Config,
}

fn step_logger(label: &str, total: usize) -> impl FnMut(&StepReport) + '_ {
    let every = (total / 20).max(1);
    move |r: &StepReport| {
        if r.step % every == 0 || r.step + 1 >= total {
            info!(
                "{label} step {}/{total}: total {:.4} adv {:.4} sem {:.4} pair {:.4} d {:.4}",
                r.step, r.total, r.adv, r.semantic, r.paired, r.d_loss
            );
        }
    }
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    last: Option<StepReport>,
    generator_hash: String,
    discriminator_hash: String,
}

impl TrainSummary {
    fn of(out: &FinetuneOutcome) -> Result<Self> {
        Ok(Self {
            steps: out.reports.len(),
            last: out.reports.last().copied(),
            generator_hash: out.generator.content_hash()?,
            discriminator_hash: out.discriminator.content_hash()?,
        })
    }
}

/// Scores shared by `evaluate` and the studies.
#[derive(Debug, Clone, Serialize)]
struct Scores {
    fid: f64,
    semantic_distance: f64,
    perceptual: Option<f64>,
    identity: Option<f64>,
}

/// Fixed inputs for scoring fine-tuned generators of one style.
struct EvalEnv {
    g: Generator,
    disc: Discriminator,
    nets: LossNets,
    style_features: FeatureSet,
    portraits: Vec<Image>,
    e_w: Option<Encoder>,
}

impl Ctx {
    fn style(&self) -> &str {
        &self.g.style
    }

    fn resolution(&self) -> usize {
        self.cfg.generator.resolution
    }

    fn nets(&self) -> Result<LossNets> {
        LossNets::from_source(&self.cfg.feature_source, self.cfg.feature_nets)
    }

    fn images(&self, dir: &Path) -> Result<Vec<Image>> {
        if !dir.is_dir() {
            return Err(Error::EmptyDataset(format!("{} does not exist; run make-data first", dir.display())));
        }
        let images: Vec<Image> = load_dir(dir, self.resolution())?.images.into_iter().map(|(_, i)| i).collect();
        if images.is_empty() {
            return Err(Error::EmptyDataset(format!("no usable images in {}", dir.display())));
        }
        Ok(images)
    }

    fn style_images(&self) -> Result<Vec<Image>> {
        self.images(&self.ws.style_dir(self.style()))
    }

    fn pretrained(&self) -> Result<Generator> {
        Generator::load(self.ws.pretrained_generator())
    }

    fn encoder(&self, target: EncoderTarget) -> Result<Encoder> {
        Encoder::load(self.ws.encoder(target))
    }

    /// A fine-tuned generator of the current style with its stylization
    /// policy; `--psi` overrides the policy's truncation.
    fn style_model(&self, name: &str) -> Result<(Generator, StylePolicy)> {
        let path = self.ws.model(self.style(), name);
        let g = Generator::load(&path)?;
        let policy_path = self.ws.policy(self.style(), name);
        let mut policy = if policy_path.is_file() {
            let text = std::fs::read_to_string(&policy_path)?;
            serde_json::from_str(&text).map_err(|e| Error::Load {
                path: policy_path.clone(),
                field: "policy".into(),
                reason: e.to_string(),
            })?
        } else {
            StylePolicy::for_style(self.style(), path, g.layer_count(), self.cfg.finetune.pair_level)
        };
        if let Some(psi) = self.g.psi {
            policy.truncation_psi = psi;
        }
        policy.validate()?;
        Ok((g, policy))
    }

    fn write_report(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let path = self.ws.report(name);
        std::fs::create_dir_all(path.parent().expect("reports dir"))?;
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes)?;
        info!("wrote {}", path.display());
        Ok(path)
    }

    fn open_run(&self, name: &str, command: &str, cfg: &Config) -> Result<RunDir> {
        RunDir::create(
            self.ws.run(name),
            &RunRecord {
                command,
                style: self.style(),
                config: cfg,
            },
        )
    }

    fn make_data(&self) -> Result<()> {
        let (res, d, seed) = (self.resolution(), &self.cfg.data, self.cfg.seed);
        let faces = write_dataset(self.ws.faces(), d.faces, seed, FaceStyle::Photo, res)?;
        let portraits = write_dataset(self.ws.portraits(), d.portraits, seed ^ 0x9e37_79b9_7f4a_7c15, FaceStyle::Photo, res)?;
        let style = write_dataset(
            self.ws.style_dir(self.style()),
            d.style_images,
            seed ^ 0xc2b2_ae3d_27d4_eb4f,
            FaceStyle::Cartoon,
            res,
        )?;
        info!(
            "wrote {} faces, {} portraits, {} `{}` style images",
            faces.len(),
            portraits.len(),
            style.len(),
            self.style()
        );
        Ok(())
    }

    fn pretrain(&self) -> Result<()> {
        let mut cfg = self.cfg.clone();
        if let Some(n) = self.g.iters {
            cfg.pretrain.iterations = n;
        }
        cfg.pretrain.validate()?;
        let faces = self.images(&self.ws.faces())?;
        let nets = self.nets()?;
        let mut run = self.open_run("pretrain", "pretrain", &cfg)?;
        let total = cfg.pretrain.iterations;
        let out = pretrain(cfg.generator, &faces, &cfg.pretrain, &nets, Some(&mut run), step_logger("pretrain", total))?;
        out.generator.save(self.ws.pretrained_generator())?;
        out.discriminator.save(self.ws.pretrained_discriminator())?;
        self.write_report("pretrain", &TrainSummary::of(&out)?)?;
        Ok(())
    }

    fn train_encoder(&self, target: EncoderTarget) -> Result<()> {
        let mut cfg = self.cfg.clone();
        if let Some(n) = self.g.iters {
            cfg.encoder.iterations = n;
        }
        let g = self.pretrained()?;
        let faces = self.images(&self.ws.faces())?;
        let nets = self.nets()?;
        let _run = self.open_run(&format!("encoder-{}", target.as_str()), "train-encoder", &cfg)?;
        let salt = match target {
            EncoderTarget::W => 0,
            EncoderTarget::WPlus => 1,
            EncoderTarget::ZPlus => 2,
        };
        let mut enc = Encoder::new(target, &g, cfg.encoder.seed.wrapping_mul(31).wrapping_add(salt))?;
        let total = cfg.encoder.iterations;
        let every = (total / 20).max(1);
        let report = train_encoder(&mut enc, &g, &faces, &cfg.encoder, &nets, |i, loss| {
            if i % every == 0 || i + 1 == total {
                info!("encoder {} step {i}/{total}: {loss:.4}", target.as_str());
            }
        })?;
        enc.save(self.ws.encoder(target))?;
        self.write_report(
            &format!("train-encoder-{}", target.as_str()),
            &json!({
                "target": target,
                "iterations": report.losses.len(),
                "final_loss": report.losses.last(),
                "losses": report.losses,
                "encoder_hash": enc.content_hash()?,
            }),
        )?;
        Ok(())
    }

    fn finetune_unconstrained(&self) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.finetune = cfg.finetune.unconstrained();
        if let Some(n) = self.g.iters {
            cfg.finetune.iterations = n;
        }
        cfg.finetune.validate()?;
        let (g, d) = (self.pretrained()?, Discriminator::load(self.ws.pretrained_discriminator())?);
        let style = self.style_images()?;
        let nets = self.nets()?;
        let mut run = self.open_run(&format!("{}-g_star", self.style()), "finetune-unconstrained", &cfg)?;
        let total = cfg.finetune.iterations;
        let out = finetune(&g, Some(&d), &style, None, &cfg.finetune, &nets, Some(&mut run), step_logger("g_star", total))?;
        out.generator.save(self.ws.model(self.style(), "g_star"))?;
        self.write_report(&format!("finetune-{}-g_star", self.style()), &TrainSummary::of(&out)?)?;
        Ok(())
    }

    fn make_pairs(&self) -> Result<()> {
        let mut pc = self.cfg.pairs;
        if let Some(n) = self.g.iters {
            pc.iterations = n;
        }
        if let Some(level) = self.g.pair_level {
            pc.level_default = level;
        }
        let g = self.pretrained()?;
        let g_star = Generator::load(self.ws.model(self.style(), "g_star"))?;
        let (e_zplus, e_wplus) = (self.encoder(EncoderTarget::ZPlus)?, self.encoder(EncoderTarget::WPlus)?);
        let nets = self.nets()?;
        let models = PairModels {
            g: &g,
            g_star: &g_star,
            e_zplus: &e_zplus,
            e_wplus: &e_wplus,
            nets: &nets,
        };
        let ds = build_pair_dataset(
            self.ws.style_dir(self.style()),
            self.ws.pairs_dir(self.style()),
            self.style(),
            models,
            &pc,
            &mut |id: &str, n| info!("pair {id}: {n} level-2 iterations"),
        )?;
        let samples: Vec<_> = ds
            .samples
            .iter()
            .map(|s| {
                json!({
                    "id": s.meta.id,
                    "source": s.meta.source,
                    "level2_initial_loss": s.meta.level2_initial_loss,
                    "level2_final_loss": s.meta.level2_final_loss,
                    "level2_best_iteration": s.meta.level2_best_iteration,
                })
            })
            .collect();
        self.write_report(
            &format!("make-pairs-{}", self.style()),
            &json!({
                "style": self.style(),
                "config": pc,
                "dataset_hash": ds.manifest.dataset_hash,
                "samples": samples,
                "skipped": ds.manifest.skipped,
            }),
        )?;
        Ok(())
    }

    fn finetune(&self, lambda_semantic: Option<f64>, lambda_paired: Option<f64>, name: &str) -> Result<()> {
        check_style_name(name)?;
        let mut cfg = self.cfg.clone();
        if let Some(v) = lambda_semantic {
            cfg.finetune.lambda_semantic = v;
        }
        if let Some(v) = lambda_paired {
            cfg.finetune.lambda_paired = v;
        }
        if let Some(level) = self.g.pair_level {
            cfg.finetune.pair_level = level;
        }
        if let Some(n) = self.g.iters {
            cfg.finetune.iterations = n;
        }
        cfg.finetune.validate()?;
        let pairs_dir = self.ws.pairs_dir(self.style());
        if cfg.finetune.lambda_paired > 0.0 && !pairs_dir.join("manifest.json").is_file() {
            return Err(Error::Config(format!(
                "lambda_paired = {} needs a pair dataset at {}; run make-pairs first",
                cfg.finetune.lambda_paired,
                pairs_dir.display()
            )));
        }
        let pairs = if cfg.finetune.lambda_paired > 0.0 {
            Some(PairedDataset::load(&pairs_dir)?)
        } else {
            None
        };
        let (g, d) = (self.pretrained()?, Discriminator::load(self.ws.pretrained_discriminator())?);
        let style = self.style_images()?;
        let nets = self.nets()?;
        let mut run = self.open_run(&format!("{}-{name}", self.style()), "finetune", &cfg)?;
        let total = cfg.finetune.iterations;
        let out = finetune(&g, Some(&d), &style, pairs.as_ref(), &cfg.finetune, &nets, Some(&mut run), step_logger(name, total))?;
        let path = self.ws.model(self.style(), name);
        out.generator.save(&path)?;
        let rel = path.strip_prefix(self.ws.root()).unwrap_or(&path).to_path_buf();
        let mut policy = StylePolicy::for_style(self.style(), rel, out.generator.layer_count(), cfg.finetune.pair_level);
        if let Some(psi) = self.g.psi {
            policy.truncation_psi = psi;
        }
        policy.validate()?;
        std::fs::write(self.ws.policy(self.style(), name), serde_json::to_vec_pretty(&policy)?)?;
        self.write_report(&format!("finetune-{}-{name}", self.style()), &TrainSummary::of(&out)?)?;
        Ok(())
    }

    /// Input portraits as (file stem, image), center-cropped to resolution.
    fn read_inputs(&self, input: &Path) -> Result<Vec<(String, Image)>> {
        let input = self.ws.resolve(input);
        let paths = if input.is_dir() { list_images(&input)? } else { vec![input.clone()] };
        if paths.is_empty() {
            return Err(Error::EmptyDataset(format!("no PNG images in {}", input.display())));
        }
        paths
            .iter()
            .map(|p| {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
                Ok((stem, center_square(&Image::load_png(p)?, self.resolution())?))
            })
            .collect()
    }

    /// Output path for `stem`: `--out` itself for a single input, else a
    /// file inside `--out` or `outputs/<style>/<kind>/`.
    fn output_path(&self, args: &RenderArgs, kind: &str, stem: &str, single: bool) -> PathBuf {
        match &args.out {
            Some(out) if single => self.ws.resolve(out),
            Some(out) => self.ws.resolve(out).join(format!("{stem}.png")),
            None => self.ws.outputs().join(self.style()).join(kind).join(format!("{stem}.png")),
        }
    }

    fn save_output(&self, img: &Image, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        img.save_png(path)?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn stylize(&self, args: &RenderArgs) -> Result<()> {
        let (g, policy) = self.style_model(&args.model)?;
        let e_w = self.encoder(EncoderTarget::W)?;
        let inputs = self.read_inputs(&args.input)?;
        let single = inputs.len() == 1 && !self.ws.resolve(&args.input).is_dir();
        for (stem, img) in &inputs {
            let out = stylize_general(img, &policy, &e_w, &g)?;
            self.save_output(&out, &self.output_path(args, "stylize", stem, single))?;
        }
        Ok(())
    }

    fn mix(&self, args: &RenderArgs, reference: Option<&Path>) -> Result<()> {
        let k = self.g.k.ok_or_else(|| Error::InvalidParameter("mix needs --k".into()))?;
        let (g, policy) = self.style_model(&args.model)?;
        if k > g.layer_count() {
            return Err(Error::InvalidParameter(format!("k = {k} outside [0, {}]", g.layer_count())));
        }
        let psi = policy.truncation_psi;
        let e_w = self.encoder(EncoderTarget::W)?;
        let inputs = self.read_inputs(&args.input)?;
        let single = inputs.len() == 1 && !self.ws.resolve(&args.input).is_dir();
        let embedded = match reference {
            None => None,
            Some(path) => {
                let image = center_square(&Image::load_png(self.ws.resolve(path))?, self.resolution())?;
                let basis = sefa_basis(&g, self.cfg.invert.basis_size)?;
                let cache = ReferenceCache::new(self.ws.cache());
                let (emb, steps) =
                    embed_reference(&image, self.style(), &g, &basis, &self.nets()?, &self.invert_config(), &cache, |_, _| {})?;
                info!("reference {} ({steps} optimization steps)", emb.id());
                Some(emb)
            }
        };
        for (stem, img) in &inputs {
            let (out, tag) = match &embedded {
                None => {
                    let spec = MixSpec::noise(k, psi, self.cfg.seed);
                    (stylize_multimodal(img, &e_w, &g, &[spec])?.remove(0), format!("{stem}_k{k}_seed{}", self.cfg.seed))
                }
                Some(emb) => (
                    stylize_reference(img, &policy, psi, &e_w, &g, emb, k)?,
                    format!("{stem}_k{k}_ref{}", &emb.image_hash()[..12]),
                ),
            };
            self.save_output(&out, &self.output_path(args, "mix", &tag, single))?;
        }
        Ok(())
    }

    fn invert_config(&self) -> InvertConfig {
        let mut ic = self.cfg.invert;
        if let Some(n) = self.g.iters {
            ic.iterations = n;
        }
        ic
    }

    fn invert_ref(&self, inputs: &[PathBuf], model: &str) -> Result<()> {
        let (g, _) = self.style_model(model)?;
        let basis = sefa_basis(&g, self.cfg.invert.basis_size)?;
        let cache = ReferenceCache::new(self.ws.cache());
        let nets = self.nets()?;
        let ic = self.invert_config();
        for path in inputs {
            let image = center_square(&Image::load_png(self.ws.resolve(path))?, self.resolution())?;
            let (emb, steps) = embed_reference(&image, self.style(), &g, &basis, &nets, &ic, &cache, |_, _| {})?;
            println!(
                "{}",
                json!({
                    "input": path,
                    "reference_id": emb.id(),
                    "steps": steps,
                    "final_loss": emb.meta.final_loss,
                })
            );
        }
        Ok(())
    }

    fn eval_env(&self) -> Result<EvalEnv> {
        let g = self.pretrained()?;
        let disc = Discriminator::load(self.ws.pretrained_discriminator())?;
        let style_features = extract_features(&self.style_images()?, &disc, 8)?;
        let portraits = self.images(&self.ws.portraits())?;
        let e_w_path = self.ws.encoder(EncoderTarget::W);
        let e_w = if e_w_path.is_dir() { Some(Encoder::load(e_w_path)?) } else { None };
        Ok(EvalEnv {
            g,
            disc,
            nets: self.nets()?,
            style_features,
            portraits,
            e_w,
        })
    }

    /// Generator samples for FID, drawn from fixed `Z` seeds.
    fn samples(&self, g: &Generator) -> Result<Vec<Image>> {
        generate_samples(g, self.cfg.eval.fid_samples, self.cfg.seed, self.cfg.eval.fid_psi)
    }

    fn score(&self, env: &EvalEnv, gm: &Generator, psi: f64) -> Result<Scores> {
        let samples = extract_features(&self.samples(gm)?, &env.disc, 8)?;
        let fid = fid(&samples, &env.style_features)?;
        let semantic_distance = semantic_distance(&env.g, gm, self.cfg.eval.semantic_samples, self.cfg.seed, &env.nets.perceptual)?;
        let (perceptual, identity) = match &env.e_w {
            Some(e_w) => {
                let policy = StylePolicy {
                    truncation_psi: psi,
                    ..StylePolicy::for_style(self.style(), PathBuf::new(), gm.layer_count(), self.cfg.finetune.pair_level)
                };
                let pairs = env
                    .portraits
                    .iter()
                    .map(|p| Ok((p.clone(), stylize_general(p, &policy, e_w, gm)?)))
                    .collect::<Result<Vec<_>>>()?;
                (
                    Some(perceptual_distance(&pairs, &env.nets.perceptual)?),
                    Some(identity_distance(&pairs, &env.nets.identity)?),
                )
            }
            None => (None, None),
        };
        Ok(Scores {
            fid,
            semantic_distance,
            perceptual,
            identity,
        })
    }

    /// Every fine-tuned generator under `models/<style>/`, by name.
    fn style_models(&self) -> Result<Vec<String>> {
        let dir = self.ws.style_models(self.style());
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut names: Vec<String> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir() && Generator::peek_role(e.path()).is_ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        Ok(names)
    }

    fn evaluate(&self) -> Result<()> {
        let names = self.style_models()?;
        if names.is_empty() {
            return Err(Error::Config(format!("no fine-tuned models for style `{}`", self.style())));
        }
        let env = self.eval_env()?;
        let fid_id = env.style_features.extractor_id().to_string();
        let lpips_id = format!("lpips:{}", &env.nets.perceptual.params().content_hash()?[..16]);
        let id_id = format!("identity:{}", &env.nets.identity.params().content_hash()?[..16]);
        let seed = self.cfg.seed;
        let mut report = BTreeMap::new();
        for name in names {
            let (gm, policy) = self.style_model(&name)?;
            let s = self.score(&env, &gm, policy.truncation_psi)?;
            info!("{name}: {s:?}");
            let mut records = vec![
                MetricRecord {
                    metric: "fid".into(),
                    value: s.fid,
                    extractor_id: fid_id.clone(),
                    n: self.cfg.eval.fid_samples,
                    seed,
                },
                MetricRecord {
                    metric: "semantic_distance".into(),
                    value: s.semantic_distance,
                    extractor_id: lpips_id.clone(),
                    n: self.cfg.eval.semantic_samples,
                    seed,
                },
            ];
            let n = env.portraits.len();
            if let (Some(p), Some(i)) = (s.perceptual, s.identity) {
                records.push(MetricRecord {
                    metric: "perceptual_distance".into(),
                    value: p,
                    extractor_id: lpips_id.clone(),
                    n,
                    seed,
                });
                records.push(MetricRecord {
                    metric: "identity_distance".into(),
                    value: i,
                    extractor_id: id_id.clone(),
                    n,
                    seed,
                });
            }
            report.insert(name, records);
        }
        self.write_report(&format!("evaluate-{}", self.style()), &report)?;
        Ok(())
    }

    fn study_content_space(&self, model: &str) -> Result<()> {
        let (g, policy) = self.style_model(model)?;
        let env = self.eval_env()?;
        let mut rows = Vec::new();
        for target in [EncoderTarget::W, EncoderTarget::WPlus, EncoderTarget::ZPlus] {
            let path = self.ws.encoder(target);
            if !path.is_dir() {
                log::warn!("skipping {} content encoding: no encoder at {}", target.as_str(), path.display());
                continue;
            }
            let enc = Encoder::load(path)?;
            let pairs = env
                .portraits
                .iter()
                .map(|p| Ok((p.clone(), synthesize(&content_code(p, policy.truncation_psi, &enc, &g)?, &g)?)))
                .collect::<Result<Vec<_>>>()?;
            let outputs: Vec<Image> = pairs.iter().map(|(_, o)| o.clone()).collect();
            let row = json!({
                "space": target.space(),
                "fid": fid(&extract_features(&outputs, &env.disc, 8)?, &env.style_features)?,
                "perceptual_distance": perceptual_distance(&pairs, &env.nets.perceptual)?,
                "identity_distance": identity_distance(&pairs, &env.nets.identity)?,
                "n": pairs.len(),
            });
            info!("{row}");
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Config("no encoders trained; run train-encoder first".into()));
        }
        self.write_report(&format!("study-content-space-{}", self.style()), &rows)?;
        Ok(())
    }

    fn study_ref_space(&self, model: &str) -> Result<()> {
        let (g, _) = self.style_model(model)?;
        let refs: Vec<Image> = self.style_images()?.into_iter().take(self.cfg.study.references.max(1)).collect();
        let nets = self.nets()?;
        let basis = sefa_basis(&g, self.cfg.invert.basis_size)?;
        let ic = self.invert_config();
        let mut rows = Vec::new();
        for space in [LatentSpace::W, LatentSpace::WPlus, LatentSpace::ZPlus, LatentSpace::V] {
            let basis = (space == LatentSpace::V).then_some(&basis);
            let mut pairs = Vec::with_capacity(refs.len());
            let mut steps = 0;
            let mut tail_rows = 0;
            for r in &refs {
                let inv = invert(r, &g, space, basis, &nets, &ic, |_, _| {})?;
                steps += inv.steps;
                tail_rows = LatentDecoder::new(&g, space, basis)?.to_wplus(inv.code.values())?.dims()[0];
                pairs.push((r.clone(), inv.recon));
            }
            let row = json!({
                "space": space,
                "recon_perceptual": perceptual_distance(&pairs, &nets.perceptual)?,
                "recon_identity": identity_distance(&pairs, &nets.identity)?,
                "mean_steps": steps as f64 / refs.len() as f64,
                "wplus_rows": tail_rows,
                "n": refs.len(),
            });
            info!("{row}");
            rows.push(row);
        }
        self.write_report(&format!("study-ref-space-{}", self.style()), &rows)?;
        Ok(())
    }

    /// Fine-tunes a study variant from the pretrained model without saving
    /// it, and scores it.
    fn study_run(&self, env: &EvalEnv, run_name: &str, mut cfg: Config, pairs: Option<&PairedDataset>) -> Result<Scores> {
        cfg.finetune.iterations = self.g.iters.unwrap_or(cfg.study.iterations);
        cfg.finetune.validate()?;
        let d = Discriminator::load(self.ws.pretrained_discriminator())?;
        let style = self.style_images()?;
        let mut run = self.open_run(run_name, "study", &cfg)?;
        let total = cfg.finetune.iterations;
        let pairs = if cfg.finetune.lambda_paired > 0.0 { pairs } else { None };
        let out = finetune(&env.g, Some(&d), &style, pairs, &cfg.finetune, &env.nets, Some(&mut run), step_logger(run_name, total))?;
        let psi = self.g.psi.unwrap_or_else(|| {
            StylePolicy::for_style(self.style(), PathBuf::new(), 1, cfg.finetune.pair_level).truncation_psi
        });
        self.score(env, &out.generator, psi)
    }

    fn require_pairs(&self) -> Result<PairedDataset> {
        let dir = self.ws.pairs_dir(self.style());
        if !dir.join("manifest.json").is_file() {
            return Err(Error::Config(format!("no pair dataset at {}; run make-pairs first", dir.display())));
        }
        PairedDataset::load(dir)
    }

    fn study_pair_level(&self) -> Result<()> {
        let pairs = self.require_pairs()?;
        let env = self.eval_env()?;
        let mut rows = Vec::new();
        for level in PairLevel::ALL {
            let mut cfg = self.cfg.clone();
            cfg.finetune.pair_level = level;
            let s = self.study_run(&env, &format!("study-{}-pair-level-{}", self.style(), level.number()), cfg, Some(&pairs))?;
            let row = json!({ "level": level, "scores": s });
            println!("level {}: fid {:.4} semantic {:.4}", level.number(), s.fid, s.semantic_distance);
            rows.push(row);
        }
        self.write_report(&format!("study-pair-level-{}", self.style()), &rows)?;
        Ok(())
    }

    fn study_sweep(&self) -> Result<()> {
        let pairs = self.require_pairs()?;
        let env = self.eval_env()?;
        let mut rows = Vec::new();
        let grids: [(&str, &[f64]); 2] = [
            ("lambda_semantic", &self.cfg.study.lambda_semantic_grid),
            ("lambda_paired", &self.cfg.study.lambda_paired_grid),
        ];
        for (param, grid) in grids {
            for (i, &value) in grid.iter().enumerate() {
                let mut cfg = self.cfg.clone();
                match param {
                    "lambda_semantic" => cfg.finetune.lambda_semantic = value,
                    _ => cfg.finetune.lambda_paired = value,
                }
                let s = self.study_run(&env, &format!("study-{}-sweep-{param}-{i}", self.style()), cfg, Some(&pairs))?;
                println!("{param} = {value}: fid {:.4} semantic {:.4}", s.fid, s.semantic_distance);
                rows.push(json!({ "parameter": param, "value": value, "scores": s }));
            }
        }
        self.write_report(&format!("study-sweep-{}", self.style()), &rows)?;
        Ok(())
    }

    fn serve(&self, host: &str, port: u16, static_dir: Option<PathBuf>, workers: usize) -> Result<()> {
        use portraitgan_studio::{AppState, Models, StyleModel};
        let models_root = self.ws.root().join("models");
        let mut styles = BTreeMap::new();
        if models_root.is_dir() {
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(&models_root)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
            dirs.sort();
            for dir in dirs {
                let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                if check_style_name(&name).is_err() || !dir.join("g_prime").is_dir() {
                    continue;
                }
                let ctx = Ctx {
                    cfg: self.cfg.clone(),
                    ws: self.ws.clone(),
                    g: Global {
                        style: name.clone(),
                        ..self.g.clone()
                    },
                };
                let (generator, policy) = ctx.style_model("g_prime")?;
                let basis = sefa_basis(&generator, self.cfg.invert.basis_size)?;
                info!("serving style `{name}`");
                styles.insert(name, StyleModel { policy, generator, basis });
            }
        }
        if styles.is_empty() {
            return Err(Error::Config("no style has a fine-tuned g_prime to serve".into()));
        }
        let models = Models {
            styles,
            encoder_w: self.encoder(EncoderTarget::W)?,
            nets: self.nets()?,
            cache: ReferenceCache::new(self.ws.cache()),
            invert: self.invert_config(),
        };
        let state = AppState::new(models, workers)?;
        let static_dir = static_dir.map(|d| self.ws.resolve(&d));
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        rt.block_on(portraitgan_studio::serve(state, host, port, static_dir))?;
        Ok(())
    }
}
