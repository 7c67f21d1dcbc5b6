//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1–3 run in-process at desk scale. Criteria 4–8 drive the
//! `portraitgan` binary through a full bootstrap in a temporary workspace.
//! Set `ACCEPTANCE_KEEP=1` to keep the workspaces.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use candle_core::Var;
use nalgebra::DMatrix;
use portraitgan::discriminator::Discriminator;
use portraitgan::encoder::Encoder;
use portraitgan::finetune::{generator_loss, FinetuneConfig};
use portraitgan::generator::{map_latent, sample_z, synthesize, truncate};
use portraitgan::inversion::{objective, sefa_basis, LatentDecoder};
use portraitgan::losses::{FeatureNetConfig, LossNets};
use portraitgan::metrics::{fid, FeatureSet, MetricRecord};
use portraitgan::optim::directional_grad_check;
use portraitgan::params::Init;
use portraitgan::pseudo_pairs::{regenerates, PairedDataset};
use portraitgan::{broadcast_w, mix_codes, Generator, GeneratorConfig, LatentSpace};
use portraitgan_cli::{Config, DataConfig, EvalConfig, StudyConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

type Check = Result<String, String>;

struct Line {
    id: u8,
    name: &'static str,
    result: Check,
    elapsed: Duration,
}

fn timed(id: u8, name: &'static str, f: impl FnOnce() -> Check) -> Line {
    let start = Instant::now();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into())));
    let line = Line {
        id,
        name,
        result,
        elapsed: start.elapsed(),
    };
    print_line(&line);
    line
}

fn print_line(l: &Line) {
    let (tag, detail) = match &l.result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {} {}: {tag} ({detail}) [{:.1}s]", l.id, l.name, l.elapsed.as_secs_f64());
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, minutes: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() <= minutes * 60.0, || {
        format!("took {:.1} min, budget {minutes} min", elapsed.as_secs_f64() / 60.0)
    })
}

trait Ctx<T> {
    fn ctx(self, what: &str) -> Result<T, String>;
}

impl<T, E: std::fmt::Display> Ctx<T> for Result<T, E> {
    fn ctx(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

// ---------------------------------------------------------------- 1

fn latent_algebra() -> Check {
    let start = Instant::now();
    let g = Generator::new(GeneratorConfig::desk(), 11).ctx("generator")?;
    let l = g.layer_count();
    let mean = g.w_mean_code().ctx("w mean")?.row(0).ctx("row")?;
    let mut checked = 0;
    for seed in 0..16u64 {
        let wp = map_latent(&sample_z(1, seed, LatentSpace::ZPlus, g.config()).ctx("z")?.remove(0), &g).ctx("map")?;
        let w = map_latent(&sample_z(1, 100 + seed, LatentSpace::Z, g.config()).ctx("z")?.remove(0), &g).ctx("map")?;
        ensure(truncate(&wp, 1.0, &g).ctx("truncate")?.bit_eq(&wp), || "ψ = 1 is not the identity".into())?;
        let t0 = truncate(&wp, 0.0, &g).ctx("truncate")?;
        for i in 0..l {
            ensure(t0.row(i).ctx("row")? == mean, || format!("ψ = 0 row {i} is not the mean latent"))?;
        }
        let (a, b) = (0.3 + 0.04 * seed as f64, 0.9 - 0.03 * seed as f64);
        let twice = truncate(&truncate(&wp, a, &g).ctx("t")?, b, &g).ctx("t")?.to_vec();
        let once = truncate(&wp, a * b, &g).ctx("t")?.to_vec();
        for (x, y) in twice.iter().zip(&once) {
            ensure((x - y).abs() <= 1e-6 * x.abs().max(1.0), || format!("composition {x} vs {y}"))?;
        }
        let bw = broadcast_w(&w, l).ctx("broadcast")?;
        for i in 0..l {
            ensure(bw.row(i).ctx("row")? == w.row(0).ctx("row")?, || "broadcast row differs".into())?;
        }
        ensure(mix_codes(&wp, &bw, l).ctx("mix")?.bit_eq(&wp), || "k = L is not the content code".into())?;
        ensure(mix_codes(&wp, &bw, 0).ctx("mix")?.bit_eq(&bw), || "k = 0 is not the tail code".into())?;
        for k in 0..=l {
            let m = mix_codes(&wp, &bw, k).ctx("mix")?;
            for i in 0..l {
                let want = if i < k { wp.row(i) } else { bw.row(i) }.ctx("row")?;
                ensure(m.row(i).ctx("row")? == want, || format!("k = {k} row {i} has the wrong source"))?;
            }
            checked += 1;
        }
    }
    within(start.elapsed(), 1.0)?;
    Ok(format!("16 codes, {checked} mixes, L = {l}"))
}

// ---------------------------------------------------------------- 2

const GRAD_TOL: f64 = 1e-2;
const GRAD_EPS: f64 = 1e-3;

fn gradient_checks() -> Check {
    let start = Instant::now();
    let cfg = GeneratorConfig::desk();
    let d = cfg.latent_dim;
    let nets = LossNets::random(FeatureNetConfig::default()).ctx("nets")?;
    let frozen = Generator::with_w_mean_samples(cfg, 1, 1000).ctx("G")?;
    let mut g = Generator::with_w_mean_samples(cfg, 2, 1000).ctx("G′")?;
    g.set_tracking(true);
    let disc = Discriminator::new(cfg, 3).ctx("D")?;
    let l = g.layer_count();
    let z = Init::new(4).normal((2, d), 1.0).ctx("z")?;
    let codes = g.map_plus_batch(&Init::new(6).normal((2, l, d), 1.0).ctx("z+")?).ctx("codes")?.detach();
    let targets = Init::new(7).normal((2, 3, 64, 64), 0.5).ctx("targets")?.tanh().ctx("tanh")?;
    let fc = FinetuneConfig {
        lambda_semantic: 1.0,
        lambda_paired: 1.0,
        ..FinetuneConfig::default()
    };
    let vars = g.params().trainable();
    let mut worst = 0f64;
    let mut record = |what: String, rel: f64| -> Result<(), String> {
        worst = worst.max(rel);
        ensure(rel < GRAD_TOL, || format!("{what}: rel err {rel:.2e}"))
    };
    for seed in 0..2 {
        let c = directional_grad_check(&vars, GRAD_EPS, seed, || {
            Ok(generator_loss(&g, Some(&frozen), &disc, &z, Some((&codes, &targets)), &nets, &fc)?.total)
        })
        .ctx("total loss")?;
        record(format!("total loss direction {seed}"), c.rel_err())?;
    }
    let base = frozen.generate_from_z(&z, 1.0).ctx("base")?;
    for seed in 0..2 {
        let c = directional_grad_check(&vars, GRAD_EPS, 10 + seed, || Ok(nets.semantic_mean(&g.generate_from_z(&z, 1.0)?, &base, 0.1)?))
            .ctx("semantic loss")?;
        record(format!("semantic loss direction {seed}"), c.rel_err())?;
    }
    let target_img = Generator::with_w_mean_samples(cfg, 8, 1000)
        .ctx("target G")?
        .generate_from_z(&Init::new(9).normal((1, d), 1.0).ctx("z")?, 1.0)
        .ctx("target")?;
    let target = nets.semantic_target(&target_img).ctx("target")?;
    let basis = sefa_basis(&frozen, 64).ctx("basis")?;
    for space in [LatentSpace::W, LatentSpace::WPlus, LatentSpace::ZPlus, LatentSpace::V] {
        let dec = LatentDecoder::new(&frozen, space, (space == LatentSpace::V).then_some(&basis)).ctx("decoder")?;
        // Pixel norm is singular at the zero Z+ start; check at a sampled code.
        let at = match space {
            LatentSpace::ZPlus => Init::new(30).normal((l, d), 1.0).ctx("z+")?,
            _ => dec.start().ctx("start")?,
        };
        let code = Var::from_tensor(&at).ctx("var")?;
        let c = directional_grad_check(&[code.clone()], GRAD_EPS, 20, || objective(&dec, code.as_tensor(), &target, &nets, 0.1))
            .ctx("inversion objective")?;
        record(format!("{space} inversion objective"), c.rel_err())?;
    }
    within(start.elapsed(), 5.0)?;
    Ok(format!("8 checks at 64×64, worst rel err {worst:.2e} < {GRAD_TOL}"))
}

// ---------------------------------------------------------------- 3

fn gaussian(n: usize, m: usize, std: f64, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("normal");
    FeatureSet::new(DMatrix::from_fn(n, m, |_, _| dist.sample(&mut rng)), "gauss").expect("features")
}

fn fid_oracle() -> Check {
    let start = Instant::now();
    let (n, m) = (50_000, 8);
    let a = gaussian(n, m, 1.0, 1);
    let b = gaussian(n, m, 2.0, 2);
    // Fréchet distance between N(0, I) and N(0, 4I): m·(1 − 2)².
    let expect = m as f64 * (1.0f64 - 2.0).powi(2);
    let ab = fid(&a, &b).ctx("fid")?;
    let ba = fid(&b, &a).ctx("fid")?;
    let aa = fid(&a, &a).ctx("fid")?;
    ensure(aa.abs() <= 1e-6, || format!("self-FID {aa:.3e}"))?;
    ensure((ab - expect).abs() <= 0.2, || format!("FID {ab:.4} vs closed form {expect}"))?;
    ensure((ab - ba).abs() <= 1e-6, || format!("asymmetric: {ab} vs {ba}"))?;
    within(start.elapsed(), 2.0)?;
    Ok(format!("FID {ab:.4} vs {expect}, self {aa:.1e}, |ab − ba| {:.1e}", (ab - ba).abs()))
}

// ---------------------------------------------------------------- CLI

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_portraitgan")
}

struct Ws {
    root: PathBuf,
    config: PathBuf,
}

impl Ws {
    fn create(root: PathBuf, cfg: &Config) -> Self {
        std::fs::create_dir_all(&root).expect("workspace");
        let config = root.join("config.json");
        std::fs::write(&config, serde_json::to_vec_pretty(cfg).expect("config")).expect("config");
        Self { root, config }
    }

    /// Runs one subcommand; returns stdout.
    fn run(&self, args: &[&str]) -> Result<String, String> {
        let out = Command::new(bin())
            .arg("--config")
            .arg(&self.config)
            .arg("--workspace")
            .arg(&self.root)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| format!("spawn: {e}"))?;
        if out.status.success() {
            Ok(String::from_utf8_lossy(&out.stdout).into_owned())
        } else {
            let err = String::from_utf8_lossy(&out.stderr);
            let tail: Vec<&str> = err.lines().rev().take(3).collect();
            Err(format!("`{}` exited {:?}: {}", args.join(" "), out.status.code(), tail.join(" | ")))
        }
    }

    fn timed(&self, args: &[&str]) -> Result<Duration, String> {
        let t = Instant::now();
        self.run(args)?;
        Ok(t.elapsed())
    }
}

fn desk_config(seed: u64) -> Config {
    let mut c = Config {
        data: DataConfig {
            faces: 256,
            portraits: 16,
            style_images: 10,
        },
        eval: EvalConfig {
            semantic_samples: 64,
            fid_samples: 64,
            fid_psi: 1.0,
        },
        study: StudyConfig {
            iterations: 100,
            ..StudyConfig::default()
        },
        ..Config::default()
    };
    // Setup budget: a short pretraining and encoder schedule.
    c.pretrain.iterations = 1500;
    c.encoder.iterations = 400;
    c.with_seed(seed)
}

/// Setup shared by criteria 4–6 and 8.
struct Pipeline {
    ws: Ws,
    t_g_star: Option<Duration>,
    t_pairs: Option<Duration>,
    t_g_prime: Option<Duration>,
    setup_error: Option<String>,
}

fn bootstrap(root: PathBuf) -> Pipeline {
    let ws = Ws::create(root, &desk_config(7));
    let mut p = Pipeline {
        ws,
        t_g_star: None,
        t_pairs: None,
        t_g_prime: None,
        setup_error: None,
    };
    let steps = || -> Result<(), String> {
        let t = Instant::now();
        p.ws.run(&["make-data"])?;
        p.ws.run(&["pretrain"])?;
        for target in ["w", "wplus", "zplus"] {
            p.ws.run(&["train-encoder", "--target", target])?;
        }
        eprintln!("setup (data, pretraining, encoders) took {:.1} min", t.elapsed().as_secs_f64() / 60.0);
        Ok(())
    };
    if let Err(e) = steps() {
        p.setup_error = Some(e);
        return p;
    }
    match p.ws.timed(&["finetune-unconstrained"]) {
        Ok(t) => p.t_g_star = Some(t),
        Err(e) => {
            p.setup_error = Some(e);
            return p;
        }
    }
    match p.ws.timed(&["make-pairs"]) {
        Ok(t) => p.t_pairs = Some(t),
        Err(e) => {
            p.setup_error = Some(e);
            return p;
        }
    }
    match p.ws.timed(&["finetune"]) {
        Ok(t) => p.t_g_prime = Some(t),
        Err(e) => p.setup_error = Some(e),
    }
    p
}

// ---------------------------------------------------------------- 4

fn pseudo_pairs(p: &Pipeline) -> Check {
    let t = p.t_pairs.ok_or_else(|| p.setup_error.clone().unwrap_or_default())?;
    let root = &p.ws.root;
    let ds = PairedDataset::load(root.join("styles/cartoon/pairs")).ctx("load pairs")?;
    ensure(ds.len() == 10, || format!("{} samples, expected 10", ds.len()))?;
    let g = Generator::load(root.join("models/pretrained/generator")).ctx("G")?;
    let e_z = Encoder::load(root.join("models/encoders/zplus")).ctx("E_Z+")?;
    let e_wp = Encoder::load(root.join("models/encoders/wplus")).ctx("E_W+")?;
    for s in &ds.samples {
        let id = &s.meta.id;
        ensure(s.meta.level2_final_loss <= s.meta.level2_initial_loss, || {
            format!("{id}: level-2 loss rose {} → {}", s.meta.level2_initial_loss, s.meta.level2_final_loss)
        })?;
        ensure(regenerates(s, &g).ctx("regenerate")? == [true; 3], || format!("{id}: stored images do not regenerate"))?;
        ensure(e_z.encode(&s.style_image).ctx("encode")?.bit_eq(&s.z1), || format!("{id}: z1 ≠ E_Z+(S)"))?;
        ensure(map_latent(&s.z1, &g).ctx("map")?.bit_eq(&s.w1), || format!("{id}: w1 ≠ map(z1)"))?;
        ensure(map_latent(&s.z2, &g).ctx("map")?.bit_eq(&s.w2), || format!("{id}: w2 ≠ map(z2)"))?;
        ensure(e_wp.encode(&s.style_image).ctx("encode")?.bit_eq(&s.w3), || format!("{id}: w3 ≠ E_W+(S)"))?;
        ensure(synthesize(&s.w1, &g).ctx("synth")?.rgb8_eq(&s.p1), || format!("{id}: P1 ≠ G(w1)"))?;
    }
    within(t, 15.0)?;
    Ok(format!("10 samples, all chains exact, built in {:.1} min", t.as_secs_f64() / 60.0))
}

// ---------------------------------------------------------------- 5

fn ablation(p: &Pipeline) -> Check {
    let (a, b) = match (p.t_g_star, p.t_g_prime) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(p.setup_error.clone().unwrap_or_default()),
    };
    p.ws.run(&["evaluate"])?;
    let text = std::fs::read_to_string(p.ws.root.join("reports/evaluate-cartoon.json")).ctx("report")?;
    let report: BTreeMap<String, Vec<MetricRecord>> = serde_json::from_str(&text).ctx("report")?;
    let get = |model: &str, metric: &str| -> Result<f64, String> {
        report
            .get(model)
            .and_then(|rs| rs.iter().find(|r| r.metric == metric))
            .map(|r| r.value)
            .ok_or_else(|| format!("{model}/{metric} missing"))
    };
    let (dis_c, dis_u) = (get("g_prime", "semantic_distance")?, get("g_star", "semantic_distance")?);
    let (fid_c, fid_u) = (get("g_prime", "fid")?, get("g_star", "fid")?);
    let detail = format!(
        "Dis. constrained {dis_c:.4} vs unconstrained {dis_u:.4}; FID {fid_c:.3} vs {fid_u:.3}; {:.1} min",
        (a + b).as_secs_f64() / 60.0
    );
    ensure(dis_c < dis_u, || format!("semantic distance not lower: {detail}"))?;
    ensure(fid_c <= fid_u, || format!("FID not lower or equal: {detail}"))?;
    within(a + b, 60.0).map_err(|e| format!("{e}; {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 6

fn same_file(a: &Path, b: &Path) -> Result<bool, String> {
    Ok(std::fs::read(a).ctx("read")? == std::fs::read(b).ctx("read")?)
}

fn pipeline_consistency(p: &Pipeline) -> Check {
    if p.t_g_prime.is_none() {
        return Err(p.setup_error.clone().unwrap_or_default());
    }
    let start = Instant::now();
    let root = &p.ws.root;
    let input = "data/portraits/face_00003.png";
    let reference = "styles/cartoon/face_00004.png";
    let l = Generator::load(root.join("models/cartoon/g_prime")).ctx("G′")?.layer_count().to_string();
    p.ws.run(&["stylize", "--input", input, "--out", "outputs/acc/general.png"])?;
    p.ws.run(&["mix", "--k", &l, "--seed", "3", "--input", input, "--out", "outputs/acc/noise.png"])?;
    let first = p.ws.run(&["invert-ref", "--input", reference])?;
    let second = p.ws.run(&["invert-ref", "--input", reference])?;
    p.ws.run(&["mix", "--k", &l, "--input", input, "--reference", reference, "--out", "outputs/acc/reference.png"])?;
    let steps = |s: &str| -> Result<u64, String> {
        let v: serde_json::Value = serde_json::from_str(s.trim()).ctx("invert-ref output")?;
        v["steps"].as_u64().ok_or_else(|| "no steps".into())
    };
    let (s1, s2) = (steps(&first)?, steps(&second)?);
    let out = |n: &str| root.join("outputs/acc").join(n);
    ensure(same_file(&out("noise.png"), &out("general.png"))?, || "noise mix at k = L differs from stylize".into())?;
    ensure(same_file(&out("reference.png"), &out("general.png"))?, || "reference mix at k = L differs from stylize".into())?;
    ensure(s1 > 0 && s2 == 0, || format!("inversion steps {s1} then {s2}"))?;
    within(start.elapsed(), 5.0)?;
    Ok(format!("k = {l} outputs byte-identical; reference steps {s1} then {s2}"))
}

// ---------------------------------------------------------------- 7

fn hash_tree(root: &Path) -> BTreeMap<String, String> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).into_iter().flatten().flatten().map(|e| e.path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                if rel == "config.json" {
                    continue;
                }
                let bytes = std::fs::read(&p).unwrap_or_default();
                out.insert(rel, hex::encode(Sha256::digest(&bytes)));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn reproducibility(base: &Path) -> Check {
    let mut cfg = Config {
        data: DataConfig {
            faces: 16,
            portraits: 4,
            style_images: 3,
        },
        eval: EvalConfig {
            semantic_samples: 4,
            fid_samples: 4,
            fid_psi: 1.0,
        },
        ..Config::default()
    };
    cfg.pretrain.iterations = 6;
    cfg.pretrain.checkpoint_every = 3;
    cfg.encoder.iterations = 3;
    cfg.finetune.iterations = 6;
    cfg.finetune.checkpoint_every = 3;
    cfg.pairs.iterations = 4;
    let cfg = cfg.with_seed(21);
    let script: &[&[&str]] = &[
        &["make-data"],
        &["pretrain"],
        &["train-encoder", "--target", "w"],
        &["train-encoder", "--target", "wplus"],
        &["train-encoder", "--target", "zplus"],
        &["finetune-unconstrained"],
        &["make-pairs"],
        &["finetune"],
        &["evaluate"],
        &["stylize", "--input", "data/portraits"],
        &["mix", "--k", "4", "--input", "data/portraits"],
    ];
    let mut trees = Vec::new();
    for name in ["repro_a", "repro_b"] {
        let ws = Ws::create(base.join(name), &cfg);
        for args in script {
            ws.run(args)?;
        }
        trees.push(hash_tree(&ws.root));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let differing: Vec<&String> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).collect();
    ensure(differing.is_empty(), || format!("{} files differ, e.g. {:?}", differing.len(), &differing[..differing.len().min(3)]))?;
    let checkpoints = a.keys().filter(|k| k.ends_with(".safetensors")).count();
    let reports = a.keys().filter(|k| k.starts_with("reports/")).count();
    ensure(checkpoints > 0 && reports > 0, || "nothing was produced".into())?;
    Ok(format!("{} files identical across reruns ({checkpoints} weight files, {reports} reports)", a.len()))
}

// ---------------------------------------------------------------- 8

fn pair_level_study(p: &Pipeline) -> Check {
    if p.t_pairs.is_none() {
        return Err(p.setup_error.clone().unwrap_or_default());
    }
    let stdout = p.ws.run(&["study", "pair-level"])?;
    let text = std::fs::read_to_string(p.ws.root.join("reports/study-pair-level-cartoon.json")).ctx("report")?;
    let rows: Vec<serde_json::Value> = serde_json::from_str(&text).ctx("report")?;
    let levels: Vec<u64> = rows.iter().filter_map(|r| r["level"].as_u64()).collect();
    ensure(levels == [1, 2, 3], || format!("levels {levels:?}"))?;
    for r in &rows {
        for key in ["fid", "semantic_distance"] {
            ensure(r["scores"][key].as_f64().is_some_and(f64::is_finite), || format!("row {r} lacks a finite {key}"))?;
        }
    }
    Ok(stdout.lines().map(str::trim).collect::<Vec<_>>().join("; "))
}

fn main() {
    let keep = std::env::var_os("ACCEPTANCE_KEEP").is_some();
    let dir = tempfile::Builder::new().prefix("portraitgan-acceptance").tempdir().expect("tempdir");
    eprintln!("acceptance workspaces under {}", dir.path().display());
    let mut lines = vec![
        timed(1, "latent algebra", latent_algebra),
        timed(2, "gradient checks", gradient_checks),
        timed(3, "FID oracle", fid_oracle),
    ];
    let pipeline = bootstrap(dir.path().join("main"));
    if let Some(e) = &pipeline.setup_error {
        eprintln!("pipeline setup failed: {e}");
    }
    lines.push(timed(4, "pseudo-pair pipeline", || pseudo_pairs(&pipeline)));
    lines.push(timed(5, "ablation direction", || ablation(&pipeline)));
    lines.push(timed(6, "pipeline consistency", || pipeline_consistency(&pipeline)));
    lines.push(timed(7, "reproducibility", || reproducibility(dir.path())));
    lines.push(timed(8, "pair-level study", || pair_level_study(&pipeline)));

    println!("\nsummary:");
    lines.sort_by_key(|l| l.id);
    for l in &lines {
        print_line(l);
    }
    if keep {
        let kept = dir.keep();
        eprintln!("kept {}", kept.display());
    }
    let failed = lines.iter().filter(|l| l.result.is_err()).count();
    if failed > 0 {
        println!("{failed} of {} criteria failed", lines.len());
        std::process::exit(1);
    }
}
