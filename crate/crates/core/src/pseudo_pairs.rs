//! Multi-level pseudo-paired data: for each style image `S`, three
//! realistic counterparts sharing its latent layout.
//!
//! * level 1 — `z1 = E_z+(S)`, `w1 = map(z1)`, `P1 = G(w1)`
//! * level 2 — `z2 = argmin_z L_semantic(G*(z), S)` from `z1`, then
//!   `w2 = map(z2)` and `P2 = G(w2)`. The optimization runs through the
//!   unconstrained fine-tuned `G*`, but `w2`/`P2` come from the *pretrained*
//!   `G`.
//! * level 3 — `w3 = E_w+(S)`, `P3 = G(w3)`
//!
//! On disk, each sample is `<pairs>/<id>/{S,P1,P2,P3}.png`, raw
//! little-endian `z1,z2,w1,w2,w3.f32` and `meta.json`; `<pairs>/manifest.json`
//! lists samples, skipped inputs and a hash over every sample file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{replace_dir, sha256_hex, temp_sibling};
use crate::encoder::{Encoder, EncoderTarget};
use crate::error::{Error, Result};
use crate::generator::{map_latent, synthesize, Generator, GeneratorConfig, GeneratorRole};
use crate::image::{load_dir, Image};
use crate::inversion::{optimize_latent, LatentDecoder};
use crate::latent::{LatentCode, LatentSpace};
use crate::losses::{LossNets, LAMBDA_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PairLevel {
    One,
    Two,
    Three,
}

impl PairLevel {
    pub const ALL: [PairLevel; 3] = [PairLevel::One, PairLevel::Two, PairLevel::Three];

    pub fn number(self) -> u8 {
        match self {
            PairLevel::One => 1,
            PairLevel::Two => 2,
            PairLevel::Three => 3,
        }
    }
}

impl TryFrom<u8> for PairLevel {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(PairLevel::One),
            2 => Ok(PairLevel::Two),
            3 => Ok(PairLevel::Three),
            _ => Err(Error::InvalidParameter(format!("pair level {v} must be 1, 2 or 3"))),
        }
    }
}

impl From<PairLevel> for u8 {
    fn from(l: PairLevel) -> u8 {
        l.number()
    }
}

impl std::fmt::Display for PairLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl std::str::FromStr for PairLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("pair level `{s}` must be 1, 2 or 3")))?;
        v.try_into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lambda_id: f64,
    pub level_default: PairLevel,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr: 0.02,
            lambda_id: LAMBDA_ID,
            level_default: PairLevel::Two,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeShape {
    pub space: LatentSpace,
    pub rows: usize,
    pub cols: usize,
}

/// Per-sample record stored as `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub source: String,
    pub codes: BTreeMap<String, CodeShape>,
    pub level2_iterations: usize,
    pub level2_lr: f64,
    pub lambda_id: f64,
    pub level2_initial_loss: f32,
    pub level2_final_loss: f32,
    pub level2_best_iteration: usize,
    pub generator_hash: String,
    pub g_star_hash: String,
    pub e_zplus_hash: String,
    pub e_wplus_hash: String,
}

#[derive(Debug, Clone)]
pub struct PairedSample {
    pub style_image: Image,
    pub p1: Image,
    pub p2: Image,
    pub p3: Image,
    pub z1: LatentCode,
    pub z2: LatentCode,
    pub w1: LatentCode,
    pub w2: LatentCode,
    pub w3: LatentCode,
    pub meta: SampleMeta,
}

impl PairedSample {
    pub fn w(&self, level: PairLevel) -> &LatentCode {
        match level {
            PairLevel::One => &self.w1,
            PairLevel::Two => &self.w2,
            PairLevel::Three => &self.w3,
        }
    }

    pub fn p(&self, level: PairLevel) -> &Image {
        match level {
            PairLevel::One => &self.p1,
            PairLevel::Two => &self.p2,
            PairLevel::Three => &self.p3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedInput {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub style_name: String,
    pub level_default: PairLevel,
    pub config: GeneratorConfig,
    pub samples: Vec<String>,
    pub sample_hashes: BTreeMap<String, String>,
    pub skipped: Vec<SkippedInput>,
    pub generator_hash: String,
    pub g_star_hash: String,
    pub dataset_hash: String,
}

const DATASET_KIND: &str = "pair_dataset";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub style_name: String,
    pub level_default: PairLevel,
    pub samples: Vec<PairedSample>,
    pub manifest: DatasetManifest,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Reads a dataset written by [`build_pair_dataset`] and checks every
    /// sample against the manifest hash.
    pub fn load(pairs_dir: impl AsRef<Path>) -> Result<Self> {
        let dir = pairs_dir.as_ref();
        let path = dir.join(MANIFEST);
        let manifest: DatasetManifest = crate::checkpoint::read_manifest(
            dir,
            DATASET_KIND,
            &["style_name", "level_default", "samples", "sample_hashes", "dataset_hash"],
        )?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for id in &manifest.samples {
            let sdir = dir.join(id);
            let hash = sample_hash(&sdir)?;
            if manifest.sample_hashes.get(id) != Some(&hash) {
                return Err(Error::load(&path, "sample_hashes", format!("sample `{id}` does not match its recorded hash")));
            }
            samples.push(read_sample(&sdir)?);
        }
        if dataset_hash(&manifest.sample_hashes) != manifest.dataset_hash {
            return Err(Error::load(&path, "dataset_hash", "does not match sample hashes"));
        }
        if samples.is_empty() {
            return Err(Error::EmptyDataset(format!("{} holds no pair samples", dir.display())));
        }
        Ok(Self {
            style_name: manifest.style_name.clone(),
            level_default: manifest.level_default,
            samples,
            manifest,
        })
    }

    /// `N×L×d` stacked codes of one level.
    pub fn codes(&self, level: PairLevel) -> Result<Tensor> {
        let rows: Vec<Tensor> = self.samples.iter().map(|s| s.w(level).values().clone()).collect();
        Ok(Tensor::stack(&rows, 0)?)
    }

    pub fn style_images(&self) -> Vec<Image> {
        self.samples.iter().map(|s| s.style_image.clone()).collect()
    }
}

/// Recomputes the dataset hash of a pairs directory from the files on disk.
pub fn verify_dataset(pairs_dir: impl AsRef<Path>) -> Result<bool> {
    let dir = pairs_dir.as_ref();
    let manifest: DatasetManifest = crate::checkpoint::read_manifest(dir, DATASET_KIND, &["sample_hashes", "dataset_hash"])?;
    let mut hashes = BTreeMap::new();
    for id in &manifest.samples {
        hashes.insert(id.clone(), sample_hash(&dir.join(id))?);
    }
    Ok(hashes == manifest.sample_hashes && dataset_hash(&hashes) == manifest.dataset_hash)
}

fn dataset_hash(sample_hashes: &BTreeMap<String, String>) -> String {
    let mut s = String::new();
    for (id, h) in sample_hashes {
        s.push_str(id);
        s.push(':');
        s.push_str(h);
        s.push('\n');
    }
    sha256_hex(s.as_bytes())
}

const SAMPLE_FILES: [&str; 10] = [
    "S.png", "P1.png", "P2.png", "P3.png", "z1.f32", "z2.f32", "w1.f32", "w2.f32", "w3.f32", "meta.json",
];

fn sample_hash(dir: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    for name in SAMPLE_FILES {
        let data = std::fs::read(dir.join(name))?;
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(data.len() as u64).to_le_bytes());
        bytes.extend(data);
    }
    Ok(sha256_hex(&bytes))
}

fn check_role(gen: &Generator, want: GeneratorRole, what: &str) -> Result<()> {
    if gen.role() != want {
        return Err(Error::Config(format!(
            "{what} must have role {}, found {}",
            want.as_str(),
            gen.role().as_str()
        )));
    }
    Ok(())
}

fn check_encoder(enc: &Encoder, want: EncoderTarget, gen: &Generator) -> Result<()> {
    if enc.target() != want {
        return Err(Error::Config(format!(
            "expected a {} encoder, got {}",
            want.as_str(),
            enc.target().as_str()
        )));
    }
    if enc.config() != gen.config() {
        return Err(Error::Config("encoder and generator configs differ".into()));
    }
    Ok(())
}

pub fn embed_level1(s: &Image, e_zplus: &Encoder, g: &Generator) -> Result<(LatentCode, LatentCode, Image)> {
    check_encoder(e_zplus, EncoderTarget::ZPlus, g)?;
    let z1 = e_zplus.encode(s)?;
    let w1 = map_latent(&z1, g)?;
    let p1 = synthesize(&w1, g)?;
    Ok((z1, w1, p1))
}

#[derive(Debug, Clone)]
pub struct Level2 {
    pub z2: LatentCode,
    pub w2: LatentCode,
    pub p2: Image,
    pub initial_loss: f32,
    pub final_loss: f32,
    pub best_iteration: usize,
    pub curve: Vec<f32>,
}

#[allow(clippy::too_many_arguments)]
pub fn optimize_level2(
    z1: &LatentCode,
    s: &Image,
    g_star: &Generator,
    g: &Generator,
    nets: &LossNets,
    iters: usize,
    lr: f64,
    lambda_id: f64,
    on_iter: impl FnMut(usize, f32),
) -> Result<Level2> {
    check_role(g_star, GeneratorRole::UnconstrainedFinetuned, "the optimization generator")?;
    if z1.space() != LatentSpace::ZPlus {
        return Err(Error::InvalidCode(format!("level 2 starts from a ZPlus code, got {}", z1.space())));
    }
    let dec = LatentDecoder::new(g_star, LatentSpace::ZPlus, None)?;
    let target = nets.semantic_target(&s.batch()?)?;
    let out = optimize_latent(&dec, z1.values(), &target, nets, lambda_id, iters, lr, "level-2 optimization", on_iter)?;
    let z2 = LatentCode::new(LatentSpace::ZPlus, out.best.clone())?;
    // Decode under the pretrained generator, not G*.
    let w2 = map_latent(&z2, g)?;
    let p2 = synthesize(&w2, g)?;
    Ok(Level2 {
        z2,
        w2,
        p2,
        initial_loss: out.initial_loss(),
        final_loss: out.best_loss,
        best_iteration: out.best_iter,
        curve: out.curve,
    })
}

pub fn refine_level3(s: &Image, e_wplus: &Encoder, g: &Generator) -> Result<(LatentCode, Image)> {
    check_encoder(e_wplus, EncoderTarget::WPlus, g)?;
    let w3 = e_wplus.encode(s)?;
    let p3 = synthesize(&w3, g)?;
    Ok((w3, p3))
}

/// Models the pair builder needs.
#[derive(Clone, Copy)]
pub struct PairModels<'a> {
    pub g: &'a Generator,
    pub g_star: &'a Generator,
    pub e_zplus: &'a Encoder,
    pub e_wplus: &'a Encoder,
    pub nets: &'a LossNets,
}

/// Progress of one sample: `(id, level-2 iterations actually run)`.
pub type PairProgress<'a> = &'a mut dyn FnMut(&str, usize);

/// Builds (or resumes) the pair dataset for every PNG in `style_dir`,
/// writing it under `pairs_dir`.
pub fn build_pair_dataset(
    style_dir: impl AsRef<Path>,
    pairs_dir: impl AsRef<Path>,
    style_name: &str,
    models: PairModels,
    cfg: &PairConfig,
    progress: PairProgress,
) -> Result<PairedDataset> {
    let PairModels { g, g_star, e_zplus, e_wplus, .. } = models;
    check_role(g, GeneratorRole::Pretrained, "the decoding generator")?;
    check_role(g_star, GeneratorRole::UnconstrainedFinetuned, "the optimization generator")?;
    if g.config() != g_star.config() {
        return Err(Error::Config("G and G* configs differ".into()));
    }
    check_encoder(e_zplus, EncoderTarget::ZPlus, g)?;
    check_encoder(e_wplus, EncoderTarget::WPlus, g)?;
    let pairs_dir = pairs_dir.as_ref();
    std::fs::create_dir_all(pairs_dir)?;
    let loaded = load_dir(style_dir.as_ref(), g.config().resolution)?;
    if loaded.images.is_empty() {
        return Err(Error::EmptyDataset(format!("no readable style images in {}", style_dir.as_ref().display())));
    }
    let g_hash = g.content_hash()?;
    let g_star_hash = g_star.content_hash()?;
    let hashes = (g_hash.clone(), g_star_hash.clone(), e_zplus.content_hash()?, e_wplus.content_hash()?);

    let mut samples = Vec::new();
    let mut sample_hashes = BTreeMap::new();
    for (path, s) in &loaded.images {
        let id = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let sdir = pairs_dir.join(&id);
        let existing = if sdir.join("meta.json").exists() {
            match read_sample(&sdir) {
                Ok(sample)
                    if sample.meta.generator_hash == hashes.0
                        && sample.meta.g_star_hash == hashes.1
                        && sample.meta.e_zplus_hash == hashes.2
                        && sample.meta.e_wplus_hash == hashes.3
                        && sample.meta.level2_iterations == cfg.iterations =>
                {
                    Some(sample)
                }
                Ok(_) => {
                    log::info!("pair sample {id} was built from other models; rebuilding");
                    None
                }
                Err(e) => {
                    log::warn!("pair sample {id} is unreadable ({e}); rebuilding");
                    None
                }
            }
        } else {
            None
        };
        let sample = match existing {
            Some(sample) => {
                progress(&id, 0);
                sample
            }
            None => {
                let sample = make_sample(&id, path, s, models, cfg, &hashes)?;
                write_sample(&sdir, &sample)?;
                progress(&id, cfg.iterations);
                sample
            }
        };
        sample_hashes.insert(id.clone(), sample_hash(&sdir)?);
        samples.push(sample);
    }

    let manifest = DatasetManifest {
        kind: DATASET_KIND.into(),
        style_name: style_name.to_string(),
        level_default: cfg.level_default,
        config: *g.config(),
        samples: samples.iter().map(|s| s.meta.id.clone()).collect(),
        dataset_hash: dataset_hash(&sample_hashes),
        sample_hashes,
        skipped: loaded
            .skipped
            .iter()
            .map(|(p, r)| SkippedInput {
                path: p.display().to_string(),
                reason: r.clone(),
            })
            .collect(),
        generator_hash: g_hash,
        g_star_hash,
    };
    let tmp = pairs_dir.join(format!(".{MANIFEST}.tmp"));
    std::fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::rename(&tmp, pairs_dir.join(MANIFEST))?;
    Ok(PairedDataset {
        style_name: style_name.to_string(),
        level_default: cfg.level_default,
        samples,
        manifest,
    })
}

fn make_sample(
    id: &str,
    path: &Path,
    s: &Image,
    models: PairModels,
    cfg: &PairConfig,
    hashes: &(String, String, String, String),
) -> Result<PairedSample> {
    let PairModels { g, g_star, e_zplus, e_wplus, nets } = models;
    let (z1, w1, p1) = embed_level1(s, e_zplus, g)?;
    let l2 = optimize_level2(&z1, s, g_star, g, nets, cfg.iterations, cfg.lr, cfg.lambda_id, |_, _| {})?;
    let (w3, p3) = refine_level3(s, e_wplus, g)?;
    let mut codes = BTreeMap::new();
    for (name, c) in [("z1", &z1), ("z2", &l2.z2), ("w1", &w1), ("w2", &l2.w2), ("w3", &w3)] {
        codes.insert(
            name.to_string(),
            CodeShape {
                space: c.space(),
                rows: c.rows(),
                cols: c.dim(),
            },
        );
    }
    let meta = SampleMeta {
        id: id.to_string(),
        source: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        codes,
        level2_iterations: cfg.iterations,
        level2_lr: cfg.lr,
        lambda_id: cfg.lambda_id,
        level2_initial_loss: l2.initial_loss,
        level2_final_loss: l2.final_loss,
        level2_best_iteration: l2.best_iteration,
        generator_hash: hashes.0.clone(),
        g_star_hash: hashes.1.clone(),
        e_zplus_hash: hashes.2.clone(),
        e_wplus_hash: hashes.3.clone(),
    };
    Ok(PairedSample {
        style_image: s.clone(),
        p1,
        p2: l2.p2,
        p3,
        z1,
        z2: l2.z2,
        w1,
        w2: l2.w2,
        w3,
        meta,
    })
}

fn write_sample(dir: &Path, s: &PairedSample) -> Result<()> {
    let tmp = temp_sibling(dir);
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    for (name, img) in [("S", &s.style_image), ("P1", &s.p1), ("P2", &s.p2), ("P3", &s.p3)] {
        img.save_png(tmp.join(format!("{name}.png")))?;
    }
    for (name, c) in [("z1", &s.z1), ("z2", &s.z2), ("w1", &s.w1), ("w2", &s.w2), ("w3", &s.w3)] {
        std::fs::write(tmp.join(format!("{name}.f32")), c.to_le_bytes())?;
    }
    std::fs::write(tmp.join("meta.json"), serde_json::to_vec_pretty(&s.meta)?)?;
    replace_dir(&tmp, dir)
}

pub fn read_sample(dir: &Path) -> Result<PairedSample> {
    let meta_path = dir.join("meta.json");
    let meta: SampleMeta = serde_json::from_slice(&std::fs::read(&meta_path)?)
        .map_err(|e| Error::load(&meta_path, "meta", e))?;
    let code = |name: &str| -> Result<LatentCode> {
        let shape = meta
            .codes
            .get(name)
            .ok_or_else(|| Error::load(&meta_path, format!("codes.{name}"), "missing"))?;
        let bytes = std::fs::read(dir.join(format!("{name}.f32")))?;
        LatentCode::from_le_bytes(shape.space, shape.rows, shape.cols, &bytes)
            .map_err(|e| Error::load(dir.join(format!("{name}.f32")), name, e))
    };
    let img = |name: &str| Image::load_png(dir.join(format!("{name}.png")));
    Ok(PairedSample {
        style_image: img("S")?,
        p1: img("P1")?,
        p2: img("P2")?,
        p3: img("P3")?,
        z1: code("z1")?,
        z2: code("z2")?,
        w1: code("w1")?,
        w2: code("w2")?,
        w3: code("w3")?,
        meta,
    })
}

/// Per-level check that the stored image regenerates from the stored code:
/// `synthesize(w_i, G)` quantized to 8 bits equals the stored PNG.
pub fn regenerates(sample: &PairedSample, g: &Generator) -> Result<[bool; 3]> {
    let mut out = [false; 3];
    for (i, level) in PairLevel::ALL.iter().enumerate() {
        let img = synthesize(sample.w(*level), g)?;
        out[i] = img.to_rgb8() == sample.p(*level).to_rgb8();
    }
    Ok(out)
}

/// Directory holding the pairs of a style directory.
pub fn default_pairs_dir(style_dir: impl AsRef<Path>) -> PathBuf {
    style_dir.as_ref().join("pairs")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_level_parsing_and_serde() {
        assert_eq!("2".parse::<PairLevel>().unwrap(), PairLevel::Two);
        assert!("4".parse::<PairLevel>().is_err());
        assert_eq!(serde_json::to_string(&PairLevel::Three).unwrap(), "3");
        assert_eq!(serde_json::from_str::<PairLevel>("1").unwrap(), PairLevel::One);
        assert!(serde_json::from_str::<PairLevel>("0").is_err());
    }

    #[test]
    fn dataset_hash_depends_on_every_sample() {
        let mut a = BTreeMap::new();
        a.insert("x".to_string(), "1".to_string());
        a.insert("y".to_string(), "2".to_string());
        let h = dataset_hash(&a);
        a.insert("y".to_string(), "3".to_string());
        assert_ne!(h, dataset_hash(&a));
    }
}
