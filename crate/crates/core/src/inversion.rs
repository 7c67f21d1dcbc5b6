//! Optimization-based inversion into `Z+`, `W`, `W+` and `V`, the
//! closed-form factorization basis that defines `V`, and a persistent cache
//! of reference embeddings.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use candle_core::{Device, Tensor, Var};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{replace_dir, sha256_hex, temp_sibling};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::image::Image;
use crate::latent::{LatentCode, LatentSpace};
use crate::losses::{LossNets, SemanticTarget, LAMBDA_ID};
use crate::optim::{finite_scalar, Adam};

pub const DEFAULT_BASIS_SIZE: usize = 64;

/// Orthonormal `d×k` basis of semantic directions anchored at the mean
/// latent. Columns are eigenvectors of `AᵀA`, `A` stacking every
/// style-affine weight, sorted by decreasing eigenvalue.
#[derive(Debug, Clone)]
pub struct SefaBasis {
    basis: Tensor,
    anchor: Tensor,
    eigenvalues: Vec<f64>,
}

impl SefaBasis {
    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    pub fn anchor(&self) -> &Tensor {
        &self.anchor
    }

    pub fn k(&self) -> usize {
        self.basis.dims()[1]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `anchor + basis·v` for a `N×k` batch of coefficients.
    pub fn to_w_tensor(&self, v: &Tensor) -> Result<Tensor> {
        Ok(v.matmul(&self.basis.t()?)?.broadcast_add(&self.anchor)?)
    }

    pub fn to_w(&self, v: &LatentCode) -> Result<LatentCode> {
        if v.space() != LatentSpace::V || v.dim() != self.k() {
            return Err(Error::InvalidCode(format!(
                "expected a 1×{} V code, got {} with dim {}",
                self.k(),
                v.space(),
                v.dim()
            )));
        }
        LatentCode::new(LatentSpace::W, self.to_w_tensor(v.values())?)
    }

    /// Hash of basis and anchor bytes.
    pub fn content_hash(&self) -> Result<String> {
        let mut bytes = Vec::new();
        for t in [&self.basis, &self.anchor] {
            for v in t.flatten_all()?.to_vec1::<f32>()? {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(sha256_hex(&bytes))
    }
}

pub fn sefa_basis(gen: &Generator, k: usize) -> Result<SefaBasis> {
    let d = gen.config().latent_dim;
    if k == 0 || k > d {
        return Err(Error::InvalidParameter(format!("basis size {k} must be in 1..={d}")));
    }
    let mut gram = DMatrix::<f64>::zeros(d, d);
    for w in gen.style_affine_weights()? {
        let (rows, cols) = w.dims2()?;
        let a = DMatrix::from_row_slice(rows, cols, &w.flatten_all()?.to_vec1::<f32>()?).map(f64::from);
        gram += a.transpose() * &a;
    }
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut data = vec![0f32; d * k];
    let mut eigenvalues = Vec::with_capacity(k);
    for (j, &col) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(col);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = v.iter().copied().fold(0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            data[i * k + j] = (sign * v[i]) as f32;
        }
        eigenvalues.push(eig.eigenvalues[col]);
    }
    Ok(SefaBasis {
        basis: Tensor::from_vec(data, (d, k), &Device::Cpu)?,
        anchor: gen.w_mean()?,
        eigenvalues,
    })
}

/// Decodes raw code tensors of one latent space through a generator.
#[derive(Clone, Copy)]
pub struct LatentDecoder<'a> {
    gen: &'a Generator,
    space: LatentSpace,
    basis: Option<&'a SefaBasis>,
}

impl<'a> LatentDecoder<'a> {
    pub fn new(gen: &'a Generator, space: LatentSpace, basis: Option<&'a SefaBasis>) -> Result<Self> {
        match space {
            LatentSpace::ZPlus | LatentSpace::W | LatentSpace::WPlus => {}
            LatentSpace::V if basis.is_some() => {}
            LatentSpace::V => return Err(Error::InvalidParameter("V-space decoding needs a basis".into())),
            LatentSpace::Z => return Err(Error::InvalidParameter("inversion into Z is not supported".into())),
        }
        Ok(Self { gen, space, basis })
    }

    pub fn space(&self) -> LatentSpace {
        self.space
    }

    /// Initial code: zeros for `Z+` and `V`, the mean latent for `W`/`W+`.
    pub fn start(&self) -> Result<Tensor> {
        let d = self.gen.config().latent_dim;
        let l = self.gen.layer_count();
        Ok(match self.space {
            LatentSpace::ZPlus => Tensor::zeros((l, d), candle_core::DType::F32, &Device::Cpu)?,
            LatentSpace::W => self.gen.w_mean()?,
            LatentSpace::WPlus => self.gen.w_mean()?.broadcast_as((l, d))?.contiguous()?,
            LatentSpace::V => {
                let k = self.basis.expect("checked in new").k();
                Tensor::zeros((1, k), candle_core::DType::F32, &Device::Cpu)?
            }
            LatentSpace::Z => unreachable!("rejected in new"),
        })
    }

    /// `rows×cols` code → `W+` rows, `L×d`.
    pub fn to_wplus(&self, code: &Tensor) -> Result<Tensor> {
        let l = self.gen.layer_count();
        let d = self.gen.config().latent_dim;
        Ok(match self.space {
            LatentSpace::ZPlus => self.gen.map_batch(code)?,
            LatentSpace::WPlus => code.clone(),
            LatentSpace::W => code.broadcast_as((l, d))?.contiguous()?,
            LatentSpace::V => self
                .basis
                .expect("checked in new")
                .to_w_tensor(code)?
                .broadcast_as((l, d))?
                .contiguous()?,
            LatentSpace::Z => unreachable!("rejected in new"),
        })
    }

    /// `rows×cols` code → `1×3×R×R` image.
    pub fn decode(&self, code: &Tensor) -> Result<Tensor> {
        self.gen.synthesize_batch(&self.to_wplus(code)?.unsqueeze(0)?)
    }
}

/// Semantic objective of one code against a cached target (scalar tensor).
pub fn objective(dec: &LatentDecoder, code: &Tensor, target: &SemanticTarget, nets: &LossNets, lambda_id: f64) -> Result<Tensor> {
    Ok(nets.semantic_to(&dec.decode(code)?, target, lambda_id)?.mean_all()?)
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub best: Tensor,
    pub best_loss: f32,
    pub best_iter: usize,
    /// Loss at every evaluated iterate; entry 0 is the start.
    pub curve: Vec<f32>,
    /// Optimizer updates performed.
    pub steps: usize,
}

impl OptimOutcome {
    pub fn initial_loss(&self) -> f32 {
        self.curve[0]
    }
}

/// Adam on the semantic objective from `start`, evaluating the start and
/// every one of `iters` updates and returning the best iterate.
pub fn optimize_latent(
    dec: &LatentDecoder,
    start: &Tensor,
    target: &SemanticTarget,
    nets: &LossNets,
    lambda_id: f64,
    iters: usize,
    lr: f64,
    label: &str,
    mut on_iter: impl FnMut(usize, f32),
) -> Result<OptimOutcome> {
    if iters == 0 {
        return Err(Error::InvalidParameter("iterations must be at least 1".into()));
    }
    if dec.gen.is_tracking() {
        return Err(Error::InvalidParameter("generator must be frozen during latent optimization".into()));
    }
    let var = Var::from_tensor(&start.copy()?)?;
    let mut opt = Adam::new(vec![var.clone()], lr)?;
    let mut curve = Vec::with_capacity(iters + 1);
    let mut best = (f32::INFINITY, 0, start.copy()?);
    for t in 0..=iters {
        let loss = objective(dec, var.as_tensor(), target, nets, lambda_id)?;
        let value = finite_scalar(&loss, || format!("{label} iteration {t}"))?;
        curve.push(value);
        on_iter(t, value);
        if value < best.0 {
            best = (value, t, var.as_tensor().copy()?);
        }
        if t == iters {
            break;
        }
        opt.backward_step(&loss)?;
    }
    Ok(OptimOutcome {
        best: best.2,
        best_loss: best.0,
        best_iter: best.1,
        curve,
        steps: iters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvertConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lambda_id: f64,
    pub basis_size: usize,
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr: 0.02,
            lambda_id: LAMBDA_ID,
            basis_size: DEFAULT_BASIS_SIZE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Inversion {
    pub code: LatentCode,
    pub recon: Image,
    pub curve: Vec<f32>,
    pub start: LatentCode,
    pub steps: usize,
}

pub fn invert(
    image: &Image,
    gen: &Generator,
    space: LatentSpace,
    basis: Option<&SefaBasis>,
    nets: &LossNets,
    cfg: &InvertConfig,
    on_iter: impl FnMut(usize, f32),
) -> Result<Inversion> {
    let dec = LatentDecoder::new(gen, space, basis)?;
    let target = nets.semantic_target(&image.batch()?)?;
    let start = dec.start()?;
    let label = format!("{space} inversion");
    let out = optimize_latent(&dec, &start, &target, nets, cfg.lambda_id, cfg.iterations, cfg.lr, &label, on_iter)?;
    let recon = Image::new(dec.decode(&out.best)?.get(0)?)?;
    Ok(Inversion {
        code: LatentCode::new(space, out.best)?,
        recon,
        curve: out.curve,
        start: LatentCode::new(space, start)?,
        steps: out.steps,
    })
}

/// Digest of an image's 8-bit pixels and size.
pub fn image_hash(image: &Image) -> String {
    let mut bytes = format!("{}x{}:", image.width(), image.height()).into_bytes();
    bytes.extend(image.to_rgb8());
    sha256_hex(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMeta {
    pub style_id: String,
    pub image_hash: String,
    pub basis_size: usize,
    pub latent_dim: usize,
    pub generator_hash: String,
    pub basis_hash: String,
    pub iterations: usize,
    pub final_loss: f32,
    pub created_at: chrono::DateTime<chrono::Utc>,
}

#[derive(Debug, Clone)]
pub struct ReferenceEmbedding {
    pub v_code: LatentCode,
    pub w_code: LatentCode,
    pub meta: ReferenceMeta,
}

impl ReferenceEmbedding {
    pub fn style_id(&self) -> &str {
        &self.meta.style_id
    }

    pub fn image_hash(&self) -> &str {
        &self.meta.image_hash
    }

    /// The reference id used by the service: `<style>/<image hash>`.
    pub fn id(&self) -> String {
        format!("{}/{}", self.meta.style_id, self.meta.image_hash)
    }
}

/// `<root>/<style_id>/<image_hash>/{v.f32, w.f32, meta.json}`.
#[derive(Debug)]
pub struct ReferenceCache {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl ReferenceCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            write_lock: Mutex::new(()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_dir(&self, style_id: &str, image_hash: &str) -> PathBuf {
        self.root.join(style_id).join(image_hash)
    }

    pub fn put(&self, emb: &ReferenceEmbedding) -> Result<()> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let dir = self.entry_dir(emb.style_id(), emb.image_hash());
        let tmp = temp_sibling(&dir);
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        std::fs::write(tmp.join("v.f32"), emb.v_code.to_le_bytes())?;
        std::fs::write(tmp.join("w.f32"), emb.w_code.to_le_bytes())?;
        std::fs::write(tmp.join("meta.json"), serde_json::to_vec_pretty(&emb.meta)?)?;
        replace_dir(&tmp, &dir)
    }

    /// A corrupt entry is logged and reported as a miss.
    pub fn get(&self, style_id: &str, image_hash: &str) -> Option<ReferenceEmbedding> {
        let dir = self.entry_dir(style_id, image_hash);
        if !dir.join("meta.json").exists() {
            return None;
        }
        match Self::read_entry(&dir) {
            Ok(emb) if emb.meta.style_id == style_id && emb.meta.image_hash == image_hash => Some(emb),
            Ok(_) => {
                log::warn!("reference cache entry {} has mismatched keys; ignoring", dir.display());
                None
            }
            Err(e) => {
                log::warn!("reference cache entry {} is unreadable ({e}); ignoring", dir.display());
                None
            }
        }
    }

    fn read_entry(dir: &Path) -> Result<ReferenceEmbedding> {
        let meta: ReferenceMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
        let v_code = LatentCode::from_le_bytes(LatentSpace::V, 1, meta.basis_size, &std::fs::read(dir.join("v.f32"))?)?;
        let w_code = LatentCode::from_le_bytes(LatentSpace::W, 1, meta.latent_dim, &std::fs::read(dir.join("w.f32"))?)?;
        Ok(ReferenceEmbedding { v_code, w_code, meta })
    }

    /// Cached embeddings for one style.
    pub fn list(&self, style_id: &str) -> Vec<ReferenceEmbedding> {
        let Ok(entries) = std::fs::read_dir(self.root.join(style_id)) else {
            return Vec::new();
        };
        let mut hashes: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| !n.starts_with('.'))
            .collect();
        hashes.sort();
        hashes.iter().filter_map(|h| self.get(style_id, h)).collect()
    }
}

/// Returns the cached embedding of `image` or inverts it into `V` and stores
/// it. The second value is the number of optimizer updates performed.
#[allow(clippy::too_many_arguments)]
pub fn embed_reference(
    image: &Image,
    style_id: &str,
    gen: &Generator,
    basis: &SefaBasis,
    nets: &LossNets,
    cfg: &InvertConfig,
    cache: &ReferenceCache,
    on_iter: impl FnMut(usize, f32),
) -> Result<(ReferenceEmbedding, usize)> {
    let hash = image_hash(image);
    let (gen_hash, basis_hash) = (gen.content_hash()?, basis.content_hash()?);
    if let Some(hit) = cache.get(style_id, &hash) {
        if hit.meta.generator_hash == gen_hash && hit.meta.basis_hash == basis_hash {
            return Ok((hit, 0));
        }
        log::info!("cached reference {} was embedded with other models; re-embedding", hit.id());
    }
    let inv = invert(image, gen, LatentSpace::V, Some(basis), nets, cfg, on_iter)?;
    let w_code = basis.to_w(&inv.code)?;
    let emb = ReferenceEmbedding {
        meta: ReferenceMeta {
            style_id: style_id.to_string(),
            image_hash: hash,
            basis_size: basis.k(),
            latent_dim: gen.config().latent_dim,
            generator_hash: gen_hash,
            basis_hash,
            iterations: cfg.iterations,
            final_loss: inv.curve.iter().copied().fold(f32::INFINITY, f32::min),
            created_at: chrono::Utc::now(),
        },
        v_code: inv.code,
        w_code,
    };
    cache.put(&emb)?;
    Ok((emb, inv.steps))
}
