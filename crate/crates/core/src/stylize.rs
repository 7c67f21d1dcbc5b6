//! General, multimodal and reference-guided stylization.
//!
//! The content path encodes a portrait into `W`, broadcasts it to `W+` and
//! truncates it. Multimodal outputs replace rows `[k, L)` with a truncated
//! mapped `Z+` sample; reference-guided outputs replace them with a cached
//! reference embedding.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderTarget};
use crate::error::{Error, Result};
use crate::generator::{map_latent, sample_z, synthesize, truncate, Generator};
use crate::image::Image;
use crate::inversion::ReferenceEmbedding;
use crate::latent::{broadcast_w, mix_codes, LatentCode, LatentSpace};
use crate::pseudo_pairs::PairLevel;

/// Truncation used for cartoon, anime and every other style.
pub const PSI_CARTOON: f64 = 0.7;
pub const PSI_ANIME: f64 = 0.6;
pub const PSI_OTHER: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StylePolicy {
    pub style_id: String,
    pub generator_ckpt: PathBuf,
    pub truncation_psi: f64,
    pub default_mix_indices: Vec<usize>,
    pub pair_level_used: PairLevel,
}

impl StylePolicy {
    /// Policy with ψ chosen by style family and mixing indices scaled from
    /// the 18-layer defaults to `layer_count`.
    pub fn for_style(style_id: &str, generator_ckpt: PathBuf, layer_count: usize, pair_level_used: PairLevel) -> Self {
        let truncation_psi = match style_id {
            s if s.contains("cartoon") => PSI_CARTOON,
            s if s.contains("anime") => PSI_ANIME,
            _ => PSI_OTHER,
        };
        let default_mix_indices = [6usize, 9, 12]
            .iter()
            .map(|&k| ((k * layer_count) as f64 / 18.0).round() as usize)
            .collect();
        Self {
            style_id: style_id.to_string(),
            generator_ckpt,
            truncation_psi,
            default_mix_indices,
            pair_level_used,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.truncation_psi) {
            return Err(Error::InvalidParameter(format!(
                "style {} has truncation psi {} outside [0, 1]",
                self.style_id, self.truncation_psi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailSource {
    Noise,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub k: usize,
    pub tail_source: TailSource,
    pub truncation_psi: f64,
    pub seed: Option<u64>,
    pub reference_id: Option<String>,
}

impl MixSpec {
    pub fn noise(k: usize, truncation_psi: f64, seed: u64) -> Self {
        Self {
            k,
            tail_source: TailSource::Noise,
            truncation_psi,
            seed: Some(seed),
            reference_id: None,
        }
    }

    pub fn validate(&self, layer_count: usize) -> Result<()> {
        if self.k > layer_count {
            return Err(Error::InvalidParameter(format!("mix index {} exceeds layer count {layer_count}", self.k)));
        }
        if !(0.0..=1.0).contains(&self.truncation_psi) {
            return Err(Error::InvalidParameter(format!("truncation psi {} outside [0, 1]", self.truncation_psi)));
        }
        match self.tail_source {
            TailSource::Noise if self.seed.is_none() => Err(Error::InvalidParameter("noise mixing needs a seed".into())),
            TailSource::Reference if self.reference_id.is_none() => {
                Err(Error::InvalidParameter("reference mixing needs a reference id".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Truncated `W+` content code of a portrait. The `W` encoder is the
/// default; `W+` and `Z+` encoders are accepted for the encoding-space study.
pub fn content_code(image: &Image, psi: f64, enc: &Encoder, g: &Generator) -> Result<LatentCode> {
    if enc.config() != g.config() {
        return Err(Error::Config("encoder and generator configs differ".into()));
    }
    let code = enc.encode(image)?;
    let wplus = match enc.target() {
        EncoderTarget::W => broadcast_w(&code, g.layer_count())?,
        EncoderTarget::WPlus => code,
        EncoderTarget::ZPlus => map_latent(&code, g)?,
    };
    truncate(&wplus, psi, g)
}

pub fn stylize_with_psi(image: &Image, psi: f64, e_w: &Encoder, g: &Generator) -> Result<Image> {
    synthesize(&content_code(image, psi, e_w, g)?, g)
}

pub fn stylize_general(image: &Image, policy: &StylePolicy, e_w: &Encoder, g: &Generator) -> Result<Image> {
    policy.validate()?;
    if e_w.target() != EncoderTarget::W {
        return Err(Error::Config(format!("general stylization needs a w encoder, got {}", e_w.target().as_str())));
    }
    stylize_with_psi(image, policy.truncation_psi, e_w, g)
}

/// Truncated mapped `Z+` sample used as a noise tail.
pub fn noise_tail(seed: u64, psi: f64, g: &Generator) -> Result<LatentCode> {
    let z = sample_z(1, seed, LatentSpace::ZPlus, g.config())?.remove(0);
    truncate(&map_latent(&z, g)?, psi, g)
}

/// The `W+` code a noise-mode mix feeds to synthesis.
pub fn multimodal_code(content: &LatentCode, spec: &MixSpec, g: &Generator) -> Result<LatentCode> {
    spec.validate(g.layer_count())?;
    if spec.tail_source != TailSource::Noise {
        return Err(Error::InvalidParameter("multimodal stylization takes noise tails only".into()));
    }
    let tail = noise_tail(spec.seed.expect("validated"), spec.truncation_psi, g)?;
    mix_codes(content, &tail, spec.k)
}

pub fn stylize_multimodal(image: &Image, e_w: &Encoder, g: &Generator, specs: &[MixSpec]) -> Result<Vec<Image>> {
    specs
        .iter()
        .map(|spec| {
            let content = content_code(image, spec.truncation_psi, e_w, g)?;
            synthesize(&multimodal_code(&content, spec, g)?, g)
        })
        .collect()
}

/// The `W+` code a reference-mode mix feeds to synthesis. The reference
/// tail is used as embedded, without truncation.
pub fn reference_code(content: &LatentCode, reference: &ReferenceEmbedding, k: usize, g: &Generator) -> Result<LatentCode> {
    let tail = broadcast_w(&reference.w_code, g.layer_count())?;
    mix_codes(content, &tail, k)
}

pub fn stylize_reference(
    image: &Image,
    policy: &StylePolicy,
    psi: f64,
    e_w: &Encoder,
    g: &Generator,
    reference: &ReferenceEmbedding,
    k: usize,
) -> Result<Image> {
    if reference.style_id() != policy.style_id {
        return Err(Error::StyleMismatch {
            expected: policy.style_id.clone(),
            found: reference.style_id().to_string(),
        });
    }
    let content = content_code(image, psi, e_w, g)?;
    synthesize(&reference_code(&content, reference, k, g)?, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_psi_by_style_family() {
        let p = StylePolicy::for_style("cartoon", "g".into(), 18, PairLevel::Two);
        assert_eq!(p.truncation_psi, 0.7);
        assert_eq!(p.default_mix_indices, vec![6, 9, 12]);
        assert_eq!(StylePolicy::for_style("anime", "g".into(), 18, PairLevel::Two).truncation_psi, 0.6);
        assert_eq!(StylePolicy::for_style("sketch", "g".into(), 18, PairLevel::Two).truncation_psi, 0.9);
        assert_eq!(StylePolicy::for_style("cartoon", "g".into(), 10, PairLevel::Two).default_mix_indices, vec![3, 5, 7]);
    }

    #[test]
    fn mix_spec_validation() {
        assert!(MixSpec::noise(10, 0.7, 1).validate(10).is_ok());
        assert!(MixSpec::noise(11, 0.7, 1).validate(10).is_err());
        assert!(MixSpec::noise(3, 1.5, 1).validate(10).is_err());
        let r = MixSpec {
            k: 2,
            tail_source: TailSource::Reference,
            truncation_psi: 0.7,
            seed: None,
            reference_id: None,
        };
        assert!(r.validate(10).is_err());
    }
}
