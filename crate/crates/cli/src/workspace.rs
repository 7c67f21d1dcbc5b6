use std::path::{Path, PathBuf};

use portraitgan::encoder::EncoderTarget;
use portraitgan::pseudo_pairs::default_pairs_dir;

/// Paths under a workspace root.
///
/// ```text
/// data/{faces,portraits}/          photo datasets
/// styles/<style>/[pairs/]          style images and their pair dataset
/// models/pretrained/{generator,discriminator}/
/// models/encoders/{w,wplus,zplus}/
/// models/<style>/<name>/           fine-tuned generators (+ <name>.policy.json)
/// runs/<name>/                     training runs
/// cache/references/                reference embeddings
/// reports/                         JSON reports
/// outputs/                         rendered images
/// ```
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn faces(&self) -> PathBuf {
        self.root.join("data/faces")
    }

    pub fn portraits(&self) -> PathBuf {
        self.root.join("data/portraits")
    }

    pub fn style_dir(&self, style: &str) -> PathBuf {
        self.root.join("styles").join(style)
    }

    pub fn pairs_dir(&self, style: &str) -> PathBuf {
        default_pairs_dir(self.style_dir(style))
    }

    pub fn pretrained_generator(&self) -> PathBuf {
        self.root.join("models/pretrained/generator")
    }

    pub fn pretrained_discriminator(&self) -> PathBuf {
        self.root.join("models/pretrained/discriminator")
    }

    pub fn encoder(&self, target: EncoderTarget) -> PathBuf {
        self.root.join("models/encoders").join(target.as_str())
    }

    pub fn style_models(&self, style: &str) -> PathBuf {
        self.root.join("models").join(style)
    }

    pub fn model(&self, style: &str, name: &str) -> PathBuf {
        self.style_models(style).join(name)
    }

    pub fn policy(&self, style: &str, name: &str) -> PathBuf {
        self.style_models(style).join(format!("{name}.policy.json"))
    }

    pub fn run(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }

    pub fn cache(&self) -> PathBuf {
        self.root.join("cache/references")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn outputs(&self) -> PathBuf {
        self.root.join("outputs")
    }

    /// Resolves `path` against the root unless it is absolute.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }
}
