//! Where every artifact lives under `--out`, and typed loaders for them.

use std::path::{Path, PathBuf};

use ifgmi_core::data::{PrivateDataset, PublicDataset};
use ifgmi_core::models::{
    load_checkpoint, Classifier, ClassifierReport, Discriminator, Generator, GeneratorArch, ParamMap, PriorReport, Variant,
};
use serde::{Deserialize, Serialize};

use crate::config::Shift;
use crate::error::{CliError, Result};

/// Sidecar of a prior checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorSidecar {
    pub arch: GeneratorArch,
    pub seed: u64,
    pub epochs: usize,
    pub shift_sigma: f64,
    pub public_corpus: String,
    /// Features used for the reported FID, when one was measured.
    pub fid_features: Option<String>,
    /// FID between the public corpus and the private train split.
    pub public_private_fid: Option<f64>,
    pub report: PriorReport,
    pub config_hash: String,
}

/// Sidecar of a classifier checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierSidecar {
    pub variant: Variant,
    pub classes: usize,
    pub seed: u64,
    pub report: ClassifierReport,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

fn require(what: &str, path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::missing(what, path))
    }
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn ablate(&self) -> PathBuf {
        self.root.join("ablate")
    }

    pub fn private(&self) -> (PathBuf, PathBuf) {
        (self.data().join("private.ifgt"), self.data().join("private.json"))
    }

    pub fn public(&self, shift: &Shift) -> (PathBuf, PathBuf) {
        let tag = shift.label();
        (self.data().join(format!("public_{tag}.ifgt")), self.data().join(format!("public_{tag}.json")))
    }

    /// Tensor file and sidecar of model `name` (`prior`, `target`, `eval`, `indep`).
    pub fn model(&self, name: &str) -> (PathBuf, PathBuf) {
        (self.models().join(format!("{name}.ifgt")), self.models().join(format!("{name}.json")))
    }

    pub fn attack_run(&self, label: &str, repeat: usize) -> PathBuf {
        self.root.join("attack").join(label).join(format!("seed_{repeat}"))
    }

    pub fn create(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
    }

    pub fn load_private(&self) -> Result<PrivateDataset> {
        let (t, m) = self.private();
        Ok(PrivateDataset::load(&require("private corpus", t)?, &require("private corpus manifest", m)?)?)
    }

    pub fn load_public(&self, shift: &Shift) -> Result<PublicDataset> {
        let (t, m) = self.public(shift);
        let what = format!("public corpus `{}`", shift.label());
        Ok(PublicDataset::load(&require(&what, t)?, &require(&format!("{what} manifest"), m)?)?)
    }

    /// Checks every named checkpoint exists before any work starts.
    pub fn require_models(&self, names: &[&str]) -> Result<()> {
        for name in names {
            let (t, s) = self.model(name);
            require(&format!("{name} checkpoint"), t)?;
            require(&format!("{name} sidecar"), s)?;
        }
        Ok(())
    }

    pub fn load_classifier(&self, variant: Variant) -> Result<(Classifier<f32>, ClassifierSidecar)> {
        let (t, s) = self.model(variant.name());
        let what = format!("{} checkpoint", variant.name());
        let (params, side): (ParamMap<f32>, ClassifierSidecar) = load_checkpoint(&require(&what, t)?, &require(&what, s)?)?;
        if side.variant != variant {
            return Err(CliError::config(format!("{what} holds a {} classifier", side.variant.name())));
        }
        Ok((Classifier::from_params(variant, side.classes, &params)?, side))
    }

    pub fn load_prior(&self) -> Result<(Generator<f32>, Discriminator<f32>, PriorSidecar)> {
        let (t, s) = self.model("prior");
        let (params, side): (ParamMap<f32>, PriorSidecar) =
            load_checkpoint(&require("prior checkpoint", t)?, &require("prior sidecar", s)?)?;
        let gen = Generator::from_params(side.arch, &params)?;
        let disc = Discriminator::from_params(&params)?;
        Ok((gen, disc, side))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(what: &str, path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(require(what, path.to_path_buf())?)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Writes images with their class labels in the tensor file format.
pub fn save_labeled(path: &Path, images: &ifgmi_core::Tensor<f32>, labels: &[usize]) -> Result<()> {
    let l = ifgmi_core::Tensor::<f32>::from_fn(&[labels.len()], |i| labels[i] as f32);
    Ok(ifgmi_core::io::save(path, &[("images", images), ("labels", &l)])?)
}

pub fn load_labeled(path: &Path) -> Result<(ifgmi_core::Tensor<f32>, Vec<usize>)> {
    let t = ifgmi_core::io::load::<f32>(require("attack output", path.to_path_buf())?)?;
    let images = ifgmi_core::io::find(&t, "images")?;
    let labels = ifgmi_core::io::find(&t, "labels")?.data().iter().map(|&v| v as usize).collect();
    Ok((images, labels))
}
