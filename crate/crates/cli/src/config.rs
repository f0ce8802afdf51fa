//! Experiment configuration: one TOML file, unknown keys rejected, every
//! field validated before any compute starts.

use std::fs;
use std::path::{Path, PathBuf};

use negdistill::augment::AugmentConfig;
use negdistill::data::{
    load_cifar_bin, load_image_folder, synth_dataset, CifarVariant, ImageDataset, SynthKind, SynthParams,
};
use negdistill::eval::EvalConfig;
use negdistill::model::ModelConfig;
use negdistill::negatives::NegativeConfig;
use negdistill::train::{LossConfig, TrainConfig, TrainSetup};
use negdistill::Error;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable that prefixes relative output directories.
pub const OUT_ROOT_ENV: &str = "NEGDISTILL_OUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Label used in reports; defaults to the kind or generator name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthParams>,
    /// Keep only the first `limit` images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl DatasetSpec {
    pub fn synthetic(name: &str, generator: SynthKind, n: usize, seed: u64) -> Self {
        Self {
            name: Some(name.into()),
            kind: DatasetKind::Synthetic,
            path: None,
            generator: Some(generator),
            n: Some(n),
            seed: Some(seed),
            synth: None,
            limit: None,
        }
    }

    pub fn display_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match (self.kind, self.generator) {
            (DatasetKind::Synthetic, Some(g)) => format!("{g:?}").to_lowercase(),
            (k, _) => format!("{k:?}").to_lowercase(),
        }
    }

    pub fn validate(&self, path: &str) -> Result<(), Error> {
        let need = |field: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("{path}.{field}"), format!("required for kind {:?}", self.kind)))
            }
        };
        let forbid = |field: &str, present: bool| {
            if present {
                Err(Error::config(format!("{path}.{field}"), format!("not used by kind {:?}", self.kind)))
            } else {
                Ok(())
            }
        };
        match self.kind {
            DatasetKind::Synthetic => {
                need("generator", self.generator.is_some())?;
                need("n", self.n.is_some_and(|n| n > 0))?;
                forbid("path", self.path.is_some())?;
            }
            _ => {
                need("path", self.path.is_some())?;
                forbid("generator", self.generator.is_some())?;
                forbid("n", self.n.is_some())?;
                forbid("synth", self.synth.is_some())?;
                forbid("seed", self.seed.is_some())?;
            }
        }
        if self.limit == Some(0) {
            return Err(Error::config(format!("{path}.limit"), "must be positive"));
        }
        Ok(())
    }

    /// Loads and resizes to `size`. Relative paths resolve against `base`.
    pub fn load(&self, base: &Path, size: usize) -> CliResult<ImageDataset> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let ds = match self.kind {
            DatasetKind::Synthetic => {
                let params = self.synth.clone().unwrap_or_default();
                synth_dataset(
                    self.generator.expect("validated"),
                    self.n.expect("validated"),
                    size,
                    self.seed.unwrap_or(0),
                    &params,
                )?
            }
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
                let variant = if self.kind == DatasetKind::Cifar10 {
                    CifarVariant::C10
                } else {
                    CifarVariant::C100
                };
                let p = resolve(self.path.as_ref().expect("validated"));
                if !p.exists() {
                    return Err(CliError::MissingData(p));
                }
                load_cifar_bin(&p, variant)?.resized(size)
            }
            DatasetKind::Folder => {
                let p = resolve(self.path.as_ref().expect("validated"));
                if !p.is_dir() {
                    return Err(CliError::MissingData(p));
                }
                load_image_folder(&p, size)?
            }
        };
        let ds = match self.limit {
            Some(l) if l < ds.len() => ds.subset(&(0..l).collect::<Vec<_>>()),
            _ => ds,
        };
        Ok(ds.with_source(self.display_name()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub in_dist: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_dist_test: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auxiliary: Option<DatasetSpec>,
    #[serde(default)]
    pub ood: Vec<DatasetSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            in_dist: DatasetSpec::synthetic("stripes", SynthKind::Stripes, 128, 1),
            in_dist_test: Some(DatasetSpec::synthetic("stripes_test", SynthKind::Stripes, 64, 2)),
            auxiliary: Some(DatasetSpec::synthetic("blobs", SynthKind::Blobs, 256, 3)),
            ood: vec![DatasetSpec::synthetic("checker", SynthKind::Checker, 64, 4)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub negatives: NegativeConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            negatives: NegativeConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, file: &Path) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Parse {
            file: file.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Read {
            file: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            model: self.model.clone(),
            augment: self.augment.clone(),
            negatives: self.negatives.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.setup().validate()?;
        self.eval.validate("eval")?;
        self.data.in_dist.validate("data.in_dist")?;
        if let Some(t) = &self.data.in_dist_test {
            t.validate("data.in_dist_test")?;
        }
        if let Some(a) = &self.data.auxiliary {
            a.validate("data.auxiliary")?;
        }
        for (i, o) in self.data.ood.iter().enumerate() {
            o.validate(&format!("data.ood[{i}]"))?;
        }
        let needs_aux = self.negatives.source.needs_auxiliary() && self.loss.negatives_active(self.negatives.source);
        if needs_aux && self.data.auxiliary.is_none() {
            return Err(Error::config(
                "data.auxiliary",
                "the negative source needs an auxiliary dataset",
            ));
        }
        let mut names: Vec<String> = self.data.ood.iter().map(DatasetSpec::display_name).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config("data.ood", format!("duplicate dataset name `{}`", w[0])));
        }
        Ok(())
    }

    /// `--out` beats the config; relative directories are placed under the env root when set.
    pub fn resolve_out_dir(&self, cli_out: Option<&Path>) -> PathBuf {
        let dir = cli_out.map_or_else(|| self.out_dir.clone(), Path::to_path_buf);
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
            _ => dir,
        }
    }
}
