//! Flat TOML config file, merged under command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

/// Every key a config file may set. Each subcommand accepts a subset.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub n: Option<usize>,
    pub size: Option<usize>,
    pub iters: Option<u64>,
    pub batch: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f32>,
    pub no_hfd: Option<bool>,
    pub no_hfa: Option<bool>,
    pub no_fsc: Option<bool>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub levels: Option<usize>,
    pub g_widths: Option<[usize; 5]>,
    pub d_widths: Option<[usize; 4]>,
    pub decoder_width: Option<usize>,
    pub hfd_width: Option<usize>,
    pub log_interval: Option<u64>,
    pub checkpoint_interval: Option<u64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    fn set_keys(&self) -> Vec<&'static str> {
        let present = [
            ("dataset", self.dataset.is_some()),
            ("data_dir", self.data_dir.is_some()),
            ("n", self.n.is_some()),
            ("size", self.size.is_some()),
            ("iters", self.iters.is_some()),
            ("batch", self.batch.is_some()),
            ("seed", self.seed.is_some()),
            ("lr", self.lr.is_some()),
            ("no_hfd", self.no_hfd.is_some()),
            ("no_hfa", self.no_hfa.is_some()),
            ("no_fsc", self.no_fsc.is_some()),
            ("out", self.out.is_some()),
            ("checkpoint", self.checkpoint.is_some()),
            ("levels", self.levels.is_some()),
            ("g_widths", self.g_widths.is_some()),
            ("d_widths", self.d_widths.is_some()),
            ("decoder_width", self.decoder_width.is_some()),
            ("hfd_width", self.hfd_width.is_some()),
            ("log_interval", self.log_interval.is_some()),
            ("checkpoint_interval", self.checkpoint_interval.is_some()),
        ];
        present.into_iter().filter(|p| p.1).map(|p| p.0).collect()
    }

    /// Fail if the file sets a key that `command` does not use.
    pub fn only(&self, command: &str, allowed: &[&str]) -> Result<()> {
        let extra: Vec<_> = self
            .set_keys()
            .into_iter()
            .filter(|k| !allowed.contains(k))
            .collect();
        if !extra.is_empty() {
            bail!("config keys not used by `{command}`: {}", extra.join(", "));
        }
        Ok(())
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "dataset",
    "data_dir",
    "n",
    "size",
    "iters",
    "batch",
    "seed",
    "lr",
    "no_hfd",
    "no_hfa",
    "no_fsc",
    "out",
    "checkpoint",
    "g_widths",
    "d_widths",
    "decoder_width",
    "hfd_width",
    "log_interval",
    "checkpoint_interval",
];
pub const SAMPLE_KEYS: &[&str] = &["checkpoint", "n", "seed", "out"];
pub const DECOMPOSE_KEYS: &[&str] = &["levels", "out"];
pub const SPECTRUM_KEYS: &[&str] = &["size", "out"];
pub const SYNTH_KEYS: &[&str] = &["dataset", "n", "size", "seed", "out"];
