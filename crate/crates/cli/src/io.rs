//! File formats: line-delimited JSON records, the tab-separated category
//! lexicon, config overlays, and checkpoint files.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use semrel_core::checkpoint::{self, Checkpoint};
use semrel_core::config::{Mode, TrainConfig};
use semrel_core::vocab::Category;

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let data = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: bad record", path.display(), i + 1))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_lexicon(path: &Path) -> Result<Vec<(String, Category)>> {
    let data = fs::read_to_string(path)
        .with_context(|| format!("reading lexicon {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in data.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((word, category)) = line.split_once('\t') else {
            bail!("{}:{}: expected 'word<TAB>category'", path.display(), i + 1);
        };
        let category = match category.trim() {
            "attribute" => Category::Attribute,
            "object" => Category::Object,
            "relation" => Category::Relation,
            other => bail!("{}:{}: unknown category '{other}'", path.display(), i + 1),
        };
        out.push((word.trim().to_string(), category));
    }
    Ok(out)
}

pub fn write_lexicon(path: &Path, lexicon: &[(String, Category)]) -> Result<()> {
    let mut out = String::new();
    for (word, category) in lexicon {
        out.push_str(word);
        out.push('\t');
        out.push_str(category.as_str());
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint::encode(ckpt))
        .with_context(|| format!("writing checkpoint {}", path.display()))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    checkpoint::decode(&data).with_context(|| format!("decoding checkpoint {}", path.display()))
}

/// Partial configuration, merged over the preset defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverlay {
    pub epochs_xe: Option<usize>,
    pub epochs_rl: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub max_len: Option<usize>,
    pub n_gmax: Option<usize>,
    pub e: Option<usize>,
    pub d: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub d_a: Option<usize>,
    pub r: Option<usize>,
}

impl ConfigOverlay {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            epochs_xe, epochs_rl, batch_size, learning_rate, beta1, beta2, mode, seed, max_len,
            n_gmax, e, d, n_heads, d_ff, d_a, r
        );
    }
}

pub fn read_config_overlay(path: &Path) -> Result<ConfigOverlay> {
    let data = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&data).with_context(|| format!("parsing config {}", path.display()))
}
