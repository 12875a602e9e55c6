//! The experiment config file: one TOML document carrying the taxonomy, loss
//! weights, synthetic-scene parameters, trainer settings, and the optional
//! raw-id remap table, shared by every CLI subcommand.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::ClassRemap;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::synth::SynthConfig;
use crate::toytrain::TrainConfig;
use crate::types::{ClassTaxonomy, RiderRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Ignore,
    Stuff,
    Thing,
}

/// One `[[taxonomy.classes]]` entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
    pub kind: ClassKind,
    /// Required for thing classes: post_splitter bound (meters).
    #[serde(default)]
    pub max_extent: Option<f64>,
    /// Required for thing classes: DBSCAN radius (meters).
    #[serde(default)]
    pub merge_eps: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyConfig {
    pub classes: Vec<ClassEntry>,
    #[serde(default)]
    pub rider_rules: Vec<RiderRule>,
}

impl TaxonomyConfig {
    pub fn build(&self) -> Result<ClassTaxonomy> {
        let num_classes = self.classes.len() as u32;
        let mut names = vec![String::new(); self.classes.len()];
        let mut stuff = Vec::new();
        let mut things = Vec::new();
        let mut ignore = None;
        let mut max_extent = BTreeMap::new();
        let mut merge_eps = BTreeMap::new();
        for entry in &self.classes {
            let slot = names.get_mut(entry.id as usize).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "class id {} out of range for {num_classes} classes",
                    entry.id
                ))
            })?;
            if !slot.is_empty() {
                return Err(Error::InvalidConfig(format!("duplicate class id {}", entry.id)));
            }
            *slot = entry.name.clone();
            match entry.kind {
                ClassKind::Ignore => {
                    if ignore.replace(entry.id).is_some() {
                        return Err(Error::InvalidConfig(
                            "exactly one class must be marked ignore".into(),
                        ));
                    }
                }
                ClassKind::Stuff => stuff.push(entry.id),
                ClassKind::Thing => {
                    things.push(entry.id);
                    if let Some(v) = entry.max_extent {
                        max_extent.insert(entry.id, v);
                    }
                    if let Some(v) = entry.merge_eps {
                        merge_eps.insert(entry.id, v);
                    }
                }
            }
        }
        let ignore = ignore
            .ok_or_else(|| Error::InvalidConfig("one class must be marked ignore".into()))?;
        ClassTaxonomy::new(
            num_classes,
            stuff,
            things,
            ignore,
            names,
            max_extent,
            merge_eps,
            self.rider_rules.clone(),
        )
    }
}

/// Top-level experiment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub taxonomy: TaxonomyConfig,
    #[serde(default)]
    pub loss: LossWeights,
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Raw dataset class id → evaluated class id.
    #[serde(default)]
    pub remap: BTreeMap<String, u32>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
        // The loss table is authoritative for training too.
        config.train.weights = config.loss;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn taxonomy(&self) -> Result<ClassTaxonomy> {
        let taxonomy = self.taxonomy.build()?;
        if let Some(synth) = &self.synth {
            synth.validate(&taxonomy)?;
        }
        Ok(taxonomy)
    }

    pub fn remap_table(&self) -> Result<ClassRemap> {
        let mut table = BTreeMap::new();
        for (raw, &mapped) in &self.remap {
            let raw: u32 = raw
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("remap key '{raw}' is not a class id")))?;
            table.insert(raw, mapped);
        }
        Ok(ClassRemap::new(table))
    }
}
