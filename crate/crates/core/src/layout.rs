//! Per-layer mixer assignment of a hybrid model and its replacement history.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MixerKind {
    Mha,
    Mamba,
    /// Ablated mixer; only ever built transiently during importance scoring.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    Mil,
    Random,
}

/// Why and when a layer was converted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Stage index within a staged pipeline (`None` for ad-hoc replacement).
    pub stage: Option<usize>,
    pub init: InitMethod,
    /// Importance method that selected the layer, e.g. `"loo"` or `"mmr"`.
    pub method: Option<String>,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridLayout {
    pub mixers: Vec<MixerKind>,
    pub provenance: Vec<Option<Provenance>>,
}

impl HybridLayout {
    pub fn all_mha(n_layers: usize) -> Self {
        Self {
            mixers: vec![MixerKind::Mha; n_layers],
            provenance: vec![None; n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.mixers.len()
    }

    /// Number of SSM mixers, the `h` of `H1-h/L`.
    pub fn n_mamba(&self) -> usize {
        self.count(MixerKind::Mamba)
    }

    pub fn count(&self, kind: MixerKind) -> usize {
        self.mixers.iter().filter(|m| **m == kind).count()
    }

    pub fn layers_of(&self, kind: MixerKind) -> Vec<usize> {
        self.mixers
            .iter()
            .enumerate()
            .filter(|(_, m)| **m == kind)
            .map(|(i, _)| i)
            .collect()
    }

    /// Shorthand `H1-h/L`.
    pub fn name(&self) -> String {
        format!("H1-{}/{}", self.n_mamba(), self.n_layers())
    }

    /// File-system-safe form of [`Self::name`], `H1-h-L`.
    pub fn file_stem(&self) -> String {
        format!("H1-{}-{}", self.n_mamba(), self.n_layers())
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.mixers.len() != n_layers || self.provenance.len() != n_layers {
            return Err(Error::Layout(format!(
                "layout has {} mixers and {} provenance entries for {n_layers} layers",
                self.mixers.len(),
                self.provenance.len()
            )));
        }
        Ok(())
    }

    /// Identity mixers are transient and must never reach a checkpoint.
    pub fn validate_persistable(&self) -> Result<()> {
        if let Some(l) = self.mixers.iter().position(|m| *m == MixerKind::Identity) {
            return Err(Error::Layout(format!(
                "layer {l} is an identity mixer; ablated models cannot be saved"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for HybridLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [", self.name())?;
        for (i, m) in self.mixers.iter().enumerate() {
            let c = match m {
                MixerKind::Mha => 'A',
                MixerKind::Mamba => 'M',
                MixerKind::Identity => '-',
            };
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str("]")
    }
}
