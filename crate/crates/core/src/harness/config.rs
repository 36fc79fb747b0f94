use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthdata::{hex, SynthConfig};

/// Model wiring; `Full` is the complete pipeline, the others each remove one part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoTemporalInfo,
    NoTemporalPrompt,
    NoSemanticAlign,
    NoModalityFusion,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoTemporalInfo,
        Variant::NoTemporalPrompt,
        Variant::NoSemanticAlign,
        Variant::NoModalityFusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTemporalInfo => "no_temporal_info",
            Variant::NoTemporalPrompt => "no_temporal_prompt",
            Variant::NoSemanticAlign => "no_semantic_align",
            Variant::NoModalityFusion => "no_modality_fusion",
        }
    }

    pub fn uses_text(self) -> bool {
        self != Variant::NoTemporalPrompt
    }

    pub fn uses_time(self) -> bool {
        self.uses_text() && self != Variant::NoTemporalInfo
    }

    /// Whether the contrastive term enters the training loss.
    pub fn uses_alignment(self) -> bool {
        matches!(self, Variant::Full | Variant::NoTemporalInfo)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: Option<String>,
    pub variant: Variant,
    pub lr0: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Steps trained on the contrastive loss alone before segmentation starts.
    pub align_warmup_steps: usize,
    pub seed: u64,
    pub text_dim: usize,
    pub fusion_dim: usize,
    pub max_len: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub hflip: bool,
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            variant: Variant::Full,
            lr0: 3e-5,
            weight_decay: 1e-6,
            steps: 1000,
            batch_size: 8,
            tau: 0.1,
            lambda: 0.5,
            beta: 0.1,
            align_warmup_steps: 0,
            seed: 1,
            text_dim: 32,
            fusion_dim: 32,
            max_len: 16,
            base_channels: 16,
            num_classes: 3,
            tversky_alpha: 0.5,
            tversky_beta: 0.5,
            hflip: true,
            eval_every: 100,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.beta >= 0.0) {
            return fail(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.tversky_alpha >= 0.0 && self.tversky_beta >= 0.0) {
            return fail("tversky weights must be non-negative".into());
        }
        for (name, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("text_dim", self.text_dim),
            ("fusion_dim", self.fusion_dim),
            ("max_len", self.max_len),
            ("base_channels", self.base_channels),
            ("num_classes", self.num_classes),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.align_warmup_steps > self.steps {
            return fail("align_warmup_steps exceeds steps".into());
        }
        Ok(())
    }

    /// Contrastive weight actually applied under the configured variant.
    pub fn effective_beta(&self) -> f64 {
        if self.variant.uses_alignment() {
            self.beta
        } else {
            0.0
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

/// A flat JSON object holding both run and data-generation keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub run: RunConfig,
    pub synth: SynthConfig,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let known = known_keys();
        if let Some(k) = obj.keys().find(|k| !known.contains(k.as_str())) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        let run: RunConfig =
            serde_json::from_value(value.clone()).map_err(|e| Error::Config(e.to_string()))?;
        let has_organs = obj.contains_key("organs");
        let synth: SynthConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        run.validate()?;
        synth.validate()?;
        if run.num_classes != synth.num_classes() && has_organs {
            return Err(Error::Config(format!(
                "num_classes {} but {} organs configured",
                run.num_classes,
                synth.num_classes()
            )));
        }
        Ok(Self { run, synth })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text)
    }
}

fn known_keys() -> BTreeSet<String> {
    let mut keys = BTreeSet::new();
    for v in [
        serde_json::to_value(RunConfig::default()),
        serde_json::to_value(SynthConfig::default()),
    ] {
        if let Ok(serde_json::Value::Object(m)) = v {
            keys.extend(m.keys().cloned());
        }
    }
    keys
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_file_feeds_both_configs() {
        let cfg =
            ConfigFile::parse(r#"{"steps": 20, "patients": 12, "variant": "no_temporal_info"}"#)
                .unwrap();
        assert_eq!(cfg.run.steps, 20);
        assert_eq!(cfg.run.variant, Variant::NoTemporalInfo);
        assert_eq!(cfg.synth.patients, 12);
        assert_eq!(cfg.run.lr0, RunConfig::default().lr0);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ConfigFile::parse(r#"{"stepz": 20}"#).is_err());
        assert!(ConfigFile::parse(r#"{"lambda": 2.0}"#).is_err());
        assert!(ConfigFile::parse(r#"{"lr0": 0}"#).is_err());
        assert!(ConfigFile::parse(r#"{"patients": 5}"#).is_err());
        assert!(ConfigFile::parse(r#"{"variant": "half"}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
        }
    }
}
