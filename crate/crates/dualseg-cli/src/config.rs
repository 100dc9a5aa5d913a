//! Experiment configuration: one JSON document composing the phantom,
//! training and evaluation settings. A file may name a base `profile`
//! (`desk` or `paper`) and override any subset of keys; unknown keys are
//! rejected after the merge.

use anyhow::{bail, Context, Result};
use dualseg::phantom::PhantomConfig;
use dualseg::pipeline::Locator;
use dualseg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub validation: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DataCounts {
    fn default() -> Self {
        DataCounts { labeled: 4, unlabeled: 16, validation: 2, test: 8, seed: 9000 }
    }
}

/// Ablation toggles: each constraint can be switched independently; the
/// ablate command sweeps the standard ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationToggles {
    pub intra: bool,
    pub inter: bool,
    pub lcont: bool,
    pub ncont: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        AblationToggles { intra: true, inter: true, lcont: true, ncont: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
    pub data: DataCounts,
    pub locator: Locator,
    pub ablation: AblationToggles,
    /// Experiment repetition seeds (network/data seeds derive from each).
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            profile: Profile::Desk,
            phantom: PhantomConfig::desk_hard(),
            train: TrainConfig::desk(),
            data: DataCounts::default(),
            locator: Locator::default(),
            ablation: AblationToggles::default(),
            seeds: vec![1, 2, 3],
        }
    }

    pub fn paper() -> Self {
        ExperimentConfig {
            profile: Profile::Paper,
            phantom: PhantomConfig::paper(),
            train: TrainConfig::paper(),
            data: DataCounts { labeled: 18, unlabeled: 42, validation: 7, test: 21, seed: 9000 },
            locator: Locator::default(),
            ablation: AblationToggles::default(),
            seeds: vec![1, 2, 3],
        }
    }

    /// Applies the ablation toggles to a hybrid-loss config.
    pub fn apply_ablation(&self, cfg: &mut TrainConfig) {
        cfg.loss.enable_intra = self.ablation.intra;
        cfg.loss.enable_inter = self.ablation.inter;
        if !self.ablation.lcont {
            cfg.loss.beta = 0.0;
        }
        if !self.ablation.ncont {
            cfg.loss.gamma = 0.0;
        }
        if !self.ablation.intra && !self.ablation.inter {
            cfg.loss.alpha = 0.0;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate().context("phantom config")?;
        self.train.validate().context("train config")?;
        if self.data.labeled == 0 {
            bail!("data.labeled must be >= 1");
        }
        if self.seeds.is_empty() {
            bail!("seeds must be non-empty");
        }
        Ok(())
    }
}

fn merge_json(base: &mut serde_json::Value, overlay: &serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Loads a config document: profile defaults first, file keys override,
/// unknown keys rejected. `DUALSEG_SEED` overrides the data seed and the
/// experiment seed list globally.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let overlay: serde_json::Value = match path {
        Some(p) => serde_json::from_str(
            &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => serde_json::json!({}),
    };
    let profile = match overlay.get("profile").and_then(|v| v.as_str()) {
        Some("paper") => Profile::Paper,
        Some("desk") | None => Profile::Desk,
        Some(other) => bail!("unknown profile {other:?} (expected \"desk\" or \"paper\")"),
    };
    let base_cfg = match profile {
        Profile::Desk => ExperimentConfig::desk(),
        Profile::Paper => ExperimentConfig::paper(),
    };
    let mut base = serde_json::to_value(&base_cfg)?;
    merge_json(&mut base, &overlay);
    let mut cfg: ExperimentConfig =
        serde_json::from_value(base).context("config schema (unknown or ill-typed key?)")?;

    if let Ok(seed) = std::env::var("DUALSEG_SEED") {
        let seed: u64 = seed.parse().context("DUALSEG_SEED must be an integer")?;
        cfg.data.seed = seed;
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Derives the per-run trainer seeds from one experiment seed.
pub fn seeded_train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.locator = cfg.locator;
    t.seed_net1 = dualseg::rng::derive_seed(seed, "net1");
    t.seed_net2 = dualseg::rng::derive_seed(seed, "net2");
    t.seed_heads = dualseg::rng::derive_seed(seed, "heads");
    t.seed_data = dualseg::rng::derive_seed(seed, "data");
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn profile_defaults_and_overrides() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"profile": "desk", "train": {{"steps": 42}}, "data": {{"labeled": 2}}}}"#)
            .unwrap();
        let cfg = load_config(Some(f.path())).unwrap();
        assert_eq!(cfg.train.steps, 42);
        assert_eq!(cfg.data.labeled, 2);
        // untouched keys keep profile defaults
        assert_eq!(cfg.train.patch_side, TrainConfig::desk().patch_side);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"train": {{"stepz": 42}}}}"#).unwrap();
        assert!(load_config(Some(f.path())).is_err());
    }

    #[test]
    fn invalid_phantom_shape_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"phantom": {{"side": 32}}}}"#).unwrap();
        let err = load_config(Some(f.path())).unwrap_err();
        assert!(format!("{err:#}").contains("region of interest"), "{err:#}");
    }
}
