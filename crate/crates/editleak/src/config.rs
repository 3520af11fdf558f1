// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use editleak_core::camouflage::DefenseParams;
use editleak_core::editors::Method;
use editleak_core::kster::AttackConfig;
use editleak_core::worldsim::WorldConfig;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{HarnessError, Result};

/// Which covariance the attacker multiplies `ΔW` by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovMode {
    #[default]
    Exact,
    /// Second moment of this many random keys.
    Estimated(usize),
    /// Exact covariance of a sibling world with this seed.
    Shifted(u64),
}

impl FromStr for CovMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "exact" {
            return Ok(CovMode::Exact);
        }
        let arg = |prefix: &str| s.strip_prefix(prefix).and_then(|r| r.strip_suffix(')')).map(str::trim);
        if let Some(n) = arg("estimated(") {
            return match n.parse::<usize>() {
                Ok(n) if n > 0 => Ok(CovMode::Estimated(n)),
                _ => Err(format!("estimated(n) needs a positive integer, got {n:?}")),
            };
        }
        if let Some(n) = arg("shifted(") {
            return n.parse::<u64>().map(CovMode::Shifted).map_err(|_| format!("shifted(seed) needs a u64, got {n:?}"));
        }
        Err(format!("cov_mode must be exact, estimated(n) or shifted(seed), got {s:?}"))
    }
}

impl fmt::Display for CovMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovMode::Exact => f.write_str("exact"),
            CovMode::Estimated(n) => write!(f, "estimated({n})"),
            CovMode::Shifted(s) => write!(f, "shifted({s})"),
        }
    }
}

impl Serialize for CovMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CovMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn method_de<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Method, D::Error> {
    let s = String::deserialize(d)?;
    Method::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown method {s:?}; expected rome, memit or alphaedit")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    #[serde(deserialize_with = "method_de")]
    pub method: Method,
    pub n_edits: usize,
    pub attack: AttackConfig,
    pub defense: Option<DefenseParams>,
    pub cov_mode: CovMode,
    pub trials: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            method: Method::Memit,
            n_edits: 8,
            attack: AttackConfig::default(),
            defense: None,
            cov_mode: CovMode::Exact,
            trials: 1,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// First line whose key (before `=`) is `key`, for error messages.
fn line_of(src: &str, key: &str) -> Option<usize> {
    src.lines()
        .position(|l| l.split_once('=').is_some_and(|(k, _)| k.trim() == key))
        .map(|i| i + 1)
}

fn at(src: &str, key: &str, msg: impl fmt::Display) -> HarnessError {
    match line_of(src, key) {
        Some(n) => HarnessError::Config(format!("line {n}: {msg}")),
        None => HarnessError::Config(format!("{key}: {msg}")),
    }
}

impl ExperimentConfig {
    /// Parses and validates. Syntax and schema errors carry the TOML
    /// location; invariant violations name the offending line when the key
    /// is present in `src`.
    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate_against(src)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&src).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_against("")
    }

    fn validate_against(&self, src: &str) -> Result<()> {
        if self.n_edits == 0 {
            return Err(at(src, "n_edits", "n_edits must be at least 1"));
        }
        if self.method == Method::Rome && self.n_edits != 1 {
            return Err(at(src, "n_edits", format!("rome edits one fact, n_edits = {}", self.n_edits)));
        }
        if self.trials == 0 {
            return Err(at(src, "trials", "trials must be at least 1"));
        }
        self.world.validate().map_err(|e| HarnessError::Config(format!("[world]: {e}")))?;
        let w = &self.world;
        if self.n_edits > w.n_subjects.min(w.vocab).min(w.d_in).min(w.d_out) {
            return Err(at(src, "n_edits", format!("n_edits = {} does not fit the world", self.n_edits)));
        }
        self.attack.validate().map_err(|e| HarnessError::Config(format!("[attack]: {e}")))?;
        if self.attack.generic_template_id >= w.n_templates {
            return Err(at(src, "generic_template_id", "generic_template_id out of range"));
        }
        if self.attack.subject_candidates.iter().any(|&s| s >= w.n_subjects) {
            return Err(at(src, "subject_candidates", "subject candidate out of range"));
        }
        if self.attack.prompt_candidates.iter().any(|&t| t >= w.n_templates) {
            return Err(at(src, "prompt_candidates", "prompt candidate out of range"));
        }
        if let Some(d) = &self.defense {
            d.validate().map_err(|e| HarnessError::Config(format!("[defense]: {e}")))?;
            if !d.decoy_subject_ids.is_empty() && d.decoy_subject_ids.len() != self.n_edits {
                return Err(at(src, "decoy_subject_ids", "need exactly one decoy per edit"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cov_mode_strings() {
        for (s, m) in [("exact", CovMode::Exact), ("estimated(100)", CovMode::Estimated(100)), ("shifted(7)", CovMode::Shifted(7))] {
            assert_eq!(s.parse::<CovMode>().unwrap(), m);
            assert_eq!(m.to_string(), s);
        }
        for bad in ["estimated(0)", "estimated()", "shifted(-1)", "approx"] {
            assert!(bad.parse::<CovMode>().is_err(), "{bad}");
        }
    }

    #[test]
    fn parses_and_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "method = \"ALPHAEDIT\"\nn_edits = 4\ncov_mode = \"estimated(100)\"\n[world]\nseed = 13\neta = 0.05\n[defense]\nalpha = 3.0\n",
        )
        .unwrap();
        assert_eq!(cfg.method, Method::AlphaEdit);
        assert_eq!(cfg.world.seed, 13);
        assert_eq!(cfg.world.d_in, 128);
        assert_eq!(cfg.cov_mode, CovMode::Estimated(100));
        assert_eq!(cfg.defense.unwrap().lambda, 1e-8);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
        let back = ExperimentConfig::from_toml(&toml::to_string(&cfg_with_defense()).unwrap()).unwrap();
        assert_eq!(back, cfg_with_defense());
    }

    fn cfg_with_defense() -> ExperimentConfig {
        ExperimentConfig { defense: Some(DefenseParams::default()), cov_mode: CovMode::Shifted(3), ..ExperimentConfig::default() }
    }

    #[test]
    fn errors_are_config_errors_with_lines() {
        let e = ExperimentConfig::from_toml("method = \"rome\"\n\nn_edits = 2\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("line 3"), "{e}");
        let e = ExperimentConfig::from_toml("trials = 1\n[world]\nd_inn = 3\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("line 3"), "{e}");
        let e = ExperimentConfig::from_toml("cov_mode = \"approx\"\n").unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
        assert!(ExperimentConfig::from_toml("method = \"sgd\"\n").is_err());
    }
}
