//! Everything needed to reproduce a run, serialized next to its outputs.

use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{synthetic_importance, Backend, ExternalBackend, SyntheticBackend, SyntheticLatent};
use crate::feasibility::Budget;
use crate::importance::ImportanceProfile;
use crate::phase1::Phase1Params;
use crate::phase2::Phase2Params;
use crate::space::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSpec {
    Bytes(u64),
    /// Position between the all-minimum and all-maximum footprints.
    Fraction(f64),
}

impl BudgetSpec {
    pub fn resolve(&self, spec: &ModelSpec) -> Result<Budget> {
        match *self {
            BudgetSpec::Bytes(b) => Budget::new(b, spec),
            BudgetSpec::Fraction(f) => Budget::from_fraction(f, spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorSpec {
    Synthetic {
        latent_seed: u64,
        /// Explicit latent; sampled from `latent_seed` when absent.
        #[serde(default)]
        latent: Option<SyntheticLatent>,
        noise_scale: f64,
        tau_learn: f64,
    },
    External {
        command: String,
        timeout_s: f64,
    },
}

impl EvaluatorSpec {
    pub const DEFAULT_TIMEOUT_S: f64 = 3600.0;

    pub fn synthetic(latent_seed: u64) -> Self {
        EvaluatorSpec::Synthetic {
            latent_seed,
            latent: None,
            noise_scale: SyntheticLatent::DEFAULT_NOISE,
            tau_learn: 400.0,
        }
    }

    /// `synthetic` or `exec:<shell command>`.
    pub fn parse(descriptor: &str, latent_seed: u64) -> Result<Self> {
        if descriptor == "synthetic" {
            return Ok(Self::synthetic(latent_seed));
        }
        match descriptor.strip_prefix("exec:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(EvaluatorSpec::External {
                command: cmd.to_string(),
                timeout_s: Self::DEFAULT_TIMEOUT_S,
            }),
            _ => Err(Error::InvalidParameter(format!(
                "evaluator `{descriptor}` is neither `synthetic` nor `exec:<command>`"
            ))),
        }
    }

    /// The synthetic latent for `layers` layers, if this is a synthetic
    /// evaluator.
    pub fn latent(&self, layers: usize) -> Result<Option<SyntheticLatent>> {
        match self {
            EvaluatorSpec::Synthetic {
                latent_seed,
                latent,
                noise_scale,
                tau_learn,
            } => {
                let latent = match latent {
                    Some(l) => l.clone(),
                    None => SyntheticLatent::sample(layers, *latent_seed, *tau_learn).with_noise(*noise_scale),
                };
                if latent.layers() != layers {
                    return Err(Error::DimensionMismatch {
                        expected: layers,
                        actual: latent.layers(),
                    });
                }
                latent.validate()?;
                Ok(Some(latent))
            }
            EvaluatorSpec::External { .. } => Ok(None),
        }
    }

    pub fn backend(&self, spec: &ModelSpec, reference_steps: u64) -> Result<(Box<dyn Backend>, Option<SyntheticBackend>)> {
        match self {
            EvaluatorSpec::Synthetic { .. } => {
                let latent = self.latent(spec.num_layers())?.expect("synthetic");
                let backend = SyntheticBackend::new(latent, &spec.ladders, reference_steps)?;
                Ok((Box::new(backend.clone()), Some(backend)))
            }
            EvaluatorSpec::External { command, timeout_s } => {
                if !(*timeout_s > 0.0) {
                    return Err(Error::InvalidParameter(format!("timeout {timeout_s} must be positive")));
                }
                let backend = ExternalBackend::new(command.clone(), Duration::from_secs_f64(*timeout_s));
                Ok((Box::new(backend), None))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImportanceSpec {
    Uniform,
    File { path: String },
    Profile { profile: ImportanceProfile },
    /// Derived from the synthetic latent with multiplicative log-normal
    /// noise of log-std `noise`.
    Auto { noise: f64 },
}

impl ImportanceSpec {
    pub fn resolve(&self, layers: usize, latent: Option<&SyntheticLatent>, seed: u64) -> Result<ImportanceProfile> {
        let profile = match self {
            ImportanceSpec::Uniform => ImportanceProfile::uniform(layers),
            ImportanceSpec::File { path } => ImportanceProfile::load(path)?,
            ImportanceSpec::Profile { profile } => profile.clone(),
            ImportanceSpec::Auto { noise } => {
                let latent = latent.ok_or_else(|| {
                    Error::InvalidParameter(
                        "`auto` importance needs the synthetic evaluator; pass a profile file instead".into(),
                    )
                })?;
                synthetic_importance(latent, *noise, seed)
            }
        };
        profile.validate(Some(layers))?;
        Ok(profile)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Where the model spec was read from (informational).
    #[serde(default)]
    pub model_path: Option<String>,
    pub model: ModelSpec,
    pub budget: BudgetSpec,
    pub evaluator: EvaluatorSpec,
    pub importance: ImportanceSpec,
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub phase1: Phase1Params,
    #[serde(default)]
    pub phase2: Phase2Params,
}

fn default_workers() -> usize {
    1
}

impl RunManifest {
    /// Synthetic run with default hyperparameters and `auto` importance.
    pub fn synthetic(model: ModelSpec, budget: BudgetSpec, seed: u64, latent_seed: u64) -> Self {
        RunManifest {
            model_path: None,
            model,
            budget,
            evaluator: EvaluatorSpec::synthetic(latent_seed),
            importance: ImportanceSpec::Auto { noise: 0.0 },
            seed,
            workers: 1,
            phase1: Phase1Params::default(),
            phase2: Phase2Params::default(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.phase2.alpha
    }

    pub fn top_steps(&self) -> u64 {
        self.phase1.ladder.top_steps()
    }

    pub fn validate(&self) -> Result<()> {
        self.phase1.validate()?;
        self.phase2.validate()?;
        self.budget.resolve(&self.model)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        m.model.memory_policy.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("run manifest", e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}
