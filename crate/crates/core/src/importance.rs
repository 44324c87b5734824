//! Layer-wise importance signals.
//!
//! `iq` scores how much a layer suffers from low-bit quantization (a
//! Fisher-weighted quantization residual), `ir` scores how much update
//! energy its adapted projections carry (leading singular values of the
//! averaged probe gradient). Both are min-max normalized across layers
//! before use in warm start, proposals and repair.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::Knob;

/// Default spectral cutoff for [`rank_signal`].
pub const DEFAULT_SPECTRAL_CUTOFF: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub iq: Vec<f64>,
    pub ir: Vec<f64>,
    #[serde(default)]
    pub normalized: bool,
}

impl ImportanceProfile {
    pub fn raw(iq: Vec<f64>, ir: Vec<f64>) -> Result<Self> {
        let p = ImportanceProfile {
            iq,
            ir,
            normalized: false,
        };
        p.validate(None)?;
        Ok(p)
    }

    /// Flat profile, already normalized (all 0.5).
    pub fn uniform(layers: usize) -> Self {
        ImportanceProfile {
            iq: vec![0.5; layers],
            ir: vec![0.5; layers],
            normalized: true,
        }
    }

    pub fn len(&self) -> usize {
        self.iq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iq.is_empty()
    }

    pub fn get(&self, knob: Knob, layer: usize) -> f64 {
        match knob {
            Knob::Q => self.iq[layer],
            Knob::R => self.ir[layer],
        }
    }

    pub fn knob(&self, knob: Knob) -> &[f64] {
        match knob {
            Knob::Q => &self.iq,
            Knob::R => &self.ir,
        }
    }

    pub fn validate(&self, layers: Option<usize>) -> Result<()> {
        if self.iq.len() != self.ir.len() {
            return Err(Error::InvalidImportance(format!(
                "iq has {} entries but ir has {}",
                self.iq.len(),
                self.ir.len()
            )));
        }
        if let Some(l) = layers {
            if self.iq.len() != l {
                return Err(Error::InvalidImportance(format!(
                    "expected {l} entries per knob, got {}",
                    self.iq.len()
                )));
            }
        }
        if self.iq.iter().chain(&self.ir).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidImportance(
                "scores must be finite and non-negative".into(),
            ));
        }
        if self.normalized && self.iq.iter().chain(&self.ir).any(|v| *v > 1.0) {
            return Err(Error::InvalidImportance(
                "normalized scores must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: ImportanceProfile = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        p.validate(None)?;
        Ok(p)
    }
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Per-knob min-max normalization to `[0, 1]`; constant vectors map to 0.5.
pub fn normalize_importance(profile: &ImportanceProfile) -> ImportanceProfile {
    ImportanceProfile {
        iq: min_max(&profile.iq),
        ir: min_max(&profile.ir),
        normalized: true,
    }
}

/// Precomputed probe data for one model: per layer, the backbone matrices
/// with their diagonal Fisher proxy, and the averaged probe gradients of
/// the adapted projections.
#[derive(Debug, Clone)]
pub struct ProbeSample {
    pub weight_matrices: Vec<Vec<DMatrix<f64>>>,
    pub fisher_diag: Vec<Vec<DMatrix<f64>>>,
    pub grad_matrices: Vec<Vec<DMatrix<f64>>>,
}

impl ProbeSample {
    pub fn validate(&self) -> Result<()> {
        if self.weight_matrices.len() != self.fisher_diag.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weight layers vs {} fisher layers",
                self.weight_matrices.len(),
                self.fisher_diag.len()
            )));
        }
        for (l, (ws, fs)) in self.weight_matrices.iter().zip(&self.fisher_diag).enumerate() {
            if ws.len() != fs.len() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l}: {} weights vs {} fisher matrices",
                    ws.len(),
                    fs.len()
                )));
            }
            for (i, (w, f)) in ws.iter().zip(fs).enumerate() {
                if w.shape() != f.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {l} matrix {i}: weight {:?} vs fisher {:?}",
                        w.shape(),
                        f.shape()
                    )));
                }
                if !w.iter().chain(f.iter()).all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("layer {l} matrix {i}")));
                }
            }
        }
        Ok(())
    }
}

/// Symmetric absmax quantization over consecutive row-major groups.
pub fn uniform_quantize(matrix: &DMatrix<f64>, bits: u32, group_size: usize) -> DMatrix<f64> {
    assert!(bits >= 2, "bits must be >= 2");
    assert!(group_size >= 1, "group_size must be >= 1");
    let (rows, cols) = matrix.shape();
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    // row-major flattening
    let mut flat: Vec<f64> = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| matrix[(i, j)])
        .collect();
    for group in flat.chunks_mut(group_size) {
        let absmax = group.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if absmax == 0.0 {
            continue;
        }
        let scale = absmax / levels;
        for v in group.iter_mut() {
            *v = scale * (*v / scale).round();
        }
    }
    DMatrix::from_row_slice(rows, cols, &flat)
}

/// Fisher-weighted squared quantization residual at `q_min`, per layer.
pub fn quant_sensitivity(sample: &ProbeSample, q_min: u32, group_size: usize) -> Result<Vec<f64>> {
    sample.validate()?;
    Ok(sample
        .weight_matrices
        .iter()
        .zip(&sample.fisher_diag)
        .map(|(ws, fs)| {
            ws.iter()
                .zip(fs)
                .map(|(w, f)| {
                    let residual = w - uniform_quantize(w, q_min, group_size);
                    f.iter().zip(residual.iter()).map(|(f, e)| f * e * e).sum::<f64>()
                })
                .sum()
        })
        .collect())
}

/// Sum of the `cutoff` largest squared singular values of every averaged
/// gradient matrix in the layer.
pub fn rank_signal(sample: &ProbeSample, cutoff: usize) -> Result<Vec<f64>> {
    if cutoff < 1 {
        return Err(Error::InvalidParameter("spectral cutoff must be >= 1".into()));
    }
    sample
        .grad_matrices
        .iter()
        .enumerate()
        .map(|(l, gs)| {
            gs.iter().enumerate().try_fold(0.0, |acc, (i, g)| {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of layer {l} matrix {i}")));
                }
                if g.is_empty() {
                    return Ok(acc);
                }
                let mut sv: Vec<f64> = g
                    .clone()
                    .try_svd(false, false, 1e-12, 10_000)
                    .ok_or_else(|| Error::NonFinite(format!("svd of layer {l} matrix {i}")))?
                    .singular_values
                    .iter()
                    .copied()
                    .collect();
                sv.sort_by(|a, b| b.total_cmp(a));
                Ok(acc + sv.iter().take(cutoff).map(|s| s * s).sum::<f64>())
            })
        })
        .collect()
}

/// Computes and normalizes both signals from probe data.
pub fn profile_from_probe(
    sample: &ProbeSample,
    q_min: u32,
    group_size: usize,
    cutoff: usize,
) -> Result<ImportanceProfile> {
    let iq = quant_sensitivity(sample, q_min, group_size)?;
    let ir = rank_signal(sample, cutoff)?;
    if iq.len() != ir.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weight layers vs {} gradient layers",
            iq.len(),
            ir.len()
        )));
    }
    Ok(normalize_importance(&ImportanceProfile::raw(iq, ir)?))
}
