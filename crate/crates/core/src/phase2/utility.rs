//! Min-max scalarization of (score, memory) into a single utility.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub alpha: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub m_min: f64,
    pub m_max: f64,
}

fn normalized(x: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (x - lo) / (hi - lo)
    } else {
        0.5
    }
}

impl UtilitySpec {
    /// Bounds over `(score, memory_bytes)` observations.
    pub fn from_observations<I>(alpha: f64, observations: I) -> Result<Self>
    where
        I: IntoIterator<Item = (f64, u64)>,
    {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidParameter(format!("alpha {alpha} outside [0, 1]")));
        }
        let mut it = observations.into_iter().peekable();
        if it.peek().is_none() {
            return Err(Error::InvalidParameter("utility bounds need at least one record".into()));
        }
        let mut spec = UtilitySpec {
            alpha,
            p_min: f64::INFINITY,
            p_max: f64::NEG_INFINITY,
            m_min: f64::INFINITY,
            m_max: f64::NEG_INFINITY,
        };
        for (p, m) in it {
            let m = m as f64;
            spec.p_min = spec.p_min.min(p);
            spec.p_max = spec.p_max.max(p);
            spec.m_min = spec.m_min.min(m);
            spec.m_max = spec.m_max.max(m);
        }
        Ok(spec)
    }

    pub fn normalized_score(&self, p: f64) -> f64 {
        normalized(p, self.p_min, self.p_max)
    }

    pub fn normalized_memory(&self, m: u64) -> f64 {
        normalized(m as f64, self.m_min, self.m_max)
    }

    pub fn scalarize(&self, p: f64, m: u64) -> f64 {
        self.alpha * self.normalized_score(p) - (1.0 - self.alpha) * self.normalized_memory(m)
    }
}
