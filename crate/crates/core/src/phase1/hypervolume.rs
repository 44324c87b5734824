//! Exact 2-D hypervolume in (maximize score, minimize memory) and the
//! relative-improvement stopping rule.

use log::warn;

/// Area dominated by `points` (each `(score, memory)`) inside the box bounded
/// by score 0 and memory `ref_memory`. Points outside the box are skipped.
pub fn hypervolume(points: &[(f64, f64)], ref_memory: f64) -> f64 {
    let mut inside: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|&(p, m)| {
            let ok = p >= 0.0 && m <= ref_memory && p.is_finite() && m.is_finite();
            if !ok {
                warn!("hypervolume: point ({p}, {m}) outside the reference box; excluded");
            }
            ok
        })
        .collect();
    // sweep by memory ascending; higher score first on ties
    inside.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.0.total_cmp(&a.0)));
    let mut best = 0.0f64;
    let mut area = 0.0;
    for (p, m) in inside {
        if p > best {
            area += (p - best) * (ref_memory - m);
            best = p;
        }
    }
    area
}

/// Relative gains `(hv_g - hv_{g-1}) / (hv_{g-1} + eps_den)` along a trace.
pub fn relative_gains(trace: &[f64], eps_den: f64) -> Vec<f64> {
    trace
        .windows(2)
        .map(|w| (w[1] - w[0]) / (w[0] + eps_den))
        .collect()
}

/// True iff the last `patience` relative gains are all below `eps_hv`.
pub fn should_stop_phase1(trace: &[f64], eps_hv: f64, patience: usize, eps_den: f64) -> bool {
    let gains = relative_gains(trace, eps_den);
    if patience == 0 || gains.len() < patience {
        return false;
    }
    gains[gains.len() - patience..].iter().all(|&g| g < eps_hv)
}
