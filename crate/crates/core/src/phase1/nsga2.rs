//! Constrained non-dominated sorting and crowding-distance survival.
//!
//! Feasible points dominate infeasible ones, and among infeasible points the
//! smaller violation wins. Feasible points compare by Pareto dominance on
//! (maximize score, minimize memory).

use std::cmp::Ordering;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objectives {
    pub score: f64,
    pub memory: f64,
    pub violation: f64,
}

impl Objectives {
    pub fn feasible(score: f64, memory: f64) -> Self {
        Objectives {
            score,
            memory,
            violation: 0.0,
        }
    }
}

/// Constrained domination: does `a` dominate `b`?
pub fn dominates(a: &Objectives, b: &Objectives) -> bool {
    match (a.violation > 0.0, b.violation > 0.0) {
        (false, true) => true,
        (true, false) => false,
        (true, true) => a.violation < b.violation,
        (false, false) => {
            a.score >= b.score && a.memory <= b.memory && (a.score > b.score || a.memory < b.memory)
        }
    }
}

/// Fast non-dominated sort. Each front lists indices in ascending order.
pub fn non_dominated_fronts(points: &[Objectives]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut domination_count = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates(&points[i], &points[j]) {
                dominated_by_me[i].push(j);
                domination_count[j] += 1;
            } else if dominates(&points[j], &points[i]) {
                dominated_by_me[j].push(i);
                domination_count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| domination_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by_me[i] {
                domination_count[j] -= 1;
                if domination_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of `front` (same order). Boundary points
/// on either objective get infinity.
pub fn crowding_distance(points: &[Objectives], front: &[usize]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let objectives: [fn(&Objectives) -> f64; 2] = [|o| o.score, |o| o.memory];
    for key in objectives {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            key(&points[front[a]])
                .total_cmp(&key(&points[front[b]]))
                .then(front[a].cmp(&front[b]))
        });
        let lo = key(&points[front[order[0]]]);
        let hi = key(&points[front[order[n - 1]]]);
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        if hi - lo <= 0.0 {
            continue;
        }
        for k in 1..n - 1 {
            let prev = key(&points[front[order[k - 1]]]);
            let next = key(&points[front[order[k + 1]]]);
            dist[order[k]] += (next - prev) / (hi - lo);
        }
    }
    dist
}

/// Survivor ranking information for one selected individual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub front: usize,
    pub crowding: f64,
}

/// Picks `target` survivors: whole fronts in order, the last one truncated by
/// descending crowding distance (ties by lower index).
pub fn nsga2_select(points: &[Objectives], target: usize) -> Vec<Ranked> {
    let mut out = Vec::with_capacity(target.min(points.len()));
    for (rank, front) in non_dominated_fronts(points).into_iter().enumerate() {
        if out.len() >= target {
            break;
        }
        let crowd = crowding_distance(points, &front);
        let mut members: Vec<(usize, f64)> = front.into_iter().zip(crowd).collect();
        if out.len() + members.len() > target {
            members.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
            members.truncate(target - out.len());
            members.sort_by_key(|m| m.0);
        }
        out.extend(members.into_iter().map(|(index, crowding)| Ranked {
            index,
            front: rank,
            crowding,
        }));
    }
    out
}

/// Crowded-comparison order: lower front, then larger crowding distance.
pub fn crowded_better(a: &Ranked, b: &Ranked) -> bool {
    a.front < b.front || (a.front == b.front && a.crowding > b.crowding)
}
