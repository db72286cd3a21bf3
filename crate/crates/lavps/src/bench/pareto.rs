//! Pareto-front extraction over (quality, cost) pairs, both lower-better.

use serde::{Deserialize, Serialize};

/// One non-dominated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub config_id: String,
    pub quality: f64,
    pub cost: f64,
}

/// Indices of the non-dominated points, sorted by (cost, quality). A point
/// is dominated when another is no worse in both coordinates and strictly
/// better in at least one; exact duplicates survive together.
pub fn pareto_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[i]
            .1
            .partial_cmp(&points[j].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                points[i]
                    .0
                    .partial_cmp(&points[j].0)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
    });
    let mut front = Vec::new();
    let mut best_quality_cheaper = f64::INFINITY;
    let mut g = 0;
    while g < order.len() {
        // Process one group of equal cost at a time.
        let cost = points[order[g]].1;
        let mut end = g;
        while end < order.len() && points[order[end]].1 == cost {
            end += 1;
        }
        let group_min_quality = order[g..end]
            .iter()
            .map(|&i| points[i].0)
            .fold(f64::INFINITY, f64::min);
        if group_min_quality < best_quality_cheaper {
            for &i in &order[g..end] {
                if points[i].0 == group_min_quality {
                    front.push(i);
                }
            }
            best_quality_cheaper = group_min_quality;
        }
        g = end;
    }
    front
}

/// Non-dominated subset of labelled points, sorted by cost.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.quality, p.cost)).collect();
    pareto_indices(&pairs)
        .into_iter()
        .map(|i| points[i].clone())
        .collect()
}
