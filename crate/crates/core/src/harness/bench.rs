use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hypergrad::plan_sensitivity;
use crate::models::{CostGradient, ModelKind, ModelParams, SquaredResidualCost};
use crate::ot::{sinkhorn_solve, MarginalWeights, SinkhornConfig};

use super::alloc;
use super::data::{gen_unlabeled_sensing, Noise};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub forward_s: f64,
    pub backward_s: f64,
    pub sinkhorn_iters: usize,
    pub converged: bool,
    /// Heap high-water mark above the starting live size over forward and
    /// backward; `None` without a tracking allocator.
    pub peak_bytes: Option<usize>,
}

/// Time one Sinkhorn solve plus one exact hypergradient on a 50% shuffled
/// linear instance (`e = 10`) per size, with the cost built at a perturbed
/// parameter vector. The backward pass runs even if the solve stops at its
/// iteration cap, since only cost is measured.
pub fn bench_backward(ns: &[usize], epsilon: f64, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let split = gen_unlabeled_sensing(n, 10, Noise::Snr(100.0), 0.5, seed)?;
        let params = ModelParams::new(ModelKind::Linear, split.w_true.map(|w| 0.8 * w + 0.1));
        let model = SquaredResidualCost::new(&params, &split.train)?;
        let cost = model.cost_matrix()?;
        let u = MarginalWeights::uniform(n);
        let cfg = SinkhornConfig::new(epsilon);

        let base = alloc::current_bytes();
        alloc::reset_peak();
        let t0 = Instant::now();
        let sol = sinkhorn_solve(&cost, &u, &u, &cfg)?;
        let t1 = Instant::now();
        let sens = plan_sensitivity(&cost, sol.plan.entries(), epsilon)?;
        let grad = model.contract(&sens);
        let t2 = Instant::now();
        let peak = alloc::peak_bytes().saturating_sub(base);
        std::hint::black_box(&grad);
        rows.push(BenchRow {
            n,
            forward_s: (t1 - t0).as_secs_f64(),
            backward_s: (t2 - t1).as_secs_f64(),
            sinkhorn_iters: sol.iterations,
            converged: sol.converged,
            peak_bytes: alloc::tracking_enabled().then_some(peak),
        });
    }
    Ok(rows)
}

/// Least-squares slope of `log(peak)` against `log(n)`.
pub fn memory_exponent(rows: &[BenchRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.peak_bytes.filter(|&b| b > 0).map(|b| ((r.n as f64).ln(), (b as f64).ln())))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}
