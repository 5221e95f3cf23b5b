//! Central finite-difference gradient checking in 64-bit mode.

use super::{Graph, Tensor, Var};
use crate::rng::Stream;
use std::collections::BTreeMap;

/// Which coordinates of each parameter to check.
#[derive(Debug, Clone, Copy)]
pub enum CoordSelection {
    /// Every coordinate of every parameter.
    All,
    /// A random subset per parameter, for large composite graphs.
    Random { per_param: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub checks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Checks analytic gradients of `build` against central differences
/// `(f(x+h) - f(x-h)) / 2h` per coordinate.
///
/// `build` must deterministically construct a scalar loss from the given
/// parameter leaves. Relative error uses `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(
    build: F,
    params: &BTreeMap<String, Tensor<f64>>,
    h: f64,
    select: CoordSelection,
) -> GradCheckReport
where
    F: Fn(&Graph<f64>, &BTreeMap<String, Var>) -> Var,
{
    let eval = |p: &BTreeMap<String, Tensor<f64>>| -> f64 {
        let g = Graph::new();
        let vars: BTreeMap<String, Var> = p
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone(), false)))
            .collect();
        g.value(build(&g, &vars)).item()
    };

    // analytic gradients
    let graph = Graph::new();
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(k, v)| (k.clone(), graph.leaf(v.clone(), true)))
        .collect();
    let root = build(&graph, &vars);
    graph.backward(root).expect("grad_check: backward failed");

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        checks: 0,
    };

    for (name, var) in &vars {
        let analytic = graph
            .grad(*var)
            .unwrap_or_else(|| Tensor::zeros(params[name].shape()));
        let numel = params[name].numel();
        let coords: Vec<usize> = match select {
            CoordSelection::All => (0..numel).collect(),
            CoordSelection::Random { per_param, seed } => {
                let mut s = Stream::tagged(seed, fxhash(name));
                (0..per_param.min(numel))
                    .map(|_| s.below(numel as u64) as usize)
                    .collect()
            }
        };
        for c in coords {
            let base = params[name].data()[c];
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[c] = base + h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[c] = base - h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checks += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_coord = c;
            }
        }
    }
    report
}

fn fxhash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
