//! Central finite-difference validation of reverse-mode adjoints.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps entries whose true
/// gradient is ~0 from dominating through finite-difference round-off.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub delta: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            delta: 1e-5,
            tolerance: 1e-5,
            floor: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Worst {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Worst>,
    pub passed: bool,
}

impl GradCheck {
    pub fn new(delta: f64, tolerance: f64) -> Self {
        GradCheck {
            delta,
            tolerance,
            ..Default::default()
        }
    }

    /// Checks the adjoints of `build` with respect to every element of
    /// `params` (or only `probes`, given as `(param, element)` pairs).
    ///
    /// `build` receives the graph and the leaf ids of `params` and returns an
    /// output node; non-scalar outputs are contracted with a fixed random
    /// vector so a single backward pass covers them.
    pub fn run<F>(&self, params: &[Tensor<f64>], probes: Option<&[(usize, usize)]>, build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    {
        let eval = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &ids)?;
            Ok((g, ids, out))
        };
        let (mut g, ids, out) = eval(params)?;
        let seed = contraction_seed(g.value(out).shape());
        g.backward_with(out, seed.clone())?;
        let analytic: Vec<Tensor<f64>> = ids
            .iter()
            .zip(params)
            .map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();

        let all: Vec<(usize, usize)>;
        let probes = match probes {
            Some(p) => p,
            None => {
                all = params
                    .iter()
                    .enumerate()
                    .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
                    .collect();
                &all
            }
        };

        let objective = |values: &[Tensor<f64>]| -> Result<f64> {
            let (g, _, out) = eval(values)?;
            Ok(g.value(out).dot(&seed))
        };
        let mut work = params.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            worst: None,
            passed: true,
        };
        for &(pi, ei) in probes {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + self.delta;
            let plus = objective(&work)?;
            work[pi].data_mut()[ei] = orig - self.delta;
            let minus = objective(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * self.delta);
            let a = analytic[pi].data()[ei];
            let err = relative_error(a, numeric, self.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Worst {
                    param: pi,
                    index: ei,
                    analytic: a,
                    numeric,
                });
            }
        }
        report.passed = report.max_rel_error < self.tolerance;
        Ok(report)
    }
}

fn contraction_seed(shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    if n == 1 {
        return Tensor::full(shape, 1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("seed length matches shape")
}
