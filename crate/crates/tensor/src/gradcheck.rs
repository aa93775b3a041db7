use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared absolutely at
    /// `tolerance * floor`.
    pub floor: f64,
    pub max_samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-3, tolerance: 1e-4, floor: 1e-3, max_samples_per_param: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub within_tolerance: usize,
    /// `(param index, element, autodiff, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn fraction_within(&self) -> f64 {
        if self.checked == 0 {
            return 1.0;
        }
        self.within_tolerance as f64 / self.checked as f64
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares reverse-mode gradients of a scalar loss against central finite
/// differences in 64-bit precision.
///
/// `build` receives a fresh graph plus one parameter leaf per entry of
/// `params` and must return the scalar loss node.
pub fn grad_check<F>(params: &[Tensor<f64>], build: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>], backward: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.parameter(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let value = g.item(loss);
        if !backward {
            return Ok((value, vec![]));
        }
        g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| g.grad_or_zeros(v)).collect()))
    };

    let (_, analytic) = eval(params, true)?;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, within_tolerance: 0, worst: None };
    let mut work = params.to_vec();

    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if n <= cfg.max_samples_per_param {
            (0..n).collect()
        } else {
            (0..cfg.max_samples_per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in coords {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + cfg.step;
            let (plus, _) = eval(&work, false)?;
            work[pi].data_mut()[j] = orig - cfg.step;
            let (minus, _) = eval(&work, false)?;
            work[pi].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let auto = analytic[pi][j];
            let rel = (auto - numeric).abs() / auto.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel <= cfg.tolerance {
                report.within_tolerance += 1;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, j, auto, numeric));
            }
        }
    }
    Ok(report)
}
