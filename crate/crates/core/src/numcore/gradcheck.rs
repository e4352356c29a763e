//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;

use crate::error::Result;
use crate::numcore::rng::stream;
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

/// A scalar function of a list of parameter tensors.
pub trait Objective {
    fn loss(&mut self, params: &[Tensor]) -> Result<f64>;

    /// Loss plus the analytic gradient of every parameter, flattened.
    fn loss_and_grad(&mut self, params: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>;
}

/// Adapts a tape-building closure into an [`Objective`].
///
/// The closure receives one `requires_grad` leaf per parameter, in order,
/// and returns the scalar loss node.
pub struct TapeObjective<F>(pub F);

impl<F> Objective for TapeObjective<F>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    fn loss(&mut self, params: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let out = (self.0)(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    }

    fn loss_and_grad(&mut self, params: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let out = (self.0)(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        let flat = vars
            .iter()
            .zip(params)
            .map(|(v, p)| grads.get_or_zeros(*v, p.numel()))
            .collect();
        Ok((tape.scalar(out), flat))
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Checks at most this many randomly chosen coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
    /// Denominator floor for the relative error of near-zero gradients.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_param: None,
            abs_floor: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, abs_floor)` over the checked coordinates.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// False when two evaluations at the same point disagreed.
    pub deterministic: bool,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.deterministic && self.max_rel_error < tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares analytic gradients with `(f(θ+ε) − f(θ−ε)) / 2ε`.
///
/// A loss that is not reproducible at a fixed point is reported as
/// non-deterministic rather than checked.
pub fn grad_check<O: Objective>(
    objective: &mut O,
    names: &[String],
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (l0, analytic) = objective.loss_and_grad(params)?;
    let l1 = objective.loss(params)?;
    if l0.to_bits() != l1.to_bits() {
        return Ok(GradCheckReport {
            params: Vec::new(),
            max_rel_error: f64::INFINITY,
            mean_rel_error: f64::INFINITY,
            deterministic: false,
        });
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => {
                let mut rng = stream(opts.seed, &[pi as u64]);
                let mut idx = sample(&mut rng, n, m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &c in &coords {
            let orig = param.data()[c];
            work[pi].data_mut()[c] = orig + opts.eps;
            let up = objective.loss(&work)?;
            work[pi].data_mut()[c] = orig - opts.eps;
            let down = objective.loss(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[pi][c];
            diff2 += (a - numeric).powi(2);
            an2 += a * a;
            nu2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let denom = (an2.sqrt() + nu2.sqrt()).max(opts.abs_floor);
        checks.push(ParamCheck {
            name: names
                .get(pi)
                .cloned()
                .unwrap_or_else(|| format!("param{pi}")),
            coords_checked: coords.len(),
            rel_error: diff2.sqrt() / denom,
            max_abs_error: max_abs,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let mean_rel_error = if checks.is_empty() {
        0.0
    } else {
        checks.iter().map(|c| c.rel_error).sum::<f64>() / checks.len() as f64
    };
    Ok(GradCheckReport {
        params: checks,
        max_rel_error,
        mean_rel_error,
        deterministic: true,
    })
}
