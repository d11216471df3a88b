//! Finite-difference verification of tape gradients.

use super::params::ParamSet;
use super::scalar::Scalar;
use super::tape::{NodeId, Tape};
use crate::error::Result;

/// Worst observed deviation for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck<F> {
    pub name: String,
    pub max_rel_err: F,
    /// Flat element index where the worst deviation occurred.
    pub worst_index: usize,
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport<F> {
    pub per_param: Vec<ParamCheck<F>>,
    pub max_rel_err: F,
    pub tol: F,
}

impl<F: Scalar> GradCheckReport<F> {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    /// One line per parameter, worst first.
    pub fn describe(&self) -> String {
        let mut rows: Vec<&ParamCheck<F>> = self.per_param.iter().collect();
        rows.sort_by(|a, b| {
            b.max_rel_err
                .partial_cmp(&a.max_rel_err)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        rows.iter()
            .map(|p| format!("{}: max rel err {} (elem {})", p.name, p.max_rel_err, p.worst_index))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Relative error with a unit floor, so near-zero gradient pairs compare
/// absolutely instead of blowing up.
fn rel_err<F: Scalar>(a: F, b: F) -> F {
    let denom = F::one().max(a.abs()).max(b.abs());
    (a - b).abs() / denom
}

/// Compares tape gradients of a scalar-valued function against central
/// finite differences with step `h`.
///
/// `build` must construct the loss from the given parameter leaves alone;
/// it is re-invoked for every perturbed evaluation, so it has to be pure.
pub fn grad_check<F: Scalar>(
    build: impl Fn(&mut Tape<F>, &[NodeId]) -> Result<NodeId>,
    params: &ParamSet<F>,
    h: F,
    tol: F,
) -> Result<GradCheckReport<F>> {
    let mut tape = Tape::new();
    let nodes = tape.params(params)?;
    let loss = build(&mut tape, &nodes)?;
    let analytic = tape.backward(loss)?;

    let eval = |set: &ParamSet<F>| -> Result<F> {
        let mut t = Tape::new();
        let n = t.params(set)?;
        let l = build(&mut t, &n)?;
        Ok(t.scalar_value(l))
    };

    let two_h = F::of(2.0) * h;
    let mut per_param = Vec::with_capacity(params.len());
    let mut overall = F::zero();
    let mut scratch = params.clone();
    for slot in 0..params.len() {
        let mut worst = F::zero();
        let mut worst_index = 0;
        for i in 0..params.tensor(slot).len() {
            let orig = scratch.tensor(slot).data()[i];
            scratch.tensor_mut(slot).data_mut()[i] = orig + h;
            let plus = eval(&scratch)?;
            scratch.tensor_mut(slot).data_mut()[i] = orig - h;
            let minus = eval(&scratch)?;
            scratch.tensor_mut(slot).data_mut()[i] = orig;
            let numeric = (plus - minus) / two_h;
            let err = rel_err(analytic.slot(slot).data()[i], numeric);
            if err > worst {
                worst = err;
                worst_index = i;
            }
        }
        if worst > overall {
            overall = worst;
        }
        per_param.push(ParamCheck {
            name: params.name(slot).to_string(),
            max_rel_err: worst,
            worst_index,
        });
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: overall,
        tol,
    })
}
