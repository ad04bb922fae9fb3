//! Finite-difference validation of reverse-mode gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::{Graph, ParamStore, Result, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_per_param: Option<usize>,
    /// Lower bound of the relative-error denominator, so vanishing
    /// gradients are compared absolutely at `floor` scale.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_per_param: None,
            floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares gradients of the scalar built by `f` against central finite
/// differences, over every trainable parameter of `store`.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn gradcheck<Fun>(store: &ParamStore<f64>, opts: GradcheckOptions, f: Fun) -> Result<GradcheckReport>
where
    Fun: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = f(&mut g)?;
        Ok(g.value(loss).data()[0])
    };
    let mut work = store.clone();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let numel = store.tensor(id).numel();
        let grad = analytic.get_or_zeros(id, numel);
        let picks: Vec<usize> = match opts.max_per_param {
            Some(m) if m < numel => (0..m).map(|i| i * numel / m).collect(),
            _ => (0..numel).collect(),
        };
        for idx in picks {
            let orig = store.tensor(id).data()[idx];
            work.get_mut(id).tensor.data_mut()[idx] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(id).tensor.data_mut()[idx] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(id).tensor.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad[idx];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.get(id).name.clone(), idx));
            }
        }
    }
    Ok(report)
}
