use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Bound, Graph, Var};
use super::tensor::ParamSet;
use crate::error::{invalid, Error, Result};

/// Outcome of a finite-difference audit.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter, flat index, analytic, central difference)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare tape gradients of `loss_fn` against central differences.
///
/// `loss_fn` must build the same scalar on every call (all randomness frozen).
/// At most `max_coords` coordinates are sampled with `seed`; the error per
/// coordinate is `|a − c| / (|a| + |c| + 1e-12)`.
pub fn finite_difference_check<F>(
    loss_fn: F,
    params: &ParamSet,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let b = g.bind(p);
        let loss = loss_fn(&mut g, &b)?;
        g.scalar(loss)
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Nondeterministic { first, second });
    }

    let mut g = Graph::new();
    let b = g.bind(params);
    let loss = loss_fn(&mut g, &b)?;
    let analytic = g.grads(loss, &b)?;

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.clone(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(&mut rng, coords.len(), max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: picks.len(), worst: None };
    let mut probe = params.clone();
    for k in picks {
        let (name, idx) = &coords[k];
        let orig = params.get(name).unwrap().data()[*idx];
        probe.get_mut(name).unwrap().data_mut()[*idx] = orig + eps;
        let up = eval(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[*idx] = orig - eps;
        let down = eval(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[*idx] = orig;

        let central = (up - down) / (2.0 * eps);
        let a = analytic.get(name).unwrap().data()[*idx];
        let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((name.clone(), *idx, a, central));
        }
    }
    Ok(report)
}
