use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, BoundParams, ParamStore, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct FdProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub probes: Vec<FdProbe>,
}

fn loss_value<S, E, F>(loss_fn: &F, params: &ParamStore<S>) -> Result<f64, E>
where
    S: Scalar,
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape<S>, &BoundParams<'t, S>) -> Result<Var<'t, S>, E>,
{
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape)?;
    Ok(loss_fn(&tape, &bound)?.item().f64())
}

/// Compares analytic gradients against central differences at `n_probe`
/// uniformly drawn scalar parameters.
pub fn finite_difference_check<S, E, F>(
    loss_fn: F,
    params: &ParamStore<S>,
    eps: f64,
    n_probe: usize,
    seed: u64,
) -> Result<FdReport, E>
where
    S: Scalar,
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape<S>, &BoundParams<'t, S>) -> Result<Var<'t, S>, E>,
{
    let total = params.num_scalars();
    if total == 0 {
        return Err(AutodiffError::Invalid("no parameters to probe".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(n_probe);
    for _ in 0..n_probe {
        let mut flat = rng.random_range(0..total);
        let mut idx = 0;
        while flat >= params.at(idx).numel() {
            flat -= params.at(idx).numel();
            idx += 1;
        }
        probes.push((idx, flat));
    }
    finite_difference_probes(loss_fn, params, eps, &probes)
}

/// Same as [`finite_difference_check`] at explicit `(param index, element)`
/// locations.
pub fn finite_difference_probes<S, E, F>(
    loss_fn: F,
    params: &ParamStore<S>,
    eps: f64,
    probes: &[(usize, usize)],
) -> Result<FdReport, E>
where
    S: Scalar,
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape<S>, &BoundParams<'t, S>) -> Result<Var<'t, S>, E>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(AutodiffError::Invalid(format!("eps {eps} outside [1e-7, 1e-3]")).into());
    }
    let tape = Tape::new();
    let bound = params.bind(&tape)?;
    let root = loss_fn(&tape, &bound)?;
    let base = root.item().f64();
    let grads = bound.grads(&tape.backward(root)?);

    let again = loss_value(&loss_fn, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(AutodiffError::NonDeterministic(format!("{base:e} then {again:e}")).into());
    }

    let mut out = Vec::with_capacity(probes.len());
    let mut work = params.clone();
    for &(idx, elem) in probes {
        let orig = work.at(idx).data()[elem];
        work.at_mut(idx).data_mut()[elem] = orig + S::of(eps);
        let plus = loss_value(&loss_fn, &work)?;
        work.at_mut(idx).data_mut()[elem] = orig - S::of(eps);
        let minus = loss_value(&loss_fn, &work)?;
        work.at_mut(idx).data_mut()[elem] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[idx][elem].f64();
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        out.push(FdProbe {
            param: params.name(idx).to_string(),
            index: elem,
            analytic,
            numeric,
            rel_error: (analytic - numeric).abs() / denom,
        });
    }
    let max_rel_error = out.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(FdReport { max_rel_error, probes: out })
}
