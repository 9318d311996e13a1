//! Central finite-difference oracle for reverse-mode gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub h: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub rel_floor: f64,
    /// Check at most this many seeded-random coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            h: 1e-3,
            tol: 1e-4,
            rel_floor: 1e-3,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose `±h` perturbation crossed a non-differentiable
    /// point. They are excluded from `max_rel_error`.
    pub kinks: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub h: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

impl CheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn kinks(&self) -> usize {
        self.params.iter().map(|p| p.kinks).sum()
    }
}

/// [`finite_diff_check_with`] using every coordinate.
pub fn finite_diff_check<F>(
    f: F,
    params: &BTreeMap<String, Tensor>,
    h: f64,
    tol: f64,
) -> Result<CheckReport, TensorError>
where
    F: FnMut(&mut Graph, &BTreeMap<String, Var>) -> Result<Var, TensorError>,
{
    finite_diff_check_with(
        f,
        params,
        FdOptions {
            h,
            tol,
            ..FdOptions::default()
        },
    )
}

/// Compares [`Graph::backward`] against `(f(p+h) - f(p-h)) / 2h` for each
/// selected coordinate. `f` builds a scalar loss from the bound parameters
/// and must be deterministic; a second evaluation at the base point that
/// differs in any bit is reported as an oracle error.
pub fn finite_diff_check_with<F>(
    mut f: F,
    params: &BTreeMap<String, Tensor>,
    opts: FdOptions,
) -> Result<CheckReport, TensorError>
where
    F: FnMut(&mut Graph, &BTreeMap<String, Var>) -> Result<Var, TensorError>,
{
    if opts.h <= 0.0 || !opts.h.is_finite() {
        return Err(TensorError::Oracle(format!("step h must be positive, got {}", opts.h)));
    }

    let mut graph = Graph::with_branch_tracking();
    let mut bound = BTreeMap::new();
    for (name, t) in params {
        bound.insert(name.clone(), graph.param(name.clone(), t.clone())?);
    }
    let loss = f(&mut graph, &bound)?;
    if !graph.value(loss).is_scalar() {
        return Err(TensorError::Contract("finite_diff_check needs a scalar loss".into()));
    }
    let base_value = graph.value(loss).item();
    let base_sig = graph.branch_signature();
    let grads = graph.backward(loss)?;
    drop(graph);

    let mut eval = |values: &BTreeMap<String, Tensor>| -> Result<(f64, u64), TensorError> {
        let mut g = Graph::with_branch_tracking();
        let mut vars = BTreeMap::new();
        for (name, t) in values {
            vars.insert(name.clone(), g.constant(t.clone()));
        }
        let l = f(&mut g, &vars)?;
        Ok((g.value(l).item(), g.branch_signature()))
    };

    let (again, again_sig) = eval(params)?;
    if again.to_bits() != base_value.to_bits() || again_sig != base_sig {
        return Err(TensorError::Oracle(format!(
            "function is not deterministic: {base_value} then {again}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (name, t) in params {
        let n = t.numel();
        let mut coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        coords.sort_unstable();

        let analytic = grads.get(name);
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            kinks: 0,
            max_rel_error: 0.0,
            worst_index: None,
            passed: true,
        };
        for idx in coords {
            let orig = t.data()[idx];
            let (plus, sig_p) = {
                set_coord(&mut work, name, idx, orig + opts.h);
                eval(&work)?
            };
            let (minus, sig_m) = {
                set_coord(&mut work, name, idx, orig - opts.h);
                eval(&work)?
            };
            set_coord(&mut work, name, idx, orig);
            check.checked += 1;
            if sig_p != base_sig || sig_m != base_sig {
                check.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let exact = analytic.map_or(0.0, |g| g.data()[idx]);
            let denom = exact.abs().max(numeric.abs()).max(opts.rel_floor);
            let rel = (exact - numeric).abs() / denom;
            if rel > check.max_rel_error || rel.is_nan() {
                check.max_rel_error = rel;
                check.worst_index = Some(idx);
            }
        }
        check.passed = check.max_rel_error <= opts.tol;
        report.push(check);
    }
    let passed = report.iter().all(|p| p.passed);
    Ok(CheckReport {
        h: opts.h,
        tol: opts.tol,
        params: report,
        passed,
    })
}

fn set_coord(values: &mut BTreeMap<String, Tensor>, name: &str, idx: usize, v: f64) {
    values.get_mut(name).expect("parameter present").data_mut()[idx] = v;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, shape: &[usize], v: &[f64]) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::new(shape, v.to_vec()).unwrap())])
    }

    #[test]
    fn cube_matches_analytic() {
        // d/dw w³ at 2 = 12; central difference error is h² = 1e-6 absolute.
        let params = one("w", &[1], &[2.0]);
        let report = finite_diff_check(
            |g, p| {
                let w = p["w"];
                let sq = g.mul(w, w)?;
                let cube = g.mul(sq, w)?;
                Ok(g.sum(cube))
            },
            &params,
            1e-3,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error() < 1e-5);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let params = one("w", &[3], &[1.0, -2.0, 0.5]);
        let report = finite_diff_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &params,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.params[0].max_rel_error, 0.0);
        assert_eq!(report.params[0].checked, 3);
    }

    #[test]
    fn relu_at_zero_is_flagged_as_kink() {
        let params = one("w", &[2], &[0.0, 1.0]);
        let report = finite_diff_check(
            |g, p| {
                let r = g.relu(p["w"]);
                Ok(g.sum(r))
            },
            &params,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert_eq!(report.params[0].kinks, 1);
        assert_eq!(report.params[0].checked, 2);
        assert!(report.passed);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let params = one("w", &[1], &[1.0]);
        let mut calls = 0.0;
        let err = finite_diff_check(
            |g, p| {
                calls += 1.0;
                let c = g.constant(Tensor::scalar(calls));
                let m = g.mul(p["w"], c)?;
                Ok(g.sum(m))
            },
            &params,
            1e-3,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::Oracle(_)));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // Feeding a detached copy hides half the true gradient of w·w.
        let params = one("w", &[1], &[1.5]);
        let report = finite_diff_check(
            |g, p| {
                let d = g.detach(p["w"]);
                let m = g.mul(p["w"], d)?;
                Ok(g.sum(m))
            },
            &params,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn rejects_bad_step() {
        let params = one("w", &[1], &[1.0]);
        assert!(finite_diff_check(|g, p| Ok(g.sum(p["w"])), &params, 0.0, 1e-4).is_err());
    }
}
