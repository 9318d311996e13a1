use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nets::Network;
use crate::tensor::{GradientMap, Tensor, TensorError};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates applied so far; drives bias correction.
    pub t: u64,
}

/// Per-parameter optimizer state keyed like gradient maps
/// (`"g_st/enc1.weight"`).
pub type Moments = BTreeMap<String, Moment>;

/// Applies one update to every parameter of `net` that has a gradient under
/// `prefix`. Parameters without a gradient entry are left alone. An update
/// that leaves a non-finite value is a numerical abort naming the parameter
/// (its `step` is 0; the trainer fills in the real one).
pub fn optimizer_step(
    net: &mut Network,
    prefix: &str,
    grads: &GradientMap,
    moments: &mut Moments,
    lr: f64,
    kind: OptimizerKind,
) -> Result<()> {
    let names: Vec<String> = net.params().keys().cloned().collect();
    for name in names {
        let key = format!("{prefix}/{name}");
        let Some(grad) = grads.get(&key) else { continue };
        let p = net.param(&name).expect("listed parameter");
        if grad.shape() != p.shape() {
            return Err(TensorError::shape(
                "optimizer_step",
                format!("{key}: parameter {:?}, gradient {:?}", p.shape(), grad.shape()),
            )
            .into());
        }
        let mut values = p.data().to_vec();
        let gd = grad.data();
        match kind {
            OptimizerKind::Sgd => {
                for (w, g) in values.iter_mut().zip(gd) {
                    *w -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let st = moments.entry(key.clone()).or_insert_with(|| Moment {
                    m: vec![0.0; gd.len()],
                    v: vec![0.0; gd.len()],
                    t: 0,
                });
                if st.m.len() != gd.len() {
                    return Err(Error::config(format!("optimizer state for {key} has the wrong length")));
                }
                st.t += 1;
                let c1 = 1.0 - beta1.powi(st.t as i32);
                let c2 = 1.0 - beta2.powi(st.t as i32);
                for i in 0..gd.len() {
                    let g = gd[i];
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                    let mh = st.m[i] / c1;
                    let vh = st.v[i] / c2;
                    values[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        if let Some(&value) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical { step: 0, term: key, value });
        }
        net.set_param(&name, Tensor::new(p.shape(), values)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_discriminator, InitSpec};
    use crate::tensor::Graph;

    fn grads_for(net: &Network, prefix: &str, fill: f64) -> GradientMap {
        // Builds a loss whose gradient is `fill` everywhere: sum(fill · p).
        let mut g = Graph::new();
        let b = net.bind(&mut g, prefix, true).unwrap();
        let mut total = None;
        for (name, t) in net.params() {
            let v = b.var(name).unwrap();
            let k = g.constant(Tensor::full(t.shape(), fill));
            let prod = g.mul(v, k).unwrap();
            let s = g.sum(prod);
            total = Some(match total {
                None => s,
                Some(a) => g.add(a, s).unwrap(),
            });
        }
        g.backward(total.unwrap()).unwrap()
    }

    #[test]
    fn sgd_arithmetic() {
        let mut net = build_discriminator([1, 4, 4], InitSpec::new(0)).unwrap();
        let before = net.clone();
        let grads = grads_for(&net, "d", 2.0);
        optimizer_step(&mut net, "d", &grads, &mut Moments::new(), 0.1, OptimizerKind::Sgd).unwrap();
        for (name, t) in net.params() {
            for (a, b) in t.data().iter().zip(before.param(name).unwrap().data()) {
                assert!((a - (b - 0.2)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::default()] {
            let mut net = build_discriminator([1, 4, 4], InitSpec::new(0)).unwrap();
            let before = net.clone();
            let grads = grads_for(&net, "d", 0.0);
            optimizer_step(&mut net, "d", &grads, &mut Moments::new(), 0.1, kind).unwrap();
            assert!(net.params_bit_eq(&before));
        }
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        for g in [1e-4, 0.3, 50.0] {
            let mut net = build_discriminator([1, 4, 4], InitSpec::new(0)).unwrap();
            let before = net.clone();
            let grads = grads_for(&net, "d", g);
            let mut m = Moments::new();
            optimizer_step(&mut net, "d", &grads, &mut m, 1e-3, OptimizerKind::default()).unwrap();
            // m̂ = g, v̂ = g², step = lr·g/(|g| + eps).
            let expect = 1e-3 * g / (g + 1e-8);
            for (name, t) in net.params() {
                for (a, b) in t.data().iter().zip(before.param(name).unwrap().data()) {
                    assert!(((b - a) - expect).abs() < 1e-15, "{g}: {}", b - a);
                }
            }
            assert!(m.values().all(|s| s.t == 1));
        }
    }

    #[test]
    fn missing_prefix_untouched_and_shape_mismatch_rejected() {
        let mut net = build_discriminator([1, 4, 4], InitSpec::new(0)).unwrap();
        let before = net.clone();
        let grads = grads_for(&net, "other", 1.0);
        optimizer_step(&mut net, "d", &grads, &mut Moments::new(), 0.1, OptimizerKind::Sgd).unwrap();
        assert!(net.params_bit_eq(&before));
        let small = build_discriminator([1, 8, 8], InitSpec::new(0)).unwrap();
        let wrong = grads_for(&small, "d", 1.0);
        assert!(optimizer_step(&mut net, "d", &wrong, &mut Moments::new(), 0.1, OptimizerKind::Sgd).is_err());
    }
}
