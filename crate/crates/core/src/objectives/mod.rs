//! Loss terms over graph values and the variant registry that assembles
//! them into per-network objectives.
//!
//! Probabilities entering a logarithm are clamped into `[ε, 1-ε]` with
//! [`PROB_EPS`]; every moved element is counted by
//! [`Graph::clamp_events`](crate::tensor::Graph::clamp_events).

mod compose;
mod variant;

pub use compose::{compose_variant, Batch, Branch, ComposeOptions, LossBundle, NetSet, Phase, NET_PREFIXES};
pub use variant::{LossWeights, Supervision, Term, TermSet, VariantName, VariantSpec};

use crate::nets::{Mode, Network};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const PROB_EPS: f64 = 1e-7;

fn clamp_prob(g: &mut Graph, p: Var) -> Var {
    g.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
}

/// `-mean(log d_real) - mean(log(1 - d_fake))`: the discriminator's
/// real/fake log-likelihood, negated for minimization.
pub fn adv_d_loss(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var, TensorError> {
    let r = clamp_prob(g, d_real);
    let lr = g.log(r)?;
    let mr = g.mean(lr);
    let f = clamp_prob(g, d_fake);
    let one_minus = g.affine(f, -1.0, 1.0);
    let lf = g.log(one_minus)?;
    let mf = g.mean(lf);
    let s = g.add(mr, mf)?;
    Ok(g.neg(s))
}

/// Generator side of the adversarial game. The default non-saturating form
/// is `-mean(log d_fake)`; `saturating` selects `mean(log(1 - d_fake))`.
pub fn adv_g_loss(g: &mut Graph, d_fake: Var, saturating: bool) -> Result<Var, TensorError> {
    let f = clamp_prob(g, d_fake);
    if saturating {
        let one_minus = g.affine(f, -1.0, 1.0);
        let l = g.log(one_minus)?;
        Ok(g.mean(l))
    } else {
        let l = g.log(f)?;
        let m = g.mean(l);
        Ok(g.neg(m))
    }
}

/// Mean absolute difference between a batch and its round trip.
pub fn recon_cycle_loss(g: &mut Graph, x: Var, x_cyc: Var) -> Result<Var, TensorError> {
    g.l1_distance(x, x_cyc)
}

/// Classification loss of `m` on round-tripped samples against the labels
/// of the originals. `m` enters as constants.
pub fn relaxed_cycle_loss(
    g: &mut Graph,
    m: &Network,
    x_cyc: Var,
    y: &[usize],
) -> Result<Var, crate::Error> {
    let bound = m.bind(g, "relaxed_m", false)?;
    let logits = m.forward(g, &bound, x_cyc, Mode::Eval)?;
    Ok(g.softmax_cross_entropy(logits, y)?)
}

/// The two task terms that augment one domain's adversarial objective.
///
/// Returns `(m_loss, g_feedback_loss)`: `m_loss` trains `m` (bound as
/// parameters under `prefix`) on real and mapped samples with the mapped
/// batch cut from its producer; `g_feedback_loss` scores the mapped batch
/// with a constant copy of `m` so that only the producing generator
/// receives its gradient.
#[allow(clippy::too_many_arguments)]
pub fn augmented_task_terms(
    g: &mut Graph,
    m: &Network,
    prefix: &str,
    x_real: Var,
    y_real: &[usize],
    x_mapped: Var,
    y_mapped: &[usize],
    mode: Mode,
) -> Result<(Var, Var), crate::Error> {
    let live = m.bind(g, prefix, true)?;
    let real_logits = m.forward(g, &live, x_real, mode)?;
    let l_real = g.softmax_cross_entropy(real_logits, y_real)?;
    let cut = g.detach(x_mapped);
    let mapped_logits = m.forward(g, &live, cut, mode)?;
    let l_mapped = g.softmax_cross_entropy(mapped_logits, y_mapped)?;
    let m_loss = g.add(l_real, l_mapped)?;

    let frozen = m.bind(g, &format!("{prefix}#frozen"), false)?;
    let fb_logits = m.forward(g, &frozen, x_mapped, Mode::Eval)?;
    let g_feedback = g.softmax_cross_entropy(fb_logits, y_mapped)?;
    Ok((m_loss, g_feedback))
}

/// Hard labels `argmax M_S(G_{T→S}(x_t))`, ties to the lowest class index.
/// Both networks run in eval mode outside any training graph.
pub fn pseudo_label(m_s: &Network, g_ts: &Network, x_t: &Tensor) -> Result<Vec<usize>, crate::Error> {
    let mapped = g_ts.predict(x_t)?;
    Ok(m_s.predict(&mapped)?.argmax_rows())
}
