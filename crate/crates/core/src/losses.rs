//! Training objectives: token cross-entropy, expected word errors over the
//! N-best list, and the query-similarity distribution match.
//!
//! Each loss is built on a [`Graph`] so it can be differentiated together
//! with the network that produced its inputs.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Auxiliary-loss weight for both combined objectives.
pub const AUX_CE_WEIGHT: f64 = 0.01;

const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    /// The sequence-level term (expected word errors or similarity match).
    pub aux: f64,
    pub combined: f64,
    pub weight: f64,
}

/// Mean negative log-probability over non-pad positions. `token_logps` is a
/// `T x 1` column; `pad` marks positions to exclude.
pub fn ce_loss(g: &mut Graph, token_logps: Var, pad: &[bool]) -> Result<Var> {
    let [t, c] = g.shape(token_logps);
    if c != 1 || pad.len() != t {
        return Err(Error::dim("ce_loss", format!("logps {t}x{c} with {} mask entries", pad.len())));
    }
    let kept = pad.iter().filter(|&&p| !p).count();
    if kept == 0 {
        return Err(Error::Usage("cross-entropy over zero target tokens".into()));
    }
    let keep = Tensor::column(pad.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect());
    let masked = g.mul_const(token_logps, &keep)?;
    let total = g.sum_all(masked);
    Ok(g.scale(total, -1.0 / kept as f64))
}

/// `sum_i p_i (W_i - mean W)` for a `1 x N` probability row.
pub fn mwer_loss(g: &mut Graph, probs: Var, word_errors: &[f64]) -> Result<Var> {
    let [r, n] = g.shape(probs);
    if r != 1 || n != word_errors.len() || n == 0 {
        return Err(Error::Usage(format!(
            "mwer_loss needs 1xN probabilities matching {} error counts, got {r}x{n}",
            word_errors.len()
        )));
    }
    let total = g.value(probs).sum();
    if (total - 1.0).abs() > NORM_TOL {
        return Err(Error::Usage(format!("hypothesis probabilities sum to {total}, not 1")));
    }
    let mean = word_errors.iter().sum::<f64>() / n as f64;
    let centered = Tensor::row_vector(word_errors.iter().map(|w| w - mean).collect());
    let weighted = g.mul_const(probs, &centered)?;
    Ok(g.sum_all(weighted))
}

/// Cross-entropy between `softmax(target)` and `softmax(predicted)`, where
/// `predicted` is a `1 x N` row.
pub fn mqsd_loss(g: &mut Graph, target: &[f64], predicted: Var) -> Result<Var> {
    let [r, n] = g.shape(predicted);
    if r != 1 || n != target.len() || n == 0 {
        return Err(Error::Usage(format!("mqsd_loss needs {} predicted scores, got {r}x{n}", target.len())));
    }
    let dist = softmax(target);
    let logq = g.log_softmax(predicted);
    let w = g.mul_const(logq, &Tensor::row_vector(dist))?;
    let s = g.sum_all(w);
    Ok(g.scale(s, -1.0))
}

pub fn combine(ce: f64, aux: f64, weight: f64) -> Result<LossBreakdown> {
    if !(weight >= 0.0) {
        return Err(Error::Config(format!("loss weight must be non-negative, got {weight}")));
    }
    Ok(LossBreakdown { ce, aux, combined: aux + weight * ce, weight })
}

/// Adds `weight * ce` to `aux` on the graph and reports the parts.
pub fn combined(g: &mut Graph, ce: Var, aux: Var, weight: f64) -> Result<(Var, LossBreakdown)> {
    let parts = combine(g.value(ce).item(), g.value(aux).item(), weight)?;
    let scaled = g.scale(ce, weight);
    let total = g.add(aux, scaled)?;
    Ok((total, parts))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}
