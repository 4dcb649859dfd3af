use ndarray::{Array2, ArrayView2, Axis};

/// Log-probabilities of `softmax(logits / temperature)`, max-shifted for stability.
pub fn log_softmax_policy(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|l| (l - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

/// Row-wise [`log_softmax_policy`].
pub fn log_softmax_rows(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|l| (l - max) / temperature);
        let lse = row.iter().map(|s| s.exp()).sum::<f64>().ln();
        row.mapv_inplace(|s| s - lse);
    }
    out
}

pub fn softmax_rows(log_probs: &Array2<f64>) -> Array2<f64> {
    log_probs.mapv(f64::exp)
}

/// Pull an upstream gradient on log-probabilities back to the logits:
/// `(g − softmax · Σg) / temperature`, row by row.
pub fn log_softmax_backward(log_probs: ArrayView2<f64>, upstream: ArrayView2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = upstream.to_owned();
    for (mut row, lp) in out.axis_iter_mut(Axis(0)).zip(log_probs.axis_iter(Axis(0))) {
        let total: f64 = row.sum();
        row.zip_mut_with(&lp, |g, &l| *g = (*g - l.exp() * total) / temperature);
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x) = −softplus(−x)`, stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
