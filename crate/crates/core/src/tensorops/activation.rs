use super::FeatureMap;

pub fn relu(x: &FeatureMap) -> FeatureMap {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Gradient through a relu given its forward output.
pub fn relu_backward(grad_out: &FeatureMap, output: &FeatureMap) -> FeatureMap {
    let mut g = grad_out.clone();
    for (gv, &o) in g.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Maps a gradient w.r.t. softmax probabilities back to the logits.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - dot))
        .collect()
}

/// `-log softmax(logits)[label]` and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

/// `0.5 x^2` inside the unit interval, `|x| - 0.5` outside.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}
