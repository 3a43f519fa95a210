//! Joint training objective: cross entropy on the focus output plus KL divergence
//! pulling the localization output toward the focus output.
//!
//! Everything is evaluated in `f64` with natural logarithms.

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// `-log p[label]` for `p = softmax(logits)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    -log_softmax(logits)[label]
}

/// `KL(softmax(p_logits) || softmax(q_logits))`.
pub fn kl_divergence(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum::<f64>()
        .max(0.0)
}

/// `CE(p_f; y) + KL(p_l || p_f)`.
pub fn loss(logits_loc: &[f64], logits_foc: &[f64], label: usize) -> f64 {
    cross_entropy(logits_foc, label) + kl_divergence(logits_loc, logits_foc)
}

/// Label-supervised variant: both stages trained against the one-hot target.
///
/// KL against a one-hot distribution equals the cross entropy (the target has zero
/// entropy), so this is `CE(p_f; y) + CE(p_l; y)`.
pub fn loss_variant(logits_loc: &[f64], logits_foc: &[f64], label: usize) -> f64 {
    cross_entropy(logits_foc, label) + cross_entropy(logits_loc, label)
}

/// How gradients flow through the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlGradient {
    /// Both distributions are live.
    #[default]
    Joint,
    /// The focus distribution is a fixed target inside the KL term.
    DetachFocusTarget,
}

/// Gradients of [`loss`] with respect to both logit vectors.
pub fn loss_grad(logits_loc: &[f64], logits_foc: &[f64], label: usize) -> (Vec<f64>, Vec<f64>) {
    loss_grad_with(logits_loc, logits_foc, label, KlGradient::Joint)
}

pub fn loss_grad_with(
    logits_loc: &[f64],
    logits_foc: &[f64],
    label: usize,
    mode: KlGradient,
) -> (Vec<f64>, Vec<f64>) {
    let p_l = softmax(logits_loc);
    let p_f = softmax(logits_foc);
    let lp = log_softmax(logits_loc);
    let lq = log_softmax(logits_foc);
    let kl: f64 = p_l.iter().zip(lp.iter().zip(&lq)).map(|(p, (a, b))| p * (a - b)).sum();

    let grad_loc = p_l
        .iter()
        .zip(lp.iter().zip(&lq))
        .map(|(p, (a, b))| p * ((a - b) - kl))
        .collect();
    let grad_foc = p_f
        .iter()
        .zip(&p_l)
        .enumerate()
        .map(|(i, (&pf, &pl))| {
            let y = if i == label { 1.0 } else { 0.0 };
            match mode {
                KlGradient::Joint => (pf - y) + (pf - pl),
                KlGradient::DetachFocusTarget => pf - y,
            }
        })
        .collect();
    (grad_loc, grad_foc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_logits_have_no_kl() {
        let z = [0.3, -1.2, 2.0, 0.5];
        assert!(kl_divergence(&z, &z).abs() <= 1e-7);
        assert!((loss(&z, &z, 2) - cross_entropy(&z, 2)).abs() <= 1e-7);
        assert_eq!(loss_variant(&z, &z, 1), 2.0 * cross_entropy(&z, 1));
    }

    #[test]
    fn peaked_and_consistent_limit() {
        let z = [40.0, 0.0, 0.0];
        assert!(loss(&z, &z, 0) < 1e-12);
        assert!(loss_variant(&z, &z, 0) < 1e-12);
    }

    #[test]
    fn equal_logits_give_stationary_localization_gradient() {
        let z = [0.1, 0.7, -0.4];
        let (gl, gf) = loss_grad(&z, &z, 1);
        assert!(gl.iter().all(|&g| g == 0.0));
        let p = softmax(&z);
        for i in 0..3 {
            let y = if i == 1 { 1.0 } else { 0.0 };
            assert!((gf[i] - (p[i] - y)).abs() < 1e-15);
        }
    }

    #[test]
    fn detached_target_drops_kl_pull() {
        let l = [0.1, 0.7, -0.4];
        let f = [1.0, -0.2, 0.3];
        let (gl_joint, _) = loss_grad(&l, &f, 0);
        let (gl, gf) = loss_grad_with(&l, &f, 0, KlGradient::DetachFocusTarget);
        assert_eq!(gl, gl_joint);
        let p = softmax(&f);
        assert!((gf[0] - (p[0] - 1.0)).abs() < 1e-15);
    }
}
