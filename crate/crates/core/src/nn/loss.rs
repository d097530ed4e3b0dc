//! Classification and regression losses of the proposal objective.

use super::layers::logistic;
use crate::error::{Error, Result};

/// Probability clamp for the cross entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Binary cross entropy on a probability, returning `(loss, dloss/dp)`.
pub fn bce_loss(p: f64, label: f64) -> (f64, f64) {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let loss = -(label * p.ln() + (1.0 - label) * (1.0 - p).ln());
    (loss, (p - label) / (p * (1.0 - p)))
}

/// Binary cross entropy on a logit through the logistic function;
/// returns `(loss, dloss/dlogit)`.
pub fn bce_with_logit(logit: f64, label: f64) -> (f64, f64) {
    let p = logistic(logit);
    let (loss, dp) = bce_loss(p, label);
    (loss, dp * p * (1.0 - p))
}

/// Smooth L1 with unit transition point, summed over the four components.
pub fn smooth_l1(t: &[f64; 4], target: &[f64; 4]) -> (f64, [f64; 4]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let x = t[i] - target[i];
        if x.abs() < 1.0 {
            loss += 0.5 * x * x;
            grad[i] = x;
        } else {
            loss += x.abs() - 0.5;
            grad[i] = x.signum();
        }
    }
    (loss, grad)
}

/// Weight `lambda` on the regression term and the two normalisers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub n_cls: f64,
    pub n_reg: f64,
}

impl LossWeights {
    /// `N_cls` = contributing anchors, `N_reg` = positive anchors, both at least 1.
    pub fn for_terms(lambda: f64, terms: &[AnchorTerm]) -> Self {
        let n_pos = terms.iter().filter(|t| t.target.is_some()).count();
        Self {
            lambda,
            n_cls: terms.len().max(1) as f64,
            n_reg: n_pos.max(1) as f64,
        }
    }
}

/// One anchor contributing to the loss. `target` is set for positives only,
/// gating the regression term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTerm {
    pub anchor: usize,
    pub target: Option<[f64; 4]>,
}

impl AnchorTerm {
    pub fn positive(anchor: usize, target: [f64; 4]) -> Self {
        Self {
            anchor,
            target: Some(target),
        }
    }

    pub fn negative(anchor: usize) -> Self {
        Self {
            anchor,
            target: None,
        }
    }

    pub fn label(&self) -> f64 {
        if self.target.is_some() {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalLoss {
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
    /// Dense over all anchors; zero where an anchor does not contribute.
    pub grad_logits: Vec<f64>,
    pub grad_deltas: Vec<[f64; 4]>,
}

/// `1/N_cls * sum BCE + lambda/N_reg * sum_{positive} smoothL1`.
pub fn proposal_loss(
    logits: &[f64],
    deltas: &[[f64; 4]],
    terms: &[AnchorTerm],
    weights: &LossWeights,
) -> Result<ProposalLoss> {
    if terms.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    if logits.len() != deltas.len() {
        return Err(Error::shape(
            "proposal_loss",
            &[logits.len()],
            &[deltas.len()],
        ));
    }
    let mut grad_logits = vec![0.0; logits.len()];
    let mut grad_deltas = vec![[0.0; 4]; deltas.len()];
    let mut cls = 0.0;
    let mut reg = 0.0;
    for t in terms {
        let i = t.anchor;
        if i >= logits.len() {
            return Err(Error::Input(format!(
                "anchor index {i} out of range {}",
                logits.len()
            )));
        }
        let (l, g) = bce_with_logit(logits[i], t.label());
        cls += l;
        grad_logits[i] += g / weights.n_cls;
        if let Some(target) = &t.target {
            let (l, g) = smooth_l1(&deltas[i], target);
            reg += l;
            for c in 0..4 {
                grad_deltas[i][c] += weights.lambda * g[c] / weights.n_reg;
            }
        }
    }
    let classification = cls / weights.n_cls;
    let regression = weights.lambda * reg / weights.n_reg;
    Ok(ProposalLoss {
        total: classification + regression,
        classification,
        regression,
        grad_logits,
        grad_deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;

    #[test]
    fn bce_values() {
        let (l, _) = bce_loss(0.5, 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = bce_loss(1.0 - BCE_EPS, 1.0);
        assert!(l < 1e-6);
        for &(p, y) in &[(0.3, 1.0), (0.8, 0.0), (0.01, 0.0)] {
            let (_, g) = bce_loss(p, y);
            assert!((g - (p - y) / (p * (1.0 - p))).abs() < 1e-9);
        }
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(&[0.0; 4], &[0.0; 4]).0, 0.0);
        assert_eq!(smooth_l1(&[0.5, 0.0, 0.0, 0.0], &[0.0; 4]).0, 0.125);
        assert_eq!(smooth_l1(&[2.0, 0.0, 0.0, 0.0], &[0.0; 4]).0, 1.5);
        assert_eq!(
            smooth_l1(&[0.0, -2.0, 0.0, 0.0], &[0.0; 4]).1,
            [0.0, -1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn degenerate_batch() {
        let w = LossWeights {
            lambda: 1.0,
            n_cls: 1.0,
            n_reg: 1.0,
        };
        assert!(matches!(
            proposal_loss(&[0.0], &[[0.0; 4]], &[], &w),
            Err(Error::DegenerateBatch)
        ));
    }

    #[test]
    fn perfect_predictions_near_zero() {
        let terms = [
            AnchorTerm::positive(0, [0.1, 0.0, -0.2, 0.3]),
            AnchorTerm::negative(1),
        ];
        let w = LossWeights::for_terms(1.0, &terms);
        let l = proposal_loss(
            &[40.0, -40.0],
            &[[0.1, 0.0, -0.2, 0.3], [9.0; 4]],
            &terms,
            &w,
        )
        .unwrap();
        assert!(l.total < 1e-6);
    }

    #[test]
    fn lambda_scales_regression_only() {
        let terms = [
            AnchorTerm::positive(0, [0.5, 0.0, 0.0, 0.0]),
            AnchorTerm::negative(1),
        ];
        let mut w = LossWeights::for_terms(1.0, &terms);
        let a = proposal_loss(&[0.3, -0.2], &[[0.0; 4]; 2], &terms, &w).unwrap();
        w.lambda = 2.0;
        let b = proposal_loss(&[0.3, -0.2], &[[0.0; 4]; 2], &terms, &w).unwrap();
        assert_eq!(a.classification, b.classification);
        assert!((b.regression - 2.0 * a.regression).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let terms = [
            AnchorTerm::positive(0, [0.2, -0.1, 0.4, -1.7]),
            AnchorTerm::negative(2),
            AnchorTerm::positive(3, [0.0, 0.3, -0.5, 0.1]),
        ];
        let w = LossWeights::for_terms(1.5, &terms);
        let logits = [0.3, 2.0, -1.1, 0.7];
        let deltas = [
            [0.1, 0.2, -0.3, 0.4],
            [1.0; 4],
            [0.5, -0.5, 0.5, 0.0],
            [-0.2, 0.9, 0.1, 0.05],
        ];
        let l = proposal_loss(&logits, &deltas, &terms, &w).unwrap();
        let fl = |x: &[f64]| proposal_loss(x, &deltas, &terms, &w).unwrap().total;
        assert!(grad_check(fl, &logits, &l.grad_logits, 1e-5) < 1e-6);
        let flat: Vec<f64> = deltas.iter().flatten().copied().collect();
        let gflat: Vec<f64> = l.grad_deltas.iter().flatten().copied().collect();
        let fd = |x: &[f64]| {
            let d: Vec<[f64; 4]> = x.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
            proposal_loss(&logits, &d, &terms, &w).unwrap().total
        };
        assert!(grad_check(fd, &flat, &gflat, 1e-5) < 1e-6);
    }
}
