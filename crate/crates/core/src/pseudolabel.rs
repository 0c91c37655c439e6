//! Pseudo-labels from the weak-branch prediction and the per-image
//! confidence gate.

use crate::types::{MaskMap, ProbMap, PseudoLabel};

/// Per-pixel maximum class probability, `H x W` row-major.
pub fn max_confidence_map(probs: &ProbMap) -> Vec<f64> {
    let n = probs.height() * probs.width();
    let mut out = probs.plane(0).to_vec();
    for c in 1..probs.num_classes() {
        for (o, p) in out.iter_mut().zip(probs.plane(c)) {
            if *p > *o {
                *o = *p;
            }
        }
    }
    debug_assert_eq!(out.len(), n);
    out
}

/// Per-pixel argmax; ties resolve to the lowest class index.
pub fn pseudo_mask(probs: &ProbMap) -> MaskMap {
    let n = probs.height() * probs.width();
    let mut best = probs.plane(0).to_vec();
    let mut labels = vec![0u8; n];
    for c in 1..probs.num_classes() {
        for (i, p) in probs.plane(c).iter().enumerate() {
            if *p > best[i] {
                best[i] = *p;
                labels[i] = c as u8;
            }
        }
    }
    MaskMap::new(probs.height(), probs.width(), probs.num_classes(), labels)
        .expect("argmax is a valid class")
}

/// Arithmetic mean of a confidence grid.
pub fn confidence_score(q: &[f64]) -> f64 {
    if q.is_empty() {
        return 0.0;
    }
    q.iter().sum::<f64>() / q.len() as f64
}

/// Inclusive threshold test.
pub fn gate(confidence: f64, tau: f64) -> bool {
    confidence >= tau
}

pub fn make_pseudolabel(probs: &ProbMap, tau: f64) -> PseudoLabel {
    let confidence = confidence_score(&max_confidence_map(probs));
    PseudoLabel {
        label_mask: pseudo_mask(probs),
        confidence,
        accepted: gate(confidence, tau),
    }
}
