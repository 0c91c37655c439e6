//! Soft dice loss, max-pooling boundary F1 loss, and their combination into
//! the supervised, gated unsupervised and total objectives.
//!
//! Every loss is returned together with its gradient with respect to the
//! prediction, laid out like [`ProbMap::probs`].

use crate::config::{LossConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::types::{MaskMap, ProbMap, PseudoLabel};

fn check_shapes(pred: &ProbMap, target: &MaskMap) -> Result<()> {
    if pred.hw() != target.hw() || pred.num_classes() != target.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?}x{}, target {:?}x{}",
            pred.hw(),
            pred.num_classes(),
            target.hw(),
            target.num_classes()
        )));
    }
    Ok(())
}

fn class_range(num_classes: usize, include_background: bool) -> std::ops::Range<usize> {
    if include_background {
        0..num_classes
    } else {
        1..num_classes
    }
}

/// Loss evaluator bound to one set of loss knobs.
#[derive(Debug, Clone)]
pub struct SegLoss {
    pub epsilon: f64,
    pub boundary_width: usize,
    pub theta: usize,
    pub include_background: bool,
}

impl SegLoss {
    pub fn new(cfg: &LossConfig) -> Self {
        Self {
            epsilon: cfg.dice_epsilon,
            boundary_width: cfg.boundary_width,
            theta: cfg.boundary_theta,
            include_background: cfg.include_background,
        }
    }

    /// `1 - mean_c (2 sum(p_c g_c) + eps) / (sum p_c + sum g_c + eps)`.
    pub fn dice_with_grad(&self, pred: &ProbMap, target: &MaskMap) -> Result<(f64, Vec<f64>)> {
        check_shapes(pred, target)?;
        let n = pred.height() * pred.width();
        let classes = class_range(pred.num_classes(), self.include_background);
        let count = classes.len() as f64;
        let eps = self.epsilon;
        let labels = target.labels();
        let mut grad = vec![0.0; pred.probs().len()];
        let mut total = 0.0;
        for c in classes {
            let p = pred.plane(c);
            let mut inter = 0.0;
            let mut sum_p = 0.0;
            let mut sum_g = 0.0;
            for i in 0..n {
                let g = (labels[i] as usize == c) as u8 as f64;
                inter += p[i] * g;
                sum_p += p[i];
                sum_g += g;
            }
            let denom = sum_p + sum_g + eps;
            let num = 2.0 * inter + eps;
            total += num / denom;
            let gc = &mut grad[c * n..(c + 1) * n];
            for i in 0..n {
                let g = (labels[i] as usize == c) as u8 as f64;
                gc[i] = -(2.0 * g * denom - num) / (denom * denom) / count;
            }
        }
        Ok((1.0 - total / count, grad))
    }

    pub fn dice(&self, pred: &ProbMap, target: &MaskMap) -> Result<f64> {
        self.dice_with_grad(pred, target).map(|r| r.0)
    }

    /// `1 - mean_c BF1_c`, with boundaries extracted by max pooling.
    pub fn boundary_with_grad(&self, pred: &ProbMap, target: &MaskMap) -> Result<(f64, Vec<f64>)> {
        check_shapes(pred, target)?;
        if self.boundary_width < 1 || self.theta < 1 {
            return Err(Error::InvalidConfig(vec![
                "boundary_width and theta must be ≥ 1".into(),
            ]));
        }
        let (h, w) = pred.hw();
        let n = h * w;
        let classes = class_range(pred.num_classes(), self.include_background);
        let count = classes.len() as f64;
        let eps = self.epsilon;
        let one_hot = target.one_hot();
        let mut grad = vec![0.0; pred.probs().len()];
        let mut total = 0.0;
        for c in classes {
            let g = &one_hot[c * n..(c + 1) * n];
            let gb = boundary_map(g, h, w, self.boundary_width).0;
            let g_ext = max_pool(&gb, h, w, self.theta).0;

            let p = pred.plane(c);
            let (pb, (_, idx0, active)) = boundary_map_traced(p, h, w, self.boundary_width);
            let (p_ext, idx1) = max_pool(&pb, h, w, self.theta);

            let ip: f64 = pb.iter().zip(&g_ext).map(|(a, b)| a * b).sum();
            let sp: f64 = pb.iter().sum();
            let ir: f64 = p_ext.iter().zip(&gb).map(|(a, b)| a * b).sum();
            let sg: f64 = gb.iter().sum();
            let prec = (ip + eps) / (sp + eps);
            let rec = (ir + eps) / (sg + eps);
            let d = prec + rec + eps;
            let f1 = 2.0 * prec * rec / d;
            total += f1;

            // dLoss/dF1 for this class.
            let up = -1.0 / count;
            let d_prec = up * 2.0 * rec * (rec + eps) / (d * d);
            let d_rec = up * 2.0 * prec * (prec + eps) / (d * d);

            let mut d_pb = vec![0.0; n];
            for i in 0..n {
                d_pb[i] += d_prec * (g_ext[i] / (sp + eps) - (ip + eps) / ((sp + eps) * (sp + eps)));
                let d_ext = d_rec * gb[i] / (sg + eps);
                if d_ext != 0.0 {
                    d_pb[idx1[i]] += d_ext;
                }
            }
            // pb = relu(maxpool(1 - p) - (1 - p)); with a = 1 - p, dp = -da.
            let gc = &mut grad[c * n..(c + 1) * n];
            for i in 0..n {
                if active[i] && d_pb[i] != 0.0 {
                    // d/da_self = -d_pb, d/da_argmax = +d_pb
                    gc[i] += d_pb[i];
                    gc[idx0[i]] -= d_pb[i];
                }
            }
        }
        Ok((1.0 - total / count, grad))
    }

    pub fn boundary(&self, pred: &ProbMap, target: &MaskMap) -> Result<f64> {
        self.boundary_with_grad(pred, target).map(|r| r.0)
    }

    /// `DL + BL` with equal unit weights.
    pub fn combined_with_grad(&self, pred: &ProbMap, target: &MaskMap) -> Result<(f64, Vec<f64>)> {
        let (dl, mut g) = self.dice_with_grad(pred, target)?;
        let (bl, gb) = self.boundary_with_grad(pred, target)?;
        g.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
        Ok((dl + bl, g))
    }

    pub fn combined(&self, pred: &ProbMap, target: &MaskMap) -> Result<f64> {
        Ok(self.dice(pred, target)? + self.boundary(pred, target)?)
    }
}

/// Max over the `(2r+1)^2` window, ignoring out-of-image taps. Returns the
/// pooled values and the flat index of the first maximum in scan order.
pub fn max_pool(x: &[f64], h: usize, w: usize, r: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; h * w];
    let mut idx = vec![0usize; h * w];
    let r = r as isize;
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for dy in -r..=r {
                let sy = y + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let sx = xx + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let i = sy as usize * w + sx as usize;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
            }
            let o = y as usize * w + xx as usize;
            out[o] = best;
            idx[o] = best_i;
        }
    }
    (out, idx)
}

/// Soft boundary of a class-probability plane: `relu(maxpool(1-x) - (1-x))`.
pub fn boundary_map(x: &[f64], h: usize, w: usize, width: usize) -> (Vec<f64>, Vec<usize>) {
    let (b, (_, idx, _)) = boundary_map_traced(x, h, w, width);
    (b, idx)
}

type BoundaryTrace = (Vec<f64>, Vec<usize>, Vec<bool>);

fn boundary_map_traced(x: &[f64], h: usize, w: usize, width: usize) -> (Vec<f64>, BoundaryTrace) {
    let inv: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
    let (pooled, idx) = max_pool(&inv, h, w, width);
    let mut active = vec![false; h * w];
    let b = pooled
        .iter()
        .zip(&inv)
        .enumerate()
        .map(|(i, (m, a))| {
            let d = m - a;
            if d > 0.0 {
                active[i] = true;
                d
            } else {
                0.0
            }
        })
        .collect();
    (b, (inv, idx, active))
}

pub fn soft_dice_loss(pred: &ProbMap, target: &MaskMap, epsilon: f64) -> Result<f64> {
    SegLoss {
        epsilon,
        boundary_width: 1,
        theta: 1,
        include_background: true,
    }
    .dice(pred, target)
}

pub fn boundary_loss(pred: &ProbMap, target: &MaskMap, boundary_width: usize, theta: usize) -> Result<f64> {
    SegLoss {
        epsilon: LossConfig::default().dice_epsilon,
        boundary_width,
        theta,
        include_background: true,
    }
    .boundary(pred, target)
}

/// `(1/B) sum_b (DL + BL)` over the labeled batch.
pub fn supervised_loss(preds: &[ProbMap], targets: &[MaskMap], cfg: &TrainConfig) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let loss = SegLoss::new(&cfg.loss);
    let mut sum = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        sum += loss.combined(p, t)?;
    }
    Ok(sum / preds.len() as f64)
}

/// `(1/(mu B)) sum_b 1[conf_b >= tau] (DL + BL)` against pseudo-label masks.
/// Pseudo-labels are constants: only the strong-branch predictions receive
/// gradient. Returns the loss and one gradient per strong prediction, all
/// zero for rejected samples.
pub fn unsupervised_loss_with_grad(
    strong_preds: &[ProbMap],
    pseudolabels: &[PseudoLabel],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if strong_preds.len() != pseudolabels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} strong predictions vs {} pseudo-labels",
            strong_preds.len(),
            pseudolabels.len()
        )));
    }
    if strong_preds.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let loss = SegLoss::new(&cfg.loss);
    let scale = 1.0 / strong_preds.len() as f64;
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(strong_preds.len());
    for (p, pl) in strong_preds.iter().zip(pseudolabels) {
        if pl.accepted {
            let (v, mut g) = loss.combined_with_grad(p, &pl.label_mask)?;
            sum += v;
            g.iter_mut().for_each(|x| *x *= scale);
            grads.push(g);
        } else {
            check_shapes(p, &pl.label_mask)?;
            grads.push(vec![0.0; p.probs().len()]);
        }
    }
    Ok((sum * scale, grads))
}

pub fn unsupervised_loss(strong_preds: &[ProbMap], pseudolabels: &[PseudoLabel], cfg: &TrainConfig) -> Result<f64> {
    unsupervised_loss_with_grad(strong_preds, pseudolabels, cfg).map(|r| r.0)
}

/// `l_s + lambda_u * l_u`.
pub fn total_loss(l_s: f64, l_u: f64, lambda_u: f64) -> f64 {
    l_s + lambda_u * l_u
}
