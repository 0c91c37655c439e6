//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion.
//!
//! `FMS_CRITERIA=1,2,5` runs a subset. `FMS_EXPERIMENT_EPOCHS` and
//! `FMS_EXPERIMENT_SEEDS` rescale the synthetic experiment behind 9 and 10.
//! Criteria 1-8 are deterministic checks of the implementation and fail the
//! test binary. 9 and 10 are empirical claims about the method on synthetic
//! data: their verdict is printed but does not set the exit code.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng;

use fixmatchseg::augment::{
    apply_strong, mask_to_one_hot_image, sample_geom_params_for, warp_channels, warp_mask, GeomParams, Interp,
    PhotoParams,
};
use fixmatchseg::config::{AugmentConfig, LossConfig};
use fixmatchseg::data::{batch_stream, epoch_schedule, make_synthetic_corpus, semi_supervised_pools};
use fixmatchseg::losses::{total_loss, unsupervised_loss_with_grad, SegLoss};
use fixmatchseg::optim::Adam;
use fixmatchseg::pseudolabel::{make_pseudolabel, max_confidence_map, pseudo_mask};
use fixmatchseg::rng::{self, Rng as StreamRng};
use fixmatchseg::trainer::{
    augment_labeled, augment_strong, augment_weak, init_model, EarlyStopping, FitOptions, StepIndex, TrainData,
    BEST_CHECKPOINT, LAST_CHECKPOINT,
};
use fixmatchseg::{
    evaluate, fit, train_step, Checkpoint, Image, LabeledSample, MaskMap, ProbMap, TrainConfig, TrainMode,
    UnlabeledSample,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = fn() -> Outcome;

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("FMS_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Criterion); 10] = [
        (1, "loss oracle equivalence", c1_loss_oracles),
        (2, "loss gradient checks", c2_gradient_checks),
        (3, "loss recomposition", c3_loss_recomposition),
        (4, "augmentation consistency", c4_augmentation),
        (5, "pseudo-label properties", c5_pseudolabels),
        (6, "batch composition", c6_batches),
        (7, "reduction equivalence", c7_reduction),
        (8, "early stopping and resume", c8_early_stopping),
        (9, "synthetic semi-supervised experiment", c9_experiment),
        (10, "threshold insensitivity", c10_threshold),
    ];
    let mut hard_failures = 0;
    let mut lines = Vec::new();
    for (n, name, f) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        let line = format!(
            "criterion {n:>2} {verdict} [{name}] {} ({:.1}s)",
            out.detail,
            t.elapsed().as_secs_f64()
        );
        println!("{line}");
        lines.push(line);
        if !out.pass && n <= 8 {
            hard_failures += 1;
        }
    }
    println!("---- acceptance summary ----");
    for l in &lines {
        println!("{l}");
    }
    if hard_failures > 0 {
        println!("{hard_failures} implementation criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn random_probs(r: &mut StreamRng, h: usize, w: usize, l: usize, scale: f64) -> ProbMap {
    let logits: Vec<f64> = (0..h * w * l).map(|_| r.random_range(-1.0..1.0) * scale).collect();
    ProbMap::from_logits(h, w, l, &logits).unwrap()
}

/// Either independent labels per pixel or a few rectangles on class 0.
fn random_mask(r: &mut StreamRng, h: usize, w: usize, l: usize) -> MaskMap {
    let mut labels = vec![0u8; h * w];
    if r.random_bool(0.5) {
        labels.iter_mut().for_each(|v| *v = r.random_range(0..l) as u8);
    } else {
        for _ in 0..r.random_range(1..=3) {
            let c = r.random_range(0..l) as u8;
            let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
            let (y1, x1) = (r.random_range(y0..h) + 1, r.random_range(x0..w) + 1);
            for y in y0..y1 {
                for x in x0..x1 {
                    labels[y * w + x] = c;
                }
            }
        }
    }
    MaskMap::new(h, w, l, labels).unwrap()
}

/// Tiny configuration for the trainer-level criteria.
fn tiny_cfg(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk().scaled_to((24, 24));
    cfg.model.depth = 2;
    cfg.model.base_channels = 4;
    cfg.model.norm_groups = 2;
    cfg.seed = seed;
    cfg.mu = 2;
    cfg
}

fn tiny_data(n: usize, seed: u64) -> Vec<LabeledSample> {
    make_synthetic_corpus(n, (24, 24), 3, seed, 0.05).unwrap()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

// ---------------------------------------------------------------- 1

/// Hand-expanded soft Dice: per-class sums accumulated pixel by pixel.
fn dice_oracle(p: &ProbMap, t: &MaskMap, eps: f64, include_bg: bool) -> f64 {
    let (h, w) = p.hw();
    let l = p.num_classes();
    let mut inter = vec![0.0; l];
    let mut sum_p = vec![0.0; l];
    let mut sum_g = vec![0.0; l];
    for y in 0..h {
        for x in 0..w {
            let label = t.get(y, x) as usize;
            for c in 0..l {
                let pv = p.get(c, y, x);
                sum_p[c] += pv;
                if label == c {
                    inter[c] += pv;
                    sum_g[c] += 1.0;
                }
            }
        }
    }
    let first = if include_bg { 0 } else { 1 };
    let terms: Vec<f64> = (first..l)
        .map(|c| (2.0 * inter[c] + eps) / (sum_p[c] + sum_g[c] + eps))
        .collect();
    1.0 - terms.iter().sum::<f64>() / terms.len() as f64
}

fn cheb(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Max of `v` over every pixel within Chebyshev distance `r`, found by
/// checking all pixel pairs.
fn dilate_exhaustive(v: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    (0..h * w)
        .map(|i| {
            (0..h * w)
                .filter(|&j| cheb((i / w, i % w), (j / w, j % w)) <= r)
                .map(|j| v[j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Soft boundary: how far below its neighbourhood maximum of `1 - x` a
/// pixel's own `1 - x` sits.
fn boundary_exhaustive(x: &[f64], h: usize, w: usize, width: usize) -> Vec<f64> {
    let inv: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
    let pooled = dilate_exhaustive(&inv, h, w, width);
    pooled.iter().zip(&inv).map(|(m, a)| (m - a).max(0.0)).collect()
}

fn boundary_oracle(p: &ProbMap, t: &MaskMap, width: usize, theta: usize, eps: f64, include_bg: bool) -> f64 {
    let (h, w) = p.hw();
    let l = p.num_classes();
    let first = if include_bg { 0 } else { 1 };
    let mut f1s = Vec::new();
    for c in first..l {
        let g: Vec<f64> = t.labels().iter().map(|v| f64::from(*v as usize == c)).collect();
        let gb = boundary_exhaustive(&g, h, w, width);
        let pb = boundary_exhaustive(p.plane(c), h, w, width);
        let g_ext = dilate_exhaustive(&gb, h, w, theta);
        let p_ext = dilate_exhaustive(&pb, h, w, theta);
        let precision = (pb.iter().zip(&g_ext).map(|(a, b)| a * b).sum::<f64>() + eps) / (pb.iter().sum::<f64>() + eps);
        let recall = (p_ext.iter().zip(&gb).map(|(a, b)| a * b).sum::<f64>() + eps) / (gb.iter().sum::<f64>() + eps);
        f1s.push(2.0 * precision * recall / (precision + recall + eps));
    }
    1.0 - f1s.iter().sum::<f64>() / f1s.len() as f64
}

fn c1_loss_oracles() -> Outcome {
    let mut r = rng::stream(101, &[]);
    let cases = 200;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (h, w, l) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(2..=4));
        let scale = [0.3, 2.0, 15.0][r.random_range(0..3)];
        let p = random_probs(&mut r, h, w, l, scale);
        let t = random_mask(&mut r, h, w, l);
        let loss = SegLoss {
            epsilon: [1e-6, 1e-3, 1.0][r.random_range(0..3)],
            boundary_width: r.random_range(1..=2),
            theta: r.random_range(1..=3),
            include_background: r.random_bool(0.7),
        };
        let dl = loss.dice(&p, &t).unwrap();
        let bl = loss.boundary(&p, &t).unwrap();
        let dl_o = dice_oracle(&p, &t, loss.epsilon, loss.include_background);
        let bl_o = boundary_oracle(&p, &t, loss.boundary_width, loss.theta, loss.epsilon, loss.include_background);
        worst = worst.max((dl - dl_o).abs()).max((bl - bl_o).abs());
    }
    Outcome::new(worst < 1e-4, format!("{cases} instances, max |impl - oracle| = {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

fn fd_relative_error(loss: &dyn Fn(&ProbMap) -> (f64, Vec<f64>), p: &ProbMap) -> f64 {
    let (h, w) = p.hw();
    let l = p.num_classes();
    let (_, analytic) = loss(p);
    let step = 1e-6;
    let mut num = 0.0;
    let mut den_a = 0.0;
    let mut den_f = 0.0;
    for k in 0..p.probs().len() {
        let mut plus = p.probs().to_vec();
        let mut minus = p.probs().to_vec();
        plus[k] += step;
        minus[k] -= step;
        let fp = loss(&ProbMap::new_unchecked(h, w, l, plus).unwrap()).0;
        let fm = loss(&ProbMap::new_unchecked(h, w, l, minus).unwrap()).0;
        let fd = (fp - fm) / (2.0 * step);
        num += (fd - analytic[k]).powi(2);
        den_a += analytic[k].powi(2);
        den_f += fd.powi(2);
    }
    num.sqrt() / den_a.sqrt().max(den_f.sqrt()).max(1e-12)
}

fn c2_gradient_checks() -> Outcome {
    let mut r = rng::stream(202, &[]);
    let cases = 30;
    let (mut worst_dl, mut worst_bl) = (0.0f64, 0.0f64);
    for k in 0..cases {
        let p = random_probs(&mut r, 6, 6, 3, 1.5);
        let t = random_mask(&mut r, 6, 6, 3);
        let loss = SegLoss {
            epsilon: LossConfig::default().dice_epsilon,
            boundary_width: 1 + k % 2,
            theta: 1 + k % 3,
            include_background: k % 4 != 0,
        };
        worst_dl = worst_dl.max(fd_relative_error(&|q| loss.dice_with_grad(q, &t).unwrap(), &p));
        worst_bl = worst_bl.max(fd_relative_error(&|q| loss.boundary_with_grad(q, &t).unwrap(), &p));
    }
    Outcome::new(
        worst_dl < 1e-3 && worst_bl < 1e-3,
        format!("{cases} instances 6x6 L=3, max relative error DL {worst_dl:.2e}, BL {worst_bl:.2e}"),
    )
}

// ---------------------------------------------------------------- 3

fn c3_loss_recomposition() -> Outcome {
    let pool = tiny_data(40, 3);
    let unl: Vec<UnlabeledSample> = fixmatchseg::data::strip_labels(&pool);
    let mut r = rng::stream(303, &[]);
    let mut worst = 0.0f64;
    let mut worst_param = 0.0f32;
    let (mut accepted, mut rejected) = (0, 0);
    let trials = 8;
    for trial in 0..trials {
        let mut cfg = tiny_cfg(trial);
        cfg.labeled_per_batch = r.random_range(1..=2);
        cfg.mu = r.random_range(1..=3);
        cfg.lambda_u = [0.5, 1.0, 2.0][r.random_range(0..3)];
        let model = init_model(&cfg, 1).unwrap();
        let b = cfg.labeled_per_batch;
        let labeled: Vec<&LabeledSample> = (0..b).map(|_| &pool[r.random_range(0..pool.len())]).collect();
        let unlabeled: Vec<&UnlabeledSample> = (0..cfg.mu * b).map(|_| &unl[r.random_range(0..unl.len())]).collect();
        let at = StepIndex {
            seed: cfg.seed,
            epoch: 1,
            step: trial as usize,
        };

        // Recompose every term from per-sample quantities.
        let loss = SegLoss::new(&cfg.loss);
        let weak: Vec<Image> = unlabeled.iter().enumerate().map(|(j, u)| augment_weak(u, &cfg, at, j).unwrap()).collect();
        let mut confs: Vec<f64> = weak
            .iter()
            .map(|im| make_pseudolabel(&model.predict_one(im).unwrap(), 0.0).confidence)
            .collect();
        // Threshold between the confidences so both branches of the gate occur.
        confs.sort_by(f64::total_cmp);
        cfg.tau = if confs.len() > 1 {
            0.5 * (confs[confs.len() / 2 - 1] + confs[confs.len() / 2])
        } else {
            confs[0] + if trial % 2 == 0 { -1e-9 } else { 1e-9 }
        };
        let per_labeled: Vec<f64> = labeled
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (img, mask) = augment_labeled(s, &cfg, at, i).unwrap();
                loss.combined(&model.predict_one(&img).unwrap(), &mask).unwrap()
            })
            .collect();
        let l_s = per_labeled.iter().sum::<f64>() / b as f64;
        let mut strong_preds = Vec::new();
        let mut pls = Vec::new();
        let mut strong_imgs = Vec::new();
        for (j, wk) in weak.iter().enumerate() {
            let pl = make_pseudolabel(&model.predict_one(wk).unwrap(), cfg.tau);
            let strong = augment_strong(wk, &cfg, at, j);
            strong_preds.push(model.predict_one(&strong).unwrap());
            strong_imgs.push(strong);
            pls.push(pl);
        }
        let n_u = unlabeled.len() as f64;
        let l_u: f64 = pls
            .iter()
            .zip(&strong_preds)
            .filter(|(pl, _)| pl.confidence >= cfg.tau)
            .map(|(pl, sp)| loss.combined(sp, &pl.label_mask).unwrap())
            .sum::<f64>()
            / n_u;
        let l = l_s + cfg.lambda_u * l_u;

        // Rejected samples have identically zero loss gradient.
        let (_, grads) = unsupervised_loss_with_grad(&strong_preds, &pls, &cfg).unwrap();
        for (pl, g) in pls.iter().zip(&grads) {
            if pl.accepted {
                accepted += 1;
            } else {
                rejected += 1;
                assert!(g.iter().all(|v| *v == 0.0), "rejected sample has gradient");
            }
        }

        let mut stepped = model.clone();
        let mut adam = Adam::new(&cfg, model.num_params());
        let batch = fixmatchseg::MixedBatch {
            labeled: labeled.clone(),
            unlabeled: unlabeled.clone(),
        };
        let rep = train_step(&mut stepped, &mut adam, &batch, &cfg, TrainMode::FixMatchSeg, at).unwrap();
        worst = worst
            .max((rep.l_s - l_s).abs())
            .max((rep.l_u - l_u).abs())
            .max((rep.l - l).abs())
            .max((rep.l - total_loss(rep.l_s, rep.l_u, cfg.lambda_u)).abs());
        for (o, pl) in rep.unlabeled.iter().zip(&pls) {
            assert_eq!(o.accepted, pl.accepted);
            assert_eq!(o.loss.is_some(), pl.accepted, "rejected samples must not report a loss");
        }

        // Same update from a gradient built only from labeled and accepted samples.
        let mut manual = model.clone();
        manual.zero_grad();
        for (i, s) in labeled.iter().enumerate() {
            let (img, mask) = augment_labeled(s, &cfg, at, i).unwrap();
            let tr = manual.forward_train(&img).unwrap();
            let (_, mut g) = loss.combined_with_grad(tr.probs(), &mask).unwrap();
            g.iter_mut().for_each(|v| *v *= 1.0 / b as f64);
            manual.backward(&tr, &g).unwrap();
        }
        for (pl, img) in pls.iter().zip(&strong_imgs) {
            if pl.accepted {
                let tr = manual.forward_train(img).unwrap();
                let (_, mut g) = loss.combined_with_grad(tr.probs(), &pl.label_mask).unwrap();
                g.iter_mut().for_each(|v| *v *= cfg.lambda_u * (1.0 / n_u));
                manual.backward(&tr, &g).unwrap();
            }
        }
        let mut adam2 = Adam::new(&cfg, model.num_params());
        let (params, grads) = manual.params_and_grads();
        adam2.update(params, grads);
        worst_param = worst_param.max(max_abs_diff(manual.params(), stepped.params()));
    }
    Outcome::new(
        worst < 1e-6 && worst_param <= 1e-6 && accepted > 0 && rejected > 0,
        format!(
            "{trials} batches ({accepted} accepted, {rejected} rejected), max loss error {worst:.2e}, \
             max parameter error vs accepted-only gradient {worst_param:.2e}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn c4_augmentation() -> Outcome {
    let mut r = rng::stream(404, &[]);
    let mut geom_failures = 0;
    let cases = 100;
    for _ in 0..cases {
        let (h, w, l) = (r.random_range(8..=40), r.random_range(8..=40), r.random_range(2..=5));
        let lo = r.random_range(-45.0..0.0);
        let aug = AugmentConfig {
            rotation_range_deg: (lo, lo + r.random_range(0.0..90.0)),
            elastic_alpha: r.random_range(0.0..8.0),
            elastic_sigma: r.random_range(0.5..4.0),
            ..AugmentConfig::default()
        };
        let params: GeomParams = sample_geom_params_for(&aug, (h, w), &mut r);
        let mask = random_mask(&mut r, h, w, l);
        let map = params.coord_map();
        let mut fill = vec![0.0f32; l];
        fill[0] = 1.0;
        let via_image = warp_channels(mask_to_one_hot_image(&mask).data(), l, &map, Interp::Nearest, &fill);
        let via_mask = mask_to_one_hot_image(&warp_mask(&mask, &map));
        if via_image != via_mask.data() {
            geom_failures += 1;
        }
    }

    // Coordinate images: x and y ramps. Sharpening, contrast about the mean
    // and blurring leave a linear ramp linear in the interior, so decoding
    // the output must return every pixel's own coordinate.
    let mut coord_failures = 0;
    let mut locality_failures = 0;
    let photo_cases = 100;
    for _ in 0..photo_cases {
        let (h, w) = (r.random_range(24..=48), r.random_range(24..=48));
        let params = PhotoParams {
            sharpness_factor: r.random_range(0.5..2.0),
            contrast_factor: r.random_range(0.5..1.5),
            blur_sigma: if r.random_bool(0.5) { 0.0 } else { r.random_range(0.5..2.0) },
        };
        let margin = if params.blur_sigma > 0.0 {
            (3.0 * params.blur_sigma).ceil() as usize + 1
        } else {
            1
        };
        for axis in 0..2 {
            let len = if axis == 0 { w } else { h };
            let data: Vec<f32> = (0..h * w)
                .map(|i| {
                    let k = if axis == 0 { i % w } else { i / w };
                    0.25 + 0.5 * k as f32 / (len - 1) as f32
                })
                .collect();
            let img = Image::new(h, w, 1, data).unwrap();
            let mean = img.data().iter().map(|v| *v as f64).sum::<f64>() / (h * w) as f64;
            let out = apply_strong(&img, &params);
            for y in margin..h - margin {
                for x in margin..w - margin {
                    let v = out.get(0, y, x) as f64;
                    let raw = (v - mean) / params.contrast_factor + mean;
                    let decoded = ((raw - 0.25) / 0.5 * (len - 1) as f64).round() as usize;
                    if decoded != if axis == 0 { x } else { y } {
                        coord_failures += 1;
                    }
                }
            }
        }
        // Locality: one changed input pixel only affects its neighbourhood
        // (contrast disabled, it couples pixels through the global mean).
        let local = PhotoParams {
            contrast_factor: 1.0,
            ..params
        };
        let base: Vec<f32> = (0..h * w).map(|_| r.random_range(0.2..0.8)).collect();
        let (py, px) = (r.random_range(0..h), r.random_range(0..w));
        let mut poked = base.clone();
        poked[py * w + px] = if base[py * w + px] > 0.5 { 0.0 } else { 1.0 };
        let a = apply_strong(&Image::new(h, w, 1, base).unwrap(), &local);
        let b = apply_strong(&Image::new(h, w, 1, poked).unwrap(), &local);
        let radius = 1 + if local.blur_sigma > 0.0 {
            (3.0 * local.blur_sigma).ceil() as usize
        } else {
            0
        };
        for y in 0..h {
            for x in 0..w {
                if cheb((y, x), (py, px)) > radius && a.get(0, y, x) != b.get(0, y, x) {
                    locality_failures += 1;
                }
            }
        }
    }
    let failures = geom_failures + coord_failures + locality_failures;
    Outcome::new(
        failures == 0,
        format!(
            "{cases} geometric draws ({geom_failures} mask/image mismatches), {photo_cases} photometric draws \
             ({coord_failures} displaced pixels, {locality_failures} non-local changes)"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn prob_map_strategy() -> impl Strategy<Value = ProbMap> {
    (1usize..=6, 1usize..=6, 2usize..=5, 0.1f64..20.0).prop_flat_map(|(h, w, l, scale)| {
        proptest::collection::vec(-1.0f64..1.0, h * w * l).prop_map(move |v| {
            let logits: Vec<f64> = v.iter().map(|x| x * scale).collect();
            ProbMap::from_logits(h, w, l, &logits).unwrap()
        })
    })
}

fn run_property<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn c5_pseudolabels() -> Outcome {
    let mut errors = Vec::new();
    let mut record = |r: Result<(), String>| {
        if let Err(e) = r {
            errors.push(e);
        }
    };
    record(run_property(
        "gate monotone in tau",
        (prob_map_strategy(), 0.0f64..1.5, 0.0f64..1.5),
        |(p, t1, t2)| {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a_lo = make_pseudolabel(&p, lo).accepted;
            let a_hi = make_pseudolabel(&p, hi).accepted;
            prop_assert!(!a_hi || a_lo);
            prop_assert!(make_pseudolabel(&p, 0.0).accepted);
            prop_assert!(!make_pseudolabel(&p, 1.0 + 1e-9).accepted);
            Ok(())
        },
    ));
    record(run_property("confidence in [1/L, 1]", prob_map_strategy(), |p| {
        let c = make_pseudolabel(&p, 0.9).confidence;
        let l = p.num_classes() as f64;
        prop_assert!(c >= 1.0 / l - 1e-12 && c <= 1.0 + 1e-12, "confidence {c} for L={l}");
        Ok(())
    }));
    // Exact ties: a random nonempty subset of classes shares the top score
    // at each pixel; the label must be the smallest class in the subset.
    let ties = (1usize..=5, 1usize..=5, 2usize..=5).prop_flat_map(|(h, w, l)| {
        (
            Just((h, w, l)),
            proptest::collection::vec(1u32..(1u32 << l), h * w),
            proptest::collection::vec(0.0f64..0.5, h * w * l),
        )
    });
    record(run_property("argmax ties resolve to lowest class", ties, |((h, w, l), subsets, low)| {
        let n = h * w;
        let mut scores = vec![0.0; n * l];
        for i in 0..n {
            for c in 0..l {
                scores[c * n + i] = if subsets[i] >> c & 1 == 1 { 0.75 } else { low[c * n + i] };
            }
        }
        let p = ProbMap::new_unchecked(h, w, l, scores).unwrap();
        let m1 = pseudo_mask(&p);
        prop_assert_eq!(&m1, &pseudo_mask(&p));
        for i in 0..n {
            prop_assert_eq!(m1.labels()[i] as u32, subsets[i].trailing_zeros());
        }
        Ok(())
    }));
    // Scores separated by a clear margin, then a strictly increasing map.
    let ranked = (1usize..=5, 1usize..=5, 2usize..=5, 0usize..4).prop_flat_map(|(h, w, l, f)| {
        (
            Just((h, w, l, f)),
            proptest::collection::vec(Just((0..l).collect::<Vec<usize>>()).prop_shuffle(), h * w),
            proptest::collection::vec(0.0f64..0.04, h * w * l),
        )
    });
    record(run_property("argmax invariant under monotone maps", ranked, |((h, w, l, f), perms, jitter)| {
        let n = h * w;
        let mut scores = vec![0.0; n * l];
        for i in 0..n {
            for c in 0..l {
                scores[c * n + i] = 0.05 + 0.1 * perms[i][c] as f64 + jitter[c * n + i];
            }
        }
        let map = |x: f64| match f {
            0 => x.exp(),
            1 => (x + 0.01).ln(),
            2 => x * x * x + 2.0 * x,
            _ => 1.0 / (1.0 + (-8.0 * x).exp()),
        };
        let before = pseudo_mask(&ProbMap::new_unchecked(h, w, l, scores.clone()).unwrap());
        let after = pseudo_mask(&ProbMap::new_unchecked(h, w, l, scores.into_iter().map(map).collect()).unwrap());
        prop_assert_eq!(before, after);
        Ok(())
    }));
    // Gate decision agrees with the confidence map average.
    record(run_property("confidence is mean of max map", prob_map_strategy(), |p| {
        let q = max_confidence_map(&p);
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        prop_assert!((make_pseudolabel(&p, 0.5).confidence - mean).abs() < 1e-12);
        Ok(())
    }));
    Outcome::new(
        errors.is_empty(),
        if errors.is_empty() {
            "5 properties x 1000 cases, 0 failures".to_string()
        } else {
            errors.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 6

fn tiny_pools(n_l: usize, n_u: usize) -> (Vec<LabeledSample>, Vec<UnlabeledSample>) {
    let lab = (0..n_l)
        .map(|i| {
            LabeledSample::new(
                format!("l{i}"),
                Image::zeros(2, 2, 1).unwrap(),
                MaskMap::filled(2, 2, 2, 0).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let unl = (0..n_u)
        .map(|i| UnlabeledSample {
            id: format!("u{i}"),
            image: Image::zeros(2, 2, 1).unwrap(),
        })
        .collect();
    (lab, unl)
}

fn c6_batches() -> Outcome {
    let mut r = rng::stream(606, &[]);
    let mut bad = Vec::new();
    let configs = 50;
    let mut batches_checked = 0;
    for k in 0..configs {
        let mut cfg = TrainConfig::desk();
        cfg.labeled_per_batch = r.random_range(1..=4);
        cfg.mu = r.random_range(1..=12);
        let (n_l, n_u) = (r.random_range(1..=30), r.random_range(1..=200));
        let (lab, unl) = tiny_pools(n_l, n_u);
        for epoch in 1..=2 {
            let mut seen: HashMap<&str, usize> = HashMap::new();
            let mut steps = 0;
            for batch in batch_stream(&lab, &unl, &cfg, k as u64, epoch).unwrap() {
                steps += 1;
                batches_checked += 1;
                if batch.labeled.len() != cfg.labeled_per_batch || batch.unlabeled.len() != cfg.mu * cfg.labeled_per_batch {
                    bad.push(format!("config {k}: batch {}+{}", batch.labeled.len(), batch.unlabeled.len()));
                }
                for u in &batch.unlabeled {
                    *seen.entry(u.id.as_str()).or_default() += 1;
                }
            }
            if steps != n_u.div_ceil(cfg.mu * cfg.labeled_per_batch) || seen.len() != n_u {
                bad.push(format!("config {k}: {steps} steps, {} of {n_u} unlabeled visited", seen.len()));
            }
        }
    }
    let plan = epoch_schedule(10, 100, 10, 1, 0, 1).unwrap();
    let mut counts = vec![0; 100];
    plan.iter().flat_map(|b| &b.unlabeled).for_each(|&i| counts[i] += 1);
    let worked = plan.len() == 10
        && plan.iter().all(|b| b.labeled.len() + b.unlabeled.len() == 11 && b.labeled.len() == 1)
        && counts.iter().all(|c| *c == 1);
    Outcome::new(
        bad.is_empty() && worked,
        format!(
            "{configs} (B, mu) configs, {batches_checked} batches, {} violations; 10 labeled / 100 unlabeled / mu=10 \
             gives {} batches of 11 covering each unlabeled image once: {worked}",
            bad.len(),
            plan.len()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn c7_reduction() -> Outcome {
    let pool = tiny_data(30, 7);
    let (labeled, unlabeled) = semi_supervised_pools(&pool[..20], 4, &[], 7);
    let val = &pool[20..];
    let data = TrainData {
        labeled: &labeled,
        unlabeled: &unlabeled,
        val,
    };
    let mut cfg = tiny_cfg(7);
    cfg.max_epochs = 2;
    let opts = FitOptions {
        keep_steps: true,
        ..Default::default()
    };
    let sup = fit(init_model(&cfg, 1).unwrap(), &data, &cfg, TrainMode::Supervised, opts.clone()).unwrap();

    let mut zero = cfg.clone();
    zero.lambda_u = 0.0;
    // Open gate: every pseudo-label is accepted, so only the weight zeroes l_u.
    zero.tau = 0.0;
    let fm0 = fit(init_model(&zero, 1).unwrap(), &data, &zero, TrainMode::FixMatchSeg, opts).unwrap();
    let mut worst_l0 = 0.0f64;
    for (a, b) in sup.steps.iter().zip(&fm0.steps) {
        worst_l0 = worst_l0.max((a.l_s - b.l_s).abs()).max((a.l - b.l).abs());
    }
    for (a, b) in sup.history.iter().zip(&fm0.history) {
        worst_l0 = worst_l0.max((a.val_loss - b.val_loss).abs()).max((a.l - b.l).abs());
    }
    let all_accepted = fm0.steps.iter().all(|s| s.accepted_fraction == 1.0 && s.l_u > 0.0);

    // A closed gate: tau above any confidence. Config validation keeps tau in
    // [0, 1], so this drives train_step over fit's own schedule directly.
    let mut closed = cfg.clone();
    closed.tau = 1.5;
    let mut model = init_model(&cfg, 1).unwrap();
    let mut adam = Adam::new(&cfg, model.num_params());
    let mut worst_closed = 0.0f64;
    let mut l_u_max = 0.0f64;
    let mut k = 0;
    for epoch in 1..=cfg.max_epochs {
        let plan = epoch_schedule(labeled.len(), unlabeled.len(), cfg.mu, cfg.labeled_per_batch, cfg.seed, epoch).unwrap();
        for (step, ix) in plan.iter().enumerate() {
            let batch = fixmatchseg::MixedBatch {
                labeled: ix.labeled.iter().map(|&i| &labeled[i]).collect(),
                unlabeled: ix.unlabeled.iter().map(|&i| &unlabeled[i]).collect(),
            };
            let at = StepIndex {
                seed: cfg.seed,
                epoch,
                step,
            };
            let rep = train_step(&mut model, &mut adam, &batch, &closed, TrainMode::FixMatchSeg, at).unwrap();
            let s = &sup.steps[k];
            worst_closed = worst_closed.max((rep.l_s - s.l_s).abs()).max((rep.l - s.l).abs());
            l_u_max = l_u_max.max(rep.l_u).max(rep.accepted_fraction);
            k += 1;
        }
    }
    let same_params = max_abs_diff(model.params(), sup.model.params()) == 0.0;
    let pass = all_accepted && worst_l0 <= 1e-6 && worst_closed <= 1e-6 && l_u_max == 0.0 && same_params && k == sup.steps.len();
    Outcome::new(
        pass,
        format!(
            "{} steps; lambda_u=0: max diff {worst_l0:.2e} (every pseudo-label accepted, l_u > 0: {all_accepted}); \
             tau=1.5: max diff {worst_closed:.2e}, l_u and acceptance stay 0: {}, identical final weights: {same_params}",
            sup.steps.len(),
            l_u_max == 0.0
        ),
    )
}

// ---------------------------------------------------------------- 8

/// Stop epoch (1-based) and best epoch for a loss sequence: training stops
/// at the first epoch whose last `patience` losses are all no lower than
/// the minimum before them.
fn stopping_oracle(losses: &[f64], patience: usize) -> (Option<usize>, usize) {
    let best_before = |e: usize| {
        let slice = &losses[..e];
        let m = slice.iter().cloned().fold(f64::INFINITY, f64::min);
        slice.iter().position(|v| *v == m).unwrap() + 1
    };
    for e in (patience + 1)..=losses.len() {
        let best = best_before(e - patience);
        let threshold = losses[best - 1];
        if losses[e - patience..e].iter().all(|v| *v >= threshold) {
            return (Some(e), best);
        }
    }
    (None, best_before(losses.len()))
}

fn run_stopper(losses: &[f64], patience: usize) -> (Option<usize>, usize) {
    let mut s = EarlyStopping::new(patience);
    for (i, v) in losses.iter().enumerate() {
        if s.observe(i + 1, *v).stop {
            return (Some(i + 1), s.best_epoch.unwrap());
        }
    }
    (None, s.best_epoch.unwrap())
}

fn c8_early_stopping() -> Outcome {
    // The 9-epoch rule on a hand-made sequence: best at epoch 2, a tie and
    // eight worse epochs after it, stop at 11.
    let seq = [1.0, 0.5, 0.5, 0.6, 0.7, 0.55, 0.9, 0.8, 0.51, 0.6, 0.52, 0.4];
    let example = run_stopper(&seq, 9) == (Some(11), 2);

    let mut r = rng::stream(808, &[]);
    let mut mismatches = 0;
    let sequences = 2000;
    for _ in 0..sequences {
        let n = r.random_range(1..40);
        let patience = r.random_range(1..=10);
        // Coarse values make ties common.
        let losses: Vec<f64> = (0..n).map(|_| r.random_range(0..8) as f64 / 8.0).collect();
        if run_stopper(&losses, patience) != stopping_oracle(&losses, patience) {
            mismatches += 1;
        }
    }

    // Fit-level: best checkpoint and resume equivalence.
    let pool = tiny_data(24, 8);
    let (labeled, unlabeled) = semi_supervised_pools(&pool[..16], 4, &[], 8);
    let data = TrainData {
        labeled: &labeled,
        unlabeled: &unlabeled,
        val: &pool[16..],
    };
    let mut cfg = tiny_cfg(8);
    cfg.max_epochs = 4;
    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let full = fit(
        init_model(&cfg, 1).unwrap(),
        &data,
        &cfg,
        TrainMode::FixMatchSeg,
        FitOptions {
            run_dir: Some(full_dir.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    let val_losses: Vec<f64> = full.history.iter().map(|h| h.val_loss).collect();
    let expected_best = run_stopper(&val_losses, cfg.patience_epochs).1;
    let best_ck = Checkpoint::load(&full_dir.join(BEST_CHECKPOINT)).unwrap();
    let best_ok = full.best_epoch() == Some(expected_best)
        && best_ck.header.progress.epoch == expected_best
        && best_ck.best_params == full.best_params
        && evaluate(&best_ck.best_model().unwrap(), data.val, &cfg).unwrap().loss == val_losses[expected_best - 1];

    let part_dir = dir.path().join("part");
    let part = fit(
        init_model(&cfg, 1).unwrap(),
        &data,
        &cfg,
        TrainMode::FixMatchSeg,
        FitOptions {
            run_dir: Some(part_dir.clone()),
            epoch_limit: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    let resumed = fit(
        init_model(&cfg, 1).unwrap(),
        &data,
        &cfg,
        TrainMode::FixMatchSeg,
        FitOptions {
            resume: Some(Checkpoint::load(&part_dir.join(LAST_CHECKPOINT)).unwrap()),
            ..Default::default()
        },
    )
    .unwrap();
    let resume_ok = part.history.len() == 2
        && resumed.history.len() == full.history.len()
        && resumed.history.iter().zip(&full.history).all(|(a, b)| a.same_losses(b))
        && resumed.model.params() == full.model.params()
        && resumed.best_params == full.best_params;
    Outcome::new(
        example && mismatches == 0 && best_ok && resume_ok,
        format!(
            "9-epoch example: {example}; {sequences} random sequences vs oracle: {mismatches} mismatches; \
             best checkpoint selection: {best_ok}; resume after epoch 2 bitwise equal: {resume_ok}"
        ),
    )
}

// ---------------------------------------------------------------- 9 and 10

/// One trained configuration of the synthetic experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Arm {
    Baseline,
    FixMatch { mu: usize, tau_pct: u32 },
}

struct Experiment {
    seeds: Vec<u64>,
    epochs: usize,
    dice: HashMap<(Arm, u64), f64>,
}

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

/// 500 images at 96x96 with three classes: 300 train (8 labeled, all 300
/// unlabeled), 50 validation, 150 test. Every arm of a seed shares the
/// labeled subset, batch schedule and initial weights.
fn experiment() -> &'static Experiment {
    static CELL: std::sync::OnceLock<Experiment> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let epochs = env_usize("FMS_EXPERIMENT_EPOCHS", 8);
        let n_seeds = env_usize("FMS_EXPERIMENT_SEEDS", 3) as u64;
        let corpus = make_synthetic_corpus(500, (96, 96), 3, 2024, 0.1).unwrap();
        let (train, rest) = corpus.split_at(300);
        let (val, test) = rest.split_at(50);
        let arms = [
            Arm::Baseline,
            Arm::FixMatch { mu: 10, tau_pct: 90 },
            Arm::FixMatch { mu: 1, tau_pct: 90 },
            Arm::FixMatch { mu: 10, tau_pct: 80 },
            Arm::FixMatch { mu: 10, tau_pct: 95 },
        ];
        let mut dice = HashMap::new();
        for seed in 0..n_seeds {
            let (labeled, unlabeled) = semi_supervised_pools(train, 8, &[], seed);
            for arm in arms {
                let mut cfg = TrainConfig::desk();
                cfg.seed = seed;
                cfg.max_epochs = epochs;
                cfg.lambda_u = 1.0;
                cfg.mu = 10;
                let mode = match arm {
                    Arm::Baseline => TrainMode::Supervised,
                    Arm::FixMatch { mu, tau_pct } => {
                        cfg.mu = mu;
                        cfg.tau = tau_pct as f64 / 100.0;
                        TrainMode::FixMatchSeg
                    }
                };
                let data = TrainData {
                    labeled: &labeled,
                    unlabeled: &unlabeled,
                    val,
                };
                let t = Instant::now();
                let res = fit(init_model(&cfg, 1).unwrap(), &data, &cfg, mode, FitOptions::default()).unwrap();
                let report = evaluate(&res.best_model().unwrap(), test, &cfg).unwrap();
                println!(
                    "  experiment seed {seed} {arm:?}: test mean Dice {:.4} (per class {:?}), best epoch {:?}, {:.0}s",
                    report.mean_dice,
                    report.per_class_dice.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>(),
                    res.best_epoch(),
                    t.elapsed().as_secs_f64()
                );
                dice.insert((arm, seed), report.mean_dice);
            }
        }
        Experiment {
            seeds: (0..n_seeds).collect(),
            epochs,
            dice,
        }
    })
}

fn mean_over_seeds(e: &Experiment, arm: Arm) -> f64 {
    e.seeds.iter().map(|s| e.dice[&(arm, *s)]).sum::<f64>() / e.seeds.len() as f64
}

fn c9_experiment() -> Outcome {
    let e = experiment();
    let base = mean_over_seeds(e, Arm::Baseline);
    let fm10 = mean_over_seeds(e, Arm::FixMatch { mu: 10, tau_pct: 90 });
    let fm1 = mean_over_seeds(e, Arm::FixMatch { mu: 1, tau_pct: 90 });
    let semi_ok = fm10 >= base - 0.01;
    let mu_ok = fm10 >= fm1 - 0.01;
    Outcome::new(
        semi_ok && mu_ok,
        format!(
            "{} seeds x {} epochs: baseline {base:.4}, FixMatchSeg mu=10 {fm10:.4}, mu=1 {fm1:.4}; \
             FixMatchSeg >= baseline - 0.01: {semi_ok}; mu=10 >= mu=1 - 0.01: {mu_ok}",
            e.seeds.len(),
            e.epochs
        ),
    )
}

fn c10_threshold() -> Outcome {
    let e = experiment();
    let taus = [80, 90, 95];
    let mut worst = 0.0f64;
    let mut per_seed = Vec::new();
    for s in &e.seeds {
        let v: Vec<f64> = taus
            .iter()
            .map(|t| e.dice[&(Arm::FixMatch { mu: 10, tau_pct: *t }, *s)])
            .collect();
        let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        worst = worst.max(spread);
        per_seed.push(format!("{spread:.4}"));
    }
    Outcome::new(
        worst < 0.05,
        format!("Dice spread over tau in {{0.80, 0.90, 0.95}} per seed: [{}], max {worst:.4}", per_seed.join(", ")),
    )
}
