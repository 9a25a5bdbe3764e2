//! Acceptance gate: eight end-to-end checks over the whole crate, run as a
//! plain binary (no test harness) so that exactly one pass/fail line is
//! printed per criterion. A non-zero exit code marks the gate as failed.
//!
//! Run everything:     cargo test --test acceptance
//! Run a subset:       cargo test --test acceptance -- --only 6,8

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use colorcount::color_space::{lab_pixel_to_rgb, rgb_pixel_to_lab, rgb_to_lab};
use colorcount::density::{
    adaptive_sigmas, count_from_density, density_from_points, synth_corpus, DensityMap,
    HeadAnnotations, KernelMode, SynthConfig,
};
use colorcount::eval::{evaluate_model, mae_mse};
use colorcount::losses::{
    classification_loss, colorization_loss, colorization_loss_sparse, cycle_loss,
    euclidean_count_loss, finite_difference, gan_losses, max_relative_error, texture_loss,
    FeatureStack,
};
use colorcount::networks::{
    classifier_forward, colorize_forward, igc_block_nodes, IgcBlockSpec, IGC_DILATION,
};
use colorcount::nn::{Initializer, ParamStore, Tape};
use colorcount::pipeline::{
    finetune, load_checkpoint, pretrain, save_checkpoint, scenes_from_synth, train_from_scratch,
    LabeledScene, TrainConfig,
};
use colorcount::priors::{keyword_groups, GroupLabel, KeywordVocabulary};
use colorcount::quantization::{
    build_codebook, decode_annealed_mean, soft_encode_sparse, ColorDistribution,
    RebalanceWeights, SparseEncoding, DEFAULT_GAMUT_SAMPLES, DEFAULT_K, DEFAULT_TEMPERATURE,
};

type CriterionResult = Result<String, String>;

// ---------------------------------------------------------------------------
// Tunable scale of the two training criteria. These values are calibrated so
// the whole gate stays well inside the runtime budget on one CPU core while
// leaving a clear margin on the claims being tested.
// ---------------------------------------------------------------------------

/// Scene geometry shared by criteria 6 and 8.
const SCENE_SIZE: usize = 64;
const GROUP_RANGES: [(u32, u32); 3] = [(1, 8), (12, 30), (40, 70)];

/// Criterion 6 corpus sizes (unlabeled / labeled / held-out test).
const C6_UNLABELED: usize = 300;
const C6_LABELED: usize = 100;
const C6_TEST: usize = 50;
const C6_SEEDS: [u64; 3] = [31, 38, 40];
const C6_PRETRAIN_EPOCHS: usize = 15;
const C6_FINETUNE_EPOCHS: usize = 200;
const C6_STAGE1_SIZE: usize = 32;
const C6_STAGE2_SIZE: usize = 32;
const C6_GRID_SPACING: f64 = 20.0;
const C6_STAGE2_LR: f64 = 1e-4;
const C6_LAMBDA: f64 = 1.0;

/// Criterion 8 corpus and schedule.
const C8_SCENES: usize = 150;
const C8_HELD_OUT: usize = 30;
const C8_EPOCHS: usize = 20;
const C8_TARGET_ACCURACY: f64 = 0.80;

fn main() {
    let only = parse_only(std::env::args().skip(1).collect());
    let criteria: Vec<(u8, &str, fn() -> CriterionResult)> = vec![
        (1, "gradient suite", c1_gradient_suite),
        (2, "oracle equivalence", c2_oracle_equivalence),
        (3, "color round-trip", c3_color_round_trip),
        (4, "density integrity", c4_density_integrity),
        (5, "igc block", c5_igc_block),
        (6, "end-to-end counting claim", c6_end_to_end),
        (7, "determinism and persistence", c7_determinism),
        (8, "classification sanity", c8_classification),
    ];

    let mut failures = 0;
    for (num, name, run) in criteria {
        if let Some(filter) = &only {
            if !filter.contains(&num) {
                continue;
            }
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked (see stderr)".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {num} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(reason) => {
                failures += 1;
                println!("criterion {num} ({name}): FAIL [{secs:.1}s] {reason}");
            }
        }
    }

    if failures > 0 {
        std::process::exit(1);
    }
}

fn parse_only(args: Vec<String>) -> Option<Vec<u8>> {
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        if arg == "--only" {
            let list = iter.next().cloned().unwrap_or_default();
            return Some(list.split(',').filter_map(|s| s.trim().parse().ok()).collect());
        }
    }
    None
}

fn ctx<T, E: std::fmt::Display>(r: Result<T, E>, what: &str) -> Result<T, String> {
    r.map_err(|e| format!("{what}: {e}"))
}

// ---------------------------------------------------------------------------
// Criterion 1: every loss passes a central finite-difference gradient check.
// ---------------------------------------------------------------------------

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-4;
const INSTANCES: usize = 20;

/// Per-pixel softmax of flattened logits, as the training path applies it.
fn softmax_probs(logits: &[f64], h: usize, w: usize, q: usize) -> Array3<f64> {
    let mut probs = Array3::zeros((h, w, q));
    for y in 0..h {
        for x in 0..w {
            let row = &logits[(y * w + x) * q..(y * w + x + 1) * q];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (i, e) in exps.iter().enumerate() {
                probs[[y, x, i]] = e / sum;
            }
        }
    }
    probs
}

fn random_dense_target(rng: &mut ChaCha12Rng, h: usize, w: usize, q: usize) -> ColorDistribution {
    let mut probs = Array3::zeros((h, w, q));
    for y in 0..h {
        for x in 0..w {
            let raw: Vec<f64> = (0..q).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            for (i, r) in raw.iter().enumerate() {
                probs[[y, x, i]] = r / sum;
            }
        }
    }
    ColorDistribution::new(probs).expect("valid distribution")
}

fn random_sparse_target(rng: &mut ChaCha12Rng, h: usize, w: usize, q: usize, k: usize) -> SparseEncoding {
    let mut indices = Array3::zeros((h, w, k));
    let mut weights = Array3::zeros((h, w, k));
    for y in 0..h {
        for x in 0..w {
            let mut pool: Vec<u32> = (0..q as u32).collect();
            for slot in 0..k {
                let pick = rng.random_range(0..pool.len());
                indices[[y, x, slot]] = pool.swap_remove(pick);
            }
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            for slot in 0..k {
                weights[[y, x, slot]] = raw[slot] / sum;
            }
        }
    }
    SparseEncoding { indices, weights, q }
}

fn random_weights(rng: &mut ChaCha12Rng, q: usize) -> RebalanceWeights {
    RebalanceWeights {
        per_bin: (0..q).map(|_| rng.random_range(0.2..3.0)).collect(),
        mix: 0.5,
    }
}

fn c1_gradient_suite() -> CriterionResult {
    let start = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();

    // Colorization: gradient is taken with respect to pre-softmax logits.
    let mut err_max = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = ChaCha12Rng::seed_from_u64(1_000 + inst as u64);
        let (h, w) = (rng.random_range(2..4), rng.random_range(2..4));
        let q = rng.random_range(5..12);
        let k = rng.random_range(2..=4.min(q));
        let target = random_sparse_target(&mut rng, h, w, q, k);
        let weights = random_weights(&mut rng, q);
        let logits: Vec<f64> = (0..h * w * q).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (_, grad) = ctx(
            colorization_loss_sparse(&softmax_probs(&logits, h, w, q), &target, &weights),
            "colorization loss",
        )?;
        let numeric = finite_difference(
            |lg| {
                colorization_loss_sparse(&softmax_probs(lg, h, w, q), &target, &weights)
                    .unwrap()
                    .0
            },
            &logits,
            FD_STEP,
        );
        let analytic: Vec<f64> = grad.iter().copied().collect();
        err_max = err_max.max(max_relative_error(&analytic, &numeric));
    }
    worst.push(("colorization", err_max));

    // Cycle reconstruction: gradients with respect to both reconstructions.
    let mut err_max = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = ChaCha12Rng::seed_from_u64(2_000 + inst as u64);
        let nx = rng.random_range(4..12);
        let nz = rng.random_range(4..12);
        let x: Vec<f64> = (0..nx).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z: Vec<f64> = (0..nz).map(|_| rng.random_range(-2.0..2.0)).collect();
        // keep |rec - input| away from the absolute-value kink at zero
        let offset = |rng: &mut ChaCha12Rng| {
            let s = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
            s * rng.random_range(0.05..0.8)
        };
        let x_rec: Vec<f64> = x.iter().map(|v| v + offset(&mut rng)).collect();
        let z_rec: Vec<f64> = z.iter().map(|v| v + offset(&mut rng)).collect();
        let (_, gx, gz) = ctx(cycle_loss(&x, &x_rec, &z, &z_rec), "cycle loss")?;
        let num_x = finite_difference(
            |xr| cycle_loss(&x, xr, &z, &z_rec).unwrap().0,
            &x_rec,
            FD_STEP,
        );
        let num_z = finite_difference(
            |zr| cycle_loss(&x, &x_rec, &z, zr).unwrap().0,
            &z_rec,
            FD_STEP,
        );
        err_max = err_max.max(max_relative_error(&gx, &num_x));
        err_max = err_max.max(max_relative_error(&gz, &num_z));
    }
    worst.push(("cycle", err_max));

    // Texture (Gram-matrix) loss: gradient with respect to predicted features.
    let mut err_max = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = ChaCha12Rng::seed_from_u64(3_000 + inst as u64);
        let n = rng.random_range(2..5);
        let m = rng.random_range(4..10);
        let pred: Vec<f64> = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tgt = Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0));
        let target = ctx(FeatureStack::new(tgt), "target features")?;
        let stack = |v: &[f64]| {
            FeatureStack::new(Array2::from_shape_vec((n, m), v.to_vec()).unwrap()).unwrap()
        };
        let (_, grad) = ctx(texture_loss(&stack(&pred), &target), "texture loss")?;
        let numeric = finite_difference(
            |p| texture_loss(&stack(p), &target).unwrap().0,
            &pred,
            FD_STEP,
        );
        let analytic: Vec<f64> = grad.iter().copied().collect();
        err_max = err_max.max(max_relative_error(&analytic, &numeric));
    }
    worst.push(("texture", err_max));

    // Classification: gradient with respect to the logits.
    let mut err_max = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = ChaCha12Rng::seed_from_u64(4_000 + inst as u64);
        let b = rng.random_range(1..5);
        let m = rng.random_range(2..5) as u8;
        let logits: Vec<f64> =
            (0..b * m as usize).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<GroupLabel> = (0..b)
            .map(|_| GroupLabel::new(rng.random_range(1..=m), m).unwrap())
            .collect();
        let shape = |v: &[f64]| Array2::from_shape_vec((b, m as usize), v.to_vec()).unwrap();
        let (_, grad) = ctx(classification_loss(&shape(&logits), &labels), "classification")?;
        let numeric = finite_difference(
            |lg| classification_loss(&shape(lg), &labels).unwrap().0,
            &logits,
            FD_STEP,
        );
        let analytic: Vec<f64> = grad.iter().copied().collect();
        err_max = err_max.max(max_relative_error(&analytic, &numeric));
    }
    worst.push(("classification", err_max));

    // Adversarial generator and discriminator sides, with respect to the
    // discriminator probabilities.
    let mut err_gen = 0.0f64;
    let mut err_disc = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = ChaCha12Rng::seed_from_u64(5_000 + inst as u64);
        let nr = rng.random_range(2..7);
        let nf = rng.random_range(2..7);
        let real: Vec<f64> = (0..nr).map(|_| rng.random_range(0.1..0.9)).collect();
        let fake: Vec<f64> = (0..nf).map(|_| rng.random_range(0.1..0.9)).collect();
        let losses = ctx(gan_losses(&real, &fake), "gan losses")?;
        let num_real = finite_difference(
            |r| gan_losses(r, &fake).unwrap().discriminator_loss,
            &real,
            FD_STEP,
        );
        let num_fake_d = finite_difference(
            |f| gan_losses(&real, f).unwrap().discriminator_loss,
            &fake,
            FD_STEP,
        );
        let num_fake_g = finite_difference(
            |f| gan_losses(&real, f).unwrap().generator_loss,
            &fake,
            FD_STEP,
        );
        err_disc = err_disc.max(max_relative_error(&losses.disc_grad_on_real, &num_real));
        err_disc = err_disc.max(max_relative_error(&losses.disc_grad_on_fake, &num_fake_d));
        err_gen = err_gen.max(max_relative_error(&losses.gen_grad_on_fake, &num_fake_g));
    }
    worst.push(("gan generator", err_gen));
    worst.push(("gan discriminator", err_disc));

    // Stage-2 euclidean counting loss: gradient with respect to the predicted
    // density values.
    let mut err_max = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = ChaCha12Rng::seed_from_u64(6_000 + inst as u64);
        let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
        let pred: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.1..1.0)).collect();
        let target = ctx(
            DensityMap::new(Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0))),
            "target map",
        )?;
        let shape = |v: &[f64]| {
            DensityMap::new(Array2::from_shape_vec((h, w), v.to_vec()).unwrap()).unwrap()
        };
        let (_, grad) = ctx(euclidean_count_loss(&shape(&pred), &target), "count loss")?;
        let numeric = finite_difference(
            |p| euclidean_count_loss(&shape(p), &target).unwrap().0,
            &pred,
            FD_STEP,
        );
        let analytic: Vec<f64> = grad.iter().copied().collect();
        err_max = err_max.max(max_relative_error(&analytic, &numeric));
    }
    worst.push(("euclidean count", err_max));

    let elapsed = start.elapsed();
    if elapsed.as_secs_f64() > 120.0 {
        return Err(format!("gradient suite exceeded 2 min ({:.1}s)", elapsed.as_secs_f64()));
    }
    if let Some((term, err)) = worst.iter().find(|(_, e)| !(*e < GRAD_TOL)) {
        return Err(format!("{term} gradient error {err:.3e} >= {GRAD_TOL:.0e}"));
    }
    let peak = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(format!("7 losses x {INSTANCES} instances, worst relative error {peak:.2e}"))
}

// ---------------------------------------------------------------------------
// Criterion 2: naive double-loop oracles agree with the library within 1e-8.
// ---------------------------------------------------------------------------

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-8 * b.abs().max(1.0)
}

fn c2_oracle_equivalence() -> CriterionResult {
    let mut checked = 0usize;
    for inst in 0..30u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(20_000 + inst);

        // Colorization: v(Z) * cross-entropy summed over pixels, where v(Z)
        // is the rebalance weight of the target's most probable bin.
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let q = rng.random_range(4..=16);
        let pred = random_dense_target(&mut rng, h, w, q);
        let target = random_dense_target(&mut rng, h, w, q);
        let weights = random_weights(&mut rng, q);
        let (value, _) = ctx(colorization_loss(&pred, &target, &weights), "colorization")?;
        let mut oracle = 0.0;
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                for i in 1..q {
                    if target.probs[[y, x, i]] > target.probs[[y, x, best]] {
                        best = i;
                    }
                }
                let v = weights.per_bin[best];
                for i in 0..q {
                    let z = target.probs[[y, x, i]];
                    if z > 0.0 {
                        oracle -= v * z * pred.probs[[y, x, i]].ln();
                    }
                }
            }
        }
        if !close(value, oracle) {
            return Err(format!("colorization {value} vs oracle {oracle}"));
        }

        // Texture: Gram matrices by explicit loops, squared Frobenius gap
        // scaled by 1 / (4 n^2 m^2).
        let n = rng.random_range(2..=6);
        let m = rng.random_range(2..=8) * rng.random_range(2..=8);
        let a = Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0));
        let (value, _) = ctx(
            texture_loss(
                &FeatureStack::new(a.clone()).unwrap(),
                &FeatureStack::new(b.clone()).unwrap(),
            ),
            "texture",
        )?;
        let gram = |f: &Array2<f64>| {
            let mut g = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    for p in 0..m {
                        g[i][j] += f[[i, p]] * f[[j, p]];
                    }
                }
            }
            g
        };
        let (ga, gb) = (gram(&a), gram(&b));
        let mut oracle = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = ga[i][j] - gb[i][j];
                oracle += d * d;
            }
        }
        oracle /= 4.0 * (n * n) as f64 * (m * m) as f64;
        if !close(value, oracle) {
            return Err(format!("texture {value} vs oracle {oracle}"));
        }

        // Counting metrics: mean absolute error and root mean squared error.
        let count = rng.random_range(1..40);
        let truth: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..200.0)).collect();
        let pred: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..200.0)).collect();
        let report = ctx(mae_mse(&truth, &pred), "mae/mse")?;
        let mut abs_sum = 0.0;
        let mut sq_sum = 0.0;
        for i in 0..count {
            abs_sum += (truth[i] - pred[i]).abs();
            sq_sum += (truth[i] - pred[i]) * (truth[i] - pred[i]);
        }
        let mae_oracle = abs_sum / count as f64;
        let mse_oracle = (sq_sum / count as f64).sqrt();
        if !close(report.mae, mae_oracle) || !close(report.mse, mse_oracle) {
            return Err(format!(
                "metrics ({}, {}) vs oracle ({mae_oracle}, {mse_oracle})",
                report.mae, report.mse
            ));
        }
        checked += 3;
    }
    Ok(format!("{checked} random instances matched naive oracles within 1e-8"))
}

// ---------------------------------------------------------------------------
// Criterion 3: color-space and quantization round trips.
// ---------------------------------------------------------------------------

fn c3_color_round_trip() -> CriterionResult {
    let mut rng = ChaCha12Rng::seed_from_u64(30_000);
    let mut worst_rgb = 0.0f64;
    for _ in 0..1_000 {
        let (r, g, b) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        let (l, a, bb) = rgb_pixel_to_lab(r, g, b);
        let (r2, g2, b2) = lab_pixel_to_rgb(l, a, bb);
        worst_rgb = worst_rgb
            .max((r - r2).abs())
            .max((g - g2).abs())
            .max((b - b2).abs());
    }
    if !(worst_rgb < 1e-3) {
        return Err(format!("rgb->lab->rgb max channel error {worst_rgb:.3e} >= 1e-3"));
    }

    let spacing = 10.0;
    let cb = ctx(build_codebook(spacing, DEFAULT_GAMUT_SAMPLES), "codebook")?;
    let sigma = cb.default_sigma();
    let k = DEFAULT_K.min(cb.q());
    let mut worst_ab = 0.0f64;
    for _ in 0..1_000 {
        let (r, g, b) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        let (_, a, bb) = rgb_pixel_to_lab(r, g, b);
        let chroma = Array3::from_shape_fn((1, 1, 2), |(_, _, c)| if c == 0 { a } else { bb });
        let enc = ctx(soft_encode_sparse(&chroma, &cb, k, sigma), "encode")?;
        let decoded = ctx(
            decode_annealed_mean(&enc.to_dense(), &cb, DEFAULT_TEMPERATURE),
            "decode",
        )?;
        let err = ((a - decoded[[0, 0, 0]]).powi(2) + (bb - decoded[[0, 0, 1]]).powi(2)).sqrt();
        worst_ab = worst_ab.max(err);
    }
    if !(worst_ab <= spacing) {
        return Err(format!("quantization round-trip error {worst_ab:.3} > spacing {spacing}"));
    }
    Ok(format!(
        "1000 colors: rgb error {worst_rgb:.2e} < 1e-3; ab round-trip {worst_ab:.2} <= {spacing}"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 4: density maps integrate to the head count; adaptive bandwidth
// hand check is exact.
// ---------------------------------------------------------------------------

fn c4_density_integrity() -> CriterionResult {
    let mut rng = ChaCha12Rng::seed_from_u64(40_000);
    let mut worst = 0.0f64;
    for inst in 0..100 {
        let h = rng.random_range(32..96);
        let w = rng.random_range(32..96);
        let n = rng.random_range(0..=50);
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(0.0..w as f64 - 1e-6),
                    rng.random_range(0.0..h as f64 - 1e-6),
                )
            })
            .collect();
        let ann = ctx(HeadAnnotations::new(points, (h, w)), "annotations")?;
        let mode = if inst % 2 == 0 {
            KernelMode::Adaptive { beta: 0.3, k: 3 }
        } else {
            KernelMode::Fixed { sigma: rng.random_range(1.0..6.0) }
        };
        let map = ctx(density_from_points(&ann, mode), "density")?;
        let gap = (count_from_density(&map) - n as f64).abs();
        worst = worst.max(gap);
        if !(gap < 1e-5) {
            return Err(format!("sum gap {gap:.2e} for n={n} ({mode:?})"));
        }
    }

    // Three collinear points 10 px apart: the middle one has two neighbors at
    // distance 10, so sigma = 0.3 * 10 must be exactly 3.0.
    let ann = ctx(
        HeadAnnotations::new(vec![(22.0, 32.0), (32.0, 32.0), (42.0, 32.0)], (64, 64)),
        "hand-check annotations",
    )?;
    let sigmas = adaptive_sigmas(&ann, 0.3, 3);
    if sigmas[1] != 3.0 {
        return Err(format!("middle sigma {} != 3.0 exactly", sigmas[1]));
    }
    if sigmas[0] != 4.5 || sigmas[2] != 4.5 {
        return Err(format!("edge sigmas {:?} != 4.5", (sigmas[0], sigmas[2])));
    }
    Ok(format!("100 maps integrate to count (worst gap {worst:.1e}); sigma_mid = 3.0 exact"))
}

// ---------------------------------------------------------------------------
// Criterion 5: interleaved group convolution block properties.
// ---------------------------------------------------------------------------

fn c5_igc_block() -> CriterionResult {
    // (a) Degenerate one-partition block equals a dense reference.
    let spec = IgcBlockSpec { channels: 1, primary_partitions: 1, secondary_partitions: 1, kernel: 3 };
    let mut store = ParamStore::new();
    let mut init = Initializer::new(50_001);
    ctx(store.add("blk.primary.w", init.gaussian(&[1, 1, 3, 3], 9)), "primary weight")?;
    ctx(store.add("blk.secondary.w", init.gaussian(&[1, 1, 1, 1], 1)), "secondary weight")?;
    let mut rng = ChaCha12Rng::seed_from_u64(50_002);
    let input = Array4::from_shape_fn((2, 1, 7, 6), |_| rng.random_range(-1.0f32..1.0));

    let mut tape = Tape::new(&store);
    let x = tape.input(input.clone());
    let (_, out) = ctx(igc_block_nodes(&mut tape, x, &spec, "blk"), "degenerate block")?;
    let w = store.get(store.id("blk.primary.w").unwrap()).clone();
    let s = store.get(store.id("blk.secondary.w").unwrap())[[0, 0, 0, 0]];
    let d = IGC_DILATION as isize;
    let (_, _, h, wd) = input.dim();
    let mut worst = 0.0f32;
    for bi in 0..2 {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = 0.0f32;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = y as isize + d * (ky as isize - 1);
                        let ix = xx as isize + d * (kx as isize - 1);
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                            acc += input[[bi, 0, iy as usize, ix as usize]] * w[[0, 0, ky, kx]];
                        }
                    }
                }
                let expect = acc * s + input[[bi, 0, y, xx]];
                let got = tape.value(out)[[bi, 0, y, xx]];
                worst = worst.max((expect - got).abs());
            }
        }
    }
    if !(worst < 1e-6) {
        return Err(format!("degenerate block differs from dense reference by {worst:.2e}"));
    }

    // (b) Permutation sourcing: with identity primary partitions and all-ones
    // secondary partitions, every pre-residual output channel must respond to
    // markers placed in *each* primary partition. Without the interleaving
    // permutation a secondary partition would only ever see its own primary
    // partition and one of the probes below would leave it at exactly zero.
    let spec = IgcBlockSpec { channels: 4, primary_partitions: 2, secondary_partitions: 2, kernel: 1 };
    let mut store = ParamStore::new();
    let mut primary = Array4::<f32>::zeros((4, 2, 1, 1));
    for c in 0..4 {
        primary[[c, c % 2, 0, 0]] = 1.0; // within-group identity
    }
    ctx(store.add("mix.primary.w", primary.into_dyn()), "crafted primary")?;
    ctx(store.add("mix.secondary.w", Array4::<f32>::ones((4, 2, 1, 1)).into_dyn()), "crafted secondary")?;
    for (m0, m1) in [(1.0f32, 0.0f32), (0.0, 1.0)] {
        let probe = Array4::from_shape_fn((1, 4, 3, 3), |(_, c, _, _)| if c < 2 { m0 } else { m1 });
        let mut tape = Tape::new(&store);
        let x = tape.input(probe);
        let (pre, _) = ctx(igc_block_nodes(&mut tape, x, &spec, "mix"), "sourcing block")?;
        let val = tape.value(pre);
        for c in 0..4 {
            if val[[0, c, 1, 1]] == 0.0 {
                return Err(format!(
                    "output channel {c} ignores the partition marked by probe ({m0},{m1})"
                ));
            }
        }
    }

    // (c) Parameter budget for L = M = 8 stays strictly below the dense
    // two-convolution equivalent with the same channel counts.
    let spec = IgcBlockSpec { channels: 64, primary_partitions: 8, secondary_partitions: 8, kernel: 3 };
    ctx(spec.validate(), "8x8 spec")?;
    let dense = 64 * 64 * 3 * 3 + 64 * 64;
    let igc = spec.param_count();
    if !(igc < dense) {
        return Err(format!("igc params {igc} not below dense {dense}"));
    }
    Ok(format!(
        "dense-reference gap {worst:.1e}; all channels source both partitions; {igc} < {dense} params"
    ))
}

// ---------------------------------------------------------------------------
// Shared corpus helpers for the training criteria.
// ---------------------------------------------------------------------------

fn scene_config() -> SynthConfig {
    SynthConfig {
        height: SCENE_SIZE,
        width: SCENE_SIZE,
        group_ranges: GROUP_RANGES,
        ..Default::default()
    }
}

fn make_scenes(n: usize, seed: u64) -> Result<Vec<LabeledScene>, String> {
    let corpus = ctx(synth_corpus(&scene_config(), n, seed), "synth corpus")?;
    Ok(scenes_from_synth(&corpus))
}

fn stage1_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        stage: 1,
        epochs: Some(epochs),
        batch_size: 25,
        seed,
        train_size: C6_STAGE1_SIZE,
        grid_spacing: C6_GRID_SPACING,
        lambda: C6_LAMBDA,
        ..Default::default()
    }
}

fn stage2_config(seed: u64, fraction: f64) -> TrainConfig {
    TrainConfig {
        stage: 2,
        epochs: Some(C6_FINETUNE_EPOCHS),
        batch_size: 8,
        learning_rate: Some(C6_STAGE2_LR),
        seed,
        subset_fraction: fraction,
        train_size: C6_STAGE2_SIZE,
        ..Default::default()
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[values.len() / 2]
}

// ---------------------------------------------------------------------------
// Criterion 6: pretraining beats training from scratch on scarce labels, and
// more labels help the pretrained model.
// ---------------------------------------------------------------------------

fn c6_end_to_end() -> CriterionResult {
    let start = Instant::now();
    let unlabeled = make_scenes(C6_UNLABELED, 9_001)?;
    let labeled = make_scenes(C6_LABELED, 9_002)?;
    let test = make_scenes(C6_TEST, 9_003)?;

    let dir = ctx(tempfile::tempdir(), "tempdir")?;
    let mut mae_ft10 = Vec::new();
    let mut mae_ft50 = Vec::new();
    let mut mae_sc10 = Vec::new();

    let eval_arm = |out_dir: &Path, test: &[LabeledScene]| -> Result<f64, String> {
        let best = out_dir.join("best.bin");
        let path = if best.exists() { best } else { out_dir.join("checkpoint.bin") };
        let ckpt = ctx(load_checkpoint(&path), "load stage-2 checkpoint")?;
        let report = ctx(evaluate_model(&ckpt, test, C6_STAGE2_SIZE, None), "evaluate")?;
        Ok(report.mae)
    };

    for &seed in &C6_SEEDS {
        let s1_dir = dir.path().join(format!("s1-{seed}"));
        let cfg1 = stage1_config(seed, C6_PRETRAIN_EPOCHS);
        let outcome = ctx(pretrain(&unlabeled, &cfg1, &s1_dir, None), "pretrain")?;
        let stage1 = ctx(load_checkpoint(&outcome.checkpoint), "load stage-1 checkpoint")?;

        let ft10_dir = dir.path().join(format!("ft10-{seed}"));
        ctx(finetune(&stage1, &labeled, &stage2_config(seed, 0.1), &ft10_dir), "finetune 10%")?;
        mae_ft10.push(eval_arm(&ft10_dir, &test)?);

        let ft50_dir = dir.path().join(format!("ft50-{seed}"));
        ctx(finetune(&stage1, &labeled, &stage2_config(seed, 0.5), &ft50_dir), "finetune 50%")?;
        mae_ft50.push(eval_arm(&ft50_dir, &test)?);

        let sc10_dir = dir.path().join(format!("sc10-{seed}"));
        ctx(
            train_from_scratch(&labeled, &stage2_config(seed, 0.1), &sc10_dir),
            "train from scratch",
        )?;
        mae_sc10.push(eval_arm(&sc10_dir, &test)?);
    }

    let med_ft10 = median(&mut mae_ft10);
    let med_ft50 = median(&mut mae_ft50);
    let med_sc10 = median(&mut mae_sc10);
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let detail = format!(
        "median test MAE: finetune@10% {med_ft10:.2}, finetune@50% {med_ft50:.2}, \
         scratch@10% {med_sc10:.2} [{minutes:.1} min]"
    );

    if minutes >= 45.0 {
        return Err(format!("runtime {minutes:.1} min exceeds 45 min; {detail}"));
    }
    if !(med_ft10 < med_sc10) {
        return Err(format!("pretraining did not beat scratch; {detail}"));
    }
    let improvement = (med_sc10 - med_ft10) / med_sc10;
    if !(improvement >= 0.10) {
        return Err(format!("improvement {:.1}% below 10%; {detail}", improvement * 100.0));
    }
    if !(med_ft50 < med_ft10) {
        return Err(format!("more labels did not reduce MAE; {detail}"));
    }
    Ok(format!("{detail}; improvement {:.0}%", improvement * 100.0))
}

// ---------------------------------------------------------------------------
// Criterion 7: fixed seeds give bit-identical logs, and a checkpoint survives
// a save/load round trip with exactly reproduced probe outputs.
// ---------------------------------------------------------------------------

fn c7_determinism() -> CriterionResult {
    let scenes = make_scenes(10, 70_001)?;
    let cfg = TrainConfig {
        stage: 1,
        epochs: Some(2),
        batch_size: 4,
        seed: 11,
        train_size: 32,
        grid_spacing: 55.0,
        ..Default::default()
    };
    let dir = ctx(tempfile::tempdir(), "tempdir")?;
    let (run_a, run_b) = (dir.path().join("a"), dir.path().join("b"));
    ctx(pretrain(&scenes, &cfg, &run_a, None), "first run")?;
    ctx(pretrain(&scenes, &cfg, &run_b, None), "second run")?;

    for file in ["train_log.csv", "probe_log.csv", "checkpoint.bin"] {
        let a = ctx(std::fs::read(run_a.join(file)), file)?;
        let b = ctx(std::fs::read(run_b.join(file)), file)?;
        if a != b {
            return Err(format!("{file} differs between identically seeded runs"));
        }
    }

    // Save/load round trip: model outputs on a probe batch must be exactly
    // reproduced by the reloaded parameters.
    let ckpt = ctx(load_checkpoint(&run_a.join("checkpoint.bin")), "load checkpoint")?;
    let quant = ckpt.manifest.quant.clone().ok_or("stage-1 manifest lacks quantization")?;
    let probe: Vec<Array2<f64>> = scenes
        .iter()
        .take(4)
        .map(|s| rgb_to_lab(&s.image).lightness)
        .collect();
    let before: Vec<_> = probe
        .iter()
        .map(|light| {
            let dist = colorize_forward(&ckpt.params, light)?;
            let logits = classifier_forward(&ckpt.params, light)?;
            Ok::<_, colorcount::Error>((dist.probs, logits))
        })
        .collect::<Result<_, _>>()
        .map_err(|e| format!("probe forward: {e}"))?;

    let resaved = dir.path().join("resaved.bin");
    let mut manifest = ckpt.manifest.clone();
    manifest.quant = Some(quant);
    ctx(save_checkpoint(&resaved, manifest, &ckpt.params, None), "resave")?;
    let reloaded = ctx(load_checkpoint(&resaved), "reload")?;
    for (light, (dist_a, logits_a)) in probe.iter().zip(&before) {
        let dist_b = ctx(colorize_forward(&reloaded.params, light), "reloaded colorize")?;
        let logits_b = ctx(classifier_forward(&reloaded.params, light), "reloaded classify")?;
        if dist_b.probs != *dist_a || logits_b != *logits_a {
            return Err("probe outputs changed across a save/load round trip".to_string());
        }
    }
    Ok("logs and checkpoints bit-identical; probe outputs exact after save/load".to_string())
}

// ---------------------------------------------------------------------------
// Criterion 8: the group-classification branch learns crowd level.
// ---------------------------------------------------------------------------

fn c8_classification() -> CriterionResult {
    // Keyword-style tags derived from the generated crowd level, mapped to
    // groups through the keyword vocabulary.
    let vocab = KeywordVocabulary::default();
    let tag_for = |group: u8| match group {
        1 => "sparse",
        2 => "crowded",
        _ => "packed",
    };
    let mut scenes = make_scenes(C8_SCENES, 9_100)?;
    for scene in scenes.iter_mut() {
        let raw = scene.group.ok_or("synthetic scene lacks a crowd level")?;
        let label = ctx(keyword_groups(tag_for(raw), &vocab), "keyword mapping")?;
        scene.group = Some(label.group);
    }
    let held_out = scenes.split_off(C8_SCENES - C8_HELD_OUT);

    let cfg = TrainConfig {
        stage: 1,
        epochs: Some(C8_EPOCHS),
        batch_size: 2,
        learning_rate: Some(2e-3),
        seed: 77,
        train_size: C6_STAGE1_SIZE,
        grid_spacing: C6_GRID_SPACING,
        lambda: 5.0,
        gan_weight: 0.0,
        ..Default::default()
    };
    let dir = ctx(tempfile::tempdir(), "tempdir")?;
    let outcome = ctx(pretrain(&scenes, &cfg, dir.path(), None), "pretrain")?;
    let ckpt = ctx(load_checkpoint(&outcome.checkpoint), "load checkpoint")?;

    let mut hits = 0usize;
    for scene in &held_out {
        let resized = ctx(
            colorcount::pipeline::resize_image(&scene.image, C6_STAGE1_SIZE, C6_STAGE1_SIZE),
            "resize",
        )?;
        let light = rgb_to_lab(&resized).lightness;
        let logits = ctx(classifier_forward(&ckpt.params, &light), "classify")?;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i as u8 + 1)
            .unwrap_or(0);
        if Some(pred) == scene.group {
            hits += 1;
        }
    }
    let accuracy = hits as f64 / held_out.len() as f64;
    if !(accuracy >= C8_TARGET_ACCURACY) {
        return Err(format!(
            "held-out accuracy {accuracy:.2} below {C8_TARGET_ACCURACY} ({hits}/{})",
            held_out.len()
        ));
    }
    Ok(format!(
        "held-out group accuracy {accuracy:.2} ({hits}/{}) after {C8_EPOCHS} epochs",
        held_out.len()
    ))
}
