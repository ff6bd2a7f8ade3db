//! Acceptance suite: one PASS/FAIL line per criterion, written straight to
//! stderr so it shows up without `--nocapture`.

use std::io::Write;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ultralbm::analysis::gradsuite::{run_check, tolerance, CHECKS};
use ultralbm::analysis::{count_flops, count_params, Convention, Overlap};
use ultralbm::checkpoint::fingerprint;
use ultralbm::data::{generate_synthetic, split_dataset, Normalization, Sample, SynthSpec};
use ultralbm::losses::{
    attention_transfer_loss, bce_dice_loss, dkd_loss, gradient_matching_loss, plain_kl_loss, DistillWeights,
};
use ultralbm::network::{Model, ModelConfig, StageKind};
use ultralbm::ssm::{flip_sequence, selective_scan, selective_scan_chunked, BiMambaBlock, MambaConfig};
use ultralbm::training::{distill_train, train, DistillStrategy, TrainConfig};
use ultralbm::Real;

struct Report {
    failures: Vec<usize>,
}

impl Report {
    fn line(&mut self, id: usize, pass: bool, limit: Duration, elapsed: Duration, detail: String) {
        let ok = pass && elapsed <= limit;
        if !ok {
            self.failures.push(id);
        }
        let mut err = std::io::stderr().lock();
        let _ = writeln!(
            err,
            "[acceptance] criterion {id:>2}: {}  {detail}  ({:.1}s, limit {}s)",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
}

fn params(cfg: &ModelConfig) -> usize {
    count_params(&Model::new(cfg, 0).unwrap())
}

fn c1(r: &mut Report) {
    let t0 = Instant::now();
    let full = params(&ModelConfig::full());
    let tiny = params(&ModelConfig::tiny());
    let pass = (28_900..=39_100).contains(&full) && (8_800..=13_200).contains(&tiny);
    r.line(1, pass, Duration::from_secs(5), t0.elapsed(), format!("params full {full}, T {tiny}"));
}

fn c2(r: &mut Report) {
    let t0 = Instant::now();
    let g = |cfg: &ModelConfig| {
        let m = Model::new(cfg, 0).unwrap();
        count_flops(&m, [1, 3, 256, 256], Convention::Mac).unwrap().total_flops as f64 / 1e9
    };
    let (full, tiny) = (g(&ModelConfig::full()), g(&ModelConfig::tiny()));
    let pass = (full - 0.060).abs() <= 0.25 * 0.060 && (tiny - 0.019).abs() <= 0.25 * 0.019;
    r.line(
        2,
        pass,
        Duration::from_secs(10),
        t0.elapsed(),
        format!("GFLOPs (MAC convention) full {full:.4}, T {tiny:.4}"),
    );
}

fn c3(r: &mut Report) {
    use StageKind::*;
    let t0 = Instant::now();
    let p = |k: [StageKind; 3]| params(&ModelConfig::full().with_stage_kinds(k));
    let (two_l, default, all_g, all_l) = (p([Lmbp, Lmbp, Glmbp]), p([Lmbp, Glmbp, Glmbp]), p([Glmbp; 3]), p([Lmbp; 3]));
    let gap = (all_g as f64 - all_l as f64).abs() / all_g as f64;
    let pass = two_l < default && default < all_g && gap <= 0.05;
    r.line(
        3,
        pass,
        Duration::from_secs(60),
        t0.elapsed(),
        format!("2L+1G {two_l} < 1L+2G {default} < all-G {all_g}; all-L {all_l}, gap {:.2}%", gap * 100.0),
    );
}

type ScanInputs<T> = (Array3<T>, Array3<T>, Array2<T>, Array3<T>, Array3<T>, Array1<T>);

fn scan_case<T: Real>(rng: &mut ChaCha8Rng) -> (ScanInputs<T>, usize) {
    let b = rng.random_range(1..=2);
    let n = rng.random_range(1..=1024);
    let d = rng.random_range(1..=6);
    let s = rng.random_range(1..=16);
    let chunk = rng.random_range(1..=160);
    let mut u = |lo: f64, hi: f64| T::from_f64(rng.random_range(lo..hi)).unwrap();
    let inputs = (
        Array3::from_shape_simple_fn((b, n, d), || u(-1.0, 1.0)),
        Array3::from_shape_simple_fn((b, n, d), || u(0.001, 0.5)),
        Array2::from_shape_simple_fn((d, s), || u(-3.0, -0.05)),
        Array3::from_shape_simple_fn((b, n, s), || u(-1.0, 1.0)),
        Array3::from_shape_simple_fn((b, n, s), || u(-1.0, 1.0)),
        Array1::from_shape_simple_fn(d, || u(-1.0, 1.0)),
    );
    (inputs, chunk)
}

fn max_abs_diff<T: Real>(a: &Array3<T>, b: &Array3<T>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y).abs().to_f64().unwrap())
        .fold(0.0, f64::max)
}

fn scan_error<T: Real>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let ((u, dl, a, b, c, d), chunk) = scan_case::<T>(&mut rng);
        let reference = selective_scan(&u, &dl, &a, &b, &c, &d).unwrap();
        let blocked = selective_scan_chunked(&u, &dl, &a, &b, &c, &d, chunk).unwrap();
        worst = worst.max(max_abs_diff(&reference, &blocked));
    }
    worst
}

fn c4(r: &mut Report) {
    let t0 = Instant::now();
    let e32 = scan_error::<f32>(40);
    let e64 = scan_error::<f64>(41);
    r.line(
        4,
        e32 < 1e-5 && e64 < 1e-10,
        Duration::from_secs(60),
        t0.elapsed(),
        format!("chunked vs sequential max |diff| f32 {e32:.2e}, f64 {e64:.2e} over 100 cases each"),
    );
}

fn c5(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let ch = 4 * rng.random_range(1..=4);
        let cfg = MambaConfig::default();
        let mut block = BiMambaBlock::<f32>::new(ch, &cfg, &mut rng).unwrap();
        block.gamma.data_mut()[0] = rng.random_range(-1.0..1.0);
        let (b, n) = (rng.random_range(1..=2), rng.random_range(1..=256));
        let x = Array3::from_shape_simple_fn((b, n, ch), || rng.random_range(-2.0f32..2.0));
        let lhs = block.forward(&flip_sequence(&x)).unwrap();
        let rhs = flip_sequence(&block.forward(&x).unwrap());
        worst = worst.max(max_abs_diff(&lhs, &rhs));
    }
    r.line(
        5,
        worst < 1e-5,
        Duration::from_secs(60),
        t0.elapsed(),
        format!("bi_mamba(flip x) vs flip(bi_mamba x) max |diff| {worst:.2e} (f32, 100 cases)"),
    );
}

fn c6(r: &mut Report) {
    let t0 = Instant::now();
    let mut pass = true;
    let mut worst_block = 0.0f64;
    let mut model_err = 0.0;
    let mut model_coords = 0;
    for name in CHECKS {
        let rep = run_check(name, 0).unwrap();
        pass &= rep.max_rel_error < tolerance(name);
        if *name == "model" {
            model_err = rep.max_rel_error;
            model_coords = rep.checked;
            pass &= rep.checked >= 50;
        } else {
            worst_block = worst_block.max(rep.max_rel_error);
        }
    }
    r.line(
        6,
        pass,
        Duration::from_secs(600),
        t0.elapsed(),
        format!(
            "{} checks; worst block/loss rel err {worst_block:.2e} (< 1e-4); end-to-end {model_err:.2e} over {model_coords} params (< 1e-3)",
            CHECKS.len()
        ),
    );
}

fn prob_map(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.random_range(0.02..0.98))
}

fn c7(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut zero_err = 0.0f64;
    let mut min_term = f64::INFINITY;
    let mut shift_err = 0.0f64;
    for k in 0..1000 {
        let shape = (rng.random_range(1..=3), 1, rng.random_range(3..=12), rng.random_range(3..=12));
        let s = prob_map(&mut rng, shape);
        let t = prob_map(&mut rng, shape);
        let y = t.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let tau = rng.random_range(0.5..4.0);
        if k < 100 {
            for v in [
                dkd_loss(&s, &s).unwrap().value,
                attention_transfer_loss(&s, &s, tau).unwrap().value,
                gradient_matching_loss(&s, &s).unwrap().value,
                plain_kl_loss(&s, &s, tau).unwrap().value,
            ] {
                zero_err = zero_err.max(v.abs());
            }
            let c = rng.random_range(-0.02..0.02);
            let base = attention_transfer_loss(&s, &t, tau).unwrap().value;
            let shifted = attention_transfer_loss(&s.mapv(|v| v + c), &t.mapv(|v| v - c), tau).unwrap().value;
            shift_err = shift_err.max((base - shifted).abs());
        }
        for v in [
            bce_dice_loss(&s, &y).unwrap().value,
            dkd_loss(&s, &t).unwrap().value,
            attention_transfer_loss(&s, &t, tau).unwrap().value,
            gradient_matching_loss(&s, &t).unwrap().value,
            plain_kl_loss(&s, &t, tau).unwrap().value,
        ] {
            min_term = min_term.min(v);
        }
    }
    r.line(
        7,
        zero_err < 1e-10 && min_term >= 0.0 && shift_err < 1e-8,
        Duration::from_secs(120),
        t0.elapsed(),
        format!("max |term(S,S)| {zero_err:.1e}; min term over 1000 pairs {min_term:.3e}; AT shift err {shift_err:.1e}"),
    );
}

fn synthetic_split() -> (Vec<Sample>, Vec<Sample>) {
    let data = generate_synthetic(&SynthSpec::default()).unwrap();
    split_dataset(&data, 0.8, 0).unwrap()
}

/// Returns the trained teacher and its normalization for criterion 9.
fn c8(r: &mut Report, tr: &[Sample], va: &[Sample]) -> (Model, Normalization) {
    let t0 = Instant::now();
    let cfg = TrainConfig::default();
    let mut m = Model::new(&ModelConfig::full(), 0).unwrap();
    let out = train(&mut m, tr, va, &cfg, |_| {}).unwrap();
    r.line(
        8,
        out.best_val_iou >= 0.85,
        Duration::from_secs(30 * 60),
        t0.elapsed(),
        format!(
            "full model, {} epochs, {}/{} split: best val IoU {:.4} (epoch {}), final {:.4}",
            cfg.epochs,
            tr.len(),
            va.len(),
            out.best_val_iou,
            out.best_epoch,
            out.history.last().unwrap().val_iou
        ),
    );
    (out.best, out.normalization)
}

fn c9(r: &mut Report, tr: &[Sample], va: &[Sample], teacher: &Model, tnorm: &Normalization) {
    let t0 = Instant::now();
    let before = fingerprint(teacher);
    let cfg = TrainConfig::default();
    let strategies = [
        ("full", Some(DistillStrategy::Hybrid(DistillWeights::default()))),
        ("no-distill", None),
        (
            "plain-KL",
            Some(DistillStrategy::PlainKl {
                lambda_h: 1.0,
                lambda_kl: 1.0,
                tau: 4.0,
            }),
        ),
    ];
    let mut means = Vec::new();
    let mut detail = Vec::new();
    for (name, strategy) in &strategies {
        let mut ious = Vec::new();
        for seed in 0..3u64 {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let mut s = Model::new(&ModelConfig::tiny(), seed).unwrap();
            let out = match strategy {
                Some(st) => distill_train(&mut s, teacher, tnorm, tr, va, &cfg, st, |_| {}).unwrap(),
                None => train(&mut s, tr, va, &cfg, |_| {}).unwrap(),
            };
            ious.push(out.best_val_iou);
        }
        let mean = ious.iter().sum::<f64>() / 3.0;
        detail.push(format!(
            "{name} {mean:.4} [{}]",
            ious.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
        ));
        means.push(mean);
    }
    let immutable = fingerprint(teacher) == before;
    r.line(
        9,
        means[0] >= means[1] && means[0] >= means[2] && immutable,
        Duration::from_secs(2 * 3600),
        t0.elapsed(),
        format!("mean best val IoU over seeds 0-2: {}; teacher unchanged {immutable}", detail.join("; ")),
    );
}

fn c10(r: &mut Report, tr: &[Sample], va: &[Sample]) {
    let t0 = Instant::now();
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = Model::new(&ModelConfig::full(), 0).unwrap();
        let out = train(&mut m, tr, va, &cfg, |_| {}).unwrap();
        (out.history, fingerprint(&m), fingerprint(&out.best))
    };
    let (a, b) = (run(), run());
    let bits = |h: &[ultralbm::training::EpochRecord]| {
        h.iter()
            .flat_map(|e| [e.lr, e.train_loss, e.val_loss, e.val_iou, e.val_dsc].map(f64::to_bits))
            .collect::<Vec<_>>()
    };
    let pass = bits(&a.0) == bits(&b.0) && a.0 == b.0 && a.1 == b.1 && a.2 == b.2;
    r.line(
        10,
        pass,
        Duration::from_secs(600),
        t0.elapsed(),
        format!("two 5-epoch runs: histories bit-identical {}, final weights identical {}", a.0 == b.0, a.1 == b.1),
    );
}

fn c11(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let shape = (rng.random_range(1..=3), 1, rng.random_range(1..=16), rng.random_range(1..=16));
        let (dp, dg) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let p = Array4::from_shape_simple_fn(shape, || if rng.random_bool(dp) { 0.9 } else { 0.1 });
        let g = Array4::from_shape_simple_fn(shape, || if rng.random_bool(dg) { 1.0 } else { 0.0 });
        let ov = Overlap::measure(&p, &g, 0.5).unwrap();
        let (iou, dsc) = (ov.iou(), ov.dsc());
        worst = worst.max((dsc - 2.0 * iou / (1.0 + iou)).abs());
    }
    r.line(
        11,
        worst < 1e-9,
        Duration::from_secs(60),
        t0.elapsed(),
        format!("max |DSC - 2 IoU/(1+IoU)| {worst:.1e} over 1000 mask pairs"),
    );
}

#[test]
fn acceptance() {
    let mut r = Report { failures: Vec::new() };
    c1(&mut r);
    c2(&mut r);
    c3(&mut r);
    c4(&mut r);
    c5(&mut r);
    c6(&mut r);
    c7(&mut r);
    let (tr, va) = synthetic_split();
    let (teacher, tnorm) = c8(&mut r, &tr, &va);
    c9(&mut r, &tr, &va, &teacher, &tnorm);
    c10(&mut r, &tr, &va);
    c11(&mut r);
    assert!(r.failures.is_empty(), "failed criteria: {:?}", r.failures);
}
