//! Acceptance criteria 1–9, run serially so the timing checks see an idle
//! machine. Prints one PASS/FAIL line per criterion and exits non-zero if
//! any fails.

use std::fs;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use arnn::attention::{
    combine_independent, combine_learned, decode, ArnnConfig, AttentionRnnLayer, DecodeMode, GaussianField,
    SpatialAttention, SIGMA_FLOOR,
};
use arnn::block::BlockAttentionLayer;
use arnn::datagen::{generate, write_dataset, Dataset, DatasetSpec, GlyphSet, Variant};
use arnn::export::read_mask_csv;
use arnn::model::{
    evaluate, export_attended_maps, mask_correctness, train, AttentionKind, AttributeNet, EvalReport, LayerCheck,
    ModelConfig, TrainConfig, GRADCHECK_TOLERANCE,
};
use arnn::nn::Affine;
use arnn::oracle::{dependency_set, gaussian_product_reference, PERTURBATION};
use arnn::skew::{skew, skewed_width, unskew};
use arnn::tensor::{encode_checkpoint, randomize_for_check, ParamStore, Session, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const GRADCHECK_BUDGET_SECS: f64 = 120.0;
const CAUSALITY_BUDGET_SECS: f64 = 300.0;
const COMBINE_TOLERANCE: f64 = 1e-9;
const COMBINE_PAIRS: usize = 1000;
const SAMPLE_DRAWS: usize = 100_000;
const SAMPLE_MEAN_SIGMAS: f64 = 4.0;
const SAMPLE_STD_RELATIVE: f64 = 0.05;
const DESK_ACCURACY_FLOOR: f64 = 0.60;
const DESK_BUDGET_SECS: f64 = 45.0 * 60.0;
/// Shared by every desk run. At the default 1e-3 neither model leaves the
/// query-blind plateau (about 0.52) within 15 epochs.
const DESK_LR: f64 = 3e-3;
const CORRECTNESS_UNIT_TOLERANCE: f64 = 1e-12;
const CSV_RELOAD_TOLERANCE: f64 = 1e-9;
const QUERY_SENSITIVITY: f64 = 1e-6;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    for name in ["arnn", "arnn-ind", "brnn:2", "ctx", "noctx", "san"] {
        let r = LayerCheck::new(name.parse().unwrap()).run().map_err(|e| e.to_string())?;
        check(r.max_relative_error < GRADCHECK_TOLERANCE, || format!("{name}: {:.3e} ({:?})", r.max_relative_error, r.worst))?;
        parts.push(format!("{name} {:.1e}", r.max_relative_error));
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < GRADCHECK_BUDGET_SECS, || format!("took {secs:.1}s"))?;
    Ok(format!("{} in {secs:.1}s", parts.join(", ")))
}

fn skew_geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut shapes = 0;
    for h in [1, 3] {
        for m in 1..=8 {
            for n in 1..=8 {
                let x = Tensor::randn([h, m, n], &mut rng);
                let sk = skew(&x).unwrap();
                check(sk.map.shape() == [h, m, skewed_width(m, n)], || format!("skewed shape {:?}", sk.map.shape()))?;
                let back = unskew(&sk).unwrap();
                let exact = back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                check(exact && back.shape() == x.shape(), || format!("round trip differs at {h}×{m}×{n}"))?;
                // Column of each cell, found by skewing a one-hot map.
                let mut col = vec![0; m * n];
                for cell in 0..m * n {
                    let mut one = Tensor::zeros([1, m, n]);
                    one.data_mut()[cell] = 1.0;
                    let s = skew(&one).unwrap();
                    let w = s.map.shape()[2];
                    let hits: Vec<usize> = (0..m * w).filter(|&k| s.map.data()[k] != 0.0).collect();
                    check(hits.len() == 1 && hits[0] / w == cell / n, || format!("cell {cell} moved rows"))?;
                    col[cell] = hits[0] % w;
                }
                for a in 0..m * n {
                    for b in 0..m * n {
                        let same_diag = a / n + a % n == b / n + b % n;
                        check(same_diag == (col[a] == col[b]), || format!("cells {a},{b} of {m}×{n} misaligned"))?;
                    }
                }
                shapes += 1;
            }
        }
    }
    Ok(format!("{shapes} shapes bit-exact, alignment exhaustive"))
}

fn causality() -> Outcome {
    let start = Instant::now();
    let (c, size) = (2, 6);
    let config = ArnnConfig { context_channels: 3, hidden: 3, delta: 1, ..ArnnConfig::new(c) };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layer = AttentionRnnLayer::new(&mut store, "a", config, &mut rng).map_err(|e| e.to_string())?;
    randomize_for_check(&mut store, 6);
    let input = Tensor::randn([c, size, size], &mut rng);

    let mask = |x: &Tensor| {
        let tape = Tape::new();
        let mut s = Session::inference(&tape, &store, 0);
        let x = s.constant(x.clone());
        Ok(layer.attend(&mut s, x, None)?.mask.to_tensor())
    };
    let deps = dependency_set(mask, &input, PERTURBATION).map_err(|e| e.to_string())?;
    let left_hidden = |x: &Tensor| {
        let tape = Tape::new();
        let s = Session::inference(&tape, &store, 0);
        let ctx = layer.context.forward(&s, s.constant(x.clone()))?;
        let h = layer.left.pass(&s, ctx)?.to_tensor();
        let plane = size * size;
        Tensor::new([size, size], (0..plane).map(|k| (0..3).map(|t| h.data()[t * plane + k] * (t + 1) as f64).sum()).collect())
    };
    let cone = dependency_set(left_hidden, &input, PERTURBATION).map_err(|e| e.to_string())?;

    let mut future = 0;
    for i in 0..size {
        for j in 0..size {
            for a in 0..size {
                for b in 0..size {
                    let left = a <= i && b <= j;
                    let right = a < i && b >= j;
                    if a > i && deps.depends((i, j), (a, b)) {
                        future += 1;
                    }
                    check(deps.depends((i, j), (a, b)) == (left || right), || {
                        format!("mask ({i},{j}) vs input ({a},{b}): oracle {}", deps.depends((i, j), (a, b)))
                    })?;
                    check(cone.depends((i, j), (a, b)) == left, || {
                        format!("left hidden ({i},{j}) vs input ({a},{b}): oracle {}", cone.depends((i, j), (a, b)))
                    })?;
                }
            }
        }
    }
    check(future == 0, || format!("{future} dependencies on later rows"))?;
    let secs = start.elapsed().as_secs_f64();
    check(secs < CAUSALITY_BUDGET_SECS, || format!("took {secs:.1}s"))?;
    Ok(format!("no later-row dependence, mask and left-pass cones exact on 6×6, {secs:.1}s"))
}

fn combination() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = ParamStore::new();
    let tape = Tape::new();
    let s = Session::inference(&tape, &store, 0);
    let draw = |rng: &mut ChaCha8Rng| -> (f64, f64) { (rng.random_range(-5.0..5.0), 10f64.powf(rng.random_range(-2.0..2.0))) };
    let pairs: Vec<_> = (0..COMBINE_PAIRS).map(|_| (draw(&mut rng), draw(&mut rng))).collect();
    let field = |vals: Vec<(f64, f64)>| GaussianField {
        mu: s.constant(Tensor::new([1, vals.len()], vals.iter().map(|v| v.0).collect()).unwrap()),
        sigma: s.constant(Tensor::new([1, vals.len()], vals.iter().map(|v| v.1).collect()).unwrap()),
        pre_sigma: None,
    };
    let out = combine_independent(&field(pairs.iter().map(|p| p.0).collect()), &field(pairs.iter().map(|p| p.1).collect()))
        .map_err(|e| e.to_string())?;
    let (mu, sigma) = (out.mu.to_tensor(), out.sigma.to_tensor());
    let mut worst: f64 = 0.0;
    for (k, &((m1, s1), (m2, s2))) in pairs.iter().enumerate() {
        let (rm, rs) = gaussian_product_reference(m1, s1, m2, s2);
        worst = worst.max((mu.data()[k] - rm).abs()).max((sigma.data()[k] - rs).abs());
    }
    check(worst <= COMBINE_TOLERANCE, || format!("independent product off by {worst:.3e}"))?;

    // Learned combiner with projection weights onto the left pair.
    let mut pstore = ParamStore::new();
    let comb = Affine::new(&mut pstore, "comb", 4, 2, &mut rng).map_err(|e| e.to_string())?;
    pstore.get_mut(comb.weight).value =
        Tensor::new([2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    if let Some(b) = comb.bias {
        pstore.get_mut(b).value.data_mut().fill(0.0);
    }
    let tape = Tape::new();
    let s = Session::inference(&tape, &pstore, 0);
    let head_field = |rng: &mut ChaCha8Rng| {
        let pre = s.constant(Tensor::randn([5, 7], rng));
        GaussianField {
            mu: s.constant(Tensor::randn([5, 7], rng)),
            sigma: pre.softplus().add_scalar(SIGMA_FLOOR),
            pre_sigma: Some(pre),
        }
    };
    let (l, r) = (head_field(&mut rng), head_field(&mut rng));
    let out = combine_learned(&s, &l, &r, &comb).map_err(|e| e.to_string())?;
    let same = |a: Tensor, b: Tensor| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    check(same(out.mu.to_tensor(), l.mu.to_tensor()), || "learned projection changed μ".into())?;
    check(same(out.sigma.to_tensor(), l.sigma.to_tensor()), || "learned projection changed σ".into())?;
    Ok(format!("{COMBINE_PAIRS} pairs within {worst:.1e}; projection reproduces the left field bit-exactly"))
}

fn sampling() -> Outcome {
    let (mu, sigma, scale) = (0.3, 0.7, 1.5);
    let store = ParamStore::new();
    let tape = Tape::new();
    let mut s = Session::inference(&tape, &store, 17);
    let f = GaussianField {
        mu: s.constant(Tensor::full([1, 1], mu)),
        sigma: s.constant(Tensor::full([1, 1], sigma)),
        pre_sigma: None,
    };
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..SAMPLE_DRAWS {
        let v = decode(&mut s, &f, DecodeMode::Sample { sigma_scale: scale }).map_err(|e| e.to_string())?.item();
        sum += v;
        sq += v * v;
    }
    let n = SAMPLE_DRAWS as f64;
    let mean = sum / n;
    let std = (sq / n - mean * mean).sqrt();
    let target = scale * sigma;
    let bound = SAMPLE_MEAN_SIGMAS * target / n.sqrt();
    check((mean - mu).abs() <= bound, || format!("mean {mean:.5} vs μ {mu} (bound {bound:.5})"))?;
    check((std / target - 1.0).abs() <= SAMPLE_STD_RELATIVE, || format!("std {std:.5} vs {target}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = GaussianField {
        mu: s.constant(Tensor::randn([6, 6], &mut rng)),
        sigma: s.constant(Tensor::uniform([6, 6], 0.1, 2.0, &mut rng)),
        pre_sigma: None,
    };
    let e = decode(&mut s, &f, DecodeMode::Expectation).unwrap().to_tensor();
    let z = decode(&mut s, &f, DecodeMode::Sample { sigma_scale: 0.0 }).unwrap().to_tensor();
    check(e.data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits()), || "σ scale 0 differs".into())?;
    Ok(format!("mean {mean:.4} (μ {mu}, bound ±{bound:.4}), std {std:.4} (target {target:.3}), scale 0 exact"))
}

struct DeskRun {
    report: EvalReport,
    train_secs: f64,
    net: AttributeNet,
    store: ParamStore,
}

fn desk_data(variant: Variant) -> Dataset {
    let spec = DatasetSpec {
        variant,
        image_size: 40,
        train: 2000,
        val: 500,
        test: 500,
        digits_min: 3,
        digits_max: 3,
        seed: 7,
        ..Default::default()
    };
    generate(&spec, &GlyphSet::builtin()).expect("desk dataset generates")
}

fn desk_train(data: &Dataset, kind: AttentionKind) -> Result<DeskRun, String> {
    let task = data.spec.task;
    let config = ModelConfig { stacks: 2, ..ModelConfig::new(kind, data.spec.image_size, task.query_dim(), task.classes()) };
    let tc = TrainConfig { epochs: 15, seed: 0, lr: DESK_LR, ..Default::default() };
    let mut store = ParamStore::new();
    let net = AttributeNet::new(&mut store, config).map_err(|e| e.to_string())?;
    let start = Instant::now();
    train(&net, &mut store, data, &tc, &mut std::io::sink()).map_err(|e| e.to_string())?;
    let train_secs = start.elapsed().as_secs_f64();
    let report = evaluate(&net, &store, &data.test, &tc).map_err(|e| e.to_string())?;
    Ok(DeskRun { report, train_secs, net, store })
}

/// Largest mask difference between two queries, over the first test images.
fn query_sensitivity(run: &DeskRun, data: &Dataset) -> f64 {
    let net = run.net.for_inference();
    let mut best: f64 = 0.0;
    for sample in data.test.iter().take(5) {
        let masks = |q: usize| {
            let tape = Tape::new();
            let mut s = Session::inference(&tape, &run.store, 0);
            let mut query = Tensor::zeros([sample.query.numel()]);
            query.data_mut()[q] = 1.0;
            let (img, q) = (s.constant(sample.image.clone()), s.constant(query));
            net.forward(&mut s, img, q).unwrap().masks.iter().map(|m| m.to_tensor()).collect::<Vec<_>>()
        };
        let (a, b) = (masks(0), masks(1));
        for (x, y) in a.iter().zip(&b) {
            best = best.max(x.max_abs_diff(y));
        }
    }
    best
}

fn desk_separation() -> Outcome {
    let start = Instant::now();
    let data = desk_data(Variant::Ref);
    let arnn = desk_train(&data, AttentionKind::Arnn)?;
    let none = desk_train(&data, AttentionKind::None)?;
    let secs = start.elapsed().as_secs_f64();
    let (a, b) = (arnn.report.accuracy, none.report.accuracy);
    let sens = query_sensitivity(&arnn, &data);
    let summary = format!(
        "ARNN {a:.3} (train {:.0}s), NONE {b:.3} (train {:.0}s), chance 0.20, query sensitivity {sens:.2e}, total {secs:.0}s",
        arnn.train_secs, none.train_secs
    );
    check(a >= DESK_ACCURACY_FLOOR, || format!("ARNN accuracy below {DESK_ACCURACY_FLOOR}: {summary}"))?;
    check(a >= b, || format!("ARNN below NONE: {summary}"))?;
    check(sens > QUERY_SENSITIVITY, || format!("masks ignore the query: {summary}"))?;
    check(secs <= DESK_BUDGET_SECS, || format!("over the 45 min budget: {summary}"))?;
    Ok(summary)
}

fn mask_correctness_criterion() -> Outcome {
    let mut roi = Tensor::zeros([10, 10]);
    roi.data_mut()[..10].fill(1.0);
    let uniform = mask_correctness(&[Tensor::full([5, 5], 0.04)], &roi).unwrap();
    check((uniform - 0.1).abs() <= CORRECTNESS_UNIT_TOLERANCE, || format!("uniform mask gives {uniform}"))?;
    let mut inside = Tensor::zeros([10, 10]);
    inside.data_mut()[3] = 0.7;
    inside.data_mut()[7] = 0.3;
    let all = mask_correctness(&[inside], &roi).unwrap();
    check((all - 1.0).abs() <= CORRECTNESS_UNIT_TOLERANCE, || format!("all-inside mask gives {all}"))?;

    let data = desk_data(Variant::Bg);
    let arnn = desk_train(&data, AttentionKind::Arnn)?;
    let ctx = desk_train(&data, AttentionKind::Ctx)?;
    let (a, c) = (arnn.report.mask_correctness, ctx.report.mask_correctness);
    let summary = format!(
        "unit cases exact; BG corr. ARNN {a:.3} vs CTX {c:.3} (accuracy {:.3} vs {:.3})",
        arnn.report.accuracy, ctx.report.accuracy
    );
    check(a >= c, || format!("ARNN correctness below CTX: {summary}"))?;
    Ok(summary)
}

fn brnn_scaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let arnn = AttentionRnnLayer::new(&mut store, "arnn", ArnnConfig::new(8), &mut rng).map_err(|e| e.to_string())?;
    let brnn = BlockAttentionLayer::new(&mut store, "brnn", 2, ArnnConfig::new(8), &mut rng).map_err(|e| e.to_string())?;
    let x = Tensor::randn([8, 64, 64], &mut rng);
    let time = |layer: &dyn SpatialAttention| -> (f64, Vec<usize>) {
        let mut best = f64::INFINITY;
        let mut shape = Vec::new();
        for _ in 0..3 {
            let tape = Tape::new();
            let mut s = Session::inference(&tape, &store, 0);
            let input = s.constant(x.clone());
            let start = Instant::now();
            let out = layer.attend(&mut s, input, None).unwrap();
            best = best.min(start.elapsed().as_secs_f64());
            shape = out.mask.shape();
        }
        (best, shape)
    };
    let (ta, _) = time(&arnn);
    let (tb, shape) = time(&brnn);
    check(shape == [64, 64], || format!("brnn:2 mask shape {shape:?}"))?;
    check(tb < ta, || format!("brnn:2 {tb:.4}s is not faster than arnn {ta:.4}s"))?;
    let g = LayerCheck::new(AttentionKind::Brnn(2)).run().map_err(|e| e.to_string())?;
    check(g.max_relative_error < GRADCHECK_TOLERANCE, || format!("brnn gradcheck {:.3e}", g.max_relative_error))?;
    Ok(format!(
        "forward 64×64×8: brnn:2 {:.1} ms vs arnn {:.1} ms, mask {shape:?}, gradcheck {:.1e}",
        tb * 1e3,
        ta * 1e3,
        g.max_relative_error
    ))
}

fn file_digests(dir: &std::path::Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for split in ["train", "val", "test"] {
        let p = dir.join(split).join("samples.bin");
        out.push((split.to_string(), hex::encode(Sha256::digest(fs::read(p).unwrap()))));
    }
    out
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = DatasetSpec {
        image_size: 40,
        train: 64,
        val: 16,
        test: 8,
        digits_min: 3,
        digits_max: 3,
        seed: 9,
        ..Default::default()
    };
    let mut digests = Vec::new();
    let mut checkpoints = Vec::new();
    let mut data = None;
    for run in 0..2 {
        let d = generate(&spec, &GlyphSet::builtin()).map_err(|e| e.to_string())?;
        let dir = root.path().join(format!("data{run}"));
        write_dataset(&dir, &d, Default::default()).map_err(|e| e.to_string())?;
        digests.push(file_digests(&dir));
        let config = ModelConfig { stacks: 2, channels: 8, hidden: 4, ..ModelConfig::new(AttentionKind::Arnn, 40, 10, 5) };
        let tc = TrainConfig { epochs: 1, batch: 8, seed: 3, ..Default::default() };
        let mut store = ParamStore::new();
        let net = AttributeNet::new(&mut store, config).map_err(|e| e.to_string())?;
        train(&net, &mut store, &d, &tc, &mut std::io::sink()).map_err(|e| e.to_string())?;
        checkpoints.push(encode_checkpoint(&store));
        data = Some((d, net, store));
    }
    check(digests[0] == digests[1], || "dataset checksums differ".into())?;
    check(checkpoints[0] == checkpoints[1], || "checkpoints differ".into())?;

    let (d, net, store) = data.unwrap();
    let sample = &d.test[0];
    let files = export_attended_maps(&net, &store, sample, "m", root.path().join("masks")).map_err(|e| e.to_string())?;
    let tape = Tape::new();
    let mut s = Session::inference(&tape, &store, 0);
    let (img, q) = (s.constant(sample.image.clone()), s.constant(sample.query.clone()));
    let masks = net.for_inference().forward(&mut s, img, q).map_err(|e| e.to_string())?.masks;
    let mut worst: f64 = 0.0;
    for (k, mask) in masks.iter().enumerate() {
        let back = read_mask_csv(root.path().join("masks").join(format!("m_{k}.csv"))).map_err(|e| e.to_string())?;
        worst = worst.max(back.max_abs_diff(&mask.to_tensor()));
    }
    check(worst <= CSV_RELOAD_TOLERANCE, || format!("CSV reload error {worst:.3e}"))?;
    Ok(format!(
        "dataset sha256 {}… identical, checkpoints identical ({} bytes), {} export files, CSV reload within {worst:.1e}",
        &digests[0][0].1[..12],
        checkpoints[0].len(),
        files.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient integrity", gradient_integrity),
        ("skew geometry", skew_geometry),
        ("causality", causality),
        ("combination correctness", combination),
        ("sampling statistics", sampling),
        ("desk-scale task separation", desk_separation),
        ("mask correctness", mask_correctness_criterion),
        ("BRNN scaling", brnn_scaling),
        ("determinism and serialization", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (k, (title, f)) in criteria.iter().enumerate() {
        let id = k + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        let line = match outcome {
            Ok(detail) => format!("criterion {id} PASS {title} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                format!("criterion {id} FAIL {title} [{secs:.1}s]: {detail}")
            }
        };
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    if failed > 0 {
        writeln!(out, "{failed} acceptance criteria failed").unwrap();
        std::process::exit(1);
    }
}
