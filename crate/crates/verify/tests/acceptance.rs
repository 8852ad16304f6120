//! End-to-end acceptance suite. Runs every criterion serially, prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rcl_core::eval::{
    density_analysis, evaluate_inputs, evaluate_pairs, label_efficiency_sweep, psnr, ssim, DensityConfig, DensityPhase, SweepConfig, Task,
};
use rcl_core::losses::{bd, emd, jdd_consistency_loss, mmd, n2s_mask_indices, residual, DistanceKind, ResidualMode};
use rcl_core::nn::{
    load_checkpoint, params_to_bytes, save_checkpoint, Architecture, FeatureEncoder, HeadKind, Init, RestorerNet,
};
use rcl_core::noise::{apply_nlf_noise, demosaic_bilinear, mosaic, sample_nlf_params, NoiseParams, NoiseRange};
use rcl_core::tensor::{grad_check, GradCheckOptions, Graph, NodeId, Tensor};
use rcl_core::train::{
    domain_inputs, finetune, pretrain, rcl_graph, rcl_step, write_loss_csv, Dataset, Domain, FinetuneConfig, PretrainOutput, TrainBatch,
    TrainConfig, TrainMode,
};
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Desk corpus used by the training criteria, plus held-out labelled pool
/// and test set.
struct Corpus {
    train: Dataset,
    pool: Vec<(Tensor, Tensor)>,
    test: Vec<(Tensor, Tensor)>,
}

impl Corpus {
    fn new() -> Self {
        let train = Dataset::synthesize(64, 64, 64, NoiseRange::default(), 1).expect("desk corpus");
        let held = Dataset::synthesize(20, 64, 64, NoiseRange::default(), 2).expect("held-out corpus");
        let (pool, test) = held.split_tail(16);
        Self { train, pool: Task::Denoise.pairs(&pool).expect("pool"), test: Task::Denoise.pairs(&test).expect("test") }
    }
}

struct Pretrained {
    out: PretrainOutput,
    elapsed: Duration,
}

fn rcl_config() -> TrainConfig {
    TrainConfig { mode: TrainMode::Rcl, distance: DistanceKind::Emd, ..TrainConfig::default() }
}

fn run_pretrain(corpus: &Corpus, cfg: &TrainConfig) -> Pretrained {
    let t = Instant::now();
    let out = pretrain(&corpus.train, cfg).expect("pretrain");
    Pretrained { out, elapsed: t.elapsed() }
}

// 1

fn gradcheck_root(g: &mut Graph, out: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    if g.value(out).is_scalar() {
        return out;
    }
    let w = g.constant(random(rng, g.shape(out))).unwrap();
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}

fn criterion_gradients() -> Outcome {
    type Build = fn(&mut Graph, &mut ChaCha8Rng) -> NodeId;
    let ops: Vec<(&str, Build)> = vec![
        ("add", |g, r| {
            let a = g.leaf("a", random(r, &[2, 3])).unwrap();
            let b = g.leaf("b", random(r, &[2, 3])).unwrap();
            g.add(a, b).unwrap()
        }),
        ("sub", |g, r| {
            let a = g.leaf("a", random(r, &[5])).unwrap();
            let b = g.leaf("b", random(r, &[5])).unwrap();
            g.sub(a, b).unwrap()
        }),
        ("mul", |g, r| {
            let a = g.leaf("a", random(r, &[4])).unwrap();
            let b = g.leaf("b", random(r, &[4])).unwrap();
            g.mul(a, b).unwrap()
        }),
        ("div", |g, r| {
            let a = g.leaf("a", random(r, &[4])).unwrap();
            let b = g.leaf("b", Tensor::from_fn(&[4], |_| r.random_range(0.2..2.0))).unwrap();
            g.div(a, b).unwrap()
        }),
        ("scale", |g, r| {
            let a = g.leaf("a", random(r, &[3])).unwrap();
            g.scale(a, -2.5).unwrap()
        }),
        ("abs", |g, r| {
            let a = g.leaf("a", random(r, &[6])).unwrap();
            g.abs(a).unwrap()
        }),
        ("square", |g, r| {
            let a = g.leaf("a", random(r, &[6])).unwrap();
            g.square(a).unwrap()
        }),
        ("relu", |g, r| {
            let a = g.leaf("a", random(r, &[6])).unwrap();
            g.relu(a).unwrap()
        }),
        ("exp", |g, r| {
            let a = g.leaf("a", random(r, &[6])).unwrap();
            g.exp(a).unwrap()
        }),
        ("ln", |g, r| {
            let a = g.leaf("a", Tensor::from_fn(&[6], |_| r.random_range(0.2..2.0))).unwrap();
            g.ln(a).unwrap()
        }),
        ("mean", |g, r| {
            let a = g.leaf("a", random(r, &[2, 2, 3])).unwrap();
            g.mean(a).unwrap()
        }),
        ("sum", |g, r| {
            let a = g.leaf("a", random(r, &[7])).unwrap();
            g.sum(a).unwrap()
        }),
        ("log_sum_exp", |g, r| {
            let a = g.leaf("a", random(r, &[9])).unwrap();
            let a = g.scale(a, 5.0).unwrap();
            g.log_sum_exp(a).unwrap()
        }),
        ("spatial_mean", |g, r| {
            let a = g.leaf("a", random(r, &[2, 3, 4, 4])).unwrap();
            g.spatial_mean(a).unwrap()
        }),
        ("conv2d", |g, r| {
            let x = g.leaf("x", random(r, &[1, 2, 5, 6])).unwrap();
            let w = g.leaf("w", random(r, &[3, 2, 3, 3])).unwrap();
            let b = g.leaf("b", random(r, &[3])).unwrap();
            g.conv2d(x, w, Some(b)).unwrap()
        }),
        ("upsample2x", |g, r| {
            let a = g.leaf("a", random(r, &[1, 2, 3, 2])).unwrap();
            g.upsample2x(a).unwrap()
        }),
        ("avg_pool2x", |g, r| {
            let a = g.leaf("a", random(r, &[1, 2, 4, 6])).unwrap();
            g.avg_pool2x(a).unwrap()
        }),
        ("concat", |g, r| {
            let a = g.leaf("a", random(r, &[1, 2, 3, 3])).unwrap();
            let b = g.leaf("b", random(r, &[1, 1, 3, 3])).unwrap();
            g.concat(&[a, b], 1).unwrap()
        }),
        ("crop", |g, r| {
            let a = g.leaf("a", random(r, &[1, 2, 5, 5])).unwrap();
            g.crop(a, 1, 2, 3, 2).unwrap()
        }),
        ("sort", |g, r| {
            let a = g.leaf("a", random(r, &[8])).unwrap();
            g.sort(a).unwrap()
        }),
        ("gather", |g, r| {
            let a = g.leaf("a", random(r, &[10])).unwrap();
            g.gather(a, vec![3, 0, 3, 9, 5].into(), &[5]).unwrap()
        }),
        ("pairwise_diff", |g, r| {
            let a = g.leaf("a", random(r, &[4])).unwrap();
            let b = g.leaf("b", random(r, &[3])).unwrap();
            g.pairwise_diff(a, b).unwrap()
        }),
        ("reshape", |g, r| {
            let a = g.leaf("a", random(r, &[2, 6])).unwrap();
            g.reshape(a, &[3, 4]).unwrap()
        }),
        ("flatten", |g, r| {
            let a = g.leaf("a", random(r, &[1, 2, 2, 3])).unwrap();
            g.flatten(a).unwrap()
        }),
    ];
    let opts = GradCheckOptions::default();
    let mut worst = 0.0f64;
    for (name, build) in &ops {
        for trial in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial * 104_729 + name.len() as u64);
            let mut g = Graph::new();
            let out = build(&mut g, &mut rng);
            let root = gradcheck_root(&mut g, out, &mut rng);
            let report = grad_check(&mut g, root, &opts).map_err(|e| format!("{name}: {e}"))?;
            ensure(report.passed, || format!("{name} trial {trial}: max relative error {:.3e}", report.max_rel_error))?;
            worst = worst.max(report.max_rel_error);
        }
    }
    let loss_opts = GradCheckOptions { max_elements_per_leaf: Some(3), ..GradCheckOptions::default() };
    let data = Dataset::synthesize(3, 16, 16, NoiseRange::from_8bit(5.0, 20.0).unwrap(), 21).unwrap();
    for distance in [DistanceKind::Emd, DistanceKind::Bd, DistanceKind::Mmd] {
        let cfg = TrainConfig { batch_size: 3, crop: 8, distance, seed: 5, ..TrainConfig::default() };
        let inputs = domain_inputs(&data, Domain::Rgb).unwrap();
        let batch = TrainBatch::sample(&inputs, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let net = cfg.init_net().unwrap();
        let (mut g, loss, _) = rcl_graph(&batch, &net, &FeatureEncoder::new(cfg.encoder_seed), &cfg).unwrap();
        let report = grad_check(&mut g, loss, &loss_opts).map_err(|e| e.to_string())?;
        ensure(report.passed, || format!("full loss ({distance}): max relative error {:.3e}", report.max_rel_error))?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(format!("{} ops and 3 full-loss graphs, max relative error {worst:.2e} < 1e-4", ops.len()))
}

// 2

fn brute_force_emd(a: &[f64], b: &[f64]) -> f64 {
    fn go(a: &[f64], b: &[f64], used: &mut [bool], i: usize, acc: f64, best: &mut f64) {
        if acc >= *best {
            return;
        }
        if i == a.len() {
            *best = acc;
            return;
        }
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                go(a, b, used, i + 1, acc + (a[i] - b[j]).abs(), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(a, b, &mut vec![false; b.len()], 0, 0.0, &mut best);
    best / a.len() as f64
}

fn criterion_distances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        worst = worst.max((emd(&a, &b).unwrap() - brute_force_emd(&a, &b)).abs());
    }
    ensure(worst < 1e-9, || format!("EMD deviates from exhaustive assignment by {worst:e}"))?;
    let s = 0.5f64.sqrt();
    let shifted = bd(&[-s, s], &[2.0 - s, 2.0 + s]).unwrap();
    let widened = bd(&[-s, s], &[-2.0 * s, 2.0 * s]).unwrap();
    ensure((shifted - 0.5).abs() < 1e-9, || format!("BD shifted {shifted}"))?;
    ensure((widened - 0.25 * 1.5625f64.ln()).abs() < 1e-9, || format!("BD widened {widened}"))?;
    let mut min_mmd = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.random_range(2..=64);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        min_mmd = min_mmd.min(mmd(&a, &b).unwrap());
    }
    ensure(min_mmd >= 0.0, || format!("negative MMD {min_mmd:e}"))?;
    let (std, shift) = (Normal::new(0.0, 1.0).unwrap(), Normal::new(3.0, 1.0).unwrap());
    let mut wins = 0;
    for _ in 0..100 {
        let a: Vec<f64> = (0..256).map(|_| std.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..256).map(|_| std.sample(&mut rng)).collect();
        let c: Vec<f64> = (0..256).map(|_| shift.sample(&mut rng)).collect();
        wins += usize::from(mmd(&a, &b).unwrap() < mmd(&a, &c).unwrap());
    }
    ensure(wins >= 99, || format!("MMD separated only {wins}/100"))?;
    Ok(format!("EMD |d| <= {worst:.1e}; BD {shifted:.9} and {widened:.9}; MMD min {min_mmd:.2e}, separation {wins}/100"))
}

// 3

fn criterion_noise() -> Outcome {
    const DRAWS: usize = 100_000;
    let p = NoiseParams::new(0.01, 0.0004).unwrap();
    let mut report = Vec::new();
    for (i, y) in [0.1, 0.5, 1.0].into_iter().enumerate() {
        let noisy = apply_nlf_noise(&Tensor::full(&[1, 1, 1, DRAWS], y), p, &mut ChaCha8Rng::seed_from_u64(i as u64));
        let d: Vec<f64> = noisy.data().iter().map(|v| v - y).collect();
        let mean = d.iter().sum::<f64>() / DRAWS as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (DRAWS - 1) as f64;
        let expected = p.lambda_shot * y + p.lambda_read;
        let rel = (var / expected - 1.0).abs();
        ensure(rel < 0.05, || format!("y={y}: variance {var:.3e} vs {expected:.3e}"))?;
        report.push(format!("y={y}: {:.2}%", 100.0 * rel));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for s in [0.0, 1.0 / 255.0, 0.05, 20.0 / 255.0] {
        let q = sample_nlf_params(NoiseRange::new(s, s).unwrap(), &mut rng).unwrap();
        ensure(q.lambda_shot == s * s / 2.0 && q.lambda_read == s * s / 2.0, || format!("s={s}: {q:?}"))?;
    }
    Ok(format!("variance error {}; degenerate ranges exact", report.join(", ")))
}

// 4

fn criterion_density(corpus: &Corpus, pre: &Pretrained) -> Outcome {
    let cfg = rcl_config();
    let dcfg = DensityConfig { crop: cfg.crop, overlap_min: cfg.overlap_min };
    let truth = density_analysis(None, DensityPhase::TrueNoise, &corpus.train, 500, dcfg, 0).map_err(|e| e.to_string())?;
    let init = cfg.init_net().unwrap();
    let before = density_analysis(Some(&init), DensityPhase::PreTraining, &corpus.train, 500, dcfg, 0).map_err(|e| e.to_string())?;
    let after = density_analysis(Some(&pre.out.net), DensityPhase::PostTraining, &corpus.train, 500, dcfg, 0).map_err(|e| e.to_string())?;
    let summary = format!(
        "(a) true-noise positive mass {:.3}; (b) mean EMD(neg)-EMD(pos) init {:.4e}, trained {:.4e} (true noise {:.4e}); pretrain {:.0}s",
        truth.positive_fraction(),
        before.mean(),
        after.mean(),
        truth.mean(),
        pre.elapsed.as_secs_f64()
    );
    let a = truth.positive_fraction() > 0.7;
    let b = after.mean() > before.mean();
    match (a, b) {
        (true, true) => Ok(summary),
        (false, _) => Err(format!("(a) failed: {summary}")),
        (true, false) => Err(format!("(b) failed: {summary}")),
    }
}

// 5

fn criterion_instrumentation(corpus: &Corpus) -> Outcome {
    let inputs = domain_inputs(&corpus.train, Domain::Rgb).unwrap();
    let enc = FeatureEncoder::new(TrainConfig::default().encoder_seed);
    for n1 in [4, 8] {
        let cfg = TrainConfig { batch_size: n1, ..rcl_config() };
        let batch = TrainBatch::sample(&inputs, &cfg, &mut ChaCha8Rng::seed_from_u64(n1 as u64)).unwrap();
        let net = cfg.init_net().unwrap();
        let (stats, _) = rcl_step(&batch, &net, &enc, &cfg).map_err(|e| e.to_string())?;
        ensure(stats.distance_evaluations == n1 * n1, || format!("N+1={n1}: {} distance evaluations", stats.distance_evaluations))?;
        ensure(stats.forward_passes == 2 * n1, || format!("N+1={n1}: {} forward passes", stats.forward_passes))?;
    }
    Ok("N+1=4: 16 distances, 8 forwards; N+1=8: 64 distances, 16 forwards".into())
}

// 6

fn criterion_baselines(corpus: &Corpus) -> Outcome {
    let noisy = evaluate_inputs(&corpus.test, "denoise", "noisy").map_err(|e| e.to_string())?;
    let cfg = TrainConfig { mode: TrainMode::N2n, ..TrainConfig::default() };
    let out = pretrain(&corpus.train, &cfg).map_err(|e| e.to_string())?;
    let n2n = evaluate_pairs(&out.net, &corpus.test, "denoise", "n2n", 0, 0).map_err(|e| e.to_string())?;
    let gain = n2n.psnr_mean - noisy.psnr_mean;
    ensure(gain >= 1.0, || format!("N2N {:.3} dB vs noisy {:.3} dB", n2n.psnr_mean, noisy.psnr_mean))?;
    let shape = [2, 3, 64, 64];
    let total: usize = shape.iter().product();
    let mut hits = vec![0u8; total];
    for phase in 0..4 {
        for i in n2s_mask_indices(&shape, phase) {
            hits[i] += 1;
        }
    }
    ensure(hits.iter().all(|&h| h == 1), || "N2S mask phases do not partition the pixels".into())?;
    Ok(format!("N2N {:.3} dB vs noisy {:.3} dB (+{gain:.3}); N2S phases partition {total} pixels", n2n.psnr_mean, noisy.psnr_mean))
}

// 7

fn criterion_label_efficiency(corpus: &Corpus, pre: &Pretrained) -> Outcome {
    let mut margins = Vec::new();
    for trial in 0..5u64 {
        let cfg = SweepConfig { finetune: FinetuneConfig::default(), seed: 100 + trial };
        let rows = label_efficiency_sweep(&pre.out.net, &corpus.pool, &corpus.test, &[4], &cfg).map_err(|e| e.to_string())?;
        let row = &rows[0];
        let sl = row.sl.ok_or("missing supervised row")?.0;
        margins.push(row.rcl_sl.0 - sl);
    }
    let wins = margins.iter().filter(|&&m| m >= 0.0).count();
    let listed = margins.iter().map(|m| format!("{m:+.3}")).collect::<Vec<_>>().join(" ");
    let summary = format!("RCL+SL minus SL margins (dB): {listed}; direction holds in {wins}/5");
    ensure(wins >= 4, || summary.clone())?;
    Ok(summary)
}

// 8

fn criterion_proxy_integrity(corpus: &Corpus) -> Outcome {
    let net = RestorerNet::new(Architecture::UnetSmall, 3, 3, HeadKind::Identity, Init::HeUniform { seed: 8 }).unwrap();
    let labeled = &corpus.pool[..2];
    let cfg = FinetuneConfig { steps: 10, crop: Some(32), seed: 8, ..FinetuneConfig::default() };
    for head in [HeadKind::Identity, HeadKind::Upsample2x] {
        let pairs: Vec<(Tensor, Tensor)> = match head {
            HeadKind::Identity => labeled.to_vec(),
            HeadKind::Upsample2x => labeled.iter().map(|(x, y)| (rcl_core::noise::downsample2x(x).unwrap(), y.clone())).collect(),
        };
        let tuned = finetune(&net, &pairs, &FinetuneConfig { head, ..cfg.clone() }).map_err(|e| e.to_string())?;
        let mut head_moved = false;
        for e in net.params.entries() {
            let after = tuned.params.get(&e.name).ok_or_else(|| format!("{} missing", e.name))?;
            if RestorerNet::is_head_param(&e.name) {
                head_moved |= after != &e.tensor;
            } else {
                let same = after.data().iter().zip(e.tensor.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(same, || format!("{head} head: body tensor {} changed", e.name))?;
            }
        }
        ensure(head_moved, || format!("{head} head: no head tensor changed"))?;
    }
    Ok(format!("{} body tensors bit-identical for identity and upsampling heads", net.params.entries().iter().filter(|e| !RestorerNet::is_head_param(&e.name)).count()))
}

// 9

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.random());
    ensure(psnr(&x, &x).unwrap() == f64::INFINITY, || "psnr(x, x) is not infinite".into())?;
    let a = Tensor::zeros(&[1, 1, 1, 10]);
    let mut b = Tensor::zeros(&[1, 1, 1, 10]);
    b.data_mut()[0] = 1.0;
    let ten = psnr(&a, &b).unwrap();
    ensure(ten == 10.0, || format!("psnr at MSE 1/10 is {ten}"))?;
    let s = ssim(&x, &x).unwrap();
    ensure(s == 1.0, || format!("ssim(x, x) = {s}"))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let net = RestorerNet::new(Architecture::UnetSmall, 3, 3, HeadKind::Identity, Init::HeUniform { seed: 9 }).unwrap();
    let path = dir.path().join("net.rcl");
    save_checkpoint(&net.params, &path).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure(params_to_bytes(&loaded) == params_to_bytes(&net.params), || "checkpoint round trip changed the parameters".into())?;
    ensure(
        loaded.entries().iter().zip(net.params.entries()).all(|(a, b)| a.tensor.data().iter().zip(b.tensor.data()).all(|(p, q)| p.to_bits() == q.to_bits())),
        || "checkpoint round trip is not bit-exact".into(),
    )?;
    Ok("psnr(x,x)=inf, psnr=10 dB exactly, ssim(x,x)=1, checkpoint round trip bit-exact".into())
}

// 10

fn digest(out: &PretrainOutput) -> (String, String) {
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &out.losses).unwrap();
    (hex(&Sha256::digest(params_to_bytes(&out.net.params))), hex(&Sha256::digest(&csv)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn criterion_determinism(corpus: &Corpus, first: &Pretrained) -> Outcome {
    let second = run_pretrain(corpus, &rcl_config());
    let (a, b) = (digest(&first.out), digest(&second.out));
    ensure(a.0 == b.0, || format!("checkpoint hashes differ: {} vs {}", a.0, b.0))?;
    ensure(a.1 == b.1, || format!("loss CSV hashes differ: {} vs {}", a.1, b.1))?;
    let total = first.elapsed + second.elapsed;
    ensure(total < 2 * budget(4), || format!("two runs took {:.0}s", total.as_secs_f64()))?;
    Ok(format!("checkpoint sha256 {}..., loss CSV sha256 {}...; two runs {:.0}s", &a.0[..16], &a.1[..16], total.as_secs_f64()))
}

// 11

fn criterion_mosaic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let raw = Tensor::from_fn(&[2, 1, 16, 12], |_| rng.random());
    let rgb = demosaic_bilinear(&raw).unwrap();
    let back = mosaic(&rgb).unwrap();
    ensure(back.data().iter().zip(raw.data()).all(|(a, b)| a.to_bits() == b.to_bits()), || "mosaic(demosaic(raw)) != raw".into())?;
    let mut g = Graph::new();
    let x = g.constant(raw.clone()).unwrap();
    let f = g.constant(rgb).unwrap();
    let l = jdd_consistency_loss(&mut g, x, f).unwrap();
    ensure(g.value(l).item() == 0.0, || format!("jdd consistency {}", g.value(l).item()))?;
    let r = residual(&mut g, x, f, ResidualMode::Mosaic).unwrap();
    ensure(g.shape(r) == [2 * 16 * 12], || format!("mosaic residual shape {:?}", g.shape(r)))?;
    ensure(g.value(r).data().iter().all(|&v| v == 0.0), || "mosaic residual of the demosaic is nonzero".into())?;
    let rgb_in = g.constant(Tensor::zeros(&[2, 3, 16, 12])).unwrap();
    ensure(residual(&mut g, rgb_in, f, ResidualMode::Mosaic).is_err(), || "mosaic residual accepted an RGB input".into())?;
    let small = g.constant(Tensor::zeros(&[2, 3, 8, 6])).unwrap();
    ensure(residual(&mut g, x, small, ResidualMode::Mosaic).is_err(), || "mosaic residual accepted a mismatched output".into())?;
    Ok("mosaic(demosaic(raw)) = raw bit-exact; jdd consistency 0; residual flattened to N*H*W".into())
}

fn budget(n: usize) -> Duration {
    let secs = match n {
        1 | 2 => 60,
        3 => 30,
        4 => 15 * 60,
        6 => 10 * 60,
        7 => 20 * 60,
        10 => 2 * 15 * 60,
        _ => 10,
    };
    Duration::from_secs(secs)
}

fn report(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
    });
    let elapsed = t.elapsed();
    let outcome = match outcome {
        Ok(msg) if elapsed > budget(n) => Err(format!("{msg}; over the {}s budget", budget(n).as_secs())),
        other => other,
    };
    let (tag, msg) = match &outcome {
        Ok(m) => ("PASS", m),
        Err(m) => ("FAIL", m),
    };
    println!("criterion {n:>2}: {tag} [{:.1}s] {msg}", elapsed.as_secs_f64());
    outcome.is_ok()
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    // a name filter that does not match this target skips the suite
    if args.iter().any(|a| !a.starts_with('-')) && !args.iter().any(|a| !a.starts_with('-') && "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    let corpus = Corpus::new();
    let mut passed = Vec::new();
    passed.push(report(1, criterion_gradients));
    passed.push(report(2, criterion_distances));
    passed.push(report(3, criterion_noise));
    let mut first = None;
    passed.push(report(4, || {
        let pre = run_pretrain(&corpus, &rcl_config());
        let outcome = criterion_density(&corpus, &pre);
        first = Some(pre);
        outcome
    }));
    passed.push(report(5, || criterion_instrumentation(&corpus)));
    passed.push(report(6, || criterion_baselines(&corpus)));
    passed.push(report(7, || criterion_label_efficiency(&corpus, first.as_ref().ok_or("no pretrained network")?)));
    passed.push(report(8, || criterion_proxy_integrity(&corpus)));
    passed.push(report(9, criterion_metrics));
    passed.push(report(10, || criterion_determinism(&corpus, first.as_ref().ok_or("no pretrained network")?)));
    passed.push(report(11, criterion_mosaic));
    let n = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {n}/{} criteria passed", passed.len());
    if n == passed.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
