//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single `criterion N: PASS|FAIL ...` line straight to stderr so it shows
//! up even when output capture is on.
//!
//! Criteria 4 and 5 train real populations and take several minutes on one
//! core.

use std::fs;
use std::time::Instant;

use mimetic::experiment::{cifar_dir, cmd_analyze, cmd_farm, cmd_sweep_bias, ExperimentConfig, SweepArm};
use mimetic::gradcheck::{run_suite, GradcheckOptions};
use mimetic::population::{stripe_score, Axis, PopulationMatrix, Which};
use mimetic::seed::{self, Rng};
use mimetic::train::{initial_model, train, TrainOptions};
use mimetic::{Tensor, TinyModel};
use mimetic_validation::{recipe, report, root};
use rand_distr::{Distribution, StandardNormal};

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let results = run_suite(&GradcheckOptions::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.worst_rel_err / r.tolerance).fold(0.0, f64::max);
    let has_models = ["convnext", "vit"].iter().all(|f| results.iter().any(|r| r.name.contains(f)));
    let ok = failed.is_empty() && has_models && secs < 60.0;
    report(
        1,
        ok,
        &format!("{} cases, worst error/tolerance {worst:.2e}, failed {failed:?}, {secs:.1}s", results.len()),
    );
    assert!(ok);
}

#[test]
fn criterion_2_init_statistics() {
    let b = 0.02;
    let mut worst_shift = 0.0f64;
    for s in 0..10 {
        let base = mimetic::ModelConfig::convnext(16);
        let mut shifted = base.clone();
        shifted.init = base.init.with_mode(&format!("constant:{b}")).unwrap();
        let (m0, m1) = (initial_model(&base, s).unwrap(), initial_model(&shifted, s).unwrap());
        for l in 0..base.depth {
            let name = TinyModel::w1_name(l);
            let d = m1.param(&name).unwrap().mean() - m0.param(&name).unwrap().mean() - b;
            worst_shift = worst_shift.max(d.abs());
        }
    }
    let exact = worst_shift < 1e-15;

    let (n, draws, sigma_b) = (64, 1000u64, 0.02);
    let cfg = mimetic::ModelConfig {
        embed_dim: n,
        depth: 1,
        image_size: 4,
        init: mimetic::init::InitSpec::default().with_mode(&format!("rowvec:{sigma_b}")).unwrap(),
        ..mimetic::ModelConfig::convnext(4)
    };
    let p = cfg.hidden_dim();
    let mut grand = Vec::new();
    let mut col_var = 0.0;
    for s in 0..draws {
        let w1 = initial_model(&cfg, s).unwrap().param(&TinyModel::w1_name(0)).unwrap().clone();
        grand.push(w1.mean());
        let cols: Vec<f64> = (0..n).map(|j| (0..p).map(|i| w1.data()[i * n + j]).sum::<f64>() / p as f64).collect();
        let m = cols.iter().sum::<f64>() / n as f64;
        col_var += cols.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    }
    let (mean, sd) = mimetic::experiment::mean_std(&grand);
    let se = sd / (draws as f64).sqrt();
    let bound = mimetic::init::kaiming_bound(n, (1.0f64 / 3.0).sqrt());
    let base_col_var = bound * bound / 3.0 / p as f64;
    let sigma_hat = (col_var / draws as f64 - base_col_var).sqrt();
    let zero_mean = mean.abs() < 3.0 * se;
    let offsets = (sigma_hat / sigma_b - 1.0).abs() < 0.05;
    let ok = exact && zero_mean && offsets;
    report(
        2,
        ok,
        &format!(
            "constant shift error {worst_shift:.1e}; rowvec grand mean {mean:.2e} (3 SE = {:.2e}); column offset std {sigma_hat:.5} vs {sigma_b}",
            3.0 * se
        ),
    );
    assert!(ok);
}

fn gaussian(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = std * Distribution::<f64>::sample(&StandardNormal, rng));
    t
}

#[test]
fn criterion_3_stripe_calibration() {
    let mut rng = seed::stream(30, "acceptance-iid");
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for _ in 0..25 {
        let w1 = (0..256).map(|_| gaussian(&[8, 8], 1.0, &mut rng)).collect();
        let w2 = (0..256).map(|_| gaussian(&[8, 8], 1.0, &mut rng)).collect();
        let pop = PopulationMatrix::new(0, w1, w2).unwrap();
        for w in [Which::W1, Which::W2] {
            for a in [Axis::Rows, Axis::Columns] {
                let s = stripe_score(&pop, w, a).unwrap();
                lo = lo.min(s);
                hi = hi.max(s);
            }
        }
    }
    let (p, n, k, s, sigma_b) = (8, 8, 512, 1.0, 0.25);
    let mut rng = seed::stream(31, "acceptance-planted");
    let w1 = (0..k)
        .map(|_| mimetic::init::apply_rowvec_mean(&gaussian(&[p, n], s, &mut rng), sigma_b, &mut rng).unwrap().0)
        .collect();
    let w2 = (0..k).map(|_| gaussian(&[n, p], s, &mut rng)).collect();
    let planted = stripe_score(&PopulationMatrix::new(0, w1, w2).unwrap(), Which::W1, Axis::Columns).unwrap();
    let target = 1.0 + p as f64 * sigma_b * sigma_b / (s * s);
    let ok = lo >= 0.8 && hi <= 1.25 && (planted / target - 1.0).abs() < 0.15;
    report(3, ok, &format!("iid scores in [{lo:.3}, {hi:.3}] over 100; planted {planted:.3} vs target {target:.3}"));
    assert!(ok);
}

#[test]
fn criterion_4_stripes_in_trained_population() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = recipe("stripes_convnext.toml", dir.path());
    assert!(cfg.farm_size >= 128 && cfg.train.epochs >= 5);
    let start = Instant::now();
    let farm = cmd_farm(&cfg, cfg.farm_size).unwrap();
    let stats = cmd_analyze(dir.path(), None, &dir.path().join("analysis")).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut lines = Vec::new();
    let mut ok = false;
    for s in &stats {
        let st = &s.stripe_scores;
        let cols = st.w1.columns > 1.5 && st.w1.columns > st.w2.columns;
        let rows = st.w1.rows > 1.5 && st.w1.rows > st.w2.rows;
        ok |= cols || rows;
        lines.push(format!(
            "L{} W1 r/c {:.2}/{:.2} W2 r/c {:.2}/{:.2}",
            s.layer, st.w1.rows, st.w1.columns, st.w2.rows, st.w2.columns
        ));
    }
    report(
        4,
        ok,
        &format!("K={} ({} failed), {}; {secs:.0}s", farm.trained.len(), farm.failed.len(), lines.join("; ")),
    );
    assert!(ok);
}

/// `(max_b mean(b) − mean(0), pooled SE, per-b means)` for the mean-shift arm.
fn dip_margin(cfg: &ExperimentConfig) -> (f64, f64, Vec<(f64, f64)>) {
    let report = cmd_sweep_bias(cfg, true).unwrap();
    let accs =
        |b: f64| -> Vec<f64> { report.rows.iter().filter(|r| r.b == b).map(|r| r.final_acc.unwrap_or(0.0)).collect() };
    let (m0, s0) = mimetic::experiment::mean_std(&accs(0.0));
    let k = cfg.seeds.len() as f64;
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut means = vec![(0.0, m0)];
    for &b in cfg.b_grid.iter().filter(|&&b| b != 0.0) {
        let (m, s) = mimetic::experiment::mean_std(&accs(b));
        means.push((b, m));
        if m - m0 > best.0 {
            best = (m - m0, (s0 * s0 / k + s * s / k).sqrt());
        }
    }
    (best.0, best.1, means)
}

#[test]
fn criterion_5_small_bias_improves_short_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut attempts = Vec::new();
    let mut ok = false;
    let mut recipes = vec!["bias_sweep.toml"];
    if cifar_dir(None).is_ok_and(|d| d.join("data_batch_1.bin").exists()) {
        recipes.insert(0, "bias_sweep_cifar.toml");
    }
    for name in recipes {
        let mut cfg = recipe(name, &dir.path().join(name));
        cfg.arms = vec![SweepArm::MlpMean];
        assert_eq!(cfg.seeds.len(), 5);
        assert_eq!(cfg.train.epochs, 5);
        let (margin, se, means) = dip_margin(&cfg);
        ok |= margin > se;
        let means: Vec<String> = means.iter().map(|(b, m)| format!("b={b}: {m:.3}")).collect();
        attempts.push(format!("{name}: {} ; best gain {margin:+.4} vs pooled SE {se:.4}", means.join(", ")));
    }
    report(5, ok, &attempts.join(" || "));
    assert!(ok, "no b in the grid beats b = 0 by a pooled standard error");
}

#[test]
fn criterion_6_paired_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = recipe("bias_sweep.toml", dir.path());
    let data = cfg.data.load().unwrap();
    let base = SweepArm::MlpMean.apply(&cfg.model, 0.0);
    let treated = SweepArm::MlpMean.apply(&cfg.model, 0.02);
    let opts = TrainOptions { epochs: 1, ..cfg.train.clone() };
    let mut ok = true;
    let mut compared = 0;
    for &seed in &cfg.seeds {
        let (a, b) = (initial_model(&base, seed).unwrap(), initial_model(&treated, seed).unwrap());
        for (pa, pb) in a.params().iter().zip(b.params()) {
            let same = pa.value.data().iter().zip(pb.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            ok &= same != pa.name.ends_with(".mlp.W1");
            compared += 1;
        }
        let ra = train(&base, &data.0, &data.1, &cfg.optim, &opts, seed).unwrap();
        let rb = train(&treated, &data.0, &data.1, &cfg.optim, &opts, seed).unwrap();
        ok &= ra.result.data_digest == rb.result.data_digest;
    }
    report(6, ok, &format!("{} seeds, {compared} parameter tensors compared, data digests equal", cfg.seeds.len()));
    assert!(ok);
}

#[test]
fn criterion_7_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut snapshots_equal = true;
    let mut farms = Vec::new();
    for (run, threads) in [("a", 1), ("b", 0)] {
        let mut cfg = recipe("stripes_convnext.toml", &dir.path().join(run));
        cfg.parallel = threads;
        cmd_farm(&cfg, 4).unwrap();
        farms.push(cfg.out_dir);
    }
    let mut names: Vec<_> = fs::read_dir(&farms[0]).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in &names {
        snapshots_equal &= fs::read(farms[0].join(name)).unwrap() == fs::read(farms[1].join(name)).unwrap()
            || name.to_string_lossy().ends_with(".json");
    }
    let snapshot_count = names.iter().filter(|n| n.to_string_lossy().ends_with(".mimw")).count();

    let mut csvs = Vec::new();
    for run in ["c", "d"] {
        let mut cfg = recipe("bias_sweep.toml", &dir.path().join(run));
        cfg.seeds = vec![0, 1];
        cfg.b_grid = vec![0.0, 0.02];
        cfg.train.epochs = 2;
        cmd_sweep_bias(&cfg, false).unwrap();
        let read = |f: &str| fs::read(cfg.out_dir.join(f)).unwrap();
        csvs.push((read("sweep.csv"), read("sweep_summary.csv")));
    }
    let csv_equal = csvs[0] == csvs[1];
    let ok = snapshots_equal && snapshot_count == 4 && csv_equal;
    report(
        7,
        ok,
        &format!(
            "{snapshot_count} snapshot files byte-identical: {snapshots_equal}; sweep CSVs identical: {csv_equal}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_8_non_reproduction_is_documented() {
    let readme = fs::read_to_string(root().join("README.md")).unwrap_or_default();
    let section = readme.split("## Not reproduced").nth(1).unwrap_or("");
    let ok = section.contains("ImageNet") && section.contains("10⁴");
    report(
        8,
        ok,
        "ImageNet-scale accuracy and 10⁴-member populations are out of scope; README lists them under 'Not reproduced'",
    );
    assert!(ok);
}
