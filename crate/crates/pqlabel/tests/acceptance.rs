//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1-7 are properties and decide the exit status. Criteria 8-11
//! come from the desk-scale run; their verdicts are printed and stamped in
//! the report footer, and the target fails only if they could not be
//! evaluated. Set `PQLABEL_ACCEPTANCE_QUICK=1` to skip the desk run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma, StandardNormal};

use pqlabel::config::ExperimentConfig;
use pqlabel::harness::reproduce;
use pqlabel::report::{parse_table_csv, Verdict};
use pqlabel_core::clustering::{kmeans_fit, KMeansParams};
use pqlabel_core::model::{encode_input, entropy, Classifier, ClassifierConfig, DuqConfig};
use pqlabel_core::pool::{build_pool, disagreement_rate, replicate, PoolConfig, Provenance};
use pqlabel_core::quality::{fit_aggd, fit_ggd, mscn};
use pqlabel_core::{GrayPlane, RgbImage, Sample};

type Rng8 = rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ------------------------------------------------------------ criterion 1

fn max_gradient_error(model: &mut Classifier, label: usize, seed: u64) -> f64 {
    let mut rng = Rng8::seed_from_u64(seed);
    let c = model.config().clone();
    let img = RgbImage::new(c.height, c.width, (0..c.height * c.width * 3).map(|_| rng.random()).collect()).unwrap();
    let mut input = vec![0.0; c.height * c.width * c.channels];
    encode_input(&img, &mut input);
    let mut ws = model.workspace();
    let mut grad = vec![0.0; model.params().len()];
    model.example_loss_and_grad(&input, label, None, &mut ws, &mut grad);
    let mut scratch = vec![0.0; grad.len()];
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..grad.len() {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + eps;
        let up = model.example_loss_and_grad(&input, label, None, &mut ws, &mut scratch);
        model.params_mut()[i] = orig - eps;
        let down = model.example_loss_and_grad(&input, label, None, &mut ws, &mut scratch);
        model.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

fn criterion_1() -> Outcome {
    let cfg = ClassifierConfig {
        height: 8,
        width: 8,
        conv_channels: vec![3, 4],
        dense_width: 6,
        dropout_p: 0.0,
        classes: 4,
        seed: 12,
        ..Default::default()
    };
    let mut softmax = Classifier::new(cfg.clone(), None).unwrap();
    let mut duq = Classifier::new(cfg, Some(DuqConfig { embedding: 4, length_scale: 0.5, momentum: 0.99 })).unwrap();
    let (a, b) = (max_gradient_error(&mut softmax, 2, 1), max_gradient_error(&mut duq, 1, 2));
    outcome(
        a < 1e-4 && b < 1e-4,
        format!(
            "max relative error softmax {a:.2e} over {} params, duq {b:.2e} over {} params",
            softmax.params().len(),
            duq.params().len()
        ),
    )
}

// ------------------------------------------------------------ criterion 2

fn criterion_2() -> Outcome {
    let mut rng = Rng8::seed_from_u64(20);
    let gauss: Vec<f64> = (0..200_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let laplace: Vec<f64> = (0..200_000)
        .map(|_| {
            let u: f64 = rng.random::<f64>() - 0.5;
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
        .collect();
    // AGGD: side chosen with probability sigma_side / (sigma_l + sigma_r);
    // |x| = sigma * sqrt(G(1/nu) / G(3/nu)) * Gamma(1/nu)^(1/nu)
    let (nu, sl, sr) = (1.5f64, 1.0f64, 2.0f64);
    let gamma = Gamma::new(1.0 / nu, 1.0).unwrap();
    let k = (libm_gamma(1.0 / nu) / libm_gamma(3.0 / nu)).sqrt();
    let aggd: Vec<f64> = (0..1_000_000)
        .map(|_| {
            let mag = gamma.sample(&mut rng).powf(1.0 / nu);
            if rng.random::<f64>() < sl / (sl + sr) {
                -sl * k * mag
            } else {
                sr * k * mag
            }
        })
        .collect();
    let g = fit_ggd(&gauss).unwrap().alpha;
    let l = fit_ggd(&laplace).unwrap().alpha;
    let a = fit_aggd(&aggd).unwrap();
    let (rl, rr) = (a.sigma_l2 / (sl * sl), a.sigma_r2 / (sr * sr));
    let pass = (1.9..=2.1).contains(&g)
        && (0.9..=1.1).contains(&l)
        && (a.nu - nu).abs() <= 0.1
        && (rl - 1.0).abs() <= 0.05
        && (rr - 1.0).abs() <= 0.05;
    outcome(
        pass,
        format!(
            "gaussian alpha {g:.4}, laplacian alpha {l:.4}, aggd nu {:.4}, variance ratios {rl:.4} / {rr:.4}",
            a.nu
        ),
    )
}

/// Lanczos approximation, independent of the crate's gamma function.
fn libm_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * libm_gamma(1.0 - x));
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = G[0];
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
}

// ------------------------------------------------------------ criterion 3

fn mscn_oracle(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let s2 = 2.0 * (7.0f64 / 6.0).powi(2);
    let mut win = [[0.0; 7]; 7];
    let mut total = 0.0;
    for (dy, row) in win.iter_mut().enumerate() {
        for (dx, c) in row.iter_mut().enumerate() {
            let (a, b) = (dy as f64 - 3.0, dx as f64 - 3.0);
            *c = (-(a * a + b * b) / s2).exp();
            total += *c;
        }
    }
    // mirror with the edge pixel repeated: -1 -> 0, n -> n - 1
    let mirror = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let j = if i < 0 { -i - 1 } else if i >= n { 2 * n - i - 1 } else { i };
        j as usize
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let at = |dy: usize, dx: usize| {
                v[mirror(y as i64 + dy as i64 - 3, h) * w + mirror(x as i64 + dx as i64 - 3, w)]
            };
            let mut mu = 0.0;
            for dy in 0..7 {
                for dx in 0..7 {
                    mu += win[dy][dx] / total * at(dy, dx);
                }
            }
            let mut var = 0.0;
            for dy in 0..7 {
                for dx in 0..7 {
                    var += win[dy][dx] / total * (at(dy, dx) - mu).powi(2);
                }
            }
            out[y * w + x] = (v[y * w + x] - mu) / (var.sqrt() + 1.0 / 255.0);
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let flat = mscn(&GrayPlane::constant(12, 12, 0.37)).unwrap();
    let zero = flat.values.iter().all(|&v| v == 0.0);
    let mut rng = Rng8::seed_from_u64(3);
    let v: Vec<f64> = (0..81).map(|_| rng.random()).collect();
    let got = mscn(&GrayPlane::new(9, 9, v.clone()).unwrap()).unwrap();
    let want = mscn_oracle(&v, 9, 9);
    let err = got.values.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(zero && err <= 1e-12, format!("constant plane exactly zero: {zero}; 9x9 max deviation from loop oracle {err:.2e}"))
}

// ------------------------------------------------------------ criterion 4

fn criterion_4() -> Outcome {
    let one_hot = entropy(&[0.0, 1.0, 0.0, 0.0]);
    let uniform = entropy(&[0.1; 10]);
    let mut rng = Rng8::seed_from_u64(4);
    let mut bounded = true;
    for _ in 0..10_000 {
        // uniform on the simplex: normalized exponentials
        let e: Vec<f64> = (0..10).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|x| x / s).collect();
        let h = entropy(&p);
        bounded &= (0.0..=10f64.log2() + 1e-12).contains(&h);
    }
    let pass = one_hot == 0.0 && (uniform - 10f64.log2()).abs() <= 1e-9 && (uniform - 3.3219).abs() < 1e-4 && bounded;
    outcome(pass, format!("one-hot {one_hot}, uniform-10 {uniform:.10}, bounds on 10^4 simplex points: {bounded}"))
}

// ------------------------------------------------------------ criterion 5

fn inertia(points: &[Vec<f64>], groups: &[Vec<usize>]) -> f64 {
    groups
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| {
            let d = points[0].len();
            let c: Vec<f64> = (0..d).map(|j| g.iter().map(|&i| points[i][j]).sum::<f64>() / g.len() as f64).collect();
            g.iter().map(|&i| points[i].iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>()
        })
        .sum()
}

fn criterion_5() -> Outcome {
    let pts: Vec<Vec<f64>> =
        vec![vec![0.0, 0.0], vec![1.0, 0.2], vec![0.3, 1.1], vec![5.0, 5.0], vec![6.1, 4.8], vec![5.4, 6.3]];
    let mut best = f64::INFINITY;
    for mask in 1..(1u32 << 6) - 1 {
        let a: Vec<usize> = (0..6).filter(|i| mask & (1 << i) != 0).collect();
        let b: Vec<usize> = (0..6).filter(|i| mask & (1 << i) == 0).collect();
        best = best.min(inertia(&pts, &[a, b]));
    }
    let fit = kmeans_fit(&pts, &KMeansParams::new(2, 0)).unwrap();
    let optimum = (fit.model.inertia - best).abs() <= 1e-9;

    let mut rng = Rng8::seed_from_u64(5);
    let mut monotone = true;
    let mut fits = 0;
    for seed in 0..20 {
        let data: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| rng.random::<f64>() * 10.0).collect()).collect();
        for k in [2, 3, 5] {
            let f = kmeans_fit(&data, &KMeansParams::new(k, seed)).unwrap();
            monotone &= f.inertia_history.windows(2).all(|w| w[1] <= w[0]);
            fits += 1;
        }
    }
    outcome(
        optimum && monotone,
        format!("k-means {:.12} vs exhaustive {best:.12}; inertia non-increasing over {fits} fits: {monotone}", fit.model.inertia),
    )
}

// ------------------------------------------------------------ criterion 6

fn criterion_6() -> Outcome {
    let clean: Vec<u8> = (0..100).map(|i| (i % 10) as u8).collect();
    let samples: Vec<Sample> =
        clean.iter().enumerate().map(|(i, &l)| Sample::new(i, RgbImage::filled(8, 8, [0, 0, 0]), Some(l))).collect();
    let ranking: Vec<usize> = (0..100).rev().collect();
    let cfg = PoolConfig::default();
    let labeler = |id: usize, m: usize| Ok((0..m).map(|r| ((id + r) % 10) as u8).collect());
    let mld = build_pool(&samples, &ranking, &cfg, 10, &labeler).unwrap();
    let plan = cfg.plan(100);
    let sizes = [plan.pool, plan.triple, plan.double, plan.single, plan.clean];
    let counted = [
        mld.provenance.iter().filter(|&&p| p == Provenance::Generated).count(),
        mld.labels.iter().filter(|l| l.len() == 3).count(),
        mld.labels.iter().filter(|l| l.len() == 2).count(),
    ];
    let pairs = replicate(&mld);
    // independent counter over the pairs
    let mut wrong = 0;
    for p in &pairs {
        if p.label != clean[p.id] {
            wrong += 1;
        }
    }
    let independent = f64::from(wrong) / pairs.len() as f64;
    let rate = disagreement_rate(&mld, &clean);
    let pass = sizes == [40, 5, 5, 30, 60]
        && counted[0] == 40
        && counted[1] == 5
        && counted[2] == 5
        && pairs.len() == 115
        && rate == independent;
    outcome(pass, format!("split {sizes:?}, pairs {}, disagreement {rate} vs counter {independent}", pairs.len()))
}

// ------------------------------------------------------------ criterion 7

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn criterion_7(base: &Path) -> Outcome {
    let mut cfg = ExperimentConfig::load(&workspace_root().join("configs/smoke.toml")).unwrap();
    cfg.seeds = vec![0, 1];
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        cfg.output_dir = base.join(format!("determinism_{run}"));
        let _ = std::fs::remove_dir_all(&cfg.output_dir);
        if let Err(e) = reproduce(&cfg, &|_| {}) {
            return outcome(false, format!("reproduce failed: {e}"));
        }
        outputs.push(cfg.output_dir.clone());
    }
    let (a, b) = (csv_files(&outputs[0]), csv_files(&outputs[1]));
    let names = |v: &[PathBuf], root: &Path| v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect::<Vec<_>>();
    let same_set = names(&a, &outputs[0]) == names(&b, &outputs[1]);
    let identical = same_set && a.iter().zip(&b).all(|(x, y)| std::fs::read(x).unwrap() == std::fs::read(y).unwrap());
    outcome(identical, format!("{} CSV files compared across two runs of configs/smoke.toml, byte-identical: {identical}", a.len()))
}

// --------------------------------------------------------- criteria 8-11

fn desk_run(base: &Path) -> Vec<(String, Verdict, String)> {
    let mut cfg = ExperimentConfig::load(&workspace_root().join("configs/desk.toml")).unwrap();
    cfg.output_dir = base.join("desk");
    let start = Instant::now();
    let progress = |m: &str| eprintln!("[desk {:>6.1}s] {m}", start.elapsed().as_secs_f64());
    let report = match reproduce(&cfg, &progress) {
        Ok(r) => r,
        Err(e) => {
            return (8..=11).map(|i| (format!("criterion {i}"), Verdict::NotEvaluated, format!("desk run failed: {e}"))).collect();
        }
    };
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let mut out: Vec<(String, Verdict, String)> =
        report.checks[..3].iter().map(|c| (c.id.to_string(), c.verdict, c.detail.clone())).collect();

    let csv = std::fs::read_to_string(cfg.output_dir.join("report.csv")).unwrap();
    let (_, rows) = parse_table_csv(&csv).unwrap();
    let mut rendered = Vec::new();
    let mut all = true;
    for suite in ["rotation", "corruption"] {
        let n: usize = rows
            .iter()
            .filter(|r| r.suite.as_str() == suite)
            .map(|r| r.cells.iter().filter(|(_, s)| s.is_some()).count())
            .sum();
        all &= n == 12;
        rendered.push(format!("{suite} {n}/12 cells"));
    }
    let side = &report.checks[3].detail;
    out.push((
        format!("{} (12 cells per suite)", report.checks[3].id),
        if all { Verdict::Pass } else { Verdict::Fail },
        format!("{}; {side}", rendered.join(", ")),
    ));
    for (_, _, d) in &mut out {
        d.push_str(&format!(" [desk run {minutes:.1} min, report {}]", cfg.output_dir.join("report.md").display()));
    }
    out
}

fn main() {
    let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&base).unwrap();
    let properties: [(&str, fn() -> Outcome); 6] = [
        ("gradient oracle", criterion_1),
        ("GGD/AGGD recovery", criterion_2),
        ("MSCN", criterion_3),
        ("entropy", criterion_4),
        ("k-means", criterion_5),
        ("pool arithmetic", criterion_6),
    ];
    let mut property_failures = 0;
    for (i, (name, f)) in properties.iter().enumerate() {
        let start = Instant::now();
        let o = f();
        property_failures += usize::from(!o.pass);
        println!("{} criterion {} ({name}): {} ({:.1}s)", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail, start.elapsed().as_secs_f64());
    }
    let start = Instant::now();
    let o = criterion_7(&base);
    property_failures += usize::from(!o.pass);
    println!("{} criterion 7 (determinism): {} ({:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail, start.elapsed().as_secs_f64());

    let mut unevaluated = 0;
    if std::env::var_os("PQLABEL_ACCEPTANCE_QUICK").is_some() {
        for i in 8..=11 {
            println!("SKIP criterion {i}: desk run disabled by PQLABEL_ACCEPTANCE_QUICK");
        }
    } else {
        for (i, (name, verdict, detail)) in desk_run(&base).into_iter().enumerate() {
            let tag = match verdict {
                Verdict::Pass | Verdict::Reported => "PASS",
                Verdict::Fail => "FAIL",
                Verdict::NotEvaluated => {
                    unevaluated += 1;
                    "FAIL"
                }
            };
            println!("{tag} criterion {} ({name}): {detail}", i + 8);
        }
    }
    if property_failures + unevaluated > 0 {
        eprintln!("{property_failures} property criteria failed, {unevaluated} directional criteria not evaluated");
        std::process::exit(1);
    }
}
