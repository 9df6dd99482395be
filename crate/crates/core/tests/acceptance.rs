//! Acceptance checks: one line per criterion on stdout; the process fails if
//! any criterion does. Runs without the libtest harness (`cargo test --test acceptance`).

// `ensure!` negates its condition so that NaN measurements fail.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::time::{Duration, Instant};

use advdet_core::attacks::{bim, deepfool, fgsm, run_attack};
use advdet_core::config::{Config, Mode};
use advdet_core::data::Example;
use advdet_core::ensemble::logistic::{penalized_gradient, penalized_objective};
use advdet_core::ensemble::{aupr, auroc};
use advdet_core::lid::lid_score;
use advdet_core::maha::{fit_gaussian, maha_distance, MahaHead};
use advdet_core::ocsvm::{fit_ocsvm, OcsvmParams};
use advdet_core::pipeline::{run_pipeline, EvaluationReport};
use advdet_core::refnet::{Architecture, InputBox, ScalarHead, TinyNet};
use advdet_core::whitening::LayerWhitener;
use advdet_core::{AttackSpec, Combination, Matrix};
use rand::Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn c1_metric_oracles() -> Check {
    let start = Instant::now();
    let mut r = common::rng(11);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = r.random_range(2..=50);
        let coarse = r.random_bool(0.5);
        let labels: Vec<bool> = loop {
            let l: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
            if l.iter().any(|&v| v) && l.iter().any(|&v| !v) {
                break l;
            }
        };
        let scores: Vec<f64> = (0..n)
            .map(|_| if coarse { r.random_range(0..5) as f64 } else { r.random::<f64>() })
            .collect();
        let e1 = (auroc(&scores, &labels).unwrap() - common::brute_auroc(&scores, &labels)).abs();
        let e2 = (aupr(&scores, &labels).unwrap() - common::brute_aupr(&scores, &labels)).abs();
        worst = worst.max(e1).max(e2);
    }
    let t = start.elapsed();
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    ensure!(t < Duration::from_secs(5), "took {t:?}");
    Ok(format!("200 instances, max deviation {worst:.1e}, {:.2}s", t.as_secs_f64()))
}

fn c2_ocsvm() -> Check {
    let start = Instant::now();
    let mut r = common::rng(5);
    let (mut worst_dec, mut worst_kkt): (f64, f64) = (0.0, 0.0);
    for case in 0..100 {
        let n = r.random_range(4..=30);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]).collect();
        let nu = r.random_range(0.05..0.95);
        let gamma = r.random_range(0.1f64..3.0);
        let model = fit_ocsvm(&Matrix::from_rows(&pts).unwrap(), &OcsvmParams::new(nu, gamma)).unwrap();
        worst_kkt = worst_kkt.max(model.kkt_residual);
        let k = common::rbf_gram(&pts, gamma);
        let ub = 1.0 / (nu * n as f64);
        let a = common::ocsvm_qp_oracle(&k, ub, 1e-10);
        let g: Vec<f64> = k.iter().map(|row| row.iter().zip(&a).map(|(p, q)| p * q).sum()).collect();
        ensure!(common::kkt_gap(&a, &g, ub) <= 1e-10, "case {case}: oracle did not reach 1e-10");
        let (lo, hi) = common::rho_interval(&a, &g, ub, 1e-9);
        ensure!(model.rho >= lo - 1e-4 && model.rho <= hi + 1e-4, "case {case}: rho outside oracle interval");
        for (i, p) in pts.iter().enumerate() {
            worst_dec = worst_dec.max((model.score(p) - (g[i] - model.rho.clamp(lo, hi))).abs());
        }
    }
    ensure!(worst_dec <= 1e-4, "decision deviation {worst_dec:e}");
    ensure!(worst_kkt <= 1e-6, "KKT residual {worst_kkt:e}");

    let n = 200;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|i| vec![if i % 2 == 0 { 2.0 } else { -2.0 } + normal.sample(&mut r), normal.sample(&mut r)])
        .collect();
    let x = Matrix::from_rows(&pts).unwrap();
    for nu in [0.125, 0.25, 0.5] {
        let model = fit_ocsvm(&x, &OcsvmParams::new(nu, 0.5)).unwrap();
        let ub = model.upper_bound();
        let bounded = model.alphas.iter().filter(|&&a| a >= ub * (1.0 - 1e-9)).count() as f64 / n as f64;
        let svs = model.alphas.len() as f64 / n as f64;
        let slack = 2.0 / n as f64;
        ensure!(bounded <= nu + slack && svs >= nu - slack, "nu {nu}: bounded {bounded}, support {svs}");
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(60), "took {t:?}");
    Ok(format!(
        "decision dev {worst_dec:.1e}, max KKT {worst_kkt:.1e}, nu-property ok, {:.2}s",
        t.as_secs_f64()
    ))
}

fn c3_whitening() -> Check {
    let mut r = common::rng(23);
    let (mut worst_id, mut worst_cov): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let d = r.random_range(2..=8);
        let c = r.random_range(2..=4);
        let n = r.random_range(4 * d..=12 * d).max(3 * c);
        let mix = common::random_matrix(&mut common::rng(r.random()), d, d, 1.0);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut x = mix.matvec(&(0..d).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>());
                x[0] += 3.0 * (i % c) as f64;
                x
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let w = LayerWhitener::fit(&x, &labels, c).unwrap();
        let g = fit_gaussian(&x, &labels, c).unwrap();
        for _ in 0..5 {
            let h: Vec<f64> = (0..d).map(|_| r.random_range(-4.0..4.0)).collect();
            let class = r.random_range(0..c);
            let sq: f64 = w.whiten(&h, class).unwrap().iter().map(|v| v * v).sum();
            let m = maha_distance(&g, &h, class).unwrap();
            worst_id = worst_id.max((sq - m).abs() / m.max(1.0));
        }
        let z = w.whiten_rows(&x, &labels).unwrap();
        let cov = z.transpose().matmul(&z).unwrap();
        for a in 0..d {
            for b in 0..d {
                let want = if a == b { 1.0 } else { 0.0 };
                worst_cov = worst_cov.max((cov[(a, b)] / n as f64 - want).abs());
            }
        }
    }
    ensure!(worst_id <= 1e-8, "identity deviation {worst_id:e}");
    ensure!(worst_cov <= 1e-8, "covariance deviation {worst_cov:e}");
    Ok(format!("identity dev {worst_id:.1e}, covariance dev {worst_cov:.1e}"))
}

fn c4_lid() -> Check {
    for k in [3usize, 5, 9] {
        let mut rows = Vec::new();
        for i in 1..=k {
            rows.push(vec![(i as f64).exp(), 0.0, 0.0]);
        }
        for j in 0..5 {
            rows.push(vec![0.0, 0.0, 1e6 + j as f64]);
        }
        let lid = lid_score(&Matrix::from_rows(&rows).unwrap(), &[0.0; 3], k).unwrap();
        let want = 2.0 / (k as f64 - 1.0);
        ensure!((lid - want).abs() <= 1e-12, "k={k}: {lid} vs {want}");
    }
    let mut r = common::rng(3);
    let mut worst_scale: f64 = 0.0;
    for _ in 0..100 {
        let pts: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let q: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let s = r.random_range(0.01..100.0);
        let scaled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| v * s).collect()).collect();
        let sq: Vec<f64> = q.iter().map(|v| v * s).collect();
        let a = lid_score(&Matrix::from_rows(&pts).unwrap(), &q, 10).unwrap();
        let b = lid_score(&Matrix::from_rows(&scaled).unwrap(), &sq, 10).unwrap();
        worst_scale = worst_scale.max((a - b).abs() / a.abs().max(1.0));
    }
    ensure!(worst_scale <= 1e-10, "scale deviation {worst_scale:e}");
    let mut ball = Vec::new();
    while ball.len() < 2000 {
        let p: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            ball.push(p);
        }
    }
    let reference = Matrix::from_rows(&ball).unwrap();
    let queries: Vec<&Vec<f64>> = ball
        .iter()
        .filter(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.3)
        .take(50)
        .collect();
    let est = queries.iter().map(|q| lid_score(&reference, q, 100).unwrap()).sum::<f64>() / queries.len() as f64;
    ensure!((est - 3.0).abs() <= 0.45, "3-ball estimate {est}");
    Ok(format!("closed form exact, scale dev {worst_scale:.1e}, 3-ball estimate {est:.3}"))
}

fn c5_gradients() -> Check {
    let arch = Architecture {
        hidden: vec![10, 8, 6],
        channel_maps: vec![(1, 2)],
    };
    let net = TinyNet::init(5, 3, &arch, InputBox::uniform(5, -3.0, 3.0), 1).unwrap();
    let mut r = common::rng(2);
    let inputs: Vec<Vec<f64>> = (0..60).map(|_| (0..5).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let bundle = net.extract_features(&inputs).unwrap();
    let labels: Vec<usize> = (0..inputs.len()).map(|i| i % 3).collect();
    let models: Vec<_> = (0..net.n_hidden())
        .map(|l| fit_gaussian(bundle.layer(l), &labels, 3).unwrap())
        .collect();
    let check = |x: &[f64], head: ScalarHead<'_>| {
        let analytic = net.input_gradient(x, head).unwrap().gradient;
        let numeric = common::central_diff(|p| net.input_gradient(p, head).unwrap().value, x, 1e-5);
        common::rel_err(&analytic, &numeric)
    };
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    while probes < 50 {
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
        if common::kink_margin(&net, &x) <= 1e-3 {
            continue;
        }
        probes += 1;
        for t in 0..3 {
            worst = worst.max(check(&x, ScalarHead::CrossEntropy(t)));
            worst = worst.max(check(&x, ScalarHead::Logit(t)));
        }
        for (layer, model) in models.iter().enumerate() {
            for class in 0..3 {
                let head = MahaHead { model, class };
                worst = worst.max(check(&x, ScalarHead::Layer { layer, head: &head }));
            }
        }
    }
    let mut worst_lr: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(5..40);
        let f = r.random_range(1..6);
        let z = common::random_matrix(&mut r, n, f, 2.0);
        let y: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        let theta: Vec<f64> = (0..=f).map(|_| r.random_range(-1.5..1.5)).collect();
        let analytic = penalized_gradient(&z, &y, 0.1, &theta);
        let numeric = common::central_diff(|t| penalized_objective(&z, &y, 0.1, t), &theta, 1e-5);
        worst_lr = worst_lr.max(common::rel_err(&analytic, &numeric));
    }
    ensure!(worst <= 1e-5, "network head rel err {worst:e}");
    ensure!(worst_lr <= 1e-5, "logistic rel err {worst_lr:e}");
    Ok(format!("network heads {worst:.1e}, logistic {worst_lr:.1e} (50 probes each)"))
}

fn c6_attacks() -> Check {
    let arch = Architecture {
        hidden: vec![12, 8],
        channel_maps: Vec::new(),
    };
    let nets: Vec<TinyNet> = (0..10)
        .map(|s| TinyNet::init(6, 3, &arch, InputBox::uniform(6, -1.0, 1.0), s).unwrap())
        .collect();
    let mut r = common::rng(1);
    let example = |r: &mut rand_chacha::ChaCha8Rng| {
        Example::new((0..6).map(|_| r.random_range(-1.0..1.0)).collect(), r.random_range(0..3))
    };
    let mut worst_bim: f64 = 0.0;
    for net in &nets {
        for _ in 0..5 {
            let x = example(&mut r);
            let eps = r.random_range(0.01..0.5);
            let a = fgsm(net, &x, &AttackSpec::fgsm(eps)).unwrap();
            let b = bim(net, &x, &AttackSpec::bim(eps, eps, 1)).unwrap();
            for (u, v) in a.adversarial.iter().zip(&b.adversarial) {
                worst_bim = worst_bim.max((u - v).abs());
            }
        }
    }
    ensure!(worst_bim <= 1e-12, "bim/fgsm deviation {worst_bim:e}");

    let mut worst_df: f64 = 0.0;
    for _ in 0..50 {
        let d = r.random_range(2..10);
        let w = common::random_matrix(&mut r, 2, d, 1.0);
        let b = [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)];
        let net = common::linear_binary_net(&w, &b);
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let wd: Vec<f64> = w.row(1).iter().zip(w.row(0)).map(|(p, q)| p - q).collect();
        let f = wd.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>() + b[1] - b[0];
        let want = f.abs() / wd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let label = net.predict(&x).unwrap();
        let out = deepfool(&net, &Example::new(x.clone(), label), &AttackSpec::deepfool(0.0, 1)).unwrap();
        let moved = out.adversarial.iter().zip(&x).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        worst_df = worst_df.max((moved - want).abs());
    }
    ensure!(worst_df <= 1e-9, "deepfool margin deviation {worst_df:e}");

    for trial in 0..1000 {
        let net = &nets[trial % nets.len()];
        let x = example(&mut r);
        let eps = r.random_range(0.01..0.6);
        let spec = match trial % 4 {
            0 => AttackSpec::fgsm(eps),
            1 => AttackSpec::bim(eps, eps / 4.0, 6),
            2 => AttackSpec::deepfool(0.02, 20),
            _ => AttackSpec::cw(1.0, 0.0, 20, 0.05),
        };
        let out = run_attack(net, &x, &spec).unwrap();
        ensure!(net.input_box().contains(&out.adversarial), "trial {trial} left the box");
        if let Some(e) = spec.epsilon() {
            let linf = out.adversarial.iter().zip(&x.input).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            ensure!(linf <= e + 1e-12, "trial {trial}: L∞ {linf} > {e}");
        }
    }
    Ok(format!("bim/fgsm {worst_bim:.1e}, deepfool {worst_df:.1e}, 1000 box/ball trials"))
}

fn enad(report: &EvaluationReport, attack: &str) -> Option<f64> {
    report.attack(attack)?.detector("EnAD").map(|d| d.auroc)
}

fn c7_desk_known(report: &EvaluationReport, elapsed: Duration) -> Check {
    ensure!(elapsed < Duration::from_secs(300), "pipeline took {elapsed:?}");
    let acc = report.model.test_accuracy.unwrap_or(0.0);
    ensure!(acc >= 0.95, "test accuracy {acc:.3}");
    let fgsm = report.attack("fgsm").ok_or("no fgsm rows")?;
    ensure!(fgsm.sizes.success_rate >= 0.90, "FGSM success {:.3}", fgsm.sizes.success_rate);
    let want: Vec<String> = Combination::all().iter().map(Combination::name).collect();
    let mut parts = Vec::new();
    for a in &report.attacks {
        let got: Vec<String> = a.detectors.iter().map(|d| d.detector.clone()).collect();
        ensure!(got == want, "{}: detector rows {got:?}", a.attack);
        let e = enad(report, &a.attack).unwrap();
        let best = ["O", "M", "L"]
            .iter()
            .map(|n| a.detector(n).unwrap().auroc)
            .fold(0.0, f64::max);
        ensure!(e >= 0.90, "{}: EnAD AUROC {e:.4} < 0.90", a.attack);
        ensure!(e >= best - 0.02, "{}: EnAD {e:.4} below best stand-alone {best:.4} − 0.02", a.attack);
        parts.push(format!("{} EnAD {e:.4} (best single {best:.4})", a.attack));
    }
    Ok(format!(
        "accuracy {acc:.3}, FGSM success {:.3}, {}, {:.1}s",
        fgsm.sizes.success_rate,
        parts.join(", "),
        elapsed.as_secs_f64()
    ))
}

fn c8_unknown(known: &EvaluationReport, unknown: &EvaluationReport) -> Check {
    let mut parts = Vec::new();
    for name in ["bim", "deepfool"] {
        let e = enad(unknown, name).ok_or(format!("no {name} rows"))?;
        ensure!(e >= 0.70, "{name}: transferred EnAD {e:.4} < 0.70");
        let inherited = unknown.attack(name).unwrap().hyperparameters.inherited_from.as_deref();
        ensure!(inherited == Some("fgsm"), "{name}: inherited_from {inherited:?}");
        parts.push(format!("{name} EnAD {e:.4}"));
    }
    let (u, k) = (unknown.attack("fgsm").unwrap(), known.attack("fgsm").unwrap());
    ensure!(
        u.detectors == k.detectors && u.layer_auroc == k.layer_auroc && u.contingency == k.contingency,
        "fgsm rows differ between modes"
    );
    Ok(format!("{}, fgsm rows identical to known mode", parts.join(", ")))
}

fn c9_determinism(first: &str, cfg: &Config) -> Check {
    let second = run_pipeline(cfg).map_err(|e| e.to_string())?.report.to_json();
    ensure!(first.as_bytes() == second.as_bytes(), "report JSON differs between runs");
    Ok(format!("{} bytes identical", first.len()))
}

fn main() -> std::process::ExitCode {
    // Respect `cargo test <filter>` the way libtest would.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return std::process::ExitCode::SUCCESS;
    }
    let mut results: Vec<(u32, &str, Check, Duration)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let res = f();
        let t = start.elapsed();
        let (status, detail) = match &res {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        println!("criterion {n}: {status} {name} [{:.2}s] {detail}", t.as_secs_f64());
        results.push((n, name, res, t));
    };

    run(1, "metric oracles", &mut c1_metric_oracles);
    run(2, "OCSVM correctness", &mut c2_ocsvm);
    run(3, "whitening/Mahalanobis identity", &mut c3_whitening);
    run(4, "LID closed form", &mut c4_lid);
    run(5, "gradient checks", &mut c5_gradients);
    run(6, "attack oracles", &mut c6_attacks);

    let cfg = common::desk_config();
    assert_eq!(cfg.evaluation.mode, Mode::Known);
    let mut known = Err("not run".to_string());
    run(7, "desk-scale experiment", &mut || {
        let start = Instant::now();
        known = run_pipeline(&cfg).map(|o| o.report).map_err(|e| e.to_string());
        c7_desk_known(known.as_ref()?, start.elapsed())
    });

    let mut ucfg = cfg.clone();
    ucfg.evaluation.mode = Mode::Unknown;
    ucfg.evaluation.tuning_attack = "fgsm".into();
    run(8, "unknown-attack transfer", &mut || {
        let k = known.as_ref()?;
        let u = run_pipeline(&ucfg).map_err(|e| e.to_string())?.report;
        c8_unknown(k, &u)
    });
    run(9, "determinism", &mut || {
        c9_determinism(&known.as_ref()?.to_json(), &cfg)
    });

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        std::process::ExitCode::SUCCESS
    } else {
        eprintln!("failed criteria: {failed:?}");
        std::process::ExitCode::FAILURE
    }
}
