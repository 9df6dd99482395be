mod common;

use advdet_core::attacks::{bim, deepfool, fgsm, run_attack};
use advdet_core::data::Example;
use advdet_core::refnet::{Architecture, InputBox, TinyNet};
use advdet_core::AttackSpec;
use rand::Rng;

fn net(seed: u64) -> TinyNet {
    let arch = Architecture {
        hidden: vec![12, 8],
        channel_maps: Vec::new(),
    };
    TinyNet::init(6, 3, &arch, InputBox::uniform(6, -1.0, 1.0), seed).unwrap()
}

fn random_example(r: &mut impl Rng, dim: usize) -> Example {
    Example::new((0..dim).map(|_| r.random_range(-1.0..1.0)).collect(), r.random_range(0..3))
}

#[test]
fn one_step_bim_is_fgsm() {
    let mut r = common::rng(1);
    for s in 0..50 {
        let net = net(s);
        let x = random_example(&mut r, 6);
        let eps = r.random_range(0.01..0.5);
        let a = fgsm(&net, &x, &AttackSpec::fgsm(eps)).unwrap();
        let b = bim(&net, &x, &AttackSpec::bim(eps, eps, 1)).unwrap();
        for (u, v) in a.adversarial.iter().zip(&b.adversarial) {
            assert!((u - v).abs() <= 1e-12);
        }
    }
}

#[test]
fn deepfool_on_a_linear_binary_classifier_finds_the_margin() {
    let mut r = common::rng(2);
    for _ in 0..50 {
        let d = r.random_range(2..10);
        let w = common::random_matrix(&mut r, 2, d, 1.0);
        let b = [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)];
        let net = common::linear_binary_net(&w, &b);
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let wdiff: Vec<f64> = w.row(1).iter().zip(w.row(0)).map(|(p, q)| p - q).collect();
        let f = wdiff.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>() + b[1] - b[0];
        let want = f.abs() / wdiff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let label = net.predict(&x).unwrap();
        let out = deepfool(&net, &Example::new(x.clone(), label), &AttackSpec::deepfool(0.0, 1)).unwrap();
        let moved = out
            .adversarial
            .iter()
            .zip(&x)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        assert!((moved - want).abs() <= 1e-9, "{moved} vs {want}");
    }
}

#[test]
fn outputs_respect_box_and_epsilon_ball() {
    let mut r = common::rng(3);
    let nets: Vec<TinyNet> = (0..10).map(net).collect();
    for trial in 0..1000 {
        let net = &nets[trial % nets.len()];
        let x = random_example(&mut r, 6);
        let eps = r.random_range(0.01..0.6);
        let spec = match trial % 4 {
            0 => AttackSpec::fgsm(eps),
            1 => AttackSpec::bim(eps, eps / 4.0, 6),
            2 => AttackSpec::deepfool(0.02, 20),
            _ => AttackSpec::cw(1.0, 0.0, 20, 0.05),
        };
        let out = run_attack(net, &x, &spec).unwrap();
        assert!(net.input_box().contains(&out.adversarial), "trial {trial} left the box");
        if let Some(e) = spec.epsilon() {
            let linf = out
                .adversarial
                .iter()
                .zip(&x.input)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(linf <= e + 1e-12, "trial {trial}: {linf} > {e}");
        }
    }
}
