//! Losses and support weights against plain-loop reference implementations,
//! plus finite-difference gradient checks.

mod common;

use candle_core::{Device, Var};
use common::*;
use d24fad::l2w::{compute_weights, ssd_l2w_loss_per_item, L2WParams, L2WVariant};
use d24fad::losses::{ssd_loss_per_item, tsd_loss_per_item};
use d24fad::nn::Precision;
use d24fad::pyramid::Source;
use d24fad::student::SupportFeatureBank;
use rand::Rng;

const VARIANTS: [L2WVariant; 4] = [
    L2WVariant::ScaledDot,
    L2WVariant::Gaussian,
    L2WVariant::EmbeddedGaussian,
    L2WVariant::Concatenation,
];

fn bank(levels: &[Arr4]) -> SupportFeatureBank {
    let k = levels[0].n;
    SupportFeatureBank::new(pyramid(levels, Source::Student), (0..k).map(|i| i.to_string()).collect()).unwrap()
}

#[test]
fn losses_match_loop_oracles_on_random_pyramids() {
    let mut r = rng(11);
    for case in 0..120 {
        let shapes = random_shapes(&mut r);
        let n = r.random_range(1..=3);
        let k = r.random_range(1..=4);
        let t = random_levels(&mut r, n, &shapes);
        let q = random_levels(&mut r, n, &shapes);
        let s = random_levels(&mut r, k, &shapes);
        let tp = pyramid(&t, Source::Teacher);
        let qp = pyramid(&q, Source::Student);
        let b = bank(&s);

        let tsd = vec1(&tsd_loss_per_item(&tp, &qp, EPS).unwrap());
        let ssd = vec1(&ssd_loss_per_item(&b, &qp, EPS, false).unwrap());
        let variant = VARIANTS[case % VARIANTS.len()];
        let head = L2WParams::new(variant, &shapes, case as u64, 0.3, Precision::F64, &Device::Cpu).unwrap();
        let arrays = head_arrays(&head);
        let l2w = vec1(&ssd_l2w_loss_per_item(&head, &qp, &b, EPS, false).unwrap());
        let weights = compute_weights(&head, &qp, &b).unwrap();
        for i in 0..n {
            assert!((tsd[i] - oracle_tsd_item(&t, &q, i)).abs() < 1e-10, "tsd case {case}");
            assert!((ssd[i] - oracle_ssd_item(&s, &q, i)).abs() < 1e-10, "ssd case {case}");
            let want = oracle_ssd_l2w_item(&arrays, &s, &q, i);
            assert!((l2w[i] - want).abs() < 1e-10, "ssd_l2w {variant:?} case {case}: {} vs {want}", l2w[i]);
            for (lvl, w) in weights.for_query(i).unwrap().iter().enumerate() {
                let ow = oracle_weights(&arrays, lvl, &s[lvl], &q[lvl], i);
                for (a, b) in w.iter().zip(&ow) {
                    assert!((a - b).abs() < 1e-10, "weights {variant:?} case {case}");
                }
            }
        }
    }
}

/// Central differences of `f` w.r.t. sampled coordinates of `var`, compared
/// with the backpropagated gradient.
fn check_grad(var: &Var, analytic: &[f64], f: &dyn Fn() -> f64, picks: &[usize], label: &str) {
    let h = 1e-5;
    let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let shape = var.as_tensor().shape().clone();
    for &i in picks {
        let mut plus = base.clone();
        plus[i] += h;
        var.set(&candle_core::Tensor::from_vec(plus, shape.clone(), &Device::Cpu).unwrap()).unwrap();
        let fp = f();
        let mut minus = base.clone();
        minus[i] -= h;
        var.set(&candle_core::Tensor::from_vec(minus, shape.clone(), &Device::Cpu).unwrap()).unwrap();
        let fm = f();
        var.set(&candle_core::Tensor::from_vec(base.clone(), shape.clone(), &Device::Cpu).unwrap()).unwrap();
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
        assert!(rel < 1e-4, "{label}[{i}]: analytic {} numeric {numeric} rel {rel}", analytic[i]);
    }
}

fn picks(r: &mut rand_chacha::ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..len)).collect()
}

fn grad_of(loss: &candle_core::Tensor, var: &Var) -> Vec<f64> {
    let grads = loss.backward().unwrap();
    grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

#[test]
fn gradients_match_central_differences() {
    let mut r = rng(5);
    let shapes = vec![(4, 3, 3), (5, 2, 2)];
    let (n, k) = (2, 3);
    let t = random_levels(&mut r, n, &shapes);
    let q = random_levels(&mut r, n, &shapes);
    let s = random_levels(&mut r, k, &shapes);
    let tp = pyramid(&t, Source::Teacher);
    let (qp, qvars) = var_pyramid(&q, Source::Student);
    let (sp, svars) = var_pyramid(&s, Source::Student);
    let b = SupportFeatureBank::new(sp, (0..k).map(|i| i.to_string()).collect()).unwrap();

    let tsd = || scalar(&tsd_loss_per_item(&tp, &qp, EPS).unwrap().mean_all().unwrap());
    let ssd = || scalar(&ssd_loss_per_item(&b, &qp, EPS, false).unwrap().mean_all().unwrap());
    for (lvl, var) in qvars.iter().enumerate() {
        let len = var.as_tensor().elem_count();
        let g = grad_of(&tsd_loss_per_item(&tp, &qp, EPS).unwrap().mean_all().unwrap(), var);
        check_grad(var, &g, &tsd, &picks(&mut r, len, 20), &format!("tsd/q{lvl}"));
        let g = grad_of(&ssd_loss_per_item(&b, &qp, EPS, false).unwrap().mean_all().unwrap(), var);
        check_grad(var, &g, &ssd, &picks(&mut r, len, 20), &format!("ssd/q{lvl}"));
    }
    for (lvl, var) in svars.iter().enumerate() {
        let len = var.as_tensor().elem_count();
        let g = grad_of(&ssd_loss_per_item(&b, &qp, EPS, false).unwrap().mean_all().unwrap(), var);
        check_grad(var, &g, &ssd, &picks(&mut r, len, 20), &format!("ssd/s{lvl}"));
    }

    for variant in VARIANTS {
        let head = L2WParams::new(variant, &shapes, 3, 0.3, Precision::F64, &Device::Cpu).unwrap();
        let loss = || ssd_l2w_loss_per_item(&head, &qp, &b, EPS, false).unwrap().mean_all().unwrap();
        let f = || scalar(&loss());
        for (lvl, var) in qvars.iter().chain(&svars).enumerate() {
            let len = var.as_tensor().elem_count();
            check_grad(var, &grad_of(&loss(), var), &f, &picks(&mut r, len, 20), &format!("{variant:?}/feat{lvl}"));
        }
        for (name, var) in head.params().iter() {
            let len = var.as_tensor().elem_count();
            check_grad(var, &grad_of(&loss(), var), &f, &picks(&mut r, len, 20), &format!("{variant:?}/{name}"));
        }
    }
}
