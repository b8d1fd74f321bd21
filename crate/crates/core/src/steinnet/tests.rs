use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::numerics::{mean, seeded_rng, std_dev};
use crate::targets::{GaussianTarget, TruncatedGaussian1D};

fn random_net(d: usize, seed: u64) -> SteinNetwork {
    let mut rng = seeded_rng(seed);
    let mut net = SteinNetwork::init(MlpArchitecture::new(d), &mut rng).unwrap();
    // non-zero biases so every parameter path is exercised
    let mut off = 0;
    for (fi, fo) in net.arch.layer_dims() {
        for k in 0..fo {
            net.theta_u[off + fi * fo + k] = rng.random_range(-0.5..0.5);
        }
        off += fi * fo + fo;
    }
    net.theta_0 = rng.random_range(-1.0..1.0);
    net
}

fn gaussian_data(d: usize, n: usize, seed: u64) -> SteinData {
    let mut rng = seeded_rng(seed);
    let target = GaussianTarget::standard(d);
    let points = crate::targets::sample(&target, n, &mut rng).unwrap();
    let f = points.row_iter().map(|x| (x.iter().sum::<f64>()).sin() + 0.3).collect();
    SteinData::from_target(&target, points, f).unwrap()
}

fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

fn all_m_choices(d: usize) -> Vec<MChoice> {
    vec![
        MChoice::Identity,
        MChoice::ScaledIdentity(2.0),
        MChoice::InverseSquareNorm,
        MChoice::InverseNorm,
        MChoice::DensityScaled,
        MChoice::DiagX,
        MChoice::ScaledDiagonal((0..d).map(|k| 1.0 + k as f64).collect()),
    ]
}

#[test]
fn parameter_count_default_arch() {
    assert_eq!(MlpArchitecture::new(1).n_params(), 2209);
    assert_eq!(MlpArchitecture::new(1).layer_dims().len(), 4);
    assert_eq!(MlpArchitecture::affine(3).n_params(), 12);
}

#[test]
fn init_is_seeded_and_theta0_from_mean() {
    let a = SteinNetwork::init(MlpArchitecture::new(2), &mut seeded_rng(7)).unwrap();
    let b = SteinNetwork::init(MlpArchitecture::new(2), &mut seeded_rng(7)).unwrap();
    assert_eq!(a, b);
    let bound = 1.0 / 2f64.sqrt();
    assert!(a.theta_u[..64].iter().all(|w| w.abs() <= bound));
    assert!(a.theta_u[64..96].iter().all(|&b| b == 0.0));
    let c = a.with_theta0_from(&[1.0, 2.0, 3.0]);
    assert_eq!(c.theta_0, 2.0);
}

#[test]
fn affine_fixture_jacobian_is_weight_matrix() {
    let w = vec![1.0, -2.0, 0.5, 3.0];
    let b = vec![0.25, -0.75];
    let mut theta = w.clone();
    theta.extend(&b);
    let net = SteinNetwork::from_params(MlpArchitecture::affine(2), theta, 0.0).unwrap();
    let (u, j) = net.forward_with_input_jacobian(&[0.3, -1.1]);
    assert_eq!(j.as_slice(), &w[..]);
    assert!((u[0] - (0.3 - 2.0 * -1.1 + 0.25)).abs() < 1e-15);
    assert!((u[1] - (0.5 * 0.3 + 3.0 * -1.1 - 0.75)).abs() < 1e-15);
}

#[test]
fn zero_weights_give_bias_output() {
    let mut net = random_net(3, 1);
    let mut off = 0;
    let dims = net.arch.layer_dims();
    for (k, &(fi, fo)) in dims.iter().enumerate() {
        net.theta_u[off..off + fi * fo].fill(0.0);
        if k + 1 < dims.len() {
            net.theta_u[off + fi * fo..off + fi * fo + fo].fill(0.0);
        }
        off += fi * fo + fo;
    }
    let last_bias = net.theta_u[net.theta_u.len() - 3..].to_vec();
    let (u, j) = net.forward_with_input_jacobian(&[0.1, 2.0, -3.0]);
    assert_eq!(u, last_bias);
    assert!(j.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn input_jacobian_matches_finite_differences() {
    for act in Activation::ALL {
        let mut net = random_net(2, 11);
        net.arch.activation = act;
        let x = [0.4, -0.7];
        let (_, j) = net.forward_with_input_jacobian(&x);
        let h = 1e-5;
        for col in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[col] += h;
            xm[col] -= h;
            let (up, _) = net.forward_with_input_jacobian(&xp);
            let (um, _) = net.forward_with_input_jacobian(&xm);
            for row in 0..2 {
                let fd = (up[row] - um[row]) / (2.0 * h);
                assert!(close(fd, j[(row, col)], 1e-6, 1e-9), "{act} J[{row},{col}] {fd} vs {}", j[(row, col)]);
            }
        }
    }
}

#[test]
fn constant_u_gives_score_term_only() {
    let c = [0.7, -1.3];
    let net = SteinNetwork::from_params(MlpArchitecture::affine(2), vec![0.0, 0.0, 0.0, 0.0, c[0], c[1]], 0.4).unwrap();
    let x = [1.5, 0.2];
    let score = [-x[0], -x[1]];
    let rec = net.stein_forward(&x, &score).unwrap();
    assert!((rec.value - (-x[0] * c[0] - x[1] * c[1] + 0.4)).abs() < 1e-15);
    assert_eq!(rec.div_term, 0.0);
    assert_eq!(net.stein_forward(&[0.0, 0.0], &[0.0, 0.0]).unwrap().value, 0.4);
}

#[test]
fn zero_u_gives_theta0_everywhere() {
    let net = SteinNetwork::from_params(MlpArchitecture::affine(3), vec![0.0; 12], -2.5).unwrap();
    let mut rng = seeded_rng(2);
    for _ in 0..20 {
        let x: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let s: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(net.stein_forward(&x, &s).unwrap().value, -2.5);
    }
}

#[test]
fn scaled_identity_divides_both_terms() {
    let net = random_net(2, 5);
    let scaled = net.clone().with_m(MChoice::ScaledIdentity(4.0));
    let x = [0.3, 1.2];
    let s = [-0.3, -1.2];
    let a = net.stein_forward(&x, &s).unwrap();
    let b = scaled.stein_forward(&x, &s).unwrap();
    assert!((b.score_term - a.score_term / 4.0).abs() < 1e-15);
    assert!((b.div_term - a.div_term / 4.0).abs() < 1e-15);
    assert_eq!(a.u, b.u);
}

#[test]
fn record_decomposes_value() {
    for m in all_m_choices(2) {
        let net = random_net(2, 9).with_m(m);
        let x = [0.5, -0.25];
        let s = [-0.5, 0.25];
        let logp = GaussianTarget::standard(2).log_density_unnorm(&x).unwrap();
        let r = net.stein_forward_with_density(&x, &s, logp);
        assert!((r.value - (r.score_term + r.div_term + net.theta_0)).abs() < 1e-14);
    }
}

#[test]
fn density_scaled_requires_density() {
    let net = random_net(1, 3).with_m(MChoice::DensityScaled);
    assert!(matches!(net.stein_forward(&[0.0], &[0.0]), Err(SteinError::DensityRequired)));
    let data = SteinData::new(DenseMatrix::zeros(2, 1), vec![0.0, 0.0], DenseMatrix::zeros(2, 1)).unwrap();
    assert!(matches!(loss_and_gradient(&net, &data, 0.0), Err(SteinError::DensityRequired)));
}

#[test]
fn boundary_wrapper_vanishes_on_faces() {
    let target = TruncatedGaussian1D::new(0.3, 0.5, 0.0, 1.0).unwrap();
    let net = random_net(1, 4).with_boundary(vec![0.0], vec![1.0]);
    for x in [0.0, 1.0] {
        let (u, _) = net.forward_with_input_jacobian(&[x]);
        let mut grad = [0.0];
        let delta = net.boundary.as_ref().unwrap().eval(&[x], &mut grad);
        assert_eq!(delta, 0.0);
        let density = (target.log_density_unnorm(&[0.5]).unwrap()).exp();
        assert_eq!(density * u[0] * delta, 0.0);
    }
    // approach from inside: the wrapped output shrinks linearly
    let mut g = [0.0];
    let small = net.boundary.as_ref().unwrap().eval(&[1e-9], &mut g);
    assert!(small > 0.0 && small < 2e-9);
}

#[test]
fn boundary_gradient_is_exact_in_several_dims() {
    let b = Boundary { lower: vec![0.0, f64::NEG_INFINITY, -1.0], upper: vec![2.0, 1.0, f64::INFINITY] };
    let x = [0.5, -0.5, 0.0];
    let mut g = [0.0; 3];
    let v = b.eval(&x, &mut g);
    assert!((v - (0.5 * 1.5) * 1.5 * 1.0).abs() < 1e-15);
    let h = 1e-6;
    for k in 0..3 {
        let mut xp = x;
        let mut xm = x;
        xp[k] += h;
        xm[k] -= h;
        let mut tmp = [0.0; 3];
        let fd = (b.eval(&xp, &mut tmp) - b.eval(&xm, &mut tmp)) / (2.0 * h);
        assert!((fd - g[k]).abs() < 1e-8);
    }
    // gradient on a face where the product vanishes
    let mut g0 = [0.0; 3];
    assert_eq!(b.eval(&[0.0, -0.5, 0.0], &mut g0), 0.0);
    assert!((g0[0] - 2.0 * 1.5).abs() < 1e-15);
}

#[test]
fn perfect_fit_has_zero_loss() {
    let net = SteinNetwork::from_params(MlpArchitecture::affine(1), vec![0.0, 0.0], 1.7).unwrap();
    let data = SteinData::new(DenseMatrix::from_rows(&[vec![0.1], vec![-0.4]]), vec![1.7, 1.7], DenseMatrix::from_rows(&[vec![-0.1], vec![0.4]])).unwrap();
    let (l, g) = loss_and_gradient(&net, &data, 0.0).unwrap();
    assert_eq!(l, 0.0);
    assert_eq!(g[0], 0.0);
}

#[test]
fn bias_only_quadratic() {
    for n in [1, 7, 300] {
        let net = SteinNetwork::from_params(MlpArchitecture::affine(2), vec![0.0; 6], 0.0).unwrap();
        let data = SteinData::new(DenseMatrix::zeros(n, 2), vec![1.0; n], DenseMatrix::zeros(n, 2)).unwrap();
        let (l, g) = loss_and_gradient(&net, &data, 0.0).unwrap();
        assert!((l - 1.0).abs() < 1e-14);
        assert!((g[0] + 2.0).abs() < 1e-14);
    }
}

fn check_loss_gradient(net: &SteinNetwork, data: &SteinData, cfg: &LossConfig) {
    let (_, grad) = net.loss_and_gradient_with(data, cfg).unwrap();
    let p0 = net.params();
    let mut work = net.clone();
    let h = 1e-5;
    for k in 0..p0.len() {
        let mut p = p0.clone();
        p[k] = p0[k] + h;
        work.set_params(&p);
        let lp = work.loss_and_gradient_with(data, cfg).unwrap().0;
        p[k] = p0[k] - h;
        work.set_params(&p);
        let lm = work.loss_and_gradient_with(data, cfg).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        assert!(close(fd, grad[k], 1e-5, 1e-9), "{} coordinate {k}: fd {fd} vs {}", net.m_choice.name(), grad[k]);
    }
}

#[test]
fn loss_gradient_matches_finite_differences_every_coordinate() {
    let data = gaussian_data(2, 16, 21);
    let net = random_net(2, 22);
    check_loss_gradient(&net, &data, &LossConfig { lambda: 1e-3, penalize_theta0: false, workers: 1 });
    check_loss_gradient(&net, &data, &LossConfig { lambda: 1e-3, penalize_theta0: true, workers: 1 });
}

#[test]
fn loss_gradient_all_m_and_activations() {
    let data = gaussian_data(2, 16, 31);
    let small = MlpArchitecture { in_dim: 2, hidden_width: 5, hidden_layers: 1, activation: Activation::Celu };
    for act in Activation::ALL {
        for m in all_m_choices(2) {
            let mut rng = seeded_rng(40);
            let mut net = SteinNetwork::init(MlpArchitecture { activation: act, ..small }, &mut rng).unwrap().with_m(m);
            net.theta_0 = 0.2;
            check_loss_gradient(&net, &data, &LossConfig { lambda: 0.0, penalize_theta0: false, workers: 1 });
        }
    }
}

#[test]
fn loss_gradient_with_boundary() {
    let target = TruncatedGaussian1D::new(0.2, 0.7, -1.0, 1.5).unwrap();
    let mut rng = seeded_rng(50);
    let points = crate::targets::sample(&target, 16, &mut rng).unwrap();
    let f = points.row_iter().map(|x| x[0].exp()).collect();
    let data = SteinData::from_target(&target, points, f).unwrap();
    let net = random_net(1, 51).with_boundary(vec![-1.0], vec![1.5]);
    check_loss_gradient(&net, &data, &LossConfig { lambda: 0.0, penalize_theta0: false, workers: 1 });
}

#[test]
fn theta_jacobian_matches_finite_differences() {
    let net = random_net(2, 60);
    let x = [0.8, -0.3];
    let s = [-0.8, 0.3];
    let jac = net.g_jacobian_wrt_theta(&x, &s).unwrap();
    assert_eq!(jac[0], 1.0);
    let p0 = net.params();
    let mut work = net.clone();
    let h = 1e-5;
    for k in 0..p0.len() {
        let mut p = p0.clone();
        p[k] += h;
        work.set_params(&p);
        let gp = work.stein_forward(&x, &s).unwrap().value;
        p[k] -= 2.0 * h;
        work.set_params(&p);
        let gm = work.stein_forward(&x, &s).unwrap().value;
        let fd = (gp - gm) / (2.0 * h);
        assert!(close(fd, jac[k], 1e-5, 1e-9), "coordinate {k}: {fd} vs {}", jac[k]);
    }
}

#[test]
fn zero_weight_net_jacobian_only_last_bias() {
    let mut net = random_net(2, 70);
    net.theta_u.fill(0.0);
    let x = [0.5, 1.5];
    let s = [-0.5, -1.5];
    let jac = net.g_jacobian_wrt_theta(&x, &s).unwrap();
    let p = jac.len();
    // last-layer bias entries equal α_i = s_i for the identity m
    assert!((jac[p - 2] - s[0]).abs() < 1e-15 && (jac[p - 1] - s[1]).abs() < 1e-15);
    assert!(jac[1..p - 2].iter().all(|&v| v == 0.0));
}

#[test]
fn batched_paths_agree_with_pointwise() {
    let data = gaussian_data(3, 600, 80);
    let net = random_net(3, 81).with_m(MChoice::InverseNorm);
    let values = net.eval_batch(&data, 1).unwrap();
    let jac = net.theta_jacobian(&data, 2).unwrap();
    for i in [0, 255, 256, 599] {
        let r = net.stein_forward(data.points.row(i), data.scores.row(i)).unwrap();
        assert!((r.value - values[i]).abs() < 1e-12);
        let row = net.g_jacobian_wrt_theta(data.points.row(i), data.scores.row(i)).unwrap();
        assert_eq!(row.as_slice(), jac.row(i));
    }
}

#[test]
fn results_independent_of_worker_count() {
    let data = gaussian_data(2, 1500, 90);
    let net = random_net(2, 91);
    let cfg1 = LossConfig { workers: 1, ..LossConfig::default() };
    let cfg3 = LossConfig { workers: 3, ..LossConfig::default() };
    let (l1, g1) = net.loss_and_gradient_with(&data, &cfg1).unwrap();
    let (l3, g3) = net.loss_and_gradient_with(&data, &cfg3).unwrap();
    assert_eq!(l1.to_bits(), l3.to_bits());
    assert!(g1.iter().zip(&g3).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn non_finite_scores_are_reported() {
    let net = random_net(1, 2);
    let data = SteinData::new(DenseMatrix::from_rows(&[vec![0.0]]), vec![1.0], DenseMatrix::from_rows(&[vec![f64::INFINITY]])).unwrap();
    assert!(matches!(loss_and_gradient(&net, &data, 0.0), Err(SteinError::NonFiniteLoss)));
}

/// Under π = N(0, I), E[g − θ0] = 0 for every network and every m.
#[test]
fn stein_zero_mean_property() {
    let n = 100_000;
    for d in [1usize, 2, 5] {
        let data = gaussian_data(d, n, 100 + d as u64);
        let choices = all_m_choices(d);
        for k in 0..10u64 {
            let m = choices[k as usize % choices.len()].clone();
            let net = random_net(d, 1000 * d as u64 + k).with_m(m);
            let vals: Vec<f64> = net.eval_batch(&data, 1).unwrap().iter().map(|g| g - net.theta_0).collect();
            let mu = mean(&vals);
            let bound = 5.0 * std_dev(&vals) / (n as f64).sqrt();
            assert!(mu.abs() <= bound, "d={d} net {k} ({}): mean {mu} bound {bound}", net.m_choice.name());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// S_m is linear in u: evaluate on affine fixtures u₁, u₂ and their sum.
    #[test]
    fn stein_operator_is_linear(
        w1 in prop::collection::vec(-2.0f64..2.0, 6),
        w2 in prop::collection::vec(-2.0f64..2.0, 6),
        x in prop::collection::vec(-3.0f64..3.0, 2),
        m_idx in 0usize..7,
    ) {
        let m = all_m_choices(2)[m_idx].clone();
        let s: Vec<f64> = x.iter().map(|v| -v).collect();
        let logp = GaussianTarget::standard(2).log_density_unnorm(&x).unwrap();
        let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let eval = |theta: Vec<f64>| {
            SteinNetwork::from_params(MlpArchitecture::affine(2), theta, 0.0)
                .unwrap()
                .with_m(m.clone())
                .stein_forward_with_density(&x, &s, logp)
                .value
        };
        let (a, b, c) = (eval(w1.clone()), eval(w2.clone()), eval(sum));
        prop_assert!((c - (a + b)).abs() <= 1e-12 * (1.0 + a.abs() + b.abs()));
    }
}
