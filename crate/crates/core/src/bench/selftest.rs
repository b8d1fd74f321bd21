//! Quick oracle checks run by `stein-quad selftest`: closed forms against quadrature,
//! analytic derivatives against central differences, and sampling properties.

use rand::Rng;

use crate::baselines::{kme_matern12_gaussian, kme_rbf_gaussian, kme_rbf_truncated, RbfKernel};
use crate::goodwin::{solve_goodwin, solve_goodwin_sensitivities, GoodwinParams, OdeSolverConfig, RHO};
use crate::laplace::{BiasOnlyModel, LaplaceFit};
use crate::numerics::{integrate_piecewise, mean, seeded_rng, std_dev, std_normal_pdf, DenseMatrix};
use crate::steinnet::{loss_and_gradient, Activation, MlpArchitecture, SteinData, SteinNetwork};
use crate::targets::{sample, GaussianTarget, TruncatedGaussian1D};

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, worst: f64, tol: f64) -> SelfTestCheck {
    SelfTestCheck { name, passed: worst <= tol, detail: format!("worst {worst:.3e} (tolerance {tol:.0e})") }
}

/// ∫ g(y) N(y; μ, σ²) dy over [a, b] ∩ [μ − 40σ, μ + 40σ], split at `kinks`.
fn normal_quadrature(g: impl Fn(f64) -> f64, mu: f64, sigma: f64, a: f64, b: f64, kinks: &[f64]) -> f64 {
    let lo = a.max(mu - 40.0 * sigma);
    let hi = b.min(mu + 40.0 * sigma);
    integrate_piecewise(|y| g(y) * std_normal_pdf((y - mu) / sigma) / sigma, lo, hi, kinks, 400, 20)
}

fn embeddings() -> Vec<SelfTestCheck> {
    let mut rng = seeded_rng(101);
    let (mut rbf, mut trunc, mut matern) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let l: f64 = rng.random_range(0.2..3.0);
        let amp: f64 = rng.random_range(0.5..2.0);
        let mu: f64 = rng.random_range(-1.0..1.0);
        let sigma: f64 = rng.random_range(0.3..2.0);
        let x: f64 = rng.random_range(-3.0..3.0);
        let k = RbfKernel { lengthscale: l, amplitude: amp };
        let rbf_k = |y: f64| amp * (-(x - y).powi(2) / (2.0 * l * l)).exp();

        let pi = GaussianTarget::new(vec![mu], vec![sigma * sigma]).expect("valid");
        let oracle = normal_quadrature(rbf_k, mu, sigma, f64::NEG_INFINITY, f64::INFINITY, &[x]);
        rbf = rbf.max((kme_rbf_gaussian(&k, &pi, &[x]) - oracle).abs());

        let a = mu - rng.random_range(0.0..1.5) * sigma;
        let b = a + rng.random_range(0.5..3.0) * sigma;
        let t = TruncatedGaussian1D::new(mu, sigma, a, b).expect("valid");
        let mass = normal_quadrature(|_| 1.0, mu, sigma, a, b, &[]);
        let oracle = normal_quadrature(rbf_k, mu, sigma, a, b, &[x]) / mass;
        trunc = trunc.max((kme_rbf_truncated(&k, &t, x) - oracle).abs());

        let oracle = normal_quadrature(|y| (-(x - y).abs() / l).exp(), 0.0, 1.0, f64::NEG_INFINITY, f64::INFINITY, &[x]);
        matern = matern.max((kme_matern12_gaussian(l, x) - oracle).abs());
    }
    vec![check("kme_rbf_gaussian", rbf, 1e-9), check("kme_rbf_truncated", trunc, 1e-9), check("kme_matern12_gaussian", matern, 1e-9)]
}

fn gaussian_data(d: usize, n: usize, seed: u64) -> SteinData {
    let target = GaussianTarget::standard(d);
    let points = sample(&target, n, &mut seeded_rng(seed)).expect("Gaussian sampler");
    let f = points.row_iter().map(|x| x.iter().sum::<f64>().cos()).collect();
    SteinData::from_target(&target, points, f).expect("consistent shapes")
}

fn loss_gradient() -> SelfTestCheck {
    let arch = MlpArchitecture { in_dim: 2, hidden_width: 8, hidden_layers: 1, activation: Activation::Celu };
    let mut net = SteinNetwork::init(arch, &mut seeded_rng(5)).expect("valid architecture");
    net.theta_0 = 0.3;
    let data = gaussian_data(2, 16, 6);
    let lambda = 1e-3;
    let (_, grad) = loss_and_gradient(&net, &data, lambda).expect("finite loss");
    let base = net.params();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        let mut p = base.clone();
        p[k] = base[k] + h;
        net.set_params(&p);
        let up = loss_and_gradient(&net, &data, lambda).expect("finite loss").0;
        p[k] = base[k] - h;
        net.set_params(&p);
        let dn = loss_and_gradient(&net, &data, lambda).expect("finite loss").0;
        let fd = (up - dn) / (2.0 * h);
        worst = worst.max((fd - grad[k]).abs() / (fd.abs().max(grad[k].abs()) + 1e-4));
    }
    check("loss_gradient_fd", worst, 1e-5)
}

fn conjugate_posterior() -> SelfTestCheck {
    let mut rng = seeded_rng(7);
    let n = 50;
    let f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
    let data = SteinData::new(DenseMatrix::zeros(n, 1), f, DenseMatrix::zeros(n, 1)).expect("consistent shapes");
    let model = BiasOnlyModel::fit_map(&data, 0.0);
    let fit = LaplaceFit::new(&model, &data, 1).expect("bias-only model");
    let mut worst = 0.0f64;
    for (s, s0) in [(0.5, 2.0), (0.1, 0.3), (2.0, 10.0)] {
        let exact = 1.0 / (n as f64 / (s * s) + 1.0 / (s0 * s0));
        let got = fit.posterior(s, s0).expect("valid scales").theta0_var;
        worst = worst.max((got - exact).abs() / exact);
    }
    check("conjugate_theta0_variance", worst, 1e-12)
}

fn stein_zero_mean() -> SelfTestCheck {
    let mut net = SteinNetwork::init(MlpArchitecture::new(2), &mut seeded_rng(8)).expect("valid architecture");
    net.theta_0 = 0.7;
    let data = gaussian_data(2, 20_000, 9);
    let g = net.eval_batch(&data, 1).expect("finite network");
    let centred: Vec<f64> = g.iter().map(|v| v - net.theta_0).collect();
    let z = mean(&centred).abs() / (std_dev(&centred) / (centred.len() as f64).sqrt());
    SelfTestCheck { name: "stein_zero_mean", passed: z <= 5.0, detail: format!("|mean| = {z:.2} standard errors (limit 5)") }
}

fn goodwin_sensitivities() -> SelfTestCheck {
    let p = GoodwinParams { a1: 1.2, a2: 2.5, k1: 0.9, alpha: 0.55, rho: RHO };
    let cfg = OdeSolverConfig { rtol: 1e-11, atol: 1e-13, max_steps: 1_000_000 };
    let times = [3.0, 12.0];
    let arr = |p: &GoodwinParams| [p.a1, p.a2, p.k1, p.alpha];
    let from = |a: [f64; 4]| GoodwinParams { a1: a[0], a2: a[1], k1: a[2], alpha: a[3], rho: RHO };
    let worst = (|| -> Result<f64, crate::goodwin::GoodwinError> {
        let s = solve_goodwin_sensitivities(&p, &times, &cfg)?;
        let h = 1e-6;
        let mut worst = 0.0f64;
        for k in 0..4 {
            let (mut up, mut dn) = (arr(&p), arr(&p));
            up[k] += h;
            dn[k] -= h;
            let (u, d) = (solve_goodwin(&from(up), &times, &cfg)?, solve_goodwin(&from(dn), &times, &cfg)?);
            for i in 0..times.len() {
                for c in 0..2 {
                    let fd = (u[(i, c)] - d[(i, c)]) / (2.0 * h);
                    let an = s[(i, 2 + 2 * k + c)];
                    worst = worst.max((fd - an).abs() / an.abs().max(1e-2));
                }
            }
        }
        Ok(worst)
    })()
    .unwrap_or(f64::INFINITY);
    check("goodwin_sensitivities_fd", worst, 1e-5)
}

/// Runs every check; takes a few seconds.
pub fn selftest() -> Vec<SelfTestCheck> {
    let mut out = embeddings();
    out.push(loss_gradient());
    out.push(conjugate_posterior());
    out.push(stein_zero_mean());
    out.push(goodwin_sensitivities());
    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::selftest() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
