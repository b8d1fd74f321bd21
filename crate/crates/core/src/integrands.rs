//! Test integrands: the Genz family composed with the standard-normal CDF, coordinate
//! projections for posterior means, and user closures.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{gauss_legendre, integrate_piecewise, std_normal_cdf, RandomStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrandError {
    #[error("no deterministic reference for {family} in dimension {dim} (limit {limit})")]
    DimensionTooLarge { family: GenzFamily, dim: usize, limit: usize },
    #[error("invalid Genz parameters: {0}")]
    InvalidParameters(String),
    #[error("unknown Genz family '{0}'")]
    UnknownFamily(String),
}

/// A scalar integrand on ℝ^d.
#[derive(Clone)]
pub struct Integrand {
    pub dim: usize,
    pub name: String,
    pub true_value: Option<f64>,
    eval: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl Integrand {
    pub fn new<F>(dim: usize, name: impl Into<String>, true_value: Option<f64>, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self { dim, name: name.into(), true_value, eval: Arc::new(f) }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    /// Evaluates every row of an `n × d` point matrix.
    pub fn eval_rows(&self, points: &crate::numerics::DenseMatrix) -> Vec<f64> {
        points.row_iter().map(|r| self.eval(r)).collect()
    }
}

impl fmt::Debug for Integrand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Integrand").field("dim", &self.dim).field("name", &self.name).field("true_value", &self.true_value).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenzFamily {
    Continuous,
    CornerPeak,
    Discontinuous,
    GaussianPeak,
    ProductPeak,
    Oscillatory,
}

impl GenzFamily {
    pub const ALL: [GenzFamily; 6] = [
        GenzFamily::Continuous,
        GenzFamily::Discontinuous,
        GenzFamily::GaussianPeak,
        GenzFamily::CornerPeak,
        GenzFamily::Oscillatory,
        GenzFamily::ProductPeak,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            GenzFamily::Continuous => "continuous",
            GenzFamily::CornerPeak => "corner_peak",
            GenzFamily::Discontinuous => "discontinuous",
            GenzFamily::GaussianPeak => "gaussian_peak",
            GenzFamily::ProductPeak => "product_peak",
            GenzFamily::Oscillatory => "oscillatory",
        }
    }

    pub fn is_separable(&self) -> bool {
        !matches!(self, GenzFamily::CornerPeak | GenzFamily::Oscillatory)
    }
}

impl fmt::Display for GenzFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GenzFamily {
    type Err = IntegrandError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "continuous" => GenzFamily::Continuous,
            "corner_peak" | "corner" | "cornerpeak" => GenzFamily::CornerPeak,
            "discontinuous" => GenzFamily::Discontinuous,
            "gaussian_peak" | "gaussian" | "gaussianpeak" => GenzFamily::GaussianPeak,
            "product_peak" | "product" | "productpeak" => GenzFamily::ProductPeak,
            "oscillatory" => GenzFamily::Oscillatory,
            _ => return Err(IntegrandError::UnknownFamily(s.to_string())),
        })
    }
}

/// Location parameter: scalar for the oscillatory family, per-coordinate otherwise.
#[derive(Debug, Clone, PartialEq)]
pub enum GenzShift {
    Scalar(f64),
    PerCoordinate(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenzSpec {
    pub family: GenzFamily,
    pub dim: usize,
    pub a: Vec<f64>,
    pub u: GenzShift,
}

impl GenzSpec {
    /// Default parameters of each family.
    pub fn new(family: GenzFamily, dim: usize) -> Self {
        let (a, u) = match family {
            GenzFamily::Continuous => (1.3, Some(0.55)),
            GenzFamily::CornerPeak => (5.0, None),
            GenzFamily::Discontinuous | GenzFamily::GaussianPeak | GenzFamily::ProductPeak => (5.0, Some(0.5)),
            GenzFamily::Oscillatory => (5.0, None),
        };
        let u = match (family, u) {
            (GenzFamily::Oscillatory, _) => GenzShift::Scalar(0.5),
            (_, Some(u)) => GenzShift::PerCoordinate(vec![u; dim]),
            (_, None) => GenzShift::PerCoordinate(vec![]),
        };
        Self { family, dim, a: vec![a; dim], u }
    }

    pub fn validate(&self) -> Result<(), IntegrandError> {
        if self.dim == 0 || self.a.len() != self.dim {
            return Err(IntegrandError::InvalidParameters("a must have one entry per dimension".into()));
        }
        match (&self.u, self.family) {
            (GenzShift::Scalar(_), GenzFamily::Oscillatory) => Ok(()),
            (GenzShift::PerCoordinate(u), GenzFamily::CornerPeak) if u.is_empty() => Ok(()),
            (GenzShift::PerCoordinate(u), f) if f != GenzFamily::Oscillatory && f != GenzFamily::CornerPeak && u.len() == self.dim => Ok(()),
            _ => Err(IntegrandError::InvalidParameters(format!("shift parameter does not fit the {} family", self.family))),
        }
    }

    fn u_at(&self, k: usize) -> f64 {
        match &self.u {
            GenzShift::Scalar(u) => *u,
            GenzShift::PerCoordinate(v) => v.get(k).copied().unwrap_or(0.0),
        }
    }

    /// The Genz formula on the unit cube, before the CDF transform.
    pub fn eval_unit(&self, c: &[f64]) -> f64 {
        let d = self.dim;
        match self.family {
            GenzFamily::Continuous => (-(0..d).map(|k| self.a[k] * (c[k] - self.u_at(k)).abs()).sum::<f64>()).exp(),
            GenzFamily::CornerPeak => (1.0 + (0..d).map(|k| self.a[k] * c[k]).sum::<f64>()).powi(-(d as i32 + 1)),
            GenzFamily::Discontinuous => {
                if (0..d).any(|k| c[k] > self.u_at(k)) {
                    0.0
                } else {
                    (0..d).map(|k| self.a[k] * c[k]).sum::<f64>().exp()
                }
            }
            GenzFamily::GaussianPeak => {
                (-(0..d).map(|k| self.a[k] * self.a[k] * (c[k] - self.u_at(k)).powi(2)).sum::<f64>()).exp()
            }
            GenzFamily::ProductPeak => {
                (0..d).map(|k| 1.0 / (self.a[k].powi(-2) + (c[k] - self.u_at(k)).powi(2))).product()
            }
            GenzFamily::Oscillatory => (2.0 * PI * self.u_at(0) + (0..d).map(|k| self.a[k] * c[k]).sum::<f64>()).cos(),
        }
    }

    fn key(&self) -> String {
        format!("{:?}|{}|{:?}|{:?}", self.family, self.dim, self.a, self.u)
    }
}

/// f(Φ(x)) with Φ applied elementwise.
pub fn genz_eval(spec: &GenzSpec, x: &[f64]) -> f64 {
    let c: Vec<f64> = x.iter().map(|&v| std_normal_cdf(v)).collect();
    spec.eval_unit(&c)
}

pub fn genz_integrand(spec: &GenzSpec) -> Result<Integrand, IntegrandError> {
    spec.validate()?;
    let reference = genz_reference(spec).ok();
    let s = spec.clone();
    Ok(Integrand::new(spec.dim, format!("genz_{}", spec.family), reference, move |x| genz_eval(&s, x)))
}

/// Largest dimension for which the tensor-product reference is computed.
pub const TENSOR_REFERENCE_MAX_DIM: usize = 3;

/// Under x ~ N(0, I), c = Φ(x) is uniform on the cube, so every reference is an
/// integral over [0, 1]^d. One-dimensional factors use composite Gauss–Legendre with panel
/// edges at the kinks and jumps of the family.
pub fn genz_reference(spec: &GenzSpec) -> Result<f64, IntegrandError> {
    spec.validate()?;
    static CACHE: OnceLock<Mutex<HashMap<String, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = spec.key();
    if let Some(v) = cache.lock().expect("reference cache poisoned").get(&key) {
        return Ok(*v);
    }
    let value = match spec.family {
        GenzFamily::Continuous | GenzFamily::Discontinuous | GenzFamily::GaussianPeak | GenzFamily::ProductPeak => {
            (0..spec.dim).map(|k| separable_factor(spec, k)).product()
        }
        GenzFamily::Oscillatory => oscillatory_reference(spec),
        GenzFamily::CornerPeak => {
            if spec.dim > TENSOR_REFERENCE_MAX_DIM {
                return Err(IntegrandError::DimensionTooLarge { family: spec.family, dim: spec.dim, limit: TENSOR_REFERENCE_MAX_DIM });
            }
            corner_peak_tensor(spec)
        }
    };
    cache.lock().expect("reference cache poisoned").insert(key, value);
    Ok(value)
}

/// One-dimensional factor ∫₀¹ h_k(c) dc of a separable family.
fn separable_factor(spec: &GenzSpec, k: usize) -> f64 {
    let a = spec.a[k];
    let u = spec.u_at(k);
    match spec.family {
        GenzFamily::Continuous => integrate_piecewise(|c| (-a * (c - u).abs()).exp(), 0.0, 1.0, &[u], 8, 32),
        GenzFamily::Discontinuous => {
            let hi = u.clamp(0.0, 1.0);
            if hi <= 0.0 {
                0.0
            } else {
                integrate_piecewise(|c| (a * c).exp(), 0.0, hi, &[], 8, 32)
            }
        }
        GenzFamily::GaussianPeak => integrate_piecewise(|c| (-a * a * (c - u).powi(2)).exp(), 0.0, 1.0, &[u], 8, 32),
        GenzFamily::ProductPeak => integrate_piecewise(|c| 1.0 / (a.powi(-2) + (c - u).powi(2)), 0.0, 1.0, &[u], 16, 32),
        _ => unreachable!("not separable"),
    }
}

/// Re{ e^{2πiu} ∏ₖ E[e^{i aₖ cₖ}] } with each factor by quadrature.
fn oscillatory_reference(spec: &GenzSpec) -> f64 {
    let (mut re, mut im) = ((2.0 * PI * spec.u_at(0)).cos(), (2.0 * PI * spec.u_at(0)).sin());
    for &a in &spec.a {
        let fr = integrate_piecewise(|c| (a * c).cos(), 0.0, 1.0, &[], 8, 32);
        let fi = integrate_piecewise(|c| (a * c).sin(), 0.0, 1.0, &[], 8, 32);
        let (nr, ni) = (re * fr - im * fi, re * fi + im * fr);
        re = nr;
        im = ni;
    }
    re
}

fn corner_peak_tensor(spec: &GenzSpec) -> f64 {
    let rule = gauss_legendre(40);
    let panels = 4usize;
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for p in 0..panels {
        let r = rule.mapped(p as f64 / panels as f64, (p + 1) as f64 / panels as f64);
        nodes.extend(r.nodes);
        weights.extend(r.weights);
    }
    let m = nodes.len();
    let d = spec.dim;
    let mut idx = vec![0usize; d];
    let mut c = vec![0.0; d];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for k in 0..d {
            c[k] = nodes[idx[k]];
            w *= weights[idx[k]];
        }
        total += w * spec.eval_unit(&c);
        let mut k = 0;
        loop {
            if k == d {
                return total;
            }
            idx[k] += 1;
            if idx[k] < m {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Monte Carlo reference (estimate, standard error) for families without a deterministic one.
pub fn genz_reference_mc(spec: &GenzSpec, n_samples: usize, rng: &mut RandomStream) -> (f64, f64) {
    let mut x = vec![0.0; spec.dim];
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for i in 0..n_samples {
        for v in x.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let f = genz_eval(spec, &x);
        let delta = f - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (f - mean);
    }
    let var = if n_samples > 1 { m2 / (n_samples - 1) as f64 } else { 0.0 };
    (mean, (var / n_samples as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateTransform {
    Identity,
    Exp,
}

/// f(w) = w_j, or exp(w_j) to map log-space parameters back.
pub fn coordinate_integrand(dim: usize, j: usize, transform: CoordinateTransform) -> Integrand {
    assert!(j < dim, "coordinate index out of range");
    match transform {
        CoordinateTransform::Identity => Integrand::new(dim, format!("coord{j}"), None, move |w| w[j]),
        CoordinateTransform::Exp => Integrand::new(dim, format!("exp_coord{j}"), None, move |w| w[j].exp()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gauss_hermite, std_normal_pdf};

    /// Trapezoid rule of f(Φ(x))φ(x) on [−10, 10].
    fn trapezoid_oracle(h: impl Fn(f64) -> f64, n: usize) -> f64 {
        let (a, b) = (-10.0, 10.0);
        let step = (b - a) / n as f64;
        let mut s = 0.5 * (h(std_normal_cdf(a)) * std_normal_pdf(a) + h(std_normal_cdf(b)) * std_normal_pdf(b));
        for i in 1..n {
            let x = a + i as f64 * step;
            s += h(std_normal_cdf(x)) * std_normal_pdf(x);
        }
        s * step
    }

    #[test]
    fn continuous_value_at_origin() {
        let s = GenzSpec::new(GenzFamily::Continuous, 1);
        assert!((genz_eval(&s, &[0.0]) - (-0.065f64).exp()).abs() < 1e-15);
        assert!((genz_eval(&s, &[0.0]) - 0.93707).abs() < 1e-5);
    }

    #[test]
    fn discontinuous_jump() {
        let s = GenzSpec::new(GenzFamily::Discontinuous, 1);
        assert!((genz_eval(&s, &[0.0]) - 2.5f64.exp()).abs() < 1e-12);
        assert_eq!(genz_eval(&s, &[0.1]), 0.0);
    }

    #[test]
    fn discontinuous_is_exactly_zero_past_threshold() {
        let s = GenzSpec::new(GenzFamily::Discontinuous, 3);
        for x in [[0.0, 0.0, 1e-9], [5.0, -1.0, -1.0], [-1.0, 0.3, -2.0]] {
            let any_over = x.iter().any(|&v| std_normal_cdf(v) > 0.5);
            assert_eq!(any_over, genz_eval(&s, &x) == 0.0);
        }
    }

    #[test]
    fn oscillatory_corner_limit() {
        let s = GenzSpec::new(GenzFamily::Oscillatory, 2);
        assert!((genz_eval(&s, &[-40.0, -40.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn continuous_reference_matches_trapezoid() {
        let s = GenzSpec::new(GenzFamily::Continuous, 1);
        let oracle = trapezoid_oracle(|c| (-1.3 * (c - 0.55).abs()).exp(), 10_000_000);
        assert!((genz_reference(&s).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn oscillatory_reference_matches_trapezoid() {
        let s = GenzSpec::new(GenzFamily::Oscillatory, 1);
        let oracle = trapezoid_oracle(|c| (PI + 5.0 * c).cos(), 10_000_000);
        assert!((genz_reference(&s).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn product_peak_separability() {
        let r1 = genz_reference(&GenzSpec::new(GenzFamily::ProductPeak, 1)).unwrap();
        let r2 = genz_reference(&GenzSpec::new(GenzFamily::ProductPeak, 2)).unwrap();
        assert!((r2 - r1 * r1).abs() <= 1e-12 * r2);
    }

    #[test]
    fn separable_references_are_products_up_to_d20() {
        for fam in [GenzFamily::Continuous, GenzFamily::Discontinuous, GenzFamily::GaussianPeak, GenzFamily::ProductPeak] {
            let r1 = genz_reference(&GenzSpec::new(fam, 1)).unwrap();
            let r20 = genz_reference(&GenzSpec::new(fam, 20)).unwrap();
            assert!(((r20 - r1.powi(20)) / r20).abs() < 1e-12, "{fam}");
        }
    }

    /// Closed forms of the one-dimensional unit-cube integrals.
    #[test]
    fn references_match_closed_forms() {
        let cont = (2.0 - (-1.3f64 * 0.55).exp() - (-1.3f64 * 0.45).exp()) / 1.3;
        let disc = ((5.0f64 * 0.5).exp() - 1.0) / 5.0;
        let gauss = PI.sqrt() / 5.0 * crate::numerics::erf(2.5);
        let prod = 5.0 * 2.0 * (2.5f64).atan();
        let osc = ((PI + 5.0f64).sin() - PI.sin()) / 5.0;
        let cases = [
            (GenzFamily::Continuous, cont),
            (GenzFamily::Discontinuous, disc),
            (GenzFamily::GaussianPeak, gauss),
            (GenzFamily::ProductPeak, prod),
            (GenzFamily::Oscillatory, osc),
        ];
        for (fam, exact) in cases {
            let r = genz_reference(&GenzSpec::new(fam, 1)).unwrap();
            assert!((r - exact).abs() < 1e-12 * exact.abs().max(1.0), "{fam}: {r} vs {exact}");
        }
        // oscillatory in d=2: cos(π + 5c₁ + 5c₂) integrated in closed form
        let osc2 = (-(PI + 10.0).cos() + 2.0 * (PI + 5.0).cos() - PI.cos()) / 25.0;
        let r = genz_reference(&GenzSpec::new(GenzFamily::Oscillatory, 2)).unwrap();
        assert!((r - osc2).abs() < 1e-12);
    }

    /// Inclusion–exclusion closed form for the corner peak on [0,1]^d.
    #[test]
    fn corner_peak_reference_inclusion_exclusion() {
        for d in 1..=3usize {
            let a = 5.0f64;
            let mut fact = 1.0;
            for k in 1..=d {
                fact *= k as f64;
            }
            let mut s = 0.0;
            for mask in 0u32..(1 << d) {
                let k = mask.count_ones() as f64;
                let sign = if mask.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                s += sign / (1.0 + a * k);
            }
            let exact = s / (fact * a.powi(d as i32));
            let r = genz_reference(&GenzSpec::new(GenzFamily::CornerPeak, d)).unwrap();
            assert!(((r - exact) / exact).abs() < 1e-10, "d={d}: {r} vs {exact}");
        }
        assert!(matches!(
            genz_reference(&GenzSpec::new(GenzFamily::CornerPeak, 4)),
            Err(IntegrandError::DimensionTooLarge { .. })
        ));
    }

    #[test]
    fn oscillatory_reference_in_high_dimension() {
        let s = GenzSpec::new(GenzFamily::Oscillatory, 20);
        let r = genz_reference(&s).unwrap();
        let mut rng = crate::numerics::seeded_rng(4);
        let (mc, se) = genz_reference_mc(&s, 200_000, &mut rng);
        assert!((r - mc).abs() < 5.0 * se);
    }

    #[test]
    fn corner_peak_mc_reference_agrees() {
        let s = GenzSpec::new(GenzFamily::CornerPeak, 2);
        let mut rng = crate::numerics::seeded_rng(8);
        let (mc, se) = genz_reference_mc(&s, 400_000, &mut rng);
        assert!((genz_reference(&s).unwrap() - mc).abs() < 5.0 * se);
    }

    #[test]
    fn coordinate_integrands() {
        let f = coordinate_integrand(4, 0, CoordinateTransform::Identity);
        assert_eq!(f.eval(&[1.5, -2.0, 0.0, 3.0]), 1.5);
        let g = coordinate_integrand(4, 1, CoordinateTransform::Exp);
        assert_eq!(g.eval(&[0.0; 4]), 1.0);
        let h = coordinate_integrand(4, 0, CoordinateTransform::Exp);
        assert!((h.eval(&[2f64.ln(), 0.0, 0.0, 0.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn parse_family_names() {
        assert_eq!("continuous".parse::<GenzFamily>().unwrap(), GenzFamily::Continuous);
        assert_eq!("corner-peak".parse::<GenzFamily>().unwrap(), GenzFamily::CornerPeak);
        assert!("bogus".parse::<GenzFamily>().is_err());
    }

    /// 64-node Gauss–Hermite against the trapezoid oracle on the smooth and kinked 1-D
    /// references. The rule converges only algebraically through the kink of the continuous
    /// family and slowly for the two peaks, so the 1e-10 bound does not hold; kept for reference.
    #[test]
    #[ignore = "64-node Gauss–Hermite misses 1e-10 on kinked and peaked Genz integrands"]
    fn gauss_hermite_64_matches_trapezoid_on_genz() {
        let rule = gauss_hermite(64);
        for fam in [GenzFamily::Continuous, GenzFamily::GaussianPeak, GenzFamily::ProductPeak, GenzFamily::Oscillatory] {
            let s = GenzSpec::new(fam, 1);
            let gh = rule.integrate(|x| genz_eval(&s, &[x]));
            let oracle = trapezoid_oracle(|c| s.eval_unit(&[c]), 10_000_000);
            assert!((gh - oracle).abs() <= 1e-10, "{fam}: {gh} vs {oracle}");
        }
    }
}
