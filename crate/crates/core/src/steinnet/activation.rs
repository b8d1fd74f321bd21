use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Smooth activations usable inside a Stein network. The divergence term needs the
/// input derivative of the network and its parameter gradient needs one more, so
/// every activation exposes value, first and second derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Celu,
    Tanh,
    Gauss,
    Sigmoid,
    TanhShrink,
}

impl Activation {
    pub const ALL: [Activation; 5] =
        [Activation::Celu, Activation::Tanh, Activation::Gauss, Activation::Sigmoid, Activation::TanhShrink];

    /// (σ(z), σ'(z), σ''(z)).
    #[inline]
    pub fn eval(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Celu => {
                if z > 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    let e = z.exp();
                    (e - 1.0, e, e)
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
            Activation::Gauss => {
                let e = (-z * z).exp();
                (e, -2.0 * z * e, (4.0 * z * z - 2.0) * e)
            }
            Activation::Sigmoid => {
                let s = if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                };
                let d = s * (1.0 - s);
                (s, d, d * (1.0 - 2.0 * s))
            }
            Activation::TanhShrink => {
                let t = z.tanh();
                (z - t, t * t, 2.0 * t * (1.0 - t * t))
            }
        }
    }

    pub fn value(self, z: f64) -> f64 {
        self.eval(z).0
    }

    pub fn derivative(self, z: f64) -> f64 {
        self.eval(z).1
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Celu => 0,
            Activation::Tanh => 1,
            Activation::Gauss => 2,
            Activation::Sigmoid => 3,
            Activation::TanhShrink => 4,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Activation::ALL.into_iter().find(|a| a.tag() == tag)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Celu => "celu",
            Activation::Tanh => "tanh",
            Activation::Gauss => "gauss",
            Activation::Sigmoid => "sigmoid",
            Activation::TanhShrink => "tanhshrink",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "celu" => Ok(Activation::Celu),
            "tanh" => Ok(Activation::Tanh),
            "gauss" | "gaussian" => Ok(Activation::Gauss),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanhshrink" => Ok(Activation::TanhShrink),
            _ => Err(format!("unknown activation '{s}'")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for act in Activation::ALL {
            let mut worst1 = 0.0f64;
            let mut worst2 = 0.0f64;
            for i in 0..10_000 {
                let z = -6.0 + 12.0 * i as f64 / 9_999.0;
                // skip the CELU kink for the second derivative only
                let (_, d1, d2) = act.eval(z);
                let fd1 = (act.value(z + h) - act.value(z - h)) / (2.0 * h);
                worst1 = worst1.max((fd1 - d1).abs());
                if !(act == Activation::Celu && z.abs() < 2.0 * h) {
                    let fd2 = (act.derivative(z + h) - act.derivative(z - h)) / (2.0 * h);
                    worst2 = worst2.max((fd2 - d2).abs());
                }
            }
            assert!(worst1 <= 1e-8, "{act}: first derivative error {worst1}");
            assert!(worst2 <= 1e-7, "{act}: second derivative error {worst2}");
        }
    }

    #[test]
    fn celu_derivative_continuous_at_zero() {
        let left = Activation::Celu.derivative(-1e-300);
        let right = Activation::Celu.derivative(1e-300);
        assert_eq!(left, 1.0);
        assert_eq!(right, 1.0);
        assert_eq!(Activation::Celu.value(0.0), 0.0);
    }

    #[test]
    fn sigmoid_is_stable_in_tails() {
        assert_eq!(Activation::Sigmoid.value(-800.0), 0.0);
        assert_eq!(Activation::Sigmoid.value(800.0), 1.0);
    }

    #[test]
    fn tags_round_trip() {
        for a in Activation::ALL {
            assert_eq!(Activation::from_tag(a.tag()), Some(a));
            assert_eq!(a.as_str().parse::<Activation>().unwrap(), a);
        }
    }
}
