use std::collections::BTreeMap;

use crate::distributions::{log_sum_exp, normal_lpdf, Distribution};
use crate::error::{Error, Result};
use crate::graph::{Address, Env, Model, Value};

/// Two-component mixture with the component indicator summed out.
///
/// The joint `c ~ Bernoulli(0.6)`, `x | c ~ N(10c, 0.5)`,
/// `y | c ~ N(0.5c, 0.5)` is represented over `(x, y)` only:
/// `x ~ 0.4 N(0, 0.5) + 0.6 N(10, 0.5)` and `y | x` is the mixture over
/// `c` weighted by `p(c | x)`. With `c` explicit, single-site moves on `x`
/// could never leave the component that `c` pins.
#[derive(Clone, Debug, PartialEq)]
pub struct Gmm2d {
    pub weight: f64,
    pub x_means: [f64; 2],
    pub y_means: [f64; 2],
    pub sd: f64,
    pub y_obs: f64,
}

impl Default for Gmm2d {
    fn default() -> Self {
        Self { weight: 0.6, x_means: [0.0, 10.0], y_means: [0.0, 0.5], sd: 0.5, y_obs: 0.25 }
    }
}

impl Gmm2d {
    pub fn x() -> Address {
        Address::new("x")
    }

    pub fn y() -> Address {
        Address::new("y")
    }

    /// Threshold separating the two modes of `x`.
    pub fn mode_boundary(&self) -> f64 {
        (self.x_means[0] + self.x_means[1]) / 2.0
    }

    fn prior_weights(&self) -> [f64; 2] {
        [1.0 - self.weight, self.weight]
    }

    /// `p(c | x)`.
    pub fn component_given_x(&self, x: f64) -> [f64; 2] {
        let pi = self.prior_weights();
        let l = [
            pi[0].ln() + normal_lpdf(x, self.x_means[0], self.sd),
            pi[1].ln() + normal_lpdf(x, self.x_means[1], self.sd),
        ];
        let z = log_sum_exp(&l);
        [(l[0] - z).exp(), (l[1] - z).exp()]
    }

    /// Exact `P(c = 1 | y)`, which is the posterior mass of the right mode
    /// of `x`.
    pub fn right_mode_mass(&self, y: f64) -> f64 {
        let pi = self.prior_weights();
        let l0 = pi[0].ln() + normal_lpdf(y, self.y_means[0], self.sd);
        let l1 = pi[1].ln() + normal_lpdf(y, self.y_means[1], self.sd);
        (l1 - log_sum_exp(&[l0, l1])).exp()
    }

    /// Posterior density of `x` given `y`.
    pub fn posterior_log_density(&self, x: f64, y: f64) -> f64 {
        let r = self.right_mode_mass(y);
        log_sum_exp(&[
            (1.0 - r).ln() + normal_lpdf(x, self.x_means[0], self.sd),
            r.ln() + normal_lpdf(x, self.x_means[1], self.sd),
        ])
    }
}

impl Model for Gmm2d {
    fn name(&self) -> &str {
        "gmm2d"
    }

    fn distribution(&self, addr: &Address, env: &mut dyn Env) -> Result<Distribution> {
        match (&*addr.family, addr.args.as_slice()) {
            ("x", []) => Distribution::normal_mixture(
                self.prior_weights().to_vec(),
                self.x_means.to_vec(),
                vec![self.sd; 2],
            ),
            ("y", []) => {
                let w = self.component_given_x(env.real(&Self::x())?);
                Distribution::normal_mixture(w.to_vec(), self.y_means.to_vec(), vec![self.sd; 2])
            }
            _ => Err(Error::UndefinedVariable(addr.clone())),
        }
    }

    fn queries(&self) -> Vec<Address> {
        vec![Self::x()]
    }

    fn observations(&self) -> BTreeMap<Address, Value> {
        BTreeMap::from([(Self::y(), Value::Real(self.y_obs))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equidistant_observation_keeps_prior_weight() {
        assert!((Gmm2d::default().right_mode_mass(0.25) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn oracle_matches_quadrature_over_explicit_joint() {
        // Integrate the joint with the indicator kept explicit.
        let m = Gmm2d::default();
        let h = 1e-3;
        let (mut right, mut total) = (0.0, 0.0);
        for i in 0..16_000 {
            let x = -3.0 + h * i as f64;
            let mut p = 0.0;
            for c in 0..2 {
                let pc = if c == 1 { 0.6 } else { 0.4 };
                p += pc
                    * normal_lpdf(x, 10.0 * c as f64, 0.5).exp()
                    * normal_lpdf(0.25, 0.5 * c as f64, 0.5).exp();
            }
            total += p;
            if x > 5.0 {
                right += p;
            }
        }
        assert!((right / total - m.right_mode_mass(0.25)).abs() < 1e-6);
    }

    #[test]
    fn marginal_of_y_normalizes() {
        let m = Gmm2d::default();
        let h = 1e-3;
        let mass: f64 = (0..10_000)
            .map(|i| {
                let y = -5.0 + h * i as f64;
                0.4 * normal_lpdf(y, 0.0, 0.5).exp() + 0.6 * normal_lpdf(y, 0.5, 0.5).exp()
            })
            .sum::<f64>()
            * h;
        assert!((mass - 1.0).abs() < 1e-6);
        let post: f64 = (0..16_000)
            .map(|i| m.posterior_log_density(-3.0 + h * i as f64, 0.25).exp())
            .sum::<f64>()
            * h;
        assert!((post - 1.0).abs() < 1e-6);
    }

    #[test]
    fn posterior_is_bimodal_at_zero_and_ten() {
        let m = Gmm2d::default();
        let d = |x: f64| m.posterior_log_density(x, 0.25);
        assert!(d(0.0) > d(0.5) && d(0.0) > d(-0.5));
        assert!(d(10.0) > d(9.5) && d(10.0) > d(10.5));
        assert!(d(5.0) < d(0.0) - 40.0);
    }
}
