use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DataTable;
use crate::distributions::{sigmoid, Distribution};
use crate::error::{Error, Result};
use crate::graph::{Address, Env, Model, Value};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlrConfig {
    pub n_rows: usize,
    pub n_features: usize,
    /// Read the prior diagonal `(10, 2.5, ...)` as standard deviations
    /// instead of variances.
    pub prior_scales_are_sds: bool,
    pub seed: u64,
}

impl Default for BlrConfig {
    fn default() -> Self {
        Self { n_rows: 2000, n_features: 10, prior_scales_are_sds: false, seed: 0 }
    }
}

/// Bayesian logistic regression on synthetic data. Each coefficient is its
/// own family `beta_j`; rows are observed labels `y(i)` and held-out labels
/// `y_test(i)`. Covariates are fixed data, not nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Blr {
    pub config: BlrConfig,
    /// Row-major, with a leading constant-1 column.
    pub covariates: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub n_train: usize,
    pub true_beta: Vec<f64>,
    pub prior_sds: Vec<f64>,
}

impl Blr {
    pub fn generate(cfg: &BlrConfig) -> Result<Self> {
        if cfg.n_rows < 2 || cfg.n_features == 0 {
            return Err(Error::Config("blr needs at least 2 rows and 1 feature".into()));
        }
        let d = cfg.n_features;
        let (intercept, slope) = if cfg.prior_scales_are_sds { (10.0, 2.5) } else { (10f64.sqrt(), 2.5f64.sqrt()) };
        let prior_sds: Vec<f64> =
            std::iter::once(intercept).chain(std::iter::repeat_n(slope, d)).collect();
        let mut rng = seed::substream(cfg.seed, "blr");
        let true_beta: Vec<f64> =
            prior_sds.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut covariates = Vec::with_capacity(cfg.n_rows);
        let mut labels = Vec::with_capacity(cfg.n_rows);
        for _ in 0..cfg.n_rows {
            let row: Vec<f64> = std::iter::once(1.0)
                .chain((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let p = sigmoid(dot(&row, &true_beta));
            labels.push(rng.random::<f64>() < p);
            covariates.push(row);
        }
        let n_train = (cfg.n_rows * 4).div_ceil(5).min(cfg.n_rows - 1);
        Ok(Self { config: cfg.clone(), covariates, labels, n_train, true_beta, prior_sds })
    }

    pub fn dim(&self) -> usize {
        self.config.n_features + 1
    }

    pub fn beta(j: usize) -> Address {
        Address::new(&format!("beta_{j}"))
    }

    pub fn y(i: usize) -> Address {
        Address::indexed("y", [i as i64])
    }

    pub fn y_test(i: usize) -> Address {
        Address::indexed("y_test", [i as i64])
    }

    pub fn heldout(&self) -> BTreeMap<Address, Value> {
        (self.n_train..self.labels.len())
            .map(|i| (Self::y_test(i - self.n_train), Value::Bool(self.labels[i])))
            .collect()
    }

    pub fn n_test(&self) -> usize {
        self.labels.len() - self.n_train
    }

    /// Held-out log likelihood at fixed coefficients.
    pub fn heldout_log_lik(&self, beta: &[f64]) -> f64 {
        (self.n_train..self.labels.len())
            .map(|i| {
                let p = sigmoid(dot(&self.covariates[i], beta));
                if self.labels[i] { p.ln() } else { (-p).ln_1p() }
            })
            .sum()
    }

    pub fn table(&self) -> DataTable {
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.extend(["y".to_string(), "test".to_string()]);
        let rows = self
            .covariates
            .iter()
            .zip(&self.labels)
            .enumerate()
            .map(|(i, (x, y))| {
                let mut r = x.clone();
                r.push(f64::from(u8::from(*y)));
                r.push(f64::from(u8::from(i >= self.n_train)));
                r
            })
            .collect();
        DataTable { header, rows }
    }

    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "n_rows": self.config.n_rows,
            "n_features": self.config.n_features,
            "n_train": self.n_train,
            "n_test": self.n_test(),
            "seed": self.config.seed,
            "prior_scales_are_sds": self.config.prior_scales_are_sds,
            "prior_sds": self.prior_sds,
            "true_beta": self.true_beta,
        })
    }

    fn row_distribution(&self, row: usize, env: &mut dyn Env) -> Result<Distribution> {
        let mut t = 0.0;
        for (j, x) in self.covariates[row].iter().enumerate() {
            t += x * env.real(&Self::beta(j))?;
        }
        Distribution::bernoulli(sigmoid(t))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Model for Blr {
    fn name(&self) -> &str {
        "blr"
    }

    fn distribution(&self, addr: &Address, env: &mut dyn Env) -> Result<Distribution> {
        let family = &*addr.family;
        if let Some(j) = family.strip_prefix("beta_").and_then(|s| s.parse::<usize>().ok()) {
            if j < self.dim() && addr.args.is_empty() {
                return Distribution::normal(0.0, self.prior_sds[j]);
            }
        }
        match (family, addr.args.as_slice()) {
            ("y", [i]) if (0..self.n_train as i64).contains(i) => {
                self.row_distribution(*i as usize, env)
            }
            ("y_test", [i]) if (0..self.n_test() as i64).contains(i) => {
                self.row_distribution(self.n_train + *i as usize, env)
            }
            _ => Err(Error::UndefinedVariable(addr.clone())),
        }
    }

    fn queries(&self) -> Vec<Address> {
        (0..self.dim()).map(Self::beta).collect()
    }

    fn observations(&self) -> BTreeMap<Address, Value> {
        (0..self.n_train).map(|i| (Self::y(i), Value::Bool(self.labels[i]))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::pll;

    fn small() -> Blr {
        Blr::generate(&BlrConfig { n_rows: 400, n_features: 3, ..BlrConfig::default() }).unwrap()
    }

    #[test]
    fn generator_is_deterministic_and_split() {
        let a = small();
        assert_eq!(a, small());
        assert_eq!(a.n_train, 320);
        assert_eq!(a.heldout().len(), 80);
        assert!(a.covariates.iter().all(|r| r[0] == 1.0 && r.len() == 4));
    }

    #[test]
    fn prior_scale_interpretation() {
        let v = small();
        assert!((v.prior_sds[0] - 10f64.sqrt()).abs() < 1e-12);
        let s = Blr::generate(&BlrConfig { prior_scales_are_sds: true, ..v.config.clone() }).unwrap();
        assert_eq!(s.prior_sds, vec![10.0, 2.5, 2.5, 2.5]);
    }

    #[test]
    fn zero_coefficients_give_log_half_per_point() {
        let m = small();
        let zero: BTreeMap<Address, Value> =
            (0..m.dim()).map(|j| (Blr::beta(j), Value::Real(0.0))).collect();
        let v = pll(&[zero], &m, &m.heldout()).unwrap();
        assert!((v - 80.0 * 0.5f64.ln()).abs() < 1e-9);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn truth_predicts_better_than_zero() {
        let m = small();
        let truth: BTreeMap<Address, Value> =
            m.true_beta.iter().enumerate().map(|(j, b)| (Blr::beta(j), Value::Real(*b))).collect();
        let zero: BTreeMap<Address, Value> =
            (0..m.dim()).map(|j| (Blr::beta(j), Value::Real(0.0))).collect();
        let h = m.heldout();
        let t = pll(&[truth], &m, &h).unwrap();
        assert!((t - m.heldout_log_lik(&m.true_beta)).abs() < 1e-9);
        assert!(t > pll(&[zero], &m, &h).unwrap());
    }
}
