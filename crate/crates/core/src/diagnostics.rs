//! Convergence and predictive diagnostics over multi-chain draws.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::distributions::log_sum_exp;
use crate::error::{Error, Result};
use crate::graph::{Address, Env, Model, Value};
use crate::infer::ChainOutput;

/// Draws of one scalar quantity: `chains[c][t]`.
pub type SampleMatrix = Vec<Vec<f64>>;

fn check(m: &[Vec<f64>], min_chains: usize) -> Result<(usize, usize)> {
    let chains = m.len();
    if chains < min_chains {
        return Err(Error::Diagnostics(format!("need at least {min_chains} chains, got {chains}")));
    }
    let n = m[0].len();
    if m.iter().any(|c| c.len() != n) {
        return Err(Error::Diagnostics("chains have unequal lengths".into()));
    }
    if n < 4 {
        return Err(Error::Diagnostics(format!("need at least 4 draws, got {n}")));
    }
    if m.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Diagnostics("non-finite draw".into()));
    }
    Ok((chains, n))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with an `n - 1` denominator.
fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// True when every draw equals the first.
pub fn is_constant(m: &[Vec<f64>]) -> bool {
    let first = m.first().and_then(|c| c.first()).copied();
    m.iter().flatten().all(|x| Some(*x) == first)
}

/// Multi-chain effective sample size with Geyer's initial monotone
/// sequence truncation. Constant input returns the total draw count.
pub fn ess(m: &[Vec<f64>]) -> Result<f64> {
    let (chains, n) = check(m, 1)?;
    let total = (chains * n) as f64;
    if is_constant(m) {
        return Ok(total);
    }
    let nf = n as f64;
    let centered: Vec<Vec<f64>> = m
        .iter()
        .map(|c| {
            let mu = mean(c);
            c.iter().map(|x| x - mu).collect()
        })
        .collect();
    // Mean over chains of the biased lag-t autocovariance.
    let acov = |t: usize| -> f64 {
        centered
            .iter()
            .map(|c| c[..n - t].iter().zip(&c[t..]).map(|(a, b)| a * b).sum::<f64>() / nf)
            .sum::<f64>()
            / chains as f64
    };
    let mean_var = acov(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if chains > 1 {
        let means: Vec<f64> = m.iter().map(|c| mean(c)).collect();
        var_plus += variance(&means);
    }
    let rho_at = |t: usize| 1.0 - (mean_var - acov(t)) / var_plus;

    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho_at(1);
    rho[1] = odd;
    let mut s = 1;
    while s < n - 4 && even + odd > 0.0 {
        even = rho_at(s + 1);
        odd = rho_at(s + 2);
        if even + odd >= 0.0 {
            rho[s + 1] = even;
            rho[s + 2] = odd;
        }
        s += 2;
    }
    let max_s = s;
    if even > 0.0 {
        rho[max_s + 1] = even;
    }
    let mut s = 1;
    while s + 3 <= max_s {
        if rho[s + 1] + rho[s + 2] > rho[s - 1] + rho[s] {
            rho[s + 1] = (rho[s - 1] + rho[s]) / 2.0;
            rho[s + 2] = rho[s + 1];
        }
        s += 2;
    }
    let tau = -1.0 + 2.0 * rho[..max_s].iter().sum::<f64>() + rho[max_s + 1];
    Ok(total / tau.max(1.0 / total.log10()))
}

/// Rank-normalized split R-hat. Constant input returns 1.
pub fn r_hat(m: &[Vec<f64>]) -> Result<f64> {
    let (_, n) = check(m, 2)?;
    if is_constant(m) {
        return Ok(1.0);
    }
    let half = n / 2;
    let split: Vec<&[f64]> =
        m.iter().flat_map(|c| [&c[..half], &c[n - half..]]).collect();
    let mut pooled: Vec<(f64, usize, usize)> = split
        .iter()
        .enumerate()
        .flat_map(|(j, c)| c.iter().enumerate().map(move |(t, x)| (*x, j, t)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = pooled.len() as f64;
    let std_normal = Normal::standard();
    let mut z: Vec<Vec<f64>> = split.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // Tied draws share their average rank (1-based).
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let score = std_normal.inverse_cdf((rank - 0.375) / (total + 0.25));
        for &(_, c, t) in &pooled[i..=j] {
            z[c][t] = score;
        }
        i = j + 1;
    }
    let nh = half as f64;
    let w = mean(&z.iter().map(|c| variance(c)).collect::<Vec<_>>());
    let b_over_n = variance(&z.iter().map(|c| mean(c)).collect::<Vec<_>>());
    let var_plus = (nh - 1.0) / nh * w + b_over_n;
    Ok((var_plus / w).sqrt())
}

/// `sum_i log(mean_s exp(log_liks[s][i]))` for per-sample, per-point log
/// likelihoods.
pub fn pll_from_log_liks(log_liks: &[Vec<f64>]) -> Result<f64> {
    let s = log_liks.len();
    if s == 0 {
        return Err(Error::Diagnostics("no posterior samples".into()));
    }
    let points = log_liks[0].len();
    if points == 0 {
        return Err(Error::Diagnostics("empty held-out set".into()));
    }
    if log_liks.iter().any(|r| r.len() != points) {
        return Err(Error::Diagnostics("ragged log-likelihood matrix".into()));
    }
    let ln_s = (s as f64).ln();
    Ok((0..points)
        .map(|i| {
            let col: Vec<f64> = log_liks.iter().map(|r| r[i]).collect();
            log_sum_exp(&col) - ln_s
        })
        .sum())
}

struct SampleEnv<'a> {
    values: &'a BTreeMap<Address, Value>,
}

impl Env for SampleEnv<'_> {
    fn read(&mut self, addr: &Address) -> Result<Value> {
        self.values.get(addr).cloned().ok_or_else(|| Error::UnknownAddress(addr.clone()))
    }
}

/// Held-out predictive log likelihood. Each held-out address is scored by
/// the model's distribution for it, reading latent values from the sample.
pub fn pll(
    samples: &[BTreeMap<Address, Value>],
    model: &dyn Model,
    heldout: &BTreeMap<Address, Value>,
) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::Diagnostics("empty held-out set".into()));
    }
    let log_liks = samples
        .iter()
        .map(|s| {
            heldout
                .iter()
                .map(|(a, v)| model.distribution(a, &mut SampleEnv { values: s })?.log_prob(v))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    pll_from_log_liks(&log_liks)
}

/// Aggregated diagnostics of a multi-chain run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ess: BTreeMap<String, f64>,
    pub rhat: BTreeMap<String, f64>,
    pub pll: Option<f64>,
    pub min_ess: Option<f64>,
    pub max_rhat: Option<f64>,
    pub median_ess: Option<f64>,
    pub median_rhat: Option<f64>,
    pub acceptance_rate: BTreeMap<String, f64>,
    pub num_chains: usize,
    pub num_draws: usize,
    pub flags: Vec<String>,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    Some(if k % 2 == 1 { xs[k / 2] } else { (xs[k / 2 - 1] + xs[k / 2]) / 2.0 })
}

/// Per-address matrices for latent addresses present at every draw of
/// every chain. Addresses with gaps are listed separately.
pub fn sample_matrices(chains: &[ChainOutput]) -> (BTreeMap<Address, SampleMatrix>, Vec<Address>) {
    let addrs: BTreeSet<&Address> = chains.iter().flat_map(|c| c.draws.keys()).collect();
    let mut full = BTreeMap::new();
    let mut partial = Vec::new();
    for a in addrs {
        let rows: Option<SampleMatrix> = chains
            .iter()
            .map(|c| {
                c.draws
                    .get(a)
                    .and_then(|d| d.iter().map(|v| v.as_ref().map(Value::as_f64)).collect())
            })
            .collect();
        match rows {
            Some(r) => {
                full.insert(a.clone(), r);
            }
            None => partial.push(a.clone()),
        }
    }
    (full, partial)
}

/// ESS and R-hat per latent address plus min/max/median summaries.
pub fn summarize(chains: &[ChainOutput]) -> Metrics {
    let mut m = Metrics {
        num_chains: chains.len(),
        num_draws: chains.first().map_or(0, |c| c.num_samples),
        ..Metrics::default()
    };
    for c in chains {
        for (a, acc) in &c.acceptance {
            let e = m.acceptance_rate.entry(a.to_string()).or_insert(0.0);
            *e += acc.rate() / chains.len() as f64;
        }
    }
    let (matrices, partial) = sample_matrices(chains);
    for a in partial {
        m.flags.push(format!("{a}: absent at some draws"));
    }
    if m.num_draws < 4 {
        m.flags.push("insufficient draws".into());
        return m;
    }
    for (a, mat) in &matrices {
        let key = a.to_string();
        if is_constant(mat) {
            m.flags.push(format!("{key}: constant draws"));
        }
        match ess(mat) {
            Ok(v) => {
                m.ess.insert(key.clone(), v);
            }
            Err(e) => m.flags.push(format!("{key}: {e}")),
        }
        if chains.len() >= 2 {
            match r_hat(mat) {
                Ok(v) => {
                    m.rhat.insert(key, v);
                }
                Err(e) => m.flags.push(format!("{key}: {e}")),
            }
        }
    }
    let ess_values: Vec<f64> = m.ess.values().copied().collect();
    let rhat_values: Vec<f64> = m.rhat.values().copied().collect();
    m.min_ess = ess_values.iter().copied().reduce(f64::min);
    m.max_rhat = rhat_values.iter().copied().reduce(f64::max);
    m.median_ess = median(ess_values);
    m.median_rhat = median(rhat_values);
    if chains.len() < 2 {
        m.flags.push("single chain: no R-hat".into());
    }
    m
}

/// Latent state at every recorded draw of every chain. Addresses absent at
/// a draw are omitted from that draw's map.
pub fn posterior_samples(chains: &[ChainOutput]) -> Vec<BTreeMap<Address, Value>> {
    let mut out = Vec::new();
    for c in chains {
        for t in 0..c.num_samples {
            let s: BTreeMap<Address, Value> = c
                .draws
                .iter()
                .filter_map(|(a, d)| d[t].clone().map(|v| (a.clone(), v)))
                .collect();
            out.push(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::Acceptance;
    use crate::models::{Blr, BlrConfig};
    use crate::seed::rng_from;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn iid(chains: usize, n: usize, shift: &[f64], seed: u64) -> SampleMatrix {
        let mut rng = rng_from(seed);
        (0..chains).map(|c| (0..n).map(|_| shift[c % shift.len()] + rng.sample::<f64, _>(StandardNormal)).collect()).collect()
    }

    fn ar1(n: usize, rho: f64, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed);
        let mut x = rng.sample::<f64, _>(StandardNormal) / (1.0 - rho * rho).sqrt();
        (0..n)
            .map(|_| {
                x = rho * x + rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect()
    }

    #[test]
    fn iid_draws_have_unit_relative_ess() {
        let m = iid(4, 1000, &[0.0], 1);
        let r = ess(&m).unwrap() / 4000.0;
        assert!((0.8..=1.2).contains(&r), "{r}");
        assert!(r_hat(&m).unwrap() < 1.01);
    }

    #[test]
    fn ar1_ess_matches_closed_form() {
        let rho = 0.9;
        for seed in 0..5 {
            let n = 10_000;
            let e = ess(&[ar1(n, rho, seed)]).unwrap();
            let expected = n as f64 * (1.0 - rho) / (1.0 + rho);
            assert!((e / expected - 1.0).abs() < 0.3, "{e} vs {expected}");
        }
    }

    #[test]
    fn anticorrelated_chain_is_super_efficient() {
        let mut rng = rng_from(3);
        let c: Vec<f64> = (0..1000)
            .map(|t| if t % 2 == 0 { 1.0 } else { -1.0 } + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let e = ess(&[c]).unwrap();
        assert!(e.is_finite() && e > 1000.0, "{e}");
    }

    #[test]
    fn separated_chains_have_large_r_hat() {
        let m = iid(2, 1000, &[0.0, 5.0], 2);
        // Split halves sit entirely on one side of the pooled median, so the
        // normal scores are half-normal: W = 1 - 2/pi and the four split
        // means are +-sqrt(2/pi), giving sqrt(1 + (8 / (3 pi)) / W).
        let pi = std::f64::consts::PI;
        let w = 1.0 - 2.0 / pi;
        let expected = (1.0 + 8.0 / (3.0 * pi) / w).sqrt();
        let r = r_hat(&m).unwrap();
        assert!((r - expected).abs() < 0.03, "{r} vs {expected}");
        assert!(r > 1.5);
    }

    #[test]
    fn constant_input_conventions() {
        let m = vec![vec![2.0; 10]; 3];
        assert_eq!(ess(&m).unwrap(), 30.0);
        assert_eq!(r_hat(&m).unwrap(), 1.0);
        assert!(is_constant(&m));
    }

    #[test]
    fn shape_errors() {
        assert!(ess(&[vec![1.0, 2.0, 3.0]]).is_err());
        assert!(r_hat(&[vec![1.0, 2.0, 3.0, 4.0]]).is_err());
        assert!(ess(&[vec![1.0, 2.0, 3.0, 4.0], vec![1.0; 5]]).is_err());
        assert!(ess(&[vec![1.0, 2.0, f64::NAN, 4.0]]).is_err());
    }

    #[test]
    fn affine_invariance() {
        let mut m = iid(4, 300, &[0.0, 0.3], 5);
        for c in &mut m {
            for i in 1..c.len() {
                c[i] += 0.7 * c[i - 1];
            }
        }
        let scaled: SampleMatrix = m.iter().map(|c| c.iter().map(|x| 3.0 * x - 7.0).collect()).collect();
        assert!((ess(&m).unwrap() - ess(&scaled).unwrap()).abs() < 1e-9);
        assert!((r_hat(&m).unwrap() - r_hat(&scaled).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn r_hat_null_calibration() {
        let passed = (0..100).filter(|s| r_hat(&iid(4, 1000, &[0.0], 100 + s)).unwrap() < 1.05).count();
        assert!(passed >= 99, "{passed}");
    }

    #[test]
    fn pll_conventions() {
        let one = vec![vec![-0.5, -1.5]];
        assert_eq!(pll_from_log_liks(&one).unwrap(), -2.0);
        let a = vec![vec![-0.5, -1.5], vec![-2.0, -0.1], vec![-1.0, -1.0]];
        let mut dup = a.clone();
        dup.extend(a.clone());
        let base = pll_from_log_liks(&a).unwrap();
        assert!((pll_from_log_liks(&dup).unwrap() - base).abs() < 1e-12);
        let mut perm = a.clone();
        perm.reverse();
        assert!((pll_from_log_liks(&perm).unwrap() - base).abs() < 1e-12);
        // log((e^-0.5 + e^-2 + e^-1) / 3) + log((e^-1.5 + e^-0.1 + e^-1) / 3)
        let manual = ((-0.5f64).exp() + (-2.0f64).exp() + (-1.0f64).exp()).ln()
            + ((-1.5f64).exp() + (-0.1f64).exp() + (-1.0f64).exp()).ln()
            - 2.0 * 3f64.ln();
        assert!((base - manual).abs() < 1e-12);
        assert!(pll_from_log_liks(&[]).is_err());
        assert!(pll_from_log_liks(&[vec![]]).is_err());
    }

    #[test]
    fn blr_pll_prefers_truth() {
        let blr = Blr::generate(&BlrConfig { n_rows: 500, n_features: 3, ..Default::default() }).unwrap();
        let sample = |beta: &[f64]| -> BTreeMap<Address, Value> {
            beta.iter().enumerate().map(|(j, b)| (Blr::beta(j), Value::Real(*b))).collect()
        };
        let truth = pll(&[sample(&blr.true_beta)], &blr, &blr.heldout()).unwrap();
        let zero = pll(&[sample(&vec![0.0; blr.dim()])], &blr, &blr.heldout()).unwrap();
        assert!(truth > zero);
        assert!((zero - blr.n_test() as f64 * 0.5f64.ln()).abs() < 1e-9);
        assert!((truth - blr.heldout_log_lik(&blr.true_beta)).abs() < 1e-9);
        assert!(pll(&[sample(&blr.true_beta)], &blr, &BTreeMap::new()).is_err());
    }

    fn chain(i: usize, xs: &[f64]) -> ChainOutput {
        let a = Address::new("x");
        ChainOutput {
            chain: i,
            seed: i as u64,
            draws: BTreeMap::from([(a.clone(), xs.iter().map(|x| Some(Value::Real(*x))).collect())]),
            acceptance: BTreeMap::from([(a, Acceptance { proposed: 10, accepted: 4 })]),
            num_samples: xs.len(),
            infer_seconds: 0.0,
        }
    }

    #[test]
    fn summaries_and_flags() {
        let m = iid(3, 200, &[0.0], 9);
        let chains: Vec<ChainOutput> = m.iter().enumerate().map(|(i, c)| chain(i, c)).collect();
        let s = summarize(&chains);
        assert_eq!(s.num_chains, 3);
        assert_eq!(s.num_draws, 200);
        assert_eq!(s.min_ess, s.ess.get("x").copied());
        assert_eq!(s.max_rhat, s.rhat.get("x").copied());
        assert!((s.acceptance_rate["x"] - 0.4).abs() < 1e-12);
        assert!(s.flags.is_empty());

        let single = summarize(&chains[..1]);
        assert!(single.rhat.is_empty());
        assert!(single.flags.iter().any(|f| f.contains("single chain")));

        let empty = summarize(&[chain(0, &[])]);
        assert!(empty.flags.iter().any(|f| f == "insufficient draws"));
        assert!(empty.min_ess.is_none());

        let mut gappy = chains.clone();
        gappy[1].draws.get_mut(&Address::new("x")).unwrap()[3] = None;
        let g = summarize(&gappy);
        assert!(g.ess.is_empty());
        assert!(g.flags.iter().any(|f| f.contains("absent")));
        assert_eq!(posterior_samples(&gappy).len(), 600);
        assert!(posterior_samples(&gappy)[203].is_empty());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }
}
