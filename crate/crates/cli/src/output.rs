//! Output files. Deterministic content (`samples.csv`, `metrics.json`) is
//! kept apart from wall-clock timings (`timings.json`).

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use blanket::diagnostics::{self, Metrics};
use blanket::infer::ChainOutput;
use blanket::models::{DataTable, ZooModel};
use blanket::{Address, Value};
use serde::{Deserialize, Serialize};

pub const SAMPLES: &str = "samples.csv";
pub const METRICS: &str = "metrics.json";
pub const MANIFEST: &str = "manifest.json";
pub const TRAINING_REPORT: &str = "training_report.json";
pub const TIMINGS: &str = "timings.json";
pub const ARTIFACT: &str = "artifact.json";
pub const DATA: &str = "data.csv";
pub const DATASET: &str = "dataset.json";
pub const REPORT: &str = "report.json";

const SAMPLES_HEADER: [&str; 5] = ["chain", "iteration", "family", "args", "value"];

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn versions() -> serde_json::Value {
    serde_json::json!({
        "blanket": env!("CARGO_PKG_VERSION"),
        "artifact_format": blanket::compile::ARTIFACT_VERSION,
    })
}

/// One row per recorded draw of each address present at that draw.
pub fn write_samples(path: &Path, chains: &[ChainOutput]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(SAMPLES_HEADER)?;
    for c in chains {
        for t in 0..c.num_samples {
            for (a, seq) in &c.draws {
                if let Some(v) = &seq[t] {
                    w.write_record([
                        c.chain.to_string(),
                        t.to_string(),
                        a.family.to_string(),
                        a.args_string(),
                        v.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_value(s: &str) -> Result<Value> {
    Ok(match s {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => match s.parse::<usize>() {
            Ok(k) => Value::Index(k),
            Err(_) => Value::Real(s.parse().with_context(|| format!("bad value `{s}`"))?),
        },
    })
}

fn parse_args(s: &str) -> Result<Vec<i64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(|a| a.parse().with_context(|| format!("bad args `{s}`"))).collect()
}

/// Reads `samples.csv` back into chains of `num_samples` draws each.
/// Acceptance counts are not part of the file and come back empty.
pub fn read_samples(path: &Path, n_chains: usize, num_samples: usize) -> Result<Vec<ChainOutput>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    if r.headers()?.iter().ne(SAMPLES_HEADER) {
        bail!("{}: unexpected header", path.display());
    }
    let mut draws: Vec<BTreeMap<Address, Vec<Option<Value>>>> = vec![BTreeMap::new(); n_chains];
    for rec in r.records() {
        let rec = rec?;
        let chain: usize = rec[0].parse()?;
        let t: usize = rec[1].parse()?;
        if chain >= n_chains || t >= num_samples {
            bail!("{}: draw ({chain}, {t}) outside {n_chains} chains x {num_samples} draws", path.display());
        }
        let addr = Address::indexed(&rec[2], parse_args(&rec[3])?);
        let seq = draws[chain].entry(addr).or_insert_with(|| vec![None; num_samples]);
        seq[t] = Some(parse_value(&rec[4])?);
    }
    Ok(draws
        .into_iter()
        .enumerate()
        .map(|(chain, draws)| ChainOutput {
            chain,
            seed: 0,
            draws,
            acceptance: BTreeMap::new(),
            num_samples,
            infer_seconds: 0.0,
        })
        .collect())
}

pub fn write_data(dir: &Path, z: &ZooModel) -> Result<()> {
    write_json(&dir.join(DATASET), &z.manifest)?;
    if let Some(DataTable { header, rows }) = &z.data {
        let mut w = csv::Writer::from_path(dir.join(DATA))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row.iter().map(|x| format!("{x:?}")))?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub model: String,
    pub proposer: String,
    pub status: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Diagnostics of a finished run, with held-out PLL when the model has a
/// held-out set and there are draws to average over.
pub fn diagnose(z: &ZooModel, chains: &[ChainOutput]) -> Result<Metrics> {
    let mut m = diagnostics::summarize(chains);
    if !z.heldout.is_empty() {
        let samples = diagnostics::posterior_samples(chains);
        if !samples.is_empty() {
            m.pll = Some(diagnostics::pll(&samples, &*z.model, &z.heldout)?);
        }
    }
    Ok(m)
}

/// Writes `samples.csv`, `metrics.json` and `timings.json` for a finished
/// run and returns its metrics.
pub fn write_run(dir: &Path, z: &ZooModel, proposer: &str, chains: &[ChainOutput]) -> Result<Metrics> {
    std::fs::create_dir_all(dir)?;
    write_samples(&dir.join(SAMPLES), chains)?;
    let metrics = diagnose(z, chains)?;
    let file = MetricsFile {
        model: z.name.clone(),
        proposer: proposer.to_string(),
        status: "ok".into(),
        metrics: metrics.clone(),
    };
    write_json(&dir.join(METRICS), &file)?;
    let per_chain: Vec<f64> = chains.iter().map(|c| c.infer_seconds).collect();
    write_json(
        &dir.join(TIMINGS),
        &serde_json::json!({
            "infer_seconds": per_chain.iter().copied().fold(0.0, f64::max),
            "chain_infer_seconds": per_chain,
        }),
    )?;
    Ok(metrics)
}

/// Records a failed run: no samples, a flagged `metrics.json`.
pub fn write_failure(dir: &Path, z: &ZooModel, proposer: &str, error: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = MetricsFile {
        model: z.name.clone(),
        proposer: proposer.to_string(),
        status: "failed".into(),
        metrics: Metrics { flags: vec![format!("chain failure: {error}")], ..Metrics::default() },
    };
    write_json(&dir.join(METRICS), &file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(i: usize) -> ChainOutput {
        let mu1 = Address::indexed("mu", [1]);
        let pair = Address::indexed("pair", [2, -3]);
        ChainOutput {
            chain: i,
            seed: 0,
            draws: BTreeMap::from([
                (Address::new("x"), vec![Some(Value::Real(0.1)), Some(Value::Real(-1e-300)), Some(Value::Real(3.0))]),
                (Address::new("c"), vec![Some(Value::Bool(true)), Some(Value::Bool(false)), Some(Value::Bool(true))]),
                (Address::new("k"), vec![Some(Value::Index(2)), Some(Value::Index(0)), Some(Value::Index(1))]),
                (mu1, vec![None, Some(Value::Real(2.5)), None]),
                (pair, vec![Some(Value::Real(f64::MAX)), None, None]),
            ]),
            acceptance: BTreeMap::new(),
            num_samples: 3,
            infer_seconds: 0.0,
        }
    }

    #[test]
    fn samples_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(SAMPLES);
        let chains = vec![chain(0), chain(1)];
        write_samples(&p, &chains).unwrap();
        let back = read_samples(&p, 2, 3).unwrap();
        for (a, b) in chains.iter().zip(&back) {
            assert_eq!(a.draws, b.draws);
        }
    }

    #[test]
    fn samples_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(SAMPLES);
        write_samples(&p, &[chain(0)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "chain,iteration,family,args,value");
        assert!(lines.contains(&"0,1,mu,1,2.5"));
        assert!(lines.contains(&"0,0,pair,2;-3,1.7976931348623157e308"));
        assert!(lines.contains(&"0,0,c,,true"));
        assert!(lines.contains(&"0,2,x,,3.0"));
        // 3 + 3 + 3 + 1 + 1 present draws.
        assert_eq!(lines.len(), 12);
    }

    #[test]
    fn empty_run_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(SAMPLES);
        let empty = ChainOutput { num_samples: 0, draws: BTreeMap::new(), ..chain(0) };
        write_samples(&p, &[empty]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "chain,iteration,family,args,value\n");
        assert!(read_samples(&p, 1, 0).unwrap()[0].draws.is_empty());
    }

    #[test]
    fn out_of_range_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(SAMPLES);
        write_samples(&p, &[chain(0), chain(1)]).unwrap();
        assert!(read_samples(&p, 1, 3).is_err());
        assert!(read_samples(&p, 2, 2).is_err());
    }
}
