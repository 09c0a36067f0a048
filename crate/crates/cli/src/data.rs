//! Dataset specifiers accepted by `--data`:
//!
//! - `synth:classes=3,dim=2,per_class=200,separation=6,seed=7,split=train`
//! - `idx:images=PATH,labels=PATH[,pool=2][,limit=N][,limit_seed=S]`
//! - `csv:PATH[,classes=N]`

use std::collections::BTreeMap;
use std::path::PathBuf;

use geoward::dataset::{downscale, load_idx, subsample, Dataset, Split, SynthSpec};
use geoward::{Error, Result};

pub struct LoadedData {
    pub dataset: Dataset,
    /// Files read, for the run manifest.
    pub files: Vec<PathBuf>,
}

fn bad(spec: &str, why: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("data spec '{spec}': {why}"))
}

fn options(spec: &str, body: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for kv in body.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bad(spec, format!("expected key=value, got '{kv}'")))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(bad(spec, format!("key '{k}' given twice")));
        }
    }
    Ok(out)
}

fn take<T: std::str::FromStr>(spec: &str, opts: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    match opts.remove(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| bad(spec, format!("cannot parse {key}='{v}'"))),
    }
}

fn require<T: std::str::FromStr>(spec: &str, opts: &mut BTreeMap<String, String>, key: &str) -> Result<T> {
    take(spec, opts, key)?.ok_or_else(|| bad(spec, format!("missing '{key}'")))
}

fn no_leftovers(spec: &str, opts: &BTreeMap<String, String>) -> Result<()> {
    match opts.keys().next() {
        Some(k) => Err(bad(spec, format!("unknown key '{k}'"))),
        None => Ok(()),
    }
}

pub fn load(spec: &str) -> Result<LoadedData> {
    let (kind, body) = spec
        .split_once(':')
        .ok_or_else(|| bad(spec, "expected synth:, idx: or csv: prefix"))?;
    match kind {
        "synth" => {
            let mut o = options(spec, body)?;
            let s = SynthSpec {
                classes: take(spec, &mut o, "classes")?.unwrap_or(3),
                dim: take(spec, &mut o, "dim")?.unwrap_or(2),
                per_class: take(spec, &mut o, "per_class")?.unwrap_or(200),
                separation: take(spec, &mut o, "separation")?.unwrap_or(6.0),
                seed: take(spec, &mut o, "seed")?.unwrap_or(0),
            };
            let split = match o.remove("split").as_deref() {
                None | Some("train") => Split::Train,
                Some("test") => Split::Test,
                Some(other) => return Err(bad(spec, format!("split must be train or test, got '{other}'"))),
            };
            no_leftovers(spec, &o)?;
            Ok(LoadedData {
                dataset: s.generate(split)?,
                files: Vec::new(),
            })
        }
        "idx" => {
            let mut o = options(spec, body)?;
            let images: PathBuf = require::<String>(spec, &mut o, "images")?.into();
            let labels: PathBuf = require::<String>(spec, &mut o, "labels")?.into();
            let pool: usize = take(spec, &mut o, "pool")?.unwrap_or(1);
            let limit: Option<usize> = take(spec, &mut o, "limit")?;
            let limit_seed: u64 = take(spec, &mut o, "limit_seed")?.unwrap_or(0);
            no_leftovers(spec, &o)?;
            let mut d = load_idx(&images, &labels)?;
            if pool > 1 {
                d = downscale(&d, pool)?;
            }
            if let Some(n) = limit {
                if n < d.len() {
                    d = subsample(&d, n, limit_seed)?;
                }
            }
            Ok(LoadedData {
                dataset: d,
                files: vec![images, labels],
            })
        }
        "csv" => {
            let (path, rest) = match body.split_once(",classes=") {
                Some((p, c)) => (p, Some(c)),
                None => (body, None),
            };
            let classes = rest
                .map(|c| c.parse::<usize>().map_err(|_| bad(spec, format!("bad classes '{c}'"))))
                .transpose()?;
            let path = PathBuf::from(path);
            Ok(LoadedData {
                dataset: Dataset::read_csv(&path, classes)?,
                files: vec![path],
            })
        }
        other => Err(bad(spec, format!("unknown source '{other}'"))),
    }
}

/// Metric batch: a seeded subsample, or the whole set if it is smaller than
/// `size`.
pub fn metric_batch(d: &Dataset, size: usize, seed: u64) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    if size >= d.len() {
        Ok(d.clone())
    } else {
        subsample(d, size, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_defaults_and_split() {
        let a = load("synth:classes=3,dim=2,per_class=5,seed=1").unwrap().dataset;
        let b = load("synth:classes=3,dim=2,per_class=5,seed=1,split=test")
            .unwrap()
            .dataset;
        assert_eq!(a.len(), 15);
        assert_ne!(a.inputs(), b.inputs());
    }

    #[test]
    fn rejects_unknown_keys_and_sources() {
        assert!(load("synth:colour=blue").is_err());
        assert!(load("parquet:x").is_err());
        assert!(load("nocolon").is_err());
        assert!(load("synth:split=validation").is_err());
        assert!(load("idx:images=a").is_err());
    }
}
