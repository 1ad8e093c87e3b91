//! Run configuration: defaults, optional JSON file, then `--section.key value` flags.

use std::path::Path;

use hsiseg::dataset::PrepConfig;
use hsiseg::pipeline::ExperimentConfig;
use hsiseg::quality::{FilterConfig, WeightConfig};
use hsiseg::synth::PhantomSpec;
use hsiseg::tiling::SlicParams;
use hsiseg::training::TrainConfig;
use hsiseg::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub images: usize,
    pub synth: PhantomSpec,
    pub tiling: SlicParams,
    pub filter: FilterConfig,
    pub weights: WeightConfig,
    pub split: (f64, f64, f64),
    pub cnn_train: TrainConfig,
    pub gnn_train: TrainConfig,
    pub models: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        RunConfig {
            seed: e.seed,
            images: e.images,
            synth: e.synth,
            tiling: e.prep.tiling,
            filter: e.prep.filter,
            weights: e.prep.weights,
            split: e.split,
            cnn_train: e.cnn_train,
            gnn_train: e.gnn_train,
            models: e.models,
        }
    }
}

impl RunConfig {
    pub fn prep(&self) -> PrepConfig {
        PrepConfig {
            tiling: self.tiling,
            filter: self.filter,
            weights: self.weights,
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            images: self.images,
            synth: self.synth.clone(),
            prep: self.prep(),
            split: self.split,
            cnn_train: self.cnn_train.clone(),
            gnn_train: self.gnn_train.clone(),
            models: self.models.clone(),
        }
    }

    /// Defaults, then the file at `path`, then each `(key, value)` override in order.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let file: Value = serde_json::from_slice(&std::fs::read(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge(&mut doc, file);
        }
        for (key, raw) in overrides {
            set_path(&mut doc, key, raw)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// Sets `a.b.c` to `raw`, read as JSON when possible and as a string otherwise.
fn set_path(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut slot = &mut *doc;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(m) => m
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?,
            Value::Array(a) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("'{part}' in '{key}' is not an index")))?;
                a.get_mut(i)
                    .ok_or_else(|| Error::Config(format!("index {i} out of range in '{key}'")))?
            }
            _ => return Err(Error::Config(format!("'{key}' goes below a scalar"))),
        };
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

pub type Overrides = Vec<(String, String)>;

/// Splits `--section.key value` and `--section.key=value` pairs out of `args`.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().unwrap_or("").contains('.')) else {
            rest.push(a);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn dotted_flags_are_split_out() {
        let (rest, ov) =
            extract_overrides(args("hsiseg tile --tiling.compactness 0.2 --cube a.hsc --synth.width=64")).unwrap();
        assert_eq!(rest, args("hsiseg tile --cube a.hsc"));
        assert_eq!(
            ov,
            vec![
                ("tiling.compactness".into(), "0.2".into()),
                ("synth.width".into(), "64".into())
            ]
        );
        assert!(extract_overrides(args("x --tiling.max_iters")).is_err());
    }

    #[test]
    fn overrides_apply_on_top_of_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 3, "tiling": {"compactness": 0.5}}"#).unwrap();
        let cfg = RunConfig::resolve(
            Some(&path),
            &[
                ("tiling.distance".into(), "l2".into()),
                ("cnn_train.epochs".into(), "4".into()),
                ("split.0".into(), "0.5".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.tiling.compactness, 0.5);
        assert_eq!(cfg.tiling.distance, hsiseg::SpectralDistance::L2);
        assert_eq!(cfg.cnn_train.epochs, 4);
        assert_eq!(cfg.split.0, 0.5);
        assert_eq!(cfg.synth, RunConfig::default().synth);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let bad = [("tiling.nope", "1"), ("seed", "\"x\""), ("seed.a", "1")];
        for (k, v) in bad {
            let err = RunConfig::resolve(None, &[(k.into(), v.into())]).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{k}: {err}");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
