//! Flat JSON configuration files.
//!
//! Every key sits at the top level. Unknown keys, missing required keys and
//! invalid values are all collected and reported together.

use std::path::Path;

use serde_json::{Map, Value};

use qlse_core::ep::EpOptions;
use qlse_core::harness::{BitDepth, ExperimentConfig};
use qlse_core::model::RowPolicy;

use crate::CliError;

const RUN_KEYS: &[&str] = &[
    "n",
    "m",
    "k",
    "l",
    "snr_db",
    "bits",
    "trials",
    "seed",
    "row_policy",
    "half_range",
    "initial_ext_var",
    "doa_angles",
    "per_row_dnmse",
    "t_outer",
    "inner_iters",
    "var_floor",
    "var_cap",
    "convergence_tol",
    "inner_tol",
    "damping",
];

pub const CRB_KEYS: &[&str] = &[
    "n", "m", "k", "l", "snr_db", "bits", "seed", "trial", "row_policy", "half_range", "doa_angles", "theta", "g", "phi",
    "rows", "sigma2",
];

pub fn read_object(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Config(format!("{}: top level must be an object", path.display()))),
        Err(e) => Err(CliError::Config(format!("{}: {e}", path.display()))),
    }
}

/// Typed access to a flat object that records every problem it meets.
pub struct Fields<'a> {
    map: &'a Map<String, Value>,
    pub problems: Vec<String>,
}

impl<'a> Fields<'a> {
    pub fn new(map: &'a Map<String, Value>, allowed: &[&str]) -> Self {
        let mut problems = Vec::new();
        let mut unknown: Vec<&String> = map.keys().filter(|k| !allowed.contains(&k.as_str())).collect();
        unknown.sort();
        for k in unknown {
            problems.push(format!("unknown key \"{k}\""));
        }
        Self { map, problems }
    }

    pub fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn get<T>(&mut self, key: &str, what: &str, parse: impl Fn(&Value) -> Option<T>) -> Option<T> {
        let v = self.map.get(key)?;
        let out = parse(v);
        if out.is_none() {
            self.problems.push(format!("\"{key}\" must be {what}, got {v}"));
        }
        out
    }

    fn require<T>(&mut self, key: &str, what: &str, parse: impl Fn(&Value) -> Option<T>) -> Option<T> {
        if !self.has(key) {
            self.problems.push(format!("missing required key \"{key}\" ({what})"));
            return None;
        }
        self.get(key, what, parse)
    }

    pub fn usize(&mut self, key: &str, required: bool) -> Option<usize> {
        let f = |v: &Value| v.as_u64().map(|x| x as usize);
        if required {
            self.require(key, "a nonnegative integer", f)
        } else {
            self.get(key, "a nonnegative integer", f)
        }
    }

    pub fn u64(&mut self, key: &str) -> Option<u64> {
        self.get(key, "a nonnegative integer", Value::as_u64)
    }

    pub fn f64(&mut self, key: &str, required: bool) -> Option<f64> {
        if required {
            self.require(key, "a number", Value::as_f64)
        } else {
            self.get(key, "a number", Value::as_f64)
        }
    }

    pub fn bool(&mut self, key: &str) -> Option<bool> {
        self.get(key, "true or false", Value::as_bool)
    }

    /// A number or a list of numbers.
    pub fn f64_list(&mut self, key: &str, required: bool) -> Option<Vec<f64>> {
        let f = |v: &Value| match v {
            Value::Array(items) => items.iter().map(Value::as_f64).collect(),
            other => other.as_f64().map(|x| vec![x]),
        };
        if required {
            self.require(key, "a number or list of numbers", f)
        } else {
            self.get(key, "a number or list of numbers", f)
        }
    }

    pub fn usize_list(&mut self, key: &str) -> Option<Vec<usize>> {
        self.get(key, "a list of nonnegative integers", |v| {
            v.as_array()?.iter().map(|x| x.as_u64().map(|u| u as usize)).collect()
        })
    }

    /// A list of lists of numbers, all of equal length.
    pub fn f64_table(&mut self, key: &str) -> Option<Vec<Vec<f64>>> {
        self.get(key, "a list of equal-length lists of numbers", |v| {
            let rows: Vec<Vec<f64>> = v
                .as_array()?
                .iter()
                .map(|r| r.as_array()?.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                .collect::<Option<_>>()?;
            let width = rows.first().map_or(0, Vec::len);
            rows.iter().all(|r| r.len() == width).then_some(rows)
        })
    }

    /// A bit depth or list of bit depths; each is an integer or "analog".
    pub fn bits(&mut self, key: &str, required: bool) -> Option<Vec<BitDepth>> {
        let f = |v: &Value| -> Option<Vec<BitDepth>> {
            let one = |x: &Value| serde_json::from_value::<BitDepth>(x.clone()).ok();
            match v {
                Value::Array(items) => items.iter().map(one).collect(),
                other => one(other).map(|b| vec![b]),
            }
        };
        let what = "a bit depth (integer or \"analog\") or a list of them";
        if required {
            self.require(key, what, f)
        } else {
            self.get(key, what, f)
        }
    }

    pub fn row_policy(&mut self, key: &str) -> Option<RowPolicy> {
        self.get(key, "\"prefix\" or \"random\"", |v| serde_json::from_value(v.clone()).ok())
    }

    pub fn finish(self) -> Result<(), CliError> {
        if self.problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(self.problems.join("\n")))
        }
    }
}

/// Experiment configuration for `run`.
pub fn experiment_from_map(map: &Map<String, Value>) -> Result<ExperimentConfig, CliError> {
    let mut f = Fields::new(map, RUN_KEYS);
    let base = ExperimentConfig::default();
    let d = EpOptions::default();
    let cfg = ExperimentConfig {
        n: f.usize("n", true).unwrap_or(base.n),
        m: f.usize("m", true).unwrap_or(base.m),
        k: f.usize("k", true).unwrap_or(base.k),
        l: f.usize("l", true).unwrap_or(base.l),
        snr_db: f.f64_list("snr_db", true).unwrap_or(base.snr_db),
        bits: f.bits("bits", true).unwrap_or(base.bits),
        trials: f.usize("trials", false).unwrap_or(base.trials),
        seed: f.u64("seed").unwrap_or(base.seed),
        row_policy: f.row_policy("row_policy").unwrap_or(base.row_policy),
        half_range: f.f64("half_range", false),
        initial_ext_var: f.f64("initial_ext_var", false),
        doa_angles: f.f64_list("doa_angles", false),
        per_row_dnmse: f.bool("per_row_dnmse").unwrap_or(false),
        estimator: EpOptions {
            t_outer: f.usize("t_outer", false).unwrap_or(d.t_outer),
            inner_iters: f.usize("inner_iters", false).unwrap_or(d.inner_iters),
            var_floor: f.f64("var_floor", false).unwrap_or(d.var_floor),
            var_cap: f.f64("var_cap", false).unwrap_or(d.var_cap),
            convergence_tol: f.f64("convergence_tol", false).unwrap_or(d.convergence_tol),
            inner_tol: f.f64("inner_tol", false).unwrap_or(d.inner_tol),
            damping: f.f64("damping", false).unwrap_or(d.damping),
            ..d
        },
    };
    let parse_ok = f.problems.is_empty();
    let mut problems = f.problems;
    // Semantic checks only make sense once every field parsed.
    if parse_ok {
        if let Err(e) = cfg.validate() {
            problems.extend(e.to_string().trim_start_matches("invalid configuration: ").split("; ").map(String::from));
        }
    }
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Config(problems.join("\n")))
    }
}
