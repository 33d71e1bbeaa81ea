//! Run configuration: defaults, named presets, JSON files and flag overrides.
//!
//! Layers are merged as JSON objects in the order defaults < preset < file <
//! flags, then deserialized once so every schema error carries its key path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sketchvar::active_learning::{Acquisition, SigmaSource};
use sketchvar::experiments::{DimensionFamily, Generator, LambdaRule, SketchRule};
use sketchvar::{KernelSpec, SketchDistribution};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub response: String,
    pub features: Vec<String>,
    #[serde(default)]
    pub standardize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActiveSection {
    pub pool_size: usize,
    pub test_size: usize,
    pub initial_size: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub acquisitions: Vec<Acquisition>,
    pub rescale_on_grow: bool,
    pub early_stop: bool,
    pub sigma_source: SigmaSource,
    pub pool_csv: Option<CsvSource>,
    pub test_csv: Option<CsvSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct V2PointSection {
    pub kernel_matrix: Vec<Vec<f64>>,
    pub lambda: f64,
    pub sigma: f64,
    pub k_x: Vec<f64>,
    /// Rows of `S`; the identity when absent.
    pub sketch: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub preset: Option<String>,
    pub kernel: KernelSpec,
    pub generator: Generator,
    pub sigma: f64,
    pub seeds: Vec<u64>,
    pub grid_size: usize,
    pub distribution: SketchDistribution,
    pub record_timing: bool,
    pub lambda_rule: LambdaRule,
    pub m_rule: SketchRule,
    pub n: usize,
    pub n_list: Vec<usize>,
    pub m_family: DimensionFamily,
    pub c_list: Vec<f64>,
    pub sigma_list: Vec<f64>,
    pub c_prime: f64,
    pub queries: usize,
    pub active: ActiveSection,
    pub v2_point: V2PointSection,
    pub out: PathBuf,
}

pub const COMMANDS: [&str; 7] = [
    "gap-n",
    "gap-m",
    "gap-sigma",
    "active-learn",
    "assumption-check",
    "bench",
    "v2-point",
];

pub const PRESETS: [&str; 8] = ["fig1a", "fig1b", "fig1c", "fig1d", "fig1e", "fig1f", "sim1", "sim2"];

fn steps(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let count = ((stop - start) / step).round() as usize;
    (0..=count).map(|i| ((start + step * i as f64) * 1e6).round() / 1e6).collect()
}

fn seed_range(k: u64) -> Vec<u64> {
    (0..k).collect()
}

/// Built-in values for every key.
pub fn defaults() -> Value {
    json!({
        "command": "",
        "preset": null,
        "kernel": { "family": "gaussian", "bandwidth": 0.25 },
        "generator": "uniform_quadratic",
        "sigma": 1.0,
        "seeds": [0],
        "grid_size": 100,
        "distribution": "gaussian",
        "record_timing": false,
        "lambda_rule": { "rule": "log_power", "scale": 1.0, "power": 0.5 },
        "m_rule": { "rule": "log_power", "scale": 2.0, "power": 0.5 },
        "n": 1000,
        "n_list": [50, 100, 200, 400, 800],
        "m_family": { "family": "logarithmic", "scale": 1.2, "p": 2.0 },
        "c_list": steps(0.3, 1.8, 0.1),
        "sigma_list": steps(0.5, 5.0, 0.5),
        "c_prime": 2.0,
        "queries": 100,
        "active": {
            "pool_size": 2000,
            "test_size": 2000,
            "initial_size": 100,
            "batch_size": 30,
            "iterations": 20,
            "acquisitions": ["v2", "uniform"],
            "rescale_on_grow": true,
            "early_stop": false,
            "sigma_source": { "source": "fixed", "value": 1.0 },
            "pool_csv": null,
            "test_csv": null
        },
        "v2_point": {
            "kernel_matrix": [[1.0]],
            "lambda": 1.0,
            "sigma": 1.0,
            "k_x": [1.0],
            "sketch": null
        },
        "out": "sketchvar-out"
    })
}

/// The subcommand a preset belongs to and its overrides of the defaults.
pub fn preset(name: &str) -> Option<(&'static str, Value)> {
    let n_sweep: Vec<usize> = (1..=20).map(|i| 50 * i).collect();
    let cubic = json!({ "family": "sobolev_cubic" });
    let gaussian = json!({ "family": "gaussian", "bandwidth": 0.25 });
    let cubic_lambda = json!({ "rule": "power", "scale": 1.0, "exponent": -0.8 });
    let gaussian_lambda = json!({ "rule": "log_power", "scale": 1.0, "power": 0.5 });
    let cubic_m = json!({ "rule": "power", "scale": 1.5, "exponent": 0.2 });
    let gaussian_m = json!({ "rule": "log_power", "scale": 2.0, "power": 0.5 });
    let figure_seeds = seed_range(20);
    let out = match name {
        "fig1a" => (
            "gap-n",
            json!({ "kernel": cubic, "n_list": n_sweep, "m_rule": cubic_m,
                    "lambda_rule": cubic_lambda, "seeds": figure_seeds }),
        ),
        "fig1b" => (
            "gap-n",
            json!({ "kernel": gaussian, "n_list": n_sweep, "m_rule": gaussian_m,
                    "lambda_rule": gaussian_lambda, "seeds": figure_seeds }),
        ),
        "fig1c" => (
            "gap-m",
            json!({ "kernel": cubic, "n": 1000, "lambda_rule": cubic_lambda,
                    "m_family": { "family": "polynomial", "scale": 1.2, "alpha": 2.0 },
                    "c_list": steps(0.4, 1.9, 0.1), "seeds": figure_seeds }),
        ),
        "fig1d" => (
            "gap-m",
            json!({ "kernel": gaussian, "n": 1000, "lambda_rule": gaussian_lambda,
                    "m_family": { "family": "logarithmic", "scale": 1.2, "p": 2.0 },
                    "c_list": steps(0.3, 1.8, 0.1), "seeds": figure_seeds }),
        ),
        "fig1e" => (
            "gap-sigma",
            json!({ "kernel": cubic, "n": 1000, "m_rule": cubic_m, "lambda_rule": cubic_lambda,
                    "sigma_list": steps(0.5, 5.0, 0.5), "seeds": figure_seeds }),
        ),
        "fig1f" => (
            "gap-sigma",
            json!({ "kernel": gaussian, "n": 1000, "m_rule": gaussian_m, "lambda_rule": gaussian_lambda,
                    "sigma_list": steps(0.5, 5.0, 0.5), "seeds": figure_seeds }),
        ),
        "sim1" | "sim2" => (
            "active-learn",
            json!({
                "kernel": gaussian,
                "generator": if name == "sim1" { "uniform_quadratic" } else { "clustered" },
                "lambda_rule": gaussian_lambda,
                "m_rule": { "rule": "log_power", "scale": 1.0, "power": 1.0 },
                "seeds": seed_range(30),
                "active": {
                    "pool_size": 5000,
                    "test_size": 1000,
                    "initial_size": 100,
                    "batch_size": 30,
                    "iterations": if name == "sim1" { 30 } else { 50 }
                }
            }),
        ),
        _ => return None,
    };
    Some(out)
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if v.is_object() && slot.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Command-line values that override configuration keys, still as raw strings.
#[derive(Clone, Debug, Default)]
pub struct FlagOverrides {
    pub seeds: Option<String>,
    pub out: Option<PathBuf>,
    pub n: Option<String>,
    pub n_list: Option<String>,
    pub c_list: Option<String>,
    pub sigma_list: Option<String>,
    pub sigma: Option<String>,
    pub m: Option<String>,
    pub lambda: Option<String>,
    pub grid_size: Option<String>,
    pub iterations: Option<String>,
    pub batch_size: Option<String>,
    pub initial_size: Option<String>,
    pub pool_size: Option<String>,
    pub queries: Option<String>,
    pub kernel: Option<String>,
    pub bandwidth: Option<String>,
    pub generator: Option<String>,
    pub c_prime: Option<String>,
    pub record_timing: bool,
}

fn malformed(key: &str, raw: &str, what: &str) -> CliError {
    CliError::Config(format!("{key}: expected {what}, got `{raw}`"))
}

fn parse_uint(key: &str, raw: &str) -> Result<Value, CliError> {
    raw.trim()
        .parse::<u64>()
        .map(Value::from)
        .map_err(|_| malformed(key, raw, "a nonnegative integer"))
}

fn parse_float(key: &str, raw: &str) -> Result<Value, CliError> {
    match raw.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Value::from(v)),
        _ => Err(malformed(key, raw, "a finite number")),
    }
}

fn parse_list(key: &str, raw: &str, item: fn(&str, &str) -> Result<Value, CliError>) -> Result<Value, CliError> {
    let items = raw
        .split(',')
        .enumerate()
        .map(|(i, part)| item(&format!("{key}[{i}]"), part))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Value::Array(items))
}

impl FlagOverrides {
    /// JSON patch for the flags that were given.
    pub fn to_patch(&self, command: &str) -> Result<Value, CliError> {
        let mut p = Map::new();
        let mut active = Map::new();
        let mut v2 = Map::new();
        if let Some(raw) = &self.seeds {
            p.insert("seeds".into(), parse_list("seeds", raw, parse_uint)?);
        }
        if let Some(out) = &self.out {
            p.insert("out".into(), Value::from(out.to_string_lossy().into_owned()));
        }
        if let Some(raw) = &self.n {
            p.insert("n".into(), parse_uint("n", raw)?);
        }
        if let Some(raw) = &self.n_list {
            p.insert("n_list".into(), parse_list("n_list", raw, parse_uint)?);
        }
        if let Some(raw) = &self.c_list {
            p.insert("c_list".into(), parse_list("c_list", raw, parse_float)?);
        }
        if let Some(raw) = &self.sigma_list {
            p.insert("sigma_list".into(), parse_list("sigma_list", raw, parse_float)?);
        }
        if let Some(raw) = &self.sigma {
            let v = parse_float("sigma", raw)?;
            if command == "v2-point" {
                v2.insert("sigma".into(), v);
            } else {
                p.insert("sigma".into(), v);
            }
        }
        if let Some(raw) = &self.m {
            let m = parse_uint("m", raw)?;
            p.insert("m_rule".into(), json!({ "rule": "fixed", "m": m }));
        }
        if let Some(raw) = &self.lambda {
            let v = parse_float("lambda", raw)?;
            if command == "v2-point" {
                v2.insert("lambda".into(), v);
            } else {
                p.insert("lambda_rule".into(), json!({ "rule": "fixed", "value": v }));
            }
        }
        if let Some(raw) = &self.grid_size {
            p.insert("grid_size".into(), parse_uint("grid_size", raw)?);
        }
        if let Some(raw) = &self.queries {
            p.insert("queries".into(), parse_uint("queries", raw)?);
        }
        if let Some(raw) = &self.c_prime {
            p.insert("c_prime".into(), parse_float("c_prime", raw)?);
        }
        for (key, raw) in [
            ("iterations", &self.iterations),
            ("batch_size", &self.batch_size),
            ("initial_size", &self.initial_size),
            ("pool_size", &self.pool_size),
        ] {
            if let Some(raw) = raw {
                active.insert(key.into(), parse_uint(&format!("active.{key}"), raw)?);
            }
        }
        if let Some(raw) = &self.kernel {
            let mut k = Map::new();
            k.insert("family".into(), Value::from(raw.clone()));
            if raw == "gaussian" {
                let h = match &self.bandwidth {
                    Some(b) => parse_float("kernel.bandwidth", b)?,
                    None => Value::from(0.25),
                };
                k.insert("bandwidth".into(), h);
            }
            p.insert("kernel".into(), Value::Object(k));
        } else if let Some(raw) = &self.bandwidth {
            p.insert(
                "kernel".into(),
                json!({ "family": "gaussian", "bandwidth": parse_float("kernel.bandwidth", raw)? }),
            );
        }
        if let Some(raw) = &self.generator {
            p.insert("generator".into(), Value::from(raw.clone()));
        }
        if self.record_timing {
            p.insert("record_timing".into(), Value::from(true));
        }
        if !active.is_empty() {
            p.insert("active".into(), Value::Object(active));
        }
        if !v2.is_empty() {
            p.insert("v2_point".into(), Value::Object(v2));
        }
        Ok(Value::Object(p))
    }
}

/// Resolves the layered configuration for `command`.
pub fn resolve(
    command: &str,
    preset_name: Option<&str>,
    config_path: Option<&Path>,
    flags: &FlagOverrides,
) -> Result<RunConfig, CliError> {
    let mut value = defaults();
    if let Some(name) = preset_name {
        let (preset_command, patch) = preset(name).ok_or_else(|| {
            CliError::Config(format!("unknown preset `{name}`; available: {}", PRESETS.join(", ")))
        })?;
        if preset_command != command {
            return Err(CliError::Config(format!(
                "preset `{name}` belongs to `{preset_command}`, not `{command}`"
            )));
        }
        merge(&mut value, patch);
        merge(&mut value, json!({ "preset": name }));
    }
    if let Some(path) = config_path {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !file.is_object() {
            return Err(CliError::Config(format!("config {} must be a JSON object", path.display())));
        }
        merge(&mut value, file);
    }
    merge(&mut value, flags.to_patch(command)?);
    merge(&mut value, json!({ "command": command }));

    let config: RunConfig = serde_path_to_error::deserialize(value)
        .map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if !COMMANDS.contains(&self.command.as_str()) {
            return bad(format!("command: unknown subcommand `{}`", self.command));
        }
        if self.seeds.is_empty() {
            return bad("seeds: at least one seed is required".into());
        }
        if self.grid_size == 0 {
            return bad("grid_size: must be positive".into());
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma: must be positive, got {}", self.sigma));
        }
        if let Err(e) = self.kernel.validate() {
            return bad(format!("kernel: {e}"));
        }
        match self.command.as_str() {
            "gap-n" if self.n_list.is_empty() => return bad("n_list: must be non-empty".into()),
            "gap-m" if self.c_list.is_empty() => return bad("c_list: must be non-empty".into()),
            "gap-sigma" if self.sigma_list.is_empty() => return bad("sigma_list: must be non-empty".into()),
            "active-learn" if self.active.acquisitions.is_empty() => {
                return bad("active.acquisitions: must be non-empty".into())
            }
            _ => {}
        }
        for (i, &s) in self.sigma_list.iter().enumerate() {
            if !(s > 0.0) {
                return bad(format!("sigma_list[{i}]: must be positive, got {s}"));
            }
        }
        for (i, &n) in self.n_list.iter().enumerate() {
            if n < 2 {
                return bad(format!("n_list[{i}]: must be at least 2, got {n}"));
            }
        }
        Ok(())
    }

    /// Pretty JSON of the fully resolved configuration.
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
