//! Flat `key = value` run configuration with CLI override precedence.
//!
//! The format is deliberately plain so that resolved configurations can be
//! diffed and embedded verbatim in output files: one `key = value` pair per
//! line, `#` comments, no sections. Unknown keys are an error.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{DoseInterval, ModelParams, Theta2Bounds};
use crate::numfmt;
use crate::simulation::Scenario;

/// Stdout rendering selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

/// Resolved run configuration: scenario parameters plus output options.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub theta0_true: f64,
    pub theta1_true: f64,
    pub theta2_true: f64,
    pub theta2_guess: f64,
    pub sigma: f64,
    /// Optional first-stage noise override (degenerate-mixture studies).
    pub sigma1: Option<f64>,
    pub n1: usize,
    pub n2: usize,
    pub a: f64,
    pub b: f64,
    pub replications: usize,
    pub seed: u64,
    pub theta2_min: f64,
    pub theta2_max: f64,
    /// 0 = automatic.
    pub threads: usize,
    pub out_dir: PathBuf,
    pub format: OutputFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            theta0_true: 2.0,
            theta1_true: 0.467,
            theta2_true: 25.0,
            theta2_guess: 50.0,
            sigma: 0.1,
            sigma1: None,
            n1: 27,
            n2: 270,
            a: 0.0,
            b: 150.0,
            replications: 10_000,
            seed: 20_240_601,
            theta2_min: 0.015,
            theta2_max: 1500.0,
            threads: 0,
            out_dir: PathBuf::from("."),
            format: OutputFormat::Csv,
        }
    }
}

impl RunConfig {
    /// Parses a configuration file on top of the defaults.
    pub fn from_file_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.split_once('#') {
                Some((before, _)) => before.trim(),
                None => raw.trim(),
            };
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.contains(&key.to_string()) {
                return Err(Error::parse(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            seen.push(key.to_string());
            cfg.set(key, value)
                .map_err(|e| Error::parse(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::parse(format!("bad value '{value}' for key '{key}'")))
        }
        match key {
            "theta0_true" => self.theta0_true = num(key, value)?,
            "theta1_true" => self.theta1_true = num(key, value)?,
            "theta2_true" => self.theta2_true = num(key, value)?,
            "theta2_guess" => self.theta2_guess = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "sigma1" => self.sigma1 = Some(num(key, value)?),
            "n1" => self.n1 = num(key, value)?,
            "n2" => self.n2 = num(key, value)?,
            "a" => self.a = num(key, value)?,
            "b" => self.b = num(key, value)?,
            "replications" => self.replications = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "theta2_min" => self.theta2_min = num(key, value)?,
            "theta2_max" => self.theta2_max = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "format" => {
                self.format = match value {
                    "csv" => OutputFormat::Csv,
                    "json" => OutputFormat::Json,
                    other => {
                        return Err(Error::parse(format!(
                            "format must be 'csv' or 'json', got '{other}'"
                        )))
                    }
                }
            }
            other => return Err(Error::parse(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn bounds(&self) -> Result<Theta2Bounds> {
        Theta2Bounds::new(self.theta2_min, self.theta2_max)
    }

    pub fn dose_interval(&self) -> Result<DoseInterval> {
        DoseInterval::new(self.a, self.b)
    }

    pub fn theta_true(&self) -> Result<ModelParams> {
        ModelParams::with_bounds(
            self.theta0_true,
            self.theta1_true,
            self.theta2_true,
            &self.bounds()?,
        )
    }

    pub fn to_scenario(&self) -> Result<Scenario> {
        let scenario = Scenario {
            theta_true: self.theta_true()?,
            theta2_guess: self.theta2_guess,
            sigma: self.sigma,
            stage1_sigma: self.sigma1,
            n1: self.n1,
            n2: self.n2,
            dose_interval: self.dose_interval()?,
            replications: self.replications,
            master_seed: self.seed,
            bounds: self.bounds()?,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Resolved configuration as ordered key/value pairs, for provenance
    /// headers and JSON echoes.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("theta0_true".into(), numfmt::machine(self.theta0_true)),
            ("theta1_true".into(), numfmt::machine(self.theta1_true)),
            ("theta2_true".into(), numfmt::machine(self.theta2_true)),
            ("theta2_guess".into(), numfmt::machine(self.theta2_guess)),
            ("sigma".into(), numfmt::machine(self.sigma)),
        ];
        if let Some(s1) = self.sigma1 {
            kv.push(("sigma1".into(), numfmt::machine(s1)));
        }
        kv.extend([
            ("n1".into(), self.n1.to_string()),
            ("n2".into(), self.n2.to_string()),
            ("a".into(), numfmt::machine(self.a)),
            ("b".into(), numfmt::machine(self.b)),
            ("replications".into(), self.replications.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("theta2_min".into(), numfmt::machine(self.theta2_min)),
            ("theta2_max".into(), numfmt::machine(self.theta2_max)),
            ("threads".into(), self.threads.to_string()),
            ("out_dir".into(), self.out_dir.display().to_string()),
            ("format".into(), self.format.as_str().to_string()),
        ]);
        kv
    }
}

/// Grid specification `start:stop:count` with an optional `log`/`lin` suffix.
pub fn parse_grid_spec(spec: &str) -> Result<Vec<f64>> {
    let (body, log) = if let Some(stripped) = spec.strip_suffix("log") {
        (stripped, true)
    } else if let Some(stripped) = spec.strip_suffix("lin") {
        (stripped, false)
    } else {
        (spec, false)
    };
    let parts: Vec<&str> = body.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::parse(format!(
            "grid spec must be 'start:stop:count(log|lin)', got '{spec}'"
        )));
    }
    let start: f64 = parts[0]
        .parse()
        .map_err(|_| Error::parse(format!("bad grid start '{}'", parts[0])))?;
    let stop: f64 = parts[1]
        .parse()
        .map_err(|_| Error::parse(format!("bad grid stop '{}'", parts[1])))?;
    let count: usize = parts[2]
        .parse()
        .map_err(|_| Error::parse(format!("bad grid count '{}'", parts[2])))?;
    if count < 2 || !(start.is_finite() && stop.is_finite()) || start >= stop {
        return Err(Error::parse(format!("grid spec '{spec}' must have start < stop and count >= 2")));
    }
    if log && start <= 0.0 {
        return Err(Error::parse("log grid needs a positive start".to_string()));
    }
    let mut grid = Vec::with_capacity(count);
    for k in 0..count {
        let t = k as f64 / (count - 1) as f64;
        let v = if log {
            (start.ln() + t * (stop.ln() - start.ln())).exp()
        } else {
            start + t * (stop - start)
        };
        grid.push(v);
    }
    grid[0] = start;
    grid[count - 1] = stop;
    Ok(grid)
}
