//! Run configuration: defaults, `key=value` config files, flag overrides,
//! and the fully materialized record that is stamped into every output
//! file.
//!
//! Every knob has a default, so a materialized config is always complete;
//! list- and grid-valued knobs are kept in their spec-string form
//! (`"2.7:2.95:0.05"`, `"3,4,5,6"`) so that emitting a config and parsing
//! it back reproduces the struct exactly.

use brl_core::ensembles::{DiagLaw, EnsembleSpec, ModelSpec};
use brl_core::linalg::RealSymBlock;
use thiserror::Error;

/// Matrix entries further than this from symmetry reject an `A` source.
pub const SYMMETRY_TOLERANCE: f64 = 1.0e-12;

/// Default burn-in generations for disordered pools; free pools are seeded
/// exactly at the fixed point and default to zero instead.
pub const DEFAULT_BURN_IN: u64 = 300;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown configuration key '{key}'")]
    UnknownKey { key: String },
    #[error("bad value '{value}' for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("bad base matrix: {reason}")]
    BadMatrixFile { reason: String },
    #[error("bad grid spec '{spec}': {reason}")]
    BadGrid { spec: String, reason: String },
    #[error("{subcommand} needs a single value for {key}, got {got}")]
    NeedsSingleValue {
        subcommand: String,
        key: String,
        got: usize,
    },
    #[error("missing required value for {key}")]
    MissingRequired { key: String },
    #[error("config file: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] brl_core::ensembles::ModelError),
}

/// Fully materialized run configuration.
///
/// Field order is the emission order in output metadata.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct RunConfig {
    pub subcommand: String,
    pub k: usize,
    pub w: usize,
    /// Base matrix source: `diag:v1,...,vW`, `rows:r11 r12;r21 r22`, or
    /// `file:path` (canonicalized to `rows:` form when materialized).
    pub a: String,
    /// Disorder ensemble: `goe`, `cauchy:<scale>`, `diag-normal`, or
    /// `diag-uniform:<half_width>`.
    pub ensemble: String,
    /// Coupling grid spec; most subcommands require a single value.
    pub lambda: String,
    /// Energy grid spec.
    pub e: String,
    /// Eta list spec; the Simon-Wolff ladder must be strictly decreasing.
    pub eta: String,
    /// Interval shrink for the `sets` report.
    pub eps: f64,
    /// Ray length of the Lyapunov chain estimator.
    pub chain: usize,
    /// Pool size for equilibrated forward messages.
    pub pool: usize,
    /// Pool burn-in generations; materialized to zero at zero coupling
    /// (the pool is seeded exactly at the free fixed point).
    pub burn_in: u64,
    /// Independent rays per Lyapunov estimate.
    pub replicas: usize,
    /// Trees per resonance moment estimate.
    pub trees: usize,
    /// Fractional exponent list spec for the `phi` subcommand.
    pub s: String,
    /// Resonance threshold margin.
    pub delta: f64,
    /// Quantile level for the message-quantile event.
    pub p: f64,
    /// Maximum distance for `phi` scans and Simon-Wolff sums.
    pub depth: usize,
    /// Sphere radius list spec for the `resonance` subcommand.
    pub radii: String,
    /// Rays per rung in the sampled Simon-Wolff mode.
    pub rays: usize,
    /// Monte-Carlo samples per `phi` distance scan.
    pub samples: usize,
    /// Lyapunov reference for resonance thresholds: `auto` (estimated at
    /// run time and materialized) or a number.
    pub l_ref: String,
    /// Resonance event mode: `diagonal` or `quantile`.
    pub mode: String,
    /// Message-quantile threshold: `auto` (pool quantile, materialized) or
    /// a number.
    pub xi: String,
    /// Simon-Wolff evaluation mode: `sampled` or `exact`.
    pub sw_mode: String,
    pub seed: u64,
    /// Output destination; `-` writes the document to stdout.
    pub out: String,
    /// Output format: `csv` or `json`.
    pub format: String,
    /// Work-unit partition count; unit seeding is keyed by absolute index,
    /// so results are invariant under the partition.
    pub shards: usize,
    /// Pool checkpoint path (single-point Lyapunov runs); empty disables.
    pub checkpoint: String,
    /// Pool checkpoint to resume from; empty disables.
    pub resume: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            subcommand: String::new(),
            k: 2,
            w: 1,
            a: "diag:0".to_string(),
            ensemble: "goe".to_string(),
            lambda: "0".to_string(),
            e: "0".to_string(),
            eta: "0.001".to_string(),
            eps: 0.5,
            chain: 2000,
            pool: 2000,
            burn_in: DEFAULT_BURN_IN,
            replicas: 4,
            trees: 400,
            s: "0.5".to_string(),
            delta: 0.05,
            p: 0.5,
            depth: 12,
            radii: "3".to_string(),
            rays: 200,
            samples: 2000,
            l_ref: "auto".to_string(),
            mode: "diagonal".to_string(),
            xi: "auto".to_string(),
            sw_mode: "sampled".to_string(),
            seed: 0,
            out: "-".to_string(),
            format: "csv".to_string(),
            shards: 1,
            checkpoint: String::new(),
            resume: String::new(),
        }
    }
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

impl RunConfig {
    /// Applies one `key=value` pair, validating the value's shape.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let parse_usize = |key: &str, v: &str| -> Result<usize, ConfigError> {
            v.parse::<usize>()
                .map_err(|e| bad(key, v, &e.to_string()))
        };
        let parse_u64 = |key: &str, v: &str| -> Result<u64, ConfigError> {
            v.parse::<u64>().map_err(|e| bad(key, v, &e.to_string()))
        };
        let parse_f64 = |key: &str, v: &str| -> Result<f64, ConfigError> {
            v.parse::<f64>().map_err(|e| bad(key, v, &e.to_string()))
        };
        match key {
            "subcommand" => self.subcommand = value.to_string(),
            "k" => self.k = parse_usize(key, value)?,
            "w" => self.w = parse_usize(key, value)?,
            "a" => self.a = value.to_string(),
            "ensemble" => self.ensemble = value.to_string(),
            "lambda" => self.lambda = value.to_string(),
            "e" => self.e = value.to_string(),
            "eta" => self.eta = value.to_string(),
            "eps" => self.eps = parse_f64(key, value)?,
            "chain" => self.chain = parse_usize(key, value)?,
            "pool" => self.pool = parse_usize(key, value)?,
            "burn_in" => self.burn_in = parse_u64(key, value)?,
            "replicas" => self.replicas = parse_usize(key, value)?,
            "trees" => self.trees = parse_usize(key, value)?,
            "s" => self.s = value.to_string(),
            "delta" => self.delta = parse_f64(key, value)?,
            "p" => self.p = parse_f64(key, value)?,
            "depth" => self.depth = parse_usize(key, value)?,
            "radii" => self.radii = value.to_string(),
            "rays" => self.rays = parse_usize(key, value)?,
            "samples" => self.samples = parse_usize(key, value)?,
            "l_ref" => self.l_ref = value.to_string(),
            "mode" => self.mode = value.to_string(),
            "xi" => self.xi = value.to_string(),
            "sw_mode" => self.sw_mode = value.to_string(),
            "seed" => self.seed = parse_u64(key, value)?,
            "out" => self.out = value.to_string(),
            "format" => self.format = value.to_string(),
            "shards" => self.shards = parse_usize(key, value)?,
            "checkpoint" => self.checkpoint = value.to_string(),
            "resume" => self.resume = value.to_string(),
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Emits the config as canonical `key=value` lines (one per field, in
    /// field order).  Parsing these lines back reproduces the struct.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("subcommand".into(), self.subcommand.clone()),
            ("k".into(), self.k.to_string()),
            ("w".into(), self.w.to_string()),
            ("a".into(), self.a.clone()),
            ("ensemble".into(), self.ensemble.clone()),
            ("lambda".into(), self.lambda.clone()),
            ("e".into(), self.e.clone()),
            ("eta".into(), self.eta.clone()),
            ("eps".into(), self.eps.to_string()),
            ("chain".into(), self.chain.to_string()),
            ("pool".into(), self.pool.to_string()),
            ("burn_in".into(), self.burn_in.to_string()),
            ("replicas".into(), self.replicas.to_string()),
            ("trees".into(), self.trees.to_string()),
            ("s".into(), self.s.clone()),
            ("delta".into(), self.delta.to_string()),
            ("p".into(), self.p.to_string()),
            ("depth".into(), self.depth.to_string()),
            ("radii".into(), self.radii.clone()),
            ("rays".into(), self.rays.to_string()),
            ("samples".into(), self.samples.to_string()),
            ("l_ref".into(), self.l_ref.clone()),
            ("mode".into(), self.mode.clone()),
            ("xi".into(), self.xi.clone()),
            ("sw_mode".into(), self.sw_mode.clone()),
            ("seed".into(), self.seed.to_string()),
            ("out".into(), self.out.clone()),
            ("format".into(), self.format.clone()),
            ("shards".into(), self.shards.to_string()),
            ("checkpoint".into(), self.checkpoint.clone()),
            ("resume".into(), self.resume.clone()),
        ]
    }

    /// Builds the model described by the `k/w/a/ensemble/lambda` knobs; the
    /// subcommand's lambda is taken from the caller because `lambda` may be
    /// a grid.
    pub fn model_at(&self, lambda: f64) -> Result<ModelSpec, ConfigError> {
        let a = parse_a(&self.a, self.w)?;
        let ensemble = parse_ensemble(&self.ensemble)?;
        Ok(ModelSpec::new(self.k, self.w, a, ensemble, lambda)?)
    }

    pub fn lambda_grid(&self) -> Result<Vec<f64>, ConfigError> {
        parse_grid(&self.lambda)
    }

    pub fn e_grid(&self) -> Result<Vec<f64>, ConfigError> {
        parse_grid(&self.e)
    }

    pub fn eta_list(&self) -> Result<Vec<f64>, ConfigError> {
        parse_grid(&self.eta)
    }

    pub fn s_list(&self) -> Result<Vec<f64>, ConfigError> {
        parse_grid(&self.s)
    }

    pub fn radii_list(&self) -> Result<Vec<usize>, ConfigError> {
        parse_usize_list(&self.radii)
    }

    /// The single value of a grid-valued knob, for subcommands that cannot
    /// scan it.
    pub fn single(&self, key: &str, values: &[f64]) -> Result<f64, ConfigError> {
        if values.len() != 1 {
            return Err(ConfigError::NeedsSingleValue {
                subcommand: self.subcommand.clone(),
                key: key.to_string(),
                got: values.len(),
            });
        }
        Ok(values[0])
    }

    /// Replaces the burn-in default with zero when every coupling in the
    /// run is zero: free pools start exactly at the fixed point, and
    /// in-band resampling would only precess around it.
    pub fn materialize_burn_in(&mut self, explicit: bool) -> Result<(), ConfigError> {
        if explicit {
            return Ok(());
        }
        let lambdas = self.lambda_grid()?;
        if lambdas.iter().all(|l| *l == 0.0) {
            self.burn_in = 0;
        }
        Ok(())
    }
}

/// Parses a grid spec: a single number, a comma list, or `lo:hi:step`
/// (inclusive of `hi` up to roundoff).
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, ConfigError> {
    let reject = |reason: &str| ConfigError::BadGrid {
        spec: spec.to_string(),
        reason: reason.to_string(),
    };
    let trimmed = spec.trim();
    if trimmed.is_empty() {
        return Err(reject("empty"));
    }
    if trimmed.contains(':') {
        let parts: Vec<&str> = trimmed.split(':').collect();
        if parts.len() != 3 {
            return Err(reject("ranges are lo:hi:step"));
        }
        let lo: f64 = parts[0].parse().map_err(|_| reject("bad lower bound"))?;
        let hi: f64 = parts[1].parse().map_err(|_| reject("bad upper bound"))?;
        let step: f64 = parts[2].parse().map_err(|_| reject("bad step"))?;
        if !(step > 0.0 && step.is_finite()) {
            return Err(reject("step must be positive"));
        }
        if hi < lo {
            return Err(reject("upper bound below lower bound"));
        }
        let count = ((hi - lo) / step + 1.0e-9).floor() as usize;
        let mut values = Vec::with_capacity(count + 1);
        for i in 0..=count {
            values.push(lo + i as f64 * step);
        }
        return Ok(values);
    }
    trimmed
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| reject(&format!("bad number '{}'", part.trim())))
        })
        .collect()
}

/// Parses a comma list of nonnegative integers.
pub fn parse_usize_list(spec: &str) -> Result<Vec<usize>, ConfigError> {
    let reject = |reason: &str| ConfigError::BadGrid {
        spec: spec.to_string(),
        reason: reason.to_string(),
    };
    let trimmed = spec.trim();
    if trimmed.is_empty() {
        return Err(reject("empty"));
    }
    trimmed
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| reject(&format!("bad integer '{}'", part.trim())))
        })
        .collect()
}

/// Parses an `A` source into a `w x w` real symmetric block.
///
/// `diag:v1,...,vW` lists the diagonal; `rows:` gives whitespace-separated
/// rows joined by `;`; `file:path` reads whitespace-separated rows from a
/// file (newlines or `/` separate rows).  Matrices that are not square of
/// size `w` or differ from their transpose by more than
/// [`SYMMETRY_TOLERANCE`] are rejected.
pub fn parse_a(source: &str, w: usize) -> Result<RealSymBlock, ConfigError> {
    let reject = |reason: String| ConfigError::BadMatrixFile { reason };
    if let Some(list) = source.strip_prefix("diag:") {
        let entries: Vec<f64> = list
            .split(',')
            .map(|part| {
                part.trim()
                    .parse::<f64>()
                    .map_err(|_| reject(format!("bad diagonal entry '{}'", part.trim())))
            })
            .collect::<Result<_, _>>()?;
        if entries.len() != w {
            return Err(reject(format!(
                "diagonal has {} entries for width {w}",
                entries.len()
            )));
        }
        return Ok(RealSymBlock::diagonal(&entries));
    }
    let rows_text: String = if let Some(rows) = source.strip_prefix("rows:") {
        rows.to_string()
    } else if let Some(path) = source.strip_prefix("file:") {
        std::fs::read_to_string(path.trim())
            .map_err(|e| reject(format!("cannot read '{}': {e}", path.trim())))?
    } else {
        return Err(reject(format!(
            "source '{source}' is not diag:, rows:, or file:"
        )));
    };
    let rows: Vec<Vec<f64>> = rows_text
        .split([';', '\n', '/'])
        .map(str::trim)
        .filter(|line| !line.is_empty())
        .map(|line| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| reject(format!("bad matrix entry '{tok}'")))
                })
                .collect::<Result<Vec<f64>, _>>()
        })
        .collect::<Result<_, _>>()?;
    if rows.len() != w || rows.iter().any(|r| r.len() != w) {
        return Err(reject(format!(
            "matrix is not square of size {w}: {} rows of lengths {:?}",
            rows.len(),
            rows.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    for (i, row) in rows.iter().enumerate() {
        for (j, entry) in row.iter().enumerate() {
            if (entry - rows[j][i]).abs() > SYMMETRY_TOLERANCE {
                return Err(reject(format!(
                    "asymmetric at ({i}, {j}): {entry} vs {}",
                    rows[j][i]
                )));
            }
        }
    }
    Ok(RealSymBlock::from_rows(&rows))
}

/// Canonicalizes an `A` source for the materialized config: `file:` becomes
/// an explicit `rows:` listing; `diag:` and `rows:` stay as given.
pub fn canonical_a(source: &str, w: usize) -> Result<String, ConfigError> {
    if !source.starts_with("file:") {
        parse_a(source, w)?;
        return Ok(source.to_string());
    }
    let block = parse_a(source, w)?;
    let rows: Vec<String> = (0..w)
        .map(|i| {
            (0..w)
                .map(|j| block.at(i, j).to_string())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    Ok(format!("rows:{}", rows.join(";")))
}

/// Parses the ensemble knob.
pub fn parse_ensemble(name: &str) -> Result<EnsembleSpec, ConfigError> {
    if name == "goe" {
        return Ok(EnsembleSpec::Goe);
    }
    if name == "diag-normal" {
        return Ok(EnsembleSpec::DiagIid {
            law: DiagLaw::StandardNormal,
        });
    }
    if let Some(scale) = name.strip_prefix("cauchy:") {
        let scale: f64 = scale
            .parse()
            .map_err(|_| bad("ensemble", name, "bad cauchy scale"))?;
        return Ok(EnsembleSpec::ScalarCauchy { scale });
    }
    if let Some(half) = name.strip_prefix("diag-uniform:") {
        let half_width: f64 = half
            .parse()
            .map_err(|_| bad("ensemble", name, "bad uniform half width"))?;
        return Ok(EnsembleSpec::DiagIid {
            law: DiagLaw::Uniform { half_width },
        });
    }
    Err(bad(
        "ensemble",
        name,
        "expected goe, cauchy:<scale>, diag-normal, or diag-uniform:<half_width>",
    ))
}

/// Parses `key=value` config-file text: one pair per line, `#` comments
/// and blank lines ignored.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadValue {
            key: line.to_string(),
            value: String::new(),
            reason: "config lines are key=value".to_string(),
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Assembles the materialized config: defaults, then the config file, then
/// explicit flag overrides; afterwards the `A` source is canonicalized and
/// the burn-in default is resolved against the coupling.
pub fn materialize(
    subcommand: &str,
    file_text: Option<&str>,
    overrides: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(text) = file_text {
        pairs.extend(
            parse_config_file(text)?
                .into_iter()
                .filter(|(key, _)| key != "subcommand"),
        );
    }
    pairs.extend(overrides.iter().cloned());
    let mut config = RunConfig {
        subcommand: subcommand.to_string(),
        ..RunConfig::default()
    };
    for (key, value) in &pairs {
        config.set(key, value)?;
    }
    let has = |k: &str| pairs.iter().any(|(key, _)| key == k);
    if !has("a") {
        // The default base matrix is the zero matrix at whatever width the
        // run uses.
        config.a = format!("diag:{}", vec!["0"; config.w].join(","));
    }
    config.a = canonical_a(&config.a, config.w)?;
    config.materialize_burn_in(has("burn_in"))?;
    // Surface model-construction errors at parse time.
    let lambdas = config.lambda_grid()?;
    let first = lambdas
        .first()
        .copied()
        .ok_or_else(|| ConfigError::MissingRequired {
            key: "lambda".to_string(),
        })?;
    config.model_at(first)?;
    config.e_grid()?;
    config.eta_list()?;
    Ok(config)
}
