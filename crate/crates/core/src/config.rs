//! Experiment configuration.
//!
//! The grammar is TOML restricted to one level of sections with scalar or
//! flat-list values; `[[weights]]` may repeat to list several profiles:
//!
//! ```toml
//! [model]
//! beta = 0.2
//! h = 0.3
//! N = 10             # or N_list = [8, 10, 12]
//!
//! [[weights]]
//! profile = "uniform"   # "one-hot" | "power-law" (with alpha) | "explicit" (with values)
//!
//! [engine]
//! kind = "exact"        # or "mcmc" with sweeps, burn_in, thin, rule
//!
//! [plan]
//! M = 50
//! seed = 1
//!
//! [clt]
//! spec = [4]
//! reading = "power-inside"
//!
//! [output]
//! csv = "report.csv"
//! json = "report.json"
//! ```
//!
//! Parsing reports every violation at once; unknown sections and keys are
//! errors.

use std::path::PathBuf;

use toml::{Table, Value};

use crate::clt::RhsReading;
use crate::disorder::{Engine, McmcSettings, DEFAULT_DISORDERS};
use crate::error::{Error, Result};
use crate::exact::ReplicaSpec;
use crate::mcmc::{Schedule, UpdateRule, DEFAULT_BURN_IN};
use crate::weights::{trim_float, WeightVector, NORM_TOLERANCE};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "SKCLT_SEED";

pub const DEFAULT_SWEEPS: usize = 10_000;

/// One `[[weights]]` entry.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource {
    Uniform,
    OneHot,
    PowerLaw { alpha: f64 },
    Explicit { values: Vec<f64> },
}

impl WeightSource {
    pub fn build(&self, n: usize) -> Result<WeightVector> {
        match self {
            WeightSource::Uniform => Ok(WeightVector::uniform(n)),
            WeightSource::OneHot => Ok(WeightVector::one_hot(n)),
            WeightSource::PowerLaw { alpha } => Ok(WeightVector::power_law(n, *alpha)),
            WeightSource::Explicit { values } => {
                if values.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, actual: values.len() });
                }
                WeightVector::explicit(values.clone())
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            WeightSource::Uniform => "uniform".into(),
            WeightSource::OneHot => "one-hot".into(),
            WeightSource::PowerLaw { alpha } => format!("power-law({alpha})"),
            WeightSource::Explicit { .. } => "explicit".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub beta: f64,
    pub h: f64,
    pub sizes: Vec<usize>,
    pub profiles: Vec<WeightSource>,
    pub engine: Engine,
    pub disorders: usize,
    pub seed: u64,
    pub spec: ReplicaSpec,
    pub reading: RhsReading,
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Applies [`SEED_ENV`] if it is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(vec![format!("{SEED_ENV}={v:?} is not an unsigned integer")]))?;
        }
        Ok(self)
    }

    /// Canonical text; `parse_config(&c.to_text()) == Ok(c)`.
    pub fn to_text(&self) -> String {
        let mut root = Table::new();
        let mut model = Table::new();
        model.insert("beta".into(), Value::Float(self.beta));
        model.insert("h".into(), Value::Float(self.h));
        if let [n] = self.sizes[..] {
            model.insert("N".into(), Value::Integer(n as i64));
        } else {
            model.insert("N_list".into(), Value::Array(self.sizes.iter().map(|&n| Value::Integer(n as i64)).collect()));
        }
        root.insert("model".into(), Value::Table(model));
        let weights = self
            .profiles
            .iter()
            .map(|p| {
                let mut t = Table::new();
                match p {
                    WeightSource::Uniform => {
                        t.insert("profile".into(), "uniform".into());
                    }
                    WeightSource::OneHot => {
                        t.insert("profile".into(), "one-hot".into());
                    }
                    WeightSource::PowerLaw { alpha } => {
                        t.insert("profile".into(), "power-law".into());
                        t.insert("alpha".into(), Value::Float(*alpha));
                    }
                    WeightSource::Explicit { values } => {
                        t.insert("profile".into(), "explicit".into());
                        t.insert("values".into(), Value::Array(values.iter().map(|&v| Value::Float(v)).collect()));
                    }
                }
                Value::Table(t)
            })
            .collect();
        root.insert("weights".into(), Value::Array(weights));
        let mut engine = Table::new();
        match &self.engine {
            Engine::Exact => {
                engine.insert("kind".into(), "exact".into());
            }
            Engine::Mcmc(s) => {
                engine.insert("kind".into(), "mcmc".into());
                engine.insert("sweeps".into(), Value::Integer(s.schedule.sweeps as i64));
                engine.insert("burn_in".into(), Value::Integer(s.schedule.burn_in as i64));
                engine.insert("thin".into(), Value::Integer(s.schedule.thin as i64));
                let rule = match s.rule {
                    UpdateRule::HeatBath => "heat-bath",
                    UpdateRule::Metropolis => "metropolis",
                };
                engine.insert("rule".into(), rule.into());
            }
        }
        root.insert("engine".into(), Value::Table(engine));
        let mut plan = Table::new();
        plan.insert("M".into(), Value::Integer(self.disorders as i64));
        // Seeds are u64; values beyond i64 are written as strings.
        plan.insert(
            "seed".into(),
            i64::try_from(self.seed).map_or_else(|_| Value::String(self.seed.to_string()), Value::Integer),
        );
        root.insert("plan".into(), Value::Table(plan));
        let mut clt = Table::new();
        clt.insert(
            "spec".into(),
            Value::Array(self.spec.exponents().iter().map(|&k| Value::Integer(i64::from(k))).collect()),
        );
        let reading = match self.reading {
            RhsReading::PowerInside => "power-inside",
            RhsReading::PowerOutside => "power-outside",
        };
        clt.insert("reading".into(), reading.into());
        root.insert("clt".into(), Value::Table(clt));
        let mut output = Table::new();
        if let Some(p) = &self.csv {
            output.insert("csv".into(), p.display().to_string().into());
        }
        if let Some(p) = &self.json {
            output.insert("json".into(), p.display().to_string().into());
        }
        if !output.is_empty() {
            root.insert("output".into(), Value::Table(output));
        }
        toml::to_string(&root).expect("config tables serialise")
    }
}

/// Collects violations while reading one section.
struct Section<'a> {
    name: &'a str,
    table: Option<&'a Table>,
    errors: &'a mut Vec<String>,
}

impl<'a> Section<'a> {
    fn new(name: &'a str, table: Option<&'a Table>, known: &[&str], errors: &'a mut Vec<String>) -> Self {
        if let Some(t) = table {
            for key in t.keys() {
                if !known.contains(&key.as_str()) {
                    errors.push(format!("[{name}] unknown key '{key}'"));
                }
            }
        }
        Self { name, table, errors }
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn fail(&mut self, key: &str, msg: impl std::fmt::Display) {
        self.errors.push(format!("[{}] {key}: {msg}", self.name));
    }

    fn float(&mut self, key: &str) -> Option<f64> {
        match self.get(key)? {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            other => {
                self.fail(key, format!("expected a number, found {}", other.type_str()));
                None
            }
        }
    }

    fn count(&mut self, key: &str) -> Option<usize> {
        match self.get(key)? {
            Value::Integer(i) if *i >= 0 => Some(*i as usize),
            other => {
                self.fail(key, format!("expected a non-negative integer, found {other}"));
                None
            }
        }
    }

    fn text(&mut self, key: &str) -> Option<&'a str> {
        match self.get(key)? {
            Value::String(s) => Some(s),
            other => {
                self.fail(key, format!("expected a string, found {}", other.type_str()));
                None
            }
        }
    }

    fn list<T>(&mut self, key: &str, item: impl Fn(&Value) -> Option<T>) -> Option<Vec<T>> {
        match self.get(key)? {
            Value::Array(items) => {
                let parsed: Option<Vec<T>> = items.iter().map(item).collect();
                if parsed.is_none() {
                    self.fail(key, "list has an entry of the wrong type");
                }
                parsed
            }
            other => {
                self.fail(key, format!("expected a list, found {}", other.type_str()));
                None
            }
        }
    }

    fn require<T>(&mut self, key: &str, v: Option<T>) -> Option<T> {
        if v.is_none() && self.get(key).is_none() {
            self.fail(key, "missing");
        }
        v
    }
}

fn as_float(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn as_count(v: &Value) -> Option<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Some(*i as usize),
        _ => None,
    }
}

const SECTIONS: &[&str] = &["model", "weights", "engine", "plan", "clt", "output"];

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
    let mut errors = Vec::new();
    let mut sections: std::collections::BTreeMap<&str, &Table> = Default::default();
    let mut weight_tables: Vec<&Table> = Vec::new();
    for (name, value) in &root {
        match (name.as_str(), value) {
            ("weights", Value::Array(items)) => {
                for item in items {
                    match item {
                        Value::Table(t) => weight_tables.push(t),
                        _ => errors.push("[[weights]] entries must be tables".into()),
                    }
                }
            }
            ("weights", Value::Table(t)) => weight_tables.push(t),
            (s, Value::Table(t)) if SECTIONS.contains(&s) => {
                sections.insert(s, t);
            }
            (s, _) if SECTIONS.contains(&s) => errors.push(format!("'{s}' must be a section")),
            (s, _) => errors.push(format!("unknown section or top-level key '{s}'")),
        }
    }

    let mut model = Section::new("model", sections.get("model").copied(), &["beta", "h", "N", "N_list"], &mut errors);
    let beta = model.float("beta");
    let beta = model.require("beta", beta);
    let h = model.float("h");
    let h = model.require("h", h);
    if let Some(b) = beta {
        if !(b >= 0.0 && b.is_finite()) {
            model.fail("beta", format!("must be finite and >= 0, got {b}"));
        }
    }
    if let Some(hv) = h {
        if !(hv >= 0.0 && hv.is_finite()) {
            model.fail("h", format!("must be finite and >= 0, got {hv}"));
        }
    }
    let sizes = match (model.get("N").is_some(), model.get("N_list").is_some()) {
        (true, true) => {
            model.fail("N", "give either N or N_list, not both");
            None
        }
        (true, false) => model.count("N").map(|n| vec![n]),
        (false, true) => model.list("N_list", as_count),
        (false, false) => {
            model.fail("N", "missing (or N_list)");
            None
        }
    };
    if let Some(s) = &sizes {
        if s.is_empty() || s.contains(&0) {
            model.fail("N", "sizes must be positive and the list non-empty");
        }
    }

    let mut profiles = Vec::new();
    for (idx, t) in weight_tables.iter().enumerate() {
        let name = format!("weights.{idx}");
        let mut w = Section::new(&name, Some(t), &["profile", "alpha", "values"], &mut errors);
        let kind = w.text("profile");
        let profile = match w.require("profile", kind) {
            Some("uniform") => Some(WeightSource::Uniform),
            Some("one-hot") => Some(WeightSource::OneHot),
            Some("power-law") => {
                let alpha = w.float("alpha");
                w.require("alpha", alpha).map(|alpha| WeightSource::PowerLaw { alpha })
            }
            Some("explicit") => {
                let values = w.list("values", as_float);
                match w.require("values", values) {
                    Some(values) => {
                        let norm: f64 = values.iter().map(|v| v * v).sum();
                        if (norm - 1.0).abs() > NORM_TOLERANCE {
                            w.fail("values", format!("weights must have unit norm, but sum of squares is {}", trim_float(norm)));
                            None
                        } else {
                            Some(WeightSource::Explicit { values })
                        }
                    }
                    None => None,
                }
            }
            Some(other) => {
                w.fail("profile", format!("unknown profile '{other}'"));
                None
            }
            None => None,
        };
        if let Some(p) = profile {
            if !matches!(p, WeightSource::PowerLaw { .. }) && t.contains_key("alpha") {
                w.fail("alpha", "only valid for power-law");
            }
            profiles.push(p);
        }
    }
    if weight_tables.is_empty() {
        profiles.push(WeightSource::Uniform);
    }
    if let Some(s) = &sizes {
        for p in &profiles {
            if let WeightSource::Explicit { values } = p {
                if s.iter().any(|&n| n != values.len()) {
                    errors.push(format!("[weights] explicit weights have length {} but N = {s:?}", values.len()));
                }
            }
        }
    }

    let mut eng = Section::new("engine", sections.get("engine").copied(), &["kind", "sweeps", "burn_in", "thin", "rule"], &mut errors);
    let engine = match eng.text("kind").unwrap_or("exact") {
        "exact" => {
            for key in ["sweeps", "burn_in", "thin", "rule"] {
                if eng.get(key).is_some() {
                    eng.fail(key, "only valid for kind = \"mcmc\"");
                }
            }
            Some(Engine::Exact)
        }
        "mcmc" => {
            let sweeps = eng.count("sweeps").unwrap_or(DEFAULT_SWEEPS);
            let burn_in = eng.count("burn_in").unwrap_or(DEFAULT_BURN_IN);
            let thin = eng.count("thin").unwrap_or(1);
            let rule = match eng.text("rule").unwrap_or("heat-bath") {
                "heat-bath" => Some(UpdateRule::HeatBath),
                "metropolis" => Some(UpdateRule::Metropolis),
                other => {
                    eng.fail("rule", format!("unknown rule '{other}'"));
                    None
                }
            };
            match Schedule::new(sweeps, burn_in, thin) {
                Ok(schedule) => rule.map(|rule| Engine::Mcmc(McmcSettings { schedule, rule })),
                Err(e) => {
                    eng.fail("sweeps", e);
                    None
                }
            }
        }
        other => {
            eng.fail("kind", format!("unknown engine '{other}'"));
            None
        }
    };

    let mut plan = Section::new("plan", sections.get("plan").copied(), &["M", "seed"], &mut errors);
    let disorders = plan.count("M").unwrap_or(DEFAULT_DISORDERS);
    if disorders < 2 {
        plan.fail("M", format!("need at least 2 disorders, got {disorders}"));
    }
    let seed = match plan.get("seed") {
        Some(Value::Integer(i)) if *i >= 0 => Some(*i as u64),
        Some(Value::String(s)) => s.parse().ok().or_else(|| {
            plan.fail("seed", format!("'{s}' is not an unsigned integer"));
            None
        }),
        Some(other) => {
            plan.fail("seed", format!("expected a non-negative integer, found {other}"));
            None
        }
        None => {
            plan.fail("seed", "missing");
            None
        }
    };

    let mut clt = Section::new("clt", sections.get("clt").copied(), &["spec", "reading"], &mut errors);
    let spec = match clt.get("spec") {
        Some(_) => clt.list("spec", |v| as_count(v).and_then(|k| u32::try_from(k).ok())),
        None => Some(vec![4]),
    }
    .and_then(|e| match ReplicaSpec::new(e) {
        Ok(s) => Some(s),
        Err(err) => {
            clt.fail("spec", err);
            None
        }
    });
    let reading = match clt.text("reading").unwrap_or("power-inside") {
        "power-inside" => Some(RhsReading::PowerInside),
        "power-outside" => Some(RhsReading::PowerOutside),
        other => {
            clt.fail("reading", format!("unknown reading '{other}'"));
            None
        }
    };

    let mut out = Section::new("output", sections.get("output").copied(), &["csv", "json"], &mut errors);
    let csv = out.text("csv").map(PathBuf::from);
    let json = out.text("json").map(PathBuf::from);

    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    match (beta, h, sizes, engine, seed, spec, reading) {
        (Some(beta), Some(h), Some(sizes), Some(engine), Some(seed), Some(spec), Some(reading)) => Ok(ExperimentConfig {
            beta,
            h,
            sizes,
            profiles,
            engine,
            disorders,
            seed,
            spec,
            reading,
            csv,
            json,
        }),
        _ => Err(Error::Config(vec!["incomplete configuration".into()])),
    }
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
