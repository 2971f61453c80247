//! Scenario configuration: a flat `key = value` grammar with dotted section
//! prefixes, `#` comments and space-separated lists.
//!
//! ```text
//! scenario = example1
//! command = solve
//! grid.steps = 200
//! model.x = 1
//! ```
//!
//! `scenario` selects the defaults every other key overrides, so it may
//! appear anywhere in the file. Unknown and repeated keys are errors.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use mvfbdsde::control::LqParams;
use mvfbdsde::model::{builtin_example_meanfield, Dims, LinearModel};
use mvfbdsde::regression::Basis;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: key `{key}`: {msg}")]
    Key { line: usize, key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!("expected one of {}", [$($text),+].join(", "))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(Scenario {
    Example1 => "example1",
    Example2 => "example2",
    LinearBase => "linear_base",
    LqControl => "lq_control",
    Custom => "custom",
});

named_enum!(Command {
    Solve => "solve",
    CheckAssumptions => "check_assumptions",
    DetectNonuniqueness => "detect_nonuniqueness",
    VerifySmp => "verify_smp",
    ItoCheck => "ito_check",
});

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub command: Command,
    pub dims: Dims,
    pub horizon: f64,
    /// Replaces the horizon even where the scenario fixes it.
    pub override_horizon: Option<f64>,
    pub steps: usize,
    pub particles: usize,
    pub seed: u64,
    pub delta: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    pub basis: Basis,
    pub ridge: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub alpha1: f64,
    pub gamma: f64,
    pub x: Vec<f64>,
    /// Coefficient tables for `custom`; `None` elsewhere.
    pub model: Option<LinearModel>,
    pub lq: LqParams,
    pub pairs: usize,
    pub perturbations: usize,
    pub out: PathBuf,
    /// Worker threads, 0 for the runtime default.
    pub threads: usize,
}

impl ScenarioConfig {
    pub fn defaults(scenario: Scenario) -> Self {
        let mut c = Self {
            scenario,
            command: Command::Solve,
            dims: Dims::scalar(),
            horizon: 1.0,
            override_horizon: None,
            steps: 100,
            particles: 1000,
            seed: 42,
            delta: 0.2,
            tol: 1e-4,
            max_iter: 100,
            damping: 1.0,
            basis: Basis::AffineY,
            ridge: 0.0,
            theta1: 0.25,
            theta2: 0.25,
            alpha1: 0.5,
            gamma: 0.125,
            x: vec![1.0],
            model: None,
            lq: LqParams::default(),
            pairs: 10_000,
            perturbations: 50,
            out: PathBuf::from("out"),
            threads: 0,
        };
        match scenario {
            Scenario::Example1 => {
                c.steps = 200;
                c.particles = 4000;
            }
            Scenario::Example2 => {
                c.horizon = 3.0 * PI / 4.0;
                c.steps = 300;
                c.particles = 2000;
                c.tol = 1e-6;
                c.damping = 0.4;
                c.x = vec![0.0];
            }
            Scenario::LinearBase => {}
            Scenario::LqControl => {
                c.steps = 50;
                c.particles = 256;
                c.tol = 1e-14;
                c.max_iter = 300;
                c.delta = 1.0;
                c.gamma = 0.1;
                c.x = vec![c.lq.x];
            }
            Scenario::Custom => c.model = Some(builtin_example_meanfield(Dims::scalar())),
        }
        c
    }

    /// Horizon actually used: fixed at `3π/4` for `example2` unless overridden.
    pub fn effective_horizon(&self) -> f64 {
        match (self.override_horizon, self.scenario) {
            (Some(t), _) => t,
            (None, Scenario::Example2) => 3.0 * PI / 4.0,
            (None, _) => self.horizon,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.steps < 2 {
            return bad(format!("grid.steps must be at least 2, got {}", self.steps));
        }
        if self.particles < 2 {
            return bad(format!("ensemble.particles must be at least 2, got {}", self.particles));
        }
        let t = self.effective_horizon();
        if !(t.is_finite() && t > 0.0) {
            return bad(format!("horizon must be positive, got {t}"));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("solver.delta must lie in (0, 1], got {}", self.delta));
        }
        if !(self.tol > 0.0) {
            return bad(format!("solver.tol must be positive, got {}", self.tol));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad(format!("solver.damping must lie in (0, 1], got {}", self.damping));
        }
        if self.x.len() != self.dims.d {
            return bad(format!("model.x has {} entries, dims.d is {}", self.x.len(), self.dims.d));
        }
        if let Some(m) = &self.model {
            let (nv, d) = (self.dims.nv(), self.dims.d);
            for (name, len, want) in [
                ("model.k", m.k.len(), nv * nv),
                ("model.k_mean", m.k_mean.len(), nv * nv),
                ("model.offset", m.offset.len(), nv),
                ("model.h", m.h.len(), d * d),
                ("model.h_mean", m.h_mean.len(), d * d),
                ("model.h_offset", m.h_offset.len(), d),
            ] {
                if len != want {
                    return bad(format!("{name} has {len} entries, expected {want}"));
                }
            }
        }
        if self.scenario == Scenario::Custom && self.model.is_none() {
            return bad("custom scenario needs model.* tables".into());
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut order = vec![];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(ConfigError::Syntax { line, msg: format!("expected `key = value`, got `{body}`") });
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax { line, msg: format!("malformed key `{k}`") });
            }
            if entries.insert(k.clone(), (line, v)).is_some() {
                return Err(ConfigError::Key { line, key: k, msg: "repeated".into() });
            }
            order.push(k);
        }
        let scenario = match entries.get("scenario") {
            Some((line, v)) => v.parse().map_err(|msg| ConfigError::Key { line: *line, key: "scenario".into(), msg })?,
            None => return Err(ConfigError::Invalid("missing key `scenario`".into())),
        };
        let mut c = Self::defaults(scenario);
        // Dimensions first so table lengths can be checked against them.
        for key in ["dims.d", "dims.d_w", "dims.d_b"] {
            if let Some((line, v)) = entries.get(key) {
                c.set(key, v, *line)?;
            }
        }
        for key in order {
            if key.starts_with("dims.") || key == "scenario" {
                continue;
            }
            let (line, v) = &entries[&key];
            c.set(&key, v, *line)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let err = |msg: String| ConfigError::Key { line, key: key.into(), msg };
        fn num<T: FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse `{v}`"))
        }
        fn list(v: &str) -> Result<Vec<f64>, String> {
            v.split_whitespace().map(num::<f64>).collect()
        }
        let r: Result<(), String> = (|| {
            match key {
                "command" => self.command = value.parse()?,
                "dims.d" | "dims.d_w" | "dims.d_b" => {
                    let n: usize = num(value)?;
                    let (mut d, mut dw, mut db) = (self.dims.d, self.dims.d_w, self.dims.d_b);
                    match key {
                        "dims.d" => d = n,
                        "dims.d_w" => dw = n,
                        _ => db = n,
                    }
                    self.dims = Dims::new(d, dw, db).map_err(|e| e.to_string())?;
                    if key == "dims.d" && self.x.len() != d {
                        self.x = vec![0.0; d];
                    }
                    if let Some(m) = &mut self.model {
                        if m.dims != self.dims {
                            *m = LinearModel::zeros(self.dims);
                        }
                    }
                }
                "grid.horizon" => self.horizon = num(value)?,
                "grid.override_horizon" => self.override_horizon = Some(num(value)?),
                "grid.steps" => self.steps = num(value)?,
                "ensemble.particles" => self.particles = num(value)?,
                "ensemble.seed" => self.seed = num(value)?,
                "solver.delta" => self.delta = num(value)?,
                "solver.tol" => self.tol = num(value)?,
                "solver.max_iter" => self.max_iter = num(value)?,
                "solver.damping" => self.damping = num(value)?,
                "regression.basis" => self.basis = Basis::parse(value).ok_or("expected constant, affine_y or poly2_y_plus_Btail")?,
                "regression.ridge" => self.ridge = num(value)?,
                "constants.theta1" => self.theta1 = num(value)?,
                "constants.theta2" => self.theta2 = num(value)?,
                "constants.alpha1" => self.alpha1 = num(value)?,
                "constants.gamma" => self.gamma = num(value)?,
                "model.x" => self.x = list(value)?,
                "checks.pairs" => self.pairs = num(value)?,
                "smp.perturbations" => self.perturbations = num(value)?,
                "output.dir" => self.out = PathBuf::from(value),
                "run.threads" => self.threads = num(value)?,
                k if k.starts_with("model.") => {
                    let dims = self.dims;
                    let m = self.model.get_or_insert_with(|| LinearModel::zeros(dims));
                    let v = list(value)?;
                    match &k[6..] {
                        "k" => m.k = v,
                        "k_mean" => m.k_mean = v,
                        "offset" => m.offset = v,
                        "h" => m.h = v,
                        "h_mean" => m.h_mean = v,
                        "h_offset" => m.h_offset = v,
                        _ => return Err("unknown key".into()),
                    }
                }
                k if k.starts_with("lq.") => {
                    let v: f64 = num(value)?;
                    let q = &mut self.lq;
                    match &k[3..] {
                        "k" => q.k = v,
                        "m" => q.m = v,
                        "b" => q.b = v,
                        "s" => q.s = v,
                        "c" => q.c = v,
                        "r" => q.r = v,
                        "a" => q.a = v,
                        "s_t" => q.s_t = v,
                        "s_bar" => q.s_bar = v,
                        "w" => q.w = v,
                        "bound" => q.bound = v,
                        "x" => q.x = v,
                        "horizon" => q.horizon = v,
                        _ => return Err("unknown key".into()),
                    }
                }
                _ => return Err("unknown key".into()),
            }
            Ok(())
        })();
        r.map_err(err)
    }

    /// Every key, in a fixed order; floats use the shortest representation
    /// that parses back to the same value.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("scenario", self.scenario.to_string());
        kv("command", self.command.to_string());
        kv("dims.d", self.dims.d.to_string());
        kv("dims.d_w", self.dims.d_w.to_string());
        kv("dims.d_b", self.dims.d_b.to_string());
        kv("grid.horizon", format!("{:?}", self.horizon));
        if let Some(t) = self.override_horizon {
            kv("grid.override_horizon", format!("{t:?}"));
        }
        kv("grid.steps", self.steps.to_string());
        kv("ensemble.particles", self.particles.to_string());
        kv("ensemble.seed", self.seed.to_string());
        kv("solver.delta", format!("{:?}", self.delta));
        kv("solver.tol", format!("{:?}", self.tol));
        kv("solver.max_iter", self.max_iter.to_string());
        kv("solver.damping", format!("{:?}", self.damping));
        kv("regression.basis", self.basis.name().to_string());
        kv("regression.ridge", format!("{:?}", self.ridge));
        kv("constants.theta1", format!("{:?}", self.theta1));
        kv("constants.theta2", format!("{:?}", self.theta2));
        kv("constants.alpha1", format!("{:?}", self.alpha1));
        kv("constants.gamma", format!("{:?}", self.gamma));
        kv("model.x", list(&self.x));
        if let Some(m) = &self.model {
            kv("model.k", list(&m.k));
            kv("model.k_mean", list(&m.k_mean));
            kv("model.offset", list(&m.offset));
            kv("model.h", list(&m.h));
            kv("model.h_mean", list(&m.h_mean));
            kv("model.h_offset", list(&m.h_offset));
        }
        let q = self.lq;
        for (k, v) in [
            ("k", q.k),
            ("m", q.m),
            ("b", q.b),
            ("s", q.s),
            ("c", q.c),
            ("r", q.r),
            ("a", q.a),
            ("s_t", q.s_t),
            ("s_bar", q.s_bar),
            ("w", q.w),
            ("bound", q.bound),
            ("x", q.x),
            ("horizon", q.horizon),
        ] {
            kv(&format!("lq.{k}"), format!("{v:?}"));
        }
        kv("checks.pairs", self.pairs.to_string());
        kv("smp.perturbations", self.perturbations.to_string());
        kv("output.dir", self.out.display().to_string());
        kv("run.threads", self.threads.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for &s in Scenario::ALL {
            let c = ScenarioConfig::defaults(s);
            assert_eq!(ScenarioConfig::parse(&c.serialize()).unwrap(), c, "{s}");
        }
    }

    #[test]
    fn comments_blank_lines_and_order() {
        let c = ScenarioConfig::parse("# run\n\ngrid.steps = 50 # fewer\nscenario = example1\n").unwrap();
        assert_eq!((c.scenario, c.steps, c.particles), (Scenario::Example1, 50, 4000));
    }

    #[test]
    fn diagnostics_name_line_and_key() {
        let e = ScenarioConfig::parse("scenario = example1\ngrid.steps = many\n").unwrap_err();
        assert_eq!(e, ConfigError::Key { line: 2, key: "grid.steps".into(), msg: "cannot parse `many`".into() });
        let e = ScenarioConfig::parse("scenario = example1\nbogus.key = 1\n").unwrap_err();
        assert!(matches!(e, ConfigError::Key { line: 2, .. }));
        let e = ScenarioConfig::parse("scenario = example1\nno equals sign\n").unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 2, .. }));
        let e = ScenarioConfig::parse("scenario = example1\ngrid.steps = 3\ngrid.steps = 4\n").unwrap_err();
        assert!(matches!(e, ConfigError::Key { line: 3, .. }));
        assert!(ScenarioConfig::parse("grid.steps = 3\n").is_err());
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(ScenarioConfig::parse("scenario = example1\ngrid.steps = 0\n").is_err());
        assert!(ScenarioConfig::parse("scenario = example1\nensemble.particles = 1\n").is_err());
        assert!(ScenarioConfig::parse("scenario = example1\ngrid.horizon = -1\n").is_err());
        assert!(ScenarioConfig::parse("scenario = custom\nmodel.k = 1 2\n").is_err());
    }

    #[test]
    fn example2_horizon_is_pinned_unless_overridden() {
        let c = ScenarioConfig::parse("scenario = example2\ngrid.horizon = 1\n").unwrap();
        assert_eq!(c.effective_horizon(), 3.0 * PI / 4.0);
        let c = ScenarioConfig::parse("scenario = example2\ngrid.override_horizon = 1\n").unwrap();
        assert_eq!(c.effective_horizon(), 1.0);
    }

    #[test]
    fn multidimensional_custom_tables() {
        let mut text = String::from("scenario = custom\ndims.d = 2\nmodel.x = 1 0\n");
        text += &format!("model.k = {}\n", vec!["0"; 64].join(" "));
        let c = ScenarioConfig::parse(&text).unwrap();
        assert_eq!(c.dims.nv(), 8);
        assert_eq!(ScenarioConfig::parse(&c.serialize()).unwrap(), c);
    }
}
