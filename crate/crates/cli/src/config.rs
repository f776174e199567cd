//! Experiment configuration: a sectioned `key = value` text format with `#`
//! comments.
//!
//! ```text
//! [horizons]
//! past = 15
//! future = 30
//!
//! [sweep]
//! n_d = 200, 400
//! sigma_e = 0.1, 0.3
//!
//! [controllers]
//! list = c-gamma, gamma(mu=1e10), rc-gamma(tuned)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use cddpc_core::controller::Variant;
use cddpc_core::lq::RankPolicy;
use cddpc_core::qp::QpSettings;
use cddpc_core::traj::HorizonSpec;

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantKind {
    /// Second-order SISO benchmark.
    Lti,
    /// Benchmark with polynomial state and input distortion (degree from
    /// the `eps` grid).
    Nonlinear,
    /// Synthetic two-input, two-output plant.
    Coupled,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Excitation {
    Square { period: usize, amplitude: f64 },
    Uniform { amplitude: f64 },
    /// Data recorded under the fixed PI loop tracking a square setpoint,
    /// with optional uniform dither on the loop's output.
    ClosedLoop {
        period: usize,
        amplitude: Vec<f64>,
        dither: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    Sine,
    Square,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSpec {
    pub kind: ReferenceKind,
    /// Per output channel.
    pub amplitude: Vec<f64>,
    pub period: f64,
    pub offset: Vec<f64>,
}

impl ReferenceSpec {
    /// `r(t)` for channel `i`.
    pub fn value(&self, i: usize, t: usize) -> f64 {
        let a = self.amplitude[i];
        let phase = t as f64 / self.period;
        let base = match self.kind {
            ReferenceKind::Sine => a * (2.0 * std::f64::consts::PI * phase).sin(),
            ReferenceKind::Square => {
                if phase.fract() < 0.5 {
                    a
                } else {
                    -a
                }
            }
            ReferenceKind::Constant => a,
        };
        base + self.offset[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Warmup {
    /// Last `L_p` inputs of the recorded dataset.
    Tail,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TunedFamily {
    /// `r-gamma`: weight `mu` on `|gamma_3|^2`.
    RGamma,
    /// `rc-gamma`: weights `(lambda, mu)`.
    RcGamma,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControllerKind {
    Fixed(Variant),
    Tuned(TunedFamily),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerEntry {
    /// Identifier as written in the config, whitespace removed.
    pub label: String,
    pub kind: ControllerKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneSpec {
    /// Log-spaced candidate weights.
    pub grid: Vec<f64>,
    /// Coarser grid used for each axis of two-parameter families.
    pub grid_2d: Vec<f64>,
    pub validation_seeds: usize,
    pub validation_offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub plant: PlantKind,
    pub excitation: Excitation,
    pub rank_policy: RankPolicy,
    pub horizons: HorizonSpec,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub y_lo: Vec<f64>,
    pub y_hi: Vec<f64>,
    pub reference: ReferenceSpec,
    pub steps: usize,
    pub seeds: usize,
    pub seed_offset: u64,
    pub warmup: Warmup,
    pub n_d: Vec<usize>,
    pub sigma_e: Vec<f64>,
    pub eps: Vec<f64>,
    pub controllers: Vec<ControllerEntry>,
    pub tune: Option<TuneSpec>,
    pub qp: QpSettings,
    pub output_dir: String,
    pub baseline: Option<String>,
    pub timing: bool,
}

impl ExperimentConfig {
    pub fn input_dim(&self) -> usize {
        match self.plant {
            PlantKind::Lti | PlantKind::Nonlinear => 1,
            PlantKind::Coupled => 2,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.input_dim()
    }

    pub fn controller(&self, label: &str) -> Option<&ControllerEntry> {
        self.controllers.iter().find(|c| c.label == label)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        parse(&text)
    }
}

/// `points` values log-spaced on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..points)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (points - 1) as f64))
        .collect()
}

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

struct Sections {
    map: BTreeMap<(String, String), Entry>,
}

impl Sections {
    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        self.map
            .get_mut(&(section.to_string(), key.to_string()))
            .map(|e| {
                e.used = true;
                (e.value.clone(), e.line)
            })
    }

    fn str_or(&mut self, section: &str, key: &str, default: &str) -> (String, usize) {
        self.take(section, key)
            .unwrap_or_else(|| (default.to_string(), 0))
    }

    fn num<T: std::str::FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>> {
        match self.take(section, key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|_| BenchError::Config {
                line,
                msg: format!("[{section}] {key}: cannot parse `{v}`"),
            }),
        }
    }

    fn num_or<T: std::str::FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.num(section, key)?.unwrap_or(default))
    }

    fn list<T: std::str::FromStr>(&mut self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        match self.take(section, key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|s| s.trim().parse::<T>())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|_| BenchError::Config {
                    line,
                    msg: format!("[{section}] {key}: cannot parse list `{v}`"),
                }),
        }
    }
}

fn bad(line: usize, msg: impl Into<String>) -> BenchError {
    BenchError::Config {
        line,
        msg: msg.into(),
    }
}

/// Splits on commas outside parentheses.
fn split_top_level(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            _ => {}
        }
        if ch == ',' && depth == 0 {
            out.push(cur.trim().to_string());
            cur.clear();
        } else {
            cur.push(ch);
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

/// Parses a controller identifier such as `rc-gamma(lambda=1,mu=10)`,
/// `gamma(mu=1e10)` or `r-gamma(tuned)`.
pub fn parse_controller(token: &str) -> std::result::Result<ControllerEntry, String> {
    let label: String = token.chars().filter(|c| !c.is_whitespace()).collect();
    let (name, args) = match label.find('(') {
        Some(i) => {
            if !label.ends_with(')') {
                return Err(format!("unbalanced parentheses in `{label}`"));
            }
            (&label[..i], &label[i + 1..label.len() - 1])
        }
        None => (label.as_str(), ""),
    };
    let tuned = args == "tuned";
    let mut params: BTreeMap<&str, f64> = BTreeMap::new();
    if !tuned && !args.is_empty() {
        for kv in args.split(',') {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| format!("expected key=value in `{label}`"))?;
            let v: f64 = v.parse().map_err(|_| format!("bad number `{v}` in `{label}`"))?;
            if !(v >= 0.0) {
                return Err(format!("weights must be nonnegative in `{label}`"));
            }
            params.insert(k, v);
        }
    }
    let get = |k: &str| {
        params
            .get(k)
            .copied()
            .ok_or_else(|| format!("`{label}` needs `{k}=` or `(tuned)`"))
    };
    let allowed: &[&str] = match name {
        "gamma" | "r-gamma" | "projreg" => &["mu"],
        "rc-gamma" => &["lambda", "mu"],
        _ => &[],
    };
    if let Some(k) = params.keys().find(|k| !allowed.contains(k)) {
        return Err(format!("unknown parameter `{k}` for `{name}`"));
    }
    let kind = match (name, tuned) {
        ("r-gamma", true) => ControllerKind::Tuned(TunedFamily::RGamma),
        ("rc-gamma", true) => ControllerKind::Tuned(TunedFamily::RcGamma),
        (_, true) => return Err(format!("`{name}` has no tunable weights")),
        ("spc", _) => ControllerKind::Fixed(Variant::Spc),
        ("c-spc", _) => ControllerKind::Fixed(Variant::CausalSpc),
        ("c-gamma", _) => ControllerKind::Fixed(Variant::CausalGammaDdpc),
        ("kf-mpc", _) => ControllerKind::Fixed(Variant::KfMpc),
        ("gamma", _) => ControllerKind::Fixed(Variant::GammaDdpc {
            mu: params.get("mu").copied().unwrap_or(f64::INFINITY),
        }),
        ("r-gamma", _) => ControllerKind::Fixed(Variant::RegGammaDdpc { mu: get("mu")? }),
        ("rc-gamma", _) => ControllerKind::Fixed(Variant::RegCausalGammaDdpc {
            lambda: get("lambda")?,
            mu: get("mu")?,
        }),
        ("projreg", _) => ControllerKind::Fixed(Variant::ProjRegDdpc { mu: get("mu")? }),
        _ => return Err(format!("unknown controller `{name}`")),
    };
    Ok(ControllerEntry { label, kind })
}

fn broadcast(v: Vec<f64>, n: usize, what: &str) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; n]),
        k if k == n => Ok(v),
        k => Err(BenchError::Invalid(format!(
            "{what} has {k} entries, expected 1 or {n}"
        ))),
    }
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let mut map = BTreeMap::new();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| bad(line, "unterminated section header"))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| bad(line, format!("expected `key = value`, found `{content}`")))?;
        if section.is_empty() {
            return Err(bad(line, "key outside of any section"));
        }
        let key = (section.clone(), k.trim().to_string());
        if map.contains_key(&key) {
            return Err(bad(line, format!("duplicate key `{}`", k.trim())));
        }
        map.insert(
            key,
            Entry {
                value: v.trim().to_string(),
                line,
                used: false,
            },
        );
    }
    let mut s = Sections { map };

    let (plant, line) = s.str_or("plant", "kind", "lti");
    let plant = match plant.as_str() {
        "lti" => PlantKind::Lti,
        "nonlinear" => PlantKind::Nonlinear,
        "coupled" => PlantKind::Coupled,
        other => return Err(bad(line, format!("unknown plant kind `{other}`"))),
    };
    let m = match plant {
        PlantKind::Coupled => 2,
        _ => 1,
    };
    let p = m;

    let (exc, line) = s.str_or("excitation", "kind", "square");
    let excitation = match exc.as_str() {
        "square" => Excitation::Square {
            period: s.num_or("excitation", "period", 200)?,
            amplitude: s.num_or("excitation", "amplitude", 3.0)?,
        },
        "uniform" => Excitation::Uniform {
            amplitude: s.num_or("excitation", "amplitude", 1.0)?,
        },
        "closed-loop" => Excitation::ClosedLoop {
            period: s.num_or("excitation", "setpoint_period", 100)?,
            amplitude: broadcast(
                s.list("excitation", "setpoint_amplitude")?.unwrap_or(vec![1.0]),
                p,
                "setpoint_amplitude",
            )?,
            dither: s.num_or("excitation", "dither", 0.0)?,
        },
        other => return Err(bad(line, format!("unknown excitation `{other}`"))),
    };
    if let Excitation::Uniform { amplitude } = &excitation {
        if !(*amplitude >= 0.0 && amplitude.is_finite()) {
            return Err(BenchError::Invalid("excitation amplitude must be finite and nonnegative".into()));
        }
    }
    if let Excitation::ClosedLoop { dither, .. } = &excitation {
        if !(*dither >= 0.0 && dither.is_finite()) {
            return Err(BenchError::Invalid("dither must be finite and nonnegative".into()));
        }
    }
    if matches!(excitation, Excitation::ClosedLoop { .. }) && plant != PlantKind::Coupled {
        return Err(BenchError::Invalid(
            "closed-loop excitation needs the two-by-two plant".into(),
        ));
    }

    let (policy, line) = s.str_or("data", "rank_policy", "strict");
    let rank_policy = match policy.as_str() {
        "strict" => RankPolicy::Strict,
        "min-norm" => RankPolicy::MinNorm,
        other => return Err(bad(line, format!("unknown rank policy `{other}`"))),
    };

    let past = s.num_or("horizons", "past", 15usize)?;
    let future = s.num_or("horizons", "future", 30usize)?;
    let horizons = HorizonSpec::new(past, future)
        .map_err(|_| BenchError::Invalid("horizons must be positive".into()))?;

    let q = broadcast(s.list("cost", "q")?.unwrap_or(vec![1.0]), p, "q")?;
    let r = broadcast(s.list("cost", "r")?.unwrap_or(vec![0.05]), m, "r")?;
    let inf = f64::INFINITY;
    let u_lo = broadcast(s.list("constraints", "u_min")?.unwrap_or(vec![-inf]), m, "u_min")?;
    let u_hi = broadcast(s.list("constraints", "u_max")?.unwrap_or(vec![inf]), m, "u_max")?;
    let y_lo = broadcast(s.list("constraints", "y_min")?.unwrap_or(vec![-inf]), p, "y_min")?;
    let y_hi = broadcast(s.list("constraints", "y_max")?.unwrap_or(vec![inf]), p, "y_max")?;

    let (rk, line) = s.str_or("reference", "kind", "sine");
    let kind = match rk.as_str() {
        "sine" => ReferenceKind::Sine,
        "square" => ReferenceKind::Square,
        "constant" => ReferenceKind::Constant,
        other => return Err(bad(line, format!("unknown reference `{other}`"))),
    };
    let reference = ReferenceSpec {
        kind,
        amplitude: broadcast(s.list("reference", "amplitude")?.unwrap_or(vec![1.0]), p, "amplitude")?,
        period: s.num_or("reference", "period", 60.0)?,
        offset: broadcast(s.list("reference", "offset")?.unwrap_or(vec![0.0]), p, "offset")?,
    };
    if !(reference.period > 0.0) {
        return Err(BenchError::Invalid("reference period must be positive".into()));
    }

    let steps = s.num_or("run", "steps", 60usize)?;
    let seeds = s.num_or("run", "seeds", 100usize)?;
    let seed_offset = s.num_or("run", "seed_offset", 0u64)?;
    let (w, line) = s.str_or("run", "warmup", "tail");
    let warmup = match w.as_str() {
        "tail" => Warmup::Tail,
        "zero" => Warmup::Zero,
        other => return Err(bad(line, format!("unknown warm-up `{other}`"))),
    };

    let n_d = s.list("sweep", "n_d")?.unwrap_or(vec![200usize]);
    let sigma_e = s.list("sweep", "sigma_e")?.unwrap_or(vec![0.0]);
    let eps = s.list("sweep", "eps")?.unwrap_or(vec![0.0]);

    let controllers = match s.take("controllers", "list") {
        Some((v, line)) => split_top_level(&v)
            .iter()
            .map(|t| parse_controller(t).map_err(|m| bad(line, m)))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };

    let tune = if s.map.keys().any(|(sec, _)| sec == "tune") {
        let lo = s.num_or("tune", "grid_min", 1e-5)?;
        let hi = s.num_or("tune", "grid_max", 1e5)?;
        if !(lo > 0.0 && hi >= lo) {
            return Err(BenchError::Invalid("tune grid needs 0 < grid_min <= grid_max".into()));
        }
        let points = s.num_or("tune", "grid_points", 100usize)?;
        let points_2d = s.num_or("tune", "grid_points_2d", 21usize)?;
        if points == 0 || points_2d == 0 {
            return Err(BenchError::Invalid("tune grids must be nonempty".into()));
        }
        Some(TuneSpec {
            grid: log_grid(lo, hi, points),
            grid_2d: log_grid(lo, hi, points_2d),
            validation_seeds: s.num_or("tune", "validation_seeds", 10usize)?,
            validation_offset: s.num_or("tune", "validation_offset", 1_000_000u64)?,
        })
    } else {
        None
    };

    let mut qp = QpSettings::default();
    qp.max_iter = s.num_or("qp", "max_iter", qp.max_iter)?;
    qp.eps_abs = s.num_or("qp", "eps_abs", qp.eps_abs)?;
    qp.eps_rel = s.num_or("qp", "eps_rel", qp.eps_rel)?;

    let output_dir = s.str_or("output", "dir", "out").0;
    let baseline = s.take("output", "baseline").map(|(v, _)| v.replace(' ', ""));
    let timing = s.num_or("output", "timing", false)?;

    if let Some(e) = s.map.iter().find(|(_, e)| !e.used) {
        return Err(bad(e.1.line, format!("unknown key `{}` in [{}]", (e.0).1, (e.0).0)));
    }

    let cfg = ExperimentConfig {
        plant,
        excitation,
        rank_policy,
        horizons,
        q,
        r,
        u_lo,
        u_hi,
        y_lo,
        y_hi,
        reference,
        steps,
        seeds,
        seed_offset,
        warmup,
        n_d,
        sigma_e,
        eps,
        controllers,
        tune,
        qp,
        output_dir,
        baseline,
        timing,
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig) -> Result<()> {
    let fail = |m: &str| Err(BenchError::Invalid(m.into()));
    if cfg.n_d.is_empty() || cfg.sigma_e.is_empty() || cfg.eps.is_empty() {
        return fail("sweep grids must be nonempty");
    }
    if cfg.seeds == 0 {
        return fail("at least one seed is required");
    }
    if cfg.steps == 0 {
        return fail("run steps must be positive");
    }
    if cfg.controllers.is_empty() {
        return fail("no controllers listed");
    }
    if cfg.sigma_e.iter().any(|s| !(*s >= 0.0)) {
        return fail("sigma_e must be nonnegative");
    }
    if cfg.eps.iter().any(|e| !(0.0..=1.0).contains(e)) {
        return fail("eps must lie in [0, 1]");
    }
    if cfg.plant != PlantKind::Nonlinear && cfg.eps.iter().any(|e| *e != 0.0) {
        return fail("nonzero eps needs the nonlinear plant");
    }
    let tuned = cfg
        .controllers
        .iter()
        .any(|c| matches!(c.kind, ControllerKind::Tuned(_)));
    if tuned && cfg.tune.is_none() {
        return fail("tuned controllers need a [tune] section");
    }
    let mut labels: Vec<&str> = cfg.controllers.iter().map(|c| c.label.as_str()).collect();
    labels.sort_unstable();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return fail("controller listed twice");
    }
    if let Some(b) = &cfg.baseline {
        if cfg.controller(b).is_none() {
            return Err(BenchError::Invalid(format!("baseline `{b}` is not in the controller list")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "
# comment
[plant]
kind = lti
[horizons]
past = 4   # trailing comment
future = 6
[sweep]
n_d = 100, 200
sigma_e = 0.1
[controllers]
list = c-gamma, gamma(mu = 1e10), rc-gamma(lambda=1, mu=2)
";

    #[test]
    fn parses_small_config() {
        let c = parse(SMALL).unwrap();
        assert_eq!(c.horizons.past(), 4);
        assert_eq!(c.n_d, vec![100, 200]);
        assert_eq!(c.controllers.len(), 3);
        assert_eq!(c.controllers[1].label, "gamma(mu=1e10)");
        assert_eq!(
            c.controllers[2].kind,
            ControllerKind::Fixed(Variant::RegCausalGammaDdpc { lambda: 1.0, mu: 2.0 })
        );
        assert_eq!(c.u_lo, vec![f64::NEG_INFINITY]);
        assert!(c.tune.is_none());
    }

    #[test]
    fn rejects_unknown_key_with_line() {
        let err = parse("[plant]\nkind = lti\nflavour = x\n[controllers]\nlist = spc\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn rejects_bad_values() {
        assert!(parse("[horizons]\npast = x\n[controllers]\nlist = spc\n").is_err());
        assert!(parse("[controllers]\nlist = warp\n").is_err());
        assert!(parse("[controllers]\nlist = spc\n[run]\nseeds = 0\n").is_err());
        assert!(parse("[controllers]\nlist = r-gamma(tuned)\n").is_err());
        assert!(parse("[controllers]\nlist = spc, spc\n").is_err());
        assert!(parse("nokey\n").is_err());
    }

    #[test]
    fn controller_tokens() {
        assert_eq!(
            parse_controller("gamma").unwrap().kind,
            ControllerKind::Fixed(Variant::GammaDdpc { mu: f64::INFINITY })
        );
        assert_eq!(
            parse_controller("r-gamma(tuned)").unwrap().kind,
            ControllerKind::Tuned(TunedFamily::RGamma)
        );
        assert!(parse_controller("rc-gamma(mu=1)").is_err());
        assert!(parse_controller("spc(tuned)").is_err());
        assert!(parse_controller("gamma(mu=-1)").is_err());
        assert!(parse_controller("gamma(nu=1)").is_err());
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-5, 1e5, 11);
        assert_eq!(g.len(), 11);
        assert!((g[0] - 1e-5).abs() < 1e-18);
        assert!((g[5] - 1.0).abs() < 1e-12);
        assert!((g[10] - 1e5).abs() < 1e-7);
        assert_eq!(log_grid(1.0, 10.0, 1), vec![10.0]);
    }

    #[test]
    fn reference_values() {
        let r = ReferenceSpec {
            kind: ReferenceKind::Sine,
            amplitude: vec![1.0],
            period: 60.0,
            offset: vec![0.0],
        };
        assert!((r.value(0, 15) - 1.0).abs() < 1e-15);
        let sq = ReferenceSpec {
            kind: ReferenceKind::Square,
            amplitude: vec![2.0],
            period: 4.0,
            offset: vec![1.0],
        };
        let v: Vec<f64> = (0..4).map(|t| sq.value(0, t)).collect();
        assert_eq!(v, vec![3.0, 3.0, -1.0, -1.0]);
    }
}
