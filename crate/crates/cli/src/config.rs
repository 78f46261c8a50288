//! Run configuration: flat `key = value` text with dotted section
//! prefixes. Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::Complex;

use switching_consensus::synthesis::DEFAULT_RHO_GRID;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Full,
    Reduced,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Full => "full",
            Kind::Reduced => "reduced",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FBarSource {
    Eigenvalues(Vec<Complex<f64>>),
    Coefficients(Vec<f64>),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GSource {
    Seed(u64),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceConfig {
    Zero,
    Square {
        amplitude: Option<Vec<f64>>,
        period: f64,
        phase: f64,
    },
    /// Rows `t w_1 ... w_l` (or `N * l` values).
    Samples(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialConfig {
    /// `x0`, `xhat0` uniform in `[-1, 1]` from streams `seed`, `seed + 1`;
    /// reduced runs use `v0 = T xhat0`.
    Random { seed: u64 },
    /// Every agent starts from one random state with an exact estimate.
    Identical { seed: u64 },
    Files { x0: PathBuf, observer0: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub a: PathBuf,
    pub b: PathBuf,
    pub c1: PathBuf,
    pub c2: Option<PathBuf>,
    pub d: PathBuf,
    pub r: Option<PathBuf>,
    pub graphs: Vec<PathBuf>,
    pub generator: PathBuf,
    pub kind: Kind,
    pub gamma: f64,
    pub rho_grid: Vec<f64>,
    pub tau: Option<f64>,
    pub decay_rate: f64,
    pub f_bar: Option<FBarSource>,
    pub g: GSource,
    pub t_end: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    pub record_stride: usize,
    pub csv_stride: usize,
    pub observer_disturbance_feed: bool,
    pub consensus_tolerance: f64,
    pub overshoot_channels: Vec<(usize, usize)>,
    pub disturbance: DisturbanceConfig,
    pub initial: InitialConfig,
    pub out_dir: PathBuf,
}

struct Entries {
    source: String,
    map: BTreeMap<String, String>,
    base: PathBuf,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn req(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| anyhow!("{}: missing required key '{key}'", self.source))
    }

    fn path(&mut self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.take(key).map(|v| self.base.join(v)))
    }

    fn req_path(&mut self, key: &str) -> Result<PathBuf> {
        let v = self.req(key)?;
        Ok(self.base.join(v))
    }

    fn real(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => parse_real(&v).with_context(|| format!("{}: key '{key}'", self.source)),
        }
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<T>()
                .map_err(|_| anyhow!("{}: key '{key}' has invalid value '{v}'", self.source)),
        }
    }

    fn reals(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => split_list(&v)
                .map(parse_real)
                .collect::<Result<Vec<_>>>()
                .map(Some)
                .with_context(|| format!("{}: key '{key}'", self.source)),
        }
    }
}

fn parse_real(v: &str) -> Result<f64> {
    let x = match v.trim() {
        "pi" => PI,
        "2pi" => 2.0 * PI,
        t => t.parse::<f64>().map_err(|_| anyhow!("'{t}' is not a number"))?,
    };
    if !x.is_finite() {
        bail!("'{v}' is not finite");
    }
    Ok(x)
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|t| !t.is_empty())
}

fn parse_complex(t: &str) -> Result<Complex<f64>> {
    let z: Complex<f64> = t
        .replace('j', "i")
        .parse()
        .map_err(|_| anyhow!("'{t}' is not a complex number"))?;
    Ok(z)
}

fn parse_channels(v: &str) -> Result<Vec<(usize, usize)>> {
    split_list(v)
        .map(|t| {
            let (a, c) = t
                .split_once(':')
                .ok_or_else(|| anyhow!("channel '{t}' must be 'agent:state'"))?;
            Ok((a.trim().parse()?, c.trim().parse()?))
        })
        .collect()
}

pub fn parse_config(text: &str, source: &str, base: &Path) -> Result<RunConfig> {
    let mut map = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{source} line {}: expected 'key = value'", k + 1))?;
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            bail!("{source} line {}: duplicate key '{key}'", k + 1);
        }
    }
    let mut e = Entries {
        source: source.to_string(),
        map,
        base: base.to_path_buf(),
    };

    let kind = match e.req("synthesis.kind")?.as_str() {
        "full" => Kind::Full,
        "reduced" => Kind::Reduced,
        other => bail!("{source}: synthesis.kind must be 'full' or 'reduced', got '{other}'"),
    };
    let graphs: Vec<PathBuf> = split_list(&e.req("topology.graphs")?)
        .map(|p| base.join(p))
        .collect();
    if graphs.is_empty() {
        bail!("{source}: topology.graphs lists no files");
    }

    let f_bar = match (
        e.take("synthesis.f_bar.eigenvalues"),
        e.reals("synthesis.f_bar.coefficients")?,
        e.path("synthesis.f_bar.matrix")?,
    ) {
        (None, None, None) => None,
        (Some(v), None, None) => Some(FBarSource::Eigenvalues(
            split_list(&v).map(parse_complex).collect::<Result<_>>()?,
        )),
        (None, Some(c), None) => Some(FBarSource::Coefficients(c)),
        (None, None, Some(p)) => Some(FBarSource::File(p)),
        _ => bail!("{source}: give only one of synthesis.f_bar.{{eigenvalues,coefficients,matrix}}"),
    };
    if kind == Kind::Reduced && f_bar.is_none() {
        bail!("{source}: reduced synthesis needs synthesis.f_bar.eigenvalues, .coefficients or .matrix");
    }
    let g = match (e.take("synthesis.g.seed"), e.path("synthesis.g.matrix")?) {
        (Some(_), Some(_)) => bail!("{source}: give only one of synthesis.g.seed and synthesis.g.matrix"),
        (None, Some(p)) => GSource::File(p),
        (Some(s), None) => GSource::Seed(
            s.parse()
                .map_err(|_| anyhow!("{source}: synthesis.g.seed must be an integer"))?,
        ),
        (None, None) => GSource::Seed(0),
    };

    let disturbance = match e.take("simulation.disturbance").as_deref().unwrap_or("zero") {
        "zero" => DisturbanceConfig::Zero,
        "square" => DisturbanceConfig::Square {
            amplitude: e.reals("simulation.disturbance.amplitude")?,
            period: e.real("simulation.disturbance.period", 2.0 * PI)?,
            phase: e.real("simulation.disturbance.phase", 0.0)?,
        },
        "samples" => DisturbanceConfig::Samples(e.req_path("simulation.disturbance.file")?),
        other => bail!("{source}: simulation.disturbance must be zero, square or samples, got '{other}'"),
    };
    let initial = match e.take("simulation.initial").as_deref().unwrap_or("random") {
        "random" => InitialConfig::Random {
            seed: e.parsed("simulation.initial.seed", 2024)?,
        },
        "identical" => InitialConfig::Identical {
            seed: e.parsed("simulation.initial.seed", 2024)?,
        },
        "files" => InitialConfig::Files {
            x0: e.req_path("simulation.initial.x0")?,
            observer0: e.req_path("simulation.initial.observer0")?,
        },
        other => bail!("{source}: simulation.initial must be random, identical or files, got '{other}'"),
    };

    let cfg = RunConfig {
        a: e.req_path("plant.a")?,
        b: e.req_path("plant.b")?,
        c1: e.req_path("plant.c1")?,
        c2: e.path("plant.c2")?,
        d: e.req_path("plant.d")?,
        r: e.path("plant.r")?,
        graphs,
        generator: e.req_path("markov.generator")?,
        kind,
        gamma: e.real("synthesis.gamma", f64::NAN)?,
        rho_grid: e
            .reals("synthesis.rho_grid")?
            .unwrap_or_else(|| DEFAULT_RHO_GRID.to_vec()),
        tau: e.take("synthesis.tau").map(|v| parse_real(&v)).transpose()?,
        decay_rate: e.real("synthesis.decay_rate", 0.0)?,
        f_bar,
        g,
        t_end: e.real("simulation.t_end", 20.0)?,
        dt: e.real("simulation.dt", 1e-3)?,
        paths: e.parsed("simulation.paths", 20)?,
        seed: e.parsed("simulation.seed", 1)?,
        record_stride: e.parsed("simulation.record_stride", 10)?,
        csv_stride: e.parsed("output.csv_stride", 10)?,
        observer_disturbance_feed: e.parsed("simulation.observer_disturbance_feed", true)?,
        consensus_tolerance: e.real("simulation.consensus_tolerance", 1e-4)?,
        overshoot_channels: e
            .take("simulation.overshoot_channels")
            .map(|v| parse_channels(&v))
            .transpose()
            .with_context(|| format!("{source}: simulation.overshoot_channels"))?
            .unwrap_or_default(),
        disturbance,
        initial,
        out_dir: e.path("output.dir")?.unwrap_or_else(|| base.join("out")),
    };
    if let Some(k) = e.map.keys().next() {
        bail!("{source}: unknown key '{k}'");
    }
    cfg.validate(source)?;
    Ok(cfg)
}

impl RunConfig {
    fn validate(&self, source: &str) -> Result<()> {
        if !(self.gamma > 0.0) {
            bail!("{source}: synthesis.gamma must be given and positive");
        }
        if !(self.dt > 0.0) || !(self.t_end > 0.0) {
            bail!("{source}: simulation.dt and simulation.t_end must be positive");
        }
        if self.paths == 0 || self.record_stride == 0 || self.csv_stride == 0 {
            bail!("{source}: simulation.paths and the strides must be at least 1");
        }
        if self.rho_grid.is_empty() {
            bail!("{source}: synthesis.rho_grid is empty");
        }
        if !(self.consensus_tolerance > 0.0) {
            bail!("{source}: simulation.consensus_tolerance must be positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        parse_config(&text, &path.display().to_string(), &base)
    }

    /// Every key with defaults filled in and absolute paths, so the file
    /// reproduces this run from any directory.
    pub fn effective_text(&self) -> String {
        let abs = |p: &Path| -> String {
            std::path::absolute(p)
                .unwrap_or_else(|_| p.to_path_buf())
                .display()
                .to_string()
        };
        let real = |v: f64| format!("{v:.16e}");
        let list = |v: &[f64]| v.iter().map(|x| real(*x)).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("plant.a", abs(&self.a));
        kv("plant.b", abs(&self.b));
        kv("plant.c1", abs(&self.c1));
        if let Some(p) = &self.c2 {
            kv("plant.c2", abs(p));
        }
        kv("plant.d", abs(&self.d));
        if let Some(p) = &self.r {
            kv("plant.r", abs(p));
        }
        kv(
            "topology.graphs",
            self.graphs.iter().map(|p| abs(p)).collect::<Vec<_>>().join(", "),
        );
        kv("markov.generator", abs(&self.generator));
        kv("synthesis.kind", self.kind.name().into());
        kv("synthesis.gamma", real(self.gamma));
        kv("synthesis.rho_grid", list(&self.rho_grid));
        if let Some(t) = self.tau {
            kv("synthesis.tau", real(t));
        }
        kv("synthesis.decay_rate", real(self.decay_rate));
        match &self.f_bar {
            None => {}
            Some(FBarSource::Eigenvalues(ev)) => kv(
                "synthesis.f_bar.eigenvalues",
                ev.iter()
                    .map(|z| format!("{:.16e}{:+.16e}i", z.re, z.im))
                    .collect::<Vec<_>>()
                    .join(", "),
            ),
            Some(FBarSource::Coefficients(c)) => kv("synthesis.f_bar.coefficients", list(c)),
            Some(FBarSource::File(p)) => kv("synthesis.f_bar.matrix", abs(p)),
        }
        match &self.g {
            GSource::Seed(seed) => kv("synthesis.g.seed", seed.to_string()),
            GSource::File(p) => kv("synthesis.g.matrix", abs(p)),
        }
        kv("simulation.t_end", real(self.t_end));
        kv("simulation.dt", real(self.dt));
        kv("simulation.paths", self.paths.to_string());
        kv("simulation.seed", self.seed.to_string());
        kv("simulation.record_stride", self.record_stride.to_string());
        kv(
            "simulation.observer_disturbance_feed",
            self.observer_disturbance_feed.to_string(),
        );
        kv("simulation.consensus_tolerance", real(self.consensus_tolerance));
        if !self.overshoot_channels.is_empty() {
            kv(
                "simulation.overshoot_channels",
                self.overshoot_channels
                    .iter()
                    .map(|(a, c)| format!("{a}:{c}"))
                    .collect::<Vec<_>>()
                    .join(", "),
            );
        }
        match &self.disturbance {
            DisturbanceConfig::Zero => kv("simulation.disturbance", "zero".into()),
            DisturbanceConfig::Square {
                amplitude,
                period,
                phase,
            } => {
                kv("simulation.disturbance", "square".into());
                if let Some(a) = amplitude {
                    kv("simulation.disturbance.amplitude", list(a));
                }
                kv("simulation.disturbance.period", real(*period));
                kv("simulation.disturbance.phase", real(*phase));
            }
            DisturbanceConfig::Samples(p) => {
                kv("simulation.disturbance", "samples".into());
                kv("simulation.disturbance.file", abs(p));
            }
        }
        match &self.initial {
            InitialConfig::Random { seed } => {
                kv("simulation.initial", "random".into());
                kv("simulation.initial.seed", seed.to_string());
            }
            InitialConfig::Identical { seed } => {
                kv("simulation.initial", "identical".into());
                kv("simulation.initial.seed", seed.to_string());
            }
            InitialConfig::Files { x0, observer0 } => {
                kv("simulation.initial", "files".into());
                kv("simulation.initial.x0", abs(x0));
                kv("simulation.initial.observer0", abs(observer0));
            }
        }
        kv("output.dir", abs(&self.out_dir));
        kv("output.csv_stride", self.csv_stride.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
plant.a = a.txt
plant.b = b.txt
plant.c1 = c.txt
plant.d = d.txt
topology.graphs = g1.txt, g2.txt
markov.generator = q.txt
synthesis.kind = reduced
synthesis.gamma = 4
synthesis.f_bar.eigenvalues = -1, -2+0.5j, -2-0.5j
simulation.disturbance = square
";

    #[test]
    fn defaults_and_relative_paths() {
        let c = parse_config(MINIMAL, "cfg", Path::new("/base")).unwrap();
        assert_eq!(c.graphs[1], PathBuf::from("/base/g2.txt"));
        assert_eq!(c.rho_grid, DEFAULT_RHO_GRID.to_vec());
        assert_eq!(c.g, GSource::Seed(0));
        let Some(FBarSource::Eigenvalues(ev)) = &c.f_bar else {
            panic!("eigenvalues expected");
        };
        assert_eq!(ev[1], Complex::new(-2.0, 0.5));
        assert!(matches!(
            c.disturbance,
            DisturbanceConfig::Square { period, .. } if (period - 2.0 * PI).abs() < 1e-15
        ));
    }

    #[test]
    fn effective_text_reparses_to_the_same_config() {
        let c = parse_config(MINIMAL, "cfg", Path::new("/base")).unwrap();
        let again = parse_config(&c.effective_text(), "eff", Path::new("/elsewhere")).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        let bad = format!("{MINIMAL}simulation.tend = 3\n");
        assert!(parse_config(&bad, "cfg", Path::new("/"))
            .unwrap_err()
            .to_string()
            .contains("simulation.tend"));
        let dup = format!("{MINIMAL}synthesis.gamma = 5\n");
        assert!(parse_config(&dup, "cfg", Path::new("/")).is_err());
        let no_fbar = MINIMAL.replace("synthesis.f_bar.eigenvalues = -1, -2+0.5j, -2-0.5j\n", "");
        assert!(parse_config(&no_fbar, "cfg", Path::new("/")).is_err());
    }
}
