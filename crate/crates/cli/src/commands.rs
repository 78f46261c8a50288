use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{DMatrix, DVector};

use switching_consensus::graphs::{Digraph, SpectralConstants, TopologyEnsemble};
use switching_consensus::io::{read_matrix, read_protocol, write_protocol, write_text, Protocol};
use switching_consensus::markov::MarkovGenerator;
use switching_consensus::simcore::{
    consensus_signals, jtr_ratio, monte_carlo, oscillation_count, overshoot, random_initial_states,
    rms_disagreement, signal_metrics, simulate_full_order, simulate_reduced_order, write_csv,
    DisturbanceSpec, PerformanceReport, SimError, SimSettings, Trajectory, SETTLING_BAND,
};
use switching_consensus::synthesis::{
    reduced_certificates, synthesize_full_order, synthesize_reduced_order, verify_full_order,
    CertificateReport, FBarSpec, FullOrderOptions, GSpec, Plant, ReducedOrderOptions,
    SynthesisError, TauChoice,
};

use crate::config::{DisturbanceConfig, FBarSource, GSource, InitialConfig, Kind, RunConfig};

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Status {
    Ok = 0,
    InputError = 1,
    Failed = 2,
    Blowup = 3,
}

pub struct Problem {
    pub plant: Plant,
    pub ensemble: TopologyEnsemble,
    pub generator: MarkovGenerator,
    pub sc: SpectralConstants,
    pub pi_bar: f64,
}

impl Problem {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let c1 = read_matrix(&cfg.c1)?;
        let c2 = match &cfg.c2 {
            Some(p) => read_matrix(p)?,
            None => c1.clone(),
        };
        let a = read_matrix(&cfg.a)?;
        let r = match &cfg.r {
            Some(p) => read_matrix(p)?,
            None => DMatrix::identity(a.nrows(), a.nrows()),
        };
        let plant = Plant::new(a, read_matrix(&cfg.b)?, c1, c2, read_matrix(&cfg.d)?, r)
            .context("plant matrices")?;
        let graphs = cfg
            .graphs
            .iter()
            .map(|p| Ok(Digraph::new(read_matrix(p)?).with_context(|| p.display().to_string())?))
            .collect::<Result<Vec<_>>>()?;
        let ensemble = TopologyEnsemble::new(graphs).context("topology ensemble")?;
        let generator = MarkovGenerator::new(read_matrix(&cfg.generator)?)
            .with_context(|| cfg.generator.display().to_string())?;
        if generator.n_states() != ensemble.len() {
            bail!(
                "{} topologies but the generator has {} states",
                ensemble.len(),
                generator.n_states()
            );
        }
        let sc = ensemble.spectral_constants().context("spectral constants")?;
        let pi_bar = generator
            .stationary_distribution()
            .context("stationary distribution")?
            .pi_bar;
        Ok(Self {
            plant,
            ensemble,
            generator,
            sc,
            pi_bar,
        })
    }
}

fn tau_choice(cfg: &RunConfig) -> TauChoice {
    cfg.tau.map_or(TauChoice::GeometricMean, TauChoice::Preferred)
}

fn f_bar_spec(src: &FBarSource) -> Result<FBarSpec> {
    Ok(match src {
        FBarSource::Eigenvalues(ev) => FBarSpec::Eigenvalues(ev.clone()),
        FBarSource::Coefficients(c) => FBarSpec::Coefficients(c.clone()),
        FBarSource::File(p) => FBarSpec::Matrix(read_matrix(p)?),
    })
}

pub fn verify(protocol: &Protocol, pb: &Problem) -> Result<CertificateReport> {
    Ok(match protocol {
        Protocol::Full(f) => verify_full_order(f, &pb.plant, &pb.sc, pb.pi_bar),
        Protocol::Reduced(r) => reduced_certificates(r, &pb.plant, &pb.sc, pb.pi_bar),
    }
    .context("protocol does not match the plant")?)
}

pub enum SynthesisOutcome {
    Protocol(Protocol, CertificateReport, Vec<String>),
    Infeasible(String),
}

pub fn certificate_text(kind: &str, report: &CertificateReport, notes: &[String]) -> String {
    let mut text = format!("kind = {kind}\nstatus = feasible\n{report}");
    for n in notes {
        let _ = writeln!(text, "note: {n}");
    }
    text
}

pub fn synthesize(cfg: &RunConfig, pb: &Problem) -> Result<SynthesisOutcome> {
    let result = match cfg.kind {
        Kind::Full => {
            let mut o = FullOrderOptions::new(cfg.gamma);
            o.rho_grid = cfg.rho_grid.clone();
            o.tau = tau_choice(cfg);
            synthesize_full_order(&pb.plant, &pb.sc, pb.pi_bar, &o)
                .map(|(p, d)| (Protocol::Full(p), d))
        }
        Kind::Reduced => {
            let f_bar = f_bar_spec(cfg.f_bar.as_ref().ok_or_else(|| anyhow!("missing F_bar"))?)?;
            let g = match &cfg.g {
                GSource::Seed(seed) => GSpec::Random { seed: *seed },
                GSource::File(p) => GSpec::Matrix(read_matrix(p)?),
            };
            let mut o = ReducedOrderOptions::new(cfg.gamma, f_bar, g);
            o.rho_grid = cfg.rho_grid.clone();
            o.tau = tau_choice(cfg);
            o.decay_rate = cfg.decay_rate;
            synthesize_reduced_order(&pb.plant, &pb.sc, pb.pi_bar, &o)
                .map(|(p, d)| (Protocol::Reduced(p), d))
        }
    };
    match result {
        Ok((proto, diag)) => {
            let report = verify(&proto, pb)?;
            Ok(SynthesisOutcome::Protocol(proto, report, diag.notes.clone()))
        }
        Err(SynthesisError::Infeasible(diag)) => Ok(SynthesisOutcome::Infeasible(diag.to_string())),
        Err(e @ SynthesisError::SingularStack { .. }) => Ok(SynthesisOutcome::Infeasible(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

pub fn cmd_synthesize(cfg: &RunConfig) -> Result<Status> {
    let pb = Problem::load(cfg)?;
    ensure_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("effective.conf"), &cfg.effective_text())?;
    let cert_path = cfg.out_dir.join("certificate.txt");
    match synthesize(cfg, &pb)? {
        SynthesisOutcome::Infeasible(msg) => {
            let text = format!("kind = {}\nstatus = infeasible\n{msg}\n", cfg.kind.name());
            write_text(&cert_path, &text)?;
            eprintln!("{} synthesis infeasible: {msg}", cfg.kind.name());
            Ok(Status::Failed)
        }
        SynthesisOutcome::Protocol(proto, report, notes) => {
            write_protocol(&cfg.out_dir.join("protocol.txt"), &proto)?;
            let text = certificate_text(cfg.kind.name(), &report, &notes);
            write_text(&cert_path, &text)?;
            print!("{text}");
            if report.passed {
                Ok(Status::Ok)
            } else {
                eprintln!("synthesized protocol failed verification");
                Ok(Status::Failed)
            }
        }
    }
}

pub fn cmd_verify(cfg: &RunConfig, protocol: &Path) -> Result<Status> {
    let pb = Problem::load(cfg)?;
    let proto = read_protocol(protocol)?;
    let report = verify(&proto, &pb)?;
    print!("kind = {}\n{report}", proto.kind_name());
    Ok(if report.passed { Status::Ok } else { Status::Failed })
}

fn disturbance(cfg: &RunConfig, pb: &Problem) -> Result<DisturbanceSpec> {
    Ok(match &cfg.disturbance {
        DisturbanceConfig::Zero => DisturbanceSpec::Zero,
        DisturbanceConfig::Square {
            amplitude,
            period,
            phase,
        } => DisturbanceSpec::SquareWave {
            amplitude: amplitude.clone().unwrap_or_else(|| vec![1.0; pb.plant.l()]),
            period: *period,
            phase: *phase,
        },
        DisturbanceConfig::Samples(path) => {
            let m = read_matrix(path)?;
            if m.ncols() < 2 {
                bail!("{}: needs a time column and at least one value column", path.display());
            }
            DisturbanceSpec::Samples {
                times: m.column(0).iter().copied().collect(),
                values: (0..m.nrows())
                    .map(|i| m.row(i).columns(1, m.ncols() - 1).transpose())
                    .collect(),
            }
        }
    })
}

fn per_agent(t: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let (k, n) = t.shape();
    let na = x.len() / n;
    let mut out = DVector::zeros(na * k);
    for i in 0..na {
        out.rows_mut(i * k, k).copy_from(&(t * x.rows(i * n, n)));
    }
    out
}

fn flatten(m: DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.transpose().iter().copied())
}

/// `(x0, observer0)`; the observer state is `xhat0` or `v0`.
fn initial_states(cfg: &RunConfig, pb: &Problem, proto: &Protocol) -> Result<(DVector<f64>, DVector<f64>)> {
    let na = pb.ensemble.n_nodes();
    let n = pb.plant.n();
    let (x0, xhat0) = match &cfg.initial {
        InitialConfig::Random { seed } => (
            random_initial_states(na, n, *seed),
            random_initial_states(na, n, seed.wrapping_add(1)),
        ),
        InitialConfig::Identical { seed } => {
            let one = random_initial_states(1, n, *seed);
            let x = DVector::from_iterator(na * n, (0..na).flat_map(|_| one.iter().copied()));
            (x.clone(), x)
        }
        InitialConfig::Files { x0, observer0 } => {
            return Ok((flatten(read_matrix(x0)?), flatten(read_matrix(observer0)?)));
        }
    };
    let obs = match proto {
        Protocol::Full(_) => xhat0,
        Protocol::Reduced(r) => per_agent(&r.t_map, &xhat0),
    };
    Ok((x0, obs))
}

fn decimate(tr: &Trajectory, k: usize) -> Trajectory {
    let pick = |v: &Vec<DVector<f64>>| v.iter().step_by(k).cloned().collect();
    Trajectory {
        dt: tr.dt * k as f64,
        times: tr.times.iter().step_by(k).copied().collect(),
        sigma: tr.sigma.iter().step_by(k).copied().collect(),
        states: pick(&tr.states),
        observer_states: pick(&tr.observer_states),
        estimates: pick(&tr.estimates),
        controls: pick(&tr.controls),
        disturbance: pick(&tr.disturbance),
        ..tr.clone()
    }
}

#[derive(Debug, Clone)]
pub struct ChannelSummary {
    pub agent: usize,
    pub channel: usize,
    pub mean_overshoot: f64,
    pub mean_oscillations: f64,
    /// Mean settling time over paths; `None` when some path is unsettled.
    pub mean_settling: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SimSummary {
    pub performance: Option<PerformanceReport>,
    pub settling_time: Option<f64>,
    pub channels: Vec<ChannelSummary>,
    pub status: Status,
    pub text: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("unsettled".to_string(), |t| format!("{t:.6e}"))
}

pub fn run_simulation(cfg: &RunConfig, pb: &Problem, proto: &Protocol) -> Result<SimSummary> {
    let dist = disturbance(cfg, pb)?;
    let (x0, obs0) = initial_states(cfg, pb, proto)?;
    let mut settings = SimSettings::new(cfg.t_end, cfg.dt).with_stride(cfg.record_stride);
    settings.observer_disturbance_feed = cfg.observer_disturbance_feed;
    let run = monte_carlo(cfg.paths, cfg.seed, |_, seed| match proto {
        Protocol::Full(f) => simulate_full_order(
            &pb.plant, f, &pb.ensemble, &pb.generator, &x0, &obs0, &dist, &settings, seed,
        ),
        Protocol::Reduced(r) => simulate_reduced_order(
            &pb.plant, r, &pb.ensemble, &pb.generator, &x0, &obs0, &dist, &settings, seed,
        ),
    });
    let trajs = match run {
        Ok(t) => t,
        Err(e @ SimError::NumericalBlowup { .. }) => {
            return Ok(SimSummary {
                performance: None,
                settling_time: None,
                channels: Vec::new(),
                status: Status::Blowup,
                text: format!("kind = {}\nstatus = blowup\nerror = {e}\n", proto.kind_name()),
            });
        }
        Err(e) => return Err(e.into()),
    };

    ensure_dir(&cfg.out_dir)?;
    for (k, tr) in trajs.iter().enumerate() {
        let path = cfg.out_dir.join(format!("path_{k:03}.csv"));
        let file = fs::File::create(&path).with_context(|| path.display().to_string())?;
        write_csv(&decimate(tr, cfg.csv_stride), std::io::BufWriter::new(file))
            .with_context(|| path.display().to_string())?;
    }

    let rms = rms_disagreement(&trajs);
    let c0 = rms[0] * rms[0];
    let c1 = rms[rms.len() - 1].powi(2);
    let consensus_passed = if c0 > 0.0 {
        c1 <= cfg.consensus_tolerance * c0
    } else {
        c1 == 0.0
    };
    let times = &trajs[0].times;
    let settling_time = signal_metrics(times, &rms, SETTLING_BAND, Some(0.0))
        .ok()
        .map(|m| m.settling_time);

    let mut channels = Vec::new();
    for &(agent, channel) in &cfg.overshoot_channels {
        if agent >= pb.ensemble.n_nodes() || channel >= pb.plant.n() {
            bail!("overshoot channel {agent}:{channel} out of range");
        }
        let mut os = 0.0;
        let mut osc = 0.0;
        let mut settle = Some(0.0);
        for tr in &trajs {
            let sig = consensus_signals(tr, &pb.plant.c2).zeta_channel(tr.n, agent, channel);
            os += overshoot(&sig, Some(0.0));
            osc += oscillation_count(&sig, Some(0.0)) as f64;
            settle = match (settle, signal_metrics(times, &sig, SETTLING_BAND, Some(0.0))) {
                (Some(s), Ok(m)) => Some(s + m.settling_time),
                _ => None,
            };
        }
        let np = trajs.len() as f64;
        channels.push(ChannelSummary {
            agent,
            channel,
            mean_overshoot: os / np,
            mean_oscillations: osc / np,
            mean_settling: settle.map(|s| s / np),
        });
    }

    let mut text = String::new();
    let _ = writeln!(text, "kind = {}", proto.kind_name());
    let _ = writeln!(text, "paths = {}", trajs.len());
    let _ = writeln!(text, "t_end = {}", cfg.t_end);
    let _ = writeln!(text, "dt = {}", cfg.dt);
    let performance = match jtr_ratio(&trajs, &pb.plant, proto.gamma()) {
        Ok(rep) => {
            let _ = writeln!(text, "jtr_ratio = {:.6e}", rep.jtr_ratio);
            let _ = writeln!(text, "jtr_std_error = {:.3e}", rep.std_error);
            let _ = writeln!(text, "jtr_tail_bound = {:.3e}", rep.tail_bound);
            let _ = writeln!(text, "gamma_squared = {:.6e}", rep.gamma_squared);
            let _ = writeln!(text, "jtr_passed = {}", rep.passed);
            Some(rep)
        }
        Err(SimError::ZeroDenominator) => {
            let _ = writeln!(
                text,
                "jtr_ratio = undefined (zero disturbance and zero initial disagreement)"
            );
            None
        }
        Err(e) => return Err(e.into()),
    };
    let _ = writeln!(text, "consensus_error_initial = {c0:.6e}");
    let _ = writeln!(text, "consensus_error_final = {c1:.6e}");
    let _ = writeln!(text, "consensus_tolerance = {:.3e}", cfg.consensus_tolerance);
    let _ = writeln!(text, "consensus_passed = {consensus_passed}");
    let _ = writeln!(text, "settling_time = {}", fmt_opt(settling_time));
    if let Some(rep) = &performance {
        let _ = writeln!(text, "worst_path_settling = {}", fmt_opt(rep.worst_path_settling));
    }
    for c in &channels {
        let tag = format!("[{}][{}]", c.agent, c.channel);
        let _ = writeln!(text, "overshoot{tag} = {:.6e}", c.mean_overshoot);
        let _ = writeln!(text, "oscillations{tag} = {:.3}", c.mean_oscillations);
        let _ = writeln!(text, "channel_settling{tag} = {}", fmt_opt(c.mean_settling));
    }
    let jtr_ok = performance.as_ref().map_or(true, |r| r.passed);
    let status = if jtr_ok && consensus_passed {
        Status::Ok
    } else {
        Status::Failed
    };
    let _ = writeln!(text, "status = {}", if status == Status::Ok { "pass" } else { "fail" });
    Ok(SimSummary {
        performance,
        settling_time,
        channels,
        status,
        text,
    })
}

pub fn cmd_simulate(cfg: &RunConfig, protocol: &Path) -> Result<Status> {
    let pb = Problem::load(cfg)?;
    let proto = read_protocol(protocol)?;
    let cert = verify(&proto, &pb)?;
    ensure_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("effective.conf"), &cfg.effective_text())?;
    if !cert.passed {
        eprintln!("protocol {} does not verify against the plant:\n{cert}", protocol.display());
        return Ok(Status::Failed);
    }
    let summary = run_simulation(cfg, &pb, &proto)?;
    write_text(&cfg.out_dir.join("report.txt"), &summary.text)?;
    print!("{}", summary.text);
    Ok(summary.status)
}
