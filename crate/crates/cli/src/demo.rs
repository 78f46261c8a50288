//! Embedded four-helicopter benchmark, written out as an ordinary
//! configuration and run through the same pipeline as user configs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Result;

use switching_consensus::benchmark as bm;
use switching_consensus::io::{format_real, write_matrix, write_protocol, write_text};

use crate::commands::{certificate_text, run_simulation, synthesize, Problem, SimSummary, Status, SynthesisOutcome};
use crate::config::{Kind, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DemoKind {
    Full,
    Reduced,
    Compare,
}

/// Writes the benchmark matrices into `dir/data` and returns the path of
/// a config for `kind`.
pub fn write_benchmark(dir: &Path, kind: Kind, seed: u64, paths: usize) -> Result<PathBuf> {
    let data = dir.join("data");
    std::fs::create_dir_all(&data)?;
    let p = bm::plant();
    write_matrix(&data.join("a.txt"), &p.a)?;
    write_matrix(&data.join("b.txt"), &p.b)?;
    write_matrix(&data.join("c.txt"), &p.c1)?;
    write_matrix(&data.join("d.txt"), &p.d)?;
    write_matrix(&data.join("r.txt"), &p.r)?;
    write_matrix(&data.join("g_observer.txt"), &bm::g_observer())?;
    let e = bm::topologies()?;
    for (k, g) in e.graphs().iter().enumerate() {
        write_matrix(&data.join(format!("graph{}.txt", k + 1)), g.adjacency())?;
    }
    write_matrix(&data.join("generator.txt"), bm::generator().rates())?;

    let coeffs: Vec<String> = bm::F_BAR_COEFFS.iter().map(|c| format_real(*c)).collect();
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("plant.a", "data/a.txt".into());
    kv("plant.b", "data/b.txt".into());
    kv("plant.c1", "data/c.txt".into());
    kv("plant.c2", "data/c.txt".into());
    kv("plant.d", "data/d.txt".into());
    kv("plant.r", "data/r.txt".into());
    kv("topology.graphs", "data/graph1.txt, data/graph2.txt".into());
    kv("markov.generator", "data/generator.txt".into());
    kv("synthesis.kind", kind.name().into());
    kv("synthesis.gamma", format_real(bm::GAMMA));
    kv("synthesis.tau", format_real(bm::TAU));
    if kind == Kind::Reduced {
        kv("synthesis.decay_rate", format_real(bm::REDUCED_DECAY_RATE));
        kv("synthesis.f_bar.coefficients", coeffs.join(", "));
        kv("synthesis.g.matrix", "data/g_observer.txt".into());
    }
    kv("simulation.t_end", format_real(bm::HORIZON));
    kv("simulation.dt", format_real(1e-3));
    kv("simulation.paths", paths.to_string());
    kv("simulation.seed", seed.to_string());
    kv("simulation.disturbance", "square".into());
    kv("simulation.disturbance.period", format_real(bm::SQUARE_WAVE_PERIOD));
    kv("simulation.initial", "random".into());
    kv("simulation.initial.seed", bm::INITIAL_SEED.to_string());
    kv(
        "simulation.overshoot_channels",
        format!("{}:{}", bm::N_AGENTS - 1, bm::PITCH_STATE),
    );
    kv("output.dir", ".".into());
    let path = dir.join("helicopter.conf");
    write_text(&path, &s)?;
    Ok(path)
}

struct DemoRun {
    kind: Kind,
    status: Status,
    summary: Option<SimSummary>,
    note: String,
}

fn run_one(dir: &Path, kind: Kind, seed: u64, paths: usize) -> Result<DemoRun> {
    let conf = write_benchmark(dir, kind, seed, paths)?;
    let cfg = RunConfig::load(&conf)?;
    let pb = Problem::load(&cfg)?;
    write_text(&dir.join("effective.conf"), &cfg.effective_text())?;
    println!("== {} order ==", kind.name());
    match synthesize(&cfg, &pb)? {
        SynthesisOutcome::Infeasible(msg) => {
            let text = format!("kind = {}\nstatus = infeasible\n{msg}\n", kind.name());
            write_text(&dir.join("certificate.txt"), &text)?;
            print!("{text}");
            Ok(DemoRun {
                kind,
                status: Status::Failed,
                summary: None,
                note: "no feasible protocol".into(),
            })
        }
        SynthesisOutcome::Protocol(proto, cert, notes) => {
            write_protocol(&dir.join("protocol.txt"), &proto)?;
            let text = certificate_text(kind.name(), &cert, &notes);
            write_text(&dir.join("certificate.txt"), &text)?;
            print!("{text}");
            if !cert.passed {
                return Ok(DemoRun {
                    kind,
                    status: Status::Failed,
                    summary: None,
                    note: "protocol failed verification".into(),
                });
            }
            let summary = run_simulation(&cfg, &pb, &proto)?;
            write_text(&dir.join("report.txt"), &summary.text)?;
            print!("{}", summary.text);
            Ok(DemoRun {
                kind,
                status: summary.status,
                summary: Some(summary),
                note: String::new(),
            })
        }
    }
}

fn compare_text(runs: &[DemoRun]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "== comparison (agent {} pitch disagreement) ==", bm::N_AGENTS);
    for r in runs {
        let name = r.kind.name();
        match &r.summary {
            None => {
                let _ = writeln!(s, "{name}.available = false ({})", r.note);
            }
            Some(sm) => {
                let _ = writeln!(s, "{name}.settling_time = {}", opt(sm.settling_time));
                if let Some(c) = sm.channels.first() {
                    let _ = writeln!(s, "{name}.pitch_overshoot = {:.6e}", c.mean_overshoot);
                    let _ = writeln!(s, "{name}.pitch_oscillations = {:.3}", c.mean_oscillations);
                    let _ = writeln!(s, "{name}.pitch_settling = {}", opt(c.mean_settling));
                }
                if let Some(p) = &sm.performance {
                    let _ = writeln!(s, "{name}.jtr_ratio = {:.6e}", p.jtr_ratio);
                }
            }
        }
    }
    let os = |k: Kind| {
        runs.iter()
            .find(|r| r.kind == k)
            .and_then(|r| r.summary.as_ref())
            .and_then(|sm| sm.channels.first())
            .map(|c| c.mean_overshoot)
    };
    match (os(Kind::Full), os(Kind::Reduced)) {
        (Some(f), Some(r)) => {
            let smaller = if r < f { "reduced" } else { "full" };
            let _ = writeln!(s, "smaller_pitch_overshoot = {smaller}");
            let _ = writeln!(s, "expected_smaller_pitch_overshoot = reduced (non-blocking)");
        }
        _ => {
            let _ = writeln!(s, "smaller_pitch_overshoot = undetermined (a protocol is unavailable)");
        }
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map_or("unsettled".into(), |t| format!("{t:.6e}"))
}

pub fn cmd_helicopter_demo(kind: DemoKind, out: &Path, seed: u64, paths: usize) -> Result<Status> {
    let kinds: &[Kind] = match kind {
        DemoKind::Full => &[Kind::Full],
        DemoKind::Reduced => &[Kind::Reduced],
        DemoKind::Compare => &[Kind::Full, Kind::Reduced],
    };
    let mut runs = Vec::new();
    for &k in kinds {
        runs.push(run_one(&out.join(k.name()), k, seed, paths)?);
    }
    if kind == DemoKind::Compare {
        let text = compare_text(&runs);
        write_text(&out.join("compare.txt"), &text)?;
        print!("{text}");
    }
    Ok(runs.iter().map(|r| r.status).max().unwrap_or(Status::Ok))
}
