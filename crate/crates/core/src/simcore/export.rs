use std::io::{self, Write};

use super::Trajectory;

fn push_labels(out: &mut Vec<String>, name: &str, agents: usize, width: usize) {
    for i in 0..agents {
        for k in 0..width {
            out.push(format!("{name}[{i}][{k}]"));
        }
    }
}

/// Column labels: time, switching state, then plant states, observer
/// states, inputs and disturbances for each agent (zero-based indices).
pub fn csv_header(traj: &Trajectory) -> Vec<String> {
    let mut cols = vec!["t".to_string(), "sigma".to_string()];
    push_labels(&mut cols, "x", traj.n_agents, traj.n);
    push_labels(
        &mut cols,
        traj.kind.observer_label(),
        traj.n_agents,
        traj.observer_dim,
    );
    push_labels(&mut cols, "u", traj.n_agents, traj.m);
    push_labels(&mut cols, "w", traj.n_agents, traj.l);
    cols
}

/// One row per grid point, reals at 17 significant digits.
pub fn write_csv<W: Write>(traj: &Trajectory, mut w: W) -> io::Result<()> {
    writeln!(w, "{}", csv_header(traj).join(","))?;
    let mut line = String::new();
    for k in 0..traj.len() {
        line.clear();
        line.push_str(&format!("{:.16e},{}", traj.times[k], traj.sigma[k]));
        for series in [
            &traj.states[k],
            &traj.observer_states[k],
            &traj.controls[k],
            &traj.disturbance[k],
        ] {
            for v in series.iter() {
                line.push_str(&format!(",{v:.16e}"));
            }
        }
        writeln!(w, "{line}")?;
    }
    w.flush()
}
