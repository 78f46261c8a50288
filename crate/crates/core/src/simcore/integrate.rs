//! Per-agent right-hand sides and the split-step RK4 driver.

use nalgebra::{DMatrix, DVector};

use crate::graphs::TopologyEnsemble;
use crate::markov::SwitchingPath;
use crate::synthesis::{FullOrderProtocol, Plant, ReducedOrderProtocol};

use super::{DisturbanceSpec, ProtocolKind, SimError, SimSettings, Trajectory, BLOWUP_NORM};

/// Neighbour lists `(j, a_ij)` for every agent, one set per topology.
fn neighbour_lists(e: &TopologyEnsemble) -> Vec<Vec<Vec<(usize, f64)>>> {
    e.graphs()
        .iter()
        .map(|g| {
            let a = g.adjacency();
            (0..a.nrows())
                .map(|i| {
                    (0..a.ncols())
                        .filter(|&j| a[(i, j)] != 0.0)
                        .map(|j| (j, a[(i, j)]))
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub(crate) struct Workspace {
    rel_x: DVector<f64>,
    rel_v: DVector<f64>,
    rel: DVector<f64>,
    u: DVector<f64>,
}

pub(crate) trait ClosedLoop {
    fn kind(&self) -> ProtocolKind;
    fn n_agents(&self) -> usize;
    fn n(&self) -> usize;
    fn obs(&self) -> usize;
    fn m(&self) -> usize;
    fn l(&self) -> usize;
    fn workspace(&self) -> Workspace {
        Workspace {
            rel_x: DVector::zeros(self.n()),
            rel_v: DVector::zeros(self.obs()),
            rel: DVector::zeros(self.n()),
            u: DVector::zeros(self.m()),
        }
    }
    /// Writes `u_i` into `ws.u`.
    fn control(&self, mode: usize, z: &DVector<f64>, i: usize, ws: &mut Workspace);
    fn rhs(
        &self,
        mode: usize,
        z: &DVector<f64>,
        w: &DVector<f64>,
        dz: &mut DVector<f64>,
        ws: &mut Workspace,
    );
    /// State estimate of agent `i` reconstructed from the observer.
    fn estimate(&self, z: &DVector<f64>, i: usize) -> DVector<f64>;
}

/// `sum_j a_ij (s_i - s_j)` for the block of width `w` starting at `offset`.
fn relative(
    nbrs: &[(usize, f64)],
    z: &DVector<f64>,
    offset: usize,
    w: usize,
    i: usize,
    out: &mut DVector<f64>,
) {
    out.fill(0.0);
    let zi = z.rows(offset + i * w, w);
    for &(j, aij) in nbrs {
        let zj = z.rows(offset + j * w, w);
        out.axpy(aij, &zi, 1.0);
        out.axpy(-aij, &zj, 1.0);
    }
}

pub(crate) struct FullOrderLoop {
    n_agents: usize,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    a_lc: DMatrix<f64>,
    lc: DMatrix<f64>,
    tau_k: DMatrix<f64>,
    nbrs: Vec<Vec<Vec<(usize, f64)>>>,
}

impl FullOrderLoop {
    pub fn new(p: &Plant, proto: &FullOrderProtocol, e: &TopologyEnsemble) -> Self {
        let lc = &proto.l_gain * &p.c1;
        Self {
            n_agents: e.n_nodes(),
            a: p.a.clone(),
            b: p.b.clone(),
            d: p.d.clone(),
            a_lc: &p.a + &lc,
            lc,
            tau_k: &proto.k_gain * proto.tau,
            nbrs: neighbour_lists(e),
        }
    }
}

impl ClosedLoop for FullOrderLoop {
    fn kind(&self) -> ProtocolKind {
        ProtocolKind::Full
    }
    fn n_agents(&self) -> usize {
        self.n_agents
    }
    fn n(&self) -> usize {
        self.a.nrows()
    }
    fn obs(&self) -> usize {
        self.a.nrows()
    }
    fn m(&self) -> usize {
        self.b.ncols()
    }
    fn l(&self) -> usize {
        self.d.ncols()
    }

    fn control(&self, _mode: usize, z: &DVector<f64>, i: usize, ws: &mut Workspace) {
        let n = self.n();
        let off = self.n_agents * n;
        ws.u.gemv(-1.0, &self.tau_k, &z.rows(off + i * n, n), 0.0);
    }

    fn rhs(
        &self,
        mode: usize,
        z: &DVector<f64>,
        w: &DVector<f64>,
        dz: &mut DVector<f64>,
        ws: &mut Workspace,
    ) {
        let n = self.n();
        let l = self.l();
        let off = self.n_agents * n;
        for i in 0..self.n_agents {
            self.control(mode, z, i, ws);
            relative(&self.nbrs[mode][i], z, 0, n, i, &mut ws.rel_x);
            let xi = z.rows(i * n, n);
            let xh = z.rows(off + i * n, n);
            let wi = w.rows(i * l, l);
            {
                let mut dx = dz.rows_mut(i * n, n);
                dx.gemv(1.0, &self.a, &xi, 0.0);
                dx.gemv(1.0, &self.b, &ws.u, 1.0);
                dx.gemv(1.0, &self.d, &wi, 1.0);
            }
            let mut dxh = dz.rows_mut(off + i * n, n);
            dxh.gemv(1.0, &self.a_lc, &xh, 0.0);
            dxh.gemv(1.0, &self.b, &ws.u, 1.0);
            dxh.gemv(-1.0, &self.lc, &ws.rel_x, 1.0);
        }
    }

    fn estimate(&self, z: &DVector<f64>, i: usize) -> DVector<f64> {
        let n = self.n();
        z.rows(self.n_agents * n + i * n, n).into_owned()
    }
}

pub(crate) struct ReducedOrderLoop {
    n_agents: usize,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    f_bar: DMatrix<f64>,
    gc: DMatrix<f64>,
    tb: DMatrix<f64>,
    td: Option<DMatrix<f64>>,
    q1c: DMatrix<f64>,
    q2: DMatrix<f64>,
    tau_k: DMatrix<f64>,
    nbrs: Vec<Vec<Vec<(usize, f64)>>>,
}

impl ReducedOrderLoop {
    pub fn new(
        p: &Plant,
        proto: &ReducedOrderProtocol,
        e: &TopologyEnsemble,
        observer_disturbance_feed: bool,
    ) -> Self {
        Self {
            n_agents: e.n_nodes(),
            a: p.a.clone(),
            b: p.b.clone(),
            d: p.d.clone(),
            f_bar: proto.f_bar.clone(),
            gc: &proto.g_gain * &p.c1,
            tb: &proto.t_map * &p.b,
            td: observer_disturbance_feed.then(|| &proto.t_map * &p.d),
            q1c: &proto.q1_map * &p.c1,
            q2: proto.q2_map.clone(),
            tau_k: &proto.k_gain * proto.tau,
            nbrs: neighbour_lists(e),
        }
    }
}

impl ClosedLoop for ReducedOrderLoop {
    fn kind(&self) -> ProtocolKind {
        ProtocolKind::Reduced
    }
    fn n_agents(&self) -> usize {
        self.n_agents
    }
    fn n(&self) -> usize {
        self.a.nrows()
    }
    fn obs(&self) -> usize {
        self.f_bar.nrows()
    }
    fn m(&self) -> usize {
        self.b.ncols()
    }
    fn l(&self) -> usize {
        self.d.ncols()
    }

    fn control(&self, mode: usize, z: &DVector<f64>, i: usize, ws: &mut Workspace) {
        let n = self.n();
        let nv = self.obs();
        let nbrs = &self.nbrs[mode][i];
        relative(nbrs, z, 0, n, i, &mut ws.rel_x);
        relative(nbrs, z, self.n_agents * n, nv, i, &mut ws.rel_v);
        ws.rel.gemv(1.0, &self.q1c, &ws.rel_x, 0.0);
        ws.rel.gemv(1.0, &self.q2, &ws.rel_v, 1.0);
        ws.u.gemv(-1.0, &self.tau_k, &ws.rel, 0.0);
    }

    fn rhs(
        &self,
        mode: usize,
        z: &DVector<f64>,
        w: &DVector<f64>,
        dz: &mut DVector<f64>,
        ws: &mut Workspace,
    ) {
        let n = self.n();
        let nv = self.obs();
        let l = self.l();
        let off = self.n_agents * n;
        for i in 0..self.n_agents {
            self.control(mode, z, i, ws);
            let xi = z.rows(i * n, n);
            let vi = z.rows(off + i * nv, nv);
            let wi = w.rows(i * l, l);
            {
                let mut dx = dz.rows_mut(i * n, n);
                dx.gemv(1.0, &self.a, &xi, 0.0);
                dx.gemv(1.0, &self.b, &ws.u, 1.0);
                dx.gemv(1.0, &self.d, &wi, 1.0);
            }
            let mut dv = dz.rows_mut(off + i * nv, nv);
            dv.gemv(1.0, &self.f_bar, &vi, 0.0);
            dv.gemv(1.0, &self.gc, &xi, 1.0);
            dv.gemv(1.0, &self.tb, &ws.u, 1.0);
            if let Some(td) = &self.td {
                dv.gemv(1.0, td, &wi, 1.0);
            }
        }
    }

    fn estimate(&self, z: &DVector<f64>, i: usize) -> DVector<f64> {
        let n = self.n();
        let nv = self.obs();
        &self.q1c * z.rows(i * n, n) + &self.q2 * z.rows(self.n_agents * n + i * nv, nv)
    }
}

struct Recorder {
    traj: Trajectory,
}

impl Recorder {
    fn push<S: ClosedLoop>(
        &mut self,
        sys: &S,
        t: f64,
        mode: usize,
        z: &DVector<f64>,
        w: DVector<f64>,
        ws: &mut Workspace,
    ) {
        let na = sys.n_agents();
        let nx = na * sys.n();
        let m = sys.m();
        let mut u = DVector::zeros(na * m);
        let mut est = DVector::zeros(nx);
        for i in 0..na {
            sys.control(mode, z, i, ws);
            u.rows_mut(i * m, m).copy_from(&ws.u);
            est.rows_mut(i * sys.n(), sys.n())
                .copy_from(&sys.estimate(z, i));
        }
        let tr = &mut self.traj;
        tr.times.push(t);
        tr.sigma.push(mode);
        tr.states.push(z.rows(0, nx).into_owned());
        tr.observer_states
            .push(z.rows(nx, z.len() - nx).into_owned());
        tr.estimates.push(est);
        tr.controls.push(u);
        tr.disturbance.push(w);
    }
}

fn first_blowup<S: ClosedLoop>(sys: &S, z: &DVector<f64>) -> bool {
    let na = sys.n_agents();
    let (n, nv) = (sys.n(), sys.obs());
    (0..na).any(|i| {
        let x = z.rows(i * n, n).norm();
        let v = z.rows(na * n + i * nv, nv).norm();
        !(x <= BLOWUP_NORM && v <= BLOWUP_NORM)
    })
}

/// Classical RK4 on a uniform grid; every grid step is split at switching
/// and disturbance breakpoints so each sub-step sees a smooth vector field.
pub(crate) fn integrate<S: ClosedLoop>(
    sys: &S,
    z0: DVector<f64>,
    path: &SwitchingPath,
    dist: &DisturbanceSpec,
    settings: &SimSettings,
) -> Result<Trajectory, SimError> {
    let steps = settings.n_steps()?;
    let stride = settings.record_stride;
    let dt = settings.dt;
    let (na, l) = (sys.n_agents(), sys.l());
    let dim = z0.len();
    let n_records = steps / stride + 1;
    let mut rec = Recorder {
        traj: Trajectory::with_capacity(
            sys.kind(),
            [na, sys.n(), sys.obs(), sys.m(), l],
            dt * stride as f64,
            path.clone(),
            n_records,
        ),
    };
    let mut ws = sys.workspace();
    let mut z = z0;
    if first_blowup(sys, &z) {
        return Err(SimError::NumericalBlowup { time: 0.0 });
    }
    rec.push(sys, 0.0, path.state_at(0.0), &z, dist.value(0.0, na, l), &mut ws);

    let mut k1 = DVector::zeros(dim);
    let mut k2 = DVector::zeros(dim);
    let mut k3 = DVector::zeros(dim);
    let mut k4 = DVector::zeros(dim);
    let mut tmp = DVector::zeros(dim);
    let mut w = DVector::zeros(na * l);
    let mut cuts: Vec<f64> = Vec::new();
    let tiny = 1e-12 * dt;

    for k in 0..steps {
        let t0 = k as f64 * dt;
        let t1 = (k + 1) as f64 * dt;
        cuts.clear();
        cuts.extend(path.jumps_between(t0, t1));
        dist.breakpoints(t0, t1, &mut cuts);
        cuts.sort_by(|a, b| a.total_cmp(b));
        cuts.push(t1);
        let mut a = t0;
        for &b in &cuts {
            if b - a <= tiny {
                continue;
            }
            let h = b - a;
            let mid = 0.5 * (a + b);
            let mode = path.state_at(mid);
            dist.eval_into(a, mid, l, &mut w);
            sys.rhs(mode, &z, &w, &mut k1, &mut ws);
            tmp.copy_from(&z);
            tmp.axpy(0.5 * h, &k1, 1.0);
            dist.eval_into(mid, mid, l, &mut w);
            sys.rhs(mode, &tmp, &w, &mut k2, &mut ws);
            tmp.copy_from(&z);
            tmp.axpy(0.5 * h, &k2, 1.0);
            sys.rhs(mode, &tmp, &w, &mut k3, &mut ws);
            tmp.copy_from(&z);
            tmp.axpy(h, &k3, 1.0);
            dist.eval_into(b, mid, l, &mut w);
            sys.rhs(mode, &tmp, &w, &mut k4, &mut ws);
            z.axpy(h / 6.0, &k1, 1.0);
            z.axpy(h / 3.0, &k2, 1.0);
            z.axpy(h / 3.0, &k3, 1.0);
            z.axpy(h / 6.0, &k4, 1.0);
            a = b;
        }
        if first_blowup(sys, &z) {
            return Err(SimError::NumericalBlowup { time: t1 });
        }
        if (k + 1) % stride == 0 {
            let mode = path.state_at(t1);
            rec.push(sys, t1, mode, &z, dist.value(t1, na, l), &mut ws);
        }
    }
    Ok(rec.traj)
}
