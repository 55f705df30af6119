//! Flow integration: Hamiltonian geodesics and force-perturbed trajectories.
//!
//! Control points and momenta evolve on the unit time interval under
//!
//! ```text
//! dc_k/dt  =  sum_j K(c_k, c_j) mu_j
//! dmu_k/dt = -sum_j grad1 K(c_k, c_j) (mu_k . mu_j)  [+ u_k(t)]
//! ```
//!
//! while carried landmarks are advected through the induced velocity field,
//! `dx/dt = v_t(x)`. Without external forces the flow is a geodesic and the
//! kernel energy `|v_t|_K^2` is a conserved quantity. External forces enter
//! the momentum equation additively and are held piecewise-constant on each
//! integration step.

use crate::error::{Error, Result};
use crate::geometry::{rkhs_norm_sq, ControlSystem, KernelParams, LandmarkSet, Point3, Vec3};

/// Time-stepping scheme for the flow equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    Rk4,
}

/// Discretization of the unit time interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntegratorConfig {
    pub n_steps: usize,
    pub scheme: Scheme,
}

impl IntegratorConfig {
    pub fn new(n_steps: usize, scheme: Scheme) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::invalid_argument("integrator needs at least one step"));
        }
        Ok(IntegratorConfig { n_steps, scheme })
    }

    pub fn rk4(n_steps: usize) -> Result<Self> {
        IntegratorConfig::new(n_steps, Scheme::Rk4)
    }
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            n_steps: 10,
            scheme: Scheme::Rk4,
        }
    }
}

/// Discretized external forces: one 3-vector per control point per step,
/// held constant on `[t_i, t_{i+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceField {
    n_steps: usize,
    n_ctrl: usize,
    data: Vec<Vec3>,
}

impl ForceField {
    pub fn zeros(n_steps: usize, n_ctrl: usize) -> Self {
        ForceField {
            n_steps,
            n_ctrl,
            data: vec![Vec3::zeros(); n_steps * n_ctrl],
        }
    }

    pub fn from_data(n_steps: usize, n_ctrl: usize, data: Vec<Vec3>) -> Result<Self> {
        if data.len() != n_steps * n_ctrl {
            return Err(Error::invalid_argument(format!(
                "force field data length {} does not match {} steps x {} control points",
                data.len(),
                n_steps,
                n_ctrl
            )));
        }
        Ok(ForceField {
            n_steps,
            n_ctrl,
            data,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_ctrl(&self) -> usize {
        self.n_ctrl
    }

    pub fn at_step(&self, step: usize) -> &[Vec3] {
        &self.data[step * self.n_ctrl..(step + 1) * self.n_ctrl]
    }

    pub fn at_step_mut(&mut self, step: usize) -> &mut [Vec3] {
        &mut self.data[step * self.n_ctrl..(step + 1) * self.n_ctrl]
    }

    pub fn data(&self) -> &[Vec3] {
        &self.data
    }

    /// Quadrature of the squared Euclidean force magnitude over time:
    /// `(1/n) sum_t sum_k |u_k(t)|^2`.
    pub fn energy(&self) -> f64 {
        let sum: f64 = self.data.iter().map(|u| u.norm_squared()).sum();
        sum / self.n_steps as f64
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ForceField {
            n_steps: self.n_steps,
            n_ctrl: self.n_ctrl,
            data: self.data.iter().map(|u| factor * u).collect(),
        }
    }
}

/// Full state of a flow at one time node.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub control_points: Vec<Point3>,
    pub momenta: Vec<Vec3>,
    pub landmarks: Vec<Point3>,
}

impl FlowState {
    pub fn control_system(&self) -> ControlSystem {
        ControlSystem::new(self.control_points.clone(), self.momenta.clone())
            .expect("flow state is shape-consistent by construction")
    }

    pub fn landmark_set(&self) -> LandmarkSet {
        LandmarkSet::new(self.landmarks.clone())
            .expect("flow state carries a non-empty landmark set")
    }

    /// Kernel energy `|v|_K^2` of this state.
    pub fn energy(&self, k: &KernelParams) -> f64 {
        rkhs_norm_sq(&self.control_system(), k)
    }
}

/// Discretized trajectory of control points, momenta and carried landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub states: Vec<FlowState>,
    pub times: Vec<f64>,
}

impl FlowResult {
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn initial(&self) -> &FlowState {
        &self.states[0]
    }

    pub fn final_state(&self) -> &FlowState {
        self.states.last().expect("flow has at least one state")
    }

    pub fn final_landmarks(&self) -> LandmarkSet {
        self.final_state().landmark_set()
    }
}

/// Right-hand side of the flow equations for control points and momenta.
///
/// Returns `(dc, dmu)`. When `forces_at_t` is given it is added to the
/// momentum derivative.
pub fn hamiltonian_rhs(
    sys: &ControlSystem,
    forces_at_t: Option<&[Vec3]>,
    k: &KernelParams,
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    if let Some(u) = forces_at_t {
        if u.len() != sys.len() {
            return Err(Error::invalid_argument(format!(
                "forces length {} does not match {} control points",
                u.len(),
                sys.len()
            )));
        }
    }
    let state = State {
        c: sys.control_points().to_vec(),
        mu: sys.momenta().to_vec(),
        x: Vec::new(),
    };
    let mut kernels = Kernels::sized(sys.len(), 0);
    kernels.fill(&state, k);
    let mut delta = FlowDelta::zeros(sys.len(), 0);
    let zeros = vec![Vec3::zeros(); sys.len()];
    rhs(&state, &kernels, forces_at_t.unwrap_or(&zeros), k, &mut delta);
    Ok((delta.c, delta.mu))
}

/// Kernel energy of the current state; conserved along geodesics.
pub fn hamiltonian_energy(sys: &ControlSystem, k: &KernelParams) -> f64 {
    rkhs_norm_sq(sys, k)
}

/// Integrate the flow from `sys` over `[0, 1]`, advecting `carried`.
///
/// With `forces` absent (or all zero) this is geodesic shooting. The result
/// holds the state at every node of the uniform time grid; `states[0]` is
/// the input exactly.
pub fn shoot(
    sys: &ControlSystem,
    carried: &LandmarkSet,
    forces: Option<&ForceField>,
    cfg: &IntegratorConfig,
    k: &KernelParams,
) -> Result<FlowResult> {
    integrate(sys, carried, forces, cfg, k, None)
}

/// As [`shoot`], additionally recording the per-stage states and kernel
/// evaluations needed by the reverse-mode sweep.
pub(crate) fn shoot_with_tape(
    sys: &ControlSystem,
    carried: &LandmarkSet,
    forces: Option<&ForceField>,
    cfg: &IntegratorConfig,
    k: &KernelParams,
) -> Result<(FlowResult, FlowTape)> {
    let mut tape = FlowTape { steps: Vec::with_capacity(cfg.n_steps) };
    let flow = integrate(sys, carried, forces, cfg, k, Some(&mut tape))?;
    Ok((flow, tape))
}

// ---------------------------------------------------------------------------
// internal state representation

/// Positions and momenta as plain arrays; `x` are the carried landmarks.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct State {
    pub c: Vec<Point3>,
    pub mu: Vec<Vec3>,
    pub x: Vec<Point3>,
}

impl State {
    fn advanced(&self, d: &FlowDelta, a: f64) -> State {
        State {
            c: self.c.iter().zip(&d.c).map(|(p, v)| p + a * v).collect(),
            mu: self.mu.iter().zip(&d.mu).map(|(m, v)| m + a * v).collect(),
            x: self.x.iter().zip(&d.x).map(|(p, v)| p + a * v).collect(),
        }
    }

    fn to_flow_state(&self) -> FlowState {
        FlowState {
            control_points: self.c.clone(),
            momenta: self.mu.clone(),
            landmarks: self.x.clone(),
        }
    }
}

/// Derivative or adjoint of a flow state: one vector per control point
/// position (`c`), per momentum (`mu`) and per carried landmark (`x`).
#[derive(Debug, Clone)]
pub struct FlowDelta {
    pub c: Vec<Vec3>,
    pub mu: Vec<Vec3>,
    pub x: Vec<Vec3>,
}

impl FlowDelta {
    pub fn zeros(n_ctrl: usize, n_landmarks: usize) -> Self {
        FlowDelta {
            c: vec![Vec3::zeros(); n_ctrl],
            mu: vec![Vec3::zeros(); n_ctrl],
            x: vec![Vec3::zeros(); n_landmarks],
        }
    }

    pub fn add_scaled(&mut self, other: &FlowDelta, a: f64) {
        for (s, o) in self.c.iter_mut().zip(&other.c) {
            *s += a * o;
        }
        for (s, o) in self.mu.iter_mut().zip(&other.mu) {
            *s += a * o;
        }
        for (s, o) in self.x.iter_mut().zip(&other.x) {
            *s += a * o;
        }
    }
}

/// Kernel evaluations reused between the derivative and its transpose:
/// `kc[i*nc+j] = K(c_i, c_j)` and `kx[i*nc+j] = K(x_i, c_j)`.
#[derive(Debug, Clone)]
pub(crate) struct Kernels {
    pub kc: Vec<f64>,
    pub kx: Vec<f64>,
}

impl Kernels {
    fn sized(n_ctrl: usize, n_landmarks: usize) -> Self {
        Kernels {
            kc: vec![0.0; n_ctrl * n_ctrl],
            kx: vec![0.0; n_landmarks * n_ctrl],
        }
    }

    fn fill(&mut self, state: &State, k: &KernelParams) {
        let nc = state.c.len();
        let inv = 1.0 / (k.sigma() * k.sigma());
        for i in 0..nc {
            for j in 0..nc {
                let d2 = (state.c[i] - state.c[j]).norm_squared();
                self.kc[i * nc + j] = (-d2 * inv).exp();
            }
        }
        for (i, x) in state.x.iter().enumerate() {
            for j in 0..nc {
                let d2 = (x - state.c[j]).norm_squared();
                self.kx[i * nc + j] = (-d2 * inv).exp();
            }
        }
    }
}

/// One recorded integrator stage: the stage input state plus its kernels.
#[derive(Debug, Clone)]
pub(crate) struct StageRecord {
    pub state: State,
    pub kernels: Kernels,
}

/// Recorded stages for every step, innermost first within a step.
pub(crate) struct FlowTape {
    pub steps: Vec<Vec<StageRecord>>,
}

/// Flow derivative at `state` given precomputed kernels and the force
/// value held on the current step.
#[allow(clippy::needless_range_loop)]
pub(crate) fn rhs(state: &State, kernels: &Kernels, u: &[Vec3], k: &KernelParams, out: &mut FlowDelta) {
    let nc = state.c.len();
    let s = k.two_over_sigma_sq();
    for m in 0..nc {
        let mut dc = Vec3::zeros();
        let mut dmu = Vec3::zeros();
        for j in 0..nc {
            let kv = kernels.kc[m * nc + j];
            dc += kv * state.mu[j];
            let d = state.c[m] - state.c[j];
            dmu += (s * kv * state.mu[m].dot(&state.mu[j])) * d;
        }
        out.c[m] = dc;
        out.mu[m] = dmu + u[m];
    }
    for i in 0..state.x.len() {
        let mut dx = Vec3::zeros();
        for j in 0..nc {
            dx += kernels.kx[i * nc + j] * state.mu[j];
        }
        out.x[i] = dx;
    }
}

/// Transpose of the flow derivative: accumulates into `adj_in` the pullback
/// of `adj_out` through [`rhs`] at the recorded stage. The pullback onto the
/// force value is `adj_out.mu` and is handled by the caller.
pub(crate) fn rhs_vjp(rec: &StageRecord, adj_out: &FlowDelta, k: &KernelParams, adj_in: &mut FlowDelta) {
    let state = &rec.state;
    let nc = state.c.len();
    let s = k.two_over_sigma_sq();
    let (a, b, w) = (&adj_out.c, &adj_out.mu, &adj_out.x);

    for m in 0..nc {
        let mut cbar = Vec3::zeros();
        let mut mubar = Vec3::zeros();
        for j in 0..nc {
            let kv = rec.kernels.kc[m * nc + j];
            let d = state.c[m] - state.c[j];
            // velocity term of the control points
            cbar -= (s * kv * (a[m].dot(&state.mu[j]) + a[j].dot(&state.mu[m]))) * d;
            mubar += kv * a[j];
            // momentum self-interaction term
            let bd = b[m] - b[j];
            let pd = kv * (bd - s * d.dot(&bd) * d);
            cbar += (s * state.mu[m].dot(&state.mu[j])) * pd;
            mubar += (s * kv * d.dot(&bd)) * state.mu[j];
        }
        for (i, x) in state.x.iter().enumerate() {
            let kv = rec.kernels.kx[i * nc + m];
            let e = x - state.c[m];
            // landmark advection term
            cbar += (s * w[i].dot(&state.mu[m]) * kv) * e;
            mubar += kv * w[i];
        }
        adj_in.c[m] += cbar;
        adj_in.mu[m] += mubar;
    }
    for (i, x) in state.x.iter().enumerate() {
        let mut xbar = Vec3::zeros();
        for j in 0..nc {
            let kv = rec.kernels.kx[i * nc + j];
            let e = x - state.c[j];
            xbar -= (s * w[i].dot(&state.mu[j]) * kv) * e;
        }
        adj_in.x[i] += xbar;
    }
}

fn integrate(
    sys: &ControlSystem,
    carried: &LandmarkSet,
    forces: Option<&ForceField>,
    cfg: &IntegratorConfig,
    k: &KernelParams,
    mut tape: Option<&mut FlowTape>,
) -> Result<FlowResult> {
    if cfg.n_steps == 0 {
        return Err(Error::invalid_argument("integrator needs at least one step"));
    }
    let nc = sys.len();
    let nx = carried.len();
    if let Some(f) = forces {
        if f.n_steps != cfg.n_steps || f.n_ctrl != nc {
            return Err(Error::invalid_argument(format!(
                "force field shape ({} steps, {} control points) does not match \
                 integrator ({} steps) and system ({} control points)",
                f.n_steps, f.n_ctrl, cfg.n_steps, nc
            )));
        }
    }
    // A zero field keeps the arithmetic identical whether forces were given
    // or not, so an all-zero force field reproduces the geodesic bitwise.
    let zero_field;
    let field = match forces {
        Some(f) => f,
        None => {
            zero_field = ForceField::zeros(cfg.n_steps, nc);
            &zero_field
        }
    };

    let h = 1.0 / cfg.n_steps as f64;
    let mut state = State {
        c: sys.control_points().to_vec(),
        mu: sys.momenta().to_vec(),
        x: carried.points().to_vec(),
    };
    let mut states = Vec::with_capacity(cfg.n_steps + 1);
    let mut times = Vec::with_capacity(cfg.n_steps + 1);
    states.push(state.to_flow_state());
    times.push(0.0);

    let mut kernels = Kernels::sized(nc, nx);
    let mut k1 = FlowDelta::zeros(nc, nx);
    let mut k2 = FlowDelta::zeros(nc, nx);
    let mut k3 = FlowDelta::zeros(nc, nx);
    let mut k4 = FlowDelta::zeros(nc, nx);

    for step in 0..cfg.n_steps {
        let u = field.at_step(step);
        let mut records = Vec::new();
        let mut stage = |st: &State, out: &mut FlowDelta, recs: &mut Vec<StageRecord>, taping: bool| {
            kernels.fill(st, k);
            rhs(st, &kernels, u, k, out);
            if taping {
                recs.push(StageRecord {
                    state: st.clone(),
                    kernels: kernels.clone(),
                });
            }
        };
        let taping = tape.is_some();
        match cfg.scheme {
            Scheme::Euler => {
                stage(&state, &mut k1, &mut records, taping);
                state = state.advanced(&k1, h);
            }
            Scheme::Rk4 => {
                stage(&state, &mut k1, &mut records, taping);
                let s2 = state.advanced(&k1, 0.5 * h);
                stage(&s2, &mut k2, &mut records, taping);
                let s3 = state.advanced(&k2, 0.5 * h);
                stage(&s3, &mut k3, &mut records, taping);
                let s4 = state.advanced(&k3, h);
                stage(&s4, &mut k4, &mut records, taping);
                let mut incr = FlowDelta::zeros(nc, nx);
                incr.add_scaled(&k1, 1.0);
                incr.add_scaled(&k2, 2.0);
                incr.add_scaled(&k3, 2.0);
                incr.add_scaled(&k4, 1.0);
                state = state.advanced(&incr, h / 6.0);
            }
        }
        if let Some(t) = tape.as_deref_mut() {
            t.steps.push(records);
        }
        states.push(state.to_flow_state());
        times.push((step + 1) as f64 * h);
    }

    Ok(FlowResult { states, times })
}

/// Pull an adjoint back through one recorded step. Accumulates the force
/// gradient for the step into `force_grad` and returns the adjoint at the
/// step's start node.
pub(crate) fn backward_step(
    records: &[StageRecord],
    scheme: Scheme,
    h: f64,
    adj_next: &FlowDelta,
    k: &KernelParams,
    force_grad: &mut [Vec3],
) -> FlowDelta {
    let nc = records[0].state.c.len();
    let nx = records[0].state.x.len();
    match scheme {
        Scheme::Euler => {
            let mut kbar = FlowDelta::zeros(nc, nx);
            kbar.add_scaled(adj_next, h);
            let mut adj = adj_next.clone();
            rhs_vjp(&records[0], &kbar, k, &mut adj);
            for (g, kb) in force_grad.iter_mut().zip(&kbar.mu) {
                *g += kb;
            }
            adj
        }
        Scheme::Rk4 => {
            let mut adj = adj_next.clone();

            let mut k4bar = FlowDelta::zeros(nc, nx);
            k4bar.add_scaled(adj_next, h / 6.0);
            let mut z4bar = FlowDelta::zeros(nc, nx);
            rhs_vjp(&records[3], &k4bar, k, &mut z4bar);

            let mut k3bar = FlowDelta::zeros(nc, nx);
            k3bar.add_scaled(adj_next, h / 3.0);
            k3bar.add_scaled(&z4bar, h);
            let mut z3bar = FlowDelta::zeros(nc, nx);
            rhs_vjp(&records[2], &k3bar, k, &mut z3bar);

            let mut k2bar = FlowDelta::zeros(nc, nx);
            k2bar.add_scaled(adj_next, h / 3.0);
            k2bar.add_scaled(&z3bar, 0.5 * h);
            let mut z2bar = FlowDelta::zeros(nc, nx);
            rhs_vjp(&records[1], &k2bar, k, &mut z2bar);

            let mut k1bar = FlowDelta::zeros(nc, nx);
            k1bar.add_scaled(adj_next, h / 6.0);
            k1bar.add_scaled(&z2bar, 0.5 * h);
            let mut z1bar = FlowDelta::zeros(nc, nx);
            rhs_vjp(&records[0], &k1bar, k, &mut z1bar);

            adj.add_scaled(&z1bar, 1.0);
            adj.add_scaled(&z2bar, 1.0);
            adj.add_scaled(&z3bar, 1.0);
            adj.add_scaled(&z4bar, 1.0);
            for (m, g) in force_grad.iter_mut().enumerate() {
                *g += k1bar.mu[m] + k2bar.mu[m] + k3bar.mu[m] + k4bar.mu[m];
            }
            adj
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn kp(sigma: f64) -> KernelParams {
        KernelParams::new(sigma).unwrap()
    }

    fn single_point_system(mu: Vec3) -> ControlSystem {
        ControlSystem::new(vec![Point3::origin()], vec![mu]).unwrap()
    }

    #[test]
    fn rhs_single_point_moves_with_its_momentum() {
        let sys = single_point_system(Vec3::new(1.0, 0.0, 0.0));
        let (dc, dmu) = hamiltonian_rhs(&sys, None, &kp(2.0)).unwrap();
        assert_eq!(dc[0], Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(dmu[0], Vec3::zeros());
    }

    #[test]
    fn rhs_zero_momenta_is_stationary() {
        let sys = ControlSystem::at_rest(vec![Point3::origin(), Point3::new(1.0, 2.0, 3.0)]).unwrap();
        let (dc, dmu) = hamiltonian_rhs(&sys, None, &kp(1.0)).unwrap();
        assert!(dc.iter().all(|v| *v == Vec3::zeros()));
        assert!(dmu.iter().all(|v| *v == Vec3::zeros()));
    }

    #[test]
    fn rhs_zero_momenta_with_forces_accelerates() {
        let sys = ControlSystem::at_rest(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]).unwrap();
        let u = vec![Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.0, -0.2, 0.0)];
        let (dc, dmu) = hamiltonian_rhs(&sys, Some(&u), &kp(1.0)).unwrap();
        assert!(dc.iter().all(|v| *v == Vec3::zeros()));
        assert_eq!(dmu[0], u[0]);
        assert_eq!(dmu[1], u[1]);
    }

    #[test]
    fn rhs_rejects_force_shape_mismatch() {
        let sys = single_point_system(Vec3::zeros());
        let u = vec![Vec3::zeros(), Vec3::zeros()];
        assert!(hamiltonian_rhs(&sys, Some(&u), &kp(1.0)).is_err());
    }

    #[test]
    fn zero_momenta_flow_is_identity() {
        let cps = vec![Point3::new(0.0, 1.0, 0.0), Point3::new(2.0, 0.0, 1.0)];
        let sys = ControlSystem::at_rest(cps).unwrap();
        let carried = LandmarkSet::new(vec![Point3::new(0.5, 0.5, 0.5)]).unwrap();
        let flow = shoot(&sys, &carried, None, &IntegratorConfig::default(), &kp(1.0)).unwrap();
        for state in &flow.states {
            assert_eq!(state, flow.initial());
        }
    }

    #[test]
    fn single_point_travels_in_a_straight_line() {
        let mu = Vec3::new(1.0, 0.0, 0.0);
        let sys = single_point_system(mu);
        let carried = LandmarkSet::new(vec![Point3::origin()]).unwrap();
        let cfg = IntegratorConfig::new(8, Scheme::Rk4).unwrap();
        let flow = shoot(&sys, &carried, None, &cfg, &kp(2.0)).unwrap();
        for (state, t) in flow.states.iter().zip(&flow.times) {
            assert_relative_eq!(state.control_points[0].x, *t, epsilon = 1e-14);
            assert_relative_eq!(state.momenta[0], mu, epsilon = 1e-14);
            // a landmark coincident with the control point follows the same line
            assert_relative_eq!(state.landmarks[0].x, *t, epsilon = 1e-14);
        }
    }

    #[test]
    fn distant_points_superpose() {
        let sigma = 1.0;
        let gap = 10.0 * sigma;
        let mu = Vec3::new(1.0, 0.0, 0.0);
        let sys = ControlSystem::new(
            vec![Point3::origin(), Point3::new(0.0, gap, 0.0)],
            vec![mu, mu],
        )
        .unwrap();
        let carried = LandmarkSet::new(vec![Point3::origin()]).unwrap();
        let coarse = shoot(&sys, &carried, None, &IntegratorConfig::new(20, Scheme::Rk4).unwrap(), &kp(sigma)).unwrap();
        let fine = shoot(&sys, &carried, None, &IntegratorConfig::new(2000, Scheme::Rk4).unwrap(), &kp(sigma)).unwrap();

        let end_coarse = coarse.final_state();
        let end_fine = fine.final_state();
        for i in 0..2 {
            assert!((end_coarse.control_points[i] - end_fine.control_points[i]).norm() <= 1e-8);
        }
        // at 10 sigma apart the points are effectively independent single-point flows
        assert!((end_coarse.control_points[0] - Point3::new(1.0, 0.0, 0.0)).norm() <= 1e-8);
        assert!((end_coarse.control_points[1] - Point3::new(1.0, gap, 0.0)).norm() <= 1e-8);
    }

    #[test]
    fn energy_is_conserved_along_geodesics() {
        let sigma = 15.0;
        let k = kp(sigma);
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..10 {
            let n = 10;
            let cps: Vec<Point3> = (0..n)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-2.0 * sigma..2.0 * sigma),
                        rng.random_range(-2.0 * sigma..2.0 * sigma),
                        rng.random_range(-2.0 * sigma..2.0 * sigma),
                    )
                })
                .collect();
            let momenta: Vec<Vec3> = (0..n)
                .map(|_| {
                    let v = Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    );
                    sigma * rng.random_range(0.0..1.0) * v / v.norm().max(1e-9)
                })
                .collect();
            let sys = ControlSystem::new(cps, momenta).unwrap();
            let e0 = hamiltonian_energy(&sys, &k);
            let carried = LandmarkSet::new(vec![Point3::origin()]).unwrap();
            let flow = shoot(&sys, &carried, None, &IntegratorConfig::new(20, Scheme::Rk4).unwrap(), &k).unwrap();
            for state in &flow.states {
                let drift = (state.energy(&k) - e0).abs() / e0;
                assert!(drift <= 1e-6, "energy drift {drift} exceeds 1e-6");
            }
        }
    }

    #[test]
    fn zero_force_field_reproduces_geodesic_bitwise() {
        let sys = ControlSystem::new(
            vec![Point3::origin(), Point3::new(1.0, 0.3, -0.2)],
            vec![Vec3::new(0.4, 0.1, 0.0), Vec3::new(-0.3, 0.2, 0.5)],
        )
        .unwrap();
        let carried = LandmarkSet::new(vec![Point3::new(0.5, 0.0, 0.0)]).unwrap();
        let cfg = IntegratorConfig::new(12, Scheme::Rk4).unwrap();
        let k = kp(1.5);
        let plain = shoot(&sys, &carried, None, &cfg, &k).unwrap();
        let zeros = ForceField::zeros(cfg.n_steps, sys.len());
        let forced = shoot(&sys, &carried, Some(&zeros), &cfg, &k).unwrap();
        assert_eq!(plain, forced);
    }

    #[test]
    fn shoot_is_deterministic() {
        let sys = ControlSystem::new(
            vec![Point3::origin(), Point3::new(0.7, 0.7, 0.0)],
            vec![Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 0.0, 0.0)],
        )
        .unwrap();
        let carried = LandmarkSet::new(vec![Point3::new(0.1, 0.2, 0.3)]).unwrap();
        let cfg = IntegratorConfig::default();
        let k = kp(1.0);
        let a = shoot(&sys, &carried, None, &cfg, &k).unwrap();
        let b = shoot(&sys, &carried, None, &cfg, &k).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn convergence_orders() {
        let k = kp(1.0);
        let sys = ControlSystem::new(
            vec![Point3::origin(), Point3::new(1.2, 0.0, 0.0), Point3::new(0.0, 1.1, 0.3)],
            vec![
                Vec3::new(0.8, 0.2, 0.0),
                Vec3::new(-0.5, 0.6, 0.1),
                Vec3::new(0.0, -0.4, 0.5),
            ],
        )
        .unwrap();
        let carried = LandmarkSet::new(vec![Point3::new(0.4, 0.4, 0.0)]).unwrap();
        let reference = shoot(&sys, &carried, None, &IntegratorConfig::new(4096, Scheme::Rk4).unwrap(), &k).unwrap();
        let ref_end = reference.final_state();

        let endpoint_error = |scheme: Scheme, n: usize| -> f64 {
            let flow = shoot(&sys, &carried, None, &IntegratorConfig::new(n, scheme).unwrap(), &k).unwrap();
            let end = flow.final_state();
            let mut err2 = 0.0;
            for (p, q) in end.control_points.iter().zip(&ref_end.control_points) {
                err2 += (p - q).norm_squared();
            }
            for (p, q) in end.landmarks.iter().zip(&ref_end.landmarks) {
                err2 += (p - q).norm_squared();
            }
            err2.sqrt()
        };

        let e1 = endpoint_error(Scheme::Euler, 64);
        let e2 = endpoint_error(Scheme::Euler, 256);
        let euler_order = (e1 / e2).log2() / 2.0;
        assert!(euler_order >= 0.9, "Euler order {euler_order}");

        let r1 = endpoint_error(Scheme::Rk4, 4);
        let r2 = endpoint_error(Scheme::Rk4, 16);
        let rk4_order = (r1 / r2).log2() / 2.0;
        assert!(rk4_order >= 3.5, "RK4 order {rk4_order}");
    }
}
