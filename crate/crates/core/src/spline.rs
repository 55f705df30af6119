//! Second-order spline regression of a shape trajectory.
//!
//! A trajectory observed at grid times is represented by the flow of the
//! force-perturbed equations: initial momenta `mu_0` define the underlying
//! geodesic, and discretized external forces `u(t)` bend it through the
//! observations. The fit minimizes
//!
//! ```text
//! C(mu, u) = 1/(alpha^2 d) sum_i |x_obs(t_i) - x(t_i)|^2
//!          + (1/n) sum_t |u(t)|^2  +  |v_0|_K^2
//! ```
//!
//! jointly over `mu_0` and all force values, with the control points fixed
//! and shared across a dataset so that fitted descriptors are directly
//! comparable between subjects.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{
    rkhs_grad_momenta, rkhs_grad_points, rkhs_norm_sq, ControlSystem, KernelParams, LandmarkSet,
    Point3, Vec3,
};
use crate::optim::{
    flat_to_vecs, grad_flow_objective, gradient_descent, vecs_to_flat, FlowInput, FlowObjective,
    GradResult, Objective, OptimConfig, StopReason,
};
use crate::registration::{register, RegistrationProblem};
use crate::shooting::{shoot, FlowDelta, FlowResult, ForceField, IntegratorConfig};

/// Shapes observed at nodes of the shared integration grid. The first
/// observation sits at t = 0 and is the flow's start; the last sits at
/// t = 1.
#[derive(Debug, Clone)]
pub struct ObservationSequence {
    shapes: Vec<LandmarkSet>,
    node_indices: Vec<usize>,
    n_steps: usize,
}

impl ObservationSequence {
    pub fn new(
        shapes: Vec<LandmarkSet>,
        node_indices: Vec<usize>,
        n_steps: usize,
    ) -> Result<Self> {
        if shapes.len() < 2 {
            return Err(Error::invalid_argument(
                "need at least two observations (start and end)",
            ));
        }
        if shapes.len() != node_indices.len() {
            return Err(Error::invalid_argument(
                "one node index per observed shape required",
            ));
        }
        if node_indices[0] != 0 || *node_indices.last().unwrap() != n_steps {
            return Err(Error::invalid_argument(
                "observations must start at node 0 and end at the last node",
            ));
        }
        if node_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid_argument(
                "observation nodes must be strictly increasing",
            ));
        }
        let n_points = shapes[0].len();
        if shapes.iter().any(|s| s.len() != n_points) {
            return Err(Error::invalid_argument(
                "all observed shapes must have the same point count",
            ));
        }
        Ok(ObservationSequence {
            shapes,
            node_indices,
            n_steps,
        })
    }

    /// Map `d` evenly spaced frames onto the grid by normalized frame index
    /// (frame `i` at `t = i/(d-1)`), snapping to the nearest node. Choose
    /// `n_steps` as a multiple of `d - 1` to make the snapping exact; see
    /// [`fitting_steps`].
    pub fn from_frames(shapes: Vec<LandmarkSet>, n_steps: usize) -> Result<Self> {
        let d = shapes.len();
        if d < 2 {
            return Err(Error::invalid_argument(
                "need at least two frames (start and end)",
            ));
        }
        let nodes: Vec<usize> = (0..d)
            .map(|i| {
                let t = i as f64 / (d - 1) as f64;
                (t * n_steps as f64).round() as usize
            })
            .collect();
        ObservationSequence::new(shapes, nodes, n_steps)
    }

    /// Smallest multiple of `d - 1` that is at least `requested`, so that
    /// frame times land exactly on grid nodes.
    pub fn fitting_steps(d: usize, requested: usize) -> usize {
        let seg = (d - 1).max(1);
        seg * requested.div_ceil(seg)
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn shapes(&self) -> &[LandmarkSet] {
        &self.shapes
    }

    pub fn node_indices(&self) -> &[usize] {
        &self.node_indices
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn times(&self) -> Vec<f64> {
        self.node_indices
            .iter()
            .map(|&i| i as f64 / self.n_steps as f64)
            .collect()
    }

    pub fn start(&self) -> &LandmarkSet {
        &self.shapes[0]
    }

    pub fn end(&self) -> &LandmarkSet {
        self.shapes.last().expect("non-empty by construction")
    }
}

/// Fitted trajectory descriptor.
#[derive(Debug, Clone)]
pub struct SplineFit {
    /// Initial momenta of the underlying geodesic.
    pub initial_momenta: Vec<Vec3>,
    /// Discretized external forces (all zero when force fitting is off).
    pub forces: ForceField,
    /// Squared matching residual per observation.
    pub data_residuals: Vec<f64>,
    /// `(1/n) sum |u|^2`.
    pub force_energy: f64,
    /// `|v_0|_K^2`.
    pub reg_energy: f64,
    pub alpha: f64,
    pub total_cost: f64,
    pub converged: bool,
    pub stop: StopReason,
    pub iterations: usize,
}

struct SplineObjective<'a> {
    obs: &'a ObservationSequence,
    alpha: f64,
    kernel: KernelParams,
}

impl SplineObjective<'_> {
    fn data_weight(&self) -> f64 {
        1.0 / (self.alpha * self.alpha * self.obs.len() as f64)
    }
}

impl FlowObjective for SplineObjective<'_> {
    fn cost(&self, flow: &FlowResult, input: &FlowInput) -> f64 {
        let mut data = 0.0;
        for (shape, &node) in self.obs.shapes.iter().zip(&self.obs.node_indices) {
            let state = &flow.states[node];
            data += shape
                .iter()
                .zip(&state.landmarks)
                .map(|(q, p)| (p - q).norm_squared())
                .sum::<f64>();
        }
        let force_energy = input.forces.map_or(0.0, |f| f.energy());
        self.data_weight() * data + force_energy + rkhs_norm_sq(input.system, &self.kernel)
    }

    fn accumulate_state_adjoint(&self, node: usize, flow: &FlowResult, adj: &mut FlowDelta) {
        let w = 2.0 * self.data_weight();
        for (shape, &obs_node) in self.obs.shapes.iter().zip(&self.obs.node_indices) {
            if obs_node == node {
                let state = &flow.states[node];
                for (i, (q, p)) in shape.iter().zip(&state.landmarks).enumerate() {
                    adj.x[i] += w * (p - q);
                }
            }
        }
    }

    fn accumulate_direct(&self, input: &FlowInput, grads: &mut GradResult) {
        for (g, v) in grads
            .grad_momenta
            .iter_mut()
            .zip(rkhs_grad_momenta(input.system, &self.kernel))
        {
            *g += v;
        }
        for (g, v) in grads
            .grad_control_points
            .iter_mut()
            .zip(rkhs_grad_points(input.system, &self.kernel))
        {
            *g += v;
        }
        if let (Some(f), Some(gf)) = (input.forces, grads.grad_forces.as_mut()) {
            let w = 2.0 / f.n_steps() as f64;
            for step in 0..f.n_steps() {
                let src = f.at_step(step);
                let dst = gf.at_step_mut(step);
                for (g, u) in dst.iter_mut().zip(src) {
                    *g += w * u;
                }
            }
        }
    }
}

/// Evaluate the spline cost for given momenta and forces.
pub fn spline_cost(
    obs: &ObservationSequence,
    momenta: &[Vec3],
    forces: &ForceField,
    control_points: &[Point3],
    kernel: &KernelParams,
    alpha: f64,
    integrator: &IntegratorConfig,
) -> Result<f64> {
    if integrator.n_steps != obs.n_steps {
        return Err(Error::invalid_argument(format!(
            "integrator has {} steps but observations live on a {}-step grid",
            integrator.n_steps, obs.n_steps
        )));
    }
    let sys = ControlSystem::new(control_points.to_vec(), momenta.to_vec())?;
    let flow = shoot(&sys, obs.start(), Some(forces), integrator, kernel)?;
    let objective = SplineObjective {
        obs,
        alpha,
        kernel: *kernel,
    };
    let input = FlowInput {
        system: &sys,
        landmarks: obs.start(),
        forces: Some(forces),
    };
    Ok(objective.cost(&flow, &input))
}

/// Spline fitting configuration.
#[derive(Debug, Clone)]
pub struct SplineFitConfig {
    pub optim: OptimConfig,
    /// With forces disabled the fit reduces to geodesic regression (the
    /// infinite-force-penalty limit): only `mu_0` is optimized.
    pub fit_forces: bool,
}

impl Default for SplineFitConfig {
    fn default() -> Self {
        SplineFitConfig {
            optim: OptimConfig {
                max_iters: 500,
                grad_tol: 1e-10,
                cost_rel_tol: 1e-13,
                ..OptimConfig::default()
            },
            fit_forces: true,
        }
    }
}

struct FlatSpline<'a> {
    obs: &'a ObservationSequence,
    control_points: &'a [Point3],
    kernel: KernelParams,
    alpha: f64,
    integrator: IntegratorConfig,
    fit_forces: bool,
}

impl FlatSpline<'_> {
    fn unpack(&self, x: &[f64]) -> (ControlSystem, Option<ForceField>) {
        let nc = self.control_points.len();
        let (mu_flat, u_flat) = x.split_at(3 * nc);
        let sys = ControlSystem::new(self.control_points.to_vec(), flat_to_vecs(mu_flat))
            .expect("layout matches control points");
        let forces = self.fit_forces.then(|| {
            ForceField::from_data(self.integrator.n_steps, nc, flat_to_vecs(u_flat))
                .expect("layout matches grid")
        });
        (sys, forces)
    }

    fn objective(&self) -> SplineObjective<'_> {
        SplineObjective {
            obs: self.obs,
            alpha: self.alpha,
            kernel: self.kernel,
        }
    }
}

impl Objective for FlatSpline<'_> {
    fn cost(&self, x: &[f64]) -> f64 {
        let (sys, forces) = self.unpack(x);
        let flow = match shoot(
            &sys,
            self.obs.start(),
            forces.as_ref(),
            &self.integrator,
            &self.kernel,
        ) {
            Ok(f) => f,
            Err(_) => return f64::INFINITY,
        };
        let input = FlowInput {
            system: &sys,
            landmarks: self.obs.start(),
            forces: forces.as_ref(),
        };
        self.objective().cost(&flow, &input)
    }

    fn cost_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (sys, forces) = self.unpack(x);
        let input = FlowInput {
            system: &sys,
            landmarks: self.obs.start(),
            forces: forces.as_ref(),
        };
        match grad_flow_objective(&input, &self.objective(), &self.integrator, &self.kernel) {
            Ok(g) => {
                let mut grad = vecs_to_flat(&g.grad_momenta);
                if let Some(gf) = &g.grad_forces {
                    grad.extend(vecs_to_flat(gf.data()));
                }
                (g.cost, grad)
            }
            Err(_) => (f64::INFINITY, vec![0.0; x.len()]),
        }
    }
}

/// Fit the spline model to an observed trajectory.
///
/// Momenta are warm-started from a plain registration of the first
/// observation onto the last; forces start at zero.
pub fn fit_spline(
    obs: &ObservationSequence,
    control_points: &[Point3],
    kernel: &KernelParams,
    alpha: f64,
    integrator: &IntegratorConfig,
    cfg: &SplineFitConfig,
) -> Result<SplineFit> {
    if integrator.n_steps != obs.n_steps {
        return Err(Error::invalid_argument(format!(
            "integrator has {} steps but observations live on a {}-step grid",
            integrator.n_steps, obs.n_steps
        )));
    }
    cfg.optim.validate()?;
    let nc = control_points.len();

    let warm_problem = RegistrationProblem::new(
        obs.start().clone(),
        obs.end().clone(),
        *kernel,
        alpha,
        control_points.to_vec(),
        *integrator,
    )?;
    let warm = register(&warm_problem, None, &cfg.optim)?;

    let mut x0 = vecs_to_flat(&warm.momenta);
    if cfg.fit_forces {
        x0.extend(std::iter::repeat_n(0.0, 3 * nc * integrator.n_steps));
    }
    let flat = FlatSpline {
        obs,
        control_points,
        kernel: *kernel,
        alpha,
        integrator: *integrator,
        fit_forces: cfg.fit_forces,
    };
    let res = gradient_descent(&flat, &x0, &cfg.optim);

    let (sys, forces) = flat.unpack(&res.x);
    let forces = forces.unwrap_or_else(|| ForceField::zeros(integrator.n_steps, nc));
    let flow = shoot(&sys, obs.start(), Some(&forces), integrator, kernel)?;
    let data_residuals: Vec<f64> = obs
        .shapes
        .iter()
        .zip(&obs.node_indices)
        .map(|(shape, &node)| {
            shape
                .iter()
                .zip(&flow.states[node].landmarks)
                .map(|(q, p)| (p - q).norm_squared())
                .sum()
        })
        .collect();
    let force_energy = forces.energy();
    let reg_energy = rkhs_norm_sq(&sys, kernel);
    Ok(SplineFit {
        initial_momenta: sys.momenta().to_vec(),
        forces,
        data_residuals,
        force_energy,
        reg_energy,
        alpha,
        total_cost: res.cost,
        converged: res.converged(),
        stop: res.stop,
        iterations: res.iterations,
    })
}

// ---------------------------------------------------------------------------
// serialization

/// Write a force field as CSV rows `step,k,ux,uy,uz`.
pub fn write_forces_csv(path: &Path, forces: &ForceField) -> Result<()> {
    let mut out = String::from("step,k,ux,uy,uz\n");
    for step in 0..forces.n_steps() {
        for (k, u) in forces.at_step(step).iter().enumerate() {
            out.push_str(&format!("{step},{k},{},{},{}\n", u.x, u.y, u.z));
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Read a force field written by [`write_forces_csv`].
pub fn read_forces_csv(path: &Path) -> Result<ForceField> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut rows: Vec<(usize, usize, Vec3)> = Vec::new();
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h.trim() == "step,k,ux,uy,uz" => {}
        Some((_, Ok(h))) => {
            return Err(Error::Parse {
                path: display,
                line: 1,
                msg: format!("expected header step,k,ux,uy,uz, got {h:?}"),
            })
        }
        _ => {
            return Err(Error::Parse {
                path: display,
                line: 1,
                msg: "missing header".into(),
            })
        }
    }
    for (idx, line) in lines {
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                path: display,
                line: idx + 1,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let parse_usize = |s: &str| -> Result<usize> {
            s.trim().parse().map_err(|e| Error::Parse {
                path: display.clone(),
                line: idx + 1,
                msg: format!("bad index {s:?}: {e}"),
            })
        };
        let parse_f64 = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|e| Error::Parse {
                path: display.clone(),
                line: idx + 1,
                msg: format!("bad number {s:?}: {e}"),
            })
        };
        rows.push((
            parse_usize(fields[0])?,
            parse_usize(fields[1])?,
            Vec3::new(parse_f64(fields[2])?, parse_f64(fields[3])?, parse_f64(fields[4])?),
        ));
    }
    let n_steps = rows.iter().map(|r| r.0).max().map_or(0, |m| m + 1);
    let n_ctrl = rows.iter().map(|r| r.1).max().map_or(0, |m| m + 1);
    if rows.len() != n_steps * n_ctrl {
        return Err(Error::Parse {
            path: display,
            line: rows.len() + 1,
            msg: format!(
                "expected {} rows for {} steps x {} control points, got {}",
                n_steps * n_ctrl,
                n_steps,
                n_ctrl,
                rows.len()
            ),
        });
    }
    let mut field = ForceField::zeros(n_steps, n_ctrl);
    for (step, k, u) in rows {
        field.at_step_mut(step)[k] = u;
    }
    Ok(field)
}

/// Metadata pinning the context a spline fit was produced in.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineMeta {
    pub alpha: f64,
    pub n_steps: usize,
    pub sigma: f64,
    /// FNV-1a hash of the shared control-point CSV file.
    pub control_points_hash: u64,
}

/// Write spline metadata as `key = value` lines.
pub fn write_spline_meta(path: &Path, meta: &SplineMeta) -> Result<()> {
    let out = format!(
        "alpha = {}\nn_steps = {}\nsigma = {}\ncontrol_points_hash = {}\n",
        meta.alpha, meta.n_steps, meta.sigma, meta.control_points_hash
    );
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Read metadata written by [`write_spline_meta`].
pub fn read_spline_meta(path: &Path) -> Result<SplineMeta> {
    let display = path.display().to_string();
    let content = std::fs::read_to_string(path)?;
    let mut alpha = None;
    let mut n_steps = None;
    let mut sigma = None;
    let mut hash = None;
    for (idx, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: display.clone(),
            line: idx + 1,
            msg: format!("expected `key = value`, got {line:?}"),
        })?;
        let value = value.trim();
        let bad = |e: String| Error::Parse {
            path: display.clone(),
            line: idx + 1,
            msg: e,
        };
        match key.trim() {
            "alpha" => alpha = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "n_steps" => n_steps = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "sigma" => sigma = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "control_points_hash" => {
                hash = Some(value.parse::<u64>().map_err(|e| bad(e.to_string()))?)
            }
            other => {
                return Err(bad(format!("unknown key {other:?}")));
            }
        }
    }
    match (alpha, n_steps, sigma, hash) {
        (Some(alpha), Some(n_steps), Some(sigma), Some(control_points_hash)) => Ok(SplineMeta {
            alpha,
            n_steps,
            sigma,
            control_points_hash,
        }),
        _ => Err(Error::Parse {
            path: display,
            line: 1,
            msg: "missing one of alpha, n_steps, sigma, control_points_hash".into(),
        }),
    }
}
