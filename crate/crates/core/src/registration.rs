//! Landmark registration by geodesic shooting, atlas estimation, and
//! optimization of a shared control-point grid.
//!
//! Registration minimizes
//!
//! ```text
//! C(mu) = |S - phi_1(T)|^2 + alpha^2 |v_0|_K^2
//! ```
//!
//! over the initial momenta, with the control points held fixed. The square
//! root of the optimal regularity term is the geodesic length between the
//! shapes under the kernel metric.

use rayon::prelude::*;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{
    rkhs_grad_momenta, rkhs_grad_points, rkhs_norm_sq, ControlSystem, KernelParams, LandmarkSet,
    Point3, Vec3,
};
use crate::optim::{
    flat_to_points, flat_to_vecs, grad_flow_objective, gradient_descent, points_to_flat,
    vecs_to_flat, FlowInput, FlowObjective, GradResult, Objective, OptimConfig, StopReason,
};
use crate::shooting::{shoot, FlowDelta, FlowResult, IntegratorConfig};

/// One registration task: deform `template` onto `target`.
#[derive(Debug, Clone)]
pub struct RegistrationProblem {
    pub template: LandmarkSet,
    pub target: LandmarkSet,
    pub kernel: KernelParams,
    /// Regularization weight; the regularity term is multiplied by `alpha^2`.
    pub alpha: f64,
    /// Control points, fixed during momentum optimization.
    pub control_points: Vec<Point3>,
    pub integrator: IntegratorConfig,
}

impl RegistrationProblem {
    pub fn new(
        template: LandmarkSet,
        target: LandmarkSet,
        kernel: KernelParams,
        alpha: f64,
        control_points: Vec<Point3>,
        integrator: IntegratorConfig,
    ) -> Result<Self> {
        if template.len() != target.len() {
            return Err(Error::invalid_argument(format!(
                "template has {} points but target has {}; correspondence requires equal counts",
                template.len(),
                target.len()
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid_argument(format!(
                "regularization alpha must be positive, got {alpha}"
            )));
        }
        if control_points.is_empty() {
            return Err(Error::invalid_argument("need at least one control point"));
        }
        Ok(RegistrationProblem {
            template,
            target,
            kernel,
            alpha,
            control_points,
            integrator,
        })
    }
}

/// Result of a registration solve.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Optimal initial momenta, one per control point.
    pub momenta: Vec<Vec3>,
    /// `|S - phi_1(T)|^2` at the optimum.
    pub data_term: f64,
    /// `|v_0|_K^2` at the optimum.
    pub reg_term: f64,
    /// `data_term + alpha^2 * reg_term`.
    pub total_cost: f64,
    pub converged: bool,
    pub stop: StopReason,
    pub iterations: usize,
}

impl RegistrationResult {
    /// Geodesic length between the registered shapes under the kernel
    /// metric: the square root of the regularity term.
    pub fn geodesic_length(&self) -> f64 {
        self.reg_term.sqrt()
    }
}

/// The registration cost as a flow objective: endpoint matching plus the
/// `alpha^2`-weighted kernel energy of the initial state.
pub struct RegistrationObjective<'a> {
    pub target: &'a LandmarkSet,
    pub alpha: f64,
    pub kernel: KernelParams,
}

impl FlowObjective for RegistrationObjective<'_> {
    fn cost(&self, flow: &FlowResult, input: &FlowInput) -> f64 {
        let end = flow.final_state();
        let data: f64 = end
            .landmarks
            .iter()
            .zip(self.target.iter())
            .map(|(p, q)| (p - q).norm_squared())
            .sum();
        data + self.alpha * self.alpha * rkhs_norm_sq(input.system, &self.kernel)
    }

    fn accumulate_state_adjoint(&self, node: usize, flow: &FlowResult, adj: &mut FlowDelta) {
        if node == flow.n_steps() {
            let end = flow.final_state();
            for (i, (p, q)) in end.landmarks.iter().zip(self.target.iter()).enumerate() {
                adj.x[i] += 2.0 * (p - q);
            }
        }
    }

    fn accumulate_direct(&self, input: &FlowInput, grads: &mut GradResult) {
        let a2 = self.alpha * self.alpha;
        for (g, v) in grads
            .grad_momenta
            .iter_mut()
            .zip(rkhs_grad_momenta(input.system, &self.kernel))
        {
            *g += a2 * v;
        }
        for (g, v) in grads
            .grad_control_points
            .iter_mut()
            .zip(rkhs_grad_points(input.system, &self.kernel))
        {
            *g += a2 * v;
        }
    }
}

/// Evaluate the registration cost for given momenta.
pub fn registration_cost(problem: &RegistrationProblem, momenta: &[Vec3]) -> Result<f64> {
    if momenta.len() != problem.control_points.len() {
        return Err(Error::invalid_argument(format!(
            "momenta count {} does not match control point count {}",
            momenta.len(),
            problem.control_points.len()
        )));
    }
    let sys = ControlSystem::new(problem.control_points.clone(), momenta.to_vec())?;
    let flow = shoot(
        &sys,
        &problem.template,
        None,
        &problem.integrator,
        &problem.kernel,
    )?;
    let obj = RegistrationObjective {
        target: &problem.target,
        alpha: problem.alpha,
        kernel: problem.kernel,
    };
    let input = FlowInput {
        system: &sys,
        landmarks: &problem.template,
        forces: None,
    };
    Ok(obj.cost(&flow, &input))
}

struct MomentaObjective<'a> {
    problem: &'a RegistrationProblem,
}

impl MomentaObjective<'_> {
    fn system(&self, x: &[f64]) -> ControlSystem {
        ControlSystem::new(self.problem.control_points.clone(), flat_to_vecs(x))
            .expect("momenta layout matches control points")
    }

    fn objective(&self) -> RegistrationObjective<'_> {
        RegistrationObjective {
            target: &self.problem.target,
            alpha: self.problem.alpha,
            kernel: self.problem.kernel,
        }
    }
}

impl Objective for MomentaObjective<'_> {
    fn cost(&self, x: &[f64]) -> f64 {
        let sys = self.system(x);
        let flow = match shoot(
            &sys,
            &self.problem.template,
            None,
            &self.problem.integrator,
            &self.problem.kernel,
        ) {
            Ok(f) => f,
            Err(_) => return f64::INFINITY,
        };
        let input = FlowInput {
            system: &sys,
            landmarks: &self.problem.template,
            forces: None,
        };
        self.objective().cost(&flow, &input)
    }

    fn cost_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let sys = self.system(x);
        let input = FlowInput {
            system: &sys,
            landmarks: &self.problem.template,
            forces: None,
        };
        match grad_flow_objective(
            &input,
            &self.objective(),
            &self.problem.integrator,
            &self.problem.kernel,
        ) {
            Ok(g) => (g.cost, vecs_to_flat(&g.grad_momenta)),
            Err(_) => (f64::INFINITY, vec![0.0; x.len()]),
        }
    }
}

/// Solve a registration problem by gradient descent over the momenta.
///
/// `initial_momenta` warm-starts the solve; zeros otherwise. Stagnation of
/// the line search is reported through `converged`/`stop`, not as an error.
pub fn register(
    problem: &RegistrationProblem,
    initial_momenta: Option<&[Vec3]>,
    optim_cfg: &OptimConfig,
) -> Result<RegistrationResult> {
    optim_cfg.validate()?;
    let nc = problem.control_points.len();
    let x0 = match initial_momenta {
        Some(m) => {
            if m.len() != nc {
                return Err(Error::invalid_argument(format!(
                    "initial momenta count {} does not match control point count {nc}",
                    m.len()
                )));
            }
            vecs_to_flat(m)
        }
        None => vec![0.0; 3 * nc],
    };
    let objective = MomentaObjective { problem };
    let res = gradient_descent(&objective, &x0, optim_cfg);

    let momenta = flat_to_vecs(&res.x);
    let sys = ControlSystem::new(problem.control_points.clone(), momenta.clone())?;
    let flow = shoot(
        &sys,
        &problem.template,
        None,
        &problem.integrator,
        &problem.kernel,
    )?;
    let data_term = flow.final_landmarks().sq_dist(&problem.target);
    let reg_term = rkhs_norm_sq(&sys, &problem.kernel);
    Ok(RegistrationResult {
        momenta,
        data_term,
        reg_term,
        total_cost: data_term + problem.alpha * problem.alpha * reg_term,
        converged: res.converged(),
        stop: res.stop,
        iterations: res.iterations,
    })
}

// ---------------------------------------------------------------------------
// atlas estimation

/// Atlas estimate with the final per-shape registrations and the objective
/// value after each outer iteration.
#[derive(Debug, Clone)]
pub struct AtlasResult {
    pub atlas: LandmarkSet,
    pub registrations: Vec<RegistrationResult>,
    pub objective_trace: Vec<f64>,
}

/// Pure endpoint data term, used for the atlas vertex update where the
/// momenta are held fixed.
struct DataOnlyObjective<'a> {
    target: &'a LandmarkSet,
}

impl FlowObjective for DataOnlyObjective<'_> {
    fn cost(&self, flow: &FlowResult, _input: &FlowInput) -> f64 {
        flow.final_landmarks().sq_dist(self.target)
    }

    fn accumulate_state_adjoint(&self, node: usize, flow: &FlowResult, adj: &mut FlowDelta) {
        if node == flow.n_steps() {
            let end = flow.final_state();
            for (i, (p, q)) in end.landmarks.iter().zip(self.target.iter()).enumerate() {
                adj.x[i] += 2.0 * (p - q);
            }
        }
    }
}

struct AtlasUpdateObjective<'a> {
    shapes: &'a [LandmarkSet],
    momenta: &'a [Vec<Vec3>],
    control_points: &'a [Point3],
    kernel: KernelParams,
    integrator: IntegratorConfig,
}

impl AtlasUpdateObjective<'_> {
    fn per_shape(&self, atlas_points: &[f64]) -> Result<Vec<(f64, Vec<Vec3>)>> {
        let atlas = LandmarkSet::new(flat_to_points(atlas_points))?;
        self.shapes
            .par_iter()
            .zip(self.momenta.par_iter())
            .map(|(shape, mu)| {
                let sys = ControlSystem::new(self.control_points.to_vec(), mu.clone())?;
                let obj = DataOnlyObjective { target: shape };
                let input = FlowInput {
                    system: &sys,
                    landmarks: &atlas,
                    forces: None,
                };
                let g = grad_flow_objective(&input, &obj, &self.integrator, &self.kernel)?;
                Ok((g.cost, g.grad_landmarks))
            })
            .collect()
    }
}

impl Objective for AtlasUpdateObjective<'_> {
    fn cost(&self, x: &[f64]) -> f64 {
        match self.per_shape(x) {
            Ok(v) => v.iter().map(|(c, _)| c).sum(),
            Err(_) => f64::INFINITY,
        }
    }

    fn cost_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self.per_shape(x) {
            Ok(v) => {
                let cost = v.iter().map(|(c, _)| c).sum();
                let mut grad = vec![Vec3::zeros(); x.len() / 3];
                for (_, g) in &v {
                    for (acc, gi) in grad.iter_mut().zip(g) {
                        *acc += gi;
                    }
                }
                (cost, vecs_to_flat(&grad))
            }
            Err(_) => (f64::INFINITY, vec![0.0; x.len()]),
        }
    }
}

/// Estimate an atlas from a population of corresponding shapes by
/// alternating minimization.
///
/// The atlas starts as the pointwise Euclidean mean. Each outer iteration
/// first re-registers the atlas to every shape (warm-started from the
/// previous momenta), then applies a few gradient-descent updates to the
/// atlas vertices with the momenta held fixed. Both phases decrease the
/// joint objective, so `objective_trace` is non-increasing.
pub fn estimate_atlas(
    shapes: &[LandmarkSet],
    kernel: KernelParams,
    alpha: f64,
    control_points: &[Point3],
    optim_cfg: &OptimConfig,
    outer_iters: usize,
    integrator: IntegratorConfig,
) -> Result<AtlasResult> {
    if shapes.len() < 2 {
        return Err(Error::invalid_argument(
            "atlas estimation needs at least two shapes",
        ));
    }
    let n = shapes[0].len();
    if shapes.iter().any(|s| s.len() != n) {
        return Err(Error::invalid_argument(
            "all shapes must have identical point counts",
        ));
    }

    // pointwise Euclidean mean
    let mut atlas_points = vec![Point3::origin(); n];
    for shape in shapes {
        for (a, p) in atlas_points.iter_mut().zip(shape.iter()) {
            a.coords += p.coords;
        }
    }
    for a in &mut atlas_points {
        a.coords /= shapes.len() as f64;
    }
    let mut atlas = LandmarkSet::new(atlas_points)?;

    let mut momenta: Vec<Vec<Vec3>> =
        vec![vec![Vec3::zeros(); control_points.len()]; shapes.len()];
    let mut registrations: Vec<RegistrationResult> = Vec::new();
    let mut trace = Vec::with_capacity(outer_iters);

    const ATLAS_UPDATE_ITERS: usize = 5;

    for _outer in 0..outer_iters {
        let results: Vec<RegistrationResult> = shapes
            .par_iter()
            .zip(momenta.par_iter())
            .map(|(shape, warm)| {
                let problem = RegistrationProblem::new(
                    atlas.clone(),
                    shape.clone(),
                    kernel,
                    alpha,
                    control_points.to_vec(),
                    integrator,
                )?;
                register(&problem, Some(warm), optim_cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        momenta = results.iter().map(|r| r.momenta.clone()).collect();
        registrations = results;

        let update = AtlasUpdateObjective {
            shapes,
            momenta: &momenta,
            control_points,
            kernel,
            integrator,
        };
        let update_cfg = OptimConfig {
            max_iters: ATLAS_UPDATE_ITERS,
            ..*optim_cfg
        };
        let res = gradient_descent(&update, &points_to_flat(atlas.points()), &update_cfg);
        atlas = LandmarkSet::new(flat_to_points(&res.x))?;

        let reg_total: f64 = registrations
            .iter()
            .map(|r| alpha * alpha * r.reg_term)
            .sum();
        trace.push(res.cost + reg_total);
    }

    Ok(AtlasResult {
        atlas,
        registrations,
        objective_trace: trace,
    })
}

// ---------------------------------------------------------------------------
// shared control-point optimization

/// Output of [`optimize_control_points`].
#[derive(Debug, Clone)]
pub struct ControlPointOptResult {
    pub control_points: Vec<Point3>,
    /// Per-target momenta at the joint optimum.
    pub momenta: Vec<Vec<Vec3>>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub stop: StopReason,
}

struct JointObjective<'a> {
    atlas: &'a LandmarkSet,
    targets: &'a [LandmarkSet],
    kernel: KernelParams,
    alpha: f64,
    integrator: IntegratorConfig,
    n_ctrl: usize,
}

impl JointObjective<'_> {
    fn split<'x>(&self, x: &'x [f64]) -> (&'x [f64], Vec<&'x [f64]>) {
        let nc3 = 3 * self.n_ctrl;
        let (cps, rest) = x.split_at(nc3);
        (cps, rest.chunks_exact(nc3).collect())
    }

    fn evaluate(&self, x: &[f64], with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let (cps_flat, mus) = self.split(x);
        let cps = flat_to_points(cps_flat);
        let per_target: Vec<(f64, Vec<Vec3>, Vec<Vec3>)> = self
            .targets
            .par_iter()
            .zip(mus.par_iter())
            .map(|(target, mu_flat)| {
                let sys = ControlSystem::new(cps.clone(), flat_to_vecs(mu_flat))?;
                let obj = RegistrationObjective {
                    target,
                    alpha: self.alpha,
                    kernel: self.kernel,
                };
                let input = FlowInput {
                    system: &sys,
                    landmarks: self.atlas,
                    forces: None,
                };
                if with_grad {
                    let g = grad_flow_objective(&input, &obj, &self.integrator, &self.kernel)?;
                    Ok((g.cost, g.grad_control_points, g.grad_momenta))
                } else {
                    let flow = shoot(&sys, self.atlas, None, &self.integrator, &self.kernel)?;
                    Ok((obj.cost(&flow, &input), Vec::new(), Vec::new()))
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let cost = per_target.iter().map(|(c, _, _)| c).sum();
        if !with_grad {
            return Ok((cost, Vec::new()));
        }
        let mut grad = vec![0.0; x.len()];
        let nc3 = 3 * self.n_ctrl;
        for (t, (_, gc, gm)) in per_target.iter().enumerate() {
            let gc_flat = vecs_to_flat(gc);
            for (g, v) in grad[..nc3].iter_mut().zip(&gc_flat) {
                *g += v;
            }
            let gm_flat = vecs_to_flat(gm);
            grad[nc3 * (t + 1)..nc3 * (t + 2)].copy_from_slice(&gm_flat);
        }
        Ok((cost, grad))
    }
}

impl Objective for JointObjective<'_> {
    fn cost(&self, x: &[f64]) -> f64 {
        self.evaluate(x, false)
            .map(|(c, _)| c)
            .unwrap_or(f64::INFINITY)
    }

    fn cost_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self.evaluate(x, true) {
            Ok(r) => r,
            Err(_) => (f64::INFINITY, vec![0.0; x.len()]),
        }
    }
}

/// Optimize shared control-point positions jointly with per-target momenta.
///
/// Control points are initialized on a regular grid over the atlas bounding
/// box inflated by 10% (subsampled to `n_ctrl` by farthest-point selection),
/// momenta by registering the atlas to each target with that grid held
/// fixed. A joint descent then refines both; the summed registration cost
/// never exceeds its value at initialization.
pub fn optimize_control_points(
    atlas: &LandmarkSet,
    targets: &[LandmarkSet],
    n_ctrl: usize,
    kernel: KernelParams,
    alpha: f64,
    optim_cfg: &OptimConfig,
    integrator: IntegratorConfig,
) -> Result<ControlPointOptResult> {
    if targets.is_empty() {
        return Err(Error::invalid_argument(
            "control point optimization needs at least one target",
        ));
    }
    let cps = control_point_grid(atlas, n_ctrl)?;

    let warm: Vec<RegistrationResult> = targets
        .par_iter()
        .map(|target| {
            let problem = RegistrationProblem::new(
                atlas.clone(),
                target.clone(),
                kernel,
                alpha,
                cps.clone(),
                integrator,
            )?;
            register(&problem, None, optim_cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut x0 = points_to_flat(&cps);
    for r in &warm {
        x0.extend(vecs_to_flat(&r.momenta));
    }
    let objective = JointObjective {
        atlas,
        targets,
        kernel,
        alpha,
        integrator,
        n_ctrl,
    };
    let initial_cost = objective.cost(&x0);
    let res = gradient_descent(&objective, &x0, optim_cfg);

    let (cps_flat, mus) = objective.split(&res.x);
    Ok(ControlPointOptResult {
        control_points: flat_to_points(cps_flat),
        momenta: mus.iter().map(|m| flat_to_vecs(m)).collect(),
        initial_cost,
        final_cost: res.cost,
        stop: res.stop,
    })
}

/// Regular axis-aligned grid over the shape's bounding box inflated by 10%,
/// subsampled to `n_ctrl` points by farthest-point selection.
pub fn control_point_grid(shape: &LandmarkSet, n_ctrl: usize) -> Result<Vec<Point3>> {
    if n_ctrl == 0 {
        return Err(Error::invalid_argument("need at least one control point"));
    }
    let (lo, hi) = shape.bounding_box();
    let center = Point3::from((lo.coords + hi.coords) / 2.0);
    let half = (hi - lo) / 2.0 * 1.1;

    let mut g = 1usize;
    while g * g * g < n_ctrl {
        g += 1;
    }
    let mut candidates = Vec::with_capacity(g * g * g);
    for ix in 0..g {
        for iy in 0..g {
            for iz in 0..g {
                let frac = |i: usize| {
                    if g == 1 {
                        0.0
                    } else {
                        2.0 * i as f64 / (g - 1) as f64 - 1.0
                    }
                };
                candidates.push(Point3::new(
                    center.x + frac(ix) * half.x,
                    center.y + frac(iy) * half.y,
                    center.z + frac(iz) * half.z,
                ));
            }
        }
    }
    if candidates.len() == n_ctrl {
        return Ok(candidates);
    }

    // farthest-point subsample, seeded with the candidate nearest the center
    let mut selected = Vec::with_capacity(n_ctrl);
    let first = candidates
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            (*a - center)
                .norm_squared()
                .partial_cmp(&(*b - center).norm_squared())
                .unwrap()
        })
        .map(|(i, _)| i)
        .unwrap();
    let mut chosen = vec![false; candidates.len()];
    chosen[first] = true;
    selected.push(candidates[first]);
    while selected.len() < n_ctrl {
        let mut best = None;
        let mut best_dist = -1.0;
        for (i, p) in candidates.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            let d = selected
                .iter()
                .map(|s| (p - s).norm_squared())
                .fold(f64::INFINITY, f64::min);
            if d > best_dist {
                best_dist = d;
                best = Some(i);
            }
        }
        let i = best.expect("candidates remain");
        chosen[i] = true;
        selected.push(candidates[i]);
    }
    Ok(selected)
}

// ---------------------------------------------------------------------------
// CSV serialization of control points and momenta

/// Write one row per control point: `cx,cy,cz,mx,my,mz`.
pub fn write_control_system_csv(
    path: &Path,
    control_points: &[Point3],
    momenta: &[Vec3],
) -> Result<()> {
    if control_points.len() != momenta.len() {
        return Err(Error::invalid_argument(
            "control point and momenta counts differ",
        ));
    }
    let mut out = String::from("cx,cy,cz,mx,my,mz\n");
    for (c, m) in control_points.iter().zip(momenta) {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.x, c.y, c.z, m.x, m.y, m.z
        ));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Read control points and momenta written by [`write_control_system_csv`].
pub fn read_control_system_csv(path: &Path) -> Result<(Vec<Point3>, Vec<Vec3>)> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        _ => {
            return Err(Error::Parse {
                path: display,
                line: 1,
                msg: "missing header".into(),
            })
        }
    };
    if header.trim() != "cx,cy,cz,mx,my,mz" {
        return Err(Error::Parse {
            path: display,
            line: 1,
            msg: format!("expected header cx,cy,cz,mx,my,mz, got {header:?}"),
        });
    }

    let mut points = Vec::new();
    let mut momenta = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                path: display,
                line: idx + 1,
                msg: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let mut vals = [0.0; 6];
        for (v, f) in vals.iter_mut().zip(&fields) {
            *v = f.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: display.clone(),
                line: idx + 1,
                msg: format!("bad number {f:?}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: display.clone(),
                    line: idx + 1,
                    msg: format!("non-finite value {f:?}"),
                });
            }
        }
        points.push(Point3::new(vals[0], vals[1], vals[2]));
        momenta.push(Vec3::new(vals[3], vals[4], vals[5]));
    }
    Ok((points, momenta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shooting::Scheme;
    use approx::assert_relative_eq;

    fn kp(sigma: f64) -> KernelParams {
        KernelParams::new(sigma).unwrap()
    }

    fn square_shape(offset: Vec3) -> LandmarkSet {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.5, 0.5, 0.7),
        ];
        LandmarkSet::new(pts.into_iter().map(|p| p + offset).collect()).unwrap()
    }

    fn default_problem(
        template: LandmarkSet,
        target: LandmarkSet,
        alpha: f64,
    ) -> RegistrationProblem {
        let cps = control_point_grid(&template, 8).unwrap();
        RegistrationProblem::new(
            template,
            target,
            kp(1.0),
            alpha,
            cps,
            IntegratorConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn cost_zero_for_identical_shapes_at_rest() {
        let t = square_shape(Vec3::zeros());
        let problem = default_problem(t.clone(), t, 0.1);
        let zero = vec![Vec3::zeros(); problem.control_points.len()];
        assert_eq!(registration_cost(&problem, &zero).unwrap(), 0.0);
    }

    #[test]
    fn cost_of_identity_flow_is_translation_energy() {
        let t = square_shape(Vec3::zeros());
        let d = Vec3::new(0.3, -0.2, 0.1);
        let s = t.translated(&d);
        let n = t.len() as f64;
        let problem = default_problem(t, s, 0.1);
        let zero = vec![Vec3::zeros(); problem.control_points.len()];
        assert_relative_eq!(
            registration_cost(&problem, &zero).unwrap(),
            n * d.norm_squared(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn cost_matches_compositional_recomputation() {
        let t = square_shape(Vec3::zeros());
        let s = square_shape(Vec3::new(0.2, 0.1, 0.0));
        let problem = default_problem(t.clone(), s.clone(), 0.3);
        let momenta: Vec<Vec3> = (0..problem.control_points.len())
            .map(|i| Vec3::new(0.05 * i as f64, -0.02 * i as f64, 0.01))
            .collect();
        let cost = registration_cost(&problem, &momenta).unwrap();

        let sys = ControlSystem::new(problem.control_points.clone(), momenta).unwrap();
        let flow = shoot(&sys, &t, None, &problem.integrator, &problem.kernel).unwrap();
        let expected = flow.final_landmarks().sq_dist(&s)
            + problem.alpha * problem.alpha * rkhs_norm_sq(&sys, &problem.kernel);
        assert_relative_eq!(cost, expected, max_relative = 1e-14);
    }

    #[test]
    fn registering_shape_to_itself_is_stationary() {
        let t = square_shape(Vec3::zeros());
        let problem = default_problem(t.clone(), t, 0.1);
        let res = register(&problem, None, &OptimConfig::default()).unwrap();
        assert!(res.total_cost <= 1e-10);
        let max_mu = res
            .momenta
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max_mu <= 1e-6);
        assert_eq!(res.iterations, 0);
    }

    #[test]
    fn translation_target_is_matched() {
        let t = square_shape(Vec3::zeros());
        let d = Vec3::new(0.25, 0.1, -0.05);
        let s = t.translated(&d);
        let diam = t.diameter();
        let problem = default_problem(t, s, 0.05);
        let cfg = OptimConfig {
            max_iters: 200,
            grad_tol: 1e-10,
            cost_rel_tol: 1e-14,
            ..OptimConfig::default()
        };
        let res = register(&problem, None, &cfg).unwrap();
        assert!(
            res.data_term <= 1e-3 * diam * diam,
            "data term {} too large",
            res.data_term
        );
        assert!(res.iterations <= 200);
    }

    #[test]
    fn small_deformations_are_roughly_inverse_consistent() {
        let t = square_shape(Vec3::zeros());
        let d = Vec3::new(0.08, 0.05, 0.0);
        let s = t.translated(&d);
        let cfg = OptimConfig {
            max_iters: 500,
            grad_tol: 1e-12,
            cost_rel_tol: 1e-15,
            ..OptimConfig::default()
        };
        let fwd = register(&default_problem(t.clone(), s.clone(), 0.05), None, &cfg).unwrap();
        let bwd = register(&default_problem(s, t, 0.05), None, &cfg).unwrap();
        let rel = (fwd.reg_term - bwd.reg_term).abs() / fwd.reg_term.max(bwd.reg_term);
        assert!(rel <= 0.05, "regularity terms differ by {rel}");
    }

    #[test]
    fn larger_alpha_never_increases_regularity_term() {
        let t = square_shape(Vec3::zeros());
        let s = t.translated(&Vec3::new(0.3, 0.0, 0.1));
        let cfg = OptimConfig {
            max_iters: 800,
            grad_tol: 1e-12,
            cost_rel_tol: 1e-15,
            ..OptimConfig::default()
        };
        let mut prev: Option<f64> = None;
        for alpha in [0.05, 0.1, 0.2, 0.4] {
            let res = register(&default_problem(t.clone(), s.clone(), alpha), None, &cfg).unwrap();
            if let Some(p) = prev {
                assert!(
                    res.reg_term <= p + 1e-9,
                    "reg term increased from {p} to {} at alpha {alpha}",
                    res.reg_term
                );
            }
            prev = Some(res.reg_term);
        }
    }

    #[test]
    fn distance_positive_between_distinct_shapes() {
        let t = square_shape(Vec3::zeros());
        let s = t.translated(&Vec3::new(0.4, 0.0, 0.0));
        let res = register(&default_problem(t, s, 0.1), None, &OptimConfig::default()).unwrap();
        assert!(res.geodesic_length() > 0.0);
    }

    #[test]
    fn atlas_of_identical_shapes_is_that_shape() {
        let shape = square_shape(Vec3::zeros());
        let shapes = vec![shape.clone(), shape.clone(), shape.clone()];
        let cps = control_point_grid(&shape, 8).unwrap();
        let res = estimate_atlas(
            &shapes,
            kp(1.0),
            0.1,
            &cps,
            &OptimConfig::default(),
            3,
            IntegratorConfig::default(),
        )
        .unwrap();
        assert!(res.atlas.sq_dist(&shape) <= 1e-20);
        for r in &res.registrations {
            let max_mu = r
                .momenta
                .iter()
                .flat_map(|m| m.iter())
                .fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(max_mu <= 1e-6);
        }
    }

    #[test]
    fn atlas_of_two_translates_is_near_the_midpoint() {
        let mid = square_shape(Vec3::zeros());
        let d = Vec3::new(0.1, 0.0, 0.0);
        let a = mid.translated(&(-d));
        let b = mid.translated(&d);
        // bandwidth much larger than the shapes makes the deformation an
        // almost uniform translation
        let sigma = 50.0 * mid.diameter();
        let cps = control_point_grid(&mid, 8).unwrap();
        let cfg = OptimConfig {
            max_iters: 300,
            grad_tol: 1e-12,
            cost_rel_tol: 1e-15,
            ..OptimConfig::default()
        };
        let res = estimate_atlas(
            &[a.clone(), b.clone()],
            kp(sigma),
            0.1,
            &cps,
            &cfg,
            4,
            IntegratorConfig::default(),
        )
        .unwrap();
        let dist = (res.atlas.sq_dist(&mid) / mid.len() as f64).sqrt();
        assert!(
            dist <= 1e-2 * (2.0 * d.norm()),
            "atlas is {dist} away from the midpoint"
        );

        // oracle: exhaustive 1-D search of the joint objective along the
        // translation axis confirms the midpoint is optimal
        let mut best_t = f64::NAN;
        let mut best_cost = f64::INFINITY;
        for i in 0..13 {
            let t = -1.2 + 0.2 * i as f64;
            let candidate = mid.translated(&(t * d));
            let mut cost = 0.0;
            for shape in [&a, &b] {
                let problem = RegistrationProblem::new(
                    candidate.clone(),
                    shape.clone(),
                    kp(sigma),
                    0.1,
                    cps.clone(),
                    IntegratorConfig::default(),
                )
                .unwrap();
                cost += register(&problem, None, &cfg).unwrap().total_cost;
            }
            if cost < best_cost {
                best_cost = cost;
                best_t = t;
            }
        }
        assert!(best_t.abs() <= 0.21, "oracle optimum at t = {best_t}");
    }

    #[test]
    fn atlas_objective_trace_is_non_increasing() {
        let base = square_shape(Vec3::zeros());
        let shapes = vec![
            base.translated(&Vec3::new(0.1, 0.0, 0.0)),
            base.translated(&Vec3::new(-0.05, 0.1, 0.0)),
            base.translated(&Vec3::new(0.0, -0.1, 0.05)),
        ];
        let cps = control_point_grid(&base, 8).unwrap();
        let res = estimate_atlas(
            &shapes,
            kp(2.0),
            0.1,
            &cps,
            &OptimConfig {
                max_iters: 60,
                ..OptimConfig::default()
            },
            4,
            IntegratorConfig::default(),
        )
        .unwrap();
        for w in res.objective_trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12,
                "trace increased: {:?}",
                res.objective_trace
            );
        }
    }

    #[test]
    fn control_points_stay_put_for_identical_target() {
        let atlas = square_shape(Vec3::zeros());
        let res = optimize_control_points(
            &atlas,
            std::slice::from_ref(&atlas),
            8,
            kp(1.0),
            0.1,
            &OptimConfig::default(),
            IntegratorConfig::default(),
        )
        .unwrap();
        let grid = control_point_grid(&atlas, 8).unwrap();
        for (p, q) in res.control_points.iter().zip(&grid) {
            assert_relative_eq!(p, q, epsilon = 1e-12);
        }
    }

    #[test]
    fn control_point_optimization_descends() {
        let atlas = square_shape(Vec3::zeros());
        let targets = vec![
            atlas.translated(&Vec3::new(0.2, 0.0, 0.0)),
            atlas.translated(&Vec3::new(0.0, 0.15, -0.1)),
        ];
        let cfg = OptimConfig {
            max_iters: 40,
            ..OptimConfig::default()
        };
        let res = optimize_control_points(
            &atlas,
            &targets,
            8,
            kp(1.0),
            0.1,
            &cfg,
            IntegratorConfig::new(6, Scheme::Rk4).unwrap(),
        )
        .unwrap();
        assert!(res.final_cost <= res.initial_cost);
    }

    #[test]
    fn control_point_optimization_plateaus() {
        let atlas = square_shape(Vec3::zeros());
        let targets = vec![atlas.translated(&Vec3::new(0.2, 0.1, 0.0))];
        let integrator = IntegratorConfig::new(6, Scheme::Rk4).unwrap();
        let short = OptimConfig {
            max_iters: 150,
            grad_tol: 1e-11,
            cost_rel_tol: 1e-14,
            ..OptimConfig::default()
        };
        let long = OptimConfig {
            max_iters: 600,
            ..short
        };
        let a =
            optimize_control_points(&atlas, &targets, 8, kp(1.0), 0.1, &short, integrator).unwrap();
        let b =
            optimize_control_points(&atlas, &targets, 8, kp(1.0), 0.1, &long, integrator).unwrap();
        let rel = (a.final_cost - b.final_cost).abs() / b.final_cost.abs().max(1e-12);
        assert!(
            rel <= 0.05,
            "short run {} vs long run {}",
            a.final_cost,
            b.final_cost
        );
    }

    #[test]
    fn grid_of_27_is_3x3x3() {
        let shape = square_shape(Vec3::zeros());
        let grid = control_point_grid(&shape, 27).unwrap();
        assert_eq!(grid.len(), 27);
        let (lo, hi) = shape.bounding_box();
        let center = Point3::from((lo.coords + hi.coords) / 2.0);
        for p in &grid {
            for a in 0..3 {
                let half = (hi[a] - lo[a]) / 2.0 * 1.1;
                assert!((p[a] - center[a]).abs() <= half + 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join("cardiotraj_reg_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("momenta.csv");
        let cps = vec![Point3::new(0.1, -0.25, 3.0), Point3::new(1.5, 0.0, -2.25)];
        let mus = vec![Vec3::new(0.001234567891234, 2.0, -3.5), Vec3::zeros()];
        write_control_system_csv(&path, &cps, &mus).unwrap();
        let (rc, rm) = read_control_system_csv(&path).unwrap();
        assert_eq!(rc, cps);
        assert_eq!(rm, mus);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn csv_rejects_bad_header() {
        let dir = std::env::temp_dir().join("cardiotraj_reg_csv_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
        match read_control_system_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::remove_file(&path).unwrap();
    }
}
