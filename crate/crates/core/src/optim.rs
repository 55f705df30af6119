//! Exact gradients of flow-dependent objectives and a gradient-descent
//! driver with backtracking line search.
//!
//! Gradients differentiate the discretized integrator itself (reverse
//! accumulation through every step and stage), so they match central finite
//! differences of the discrete objective up to floating-point noise.

use crate::error::{Error, Result};
use crate::geometry::{ControlSystem, KernelParams, LandmarkSet, Point3, Vec3};
use crate::shooting::{
    backward_step, shoot_with_tape, FlowDelta, FlowResult, ForceField, IntegratorConfig,
};

/// Hyperparameters of the descent driver.
#[derive(Debug, Clone, Copy)]
pub struct OptimConfig {
    pub max_iters: usize,
    /// Step length tried first; adapted across iterations.
    pub initial_step: f64,
    /// Multiplier in (0, 1) applied to the step on each line-search failure.
    pub backtrack: f64,
    /// Stop when the relative cost decrease over one iteration falls below
    /// this value.
    pub cost_rel_tol: f64,
    /// Stop when the Euclidean gradient norm falls below this value.
    pub grad_tol: f64,
    /// Line-search failures tolerated before declaring stagnation.
    pub max_halvings: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            max_iters: 200,
            initial_step: 1.0,
            backtrack: 0.5,
            cost_rel_tol: 1e-10,
            grad_tol: 1e-8,
            max_halvings: 40,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.initial_step > 0.0
            && self.backtrack > 0.0
            && self.backtrack < 1.0
            && self.cost_rel_tol >= 0.0
            && self.grad_tol >= 0.0;
        if !ok {
            return Err(Error::invalid_argument(
                "optimizer config must have positive step, backtrack factor in (0,1) \
                 and nonnegative tolerances",
            ));
        }
        Ok(())
    }
}

/// Why the descent loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Gradient norm below tolerance.
    GradientTolerance,
    /// Relative cost decrease below tolerance.
    CostTolerance,
    /// Iteration budget exhausted.
    MaxIters,
    /// Line search found no usable descent step.
    Stagnation,
}

/// Outcome of a descent run. `trace` holds the cost after every accepted
/// iteration, starting with the initial cost; it is non-increasing.
#[derive(Debug, Clone)]
pub struct DescentResult {
    pub x: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub trace: Vec<f64>,
    pub stop: StopReason,
}

impl DescentResult {
    /// True when a tolerance was met (rather than budget or stagnation).
    pub fn converged(&self) -> bool {
        matches!(
            self.stop,
            StopReason::GradientTolerance | StopReason::CostTolerance
        )
    }
}

/// A smooth objective over a flat parameter vector.
///
/// `cost` may return non-finite values; the optimizer treats such a point as
/// unusable and keeps backtracking.
pub trait Objective {
    fn cost(&self, x: &[f64]) -> f64;
    fn cost_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>);
}

const ARMIJO_C1: f64 = 1e-4;

/// Plain gradient descent with backtracking line search.
///
/// The cost trace is monotone non-increasing. A point whose gradient is
/// non-finite, or a line search that fails `max_halvings` times, ends the
/// run with [`StopReason::Stagnation`] carrying the best point found.
pub fn gradient_descent(objective: &impl Objective, x0: &[f64], cfg: &OptimConfig) -> DescentResult {
    let mut x = x0.to_vec();
    let (mut cost, mut grad) = objective.cost_and_grad(&x);
    let mut trace = vec![cost];
    if !cost.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return DescentResult {
            x,
            cost,
            iterations: 0,
            trace,
            stop: StopReason::Stagnation,
        };
    }

    let mut step = cfg.initial_step;
    for iter in 0..cfg.max_iters {
        let grad_norm_sq: f64 = grad.iter().map(|g| g * g).sum();
        if grad_norm_sq.sqrt() <= cfg.grad_tol {
            return DescentResult {
                x,
                cost,
                iterations: iter,
                trace,
                stop: StopReason::GradientTolerance,
            };
        }

        let mut accepted = false;
        let mut new_cost = cost;
        for halving in 0..=cfg.max_halvings {
            let candidate: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi - step * gi).collect();
            let c = objective.cost(&candidate);
            if c.is_finite() && c <= cost - ARMIJO_C1 * step * grad_norm_sq {
                x = candidate;
                new_cost = c;
                accepted = true;
                if halving == 0 {
                    // first try succeeded: allow the step to grow again
                    step /= cfg.backtrack;
                }
                break;
            }
            step *= cfg.backtrack;
        }
        if !accepted {
            return DescentResult {
                x,
                cost,
                iterations: iter,
                trace,
                stop: StopReason::Stagnation,
            };
        }

        let decrease = cost - new_cost;
        let rel = decrease / cost.abs().max(f64::MIN_POSITIVE);
        cost = new_cost;
        trace.push(cost);

        if rel <= cfg.cost_rel_tol {
            return DescentResult {
                x,
                cost,
                iterations: iter + 1,
                trace,
                stop: StopReason::CostTolerance,
            };
        }

        let (c2, g2) = objective.cost_and_grad(&x);
        if !c2.is_finite() || g2.iter().any(|g| !g.is_finite()) {
            return DescentResult {
                x,
                cost,
                iterations: iter + 1,
                trace,
                stop: StopReason::Stagnation,
            };
        }
        grad = g2;
    }

    DescentResult {
        x,
        cost,
        iterations: cfg.max_iters,
        trace,
        stop: StopReason::MaxIters,
    }
}

// ---------------------------------------------------------------------------
// flow-composed objectives

/// Parameters of one flow evaluation.
#[derive(Debug, Clone, Copy)]
pub struct FlowInput<'a> {
    pub system: &'a ControlSystem,
    pub landmarks: &'a LandmarkSet,
    pub forces: Option<&'a ForceField>,
}

/// Value and exact gradients of a flow-composed objective.
///
/// `grad_forces` is present exactly when the input carried a force field.
#[derive(Debug, Clone)]
pub struct GradResult {
    pub cost: f64,
    pub grad_momenta: Vec<Vec3>,
    pub grad_control_points: Vec<Vec3>,
    pub grad_landmarks: Vec<Vec3>,
    pub grad_forces: Option<ForceField>,
}

/// An objective reading a discretized flow.
///
/// Implementations provide the cost, the adjoint of the cost with respect to
/// the flow state at each node they read, and any direct (non-flow-mediated)
/// parameter terms such as regularizers.
pub trait FlowObjective {
    fn cost(&self, flow: &FlowResult, input: &FlowInput) -> f64;

    /// Accumulate `d cost / d state(node)` into `adj`.
    fn accumulate_state_adjoint(&self, node: usize, flow: &FlowResult, adj: &mut FlowDelta);

    /// Accumulate gradients of terms that depend on the parameters directly.
    fn accumulate_direct(&self, input: &FlowInput, grads: &mut GradResult) {
        let _ = (input, grads);
    }
}

/// Differentiate `objective ∘ flow` exactly, by reverse accumulation through
/// the discretized integrator.
pub fn grad_flow_objective(
    input: &FlowInput,
    objective: &impl FlowObjective,
    cfg: &IntegratorConfig,
    k: &KernelParams,
) -> Result<GradResult> {
    let (flow, tape) = shoot_with_tape(input.system, input.landmarks, input.forces, cfg, k)?;
    let cost = objective.cost(&flow, input);
    if !cost.is_finite() {
        return Err(Error::numerical(
            "flow objective",
            format!("non-finite cost {cost}"),
        ));
    }

    let nc = input.system.len();
    let nx = input.landmarks.len();
    let h = 1.0 / cfg.n_steps as f64;

    let mut adj = FlowDelta::zeros(nc, nx);
    objective.accumulate_state_adjoint(cfg.n_steps, &flow, &mut adj);

    let mut grad_forces = input
        .forces
        .map(|f| ForceField::zeros(f.n_steps(), f.n_ctrl()));
    let mut scratch = vec![Vec3::zeros(); nc];
    for step in (0..cfg.n_steps).rev() {
        let fg: &mut [Vec3] = match grad_forces.as_mut() {
            Some(g) => g.at_step_mut(step),
            None => &mut scratch,
        };
        adj = backward_step(&tape.steps[step], cfg.scheme, h, &adj, k, fg);
        objective.accumulate_state_adjoint(step, &flow, &mut adj);
    }

    let mut grads = GradResult {
        cost,
        grad_momenta: adj.mu,
        grad_control_points: adj.c,
        grad_landmarks: adj.x,
        grad_forces,
    };
    objective.accumulate_direct(input, &mut grads);

    let finite = grads
        .grad_momenta
        .iter()
        .chain(&grads.grad_control_points)
        .chain(&grads.grad_landmarks)
        .all(|g| g.iter().all(|v| v.is_finite()))
        && grads
            .grad_forces
            .as_ref()
            .is_none_or(|f| f.data().iter().all(|g| g.iter().all(|v| v.is_finite())));
    if !finite {
        return Err(Error::numerical("flow objective", "non-finite gradient"));
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// flat parameter packing

pub fn vecs_to_flat(vs: &[Vec3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * vs.len());
    for v in vs {
        out.extend_from_slice(&[v.x, v.y, v.z]);
    }
    out
}

pub fn flat_to_vecs(x: &[f64]) -> Vec<Vec3> {
    debug_assert_eq!(x.len() % 3, 0);
    x.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

pub fn points_to_flat(ps: &[Point3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * ps.len());
    for p in ps {
        out.extend_from_slice(&[p.x, p.y, p.z]);
    }
    out
}

pub fn flat_to_points(x: &[f64]) -> Vec<Point3> {
    debug_assert_eq!(x.len() % 3, 0);
    x.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{kernel_eval, rkhs_norm_sq};
    use crate::shooting::shoot;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    struct Quadratic;

    impl Objective for Quadratic {
        fn cost(&self, x: &[f64]) -> f64 {
            (x[0] - 3.0) * (x[0] - 3.0)
        }
        fn cost_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
            (self.cost(x), vec![2.0 * (x[0] - 3.0)])
        }
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        let cfg = OptimConfig {
            max_iters: 100,
            grad_tol: 1e-9,
            cost_rel_tol: 0.0,
            ..OptimConfig::default()
        };
        let res = gradient_descent(&Quadratic, &[0.0], &cfg);
        assert!((res.x[0] - 3.0).abs() <= 1e-6, "x = {}", res.x[0]);
        assert!(res.iterations <= 100);
        for w in res.trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn stationary_point_returns_immediately() {
        let cfg = OptimConfig::default();
        let res = gradient_descent(&Quadratic, &[3.0], &cfg);
        assert_eq!(res.iterations, 0);
        assert_eq!(res.stop, StopReason::GradientTolerance);
        assert_eq!(res.x, vec![3.0]);
    }

    struct NonFinite;

    impl Objective for NonFinite {
        fn cost(&self, _x: &[f64]) -> f64 {
            f64::NAN
        }
        fn cost_and_grad(&self, _x: &[f64]) -> (f64, Vec<f64>) {
            (f64::NAN, vec![f64::NAN])
        }
    }

    #[test]
    fn non_finite_initial_cost_stagnates() {
        let res = gradient_descent(&NonFinite, &[1.0], &OptimConfig::default());
        assert_eq!(res.stop, StopReason::Stagnation);
    }

    const SIGMA: f64 = 1.4;

    // Endpoint-matching objective used by the finite-difference checks:
    // |x_final - target|^2 plus a weighted kernel energy of the initial state.
    struct EndpointObjective {
        target: Vec<Point3>,
        energy_weight: f64,
    }

    impl FlowObjective for EndpointObjective {
        fn cost(&self, flow: &FlowResult, input: &FlowInput) -> f64 {
            let end = flow.final_state();
            let data: f64 = end
                .landmarks
                .iter()
                .zip(&self.target)
                .map(|(p, q)| (p - q).norm_squared())
                .sum();
            data + self.energy_weight
                * rkhs_norm_sq(input.system, &KernelParams::new(SIGMA).unwrap())
        }

        fn accumulate_state_adjoint(&self, node: usize, flow: &FlowResult, adj: &mut FlowDelta) {
            if node == flow.n_steps() {
                let end = flow.final_state();
                for (i, (p, q)) in end.landmarks.iter().zip(&self.target).enumerate() {
                    adj.x[i] += 2.0 * (p - q);
                }
            }
        }

        fn accumulate_direct(&self, input: &FlowInput, grads: &mut GradResult) {
            let k = KernelParams::new(SIGMA).unwrap();
            let gm = crate::geometry::rkhs_grad_momenta(input.system, &k);
            let gc = crate::geometry::rkhs_grad_points(input.system, &k);
            for (g, v) in grads.grad_momenta.iter_mut().zip(gm) {
                *g += self.energy_weight * v;
            }
            for (g, v) in grads.grad_control_points.iter_mut().zip(gc) {
                *g += self.energy_weight * v;
            }
        }
    }

    fn random_setup(
        rng: &mut StdRng,
        n_ctrl: usize,
        n_land: usize,
        with_forces: bool,
        n_steps: usize,
    ) -> (ControlSystem, LandmarkSet, Option<ForceField>, Vec<Point3>) {
        let cps: Vec<Point3> = (0..n_ctrl)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                )
            })
            .collect();
        let momenta: Vec<Vec3> = (0..n_ctrl)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                )
            })
            .collect();
        let landmarks: Vec<Point3> = (0..n_land)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                )
            })
            .collect();
        let target: Vec<Point3> = landmarks
            .iter()
            .map(|p| p + Vec3::new(rng.random_range(-0.4..0.4), 0.1, -0.05))
            .collect();
        let forces = with_forces.then(|| {
            let data: Vec<Vec3> = (0..n_steps * n_ctrl)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                    )
                })
                .collect();
            ForceField::from_data(n_steps, n_ctrl, data).unwrap()
        });
        (
            ControlSystem::new(cps, momenta).unwrap(),
            LandmarkSet::new(landmarks).unwrap(),
            forces,
            target,
        )
    }

    fn fd_cost(
        obj: &EndpointObjective,
        cps: &[Point3],
        momenta: &[Vec3],
        landmarks: &[Point3],
        forces: Option<&ForceField>,
        cfg: &IntegratorConfig,
        k: &KernelParams,
    ) -> f64 {
        let sys = ControlSystem::new(cps.to_vec(), momenta.to_vec()).unwrap();
        let lm = LandmarkSet::new(landmarks.to_vec()).unwrap();
        let flow = shoot(&sys, &lm, forces, cfg, k).unwrap();
        let input = FlowInput {
            system: &sys,
            landmarks: &lm,
            forces,
        };
        obj.cost(&flow, &input)
    }

    fn check_close(analytic: f64, fd: f64, scale: f64) {
        let denom = fd.abs().max(analytic.abs()).max(1e-6 * scale.max(1.0));
        assert!(
            (analytic - fd).abs() / denom <= 1e-4,
            "analytic {analytic} vs fd {fd}"
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let k = KernelParams::new(SIGMA).unwrap();
        let cfg = IntegratorConfig::default();
        let mut rng = StdRng::seed_from_u64(2024);
        for trial in 0..10 {
            let with_forces = trial % 2 == 1;
            let (sys, lm, forces, target) = random_setup(&mut rng, 4, 5, with_forces, cfg.n_steps);
            let obj = EndpointObjective {
                target,
                energy_weight: 0.25,
            };
            let input = FlowInput {
                system: &sys,
                landmarks: &lm,
                forces: forces.as_ref(),
            };
            let grads = grad_flow_objective(&input, &obj, &cfg, &k).unwrap();
            let scale = grads
                .grad_momenta
                .iter()
                .chain(&grads.grad_control_points)
                .flat_map(|g| g.iter())
                .fold(0.0f64, |m, v| m.max(v.abs()));

            let h = 1e-5;
            for i in 0..sys.len() {
                for a in 0..3 {
                    let mut mp = sys.momenta().to_vec();
                    let mut mm = sys.momenta().to_vec();
                    mp[i][a] += h;
                    mm[i][a] -= h;
                    let fp = fd_cost(&obj, sys.control_points(), &mp, lm.points(), forces.as_ref(), &cfg, &k);
                    let fm = fd_cost(&obj, sys.control_points(), &mm, lm.points(), forces.as_ref(), &cfg, &k);
                    check_close(grads.grad_momenta[i][a], (fp - fm) / (2.0 * h), scale);
                }
            }
            for i in 0..sys.len() {
                for a in 0..3 {
                    let mut cp = sys.control_points().to_vec();
                    let mut cm = sys.control_points().to_vec();
                    cp[i][a] += h;
                    cm[i][a] -= h;
                    let fp = fd_cost(&obj, &cp, sys.momenta(), lm.points(), forces.as_ref(), &cfg, &k);
                    let fm = fd_cost(&obj, &cm, sys.momenta(), lm.points(), forces.as_ref(), &cfg, &k);
                    check_close(grads.grad_control_points[i][a], (fp - fm) / (2.0 * h), scale);
                }
            }
            for i in 0..lm.len() {
                for a in 0..3 {
                    let mut xp = lm.points().to_vec();
                    let mut xm = lm.points().to_vec();
                    xp[i][a] += h;
                    xm[i][a] -= h;
                    let fp = fd_cost(&obj, sys.control_points(), sys.momenta(), &xp, forces.as_ref(), &cfg, &k);
                    let fm = fd_cost(&obj, sys.control_points(), sys.momenta(), &xm, forces.as_ref(), &cfg, &k);
                    check_close(grads.grad_landmarks[i][a], (fp - fm) / (2.0 * h), scale);
                }
            }
            if let Some(f) = forces.as_ref() {
                let gf = grads.grad_forces.as_ref().unwrap();
                for step in 0..f.n_steps() {
                    for i in 0..sys.len() {
                        for a in 0..3 {
                            let mut fp = f.clone();
                            let mut fm = f.clone();
                            fp.at_step_mut(step)[i][a] += h;
                            fm.at_step_mut(step)[i][a] -= h;
                            let cp = fd_cost(&obj, sys.control_points(), sys.momenta(), lm.points(), Some(&fp), &cfg, &k);
                            let cm = fd_cost(&obj, sys.control_points(), sys.momenta(), lm.points(), Some(&fm), &cfg, &k);
                            check_close(gf.at_step(step)[i][a], (cp - cm) / (2.0 * h), scale);
                        }
                    }
                }
            }
        }
    }

    // Pure initial-energy objective: its momentum gradient is the Gram
    // matrix applied to the momenta, doubled.
    struct InitialEnergy {
        k: KernelParams,
    }

    impl FlowObjective for InitialEnergy {
        fn cost(&self, _flow: &FlowResult, input: &FlowInput) -> f64 {
            rkhs_norm_sq(input.system, &self.k)
        }
        fn accumulate_state_adjoint(&self, _node: usize, _flow: &FlowResult, _adj: &mut FlowDelta) {}
        fn accumulate_direct(&self, input: &FlowInput, grads: &mut GradResult) {
            let gm = crate::geometry::rkhs_grad_momenta(input.system, &self.k);
            for (g, v) in grads.grad_momenta.iter_mut().zip(gm) {
                *g += v;
            }
            let gc = crate::geometry::rkhs_grad_points(input.system, &self.k);
            for (g, v) in grads.grad_control_points.iter_mut().zip(gc) {
                *g += v;
            }
        }
    }

    #[test]
    fn initial_energy_gradient_is_gram_product() {
        let k = KernelParams::new(2.0).unwrap();
        let sys = ControlSystem::new(
            vec![Point3::origin(), Point3::new(1.0, 0.0, 0.5), Point3::new(-0.5, 1.0, 0.0)],
            vec![
                Vec3::new(0.2, -0.1, 0.4),
                Vec3::new(-0.3, 0.5, 0.0),
                Vec3::new(0.1, 0.1, -0.2),
            ],
        )
        .unwrap();
        let lm = LandmarkSet::new(vec![Point3::origin()]).unwrap();
        let input = FlowInput {
            system: &sys,
            landmarks: &lm,
            forces: None,
        };
        let grads =
            grad_flow_objective(&input, &InitialEnergy { k }, &IntegratorConfig::default(), &k)
                .unwrap();
        for i in 0..sys.len() {
            let mut expected = Vec3::zeros();
            for j in 0..sys.len() {
                expected += 2.0
                    * kernel_eval(&sys.control_points()[i], &sys.control_points()[j], &k)
                    * sys.momenta()[j];
            }
            assert_relative_eq!(grads.grad_momenta[i], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn descent_is_deterministic() {
        let k = KernelParams::new(SIGMA).unwrap();
        let cfg = IntegratorConfig::default();
        let mut rng = StdRng::seed_from_u64(5);
        let (sys, lm, _, target) = random_setup(&mut rng, 3, 4, false, cfg.n_steps);
        let obj = EndpointObjective {
            target,
            energy_weight: 0.1,
        };

        struct FlatObjective<'a> {
            obj: &'a EndpointObjective,
            cps: Vec<Point3>,
            lm: LandmarkSet,
            cfg: IntegratorConfig,
            k: KernelParams,
        }
        impl Objective for FlatObjective<'_> {
            fn cost(&self, x: &[f64]) -> f64 {
                let sys = ControlSystem::new(self.cps.clone(), flat_to_vecs(x)).unwrap();
                let flow = shoot(&sys, &self.lm, None, &self.cfg, &self.k).unwrap();
                self.obj.cost(
                    &flow,
                    &FlowInput {
                        system: &sys,
                        landmarks: &self.lm,
                        forces: None,
                    },
                )
            }
            fn cost_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
                let sys = ControlSystem::new(self.cps.clone(), flat_to_vecs(x)).unwrap();
                let input = FlowInput {
                    system: &sys,
                    landmarks: &self.lm,
                    forces: None,
                };
                match grad_flow_objective(&input, self.obj, &self.cfg, &self.k) {
                    Ok(g) => (g.cost, vecs_to_flat(&g.grad_momenta)),
                    Err(_) => (f64::INFINITY, vec![0.0; x.len()]),
                }
            }
        }

        let flat = FlatObjective {
            obj: &obj,
            cps: sys.control_points().to_vec(),
            lm: lm.clone(),
            cfg,
            k,
        };
        let x0 = vec![0.0; 3 * sys.len()];
        let ocfg = OptimConfig {
            max_iters: 30,
            ..OptimConfig::default()
        };
        let a = gradient_descent(&flat, &x0, &ocfg);
        let b = gradient_descent(&flat, &x0, &ocfg);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.x, b.x);
    }
}
