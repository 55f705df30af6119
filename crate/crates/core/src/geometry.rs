//! Gaussian kernel machinery, velocity fields and kernel-induced norms.
//!
//! A deformation is parameterized by control points `c_k` carrying momentum
//! vectors `mu_k`. The induced velocity field is the kernel convolution
//! `v(x) = sum_k K(x, c_k) mu_k` with the Gaussian kernel
//! `K(x, y) = exp(-|x - y|^2 / sigma^2)`, and its squared norm in the
//! associated reproducing-kernel Hilbert space is
//! `|v|_K^2 = sum_{i,j} K(c_i, c_j) mu_i . mu_j`.
//!
//! All kernel sums are dense double-precision pairwise loops; configurations
//! stay small enough that approximation schemes would only cost determinism.

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;

/// Bandwidth of the Gaussian kernel, in the same units as the shapes (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    sigma: f64,
}

impl KernelParams {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid_argument(format!(
                "kernel bandwidth must be finite and positive, got {sigma}"
            )));
        }
        Ok(KernelParams { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `2 / sigma^2`, the factor appearing in all kernel derivatives.
    pub(crate) fn two_over_sigma_sq(&self) -> f64 {
        2.0 / (self.sigma * self.sigma)
    }
}

/// An ordered 3D point configuration.
///
/// Ordering carries the correspondence: index `i` refers to the same
/// anatomical location in every shape of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point3>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid_argument("landmark set may not be empty"));
        }
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid_argument(format!(
                "landmark {i} has non-finite coordinates"
            )));
        }
        Ok(LandmarkSet { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3> {
        self.points.iter()
    }

    pub fn centroid(&self) -> Point3 {
        let sum = self
            .points
            .iter()
            .fold(Vec3::zeros(), |acc, p| acc + p.coords);
        Point3::from(sum / self.points.len() as f64)
    }

    /// Largest pairwise distance. O(N^2), intended for setup code and tests.
    pub fn diameter(&self) -> f64 {
        let mut max_sq: f64 = 0.0;
        for (i, p) in self.points.iter().enumerate() {
            for q in &self.points[i + 1..] {
                max_sq = max_sq.max((p - q).norm_squared());
            }
        }
        max_sq.sqrt()
    }

    /// Axis-aligned bounding box as (min, max) corners.
    pub fn bounding_box(&self) -> (Point3, Point3) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Sum of squared distances between corresponding points.
    pub fn sq_dist(&self, other: &LandmarkSet) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.points
            .iter()
            .zip(other.points.iter())
            .map(|(p, q)| (p - q).norm_squared())
            .sum()
    }

    /// Translate every point by `t`.
    pub fn translated(&self, t: &Vec3) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|p| p + t).collect(),
        }
    }
}

impl From<LandmarkSet> for Vec<Point3> {
    fn from(set: LandmarkSet) -> Self {
        set.points
    }
}

/// Control points plus their momentum vectors: the compact parameterization
/// of one deformation.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSystem {
    control_points: Vec<Point3>,
    momenta: Vec<Vec3>,
}

impl ControlSystem {
    pub fn new(control_points: Vec<Point3>, momenta: Vec<Vec3>) -> Result<Self> {
        if control_points.is_empty() {
            return Err(Error::invalid_argument("need at least one control point"));
        }
        if control_points.len() != momenta.len() {
            return Err(Error::invalid_argument(format!(
                "momenta count {} does not match control point count {}",
                momenta.len(),
                control_points.len()
            )));
        }
        Ok(ControlSystem {
            control_points,
            momenta,
        })
    }

    /// All momenta zero: the identity deformation.
    pub fn at_rest(control_points: Vec<Point3>) -> Result<Self> {
        let n = control_points.len();
        ControlSystem::new(control_points, vec![Vec3::zeros(); n])
    }

    pub fn len(&self) -> usize {
        self.control_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.control_points.is_empty()
    }

    pub fn control_points(&self) -> &[Point3] {
        &self.control_points
    }

    pub fn momenta(&self) -> &[Vec3] {
        &self.momenta
    }
}

/// Gaussian kernel value `exp(-|x - y|^2 / sigma^2)`, in (0, 1].
pub fn kernel_eval(x: &Point3, y: &Point3, k: &KernelParams) -> f64 {
    let d2 = (x - y).norm_squared();
    (-d2 / (k.sigma * k.sigma)).exp()
}

/// Gradient of [`kernel_eval`] with respect to its first argument:
/// `-2 (x - y) / sigma^2 * K(x, y)`.
pub fn kernel_grad1(x: &Point3, y: &Point3, k: &KernelParams) -> Vec3 {
    let diff = x - y;
    -k.two_over_sigma_sq() * kernel_eval(x, y, k) * diff
}

/// Velocity induced at `x` by a control system: `sum_k K(x, c_k) mu_k`.
pub fn velocity_at(x: &Point3, sys: &ControlSystem, k: &KernelParams) -> Vec3 {
    let mut v = Vec3::zeros();
    for (c, mu) in sys.control_points.iter().zip(sys.momenta.iter()) {
        v += kernel_eval(x, c, k) * mu;
    }
    v
}

/// Squared kernel norm of the induced velocity field:
/// `sum_{i,j} K(c_i, c_j) mu_i . mu_j`.
///
/// Nonnegative by positive-definiteness of the Gaussian kernel; zero iff the
/// field vanishes.
pub fn rkhs_norm_sq(sys: &ControlSystem, k: &KernelParams) -> f64 {
    let mut acc = 0.0;
    for (ci, mi) in sys.control_points.iter().zip(sys.momenta.iter()) {
        for (cj, mj) in sys.control_points.iter().zip(sys.momenta.iter()) {
            acc += kernel_eval(ci, cj, k) * mi.dot(mj);
        }
    }
    acc
}

/// Gradient of [`rkhs_norm_sq`] with respect to the momenta: `2 K mu`
/// (the kernel Gram matrix applied to the momenta).
pub(crate) fn rkhs_grad_momenta(sys: &ControlSystem, k: &KernelParams) -> Vec<Vec3> {
    let n = sys.len();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let mut g = Vec3::zeros();
        for j in 0..n {
            g += kernel_eval(&sys.control_points[i], &sys.control_points[j], k) * sys.momenta[j];
        }
        grad.push(2.0 * g);
    }
    grad
}

/// Gradient of [`rkhs_norm_sq`] with respect to the control point positions.
pub(crate) fn rkhs_grad_points(sys: &ControlSystem, k: &KernelParams) -> Vec<Vec3> {
    let n = sys.len();
    let s = k.two_over_sigma_sq();
    let mut grad = Vec::with_capacity(n);
    for m in 0..n {
        let mut g = Vec3::zeros();
        for j in 0..n {
            let d = sys.control_points[m] - sys.control_points[j];
            let kv = kernel_eval(&sys.control_points[m], &sys.control_points[j], k);
            g += kv * sys.momenta[m].dot(&sys.momenta[j]) * d;
        }
        grad.push(-2.0 * s * g);
    }
    grad
}
