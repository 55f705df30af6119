//! Group-wise inference on fitted deformation descriptors.
//!
//! Each disease group is compared against the control group with two-sample
//! Hotelling T² tests, one per 3-dimensional descriptor block (a control
//! point's initial momentum, or its force vector at one time step), with
//! Bonferroni correction over all blocks of one comparison. A per-subject
//! scaling law between `log(lambda)` and `log(V_ref / V_ED)` is fitted by
//! ordinary least squares.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point3, Vec3};
use crate::shooting::ForceField;

/// Outcome of one two-sample Hotelling T² test.
#[derive(Debug, Clone)]
pub struct HotellingResult {
    pub t2: f64,
    pub f_stat: f64,
    pub p_value: f64,
    pub dim: usize,
    /// True when the pooled covariance needed a ridge to become invertible.
    pub regularized: bool,
}

const COVARIANCE_MAX_CONDITION: f64 = 1e12;
const COVARIANCE_RIDGE: f64 = 1e-8;

/// Classical two-sample Hotelling T² with pooled covariance.
///
/// Rows are samples. The statistic is
/// `T² = (n_A n_B / (n_A + n_B)) d' S⁻¹ d` with `d` the mean difference and
/// `S` the pooled covariance;
/// `F = T² (n_A + n_B − p − 1) / (p (n_A + n_B − 2))` follows an
/// `F(p, n_A + n_B − p − 1)` distribution under the null.
///
/// A near-singular pooled covariance receives a ridge of
/// `1e-8 · trace/p`; if it stays singular the test is undefined and an
/// error is returned rather than a fabricated p-value.
pub fn hotelling_two_sample(group_a: &DMatrix<f64>, group_b: &DMatrix<f64>) -> Result<HotellingResult> {
    let p = group_a.ncols();
    if p == 0 || group_b.ncols() != p {
        return Err(Error::invalid_argument(
            "groups must share a nonzero number of variables",
        ));
    }
    let (na, nb) = (group_a.nrows(), group_b.nrows());
    if na < 2 || nb < 2 {
        return Err(Error::InsufficientData(
            "each group needs at least two samples".into(),
        ));
    }
    let df = na + nb - 2;
    if df <= p {
        return Err(Error::InsufficientData(format!(
            "need n_A + n_B - 2 > dim, got {df} <= {p}"
        )));
    }

    let mean = |m: &DMatrix<f64>| -> DVector<f64> {
        DVector::from_fn(p, |j, _| m.column(j).sum() / m.nrows() as f64)
    };
    let mean_a = mean(group_a);
    let mean_b = mean(group_b);

    let scatter = |m: &DMatrix<f64>, mu: &DVector<f64>| -> DMatrix<f64> {
        let mut s = DMatrix::zeros(p, p);
        for r in 0..m.nrows() {
            let d = m.row(r).transpose() - mu;
            s += &d * d.transpose();
        }
        s
    };
    let mut pooled = (scatter(group_a, &mean_a) + scatter(group_b, &mean_b)) / df as f64;

    let condition = |s: &DMatrix<f64>| -> (f64, f64) {
        let eig = s.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        (min, max)
    };
    let (mut min_ev, max_ev) = condition(&pooled);
    let mut regularized = false;
    if min_ev <= 0.0 || max_ev / min_ev > COVARIANCE_MAX_CONDITION {
        let ridge = COVARIANCE_RIDGE * pooled.trace() / p as f64;
        for i in 0..p {
            pooled[(i, i)] += ridge;
        }
        regularized = true;
        let (min2, max2) = condition(&pooled);
        min_ev = min2;
        if min_ev <= 0.0 || max2 / min_ev > COVARIANCE_MAX_CONDITION {
            return Err(Error::numerical(
                "hotelling",
                "pooled covariance is singular even after regularization",
            ));
        }
    }

    let diff = &mean_a - &mean_b;
    let chol = pooled
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("hotelling", "pooled covariance not positive definite"))?;
    let solved = chol.solve(&diff);
    let t2 = ((na * nb) as f64 / (na + nb) as f64) * diff.dot(&solved);
    let t2 = t2.max(0.0);

    let df2 = (na + nb - p - 1) as f64;
    let f_stat = t2 * df2 / (p as f64 * df as f64);
    let dist = FisherSnedecor::new(p as f64, df2)
        .map_err(|e| Error::numerical("hotelling", e.to_string()))?;
    let p_value = 1.0 - dist.cdf(f_stat);

    Ok(HotellingResult {
        t2,
        f_stat,
        p_value,
        dim: p,
        regularized,
    })
}

// ---------------------------------------------------------------------------
// group-wise tests over descriptor blocks

/// One subject's fitted deformation descriptor.
#[derive(Debug, Clone)]
pub struct SubjectDescriptor {
    pub subject_id: String,
    pub group: String,
    pub momenta: Vec<Vec3>,
    pub forces: ForceField,
}

/// Which 3-dimensional slice of the descriptor a test addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Momentum,
    Force,
}

impl BlockKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockKind::Momentum => "momentum",
            BlockKind::Force => "force",
        }
    }
}

/// Identifier of one descriptor block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockId {
    pub kind: BlockKind,
    pub control_point: usize,
    /// Present for force blocks.
    pub time_step: Option<usize>,
}

/// One tested block within a comparison.
#[derive(Debug, Clone)]
pub struct TestReport {
    pub block: BlockId,
    pub t2: f64,
    pub f_stat: f64,
    pub p_raw: f64,
    /// `min(1, p_raw * number of blocks)`.
    pub p_adj: f64,
    pub significant: bool,
    pub regularized: bool,
    /// Mean descriptor of the disease group for this block.
    pub disease_mean: Vec3,
    /// Disease-group mean minus control-group mean.
    pub mean_diff: Vec3,
}

/// All block tests of one disease-vs-control comparison.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    /// E.g. `"ToF_vs_Control"`.
    pub comparison: String,
    pub disease_group: String,
    pub reports: Vec<TestReport>,
    /// Blocks whose test was undefined (singular covariance).
    pub untestable: Vec<BlockId>,
    /// Bonferroni family size (total blocks per comparison).
    pub n_blocks: usize,
}

impl ComparisonReport {
    pub fn significant_blocks(&self) -> impl Iterator<Item = &TestReport> {
        self.reports.iter().filter(|r| r.significant)
    }
}

fn block_values(descriptor: &SubjectDescriptor, block: &BlockId) -> Vec3 {
    match block.kind {
        BlockKind::Momentum => descriptor.momenta[block.control_point],
        BlockKind::Force => {
            descriptor.forces.at_step(block.time_step.expect("force blocks carry a step"))
                [block.control_point]
        }
    }
}

/// Compare every non-control group against the control group, one Hotelling
/// test per descriptor block, Bonferroni-corrected within each comparison.
///
/// Blocks are ordered by control point, the momentum block first and then
/// the force block of each time step. All subjects must carry descriptors
/// of identical shape (shared control points and time grid).
pub fn groupwise_tests(
    descriptors: &[SubjectDescriptor],
    control_group: &str,
    significance: f64,
) -> Result<Vec<ComparisonReport>> {
    if descriptors.is_empty() {
        return Err(Error::InsufficientData("no descriptors given".into()));
    }
    let n_ctrl_points = descriptors[0].momenta.len();
    let n_steps = descriptors[0].forces.n_steps();
    for d in descriptors {
        if d.momenta.len() != n_ctrl_points
            || d.forces.n_steps() != n_steps
            || d.forces.n_ctrl() != n_ctrl_points
        {
            return Err(Error::invalid_argument(format!(
                "descriptor of subject {} has a different shape; all subjects must share \
                 control points and time grid",
                d.subject_id
            )));
        }
    }

    let mut by_group: BTreeMap<&str, Vec<&SubjectDescriptor>> = BTreeMap::new();
    for d in descriptors {
        by_group.entry(d.group.as_str()).or_default().push(d);
    }
    let control = by_group.remove(control_group).ok_or_else(|| {
        Error::InsufficientData(format!("control group {control_group:?} not present"))
    })?;
    // 3-D blocks with pooled covariance need n >= dim + 2 per group
    let min_group = 5;
    if control.len() < min_group {
        return Err(Error::InsufficientData(format!(
            "control group has {} subjects, need at least {min_group}",
            control.len()
        )));
    }

    let mut blocks = Vec::with_capacity(n_ctrl_points * (1 + n_steps));
    for cp in 0..n_ctrl_points {
        blocks.push(BlockId {
            kind: BlockKind::Momentum,
            control_point: cp,
            time_step: None,
        });
        for t in 0..n_steps {
            blocks.push(BlockId {
                kind: BlockKind::Force,
                control_point: cp,
                time_step: Some(t),
            });
        }
    }
    let n_blocks = blocks.len();

    let block_matrix = |subjects: &[&SubjectDescriptor], block: &BlockId| -> DMatrix<f64> {
        DMatrix::from_fn(subjects.len(), 3, |r, c| block_values(subjects[r], block)[c])
    };

    let mut comparisons = Vec::new();
    for (group, members) in by_group {
        if members.len() < min_group {
            return Err(Error::InsufficientData(format!(
                "group {group:?} has {} subjects, need at least {min_group}",
                members.len()
            )));
        }
        let mut reports = Vec::with_capacity(n_blocks);
        let mut untestable = Vec::new();
        for block in &blocks {
            let a = block_matrix(&members, block);
            let b = block_matrix(&control, block);
            match hotelling_two_sample(&a, &b) {
                Ok(res) => {
                    let p_adj = (res.p_value * n_blocks as f64).min(1.0);
                    let mean3 = |m: &DMatrix<f64>| {
                        Vec3::new(m.column(0).mean(), m.column(1).mean(), m.column(2).mean())
                    };
                    let disease_mean = mean3(&a);
                    let control_mean = mean3(&b);
                    reports.push(TestReport {
                        block: *block,
                        t2: res.t2,
                        f_stat: res.f_stat,
                        p_raw: res.p_value,
                        p_adj,
                        significant: p_adj < significance,
                        regularized: res.regularized,
                        disease_mean,
                        mean_diff: disease_mean - control_mean,
                    });
                }
                Err(Error::Numerical { .. }) => untestable.push(*block),
                Err(e) => return Err(e),
            }
        }
        comparisons.push(ComparisonReport {
            comparison: format!("{group}_vs_{control_group}"),
            disease_group: group.to_string(),
            reports,
            untestable,
            n_blocks,
        });
    }
    Ok(comparisons)
}

// ---------------------------------------------------------------------------
// scaling-law regression

/// OLS fit of `log(lambda)` on `log(V_ref / V_ED)`.
#[derive(Debug, Clone)]
pub struct LambdaRegression {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Pearson correlation between deformation magnitude and ED volume,
    /// when magnitude records are supplied.
    pub pearson_rho: Option<f64>,
}

/// Fit the per-subject scaling factors against relative ED volume.
///
/// `records` holds `(lambda, V_ED)` pairs; `magnitudes`, when given, holds
/// `(deformation magnitude, V_ED)` pairs for the accompanying correlating
/// statistic.
pub fn lambda_volume_regression(
    records: &[(f64, f64)],
    v_ref: f64,
    magnitudes: Option<&[(f64, f64)]>,
) -> Result<LambdaRegression> {
    if records.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "regression needs at least 3 records, got {}",
            records.len()
        )));
    }
    if v_ref <= 0.0 {
        return Err(Error::invalid_argument("reference volume must be positive"));
    }
    for &(lambda, v) in records {
        if lambda <= 0.0 || v <= 0.0 {
            return Err(Error::invalid_argument(
                "lambdas and volumes must be positive",
            ));
        }
    }
    let x: Vec<f64> = records.iter().map(|&(_, v)| (v_ref / v).ln()).collect();
    let y: Vec<f64> = records.iter().map(|&(l, _)| l.ln()).collect();
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mean_x) * (v - mean_x)).sum();
    let sxy: f64 = x
        .iter()
        .zip(&y)
        .map(|(a, b)| (a - mean_x) * (b - mean_y))
        .sum();
    if sxx <= 0.0 {
        return Err(Error::invalid_argument(
            "all ED volumes are identical; the regressor is degenerate",
        ));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = x
        .iter()
        .zip(&y)
        .map(|(a, b)| {
            let r = b - (intercept + slope * a);
            r * r
        })
        .sum();
    let ss_tot: f64 = y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        // constant response perfectly described by a flat line
        1.0
    };

    let pearson_rho = magnitudes.map(|pairs| {
        let n = pairs.len() as f64;
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        for &(a, b) in pairs {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
        }
        if sxx > 0.0 && syy > 0.0 {
            sxy / (sxx * syy).sqrt()
        } else {
            0.0
        }
    });

    Ok(LambdaRegression {
        slope,
        intercept,
        r_squared,
        pearson_rho,
    })
}

/// Sample mean and sample standard deviation (n − 1 denominator).
pub fn cohort_summary(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InsufficientData(
            "summary needs at least two values".into(),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

// ---------------------------------------------------------------------------
// report serialization

/// Write all comparisons as one CSV. Untestable blocks appear with empty
/// statistic fields and `significant = untestable`.
pub fn write_test_reports_csv(path: &Path, comparisons: &[ComparisonReport]) -> Result<()> {
    let mut out = String::from(
        "comparison,block_type,control_point,time_step,t2,p_raw,p_adj,significant,mean_dx,mean_dy,mean_dz\n",
    );
    for comp in comparisons {
        for r in &comp.reports {
            let step = r.block.time_step.map(|t| t.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                comp.comparison,
                r.block.kind.as_str(),
                r.block.control_point,
                step,
                r.t2,
                r.p_raw,
                r.p_adj,
                r.significant,
                r.mean_diff.x,
                r.mean_diff.y,
                r.mean_diff.z
            ));
        }
        for b in &comp.untestable {
            let step = b.time_step.map(|t| t.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},,,,untestable,,,\n",
                comp.comparison,
                b.kind.as_str(),
                b.control_point,
                step
            ));
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Plot-ready significance map for one comparison: control-point positions
/// with per-block flags, disease-group means and group-mean differences.
pub fn write_significance_map_csv(
    path: &Path,
    control_points: &[Point3],
    comparison: &ComparisonReport,
) -> Result<()> {
    let mut out = String::from(
        "control_point,x,y,z,block_type,time_step,significant,disease_mean_dx,disease_mean_dy,disease_mean_dz,diff_dx,diff_dy,diff_dz\n",
    );
    for r in &comparison.reports {
        let p = control_points[r.block.control_point];
        let step = r.block.time_step.map(|t| t.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.block.control_point,
            p.x,
            p.y,
            p.z,
            r.block.kind.as_str(),
            step,
            r.significant,
            r.disease_mean.x,
            r.disease_mean.y,
            r.disease_mean.z,
            r.mean_diff.x,
            r.mean_diff.y,
            r.mean_diff.z
        ));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}
