//! End-to-end batch pipeline: pose normalization, atlas estimation, shared
//! control-point optimization, per-subject scaled transport, spline fits and
//! group statistics, all written as flat CSV and mesh artifacts.
//!
//! Subjects fail independently: an error in one subject is recorded in the
//! run summary and the pipeline continues with the rest.

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;
use std::path::{Path, PathBuf};

use cardiotraj::geometry::{KernelParams, LandmarkSet, Point3, Vec3};
use cardiotraj::mesh::{
    area_strain, read_mesh, rigid_align, write_mesh, SubjectSequence, TriangleMesh,
};
use cardiotraj::registration::{
    estimate_atlas, optimize_control_points, write_control_system_csv,
};
use cardiotraj::spline::{
    fit_spline, write_forces_csv, write_spline_meta, ObservationSequence, SplineFit,
    SplineFitConfig, SplineMeta,
};
use cardiotraj::stats::{
    groupwise_tests, write_significance_map_csv, write_test_reports_csv, SubjectDescriptor,
};
use cardiotraj::transport::{
    scaled_transport, LadderConfig, ScaledTransportResult, TransportConfig,
};
use cardiotraj::util::fnv1a64;

use crate::config::PipelineConfig;
use crate::manifest::CohortManifest;

/// Outcome of one pipeline run.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    pub n_subjects: usize,
    /// `(subject_id, error)` for every subject that failed a stage.
    pub failed: Vec<(String, String)>,
    pub stats_status: String,
    pub warnings: Vec<String>,
}

impl PipelineOutcome {
    pub fn all_failed(&self) -> bool {
        self.failed.len() == self.n_subjects
    }
}

#[derive(Serialize)]
struct RunSummary {
    version: String,
    config_hash: String,
    seed: u64,
    atlas_source: String,
    control_points_hash: String,
    integrator: String,
    spline_steps: usize,
    n_subjects: usize,
    n_failed: usize,
    stats: String,
    failed: Vec<FailedSubject>,
}

#[derive(Serialize)]
struct FailedSubject {
    subject_id: String,
    error: String,
}

struct AlignedSubject {
    seq: SubjectSequence,
}

/// Build the rayon pool for a run; `workers = 0` uses the default size.
pub fn thread_pool(workers: usize) -> anyhow::Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        builder = builder.num_threads(workers);
    }
    builder.build().context("building worker pool")
}

pub fn run_pipeline(
    config: &PipelineConfig,
    manifest_path: &Path,
    out_dir: &Path,
    seed: u64,
    workers: usize,
) -> anyhow::Result<PipelineOutcome> {
    let pool = thread_pool(if workers > 0 { workers } else { config.run.workers })?;
    pool.install(|| run_pipeline_inner(config, manifest_path, out_dir, seed))
}

fn run_pipeline_inner(
    config: &PipelineConfig,
    manifest_path: &Path,
    out_dir: &Path,
    seed: u64,
) -> anyhow::Result<PipelineOutcome> {
    let manifest = CohortManifest::read(manifest_path)?;
    std::fs::create_dir_all(out_dir)?;
    let mut warnings: Vec<String> = Vec::new();
    let mut failed: Vec<(String, String)> = Vec::new();
    let n_subjects = manifest.entries.len();

    // load and slice each subject to its systolic phase (ED .. ES)
    let mut subjects: Vec<SubjectSequence> = Vec::new();
    for entry in &manifest.entries {
        match manifest.load_subject(entry) {
            Ok((seq, mut w)) => {
                warnings.append(&mut w);
                if entry.ed_index >= entry.es_index {
                    failed.push((
                        entry.subject_id.clone(),
                        "ed_index must precede es_index (systolic ordering)".into(),
                    ));
                    continue;
                }
                let frames = seq.frames()[entry.ed_index..=entry.es_index].to_vec();
                let n = frames.len();
                match SubjectSequence::new(
                    entry.subject_id.clone(),
                    entry.group.clone(),
                    frames,
                    0,
                    n - 1,
                ) {
                    Ok(s) => subjects.push(s),
                    Err(e) => failed.push((entry.subject_id.clone(), e.to_string())),
                }
            }
            Err(e) => failed.push((entry.subject_id.clone(), format!("{e:#}"))),
        }
    }
    anyhow::ensure!(!subjects.is_empty(), "no subject could be loaded");

    // all subjects must share one mesh topology
    let topology = subjects[0].frames()[0].triangles().to_vec();
    subjects.retain(|s| {
        if s.frames()[0].triangles() == topology.as_slice() {
            true
        } else {
            failed.push((
                s.subject_id.clone(),
                "mesh topology differs from the rest of the cohort".into(),
            ));
            false
        }
    });

    // frame counts must agree so spline descriptors are comparable
    let n_frames = subjects[0].frames().len();
    subjects.retain(|s| {
        if s.frames().len() == n_frames {
            true
        } else {
            failed.push((
                s.subject_id.clone(),
                format!(
                    "subject has {} systolic frames but the cohort uses {n_frames}",
                    s.frames().len()
                ),
            ));
            false
        }
    });
    anyhow::ensure!(!subjects.is_empty(), "no subject survived validation");

    let kernel = KernelParams::new(config.kernel.sigma)?;
    let integrator = config.integrator.to_config()?;

    // --- pose normalization -------------------------------------------------
    let atlas_file_vertices = match &config.atlas.file {
        Some(path) => Some(read_mesh(path)?.vertices().clone()),
        None => None,
    };
    let reference: LandmarkSet = match &atlas_file_vertices {
        Some(v) => v.clone(),
        None => {
            let control = subjects
                .iter()
                .find(|s| s.group == config.stats.control_group)
                .unwrap_or(&subjects[0]);
            control.ed().vertices().clone()
        }
    };

    let aligned: Vec<Option<AlignedSubject>> = subjects
        .par_iter()
        .map(|s| {
            let (transform, _) = rigid_align(s.ed().vertices(), &reference).ok()?;
            let frames: Option<Vec<TriangleMesh>> = s
                .frames()
                .iter()
                .map(|f| f.with_vertices(transform.apply(f.vertices())).ok())
                .collect();
            let seq = SubjectSequence::new(
                s.subject_id.clone(),
                s.group.clone(),
                frames?,
                s.ed_index(),
                s.es_index(),
            )
            .ok()?;
            Some(AlignedSubject { seq })
        })
        .collect();
    let mut aligned_subjects: Vec<AlignedSubject> = Vec::new();
    for (subject, result) in subjects.iter().zip(aligned) {
        match result {
            Some(a) => aligned_subjects.push(a),
            None => failed.push((subject.subject_id.clone(), "rigid alignment failed".into())),
        }
    }
    anyhow::ensure!(!aligned_subjects.is_empty(), "no subject survived alignment");

    // --- atlas ---------------------------------------------------------------
    let example_topology = aligned_subjects[0].seq.frames()[0].clone();
    let (atlas_vertices, atlas_source) = match atlas_file_vertices {
        Some(v) => {
            anyhow::ensure!(
                v.len() == example_topology.n_vertices(),
                "supplied atlas has {} vertices but the cohort meshes have {}",
                v.len(),
                example_topology.n_vertices()
            );
            (v, "file".to_string())
        }
        None => {
            let control_eds: Vec<LandmarkSet> = aligned_subjects
                .iter()
                .filter(|s| s.seq.group == config.stats.control_group)
                .map(|s| s.seq.ed().vertices().clone())
                .collect();
            anyhow::ensure!(
                control_eds.len() >= 2,
                "atlas estimation needs at least two {} subjects (found {}); \
                 supply atlas.file instead",
                config.stats.control_group,
                control_eds.len()
            );
            let mean = pointwise_mean(&control_eds);
            let alpha = config.deformation.effective_alpha(mean.diameter());
            let grid = cardiotraj::registration::control_point_grid(
                &mean,
                config.deformation.n_control_points,
            )?;
            let result = estimate_atlas(
                &control_eds,
                kernel,
                alpha,
                &grid,
                &config.optim.atlas.to_config(),
                config.atlas.outer_iters,
                integrator,
            )?;
            (result.atlas, "estimated".to_string())
        }
    };
    let atlas_mesh = example_topology.with_vertices(atlas_vertices)?;
    atlas_mesh.check_closed()?;
    write_mesh(&atlas_mesh, &out_dir.join("atlas.off"))?;
    let alpha = config
        .deformation
        .effective_alpha(atlas_mesh.vertices().diameter());

    // --- shared control points ------------------------------------------------
    let es_targets: Vec<LandmarkSet> = aligned_subjects
        .iter()
        .map(|s| s.seq.es().vertices().clone())
        .collect();
    let cp_result = optimize_control_points(
        atlas_mesh.vertices(),
        &es_targets,
        config.deformation.n_control_points,
        kernel,
        alpha,
        &config.optim.control_points.to_config(),
        integrator,
    )?;
    let control_points = cp_result.control_points;
    let cp_path = out_dir.join("control_points.csv");
    write_control_system_csv(
        &cp_path,
        &control_points,
        &vec![Vec3::zeros(); control_points.len()],
    )?;
    let cp_hash = fnv1a64(&std::fs::read(&cp_path)?);

    // --- per-subject scaled transport ------------------------------------------
    let transport_cfg = TransportConfig {
        ladder: LadderConfig {
            n_rungs: config.ladder.n_rungs,
            rung_scale: config.ladder.rung_scale,
            inner_optim: config.optim.ladder_inner.to_config(),
            inner_integrator: integrator,
        },
        alpha,
        ladder_alpha: config.ladder.inner_alpha,
        ef_tolerance: config.transport.ef_tolerance,
        registration_optim: config.optim.registration.to_config(),
        integrator,
    };
    let transports: Vec<Result<ScaledTransportResult, String>> = aligned_subjects
        .par_iter()
        .map(|s| {
            scaled_transport(&s.seq, &atlas_mesh, &control_points, &kernel, &transport_cfg)
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut survivors: Vec<(&AlignedSubject, ScaledTransportResult)> = Vec::new();
    for (subject, result) in aligned_subjects.iter().zip(transports) {
        match result {
            Ok(t) => survivors.push((subject, t)),
            Err(e) => failed.push((subject.seq.subject_id.clone(), format!("transport: {e}"))),
        }
    }

    let mut report = String::from(
        "subject_id,lambda,ef_original,ef_reconstructed,norm_in,norm_out,isometry_defect\n",
    );
    for (subject, t) in &survivors {
        report.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            subject.seq.subject_id,
            t.lambda,
            t.ef_original,
            t.ef_reconstructed,
            t.norm_in,
            t.norm_out,
            t.isometry_defect
        ));
        let dir = out_dir.join("subjects").join(&subject.seq.subject_id);
        std::fs::create_dir_all(&dir)?;
        for (i, momenta) in t.transported_momenta.iter().enumerate() {
            write_control_system_csv(
                &dir.join(format!("transported_f{i}.csv")),
                &t.atlas_control_points,
                momenta,
            )?;
        }
        for (i, mesh) in t.reconstructed.iter().enumerate() {
            write_mesh(mesh, &dir.join(format!("recon_spt_f{i}.off")))?;
        }
        for (i, mesh) in t.reconstructed_unscaled.iter().enumerate() {
            write_mesh(mesh, &dir.join(format!("recon_pt_f{i}.off")))?;
        }
    }
    std::fs::write(out_dir.join("transport_report.csv"), report)?;

    // --- per-subject spline fits --------------------------------------------
    let spline_steps = ObservationSequence::fitting_steps(n_frames, config.integrator.n_steps);
    let spline_integrator = cardiotraj::shooting::IntegratorConfig {
        n_steps: spline_steps,
        scheme: integrator.scheme,
    };
    let spline_cfg = SplineFitConfig {
        optim: config.optim.spline.to_config(),
        fit_forces: true,
    };
    let fits: Vec<Result<SplineFit, String>> = survivors
        .par_iter()
        .map(|(_, t)| {
            let mut shapes = vec![atlas_mesh.vertices().clone()];
            for mesh in t.reconstructed.iter().skip(1) {
                shapes.push(mesh.vertices().clone());
            }
            let obs = ObservationSequence::from_frames(shapes, spline_steps)
                .map_err(|e| e.to_string())?;
            fit_spline(&obs, &control_points, &kernel, alpha, &spline_integrator, &spline_cfg)
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut descriptors: Vec<SubjectDescriptor> = Vec::new();
    for ((subject, _), fit) in survivors.iter().zip(fits) {
        match fit {
            Ok(fit) => {
                let dir = out_dir.join("subjects").join(&subject.seq.subject_id);
                write_control_system_csv(
                    &dir.join("spline_momenta.csv"),
                    &control_points,
                    &fit.initial_momenta,
                )?;
                write_forces_csv(&dir.join("spline_forces.csv"), &fit.forces)?;
                write_spline_meta(
                    &dir.join("spline_meta.txt"),
                    &SplineMeta {
                        alpha,
                        n_steps: spline_steps,
                        sigma: config.kernel.sigma,
                        control_points_hash: cp_hash,
                    },
                )?;
                descriptors.push(SubjectDescriptor {
                    subject_id: subject.seq.subject_id.clone(),
                    group: subject.seq.group.clone(),
                    momenta: fit.initial_momenta,
                    forces: fit.forces,
                });
            }
            Err(e) => failed.push((subject.seq.subject_id.clone(), format!("spline: {e}"))),
        }
    }

    // --- per-frame metrics on the aligned originals ---------------------------
    let mut metrics = String::from("subject_id,frame,volume,ef,as_mean,as_std,excluded_cells\n");
    for subject in &aligned_subjects {
        let seq = &subject.seq;
        let v_ed = seq.ed().signed_volume_unchecked();
        for (i, frame) in seq.frames().iter().enumerate() {
            let volume = frame.signed_volume_unchecked();
            let ef = (v_ed - volume) / v_ed;
            let strain = area_strain(seq, i)?;
            let (mean, std) = strain.summary().unwrap_or((f64::NAN, f64::NAN));
            metrics.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                seq.subject_id, i, volume, ef, mean, std, strain.excluded
            ));
        }
    }
    std::fs::write(out_dir.join("metrics.csv"), metrics)?;

    // --- statistics -----------------------------------------------------------
    let stats_dir = out_dir.join("stats");
    std::fs::create_dir_all(&stats_dir)?;
    let stats_status = match groupwise_tests(
        &descriptors,
        &config.stats.control_group,
        config.stats.significance,
    ) {
        Ok(comparisons) => {
            write_test_reports_csv(&stats_dir.join("tests.csv"), &comparisons)?;
            for comp in &comparisons {
                write_significance_map_csv(
                    &stats_dir.join(format!("significance_map_{}.csv", comp.comparison)),
                    &control_points,
                    comp,
                )?;
            }
            format!("ok ({} comparisons)", comparisons.len())
        }
        Err(e) => {
            // small cohorts cannot support the tests; record and move on
            format!("skipped: {e}")
        }
    };

    // --- provenance ------------------------------------------------------------
    let summary = RunSummary {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: format!("{:016x}", config.config_hash(seed)?),
        seed,
        atlas_source,
        control_points_hash: format!("{cp_hash:016x}"),
        integrator: format!("{}/{}", config.integrator.scheme, config.integrator.n_steps),
        spline_steps,
        n_subjects,
        n_failed: failed.len(),
        stats: stats_status.clone(),
        failed: failed
            .iter()
            .map(|(subject_id, error)| FailedSubject {
                subject_id: subject_id.clone(),
                error: error.clone(),
            })
            .collect(),
    };
    std::fs::write(
        out_dir.join("run_summary.toml"),
        toml::to_string_pretty(&summary).context("serializing run summary")?,
    )?;

    Ok(PipelineOutcome {
        out_dir: out_dir.to_path_buf(),
        n_subjects,
        failed,
        stats_status,
        warnings,
    })
}

fn pointwise_mean(shapes: &[LandmarkSet]) -> LandmarkSet {
    let n = shapes[0].len();
    let mut points = vec![Point3::origin(); n];
    for shape in shapes {
        for (acc, p) in points.iter_mut().zip(shape.iter()) {
            acc.coords += p.coords;
        }
    }
    for p in &mut points {
        p.coords /= shapes.len() as f64;
    }
    LandmarkSet::new(points).expect("mean of valid shapes is valid")
}
