//! Single-stage commands: registration, transport, spline fit and statistics
//! on files produced by (or shaped like) the batch pipeline's outputs.

use anyhow::Context;
use std::path::Path;

use cardiotraj::geometry::KernelParams;
use cardiotraj::mesh::{read_mesh, write_mesh};
use cardiotraj::registration::{
    control_point_grid, read_control_system_csv, register, write_control_system_csv,
    RegistrationProblem, RegistrationResult,
};
use cardiotraj::spline::{
    fit_spline, read_forces_csv, read_spline_meta, write_forces_csv, write_spline_meta,
    ObservationSequence, SplineFit, SplineFitConfig, SplineMeta,
};
use cardiotraj::stats::{
    groupwise_tests, write_significance_map_csv, write_test_reports_csv, SubjectDescriptor,
};
use cardiotraj::transport::{scaled_transport, LadderConfig, TransportConfig};
use cardiotraj::util::fnv1a64;

use crate::config::PipelineConfig;
use crate::manifest::CohortManifest;

/// Register one mesh onto another and write the optimal momenta.
pub fn cmd_register(
    config: &PipelineConfig,
    template_path: &Path,
    target_path: &Path,
    control_points_path: Option<&Path>,
    out_path: &Path,
) -> anyhow::Result<RegistrationResult> {
    let template = read_mesh(template_path)?.vertices().clone();
    let target = read_mesh(target_path)?.vertices().clone();
    let control_points = match control_points_path {
        Some(p) => read_control_system_csv(p)?.0,
        None => control_point_grid(&template, config.deformation.n_control_points)?,
    };
    let kernel = KernelParams::new(config.kernel.sigma)?;
    let alpha = config.deformation.effective_alpha(template.diameter());
    let problem = RegistrationProblem::new(
        template,
        target,
        kernel,
        alpha,
        control_points,
        config.integrator.to_config()?,
    )?;
    let result = register(&problem, None, &config.optim.registration.to_config())?;
    write_control_system_csv(out_path, &problem.control_points, &result.momenta)?;
    Ok(result)
}

/// Scaled transport for one manifest subject; writes the same per-subject
/// artifacts as the pipeline plus a one-row report.
pub fn cmd_transport(
    config: &PipelineConfig,
    manifest_path: &Path,
    subject_id: &str,
    atlas_path: &Path,
    control_points_path: &Path,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let manifest = CohortManifest::read(manifest_path)?;
    let entry = manifest
        .entries
        .iter()
        .find(|e| e.subject_id == subject_id)
        .with_context(|| format!("subject {subject_id} not in manifest"))?;
    let (seq, _) = manifest.load_subject(entry)?;
    let atlas = read_mesh(atlas_path)?;
    let (control_points, _) = read_control_system_csv(control_points_path)?;
    let kernel = KernelParams::new(config.kernel.sigma)?;
    let integrator = config.integrator.to_config()?;
    let alpha = config
        .deformation
        .effective_alpha(atlas.vertices().diameter());
    let cfg = TransportConfig {
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
    let result = scaled_transport(&seq, &atlas, &control_points, &kernel, &cfg)?;

    let dir = out_dir.join("subjects").join(subject_id);
    std::fs::create_dir_all(&dir)?;
    for (i, momenta) in result.transported_momenta.iter().enumerate() {
        write_control_system_csv(
            &dir.join(format!("transported_f{i}.csv")),
            &result.atlas_control_points,
            momenta,
        )?;
    }
    for (i, mesh) in result.reconstructed.iter().enumerate() {
        write_mesh(mesh, &dir.join(format!("recon_spt_f{i}.off")))?;
    }
    for (i, mesh) in result.reconstructed_unscaled.iter().enumerate() {
        write_mesh(mesh, &dir.join(format!("recon_pt_f{i}.off")))?;
    }
    let report = format!(
        "subject_id,lambda,ef_original,ef_reconstructed,norm_in,norm_out,isometry_defect\n{},{},{},{},{},{},{}\n",
        subject_id,
        result.lambda,
        result.ef_original,
        result.ef_reconstructed,
        result.norm_in,
        result.norm_out,
        result.isometry_defect
    );
    std::fs::write(dir.join("transport_report.csv"), report)?;
    Ok(())
}

/// Fit the spline model to an ordered list of frame meshes (the first frame
/// is the trajectory start) and write the descriptor files.
pub fn cmd_spline(
    config: &PipelineConfig,
    frame_paths: &[&Path],
    control_points_path: &Path,
    out_dir: &Path,
) -> anyhow::Result<SplineFit> {
    anyhow::ensure!(frame_paths.len() >= 2, "need at least two frames");
    let shapes = frame_paths
        .iter()
        .map(|p| Ok(read_mesh(p)?.vertices().clone()))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let (control_points, _) = read_control_system_csv(control_points_path)?;
    let cp_hash = fnv1a64(&std::fs::read(control_points_path)?);
    let kernel = KernelParams::new(config.kernel.sigma)?;
    let alpha = config.deformation.effective_alpha(shapes[0].diameter());
    let n_steps = ObservationSequence::fitting_steps(shapes.len(), config.integrator.n_steps);
    let obs = ObservationSequence::from_frames(shapes, n_steps)?;
    let integrator = cardiotraj::shooting::IntegratorConfig {
        n_steps,
        scheme: config.integrator.to_config()?.scheme,
    };
    let fit = fit_spline(
        &obs,
        &control_points,
        &kernel,
        alpha,
        &integrator,
        &SplineFitConfig {
            optim: config.optim.spline.to_config(),
            fit_forces: true,
        },
    )?;
    std::fs::create_dir_all(out_dir)?;
    write_control_system_csv(
        &out_dir.join("spline_momenta.csv"),
        &control_points,
        &fit.initial_momenta,
    )?;
    write_forces_csv(&out_dir.join("spline_forces.csv"), &fit.forces)?;
    write_spline_meta(
        &out_dir.join("spline_meta.txt"),
        &SplineMeta {
            alpha,
            n_steps,
            sigma: config.kernel.sigma,
            control_points_hash: cp_hash,
        },
    )?;
    Ok(fit)
}

/// Group statistics over spline fits laid out as the pipeline writes them
/// (`<out>/subjects/<id>/spline_*.csv`). Group labels come from the
/// manifest; descriptor compatibility is asserted through the shared
/// control-point hash in each fit's metadata.
pub fn cmd_stats(
    config: &PipelineConfig,
    manifest_path: &Path,
    out_dir: &Path,
) -> anyhow::Result<usize> {
    let manifest = CohortManifest::read(manifest_path)?;
    let cp_path = out_dir.join("control_points.csv");
    let (control_points, _) = read_control_system_csv(&cp_path)
        .with_context(|| format!("missing pipeline output {}", cp_path.display()))?;
    let cp_hash = fnv1a64(&std::fs::read(&cp_path)?);

    let mut descriptors = Vec::new();
    for entry in &manifest.entries {
        let dir = out_dir.join("subjects").join(&entry.subject_id);
        let momenta_path = dir.join("spline_momenta.csv");
        if !momenta_path.exists() {
            continue;
        }
        let meta = read_spline_meta(&dir.join("spline_meta.txt"))?;
        anyhow::ensure!(
            meta.control_points_hash == cp_hash,
            "subject {} was fitted against different control points",
            entry.subject_id
        );
        let (_, momenta) = read_control_system_csv(&momenta_path)?;
        let forces = read_forces_csv(&dir.join("spline_forces.csv"))?;
        descriptors.push(SubjectDescriptor {
            subject_id: entry.subject_id.clone(),
            group: entry.group.clone(),
            momenta,
            forces,
        });
    }
    anyhow::ensure!(!descriptors.is_empty(), "no spline fits found under {}", out_dir.display());

    let comparisons = groupwise_tests(
        &descriptors,
        &config.stats.control_group,
        config.stats.significance,
    )?;
    let stats_dir = out_dir.join("stats");
    std::fs::create_dir_all(&stats_dir)?;
    write_test_reports_csv(&stats_dir.join("tests.csv"), &comparisons)?;
    for comp in &comparisons {
        write_significance_map_csv(
            &stats_dir.join(format!("significance_map_{}.csv", comp.comparison)),
            &control_points,
            comp,
        )?;
    }
    Ok(comparisons.len())
}
