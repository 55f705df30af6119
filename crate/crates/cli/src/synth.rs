//! Synthetic cohort generator: ventricle-like closed meshes with systolic
//! sequences produced by flows with known momenta and forces, plus ground
//! truth for oracle tests.
//!
//! Each subject gets a jittered half-ellipsoid at a sampled ED volume and a
//! contraction flow whose amplitude is solved so the measured ejection
//! fraction hits a sampled target. Disease groups may add a fixed momentum
//! offset at chosen generator control points and scale the external forces.

use anyhow::Context;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use cardiotraj::geometry::{ControlSystem, KernelParams, LandmarkSet, Point3, Vec3};
use cardiotraj::mesh::{write_mesh, TriangleMesh};
use cardiotraj::registration::control_point_grid;
use cardiotraj::shooting::{shoot, ForceField, IntegratorConfig};
use cardiotraj::spline::{write_forces_csv, ObservationSequence};
use cardiotraj::util::fnv1a64;

use crate::config::{PipelineConfig, SynthGroup, SynthSection};
use crate::manifest::{CohortManifest, ManifestEntry};

/// Ventricle-like closed surface: half-ellipsoid with a flat base lid.
pub fn ventricle_mesh(rings: usize, segments: usize, semi_axes: Vec3) -> TriangleMesh {
    assert!(rings >= 2 && segments >= 3);
    let (a, b, c) = (semi_axes.x, semi_axes.y, semi_axes.z);
    let mut vertices = Vec::with_capacity(2 + rings * segments);
    vertices.push(Point3::new(0.0, 0.0, -c)); // apex
    for r in 1..=rings {
        let theta = std::f64::consts::FRAC_PI_2 * r as f64 / rings as f64;
        let (sin_t, cos_t) = theta.sin_cos();
        for s in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push(Point3::new(
                a * sin_t * phi.cos(),
                b * sin_t * phi.sin(),
                -c * cos_t,
            ));
        }
    }
    let lid_center = vertices.len();
    vertices.push(Point3::new(0.0, 0.0, 0.0));

    let ring_start = |r: usize| 1 + (r - 1) * segments;
    let mut triangles = Vec::with_capacity(2 * rings * segments);
    // apex fan
    for s in 0..segments {
        let s1 = (s + 1) % segments;
        triangles.push([0, ring_start(1) + s1, ring_start(1) + s]);
    }
    // ring strips
    for r in 1..rings {
        let lo = ring_start(r);
        let hi = ring_start(r + 1);
        for s in 0..segments {
            let s1 = (s + 1) % segments;
            triangles.push([lo + s, hi + s1, hi + s]);
            triangles.push([lo + s, lo + s1, hi + s1]);
        }
    }
    // flat lid at the base
    let rim = ring_start(rings);
    for s in 0..segments {
        let s1 = (s + 1) % segments;
        triangles.push([lid_center, rim + s, rim + s1]);
    }

    let mesh = TriangleMesh::new(LandmarkSet::new(vertices).unwrap(), triangles)
        .expect("generator indices are in range");
    // one orientation convention; flip wholesale if it came out inward
    let oriented = if mesh.signed_volume_unchecked() < 0.0 {
        mesh.flipped()
    } else {
        mesh
    };
    oriented
        .check_closed()
        .expect("generated ventricle is closed");
    oriented
}

/// Everything recorded about one generated subject.
#[derive(Debug, Clone)]
pub struct SubjectTruth {
    pub subject_id: String,
    pub group: String,
    pub ef_target: f64,
    pub ef_measured: f64,
    pub amplitude: f64,
    pub v_ed: f64,
    pub frames: Vec<TriangleMesh>,
    pub forces: ForceField,
}

/// A generated cohort plus the shared reference volume.
#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub subjects: Vec<SubjectTruth>,
    pub base_volume: f64,
}

fn scaled_about(lm: &LandmarkSet, center: Point3, s: f64) -> LandmarkSet {
    LandmarkSet::new(
        lm.iter()
            .map(|p| Point3::from(center.coords + s * (p - center)))
            .collect(),
    )
    .unwrap()
}

fn generate_subject(
    spec: &SynthSection,
    group: &SynthGroup,
    subject_id: &str,
    base_volume: f64,
    rng: &mut ChaCha8Rng,
) -> anyhow::Result<SubjectTruth> {
    // jittered anatomy at a sampled ED volume
    let jitter = |rng: &mut ChaCha8Rng| 1.0 + rng.random_range(-spec.shape_jitter..=spec.shape_jitter);
    let axes = Vec3::new(
        spec.semi_axes[0] * jitter(rng),
        spec.semi_axes[1] * jitter(rng),
        spec.semi_axes[2] * jitter(rng),
    );
    let raw = ventricle_mesh(spec.rings, spec.segments, axes);
    let v_raw = raw.signed_volume_unchecked();
    let log_range = spec.volume_range[1].ln() - spec.volume_range[0].ln();
    let v_target = base_volume * (spec.volume_range[0].ln() + rng.random_range(0.0..=1.0) * log_range).exp();
    let scale = (v_target / v_raw).cbrt();
    let center = raw.vertices().centroid();
    let ed = raw.with_vertices(scaled_about(raw.vertices(), center, scale))?;
    let v_ed = ed.signed_volume_unchecked();

    // generator deformation: radial contraction + jitter + planted offsets
    let cps = control_point_grid(ed.vertices(), spec.gen_control_points)?;
    let centroid = ed.vertices().centroid();
    let mean_radius = cps.iter().map(|c| (c - centroid).norm()).sum::<f64>() / cps.len() as f64;
    let planted_dir = Vec3::new(1.0, 1.0, 1.0).normalize();
    let pattern: Vec<Vec3> = cps
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut v = -(c - centroid);
            let noise = Vec3::new(
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            );
            v += spec.momentum_jitter * mean_radius * noise;
            if group.planted_points.contains(&i) {
                v += group.momentum_offset * mean_radius * planted_dir;
            }
            v
        })
        .collect();

    // sinusoidal lateral force pattern, scaled with the amplitude so the
    // ejection fraction stays monotone in it
    let sigma = 0.8 * ed.vertices().diameter();
    let kernel = KernelParams::new(sigma)?;
    let d = spec.frames;
    let n_steps = ObservationSequence::fitting_steps(d, 12);
    let integrator = IntegratorConfig::rk4(n_steps)?;
    let force_dir = Vec3::new(0.0, 1.0, 0.3).normalize();
    let force_pattern: Vec<Vec3> = (0..n_steps * cps.len())
        .map(|idx| {
            let t = (idx / cps.len()) as f64 / n_steps as f64;
            let weight = (std::f64::consts::PI * t).sin();
            spec.force_amplitude * group.force_scale * mean_radius * weight * force_dir
        })
        .collect();

    let ef_target = rng.random_range(spec.ef_range[0]..=spec.ef_range[1]);
    let shoot_with = |amp: f64| -> anyhow::Result<Vec<TriangleMesh>> {
        let momenta: Vec<Vec3> = pattern.iter().map(|p| amp * p).collect();
        let forces = ForceField::from_data(
            n_steps,
            cps.len(),
            force_pattern.iter().map(|f| amp * f).collect(),
        )?;
        let sys = ControlSystem::new(cps.clone(), momenta)?;
        let flow = shoot(&sys, ed.vertices(), Some(&forces), &integrator, &kernel)?;
        let nodes: Vec<usize> = (0..d).map(|i| i * n_steps / (d - 1)).collect();
        nodes
            .iter()
            .map(|&node| Ok(ed.with_vertices(flow.states[node].landmark_set())?))
            .collect()
    };
    let measured_ef = |frames: &[TriangleMesh]| -> f64 {
        let v_es = frames.last().unwrap().signed_volume_unchecked();
        (v_ed - v_es) / v_ed
    };

    // bracket and bisect the amplitude onto the target ejection fraction
    let mut lo = 0.0;
    let mut hi = 0.5;
    let mut ef_hi = measured_ef(&shoot_with(hi)?);
    let mut guard = 0;
    while ef_hi < ef_target && guard < 20 {
        lo = hi;
        hi *= 2.0;
        ef_hi = measured_ef(&shoot_with(hi)?);
        guard += 1;
    }
    anyhow::ensure!(
        ef_hi >= ef_target,
        "generator cannot reach EF {ef_target} for subject {subject_id}"
    );
    let mut amp = hi;
    let mut frames = shoot_with(amp)?;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let candidate = shoot_with(mid)?;
        let ef = measured_ef(&candidate);
        amp = mid;
        frames = candidate;
        if (ef - ef_target).abs() <= 1e-4 {
            break;
        }
        if ef < ef_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let ef_measured = measured_ef(&frames);
    anyhow::ensure!(
        (ef_measured - ef_target).abs() <= 1e-3,
        "amplitude search missed the EF target: {ef_measured} vs {ef_target}"
    );

    // subject-specific rigid pose applied to every frame
    let angle = rng.random_range(-spec.pose_rotation..=spec.pose_rotation);
    let axis_noise = Vec3::new(
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
    );
    let axis = nalgebra::Unit::new_normalize(if axis_noise.norm() > 1e-9 {
        axis_noise
    } else {
        Vec3::z()
    });
    let rot = nalgebra::Rotation3::from_axis_angle(&axis, angle);
    let size = ed.vertices().diameter();
    let t = Vec3::new(
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
    ) * (spec.pose_translation * size);
    let posed: Vec<TriangleMesh> = frames
        .iter()
        .map(|f| {
            let moved = LandmarkSet::new(
                f.vertices()
                    .iter()
                    .map(|p| Point3::from(rot * p.coords + t))
                    .collect(),
            )?;
            f.with_vertices(moved)
        })
        .collect::<cardiotraj::Result<_>>()?;

    let forces = ForceField::from_data(
        n_steps,
        cps.len(),
        force_pattern.iter().map(|f| amp * f).collect(),
    )?;
    Ok(SubjectTruth {
        subject_id: subject_id.to_string(),
        group: group.name.clone(),
        ef_target,
        ef_measured,
        amplitude: amp,
        v_ed,
        frames: posed,
        forces,
    })
}

/// Generate the whole cohort in memory. Subjects are seeded independently
/// from the run seed and their identifier, so generation order is
/// irrelevant.
pub fn generate_cohort(config: &PipelineConfig, seed: u64) -> anyhow::Result<SynthCohort> {
    let spec = &config.synth;
    anyhow::ensure!(!spec.groups.is_empty(), "synth.groups may not be empty");
    let base = ventricle_mesh(
        spec.rings,
        spec.segments,
        Vec3::new(spec.semi_axes[0], spec.semi_axes[1], spec.semi_axes[2]),
    );
    let base_volume = base.signed_volume_unchecked();

    let mut subjects = Vec::new();
    for group in &spec.groups {
        for i in 0..group.count {
            let subject_id = format!("{}-{:03}", group.name, i);
            let subject_seed = seed ^ fnv1a64(subject_id.as_bytes());
            let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
            subjects.push(
                generate_subject(spec, group, &subject_id, base_volume, &mut rng)
                    .with_context(|| format!("generating subject {subject_id}"))?,
            );
        }
    }
    Ok(SynthCohort {
        subjects,
        base_volume,
    })
}

/// Generate the cohort and write meshes, manifest and ground truth to disk.
pub fn run_synth(config: &PipelineConfig, seed: u64, out_dir: &Path) -> anyhow::Result<SynthCohort> {
    let cohort = generate_cohort(config, seed)?;
    std::fs::create_dir_all(out_dir)?;

    let mut entries = Vec::new();
    let mut truth_csv = String::from("subject_id,group,ef_target,ef_measured,amplitude,v_ed,v_ref\n");
    for subject in &cohort.subjects {
        let subject_dir = out_dir.join("subjects").join(&subject.subject_id);
        std::fs::create_dir_all(&subject_dir)?;
        let mut frame_paths = Vec::new();
        for (i, frame) in subject.frames.iter().enumerate() {
            let rel = Path::new("subjects")
                .join(&subject.subject_id)
                .join(format!("frame_{i}.off"));
            write_mesh(frame, &out_dir.join(&rel))?;
            frame_paths.push(rel);
        }
        write_forces_csv(&subject_dir.join("true_forces.csv"), &subject.forces)?;
        truth_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            subject.subject_id,
            subject.group,
            subject.ef_target,
            subject.ef_measured,
            subject.amplitude,
            subject.v_ed,
            cohort.base_volume
        ));
        entries.push(ManifestEntry {
            subject_id: subject.subject_id.clone(),
            group: subject.group.clone(),
            ed_index: 0,
            es_index: subject.frames.len() - 1,
            frame_paths,
        });
    }
    CohortManifest::write(&out_dir.join("manifest.csv"), &entries)?;
    std::fs::write(out_dir.join("ground_truth.csv"), truth_csv)?;

    let mut planted = String::from("group,control_point,momentum_offset\n");
    for group in &config.synth.groups {
        for cp in &group.planted_points {
            planted.push_str(&format!("{},{},{}\n", group.name, cp, group.momentum_offset));
        }
    }
    std::fs::write(out_dir.join("planted_blocks.csv"), planted)?;
    Ok(cohort)
}
