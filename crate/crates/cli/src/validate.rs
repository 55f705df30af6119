//! Transport validation: compare ejection fraction and area strain between
//! the original subjects and their reconstructions at the atlas, for both
//! plain (PT) and rescaled (SPT) transport, and fit the
//! `log(lambda) ~ log(V_ref/V_ED)` scaling law.

use anyhow::Context;
use std::path::Path;

use cardiotraj::mesh::{area_strain_between, ejection_fraction_between, read_mesh, rmse_per_cell};
use cardiotraj::stats::{cohort_summary, lambda_volume_regression};

use crate::config::PipelineConfig;
use crate::manifest::CohortManifest;

/// Per-metric comparison row of the validation table.
#[derive(Debug, Clone)]
pub struct ValidationRow {
    pub metric: String,
    pub original_mean: f64,
    pub original_std: f64,
    pub rmse_pt: f64,
    pub rmse_spt: f64,
}

#[derive(Debug)]
pub struct ValidationOutcome {
    pub rows: Vec<ValidationRow>,
    pub n_subjects: usize,
    pub lambda_slope: f64,
    pub lambda_r_squared: f64,
    pub pearson_rho: Option<f64>,
}

struct TransportRow {
    subject_id: String,
    lambda: f64,
    norm_in: f64,
}

fn read_transport_report(path: &Path) -> anyhow::Result<Vec<TransportRow>> {
    let text = std::fs::read_to_string(path).with_context(|| {
        format!(
            "missing pipeline output {} (run the pipeline first)",
            path.display()
        )
    })?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(fields.len() == 7, "transport report line {} malformed", idx + 1);
        rows.push(TransportRow {
            subject_id: fields[0].to_string(),
            lambda: fields[1].parse().context("bad lambda")?,
            norm_in: fields[4].parse().context("bad norm_in")?,
        });
    }
    Ok(rows)
}

pub fn run_validate(
    config: &PipelineConfig,
    manifest_path: &Path,
    out_dir: &Path,
) -> anyhow::Result<ValidationOutcome> {
    let manifest = CohortManifest::read(manifest_path)?;
    let atlas_path = out_dir.join("atlas.off");
    let atlas = read_mesh(&atlas_path).with_context(|| {
        format!(
            "missing pipeline output {} (run the pipeline first)",
            atlas_path.display()
        )
    })?;
    let v_ref = atlas.signed_volume()?;
    let transport_rows = read_transport_report(&out_dir.join("transport_report.csv"))?;

    let mut ef_original = Vec::new();
    let mut ef_pt = Vec::new();
    let mut ef_spt = Vec::new();
    let mut as_original: Vec<Vec<f64>> = Vec::new();
    let mut as_pt: Vec<Vec<f64>> = Vec::new();
    let mut as_spt: Vec<Vec<f64>> = Vec::new();
    let mut lambda_records = Vec::new();
    let mut magnitude_records = Vec::new();
    let mut lambda_csv = String::from("subject_id,lambda,v_ed,v_ref,log_lambda,log_v_ratio\n");

    for row in &transport_rows {
        let entry = manifest
            .entries
            .iter()
            .find(|e| e.subject_id == row.subject_id)
            .with_context(|| format!("subject {} not in manifest", row.subject_id))?;
        let (seq, _) = manifest.load_subject(entry)?;
        let n_systole = entry.es_index - entry.ed_index;

        let subject_dir = out_dir.join("subjects").join(&row.subject_id);
        let recon_spt_es = read_mesh(&subject_dir.join(format!("recon_spt_f{n_systole}.off")))
            .with_context(|| format!("missing SPT reconstruction for {}", row.subject_id))?;
        let recon_pt_es = read_mesh(&subject_dir.join(format!("recon_pt_f{n_systole}.off")))
            .with_context(|| format!("missing PT reconstruction for {}", row.subject_id))?;

        ef_original.push(ejection_fraction_between(seq.ed(), seq.es())?);
        ef_pt.push(ejection_fraction_between(&atlas, &recon_pt_es)?);
        ef_spt.push(ejection_fraction_between(&atlas, &recon_spt_es)?);

        let to_values = |strain: cardiotraj::mesh::AreaStrain| -> Vec<f64> {
            strain
                .per_cell
                .into_iter()
                .map(|c| c.unwrap_or(f64::NAN))
                .collect()
        };
        as_original.push(to_values(area_strain_between(seq.ed(), seq.es())?));
        as_pt.push(to_values(area_strain_between(&atlas, &recon_pt_es)?));
        as_spt.push(to_values(area_strain_between(&atlas, &recon_spt_es)?));

        let v_ed = seq.ed().signed_volume()?;
        lambda_records.push((row.lambda, v_ed));
        magnitude_records.push((row.norm_in, v_ed));
        lambda_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.subject_id,
            row.lambda,
            v_ed,
            v_ref,
            row.lambda.ln(),
            (v_ref / v_ed).ln()
        ));
    }
    let n = ef_original.len();
    anyhow::ensure!(n > 0, "transport report holds no subjects");

    // EF is one scalar per subject: RMSE straight over subjects
    let ef_rmse = |recon: &[f64]| -> f64 {
        let acc: f64 = ef_original
            .iter()
            .zip(recon)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (acc / n as f64).sqrt()
    };
    let ef_rmse_pt = ef_rmse(&ef_pt);
    let ef_rmse_spt = ef_rmse(&ef_spt);

    let (_, as_rmse_pt) = rmse_per_cell(&as_original, &as_pt)?;
    let (_, as_rmse_spt) = rmse_per_cell(&as_original, &as_spt)?;

    let (ef_mean, ef_std) = cohort_summary(&ef_original)?;
    let as_means: Vec<f64> = as_original
        .iter()
        .map(|cells| {
            let defined: Vec<f64> = cells.iter().copied().filter(|v| v.is_finite()).collect();
            defined.iter().sum::<f64>() / defined.len().max(1) as f64
        })
        .collect();
    let (as_mean, as_std) = cohort_summary(&as_means)?;

    let rows = vec![
        ValidationRow {
            metric: "as".into(),
            original_mean: as_mean,
            original_std: as_std,
            rmse_pt: as_rmse_pt,
            rmse_spt: as_rmse_spt,
        },
        ValidationRow {
            metric: "ef".into(),
            original_mean: ef_mean,
            original_std: ef_std,
            rmse_pt: ef_rmse_pt,
            rmse_spt: ef_rmse_spt,
        },
    ];

    let regression = lambda_volume_regression(&lambda_records, v_ref, Some(&magnitude_records))?;

    let validation_dir = out_dir.join("validation");
    std::fs::create_dir_all(&validation_dir)?;
    let mut table = String::from("metric,original_mean,original_std,rmse_pt,rmse_spt\n");
    for r in &rows {
        table.push_str(&format!(
            "{},{},{},{},{}\n",
            r.metric, r.original_mean, r.original_std, r.rmse_pt, r.rmse_spt
        ));
    }
    std::fs::write(validation_dir.join("table1.csv"), table)?;
    std::fs::write(validation_dir.join("lambda_records.csv"), lambda_csv)?;
    std::fs::write(
        validation_dir.join("lambda_regression.csv"),
        format!(
            "slope,intercept,r_squared,pearson_rho\n{},{},{},{}\n",
            regression.slope,
            regression.intercept,
            regression.r_squared,
            regression
                .pearson_rho
                .map(|r| r.to_string())
                .unwrap_or_default()
        ),
    )?;

    let _ = config;
    Ok(ValidationOutcome {
        rows,
        n_subjects: n,
        lambda_slope: regression.slope,
        lambda_r_squared: regression.r_squared,
        pearson_rho: regression.pearson_rho,
    })
}
