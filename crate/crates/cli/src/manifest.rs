//! Cohort manifest: one CSV row per subject listing its group, ED/ES frame
//! indices and ordered frame mesh paths (relative to the manifest file).

use anyhow::Context;
use cardiotraj::mesh::{read_mesh_with_warnings, SubjectSequence, TriangleMesh};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub group: String,
    pub ed_index: usize,
    pub es_index: usize,
    pub frame_paths: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct CohortManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory the frame paths are relative to.
    pub base_dir: PathBuf,
}

pub const MANIFEST_HEADER: &str = "subject_id,group,ed_index,es_index,frames";

impl CohortManifest {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim().starts_with("subject_id,group,ed_index,es_index") => {}
            _ => anyhow::bail!(
                "manifest {} must start with header `{MANIFEST_HEADER}`",
                path.display()
            ),
        }
        let mut entries = Vec::new();
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            anyhow::ensure!(
                fields.len() >= 6,
                "manifest line {}: need subject_id, group, ed_index, es_index and at least two frames",
                idx + 1
            );
            let ed_index: usize = fields[2]
                .parse()
                .with_context(|| format!("manifest line {}: bad ed_index", idx + 1))?;
            let es_index: usize = fields[3]
                .parse()
                .with_context(|| format!("manifest line {}: bad es_index", idx + 1))?;
            entries.push(ManifestEntry {
                subject_id: fields[0].to_string(),
                group: fields[1].to_string(),
                ed_index,
                es_index,
                frame_paths: fields[4..].iter().map(PathBuf::from).collect(),
            });
        }
        anyhow::ensure!(!entries.is_empty(), "no subjects in manifest {}", path.display());
        Ok(CohortManifest { entries, base_dir })
    }

    pub fn write(path: &Path, entries: &[ManifestEntry]) -> anyhow::Result<()> {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in entries {
            let frames: Vec<String> = e
                .frame_paths
                .iter()
                .map(|p| p.to_string_lossy().into_owned())
                .collect();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.subject_id,
                e.group,
                e.ed_index,
                e.es_index,
                frames.join(",")
            ));
        }
        std::fs::write(path, out).with_context(|| format!("writing manifest {}", path.display()))
    }

    /// Load one subject's frames and assemble the sequence; parse warnings
    /// (ignored mesh sections) are returned alongside.
    pub fn load_subject(&self, entry: &ManifestEntry) -> anyhow::Result<(SubjectSequence, Vec<String>)> {
        let mut frames: Vec<TriangleMesh> = Vec::with_capacity(entry.frame_paths.len());
        let mut warnings = Vec::new();
        for rel in &entry.frame_paths {
            let path = self.base_dir.join(rel);
            let (mesh, mut w) = read_mesh_with_warnings(&path)
                .with_context(|| format!("subject {}: loading {}", entry.subject_id, path.display()))?;
            warnings.append(&mut w);
            frames.push(mesh);
        }
        let seq = SubjectSequence::new(
            entry.subject_id.clone(),
            entry.group.clone(),
            frames,
            entry.ed_index,
            entry.es_index,
        )?;
        Ok((seq, warnings))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = std::env::temp_dir().join("cardiotraj_manifest");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.csv");
        let entries = vec![ManifestEntry {
            subject_id: "s01".into(),
            group: "Control".into(),
            ed_index: 0,
            es_index: 2,
            frame_paths: vec!["a.off".into(), "b.off".into(), "c.off".into()],
        }];
        CohortManifest::write(&path, &entries).unwrap();
        let manifest = CohortManifest::read(&path).unwrap();
        assert_eq!(manifest.entries.len(), 1);
        assert_eq!(manifest.entries[0].subject_id, "s01");
        assert_eq!(manifest.entries[0].frame_paths.len(), 3);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn empty_manifest_is_rejected() {
        let dir = std::env::temp_dir().join("cardiotraj_manifest");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.csv");
        std::fs::write(&path, format!("{MANIFEST_HEADER}\n")).unwrap();
        let err = CohortManifest::read(&path).unwrap_err();
        assert!(err.to_string().contains("no subjects"));
        std::fs::remove_file(&path).unwrap();
    }
}
