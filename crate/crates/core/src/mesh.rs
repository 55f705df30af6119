//! Triangle meshes, cardiac scalar biomarkers, rigid alignment and mesh I/O.
//!
//! Volumes come from the divergence theorem: a closed, consistently oriented
//! triangle mesh encloses the volume `(1/6) sum_T det(v0, v1, v2)`, positive
//! for outward orientation. The ejection fraction of a frame sequence is the
//! relative volume change `(V_ED - V_ES) / V_ED`, positive for contraction.
//! Area strain is the per-cell relative area change against the
//! end-diastolic frame.

use nalgebra::{Matrix3, SVD};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{LandmarkSet, Point3, Vec3};

/// A triangle surface mesh with 0-based, oriented index triples.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: LandmarkSet,
    triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: LandmarkSet, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::invalid_input(format!(
                    "triangle {t} references vertex out of range (mesh has {n} vertices)"
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::invalid_input(format!(
                    "triangle {t} repeats a vertex index"
                )));
            }
        }
        Ok(TriangleMesh {
            vertices,
            triangles,
        })
    }

    pub fn vertices(&self) -> &LandmarkSet {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Same topology, new vertex positions.
    pub fn with_vertices(&self, vertices: LandmarkSet) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::invalid_argument(format!(
                "replacement vertices count {} does not match mesh vertex count {}",
                vertices.len(),
                self.vertices.len()
            )));
        }
        Ok(TriangleMesh {
            vertices,
            triangles: self.triangles.clone(),
        })
    }

    /// Check that every undirected edge is shared by exactly two triangles
    /// with opposite directions. Reports offending edges on failure.
    pub fn check_closed(&self) -> Result<()> {
        let mut edges: HashMap<(usize, usize), (u32, u32)> = HashMap::new();
        for tri in &self.triangles {
            for e in 0..3 {
                let a = tri[e];
                let b = tri[(e + 1) % 3];
                let key = (a.min(b), a.max(b));
                let entry = edges.entry(key).or_insert((0, 0));
                if a < b {
                    entry.0 += 1;
                } else {
                    entry.1 += 1;
                }
            }
        }
        let mut bad: Vec<(usize, usize)> = edges
            .iter()
            .filter(|(_, &(f, b))| f != 1 || b != 1)
            .map(|(&e, _)| e)
            .collect();
        if bad.is_empty() {
            return Ok(());
        }
        bad.sort_unstable();
        let shown: Vec<String> = bad.iter().take(8).map(|(a, b)| format!("({a},{b})")).collect();
        Err(Error::invalid_input(format!(
            "mesh is not closed and consistently oriented: {} offending edges, first: {}",
            bad.len(),
            shown.join(", ")
        )))
    }

    /// Enclosed signed volume of a closed, oriented mesh:
    /// `(1/6) sum det(v0, v1, v2)`.
    pub fn signed_volume(&self) -> Result<f64> {
        self.check_closed()?;
        Ok(self.signed_volume_unchecked())
    }

    /// As [`signed_volume`](Self::signed_volume) but skipping the closedness
    /// check; for inner loops on topologies validated once.
    ///
    /// The determinants are taken about the centroid: for a closed mesh the
    /// sum is independent of the reference point, and centering avoids
    /// cancellation when the mesh sits far from the origin.
    pub fn signed_volume_unchecked(&self) -> f64 {
        let pts = self.vertices.points();
        let origin = self.vertices.centroid();
        let mut six_v = 0.0;
        for tri in &self.triangles {
            let a = pts[tri[0]] - origin;
            let b = pts[tri[1]] - origin;
            let c = pts[tri[2]] - origin;
            six_v += a.dot(&b.cross(&c));
        }
        six_v / 6.0
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let pts = self.vertices.points();
        let tri = &self.triangles[t];
        let ab = pts[tri[1]] - pts[tri[0]];
        let ac = pts[tri[2]] - pts[tri[0]];
        0.5 * ab.cross(&ac).norm()
    }

    /// Reverse the orientation of every triangle.
    pub fn flipped(&self) -> Self {
        TriangleMesh {
            vertices: self.vertices.clone(),
            triangles: self.triangles.iter().map(|t| [t[0], t[2], t[1]]).collect(),
        }
    }
}

/// A subject's systolic frame sequence; all frames share one triangle table.
#[derive(Debug, Clone)]
pub struct SubjectSequence {
    pub subject_id: String,
    pub group: String,
    frames: Vec<TriangleMesh>,
    ed_index: usize,
    es_index: usize,
}

impl SubjectSequence {
    pub fn new(
        subject_id: String,
        group: String,
        frames: Vec<TriangleMesh>,
        ed_index: usize,
        es_index: usize,
    ) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::invalid_input(format!(
                "subject {subject_id} needs at least two frames, got {}",
                frames.len()
            )));
        }
        if ed_index >= frames.len() || es_index >= frames.len() {
            return Err(Error::invalid_input(format!(
                "subject {subject_id}: frame index out of range"
            )));
        }
        if ed_index == es_index {
            return Err(Error::invalid_input(format!(
                "subject {subject_id}: ED and ES must be distinct frames"
            )));
        }
        let topo = frames[0].triangles();
        if frames.iter().any(|f| f.triangles() != topo) {
            return Err(Error::invalid_input(format!(
                "subject {subject_id}: frames do not share one triangle table"
            )));
        }
        Ok(SubjectSequence {
            subject_id,
            group,
            frames,
            ed_index,
            es_index,
        })
    }

    pub fn frames(&self) -> &[TriangleMesh] {
        &self.frames
    }

    pub fn ed_index(&self) -> usize {
        self.ed_index
    }

    pub fn es_index(&self) -> usize {
        self.es_index
    }

    pub fn ed(&self) -> &TriangleMesh {
        &self.frames[self.ed_index]
    }

    pub fn es(&self) -> &TriangleMesh {
        &self.frames[self.es_index]
    }
}

/// Ejection fraction of a frame sequence: `(V_ED - V_ES) / V_ED`.
pub fn ejection_fraction(seq: &SubjectSequence) -> Result<f64> {
    ejection_fraction_between(seq.ed(), seq.es())
}

/// Ejection fraction between two frames of one anatomy.
pub fn ejection_fraction_between(ed: &TriangleMesh, es: &TriangleMesh) -> Result<f64> {
    let v_ed = ed.signed_volume()?;
    if v_ed <= 0.0 {
        return Err(Error::invalid_input(format!(
            "end-diastolic volume must be positive, got {v_ed}"
        )));
    }
    let v_es = es.signed_volume()?;
    Ok((v_ed - v_es) / v_ed)
}

/// Per-cell area strain of one frame against the end-diastolic frame.
#[derive(Debug, Clone)]
pub struct AreaStrain {
    /// `(A_frame - A_ED) / A_ED` per triangle; `None` marks cells whose
    /// end-diastolic area is degenerate.
    pub per_cell: Vec<Option<f64>>,
    /// Number of excluded (degenerate) cells.
    pub excluded: usize,
}

impl AreaStrain {
    /// Mean and sample standard deviation over the defined cells.
    pub fn summary(&self) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self.per_cell.iter().flatten().copied().collect();
        if vals.is_empty() {
            return None;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64
        } else {
            0.0
        };
        Some((mean, var.sqrt()))
    }
}

/// Area strain of `seq.frames()[frame]` relative to the ED frame.
pub fn area_strain(seq: &SubjectSequence, frame: usize) -> Result<AreaStrain> {
    if frame >= seq.frames().len() {
        return Err(Error::invalid_argument(format!(
            "frame index {frame} out of range"
        )));
    }
    area_strain_between(seq.ed(), &seq.frames()[frame])
}

/// Area strain of `frame` against `ed`; the meshes must share topology.
pub fn area_strain_between(ed: &TriangleMesh, frame: &TriangleMesh) -> Result<AreaStrain> {
    if ed.triangles() != frame.triangles() {
        return Err(Error::invalid_argument(
            "area strain requires identical topology",
        ));
    }
    let n = ed.n_triangles();
    let mean_area: f64 = (0..n).map(|t| ed.triangle_area(t)).sum::<f64>() / n as f64;
    let threshold = 1e-12 * mean_area;
    let mut per_cell = Vec::with_capacity(n);
    let mut excluded = 0;
    for t in 0..n {
        let a_ed = ed.triangle_area(t);
        if a_ed <= threshold {
            per_cell.push(None);
            excluded += 1;
        } else {
            per_cell.push(Some((frame.triangle_area(t) - a_ed) / a_ed));
        }
    }
    Ok(AreaStrain { per_cell, excluded })
}

// ---------------------------------------------------------------------------
// rigid alignment

/// A proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn apply_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply(&self, set: &LandmarkSet) -> LandmarkSet {
        LandmarkSet::new(set.iter().map(|p| self.apply_point(p)).collect())
            .expect("rigid motion preserves validity")
    }
}

/// Least-squares rigid alignment of `moving` onto `fixed` (rotation and
/// translation only, reflections excluded).
///
/// Returns the transform and the transformed copy of `moving`. Fails when
/// the cross-covariance is rank-deficient (points essentially collinear), in
/// which case the rotation is not determined.
pub fn rigid_align(
    moving: &LandmarkSet,
    fixed: &LandmarkSet,
) -> Result<(RigidTransform, LandmarkSet)> {
    if moving.len() != fixed.len() {
        return Err(Error::invalid_argument(format!(
            "point counts differ: {} vs {}",
            moving.len(),
            fixed.len()
        )));
    }
    if moving.len() < 3 {
        return Err(Error::invalid_argument(
            "rigid alignment needs at least 3 points",
        ));
    }
    let mc = moving.centroid();
    let fc = fixed.centroid();
    let mut h = Matrix3::zeros();
    for (m, f) in moving.iter().zip(fixed.iter()) {
        h += (m - mc) * (f - fc).transpose();
    }
    let svd = SVD::new(h, true, true);
    let sv = svd.singular_values;
    if sv[0] <= 0.0 || sv[1] / sv[0] < 1e-12 {
        return Err(Error::invalid_input(
            "degenerate configuration: cross-covariance is rank-deficient",
        ));
    }
    let u = svd.u.expect("SVD with u requested");
    let v_t = svd.v_t.expect("SVD with v_t requested");
    let d = (v_t.transpose() * u.transpose()).determinant();
    let correction = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d.signum()));
    let rotation = v_t.transpose() * correction * u.transpose();
    let translation = fc.coords - rotation * mc.coords;
    let transform = RigidTransform {
        rotation,
        translation,
    };
    let aligned = transform.apply(moving);
    Ok((transform, aligned))
}

// ---------------------------------------------------------------------------
// per-cell RMSE

/// Cellwise root-mean-squared error over subjects, and its unweighted mean
/// over the defined cells.
///
/// Inputs are per-subject arrays of per-cell values (identical lengths).
/// Cells where any subject carries a non-finite value are excluded from the
/// mean and reported as `None`.
pub fn rmse_per_cell(
    reference: &[Vec<f64>],
    reconstructed: &[Vec<f64>],
) -> Result<(Vec<Option<f64>>, f64)> {
    if reference.len() != reconstructed.len() || reference.is_empty() {
        return Err(Error::invalid_argument(
            "reference and reconstructed must hold the same nonzero number of subjects",
        ));
    }
    let n_cells = reference[0].len();
    for (r, s) in reference.iter().zip(reconstructed.iter()) {
        if r.len() != n_cells || s.len() != n_cells {
            return Err(Error::invalid_argument(
                "per-cell arrays must all have the same length",
            ));
        }
    }
    let n_subjects = reference.len() as f64;
    let mut per_cell = Vec::with_capacity(n_cells);
    let mut sum = 0.0;
    let mut defined = 0usize;
    for c in 0..n_cells {
        let mut acc = 0.0;
        let mut ok = true;
        for (r, s) in reference.iter().zip(reconstructed.iter()) {
            let d = s[c] - r[c];
            if !d.is_finite() {
                ok = false;
                break;
            }
            acc += d * d;
        }
        if ok {
            let rmse = (acc / n_subjects).sqrt();
            per_cell.push(Some(rmse));
            sum += rmse;
            defined += 1;
        } else {
            per_cell.push(None);
        }
    }
    if defined == 0 {
        return Err(Error::InsufficientData(
            "no cell has finite values for all subjects".into(),
        ));
    }
    Ok((per_cell, sum / defined as f64))
}

// ---------------------------------------------------------------------------
// mesh I/O

/// Read a mesh, dispatching on the file extension (`.off` or `.vtk`).
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    read_mesh_with_warnings(path).map(|(m, _)| m)
}

/// As [`read_mesh`], also returning parse warnings (ignored VTK sections).
pub fn read_mesh_with_warnings(path: &Path) -> Result<(TriangleMesh, Vec<String>)> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("off") => read_off(path).map(|m| (m, Vec::new())),
        Some("vtk") => read_vtk_polydata(path),
        other => Err(Error::invalid_argument(format!(
            "unsupported mesh extension {other:?} for {}",
            path.display()
        ))),
    }
}

/// Write a mesh, dispatching on the file extension (`.off` or `.vtk`).
pub fn write_mesh(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("off") => write_off(mesh, path),
        Some("vtk") => write_vtk_polydata(mesh, path),
        other => Err(Error::invalid_argument(format!(
            "unsupported mesh extension {other:?} for {}",
            path.display()
        ))),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Read an OFF file: `OFF` header, counts line, vertex lines, `3 i j k`
/// face lines. `#` comments and blank lines are skipped.
pub fn read_off(path: &Path) -> Result<TriangleMesh> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (ln, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if header != "OFF" {
        return Err(parse_err(path, ln, format!("expected OFF header, got {header:?}")));
    }
    let (ln, counts) = lines
        .next()
        .ok_or_else(|| parse_err(path, ln, "missing counts line"))?;
    let nums: Vec<&str> = counts.split_whitespace().collect();
    if nums.len() < 2 {
        return Err(parse_err(path, ln, "counts line needs vertex and face counts"));
    }
    let nv: usize = nums[0]
        .parse()
        .map_err(|e| parse_err(path, ln, format!("bad vertex count: {e}")))?;
    let nf: usize = nums[1]
        .parse()
        .map_err(|e| parse_err(path, ln, format!("bad face count: {e}")))?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, "unexpected end of file in vertex list"))?;
        let coords: Vec<&str> = l.split_whitespace().collect();
        if coords.len() != 3 {
            return Err(parse_err(path, ln, "vertex line needs 3 coordinates"));
        }
        let mut p = [0.0; 3];
        for (v, c) in p.iter_mut().zip(&coords) {
            *v = c
                .parse::<f64>()
                .map_err(|e| parse_err(path, ln, format!("bad coordinate {c:?}: {e}")))?;
        }
        vertices.push(Point3::new(p[0], p[1], p[2]));
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, "unexpected end of file in face list"))?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 4 || f[0] != "3" {
            return Err(parse_err(path, ln, "face line must be `3 i j k`"));
        }
        let mut tri = [0usize; 3];
        for (v, c) in tri.iter_mut().zip(&f[1..]) {
            *v = c
                .parse::<usize>()
                .map_err(|e| parse_err(path, ln, format!("bad index {c:?}: {e}")))?;
        }
        triangles.push(tri);
    }
    TriangleMesh::new(LandmarkSet::new(vertices)?, triangles)
}

/// Write an OFF file; coordinates use the shortest exact decimal form, so a
/// round trip reproduces them bit for bit.
pub fn write_off(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "OFF");
    let _ = writeln!(out, "{} {} 0", mesh.n_vertices(), mesh.n_triangles());
    for p in mesh.vertices.iter() {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Read a legacy ASCII VTK polydata file (POINTS + POLYGONS sections).
/// Unknown trailing sections are skipped and reported as warnings.
pub fn read_vtk_polydata(path: &Path) -> Result<(TriangleMesh, Vec<String>)> {
    let content = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = content.lines().collect();
    let mut warnings = Vec::new();

    if lines.is_empty() || !lines[0].starts_with("# vtk DataFile") {
        return Err(parse_err(path, 1, "missing `# vtk DataFile` header"));
    }
    let ascii_line = lines
        .iter()
        .position(|l| l.trim() == "ASCII")
        .ok_or_else(|| parse_err(path, 1, "missing ASCII marker"))?;
    let dataset_line = lines
        .iter()
        .position(|l| l.trim().starts_with("DATASET"))
        .ok_or_else(|| parse_err(path, ascii_line + 1, "missing DATASET line"))?;
    if lines[dataset_line].trim() != "DATASET POLYDATA" {
        return Err(parse_err(
            path,
            dataset_line + 1,
            format!("expected DATASET POLYDATA, got {:?}", lines[dataset_line].trim()),
        ));
    }

    let points_line = lines
        .iter()
        .position(|l| l.trim_start().starts_with("POINTS"))
        .ok_or_else(|| parse_err(path, dataset_line + 1, "missing POINTS section"))?;
    let fields: Vec<&str> = lines[points_line].split_whitespace().collect();
    if fields.len() < 3 {
        return Err(parse_err(path, points_line + 1, "malformed POINTS line"));
    }
    let n_points: usize = fields[1]
        .parse()
        .map_err(|e| parse_err(path, points_line + 1, format!("bad point count: {e}")))?;

    // coordinates may wrap freely across lines
    let mut coords = Vec::with_capacity(3 * n_points);
    let mut cursor = points_line + 1;
    while coords.len() < 3 * n_points {
        if cursor >= lines.len() {
            return Err(parse_err(path, lines.len(), "unexpected end of file in POINTS"));
        }
        for tok in lines[cursor].split_whitespace() {
            let v = tok
                .parse::<f64>()
                .map_err(|e| parse_err(path, cursor + 1, format!("bad coordinate {tok:?}: {e}")))?;
            coords.push(v);
        }
        cursor += 1;
    }
    if coords.len() != 3 * n_points {
        return Err(parse_err(
            path,
            cursor,
            format!("expected {} coordinates, got {}", 3 * n_points, coords.len()),
        ));
    }
    let vertices: Vec<Point3> = coords
        .chunks_exact(3)
        .map(|c| Point3::new(c[0], c[1], c[2]))
        .collect();

    let polygons_line = lines[cursor..]
        .iter()
        .position(|l| l.trim_start().starts_with("POLYGONS"))
        .map(|off| cursor + off)
        .ok_or_else(|| parse_err(path, cursor, "missing POLYGONS section"))?;
    let fields: Vec<&str> = lines[polygons_line].split_whitespace().collect();
    if fields.len() < 3 {
        return Err(parse_err(path, polygons_line + 1, "malformed POLYGONS line"));
    }
    let n_polys: usize = fields[1]
        .parse()
        .map_err(|e| parse_err(path, polygons_line + 1, format!("bad polygon count: {e}")))?;

    let mut triangles = Vec::with_capacity(n_polys);
    let mut cursor = polygons_line + 1;
    while triangles.len() < n_polys {
        if cursor >= lines.len() {
            return Err(parse_err(path, lines.len(), "unexpected end of file in POLYGONS"));
        }
        let line = lines[cursor].trim();
        if !line.is_empty() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f[0] != "3" || f.len() != 4 {
                return Err(parse_err(
                    path,
                    cursor + 1,
                    "only triangle polygons (`3 i j k`) are supported",
                ));
            }
            let mut tri = [0usize; 3];
            for (v, c) in tri.iter_mut().zip(&f[1..]) {
                *v = c
                    .parse::<usize>()
                    .map_err(|e| parse_err(path, cursor + 1, format!("bad index {c:?}: {e}")))?;
            }
            triangles.push(tri);
        }
        cursor += 1;
    }

    for l in &lines[cursor..] {
        let t = l.trim();
        if !t.is_empty() {
            warnings.push(format!(
                "{}: ignoring trailing section starting with {:?}",
                path.display(),
                t.split_whitespace().next().unwrap_or("")
            ));
            break;
        }
    }

    let mesh = TriangleMesh::new(LandmarkSet::new(vertices)?, triangles)?;
    Ok((mesh, warnings))
}

/// Write a legacy ASCII VTK polydata file.
pub fn write_vtk_polydata(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# vtk DataFile Version 3.0");
    let _ = writeln!(out, "cardiotraj mesh");
    let _ = writeln!(out, "ASCII");
    let _ = writeln!(out, "DATASET POLYDATA");
    let _ = writeln!(out, "POINTS {} double", mesh.n_vertices());
    for p in mesh.vertices.iter() {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    let _ = writeln!(out, "POLYGONS {} {}", mesh.n_triangles(), 4 * mesh.n_triangles());
    for t in &mesh.triangles {
        let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// primitive meshes

/// Unit right tetrahedron with outward orientation; volume `1/6`.
pub fn unit_tetrahedron() -> TriangleMesh {
    let vertices = LandmarkSet::new(vec![
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
        Point3::new(0.0, 0.0, 1.0),
    ])
    .unwrap();
    let triangles = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
    TriangleMesh::new(vertices, triangles).unwrap()
}

/// Axis-aligned unit cube triangulated into 12 outward-oriented triangles.
pub fn unit_cube() -> TriangleMesh {
    let vertices = LandmarkSet::new(
        (0..8)
            .map(|i| {
                Point3::new(
                    (i & 1) as f64,
                    ((i >> 1) & 1) as f64,
                    ((i >> 2) & 1) as f64,
                )
            })
            .collect(),
    )
    .unwrap();
    let triangles = vec![
        [0, 2, 3],
        [0, 3, 1],
        [4, 5, 7],
        [4, 7, 6],
        [0, 1, 5],
        [0, 5, 4],
        [2, 6, 7],
        [2, 7, 3],
        [0, 4, 6],
        [0, 6, 2],
        [1, 3, 7],
        [1, 7, 5],
    ];
    TriangleMesh::new(vertices, triangles).unwrap()
}

/// Unit icosphere centered at the origin. Subdivision 0 is the icosahedron
/// (12 vertices); each level quadruples the face count (2 gives 162
/// vertices, 320 triangles).
pub fn icosphere(subdivisions: usize) -> TriangleMesh {
    let t = (1.0 + 5.0f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ];
    let mut vertices: Vec<Point3> = raw
        .iter()
        .map(|&(x, y, z)| {
            let v = Vec3::new(x, y, z).normalize();
            Point3::from(v)
        })
        .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mids = [0usize; 3];
            for e in 0..3 {
                let a = f[e];
                let b = f[(e + 1) % 3];
                let key = (a.min(b), a.max(b));
                mids[e] = *midpoint.entry(key).or_insert_with(|| {
                    let m = (vertices[a].coords + vertices[b].coords) / 2.0;
                    vertices.push(Point3::from(m.normalize()));
                    vertices.len() - 1
                });
            }
            next.push([f[0], mids[0], mids[2]]);
            next.push([f[1], mids[1], mids[0]]);
            next.push([f[2], mids[2], mids[1]]);
            next.push([mids[0], mids[1], mids[2]]);
        }
        faces = next;
    }

    TriangleMesh::new(LandmarkSet::new(vertices).unwrap(), faces).unwrap()
}
