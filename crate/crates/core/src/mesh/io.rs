use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use super::{Mesh, MeshError};
use crate::scalar::Real;

/// Input formats understood by [`load_mesh`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    /// `.node` + `.ele` pair sharing a stem.
    TetPair,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "obj" => Some(Self::Obj),
            "node" | "ele" => Some(Self::TetPair),
            "ply" => Some(Self::Ply),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFormat {
    Obj,
    Ply,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Obj => "obj",
            Self::Ply => "ply",
        }
    }
}

pub fn load_mesh<T: Real>(path: &Path, format: MeshFormat) -> Result<Mesh<T>, MeshError> {
    match format {
        MeshFormat::Obj => {
            let text = read(path)?;
            let (v, f) = parse_obj(path, &text)?;
            Mesh::new(v, vec![], f)
        }
        MeshFormat::TetPair => {
            let node = path.with_extension("node");
            let ele = path.with_extension("ele");
            let (v, base) = parse_node(&node, &read(&node)?)?;
            let t = parse_ele(&ele, &read(&ele)?, base)?;
            Mesh::new(v, t, vec![])
        }
        MeshFormat::Ply => {
            let text = read(path)?;
            let (v, f) = parse_ply(path, &text)?;
            Mesh::new(v, vec![], f)
        }
    }
}

/// Writes `positions` with the mesh's surface connectivity. Output bytes are a
/// pure function of the inputs.
pub fn export_frame<T: Real>(
    mesh: &Mesh<T>,
    positions: &DMatrix<T>,
    path: &Path,
    format: FrameFormat,
) -> Result<(), MeshError> {
    if positions.nrows() != mesh.num_vertices() || positions.ncols() != 3 {
        return Err(MeshError::RowMismatch {
            expected: mesh.num_vertices(),
            got: positions.nrows(),
        });
    }
    let io_err = |source| MeshError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let n = positions.nrows();
    match format {
        FrameFormat::Obj => {
            for i in 0..n {
                writeln!(
                    w,
                    "v {} {} {}",
                    positions[(i, 0)].to_f64_lossy(),
                    positions[(i, 1)].to_f64_lossy(),
                    positions[(i, 2)].to_f64_lossy()
                )
                .map_err(io_err)?;
            }
            for f in mesh.faces() {
                writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).map_err(io_err)?;
            }
        }
        FrameFormat::Ply => {
            write!(
                w,
                "ply\nformat ascii 1.0\nelement vertex {n}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
                mesh.faces().len()
            )
            .map_err(io_err)?;
            for i in 0..n {
                writeln!(
                    w,
                    "{} {} {}",
                    positions[(i, 0)].to_f64_lossy(),
                    positions[(i, 1)].to_f64_lossy(),
                    positions[(i, 2)].to_f64_lossy()
                )
                .map_err(io_err)?;
            }
            for f in mesh.faces() {
                writeln!(w, "3 {} {} {}", f[0], f[1], f[2]).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

/// Writes `<stem>.node` and `<stem>.ele` with 1-based indices.
pub fn save_tet_pair<T: Real>(mesh: &Mesh<T>, stem: &Path) -> Result<(), MeshError> {
    let node = stem.with_extension("node");
    let ele = stem.with_extension("ele");
    let mut s = format!("{} 3 0 0\n", mesh.num_vertices());
    for i in 0..mesh.num_vertices() {
        let p = mesh.vertex(i);
        s.push_str(&format!(
            "{} {} {} {}\n",
            i + 1,
            p.x.to_f64_lossy(),
            p.y.to_f64_lossy(),
            p.z.to_f64_lossy()
        ));
    }
    fs::write(&node, s).map_err(|source| MeshError::Io { path: node, source })?;
    let mut s = format!("{} 4 0\n", mesh.tets().len());
    for (i, t) in mesh.tets().iter().enumerate() {
        s.push_str(&format!(
            "{} {} {} {} {}\n",
            i + 1,
            t[0] + 1,
            t[1] + 1,
            t[2] + 1,
            t[3] + 1
        ));
    }
    fs::write(&ele, s).map_err(|source| MeshError::Io { path: ele, source })
}

fn read(path: &Path) -> Result<String, MeshError> {
    fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> MeshError {
    MeshError::Parse {
        path: PathBuf::from(path),
        line,
        message: message.into(),
    }
}

fn parse_num<T: Real>(path: &Path, line: usize, tok: Option<&str>) -> Result<T, MeshError> {
    let tok = tok.ok_or_else(|| parse_err(path, line, "missing coordinate"))?;
    tok.parse::<f64>()
        .map(T::lit)
        .map_err(|_| parse_err(path, line, format!("bad number `{tok}`")))
}

fn parse_index(path: &Path, line: usize, tok: Option<&str>) -> Result<i64, MeshError> {
    let tok = tok.ok_or_else(|| parse_err(path, line, "missing index"))?;
    tok.parse::<i64>()
        .map_err(|_| parse_err(path, line, format!("bad index `{tok}`")))
}

fn to_matrix<T: Real>(rows: Vec<[T; 3]>) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), 3, |r, c| rows[r][c])
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_obj<T: Real>(
    path: &Path,
    text: &str,
) -> Result<(DMatrix<T>, Vec<[usize; 3]>), MeshError> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in content_lines(text) {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let x = parse_num(path, ln, tok.next())?;
                let y = parse_num(path, ln, tok.next())?;
                let z = parse_num(path, ln, tok.next())?;
                verts.push([x, y, z]);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for t in tok {
                    let i = parse_index(path, ln, t.split('/').next())?;
                    // OBJ allows negative indices relative to the current vertex count
                    let resolved = if i > 0 {
                        i - 1
                    } else if i < 0 {
                        verts.len() as i64 + i
                    } else {
                        return Err(parse_err(path, ln, "OBJ indices are 1-based"));
                    };
                    if resolved < 0 {
                        return Err(parse_err(path, ln, format!("index {i} out of range")));
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() < 3 {
                    return Err(parse_err(path, ln, "face needs at least 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok((to_matrix(verts), faces))
}

/// Returns positions and the index base (0 or 1) used by the file.
fn parse_node<T: Real>(path: &Path, text: &str) -> Result<(DMatrix<T>, i64), MeshError> {
    let mut lines = content_lines(text);
    let (hl, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty .node file"))?;
    let mut h = header.split_whitespace();
    let n = parse_index(path, hl, h.next())?;
    let dim = parse_index(path, hl, h.next())?;
    if dim != 3 || n < 0 {
        return Err(parse_err(path, hl, "expected header `n 3 attrs markers`"));
    }
    let mut verts = Vec::with_capacity(n as usize);
    let mut base = 1;
    for (k, (ln, line)) in lines.by_ref().take(n as usize).enumerate() {
        let mut tok = line.split_whitespace();
        let idx = parse_index(path, ln, tok.next())?;
        if k == 0 {
            // TetGen permits 0-based numbering, signalled by the first index
            base = if idx == 0 { 0 } else { 1 };
        }
        if idx != k as i64 + base {
            return Err(parse_err(path, ln, format!("expected node index {}", k as i64 + base)));
        }
        let x = parse_num(path, ln, tok.next())?;
        let y = parse_num(path, ln, tok.next())?;
        let z = parse_num(path, ln, tok.next())?;
        verts.push([x, y, z]);
    }
    if verts.len() != n as usize {
        return Err(parse_err(path, hl, format!("header declares {n} nodes, found {}", verts.len())));
    }
    Ok((to_matrix(verts), base))
}

fn parse_ele(path: &Path, text: &str, base: i64) -> Result<Vec<[usize; 4]>, MeshError> {
    let mut lines = content_lines(text);
    let (hl, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty .ele file"))?;
    let mut h = header.split_whitespace();
    let m = parse_index(path, hl, h.next())?;
    let per = parse_index(path, hl, h.next())?;
    if per != 4 || m < 0 {
        return Err(parse_err(path, hl, "expected header `m 4 attrs` (linear tets only)"));
    }
    let mut tets = Vec::with_capacity(m as usize);
    for (ln, line) in lines.take(m as usize) {
        let mut tok = line.split_whitespace();
        parse_index(path, ln, tok.next())?;
        let mut t = [0usize; 4];
        for slot in &mut t {
            let i = parse_index(path, ln, tok.next())? - base;
            if i < 0 {
                return Err(parse_err(path, ln, "negative vertex index"));
            }
            *slot = i as usize;
        }
        tets.push(t);
    }
    if tets.len() != m as usize {
        return Err(parse_err(path, hl, format!("header declares {m} elements, found {}", tets.len())));
    }
    Ok(tets)
}

fn parse_ply<T: Real>(
    path: &Path,
    text: &str,
) -> Result<(DMatrix<T>, Vec<[usize; 3]>), MeshError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "missing `ply` magic")),
    }
    let mut n_vert = 0usize;
    let mut n_face = 0usize;
    let mut vert_props: Vec<String> = Vec::new();
    let mut current = "";
    for (ln, line) in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(parse_err(path, ln, "only ASCII PLY is supported"))
            }
            ["element", "vertex", k] => {
                n_vert = k.parse().map_err(|_| parse_err(path, ln, "bad vertex count"))?;
                current = "vertex";
            }
            ["element", "face", k] => {
                n_face = k.parse().map_err(|_| parse_err(path, ln, "bad face count"))?;
                current = "face";
            }
            ["element", ..] => current = "other",
            ["property", .., name] if current == "vertex" => vert_props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let col = |name: &str| vert_props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(parse_err(path, 1, "vertex element lacks x/y/z")),
    };
    let mut body = lines.filter(|(_, l)| !l.is_empty());
    let mut verts = Vec::with_capacity(n_vert);
    for _ in 0..n_vert {
        let (ln, line) = body
            .next()
            .ok_or_else(|| parse_err(path, 0, "truncated vertex list"))?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        verts.push([
            parse_num(path, ln, tok.get(ix).copied())?,
            parse_num(path, ln, tok.get(iy).copied())?,
            parse_num(path, ln, tok.get(iz).copied())?,
        ]);
    }
    let mut faces = Vec::with_capacity(n_face);
    for _ in 0..n_face {
        let (ln, line) = body
            .next()
            .ok_or_else(|| parse_err(path, 0, "truncated face list"))?;
        let mut tok = line.split_whitespace();
        let k = parse_index(path, ln, tok.next())?;
        let idx = (0..k)
            .map(|_| parse_index(path, ln, tok.next()).map(|i| i as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if idx.len() < 3 {
            return Err(parse_err(path, ln, "face needs at least 3 vertices"));
        }
        for j in 1..idx.len() - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok((to_matrix(verts), faces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{two_tets, MeshError};

    #[test]
    fn minimal_obj() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tri.obj");
        fs::write(&p, "# tri\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        let m: Mesh<f64> = load_mesh(&p, MeshFormat::Obj).unwrap();
        assert_eq!(m.num_vertices(), 3);
        assert_eq!(m.faces().len(), 1);
        assert_eq!(m.edges().len(), 3);
    }

    #[test]
    fn obj_parse_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.obj");
        fs::write(&p, "v 0 0 0\nv 1 zero 0\n").unwrap();
        let err = load_mesh::<f64>(&p, MeshFormat::Obj).unwrap_err();
        assert!(matches!(err, MeshError::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains(":2:"));
    }

    #[test]
    fn single_tet_pair() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("tet");
        fs::write(stem.with_extension("node"), "4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n").unwrap();
        fs::write(stem.with_extension("ele"), "1 4 0\n1 1 2 3 4\n").unwrap();
        let m: Mesh<f64> = load_mesh(&stem.with_extension("node"), MeshFormat::TetPair).unwrap();
        assert_eq!(m.num_vertices(), 4);
        assert_eq!(m.tets().len(), 1);
        assert_eq!(m.edges().len(), 6);
    }

    #[test]
    fn tet_pair_out_of_range_index() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("tet");
        fs::write(stem.with_extension("node"), "4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n").unwrap();
        fs::write(stem.with_extension("ele"), "1 4 0\n1 1 2 3 10\n").unwrap();
        let err = load_mesh::<f64>(&stem, MeshFormat::TetPair).unwrap_err();
        assert!(matches!(err, MeshError::IndexOutOfRange { index: 9, .. }), "{err}");
    }

    #[test]
    fn export_roundtrip_obj_and_ply() {
        let dir = tempfile::tempdir().unwrap();
        let m = two_tets::<f64>();
        let mut q = m.vertices().clone();
        q[(2, 1)] += 0.123456789;
        for fmt in [FrameFormat::Obj, FrameFormat::Ply] {
            let p = dir.path().join(format!("f.{}", fmt.extension()));
            export_frame(&m, &q, &p, fmt).unwrap();
            let back: Mesh<f64> = load_mesh(&p, MeshFormat::from_path(&p).unwrap()).unwrap();
            assert_eq!(back.vertices(), &q);
            assert_eq!(back.faces(), m.faces());
        }
    }

    #[test]
    fn export_rest_equals_identity_export() {
        let dir = tempfile::tempdir().unwrap();
        let m = two_tets::<f64>();
        let a = dir.path().join("a.obj");
        let b = dir.path().join("b.obj");
        export_frame(&m, m.vertices(), &a, FrameFormat::Obj).unwrap();
        export_frame(&m, &m.vertices().clone(), &b, FrameFormat::Obj).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn export_rejects_row_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let m = two_tets::<f64>();
        let q = DMatrix::zeros(3, 3);
        let err = export_frame(&m, &q, &dir.path().join("x.obj"), FrameFormat::Obj).unwrap_err();
        assert!(matches!(err, MeshError::RowMismatch { expected: 5, got: 3 }));
    }

    #[test]
    fn tet_pair_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = two_tets::<f64>();
        let stem = dir.path().join("two");
        save_tet_pair(&m, &stem).unwrap();
        let back: Mesh<f64> = load_mesh(&stem, MeshFormat::TetPair).unwrap();
        assert_eq!(back, m);
    }
}
