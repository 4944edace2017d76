use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Point3;

use super::{Mesh, MeshError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Off,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "obj" => Some(Self::Obj),
            "off" => Some(Self::Off),
            _ => None,
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> MeshError {
    MeshError::Parse { line, message: message.into() }
}

fn parse_f64(tok: Option<&str>, line: usize) -> Result<f64, MeshError> {
    let tok = tok.ok_or_else(|| parse_err(line, "missing coordinate"))?;
    tok.parse::<f64>()
        .map_err(|_| parse_err(line, format!("invalid number `{tok}`")))
}

/// Reads an OBJ or OFF stream. Texture coordinates, normals and groups in
/// OBJ files are skipped; the result passes full validation.
pub fn load_mesh<R: BufRead>(source: R, format: MeshFormat) -> Result<Mesh, MeshError> {
    let mesh = match format {
        MeshFormat::Obj => read_obj(source)?,
        MeshFormat::Off => read_off(source)?,
    };
    mesh.validate()?;
    Ok(mesh)
}

pub fn load_mesh_file(path: &Path) -> Result<Mesh, MeshError> {
    let format = MeshFormat::from_path(path).ok_or_else(|| {
        parse_err(0, format!("unknown mesh extension for {}", path.display()))
    })?;
    load_mesh(BufReader::new(File::open(path)?), format)
}

fn read_obj<R: BufRead>(source: R) -> Result<Mesh, MeshError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let x = parse_f64(toks.next(), lineno)?;
                let y = parse_f64(toks.next(), lineno)?;
                let z = parse_f64(toks.next(), lineno)?;
                vertices.push(Point3::new(x, y, z));
            }
            Some("f") => {
                let refs: Vec<&str> = toks.collect();
                if refs.len() != 3 {
                    return Err(MeshError::NonTriangular { line: lineno, count: refs.len() });
                }
                let mut face = [0usize; 3];
                for (slot, r) in face.iter_mut().zip(&refs) {
                    let head = r.split('/').next().unwrap_or("");
                    let idx: i64 = head
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("invalid face index `{r}`")))?;
                    // 1-based, negative values count back from the latest vertex
                    let resolved = if idx > 0 {
                        idx - 1
                    } else if idx < 0 {
                        vertices.len() as i64 + idx
                    } else {
                        return Err(parse_err(lineno, "face index 0 is not valid in OBJ"));
                    };
                    if resolved < 0 {
                        return Err(parse_err(lineno, format!("face index `{r}` out of range")));
                    }
                    *slot = resolved as usize;
                }
                faces.push(face);
            }
            _ => {}
        }
    }
    Mesh::new(vertices, faces)
}

fn read_off<R: BufRead>(source: R) -> Result<Mesh, MeshError> {
    // OFF is whitespace separated after the header, comments start with '#'
    let mut tokens: Vec<(usize, String)> = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(|t| (i + 1, t.to_string())));
    }
    let mut it = tokens.into_iter();
    let (hline, header) = it.next().ok_or_else(|| parse_err(1, "empty OFF file"))?;
    if header != "OFF" {
        return Err(parse_err(hline, format!("expected `OFF` header, found `{header}`")));
    }
    let mut next_usize = |what: &str| -> Result<(usize, usize), MeshError> {
        let (line, tok) = it
            .next()
            .ok_or_else(|| parse_err(0, format!("unexpected end of file reading {what}")))?;
        tok.parse::<usize>()
            .map(|v| (line, v))
            .map_err(|_| parse_err(line, format!("invalid {what} `{tok}`")))
    };
    let (_, nv) = next_usize("vertex count")?;
    let (_, nf) = next_usize("face count")?;
    let (_, _ne) = next_usize("edge count")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut c = [0.0; 3];
        for slot in &mut c {
            let (line, tok) = it
                .next()
                .ok_or_else(|| parse_err(0, "unexpected end of file in vertex list"))?;
            *slot = tok
                .parse()
                .map_err(|_| parse_err(line, format!("invalid number `{tok}`")))?;
        }
        vertices.push(Point3::from(c));
    }
    let mut faces = Vec::with_capacity(nf);
    let mut it = it.peekable();
    for _ in 0..nf {
        let (line, tok) = it
            .next()
            .ok_or_else(|| parse_err(0, "unexpected end of file in face list"))?;
        let count: usize = tok
            .parse()
            .map_err(|_| parse_err(line, format!("invalid vertex count `{tok}`")))?;
        if count != 3 {
            return Err(MeshError::NonTriangular { line, count });
        }
        let mut face = [0usize; 3];
        for slot in &mut face {
            let (l, t) = it
                .next()
                .ok_or_else(|| parse_err(line, "truncated face"))?;
            *slot = t.parse().map_err(|_| parse_err(l, format!("invalid face index `{t}`")))?;
        }
        // optional per-face colour values trail on the same line
        while it.peek().is_some_and(|(l, _)| *l == line) {
            it.next();
        }
        faces.push(face);
    }
    Mesh::new(vertices, faces)
}

/// Writes the mesh with six decimal places per coordinate.
pub fn save_mesh<W: Write>(mesh: &Mesh, format: MeshFormat, mut out: W) -> Result<(), MeshError> {
    match format {
        MeshFormat::Obj => {
            for p in &mesh.vertices {
                writeln!(out, "v {:.6} {:.6} {:.6}", p.x, p.y, p.z)?;
            }
            for f in &mesh.faces {
                writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
            }
        }
        MeshFormat::Off => {
            writeln!(out, "OFF")?;
            writeln!(out, "{} {} 0", mesh.num_vertices(), mesh.num_faces())?;
            for p in &mesh.vertices {
                writeln!(out, "{:.6} {:.6} {:.6}", p.x, p.y, p.z)?;
            }
            for f in &mesh.faces {
                writeln!(out, "3 {} {} {}", f[0], f[1], f[2])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_mesh_file(mesh: &Mesh, path: &Path) -> Result<(), MeshError> {
    let format = MeshFormat::from_path(path).unwrap_or(MeshFormat::Obj);
    save_mesh(mesh, format, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;

    const TETRA_OFF: &str = "OFF\n# tetrahedron\n4 4 6\n1 1 1\n1 -1 -1\n-1 1 -1\n-1 -1 1\n3 0 1 2\n3 0 3 1\n3 0 2 3\n3 1 3 2\n";

    fn roundtrip(m: &Mesh, format: MeshFormat) -> Mesh {
        let mut buf = Vec::new();
        save_mesh(m, format, &mut buf).unwrap();
        read(&buf, format).unwrap()
    }

    fn read(bytes: &[u8], format: MeshFormat) -> Result<Mesh, MeshError> {
        load_mesh(bytes, format)
    }

    #[test]
    fn loads_tetrahedron_off() {
        let m = read(TETRA_OFF.as_bytes(), MeshFormat::Off).unwrap();
        assert_eq!((m.num_vertices(), m.num_faces()), (4, 4));
        assert_eq!(m, tetrahedron());
    }

    #[test]
    fn rejects_quads() {
        let src = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        assert!(matches!(read(src.as_bytes(), MeshFormat::Obj), Err(MeshError::NonTriangular { line: 5, count: 4 })));
        let off = "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        assert!(matches!(read(off.as_bytes(), MeshFormat::Off), Err(MeshError::NonTriangular { count: 4, .. })));
    }

    #[test]
    fn obj_skips_attributes_and_slashes() {
        let src = "# c\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nvt 0 0\ng x\nf 1/1/1 2//1 -1\n";
        let m = read(src.as_bytes(), MeshFormat::Obj).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn malformed_lines_report_position() {
        let src = "v 0 0 0\nv 1 zero 0\n";
        assert!(matches!(read(src.as_bytes(), MeshFormat::Obj), Err(MeshError::Parse { line: 2, .. })));
        let src = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n";
        assert!(matches!(read(src.as_bytes(), MeshFormat::Obj), Err(MeshError::IndexOutOfRange { index: 8, .. })));
        assert!(read(b"PLY\n", MeshFormat::Off).is_err());
    }

    #[test]
    fn roundtrips() {
        let t = tetrahedron();
        assert_eq!(roundtrip(&t, MeshFormat::Off), t);
        let c = roundtrip(&cube(), MeshFormat::Obj);
        assert_eq!(c.num_faces(), 12);
        assert_eq!(c.faces, cube().faces);
    }

    #[test]
    fn empty_mesh_writes_no_faces() {
        let mut buf = Vec::new();
        save_mesh(&Mesh::empty(), MeshFormat::Off, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "OFF\n0 0 0\n");
        assert_eq!(read(&buf, MeshFormat::Off).unwrap().num_faces(), 0);
    }
}
