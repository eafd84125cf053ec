//! Binary little-endian PLY for meshes and point clouds.
//!
//! Writers always emit `binary_little_endian 1.0` with `double` coordinates so
//! f64 data survives a round trip bit for bit. The reader also accepts ASCII
//! files and the usual scalar types.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{TriMesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn read_bin(self, r: &mut impl Read) -> std::io::Result<f64> {
        let mut b = [0u8; 8];
        Ok(match self {
            Scalar::I8 => {
                r.read_exact(&mut b[..1])?;
                b[0] as i8 as f64
            }
            Scalar::U8 => {
                r.read_exact(&mut b[..1])?;
                b[0] as f64
            }
            Scalar::I16 => {
                r.read_exact(&mut b[..2])?;
                i16::from_le_bytes([b[0], b[1]]) as f64
            }
            Scalar::U16 => {
                r.read_exact(&mut b[..2])?;
                u16::from_le_bytes([b[0], b[1]]) as f64
            }
            Scalar::I32 => {
                r.read_exact(&mut b[..4])?;
                i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
            }
            Scalar::U32 => {
                r.read_exact(&mut b[..4])?;
                u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
            }
            Scalar::F32 => {
                r.read_exact(&mut b[..4])?;
                f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
            }
            Scalar::F64 => {
                r.read_exact(&mut b)?;
                f64::from_le_bytes(b)
            }
        })
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, PartialEq)]
enum Format {
    Ascii,
    BinaryLe,
}

fn read_header(r: &mut impl BufRead, what: &str) -> Result<(Format, Vec<Element>)> {
    let perr = |m: &str| Error::parse(what, m);
    let mut line = String::new();
    let mut next = |r: &mut dyn BufRead| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| Error::parse(what, e.to_string()))?;
        if n == 0 {
            return Err(Error::parse(what, "unexpected end of header"));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };
    if next(r)? != "ply" {
        return Err(perr("missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = next(r)?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.first().copied() {
            Some("format") => {
                format = Some(match toks.get(1).copied() {
                    Some("binary_little_endian") => Format::BinaryLe,
                    Some("ascii") => Format::Ascii,
                    Some(other) => return Err(perr(&format!("unsupported format '{other}'"))),
                    None => return Err(perr("format line without a format")),
                });
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                if toks.len() != 3 {
                    return Err(perr("malformed element line"));
                }
                let count = toks[2]
                    .parse()
                    .map_err(|_| perr("element count is not an integer"))?;
                elements.push(Element {
                    name: toks[1].to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| perr("property before any element"))?;
                if toks.get(1) == Some(&"list") {
                    if toks.len() != 5 {
                        return Err(perr("malformed list property"));
                    }
                    let count = Scalar::parse(toks[2]).ok_or_else(|| perr("bad list count type"))?;
                    let item = Scalar::parse(toks[3]).ok_or_else(|| perr("bad list item type"))?;
                    el.props.push(Property::List {
                        name: toks[4].to_string(),
                        count,
                        item,
                    });
                } else {
                    if toks.len() != 3 {
                        return Err(perr("malformed property line"));
                    }
                    let ty = Scalar::parse(toks[1]).ok_or_else(|| perr("bad property type"))?;
                    el.props.push(Property::Scalar {
                        name: toks[2].to_string(),
                        ty,
                    });
                }
            }
            Some("end_header") => break,
            _ => return Err(perr(&format!("unexpected header line '{l}'"))),
        }
    }
    let format = format.ok_or_else(|| perr("missing format line"))?;
    Ok((format, elements))
}

/// Reads a PLY file into a [`TriMesh`]; point clouds come back with no faces.
pub fn read_ply(path: &Path) -> Result<TriMesh> {
    let f = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingAsset(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut r = BufReader::new(f);
    read_ply_from(&mut r, &path.display().to_string())
}

pub fn read_ply_from(r: &mut impl BufRead, what: &str) -> Result<TriMesh> {
    let (format, elements) = read_header(r, what)?;
    let mut mesh = TriMesh::default();
    let mut ascii_tokens: Vec<String> = Vec::new();
    let mut tok_pos = 0usize;
    if format == Format::Ascii {
        let mut rest = String::new();
        r.read_to_string(&mut rest)
            .map_err(|e| Error::parse(what, e.to_string()))?;
        ascii_tokens = rest.split_whitespace().map(str::to_string).collect();
    }
    let mut read_scalar = |r: &mut dyn BufRead, ty: Scalar| -> Result<f64> {
        match format {
            Format::BinaryLe => ty
                .read_bin(&mut &mut *r)
                .map_err(|e| Error::parse(what, format!("truncated body: {e}"))),
            Format::Ascii => {
                let t = ascii_tokens
                    .get(tok_pos)
                    .ok_or_else(|| Error::parse(what, "truncated ascii body"))?;
                tok_pos += 1;
                t.parse::<f64>()
                    .map_err(|_| Error::parse(what, format!("bad number '{t}'")))
            }
        }
    };
    for el in &elements {
        let mut vals = vec![0.0f64; el.props.len()];
        let find = |n: &str| {
            el.props.iter().position(|p| matches!(p, Property::Scalar { name, .. } if name == n))
        };
        let (ix, iy, iz) = (find("x"), find("y"), find("z"));
        let (inx, iny, inz) = (find("nx"), find("ny"), find("nz"));
        let (ir, ig, ib) = (find("red"), find("green"), find("blue"));
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        if is_vertex && (ix.is_none() || iy.is_none() || iz.is_none()) {
            return Err(Error::parse(what, "vertex element lacks x/y/z"));
        }
        let has_n = inx.is_some() && iny.is_some() && inz.is_some();
        let has_c = ir.is_some() && ig.is_some() && ib.is_some();
        for _ in 0..el.count {
            let mut face: Option<Vec<u32>> = None;
            for (pi, p) in el.props.iter().enumerate() {
                match p {
                    Property::Scalar { ty, .. } => vals[pi] = read_scalar(r, *ty)?,
                    Property::List { name, count, item } => {
                        let n = read_scalar(r, *count)? as usize;
                        let mut items = Vec::with_capacity(n);
                        for _ in 0..n {
                            items.push(read_scalar(r, *item)?);
                        }
                        if is_face && (name == "vertex_indices" || name == "vertex_index") {
                            face = Some(items.into_iter().map(|v| v as u32).collect());
                        }
                    }
                }
            }
            if is_vertex {
                mesh.vertices
                    .push(Vec3::new(vals[ix.unwrap()], vals[iy.unwrap()], vals[iz.unwrap()]));
                if has_n {
                    mesh.normals.push(Vec3::new(
                        vals[inx.unwrap()],
                        vals[iny.unwrap()],
                        vals[inz.unwrap()],
                    ));
                }
                if has_c {
                    mesh.colors.push([
                        vals[ir.unwrap()] as u8,
                        vals[ig.unwrap()] as u8,
                        vals[ib.unwrap()] as u8,
                    ]);
                }
            } else if let Some(idx) = face {
                // Fan-triangulate polygons.
                for k in 1..idx.len().saturating_sub(1) {
                    mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
        }
    }
    let nv = mesh.vertices.len() as u32;
    if mesh.faces.iter().flatten().any(|&i| i >= nv) {
        return Err(Error::parse(what, "face index out of range"));
    }
    Ok(mesh)
}

/// Serializes a mesh (or, with no faces and `with_faces = false`, a point cloud).
pub fn write_ply_to(w: &mut impl Write, mesh: &TriMesh, with_faces: bool) -> std::io::Result<()> {
    let has_n = !mesh.normals.is_empty() && mesh.normals.len() == mesh.vertices.len();
    let has_c = !mesh.colors.is_empty() && mesh.colors.len() == mesh.vertices.len();
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    h += &format!("element vertex {}\n", mesh.vertices.len());
    h += "property double x\nproperty double y\nproperty double z\n";
    if has_n {
        h += "property double nx\nproperty double ny\nproperty double nz\n";
    }
    if has_c {
        h += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    }
    if with_faces {
        h += &format!("element face {}\n", mesh.faces.len());
        h += "property list uchar int vertex_indices\n";
    }
    h += "end_header\n";
    w.write_all(h.as_bytes())?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in v.iter() {
            w.write_all(&c.to_le_bytes())?;
        }
        if has_n {
            for c in mesh.normals[i].iter() {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        if has_c {
            w.write_all(&mesh.colors[i])?;
        }
    }
    if with_faces {
        for f in &mesh.faces {
            w.write_all(&[3u8])?;
            for &i in f {
                w.write_all(&(i as i32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, mesh: &TriMesh, with_faces: bool) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_ply_to(&mut w, mesh, with_faces).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a triangle mesh as binary PLY.
pub fn save_mesh(mesh: &TriMesh, path: &Path) -> Result<()> {
    write_file(path, mesh, true)
}

/// Writes a point set (positions plus optional normals/colors) as binary PLY.
pub fn save_pointcloud(points: &TriMesh, path: &Path) -> Result<()> {
    write_file(path, points, false)
}
