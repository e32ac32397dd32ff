//! OBJ and PLY readers plus the writers for clouds, regions and marker
//! meshes. PLY input accepts ascii and binary little-endian; output is ascii
//! so artifacts stay diffable.

use super::{GeometryError, Mesh, PointCloud, TargetRegion};
use byteorder::{LittleEndian, ReadBytesExt};
use nalgebra::Vector3;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

/// Loads a mesh from `.obj` or `.ply` (chosen by extension).
pub fn load_mesh(path: &Path) -> Result<Mesh, GeometryError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("obj") => load_obj(path),
        Some("ply") => load_ply_mesh(path),
        other => Err(GeometryError::Parse(format!(
            "unsupported mesh extension {other:?} (want obj or ply)"
        ))),
    }
}

fn load_obj(path: &Path) -> Result<Mesh, GeometryError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut p = [0.0f64; 3];
                for x in &mut p {
                    *x = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad_line("obj vertex", lineno, &line))?;
                }
                vertices.push(Vector3::new(p[0], p[1], p[2]));
            }
            Some("f") => {
                let idx: Result<Vec<u32>, _> = it
                    .map(|tok| {
                        let v = tok.split('/').next().unwrap_or("");
                        v.parse::<i64>()
                            .ok()
                            .and_then(|i| obj_index(i, vertices.len()))
                            .ok_or_else(|| bad_line("obj face", lineno, &line))
                    })
                    .collect();
                let idx = idx?;
                if idx.len() < 3 {
                    return Err(bad_line("obj face", lineno, &line));
                }
                for i in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[i], idx[i + 1]]);
                }
            }
            _ => {}
        }
    }
    Mesh::new(vertices, triangles)
}

fn obj_index(i: i64, n_vertices: usize) -> Option<u32> {
    if i > 0 {
        Some((i - 1) as u32)
    } else if i < 0 {
        let j = n_vertices as i64 + i;
        (j >= 0).then_some(j as u32)
    } else {
        None
    }
}

fn bad_line(what: &str, lineno: usize, line: &str) -> GeometryError {
    GeometryError::Parse(format!("{what} at line {}: {line:?}", lineno + 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    F32,
    F64,
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            _ => return None,
        })
    }

    fn read_binary<R: Read>(&self, r: &mut R) -> std::io::Result<f64> {
        Ok(match self {
            ScalarType::F32 => r.read_f32::<LittleEndian>()? as f64,
            ScalarType::F64 => r.read_f64::<LittleEndian>()?,
            ScalarType::I8 => r.read_i8()? as f64,
            ScalarType::U8 => r.read_u8()? as f64,
            ScalarType::I16 => r.read_i16::<LittleEndian>()? as f64,
            ScalarType::U16 => r.read_u16::<LittleEndian>()? as f64,
            ScalarType::I32 => r.read_i32::<LittleEndian>()? as f64,
            ScalarType::U32 => r.read_u32::<LittleEndian>()? as f64,
        })
    }
}

#[derive(Debug, Clone)]
enum PlyProperty {
    Scalar(ScalarType, String),
    List(ScalarType, ScalarType, String),
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
}

struct PlyData {
    /// Scalar property rows per element, lists flattened separately.
    elements: Vec<(PlyElement, Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)>,
}

fn parse_ply(path: &Path) -> Result<PlyData, GeometryError> {
    let bytes = std::fs::read(path)?;
    let header_end = find_header_end(&bytes)
        .ok_or_else(|| GeometryError::Parse("ply: missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| GeometryError::Parse("ply: header not utf-8".into()))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(GeometryError::Parse("ply: missing magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for line in lines {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("format") => {
                format = match it.next() {
                    Some("ascii") => Some(PlyFormat::Ascii),
                    Some("binary_little_endian") => Some(PlyFormat::BinaryLe),
                    other => {
                        return Err(GeometryError::Parse(format!(
                            "ply: unsupported format {other:?}"
                        )))
                    }
                };
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = it
                    .next()
                    .ok_or_else(|| GeometryError::Parse("ply: element name".into()))?;
                let count: usize = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| GeometryError::Parse("ply: element count".into()))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| GeometryError::Parse("ply: property before element".into()))?;
                let kind = it
                    .next()
                    .ok_or_else(|| GeometryError::Parse("ply: property type".into()))?;
                if kind == "list" {
                    let count_ty = it.next().and_then(ScalarType::parse);
                    let item_ty = it.next().and_then(ScalarType::parse);
                    let name = it.next();
                    match (count_ty, item_ty, name) {
                        (Some(c), Some(i), Some(n)) => {
                            elem.properties.push(PlyProperty::List(c, i, n.to_string()))
                        }
                        _ => return Err(GeometryError::Parse("ply: bad list property".into())),
                    }
                } else {
                    let ty = ScalarType::parse(kind)
                        .ok_or_else(|| GeometryError::Parse(format!("ply: bad type {kind}")))?;
                    let name = it
                        .next()
                        .ok_or_else(|| GeometryError::Parse("ply: property name".into()))?;
                    elem.properties.push(PlyProperty::Scalar(ty, name.to_string()));
                }
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(GeometryError::Parse(format!(
                    "ply: unknown header keyword {other}"
                )))
            }
            None => {}
        }
    }
    let format = format.ok_or_else(|| GeometryError::Parse("ply: missing format line".into()))?;

    let body = &bytes[header_end..];
    let mut out = Vec::new();
    match format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body)
                .map_err(|_| GeometryError::Parse("ply: ascii body not utf-8".into()))?;
            let mut tokens = text.split_whitespace();
            let mut next_f64 = |what: &str| -> Result<f64, GeometryError> {
                tokens
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| GeometryError::Parse(format!("ply: expected {what}")))
            };
            for elem in elements {
                let mut rows = Vec::with_capacity(elem.count);
                let mut lists = Vec::with_capacity(elem.count);
                for _ in 0..elem.count {
                    let mut row = Vec::new();
                    let mut row_lists = Vec::new();
                    for p in &elem.properties {
                        match p {
                            PlyProperty::Scalar(_, name) => row.push(next_f64(name)?),
                            PlyProperty::List(_, _, name) => {
                                let n = next_f64(name)? as usize;
                                let mut items = Vec::with_capacity(n);
                                for _ in 0..n {
                                    items.push(next_f64(name)?);
                                }
                                row_lists.push(items);
                            }
                        }
                    }
                    rows.push(row);
                    lists.push(row_lists);
                }
                out.push((elem, rows, lists));
            }
        }
        PlyFormat::BinaryLe => {
            let mut cur = std::io::Cursor::new(body);
            for elem in elements {
                let mut rows = Vec::with_capacity(elem.count);
                let mut lists = Vec::with_capacity(elem.count);
                for _ in 0..elem.count {
                    let mut row = Vec::new();
                    let mut row_lists = Vec::new();
                    for p in &elem.properties {
                        match p {
                            PlyProperty::Scalar(ty, _) => row.push(
                                ty.read_binary(&mut cur)
                                    .map_err(|e| GeometryError::Parse(format!("ply body: {e}")))?,
                            ),
                            PlyProperty::List(cty, ity, _) => {
                                let n = cty
                                    .read_binary(&mut cur)
                                    .map_err(|e| GeometryError::Parse(format!("ply body: {e}")))?
                                    as usize;
                                let mut items = Vec::with_capacity(n);
                                for _ in 0..n {
                                    items.push(ity.read_binary(&mut cur).map_err(|e| {
                                        GeometryError::Parse(format!("ply body: {e}"))
                                    })?);
                                }
                                row_lists.push(items);
                            }
                        }
                    }
                    rows.push(row);
                    lists.push(row_lists);
                }
                out.push((elem, rows, lists));
            }
        }
    }
    Ok(PlyData { elements: out })
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let needle = b"end_header";
    let pos = bytes
        .windows(needle.len())
        .position(|w| w == needle)?;
    let rest = &bytes[pos..];
    let nl = rest.iter().position(|&b| b == b'\n')?;
    Some(pos + nl + 1)
}

fn vertex_columns(elem: &PlyElement, names: &[&str]) -> Result<Vec<usize>, GeometryError> {
    names
        .iter()
        .map(|want| {
            elem.properties
                .iter()
                .filter_map(|p| match p {
                    PlyProperty::Scalar(_, n) => Some(n.as_str()),
                    PlyProperty::List(..) => None,
                })
                .position(|n| n == *want)
                .ok_or_else(|| GeometryError::Parse(format!("ply: missing vertex property {want}")))
        })
        .collect()
}

fn load_ply_mesh(path: &Path) -> Result<Mesh, GeometryError> {
    let data = parse_ply(path)?;
    let (velem, vrows, _) = data
        .elements
        .iter()
        .find(|(e, _, _)| e.name == "vertex")
        .ok_or_else(|| GeometryError::Parse("ply: no vertex element".into()))?;
    let cols = vertex_columns(velem, &["x", "y", "z"])?;
    let vertices: Vec<Vector3<f64>> = vrows
        .iter()
        .map(|r| Vector3::new(r[cols[0]], r[cols[1]], r[cols[2]]))
        .collect();
    let (_, _, frows) = data
        .elements
        .iter()
        .find(|(e, _, _)| e.name == "face")
        .ok_or_else(|| GeometryError::Parse("ply: no face element".into()))?;
    let mut triangles = Vec::new();
    for lists in frows {
        let idx = lists
            .first()
            .ok_or_else(|| GeometryError::Parse("ply: face without index list".into()))?;
        if idx.len() < 3 {
            return Err(GeometryError::Parse("ply: face with < 3 indices".into()));
        }
        let idx: Vec<u32> = idx.iter().map(|&x| x as u32).collect();
        for i in 1..idx.len() - 1 {
            triangles.push([idx[0], idx[i], idx[i + 1]]);
        }
    }
    Mesh::new(vertices, triangles)
}

/// Reads a point cloud (and per-vertex region ids if present).
pub fn read_ply_cloud(path: &Path) -> Result<(PointCloud, Option<Vec<i32>>), GeometryError> {
    let data = parse_ply(path)?;
    let (velem, vrows, _) = data
        .elements
        .iter()
        .find(|(e, _, _)| e.name == "vertex")
        .ok_or_else(|| GeometryError::Parse("ply: no vertex element".into()))?;
    let cols = vertex_columns(velem, &["x", "y", "z"])?;
    let points: Vec<Vector3<f64>> = vrows
        .iter()
        .map(|r| Vector3::new(r[cols[0]], r[cols[1]], r[cols[2]]))
        .collect();
    if points.is_empty() {
        return Err(GeometryError::Parse("ply: empty vertex element".into()));
    }
    let normals = vertex_columns(velem, &["nx", "ny", "nz"]).ok().map(|nc| {
        vrows
            .iter()
            .map(|r| Vector3::new(r[nc[0]], r[nc[1]], r[nc[2]]))
            .collect::<Vec<_>>()
    });
    let region = vertex_columns(velem, &["region_id"])
        .ok()
        .map(|rc| vrows.iter().map(|r| r[rc[0]] as i32).collect::<Vec<_>>());
    let cloud = match normals {
        Some(n) => PointCloud::with_normals(points, n),
        None => PointCloud::new(points),
    };
    Ok((cloud, region))
}

/// Writes a cloud as ascii PLY with an integer `region_id` per vertex
/// (-1 where the point belongs to no region).
pub fn write_ply_cloud(
    path: &Path,
    cloud: &PointCloud,
    regions: &[TargetRegion],
) -> Result<(), GeometryError> {
    let mut region_id = vec![-1i32; cloud.len()];
    for (rid, region) in regions.iter().enumerate() {
        for &i in &region.indices {
            region_id[i] = rid as i32;
        }
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    let has_normals = cloud.normals().is_some();
    if has_normals {
        writeln!(w, "property double nx")?;
        writeln!(w, "property double ny")?;
        writeln!(w, "property double nz")?;
    }
    writeln!(w, "property int region_id")?;
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points().iter().enumerate() {
        write!(w, "{} {} {}", p[0], p[1], p[2])?;
        if let Some(normals) = cloud.normals() {
            let n = normals[i];
            write!(w, " {} {} {}", n[0], n[1], n[2])?;
        }
        writeln!(w, " {}", region_id[i])?;
    }
    Ok(())
}

/// Writes a mesh as ascii PLY, optionally with one extra integer vertex
/// property (used to tag gripper markers with their grasp index).
pub fn write_ply_mesh(
    path: &Path,
    mesh: &Mesh,
    label: Option<(&str, &[i32])>,
) -> Result<(), GeometryError> {
    if let Some((_, values)) = label {
        assert_eq!(values.len(), mesh.vertices().len());
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertices().len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    if let Some((name, _)) = label {
        writeln!(w, "property int {name}")?;
    }
    writeln!(w, "element face {}", mesh.triangles().len())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;
    for (i, v) in mesh.vertices().iter().enumerate() {
        write!(w, "{} {} {}", v[0], v[1], v[2])?;
        if let Some((_, values)) = label {
            write!(w, " {}", values[i])?;
        }
        writeln!(w)?;
    }
    for t in mesh.triangles() {
        writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    Ok(())
}

pub fn write_obj_mesh(path: &Path, mesh: &Mesh) -> Result<(), GeometryError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for v in mesh.vertices() {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for t in mesh.triangles() {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

/// Region index lists as JSON: `[[i, j, ...], [k, ...]]`.
pub fn write_region_json(path: &Path, regions: &[TargetRegion]) -> Result<(), GeometryError> {
    let lists: Vec<&Vec<usize>> = regions.iter().map(|r| &r.indices).collect();
    let json = serde_json::to_string_pretty(&lists).expect("region lists serialize");
    std::fs::write(path, json)?;
    Ok(())
}
