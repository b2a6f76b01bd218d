//! PLY point clouds, ASCII or binary little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::patchmodel::PredictedCloud;
use crate::spatial::{covariance_normal, GroundTruthCloud, NeighborIndex};

/// Neighbours used to estimate normals and area of clouds that lack them.
pub const ESTIMATE_NEIGHBORS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Ascii,
    BinaryLittleEndian,
}

/// Vertex data of a PLY file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyCloud {
    pub points: Vec<[f64; 3]>,
    pub normals: Option<Vec<[f64; 3]>>,
    pub patch_ids: Option<Vec<u8>>,
    /// Value of a `comment surface_area` header line.
    pub area: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

struct Header {
    encoding: Encoding,
    vertices: usize,
    properties: Vec<(String, Scalar)>,
    area: Option<f64>,
    body_offset: usize,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let mut offset = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(path, "header is not terminated by end_header"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| format_err(path, "header is not valid text"))?
            .trim_end_matches('\r')
            .to_string();
        offset += end + 1;
        let done = line.trim() == "end_header";
        lines.push(line);
        if done {
            break;
        }
    }
    if lines.first().map(|l| l.trim()) != Some("ply") {
        return Err(format_err(path, "missing `ply` magic line"));
    }
    let mut encoding = None;
    let mut vertices = None;
    let mut properties = Vec::new();
    let mut area = None;
    let mut in_vertex = false;
    for line in &lines[1..lines.len() - 1] {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["format", "ascii", _] => encoding = Some(Encoding::Ascii),
            ["format", "binary_little_endian", _] => encoding = Some(Encoding::BinaryLittleEndian),
            ["format", other, ..] => {
                return Err(format_err(path, format!("unsupported format `{other}`")));
            }
            ["comment", "surface_area", v] => {
                area = Some(
                    v.parse::<f64>()
                        .map_err(|_| format_err(path, format!("bad surface_area `{v}`")))?,
                );
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| format_err(path, format!("bad element count `{count}`")))?;
                if *name == "vertex" {
                    if vertices.is_some() {
                        return Err(format_err(path, "duplicate vertex element"));
                    }
                    vertices = Some(count);
                    in_vertex = true;
                } else {
                    if vertices.is_none() {
                        return Err(format_err(path, format!("element `{name}` precedes vertex")));
                    }
                    in_vertex = false;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(format_err(path, "list properties on vertices are not supported"));
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty)
                    .ok_or_else(|| format_err(path, format!("unknown property type `{ty}`")))?;
                properties.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => return Err(format_err(path, format!("malformed header line `{line}`"))),
        }
    }
    Ok(Header {
        encoding: encoding.ok_or_else(|| format_err(path, "missing format line"))?,
        vertices: vertices.ok_or_else(|| format_err(path, "missing vertex element"))?,
        properties,
        area,
        body_offset: offset,
    })
}

pub fn read_ply(path: &Path) -> Result<PlyCloud> {
    let bytes = fs::read(path)?;
    let header = parse_header(path, &bytes)?;
    let col = |name: &str| header.properties.iter().position(|(n, _)| n == name);
    let xyz = [col("x"), col("y"), col("z")];
    let nrm = [col("nx"), col("ny"), col("nz")];
    let pid = col("patch_id");
    let [Some(x), Some(y), Some(z)] = xyz else {
        return Err(format_err(path, "vertex element lacks x, y or z"));
    };
    let has_normals = nrm.iter().all(Option::is_some);
    let width = header.properties.len();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(header.vertices);
    let body = &bytes[header.body_offset..];
    match header.encoding {
        Encoding::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| format_err(path, "body is not valid text"))?;
            let mut tokens = text.split_whitespace();
            for v in 0..header.vertices {
                let mut row = Vec::with_capacity(width);
                for _ in 0..width {
                    let tok = tokens
                        .next()
                        .ok_or_else(|| format_err(path, format!("truncated payload at vertex {v}")))?;
                    row.push(
                        tok.parse::<f64>()
                            .map_err(|_| format_err(path, format!("bad number `{tok}` at vertex {v}")))?,
                    );
                }
                rows.push(row);
            }
        }
        Encoding::BinaryLittleEndian => {
            let stride: usize = header.properties.iter().map(|(_, s)| s.size()).sum();
            if body.len() < stride * header.vertices {
                return Err(format_err(
                    path,
                    format!(
                        "truncated payload: {} bytes for {} vertices of {} bytes",
                        body.len(),
                        header.vertices,
                        stride
                    ),
                ));
            }
            for v in 0..header.vertices {
                let mut at = v * stride;
                let mut row = Vec::with_capacity(width);
                for (_, s) in &header.properties {
                    row.push(s.read_le(&body[at..at + s.size()]));
                    at += s.size();
                }
                rows.push(row);
            }
        }
    }
    let points = rows.iter().map(|r| [r[x], r[y], r[z]]).collect();
    let normals = if has_normals {
        let [a, b, c] = nrm.map(|i| i.expect("checked"));
        Some(rows.iter().map(|r| [r[a], r[b], r[c]]).collect())
    } else {
        None
    };
    let patch_ids = match pid {
        Some(i) => Some(
            rows.iter()
                .map(|r| {
                    let v = r[i];
                    if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                        Ok(v as u8)
                    } else {
                        Err(format_err(path, format!("patch_id {v} out of range")))
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(PlyCloud {
        points,
        normals,
        patch_ids,
        area: header.area,
    })
}

pub fn write_ply(path: &Path, cloud: &PlyCloud, encoding: Encoding) -> Result<()> {
    let n = cloud.points.len();
    if cloud.normals.as_ref().is_some_and(|v| v.len() != n) || cloud.patch_ids.as_ref().is_some_and(|v| v.len() != n) {
        return Err(format_err(path, "per-vertex arrays differ in length"));
    }
    let mut out = Vec::new();
    let fmt = match encoding {
        Encoding::Ascii => "ascii",
        Encoding::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(out, "ply")?;
    writeln!(out, "format {fmt} 1.0")?;
    writeln!(out, "comment {} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))?;
    if let Some(a) = cloud.area {
        writeln!(out, "comment surface_area {a:e}")?;
    }
    writeln!(out, "element vertex {n}")?;
    for p in ["x", "y", "z"] {
        writeln!(out, "property double {p}")?;
    }
    if cloud.normals.is_some() {
        for p in ["nx", "ny", "nz"] {
            writeln!(out, "property double {p}")?;
        }
    }
    if cloud.patch_ids.is_some() {
        writeln!(out, "property uchar patch_id")?;
    }
    writeln!(out, "end_header")?;
    for i in 0..n {
        let mut values: Vec<f64> = cloud.points[i].to_vec();
        if let Some(ns) = &cloud.normals {
            values.extend_from_slice(&ns[i]);
        }
        match encoding {
            Encoding::Ascii => {
                let mut fields: Vec<String> = values.iter().map(|v| format!("{v:e}")).collect();
                if let Some(ids) = &cloud.patch_ids {
                    fields.push(ids[i].to_string());
                }
                writeln!(out, "{}", fields.join(" "))?;
            }
            Encoding::BinaryLittleEndian => {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(ids) = &cloud.patch_ids {
                    out.push(ids[i]);
                }
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Ground-truth cloud from a PLY file. Missing normals are estimated from
/// the covariance of each point's 16 nearest points (itself included) and
/// a missing area from the same neighbourhoods as `Σ π d² / 16`, `d` the
/// distance to the 16th neighbour; both cases log a warning.
pub fn read_pointcloud(path: &Path) -> Result<GroundTruthCloud> {
    let ply = read_ply(path)?;
    if ply.points.len() < 4 {
        return Err(format_err(path, format!("{} points, at least 4 required", ply.points.len())));
    }
    let needs_index = ply.normals.is_none() || ply.area.is_none();
    let index = if needs_index {
        Some(NeighborIndex::build(&ply.points)?)
    } else {
        None
    };
    let k = ESTIMATE_NEIGHBORS.min(ply.points.len());
    let normals = match ply.normals {
        Some(ns) => ns
            .into_iter()
            .enumerate()
            .map(|(i, n)| {
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if len > 0.0 && len.is_finite() {
                    Ok([n[0] / len, n[1] / len, n[2] / len])
                } else {
                    Err(format_err(path, format!("vertex {i} has a zero normal")))
                }
            })
            .collect::<Result<Vec<_>>>()?,
        None => {
            log::warn!("{}: no normals, estimating from {k}-point neighbourhoods", path.display());
            let index = index.as_ref().expect("index");
            ply.points
                .iter()
                .map(|p| {
                    let nb: Vec<[f64; 3]> = index.knn(p, k).iter().map(|n| *index.point(n.index)).collect();
                    covariance_normal(&nb).map(|(n, _)| n)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let area = match ply.area {
        Some(a) => a,
        None => {
            log::warn!("{}: no surface_area comment, estimating from point spacing", path.display());
            let index = index.as_ref().expect("index");
            ply.points
                .iter()
                .map(|p| {
                    let d2 = index.knn(p, k).last().map_or(0.0, |n| n.dist2);
                    std::f64::consts::PI * d2 / k as f64
                })
                .sum()
        }
    };
    GroundTruthCloud::new(ply.points, normals, area)
}

pub fn write_pointcloud(path: &Path, cloud: &GroundTruthCloud, encoding: Encoding) -> Result<()> {
    write_ply(
        path,
        &PlyCloud {
            points: cloud.points().to_vec(),
            normals: Some(cloud.normals().to_vec()),
            patch_ids: None,
            area: Some(cloud.area()),
        },
        encoding,
    )
}

/// Writes decoded points with their analytic normals (zero where undefined)
/// and patch ids.
pub fn write_prediction(path: &Path, cloud: &PredictedCloud, encoding: Encoding) -> Result<()> {
    if cloud.patch_count > 256 {
        return Err(format_err(
            path,
            format!("{} patches do not fit an 8-bit patch_id", cloud.patch_count),
        ));
    }
    write_ply(
        path,
        &PlyCloud {
            points: cloud.positions(),
            normals: Some(cloud.points.iter().map(|p| p.analytic_normal.unwrap_or([0.0; 3])).collect()),
            patch_ids: Some(cloud.points.iter().map(|p| p.patch_id as u8).collect()),
            area: None,
        },
        encoding,
    )
}
