//! PLY reader/writer for point clouds and flow fields.
//!
//! The vertex element carries float `x, y, z`, optionally `u, v` (source
//! pixels), `flow_x, flow_y, flow_z` (a flow field), and the synthetic
//! ground-truth annotations `occluded` / `outlier` (uchar). Unknown scalar
//! properties are skipped on read. Both ASCII and binary-little-endian files
//! are accepted; the writer defaults to binary.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::losses::FlowField;

/// On-disk encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyFormat {
    #[default]
    BinaryLittleEndian,
    Ascii,
}

/// A cloud plus the optional channels a PLY file can carry.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyData {
    pub cloud: PointCloud,
    pub flow: Option<FlowField>,
    pub occluded: Option<Vec<bool>>,
    pub outlier: Option<Vec<bool>>,
}

impl PlyData {
    pub fn cloud(cloud: PointCloud) -> Self {
        Self {
            cloud,
            flow: None,
            occluded: None,
            outlier: None,
        }
    }

    pub fn with_flow(cloud: PointCloud, flow: FlowField) -> Result<Self> {
        if flow.len() != cloud.len() {
            return Err(Error::Shape(format!(
                "flow of {} vectors for cloud of {} points",
                flow.len(),
                cloud.len()
            )));
        }
        Ok(Self {
            cloud,
            flow: Some(flow),
            occluded: None,
            outlier: None,
        })
    }

    fn validate(&self) -> Result<()> {
        let n = self.cloud.len();
        let check = |len: usize, what: &str| {
            if len != n {
                Err(Error::Shape(format!("{what} of {len} entries for {n} points")))
            } else {
                Ok(())
            }
        };
        if let Some(f) = &self.flow {
            check(f.len(), "flow")?;
        }
        if let Some(o) = &self.occluded {
            check(o.len(), "occlusion mask")?;
        }
        if let Some(o) = &self.outlier {
            check(o.len(), "outlier mask")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PropType {
    F32,
    F64,
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
}

impl PropType {
    fn parse(token: &str) -> Option<Self> {
        Some(match token {
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::F32 | Self::I32 | Self::U32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode_le(self, bytes: &[u8]) -> f64 {
        match self {
            Self::F32 => f64::from(f32::from_le_bytes(bytes.try_into().unwrap())),
            Self::F64 => f64::from_le_bytes(bytes.try_into().unwrap()),
            Self::I8 => f64::from(bytes[0] as i8),
            Self::U8 => f64::from(bytes[0]),
            Self::I16 => f64::from(i16::from_le_bytes(bytes.try_into().unwrap())),
            Self::U16 => f64::from(u16::from_le_bytes(bytes.try_into().unwrap())),
            Self::I32 => f64::from(i32::from_le_bytes(bytes.try_into().unwrap())),
            Self::U32 => f64::from(u32::from_le_bytes(bytes.try_into().unwrap())),
        }
    }
}

fn schema_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.display().to_string(),
        message: message.into(),
    }
}

struct Header {
    ascii: bool,
    count: usize,
    properties: Vec<(String, PropType)>,
    body_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let mut lines = Vec::new();
    let mut start = 0;
    let mut body_start = None;
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'\n' {
            let line = std::str::from_utf8(&bytes[start..i])
                .map_err(|_| schema_error(path, "header is not UTF-8"))?
                .trim_end_matches('\r');
            let done = line.trim() == "end_header";
            lines.push(line.to_string());
            start = i + 1;
            if done {
                body_start = Some(start);
                break;
            }
        }
    }
    let body_start = body_start.ok_or_else(|| schema_error(path, "missing end_header"))?;

    let mut iter = lines.iter().map(|l| l.trim());
    if iter.next() != Some("ply") {
        return Err(schema_error(path, "missing 'ply' magic"));
    }
    let mut ascii = None;
    let mut count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    for line in iter {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] | ["comment", ..] | ["end_header"] => {}
            ["format", fmt, "1.0"] => {
                ascii = Some(match *fmt {
                    "ascii" => true,
                    "binary_little_endian" => false,
                    other => {
                        return Err(schema_error(path, format!("unsupported format {other:?}")));
                    }
                });
            }
            ["element", "vertex", n] => {
                in_vertex = true;
                count = Some(n.parse::<usize>().map_err(|e| {
                    schema_error(path, format!("bad vertex count {n:?}: {e}"))
                })?);
            }
            ["element", name, n] => {
                let n: usize = n
                    .parse()
                    .map_err(|e| schema_error(path, format!("bad element count: {e}")))?;
                if n != 0 {
                    return Err(schema_error(
                        path,
                        format!("unsupported element {name:?} with {n} entries"),
                    ));
                }
                in_vertex = false;
            }
            ["property", "list", ..] => {
                return Err(schema_error(path, "list properties are not supported"));
            }
            ["property", ty, name] if in_vertex => {
                let ty = PropType::parse(ty)
                    .ok_or_else(|| schema_error(path, format!("unknown property type {ty:?}")))?;
                properties.push((name.to_string(), ty));
            }
            ["property", ..] if in_vertex => {
                return Err(schema_error(path, format!("malformed property line {line:?}")));
            }
            ["property", ..] => {}
            other => {
                return Err(schema_error(path, format!("bad header line {other:?}")));
            }
        }
    }
    let ascii = ascii.ok_or_else(|| schema_error(path, "missing format line"))?;
    let count = count.ok_or_else(|| schema_error(path, "missing vertex element"))?;
    Ok(Header {
        ascii,
        count,
        properties,
        body_start,
    })
}

/// Reads a PLY point cloud. Requires `x`, `y`, `z`; picks up `u`/`v`,
/// `flow_*`, and mask channels when present.
pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyData> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let header = parse_header(&bytes, path)?;

    let find = |name: &str| header.properties.iter().position(|(n, _)| n == name);
    let required = |name: &str| {
        find(name).ok_or_else(|| {
            schema_error(
                path,
                format!(
                    "missing vertex property {name:?}; expected x, y, z and optionally \
                     u, v, flow_x, flow_y, flow_z, occluded, outlier"
                ),
            )
        })
    };
    let ix = required("x")?;
    let iy = required("y")?;
    let iz = required("z")?;
    let iu = find("u");
    let iv = find("v");
    let iflow = match (find("flow_x"), find("flow_y"), find("flow_z")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        (None, None, None) => None,
        _ => {
            return Err(schema_error(
                path,
                "flow properties must appear as all of flow_x, flow_y, flow_z",
            ));
        }
    };
    if iu.is_some() != iv.is_some() {
        return Err(schema_error(path, "u and v must appear together"));
    }
    let ioccluded = find("occluded");
    let ioutlier = find("outlier");

    let n_props = header.properties.len();
    let mut rows: Vec<f64> = Vec::with_capacity(header.count * n_props);
    if header.ascii {
        let text = std::str::from_utf8(&bytes[header.body_start..])
            .map_err(|_| schema_error(path, "ASCII body is not UTF-8"))?;
        let mut tokens = text.split_whitespace();
        for row in 0..header.count {
            for (name, ty) in &header.properties {
                let token = tokens.next().ok_or_else(|| {
                    schema_error(path, format!("row {row}: missing value for {name:?}"))
                })?;
                // Parse at the declared width so ASCII and binary encodings
                // of the same file agree exactly.
                let value = match ty {
                    PropType::F32 => token.parse::<f32>().map(f64::from).map_err(|e| {
                        schema_error(path, format!("row {row}, property {name:?}: {e}"))
                    })?,
                    _ => token.parse::<f64>().map_err(|e| {
                        schema_error(path, format!("row {row}, property {name:?}: {e}"))
                    })?,
                };
                rows.push(value);
            }
        }
    } else {
        let row_size: usize = header.properties.iter().map(|(_, t)| t.size()).sum();
        let body = &bytes[header.body_start..];
        if body.len() < header.count * row_size {
            return Err(Error::Parse {
                path: path.display().to_string(),
                offset: bytes.len(),
                message: format!(
                    "truncated body: expected {} bytes, found {}",
                    header.count * row_size,
                    body.len()
                ),
            });
        }
        let mut at = 0;
        for _ in 0..header.count {
            for (_, ty) in &header.properties {
                rows.push(ty.decode_le(&body[at..at + ty.size()]));
                at += ty.size();
            }
        }
    }

    let cell = |row: usize, col: usize| rows[row * n_props + col];
    let mut points = Vec::with_capacity(header.count);
    let mut pixels = Vec::new();
    let mut flow = Vec::new();
    let mut occluded = Vec::new();
    let mut outlier = Vec::new();
    for row in 0..header.count {
        points.push(Vector3::new(cell(row, ix), cell(row, iy), cell(row, iz)));
        if let (Some(iu), Some(iv)) = (iu, iv) {
            pixels.push([cell(row, iu), cell(row, iv)]);
        }
        if let Some((a, b, c)) = iflow {
            flow.push(Vector3::new(cell(row, a), cell(row, b), cell(row, c)));
        }
        if let Some(i) = ioccluded {
            occluded.push(cell(row, i) != 0.0);
        }
        if let Some(i) = ioutlier {
            outlier.push(cell(row, i) != 0.0);
        }
    }
    let cloud = if pixels.is_empty() {
        PointCloud::new(points)?
    } else {
        PointCloud::with_source_pixels(points, pixels)?
    };
    Ok(PlyData {
        cloud,
        flow: (!flow.is_empty()).then_some(FlowField::new(flow)),
        occluded: (!occluded.is_empty()).then_some(occluded),
        outlier: (!outlier.is_empty()).then_some(outlier),
    })
}

/// Writes a PLY point cloud with whatever channels `data` carries.
pub fn write_ply(path: impl AsRef<Path>, data: &PlyData, format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    data.validate()?;
    let mut out: Vec<u8> = Vec::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(out, "ply\nformat {fmt} 1.0\nelement vertex {}\n", data.cloud.len())
        .expect("vec write");
    out.extend_from_slice(b"property float x\nproperty float y\nproperty float z\n");
    if data.cloud.source_pixels.is_some() {
        out.extend_from_slice(b"property float u\nproperty float v\n");
    }
    if data.flow.is_some() {
        out.extend_from_slice(
            b"property float flow_x\nproperty float flow_y\nproperty float flow_z\n",
        );
    }
    if data.occluded.is_some() {
        out.extend_from_slice(b"property uchar occluded\n");
    }
    if data.outlier.is_some() {
        out.extend_from_slice(b"property uchar outlier\n");
    }
    out.extend_from_slice(b"end_header\n");

    for i in 0..data.cloud.len() {
        let p = &data.cloud.points[i];
        let mut floats: Vec<f32> = vec![p.x as f32, p.y as f32, p.z as f32];
        if let Some(px) = &data.cloud.source_pixels {
            floats.push(px[i][0] as f32);
            floats.push(px[i][1] as f32);
        }
        if let Some(flow) = &data.flow {
            let f = &flow.vectors[i];
            floats.extend_from_slice(&[f.x as f32, f.y as f32, f.z as f32]);
        }
        let mut bools: Vec<u8> = Vec::new();
        if let Some(o) = &data.occluded {
            bools.push(u8::from(o[i]));
        }
        if let Some(o) = &data.outlier {
            bools.push(u8::from(o[i]));
        }
        match format {
            PlyFormat::Ascii => {
                let mut fields: Vec<String> = floats.iter().map(|f| format!("{f}")).collect();
                fields.extend(bools.iter().map(|b| format!("{b}")));
                writeln!(out, "{}", fields.join(" ")).expect("vec write");
            }
            PlyFormat::BinaryLittleEndian => {
                for f in floats {
                    out.extend_from_slice(&f.to_le_bytes());
                }
                out.extend_from_slice(&bools);
            }
        }
    }
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
