//! PLY point clouds with optional saliency, contact labels and colors.
//!
//! Written files have one `vertex` element with properties, in order:
//! `float x`, `float y`, `float z`, then optionally `float saliency`,
//! `uchar label`, and `uchar red`/`green`/`blue`. Colors encode saliency
//! on a linear blue (0) to red (1) ramp. The reader accepts any property
//! order, the usual scalar types, and extra properties or elements after
//! the vertices, which it ignores.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{check_len, Error, Result};
use crate::geom::{ContactLabels, Point3, PointCloud, SaliencyMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlyData {
    pub cloud: PointCloud,
    pub saliency: Option<SaliencyMap>,
    pub labels: Option<ContactLabels>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PlyData {
    pub fn new(cloud: PointCloud) -> Self {
        PlyData {
            cloud,
            saliency: None,
            labels: None,
            colors: None,
        }
    }
}

/// Blue-to-red ramp: 0 maps to (0, 0, 255), 1 to (255, 0, 0).
pub fn colormap(s: f64) -> [u8; 3] {
    let s = s.clamp(0.0, 1.0);
    [(255.0 * s).round() as u8, 0, (255.0 * (1.0 - s)).round() as u8]
}

fn err(msg: impl Into<String>) -> Error {
    Error::format("PLY", msg)
}

pub fn write_ply<W: Write>(out: W, data: &PlyData, encoding: PlyEncoding) -> Result<()> {
    let n = data.cloud.len();
    if let Some(s) = &data.saliency {
        check_len("PLY saliency", n, s.len())?;
    }
    if let Some(l) = &data.labels {
        check_len("PLY labels", n, l.len())?;
    }
    if let Some(c) = &data.colors {
        check_len("PLY colors", n, c.len())?;
    }
    let mut w = BufWriter::new(out);
    let fmt = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply\nformat {fmt} 1.0\nelement vertex {n}")?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if data.saliency.is_some() {
        writeln!(w, "property float saliency")?;
    }
    if data.labels.is_some() {
        writeln!(w, "property uchar label")?;
    }
    if data.colors.is_some() {
        writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..n {
        let p = data.cloud.points()[i];
        let mut floats = vec![p[0] as f32, p[1] as f32, p[2] as f32];
        if let Some(s) = &data.saliency {
            floats.push(s.values()[i] as f32);
        }
        let mut bytes = Vec::new();
        if let Some(l) = &data.labels {
            bytes.push(l.get(i) as u8);
        }
        if let Some(c) = &data.colors {
            bytes.extend_from_slice(&c[i]);
        }
        match encoding {
            PlyEncoding::Ascii => {
                let fields: Vec<String> = floats
                    .iter()
                    .map(|f| f.to_string())
                    .chain(bytes.iter().map(|b| b.to_string()))
                    .collect();
                writeln!(w, "{}", fields.join(" "))?;
            }
            PlyEncoding::BinaryLittleEndian => {
                for f in floats {
                    w.write_all(&f.to_le_bytes())?;
                }
                w.write_all(&bytes)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_ply(path: impl AsRef<Path>, data: &PlyData, encoding: PlyEncoding) -> Result<()> {
    write_ply(File::create(path)?, data, encoding)
}

#[derive(Clone, Copy, Debug, PartialEq)]
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
    fn parse(s: &str) -> Option<Scalar> {
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

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn parse_ascii(self, tok: &str) -> Option<f64> {
        match self {
            Scalar::F32 => tok.parse::<f32>().ok().map(f64::from),
            Scalar::F64 => tok.parse::<f64>().ok(),
            _ => tok.parse::<i64>().ok().map(|v| v as f64),
        }
    }
}

struct Header {
    encoding: PlyEncoding,
    count: usize,
    props: Vec<(String, Scalar)>,
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(err("unexpected end of header"));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    if read_line(r)? != "ply" {
        return Err(err("missing 'ply' magic line"));
    }
    let mut encoding = None;
    let mut count = None;
    let mut props = Vec::new();
    // Only the vertex element must come first; anything declared after it
    // is never read.
    let mut in_vertex = false;
    loop {
        let line = read_line(r)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, "1.0"] => {
                encoding = Some(match *f {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    other => return Err(err(format!("unsupported format {other}"))),
                });
            }
            ["element", name, n] => {
                let n: usize = n.parse().map_err(|_| err(format!("bad element count {n:?}")))?;
                if *name == "vertex" {
                    if count.is_some() {
                        return Err(err("duplicate vertex element"));
                    }
                    count = Some(n);
                    in_vertex = true;
                } else if count.is_none() {
                    return Err(err(format!("element {name:?} precedes the vertex element")));
                } else {
                    in_vertex = false;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(err("list properties on vertices are not supported"));
            }
            ["property", ty, name] if in_vertex => {
                let t = Scalar::parse(ty).ok_or_else(|| err(format!("unknown property type {ty:?}")))?;
                props.push((name.to_string(), t));
            }
            ["property", ..] if count.is_some() => {}
            _ => return Err(err(format!("unexpected header line {line:?}"))),
        }
    }
    let encoding = encoding.ok_or_else(|| err("missing format line"))?;
    let count = count.ok_or_else(|| err("missing vertex element"))?;
    for axis in ["x", "y", "z"] {
        if !props.iter().any(|(n, _)| n == axis) {
            return Err(err(format!("missing vertex property {axis}")));
        }
    }
    Ok(Header {
        encoding,
        count,
        props,
    })
}

pub fn read_ply<R: Read>(input: R) -> Result<PlyData> {
    let mut r = BufReader::new(input);
    let h = read_header(&mut r)?;
    let np = h.props.len();
    let mut rows = Vec::with_capacity(h.count);
    match h.encoding {
        PlyEncoding::Ascii => {
            for k in 0..h.count {
                let line = read_line(&mut r).map_err(|_| err(format!("expected {} vertices, found {k}", h.count)))?;
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() != np {
                    return Err(err(format!("vertex {k} has {} fields, expected {np}", toks.len())));
                }
                let row = toks
                    .iter()
                    .zip(&h.props)
                    .map(|(t, (name, ty))| ty.parse_ascii(t).ok_or_else(|| err(format!("bad value {t:?} for {name} in vertex {k}"))))
                    .collect::<Result<Vec<f64>>>()?;
                rows.push(row);
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let stride: usize = h.props.iter().map(|(_, t)| t.size()).sum();
            let mut buf = vec![0u8; stride];
            for k in 0..h.count {
                r.read_exact(&mut buf)
                    .map_err(|_| err(format!("expected {} vertices, data ends at vertex {k}", h.count)))?;
                let mut off = 0;
                let row = h
                    .props
                    .iter()
                    .map(|(_, t)| {
                        let v = t.decode(&buf[off..]);
                        off += t.size();
                        v
                    })
                    .collect();
                rows.push(row);
            }
        }
    }
    let col = |name: &str| h.props.iter().position(|(n, _)| n == name);
    let (x, y, z) = (col("x").unwrap(), col("y").unwrap(), col("z").unwrap());
    let points: Vec<Point3> = rows.iter().map(|r| [r[x], r[y], r[z]]).collect();
    let cloud = PointCloud::new(points)?;
    let saliency = match col("saliency") {
        Some(c) => Some(SaliencyMap::new(rows.iter().map(|r| r[c]).collect())?),
        None => None,
    };
    let labels = match col("label") {
        Some(c) => {
            let raw = rows
                .iter()
                .map(|r| {
                    let v = r[c];
                    if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                        Ok(v as u8)
                    } else {
                        Err(err(format!("label value {v} is not a small integer")))
                    }
                })
                .collect::<Result<Vec<u8>>>()?;
            Some(ContactLabels::from_u8(&raw)?)
        }
        None => None,
    };
    let colors = match (col("red"), col("green"), col("blue")) {
        (Some(rc), Some(gc), Some(bc)) => Some(rows.iter().map(|r| [r[rc] as u8, r[gc] as u8, r[bc] as u8]).collect()),
        _ => None,
    };
    Ok(PlyData {
        cloud,
        saliency,
        labels,
        colors,
    })
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PlyData> {
    read_ply(File::open(path)?)
}
