//! Binary little-endian PLY persistence for scenes.
//!
//! Layout of the `vertex` element:
//!
//! | property                 | type    | meaning                          |
//! |--------------------------|---------|----------------------------------|
//! | `x y z`                  | float32 | position                         |
//! | `scale_0..2`             | float32 | log-scale                        |
//! | `rot_0..3`               | float32 | quaternion `w x y z`             |
//! | `red green blue`         | float32 | color in `[0,1]`                 |
//! | `opacity`                | float32 | opacity logit                    |
//! | `seg_logit`              | float32 | segmentation logit               |
//! | `block_id`               | int32   | creating block                   |
//! | `mark`                   | uint8   | 0 Original, 1 Extended, 2 NewPart|
//!
//! Any other scalar vertex property is carried through untouched. The scene
//! seed travels in a `comment rng_seed <u64>` header line.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::scene::{GaussianKernel, Mark, Scene};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("missing required property `{0}`")]
    MissingProperty(String),
    #[error("property `{property}` has type {found}, expected {expected}")]
    WrongType {
        property: String,
        found: &'static str,
        expected: &'static str,
    },
    #[error("payload truncated while reading property `{property}` of vertex {vertex}")]
    Truncated { property: String, vertex: usize },
    #[error("invalid value for property `{property}` at vertex {vertex}")]
    InvalidValue { property: String, vertex: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<ScalarType> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalarType::I8 => "char",
            ScalarType::U8 => "uchar",
            ScalarType::I16 => "short",
            ScalarType::U16 => "ushort",
            ScalarType::I32 => "int",
            ScalarType::U32 => "uint",
            ScalarType::F32 => "float",
            ScalarType::F64 => "double",
        }
    }
}

/// A vertex property outside the known layout, preserved verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExtraProperty {
    pub name: String,
    pub ty: ScalarType,
}

#[derive(Clone, Copy)]
enum Field {
    Position(usize),
    LogScale(usize),
    Rotation(usize),
    Color(usize),
    Opacity,
    Seg,
    Block,
    Mark,
}

const KNOWN: [(&str, Field, ScalarType); 17] = [
    ("x", Field::Position(0), ScalarType::F32),
    ("y", Field::Position(1), ScalarType::F32),
    ("z", Field::Position(2), ScalarType::F32),
    ("scale_0", Field::LogScale(0), ScalarType::F32),
    ("scale_1", Field::LogScale(1), ScalarType::F32),
    ("scale_2", Field::LogScale(2), ScalarType::F32),
    ("rot_0", Field::Rotation(0), ScalarType::F32),
    ("rot_1", Field::Rotation(1), ScalarType::F32),
    ("rot_2", Field::Rotation(2), ScalarType::F32),
    ("rot_3", Field::Rotation(3), ScalarType::F32),
    ("red", Field::Color(0), ScalarType::F32),
    ("green", Field::Color(1), ScalarType::F32),
    ("blue", Field::Color(2), ScalarType::F32),
    ("opacity", Field::Opacity, ScalarType::F32),
    ("seg_logit", Field::Seg, ScalarType::F32),
    ("block_id", Field::Block, ScalarType::I32),
    ("mark", Field::Mark, ScalarType::U8),
];

pub fn save_ply(scene: &Scene, path: impl AsRef<Path>) -> Result<(), PlyError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply(scene, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<Scene, PlyError> {
    let mut r = BufReader::new(File::open(path)?);
    read_ply(&mut r)
}

pub fn write_ply<W: Write>(scene: &Scene, w: &mut W) -> Result<(), PlyError> {
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("comment rng_seed {}\n", scene.rng_seed));
    header.push_str(&format!("element vertex {}\n", scene.len()));
    for (name, _, ty) in KNOWN.iter() {
        header.push_str(&format!("property {} {}\n", ty.name(), name));
    }
    for p in &scene.extra_properties {
        header.push_str(&format!("property {} {}\n", p.ty.name(), p.name));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;

    let extra_len: usize = scene.extra_properties.iter().map(|p| p.ty.size()).sum();
    let mut buf = Vec::with_capacity(17 * 4 + extra_len);
    for (vertex, k) in scene.kernels().iter().enumerate() {
        buf.clear();
        for v in k
            .position
            .iter()
            .chain(&k.log_scale)
            .chain(&k.rotation)
            .chain(&k.color)
            .chain([&k.opacity_logit, &k.seg_logit])
        {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&k.block_id.to_le_bytes());
        buf.push(k.mark.to_u8());
        if k.extra.len() != extra_len {
            return Err(PlyError::InvalidValue {
                property: "extra".into(),
                vertex,
            });
        }
        buf.extend_from_slice(&k.extra);
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_header_line<R: Read>(r: &mut R) -> Result<String, PlyError> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(PlyError::MalformedHeader(
                "unexpected end of file in header".into(),
            ));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 4096 {
            return Err(PlyError::MalformedHeader("header line too long".into()));
        }
    }
    if line.last() == Some(&b'\r') {
        line.pop();
    }
    String::from_utf8(line).map_err(|_| PlyError::MalformedHeader("non-ASCII header".into()))
}

enum Slot {
    Known(Field),
    Extra(usize),
}

struct Column {
    name: String,
    ty: ScalarType,
    slot: Slot,
}

pub fn read_ply<R: Read>(r: &mut R) -> Result<Scene, PlyError> {
    if read_header_line(r)? != "ply" {
        return Err(PlyError::MalformedHeader("missing `ply` magic".into()));
    }
    let mut format_seen = false;
    let mut count: Option<usize> = None;
    let mut seed = 0u64;
    let mut columns: Vec<Column> = Vec::new();
    let mut extras: Vec<ExtraProperty> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = read_header_line(r)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", "1.0"] => format_seen = true,
            ["format", other, ..] => {
                return Err(PlyError::MalformedHeader(format!(
                    "unsupported format `{other}`"
                )))
            }
            ["comment", "rng_seed", v] => {
                seed = v.parse().map_err(|_| {
                    PlyError::MalformedHeader(format!("bad rng_seed comment `{v}`"))
                })?
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(PlyError::MalformedHeader("duplicate vertex element".into()));
                }
                count = Some(n.parse().map_err(|_| {
                    PlyError::MalformedHeader(format!("bad vertex count `{n}`"))
                })?);
                in_vertex = true;
            }
            ["element", name, ..] => {
                return Err(PlyError::MalformedHeader(format!(
                    "unsupported element `{name}`"
                )))
            }
            ["property", "list", .., name] => {
                return Err(PlyError::MalformedHeader(format!(
                    "list property `{name}` is not supported"
                )))
            }
            ["property", ty, name] => {
                if !in_vertex {
                    return Err(PlyError::MalformedHeader(format!(
                        "property `{name}` outside vertex element"
                    )));
                }
                let ty = ScalarType::parse(ty).ok_or_else(|| {
                    PlyError::MalformedHeader(format!("unknown type `{ty}` for `{name}`"))
                })?;
                if columns.iter().any(|c| c.name == *name) {
                    return Err(PlyError::MalformedHeader(format!(
                        "duplicate property `{name}`"
                    )));
                }
                let slot = match KNOWN.iter().find(|(n, _, _)| n == name) {
                    Some((_, field, expected)) => {
                        if ty != *expected {
                            return Err(PlyError::WrongType {
                                property: name.to_string(),
                                found: ty.name(),
                                expected: expected.name(),
                            });
                        }
                        Slot::Known(*field)
                    }
                    None => {
                        extras.push(ExtraProperty {
                            name: name.to_string(),
                            ty,
                        });
                        Slot::Extra(extras.len() - 1)
                    }
                };
                columns.push(Column {
                    name: name.to_string(),
                    ty,
                    slot,
                });
            }
            _ => {
                return Err(PlyError::MalformedHeader(format!(
                    "unrecognized header line `{line}`"
                )))
            }
        }
    }
    if !format_seen {
        return Err(PlyError::MalformedHeader("missing format line".into()));
    }
    let count = count.ok_or_else(|| PlyError::MalformedHeader("missing vertex element".into()))?;
    for (name, _, _) in KNOWN.iter() {
        if !columns.iter().any(|c| c.name == *name) {
            return Err(PlyError::MissingProperty(name.to_string()));
        }
    }

    // Offsets of each extra property inside a kernel's `extra` blob.
    let mut extra_offsets = Vec::with_capacity(extras.len());
    let mut off = 0;
    for e in &extras {
        extra_offsets.push(off);
        off += e.ty.size();
    }
    let extra_len = off;

    let mut kernels = Vec::with_capacity(count.min(1 << 24));
    let mut buf = [0u8; 8];
    for vertex in 0..count {
        let mut k = GaussianKernel {
            extra: vec![0; extra_len],
            ..Default::default()
        };
        for col in &columns {
            let bytes = &mut buf[..col.ty.size()];
            r.read_exact(bytes).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => PlyError::Truncated {
                    property: col.name.clone(),
                    vertex,
                },
                _ => PlyError::Io(e),
            })?;
            match col.slot {
                Slot::Extra(i) => {
                    let o = extra_offsets[i];
                    k.extra[o..o + bytes.len()].copy_from_slice(bytes);
                }
                Slot::Known(field) => {
                    let f = || f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
                    match field {
                        Field::Position(a) => k.position[a] = f(),
                        Field::LogScale(a) => k.log_scale[a] = f(),
                        Field::Rotation(a) => k.rotation[a] = f(),
                        Field::Color(a) => k.color[a] = f(),
                        Field::Opacity => k.opacity_logit = f(),
                        Field::Seg => k.seg_logit = f(),
                        Field::Block => {
                            k.block_id = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
                        }
                        Field::Mark => {
                            k.mark = Mark::from_u8(bytes[0]).ok_or_else(|| {
                                PlyError::InvalidValue {
                                    property: "mark".into(),
                                    vertex,
                                }
                            })?
                        }
                    }
                }
            }
        }
        kernels.push(k);
    }
    let mut scene = Scene::from_kernels(kernels, seed);
    scene.extra_properties = extras;
    Ok(scene)
}
