//! ASCII PLY, OBJ and XYZ readers and writers.
//!
//! Coordinates are written with Rust's shortest round-trip float formatting,
//! so a save/load cycle reproduces every coordinate bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Face, Point, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    Ply,
    Obj,
    Xyz,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        match ext.as_str() {
            "ply" => Ok(Format::Ply),
            "obj" => Ok(Format::Obj),
            "xyz" | "txt" | "pts" => Ok(Format::Xyz),
            _ => Err(Error::UnsupportedFormat(format!(
                "cannot infer format from extension of {}",
                path.display()
            ))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Ply => "ply",
            Format::Obj => "obj",
            Format::Xyz => "xyz",
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("cloud")
        .to_string()
}

pub fn load_cloud(path: &Path, format: Format) -> Result<PointCloud> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    if format == Format::Ply && !text.starts_with(b"ply") {
        return Err(Error::Parse {
            line: 1,
            message: "missing `ply` magic".into(),
        });
    }
    let text = String::from_utf8(text).map_err(|_| match format {
        Format::Ply => Error::UnsupportedFormat("binary PLY is not supported".into()),
        _ => Error::Parse {
            line: 0,
            message: "file is not valid UTF-8 text".into(),
        },
    })?;
    parse(&text, format, stem(path))
}

/// Loads a cloud, inferring the format from the file extension.
pub fn load(path: &Path) -> Result<PointCloud> {
    load_cloud(path, Format::from_path(path)?)
}

pub fn parse(text: &str, format: Format, name: impl Into<String>) -> Result<PointCloud> {
    let (points, faces) = match format {
        Format::Ply => parse_ply(text)?,
        Format::Obj => parse_obj(text)?,
        Format::Xyz => (parse_xyz(text)?, None),
    };
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    PointCloud::new(name, points, faces)
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: Format) -> Result<()> {
    fs::write(path, serialize(cloud, format)).map_err(|e| Error::io(path, e))
}

pub fn save(cloud: &PointCloud, path: &Path) -> Result<()> {
    save_cloud(cloud, path, Format::from_path(path)?)
}

/// Loads every file with a recognized cloud extension in `dir`, sorted by
/// file name. Other files are ignored.
pub fn load_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    paths.retain(|p| p.is_file() && Format::from_path(p).is_ok());
    paths.sort();
    paths.iter().map(|p| load(p)).collect()
}

pub fn serialize(cloud: &PointCloud, format: Format) -> String {
    match format {
        Format::Ply => write_ply(cloud),
        Format::Obj => write_obj(cloud),
        Format::Xyz => write_xyz(cloud),
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("`{tok}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite coordinate `{tok}`")));
    }
    Ok(v)
}

fn parse_xyz(text: &str) -> Result<Vec<Point>> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(
                i + 1,
                format!("expected 3 coordinates, found {}", toks.len()),
            ));
        }
        points.push(Point::new(
            parse_f64(toks[0], i + 1)?,
            parse_f64(toks[1], i + 1)?,
            parse_f64(toks[2], i + 1)?,
        ));
    }
    Ok(points)
}

/// Triangulates a polygon as a fan around its first vertex.
fn fan(poly: &[usize], faces: &mut Vec<Face>) {
    for k in 1..poly.len().saturating_sub(1) {
        faces.push([poly[0], poly[k], poly[k + 1]]);
    }
}

fn parse_obj(text: &str) -> Result<(Vec<Point>, Option<Vec<Face>>)> {
    let mut points = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let coords: Vec<&str> = toks.collect();
                if coords.len() < 3 {
                    return Err(parse_err(
                        lineno,
                        format!("vertex needs 3 coordinates, found {}", coords.len()),
                    ));
                }
                points.push(Point::new(
                    parse_f64(coords[0], lineno)?,
                    parse_f64(coords[1], lineno)?,
                    parse_f64(coords[2], lineno)?,
                ));
            }
            Some("f") => {
                let mut poly = Vec::new();
                for tok in toks {
                    let idx = tok.split('/').next().unwrap_or("");
                    let v: i64 = idx
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad face index `{tok}`")))?;
                    // OBJ indices are 1-based; negative values count back from the latest vertex
                    let resolved = if v > 0 {
                        v - 1
                    } else if v < 0 {
                        points.len() as i64 + v
                    } else {
                        return Err(parse_err(lineno, "face index 0 is invalid in OBJ"));
                    };
                    if resolved < 0 || resolved as usize >= points.len() {
                        return Err(parse_err(
                            lineno,
                            format!("face index `{tok}` refers to an undefined vertex"),
                        ));
                    }
                    poly.push(resolved as usize);
                }
                if poly.len() < 3 {
                    return Err(parse_err(lineno, "face needs at least 3 vertices"));
                }
                fan(&poly, &mut faces);
            }
            _ => {}
        }
    }
    let faces = (!faces.is_empty()).then_some(faces);
    Ok((points, faces))
}

#[derive(Debug)]
enum PlyProperty {
    Scalar { name: String, ty: String },
    List { name: String },
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
}

fn parse_ply(text: &str) -> Result<(Vec<Point>, Option<Vec<Face>>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(1, "missing `ply` magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    loop {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| parse_err(0, "header ended without `end_header`"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            Some("format") => {
                if toks.get(1) != Some(&"ascii") {
                    return Err(Error::UnsupportedFormat(format!(
                        "PLY format `{}` (only ascii is supported)",
                        toks.get(1).unwrap_or(&"")
                    )));
                }
                saw_format = true;
            }
            Some("element") => {
                if toks.len() != 3 {
                    return Err(parse_err(lineno, "malformed element line"));
                }
                let count = toks[2]
                    .parse()
                    .map_err(|_| parse_err(lineno, "bad element count"))?;
                elements.push(PlyElement {
                    name: toks[1].to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(lineno, "property before any element"))?;
                let prop = match toks.get(1).copied() {
                    Some("list") if toks.len() == 5 => PlyProperty::List {
                        name: toks[4].to_string(),
                    },
                    Some(ty) if toks.len() == 3 => PlyProperty::Scalar {
                        name: toks[2].to_string(),
                        ty: ty.to_string(),
                    },
                    _ => return Err(parse_err(lineno, "malformed property line")),
                };
                el.properties.push(prop);
            }
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some(other) => {
                return Err(parse_err(lineno, format!("unknown header keyword `{other}`")))
            }
        }
    }
    if !saw_format {
        return Err(parse_err(0, "PLY header lacks a format line"));
    }

    let mut points = Vec::new();
    let mut faces = Vec::new();
    let mut has_faces = false;
    for el in &elements {
        let xyz = if el.name == "vertex" {
            let mut slots = [None; 3];
            for (pi, p) in el.properties.iter().enumerate() {
                if let PlyProperty::Scalar { name, ty } = p {
                    if let Some(k) = ["x", "y", "z"].iter().position(|c| c == name) {
                        if !matches!(ty.as_str(), "float" | "float32" | "double" | "float64") {
                            return Err(Error::UnsupportedFormat(format!(
                                "vertex property `{name}` has type `{ty}` (float/double required)"
                            )));
                        }
                        slots[k] = Some(pi);
                    }
                }
            }
            match slots {
                [Some(a), Some(b), Some(c)] => Some([a, b, c]),
                _ => return Err(parse_err(0, "vertex element lacks x/y/z properties")),
            }
        } else {
            None
        };
        let face_list = (el.name == "face").then(|| {
            el.properties.iter().position(|p| {
                matches!(p, PlyProperty::List { name } if name == "vertex_indices" || name == "vertex_index")
            })
        });
        has_faces |= el.name == "face";

        let mut read = 0;
        while read < el.count {
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| parse_err(0, format!("unexpected end of `{}` data", el.name)))?;
            if line.is_empty() {
                continue;
            }
            read += 1;
            let toks: Vec<&str> = line.split_whitespace().collect();
            let mut cursor = 0;
            let mut values: Vec<(usize, usize)> = Vec::with_capacity(el.properties.len());
            for p in &el.properties {
                let start = cursor;
                match p {
                    PlyProperty::Scalar { .. } => cursor += 1,
                    PlyProperty::List { .. } => {
                        let n: usize = toks
                            .get(cursor)
                            .ok_or_else(|| parse_err(lineno, "missing list length"))?
                            .parse()
                            .map_err(|_| parse_err(lineno, "bad list length"))?;
                        cursor += 1 + n;
                    }
                }
                values.push((start, cursor));
            }
            if cursor != toks.len() {
                return Err(parse_err(
                    lineno,
                    format!("expected {cursor} values, found {}", toks.len()),
                ));
            }
            if let Some([a, b, c]) = xyz {
                points.push(Point::new(
                    parse_f64(toks[values[a].0], lineno)?,
                    parse_f64(toks[values[b].0], lineno)?,
                    parse_f64(toks[values[c].0], lineno)?,
                ));
            }
            if let Some(Some(pi)) = face_list {
                let (start, end) = values[pi];
                let poly = toks[start + 1..end]
                    .iter()
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|_| parse_err(lineno, format!("bad vertex index `{t}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if poly.len() < 3 {
                    return Err(parse_err(lineno, "face needs at least 3 vertices"));
                }
                fan(&poly, &mut faces);
            }
        }
    }
    let faces = (has_faces && !faces.is_empty()).then_some(faces);
    Ok((points, faces))
}

fn write_ply(cloud: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if let Some(faces) = cloud.faces() {
        let _ = writeln!(out, "element face {}", faces.len());
        out.push_str("property list uchar int vertex_indices\n");
    }
    out.push_str("end_header\n");
    for p in cloud.points() {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    for f in cloud.faces().unwrap_or(&[]) {
        let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
    }
    out
}

fn write_obj(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for p in cloud.points() {
        let _ = writeln!(out, "v {} {} {}", p.x, p.y, p.z);
    }
    for f in cloud.faces().unwrap_or(&[]) {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

fn write_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for p in cloud.points() {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}
