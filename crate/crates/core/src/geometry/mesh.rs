//! Indexed triangle meshes: OBJ and STL reading and writing.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Location, Result};

/// Vertices closer than this (model units) are merged on load.
pub const WELD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeshSurface {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshFormat {
    Obj,
    StlAscii,
    StlBinary,
    Auto,
}

impl std::str::FromStr for MeshFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "obj" => Ok(MeshFormat::Obj),
            "stl_ascii" => Ok(MeshFormat::StlAscii),
            "stl_binary" => Ok(MeshFormat::StlBinary),
            // plain "stl" lets the content decide between the two encodings
            "stl" | "auto" => Ok(MeshFormat::Auto),
            other => Err(Error::Format(format!("unknown mesh format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Obj,
    StlBinary,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "obj" => Ok(ExportFormat::Obj),
            "stl" | "stl_binary" => Ok(ExportFormat::StlBinary),
            other => Err(Error::Format(format!("unknown export format {other:?}"))),
        }
    }
}

impl MeshSurface {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Check the index invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(Error::contract(format!("triangle {i} indexes past {n} vertices")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::contract(format!("triangle {i} is degenerate: {t:?}")));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds, `None` for a mesh without vertices.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        let (mut lo, mut hi) = (first, first);
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Some((lo, hi))
    }

    /// Build from a triangle soup, merging vertices within
    /// [`WELD_TOLERANCE`] and dropping triangles that collapse.
    pub fn from_soup(corners: &[[f64; 3]]) -> Self {
        let mut welder = Welder::default();
        let ids: Vec<usize> = corners.iter().map(|p| welder.insert(*p)).collect();
        let triangles = ids
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .filter(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2])
            .collect();
        MeshSurface {
            vertices: welder.vertices,
            triangles,
        }
    }

    /// Weld an indexed mesh.
    pub fn welded(&self) -> Self {
        let mut welder = Welder::default();
        let remap: Vec<usize> = self.vertices.iter().map(|p| welder.insert(*p)).collect();
        let triangles = self
            .triangles
            .iter()
            .map(|t| t.map(|i| remap[i]))
            .filter(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2])
            .collect();
        MeshSurface {
            vertices: welder.vertices,
            triangles,
        }
    }
}

/// Spatial hash for vertex welding. Cells are one tolerance wide, so a
/// match is always in the same or a neighboring cell.
#[derive(Default)]
struct Welder {
    vertices: Vec<[f64; 3]>,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl Welder {
    fn cell(p: [f64; 3]) -> [i64; 3] {
        p.map(|c| (c / WELD_TOLERANCE).floor() as i64)
    }

    fn insert(&mut self, p: [f64; 3]) -> usize {
        let c = Self::cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        for &i in ids {
                            if dist2(self.vertices[i], p) <= WELD_TOLERANCE * WELD_TOLERANCE {
                                return i;
                            }
                        }
                    }
                }
            }
        }
        let id = self.vertices.len();
        self.vertices.push(p);
        self.cells.entry(c).or_default().push(id);
        id
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn no_geometry() -> Error {
    Error::parse(Location::Whole, "no geometry")
}

pub fn parse_mesh(bytes: &[u8], format: MeshFormat) -> Result<MeshSurface> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(no_geometry());
    }
    let format = match format {
        MeshFormat::Auto => detect_format(bytes)?,
        f => f,
    };
    let mesh = match format {
        MeshFormat::Obj => parse_obj(text(bytes)?)?,
        MeshFormat::StlAscii => parse_stl_ascii(text(bytes)?)?,
        MeshFormat::StlBinary => parse_stl_binary(bytes)?,
        MeshFormat::Auto => unreachable!("resolved above"),
    };
    if mesh.is_empty() {
        return Err(no_geometry());
    }
    Ok(mesh)
}

fn text(bytes: &[u8]) -> Result<&str> {
    std::str::from_utf8(bytes).map_err(|e| {
        Error::parse(Location::Offset(e.valid_up_to()), "mesh text is not valid utf-8")
    })
}

fn detect_format(bytes: &[u8]) -> Result<MeshFormat> {
    if bytes.len() >= 84 {
        let n = u32::from_le_bytes(bytes[80..84].try_into().expect("4 bytes")) as usize;
        if n.checked_mul(50).and_then(|b| b.checked_add(84)) == Some(bytes.len()) {
            return Ok(MeshFormat::StlBinary);
        }
    }
    if let Ok(s) = std::str::from_utf8(bytes) {
        let trimmed = s.trim_start();
        if trimmed.starts_with("solid") && s.contains("facet") {
            return Ok(MeshFormat::StlAscii);
        }
        let has_obj_records = s.lines().any(|l| {
            let l = l.trim_start();
            l.starts_with("v ") || l.starts_with("v\t") || l.starts_with("f ") || l.starts_with("f\t")
        });
        if has_obj_records {
            return Ok(MeshFormat::Obj);
        }
    }
    Err(Error::Format("unrecognized mesh format: no geometry found".into()))
}

fn parse_coords<'a>(mut it: impl Iterator<Item = &'a str>, line: usize, what: &str) -> Result<[f64; 3]> {
    let mut p = [0.0; 3];
    for c in p.iter_mut() {
        let tok = it
            .next()
            .ok_or_else(|| Error::parse(Location::Line(line), format!("{what} needs 3 coordinates")))?;
        *c = tok
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::parse(Location::Line(line), format!("bad coordinate {tok:?}")))?;
    }
    Ok(p)
}

fn parse_obj(src: &str) -> Result<MeshSurface> {
    let mut vertices = Vec::new();
    // (line, corner indices as written, resolved lazily for forward refs)
    let mut faces: Vec<(usize, Vec<i64>)> = Vec::new();
    for (n, raw) in src.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("");
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => vertices.push(parse_coords(tok, line_no, "vertex")?),
            Some("f") => {
                let mut idx = Vec::new();
                for t in tok {
                    let first = t.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| {
                        Error::parse(Location::Line(line_no), format!("bad face index {t:?}"))
                    })?;
                    let resolved = match i {
                        0 => {
                            return Err(Error::parse(Location::Line(line_no), "face index 0 is invalid"))
                        }
                        i if i < 0 => vertices.len() as i64 + i,
                        i => i - 1,
                    };
                    if resolved < 0 {
                        return Err(Error::parse(
                            Location::Line(line_no),
                            format!("relative index {i} reaches before the first vertex"),
                        ));
                    }
                    idx.push(resolved);
                }
                if idx.len() < 3 {
                    return Err(Error::parse(Location::Line(line_no), "face needs at least 3 vertices"));
                }
                faces.push((line_no, idx));
            }
            _ => {}
        }
    }
    let mut triangles = Vec::new();
    for (line_no, idx) in faces {
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= vertices.len()) {
            return Err(Error::parse(
                Location::Line(line_no),
                format!("face references vertex {} of {}", bad + 1, vertices.len()),
            ));
        }
        for k in 1..idx.len() - 1 {
            triangles.push([idx[0] as usize, idx[k] as usize, idx[k + 1] as usize]);
        }
    }
    Ok(MeshSurface { vertices, triangles }.welded())
}

fn parse_stl_ascii(src: &str) -> Result<MeshSurface> {
    let mut corners = Vec::new();
    let mut facet: Vec<[f64; 3]> = Vec::new();
    let mut in_loop = false;
    for (n, raw) in src.lines().enumerate() {
        let line_no = n + 1;
        let mut tok = raw.split_whitespace();
        match tok.next() {
            Some("outer") => {
                in_loop = true;
                facet.clear();
            }
            Some("vertex") => {
                if !in_loop {
                    return Err(Error::parse(Location::Line(line_no), "vertex outside of a loop"));
                }
                facet.push(parse_coords(tok, line_no, "vertex")?);
            }
            Some("endloop") => {
                if facet.len() < 3 {
                    return Err(Error::parse(
                        Location::Line(line_no),
                        format!("facet has {} vertices", facet.len()),
                    ));
                }
                for k in 1..facet.len() - 1 {
                    corners.extend([facet[0], facet[k], facet[k + 1]]);
                }
                in_loop = false;
            }
            Some("solid" | "facet" | "endfacet" | "endsolid") | None => {}
            Some(other) => {
                return Err(Error::parse(Location::Line(line_no), format!("unexpected keyword {other:?}")))
            }
        }
    }
    if in_loop {
        return Err(Error::parse(Location::Whole, "unterminated facet loop"));
    }
    Ok(MeshSurface::from_soup(&corners))
}

fn parse_stl_binary(bytes: &[u8]) -> Result<MeshSurface> {
    if bytes.len() < 84 {
        return Err(Error::parse(Location::Offset(bytes.len()), "binary STL shorter than its 84-byte header"));
    }
    let n = u32::from_le_bytes(bytes[80..84].try_into().expect("4 bytes")) as usize;
    let expected = 84 + 50 * n;
    if bytes.len() != expected {
        return Err(Error::parse(
            Location::Offset(80),
            format!("header declares {n} facets ({expected} bytes), file has {} bytes", bytes.len()),
        ));
    }
    let mut corners = Vec::with_capacity(3 * n);
    for f in 0..n {
        let rec = &bytes[84 + 50 * f..84 + 50 * (f + 1)];
        for v in 0..3 {
            let mut p = [0.0; 3];
            for (a, c) in p.iter_mut().enumerate() {
                let o = 12 + 12 * v + 4 * a;
                let x = f32::from_le_bytes(rec[o..o + 4].try_into().expect("4 bytes"));
                if !x.is_finite() {
                    return Err(Error::parse(Location::Offset(84 + 50 * f + o), "non-finite coordinate"));
                }
                *c = f64::from(x);
            }
            corners.push(p);
        }
    }
    Ok(MeshSurface::from_soup(&corners))
}

fn normal(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len > 0.0 {
        n.map(|x| x / len)
    } else {
        [0.0; 3]
    }
}

pub fn export_mesh(mesh: &MeshSurface, format: ExportFormat) -> Vec<u8> {
    match format {
        ExportFormat::Obj => {
            let mut s = String::new();
            for v in &mesh.vertices {
                s.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
            }
            for t in &mesh.triangles {
                s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
            }
            s.into_bytes()
        }
        ExportFormat::StlBinary => {
            let mut out = Vec::with_capacity(84 + 50 * mesh.triangles.len());
            let mut header = [b' '; 80];
            header[..10].copy_from_slice(b"binary stl");
            out.extend_from_slice(&header);
            out.extend_from_slice(&(mesh.triangles.len() as u32).to_le_bytes());
            for t in &mesh.triangles {
                let [a, b, c] = t.map(|i| mesh.vertices[i]);
                for x in normal(a, b, c).into_iter().chain(a).chain(b).chain(c) {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
                out.extend_from_slice(&0u16.to_le_bytes());
            }
            out
        }
    }
}
