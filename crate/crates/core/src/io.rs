//! Readers and writers for OFF, ASCII PLY, OBJ and XYZ files and keypoint
//! lists.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a saved
//! shape reloads to bitwise-identical coordinates.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::{Geometry, Point, PointCloud, Shape, TriMesh, DEFAULT_AREA_EPS, DEFAULT_KNN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    /// Merge vertices closer than [`MERGE_TOLERANCE`] before validation.
    pub merge_duplicates: bool,
    /// Neighbourhood size used when the file turns out to be a point cloud.
    pub knn: usize,
    pub area_eps: f64,
}

pub const MERGE_TOLERANCE: f64 = 1e-12;

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            merge_duplicates: false,
            knn: DEFAULT_KNN,
            area_eps: DEFAULT_AREA_EPS,
        }
    }
}

/// Raw contents of a geometry file before validation.
#[derive(Debug, Clone, Default)]
pub struct RawGeometry {
    pub vertices: Vec<Point>,
    /// Polygons as read; empty for point files.
    pub polygons: Vec<Vec<usize>>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_num<T: std::str::FromStr>(tok: &str, path: &Path, line: usize) -> Result<T> {
    tok.parse::<T>()
        .map_err(|_| Error::parse(path, line, format!("cannot parse number '{tok}'")))
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

pub fn parse_off(text: &str, path: &Path) -> Result<RawGeometry> {
    let mut lines = content_lines(text);
    let (ln, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let mut tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.first().map(|t| t.trim_start_matches('\u{feff}')) != Some("OFF") {
        return Err(Error::parse(path, ln, "missing OFF header"));
    }
    tokens.remove(0);
    let (ln, counts) = if tokens.is_empty() {
        let (l, c) = lines
            .next()
            .ok_or_else(|| Error::parse(path, ln, "missing counts line"))?;
        (l, c.split_whitespace().collect::<Vec<_>>())
    } else {
        (ln, tokens)
    };
    if counts.len() < 2 {
        return Err(Error::parse(path, ln, "counts line needs vertex and face counts"));
    }
    let nv: usize = parse_num(counts[0], path, ln)?;
    let nf: usize = parse_num(counts[1], path, ln)?;
    let mut raw = RawGeometry::default();
    for _ in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| Error::parse(path, ln, "unexpected end of file in vertex list"))?;
        raw.vertices.push(parse_point(l, path, ln)?);
    }
    for _ in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| Error::parse(path, ln, "unexpected end of file in face list"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let k: usize = parse_num(toks[0], path, ln)?;
        if toks.len() < k + 1 || k < 3 {
            return Err(Error::parse(path, ln, format!("face line needs {k} >= 3 indices")));
        }
        let poly = toks[1..=k]
            .iter()
            .map(|t| parse_num(t, path, ln))
            .collect::<Result<Vec<usize>>>()?;
        raw.polygons.push(poly);
    }
    Ok(raw)
}

fn parse_point(l: &str, path: &Path, ln: usize) -> Result<Point> {
    let toks: Vec<&str> = l.split_whitespace().collect();
    if toks.len() < 3 {
        return Err(Error::parse(path, ln, "expected three coordinates"));
    }
    Ok(Point::new(
        parse_num(toks[0], path, ln)?,
        parse_num(toks[1], path, ln)?,
        parse_num(toks[2], path, ln)?,
    ))
}

pub fn parse_obj(text: &str, path: &Path) -> Result<RawGeometry> {
    let mut raw = RawGeometry::default();
    for (ln, l) in content_lines(text) {
        let mut toks = l.split_whitespace();
        match toks.next() {
            Some("v") => {
                let rest: Vec<&str> = toks.collect();
                raw.vertices.push(parse_point(&rest.join(" "), path, ln)?);
            }
            Some("f") => {
                let mut poly = Vec::new();
                for t in toks {
                    let idx = t.split('/').next().unwrap_or("");
                    let i: i64 = parse_num(idx, path, ln)?;
                    let v = if i > 0 {
                        i - 1
                    } else if i < 0 {
                        raw.vertices.len() as i64 + i
                    } else {
                        return Err(Error::parse(path, ln, "OBJ indices are 1-based, found 0"));
                    };
                    if v < 0 {
                        return Err(Error::parse(path, ln, format!("relative index {i} out of range")));
                    }
                    poly.push(v as usize);
                }
                if poly.len() < 3 {
                    return Err(Error::parse(path, ln, "face needs at least three vertices"));
                }
                raw.polygons.push(poly);
            }
            _ => {}
        }
    }
    Ok(raw)
}

pub fn parse_ply(text: &str, path: &Path) -> Result<RawGeometry> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(Error::parse(path, 1, "missing ply magic")),
    }
    struct Element {
        name: String,
        count: usize,
        props: Vec<String>,
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut header_end = 0;
    for (ln, l) in lines.by_ref() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(Error::parse(path, ln, format!("unsupported PLY format '{fmt}'")));
                }
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: parse_num(count, path, ln)?,
                props: Vec::new(),
            }),
            ["property", "list", _, _, name] | ["property", _, name] => {
                let e = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, ln, "property before element"))?;
                e.props.push(name.to_string());
            }
            ["end_header"] => {
                header_end = ln;
                break;
            }
            _ => {}
        }
    }
    if header_end == 0 {
        return Err(Error::parse(path, 1, "missing end_header"));
    }
    let mut raw = RawGeometry::default();
    let mut body = lines.filter(|(_, l)| !l.is_empty());
    for e in &elements {
        let coord = |n: &str| e.props.iter().position(|p| p == n);
        for _ in 0..e.count {
            let (ln, l) = body
                .next()
                .ok_or_else(|| Error::parse(path, header_end, format!("truncated element '{}'", e.name)))?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            match e.name.as_str() {
                "vertex" => {
                    let (ix, iy, iz) = match (coord("x"), coord("y"), coord("z")) {
                        (Some(a), Some(b), Some(c)) => (a, b, c),
                        _ => return Err(Error::parse(path, ln, "vertex element lacks x/y/z")),
                    };
                    let get = |i: usize| -> Result<f64> {
                        let t = toks
                            .get(i)
                            .ok_or_else(|| Error::parse(path, ln, "too few vertex properties"))?;
                        parse_num(t, path, ln)
                    };
                    raw.vertices.push(Point::new(get(ix)?, get(iy)?, get(iz)?));
                }
                "face" => {
                    let k: usize = parse_num(
                        toks.first().ok_or_else(|| Error::parse(path, ln, "empty face line"))?,
                        path,
                        ln,
                    )?;
                    if toks.len() < k + 1 || k < 3 {
                        return Err(Error::parse(path, ln, format!("face line needs {k} >= 3 indices")));
                    }
                    raw.polygons.push(
                        toks[1..=k]
                            .iter()
                            .map(|t| parse_num(t, path, ln))
                            .collect::<Result<Vec<usize>>>()?,
                    );
                }
                _ => {}
            }
        }
    }
    Ok(raw)
}

pub fn parse_xyz(text: &str, path: &Path) -> Result<RawGeometry> {
    let mut raw = RawGeometry::default();
    for (ln, l) in content_lines(text) {
        raw.vertices.push(parse_point(l, path, ln)?);
    }
    Ok(raw)
}

pub fn read_raw(path: &Path) -> Result<RawGeometry> {
    let text = read_text(path)?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "off" => parse_off(&text, path),
        "obj" => parse_obj(&text, path),
        "ply" => parse_ply(&text, path),
        "xyz" | "txt" | "pts" => parse_xyz(&text, path),
        _ => Err(Error::parse(path, 0, format!("unrecognized file extension '{ext}'"))),
    }
}

/// Fan-splits polygons into triangles.
pub fn triangulate(polygons: &[Vec<usize>]) -> Vec<[usize; 3]> {
    let mut tris = Vec::with_capacity(polygons.len());
    for p in polygons {
        for k in 1..p.len() - 1 {
            tris.push([p[0], p[k], p[k + 1]]);
        }
    }
    tris
}

/// Merges vertices whose coordinates all agree within `tol`; returns the
/// kept vertices and the `old -> new` remap.
pub fn merge_close_vertices(vertices: &[Point], tol: f64) -> (Vec<Point>, Vec<usize>) {
    let mut order: Vec<usize> = (0..vertices.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (vertices[a], vertices[b]);
        p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)).then(p.z.total_cmp(&q.z)).then(a.cmp(&b))
    });
    let mut rep = (0..vertices.len()).collect::<Vec<_>>();
    for w in 0..order.len() {
        let a = order[w];
        if rep[a] != a {
            continue;
        }
        for &b in &order[w + 1..] {
            let d = vertices[b] - vertices[a];
            if d.x > tol {
                break;
            }
            if d.amax() <= tol && rep[b] == b {
                rep[b] = a;
            }
        }
    }
    let mut remap = vec![usize::MAX; vertices.len()];
    let mut kept = Vec::new();
    for v in 0..vertices.len() {
        if rep[v] == v {
            remap[v] = kept.len();
            kept.push(vertices[v]);
        }
    }
    for v in 0..vertices.len() {
        remap[v] = remap[rep[v]];
    }
    (kept, remap)
}

/// Loads a mesh or point cloud; a file without faces is a point cloud.
/// Returns the `old -> new` vertex remap when vertices were merged.
pub fn load_geometry(path: &Path, options: &LoadOptions) -> Result<(Geometry, Option<Vec<usize>>)> {
    let raw = read_raw(path)?;
    if raw.vertices.is_empty() {
        return Err(Error::parse(path, 0, "file contains no vertices"));
    }
    if raw.polygons.is_empty() {
        let (cloud, remap) = PointCloud::new(raw.vertices, options.knn)?;
        let identity = remap.iter().enumerate().all(|(i, &r)| i == r);
        return Ok((Geometry::Cloud(cloud), (!identity).then_some(remap)));
    }
    for (fi, p) in raw.polygons.iter().enumerate() {
        if let Some(&v) = p.iter().find(|&&v| v >= raw.vertices.len()) {
            return Err(Error::Validation(format!(
                "{}: face {fi} references vertex {v}, file has {} vertices",
                path.display(),
                raw.vertices.len()
            )));
        }
    }
    let mut faces = triangulate(&raw.polygons);
    let (vertices, remap) = if options.merge_duplicates {
        let (kept, remap) = merge_close_vertices(&raw.vertices, MERGE_TOLERANCE);
        let before = faces.len();
        faces = faces
            .into_iter()
            .map(|f| f.map(|v| remap[v]))
            .filter(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2])
            .collect();
        if faces.len() < before {
            log::warn!("{}: dropped {} faces collapsed by merging", path.display(), before - faces.len());
        }
        (kept, Some(remap))
    } else {
        (raw.vertices, None)
    };
    let mesh = TriMesh::with_area_eps(vertices, faces, options.area_eps)
        .map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        })?;
    Ok((Geometry::Mesh(mesh), remap))
}

#[derive(Debug, Serialize, Deserialize)]
struct KeypointFile {
    indices: Vec<usize>,
}

/// Plain text (one 0-based index per line) or JSON `{"indices": [...]}`.
pub fn load_keypoints(path: &Path) -> Result<Vec<usize>> {
    let text = read_text(path)?;
    parse_keypoints(&text, path)
}

pub fn parse_keypoints(text: &str, path: &Path) -> Result<Vec<usize>> {
    if text.trim_start().starts_with('{') {
        let f: KeypointFile = serde_json::from_str(text)
            .map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        return Ok(f.indices);
    }
    content_lines(text)
        .map(|(ln, l)| parse_num(l, path, ln))
        .collect()
}

pub fn load_shape(path: &Path, keypoints_path: &Path, options: &LoadOptions) -> Result<Shape> {
    let (geometry, remap) = load_geometry(path, options)?;
    let mut keypoints = load_keypoints(keypoints_path)?;
    if let Some(remap) = remap {
        for k in keypoints.iter_mut() {
            if *k < remap.len() {
                *k = remap[*k];
            }
        }
    }
    let label = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("shape")
        .to_string();
    Shape::new(geometry, keypoints, label)
}

pub fn off_string(mesh: &TriMesh) -> String {
    write_off(mesh.vertices(), mesh.faces())
}

pub fn write_off(vertices: &[Point], faces: &[[usize; 3]]) -> String {
    let mut s = String::with_capacity(32 * (vertices.len() + faces.len()) + 16);
    let _ = writeln!(s, "OFF\n{} {} 0", vertices.len(), faces.len());
    for p in vertices {
        let _ = writeln!(s, "{:?} {:?} {:?}", p.x, p.y, p.z);
    }
    for f in faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

pub fn xyz_string(points: &[Point]) -> String {
    let mut s = String::new();
    for p in points {
        let _ = writeln!(s, "{:?} {:?} {:?}", p.x, p.y, p.z);
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the geometry as OFF (meshes) or XYZ (clouds) plus a keypoint text
/// file next to it. Returns the two written paths.
pub fn save_shape(shape: &Shape, path: &Path) -> Result<(PathBuf, PathBuf)> {
    let geometry_path = match shape.geometry() {
        Geometry::Mesh(m) => {
            let p = path.with_extension("off");
            write_file(&p, &off_string(m))?;
            p
        }
        Geometry::Cloud(c) => {
            let p = path.with_extension("xyz");
            write_file(&p, &xyz_string(c.points()))?;
            p
        }
    };
    let kp_path = path.with_extension("kp.txt");
    save_keypoints(shape.keypoints(), &kp_path)?;
    Ok((geometry_path, kp_path))
}

pub fn save_keypoints(keypoints: &[usize], path: &Path) -> Result<()> {
    let mut s = String::new();
    for k in keypoints {
        let _ = writeln!(s, "{k}");
    }
    write_file(path, &s)
}

pub fn save_off(vertices: &[Point], faces: &[[usize; 3]], path: &Path) -> Result<()> {
    write_file(path, &write_off(vertices, faces))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
