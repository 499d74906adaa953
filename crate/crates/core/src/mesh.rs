//! Triangle meshes: ASCII PLY ingestion, builtin test objects and the
//! procedural checker texture used for untextured models.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How surface color is produced when rasterizing.
#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    /// Barycentric interpolation of per-vertex RGB.
    VertexColors(Vec<[f32; 3]>),
    /// 3D checkerboard: each model-frame cell gets a hashed RGB color.
    Checker { cell: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub texture: Texture,
    pub diameter: f64,
}

/// Checker cells per mesh diameter for the procedural texture.
pub const CHECKER_CELLS_PER_DIAMETER: f64 = 20.0;

impl Texture {
    /// Color of the surface point `p` (model frame) lying on a face whose
    /// vertex weights are `bary`.
    #[inline]
    pub fn shade(&self, face: &[u32; 3], bary: [f64; 3], p: &Vector3<f64>) -> [f32; 3] {
        match self {
            Texture::VertexColors(colors) => {
                let mut out = [0.0f32; 3];
                for (w, &vi) in bary.iter().zip(face.iter()) {
                    let c = colors[vi as usize];
                    for ch in 0..3 {
                        out[ch] += *w as f32 * c[ch];
                    }
                }
                out
            }
            Texture::Checker { cell } => checker_color(p, *cell),
        }
    }
}

/// Color of the lattice cell containing `p`; the lattice is shifted off the
/// origin so symmetric meshes do not sit on cell boundaries.
pub fn checker_color(p: &Vector3<f64>, cell: f64) -> [f32; 3] {
    let i = (p.x / cell + 0.371).floor() as i64;
    let j = (p.y / cell + 0.371).floor() as i64;
    let k = (p.z / cell + 0.371).floor() as i64;
    let mut h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (k as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 31;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 29;
    let c = |s: u32| ((h >> s) & 0xFFFF) as f32 / 65535.0;
    [c(0), c(16), c(32)]
}

/// Largest pairwise vertex distance (exhaustive).
pub fn diameter(vertices: &[Vector3<f64>]) -> f64 {
    let mut best2: f64 = 0.0;
    for (i, a) in vertices.iter().enumerate() {
        for b in &vertices[i + 1..] {
            best2 = best2.max((a - b).norm_squared());
        }
    }
    best2.sqrt()
}

impl TriangleMesh {
    /// Builds a mesh, validating indices; untextured meshes get the checker.
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[u32; 3]>, colors: Option<Vec<[f32; 3]>>) -> Result<Self> {
        let n = vertices.len();
        if let Some(bad) = faces.iter().flatten().find(|&&i| i as usize >= n) {
            return Err(Error::InvalidConfig(format!(
                "face index {bad} out of range for {n} vertices"
            )));
        }
        let diameter = diameter(&vertices);
        let texture = match colors {
            Some(c) => {
                if c.len() != n {
                    return Err(Error::DimensionMismatch(format!("{} colors for {n} vertices", c.len())));
                }
                Texture::VertexColors(c)
            }
            None => Texture::Checker {
                cell: if diameter > 0.0 {
                    diameter / CHECKER_CELLS_PER_DIAMETER
                } else {
                    1.0
                },
            },
        };
        Ok(Self {
            vertices,
            faces,
            texture,
            diameter,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.vertices.is_empty() {
            return Vector3::zeros();
        }
        self.vertices.iter().sum::<Vector3<f64>>() / self.vertices.len() as f64
    }

    pub fn surface_area(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i as usize]);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    /// Area-weighted uniform samples on the surface.
    pub fn sample_surface<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vector3<f64>> {
        let mut cdf = Vec::with_capacity(self.faces.len());
        let mut acc = 0.0;
        for f in &self.faces {
            let [a, b, c] = f.map(|i| self.vertices[i as usize]);
            acc += 0.5 * (b - a).cross(&(c - a)).norm();
            cdf.push(acc);
        }
        if acc <= 0.0 {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let r = rng.gen::<f64>() * acc;
                let fi = cdf.partition_point(|&c| c < r).min(self.faces.len() - 1);
                let [a, b, c] = self.faces[fi].map(|i| self.vertices[i as usize]);
                let (mut s, mut t): (f64, f64) = (rng.gen(), rng.gen());
                if s + t > 1.0 {
                    s = 1.0 - s;
                    t = 1.0 - t;
                }
                a + (b - a) * s + (c - a) * t
            })
            .collect()
    }

    /// True when the vertex set spans 3D (smallest PCA extent is non-negligible).
    pub fn is_volumetric(&self) -> bool {
        if self.vertices.len() < 4 {
            return false;
        }
        let c = self.centroid();
        let cov = self
            .vertices
            .iter()
            .map(|v| (v - c) * (v - c).transpose())
            .sum::<nalgebra::Matrix3<f64>>();
        let eig = cov.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        hi > 0.0 && lo / hi > 1e-6
    }

    pub fn load_ply(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_ply(&text)
    }

    pub fn to_ply_string(&self) -> String {
        use std::fmt::Write;
        let colors = match &self.texture {
            Texture::VertexColors(c) => Some(c),
            Texture::Checker { .. } => None,
        };
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        s.push_str("property float x\nproperty float y\nproperty float z\n");
        if colors.is_some() {
            s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        }
        let _ = writeln!(s, "element face {}", self.faces.len());
        s.push_str("property list uchar int vertex_indices\nend_header\n");
        for (i, v) in self.vertices.iter().enumerate() {
            let _ = write!(s, "{} {} {}", v.x, v.y, v.z);
            if let Some(c) = colors {
                let [r, g, b] = c[i].map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8);
                let _ = write!(s, " {r} {g} {b}");
            }
            s.push('\n');
        }
        for f in &self.faces {
            let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
        }
        s
    }
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    // (name, is_list, is_float)
    props: Vec<(String, bool, bool)>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn is_float_type(t: &str) -> bool {
    matches!(t, "float" | "float32" | "double" | "float64")
}

/// Parses an ASCII PLY document. Line numbers in errors are 1-based.
pub fn parse_ply(text: &str) -> Result<TriangleMesh> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(parse_err(n, "missing 'ply' magic")),
        None => return Err(parse_err(1, "missing 'ply' magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    let mut header_done = false;
    for (n, line) in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(parse_err(n, "only ASCII PLY is supported"));
                }
                saw_format = true;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| parse_err(n, "element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(n, "element without valid count"))?;
                elements.push(PlyElement {
                    name: name.to_owned(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(n, "property before any element"))?;
                let t = tok.next().ok_or_else(|| parse_err(n, "property without type"))?;
                if t == "list" {
                    let (_, _, name) = (tok.next(), tok.next(), tok.next());
                    let name = name.ok_or_else(|| parse_err(n, "malformed list property"))?;
                    el.props.push((name.to_owned(), true, false));
                } else {
                    let name = tok.next().ok_or_else(|| parse_err(n, "property without name"))?;
                    el.props.push((name.to_owned(), false, is_float_type(t)));
                }
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err(parse_err(n, format!("unexpected header keyword '{other}'"))),
        }
    }
    if !header_done {
        return Err(parse_err(text.lines().count().max(1), "missing end_header"));
    }
    if !saw_format {
        return Err(parse_err(1, "missing format line"));
    }

    let mut vertices = Vec::new();
    let mut colors: Vec<[f32; 3]> = Vec::new();
    let mut faces = Vec::new();
    let mut has_color = false;

    for el in &elements {
        let idx: HashMap<&str, usize> = el.props.iter().enumerate().map(|(i, p)| (p.0.as_str(), i)).collect();
        for _ in 0..el.count {
            let (n, line) = loop {
                match lines.next() {
                    Some((_, "")) => continue,
                    Some(l) => break l,
                    None => {
                        return Err(parse_err(
                            text.lines().count() + 1,
                            format!("unexpected end of file in element '{}'", el.name),
                        ))
                    }
                }
            };
            let toks: Vec<&str> = line.split_whitespace().collect();
            match el.name.as_str() {
                "vertex" => {
                    if el.props.iter().any(|p| p.1) {
                        return Err(parse_err(n, "list properties on vertices are not supported"));
                    }
                    if toks.len() < el.props.len() {
                        return Err(parse_err(n, format!("expected {} values", el.props.len())));
                    }
                    let num = |name: &str| -> Result<Option<f64>> {
                        match idx.get(name) {
                            Some(&i) => toks[i]
                                .parse::<f64>()
                                .map(Some)
                                .map_err(|_| parse_err(n, format!("bad number '{}'", toks[i]))),
                            None => Ok(None),
                        }
                    };
                    let (x, y, z) = match (num("x")?, num("y")?, num("z")?) {
                        (Some(x), Some(y), Some(z)) => (x, y, z),
                        _ => return Err(parse_err(n, "vertex requires x, y, z")),
                    };
                    vertices.push(Vector3::new(x, y, z));
                    if let (Some(r), Some(g), Some(b)) = (num("red")?, num("green")?, num("blue")?) {
                        has_color = true;
                        let scale = if el.props[idx["red"]].2 { 1.0 } else { 1.0 / 255.0 };
                        colors.push([r, g, b].map(|c| (c * scale) as f32));
                    }
                }
                "face" => {
                    let count: usize = toks
                        .first()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| parse_err(n, "face without vertex count"))?;
                    if count != 3 {
                        return Err(parse_err(n, "non-triangular face"));
                    }
                    if toks.len() < 4 {
                        return Err(parse_err(n, "face lists fewer than 3 indices"));
                    }
                    let mut f = [0u32; 3];
                    for (k, t) in toks[1..4].iter().enumerate() {
                        let v: i64 = t.parse().map_err(|_| parse_err(n, format!("bad index '{t}'")))?;
                        if v < 0 || v as usize >= vertices_expected(&elements) {
                            return Err(parse_err(n, format!("face index {v} out of range")));
                        }
                        f[k] = v as u32;
                    }
                    faces.push(f);
                }
                _ => {}
            }
        }
    }
    TriangleMesh::new(vertices, faces, has_color.then_some(colors))
}

fn vertices_expected(elements: &[PlyElement]) -> usize {
    elements.iter().find(|e| e.name == "vertex").map_or(0, |e| e.count)
}

/// Meshes available without external assets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinMesh {
    CheckerCube,
    Icosphere,
    Tetra,
}

impl std::str::FromStr for BuiltinMesh {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checker_cube" => Ok(Self::CheckerCube),
            "icosphere" => Ok(Self::Icosphere),
            "tetra" => Ok(Self::Tetra),
            other => Err(Error::InvalidConfig(format!("unknown builtin mesh '{other}'"))),
        }
    }
}

impl BuiltinMesh {
    pub fn build(self) -> TriangleMesh {
        match self {
            Self::CheckerCube => checker_cube(0.1, 8),
            Self::Icosphere => icosphere(0.05, 3),
            Self::Tetra => tetrahedron(0.1),
        }
    }
}

/// Loads `checker_cube`/`icosphere`/`tetra` by name, otherwise a PLY path.
pub fn load_mesh(source: &str) -> Result<TriangleMesh> {
    match source.parse::<BuiltinMesh>() {
        Ok(b) => Ok(b.build()),
        Err(_) => TriangleMesh::load_ply(source),
    }
}

/// Axis-aligned cube centered at the origin, each face split into `n × n`
/// quads (2·n²·6 triangles, outward winding).
pub fn checker_cube(side: f64, n: usize) -> TriangleMesh {
    let h = side / 2.0;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    // (normal axis, sign): the face plane is axis = sign·h, spanned by (u, v)
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
            let base = vertices.len() as u32;
            for j in 0..=n {
                for i in 0..=n {
                    let mut p = Vector3::zeros();
                    p[axis] = sign * h;
                    p[ua] = -h + side * i as f64 / n as f64;
                    p[va] = -h + side * j as f64 / n as f64;
                    vertices.push(p);
                }
            }
            let stride = (n + 1) as u32;
            for j in 0..n as u32 {
                for i in 0..n as u32 {
                    let a = base + j * stride + i;
                    let (b, c, d) = (a + 1, a + stride, a + stride + 1);
                    // u × v points along +axis; flip for the negative face
                    if sign > 0.0 {
                        faces.push([a, b, d]);
                        faces.push([a, d, c]);
                    } else {
                        faces.push([a, d, b]);
                        faces.push([a, c, d]);
                    }
                }
            }
        }
    }
    TriangleMesh::new(vertices, faces, None).expect("valid cube")
}

pub fn icosphere(radius: f64, subdivisions: usize) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
        let mut mid = |a: u32, b: u32, verts: &mut Vec<Vector3<f64>>| -> u32 {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) / 2.0).normalize());
                verts.len() as u32 - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let verts = verts.into_iter().map(|v| v * radius).collect();
    TriangleMesh::new(verts, faces, None).expect("valid icosphere")
}

pub fn tetrahedron(edge: f64) -> TriangleMesh {
    let s = edge / (2.0 * 2f64.sqrt());
    let vertices = vec![
        Vector3::new(s, s, s),
        Vector3::new(s, -s, -s),
        Vector3::new(-s, s, -s),
        Vector3::new(-s, -s, s),
    ];
    let faces = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    TriangleMesh::new(vertices, faces, None).expect("valid tetrahedron")
}
