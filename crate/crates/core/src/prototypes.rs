//! 3D CAD prototypes: mesh + named keypoints, a registry keyed by class, and
//! silhouette rasterization into binary masks.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_with, rotation_from_pose, CameraPose, Point2, Point3};

#[derive(Debug, Error)]
pub enum PrototypeError {
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("missing keypoint file {0}")]
    MissingKeypointFile(PathBuf),
    #[error("empty class: {0}")]
    EmptyClass(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid prototype {id}: {msg}")]
    Invalid { id: String, msg: String },
}

fn parse_err(path: impl fmt::Display, msg: impl Into<String>) -> PrototypeError {
    PrototypeError::Parse { path: path.to_string(), msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class: String,
    pub id: String,
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
    pub keypoints: BTreeMap<String, Point3>,
}

impl Prototype {
    /// Validates indices and finiteness. Does not touch centering.
    pub fn new(
        class: impl Into<String>,
        id: impl Into<String>,
        vertices: Vec<Point3>,
        faces: Vec<[usize; 3]>,
        keypoints: BTreeMap<String, Point3>,
    ) -> Result<Self, PrototypeError> {
        let proto = Self { class: class.into(), id: id.into(), vertices, faces, keypoints };
        proto.validate()?;
        Ok(proto)
    }

    fn invalid(&self, msg: impl Into<String>) -> PrototypeError {
        PrototypeError::Invalid { id: self.id.clone(), msg: msg.into() }
    }

    pub fn validate(&self) -> Result<(), PrototypeError> {
        if self.faces.is_empty() {
            return Err(self.invalid("mesh has no faces"));
        }
        let n = self.vertices.len();
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(self.invalid(format!("face {f:?} indexes past {n} vertices")));
        }
        if !self.vertices.iter().all(Point3::is_finite) {
            return Err(self.invalid("non-finite vertex"));
        }
        if !self.keypoints.values().all(Point3::is_finite) {
            return Err(self.invalid("non-finite keypoint"));
        }
        Ok(())
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.vertices.len().max(1) as f64;
        let s = self.vertices.iter().fold(Point3::default(), |acc, v| {
            Point3::new(acc.x + v.x, acc.y + v.y, acc.z + v.z)
        });
        Point3::new(s.x / n, s.y / n, s.z / n)
    }

    /// Diagonal of the axis-aligned bounding box of the vertices.
    pub fn diameter(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for (k, c) in [v.x, v.y, v.z].into_iter().enumerate() {
                lo[k] = lo[k].min(c);
                hi[k] = hi[k].max(c);
            }
        }
        (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn is_centered(&self) -> bool {
        let c = self.centroid();
        (c.x * c.x + c.y * c.y + c.z * c.z).sqrt() <= 1e-3 * self.diameter()
    }

    /// Shifts vertices and keypoints so the vertex centroid is the origin.
    /// Returns the applied offset.
    pub fn recenter(&mut self) -> Point3 {
        let c = self.centroid();
        let shift = |p: &mut Point3| {
            p.x -= c.x;
            p.y -= c.y;
            p.z -= c.z;
        };
        self.vertices.iter_mut().for_each(shift);
        self.keypoints.values_mut().for_each(shift);
        c
    }

    /// Closed axis-aligned box with the given full extents, keypoints on the
    /// eight corners plus the centers of the top and front faces.
    pub fn cuboid(class: &str, id: &str, extent: [f64; 3]) -> Self {
        let [hx, hy, hz] = extent.map(|e| e / 2.0);
        let mut vertices = Vec::with_capacity(8);
        let mut keypoints = BTreeMap::new();
        for (zi, zname) in [(-1.0, "bottom"), (1.0, "top")] {
            for (yi, yname) in [(-1.0, "front"), (1.0, "back")] {
                for (xi, xname) in [(-1.0, "left"), (1.0, "right")] {
                    let p = Point3::new(xi * hx, yi * hy, zi * hz);
                    vertices.push(p);
                    keypoints.insert(format!("{yname}_{xname}_{zname}"), p);
                }
            }
        }
        keypoints.insert("top_center".into(), Point3::new(0.0, 0.0, hz));
        keypoints.insert("front_center".into(), Point3::new(0.0, -hy, 0.0));
        // vertex index = z*4 + y*2 + x with bit order (x, y, z)
        let quads = [
            [0, 1, 3, 2], // bottom
            [4, 6, 7, 5], // top
            [0, 4, 5, 1], // front
            [2, 3, 7, 6], // back
            [0, 2, 6, 4], // left
            [1, 5, 7, 3], // right
        ];
        let faces = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        Self { class: class.into(), id: id.into(), vertices, faces, keypoints }
    }
}

/// Minimal OBJ reader: `v x y z` and `f i j k ...` (1-based, `i/t/n` forms
/// allowed, negative indices relative). Polygons are fan-triangulated; all
/// other statements are ignored.
pub fn parse_obj(text: &str, origin: &str) -> Result<(Vec<Point3>, Vec<[usize; 3]>), PrototypeError> {
    let mut vertices = Vec::new();
    let mut polys: Vec<(usize, Vec<i64>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let coords: Vec<f64> = it
                    .take(3)
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|e| parse_err(origin, format!("line {}: {e}", lineno + 1)))?;
                if coords.len() != 3 {
                    return Err(parse_err(origin, format!("line {}: vertex needs 3 coordinates", lineno + 1)));
                }
                vertices.push(Point3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<i64> = it
                    .map(|tok| tok.split('/').next().unwrap_or("").parse::<i64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| parse_err(origin, format!("line {}: {e}", lineno + 1)))?;
                if idx.len() < 3 {
                    return Err(parse_err(origin, format!("line {}: face needs >= 3 vertices", lineno + 1)));
                }
                polys.push((lineno + 1, idx));
            }
            _ => {}
        }
    }
    let n = vertices.len() as i64;
    let mut faces = Vec::new();
    for (lineno, poly) in polys {
        let resolved: Vec<usize> = poly
            .iter()
            .map(|&i| {
                let r = if i > 0 { i - 1 } else { n + i };
                if i == 0 || r < 0 || r >= n {
                    Err(parse_err(origin, format!("line {lineno}: face index {i} out of range (1..={n})")))
                } else {
                    Ok(r as usize)
                }
            })
            .collect::<Result<_, _>>()?;
        for k in 1..resolved.len() - 1 {
            faces.push([resolved[0], resolved[k], resolved[k + 1]]);
        }
    }
    if faces.is_empty() {
        return Err(parse_err(origin, "mesh has no faces"));
    }
    Ok((vertices, faces))
}

pub fn write_obj(proto: &Prototype) -> String {
    let mut s = format!("# {} / {}\n", proto.class, proto.id);
    for v in &proto.vertices {
        s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in &proto.faces {
        s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    s
}

/// One entry of the registry manifest; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub class: String,
    pub id: String,
    pub mesh: PathBuf,
    pub keypoints: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRegistry {
    classes: BTreeMap<String, Vec<Prototype>>,
}

impl PrototypeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a prototype, recentering it if needed.
    pub fn insert(&mut self, mut proto: Prototype) -> Result<(), PrototypeError> {
        proto.validate()?;
        if !proto.is_centered() {
            let c = proto.recenter();
            log::warn!(
                "prototype {}/{} not origin-centered; shifted by ({:.4}, {:.4}, {:.4})",
                proto.class,
                proto.id,
                c.x,
                c.y,
                c.z
            );
        }
        self.classes.entry(proto.class.clone()).or_default().push(proto);
        Ok(())
    }

    pub fn class(&self, class: &str) -> &[Prototype] {
        self.classes.get(class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn find(&self, class: &str, id: &str) -> Option<&Prototype> {
        self.class(class).iter().find(|p| p.id == id)
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Union of keypoint names over all prototypes of a class.
    pub fn vocabulary(&self, class: &str) -> Vec<String> {
        let mut names: Vec<String> = self
            .class(class)
            .iter()
            .flat_map(|p| p.keypoints.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Writes OBJ + keypoint JSON per prototype and a manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, PrototypeError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| PrototypeError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut entries = Vec::new();
        for protos in self.classes.values() {
            for p in protos {
                let stem = format!("{}_{}", p.class, p.id);
                let mesh = PathBuf::from(format!("{stem}.obj"));
                let kps = PathBuf::from(format!("{stem}.keypoints.json"));
                fs::write(dir.join(&mesh), write_obj(p)).map_err(io(&dir.join(&mesh)))?;
                let json = serde_json::to_string_pretty(&p.keypoints).expect("keypoints serialize");
                fs::write(dir.join(&kps), json).map_err(io(&dir.join(&kps)))?;
                entries.push(ManifestEntry { class: p.class.clone(), id: p.id.clone(), mesh, keypoints: kps });
            }
        }
        let manifest = dir.join("prototypes.json");
        let json = serde_json::to_string_pretty(&entries).expect("manifest serialize");
        fs::write(&manifest, json).map_err(io(&manifest))?;
        Ok(manifest)
    }
}

/// Loads every prototype listed in a JSON manifest, preserving manifest order
/// within each class.
pub fn load_registry(manifest: &Path) -> Result<PrototypeRegistry, PrototypeError> {
    let text = fs::read_to_string(manifest)
        .map_err(|source| PrototypeError::Io { path: manifest.to_path_buf(), source })?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| parse_err(manifest.display(), e.to_string()))?;
    if entries.is_empty() {
        return Err(PrototypeError::EmptyClass("<manifest lists no prototypes>".into()));
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut registry = PrototypeRegistry::new();
    for entry in entries {
        if entry.class.is_empty() {
            return Err(PrototypeError::EmptyClass(entry.id));
        }
        let mesh_path = base.join(&entry.mesh);
        let obj = fs::read_to_string(&mesh_path)
            .map_err(|source| PrototypeError::Io { path: mesh_path.clone(), source })?;
        let (vertices, faces) = parse_obj(&obj, &mesh_path.display().to_string())?;
        let kp_path = base.join(&entry.keypoints);
        if !kp_path.exists() {
            return Err(PrototypeError::MissingKeypointFile(kp_path));
        }
        let kp_text = fs::read_to_string(&kp_path)
            .map_err(|source| PrototypeError::Io { path: kp_path.clone(), source })?;
        let keypoints: BTreeMap<String, Point3> =
            serde_json::from_str(&kp_text).map_err(|e| parse_err(kp_path.display(), e.to_string()))?;
        let proto = Prototype::new(entry.class, entry.id, vertices, faces, keypoints)
            .map_err(|e| parse_err(mesh_path.display(), e.to_string()))?;
        registry.insert(proto)?;
    }
    Ok(registry)
}

/// Binary image stored as a packed bitset, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<u64>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.width, self.height, self.count())
    }
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![0; (width * height).div_ceil(64)] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = y * self.width + x;
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        let i = y * self.width + x;
        if on {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Binary PBM (P4): 1 bits are foreground, rows padded to whole bytes.
    pub fn to_pbm(&self) -> Vec<u8> {
        let mut out = format!("P4\n{} {}\n", self.width, self.height).into_bytes();
        let row_bytes = self.width.div_ceil(8);
        for y in 0..self.height {
            let mut row = vec![0u8; row_bytes];
            for x in 0..self.width {
                if self.get(x, y) {
                    row[x / 8] |= 0x80 >> (x % 8);
                }
            }
            out.extend_from_slice(&row);
        }
        out
    }

    pub fn from_pbm(data: &[u8]) -> Result<Self, PrototypeError> {
        // header: magic, width, height separated by whitespace, comments allowed
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 3 {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(parse_err("<pbm>", "truncated header"));
            }
            fields.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
        }
        if fields[0] != "P4" {
            return Err(parse_err("<pbm>", format!("unsupported magic {}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| parse_err("<pbm>", e.to_string()));
        let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
        pos += 1; // single whitespace before raster
        let row_bytes = w.div_ceil(8);
        if data.len() < pos + row_bytes * h {
            return Err(parse_err("<pbm>", "truncated raster"));
        }
        let mut mask = Mask::new(w, h);
        for y in 0..h {
            let row = &data[pos + y * row_bytes..pos + (y + 1) * row_bytes];
            for x in 0..w {
                if row[x / 8] & (0x80 >> (x % 8)) != 0 {
                    mask.set(x, y, true);
                }
            }
        }
        Ok(mask)
    }
}

/// Signed doubled area of (a, b, p); positive when p is left of a->b in a
/// y-up frame.
fn edge(a: &Point2, b: &Point2, p: &Point2) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Fills a projected triangle into the mask. A pixel is set when its center
/// lies inside or on the boundary; zero-area triangles are skipped.
pub fn fill_triangle(mask: &mut Mask, tri: &[Point2; 3]) {
    let [a, b, c] = tri;
    let area = edge(a, b, c);
    if area == 0.0 || !area.is_finite() || mask.width == 0 || mask.height == 0 {
        return;
    }
    let xs = [a.x, b.x, c.x];
    let ys = [a.y, b.y, c.y];
    let lo_x = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_x = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo_y = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_y = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (w, h) = (mask.width as f64, mask.height as f64);
    if hi_x < 0.0 || hi_y < 0.0 || lo_x > w || lo_y > h {
        return;
    }
    let x0 = (lo_x - 0.5).ceil().max(0.0) as usize;
    let y0 = (lo_y - 0.5).ceil().max(0.0) as usize;
    let x1 = ((hi_x - 0.5).floor().min(w - 1.0)).max(-1.0);
    let y1 = ((hi_y - 0.5).floor().min(h - 1.0)).max(-1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return;
    }
    let (x1, y1) = (x1 as usize, y1 as usize);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
            let (w0, w1, w2) = (edge(b, c, &p), edge(c, a, &p), edge(a, b, &p));
            let inside = if area > 0.0 {
                w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0
            } else {
                w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0
            };
            if inside {
                mask.set(x, y, true);
            }
        }
    }
}

/// Union of all projected faces, no back-face culling. Faces with any vertex
/// behind the camera are dropped whole.
pub fn render_silhouette(proto: &Prototype, pose: &CameraPose, width: usize, height: usize) -> Mask {
    let mut mask = Mask::new(width, height);
    let rot = rotation_from_pose(pose);
    let projected: Vec<Option<Point2>> = proto
        .vertices
        .iter()
        .map(|v| project_with(&rot, pose, v).ok())
        .collect();
    for f in &proto.faces {
        if let (Some(a), Some(b), Some(c)) = (projected[f[0]], projected[f[1]], projected[f[2]]) {
            fill_triangle(&mut mask, &[a, b, c]);
        }
    }
    mask
}
