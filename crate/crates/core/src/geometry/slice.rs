//! Plane sections of triangle meshes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::mesh::MeshSurface;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    #[default]
    Z,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::Config(format!("axis must be x, y or z, got {other:?}"))),
        }
    }
}

impl Axis {
    /// Cyclic permutation taking this axis to local z. Cyclic keeps
    /// handedness, so triangle winding keeps its meaning.
    pub fn to_local(self, p: [f64; 3]) -> [f64; 3] {
        match self {
            Axis::X => [p[1], p[2], p[0]],
            Axis::Y => [p[2], p[0], p[1]],
            Axis::Z => p,
        }
    }

    pub fn to_model(self, p: [f64; 3]) -> [f64; 3] {
        match self {
            Axis::X => [p[2], p[0], p[1]],
            Axis::Y => [p[1], p[2], p[0]],
            Axis::Z => p,
        }
    }

    pub fn apply_local(self, mesh: &MeshSurface) -> MeshSurface {
        MeshSurface {
            vertices: mesh.vertices.iter().map(|&p| self.to_local(p)).collect(),
            triangles: mesh.triangles.clone(),
        }
    }

    pub fn apply_model(self, mesh: &MeshSurface) -> MeshSurface {
        MeshSurface {
            vertices: mesh.vertices.iter().map(|&p| self.to_model(p)).collect(),
            triangles: mesh.triangles.clone(),
        }
    }
}

/// Uniform scale and shift that maps a mesh into the unit cube, centered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Placement {
    pub fn identity() -> Self {
        Placement {
            center: [0.5; 3],
            scale: 1.0,
        }
    }

    pub fn to_unit(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.center[a]) * self.scale + 0.5)
    }

    pub fn to_model(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - 0.5) / self.scale + self.center[a])
    }

    pub fn mesh_to_model(&self, mesh: &MeshSurface) -> MeshSurface {
        MeshSurface {
            vertices: mesh.vertices.iter().map(|&p| self.to_model(p)).collect(),
            triangles: mesh.triangles.clone(),
        }
    }
}

/// Scale uniformly so the largest bounding-box side is 1 and center in
/// [0, 1]³. Returns the mapping so results can be taken back to model units.
pub fn normalize_to_unit_cube(mesh: &MeshSurface) -> Result<(MeshSurface, Placement)> {
    let (lo, hi) = mesh
        .bounds()
        .ok_or_else(|| Error::contract("cannot normalize an empty mesh"))?;
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if !(extent > 0.0) {
        return Err(Error::contract("mesh has zero extent"));
    }
    let placement = Placement {
        center: [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a])),
        scale: 1.0 / extent,
    };
    let vertices = mesh.vertices.iter().map(|&p| placement.to_unit(p)).collect();
    Ok((
        MeshSurface {
            vertices,
            triangles: mesh.triangles.clone(),
        },
        placement,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    /// Closure is implicit: the last point connects back to the first.
    pub points: Vec<[f64; 2]>,
    pub closed: bool,
}

impl Polyline {
    pub fn perimeter(&self) -> f64 {
        let n = self.points.len();
        let segs = if self.closed { n } else { n.saturating_sub(1) };
        (0..segs)
            .map(|i| {
                let (a, b) = (self.points[i], self.points[(i + 1) % n]);
                ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
            })
            .sum()
    }

    /// Shoelace area, positive for counter-clockwise loops.
    pub fn signed_area(&self) -> f64 {
        let n = self.points.len();
        0.5 * (0..n)
            .map(|i| {
                let (a, b) = (self.points[i], self.points[(i + 1) % n]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
    }
}

/// All section curves of a mesh in one plane, in the plane's local (x, y).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContourSet {
    /// Position of the plane along the slicing axis.
    pub coordinate: f64,
    pub polylines: Vec<Polyline>,
    pub warnings: Vec<String>,
}

/// Section of `mesh` (already in the slicing frame, plane normal = local z)
/// at height `z`.
///
/// Vertices exactly on the plane count as lying `1e-9 · extent` above it.
pub fn slice_at(mesh: &MeshSurface, z: f64, extent: f64) -> ContourSet {
    let nudge = 1e-9 * extent.max(f64::MIN_POSITIVE);
    let dist: Vec<f64> = mesh
        .vertices
        .iter()
        .map(|v| {
            let d = v[2] - z;
            if d == 0.0 {
                nudge
            } else {
                d
            }
        })
        .collect();

    // crossing points keyed by mesh edge, and links between them per triangle
    let mut nodes: HashMap<(usize, usize), usize> = HashMap::new();
    let mut points: Vec<[f64; 2]> = Vec::new();
    let mut links: Vec<Vec<usize>> = Vec::new();
    let mut node = |a: usize, b: usize, points: &mut Vec<[f64; 2]>, links: &mut Vec<Vec<usize>>| {
        let key = (a.min(b), a.max(b));
        *nodes.entry(key).or_insert_with(|| {
            let (p, q) = (mesh.vertices[key.0], mesh.vertices[key.1]);
            let (dp, dq) = (dist[key.0], dist[key.1]);
            let t = dp / (dp - dq);
            points.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            links.push(Vec::new());
            points.len() - 1
        })
    };
    for tri in &mesh.triangles {
        let mut crossing = Vec::with_capacity(2);
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            if (dist[a] > 0.0) != (dist[b] > 0.0) {
                crossing.push(node(a, b, &mut points, &mut links));
            }
        }
        if let [u, v] = crossing[..] {
            links[u].push(v);
            links[v].push(u);
        }
    }

    // Walk chains: open ones first (from their dangling ends), then loops.
    let mut edge_used: HashMap<(usize, usize), usize> = HashMap::new();
    let mut take_edge = |a: usize, b: usize, links: &Vec<Vec<usize>>| -> bool {
        let key = (a.min(b), a.max(b));
        let mult = links[a].iter().filter(|&&x| x == b).count();
        let e = edge_used.entry(key).or_insert(0);
        if *e < mult {
            *e += 1;
            true
        } else {
            false
        }
    };
    let mut polylines = Vec::new();
    let mut warnings = Vec::new();
    let starts: Vec<usize> = (0..points.len())
        .filter(|&i| links[i].len() % 2 == 1)
        .chain(0..points.len())
        .collect();
    for start in starts {
        let mut chain = vec![start];
        let mut cur = start;
        let mut closed = false;
        loop {
            let next = links[cur].iter().copied().find(|&n| take_edge(cur, n, &links));
            match next {
                Some(n) if n == start && chain.len() > 2 => {
                    closed = true;
                    break;
                }
                Some(n) => {
                    chain.push(n);
                    cur = n;
                }
                None => break,
            }
        }
        if chain.len() == 1 {
            continue;
        }
        let pts = merge_collinear(chain.iter().map(|&i| points[i]).collect(), closed);
        if !closed {
            warnings.push(format!(
                "open contour with {} points at {z} (mesh is not watertight here)",
                pts.len()
            ));
            polylines.push(Polyline { points: pts, closed });
        } else if pts.len() >= 3 {
            polylines.push(Polyline { points: pts, closed });
        }
    }
    ContourSet {
        coordinate: z,
        polylines,
        warnings,
    }
}

/// Drop points that lie on the straight segment between their neighbors.
fn merge_collinear(points: Vec<[f64; 2]>, closed: bool) -> Vec<[f64; 2]> {
    let n = points.len();
    if n < 3 {
        return points;
    }
    let keep = |prev: [f64; 2], p: [f64; 2], next: [f64; 2]| {
        let (ux, uy) = (p[0] - prev[0], p[1] - prev[1]);
        let (vx, vy) = (next[0] - p[0], next[1] - p[1]);
        let cross = ux * vy - uy * vx;
        let dot = ux * vx + uy * vy;
        let scale = (ux * ux + uy * uy).sqrt() * (vx * vx + vy * vy).sqrt();
        !(cross.abs() <= 1e-12 * scale && dot > 0.0) || scale == 0.0
    };
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(n);
    for i in 0..n {
        let interior = closed || (i > 0 && i < n - 1);
        if interior && !keep(points[(i + n - 1) % n], points[i], points[(i + 1) % n]) {
            continue;
        }
        out.push(points[i]);
    }
    out
}

/// Voxel-center plane positions splitting `[lo, hi]` into `n` cells.
pub fn plane_coordinates(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / n as f64;
    (0..n).map(|k| lo + (k as f64 + 0.5) * step).collect()
}

/// Sections at `n_slices` voxel-center planes across the mesh's bounding
/// box along `axis`. Contours are in the plane's local coordinates (see
/// [`Axis::to_local`]).
pub fn slice_mesh(mesh: &MeshSurface, axis: Axis, n_slices: usize) -> Result<Vec<ContourSet>> {
    if mesh.is_empty() {
        return Err(Error::contract("cannot slice an empty mesh"));
    }
    if n_slices == 0 {
        return Err(Error::contract("slice count must be positive"));
    }
    let local = axis.apply_local(mesh);
    let (lo, hi) = local.bounds().expect("non-empty");
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    Ok(plane_coordinates(lo[2], hi[2], n_slices)
        .into_iter()
        .map(|z| slice_at(&local, z, extent))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::measure::{icosphere, unit_cube};

    #[test]
    fn cube_section_is_a_square() {
        let c = slice_at(&unit_cube(), 0.5, 1.0);
        assert_eq!(c.polylines.len(), 1);
        let p = &c.polylines[0];
        assert!(p.closed);
        assert_eq!(p.points.len(), 4);
        assert!((p.perimeter() - 4.0).abs() <= 1e-9);
        assert!(c.warnings.is_empty());
    }

    #[test]
    fn plane_outside_is_empty() {
        assert!(slice_at(&unit_cube(), 2.0, 1.0).polylines.is_empty());
    }

    #[test]
    fn plane_through_vertices_is_deterministic() {
        // z = 0 runs through four cube vertices; they count as above it
        let c = slice_at(&unit_cube(), 0.0, 1.0);
        assert!(c.polylines.is_empty());
        let c = slice_at(&unit_cube(), 1.0, 1.0);
        assert_eq!(c.polylines.len(), 1);
        assert!((c.polylines[0].perimeter() - 4.0).abs() < 1e-6);
    }

    #[test]
    fn sphere_equator() {
        let s = icosphere(1.0, 3);
        let c = slice_at(&s, 0.0, 2.0);
        assert_eq!(c.polylines.len(), 1);
        let per = c.polylines[0].perimeter();
        assert!((per / (2.0 * std::f64::consts::PI) - 1.0).abs() < 0.01, "{per}");
    }

    #[test]
    fn open_surface_reports_warning() {
        let mut m = unit_cube();
        m.triangles.truncate(10); // drop one side face
        let c = slice_at(&m, 0.5, 1.0);
        assert_eq!(c.warnings.len(), 1);
        assert!(!c.polylines[0].closed);
    }

    #[test]
    fn slice_mesh_planes_and_axes() {
        let c = unit_cube();
        let sets = slice_mesh(&c, Axis::X, 4).unwrap();
        let coords: Vec<f64> = sets.iter().map(|s| s.coordinate).collect();
        assert_eq!(coords, vec![0.125, 0.375, 0.625, 0.875]);
        assert!(sets.iter().all(|s| s.polylines.len() == 1));
        assert!(slice_mesh(&MeshSurface::default(), Axis::Z, 4).is_err());
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let p = [0.1, 0.2, 0.3];
            assert_eq!(axis.to_model(axis.to_local(p)), p);
        }
    }

    #[test]
    fn normalization() {
        let mut s = icosphere(5.0, 1);
        s.vertices.iter_mut().for_each(|v| v[0] += 10.0);
        let (n, place) = normalize_to_unit_cube(&s).unwrap();
        let (lo, hi) = n.bounds().unwrap();
        let ext = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        assert!((ext - 1.0).abs() < 1e-12);
        assert!(lo.iter().all(|&v| v >= -1e-12) && hi.iter().all(|&v| v <= 1.0 + 1e-12));
        let back = place.to_model(n.vertices[0]);
        assert!((0..3).all(|a| (back[a] - s.vertices[0][a]).abs() < 1e-12));
    }
}
