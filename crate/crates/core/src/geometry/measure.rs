//! Reference shapes and surface measurements.

use std::collections::HashMap;

use super::mesh::MeshSurface;

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

/// Axis-aligned unit cube [0, 1]³ with outward winding.
pub fn unit_cube() -> MeshSurface {
    let vertices = (0..8)
        .map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64])
        .collect();
    let quads = [
        [0, 2, 3, 1],
        [4, 5, 7, 6],
        [0, 1, 5, 4],
        [2, 6, 7, 3],
        [0, 4, 6, 2],
        [1, 3, 7, 5],
    ];
    let triangles = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    MeshSurface { vertices, triangles }
}

/// Subdivided icosahedron centered at the origin, outward winding.
pub fn icosphere(radius: f64, subdivisions: usize) -> MeshSurface {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<V3> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let mut triangles: Vec<[usize; 3]> = vec![
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
    let unit = |p: V3| {
        let n = norm(p);
        p.map(|c| c / n)
    };
    vertices.iter_mut().for_each(|v| *v = unit(*v));
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<V3>| {
            *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let (p, q) = (verts[a], verts[b]);
                verts.push(unit([(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0]));
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for [a, b, c] in triangles {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        triangles = next;
    }
    MeshSurface {
        vertices: vertices.into_iter().map(|v| v.map(|c| c * radius)).collect(),
        triangles,
    }
}

pub fn surface_area(mesh: &MeshSurface) -> f64 {
    mesh.triangles
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|i| mesh.vertices[i]);
            0.5 * norm(cross(sub(b, a), sub(c, a)))
        })
        .sum()
}

/// Divergence-theorem volume; positive when triangles wind outward.
pub fn signed_volume(mesh: &MeshSurface) -> f64 {
    mesh.triangles
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|i| mesh.vertices[i]);
            dot(a, cross(b, c)) / 6.0
        })
        .sum()
}

fn edge_counts(mesh: &MeshSurface) -> HashMap<(usize, usize), usize> {
    let mut counts = HashMap::new();
    for t in &mesh.triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    counts
}

/// Every edge shared by exactly two triangles.
pub fn is_watertight(mesh: &MeshSurface) -> bool {
    !mesh.triangles.is_empty() && edge_counts(mesh).values().all(|&c| c == 2)
}

/// Every directed edge used once: neighbors agree on winding.
pub fn is_consistently_oriented(mesh: &MeshSurface) -> bool {
    let mut seen = std::collections::HashSet::new();
    mesh.triangles
        .iter()
        .all(|t| (0..3).all(|k| seen.insert((t[k], t[(k + 1) % 3]))))
}

/// `V − E + F` over referenced vertices.
pub fn euler_characteristic(mesh: &MeshSurface) -> i64 {
    let mut used = vec![false; mesh.vertices.len()];
    mesh.triangles.iter().flatten().for_each(|&i| used[i] = true);
    let v = used.iter().filter(|&&u| u).count() as i64;
    v - edge_counts(mesh).len() as i64 + mesh.triangles.len() as i64
}

/// Distance from `p` to triangle `abc`.
pub fn point_triangle_distance(p: V3, a: V3, b: V3, c: V3) -> f64 {
    // region tests on barycentric coordinates
    let (ab, ac, ap) = (sub(b, a), sub(c, a), sub(p, a));
    let (d1, d2) = (dot(ab, ap), dot(ac, ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return norm(ap);
    }
    let bp = sub(p, b);
    let (d3, d4) = (dot(ab, bp), dot(ac, bp));
    if d3 >= 0.0 && d4 <= d3 {
        return norm(bp);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return norm(sub(p, [a[0] + v * ab[0], a[1] + v * ab[1], a[2] + v * ab[2]]));
    }
    let cp = sub(p, c);
    let (d5, d6) = (dot(ab, cp), dot(ac, cp));
    if d6 >= 0.0 && d5 <= d6 {
        return norm(cp);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return norm(sub(p, [a[0] + w * ac[0], a[1] + w * ac[1], a[2] + w * ac[2]]));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        let bc = sub(c, b);
        return norm(sub(p, [b[0] + w * bc[0], b[1] + w * bc[1], b[2] + w * bc[2]]));
    }
    let denom = 1.0 / (va + vb + vc);
    let (v, w) = (vb * denom, vc * denom);
    let q = [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ];
    norm(sub(p, q))
}

/// Sample points of a mesh: vertices plus triangle centroids.
fn samples(mesh: &MeshSurface) -> Vec<V3> {
    let mut pts = mesh.vertices.clone();
    pts.extend(mesh.triangles.iter().map(|t| {
        let [a, b, c] = t.map(|i| mesh.vertices[i]);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0, (a[2] + b[2] + c[2]) / 3.0]
    }));
    pts
}

/// Largest distance from a sample of `from` to the surface of `to`.
pub fn directed_hausdorff(from: &MeshSurface, to: &MeshSurface) -> f64 {
    let tris: Vec<[V3; 3]> = to.triangles.iter().map(|t| t.map(|i| to.vertices[i])).collect();
    samples(from)
        .into_iter()
        .map(|p| {
            tris.iter()
                .map(|[a, b, c]| point_triangle_distance(p, *a, *b, *c))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance estimated on vertices and centroids.
pub fn hausdorff_distance(a: &MeshSurface, b: &MeshSurface) -> f64 {
    directed_hausdorff(a, b).max(directed_hausdorff(b, a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_measures() {
        let c = unit_cube();
        assert!((surface_area(&c) - 6.0).abs() < 1e-12);
        assert!((signed_volume(&c) - 1.0).abs() < 1e-12);
        assert!(is_watertight(&c) && is_consistently_oriented(&c));
        assert_eq!(euler_characteristic(&c), 2);
    }

    #[test]
    fn icosphere_counts_and_orientation() {
        let s = icosphere(1.0, 3);
        assert_eq!((s.vertices.len(), s.triangles.len()), (642, 1280));
        assert!(is_watertight(&s) && is_consistently_oriented(&s));
        assert_eq!(euler_characteristic(&s), 2);
        assert!(signed_volume(&s) > 0.0);
        assert!((surface_area(&s) / (4.0 * std::f64::consts::PI) - 1.0).abs() < 0.02);
    }

    #[test]
    fn point_triangle_regions() {
        let (a, b, c) = ([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]);
        assert!((point_triangle_distance([0.2, 0.2, 2.0], a, b, c) - 2.0).abs() < 1e-12);
        assert!((point_triangle_distance([-1.0, -1.0, 0.0], a, b, c) - 2f64.sqrt()).abs() < 1e-12);
        assert!((point_triangle_distance([0.5, -1.0, 0.0], a, b, c) - 1.0).abs() < 1e-12);
        assert!((point_triangle_distance([1.0, 1.0, 0.0], a, b, c) - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hausdorff_of_scaled_sphere() {
        let a = icosphere(1.0, 2);
        let b = icosphere(1.1, 2);
        let h = hausdorff_distance(&a, &b);
        assert!(h > 0.09 && h < 0.11, "{h}");
        assert!(hausdorff_distance(&a, &a) < 1e-12);
    }
}
