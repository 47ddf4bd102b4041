//! Isosurface extraction.
//!
//! The 256-case triangle table is derived at first use rather than typed
//! in. For each cube face, crossings are paired so that every entry
//! crossing (outside → inside corner, walking the face counter-clockwise as
//! seen from outside) links to the next exit crossing. This separates
//! diagonal inside corners on ambiguous faces; since the rule depends only
//! on the four corner states, two cubes sharing a face always agree and the
//! result has no cracks. The directed face segments chain into closed
//! loops, which are fan-triangulated.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::mesh::MeshSurface;
use super::volume::VolumeGrid;
use crate::error::{Error, Result};

/// Samples exactly at the isovalue are moved up by this much.
pub const ISO_NUDGE: f64 = 1e-7;

/// Corner `i` sits at offset (i & 1, (i >> 1) & 1, (i >> 2) & 1).
fn corner_offset(i: usize) -> [usize; 3] {
    [i & 1, (i >> 1) & 1, (i >> 2) & 1]
}

/// The 12 cube edges as corner pairs, lower corner first.
fn cube_edges() -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(12);
    for a in 0..8 {
        for axis in 0..3 {
            if a & (1 << axis) == 0 {
                edges.push((a, a | (1 << axis)));
            }
        }
    }
    edges
}

/// Faces as four corners, counter-clockwise seen from outside the cube.
fn cube_faces() -> Vec<[usize; 4]> {
    let mut faces = Vec::with_capacity(6);
    for axis in 0..3 {
        // (u, w, axis) right-handed
        let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let corner = |du: usize, dw: usize| (side << axis) | (du << u) | (dw << w);
            let ring = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            faces.push(if side == 1 {
                ring
            } else {
                [ring[0], ring[3], ring[2], ring[1]]
            });
        }
    }
    faces
}

type CaseTable = Vec<Vec<[u8; 3]>>;

fn build_table() -> CaseTable {
    let edges = cube_edges();
    let edge_of = |a: usize, b: usize| -> u8 {
        edges
            .iter()
            .position(|&(p, q)| (p, q) == (a.min(b), a.max(b)))
            .expect("adjacent corners") as u8
    };
    let faces = cube_faces();
    (0..256usize)
        .map(|case| {
            let inside = |c: usize| case & (1 << c) != 0;
            // directed links: entry edge → exit edge
            let mut next: HashMap<u8, u8> = HashMap::new();
            for f in &faces {
                let crossings: Vec<(u8, bool)> = (0..4)
                    .filter_map(|i| {
                        let (a, b) = (f[i], f[(i + 1) % 4]);
                        (inside(a) != inside(b)).then(|| (edge_of(a, b), inside(b)))
                    })
                    .collect();
                // `true` marks an entry into the inside region
                for (k, &(edge, entry)) in crossings.iter().enumerate() {
                    if entry {
                        let exit = crossings[(k + 1) % crossings.len()];
                        debug_assert!(!exit.1);
                        next.insert(edge, exit.0);
                    }
                }
            }
            let mut tris = Vec::new();
            let mut starts: Vec<u8> = next.keys().copied().collect();
            starts.sort_unstable();
            let mut seen = std::collections::HashSet::new();
            for s in starts {
                if seen.contains(&s) {
                    continue;
                }
                let mut ring = vec![s];
                seen.insert(s);
                let mut cur = next[&s];
                while cur != s {
                    seen.insert(cur);
                    ring.push(cur);
                    cur = next[&cur];
                }
                for k in 1..ring.len() - 1 {
                    tris.push([ring[0], ring[k], ring[k + 1]]);
                }
            }
            tris
        })
        .collect()
}

fn table() -> &'static CaseTable {
    static TABLE: OnceLock<CaseTable> = OnceLock::new();
    TABLE.get_or_init(build_table)
}

/// Triangulated surface where the volume crosses `isovalue`, with vertices
/// in world units and triangles wound so normals point from above-iso
/// toward below-iso samples.
pub fn marching_cubes(volume: &VolumeGrid, isovalue: f64) -> Result<MeshSurface> {
    if !(isovalue > 0.0 && isovalue < 1.0) {
        return Err(Error::contract(format!("isovalue must lie in (0, 1), got {isovalue}")));
    }
    let [nx, ny, nz] = volume.dims;
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(Error::contract(format!("marching cubes needs at least 2 samples per axis, got {:?}", volume.dims)));
    }
    let sample = |x: usize, y: usize, z: usize| {
        let v = f64::from(volume.get(x, y, z));
        if v == isovalue {
            v + ISO_NUDGE
        } else {
            v
        }
    };
    let edges = cube_edges();
    let table = table();
    let mut mesh = MeshSurface::default();
    // vertex per grid edge: (lower sample linear index, axis)
    let mut vertex_of: HashMap<(usize, u8), usize> = HashMap::new();

    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let mut vals = [0.0; 8];
                let mut case = 0usize;
                for (c, v) in vals.iter_mut().enumerate() {
                    let o = corner_offset(c);
                    *v = sample(x + o[0], y + o[1], z + o[2]);
                    if *v > isovalue {
                        case |= 1 << c;
                    }
                }
                let tris = &table[case];
                if tris.is_empty() {
                    continue;
                }
                let mut edge_vertex = |e: u8, mesh: &mut MeshSurface| -> usize {
                    let (a, b) = edges[e as usize];
                    let (oa, ob) = (corner_offset(a), corner_offset(b));
                    let axis = (0..3).find(|&k| oa[k] != ob[k]).expect("edge") as u8;
                    let key = (volume.index(x + oa[0], y + oa[1], z + oa[2]), axis);
                    *vertex_of.entry(key).or_insert_with(|| {
                        let t = (isovalue - vals[a]) / (vals[b] - vals[a]);
                        let base = [(x + oa[0]) as f64, (y + oa[1]) as f64, (z + oa[2]) as f64];
                        let mut g = base;
                        g[axis as usize] += t;
                        mesh.vertices.push(volume.position(g[0], g[1], g[2]));
                        mesh.vertices.len() - 1
                    })
                };
                for t in tris {
                    let tri = [
                        edge_vertex(t[0], &mut mesh),
                        edge_vertex(t[1], &mut mesh),
                        edge_vertex(t[2], &mut mesh),
                    ];
                    mesh.triangles.push(tri);
                }
            }
        }
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::measure::{
        euler_characteristic, is_consistently_oriented, is_watertight, signed_volume, surface_area,
    };

    fn grid(n: usize, f: impl Fn(f64, f64, f64) -> f32) -> VolumeGrid {
        let mut values = Vec::with_capacity(n * n * n);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    values.push(f(x as f64, y as f64, z as f64));
                }
            }
        }
        VolumeGrid::new([n, n, n], [0.0; 3], [1.0; 3], values).unwrap()
    }

    #[test]
    fn every_case_is_closed_within_the_cube() {
        // each crossed cube edge is used by loops exactly once per direction
        for (case, tris) in table().iter().enumerate() {
            let crossed = cube_edges()
                .iter()
                .filter(|&&(a, b)| ((case >> a) & 1) != ((case >> b) & 1))
                .count();
            let verts: std::collections::HashSet<u8> = tris.iter().flatten().copied().collect();
            assert_eq!(verts.len(), crossed, "case {case}");
        }
        assert!(table()[0].is_empty() && table()[255].is_empty());
    }

    #[test]
    fn all_below_is_empty() {
        let v = grid(4, |_, _, _| 0.1);
        assert!(marching_cubes(&v, 0.5).unwrap().is_empty());
    }

    #[test]
    fn single_voxel_is_a_closed_outward_surface() {
        let v = grid(3, |x, y, z| if (x, y, z) == (1.0, 1.0, 1.0) { 1.0 } else { 0.0 });
        let m = marching_cubes(&v, 0.5).unwrap();
        assert!(is_watertight(&m));
        assert!(is_consistently_oriented(&m));
        assert_eq!(euler_characteristic(&m), 2);
        assert!(signed_volume(&m) > 0.0);
    }

    #[test]
    fn bad_isovalue() {
        let v = grid(3, |_, _, _| 0.0);
        assert!(matches!(marching_cubes(&v, 1.5), Err(Error::Contract(_))));
        assert!(matches!(marching_cubes(&v, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn sphere_area() {
        let (n, r) = (64, 20.0);
        let c = 31.5;
        let v = grid(n, |x, y, z| {
            let d = ((x - c).powi(2) + (y - c).powi(2) + (z - c).powi(2)).sqrt() - r;
            (0.5 - d / 8.0).clamp(0.0, 1.0) as f32
        });
        let m = marching_cubes(&v, 0.5).unwrap();
        let expected = 4.0 * std::f64::consts::PI * r * r;
        let area = surface_area(&m);
        assert!((area / expected - 1.0).abs() < 0.05, "{area} vs {expected}");
        assert!(is_watertight(&m) && is_consistently_oriented(&m));
        assert_eq!(euler_characteristic(&m), 2);
    }

    #[test]
    fn ambiguous_random_fields_stay_manifold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f32> = (0..8 * 8 * 8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let v = VolumeGrid::new([8, 8, 8], [0.0; 3], [1.0; 3], vals).unwrap().padded(1);
        let m = marching_cubes(&v, 0.5).unwrap();
        assert!(is_watertight(&m));
        assert!(is_consistently_oriented(&m));
    }
}
