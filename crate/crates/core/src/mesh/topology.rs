use std::collections::HashMap;

use super::Mesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifoldReport {
    pub is_edge_manifold: bool,
    pub is_vertex_manifold: bool,
    pub is_watertight: bool,
    pub boundary_edge_count: usize,
    pub non_manifold_edge_count: usize,
}

pub(crate) fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b { (a, b) } else { (b, a) }
}

/// Number of faces incident to every undirected edge.
pub(crate) fn edge_face_counts(mesh: &Mesh) -> HashMap<(usize, usize), usize> {
    let mut counts = HashMap::with_capacity(mesh.num_faces() * 3 / 2);
    for f in &mesh.faces {
        for k in 0..3 {
            *counts.entry(edge_key(f[k], f[(k + 1) % 3])).or_insert(0) += 1;
        }
    }
    counts
}

pub fn manifold_report(mesh: &Mesh) -> ManifoldReport {
    let counts = edge_face_counts(mesh);
    let boundary_edge_count = counts.values().filter(|&&c| c == 1).count();
    let non_manifold_edge_count = counts.values().filter(|&&c| c > 2).count();
    let is_edge_manifold = non_manifold_edge_count == 0;
    ManifoldReport {
        is_edge_manifold,
        is_vertex_manifold: is_edge_manifold && vertex_fans_are_disks(mesh),
        is_watertight: !counts.is_empty() && counts.values().all(|&c| c == 2),
        boundary_edge_count,
        non_manifold_edge_count,
    }
}

/// Checks that the faces around every vertex form one connected fan.
fn vertex_fans_are_disks(mesh: &Mesh) -> bool {
    // link edges: for face (a, b, c) the vertex a sees the edge (b, c)
    let mut links: Vec<Vec<(usize, usize)>> = vec![Vec::new(); mesh.num_vertices()];
    for &[a, b, c] in &mesh.faces {
        links[a].push((b, c));
        links[b].push((c, a));
        links[c].push((a, b));
    }
    links.iter().all(|link| {
        if link.is_empty() {
            return true;
        }
        // union-find over link vertices; a single component means one fan
        let mut ids: HashMap<usize, usize> = HashMap::new();
        let mut parent: Vec<usize> = Vec::new();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &(u, v) in link {
            for w in [u, v] {
                let next = parent.len();
                if *ids.entry(w).or_insert(next) == next {
                    parent.push(next);
                }
            }
            let (ru, rv) = (find(&mut parent, ids[&u]), find(&mut parent, ids[&v]));
            parent[ru] = rv;
        }
        let root = find(&mut parent, 0);
        (0..parent.len()).all(|i| find(&mut parent, i) == root)
    })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;
    use nalgebra::Point3;

    #[test]
    fn closed_tetrahedron() {
        let r = manifold_report(&tetrahedron());
        assert!(r.is_watertight && r.is_edge_manifold && r.is_vertex_manifold);
        assert_eq!(r.boundary_edge_count, 0);
    }

    #[test]
    fn single_triangle_is_all_boundary() {
        let m = Mesh::new(
            vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let r = manifold_report(&m);
        assert!(!r.is_watertight);
        assert_eq!(r.boundary_edge_count, 3);
    }

    #[test]
    fn three_fan_on_one_edge() {
        let v = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.5, 1.0, 0.0),
            Point3::new(0.5, -1.0, 0.0),
            Point3::new(0.5, 0.0, 1.0),
        ];
        let m = Mesh::new(v, vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]]).unwrap();
        let r = manifold_report(&m);
        // the shared edge (0,1) has three faces, the other six edges one each
        assert_eq!(r.non_manifold_edge_count, 1);
        assert_eq!(r.boundary_edge_count, 6);
        assert!(!r.is_edge_manifold && !r.is_watertight);
    }

    #[test]
    fn bowtie_vertex_is_not_vertex_manifold() {
        // two triangles touching at a single vertex
        let v = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(1.0, -1.0, 0.0),
            Point3::new(-1.0, 1.0, 0.0),
            Point3::new(-1.0, -1.0, 0.0),
        ];
        let m = Mesh::new(v, vec![[0, 2, 1], [0, 3, 4]]).unwrap();
        let r = manifold_report(&m);
        assert!(r.is_edge_manifold);
        assert!(!r.is_vertex_manifold);
    }
}
