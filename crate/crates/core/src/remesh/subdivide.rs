use std::collections::HashMap;

use nalgebra::Point3;

use super::bvh::TriangleBvh;
use super::{BaseMesh, RemeshError, TMesh};
use crate::mesh::{edge_key, Mesh};

/// Rotates a face so that its lowest vertex index comes first, keeping the
/// cyclic orientation.
pub(crate) fn anchor_lowest(f: [usize; 3]) -> [usize; 3] {
    let k = (0..3).min_by_key(|&i| f[i]).unwrap_or(0);
    [f[k], f[(k + 1) % 3], f[(k + 2) % 3]]
}

/// Children of `(v0, v1, v2)` in canonical order: corner at v0, corner at
/// v1, corner at v2, centre. Each child keeps the parent's vertex layout.
pub(crate) fn split_face(f: [usize; 3], m01: usize, m12: usize, m20: usize) -> [[usize; 3]; 4] {
    let [v0, v1, v2] = f;
    [[v0, m01, m20], [m01, v1, m12], [m20, m12, v2], [m01, m12, m20]]
}

fn project(bvh: &TriangleBvh, p: &Point3<f64>) -> Result<Point3<f64>, RemeshError> {
    let hit = bvh
        .closest_point(p)
        .ok_or_else(|| RemeshError::Projection("target surface is empty".into()))?;
    if !hit.point.coords.iter().all(|c| c.is_finite()) {
        return Err(RemeshError::Projection(format!("non-finite projection of {p:?}")));
    }
    Ok(hit.point)
}

/// 1-to-4 subdivision of every base face `times` times; base vertices and
/// every new midpoint are snapped to the closest point of the target surface.
pub fn subdivide_project_bvh(base: &BaseMesh, times: u32, target: &TriangleBvh) -> Result<TMesh, RemeshError> {
    if times == 0 {
        return Err(RemeshError::InvalidConfig("subdivision level must be at least 1".into()));
    }
    let mut vertices: Vec<Point3<f64>> = base
        .mesh
        .vertices
        .iter()
        .map(|p| project(target, p))
        .collect::<Result<_, _>>()?;
    // (face, patch, rank); kept in depth-first order so that faces end up
    // patch-major with ascending rank
    let mut faces: Vec<([usize; 3], usize, usize)> = base
        .mesh
        .faces
        .iter()
        .enumerate()
        .map(|(p, &f)| (anchor_lowest(f), p, 0))
        .collect();
    for _ in 0..times {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &(f, patch, rank) in &faces {
            let mut mid = |a: usize, b: usize| -> Result<usize, RemeshError> {
                if let Some(&m) = midpoints.get(&edge_key(a, b)) {
                    return Ok(m);
                }
                let p = Point3::from((vertices[a].coords + vertices[b].coords) * 0.5);
                vertices.push(project(target, &p)?);
                let m = vertices.len() - 1;
                midpoints.insert(edge_key(a, b), m);
                Ok(m)
            };
            let m01 = mid(f[0], f[1])?;
            let m12 = mid(f[1], f[2])?;
            let m20 = mid(f[2], f[0])?;
            for (k, child) in split_face(f, m01, m12, m20).into_iter().enumerate() {
                next.push((child, patch, rank * 4 + k));
            }
        }
        faces = next;
    }
    let mesh = Mesh {
        vertices,
        faces: faces.iter().map(|(f, _, _)| *f).collect(),
    };
    mesh.validate().map_err(|e| RemeshError::Projection(format!("projected t-mesh is degenerate: {e}")))?;
    Ok(TMesh {
        mesh,
        patch_id: faces.iter().map(|(_, p, _)| *p).collect(),
        within_patch_rank: faces.iter().map(|(_, _, r)| *r).collect(),
        subdivision_level: times,
        num_patches: base.mesh.num_faces(),
    })
}

pub fn subdivide_project(base: &BaseMesh, times: u32, target_surface: &Mesh) -> Result<TMesh, RemeshError> {
    subdivide_project_bvh(base, times, &TriangleBvh::new(target_surface))
}
