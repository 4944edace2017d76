//! Quadric-error-metric edge collapse with manifold guards.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mesh::Mesh;

/// Minimum cosine between a face normal before and after a collapse.
const MIN_NORMAL_COS: f64 = 0.2;
/// New faces with a smaller aspect quality than this are refused.
const MIN_QUALITY: f64 = 0.05;
/// Weight of the shape term `len^4 * (1 - worst new quality)` added to the
/// quadric cost. Flat regions have zero quadric cost, so without it their
/// collapse order is arbitrary and produces slivers.
const SHAPE_WEIGHT: f64 = 0.05;

/// Symmetric 4x4 quadric stored as its ten upper-triangle entries.
#[derive(Debug, Clone, Copy, Default)]
struct Quadric([f64; 10]);

impl Quadric {
    fn from_plane(n: Vector3<f64>, d: f64, weight: f64) -> Self {
        let (a, b, c) = (n.x, n.y, n.z);
        Self([a * a, a * b, a * c, a * d, b * b, b * c, b * d, c * c, c * d, d * d].map(|x| x * weight))
    }

    fn add(&self, o: &Self) -> Self {
        let mut q = self.0;
        for (x, y) in q.iter_mut().zip(o.0) {
            *x += y;
        }
        Self(q)
    }

    fn eval(&self, p: &Point3<f64>) -> f64 {
        let q = &self.0;
        let (x, y, z) = (p.x, p.y, p.z);
        q[0] * x * x + 2.0 * q[1] * x * y + 2.0 * q[2] * x * z + 2.0 * q[3] * x
            + q[4] * y * y + 2.0 * q[5] * y * z + 2.0 * q[6] * y
            + q[7] * z * z + 2.0 * q[8] * z
            + q[9]
    }

    /// Minimizer of the quadric when the 3x3 block is well conditioned.
    fn optimum(&self) -> Option<Point3<f64>> {
        let q = &self.0;
        let a = Matrix3::new(q[0], q[1], q[2], q[1], q[4], q[5], q[2], q[5], q[7]);
        let b = Vector3::new(q[3], q[6], q[8]);
        let scale = a.abs().max();
        if !(scale > 0.0) || a.determinant().abs() < 1e-9 * scale * scale * scale {
            return None;
        }
        a.try_inverse().map(|inv| Point3::from(-(inv * b)))
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    cost: f64,
    u: usize,
    v: usize,
    stamp_u: u32,
    stamp_v: u32,
    target: Point3<f64>,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed so BinaryHeap pops the cheapest collapse first
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| (other.u, other.v).cmp(&(self.u, self.v)))
    }
}

/// Options for [`collapse_to`].
#[derive(Debug, Clone, Copy)]
pub struct CollapseOptions {
    /// Stop once the face count is at or below this value.
    pub target_faces: usize,
    /// Never accept a collapse that would leave fewer faces than this.
    pub min_faces: usize,
    /// Random cost jitter as a fraction of the median positive edge cost;
    /// `None` gives a deterministic greedy order.
    pub jitter: Option<(f64, u64)>,
}

#[derive(Debug, Clone)]
pub struct CollapseOutcome {
    pub mesh: Mesh,
    /// True when no valid collapse remained before reaching the target.
    pub stalled: bool,
}

struct State {
    pos: Vec<Point3<f64>>,
    quadric: Vec<Quadric>,
    stamp: Vec<u32>,
    alive_vertex: Vec<bool>,
    boundary: Vec<bool>,
    faces: Vec<[usize; 3]>,
    alive_face: Vec<bool>,
    vertex_faces: Vec<Vec<usize>>,
    live_faces: usize,
}

impl State {
    fn new(mesh: &Mesh) -> Self {
        let nv = mesh.num_vertices();
        let mut vertex_faces = vec![Vec::new(); nv];
        let mut quadric = vec![Quadric::default(); nv];
        for (fi, f) in mesh.faces.iter().enumerate() {
            let cross = mesh.face_cross(fi);
            let len = cross.norm();
            if len > 0.0 {
                let n = cross / len;
                let d = -n.dot(&mesh.vertices[f[0]].coords);
                // area-weighted plane quadric
                let q = Quadric::from_plane(n, d, 0.5 * len);
                for &v in f {
                    quadric[v] = quadric[v].add(&q);
                }
            }
            for &v in f {
                vertex_faces[v].push(fi);
            }
        }
        let mut boundary = vec![false; nv];
        for (&(a, b), &c) in crate::mesh::edge_face_counts(mesh).iter() {
            if c != 2 {
                boundary[a] = true;
                boundary[b] = true;
            }
        }
        Self {
            pos: mesh.vertices.clone(),
            quadric,
            stamp: vec![0; nv],
            alive_vertex: vec![true; nv],
            boundary,
            faces: mesh.faces.clone(),
            alive_face: vec![true; mesh.num_faces()],
            vertex_faces,
            live_faces: mesh.num_faces(),
        }
    }

    fn neighbors(&self, v: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for &f in &self.vertex_faces[v] {
            for &w in &self.faces[f] {
                if w != v {
                    out.insert(w);
                }
            }
        }
        out
    }

    fn candidate(&self, u: usize, v: usize, jitter: f64) -> Candidate {
        let (u, v) = if u < v { (u, v) } else { (v, u) };
        let q = self.quadric[u].add(&self.quadric[v]);
        let mid = Point3::from((self.pos[u].coords + self.pos[v].coords) * 0.5);
        let mut options = vec![self.pos[u], self.pos[v], mid];
        if let Some(opt) = q.optimum() {
            // keep the optimum only when it stays near the edge
            let len = (self.pos[u] - self.pos[v]).norm();
            if (opt - mid).norm() <= 2.0 * len {
                options.insert(0, opt);
            }
        }
        let len4 = (self.pos[u] - self.pos[v]).norm_squared().powi(2);
        let (target, cost) = options
            .into_iter()
            .map(|p| (p, q.eval(&p).max(0.0) + SHAPE_WEIGHT * len4 * (1.0 - self.worst_quality(u, v, &p))))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty");
        Candidate { cost: cost + jitter, u, v, stamp_u: self.stamp[u], stamp_v: self.stamp[v], target }
    }

    /// Lowest quality among the faces that survive collapsing `u`-`v` to `p`.
    fn worst_quality(&self, u: usize, v: usize, p: &Point3<f64>) -> f64 {
        let mut worst = 1.0f64;
        for &w in &[u, v] {
            for &f in &self.vertex_faces[w] {
                let tri = self.faces[f];
                if tri.contains(&u) && tri.contains(&v) {
                    continue;
                }
                worst = worst.min(quality(&tri.map(|i| if i == u || i == v { *p } else { self.pos[i] })));
            }
        }
        worst
    }

    fn is_valid(&self, c: &Candidate, min_faces: usize) -> bool {
        let (u, v) = (c.u, c.v);
        if self.boundary[u] || self.boundary[v] {
            return false;
        }
        let shared: Vec<usize> = self.vertex_faces[u]
            .iter()
            .copied()
            .filter(|f| self.faces[*f].contains(&v))
            .collect();
        if shared.len() != 2 || self.live_faces - shared.len() < min_faces {
            return false;
        }
        // link condition: common neighbours are exactly the two opposite vertices
        let nu = self.neighbors(u);
        let nv = self.neighbors(v);
        let common: Vec<usize> = nu.intersection(&nv).copied().collect();
        if common.len() != 2 {
            return false;
        }
        // opposite vertices lose one neighbour each
        if common.iter().any(|&w| self.neighbors(w).len() <= 3) {
            return false;
        }
        // neither endpoint may end up with valence below three
        if nu.len() + nv.len() - 4 < 3 {
            return false;
        }
        for &w in &[u, v] {
            for &f in &self.vertex_faces[w] {
                if shared.contains(&f) {
                    continue;
                }
                let tri = self.faces[f];
                let old = tri.map(|i| self.pos[i]);
                let new = tri.map(|i| if i == u || i == v { c.target } else { self.pos[i] });
                let n_old = (old[1] - old[0]).cross(&(old[2] - old[0]));
                let n_new = (new[1] - new[0]).cross(&(new[2] - new[0]));
                let (lo, ln) = (n_old.norm(), n_new.norm());
                if !(ln > 0.0) || !(lo > 0.0) || n_old.dot(&n_new) < MIN_NORMAL_COS * lo * ln {
                    return false;
                }
                if quality(&new) < MIN_QUALITY {
                    return false;
                }
            }
        }
        true
    }

    fn collapse(&mut self, c: &Candidate) {
        let (u, v) = (c.u, c.v);
        let v_faces = std::mem::take(&mut self.vertex_faces[v]);
        for f in v_faces {
            if self.faces[f].contains(&u) {
                self.alive_face[f] = false;
                self.live_faces -= 1;
                for w in self.faces[f] {
                    if w != v {
                        self.vertex_faces[w].retain(|&g| g != f);
                    }
                }
            } else {
                for w in self.faces[f].iter_mut() {
                    if *w == v {
                        *w = u;
                    }
                }
                self.vertex_faces[u].push(f);
            }
        }
        self.vertex_faces[u].sort_unstable();
        self.alive_vertex[v] = false;
        self.pos[u] = c.target;
        self.quadric[u] = self.quadric[u].add(&self.quadric[v]);
        self.stamp[u] += 1;
        self.stamp[v] += 1;
    }

    fn into_mesh(self) -> Mesh {
        let mut remap = vec![usize::MAX; self.pos.len()];
        let mut vertices = Vec::new();
        let mut faces = Vec::with_capacity(self.live_faces);
        for (f, tri) in self.faces.iter().enumerate() {
            if !self.alive_face[f] {
                continue;
            }
            let mapped = tri.map(|v| {
                if remap[v] == usize::MAX {
                    remap[v] = vertices.len();
                    vertices.push(self.pos[v]);
                }
                remap[v]
            });
            faces.push(mapped);
        }
        Mesh { vertices, faces }
    }
}

/// Triangle quality in (0, 1]: 1 for equilateral, 0 for degenerate.
fn quality(t: &[Point3<f64>; 3]) -> f64 {
    let area2 = (t[1] - t[0]).cross(&(t[2] - t[0])).norm();
    let sum_sq = (t[1] - t[0]).norm_squared() + (t[2] - t[1]).norm_squared() + (t[0] - t[2]).norm_squared();
    if sum_sq <= 0.0 {
        return 0.0;
    }
    // 4 * sqrt(3) * area / sum of squared edges, with area = area2 / 2
    2.0 * 3f64.sqrt() * area2 / sum_sq
}

/// Greedy edge collapse until `target_faces` is reached or no valid collapse
/// remains. Boundary vertices are never moved.
pub fn collapse_to(mesh: &Mesh, opts: &CollapseOptions) -> CollapseOutcome {
    if mesh.num_faces() <= opts.target_faces {
        return CollapseOutcome { mesh: mesh.clone(), stalled: false };
    }
    let mut state = State::new(mesh);
    let mut edges: Vec<(usize, usize)> = mesh
        .faces
        .iter()
        .flat_map(|f| (0..3).map(move |k| crate::mesh::edge_key(f[k], f[(k + 1) % 3])))
        .collect();
    edges.sort_unstable();
    edges.dedup();

    let mut rng = opts.jitter.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let jitter_scale = match opts.jitter {
        Some((fraction, _)) => {
            let mut costs: Vec<f64> = edges
                .iter()
                .map(|&(u, v)| state.candidate(u, v, 0.0).cost)
                .filter(|c| *c > 0.0)
                .collect();
            costs.sort_by(f64::total_cmp);
            let median = costs.get(costs.len() / 2).copied().unwrap_or(0.0);
            // fully planar inputs have no positive cost; fall back to the scale
            // of a collapse across one mean edge
            let fallback = {
                let d = mesh.bbox_diagonal();
                1e-6 * d * d
            };
            fraction * if median > 0.0 { median } else { fallback }
        }
        None => 0.0,
    };
    let draw = |rng: &mut Option<ChaCha8Rng>| match rng {
        Some(r) => r.random::<f64>() * jitter_scale,
        None => 0.0,
    };

    let mut heap = BinaryHeap::with_capacity(edges.len());
    for &(u, v) in &edges {
        let j = draw(&mut rng);
        heap.push(state.candidate(u, v, j));
    }
    while let Some(c) = heap.pop() {
        if state.live_faces <= opts.target_faces {
            break;
        }
        if !state.alive_vertex[c.u]
            || !state.alive_vertex[c.v]
            || state.stamp[c.u] != c.stamp_u
            || state.stamp[c.v] != c.stamp_v
        {
            continue;
        }
        if !state.is_valid(&c, opts.min_faces) {
            continue;
        }
        state.collapse(&c);
        for w in state.neighbors(c.u) {
            let j = draw(&mut rng);
            heap.push(state.candidate(c.u, w, j));
        }
    }
    let stalled = state.live_faces > opts.target_faces;
    CollapseOutcome { mesh: state.into_mesh(), stalled }
}
