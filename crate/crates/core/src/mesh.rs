//! Triangle mesh storage, BVH ray intersection, the spectral geometric bases,
//! and basis-driven geometry refinement.

use nalgebra::DMatrix;

use crate::error::{contract, Result};
use crate::io::MeshData;
use crate::{Rgb, Vec3};

/// Self-intersection guard as a fraction of scene diameter.
pub const SELF_INTERSECT_EPS_FRACTION: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
}

#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub triangle: usize,
    /// Barycentric coordinates w.r.t. the triangle's three vertices; >= 0, sum 1.
    pub bary: [f64; 3],
    pub position: Vec3,
    /// Barycentrically interpolated shading normal (unit).
    pub shading_normal: Vec3,
    /// Geometric (winding) normal of the hit triangle (unit).
    pub geometric_normal: Vec3,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct TriangleMesh {
    /// Vertex positions before refinement (V0).
    pub initial_vertices: Vec<Vec3>,
    /// Vertex normals of V0; refinement offsets move along these.
    pub initial_normals: Vec<Vec3>,
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub vertex_normals: Vec<Vec3>,
    /// Mean observed color per triangle; filled by nearest neighbor where unobserved.
    pub triangle_colors: Vec<Rgb>,
    /// Edge-adjacent triangle indices per triangle.
    pub adjacency: Vec<Vec<usize>>,
    bvh: Bvh,
    diameter: f64,
}

impl TriangleMesh {
    pub fn from_data(data: MeshData) -> Result<Self> {
        Self::new(data.vertices, data.triangles)
    }

    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.is_empty() || triangles.is_empty() {
            return Err(contract("mesh must have at least one vertex and triangle"));
        }
        for t in &triangles {
            for &i in t {
                if i >= vertices.len() {
                    return Err(contract(format!("triangle index {i} out of range")));
                }
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(contract("degenerate triangle (repeated vertex)"));
            }
        }
        let adjacency = build_adjacency(&vertices, &triangles)?;
        let vertex_normals = compute_vertex_normals(&vertices, &triangles);
        let bvh = Bvh::build(&vertices, &triangles);
        let diameter = bounding_diameter(&vertices);
        Ok(TriangleMesh {
            initial_vertices: vertices.clone(),
            initial_normals: vertex_normals.clone(),
            vertices,
            triangles,
            vertex_normals,
            triangle_colors: Vec::new(),
            adjacency,
            bvh,
            diameter,
        })
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn intersect_eps(&self) -> f64 {
        SELF_INTERSECT_EPS_FRACTION * self.diameter
    }

    pub fn triangle_vertices(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle_vertices(t);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn triangle_centroid(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle_vertices(t);
        (a + b + c) / 3.0
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn mean_edge_length(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for t in &self.triangles {
            for (i, j) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                if i < j {
                    sum += (self.vertices[i] - self.vertices[j]).norm();
                    n += 1;
                }
            }
        }
        sum / n.max(1) as f64
    }

    /// Nearest intersection with t > epsilon, or None on a miss.
    /// Ties on t break to the lower triangle index.
    pub fn intersect(&self, ray: &Ray) -> Option<Hit> {
        let eps = self.intersect_eps();
        let (tri, t, bary) = self.bvh.intersect(&self.vertices, &self.triangles, ray, eps)?;
        Some(self.make_hit(ray, tri, t, bary))
    }

    /// Occlusion query: does anything lie along the ray within (eps, max_t)?
    pub fn occluded(&self, ray: &Ray, max_t: f64) -> bool {
        let eps = self.intersect_eps();
        self.bvh
            .intersect(&self.vertices, &self.triangles, ray, eps)
            .map_or(false, |(_, t, _)| t < max_t)
    }

    fn make_hit(&self, ray: &Ray, tri: usize, t: f64, bary: [f64; 3]) -> Hit {
        let [ia, ib, ic] = self.triangles[tri];
        let n = bary[0] * self.vertex_normals[ia]
            + bary[1] * self.vertex_normals[ib]
            + bary[2] * self.vertex_normals[ic];
        Hit {
            triangle: tri,
            bary,
            position: ray.origin + t * ray.direction,
            shading_normal: n.normalize(),
            geometric_normal: self.triangle_normal(tri),
            t,
        }
    }

    /// Pairwise triangle distance over the adjacency graph.
    ///
    /// Edge weight between adjacent triangles combines centroid distance,
    /// dihedral angle, and color difference, each normalized to unit variance
    /// over all edges before applying `weights`. Full matrix by all-pairs
    /// shortest path; disconnected components end up at infinity.
    pub fn triangle_distance_matrix(&self, weights: (f64, f64, f64)) -> Result<DistanceMatrix> {
        if self.triangle_colors.len() != self.triangles.len() {
            return Err(contract("triangle_colors not populated"));
        }
        let t_count = self.triangles.len();
        let mut edges: Vec<(usize, usize, [f64; 3])> = Vec::new();
        for i in 0..t_count {
            for &j in &self.adjacency[i] {
                if j > i {
                    let geo = (self.triangle_centroid(i) - self.triangle_centroid(j)).norm();
                    let angle = 1.0 - self.triangle_normal(i).dot(&self.triangle_normal(j));
                    let ci = self.triangle_colors[i];
                    let cj = self.triangle_colors[j];
                    let color = ((ci[0] - cj[0]).powi(2)
                        + (ci[1] - cj[1]).powi(2)
                        + (ci[2] - cj[2]).powi(2))
                    .sqrt();
                    edges.push((i, j, [geo, angle, color]));
                }
            }
        }
        // Normalize each term to unit variance over edges; constant terms stay raw.
        let mut scale = [1.0f64; 3];
        for c in 0..3 {
            let n = edges.len() as f64;
            let mean = edges.iter().map(|e| e.2[c]).sum::<f64>() / n;
            let var = edges.iter().map(|e| (e.2[c] - mean).powi(2)).sum::<f64>() / n;
            if var > 1e-24 {
                scale[c] = 1.0 / var.sqrt();
            }
        }
        let (wg, wa, wc) = weights;
        let mut d = vec![f64::INFINITY; t_count * t_count];
        for i in 0..t_count {
            d[i * t_count + i] = 0.0;
        }
        for (i, j, terms) in &edges {
            let w = wg * terms[0] * scale[0] + wa * terms[1] * scale[1] + wc * terms[2] * scale[2];
            d[i * t_count + j] = w;
            d[j * t_count + i] = w;
        }
        // Floyd-Warshall; the Dijkstra oracle in tests is the independent route.
        for k in 0..t_count {
            for i in 0..t_count {
                let dik = d[i * t_count + k];
                if dik.is_infinite() {
                    continue;
                }
                for j in 0..t_count {
                    let via = dik + d[k * t_count + j];
                    if via < d[i * t_count + j] {
                        d[i * t_count + j] = via;
                    }
                }
            }
        }
        let mat = DistanceMatrix { n: t_count, d };
        if mat.has_infinite() {
            log::warn!("mesh is disconnected; inter-component distances are infinite");
        }
        Ok(mat)
    }

    /// Vertex positions moved along the initial normals by the basis-weighted
    /// offsets of `w`; normals and BVH are rebuilt. V0 is preserved.
    pub fn refine_vertices(&self, bases: &GeometricBases, w: &[f64]) -> Result<TriangleMesh> {
        if w.len() > bases.n_bases() {
            return Err(contract("more weights than bases"));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(contract("non-finite refinement weight"));
        }
        let vertices = self.refined_positions(bases, w);
        let vertex_normals = compute_vertex_normals(&vertices, &self.triangles);
        let bvh = Bvh::build(&vertices, &self.triangles);
        let diameter = bounding_diameter(&vertices);
        Ok(TriangleMesh {
            initial_vertices: self.initial_vertices.clone(),
            initial_normals: self.initial_normals.clone(),
            vertices,
            triangles: self.triangles.clone(),
            vertex_normals,
            triangle_colors: self.triangle_colors.clone(),
            adjacency: self.adjacency.clone(),
            bvh,
            diameter,
        })
    }

    /// V0 + sum_j w_j g^(j) N0 per vertex.
    pub fn refined_positions(&self, bases: &GeometricBases, w: &[f64]) -> Vec<Vec3> {
        self.initial_vertices
            .iter()
            .enumerate()
            .map(|(v, &p)| {
                let off: f64 = w
                    .iter()
                    .enumerate()
                    .map(|(j, &wj)| wj * bases.per_vertex[(v, j)])
                    .sum();
                p + off * self.initial_normals[v]
            })
            .collect()
    }

    /// A copy whose shading normals come from the refined positions for `w`
    /// while intersection geometry stays at the current vertices. Used by the
    /// finite-difference oracle for the geometry gradient, which holds
    /// visibility fixed.
    pub fn with_shading_normals_for(&self, bases: &GeometricBases, w: &[f64]) -> TriangleMesh {
        let shading_positions = self.refined_positions(bases, w);
        let mut out = self.clone();
        out.vertex_normals = compute_vertex_normals(&shading_positions, &self.triangles);
        out
    }

    /// d(vertex normal)/d(w_j) for all vertices and the first `j_count` bases,
    /// evaluated at the current vertex positions.
    pub fn vertex_normal_jacobian(&self, bases: &GeometricBases, j_count: usize) -> Vec<Vec<Vec3>> {
        let nv = self.vertices.len();
        // Offset direction per vertex per j: g_v^(j) * N0_v.
        let offset_dir = |v: usize, j: usize| bases.per_vertex[(v, j)] * self.initial_normals[v];
        // Unnormalized vertex normal s_v = sum of incident unit triangle normals.
        let mut s = vec![Vec3::zeros(); nv];
        let mut incident: Vec<Vec<usize>> = vec![Vec::new(); nv];
        for (t, tri) in self.triangles.iter().enumerate() {
            let n = self.triangle_normal(t);
            for &v in tri {
                s[v] += n;
                incident[v].push(t);
            }
        }
        let mut out = vec![vec![Vec3::zeros(); j_count]; nv];
        for j in 0..j_count {
            // d(unit triangle normal)/dw_j per triangle.
            let mut dtri = vec![Vec3::zeros(); self.triangles.len()];
            for (t, tri) in self.triangles.iter().enumerate() {
                let [a, b, c] = *tri;
                let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
                let (ua, ub, uc) = (offset_dir(a, j), offset_dir(b, j), offset_dir(c, j));
                let cr = (pb - pa).cross(&(pc - pa));
                let dcr = (ub - ua).cross(&(pc - pa)) + (pb - pa).cross(&(uc - ua));
                let len = cr.norm();
                if len < 1e-30 {
                    continue;
                }
                let nh = cr / len;
                dtri[t] = (dcr - nh * nh.dot(&dcr)) / len;
            }
            for v in 0..nv {
                let mut ds = Vec3::zeros();
                for &t in &incident[v] {
                    ds += dtri[t];
                }
                let len = s[v].norm();
                if len < 1e-30 {
                    continue;
                }
                let nh = s[v] / len;
                out[v][j] = (ds - nh * nh.dot(&ds)) / len;
            }
        }
        out
    }

    /// Closest point on the mesh surface to `p`, via best-first BVH descent.
    pub fn closest_point(&self, p: &Vec3) -> (Vec3, f64) {
        self.bvh.closest_point(&self.vertices, &self.triangles, p)
    }
}

/// Symmetric all-pairs triangle distance matrix.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn has_infinite(&self) -> bool {
        self.d.iter().any(|x| x.is_infinite())
    }

    /// Median of all finite off-diagonal distances; the default similarity sigma.
    pub fn median_finite(&self) -> f64 {
        let mut vals: Vec<f64> = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                let v = self.get(i, j);
                if v.is_finite() {
                    vals.push(v);
                }
            }
        }
        if vals.is_empty() {
            return 1.0;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals[vals.len() / 2]
    }
}

/// Leading eigenvectors of the triangle similarity matrix, per triangle and
/// averaged onto vertices.
#[derive(Debug, Clone)]
pub struct GeometricBases {
    /// T x N; column n is basis n evaluated on each triangle.
    pub per_triangle: DMatrix<f64>,
    /// |V| x N; rows are means over incident triangles.
    pub per_vertex: DMatrix<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
}

impl GeometricBases {
    pub fn n_bases(&self) -> usize {
        self.per_triangle.ncols()
    }
}

/// Eigenvectors of s_ij = exp(-d_ij^2 / sigma^2) with the largest eigenvalues.
/// Infinite distances contribute zero similarity.
pub fn build_geometric_bases(
    mesh: &TriangleMesh,
    dist: &DistanceMatrix,
    sigma: f64,
    n_bases: usize,
) -> Result<GeometricBases> {
    let t_count = dist.n;
    if n_bases > t_count {
        return Err(contract(format!("n_bases {n_bases} exceeds triangle count {t_count}")));
    }
    if sigma <= 0.0 {
        return Err(contract("sigma must be positive"));
    }
    let mut s = DMatrix::zeros(t_count, t_count);
    for i in 0..t_count {
        for j in 0..t_count {
            let d = dist.get(i, j);
            s[(i, j)] = if d.is_finite() { (-d * d / (sigma * sigma)).exp() } else { 0.0 };
        }
    }
    let eig = s.symmetric_eigen();
    let mut order: Vec<usize> = (0..t_count).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    // Connected components of the finite-distance graph. S is block-diagonal
    // across components, so every eigenvector lives on one component; pure
    // top-N selection would starve small components (a detached part would
    // get no basis support at all). Guarantee one vector per component, then
    // fill by eigenvalue.
    let mut component = vec![usize::MAX; t_count];
    let mut n_components = 0;
    for i in 0..t_count {
        if component[i] != usize::MAX {
            continue;
        }
        let mut stack = vec![i];
        component[i] = n_components;
        while let Some(a) = stack.pop() {
            for b in 0..t_count {
                if component[b] == usize::MAX && dist.get(a, b).is_finite() {
                    component[b] = n_components;
                    stack.push(b);
                }
            }
        }
        n_components += 1;
    }
    let home = |src: usize| -> usize {
        let v = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 0..t_count {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        component[pivot]
    };
    let mut selected: Vec<usize> = Vec::with_capacity(n_bases);
    if n_components > 1 && n_components <= n_bases {
        let mut seen = vec![false; n_components];
        for &src in &order {
            let c = home(src);
            if !seen[c] {
                seen[c] = true;
                selected.push(src);
            }
        }
        selected.truncate(n_components);
        for &src in &order {
            if selected.len() == n_bases {
                break;
            }
            if !selected.contains(&src) {
                selected.push(src);
            }
        }
        selected
            .sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    } else {
        selected.extend(order.iter().take(n_bases));
    }

    let mut per_triangle = DMatrix::zeros(t_count, n_bases);
    let mut eigenvalues = Vec::with_capacity(n_bases);
    for (col, &src) in selected.iter().enumerate() {
        let v = eig.eigenvectors.column(src);
        // Deterministic sign: largest-magnitude component positive.
        let mut pivot = 0;
        for i in 0..t_count {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..t_count {
            per_triangle[(i, col)] = sign * v[i];
        }
        eigenvalues.push(eig.eigenvalues[src]);
    }
    // Per-vertex values: mean over incident triangles.
    let nv = mesh.vertices.len();
    let mut per_vertex = DMatrix::zeros(nv, n_bases);
    let mut counts = vec![0usize; nv];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for &v in tri {
            counts[v] += 1;
            for c in 0..n_bases {
                per_vertex[(v, c)] += per_triangle[(t, c)];
            }
        }
    }
    for v in 0..nv {
        if counts[v] > 0 {
            for c in 0..n_bases {
                per_vertex[(v, c)] /= counts[v] as f64;
            }
        }
    }
    Ok(GeometricBases {
        per_triangle,
        per_vertex,
        eigenvalues,
    })
}

fn build_adjacency(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Result<Vec<Vec<usize>>> {
    let _ = vertices;
    use std::collections::HashMap;
    let mut edge_map: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (t, tri) in triangles.iter().enumerate() {
        for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
            let key = (a.min(b), a.max(b));
            edge_map.entry(key).or_default().push(t);
        }
    }
    for (edge, tris) in &edge_map {
        if tris.len() > 2 {
            return Err(contract(format!(
                "non-manifold edge {:?} shared by {} triangles",
                edge,
                tris.len()
            )));
        }
    }
    let mut adjacency = vec![Vec::new(); triangles.len()];
    for tris in edge_map.values() {
        if tris.len() == 2 {
            adjacency[tris[0]].push(tris[1]);
            adjacency[tris[1]].push(tris[0]);
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
        list.dedup();
    }
    Ok(adjacency)
}

fn compute_vertex_normals(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Vec<Vec3> {
    let mut normals = vec![Vec3::zeros(); vertices.len()];
    for tri in triangles {
        let [a, b, c] = *tri;
        let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        let len = n.norm();
        if len < 1e-30 {
            continue;
        }
        let n = n / len;
        for &v in tri {
            normals[v] += n;
        }
    }
    for n in &mut normals {
        let len = n.norm();
        if len > 1e-30 {
            *n /= len;
        } else {
            *n = Vec3::new(0.0, 0.0, 1.0);
        }
    }
    normals
}

fn bounding_diameter(vertices: &[Vec3]) -> f64 {
    let mut lo = vertices[0];
    let mut hi = vertices[0];
    for v in vertices {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    (hi - lo).norm().max(1e-12)
}

// ---------------------------------------------------------------------------
// BVH

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: Vec3::repeat(f64::INFINITY),
            hi: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    /// Slab test; returns entry distance if the ray hits within [t_min, t_max].
    fn hit(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<f64> {
        let mut t0 = t_min;
        let mut t1 = t_max;
        for axis in 0..3 {
            let inv = 1.0 / ray.direction[axis];
            let mut near = (self.lo[axis] - ray.origin[axis]) * inv;
            let mut far = (self.hi[axis] - ray.origin[axis]) * inv;
            if inv < 0.0 {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }

    fn distance_sq(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for axis in 0..3 {
            let v = p[axis];
            let c = v.clamp(self.lo[axis], self.hi[axis]);
            d += (v - c) * (v - c);
        }
        d
    }
}

#[derive(Debug, Clone)]
struct BvhNode {
    aabb: Aabb,
    /// Leaf: (first, count) into `order`. Internal: left child is index+1,
    /// right child is `right`.
    first: usize,
    count: usize,
    right: usize,
}

#[derive(Debug, Clone)]
struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<usize>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    fn build(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Self {
        let centroids: Vec<Vec3> = triangles
            .iter()
            .map(|t| (vertices[t[0]] + vertices[t[1]] + vertices[t[2]]) / 3.0)
            .collect();
        let mut order: Vec<usize> = (0..triangles.len()).collect();
        let mut nodes = Vec::new();
        Self::build_node(vertices, triangles, &centroids, &mut order, 0, triangles.len(), &mut nodes);
        Bvh { nodes, order }
    }

    fn node_bounds(vertices: &[Vec3], triangles: &[[usize; 3]], order: &[usize], first: usize, count: usize) -> Aabb {
        let mut aabb = Aabb::empty();
        for &t in &order[first..first + count] {
            for &v in &triangles[t] {
                aabb.grow(&vertices[v]);
            }
        }
        aabb
    }

    fn build_node(
        vertices: &[Vec3],
        triangles: &[[usize; 3]],
        centroids: &[Vec3],
        order: &mut [usize],
        first: usize,
        count: usize,
        nodes: &mut Vec<BvhNode>,
    ) -> usize {
        let aabb = Self::node_bounds(vertices, triangles, order, first, count);
        let idx = nodes.len();
        nodes.push(BvhNode {
            aabb,
            first,
            count,
            right: 0,
        });
        if count <= LEAF_SIZE {
            return idx;
        }
        // Split at the centroid median of the widest axis.
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &t in &order[first..first + count] {
            lo = lo.inf(&centroids[t]);
            hi = hi.sup(&centroids[t]);
        }
        let extent = hi - lo;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        if extent[axis] < 1e-30 {
            return idx; // all centroids coincide; keep as leaf
        }
        let mid = first + count / 2;
        order[first..first + count].select_nth_unstable_by(count / 2, |&a, &b| {
            centroids[a][axis].partial_cmp(&centroids[b][axis]).unwrap()
        });
        nodes[idx].count = 0; // mark internal
        Self::build_node(vertices, triangles, centroids, order, first, mid - first, nodes);
        let right = Self::build_node(vertices, triangles, centroids, order, mid, first + count - mid, nodes);
        nodes[idx].right = right;
        idx
    }

    fn intersect(
        &self,
        vertices: &[Vec3],
        triangles: &[[usize; 3]],
        ray: &Ray,
        eps: f64,
    ) -> Option<(usize, f64, [f64; 3])> {
        let mut best: Option<(usize, f64, [f64; 3])> = None;
        let mut best_t = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            if node.aabb.hit(ray, eps, best_t).is_none() {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.first..node.first + node.count] {
                    let tri = &triangles[t];
                    if let Some((th, bary)) = ray_triangle(
                        ray,
                        &vertices[tri[0]],
                        &vertices[tri[1]],
                        &vertices[tri[2]],
                    ) {
                        if th > eps
                            && (th < best_t
                                || (th == best_t && best.map_or(true, |(bt, _, _)| t < bt)))
                        {
                            best_t = th;
                            best = Some((t, th, bary));
                        }
                    }
                }
            } else {
                stack.push(node.right);
                stack.push(idx + 1);
            }
        }
        best
    }

    fn closest_point(&self, vertices: &[Vec3], triangles: &[[usize; 3]], p: &Vec3) -> (Vec3, f64) {
        let mut best_point = Vec3::zeros();
        let mut best_d2 = f64::INFINITY;
        let mut stack = vec![0usize];
        while let Some(idx) = stack.pop() {
            let node = &self.nodes[idx];
            if node.aabb.distance_sq(p) >= best_d2 {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.first..node.first + node.count] {
                    let tri = &triangles[t];
                    let q = closest_point_on_triangle(
                        p,
                        &vertices[tri[0]],
                        &vertices[tri[1]],
                        &vertices[tri[2]],
                    );
                    let d2 = (q - p).norm_squared();
                    if d2 < best_d2 {
                        best_d2 = d2;
                        best_point = q;
                    }
                }
            } else {
                stack.push(node.right);
                stack.push(idx + 1);
            }
        }
        (best_point, best_d2.sqrt())
    }
}

/// Moller-Trumbore. Returns (t, barycentrics w.r.t. (a, b, c)).
pub fn ray_triangle(ray: &Ray, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<(f64, [f64; 3])> {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = ray.direction.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = ray.origin - a;
    let u = tvec.dot(&pvec) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = ray.direction.dot(&qvec) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qvec) * inv_det;
    if t <= 0.0 {
        return None;
    }
    Some((t, [1.0 - u - v, u, v]))
}

/// Exact closest point on a triangle (Ericson, Real-Time Collision Detection).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + v * ab;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + w * ac;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + w * (c - b);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + v * ab + w * ac
}

/// Fills triangle colors from per-triangle accumulated observations; triangles
/// with no samples copy the color of the nearest (by centroid) sampled triangle.
pub fn fill_triangle_colors(mesh: &mut TriangleMesh, sums: &[Rgb], counts: &[usize]) {
    let t_count = mesh.triangles.len();
    assert_eq!(sums.len(), t_count);
    assert_eq!(counts.len(), t_count);
    let mut colors = vec![[0.5, 0.5, 0.5]; t_count];
    let sampled: Vec<usize> = (0..t_count).filter(|&t| counts[t] > 0).collect();
    for &t in &sampled {
        let n = counts[t] as f64;
        colors[t] = [sums[t][0] / n, sums[t][1] / n, sums[t][2] / n];
    }
    if !sampled.is_empty() {
        for t in 0..t_count {
            if counts[t] == 0 {
                let c = mesh.triangle_centroid(t);
                let nearest = sampled
                    .iter()
                    .min_by(|&&a, &&b| {
                        let da = (mesh.triangle_centroid(a) - c).norm_squared();
                        let db = (mesh.triangle_centroid(b) - c).norm_squared();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                colors[t] = colors[*nearest];
            }
        }
    }
    mesh.triangle_colors = colors;
}
