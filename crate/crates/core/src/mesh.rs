//! Regular-grid tetrahedral meshes of a rectangular phantom.
//!
//! Every voxel is split into six tetrahedra around its main diagonal (Kuhn
//! decomposition), which yields a conforming mesh. Nodes are numbered with x
//! varying fastest, then y, then z. The top face is `z = z_max`.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{FmtError, Result};

pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Face {
    Bottom,
    Top,
    MinusX,
    PlusX,
    MinusY,
    PlusY,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeClass {
    Interior,
    Surface,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceTri {
    pub nodes: [usize; 3],
    pub face: Face,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshGrid {
    dims: [f64; 3],
    spacing: f64,
    counts: [usize; 3],
    node_coords: Vec<Point>,
    tets: Vec<[usize; 4]>,
    surface_tris: Vec<SurfaceTri>,
    node_class: Vec<NodeClass>,
    illum_allowed: Vec<bool>,
}

/// Volume and constant basis-function gradients of one linear tetrahedron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementGeometry {
    pub volume: f64,
    pub grads: [[f64; 3]; 4],
}

// Six tetrahedra sharing the 000-111 diagonal; one per axis permutation.
const KUHN_PATHS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

fn voxel_count(length: f64, spacing: f64, axis: &str) -> Result<usize> {
    if !(length > 0.0) || !length.is_finite() {
        return Err(FmtError::InvalidGeometry(format!(
            "phantom {axis} extent must be positive, got {length}"
        )));
    }
    let ratio = length / spacing;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
        return Err(FmtError::InvalidGeometry(format!(
            "phantom {axis} extent {length} mm is not an integer multiple of spacing {spacing} mm"
        )));
    }
    Ok(n as usize)
}

/// Builds the voxel-derived tetrahedral mesh and classifies its nodes.
pub fn build_grid(dims: [f64; 3], spacing: f64) -> Result<MeshGrid> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(FmtError::InvalidGeometry(format!(
            "spacing must be positive, got {spacing}"
        )));
    }
    let nx = voxel_count(dims[0], spacing, "x")?;
    let ny = voxel_count(dims[1], spacing, "y")?;
    let nz = voxel_count(dims[2], spacing, "z")?;
    let (px, py, pz) = (nx + 1, ny + 1, nz + 1);
    let idx = |i: usize, j: usize, k: usize| i + px * (j + py * k);

    let mut node_coords = Vec::with_capacity(px * py * pz);
    for k in 0..pz {
        for j in 0..py {
            for i in 0..px {
                node_coords.push([i as f64 * spacing, j as f64 * spacing, k as f64 * spacing]);
            }
        }
    }

    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for path in KUHN_PATHS {
                    let mut c = [i, j, k];
                    let mut tet = [idx(i, j, k), 0, 0, 0];
                    for (s, &axis) in path.iter().enumerate() {
                        c[axis] += 1;
                        tet[s + 1] = idx(c[0], c[1], c[2]);
                    }
                    if signed_volume(&node_coords, &tet) < 0.0 {
                        tet.swap(2, 3);
                    }
                    tets.push(tet);
                }
            }
        }
    }

    let mut mesh = MeshGrid {
        dims,
        spacing,
        counts: [nx, ny, nz],
        node_coords,
        tets,
        surface_tris: Vec::new(),
        node_class: Vec::new(),
        illum_allowed: Vec::new(),
    };
    mesh.surface_tris = boundary_triangles(&mesh);
    Ok(classify_nodes(mesh))
}

fn signed_volume(coords: &[Point], tet: &[usize; 4]) -> f64 {
    let p0 = coords[tet[0]];
    let e = |a: usize| {
        let p = coords[tet[a]];
        [p[0] - p0[0], p[1] - p0[1], p[2] - p0[2]]
    };
    let (a, b, c) = (e(1), e(2), e(3));
    det3(a, b, c) / 6.0
}

fn det3(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
        + a[2] * (b[0] * c[1] - b[1] * c[0])
}

fn boundary_triangles(mesh: &MeshGrid) -> Vec<SurfaceTri> {
    let faces_of = |t: &[usize; 4]| {
        [
            [t[1], t[2], t[3]],
            [t[0], t[2], t[3]],
            [t[0], t[1], t[3]],
            [t[0], t[1], t[2]],
        ]
    };
    let mut count: HashMap<[usize; 3], u8> = HashMap::new();
    for t in &mesh.tets {
        for f in faces_of(t) {
            let mut key = f;
            key.sort_unstable();
            *count.entry(key).or_insert(0) += 1;
        }
    }
    let mut out = Vec::new();
    for t in &mesh.tets {
        for f in faces_of(t) {
            let mut key = f;
            key.sort_unstable();
            if count[&key] == 1 {
                let face = mesh
                    .face_of(&key)
                    .expect("boundary face must lie on a phantom face");
                out.push(SurfaceTri { nodes: f, face });
            }
        }
    }
    out
}

/// Fills `node_class` and `illum_allowed`: surface iff on the phantom boundary,
/// illumination allowed iff on the top face.
pub fn classify_nodes(mut mesh: MeshGrid) -> MeshGrid {
    let [nx, ny, nz] = mesh.counts;
    let (px, py) = (nx + 1, ny + 1);
    let n = mesh.node_coords.len();
    mesh.node_class = Vec::with_capacity(n);
    mesh.illum_allowed = Vec::with_capacity(n);
    for id in 0..n {
        let i = id % px;
        let j = (id / px) % py;
        let k = id / (px * py);
        let surface = i == 0 || i == nx || j == 0 || j == ny || k == 0 || k == nz;
        mesh.node_class.push(if surface {
            NodeClass::Surface
        } else {
            NodeClass::Interior
        });
        mesh.illum_allowed.push(k == nz);
    }
    mesh
}

impl MeshGrid {
    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn dims(&self) -> [f64; 3] {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Voxel counts along x, y, z.
    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    pub fn node_coords(&self) -> &[Point] {
        &self.node_coords
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn surface_tris(&self) -> &[SurfaceTri] {
        &self.surface_tris
    }

    pub fn node_class(&self) -> &[NodeClass] {
        &self.node_class
    }

    pub fn illum_allowed(&self) -> &[bool] {
        &self.illum_allowed
    }

    pub fn is_surface(&self, node: usize) -> bool {
        self.node_class[node] == NodeClass::Surface
    }

    /// Indices of nodes where lasers may be placed, ascending.
    pub fn illum_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&i| self.illum_allowed[i])
            .collect()
    }

    pub fn surface_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&i| self.is_surface(i))
            .collect()
    }

    pub fn top_z(&self) -> f64 {
        self.counts[2] as f64 * self.spacing
    }

    /// Grid index triple of a node.
    pub fn grid_index(&self, node: usize) -> [usize; 3] {
        let px = self.counts[0] + 1;
        let py = self.counts[1] + 1;
        [node % px, (node / px) % py, node / (px * py)]
    }

    pub fn node_at(&self, i: usize, j: usize, k: usize) -> Option<usize> {
        let [nx, ny, nz] = self.counts;
        if i > nx || j > ny || k > nz {
            return None;
        }
        Some(i + (nx + 1) * (j + (ny + 1) * k))
    }

    /// Node closest to a point (coordinates clamped to the phantom).
    pub fn nearest_node(&self, p: Point) -> usize {
        let g = |v: f64, n: usize| ((v / self.spacing).round().max(0.0) as usize).min(n);
        let [nx, ny, nz] = self.counts;
        self.node_at(g(p[0], nx), g(p[1], ny), g(p[2], nz))
            .expect("clamped index is in range")
    }

    fn face_of(&self, tri: &[usize; 3]) -> Option<Face> {
        let [nx, ny, nz] = self.counts;
        let g: Vec<[usize; 3]> = tri.iter().map(|&n| self.grid_index(n)).collect();
        let all = |axis: usize, v: usize| g.iter().all(|c| c[axis] == v);
        if all(2, nz) {
            Some(Face::Top)
        } else if all(2, 0) {
            Some(Face::Bottom)
        } else if all(0, 0) {
            Some(Face::MinusX)
        } else if all(0, nx) {
            Some(Face::PlusX)
        } else if all(1, 0) {
            Some(Face::MinusY)
        } else if all(1, ny) {
            Some(Face::PlusY)
        } else {
            None
        }
    }

    pub fn signed_volume(&self, tet_index: usize) -> f64 {
        signed_volume(&self.node_coords, &self.tets[tet_index])
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.n_tets()).map(|t| self.signed_volume(t)).sum()
    }

    pub fn triangle_area(&self, tri: &SurfaceTri) -> f64 {
        let [a, b, c] = tri.nodes.map(|n| self.node_coords[n]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cr = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        0.5 * (cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2]).sqrt()
    }

    /// Boundary area attributed to each node on the given face (one third of
    /// every adjacent face triangle).
    pub fn nodal_face_area(&self, face: Face) -> Vec<f64> {
        let mut area = vec![0.0; self.n_nodes()];
        for tri in self.surface_tris.iter().filter(|t| t.face == face) {
            let a = self.triangle_area(tri) / 3.0;
            for &n in &tri.nodes {
                area[n] += a;
            }
        }
        area
    }

    /// Writes `node_id,x,y,z` rows.
    pub fn write_nodes_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "node_id,x,y,z")?;
        for (i, p) in self.node_coords.iter().enumerate() {
            writeln!(w, "{i},{},{},{}", p[0], p[1], p[2])?;
        }
        Ok(())
    }

    /// Writes `tet_id,n0,n1,n2,n3` rows.
    pub fn write_tets_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tet_id,n0,n1,n2,n3")?;
        for (i, t) in self.tets.iter().enumerate() {
            writeln!(w, "{i},{},{},{},{}", t[0], t[1], t[2], t[3])?;
        }
        Ok(())
    }
}

/// Volume and barycentric basis gradients of tetrahedron `tet_index`.
pub fn element_geometry(mesh: &MeshGrid, tet_index: usize) -> Result<ElementGeometry> {
    let tet = mesh.tets.get(tet_index).ok_or_else(|| {
        FmtError::param(
            "tet_index",
            format!("{tet_index} out of range ({})", mesh.n_tets()),
        )
    })?;
    let pts = tet.map(|n| mesh.node_coords[n]);
    tet_geometry(&pts).ok_or(FmtError::DegenerateElement {
        index: tet_index,
        volume: signed_volume(&mesh.node_coords, tet),
    })
}

/// Geometry of a tetrahedron given by its vertices; `None` when degenerate.
pub fn tet_geometry(pts: &[Point; 4]) -> Option<ElementGeometry> {
    let p0 = pts[0];
    let e = |a: usize| [pts[a][0] - p0[0], pts[a][1] - p0[1], pts[a][2] - p0[2]];
    let (a, b, c) = (e(1), e(2), e(3));
    let det = det3(a, b, c);
    let scale = norm3(a) * norm3(b) * norm3(c);
    if !(det.abs() > 1e-14 * scale) {
        return None;
    }
    // Rows of J^{-1} with J = [a b c] as columns are the gradients of the
    // barycentric coordinates of vertices 1..3.
    let g1 = cross(b, c).map(|v| v / det);
    let g2 = cross(c, a).map(|v| v / det);
    let g3 = cross(a, b).map(|v| v / det);
    let g0 = [
        -(g1[0] + g2[0] + g3[0]),
        -(g1[1] + g2[1] + g3[1]),
        -(g1[2] + g2[2] + g3[2]),
    ];
    Some(ElementGeometry {
        volume: det.abs() / 6.0,
        grads: [g0, g1, g2, g3],
    })
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent count: enumerate voxels and nodes directly.
    fn brute_counts(n: [usize; 3]) -> (usize, usize) {
        let mut nodes = 0;
        for _ in 0..=n[0] {
            for _ in 0..=n[1] {
                for _ in 0..=n[2] {
                    nodes += 1;
                }
            }
        }
        let mut tets = 0;
        for _ in 0..n[0] * n[1] * n[2] {
            tets += KUHN_PATHS.len();
        }
        (nodes, tets)
    }

    #[test]
    fn paper_phantom_counts() {
        let m = build_grid([15.0, 15.0, 15.0], 1.0).unwrap();
        assert_eq!((m.n_nodes(), m.n_tets()), brute_counts([15, 15, 15]));
        assert_eq!(m.n_nodes(), 4096);
        assert_eq!(m.n_tets(), 20250);
    }

    #[test]
    fn single_voxel() {
        let m = build_grid([1.0, 1.0, 1.0], 1.0).unwrap();
        assert_eq!(m.n_nodes(), 8);
        assert_eq!(m.n_tets(), 6);
        assert!((m.total_volume() - 1.0).abs() < 1e-15);
        assert!(m.node_class().iter().all(|&c| c == NodeClass::Surface));
        assert_eq!(m.illum_nodes().len(), 4);
        // 6 faces x 2 triangles
        assert_eq!(m.surface_tris().len(), 12);
    }

    #[test]
    fn two_voxels() {
        let m = build_grid([2.0, 1.0, 1.0], 1.0).unwrap();
        assert_eq!((m.n_nodes(), m.n_tets()), brute_counts([2, 1, 1]));
        assert_eq!((m.n_nodes(), m.n_tets()), (12, 12));
    }

    #[test]
    fn classification_of_cube() {
        let m = build_grid([15.0, 15.0, 15.0], 1.0).unwrap();
        let brute_surface = m
            .node_coords()
            .iter()
            .filter(|p| p.iter().any(|&c| c == 0.0 || c == 15.0))
            .count();
        let surface = m.surface_nodes().len();
        assert_eq!(surface, brute_surface);
        assert_eq!(surface, 4096 - 14 * 14 * 14);
        let top = m.node_coords().iter().filter(|p| p[2] == 15.0).count();
        assert_eq!(m.illum_nodes().len(), top);
        assert_eq!(top, 256);
        for i in 0..m.n_nodes() {
            if m.illum_allowed()[i] {
                assert!(m.is_surface(i));
            }
        }
    }

    #[test]
    fn volumes_positive_and_conserved() {
        let m = build_grid([3.0, 2.0, 4.0], 0.5).unwrap();
        for t in 0..m.n_tets() {
            assert!(m.signed_volume(t) > 0.0);
        }
        assert!((m.total_volume() - 24.0).abs() / 24.0 < 1e-12);
    }

    #[test]
    fn surface_area_matches_box() {
        let m = build_grid([3.0, 2.0, 4.0], 1.0).unwrap();
        let area: f64 = m.surface_tris().iter().map(|t| m.triangle_area(t)).sum();
        let want = 2.0 * (3.0 * 2.0 + 3.0 * 4.0 + 2.0 * 4.0);
        assert!((area - want).abs() < 1e-12);
        let top: f64 = m.nodal_face_area(Face::Top).iter().sum();
        assert!((top - 6.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(build_grid([1.0, 1.0, 1.0], 0.0).is_err());
        assert!(build_grid([1.0, 1.0, 1.0], -1.0).is_err());
        let err = build_grid([1.5, 1.0, 1.0], 1.0).unwrap_err();
        assert!(err.to_string().contains("not an integer multiple"));
    }

    #[test]
    fn reference_tet_geometry() {
        let g = tet_geometry(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert!((g.volume - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(g.grads[0], [-1.0, -1.0, -1.0]);
        assert_eq!(g.grads[1], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_tet_rejected() {
        assert!(
            tet_geometry(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).is_none()
        );
    }

    #[test]
    fn gradients_sum_to_zero() {
        let m = build_grid([2.0, 2.0, 2.0], 0.5).unwrap();
        for t in 0..m.n_tets() {
            let g = element_geometry(&m, t).unwrap();
            for d in 0..3 {
                let s: f64 = g.grads.iter().map(|v| v[d]).sum();
                assert!(s.abs() < 1e-14);
            }
        }
        assert!(element_geometry(&m, m.n_tets()).is_err());
    }

    #[test]
    fn deterministic_build() {
        let a = build_grid([3.0, 3.0, 2.0], 1.0).unwrap();
        let b = build_grid([3.0, 3.0, 2.0], 1.0).unwrap();
        assert_eq!(a, b);
    }
}
