//! Grid meshes, umbrella-operator mean curvature and curvature masks.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{pixel_center, write_file, BinaryMask};

const MESH_MAGIC: &[u8; 4] = b"MESH";
const MESH_VERSION: u32 = 1;

/// A `rows × cols` grid of 3D vertices with 4-neighborhood adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    rows: usize,
    cols: usize,
    vertices: Vec<[f64; 3]>,
}

pub fn build_grid_mesh(rows: usize, cols: usize, positions: Vec<[f64; 3]>) -> Result<Mesh> {
    Mesh::new(rows, cols, positions)
}

impl Mesh {
    pub fn new(rows: usize, cols: usize, vertices: Vec<[f64; 3]>) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::InvalidValue(format!("mesh needs at least 2x2 vertices, got {rows}x{cols}")));
        }
        if vertices.len() != rows * cols {
            return Err(Error::Shape {
                expected: crate::Shape::new(rows, cols, 3),
                found: crate::Shape::new(vertices.len(), 1, 3),
            });
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("mesh vertex is not finite".into()));
        }
        Ok(Self { rows, cols, vertices })
    }

    /// Flat sheet in the `z = 0` plane with each vertex at its own uv.
    pub fn flat(rows: usize, cols: usize) -> Result<Self> {
        let mut v = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                v.push([pixel_center(c, cols), pixel_center(r, rows), 0.0]);
            }
        }
        Self::new(rows, cols, v)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn vertex(&self, r: usize, c: usize) -> [f64; 3] {
        self.vertices[r * self.cols + c]
    }

    pub fn uv(&self, r: usize, c: usize) -> [f64; 2] {
        [pixel_center(c, self.cols), pixel_center(r, self.rows)]
    }

    /// Grid neighbors of vertex `(r, c)` as flat indices.
    pub fn neighbors(&self, r: usize, c: usize) -> impl Iterator<Item = usize> + '_ {
        let (rows, cols) = (self.rows, self.cols);
        [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].into_iter().filter_map(move |(dr, dc)| {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            (nr >= 0 && nc >= 0 && nr < rows as i64 && nc < cols as i64).then(|| nr as usize * cols + nc as usize)
        })
    }

    pub fn degree(&self, r: usize, c: usize) -> usize {
        self.neighbors(r, c).count()
    }

    pub fn edge_count(&self) -> usize {
        self.rows * (self.cols - 1) + self.cols * (self.rows - 1)
    }

    pub fn map_vertices(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Self> {
        Self::new(self.rows, self.cols, self.vertices.iter().map(|&v| f(v)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.vertices.len() * 12);
        out.extend_from_slice(MESH_MAGIC);
        for v in [MESH_VERSION, self.rows as u32, self.cols as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.vertices {
            for &x in p {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MESH_MAGIC {
            return Err(Error::Format("missing MESH header".into()));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
        if word(0) != MESH_VERSION {
            return Err(Error::Format(format!("unsupported MESH version {}", word(0))));
        }
        let (rows, cols) = (word(1) as usize, word(2) as usize);
        let need = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(12))
            .ok_or_else(|| Error::Format("MESH dimensions overflow".into()))?;
        if bytes.len() - 16 != need {
            return Err(Error::Format(format!("MESH payload is {} bytes, expected {need}", bytes.len() - 16)));
        }
        let vals: Vec<f64> = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let verts = vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(rows, cols, verts).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_bytes(&bytes)
    }
}

/// Per-vertex non-negative curvature values in the mesh's row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureField {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl CurvatureField {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// `H_i = ‖Σ_{j∈N_i} (v_i − v_j)‖` over the 4-neighborhood, boundary
/// vertices included.
pub fn mean_curvature(m: &Mesh) -> CurvatureField {
    let mut values = Vec::with_capacity(m.len());
    for r in 0..m.rows {
        for c in 0..m.cols {
            let v = m.vertex(r, c);
            let mut s = [0.0; 3];
            for n in m.neighbors(r, c) {
                let u = m.vertices[n];
                for a in 0..3 {
                    s[a] += v[a] - u[a];
                }
            }
            values.push((s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt());
        }
    }
    CurvatureField { rows: m.rows, cols: m.cols, values }
}

/// Boundary vertices and their grid neighbors.
pub fn in_boundary_band(rows: usize, cols: usize, r: usize, c: usize) -> bool {
    r < 2 || c < 2 || r + 2 >= rows || c + 2 >= cols
}

/// Median of `H` over vertices outside the boundary band, 0 if none.
pub fn median_interior_curvature(h: &CurvatureField) -> f64 {
    let mut v: Vec<f64> = (0..h.rows)
        .flat_map(|r| (0..h.cols).map(move |c| (r, c)))
        .filter(|&(r, c)| !in_boundary_band(h.rows, h.cols, r, c))
        .map(|(r, c)| h.get(r, c))
        .collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `max(factor × median interior H of reference, floor)`.
pub fn threshold_from_reference(reference: &Mesh, factor: f64, floor: f64) -> f64 {
    (factor * median_interior_curvature(&mean_curvature(reference))).max(floor)
}

/// Flags vertices with `H > threshold` outside the boundary band, splats
/// each flag to the pixel containing its uv, then dilates by one pixel in
/// the 4-neighborhood.
pub fn curvature_mask(h: &CurvatureField, m: &Mesh, threshold: f64, out_h: usize, out_w: usize) -> Result<BinaryMask> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidValue(format!("threshold must be non-negative, got {threshold}")));
    }
    if h.rows != m.rows || h.cols != m.cols {
        return Err(Error::InvalidValue("curvature field does not match mesh".into()));
    }
    let mut seeds = vec![false; out_h * out_w];
    for r in 0..m.rows {
        for c in 0..m.cols {
            if in_boundary_band(m.rows, m.cols, r, c) || h.get(r, c) <= threshold {
                continue;
            }
            let [u, v] = m.uv(r, c);
            let j = ((u * out_w as f64).floor() as usize).min(out_w - 1);
            let i = ((v * out_h as f64).floor() as usize).min(out_h - 1);
            seeds[i * out_w + j] = true;
        }
    }
    let mut bits = seeds.clone();
    for i in 0..out_h {
        for j in 0..out_w {
            if !seeds[i * out_w + j] {
                continue;
            }
            if i > 0 {
                bits[(i - 1) * out_w + j] = true;
            }
            if i + 1 < out_h {
                bits[(i + 1) * out_w + j] = true;
            }
            if j > 0 {
                bits[i * out_w + j - 1] = true;
            }
            if j + 1 < out_w {
                bits[i * out_w + j + 1] = true;
            }
        }
    }
    BinaryMask::new(out_h, out_w, bits)
}

/// Number of 8-connected components of set pixels.
pub fn count_components(mask: &BinaryMask) -> usize {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || !mask.bits()[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(k) = stack.pop() {
            let (i, j) = ((k / w) as i64, (k % w) as i64);
            for di in -1..=1 {
                for dj in -1..=1 {
                    let (ni, nj) = (i + di, j + dj);
                    if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                        continue;
                    }
                    let nk = ni as usize * w + nj as usize;
                    if mask.bits()[nk] && !seen[nk] {
                        seen[nk] = true;
                        stack.push(nk);
                    }
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_grid(rows: usize, cols: usize) -> Mesh {
        let v = (0..rows * cols).map(|k| [(k % cols) as f64, (k / cols) as f64, 0.0]).collect();
        Mesh::new(rows, cols, v).unwrap()
    }

    #[test]
    fn degrees_and_handshake() {
        let m = unit_grid(2, 2);
        assert!((0..2).all(|r| (0..2).all(|c| m.degree(r, c) == 2)));
        let m = unit_grid(3, 3);
        assert_eq!(m.degree(1, 1), 4);
        let m = unit_grid(4, 7);
        let total: usize = (0..4).flat_map(|r| (0..7).map(move |c| (r, c))).map(|(r, c)| m.degree(r, c)).sum();
        assert_eq!(total, 2 * m.edge_count());
        assert_eq!(m.edge_count(), 4 * 6 + 7 * 3);
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        assert!(matches!(build_grid_mesh(2, 3, vec![[0.0; 3]; 5]), Err(Error::Shape { .. })));
    }

    #[test]
    fn flat_interior_zero_and_edge_one() {
        let h = mean_curvature(&unit_grid(5, 5));
        assert_eq!(h.get(2, 2), 0.0);
        assert_eq!(h.get(0, 2), 1.0);
        assert!((h.get(0, 0) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn right_angle_fold_is_sqrt2() {
        // fold the half-plane x < 0 upward about the line x = 0
        let mut v = Vec::new();
        for r in 0..5 {
            for c in 0..5 {
                let x = c as f64 - 2.0;
                v.push(if x < 0.0 { [0.0, r as f64, -x] } else { [x, r as f64, 0.0] });
            }
        }
        let m = Mesh::new(5, 5, v).unwrap();
        let h = mean_curvature(&m);
        assert!((h.get(2, 2) - 2f64.sqrt()).abs() < 1e-9);
        assert_eq!(h.get(2, 1), 0.0);
    }

    #[test]
    fn mask_empty_below_threshold_and_on_flat_sheet() {
        let m = Mesh::flat(16, 16).unwrap();
        let h = mean_curvature(&m);
        assert!(curvature_mask(&h, &m, 0.0, 16, 16).unwrap().is_empty());
        let mut v = m.vertices().to_vec();
        v[8 * 16 + 8][2] = 0.01;
        let bumped = Mesh::new(16, 16, v).unwrap();
        let hb = mean_curvature(&bumped);
        assert!(curvature_mask(&hb, &bumped, 1.0, 16, 16).unwrap().is_empty());
        let mask = curvature_mask(&hb, &bumped, 0.0, 16, 16).unwrap();
        assert!(mask.get(8, 8) && mask.get(7, 8) && mask.get(8, 9));
        assert_eq!(count_components(&mask), 1);
    }

    #[test]
    fn mesh_bytes_round_trip() {
        let m = Mesh::new(2, 2, vec![[0.5, 0.25, 1.0], [0.0, 1.0, 2.0], [3.0, 4.0, 5.0], [-1.0, 0.125, 8.0]]).unwrap();
        let b = m.to_bytes();
        assert_eq!(&b[..4], b"MESH");
        assert_eq!(b.len(), 16 + 48);
        assert_eq!(Mesh::from_bytes(&b).unwrap(), m);
        assert!(Mesh::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn components_use_eight_connectivity() {
        let mask = BinaryMask::new(3, 3, vec![true, false, false, false, true, false, false, false, true]).unwrap();
        assert_eq!(count_components(&mask), 1);
        let mask = BinaryMask::new(1, 3, vec![true, false, true]).unwrap();
        assert_eq!(count_components(&mask), 2);
    }

    fn rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sc, cc) = c.sin_cos();
        let rz = [[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]];
        let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cc, -sc], [0.0, sc, cc]];
        let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
            let mut o = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    o[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
                }
            }
            o
        };
        mul(rz, mul(ry, rx))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rigid_invariance_and_scale_covariance(
            z in proptest::collection::vec(-1.0f64..1.0, 20),
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
            t in proptest::array::uniform3(-5.0f64..5.0),
            s in 0.1f64..10.0,
        ) {
            let v: Vec<[f64; 3]> = (0..20).map(|k| [(k % 5) as f64, (k / 5) as f64, z[k]]).collect();
            let m = Mesh::new(4, 5, v).unwrap();
            let h = mean_curvature(&m);
            let r = rotation(a, b, c);
            let moved = m.map_vertices(|p| {
                let mut o = t;
                for i in 0..3 {
                    o[i] += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
                }
                o
            }).unwrap();
            let scaled = m.map_vertices(|p| [s * p[0], s * p[1], s * p[2]]).unwrap();
            let (hm, hs) = (mean_curvature(&moved), mean_curvature(&scaled));
            for k in 0..20 {
                prop_assert!((hm.values[k] - h.values[k]).abs() < 1e-9);
                prop_assert!((hs.values[k] - s * h.values[k]).abs() < 1e-9 * s.max(1.0));
            }
        }

        #[test]
        fn planar_uniform_grid_has_flat_interior(
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
            spacing in 0.01f64..3.0,
        ) {
            let r = rotation(a, b, c);
            let v: Vec<[f64; 3]> = (0..36).map(|k| {
                let p = [spacing * (k % 6) as f64, spacing * (k / 6) as f64, 0.0];
                [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1])
            }).collect();
            let h = mean_curvature(&Mesh::new(6, 6, v).unwrap());
            for rr in 1..5 {
                for cc in 1..5 {
                    prop_assert!(h.get(rr, cc) < 1e-9);
                }
            }
        }

        #[test]
        fn moving_one_vertex_is_local(idx in 0usize..30, d in proptest::array::uniform3(-1.0f64..1.0)) {
            let m = unit_grid(5, 6);
            let mut v = m.vertices().to_vec();
            for a in 0..3 {
                v[idx][a] += d[a];
            }
            let moved = Mesh::new(5, 6, v).unwrap();
            let (h0, h1) = (mean_curvature(&m), mean_curvature(&moved));
            let near: Vec<usize> = std::iter::once(idx).chain(m.neighbors(idx / 6, idx % 6)).collect();
            for k in 0..30 {
                if !near.contains(&k) {
                    prop_assert_eq!(h0.values[k], h1.values[k]);
                }
            }
        }
    }
}
