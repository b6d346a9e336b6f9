//! Triangle meshes with per-vertex color, icosphere generation, bounding
//! box normalization, and area-weighted surface sampling.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::BaryMap;

/// Watertight-by-construction triangle mesh with per-vertex RGB.
#[derive(Clone, Debug)]
pub struct TexturedMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub colors: Vec<[f64; 3]>,
}

/// Surface samples paired with the caption embedding they belong to.
#[derive(Clone, Debug)]
pub struct LabeledPointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub text: Vec<f64>,
    pub caption_id: u64,
}

impl TexturedMesh {
    pub fn bbox(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_longest_edge(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max)
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        tri_area(&self.vertices[a], &self.vertices[b], &self.vertices[c])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.vertices.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

fn tri_area(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let cx = u[1] * v[2] - u[2] * v[1];
    let cy = u[2] * v[0] - u[0] * v[2];
    let cz = u[0] * v[1] - u[1] * v[0];
    0.5 * (cx * cx + cy * cy + cz * cz).sqrt()
}

/// Unit icosphere via repeated edge-midpoint subdivision.
/// Vertex count follows 10 * 4^n + 2.
pub fn icosphere(subdivisions: usize) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let t = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
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
    for v in verts.iter_mut() {
        normalize3(v);
    }
    let mut faces: Vec<[usize; 3]> = vec![
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
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mids = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mids[e] = *midpoint.entry(key).or_insert_with(|| {
                    let va = verts[a];
                    let vb = verts[b];
                    let mut m = [
                        (va[0] + vb[0]) / 2.0,
                        (va[1] + vb[1]) / 2.0,
                        (va[2] + vb[2]) / 2.0,
                    ];
                    normalize3(&mut m);
                    verts.push(m);
                    verts.len() - 1
                });
            }
            new_faces.push([f[0], mids[0], mids[2]]);
            new_faces.push([f[1], mids[1], mids[0]]);
            new_faces.push([f[2], mids[2], mids[1]]);
            new_faces.push([mids[0], mids[1], mids[2]]);
        }
        faces = new_faces;
    }
    (verts, faces)
}

fn normalize3(v: &mut [f64; 3]) {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v[0] /= n;
    v[1] /= n;
    v[2] /= n;
}

/// Recenter to the bbox center and uniformly scale so the longest
/// bounding-box edge equals `target`. Colors untouched.
pub fn normalize_bbox(mesh: &TexturedMesh, target: f64) -> TexturedMesh {
    let (lo, hi) = mesh.bbox();
    let longest = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max).max(1e-300);
    let s = target / longest;
    let center = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    TexturedMesh {
        vertices: mesh
            .vertices
            .iter()
            .map(|v| {
                [
                    (v[0] - center[0]) * s,
                    (v[1] - center[1]) * s,
                    (v[2] - center[2]) * s,
                ]
            })
            .collect(),
        faces: mesh.faces.clone(),
        colors: mesh.colors.clone(),
    }
}

/// Draw `n` (face, barycentric) samples, area-weighted with uniform
/// barycentric coordinates. The map is a fixed linear operator per draw,
/// which keeps interpolation differentiable in vertices and colors.
pub fn sample_bary_map<R: Rng>(
    vertices: &[[f64; 3]],
    faces: &[[usize; 3]],
    n: usize,
    rng: &mut R,
) -> Result<Rc<BaryMap>> {
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be >= 1".into()));
    }
    let mut cum = Vec::with_capacity(faces.len());
    let mut total = 0.0;
    for f in faces {
        total += tri_area(&vertices[f[0]], &vertices[f[1]], &vertices[f[2]]);
        cum.push(total);
    }
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::InvalidInput("degenerate mesh: zero total surface area".into()));
    }
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen::<f64>() * total;
        let fi = match cum.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => i,
            Err(i) => i.min(faces.len() - 1),
        };
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s = r1.sqrt();
        let (w0, w1, w2) = (1.0 - s, s * (1.0 - r2), s * r2);
        let f = faces[fi];
        entries.push((f[0], f[1], f[2], w0, w1, w2));
    }
    Ok(Rc::new(BaryMap { entries, source_rows: vertices.len() }))
}

/// Sampled surface points with interpolated colors.
pub fn sample_surface<R: Rng>(
    mesh: &TexturedMesh,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let map = sample_bary_map(&mesh.vertices, &mesh.faces, n, rng)?;
    let mut pts = Vec::with_capacity(n);
    let mut cols = Vec::with_capacity(n);
    for &(i0, i1, i2, w0, w1, w2) in &map.entries {
        let p = [
            w0 * mesh.vertices[i0][0] + w1 * mesh.vertices[i1][0] + w2 * mesh.vertices[i2][0],
            w0 * mesh.vertices[i0][1] + w1 * mesh.vertices[i1][1] + w2 * mesh.vertices[i2][1],
            w0 * mesh.vertices[i0][2] + w1 * mesh.vertices[i1][2] + w2 * mesh.vertices[i2][2],
        ];
        let c = [
            w0 * mesh.colors[i0][0] + w1 * mesh.colors[i1][0] + w2 * mesh.colors[i2][0],
            w0 * mesh.colors[i0][1] + w1 * mesh.colors[i1][1] + w2 * mesh.colors[i2][1],
            w0 * mesh.colors[i0][2] + w1 * mesh.colors[i1][2] + w2 * mesh.colors[i2][2],
        ];
        pts.push(p);
        cols.push(c);
    }
    Ok((pts, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn icosphere_combinatorics() {
        for n in 0..3 {
            let (v, f) = icosphere(n);
            assert_eq!(v.len(), 10 * 4usize.pow(n as u32) + 2);
            assert_eq!(f.len(), 20 * 4usize.pow(n as u32));
        }
    }

    #[test]
    fn icosphere_vertices_unit() {
        let (v, _) = icosphere(2);
        for p in v {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_bbox_idempotent_and_exact() {
        let (v, f) = icosphere(1);
        let mesh = TexturedMesh {
            colors: vec![[0.5; 3]; v.len()],
            vertices: v,
            faces: f,
        };
        let m1 = normalize_bbox(&mesh, 0.8);
        assert!((m1.bbox_longest_edge() - 0.8).abs() < 1e-12);
        let m2 = normalize_bbox(&m1, 0.8);
        for (a, b) in m1.vertices.iter().zip(&m2.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_triangle_samples_stay_inside() {
        let mesh = TexturedMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
            colors: vec![[1.0, 0.0, 0.0]; 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pts, _) = sample_surface(&mesh, 500, &mut rng).unwrap();
        for p in pts {
            assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 1.0 + 1e-12);
            assert!(p[2].abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_mesh_rejected() {
        let mesh = TexturedMesh {
            vertices: vec![[0.0; 3]; 3],
            faces: vec![[0, 1, 2]],
            colors: vec![[0.0; 3]; 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_surface(&mesh, 10, &mut rng).is_err());
    }

    #[test]
    fn face_selection_tracks_area() {
        // two faces with 3:1 area ratio
        let mesh = TexturedMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [3.0, 0.0, 0.0],
                [0.0, 2.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, -2.0, 0.0],
            ],
            faces: vec![[0, 1, 2], [0, 3, 4]],
            colors: vec![[0.0; 3]; 5],
        };
        let a0 = mesh.face_area(0);
        let a1 = mesh.face_area(1);
        assert!((a0 / a1 - 3.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = sample_bary_map(&mesh.vertices, &mesh.faces, 20_000, &mut rng).unwrap();
        // the faces share vertex 0; distinguish them by the second corner
        let hits_f1 = map.entries.iter().filter(|e| e.1 == 1).count() as f64;
        let frac = hits_f1 / 20_000.0;
        assert!((frac - 0.75).abs() < 0.02, "{frac}");
    }
}
