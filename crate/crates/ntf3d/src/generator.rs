//! Mapping networks and the deformable-icosphere mesh generator.
//!
//! Two latent branches (geometry, texture) share one noisy text field
//! draw. With late concatenation (the default) the field bypasses the
//! mapping network and is appended to the mapped vector; the early-concat
//! ablation routes it through the mapping network instead.
//!
//! ```
//! use ntf3d::generator::{Branch, Generator, LatentVector};
//! use ntf3d::render::{eval_camera, render, RenderOpts};
//! use rand::SeedableRng;
//! use rand_chacha::ChaCha8Rng;
//!
//! let gen = Generator::new(4, 8, 8, true, 7);
//! let mut rng = ChaCha8Rng::seed_from_u64(1);
//! let t = vec![0.2; 8];
//! let zg = LatentVector::sample(4, &mut rng);
//! let zt = LatentVector::sample(4, &mut rng);
//! let mesh = gen
//!     .generate(
//!         &gen.latent_code(&zg, &t, Branch::Geometry).unwrap(),
//!         &gen.latent_code(&zt, &t, Branch::Texture).unwrap(),
//!     )
//!     .unwrap();
//! assert!(mesh.bbox_longest_edge() <= 0.8 + 1e-9);
//!
//! let opts = RenderOpts { res: 16, points: 64, ..Default::default() };
//! let view = render(&mesh, &eval_camera(), &opts, 1, 0).unwrap();
//! assert_eq!(view.rgb.len(), 16 * 16 * 3);
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mesh::{icosphere, LabeledPointCloud, TexturedMesh};
use crate::nn::{Binding, Mlp, ParamStore};
use crate::tape::{Graph, NodeId, Tensor};

pub const DEFAULT_Z_DIM: usize = 32;
pub const DEFAULT_W_DIM: usize = 64;
pub const ICOSPHERE_SUBDIVISIONS: usize = 2;
pub const BBOX_TARGET: f64 = 0.8;
/// Radial displacement bounds, fractions of unit radius.
pub const DISP_LO: f64 = -0.35;
pub const DISP_HI: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Geometry,
    Texture,
}

#[derive(Clone, Debug)]
pub struct LatentVector {
    pub z: Vec<f64>,
}

impl LatentVector {
    pub fn sample<R: Rng>(dim: usize, rng: &mut R) -> Self {
        LatentVector {
            z: (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        }
    }
}

/// Mapped latent plus the text-field draw it is conditioned on.
/// `concat` is the exact generator conditioning input.
#[derive(Clone, Debug)]
pub struct LatentCode {
    pub w: Vec<f64>,
    pub tfield: Vec<f64>,
    pub concat: Vec<f64>,
}

/// Mapping networks plus per-vertex displacement and color heads.
#[derive(Clone, Debug)]
pub struct Generator {
    pub store: ParamStore,
    map_geo: Mlp,
    map_tex: Mlp,
    disp: Mlp,
    color: Mlp,
    pub z_dim: usize,
    pub w_dim: usize,
    pub text_dim: usize,
    /// true: t-field appended after the mapping network (default);
    /// false: routed through it (ablation modes a/b).
    pub late_concat: bool,
    base_vertices: Vec<[f64; 3]>,
    base_faces: Vec<[usize; 3]>,
}

impl Generator {
    pub fn new(z_dim: usize, w_dim: usize, text_dim: usize, late_concat: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new("generator");
        let map_in = if late_concat { z_dim } else { z_dim + text_dim };
        let cond = if late_concat { w_dim + text_dim } else { w_dim };
        let map_geo = Mlp::init(&mut store, "f_geo", &[map_in, 64, w_dim], &mut rng, false);
        let map_tex = Mlp::init(&mut store, "f_tex", &[map_in, 64, w_dim], &mut rng, false);
        let disp = Mlp::init(&mut store, "disp", &[3 + cond, 64, 1], &mut rng, false);
        let color = Mlp::init(&mut store, "color", &[3 + cond, 64, 3], &mut rng, false);
        let (base_vertices, base_faces) = icosphere(ICOSPHERE_SUBDIVISIONS);
        Generator {
            store,
            map_geo,
            map_tex,
            disp,
            color,
            z_dim,
            w_dim,
            text_dim,
            late_concat,
            base_vertices,
            base_faces,
        }
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.base_faces
    }

    pub fn cond_dim(&self) -> usize {
        if self.late_concat { self.w_dim + self.text_dim } else { self.w_dim }
    }

    fn branch_mlp(&self, branch: Branch) -> &Mlp {
        match branch {
            Branch::Geometry => &self.map_geo,
            Branch::Texture => &self.map_tex,
        }
    }

    /// Graph-level conditioning code for one branch: [1 x cond_dim].
    pub fn code_graph(
        &self,
        g: &mut Graph,
        b: &Binding,
        z: NodeId,
        tfield: NodeId,
        branch: Branch,
    ) -> NodeId {
        let mlp = self.branch_mlp(branch);
        if self.late_concat {
            let w = mlp.forward(g, b, z);
            g.concat_cols(w, tfield)
        } else {
            let joined = g.concat_cols(z, tfield);
            mlp.forward(g, b, joined)
        }
    }

    /// Plain mapped vector w for one branch. In late-concat mode the
    /// mapping sees only z; otherwise it sees [z | tfield].
    pub fn map_latent(&self, z: &LatentVector, tfield: &[f64], branch: Branch) -> Result<Vec<f64>> {
        if z.z.iter().chain(tfield.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite latent input".into()));
        }
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let mlp = self.branch_mlp(branch);
        let input = if self.late_concat {
            g.leaf(Tensor::row(z.z.clone()))
        } else {
            let mut j = z.z.clone();
            j.extend_from_slice(tfield);
            g.leaf(Tensor::row(j))
        };
        let w = mlp.forward(&mut g, &b, input);
        Ok(g.value(w).data.clone())
    }

    /// Full latent code for one branch.
    pub fn latent_code(
        &self,
        z: &LatentVector,
        tfield: &[f64],
        branch: Branch,
    ) -> Result<LatentCode> {
        let w = self.map_latent(z, tfield, branch)?;
        let concat = if self.late_concat {
            let mut c = w.clone();
            c.extend_from_slice(tfield);
            c
        } else {
            w.clone()
        };
        Ok(LatentCode { w, tfield: tfield.to_vec(), concat })
    }

    /// Graph-level mesh from branch conditioning codes. Returns
    /// (vertices [V x 3], colors [V x 3]); faces are the fixed icosphere
    /// connectivity. Vertices are recentered and scaled in-graph so the
    /// longest bounding-box edge equals `BBOX_TARGET`.
    pub fn mesh_graph(
        &self,
        g: &mut Graph,
        b: &Binding,
        geo_code: NodeId,
        tex_code: NodeId,
    ) -> (NodeId, NodeId) {
        let v = self.base_vertices.len();
        let base = g.leaf(Tensor::from_vec(
            self.base_vertices.iter().flatten().copied().collect(),
            v,
            3,
        ));
        let geo_rep = g.repeat_row(geo_code, v);
        let geo_in = g.concat_cols(base, geo_rep);
        let raw_d = self.disp.forward(g, b, geo_in);
        let squash = g.sigmoid(raw_d);
        let scaled = g.scale(squash, DISP_HI - DISP_LO);
        let disp = g.add_scalar(scaled, DISP_LO);
        // radius factor 1 + d, applied radially to unit positions
        let factor = g.add_scalar(disp, 1.0);
        let verts = g.mul_col_broadcast(base, factor);
        // in-graph bounding-box normalization to BBOX_TARGET
        let maxc = g.max_rows(verts);
        let nv = g.neg(verts);
        let nmin = g.max_rows(nv);
        let minc = g.neg(nmin);
        let extent = g.sub(maxc, minc);
        let longest = g.max_all(extent);
        let inv = g.recip(longest);
        let s = g.scale(inv, BBOX_TARGET);
        let sum = g.add(maxc, minc);
        let center = g.scale(sum, 0.5);
        let ncenter = g.neg(center);
        let centered = g.add_row(verts, ncenter);
        let out_verts = g.mul_scalar_node(centered, s);

        let tex_rep = g.repeat_row(tex_code, v);
        let tex_in = g.concat_cols(base, tex_rep);
        let raw_c = self.color.forward(g, b, tex_in);
        let colors = g.sigmoid(raw_c);
        (out_verts, colors)
    }

    /// Plain generation from two latent codes sharing one t-field draw.
    pub fn generate(&self, w_geo: &LatentCode, w_tex: &LatentCode) -> Result<TexturedMesh> {
        if w_geo.tfield != w_tex.tfield {
            return Err(Error::InvalidInput(
                "geometry and texture codes must share the same text-field draw".into(),
            ));
        }
        if w_geo.concat.len() != self.cond_dim() || w_tex.concat.len() != self.cond_dim() {
            return Err(Error::InvalidInput("latent code dimension mismatch".into()));
        }
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let gc = g.leaf(Tensor::row(w_geo.concat.clone()));
        let tc = g.leaf(Tensor::row(w_tex.concat.clone()));
        let (vn, cn) = self.mesh_graph(&mut g, &b, gc, tc);
        let vt = g.value(vn);
        let ct = g.value(cn);
        let vertices: Vec<[f64; 3]> = vt.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let colors: Vec<[f64; 3]> = ct.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let mesh = TexturedMesh { vertices, faces: self.base_faces.clone(), colors };
        if !mesh.is_finite() {
            return Err(Error::Numeric("generator produced non-finite mesh".into()));
        }
        Ok(mesh)
    }
}

/// Sample an n-point labeled cloud from a generated mesh.
pub fn sample_surface<R: Rng>(
    mesh: &TexturedMesh,
    n: usize,
    text: &[f64],
    caption_id: u64,
    rng: &mut R,
) -> Result<LabeledPointCloud> {
    let (points, colors) = crate::mesh::sample_surface(mesh, n, rng)?;
    Ok(LabeledPointCloud { points, colors, text: text.to_vec(), caption_id })
}
