//! Frozen, deterministic embedders for captions and rendered views.
//!
//! Both stand in for a pretrained vision-language encoder: text is token
//! hashed into a seeded random-projection table and mean-pooled, images
//! are projected from non-overlapping patch means. Everything here is
//! constant after construction; no training step may touch it.
//!
//! ```
//! use ntf3d::embed::TextEmbedder;
//! let emb = TextEmbedder::new(64, 7);
//! let a = emb.embed_text("a red sphere").unwrap();
//! let b = emb.embed_text("a red sphere").unwrap();
//! assert_eq!(a.vector, b.vector);
//! let norm: f64 = a.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
//! assert!((norm - 1.0).abs() < 1e-6);
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::render::RenderedView;
use crate::tape::{Graph, NodeId, Tensor};

/// Unit-norm caption embedding.
#[derive(Clone, Debug)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub source_text: String,
}

/// Unit-norm embedding of a rendered view.
#[derive(Clone, Debug)]
pub struct ImageEmbedding {
    pub vector: Vec<f64>,
    pub source_caption_id: u64,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Token-hash text embedder. Captions sharing attribute words share token
/// rows, so their embeddings are closer in cosine than unrelated captions.
#[derive(Clone, Debug)]
pub struct TextEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl TextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        TextEmbedder { dim, seed }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(token));
        (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    pub fn embed_text(&self, text: &str) -> Result<TextEmbedding> {
        let tokens: Vec<String> = text
            .to_lowercase()
            .split_whitespace()
            .map(|t| t.to_string())
            .collect();
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty caption".into()));
        }
        let mut acc = vec![0.0f64; self.dim];
        for t in &tokens {
            let tv = self.token_vector(t);
            for (a, b) in acc.iter_mut().zip(&tv) {
                *a += b;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|x| *x /= n);
        l2_normalize(&mut acc);
        Ok(TextEmbedding { vector: acc, source_text: text.to_string() })
    }
}

/// Patch-mean image embedder: fixed average pooling over a patch grid,
/// fixed random projection, L2 normalization. Differentiable end-to-end
/// via the tape.
#[derive(Clone, Debug)]
pub struct ImageEmbedder {
    pub dim: usize,
    pub patch_grid: usize,
    pub seed: u64,
    pub res: usize,
    /// [res*res*3 x patch_grid^2*3] constant pooling matrix.
    pool: Tensor,
    /// [patch_grid^2*3 x dim] constant projection.
    proj: Tensor,
}

impl ImageEmbedder {
    pub fn new(dim: usize, patch_grid: usize, seed: u64, res: usize) -> Self {
        assert!(res % patch_grid == 0, "resolution must divide the patch grid");
        let npatch = patch_grid * patch_grid;
        let ps = res / patch_grid;
        let mut pool = Tensor::zeros(res * res * 3, npatch * 3);
        let inv = 1.0 / ((ps * ps) as f64);
        for py in 0..patch_grid {
            for px in 0..patch_grid {
                let p = py * patch_grid + px;
                for dy in 0..ps {
                    for dx in 0..ps {
                        let pix = (py * ps + dy) * res + px * ps + dx;
                        for ch in 0..3 {
                            pool.set(pix * 3 + ch, p * 3 + ch, inv);
                        }
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        let proj_data: Vec<f64> = (0..npatch * 3 * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) / (npatch as f64 * 3.0).sqrt())
            .collect();
        let proj = Tensor::from_vec(proj_data, npatch * 3, dim);
        ImageEmbedder { dim, patch_grid, seed, res, pool, proj }
    }

    /// Graph version: `img` is a [1 x res*res*3] node with rgb interleaved
    /// per pixel. Returns a unit-norm [1 x dim] node.
    pub fn embed_graph(&self, g: &mut Graph, img: NodeId) -> NodeId {
        assert_eq!(g.value(img).cols, self.res * self.res * 3);
        let pool = g.leaf(self.pool.clone());
        let proj = g.leaf(self.proj.clone());
        let patches = g.matmul(img, pool);
        let feat = g.matmul(patches, proj);
        g.l2_normalize_rows(feat)
    }

    /// Convenience wrapper over the graph path.
    pub fn embed_image(&self, view: &RenderedView) -> Result<ImageEmbedding> {
        if view.res() != self.res {
            return Err(Error::InvalidInput(format!(
                "view resolution {} does not match embedder resolution {}",
                view.res(),
                self.res
            )));
        }
        let mut g = Graph::new();
        let img = g.leaf(Tensor::row(view.rgb_flat()));
        let out = self.embed_graph(&mut g, img);
        Ok(ImageEmbedding {
            vector: g.value(out).data.clone(),
            source_caption_id: view.caption_id,
        })
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}
