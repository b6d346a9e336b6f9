//! Noisy text fields and their objectives.
//!
//! A caption embedding `t` becomes a stochastic neighborhood
//! `t~ = t + sigma(t) * n` with a learned per-dimension scale squashed
//! strictly into `(EPS_LO, EPS_HI)`. The generation objective aligns the
//! noisy fields with embeddings of generated and ground-truth renders;
//! the binding objective ties view-invariant image codes to the same
//! fields.
//!
//! ```
//! use ntf3d::ntf::{nce_loss, SigmaNet, EPS_HI, EPS_LO};
//!
//! let net = SigmaNet::new(8, 1);
//! let sigma = net.sigma(&vec![0.1; 8]);
//! assert!(sigma.iter().all(|s| *s > EPS_LO && *s < EPS_HI));
//!
//! let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
//! let loss = nce_loss(&rows, &rows, 0.07).unwrap();
//! assert!(loss < 1e-6); // perfectly aligned batch
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embed::{ImageEmbedder, TextEmbedding};
use crate::error::{Error, Result};
use crate::nn::{Binding, Mlp, ParamStore};
use crate::render::{CameraPose, RenderedView};
use crate::tape::{Graph, NodeId, Tensor};

/// Noise-scale clamp interval, exclusive at both ends.
pub const EPS_LO: f64 = 0.0002;
pub const EPS_HI: f64 = 0.016;

/// One draw from a caption's noisy text field.
#[derive(Clone, Debug)]
pub struct NoisyTextField {
    pub base: TextEmbedding,
    pub sigma: Vec<f64>,
    pub sample: Vec<f64>,
}

/// Trainable noise-scale network. The logistic squash keeps every output
/// component strictly inside `(EPS_LO, EPS_HI)` for all finite inputs.
#[derive(Clone, Debug)]
pub struct SigmaNet {
    pub store: ParamStore,
    pub mlp: Mlp,
    pub dim: usize,
}

impl SigmaNet {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new("sigma_net");
        // zero final layer: training starts at the interval midpoint
        let mlp = Mlp::init(&mut store, "f_txt", &[dim, dim, dim], &mut rng, true);
        SigmaNet { store, mlp, dim }
    }

    /// Graph-level sigma(t): EPS_LO + (EPS_HI - EPS_LO) * logistic(f_txt(t)).
    pub fn sigma_graph(&self, g: &mut Graph, b: &Binding, t: NodeId) -> NodeId {
        let raw = self.mlp.forward(g, b, t);
        let squashed = g.sigmoid(raw);
        let scaled = g.scale(squashed, EPS_HI - EPS_LO);
        g.add_scalar(scaled, EPS_LO)
    }

    /// Plain sigma(t) for probes and tests.
    pub fn sigma(&self, t: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let tn = g.leaf(Tensor::row(t.to_vec()));
        let s = self.sigma_graph(&mut g, &b, tn);
        g.value(s).data.clone()
    }
}

/// Graph-level noise injection with reparameterization: the standard
/// normal draw is a constant leaf, scaled by sigma.
/// Returns (sample, sigma) nodes.
pub fn inject_noise_graph(
    g: &mut Graph,
    sigma_net: &SigmaNet,
    b: &Binding,
    t: NodeId,
    noise: &[f64],
) -> (NodeId, NodeId) {
    let sigma = sigma_net.sigma_graph(g, b, t);
    let n = g.leaf(Tensor::row(noise.to_vec()));
    let scaled = g.mul(sigma, n);
    (g.add(t, scaled), sigma)
}

pub fn standard_normal_vec<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Draw one sample from the dynamic noisy text field of `t`.
pub fn inject_noise<R: Rng>(t: &TextEmbedding, sigma_net: &SigmaNet, rng: &mut R) -> NoisyTextField {
    let noise = standard_normal_vec(t.vector.len(), rng);
    let mut g = Graph::new();
    let b = sigma_net.store.bind(&mut g);
    let tn = g.leaf(Tensor::row(t.vector.clone()));
    let (sample, sigma) = inject_noise_graph(&mut g, sigma_net, &b, tn, &noise);
    NoisyTextField {
        base: t.clone(),
        sigma: g.value(sigma).data.clone(),
        sample: g.value(sample).data.clone(),
    }
}

/// Static-noise ablation variant: constant scalar sigma.
pub fn inject_noise_static<R: Rng>(
    t: &TextEmbedding,
    sigma: f64,
    rng: &mut R,
) -> Result<NoisyTextField> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::InvalidInput(format!("static sigma {sigma} outside (0, 1)")));
    }
    let noise = standard_normal_vec(t.vector.len(), rng);
    let sample: Vec<f64> = t
        .vector
        .iter()
        .zip(&noise)
        .map(|(x, n)| x + sigma * n)
        .collect();
    Ok(NoisyTextField {
        base: t.clone(),
        sigma: vec![sigma; t.vector.len()],
        sample,
    })
}

/// In-batch InfoNCE: mean over rows of
/// -log( exp(a_i . c_i / tau) / sum_j exp(a_i . c_j / tau) ).
pub fn nce_loss_graph(g: &mut Graph, anchors: NodeId, candidates: NodeId, tau: f64) -> NodeId {
    let sims = g.matmul_nt(anchors, candidates);
    let scaled = g.scale(sims, 1.0 / tau);
    let lse = g.logsumexp_rows(scaled);
    let pos = g.diag_col(scaled);
    let per_row = g.sub(lse, pos);
    g.mean_all(per_row)
}

/// Plain-value InfoNCE over row batches.
pub fn nce_loss(anchors: &[Vec<f64>], candidates: &[Vec<f64>], tau: f64) -> Result<f64> {
    if anchors.is_empty() || anchors.len() != candidates.len() {
        return Err(Error::InvalidInput("anchor/candidate batch mismatch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidInput("temperature must be positive".into()));
    }
    let d = anchors[0].len();
    for row in anchors.iter().chain(candidates.iter()) {
        if row.len() != d {
            return Err(Error::InvalidInput("ragged batch".into()));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite contrastive input".into()));
        }
    }
    let b = anchors.len();
    let mut g = Graph::new();
    let a = g.leaf(Tensor::from_vec(anchors.concat(), b, d));
    let c = g.leaf(Tensor::from_vec(candidates.concat(), b, d));
    let l = nce_loss_graph(&mut g, a, c, tau);
    Ok(g.scalar_value(l))
}

/// Trainable view-invariant code network f_view.
#[derive(Clone, Debug)]
pub struct ViewNet {
    pub store: ParamStore,
    pub mlp: Mlp,
    pub dim: usize,
}

/// Pose features visible to the view net: elevation (sin/cos) and
/// radius. Azimuth is deliberately withheld — an absolute-rotation
/// component in the code makes the opposite-azimuth view of the *same*
/// object the worst-ranked retrieval candidate, which is exactly the
/// invariance the code must provide.
pub const VIEW_POSE_DIM: usize = 3;

fn view_pose_features(cam: &CameraPose) -> Vec<f64> {
    vec![cam.elevation.sin(), cam.elevation.cos(), cam.radius]
}

impl ViewNet {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new("view_net");
        let mlp = Mlp::init(
            &mut store,
            "f_view",
            &[dim + VIEW_POSE_DIM, dim, dim],
            &mut rng,
            false,
        );
        ViewNet { store, mlp, dim }
    }

    /// Graph-level unit-norm code from an image embedding node and pose.
    pub fn code_graph(
        &self,
        g: &mut Graph,
        b: &Binding,
        img_emb: NodeId,
        cam: &CameraPose,
    ) -> NodeId {
        let pose = g.leaf(Tensor::row(view_pose_features(cam)));
        let joined = g.concat_cols(img_emb, pose);
        let raw = self.mlp.forward(g, b, joined);
        g.l2_normalize_rows(raw)
    }
}

/// Unit-norm view-invariant image latent code.
#[derive(Clone, Debug)]
pub struct ViewInvariantCode {
    pub vector: Vec<f64>,
    pub camera: CameraPose,
    pub caption_id: u64,
}

/// Compute the view-invariant code of one rendered view.
pub fn view_code(
    view: &RenderedView,
    cam: &CameraPose,
    view_net: &ViewNet,
    embedder: &ImageEmbedder,
) -> Result<ViewInvariantCode> {
    if *cam != view.camera {
        return Err(Error::InvalidInput("camera does not match the view's render pose".into()));
    }
    let mut g = Graph::new();
    let b = view_net.store.bind(&mut g);
    let img = g.leaf(Tensor::row(view.rgb_flat()));
    let emb = embedder.embed_graph(&mut g, img);
    let code = view_net.code_graph(&mut g, &b, emb, cam);
    Ok(ViewInvariantCode {
        vector: g.value(code).data.clone(),
        camera: *cam,
        caption_id: view.caption_id,
    })
}

/// Graph-level unhinged triplet: |a - p| - |a - n| on code rows.
pub fn triplet_graph(g: &mut Graph, anchor: NodeId, positive: NodeId, negative: NodeId) -> NodeId {
    let dp = g.sub(anchor, positive);
    let dp2 = g.mul(dp, dp);
    let sp = g.sum_all(dp2);
    let sp = g.add_scalar(sp, 1e-18);
    let np = g.sqrt(sp);
    let dn = g.sub(anchor, negative);
    let dn2 = g.mul(dn, dn);
    let sn = g.sum_all(dn2);
    let sn = g.add_scalar(sn, 1e-18);
    let nn = g.sqrt(sn);
    g.sub(np, nn)
}

/// Unhinged triplet on computed codes; anchor and positive must share a
/// caption, the negative must differ.
pub fn view_triplet_loss(
    anchor: &ViewInvariantCode,
    positive: &ViewInvariantCode,
    negative: &ViewInvariantCode,
) -> Result<f64> {
    if anchor.caption_id != positive.caption_id {
        return Err(Error::InvalidInput("anchor and positive must share a caption".into()));
    }
    if anchor.caption_id == negative.caption_id {
        return Err(Error::InvalidInput("negative must come from a different caption".into()));
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    Ok(dist(&anchor.vector, &positive.vector) - dist(&anchor.vector, &negative.vector))
}

/// Generation objective: InfoNCE of noisy fields against embeddings of
/// generated views plus InfoNCE against ground-truth views.
pub fn gen_objective(
    fields: &[NoisyTextField],
    gen_views: &[RenderedView],
    gt_views: &[RenderedView],
    embedder: &ImageEmbedder,
    caption_ids: &[u64],
    tau: f64,
) -> Result<f64> {
    let b = fields.len();
    if gen_views.len() != b || gt_views.len() != b || caption_ids.len() != b {
        return Err(Error::InvalidInput("batch length mismatch".into()));
    }
    for i in 0..b {
        if gen_views[i].caption_id != caption_ids[i] || gt_views[i].caption_id != caption_ids[i] {
            return Err(Error::InvalidInput(format!("caption misalignment at row {i}")));
        }
    }
    let anchors: Vec<Vec<f64>> = fields.iter().map(|f| f.sample.clone()).collect();
    let gen_emb: Vec<Vec<f64>> = gen_views
        .iter()
        .map(|v| embedder.embed_image(v).map(|e| e.vector))
        .collect::<Result<_>>()?;
    let gt_emb: Vec<Vec<f64>> = gt_views
        .iter()
        .map(|v| embedder.embed_image(v).map(|e| e.vector))
        .collect::<Result<_>>()?;
    Ok(nce_loss(&anchors, &gen_emb, tau)? + nce_loss(&anchors, &gt_emb, tau)?)
}

/// NTF binding loss: InfoNCE of noisy fields against view-invariant
/// codes of the batch's views.
pub fn ntf_bind_loss(
    gen_views: &[RenderedView],
    cams: &[CameraPose],
    fields: &[NoisyTextField],
    view_net: &ViewNet,
    embedder: &ImageEmbedder,
    tau: f64,
) -> Result<f64> {
    let b = fields.len();
    if gen_views.len() != b || cams.len() != b {
        return Err(Error::InvalidInput("batch length mismatch".into()));
    }
    let anchors: Vec<Vec<f64>> = fields.iter().map(|f| f.sample.clone()).collect();
    let codes: Vec<Vec<f64>> = gen_views
        .iter()
        .zip(cams)
        .map(|(v, c)| view_code(v, c, view_net, embedder).map(|code| code.vector))
        .collect::<Result<_>>()?;
    nce_loss(&anchors, &codes, tau)
}

/// Full binding objective: batch-mean unhinged triplet (positives are
/// other views of the same caption, negatives random other captions)
/// plus the NTF binding loss.
#[allow(clippy::too_many_arguments)]
pub fn bind_objective<R: Rng>(
    view_pairs: &[(RenderedView, RenderedView)],
    cams: &[(CameraPose, CameraPose)],
    fields: &[NoisyTextField],
    view_net: &ViewNet,
    embedder: &ImageEmbedder,
    tau: f64,
    rng: &mut R,
) -> Result<f64> {
    let b = view_pairs.len();
    if b < 2 {
        return Err(Error::InvalidInput("binding objective needs at least two captions".into()));
    }
    let mut triplet_sum = 0.0;
    let codes: Vec<(ViewInvariantCode, ViewInvariantCode)> = view_pairs
        .iter()
        .zip(cams)
        .map(|((v1, v2), (c1, c2))| {
            Ok((
                view_code(v1, c1, view_net, embedder)?,
                view_code(v2, c2, view_net, embedder)?,
            ))
        })
        .collect::<Result<_>>()?;
    for i in 0..b {
        let mut j = rng.gen_range(0..b - 1);
        if j >= i {
            j += 1;
        }
        triplet_sum += view_triplet_loss(&codes[i].0, &codes[i].1, &codes[j].0)?;
    }
    let first_views: Vec<RenderedView> = view_pairs.iter().map(|p| p.0.clone()).collect();
    let first_cams: Vec<CameraPose> = cams.iter().map(|c| c.0).collect();
    let ntf = ntf_bind_loss(&first_views, &first_cams, fields, view_net, embedder, tau)?;
    Ok(triplet_sum / b as f64 + ntf)
}
