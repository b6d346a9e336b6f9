//! Training loops, ablation modes, and checkpointing.
//!
//! The text-to-3D loop alternates one discriminator step (both 2.5D
//! discriminators plus the point-cloud discriminator, with R1) and one
//! generator step on the weighted objective
//! L(D_img,G) + L(D_mask,G) + lambda_pc L(D_pc,G) + lambda_gen L_gen.
//! The image-to-3D loop swaps the text condition for view-invariant
//! image codes, adds lambda_bind (L_view + L_ntf), and freezes the
//! noise-scale network.
//!
//! ```
//! use ntf3d::data::make_dataset;
//! use ntf3d::train::{TrainConfig, Trainer};
//! use rand::SeedableRng;
//! use rand_chacha::ChaCha8Rng;
//!
//! let cfg = TrainConfig {
//!     batch: 2,
//!     resolution: 8,
//!     patch_grid: 4,
//!     render_points: 48,
//!     points_per_cloud: 48,
//!     text_dim: 16,
//!     z_dim: 8,
//!     w_dim: 12,
//!     seed: 7,
//!     ..Default::default()
//! };
//! let mut rng = ChaCha8Rng::seed_from_u64(0);
//! let objs =
//!     make_dataset(&["sphere", "box"], &["red"], &[None], 48, &cfg.render_opts(), &mut rng)
//!         .unwrap();
//! let mut tr = Trainer::new(cfg).unwrap();
//! let batch: Vec<_> = objs.iter().collect();
//! let report = tr.text_to_3d_step(&batch).unwrap();
//! assert!(report.contains_key("g_total"));
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::CaptionedObject;
use crate::discriminate::{cond_2_5d, ImageDisc, PointDisc};
use crate::embed::{ImageEmbedder, TextEmbedder};
use crate::error::{Error, Result};
use crate::generator::{Branch, Generator, LatentVector};
use crate::mesh::sample_bary_map;
use crate::nn::{Adam, ParamStore};
use crate::ntf::{standard_normal_vec, triplet_graph, SigmaNet, ViewNet};
use crate::render::{render, render_graph, CameraPose, RenderOpts, RenderedView};
use crate::tape::{Graph, NodeId, Tensor};

pub const DEFAULT_LR: f64 = 0.002;
pub const LAMBDA_PC: f64 = 0.01;
pub const LAMBDA_GEN: f64 = 2.0;
pub const LAMBDA_BIND: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 0.07;
pub const STATIC_SIGMA: f64 = 0.016;
pub const ADAM_BETAS: (f64, f64) = (0.0, 0.99);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    A,
    B,
    C,
    StaticNoise,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" | "d" => Mode::Full,
            "a" => Mode::A,
            "b" => Mode::B,
            "c" => Mode::C,
            "static_noise" => Mode::StaticNoise,
            other => return Err(Error::Config(format!("unknown mode '{other}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub lambda_pc: f64,
    pub lambda_gen: f64,
    pub lambda_bind: f64,
    pub lambda_r1: f64,
    /// Lazy R1: the penalty is applied every `r1_every`-th discriminator
    /// update with its weight scaled by the interval, which keeps the
    /// same time-averaged regularization at a fraction of the cost.
    pub r1_every: u64,
    /// Adversarial cadence: the discriminator update and the adversarial
    /// generator sub-update run every `adv_every`-th step; the alignment /
    /// binding sub-update runs every step. Adam with beta1 = 0 gives each
    /// update roughly `lr`-sized coordinates regardless of loss weight, so
    /// an every-step adversarial walk cancels the slow contrastive descent;
    /// frequency is the knob that loss weights cannot express.
    pub adv_every: u64,
    pub tau: f64,
    pub mode: Mode,
    pub seed: u64,
    pub resolution: usize,
    pub points_per_cloud: usize,
    pub render_points: usize,
    pub text_dim: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub patch_grid: usize,
    pub pc_with_color: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: DEFAULT_LR,
            batch: 16,
            steps: 2000,
            lambda_pc: LAMBDA_PC,
            lambda_gen: LAMBDA_GEN,
            lambda_bind: LAMBDA_BIND,
            lambda_r1: 1.0,
            r1_every: 4,
            adv_every: 4,
            tau: DEFAULT_TAU,
            mode: Mode::Full,
            seed: 0,
            resolution: 64,
            points_per_cloud: 1024,
            render_points: 1024,
            text_dim: 64,
            z_dim: 32,
            w_dim: 64,
            patch_grid: 8,
            pc_with_color: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_pc", self.lambda_pc),
            ("lambda_gen", self.lambda_gen),
            ("lambda_bind", self.lambda_bind),
            ("lambda_r1", self.lambda_r1),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        if !(self.lr > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("lr and tau must be positive".into()));
        }
        if self.batch < 2 {
            return Err(Error::Config("batch must be >= 2 (in-batch negatives)".into()));
        }
        if self.resolution == 0 || self.resolution % self.patch_grid != 0 {
            return Err(Error::Config("resolution must be a positive multiple of patch_grid".into()));
        }
        if self.render_points == 0 || self.points_per_cloud == 0 {
            return Err(Error::Config("point counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Short stable digest of the configuration. `steps` is excluded so
    /// a resumed run may extend the step budget.
    pub fn hash(&self) -> String {
        let mut keyed = self.clone();
        keyed.steps = 0;
        let json = serde_json::to_string(&keyed).expect("config serializes");
        let d = Sha256::digest(json.as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn render_opts(&self) -> RenderOpts {
        RenderOpts { res: self.resolution, points: self.render_points, ..Default::default() }
    }
}

/// How the text condition is perturbed each step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    None,
    Dynamic,
    Static(f64),
}

/// Which loss terms and conditioning path a mode enables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSet {
    pub d_pc: bool,
    pub nce_gen: bool,
    pub nce_gt: bool,
    pub late_concat: bool,
    pub noise: NoiseKind,
}

pub fn ablation_mode(mode: Mode) -> LossSet {
    match mode {
        Mode::A => LossSet {
            d_pc: false,
            nce_gen: false,
            nce_gt: false,
            late_concat: false,
            noise: NoiseKind::None,
        },
        Mode::B => LossSet {
            d_pc: false,
            nce_gen: true,
            nce_gt: false,
            late_concat: false,
            noise: NoiseKind::None,
        },
        Mode::C => LossSet {
            d_pc: false,
            nce_gen: true,
            nce_gt: true,
            late_concat: true,
            noise: NoiseKind::Dynamic,
        },
        Mode::Full => LossSet {
            d_pc: true,
            nce_gen: true,
            nce_gt: true,
            late_concat: true,
            noise: NoiseKind::Dynamic,
        },
        Mode::StaticNoise => LossSet {
            d_pc: true,
            nce_gen: true,
            nce_gt: true,
            late_concat: true,
            noise: NoiseKind::Static(STATIC_SIGMA),
        },
    }
}

/// All trainable and frozen networks of one experiment.
#[derive(Clone, Debug)]
pub struct Model {
    pub text_embedder: TextEmbedder,
    pub image_embedder: ImageEmbedder,
    pub sigma_net: SigmaNet,
    pub view_net: ViewNet,
    pub generator: Generator,
    pub d_img: ImageDisc,
    pub d_mask: ImageDisc,
    pub d_pc: PointDisc,
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Self {
        let set = ablation_mode(cfg.mode);
        let d = cfg.text_dim;
        let npix = cfg.resolution * cfg.resolution;
        let s = cfg.seed;
        Model {
            text_embedder: TextEmbedder::new(d, s ^ 0x11),
            image_embedder: ImageEmbedder::new(d, cfg.patch_grid, s ^ 0x22, cfg.resolution),
            sigma_net: SigmaNet::new(d, s ^ 0x33),
            view_net: ViewNet::new(d, s ^ 0x44),
            generator: Generator::new(cfg.z_dim, cfg.w_dim, d, set.late_concat, s ^ 0x55),
            d_img: ImageDisc::new(3 * npix, &[64, 64], 5 + d, s ^ 0x66),
            d_mask: ImageDisc::new(npix, &[64, 64], 5 + d, s ^ 0x77),
            d_pc: PointDisc::new(&[64, 128], d, cfg.pc_with_color, s ^ 0x88),
        }
    }
}

pub type LossReport = BTreeMap<String, f64>;

fn check_finite(report: &LossReport) -> Result<()> {
    for (k, v) in report {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss component '{k}' = {v}")));
        }
    }
    Ok(())
}

/// Append one step's components to `step,loss_name,value` CSV.
pub fn append_loss_csv(path: &Path, step: u64, report: &LossReport) -> Result<()> {
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(f, "step,loss_name,value")?;
    }
    for (k, v) in report {
        writeln!(f, "{step},{k},{v}")?;
    }
    Ok(())
}

struct BatchItem {
    t: Vec<f64>,
    /// detached noisy field values used as the D-step condition
    tfield: Vec<f64>,
    noise: Vec<f64>,
    z_geo: LatentVector,
    z_tex: LatentVector,
    cam: CameraPose,
    real_view: RenderedView,
    fake_view: RenderedView,
    fake_mesh: crate::mesh::TexturedMesh,
    real_cloud_points: Vec<[f64; 3]>,
    real_cloud_colors: Vec<[f64; 3]>,
}

/// Optimizers, rng, and step counter around a [`Model`].
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt_sigma: Adam,
    pub opt_view: Adam,
    pub opt_gen: Adam,
    /// Separate Adam moments for the alignment sub-update. With one shared
    /// instance the adversarial gradients dominate the second-moment
    /// estimates and the (much smaller) alignment gradients are scaled to
    /// nothing; block-coordinate moments let each objective set its own
    /// per-coordinate step size.
    pub opt_gen_align: Adam,
    pub opt_d_img: Adam,
    pub opt_d_mask: Adam,
    pub opt_d_pc: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg);
        let (b1, b2) = ADAM_BETAS;
        let mk = |s: &ParamStore| Adam::new(s, cfg.lr, b1, b2);
        Ok(Trainer {
            opt_sigma: mk(&model.sigma_net.store),
            opt_view: mk(&model.view_net.store),
            opt_gen: mk(&model.generator.store),
            opt_gen_align: mk(&model.generator.store),
            opt_d_img: mk(&model.d_img.store),
            opt_d_mask: mk(&model.d_mask.store),
            opt_d_pc: mk(&model.d_pc.store),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            step: 0,
        })
    }

    /// Draw per-item randomness and the detached fake sample for the
    /// discriminator step.
    fn prepare_batch(&mut self, batch: &[&CaptionedObject]) -> Result<Vec<BatchItem>> {
        let set = ablation_mode(self.cfg.mode);
        let opts = self.cfg.render_opts();
        let d = self.cfg.text_dim;
        batch
            .iter()
            .map(|obj| {
                let t = self.model.text_embedder.embed_text(&obj.caption)?.vector;
                let noise = match set.noise {
                    NoiseKind::None => vec![0.0; d],
                    _ => standard_normal_vec(d, &mut self.rng),
                };
                let sigma = match set.noise {
                    NoiseKind::None => vec![0.0; d],
                    NoiseKind::Static(s) => vec![s; d],
                    NoiseKind::Dynamic => self.model.sigma_net.sigma(&t),
                };
                let tfield: Vec<f64> =
                    t.iter().zip(&noise).zip(&sigma).map(|((x, n), s)| x + s * n).collect();
                let z_geo = LatentVector::sample(self.cfg.z_dim, &mut self.rng);
                let z_tex = LatentVector::sample(self.cfg.z_dim, &mut self.rng);
                let vi = self.rng.gen_range(0..obj.views.len());
                let real_view = obj.views[vi].clone();
                let cam = real_view.camera;
                let cg = self.model.generator.latent_code(&z_geo, &tfield, Branch::Geometry)?;
                let ct = self.model.generator.latent_code(&z_tex, &tfield, Branch::Texture)?;
                let fake_mesh = self.model.generator.generate(&cg, &ct)?;
                let fake_view = render(&fake_mesh, &cam, &opts, self.rng.gen(), obj.id)?;
                Ok(BatchItem {
                    t,
                    tfield,
                    noise,
                    z_geo,
                    z_tex,
                    cam,
                    real_view,
                    fake_view,
                    fake_mesh,
                    real_cloud_points: obj.cloud.points.clone(),
                    real_cloud_colors: obj.cloud.colors.clone(),
                })
            })
            .collect()
    }

    /// Shared discriminator update; `conds` are the per-item 2.5D
    /// condition vectors (already [pose | code]).
    fn d_update(&mut self, items: &[BatchItem], conds: &[Vec<f64>]) -> Result<LossReport> {
        let set = ablation_mode(self.cfg.mode);
        let b = items.len() as f64;
        // lazy R1 counts discriminator updates, not global steps, so its
        // time-averaged weight is unchanged when `adv_every` thins them out
        let d_idx = self.step / self.cfg.adv_every.max(1);
        let apply_r1 = self.cfg.r1_every > 0 && d_idx % self.cfg.r1_every == 0;
        let r1_weight = self.cfg.lambda_r1 * self.cfg.r1_every as f64;
        let mut g = Graph::new();
        let bi = self.model.d_img.store.bind(&mut g);
        let bm = self.model.d_mask.store.bind(&mut g);
        let bp = self.model.d_pc.store.bind(&mut g);
        let mut img_terms = Vec::new();
        let mut mask_terms = Vec::new();
        let mut pc_terms = Vec::new();
        for (item, cond) in items.iter().zip(conds) {
            let cn = g.leaf(Tensor::row(cond.clone()));
            for (disc, binding, terms, fake, real) in [
                (
                    &self.model.d_img,
                    &bi,
                    &mut img_terms,
                    item.fake_view.rgb_flat(),
                    item.real_view.rgb_flat(),
                ),
                (
                    &self.model.d_mask,
                    &bm,
                    &mut mask_terms,
                    item.fake_view.silhouette.clone(),
                    item.real_view.silhouette.clone(),
                ),
            ] {
                let xf = g.leaf(Tensor::row(fake));
                let xr = g.leaf(Tensor::row(real));
                let lf = disc.logit_graph(&mut g, binding, xf, cn);
                let lr = disc.logit_graph(&mut g, binding, xr, cn);
                let sf = g.softplus(lf);
                let nlr = g.neg(lr);
                let sr = g.softplus(nlr);
                let s = g.add(sf, sr);
                if apply_r1 {
                    let r1 = disc.r1_graph(&mut g, binding, xr, cn, r1_weight);
                    terms.push(g.add(s, r1));
                } else {
                    terms.push(s);
                }
            }
            if set.d_pc {
                let tn = g.leaf(Tensor::row(item.t.clone()));
                let mut fake_rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
                let (fp, fc) = crate::mesh::sample_surface(
                    &item.fake_mesh,
                    self.cfg.points_per_cloud,
                    &mut fake_rng,
                )?;
                let real = &batch_cloud(item);
                let pf =
                    g.leaf(crate::discriminate::cloud_rows(&fp, &fc, self.model.d_pc.with_color)?);
                let pr = g.leaf(crate::discriminate::cloud_rows(
                    &real.0,
                    &real.1,
                    self.model.d_pc.with_color,
                )?);
                let lf = self.model.d_pc.logit_graph(&mut g, &bp, pf, tn);
                let lr = self.model.d_pc.logit_graph(&mut g, &bp, pr, tn);
                let sf = g.softplus(lf);
                let nlr = g.neg(lr);
                let sr = g.softplus(nlr);
                let s = g.add(sf, sr);
                if apply_r1 {
                    let r1 = self.model.d_pc.r1_graph(&mut g, &bp, pr, tn, r1_weight);
                    pc_terms.push(g.add(s, r1));
                } else {
                    pc_terms.push(s);
                }
            }
        }
        let mean = |g: &mut Graph, terms: &[NodeId]| -> Option<NodeId> {
            let mut acc = *terms.first()?;
            for t in &terms[1..] {
                acc = g.add(acc, *t);
            }
            Some(g.scale(acc, 1.0 / b))
        };
        let li = mean(&mut g, &img_terms).expect("nonempty batch");
        let lm = mean(&mut g, &mask_terms).expect("nonempty batch");
        let lp = mean(&mut g, &pc_terms);
        let mut total = g.add(li, lm);
        if let Some(lp) = lp {
            total = g.add(total, lp);
        }
        let grads = g.backward(total);
        for (store, binding, opt) in [
            (&mut self.model.d_img.store, &bi, &mut self.opt_d_img),
            (&mut self.model.d_mask.store, &bm, &mut self.opt_d_mask),
        ] {
            store.zero_grads();
            store.accumulate(&grads, binding);
            opt.step(store);
        }
        if set.d_pc {
            self.model.d_pc.store.zero_grads();
            self.model.d_pc.store.accumulate(&grads, &bp);
            self.opt_d_pc.step(&mut self.model.d_pc.store);
        }
        let mut report = LossReport::new();
        report.insert("d_img".into(), g.scalar_value(li));
        report.insert("d_mask".into(), g.scalar_value(lm));
        if let Some(lp) = lp {
            report.insert("d_pc".into(), g.scalar_value(lp));
        }
        report.insert("d_total".into(), g.scalar_value(total));
        Ok(report)
    }

    /// One alternating text-to-3D update: D step then G step.
    /// Adversarial generator sub-update: minimize the non-saturating
    /// generator losses of all discriminators at the sampled pose. Runs
    /// every `adv_every`-th step; the alignment sub-update keeps its own
    /// cadence and Adam instance.
    fn adversarial_g_update(
        &mut self,
        items: &[BatchItem],
        report: &mut LossReport,
    ) -> Result<f64> {
        let set = ablation_mode(self.cfg.mode);
        let opts = self.cfg.render_opts();
        let b = items.len() as f64;
        let mut g = Graph::new();
        let b_gen = self.model.generator.store.bind(&mut g);
        let b_di = self.model.d_img.store.bind(&mut g);
        let b_dm = self.model.d_mask.store.bind(&mut g);
        let b_dp = self.model.d_pc.store.bind(&mut g);
        let mut img_terms = Vec::new();
        let mut mask_terms = Vec::new();
        let mut pc_terms = Vec::new();
        for item in items {
            let tn = g.leaf(Tensor::row(item.t.clone()));
            // the noisy field enters the adversarial pass as data; only
            // the alignment sub-update trains sigma
            let tfield = g.leaf(Tensor::row(item.tfield.clone()));
            let zg = g.leaf(Tensor::row(item.z_geo.z.clone()));
            let zt = g.leaf(Tensor::row(item.z_tex.z.clone()));
            let cg = self.model.generator.code_graph(&mut g, &b_gen, zg, tfield, Branch::Geometry);
            let ct = self.model.generator.code_graph(&mut g, &b_gen, zt, tfield, Branch::Texture);
            let (verts, colors) = self.model.generator.mesh_graph(&mut g, &b_gen, cg, ct);
            let (rgb, sil) = render_graph(
                &mut g,
                verts,
                colors,
                self.model.generator.faces(),
                &item.cam,
                &opts,
                &mut self.rng,
            )?;
            let pose = g.leaf(Tensor::row(item.cam.encoding().to_vec()));
            let cond = g.concat_cols(pose, tfield);
            let li = self.model.d_img.logit_graph(&mut g, &b_di, rgb, cond);
            let nli = g.neg(li);
            img_terms.push(g.softplus(nli));
            let lm = self.model.d_mask.logit_graph(&mut g, &b_dm, sil, cond);
            let nlm = g.neg(lm);
            mask_terms.push(g.softplus(nlm));
            if set.d_pc {
                let vert_vals: Vec<[f64; 3]> = {
                    let t = g.value(verts);
                    (0..t.rows).map(|i| [t.get(i, 0), t.get(i, 1), t.get(i, 2)]).collect()
                };
                let map = sample_bary_map(
                    &vert_vals,
                    self.model.generator.faces(),
                    self.cfg.points_per_cloud,
                    &mut self.rng,
                )?;
                let pts = g.bary_interp(verts, map.clone());
                let pn = if self.model.d_pc.with_color {
                    let cols = g.bary_interp(colors, map);
                    g.concat_cols(pts, cols)
                } else {
                    pts
                };
                let lp = self.model.d_pc.logit_graph(&mut g, &b_dp, pn, tn);
                let nlp = g.neg(lp);
                pc_terms.push(g.softplus(nlp));
            }
        }
        let mean = |g: &mut Graph, terms: &[NodeId]| {
            let mut acc = terms[0];
            for t in &terms[1..] {
                acc = g.add(acc, *t);
            }
            g.scale(acc, 1.0 / b)
        };
        let gi = mean(&mut g, &img_terms);
        let gm = mean(&mut g, &mask_terms);
        let mut total = g.add(gi, gm);
        let gp = if set.d_pc {
            let gp = mean(&mut g, &pc_terms);
            let w = g.scale(gp, self.cfg.lambda_pc);
            total = g.add(total, w);
            Some(gp)
        } else {
            None
        };
        let grads = g.backward(total);
        self.model.generator.store.zero_grads();
        self.model.generator.store.accumulate(&grads, &b_gen);
        self.opt_gen.step(&mut self.model.generator.store);
        report.insert("g_img".into(), g.scalar_value(gi));
        report.insert("g_mask".into(), g.scalar_value(gm));
        if let Some(gp) = gp {
            report.insert("g_pc".into(), g.scalar_value(gp));
        }
        Ok(g.scalar_value(total))
    }

    pub fn text_to_3d_step(&mut self, batch: &[&CaptionedObject]) -> Result<LossReport> {
        if batch.len() < 2 {
            return Err(Error::InvalidInput("batch must contain at least 2 objects".into()));
        }
        let set = ablation_mode(self.cfg.mode);
        let opts = self.cfg.render_opts();
        let items = self.prepare_batch(batch)?;
        let has_align = set.nce_gen || set.nce_gt;
        // adversarial cadence: with beta1 = 0 Adam every update moves each
        // coordinate ~lr regardless of loss weight, so an every-step
        // adversarial walk cancels the slow contrastive descent; thinning
        // the adversarial updates is the knob loss weights cannot express
        let adv_step =
            !has_align || self.cfg.adv_every <= 1 || self.step % self.cfg.adv_every == 0;
        let mut report = LossReport::new();
        let mut g_total = 0.0;
        if adv_step {
            let conds: Vec<Vec<f64>> =
                items.iter().map(|it| cond_2_5d(&it.cam, &it.tfield)).collect();
            report = self.d_update(&items, &conds)?;
            g_total = self.adversarial_g_update(&items, &mut report)?;
        }

        // ---- G step, alignment sub-update (L_gen) ----
        if has_align {
            let mut g = Graph::new();
            let b_sigma = self.model.sigma_net.store.bind(&mut g);
            let b_gen = self.model.generator.store.bind(&mut g);
            let mut anchors = Vec::new();
            let mut gen_embs = Vec::new();
            let mut gt_embs = Vec::new();
            for item in &items {
                let tn = g.leaf(Tensor::row(item.t.clone()));
                let tfield = match set.noise {
                    NoiseKind::None => tn,
                    NoiseKind::Static(_) => g.leaf(Tensor::row(item.tfield.clone())),
                    NoiseKind::Dynamic => {
                        let (tf, _) = crate::ntf::inject_noise_graph(
                            &mut g,
                            &self.model.sigma_net,
                            &b_sigma,
                            tn,
                            &item.noise,
                        );
                        tf
                    }
                };
                anchors.push(tfield);
                if set.nce_gen {
                    // alignment render at the canonical retrieval
                    // camera: the stand-in image embedder is strongly
                    // pose-sensitive, so the alignment term contrasts
                    // content at one shared pose while the adversarial
                    // terms keep the sampled one
                    let zg = g.leaf(Tensor::row(item.z_geo.z.clone()));
                    let zt = g.leaf(Tensor::row(item.z_tex.z.clone()));
                    let cg = self
                        .model
                        .generator
                        .code_graph(&mut g, &b_gen, zg, tfield, Branch::Geometry);
                    let ct = self
                        .model
                        .generator
                        .code_graph(&mut g, &b_gen, zt, tfield, Branch::Texture);
                    let (verts, colors) = self.model.generator.mesh_graph(&mut g, &b_gen, cg, ct);
                    let (rgb_c, _sil_c) = render_graph(
                        &mut g,
                        verts,
                        colors,
                        self.model.generator.faces(),
                        &crate::render::eval_camera(),
                        &opts,
                        &mut self.rng,
                    )?;
                    gen_embs.push(self.model.image_embedder.embed_graph(&mut g, rgb_c));
                }
                if set.nce_gt {
                    gt_embs.push(self.model.image_embedder.embed_image(&item.real_view)?.vector);
                }
            }
            let a = g.stack_rows(&anchors);
            let mut lgen: Option<NodeId> = None;
            // symmetric InfoNCE: the text->image direction alone lets
            // every generated embedding crowd near many captions at
            // once; the image->text direction is the retrieval protocol
            if set.nce_gen {
                let c = g.stack_rows(&gen_embs);
                let l1 = crate::ntf::nce_loss_graph(&mut g, a, c, self.cfg.tau);
                let l2 = crate::ntf::nce_loss_graph(&mut g, c, a, self.cfg.tau);
                lgen = Some(g.add(l1, l2));
            }
            if set.nce_gt {
                let c = g.leaf(Tensor::from_vec(
                    gt_embs.concat(),
                    gt_embs.len(),
                    self.cfg.text_dim,
                ));
                let l1 = crate::ntf::nce_loss_graph(&mut g, a, c, self.cfg.tau);
                let l2 = crate::ntf::nce_loss_graph(&mut g, c, a, self.cfg.tau);
                let l = g.add(l1, l2);
                lgen = Some(match lgen {
                    Some(prev) => g.add(prev, l),
                    None => l,
                });
            }
            let lgen = lgen.unwrap();
            let w = g.scale(lgen, self.cfg.lambda_gen);
            let grads = g.backward(w);
            if set.noise == NoiseKind::Dynamic {
                self.model.sigma_net.store.zero_grads();
                self.model.sigma_net.store.accumulate(&grads, &b_sigma);
                self.opt_sigma.step(&mut self.model.sigma_net.store);
            }
            if set.nce_gen {
                self.model.generator.store.zero_grads();
                self.model.generator.store.accumulate(&grads, &b_gen);
                self.opt_gen_align.step(&mut self.model.generator.store);
            }
            let lv = g.scalar_value(lgen);
            report.insert("l_gen".into(), lv);
            g_total += self.cfg.lambda_gen * lv;
        }
        report.insert("g_total".into(), g_total);
        check_finite(&report)?;
        self.step += 1;
        Ok(report)
    }

    /// One image-to-3D update: the condition is the view-invariant code
    /// of a ground-truth view; sigma_net stays frozen.
    pub fn image_to_3d_step(&mut self, batch: &[&CaptionedObject]) -> Result<LossReport> {
        if batch.len() < 2 {
            return Err(Error::InvalidInput("batch must contain at least 2 objects".into()));
        }
        let sigma_hash = self.model.sigma_net.store.content_hash();
        let opts = self.cfg.render_opts();
        let d = self.cfg.text_dim;

        // per-item: anchor view (condition source) + positive view
        struct ImgItem {
            t: Vec<f64>,
            tfield: Vec<f64>,
            code: Vec<f64>,
            anchor_view: RenderedView,
            positive_view: RenderedView,
            z_geo: LatentVector,
            z_tex: LatentVector,
            cam: CameraPose,
            fake_view: RenderedView,
            fake_mesh: crate::mesh::TexturedMesh,
        }
        let items: Vec<ImgItem> = batch
            .iter()
            .map(|obj| {
                let t = self.model.text_embedder.embed_text(&obj.caption)?.vector;
                // fresh renders every step: cached dataset views are a
                // small fixed set the view net can memorize, which does
                // not transfer to newly rendered evaluation views
                let cam_a = crate::render::sample_camera(&mut self.rng);
                let cam_p = crate::render::sample_camera(&mut self.rng);
                let anchor_view = render(&obj.mesh, &cam_a, &opts, self.rng.gen(), obj.id)?;
                let positive_view = render(&obj.mesh, &cam_p, &opts, self.rng.gen(), obj.id)?;
                let code = crate::ntf::view_code(
                    &anchor_view,
                    &anchor_view.camera,
                    &self.model.view_net,
                    &self.model.image_embedder,
                )?
                .vector;
                // frozen-sigma noisy draw for L_ntf (constant this step)
                let noise = standard_normal_vec(d, &mut self.rng);
                let sigma = self.model.sigma_net.sigma(&t);
                let tfield: Vec<f64> =
                    t.iter().zip(&noise).zip(&sigma).map(|((x, n), s)| x + s * n).collect();
                let z_geo = LatentVector::sample(self.cfg.z_dim, &mut self.rng);
                let z_tex = LatentVector::sample(self.cfg.z_dim, &mut self.rng);
                let cam = anchor_view.camera;
                let cg = self.model.generator.latent_code(&z_geo, &code, Branch::Geometry)?;
                let ct = self.model.generator.latent_code(&z_tex, &code, Branch::Texture)?;
                let fake_mesh = self.model.generator.generate(&cg, &ct)?;
                let fake_view = render(&fake_mesh, &cam, &opts, self.rng.gen(), obj.id)?;
                Ok(ImgItem {
                    t,
                    tfield,
                    code,
                    anchor_view,
                    positive_view,
                    z_geo,
                    z_tex,
                    cam,
                    fake_view,
                    fake_mesh,
                })
            })
            .collect::<Result<_>>()?;

        // D step reuses the shared update with view-code conditions
        let d_items: Vec<BatchItem> = items
            .iter()
            .zip(batch)
            .map(|(it, obj)| BatchItem {
                t: it.t.clone(),
                tfield: it.code.clone(),
                noise: Vec::new(),
                z_geo: it.z_geo.clone(),
                z_tex: it.z_tex.clone(),
                cam: it.cam,
                real_view: it.anchor_view.clone(),
                fake_view: it.fake_view.clone(),
                fake_mesh: it.fake_mesh.clone(),
                real_cloud_points: obj.cloud.points.clone(),
                real_cloud_colors: obj.cloud.colors.clone(),
            })
            .collect();
        let conds: Vec<Vec<f64>> =
            d_items.iter().map(|it| cond_2_5d(&it.cam, &it.tfield)).collect();
        let mut report = self.d_update(&d_items, &conds)?;

        // ---- G step: generator + view_net ----
        let b = items.len() as f64;
        let mut g = Graph::new();
        let b_view = self.model.view_net.store.bind(&mut g);
        let b_gen = self.model.generator.store.bind(&mut g);
        let b_di = self.model.d_img.store.bind(&mut g);
        let b_dm = self.model.d_mask.store.bind(&mut g);
        let b_dp = self.model.d_pc.store.bind(&mut g);
        let mut img_terms = Vec::new();
        let mut mask_terms = Vec::new();
        let mut pc_terms = Vec::new();
        let mut anchor_codes = Vec::new();
        let mut positive_codes = Vec::new();
        let mut fake_codes = Vec::new();
        for item in &items {
            let emb_a = {
                let img = g.leaf(Tensor::row(item.anchor_view.rgb_flat()));
                self.model.image_embedder.embed_graph(&mut g, img)
            };
            let code = self.model.view_net.code_graph(&mut g, &b_view, emb_a, &item.cam);
            anchor_codes.push(code);
            // condition on a detached copy: letting the adversarial loss
            // reach the view net collapses the codes toward an
            // uninformative condition
            let code = g.leaf(Tensor::row(item.code.clone()));
            let emb_p = {
                let img = g.leaf(Tensor::row(item.positive_view.rgb_flat()));
                self.model.image_embedder.embed_graph(&mut g, img)
            };
            positive_codes.push(self.model.view_net.code_graph(
                &mut g,
                &b_view,
                emb_p,
                &item.positive_view.camera,
            ));
            let zg = g.leaf(Tensor::row(item.z_geo.z.clone()));
            let zt = g.leaf(Tensor::row(item.z_tex.z.clone()));
            let cg = self.model.generator.code_graph(&mut g, &b_gen, zg, code, Branch::Geometry);
            let ct = self.model.generator.code_graph(&mut g, &b_gen, zt, code, Branch::Texture);
            let (verts, colors) = self.model.generator.mesh_graph(&mut g, &b_gen, cg, ct);
            let (rgb, sil) = render_graph(
                &mut g,
                verts,
                colors,
                self.model.generator.faces(),
                &item.cam,
                &opts,
                &mut self.rng,
            )?;
            let pose = g.leaf(Tensor::row(item.cam.encoding().to_vec()));
            let cond = g.concat_cols(pose, code);
            let li = self.model.d_img.logit_graph(&mut g, &b_di, rgb, cond);
            let nli = g.neg(li);
            img_terms.push(g.softplus(nli));
            let lm = self.model.d_mask.logit_graph(&mut g, &b_dm, sil, cond);
            let nlm = g.neg(lm);
            mask_terms.push(g.softplus(nlm));
            {
                let vert_vals: Vec<[f64; 3]> = {
                    let t = g.value(verts);
                    (0..t.rows).map(|i| [t.get(i, 0), t.get(i, 1), t.get(i, 2)]).collect()
                };
                let map = sample_bary_map(
                    &vert_vals,
                    self.model.generator.faces(),
                    self.cfg.points_per_cloud,
                    &mut self.rng,
                )?;
                let pts = g.bary_interp(verts, map.clone());
                let pn = if self.model.d_pc.with_color {
                    let cols = g.bary_interp(colors, map);
                    g.concat_cols(pts, cols)
                } else {
                    pts
                };
                let tn = g.leaf(Tensor::row(item.t.clone()));
                let lp = self.model.d_pc.logit_graph(&mut g, &b_dp, pn, tn);
                let nlp = g.neg(lp);
                pc_terms.push(g.softplus(nlp));
            }
            // view-invariant code of the generated view for L_ntf
            let fake_emb = self.model.image_embedder.embed_graph(&mut g, rgb);
            let fake_code =
                self.model.view_net.code_graph(&mut g, &b_view, fake_emb, &item.cam);
            fake_codes.push(fake_code);
        }
        let mean = |g: &mut Graph, terms: &[NodeId]| {
            let mut acc = terms[0];
            for t in &terms[1..] {
                acc = g.add(acc, *t);
            }
            g.scale(acc, 1.0 / b)
        };
        let gi = mean(&mut g, &img_terms);
        let gm = mean(&mut g, &mask_terms);
        let gp = mean(&mut g, &pc_terms);
        // L_view: batch-mean unhinged triplet with random other-caption negative
        let mut triplet_terms = Vec::new();
        for i in 0..items.len() {
            let mut j = self.rng.gen_range(0..items.len() - 1);
            if j >= i {
                j += 1;
            }
            triplet_terms.push(triplet_graph(
                &mut g,
                anchor_codes[i],
                positive_codes[i],
                anchor_codes[j],
            ));
        }
        let l_view = mean(&mut g, &triplet_terms);
        // L_ntf: frozen noisy fields against generated-view codes
        let a = g.leaf(Tensor::from_vec(
            items.iter().flat_map(|it| it.tfield.iter().copied()).collect(),
            items.len(),
            d,
        ));
        let c = g.stack_rows(&fake_codes);
        let l1 = crate::ntf::nce_loss_graph(&mut g, a, c, self.cfg.tau);
        let l2 = crate::ntf::nce_loss_graph(&mut g, c, a, self.cfg.tau);
        let l_ntf = g.add(l1, l2);
        let l_bind = g.add(l_view, l_ntf);

        let mut total = g.add(gi, gm);
        let wp = g.scale(gp, self.cfg.lambda_pc);
        total = g.add(total, wp);
        let wb = g.scale(l_bind, self.cfg.lambda_bind);
        total = g.add(total, wb);

        let grads = g.backward(total);
        for (store, binding, opt) in [
            (&mut self.model.view_net.store, &b_view, &mut self.opt_view),
            (&mut self.model.generator.store, &b_gen, &mut self.opt_gen),
        ] {
            store.zero_grads();
            store.accumulate(&grads, binding);
            opt.step(store);
        }
        assert_eq!(
            sigma_hash,
            self.model.sigma_net.store.content_hash(),
            "sigma_net must stay frozen during image-to-3D training"
        );
        report.insert("g_img".into(), g.scalar_value(gi));
        report.insert("g_mask".into(), g.scalar_value(gm));
        report.insert("g_pc".into(), g.scalar_value(gp));
        report.insert("l_view".into(), g.scalar_value(l_view));
        report.insert("l_ntf".into(), g.scalar_value(l_ntf));
        report.insert("l_bind".into(), g.scalar_value(l_bind));
        report.insert("g_total".into(), g.scalar_value(total));
        check_finite(&report)?;
        self.step += 1;
        Ok(report)
    }
}

fn batch_cloud(item: &BatchItem) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    // real cloud travels with the rendered real view's object; the
    // caller stores it next to the views, so re-derive from the item
    (item.real_cloud_points.clone(), item.real_cloud_colors.clone())
}

// ---------------------------------------------------------------------
// checkpointing

pub const CKPT_MAGIC: &[u8; 8] = b"NTF3DCK\x01";
pub const CKPT_VERSION: u32 = 1;

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend((t.rows as u64).to_le_bytes());
    buf.extend((t.cols as u64).to_le_bytes());
    for v in &t.data {
        buf.extend(v.to_le_bytes());
    }
}

fn write_store(buf: &mut Vec<u8>, store: &ParamStore) {
    let name = store.name.as_bytes();
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name);
    buf.extend((store.values.len() as u32).to_le_bytes());
    for (n, t) in store.names.iter().zip(&store.values) {
        let nb = n.as_bytes();
        buf.extend((nb.len() as u32).to_le_bytes());
        buf.extend(nb);
        write_tensor(buf, t);
    }
}

fn write_adam(buf: &mut Vec<u8>, opt: &Adam) {
    buf.extend(opt.step_count.to_le_bytes());
    for t in opt.m.iter().chain(opt.v.iter()) {
        write_tensor(buf, t);
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("bad string in checkpoint".into()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let raw = self.take(rows * cols * 8)?;
        let data = raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::from_vec(data, rows, cols))
    }
}

fn read_into_store(c: &mut Cursor, store: &mut ParamStore) -> Result<()> {
    let name = c.string()?;
    if name != store.name {
        return Err(Error::Checkpoint(format!(
            "store order mismatch: expected '{}', found '{name}'",
            store.name
        )));
    }
    let n = c.u32()? as usize;
    if n != store.values.len() {
        return Err(Error::Checkpoint(format!("store '{name}' tensor count mismatch")));
    }
    for i in 0..n {
        let tn = c.string()?;
        if tn != store.names[i] {
            return Err(Error::Checkpoint(format!("tensor order mismatch at '{tn}'")));
        }
        let t = c.tensor()?;
        if t.rows != store.values[i].rows || t.cols != store.values[i].cols {
            return Err(Error::Checkpoint(format!("tensor '{tn}' shape mismatch")));
        }
        store.values[i] = t;
    }
    Ok(())
}

fn read_into_adam(c: &mut Cursor, opt: &mut Adam) -> Result<()> {
    opt.step_count = c.u64()?;
    for slot in opt.m.iter_mut().chain(opt.v.iter_mut()) {
        let t = c.tensor()?;
        if t.rows != slot.rows || t.cols != slot.cols {
            return Err(Error::Checkpoint("optimizer state shape mismatch".into()));
        }
        *slot = t;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend(CKPT_MAGIC);
    buf.extend(CKPT_VERSION.to_le_bytes());
    let hash = trainer.cfg.hash();
    buf.extend((hash.len() as u32).to_le_bytes());
    buf.extend(hash.as_bytes());
    buf.extend(trainer.step.to_le_bytes());
    buf.extend(trainer.rng.get_seed());
    buf.extend(trainer.rng.get_word_pos().to_le_bytes());
    buf.extend(trainer.rng.get_stream().to_le_bytes());
    let m = &trainer.model;
    for store in [
        &m.sigma_net.store,
        &m.view_net.store,
        &m.generator.store,
        &m.d_img.store,
        &m.d_mask.store,
        &m.d_pc.store,
    ] {
        write_store(&mut buf, store);
    }
    for opt in [
        &trainer.opt_sigma,
        &trainer.opt_view,
        &trainer.opt_gen,
        &trainer.opt_gen_align,
        &trainer.opt_d_img,
        &trainer.opt_d_mask,
        &trainer.opt_d_pc,
    ] {
        write_adam(&mut buf, opt);
    }
    let digest = Sha256::digest(&buf);
    buf.extend(digest);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Rebuild a trainer from `cfg` and overwrite its state from the file.
/// A config-hash mismatch is refused unless `force`.
pub fn load_checkpoint(path: &Path, cfg: TrainConfig, force: bool) -> Result<Trainer> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 40 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, stored_digest) = raw.split_at(raw.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Checkpoint("checksum mismatch (corrupted file)".into()));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    if c.u32()? != CKPT_VERSION {
        return Err(Error::Checkpoint("unsupported checkpoint version".into()));
    }
    let stored_hash = c.string()?;
    if stored_hash != cfg.hash() && !force {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {stored_hash}, config {} (use force to override)",
            cfg.hash()
        )));
    }
    let mut trainer = Trainer::new(cfg)?;
    trainer.step = c.u64()?;
    let seed: [u8; 32] = c.take(32)?.try_into().unwrap();
    let word_pos = c.u128()?;
    let stream = c.u64()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    rng.set_stream(stream);
    trainer.rng = rng;
    {
        let m = &mut trainer.model;
        read_into_store(&mut c, &mut m.sigma_net.store)?;
        read_into_store(&mut c, &mut m.view_net.store)?;
        read_into_store(&mut c, &mut m.generator.store)?;
        read_into_store(&mut c, &mut m.d_img.store)?;
        read_into_store(&mut c, &mut m.d_mask.store)?;
        read_into_store(&mut c, &mut m.d_pc.store)?;
    }
    read_into_adam(&mut c, &mut trainer.opt_sigma)?;
    read_into_adam(&mut c, &mut trainer.opt_view)?;
    read_into_adam(&mut c, &mut trainer.opt_gen)?;
    read_into_adam(&mut c, &mut trainer.opt_gen_align)?;
    read_into_adam(&mut c, &mut trainer.opt_d_img)?;
    read_into_adam(&mut c, &mut trainer.opt_d_mask)?;
    read_into_adam(&mut c, &mut trainer.opt_d_pc)?;
    if c.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
    }
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_dataset, DEFAULT_SHAPES};

    fn tiny_cfg(mode: Mode) -> TrainConfig {
        TrainConfig {
            batch: 2,
            resolution: 8,
            patch_grid: 4,
            render_points: 48,
            points_per_cloud: 48,
            text_dim: 16,
            z_dim: 8,
            w_dim: 12,
            steps: 3,
            mode,
            seed: 7,
            ..Default::default()
        }
    }

    fn tiny_dataset(cfg: &TrainConfig) -> Vec<CaptionedObject> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a);
        make_dataset(
            &DEFAULT_SHAPES[..2],
            &["red", "blue"],
            &[None],
            cfg.points_per_cloud,
            &cfg.render_opts(),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = tiny_cfg(Mode::Full);
        let toml_str = toml::to_string(&cfg).unwrap();
        let back = TrainConfig::from_toml_str(&toml_str).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        assert!(TrainConfig::from_toml_str("lr = 0.002\nnot_a_key = 1\n").is_err());
        assert!(TrainConfig::from_toml_str("lambda_pc = -0.5\n").is_err());
        let other = TrainConfig { seed: 8, ..cfg.clone() };
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn ablation_ledger() {
        let a = ablation_mode(Mode::A);
        assert!(!a.d_pc && !a.nce_gen && !a.nce_gt && !a.late_concat);
        assert_eq!(a.noise, NoiseKind::None);
        let b = ablation_mode(Mode::B);
        assert!(b.nce_gen && !b.nce_gt && !b.d_pc && !b.late_concat);
        let c = ablation_mode(Mode::C);
        assert!(c.late_concat && c.nce_gen && c.nce_gt && !c.d_pc);
        assert_eq!(c.noise, NoiseKind::Dynamic);
        let f = ablation_mode(Mode::Full);
        assert!(f.d_pc && f.nce_gen && f.nce_gt && f.late_concat);
        let s = ablation_mode(Mode::StaticNoise);
        assert_eq!(s.noise, NoiseKind::Static(STATIC_SIGMA));
        assert!("z".parse::<Mode>().is_err());
        assert_eq!("full".parse::<Mode>().unwrap(), Mode::Full);
    }

    #[test]
    fn text_step_accounting_and_determinism() {
        let cfg = tiny_cfg(Mode::Full);
        let data = tiny_dataset(&cfg);
        let batch: Vec<&CaptionedObject> = data.iter().take(2).collect();
        let run = || {
            let mut tr = Trainer::new(cfg.clone()).unwrap();
            tr.text_to_3d_step(&batch).unwrap()
        };
        let r1 = run();
        let r2 = run();
        assert_eq!(r1, r2, "fixed seed must reproduce the step-1 loss report");
        // accounting: g_total = g_img + g_mask + lambda_pc g_pc + lambda_gen l_gen
        let total = r1["g_img"]
            + r1["g_mask"]
            + cfg.lambda_pc * r1["g_pc"]
            + cfg.lambda_gen * r1["l_gen"];
        assert!((total - r1["g_total"]).abs() < 1e-9);
        let d_total = r1["d_img"] + r1["d_mask"] + r1["d_pc"];
        assert!((d_total - r1["d_total"]).abs() < 1e-9);
    }

    #[test]
    fn mode_a_reduces_to_2_5d_gan() {
        let cfg = tiny_cfg(Mode::A);
        let data = tiny_dataset(&cfg);
        let batch: Vec<&CaptionedObject> = data.iter().take(2).collect();
        let mut tr = Trainer::new(cfg).unwrap();
        let sigma_before = tr.model.sigma_net.store.content_hash();
        let r = tr.text_to_3d_step(&batch).unwrap();
        assert!(!r.contains_key("g_pc") && !r.contains_key("l_gen") && !r.contains_key("d_pc"));
        assert!((r["g_total"] - r["g_img"] - r["g_mask"]).abs() < 1e-12);
        // no noise path: sigma_net untouched in mode (a)
        assert_eq!(sigma_before, tr.model.sigma_net.store.content_hash());
    }

    #[test]
    fn image_step_freezes_sigma_and_accounts() {
        let cfg = tiny_cfg(Mode::Full);
        let data = tiny_dataset(&cfg);
        let batch: Vec<&CaptionedObject> = data.iter().take(2).collect();
        let mut tr = Trainer::new(cfg.clone()).unwrap();
        tr.text_to_3d_step(&batch).unwrap();
        let sigma_before = tr.model.sigma_net.store.content_hash();
        let view_before = tr.model.view_net.store.content_hash();
        let r = tr.image_to_3d_step(&batch).unwrap();
        assert_eq!(sigma_before, tr.model.sigma_net.store.content_hash());
        assert_ne!(view_before, tr.model.view_net.store.content_hash());
        let total = r["g_img"]
            + r["g_mask"]
            + cfg.lambda_pc * r["g_pc"]
            + cfg.lambda_bind * r["l_bind"];
        assert!((total - r["g_total"]).abs() < 1e-9);
        assert!((r["l_bind"] - r["l_view"] - r["l_ntf"]).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let cfg = tiny_cfg(Mode::Full);
        let data = tiny_dataset(&cfg);
        let batch: Vec<&CaptionedObject> = data.iter().take(2).collect();
        let mut tr = Trainer::new(cfg.clone()).unwrap();
        tr.text_to_3d_step(&batch).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &tr).unwrap();
        let mut loaded = load_checkpoint(&path, cfg.clone(), false).unwrap();
        assert_eq!(loaded.step, tr.step);
        for (a, b) in [
            (&tr.model.generator.store, &loaded.model.generator.store),
            (&tr.model.sigma_net.store, &loaded.model.sigma_net.store),
            (&tr.model.d_img.store, &loaded.model.d_img.store),
        ] {
            assert_eq!(a.content_hash(), b.content_hash());
        }
        // continued training matches bit-exactly
        let r_orig = tr.text_to_3d_step(&batch).unwrap();
        let r_loaded = loaded.text_to_3d_step(&batch).unwrap();
        assert_eq!(r_orig, r_loaded);
        // corruption is detected
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, cfg.clone(), false),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn checkpoint_refuses_config_mismatch_unless_forced() {
        let cfg = tiny_cfg(Mode::Full);
        let tr = Trainer::new(cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &tr).unwrap();
        let other = TrainConfig { lambda_bind: 0.2, ..cfg.clone() };
        assert!(load_checkpoint(&path, other.clone(), false).is_err());
        let forced = load_checkpoint(&path, other, true).unwrap();
        assert_eq!(
            forced.model.generator.store.content_hash(),
            tr.model.generator.store.content_hash()
        );
    }

    #[test]
    fn loss_csv_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let mut r = LossReport::new();
        r.insert("g_total".into(), 1.25);
        append_loss_csv(&path, 1, &r).unwrap();
        r.insert("g_total".into(), 1.5);
        append_loss_csv(&path, 2, &r).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,loss_name,value");
        assert_eq!(lines[1], "1,g_total,1.25");
        assert_eq!(lines[2], "2,g_total,1.5");
    }
}
