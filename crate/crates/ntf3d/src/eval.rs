//! Metric protocols: R-Precision, view invariance, sigma trend, hue
//! match, and report emission.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use crate::data::{CaptionedObject, COLOR_ANCHORS};
use crate::embed::{cosine, ImageEmbedder, TextEmbedder};
use crate::error::{Error, Result};
use crate::generator::{Branch, LatentVector};
use crate::mesh::TexturedMesh;
use crate::ntf::{standard_normal_vec, view_code, SigmaNet, ViewNet};
use crate::render::{eval_camera, front_back_cameras, render, RenderOpts, RenderedView};
use crate::train::{ablation_mode, NoiseKind, Trainer};

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub per_prompt: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn new(config_hash: String, seed: u64) -> Self {
        EvalReport { metrics: BTreeMap::new(), per_prompt: Vec::new(), config_hash, seed }
    }

    pub fn to_key_value(&self) -> String {
        let mut s = format!("config_hash={}\nseed={}\n", self.config_hash, self.seed);
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn write(&self, path: &Path, csv_path: Option<&Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(self.to_key_value().as_bytes())?;
        if let Some(csv) = csv_path {
            let mut f = std::fs::File::create(csv)?;
            writeln!(f, "prompt,record")?;
            for line in &self.per_prompt {
                writeln!(f, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Sample one generated mesh for a prompt under the trainer's mode.
pub fn generate_from_prompt<R: Rng>(
    tr: &Trainer,
    prompt: &str,
    rng: &mut R,
) -> Result<TexturedMesh> {
    let set = ablation_mode(tr.cfg.mode);
    let t = tr.model.text_embedder.embed_text(prompt)?.vector;
    let d = tr.cfg.text_dim;
    let tfield: Vec<f64> = match set.noise {
        NoiseKind::None => t.clone(),
        NoiseKind::Static(s) => {
            let n = standard_normal_vec(d, rng);
            t.iter().zip(&n).map(|(x, nn)| x + s * nn).collect()
        }
        NoiseKind::Dynamic => {
            let n = standard_normal_vec(d, rng);
            let sigma = tr.model.sigma_net.sigma(&t);
            t.iter().zip(&n).zip(&sigma).map(|((x, nn), s)| x + s * nn).collect()
        }
    };
    let zg = LatentVector::sample(tr.cfg.z_dim, rng);
    let zt = LatentVector::sample(tr.cfg.z_dim, rng);
    let cg = tr.model.generator.latent_code(&zg, &tfield, Branch::Geometry)?;
    let ct = tr.model.generator.latent_code(&zt, &tfield, Branch::Texture)?;
    tr.model.generator.generate(&cg, &ct)
}

/// Top-1 retrieval core: fraction of rows whose kept embedding is most
/// similar to its own prompt embedding over all prompts.
pub fn retrieval_precision(kept: &[Vec<f64>], text_embs: &[Vec<f64>]) -> f64 {
    let mut correct = 0usize;
    for (i, k) in kept.iter().enumerate() {
        let best = (0..text_embs.len())
            .max_by(|&a, &b| {
                cosine(k, &text_embs[a]).partial_cmp(&cosine(k, &text_embs[b])).unwrap()
            })
            .unwrap();
        if best == i {
            correct += 1;
        }
    }
    correct as f64 / kept.len() as f64
}

/// N-shot R-Precision at the fixed evaluation camera.
pub fn r_precision<R: Rng>(
    tr: &Trainer,
    prompts: &[String],
    shots: usize,
    rng: &mut R,
) -> Result<f64> {
    if shots == 0 {
        return Err(Error::InvalidInput("shots must be >= 1".into()));
    }
    let unique: BTreeSet<&String> = prompts.iter().collect();
    if unique.len() != prompts.len() {
        return Err(Error::Config("duplicate prompts make retrieval ill-posed".into()));
    }
    let cam = eval_camera();
    let opts = tr.cfg.render_opts();
    let text_embs: Vec<Vec<f64>> = prompts
        .iter()
        .map(|p| tr.model.text_embedder.embed_text(p).map(|e| e.vector))
        .collect::<Result<_>>()?;
    let mut kept = Vec::with_capacity(prompts.len());
    for (i, t) in text_embs.iter().enumerate() {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..shots {
            let mesh = generate_from_prompt(tr, &prompts[i], rng)?;
            let view = render(&mesh, &cam, &opts, rng.gen(), i as u64)?;
            let emb = tr.model.image_embedder.embed_image(&view)?.vector;
            let c = cosine(&emb, t);
            if best.as_ref().map_or(true, |(bc, _)| c > *bc) {
                best = Some((c, emb));
            }
        }
        kept.push(best.unwrap().1);
    }
    Ok(retrieval_precision(&kept, &text_embs))
}

/// Front/back cosine and retrieval metrics (s, s-tilde, r, r-tilde).
pub fn view_invariance_metrics<R: Rng>(
    objects: &[CaptionedObject],
    view_net: &ViewNet,
    embedder: &ImageEmbedder,
    opts: &RenderOpts,
    rng: &mut R,
) -> Result<(f64, f64, f64, f64)> {
    if objects.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 objects for retrieval".into()));
    }
    struct Pair {
        front_emb: Vec<f64>,
        back_emb: Vec<f64>,
        front_code: Vec<f64>,
        back_code: Vec<f64>,
    }
    let mut pairs = Vec::with_capacity(objects.len());
    for obj in objects {
        let (cf, cb) = front_back_cameras(rng);
        let vf = render(&obj.mesh, &cf, opts, rng.gen(), obj.id)?;
        let vb = render(&obj.mesh, &cb, opts, rng.gen(), obj.id)?;
        pairs.push(Pair {
            front_emb: embedder.embed_image(&vf)?.vector,
            back_emb: embedder.embed_image(&vb)?.vector,
            front_code: view_code(&vf, &cf, view_net, embedder)?.vector,
            back_code: view_code(&vb, &cb, view_net, embedder)?.vector,
        });
    }
    let n = pairs.len() as f64;
    let s = pairs.iter().map(|p| cosine(&p.front_emb, &p.back_emb)).sum::<f64>() / n;
    let s_tilde = pairs.iter().map(|p| cosine(&p.front_code, &p.back_code)).sum::<f64>() / n;
    let top1 = |query: &dyn Fn(&Pair) -> &Vec<f64>, target: &dyn Fn(&Pair) -> &Vec<f64>| {
        let mut correct = 0usize;
        for (i, p) in pairs.iter().enumerate() {
            let best = (0..pairs.len())
                .max_by(|&a, &b| {
                    cosine(query(p), target(&pairs[a]))
                        .partial_cmp(&cosine(query(p), target(&pairs[b])))
                        .unwrap()
                })
                .unwrap();
            if best == i {
                correct += 1;
            }
        }
        correct as f64 / n
    };
    let r = top1(&|p| &p.front_emb, &|p| &p.back_emb);
    let r_tilde = top1(&|p| &p.front_code, &|p| &p.back_code);
    Ok((s, s_tilde, r, r_tilde))
}

/// Per-attribute-count probe: (count, mean sigma, mean t-field variance)
/// with `draws` noisy samples per caption.
pub fn sigma_trend(
    captions_by_count: &BTreeMap<usize, Vec<String>>,
    sigma_net: &SigmaNet,
    embedder: &TextEmbedder,
    draws: usize,
    seed: u64,
) -> Result<Vec<(usize, f64, f64)>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (&count, captions) in captions_by_count {
        if captions.is_empty() {
            return Err(Error::InvalidInput("empty caption group".into()));
        }
        let mut sigma_sum = 0.0;
        let mut sigma_n = 0usize;
        let mut var_sum = 0.0;
        let mut var_n = 0usize;
        for cap in captions {
            let t = embedder.embed_text(cap)?.vector;
            let sigma = sigma_net.sigma(&t);
            sigma_sum += sigma.iter().sum::<f64>();
            sigma_n += sigma.len();
            // empirical per-dimension variance of the noisy draws
            let d = t.len();
            let mut sum = vec![0.0; d];
            let mut sq = vec![0.0; d];
            for _ in 0..draws {
                let n = standard_normal_vec(d, &mut rng);
                for k in 0..d {
                    let x = t[k] + sigma[k] * n[k];
                    sum[k] += x;
                    sq[k] += x * x;
                }
            }
            for k in 0..d {
                let mean = sum[k] / draws as f64;
                var_sum += sq[k] / draws as f64 - mean * mean;
            }
            var_n += d;
        }
        out.push((count, sigma_sum / sigma_n as f64, var_sum / var_n as f64));
    }
    Ok(out)
}

/// Nearest named color for an RGB triple.
pub fn nearest_color(rgb: [f64; 3]) -> &'static str {
    COLOR_ANCHORS
        .iter()
        .min_by(|(_, a), (_, b)| {
            let da: f64 = a.iter().zip(&rgb).map(|(x, y)| (x - y) * (x - y)).sum();
            let db: f64 = b.iter().zip(&rgb).map(|(x, y)| (x - y) * (x - y)).sum();
            da.partial_cmp(&db).unwrap()
        })
        .map(|(n, _)| *n)
        .unwrap()
}

/// Mean foreground color of a view (silhouette > 0.5 mask), if any
/// foreground exists.
pub fn foreground_mean(view: &RenderedView) -> Option<[f64; 3]> {
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for (i, &s) in view.silhouette.iter().enumerate() {
        if s > 0.5 {
            for k in 0..3 {
                acc[k] += view.rgb[3 * i + k];
            }
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    Some([acc[0] / n as f64, acc[1] / n as f64, acc[2] / n as f64])
}

/// Fraction of prompts whose rendered foreground matches the prompt's
/// color attribute.
pub fn hue_match<R: Rng>(
    tr: &Trainer,
    prompts: &[(String, String)],
    rng: &mut R,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("no prompts".into()));
    }
    let cam = eval_camera();
    let opts = tr.cfg.render_opts();
    let mut hits = 0usize;
    for (i, (prompt, color)) in prompts.iter().enumerate() {
        let mesh = generate_from_prompt(tr, prompt, rng)?;
        let view = render(&mesh, &cam, &opts, rng.gen(), i as u64)?;
        if let Some(mean) = foreground_mean(&view) {
            if nearest_color(mean) == color {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / prompts.len() as f64)
}
