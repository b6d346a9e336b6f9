//! Command-line surface: dataset build, training, generation, and
//! evaluation over a single TOML experiment config.

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{
    curate, make_dataset, write_dataset, write_mesh, write_view_png, CaptionedObject,
    CURATION_BAND, DEFAULT_SHAPES,
};
use crate::embed::cosine;
use crate::error::{Error, Result};
use crate::eval::{
    generate_from_prompt, hue_match, r_precision, sigma_trend, view_invariance_metrics, EvalReport,
};
use crate::ntf::view_code;
use crate::render::{eval_camera, render, RenderedView};
use crate::train::{append_loss_csv, load_checkpoint, save_checkpoint, Mode, TrainConfig, Trainer};

const DATASET_SEED_XOR: u64 = 0xDA7A;
const EVAL_SEED_XOR: u64 = 0xE7A1;
const BATCH_SEED_XOR: u64 = 0xBA7C;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Text,
    Image,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    /// empty string means "no size attribute"
    pub sizes: Vec<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            shapes: DEFAULT_SHAPES.iter().map(|s| s.to_string()).collect(),
            colors: crate::data::COLOR_ANCHORS.iter().map(|(n, _)| n.to_string()).collect(),
            sizes: vec![String::new(), "small".into(), "large".into()],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metrics: Vec<String>,
    pub max_prompts: usize,
    pub max_objects: usize,
    pub sigma_draws: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: ["rprec1", "rprec9", "viewinv", "hue", "sigma_trend"]
                .map(str::to_string)
                .to_vec(),
            max_prompts: 16,
            max_objects: 24,
            sigma_draws: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub objective: Objective,
    pub out_dir: String,
    pub checkpoint_every: u64,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            objective: Objective::Text,
            out_dir: "out".into(),
            checkpoint_every: 500,
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable");
        let digest = Sha256::digest(json.as_bytes());
        hex(&digest)[..16].to_string()
    }

    /// Output root after the NTF3D_OUT override.
    pub fn out_root(&self, flag: Option<&Path>) -> PathBuf {
        if let Ok(v) = std::env::var("NTF3D_OUT") {
            return PathBuf::from(v);
        }
        flag.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&self.out_dir))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Build the dataset deterministically from the experiment config,
/// dropping objects rejected by curation.
pub fn dataset_objects(cfg: &ExperimentConfig) -> Result<Vec<CaptionedObject>> {
    let shapes: Vec<&str> = cfg.dataset.shapes.iter().map(String::as_str).collect();
    let colors: Vec<&str> = cfg.dataset.colors.iter().map(String::as_str).collect();
    let sizes: Vec<Option<&str>> = cfg
        .dataset
        .sizes
        .iter()
        .map(|s| if s.is_empty() { None } else { Some(s.as_str()) })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ DATASET_SEED_XOR);
    let objects = make_dataset(
        &shapes,
        &colors,
        &sizes,
        cfg.train.points_per_cloud,
        &cfg.train.render_opts(),
        &mut rng,
    )?;
    let mut kept = Vec::with_capacity(objects.len());
    for obj in objects {
        if curate(obj.id, &obj.mesh, CURATION_BAND)?.accepted {
            kept.push(obj);
        }
    }
    Ok(kept)
}

#[derive(Parser, Debug)]
#[command(name = "ntf3d", about = "Conditional 3D generation from noisy text fields")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Build the captioned-shape dataset and write its manifest.
    Dataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the training loop and write checkpoints plus a loss CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate meshes and renders from a prompt or a reference image.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "image")]
        prompt: Option<String>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        shots: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the metric suite over a frozen checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// comma-separated subset of rprec1,rprec9,viewinv,hue,sigma_trend
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Run a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => 3,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Dataset { config, seed, out } => cmd_dataset(&config, seed, out.as_deref()),
        Cmd::Train { config, mode, seed, steps, resume, out } => {
            cmd_train(&config, mode, seed, steps, resume.as_deref(), out.as_deref())
        }
        Cmd::Generate { config, checkpoint, prompt, image, shots, seed, out } => cmd_generate(
            &config,
            &checkpoint,
            prompt.as_deref(),
            image.as_deref(),
            shots,
            seed,
            out.as_deref(),
        ),
        Cmd::Eval { config, checkpoint, metrics, seed, out } => {
            cmd_eval(&config, &checkpoint, metrics.as_deref(), seed, out.as_deref())
        }
    }
}

pub fn cmd_dataset(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    println!("config_hash={}", cfg.hash());
    let objects = dataset_objects(&cfg)?;
    let root = cfg.out_root(out).join("dataset");
    let manifest = write_dataset(&root, &objects)?;
    let digest = Sha256::digest(std::fs::read(&manifest)?);
    println!("objects={}", objects.len());
    println!("manifest={}", manifest.display());
    println!("manifest_hash={}", hex(&digest));
    Ok(())
}

pub fn cmd_train(
    config: &Path,
    mode: Option<Mode>,
    seed: Option<u64>,
    steps: Option<u64>,
    resume: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.train.validate()?;
    println!("config_hash={}", cfg.hash());
    let root = cfg.out_root(out);
    std::fs::create_dir_all(&root)?;

    let objects = dataset_objects(&cfg)?;
    if objects.len() < cfg.train.batch {
        return Err(Error::Config(format!(
            "dataset has {} objects but batch is {}",
            objects.len(),
            cfg.train.batch
        )));
    }
    let mut trainer = match resume {
        Some(path) => load_checkpoint(path, cfg.train.clone(), false)?,
        None => Trainer::new(cfg.train.clone())?,
    };
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ BATCH_SEED_XOR);
    batch_rng.set_stream(trainer.step);
    let csv = root.join("loss.csv");
    let ckpt = root.join("checkpoint.ckpt");
    while trainer.step < cfg.train.steps {
        let idx = rand::seq::index::sample(&mut batch_rng, objects.len(), cfg.train.batch);
        let batch: Vec<&CaptionedObject> = idx.iter().map(|i| &objects[i]).collect();
        let result = match cfg.objective {
            Objective::Text => trainer.text_to_3d_step(&batch),
            Objective::Image => trainer.image_to_3d_step(&batch),
        };
        let report = match result {
            Ok(r) => r,
            Err(Error::Numeric(msg)) => {
                let snapshot = root.join(format!("abort_step{}.ckpt", trainer.step));
                save_checkpoint(&snapshot, &trainer)?;
                eprintln!("snapshot={}", snapshot.display());
                return Err(Error::Numeric(msg));
            }
            Err(e) => return Err(e),
        };
        append_loss_csv(&csv, trainer.step, &report)?;
        if trainer.step % cfg.checkpoint_every == 0 || trainer.step == cfg.train.steps {
            save_checkpoint(&ckpt, &trainer)?;
        }
    }
    save_checkpoint(&ckpt, &trainer)?;
    println!("steps={}", trainer.step);
    println!("checkpoint={}", ckpt.display());
    println!("loss_csv={}", csv.display());
    Ok(())
}

fn load_reference_image(path: &Path, resolution: usize) -> Result<RenderedView> {
    let img = image::open(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let img = image::imageops::resize(
        &img,
        resolution as u32,
        resolution as u32,
        image::imageops::FilterType::Triangle,
    );
    let rgb: Vec<f64> = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok(RenderedView {
        rgb,
        silhouette: vec![1.0; resolution * resolution],
        resolution,
        camera: eval_camera(),
        caption_id: 0,
    })
}

pub fn cmd_generate(
    config: &Path,
    checkpoint: &Path,
    prompt: Option<&str>,
    image: Option<&Path>,
    shots: usize,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    println!("config_hash={}", cfg.hash());
    if shots == 0 {
        return Err(Error::Config("shots must be >= 1".into()));
    }
    let trainer = load_checkpoint(checkpoint, cfg.train.clone(), false)?;
    let root = cfg.out_root(out).join("generate");
    std::fs::create_dir_all(&root)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(cfg.train.seed ^ EVAL_SEED_XOR));
    let cam = eval_camera();
    let opts = cfg.train.render_opts();

    // the selection target is the prompt embedding (text path) or the
    // reference view code (image path)
    enum Source<'a> {
        Text(&'a str),
        Code(Vec<f64>),
    }
    let (source, target) = match (prompt, image) {
        (Some(p), None) => {
            let t = trainer.model.text_embedder.embed_text(p)?.vector;
            (Source::Text(p), t)
        }
        (None, Some(img_path)) => {
            if cfg.objective != Objective::Image {
                return Err(Error::Config(
                    "image input requires an image-to-3d config/checkpoint (objective = \"image\")"
                        .into(),
                ));
            }
            let view = load_reference_image(img_path, cfg.train.resolution)?;
            let code =
                view_code(&view, &cam, &trainer.model.view_net, &trainer.model.image_embedder)?
                    .vector;
            (Source::Code(code), Vec::new())
        }
        _ => return Err(Error::Config("provide exactly one of --prompt or --image".into())),
    };
    let target = match &source {
        Source::Text(_) => target,
        Source::Code(c) => c.clone(),
    };

    let mut best: Option<(usize, f64)> = None;
    for shot in 0..shots {
        let mesh = match &source {
            Source::Text(p) => generate_from_prompt(&trainer, p, &mut rng)?,
            Source::Code(code) => {
                use crate::generator::{Branch, LatentVector};
                let zg = LatentVector::sample(cfg.train.z_dim, &mut rng);
                let zt = LatentVector::sample(cfg.train.z_dim, &mut rng);
                let cg = trainer.model.generator.latent_code(&zg, code, Branch::Geometry)?;
                let ct = trainer.model.generator.latent_code(&zt, code, Branch::Texture)?;
                trainer.model.generator.generate(&cg, &ct)?
            }
        };
        let view = render(&mesh, &cam, &opts, rng.gen(), shot as u64)?;
        let emb = trainer.model.image_embedder.embed_image(&view)?.vector;
        let score = cosine(&emb, &target);
        write_mesh(&root.join(format!("mesh_{shot}.off")), &mesh)?;
        write_view_png(
            &root.join(format!("view_{shot}.png")),
            &root.join(format!("mask_{shot}.png")),
            &view,
        )?;
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((shot, score));
        }
    }
    let (idx, score) = best.unwrap();
    std::fs::write(root.join("selected.txt"), format!("{idx}\n"))?;
    println!("selected={idx}");
    println!("score={score}");
    println!("out={}", root.display());
    Ok(())
}

pub fn cmd_eval(
    config: &Path,
    checkpoint: &Path,
    metrics: Option<&str>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    println!("config_hash={}", cfg.hash());
    let selected: Vec<String> = match metrics {
        Some(m) => m.split(',').map(|s| s.trim().to_string()).collect(),
        None => cfg.eval.metrics.clone(),
    };
    const KNOWN: [&str; 5] = ["rprec1", "rprec9", "viewinv", "hue", "sigma_trend"];
    for m in &selected {
        if !KNOWN.contains(&m.as_str()) {
            return Err(Error::Config(format!("unknown metric {m:?}; known: {KNOWN:?}")));
        }
    }
    let trainer = load_checkpoint(checkpoint, cfg.train.clone(), false)?;
    let eval_seed = seed.unwrap_or(cfg.train.seed ^ EVAL_SEED_XOR);
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let objects = dataset_objects(&cfg)?;
    let subset: Vec<&CaptionedObject> =
        objects.iter().take(cfg.eval.max_objects).collect();
    let prompts: Vec<String> = subset
        .iter()
        .take(cfg.eval.max_prompts)
        .map(|o| o.caption.clone())
        .collect();

    let mut report = EvalReport::new(cfg.hash(), eval_seed);
    for m in &selected {
        match m.as_str() {
            "rprec1" => {
                let v = r_precision(&trainer, &prompts, 1, &mut rng)?;
                report.metrics.insert("rprec1".into(), v);
            }
            "rprec9" => {
                let v = r_precision(&trainer, &prompts, 9, &mut rng)?;
                report.metrics.insert("rprec9".into(), v);
            }
            "viewinv" => {
                let owned: Vec<CaptionedObject> = subset.iter().map(|o| (*o).clone()).collect();
                let (s, st, r, rt) = view_invariance_metrics(
                    &owned,
                    &trainer.model.view_net,
                    &trainer.model.image_embedder,
                    &cfg.train.render_opts(),
                    &mut rng,
                )?;
                report.metrics.insert("viewinv_s".into(), s);
                report.metrics.insert("viewinv_s_tilde".into(), st);
                report.metrics.insert("viewinv_r".into(), r);
                report.metrics.insert("viewinv_r_tilde".into(), rt);
            }
            "hue" => {
                let pairs: Vec<(String, String)> = subset
                    .iter()
                    .take(cfg.eval.max_prompts)
                    .map(|o| (o.caption.clone(), o.attributes.color.clone()))
                    .collect();
                let v = hue_match(&trainer, &pairs, &mut rng)?;
                report.metrics.insert("hue".into(), v);
            }
            "sigma_trend" => {
                let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
                for o in &objects {
                    groups
                        .entry(o.attributes.attribute_count())
                        .or_default()
                        .push(o.caption.clone());
                }
                let trend = sigma_trend(
                    &groups,
                    &trainer.model.sigma_net,
                    &trainer.model.text_embedder,
                    cfg.eval.sigma_draws,
                    eval_seed,
                )?;
                for (count, mean_sigma, var) in trend {
                    report.metrics.insert(format!("sigma_mean_{count}"), mean_sigma);
                    report.metrics.insert(format!("tfield_var_{count}"), var);
                }
            }
            _ => unreachable!(),
        }
    }
    let root = cfg.out_root(out);
    std::fs::create_dir_all(&root)?;
    let path = root.join("eval_report.txt");
    report.write(&path, None)?;
    print!("{}", report.to_key_value());
    println!("report={}", path.display());
    Ok(())
}
