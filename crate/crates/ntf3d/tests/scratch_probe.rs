// temporary diagnostics, not part of the suite
use ntf3d::cli::{dataset_objects, DatasetConfig, EvalConfig, ExperimentConfig, Objective};
use ntf3d::eval::{r_precision, retrieval_precision};
use ntf3d::generator::Branch;
use ntf3d::ntf::nce_loss_graph;
use ntf3d::render::{eval_camera, render, sample_camera};
use ntf3d::tape::{Graph, Tensor};
use ntf3d::train::{Mode, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn probe_cfg() -> ExperimentConfig {
    ExperimentConfig {
        objective: Objective::Text,
        train: TrainConfig {
            batch: 8,
            steps: 0,
            resolution: 16,
            patch_grid: 8,
            render_points: 200,
            points_per_cloud: 128,
            seed: 11,
            mode: Mode::Full,
            ..Default::default()
        },
        dataset: DatasetConfig::default(),
        eval: EvalConfig::default(),
        ..Default::default()
    }
}

#[test]
#[ignore]
fn inspect_view_codes() {
    let cfg = ExperimentConfig::from_toml_str(
        &std::fs::read_to_string("/tmp/ntfprobe8/exp.toml").unwrap(),
    )
    .unwrap();
    let tr = ntf3d::train::load_checkpoint(
        std::path::Path::new("/tmp/ntfprobe8/out/checkpoint.ckpt"),
        cfg.train.clone(),
        false,
    )
    .unwrap();
    let objects = dataset_objects(&cfg).unwrap();
    let opts = cfg.train.render_opts();
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut fronts = Vec::new();
    let mut backs = Vec::new();
    let mut rots = Vec::new();
    for o in objects.iter().take(24) {
        let (cf, cb) = ntf3d::render::front_back_cameras(&mut rng);
        let vf = render(&o.mesh, &cf, &opts, rng.gen(), o.id).unwrap();
        let vb = render(&o.mesh, &cb, &opts, rng.gen(), o.id).unwrap();
        fronts.push(
            ntf3d::ntf::view_code(&vf, &cf, &tr.model.view_net, &tr.model.image_embedder)
                .unwrap()
                .vector,
        );
        backs.push(
            ntf3d::ntf::view_code(&vb, &cb, &tr.model.view_net, &tr.model.image_embedder)
                .unwrap()
                .vector,
        );
        rots.push(cf.rotation);
    }
    let n = fronts.len();
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..n {
        diag += cos(&fronts[i], &backs[i]) / n as f64;
        for j in 0..n {
            if j != i {
                off += cos(&fronts[i], &backs[j]) / (n * (n - 1)) as f64;
            }
        }
    }
    println!("code diag={diag:.6} offdiag={off:.6}");
    // rank of own back among candidates, and whose back wins
    for i in 0..4 {
        let mut sims: Vec<(usize, f64)> =
            (0..n).map(|j| (j, cos(&fronts[i], &backs[j]))).collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let rank = sims.iter().position(|&(j, _)| j == i).unwrap();
        let (w, ws) = sims[0];
        println!(
            "query {i} rot={:.2}: own-back rank {rank} sim {:.6}; winner {w} rot={:.2} sim {ws:.6}",
            rots[i],
            cos(&fronts[i], &backs[i]),
            rots[w]
        );
    }
    // same stats on cached dataset views (training inputs)
    let mut tdiag = 0.0;
    let mut toff = 0.0;
    let tcodes: Vec<(Vec<f64>, Vec<f64>)> = objects
        .iter()
        .take(24)
        .map(|o| {
            let a = ntf3d::ntf::view_code(
                &o.views[0],
                &o.views[0].camera,
                &tr.model.view_net,
                &tr.model.image_embedder,
            )
            .unwrap()
            .vector;
            let p = ntf3d::ntf::view_code(
                &o.views[1],
                &o.views[1].camera,
                &tr.model.view_net,
                &tr.model.image_embedder,
            )
            .unwrap()
            .vector;
            (a, p)
        })
        .collect();
    for i in 0..n {
        tdiag += cos(&tcodes[i].0, &tcodes[i].1) / n as f64;
        for j in 0..n {
            if j != i {
                toff += cos(&tcodes[i].0, &tcodes[j].1) / (n * (n - 1)) as f64;
            }
        }
    }
    println!("cached-view code diag={tdiag:.6} offdiag={toff:.6}");
}

#[test]
#[ignore]
fn rprec_failure_modes() {
    let cfg = ExperimentConfig::from_toml_str(
        &std::fs::read_to_string("/tmp/ntfprobe7/exp.toml").unwrap(),
    )
    .unwrap();
    let tr = ntf3d::train::load_checkpoint(
        std::path::Path::new("/tmp/ntfprobe7/out/checkpoint.ckpt"),
        cfg.train.clone(),
        false,
    )
    .unwrap();
    let objects = dataset_objects(&cfg).unwrap();
    let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let text: Vec<Vec<f64>> = objects
        .iter()
        .map(|o| tr.model.text_embedder.embed_text(&o.caption).unwrap().vector)
        .collect();
    // z variance: same prompt, 4 z draws
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut zvar = 0.0;
    let mut own = 0.0;
    let mut nz = 0;
    for o in objects.iter().step_by(7) {
        let embs: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let m = ntf3d::eval::generate_from_prompt(&tr, &o.caption, &mut rng).unwrap();
                let v = render(&m, &eval_camera(), &cfg.train.render_opts(), rng.gen(), 0)
                    .unwrap();
                tr.model.image_embedder.embed_image(&v).unwrap().vector
            })
            .collect();
        for i in 0..4 {
            own += cos(&embs[i], &text[o.id as usize]) / 4.0;
            for j in 0..i {
                zvar += cos(&embs[i], &embs[j]);
                nz += 1;
            }
        }
    }
    let k = objects.iter().step_by(7).count() as f64;
    println!("same-prompt-diff-z cos = {:.4}; mean own-text cos = {:.4}", zvar / nz as f64, own / k);
    // miss analysis over all prompts, 1 shot
    let mut rng = ChaCha8Rng::seed_from_u64(4243);
    let mut hits = 0;
    let mut sib = 0;
    let mut same_shape = 0;
    let mut other = 0;
    for o in &objects {
        let m = ntf3d::eval::generate_from_prompt(&tr, &o.caption, &mut rng).unwrap();
        let v = render(&m, &eval_camera(), &cfg.train.render_opts(), rng.gen(), 0).unwrap();
        let e = tr.model.image_embedder.embed_image(&v).unwrap().vector;
        let best = (0..text.len())
            .max_by(|&a, &b| cos(&e, &text[a]).partial_cmp(&cos(&e, &text[b])).unwrap())
            .unwrap();
        if best == o.id as usize {
            hits += 1;
        } else {
            let w = &objects[best].attributes;
            let a = &o.attributes;
            if w.shape == a.shape && w.color == a.color {
                sib += 1;
            } else if w.shape == a.shape {
                same_shape += 1;
            } else {
                other += 1;
            }
        }
    }
    println!(
        "hits {hits}/144, misses: sibling(size) {sib}, same-shape-diff-color {same_shape}, other {other}"
    );
}

#[test]
#[ignore]
fn gt_render_ceiling() {
    let cfg = probe_cfg();
    let objects = dataset_objects(&cfg).unwrap();
    let tr = Trainer::new(cfg.train.clone()).unwrap();
    let cam = eval_camera();
    let opts = cfg.train.render_opts();
    let text: Vec<Vec<f64>> = objects
        .iter()
        .map(|o| tr.model.text_embedder.embed_text(&o.caption).unwrap().vector)
        .collect();
    let kept: Vec<Vec<f64>> = objects
        .iter()
        .map(|o| {
            let v = render(&o.mesh, &cam, &opts, 1, o.id).unwrap();
            tr.model.image_embedder.embed_image(&v).unwrap().vector
        })
        .collect();
    println!("gt ceiling rprec = {}", retrieval_precision(&kept, &text));
}

#[test]
#[ignore]
fn embedding_noise_vs_signal() {
    let cfg = probe_cfg();
    let objects = dataset_objects(&cfg).unwrap();
    let tr = Trainer::new(cfg.train.clone()).unwrap();
    let cam = eval_camera();
    for pts in [200usize, 600, 1200] {
        let mut opts = cfg.train.render_opts();
        opts.points = pts;
        let embs: Vec<(Vec<f64>, Vec<f64>)> = objects
            .iter()
            .take(8)
            .map(|o| {
                let v1 = render(&o.mesh, &cam, &opts, 1, o.id).unwrap();
                let v2 = render(&o.mesh, &cam, &opts, 2, o.id).unwrap();
                (
                    tr.model.image_embedder.embed_image(&v1).unwrap().vector,
                    tr.model.image_embedder.embed_image(&v2).unwrap().vector,
                )
            })
            .collect();
        let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let same: f64 =
            embs.iter().map(|(a, b)| cos(a, b)).sum::<f64>() / embs.len() as f64;
        let mut cross = 0.0;
        let mut nc = 0;
        for i in 0..embs.len() {
            for j in 0..i {
                cross += cos(&embs[i].0, &embs[j].0);
                nc += 1;
            }
        }
        println!(
            "pts={pts} same-obj-diff-seed cos={:.6} cross-obj cos={:.6}",
            same,
            cross / nc as f64
        );
    }
}

#[test]
#[ignore]
fn pure_nce_fixed_cam() {
    let cfg = probe_cfg();
    let objects = dataset_objects(&cfg).unwrap();
    let mut tr = Trainer::new(cfg.train.clone()).unwrap();
    let tau = cfg.train.tau;
    let opts = cfg.train.render_opts();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut opt = ntf3d::nn::Adam::new(&tr.model.generator.store, 0.002, 0.0, 0.99);
    let cam = eval_camera();
    let nsteps: usize = std::env::var("NCE_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(1500);
    let tau = std::env::var("NCE_TAU").ok().and_then(|v| v.parse().ok()).unwrap_or(tau);
    let nb: usize = std::env::var("NCE_BATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(16);
    for step in 0..nsteps {
        let idx = rand::seq::index::sample(&mut rng, objects.len(), nb);
        let mut g = Graph::new();
        let b = tr.model.generator.store.bind(&mut g);
        let mut anchors = Vec::new();
        let mut cands = Vec::new();
        for i in idx.iter() {
            let o = &objects[i];
            let t = tr.model.text_embedder.embed_text(&o.caption).unwrap().vector;
            let tn = g.leaf(Tensor::row(t.clone()));
            let zg: Vec<f64> = (0..cfg.train.z_dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let zt: Vec<f64> = (0..cfg.train.z_dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let zgn = g.leaf(Tensor::row(zg));
            let ztn = g.leaf(Tensor::row(zt));
            let cg = tr.model.generator.code_graph(&mut g, &b, zgn, tn, Branch::Geometry);
            let ct = tr.model.generator.code_graph(&mut g, &b, ztn, tn, Branch::Texture);
            let (verts, colors) = tr.model.generator.mesh_graph(&mut g, &b, cg, ct);
            let (rgb, _sil) = ntf3d::render::render_graph(
                &mut g,
                verts,
                colors,
                tr.model.generator.faces(),
                &cam,
                &opts,
                &mut rng,
            )
            .unwrap();
            let emb = tr.model.image_embedder.embed_graph(&mut g, rgb);
            anchors.push(tn);
            cands.push(emb);
        }
        let a = g.stack_rows(&anchors);
        let c = g.stack_rows(&cands);
        let l1 = nce_loss_graph(&mut g, a, c, tau);
        let l2 = nce_loss_graph(&mut g, c, a, tau);
        let loss = g.add(l1, l2);
        let grads = g.backward(loss);
        tr.model.generator.store.zero_grads();
        tr.model.generator.store.accumulate(&grads, &b);
        opt.step(&mut tr.model.generator.store);
        if step % 100 == 0 {
            println!("step {step} nce {}", g.scalar_value(loss));
        }
        if step % 500 == 499 {
            let prompts: Vec<String> = objects.iter().map(|o| o.caption.clone()).collect();
            let mut erng = ChaCha8Rng::seed_from_u64(5);
            let p = r_precision(&tr, &prompts, 1, &mut erng).unwrap();
            println!("step {step} sym-nce-fixed-cam rprec1 = {p}");
        }
    }
}

#[test]
#[ignore]
fn pure_nce_training() {
    let cfg = probe_cfg();
    let objects = dataset_objects(&cfg).unwrap();
    let mut tr = Trainer::new(cfg.train.clone()).unwrap();
    let tau = cfg.train.tau;
    let opts = cfg.train.render_opts();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut opt = ntf3d::nn::Adam::new(&tr.model.generator.store, 0.002, 0.0, 0.99);
    for step in 0..600 {
        let idx = rand::seq::index::sample(&mut rng, objects.len(), 8);
        let mut g = Graph::new();
        let b = tr.model.generator.store.bind(&mut g);
        let mut anchors = Vec::new();
        let mut cands = Vec::new();
        for i in idx.iter() {
            let o = &objects[i];
            let t = tr.model.text_embedder.embed_text(&o.caption).unwrap().vector;
            let tn = g.leaf(Tensor::row(t.clone()));
            let zg: Vec<f64> = (0..cfg.train.z_dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let zt: Vec<f64> = (0..cfg.train.z_dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let zgn = g.leaf(Tensor::row(zg));
            let ztn = g.leaf(Tensor::row(zt));
            let cg = tr.model.generator.code_graph(&mut g, &b, zgn, tn, Branch::Geometry);
            let ct = tr.model.generator.code_graph(&mut g, &b, ztn, tn, Branch::Texture);
            let (verts, colors) = tr.model.generator.mesh_graph(&mut g, &b, cg, ct);
            let cam = sample_camera(&mut rng);
            let (rgb, _sil) = ntf3d::render::render_graph(
                &mut g,
                verts,
                colors,
                tr.model.generator.faces(),
                &cam,
                &opts,
                &mut rng,
            )
            .unwrap();
            let emb = tr.model.image_embedder.embed_graph(&mut g, rgb);
            anchors.push(tn);
            cands.push(emb);
        }
        let a = g.stack_rows(&anchors);
        let c = g.stack_rows(&cands);
        let loss = nce_loss_graph(&mut g, a, c, tau);
        let grads = g.backward(loss);
        tr.model.generator.store.zero_grads();
        tr.model.generator.store.accumulate(&grads, &b);
        opt.step(&mut tr.model.generator.store);
        if step % 50 == 0 {
            println!("step {step} nce {}", g.scalar_value(loss));
        }
    }
    let prompts: Vec<String> = objects.iter().map(|o| o.caption.clone()).collect();
    let mut erng = ChaCha8Rng::seed_from_u64(5);
    let p = r_precision(&tr, &prompts, 1, &mut erng).unwrap();
    println!("pure-nce rprec1 = {p}");
}
