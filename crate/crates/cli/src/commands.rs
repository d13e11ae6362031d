//! The six workbench commands as library functions. Each is a pure
//! function of (config, input files, seeds) up to wallclock fields.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};

use flowcast_core::checkpoint;
use flowcast_core::dataio::{
    fit_normalizer, generate_synthetic, save_manifest, write_scenes, Dataset, DatasetManifest,
    SYNTHETIC_AGENT_TYPE,
};
use flowcast_core::metrics::{self, EvalReport, HorizonMetrics};
use flowcast_core::network::{Model, ModelDims, ModelKind, NetworkConfig};
use flowcast_core::rng::{indexed_rng, subsystem_rng};
use flowcast_core::sampler::{sample_scene, write_samples, SampleRecord, SceneSample};
use flowcast_core::scene::Scene;
use flowcast_core::student::{distill_student, prepare_distill_items, student_sample};
use flowcast_core::teacher::{prepare_items, train_teacher};

use crate::config::{RunConfig, RunPaths};
use crate::plot::render_scene;

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.manifest_path();
    Dataset::load(&path).with_context(|| {
        format!(
            "cannot load dataset manifest {} (run gen-data first or set `dataset`)",
            path.display()
        )
    })
}

fn dims_of(man: &DatasetManifest) -> ModelDims {
    ModelDims {
        t_p: man.t_p,
        t_f: man.t_f,
        agent_types: man.agent_types.clone(),
    }
}

/// A deep copy with its own evaluation counter, for per-worker use.
fn clone_model(model: &Model) -> Model {
    Model::from_parts(
        model.kind,
        model.cfg.clone(),
        model.dims.clone(),
        model.params.clone(),
    )
    .expect("clone of a valid model is valid")
}

/// Refuse checkpoints whose architecture disagrees with the live config
/// and dataset. Shape-determining fields only; every disagreement is
/// listed.
fn check_architecture(
    net: &NetworkConfig,
    dims: &ModelDims,
    cfg: &RunConfig,
    man: &DatasetManifest,
) -> Result<()> {
    let mut diffs = Vec::new();
    let mut cmp = |field: &str, ckpt: String, live: String| {
        if ckpt != live {
            diffs.push(format!("{field}: checkpoint has {ckpt}, config has {live}"));
        }
    };
    cmp("network.d_model", net.d_model.to_string(), cfg.network.d_model.to_string());
    cmp("network.d_ff", net.d_ff.to_string(), cfg.network.d_ff.to_string());
    cmp("network.n_heads", net.n_heads.to_string(), cfg.network.n_heads.to_string());
    cmp(
        "network.n_enc_layers",
        net.n_enc_layers.to_string(),
        cfg.network.n_enc_layers.to_string(),
    );
    cmp(
        "network.n_dec_blocks",
        net.n_dec_blocks.to_string(),
        cfg.network.n_dec_blocks.to_string(),
    );
    cmp("network.k", net.k.to_string(), cfg.network.k.to_string());
    cmp("t_p", dims.t_p.to_string(), man.t_p.to_string());
    cmp("t_f", dims.t_f.to_string(), man.t_f.to_string());
    cmp(
        "agent_types",
        format!("{:?}", dims.agent_types),
        format!("{:?}", man.agent_types),
    );
    if diffs.is_empty() {
        Ok(())
    } else {
        bail!(
            "checkpoint architecture disagrees with the live config:\n  {}",
            diffs.join("\n  ")
        )
    }
}

/// Generate synthetic splits and a manifest into the run directory.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let paths = RunPaths::new(cfg.run_dir());
    crate::config::persist_config(cfg, &paths)?;

    let syn = &cfg.synthetic;
    if syn.n_train == 0 {
        bail!("synthetic.n_train must be >= 1 (the normalizer is fitted on the training split)");
    }
    let mut splits = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut train_scenes = None;
    for (split, n) in [("train", syn.n_train), ("val", syn.n_val), ("test", syn.n_test)] {
        if n == 0 {
            continue;
        }
        let scenes = generate_synthetic(syn, split, n)?;
        let file = format!("{split}.jsonl");
        write_scenes(paths.dir.join(&file), &scenes)?;
        splits.insert(split.to_string(), file);
        counts.insert(split.to_string(), n);
        println!("wrote {n} scenes to {split}.jsonl");
        if split == "train" {
            train_scenes = Some(scenes);
        }
    }
    let normalizer = fit_normalizer(&train_scenes.expect("train split generated"))?;
    let manifest = DatasetManifest {
        name: cfg.run_name.clone(),
        t_p: syn.t_p,
        t_f: syn.t_f,
        dt: syn.dt,
        agent_types: vec![SYNTHETIC_AGENT_TYPE.to_string()],
        splits,
        counts,
        normalizer,
    };
    save_manifest(&manifest, paths.manifest())?;
    println!("manifest: {}", paths.manifest().display());
    Ok(())
}

/// Train the flow-matching teacher and checkpoint it.
pub fn cmd_train_teacher(cfg: &RunConfig) -> Result<()> {
    let paths = RunPaths::new(cfg.run_dir());
    crate::config::persist_config(cfg, &paths)?;
    let dataset = load_dataset(cfg)?;
    let scenes = dataset.load_split("train")?;
    let dims = dims_of(&dataset.manifest);
    let normalizer = dataset.manifest.normalizer;

    let mut init_rng = subsystem_rng(cfg.seed, "teacher/init");
    let mut model = Model::new(ModelKind::Teacher, cfg.network.clone(), dims, &mut init_rng)?;
    let items = prepare_items(&model, &scenes, &normalizer)?;

    let log = File::create(paths.train_log())?;
    let mut log = BufWriter::new(log);
    let hash = cfg.hash();
    let every = cfg.train.checkpoint_every;
    let ckpt_path = paths.teacher_ckpt();
    let records = train_teacher(&mut model, &items, &cfg.train, |m, record| {
        writeln!(log, "{}", serde_json::to_string(record)?)?;
        log.flush()?;
        if every > 0 && record.step > 0 && record.step % every == 0 {
            checkpoint::save(&ckpt_path, m, &normalizer, &hash)?;
        }
        Ok(())
    })?;
    checkpoint::save(&ckpt_path, &model, &normalizer, &hash)?;

    let last = records.last().expect("at least one record");
    println!(
        "trained {} steps on {} scenes; final loss {:.6}",
        cfg.train.max_steps,
        scenes.len(),
        last.loss
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

/// One worker's output for a slice of scenes.
type SceneResult = (usize, SceneSample, f64);

/// Sample every scene in a split, either sequentially or across worker
/// threads. `make_sampler` builds one closure per worker; scene index
/// determines the rng stream, so results do not depend on `workers`.
fn run_split<'s>(
    scenes: &'s [Scene],
    workers: usize,
    make_sampler: &(dyn Fn() -> Box<dyn FnMut(&Scene, u64) -> flowcast_core::Result<SceneSample> + Send> + Sync),
) -> Result<Vec<(SceneSample, f64)>> {
    if scenes.is_empty() {
        bail!("split is empty; nothing to sample");
    }
    let n = scenes.len();
    let workers = workers.max(1).min(n);
    let mut flat: Vec<SceneResult> = if workers == 1 {
        let mut sampler = make_sampler();
        let mut out = Vec::with_capacity(n);
        for (idx, scene) in scenes.iter().enumerate() {
            let start = Instant::now();
            let sample = sampler(scene, idx as u64)
                .map_err(|e| anyhow!("scene `{}`: {e}", scene.scene_id))?;
            out.push((idx, sample, start.elapsed().as_secs_f64()));
        }
        out
    } else {
        std::thread::scope(|scope| -> Result<Vec<SceneResult>> {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || -> Result<Vec<SceneResult>> {
                        let mut sampler = make_sampler();
                        let mut out = Vec::new();
                        let mut idx = w;
                        while idx < n {
                            let scene = &scenes[idx];
                            let start = Instant::now();
                            let sample = sampler(scene, idx as u64)
                                .map_err(|e| anyhow!("scene `{}`: {e}", scene.scene_id))?;
                            out.push((idx, sample, start.elapsed().as_secs_f64()));
                            idx += workers;
                        }
                        Ok(out)
                    })
                })
                .collect();
            let mut flat = Vec::with_capacity(n);
            for h in handles {
                flat.extend(h.join().expect("worker panicked")?);
            }
            Ok(flat)
        })?
    };
    flat.sort_by_key(|(idx, _, _)| *idx);
    Ok(flat.into_iter().map(|(_, s, secs)| (s, secs)).collect())
}

/// Aggregate per-scene samples into an evaluation report.
fn aggregate_report(
    scenes: &[Scene],
    results: &[(SceneSample, f64)],
    horizons: &[usize],
) -> Result<EvalReport> {
    let mut acc: BTreeMap<usize, HorizonMetrics> = horizons
        .iter()
        .map(|&h| {
            (
                h,
                HorizonMetrics {
                    min_ade: 0.0,
                    min_fde: 0.0,
                    jade: 0.0,
                    jfde: 0.0,
                },
            )
        })
        .collect();
    let mut wallclock = 0.0;
    let mut nfe = 0u64;
    for (scene, (sample, secs)) in scenes.iter().zip(results) {
        let gt = scene.future_tensor();
        for (&h, m) in acc.iter_mut() {
            m.min_ade += metrics::min_ade(&sample.predictions, &gt, h)?;
            m.min_fde += metrics::min_fde(&sample.predictions, &gt, h)?;
            let (jade, jfde) = metrics::joint_ade_fde(&sample.predictions, &gt, h)?;
            m.jade += jade;
            m.jfde += jfde;
        }
        wallclock += secs;
        nfe += sample.nfe;
    }
    let n = scenes.len() as f64;
    for m in acc.values_mut() {
        m.min_ade /= n;
        m.min_fde /= n;
        m.jade /= n;
        m.jfde /= n;
    }
    let report = EvalReport {
        n_scenes: scenes.len(),
        horizons: acc,
        mean_wallclock_s: wallclock / n,
        mean_nfe: nfe as f64 / n,
    };
    report.validate()?;
    Ok(report)
}

fn write_report(report: &EvalReport, dt: f64, paths: &RunPaths) -> Result<()> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(paths.report_json(), json)?;
    let table = metrics::render_table(report, dt);
    std::fs::write(paths.report_txt(), &table)?;
    print!("{table}");
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Model, checkpoint::CheckpointMeta)> {
    checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

/// ODE-sample a split with the teacher; write the sample dump and a report.
pub fn cmd_sample(cfg: &RunConfig, split: &str, workers: usize) -> Result<()> {
    let paths = RunPaths::new(cfg.run_dir());
    crate::config::persist_config(cfg, &paths)?;
    let dataset = load_dataset(cfg)?;
    let scenes = dataset.load_split(split)?;
    let (model, meta) = load_checkpoint(&paths.teacher_ckpt())?;
    if meta.kind != ModelKind::Teacher {
        bail!("sample drives the ODE and needs a teacher checkpoint");
    }
    check_architecture(&meta.network, &model.dims, cfg, &dataset.manifest)?;

    let normalizer = meta.normalizer;
    let ode = cfg.sampler.clone();
    let k = cfg.network.k;
    let seed = cfg.seed;
    let label = format!("sample/{split}");
    let results = run_split(&scenes, workers, &|| {
        let model = clone_model(&model);
        let ode = ode.clone();
        let label = label.clone();
        Box::new(move |scene: &Scene, idx: u64| {
            let mut rng = indexed_rng(seed, &label, idx);
            sample_scene(&model, scene, &normalizer, &ode, k, &mut rng)
        })
    })?;

    let records: Vec<SampleRecord> = results
        .iter()
        .map(|(s, _)| SampleRecord::from_sample(s))
        .collect();
    write_samples(&paths.samples(), &records)?;
    let report = aggregate_report(&scenes, &results, &cfg.horizons)?;
    write_report(&report, dataset.manifest.dt, &paths)?;
    println!(
        "sampled {} scenes from `{split}` -> {}",
        scenes.len(),
        paths.samples().display()
    );
    Ok(())
}

/// Distill the one-step student from cached teacher samples.
pub fn cmd_distill(cfg: &RunConfig) -> Result<()> {
    let paths = RunPaths::new(cfg.run_dir());
    crate::config::persist_config(cfg, &paths)?;
    let dataset = load_dataset(cfg)?;
    let scenes = dataset.load_split("train")?;
    let dims = dims_of(&dataset.manifest);
    let normalizer = dataset.manifest.normalizer;

    let mut student_cfg = cfg.student.clone();
    if student_cfg.teacher_samples.as_os_str().is_empty() {
        student_cfg.teacher_samples = paths.samples();
    }
    let samples = flowcast_core::sampler::read_samples(&student_cfg.teacher_samples)
        .with_context(|| {
            format!(
                "cannot read teacher samples {} (run sample first or set `student.teacher_samples`)",
                student_cfg.teacher_samples.display()
            )
        })?;

    let mut init_rng = subsystem_rng(cfg.seed, "student/init");
    let mut model = Model::new(ModelKind::Student, cfg.network.clone(), dims, &mut init_rng)?;
    let items = prepare_distill_items(&model, &scenes, &samples, &normalizer)?;

    let log = File::create(paths.distill_log())?;
    let mut log = BufWriter::new(log);
    let records = distill_student(
        &mut model,
        &items,
        &student_cfg,
        cfg.train.batch_size,
        |_, record| {
            writeln!(log, "{}", serde_json::to_string(record)?)?;
            log.flush()?;
            Ok(())
        },
    )?;
    checkpoint::save(&paths.student_ckpt(), &model, &normalizer, &cfg.hash())?;

    let last = records.last().expect("at least one record");
    println!(
        "distilled {} steps from {} cached scenes; final chamfer {:.6}",
        student_cfg.max_steps,
        items.len(),
        last.loss
    );
    println!("checkpoint: {}", paths.student_ckpt().display());
    Ok(())
}

/// Evaluate a checkpoint on a split: ODE sampling for a teacher, a single
/// forward for a student.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint_path: Option<&Path>,
    split: &str,
    workers: usize,
) -> Result<()> {
    let paths = RunPaths::new(cfg.run_dir());
    crate::config::persist_config(cfg, &paths)?;
    let dataset = load_dataset(cfg)?;
    let scenes = dataset.load_split(split)?;
    let default_path = paths.teacher_ckpt();
    let ckpt_path = checkpoint_path.unwrap_or(&default_path);
    let (model, meta) = load_checkpoint(ckpt_path)?;
    check_architecture(&meta.network, &model.dims, cfg, &dataset.manifest)?;

    let normalizer = meta.normalizer;
    let kind = meta.kind;
    let ode = cfg.sampler.clone();
    let k = cfg.network.k;
    let seed = cfg.seed;
    let label = format!("eval/{split}");
    let results = run_split(&scenes, workers, &|| {
        let model = clone_model(&model);
        let ode = ode.clone();
        let label = label.clone();
        Box::new(move |scene: &Scene, idx: u64| {
            let mut rng = indexed_rng(seed, &label, idx);
            match kind {
                ModelKind::Teacher => sample_scene(&model, scene, &normalizer, &ode, k, &mut rng),
                ModelKind::Student => student_sample(&model, scene, &normalizer, k, &mut rng),
            }
        })
    })?;

    let report = aggregate_report(&scenes, &results, &cfg.horizons)?;
    write_report(&report, dataset.manifest.dt, &paths)?;
    println!(
        "evaluated {:?} checkpoint on `{split}` ({} scenes, mean NFE {})",
        kind,
        scenes.len(),
        report.mean_nfe
    );
    Ok(())
}

/// Render SVG overlays for chosen scenes from the sample dump.
pub fn cmd_plot(cfg: &RunConfig, scene_ids: &[String], split: &str) -> Result<()> {
    let paths = RunPaths::new(cfg.run_dir());
    let dataset = load_dataset(cfg)?;
    let scenes = dataset.load_split(split)?;
    let records = flowcast_core::sampler::read_samples(&paths.samples())
        .with_context(|| format!("cannot read {} (run sample first)", paths.samples().display()))?;

    let by_id: BTreeMap<&str, &Scene> = scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let chosen: Vec<&SampleRecord> = if scene_ids.is_empty() {
        records.iter().take(4).collect()
    } else {
        scene_ids
            .iter()
            .map(|id| {
                records
                    .iter()
                    .find(|r| &r.scene_id == id)
                    .ok_or_else(|| anyhow!("scene `{id}` is not in the sample dump"))
            })
            .collect::<Result<_>>()?
    };
    if chosen.is_empty() {
        bail!("sample dump is empty; nothing to plot");
    }

    std::fs::create_dir_all(paths.plots())?;
    let mut out_paths = Vec::new();
    for record in chosen {
        let scene = by_id
            .get(record.scene_id.as_str())
            .ok_or_else(|| anyhow!("scene `{}` is not in split `{split}`", record.scene_id))?;
        let svg = render_scene(scene, record)?;
        let path = paths.plots().join(format!("{}.svg", record.scene_id));
        std::fs::write(&path, svg)?;
        out_paths.push(path);
    }
    println!("wrote {} plots to {}", out_paths.len(), paths.plots().display());
    Ok(())
}
