//! End-to-end smoke test over the public API: generate data, train a small
//! teacher, checkpoint it, sample with the ODE, distill a one-step student
//! from the cached samples, and evaluate both.

use std::collections::BTreeMap;

use flowcast_core::checkpoint;
use flowcast_core::dataio::{
    fit_normalizer, generate_synthetic, save_manifest, write_scenes, Dataset, DatasetManifest,
    SyntheticConfig, SYNTHETIC_AGENT_TYPE,
};
use flowcast_core::metrics::evaluate;
use flowcast_core::network::{Model, ModelDims, ModelKind, NetworkConfig};
use flowcast_core::rng::subsystem_rng;
use flowcast_core::sampler::{read_samples, sample_scene, write_samples, SampleRecord, SamplerConfig};
use flowcast_core::student::{distill_student, prepare_distill_items, student_sample, DistillConfig};
use flowcast_core::teacher::{prepare_items, train_teacher, TrainConfig};

#[test]
fn full_pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // Generate and persist a small dataset, then reload it through the
    // manifest the way the command-line tools do.
    let syn = SyntheticConfig {
        agents: 1,
        t_p: 4,
        t_f: 3,
        n_train: 24,
        n_val: 6,
        n_test: 0,
        seed: Some(401),
        ..SyntheticConfig::default()
    };
    let train = generate_synthetic(&syn, "train", syn.n_train).unwrap();
    let val = generate_synthetic(&syn, "val", syn.n_val).unwrap();
    write_scenes(dir.join("train.jsonl"), &train).unwrap();
    write_scenes(dir.join("val.jsonl"), &val).unwrap();
    let normalizer = fit_normalizer(&train).unwrap();
    let manifest = DatasetManifest {
        name: "smoke".into(),
        t_p: syn.t_p,
        t_f: syn.t_f,
        dt: syn.dt,
        agent_types: vec![SYNTHETIC_AGENT_TYPE.into()],
        splits: BTreeMap::from([
            ("train".into(), "train.jsonl".into()),
            ("val".into(), "val.jsonl".into()),
        ]),
        counts: BTreeMap::from([("train".into(), 24), ("val".into(), 6)]),
        normalizer,
    };
    save_manifest(&manifest, dir.join("manifest.json")).unwrap();

    let dataset = Dataset::load(dir.join("manifest.json")).unwrap();
    let train = dataset.load_split("train").unwrap();
    let val = dataset.load_split("val").unwrap();
    assert_eq!(train.len(), 24);
    assert_eq!(val.len(), 6);

    // Train a small teacher.
    let net = NetworkConfig {
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_blocks: 1,
        dropout: 0.0,
        k: 2,
        ..NetworkConfig::default()
    };
    let dims = ModelDims {
        t_p: syn.t_p,
        t_f: syn.t_f,
        agent_types: dataset.manifest.agent_types.clone(),
    };
    let mut init_rng = subsystem_rng(402, "teacher/init");
    let mut teacher = Model::new(ModelKind::Teacher, net.clone(), dims.clone(), &mut init_rng).unwrap();
    let items = prepare_items(&teacher, &train, &normalizer).unwrap();
    let train_cfg = TrainConfig {
        batch_size: 8,
        learning_rate: 1e-3,
        max_steps: 60,
        seed: Some(403),
        mask_enabled: true,
        log_every: 10,
        ..TrainConfig::default()
    };
    let records = train_teacher(&mut teacher, &items, &train_cfg, |_, _| Ok(())).unwrap();
    assert!(records.iter().all(|r| r.loss.is_finite()));
    assert!(records.last().unwrap().loss < records.first().unwrap().loss);

    // Checkpoint round trip; the reloaded model must sample identically.
    let ckpt = dir.join("teacher.ckpt");
    checkpoint::save(&ckpt, &teacher, &normalizer, "cafef00d").unwrap();
    let (reloaded, meta) = checkpoint::load(&ckpt).unwrap();
    assert_eq!(meta.kind, ModelKind::Teacher);
    assert_eq!(meta.config_hash, "cafef00d");

    let ode = SamplerConfig {
        t_steps: 8,
        ..SamplerConfig::default()
    };
    let mut srng = subsystem_rng(404, "sample/0");
    let direct = sample_scene(&teacher, &val[0], &normalizer, &ode, net.k, &mut srng).unwrap();
    let mut srng = subsystem_rng(404, "sample/0");
    let from_ckpt = sample_scene(&reloaded, &val[0], &normalizer, &ode, net.k, &mut srng).unwrap();
    assert_eq!(direct.predictions, from_ckpt.predictions);
    assert_eq!(direct.nfe, 8);

    // Dump teacher samples for the training split and read them back.
    let cache: Vec<SampleRecord> = train
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut rng = subsystem_rng(405, &format!("sample/{i}"));
            let s = sample_scene(&teacher, scene, &normalizer, &ode, net.k, &mut rng).unwrap();
            SampleRecord::from_sample(&s)
        })
        .collect();
    let dump = dir.join("samples.jsonl");
    write_samples(&dump, &cache).unwrap();
    let cache = read_samples(&dump).unwrap();
    assert_eq!(cache.len(), 24);

    // Distill a one-step student from the cached samples.
    let mut init_rng = subsystem_rng(406, "student/init");
    let mut student = Model::new(ModelKind::Student, net.clone(), dims, &mut init_rng).unwrap();
    let distill_items = prepare_distill_items(&student, &train, &cache, &normalizer).unwrap();
    let distill_cfg = DistillConfig {
        m: 3,
        learning_rate: 1e-3,
        max_steps: 40,
        seed: Some(407),
        teacher_samples: dump.clone(),
        log_every: 10,
    };
    let dlog = distill_student(&mut student, &distill_items, &distill_cfg, 8, |_, _| Ok(())).unwrap();
    assert!(dlog.iter().all(|r| r.loss.is_finite()));

    // Evaluate both models on the val split; the teacher spends exactly
    // T network evaluations per sample, the student exactly one.
    let horizons = [1usize, 3];
    let teacher_report = evaluate(&val, &horizons, |scene| {
        let mut rng = subsystem_rng(408, &format!("eval/{}", scene.scene_id));
        let s = sample_scene(&teacher, scene, &normalizer, &ode, net.k, &mut rng)?;
        Ok((s.predictions, s.nfe))
    })
    .unwrap();
    let student_report = evaluate(&val, &horizons, |scene| {
        let mut rng = subsystem_rng(409, &format!("eval/{}", scene.scene_id));
        let s = student_sample(&student, scene, &normalizer, net.k, &mut rng)?;
        Ok((s.predictions, s.nfe))
    })
    .unwrap();

    assert_eq!(teacher_report.mean_nfe, 8.0);
    assert_eq!(student_report.mean_nfe, 1.0);
    assert_eq!(teacher_report.n_scenes, 6);
    teacher_report.validate().unwrap();
    student_report.validate().unwrap();
    for report in [&teacher_report, &student_report] {
        for m in report.horizons.values() {
            assert!(m.jade >= m.min_ade - 1e-12);
            assert!(m.jfde >= m.min_fde - 1e-12);
        }
    }
}
