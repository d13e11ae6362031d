//! Run configuration: one strict JSON document covering every subsystem,
//! dotted command-line overrides, seed resolution, and the artifact layout
//! of a run directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use flowcast_core::dataio::SyntheticConfig;
use flowcast_core::network::NetworkConfig;
use flowcast_core::rng::derive_seed;
use flowcast_core::sampler::SamplerConfig;
use flowcast_core::student::DistillConfig;
use flowcast_core::teacher::TrainConfig;

/// Environment variable overriding the output directory.
pub const OUT_ENV: &str = "FLOWCAST_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    /// Root seed; every subsystem seed is derived from it unless set
    /// explicitly.
    pub seed: u64,
    /// Output directory; `FLOWCAST_OUT` overrides, default `runs`.
    pub out_dir: Option<PathBuf>,
    /// Dataset manifest; default is the run directory's own manifest.json.
    pub dataset: Option<PathBuf>,
    /// Evaluation horizons in future frames.
    pub horizons: Vec<usize>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub student: DistillConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_name: "run".into(),
            seed: 0,
            out_dir: None,
            dataset: None,
            horizons: vec![5, 10, 15, 20],
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            student: DistillConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl RunConfig {
    /// Fill in every subsystem seed that was left unset, deriving it from
    /// the root seed. The result is what gets persisted, so reruns see the
    /// same effective seeds whether or not they were spelled out.
    pub fn resolve_seeds(&mut self) {
        if self.synthetic.seed.is_none() {
            self.synthetic.seed = Some(derive_seed(self.seed, "synthetic"));
        }
        if self.train.seed.is_none() {
            self.train.seed = Some(derive_seed(self.seed, "teacher"));
        }
        if self.student.seed.is_none() {
            self.student.seed = Some(derive_seed(self.seed, "student"));
        }
    }

    /// Validate every subsystem and report all violations together.
    pub fn validate(&self) -> anyhow::Result<()> {
        let mut problems = Vec::new();
        let mut push = |section: &str, r: flowcast_core::Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{section}: {e}"));
            }
        };
        push("network", self.network.validate());
        push("train", self.train.validate());
        push("sampler", self.sampler.validate());
        push("student", self.student.validate());
        push("synthetic", self.synthetic.validate());
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            problems.push("run_name: must be a nonempty path-free name".into());
        }
        if self.horizons.is_empty() {
            problems.push("horizons: need at least one horizon".into());
        }
        if self.horizons.iter().any(|&h| h == 0) {
            problems.push("horizons: frames must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            bail!("invalid configuration:\n  {}", problems.join("\n  "))
        }
    }

    /// Stable fingerprint of the resolved configuration, embedded in
    /// checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", derive_seed(0, &json))
    }

    /// Output root: environment override, then config, then `runs`.
    pub fn out_root(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs")),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_root().join(&self.run_name)
    }

    /// Manifest path: explicit `dataset` or the run's own manifest.
    pub fn manifest_path(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.run_dir().join("manifest.json"))
    }
}

/// Fixed artifact names inside a run directory.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: PathBuf) -> Self {
        RunPaths { dir }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
    pub fn teacher_ckpt(&self) -> PathBuf {
        self.dir.join("teacher.ckpt")
    }
    pub fn student_ckpt(&self) -> PathBuf {
        self.dir.join("student.ckpt")
    }
    pub fn samples(&self) -> PathBuf {
        self.dir.join("samples.jsonl")
    }
    pub fn report_json(&self) -> PathBuf {
        self.dir.join("report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.dir.join("report.txt")
    }
    pub fn train_log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
    pub fn distill_log(&self) -> PathBuf {
        self.dir.join("distill_log.jsonl")
    }
    pub fn plots(&self) -> PathBuf {
        self.dir.join("plots")
    }
}

/// Apply one `key.path=value` override to a JSON tree. Values parse as
/// JSON when possible and fall back to strings, so `--set sampler.T=50`
/// and `--set run_name=demo` both work.
fn apply_override(tree: &mut serde_json::Value, spec: &str) -> anyhow::Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not of the form key.path=value"))?;
    if path.is_empty() {
        bail!("override `{spec}` has an empty key path");
    }
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));

    let mut cursor = tree;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            bail!("override `{spec}` has an empty path segment");
        }
        let obj = cursor
            .as_object_mut()
            .with_context(|| format!("`{}` is not a config section", segments[..i].join(".")))?;
        if i + 1 == segments.len() {
            obj.insert((*seg).to_string(), value);
            return Ok(());
        }
        cursor = obj
            .entry((*seg).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}

/// Load, override, resolve, and validate a run configuration.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let mut tree: serde_json::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("config {} is not valid JSON", p.display()))?
        }
        None => serde_json::Value::Object(Default::default()),
    };
    if !tree.is_object() {
        bail!("config root must be a JSON object");
    }
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    let mut cfg: RunConfig =
        serde_json::from_value(tree).context("config does not match the expected schema")?;
    cfg.resolve_seeds();
    cfg.validate()?;
    Ok(cfg)
}

/// Write the resolved config into the run directory.
pub fn persist_config(cfg: &RunConfig, paths: &RunPaths) -> anyhow::Result<()> {
    std::fs::create_dir_all(&paths.dir)
        .with_context(|| format!("cannot create run dir {}", paths.dir.display()))?;
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    std::fs::write(paths.config(), text)?;
    Ok(())
}
