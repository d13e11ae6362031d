//! Scene serialization, dataset manifests, and the synthetic scene generator.
//!
//! Scene files are JSON Lines, one scene per line:
//!
//! ```json
//! {"scene_id": "train-00000", "dt": 0.2, "agents": [{"id": "a0", "type": "agent",
//!  "past": [[x, y], ...], "future": [[x, y], ...]}]}
//! ```
//!
//! Coordinates are serialized with shortest-round-trip precision, so a
//! write/read cycle reproduces every `f64` bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::Normalizer;
use crate::rng::indexed_rng;
use crate::scene::{AgentRecord, Scene};

// ---------------------------------------------------------------------------
// Scene files
// ---------------------------------------------------------------------------

/// Streaming reader over a JSON-lines scene file. Yields scenes in file
/// order; every error names the 1-based line it came from.
pub struct SceneReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

impl SceneReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path)
            .map_err(|e| Error::data(&path, 0, format!("cannot open scene file: {e}")))?;
        Ok(SceneReader {
            path,
            lines: BufReader::new(file).lines(),
            line_no: 0,
        })
    }
}

impl Iterator for SceneReader {
    type Item = Result<Scene>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::data(&self.path, self.line_no + 1, e.to_string()))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let scene: Scene = match serde_json::from_str(&line) {
                Ok(s) => s,
                Err(e) => {
                    return Some(Err(Error::data(
                        &self.path,
                        self.line_no,
                        format!("malformed scene JSON: {e}"),
                    )))
                }
            };
            if let Err(e) = scene.validate() {
                return Some(Err(Error::data(&self.path, self.line_no, e.to_string())));
            }
            return Some(Ok(scene));
        }
    }
}

/// Read and validate every scene in a file.
pub fn read_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    SceneReader::open(path)?.collect()
}

/// Write scenes as JSON lines.
pub fn write_scenes(path: impl AsRef<Path>, scenes: &[Scene]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    for scene in scenes {
        serde_json::to_writer(&mut w, scene)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Dataset descriptor: window geometry, the agent-type registry, split file
/// paths (relative to the manifest's directory), per-split scene counts, and
/// the normalizer fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub t_p: usize,
    pub t_f: usize,
    pub dt: f64,
    pub agent_types: Vec<String>,
    pub splits: BTreeMap<String, String>,
    pub counts: BTreeMap<String, usize>,
    pub normalizer: Normalizer,
}

/// A manifest bound to its location on disk, so split paths resolve.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub dir: PathBuf,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let file = File::open(manifest_path)
            .map_err(|e| Error::data(manifest_path, 0, format!("cannot open manifest: {e}")))?;
        let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::data(manifest_path, 0, format!("malformed manifest: {e}")))?;
        let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(Dataset { manifest, dir })
    }

    pub fn split_path(&self, split: &str) -> Result<PathBuf> {
        let rel = self
            .manifest
            .splits
            .get(split)
            .ok_or_else(|| Error::Config(format!("manifest has no `{split}` split")))?;
        Ok(self.dir.join(rel))
    }

    /// Read one split and check every scene against the manifest's window
    /// geometry and agent-type registry.
    pub fn load_split(&self, split: &str) -> Result<Vec<Scene>> {
        let path = self.split_path(split)?;
        let m = &self.manifest;
        let mut scenes = Vec::new();
        for (idx, scene) in SceneReader::open(&path)?.enumerate() {
            let scene = scene?;
            let line = idx + 1;
            if scene.t_p() != m.t_p || scene.t_f() != m.t_f {
                return Err(Error::data(
                    &path,
                    line,
                    format!(
                        "scene window [{}, {}] does not match manifest [{}, {}]",
                        scene.t_p(),
                        scene.t_f(),
                        m.t_p,
                        m.t_f
                    ),
                ));
            }
            for agent in &scene.agents {
                if !m.agent_types.contains(&agent.agent_type) {
                    return Err(Error::data(
                        &path,
                        line,
                        Error::UnknownAgentType(agent.agent_type.clone()).to_string(),
                    ));
                }
            }
            scenes.push(scene);
        }
        if let Some(&expected) = m.counts.get(split) {
            if scenes.len() != expected {
                return Err(Error::data(
                    &path,
                    0,
                    format!("split `{split}` has {} scenes, manifest says {expected}", scenes.len()),
                ));
            }
        }
        Ok(scenes)
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Per-axis displacement extrema over a training split.
pub fn fit_normalizer(scenes: &[Scene]) -> Result<Normalizer> {
    Normalizer::fit(scenes)
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Generator settings for synthetic multi-modal scenes.
///
/// Each agent walks a straight past at `speed`. Its future either continues
/// that line exactly (probability `1 - mode_switch_prob`) or heads toward
/// one of `goals` goal points drawn uniformly. Goals sit on a circle of
/// radius `goal_separation / 2` around the constant-velocity continuation
/// point, so the past never reveals which mode the future takes: that
/// ambiguity is what K-hypothesis training has to capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Agents per scene.
    pub agents: usize,
    /// Candidate goals per agent (G).
    pub goals: usize,
    /// Distance scale between goals.
    pub goal_separation: f64,
    /// Nominal walking speed (units per second).
    pub speed: f64,
    /// Std of i.i.d. positional jitter added to every recorded frame.
    pub noise_sigma: f64,
    /// Probability that an agent heads for a sampled goal instead of
    /// continuing straight.
    pub mode_switch_prob: f64,
    pub t_p: usize,
    pub t_f: usize,
    pub dt: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Resolved by the CLI from the root seed when absent.
    pub seed: Option<u64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            agents: 2,
            goals: 2,
            goal_separation: 10.0,
            speed: 2.0,
            noise_sigma: 0.1,
            mode_switch_prob: 1.0,
            t_p: 10,
            t_f: 20,
            dt: 0.2,
            n_train: 5000,
            n_val: 500,
            n_test: 500,
            seed: None,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.agents == 0 {
            problems.push("agents must be >= 1");
        }
        if self.goals == 0 {
            problems.push("goals must be >= 1");
        }
        if !(self.goal_separation > 0.0) {
            problems.push("goal_separation must be > 0");
        }
        if !(self.speed > 0.0) {
            problems.push("speed must be > 0");
        }
        if !(self.noise_sigma >= 0.0) {
            problems.push("noise_sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.mode_switch_prob) {
            problems.push("mode_switch_prob must lie in [0, 1]");
        }
        if self.t_p < 2 {
            problems.push("t_p must be >= 2 (velocity features need a predecessor frame)");
        }
        if self.t_f == 0 {
            problems.push("t_f must be >= 1");
        }
        if !(self.dt > 0.0) {
            problems.push("dt must be > 0");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("synthetic seed not resolved; set `synthetic.seed`".into()))
    }
}

/// The agent type emitted by the generator.
pub const SYNTHETIC_AGENT_TYPE: &str = "agent";

/// Generate `n` scenes for a named split. Deterministic in
/// `(config, split, n)`: each scene draws from its own generator seeded by
/// `(seed, split, scene index)`, so prefixes agree across different `n`.
pub fn generate_synthetic(cfg: &SyntheticConfig, split: &str, n: usize) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    let label = format!("synthetic/{split}");
    (0..n)
        .map(|i| {
            let mut rng = indexed_rng(seed, &label, i as u64);
            let agents = (0..cfg.agents)
                .map(|a| synth_agent(cfg, a, &mut rng))
                .collect();
            Scene::new(format!("{split}-{i:05}"), cfg.dt, agents)
        })
        .collect()
}

fn synth_agent(cfg: &SyntheticConfig, index: usize, rng: &mut rand_chacha::ChaCha8Rng) -> AgentRecord {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    let heading = rng.random::<f64>() * std::f64::consts::TAU;
    let start = [rng.random::<f64>() * 20.0 - 10.0, rng.random::<f64>() * 20.0 - 10.0];
    let dir = [heading.cos(), heading.sin()];
    let step = cfg.speed * cfg.dt;

    let clean_past: Vec<[f64; 2]> = (0..cfg.t_p)
        .map(|j| {
            let d = step * j as f64;
            [start[0] + d * dir[0], start[1] + d * dir[1]]
        })
        .collect();
    let anchor = clean_past[cfg.t_p - 1];

    // Goal ring around the constant-velocity continuation point.
    let reach = step * cfg.t_f as f64;
    let center = [anchor[0] + reach * dir[0], anchor[1] + reach * dir[1]];
    let radius = cfg.goal_separation / 2.0;

    let switches = rng.random::<f64>() < cfg.mode_switch_prob;
    let goal = if switches {
        let g = rng.random_range(0..cfg.goals) as f64;
        let phi = heading + std::f64::consts::PI * (2.0 * g - (cfg.goals as f64 - 1.0)) / cfg.goals as f64;
        Some([center[0] + radius * phi.cos(), center[1] + radius * phi.sin()])
    } else {
        None
    };

    let clean_future: Vec<[f64; 2]> = match goal {
        None => (1..=cfg.t_f)
            .map(|j| {
                let d = step * j as f64;
                [anchor[0] + d * dir[0], anchor[1] + d * dir[1]]
            })
            .collect(),
        Some(goal) => {
            let mut pos = anchor;
            (0..cfg.t_f)
                .map(|_| {
                    let to_goal = [goal[0] - pos[0], goal[1] - pos[1]];
                    let dist = (to_goal[0] * to_goal[0] + to_goal[1] * to_goal[1]).sqrt();
                    if dist > 1e-12 {
                        let s = step.min(dist);
                        pos = [pos[0] + s * to_goal[0] / dist, pos[1] + s * to_goal[1] / dist];
                    }
                    pos
                })
                .collect()
        }
    };

    let jitter = |points: &[[f64; 2]], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<[f64; 2]> {
        if cfg.noise_sigma == 0.0 {
            return points.to_vec();
        }
        points
            .iter()
            .map(|p| {
                let nx: f64 = StandardNormal.sample(rng);
                let ny: f64 = StandardNormal.sample(rng);
                [p[0] + cfg.noise_sigma * nx, p[1] + cfg.noise_sigma * ny]
            })
            .collect()
    };

    AgentRecord {
        agent_id: format!("a{index}"),
        agent_type: SYNTHETIC_AGENT_TYPE.into(),
        past: jitter(&clean_past, rng),
        future: jitter(&clean_future, rng),
    }
}
