//! Denoising-ODE sampling.
//!
//! Integrates the clean-data parameterization with explicit Euler steps on
//! a step grid that is linear early and polynomial late. The final step is
//! returned symbolically (the update at step size `1 - t` lands exactly on
//! the predicted clean data), so no `1/(1-t)` blow-up can reach an output.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array3, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::build_context;
use crate::error::{Error, Result};
use crate::flow::{softmax, tied_noise, FlowState, PredictionSet};
use crate::network::Model;
use crate::norm::Normalizer;
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Number of Euler steps.
    #[serde(rename = "T")]
    pub t_steps: usize,
    /// Exponent of the late-phase step grid.
    pub p: u32,
    /// Replace the early linear phase so the grid is continuous at the
    /// phase switch (the printed grid jumps there; off by default).
    pub continuous_time_map: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            t_steps: 100,
            p: 5,
            continuous_time_map: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.t_steps < 1 {
            problems.push("T must be >= 1".to_string());
        }
        if self.t_steps > 500 {
            problems.push(format!(
                "T must be <= 500 so the late-phase coefficient stays nonnegative (got {})",
                self.t_steps
            ));
        }
        if self.p < 1 {
            problems.push("p must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Flow time of integration step `n` for `0 <= n <= T`.
///
/// `tau(0) = 0` and `tau(T) = 1` exactly. The default grid is `n/1000` up to
/// the midpoint, then `T/500 + (1 - T/500) * (n - T/2)^p / (T/2)^p`.
pub fn time_map(n: usize, cfg: &SamplerConfig) -> Result<f64> {
    cfg.validate()?;
    let t = cfg.t_steps;
    if n > t {
        return Err(Error::Config(format!("time_map step {n} out of range 0..={t}")));
    }
    if n == 0 {
        return Ok(0.0);
    }
    if n == t {
        return Ok(1.0);
    }
    let half = t as f64 / 2.0;
    let a = t as f64 / 500.0;
    if (n as f64) <= half {
        if cfg.continuous_time_map {
            Ok(a * (n as f64 / half))
        } else {
            Ok(n as f64 / 1000.0)
        }
    } else {
        Ok(a + (1.0 - a) * (n as f64 - half).powi(cfg.p as i32) / half.powi(cfg.p as i32))
    }
}

/// The per-hypothesis velocity recovered from a clean-data prediction.
pub fn kshot_vector_field(s: &Array3<f64>, y_t: &Array3<f64>, t: f64) -> Result<Array3<f64>> {
    if s.shape() != y_t.shape() {
        return Err(Error::shape(
            "vector field operands",
            format!("{:?}", y_t.shape()),
            format!("{:?}", s.shape()),
        ));
    }
    if !(t < 1.0) {
        return Err(Error::Config(format!("vector field needs t < 1, got {t}")));
    }
    Ok((s - y_t) / (1.0 - t))
}

/// Result of one ODE integration.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeOutcome {
    /// Final clean-data state, `[K, A, 2*t_f]`, still normalized.
    pub state: Array3<f64>,
    /// Confidence logits from the final prediction.
    pub logits: Array1<f64>,
}

/// Euler-integrate from `y0` using any clean-data predictor. The predictor
/// sees the current state and flow time; its waypoints drive the field.
pub fn solve_ode<F>(y0: Array3<f64>, cfg: &SamplerConfig, mut predict: F) -> Result<OdeOutcome>
where
    F: FnMut(&Array3<f64>, f64) -> Result<PredictionSet>,
{
    cfg.validate()?;
    let t_steps = cfg.t_steps;
    let mut y = y0;
    let mut logits = None;
    for n in 0..t_steps {
        let t_n = time_map(n, cfg)?;
        let t_next = time_map(n + 1, cfg)?;
        let pred = predict(&y, t_n)?;
        if pred.waypoints.shape() != y.shape() {
            return Err(Error::Sampling {
                step: n,
                msg: format!(
                    "predictor produced shape {:?}, state is {:?}",
                    pred.waypoints.shape(),
                    y.shape()
                ),
            });
        }
        if n + 1 == t_steps {
            // Step size (1 - t_n) over field (S - y)/(1 - t_n): lands on S.
            y = pred.waypoints.clone();
        } else {
            let v = kshot_vector_field(&pred.waypoints, &y, t_n)?;
            y = &y + &(v * (t_next - t_n));
        }
        if !y.iter().all(|x| x.is_finite()) {
            return Err(Error::Sampling {
                step: n,
                msg: "state became non-finite".to_string(),
            });
        }
        logits = Some(pred.logits);
    }
    Ok(OdeOutcome {
        state: y,
        logits: logits.expect("at least one step"),
    })
}

/// One scene's sampled predictions in absolute coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene_id: String,
    /// `[K, A, t_f, 2]`, absolute map coordinates.
    pub predictions: Array4<f64>,
    pub probs: Vec<f64>,
    /// Network forward evaluations spent on this scene.
    pub nfe: u64,
}

/// Run the full teacher sampling pipeline for one scene.
pub fn sample_scene(
    model: &Model,
    scene: &Scene,
    normalizer: &Normalizer,
    cfg: &SamplerConfig,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SceneSample> {
    if k == 0 {
        return Err(Error::Config("sampling needs k >= 1".into()));
    }
    let ctx = build_context(scene)?;
    let type_ids = model.type_ids(scene)?;
    let y0 = tied_noise(k, scene.n_agents(), model.dims.t_f, rng);
    let before = model.nfe();
    let outcome = solve_ode(y0, cfg, |y, t| {
        let state = FlowState::new(y.clone(), t)?;
        model.forward_teacher(&state, &ctx, &type_ids)
    })?;
    let nfe = model.nfe() - before;
    let predictions = normalizer.denormalize_set(&outcome.state, scene)?;
    let probs = softmax(&outcome.logits).to_vec();
    Ok(SceneSample {
        scene_id: scene.scene_id.clone(),
        predictions,
        probs,
        nfe,
    })
}

// ---------------------------------------------------------------------------
// Sample dumps
// ---------------------------------------------------------------------------

/// JSON-lines record of one scene's predictions: `K x A x T_f x 2` nested
/// arrays in absolute coordinates, plus the length-K probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub scene_id: String,
    pub predictions: Vec<Vec<Vec<[f64; 2]>>>,
    pub probs: Vec<f64>,
}

impl SampleRecord {
    pub fn from_sample(sample: &SceneSample) -> Self {
        let (k, a, t_f) = (
            sample.predictions.shape()[0],
            sample.predictions.shape()[1],
            sample.predictions.shape()[2],
        );
        let predictions = (0..k)
            .map(|i| {
                (0..a)
                    .map(|j| {
                        (0..t_f)
                            .map(|t| [sample.predictions[[i, j, t, 0]], sample.predictions[[i, j, t, 1]]])
                            .collect()
                    })
                    .collect()
            })
            .collect();
        SampleRecord {
            scene_id: sample.scene_id.clone(),
            predictions,
            probs: sample.probs.clone(),
        }
    }

    /// Dense tensor view of the nested arrays; validates rectangularity.
    pub fn to_tensor(&self) -> Result<Array4<f64>> {
        let k = self.predictions.len();
        if k == 0 || self.probs.len() != k {
            return Err(Error::scene(
                &self.scene_id,
                format!("sample record needs K >= 1 and {k} probs, got {}", self.probs.len()),
            ));
        }
        let a = self.predictions[0].len();
        let t_f = self.predictions[0].first().map_or(0, |ag| ag.len());
        if a == 0 || t_f == 0 {
            return Err(Error::scene(&self.scene_id, "empty prediction component"));
        }
        let mut out = Array4::zeros((k, a, t_f, 2));
        for (i, comp) in self.predictions.iter().enumerate() {
            if comp.len() != a {
                return Err(Error::scene(&self.scene_id, "ragged agent axis in sample record"));
            }
            for (j, traj) in comp.iter().enumerate() {
                if traj.len() != t_f {
                    return Err(Error::scene(&self.scene_id, "ragged frame axis in sample record"));
                }
                for (t, xy) in traj.iter().enumerate() {
                    out[[i, j, t, 0]] = xy[0];
                    out[[i, j, t, 1]] = xy[1];
                }
            }
        }
        Ok(out)
    }
}

pub fn write_samples(path: &Path, samples: &[SampleRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::data(path, 0, e.to_string()))?);
    for record in samples {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<SampleRecord>> {
    let f = File::open(path).map_err(|e| Error::data(path, 0, e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::data(path, i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::data(path, i + 1, e.to_string()))?;
        record.to_tensor().map_err(|e| Error::data(path, i + 1, e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ModelDims, ModelKind, NetworkConfig};
    use crate::rng::subsystem_rng;
    use crate::scene::AgentRecord;
    use ndarray::arr1;
    use rand::Rng;

    fn cfg(t_steps: usize, p: u32) -> SamplerConfig {
        SamplerConfig {
            t_steps,
            p,
            continuous_time_map: false,
        }
    }

    #[test]
    fn time_map_reference_values() {
        let c = cfg(100, 5);
        assert_eq!(time_map(0, &c).unwrap(), 0.0);
        assert_eq!(time_map(100, &c).unwrap(), 1.0);
        assert!((time_map(75, &c).unwrap() - 0.225).abs() <= 1e-12);
        assert_eq!(time_map(50, &c).unwrap(), 0.05);
        assert_eq!(time_map(10, &c).unwrap(), 0.01);
    }

    #[test]
    fn time_map_is_monotone_for_valid_settings() {
        for &t in &[10usize, 100, 500] {
            for &p in &[1u32, 5] {
                let c = cfg(t, p);
                let taus: Vec<f64> = (0..=t).map(|n| time_map(n, &c).unwrap()).collect();
                for w in taus.windows(2) {
                    assert!(w[1] >= w[0], "T={t} p={p}: {} -> {}", w[0], w[1]);
                }
                assert_eq!(taus[0], 0.0);
                assert_eq!(taus[t], 1.0);
            }
        }
    }

    #[test]
    fn time_map_has_the_printed_midpoint_jump() {
        let c = cfg(100, 5);
        let before = time_map(50, &c).unwrap();
        let after = time_map(51, &c).unwrap();
        assert_eq!(before, 0.05);
        assert!((after - (0.2 + 0.8 * (1.0f64 / 50.0).powi(5))).abs() < 1e-15);
        assert!(after - before > 0.14, "expected the documented jump");
    }

    #[test]
    fn continuous_variant_closes_the_jump() {
        let c = SamplerConfig {
            t_steps: 100,
            p: 5,
            continuous_time_map: true,
        };
        let taus: Vec<f64> = (0..=100).map(|n| time_map(n, &c).unwrap()).collect();
        assert_eq!(taus[0], 0.0);
        assert_eq!(taus[100], 1.0);
        for w in taus.windows(2) {
            assert!(w[1] >= w[0]);
            assert!(w[1] - w[0] < 0.09, "no step may jump: {} -> {}", w[0], w[1]);
        }
        // Midpoint meets the start of the late phase.
        assert!((taus[50] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn time_map_rejects_bad_inputs() {
        assert!(time_map(101, &cfg(100, 5)).is_err());
        assert!(cfg(501, 5).validate().is_err());
        assert!(cfg(0, 5).validate().is_err());
        assert!(cfg(100, 0).validate().is_err());
    }

    #[test]
    fn vector_field_reference_cases() {
        let mut rng = subsystem_rng(41, "field");
        let y0 = Array3::from_shape_simple_fn((2, 1, 4), || rng.random::<f64>());
        let y1 = Array3::from_shape_simple_fn((2, 1, 4), || rng.random::<f64>());
        let t = 0.37;
        let y_t = &y0 * (1.0 - t) + &y1 * t;

        // Fixed point: zero field.
        let zero = kshot_vector_field(&y_t, &y_t, t).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        // Exact interpolant with clean-data prediction: v = y1 - y0.
        let v = kshot_vector_field(&y1, &y_t, t).unwrap();
        let expect = &y1 - &y0;
        for (a, b) in v.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Linearity in (S - y_t).
        let s2 = &y_t + &((&y1 - &y_t) * 2.0);
        let v2 = kshot_vector_field(&s2, &y_t, t).unwrap();
        let vref = kshot_vector_field(&y1, &y_t, t).unwrap();
        for (a, b) in v2.iter().zip(vref.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }

        assert!(kshot_vector_field(&y1, &y_t, 1.0).is_err());
    }

    #[test]
    fn oracle_predictor_recovers_target_exactly() {
        let mut rng = subsystem_rng(42, "oracle");
        let y1 = Array3::from_shape_simple_fn((3, 2, 6), || rng.random::<f64>() * 8.0 - 4.0);
        for &t_steps in &[1usize, 10, 100] {
            for &p in &[1u32, 5] {
                let y0 = Array3::from_shape_simple_fn((3, 2, 6), || rng.random::<f64>() * 2.0 - 1.0);
                let outcome = solve_ode(y0, &cfg(t_steps, p), |_, _| {
                    PredictionSet::new(y1.clone(), arr1(&[0.0, 0.0, 0.0]))
                })
                .unwrap();
                let max_err = outcome
                    .state
                    .iter()
                    .zip(y1.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(max_err <= 1e-9, "T={t_steps} p={p}: {max_err}");
            }
        }
    }

    #[test]
    fn non_finite_state_names_the_step() {
        // A finite but enormous prediction overflows the Euler update, so
        // the integrator must fault and name the step where it happened.
        let y0 = Array3::zeros((1, 1, 2));
        let mut call = 0usize;
        let err = solve_ode(y0, &cfg(10, 1), |_, _| {
            let v = if call == 4 { f64::MAX } else { 1.0 };
            call += 1;
            PredictionSet::new(Array3::from_elem((1, 1, 2), v), arr1(&[0.0]))
        })
        .unwrap_err();
        match err {
            Error::Sampling { step, .. } => assert_eq!(step, 4),
            other => panic!("wrong error: {other}"),
        }
    }

    fn tiny_teacher() -> Model {
        let cfg = NetworkConfig {
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_blocks: 1,
            dropout: 0.0,
            k: 2,
            ..NetworkConfig::default()
        };
        let dims = ModelDims {
            t_p: 3,
            t_f: 2,
            agent_types: vec!["agent".into()],
        };
        let mut rng = subsystem_rng(43, "init");
        Model::new(ModelKind::Teacher, cfg, dims, &mut rng).unwrap()
    }

    fn tiny_scene() -> Scene {
        Scene::new(
            "s0",
            0.2,
            vec![AgentRecord {
                agent_id: "a0".into(),
                agent_type: "agent".into(),
                past: vec![[0.0, 0.0], [0.2, 0.0], [0.4, 0.0]],
                future: vec![[0.6, 0.0], [0.8, 0.0]],
            }],
        )
        .unwrap()
    }

    fn norm() -> Normalizer {
        Normalizer {
            min_disp: [-2.0, -2.0],
            max_disp: [2.0, 2.0],
        }
    }

    #[test]
    fn sample_scene_shapes_nfe_and_determinism() {
        let model = tiny_teacher();
        let scene = tiny_scene();
        let c = cfg(25, 5);
        model.reset_nfe();
        let mut rng = subsystem_rng(44, "sample");
        let s1 = sample_scene(&model, &scene, &norm(), &c, 4, &mut rng).unwrap();
        assert_eq!(s1.predictions.shape(), &[4, 1, 2, 2]);
        assert_eq!(s1.nfe, 25);
        assert_eq!(model.nfe(), 25);
        assert!((s1.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s1.predictions.iter().all(|v| v.is_finite()));

        let mut rng2 = subsystem_rng(44, "sample");
        let s2 = sample_scene(&model, &scene, &norm(), &c, 4, &mut rng2).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.jsonl");
        let mut rng = subsystem_rng(45, "dump");
        let samples: Vec<SampleRecord> = (0..3)
            .map(|i| {
                let predictions = Array4::from_shape_simple_fn((2, 1, 2, 2), || rng.random::<f64>() * 10.0);
                SampleRecord::from_sample(&SceneSample {
                    scene_id: format!("scene-{i}"),
                    predictions,
                    probs: vec![0.25, 0.75],
                    nfe: 7,
                })
            })
            .collect();
        write_samples(&path, &samples).unwrap();
        let back = read_samples(&path).unwrap();
        assert_eq!(back, samples);
        let t = back[0].to_tensor().unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
    }

    #[test]
    fn ragged_dump_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.jsonl");
        let good = r#"{"scene_id":"a","predictions":[[[[0.0,0.0]]]],"probs":[1.0]}"#;
        let bad = r#"{"scene_id":"b","predictions":[[[[0.0,0.0]]],[[[0.0,0.0],[1.0,1.0]]]],"probs":[0.5,0.5]}"#;
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        let err = read_samples(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn tensor_round_trip_through_record() {
        let mut rng = subsystem_rng(46, "tensor");
        let predictions = Array4::from_shape_simple_fn((3, 2, 4, 2), || rng.random::<f64>() - 0.5);
        let record = SampleRecord::from_sample(&SceneSample {
            scene_id: "x".into(),
            predictions: predictions.clone(),
            probs: vec![0.2, 0.3, 0.5],
            nfe: 1,
        });
        assert_eq!(record.to_tensor().unwrap(), predictions);
    }
}
