//! Scene and agent records.
//!
//! A scene is a fixed window of multi-agent motion: every agent carries
//! exactly `t_p` observed past positions and `t_f` future positions, sampled
//! every `dt` seconds. Past and future are stored in chronological order, so
//! `past[t_p - 1]` is the last observed position and the anchor for all
//! relative quantities.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D position in dataset units.
pub type Coord = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    #[serde(rename = "id")]
    pub agent_id: String,
    #[serde(rename = "type")]
    pub agent_type: String,
    pub past: Vec<Coord>,
    pub future: Vec<Coord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub dt: f64,
    pub agents: Vec<AgentRecord>,
}

impl Scene {
    /// Build a scene and check its invariants.
    pub fn new(scene_id: impl Into<String>, dt: f64, agents: Vec<AgentRecord>) -> Result<Self> {
        let scene = Scene {
            scene_id: scene_id.into(),
            dt,
            agents,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Past frames per agent (uniform across the scene).
    pub fn t_p(&self) -> usize {
        self.agents.first().map_or(0, |a| a.past.len())
    }

    /// Future frames per agent (uniform across the scene).
    pub fn t_f(&self) -> usize {
        self.agents.first().map_or(0, |a| a.future.len())
    }

    /// Last observed position of each agent, shape `[A, 2]`.
    pub fn last_observed(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_agents(), 2));
        for (a, agent) in self.agents.iter().enumerate() {
            let p = agent.past[agent.past.len() - 1];
            out[[a, 0]] = p[0];
            out[[a, 1]] = p[1];
        }
        out
    }

    /// Ground-truth future as a `[A, T_f, 2]` tensor of absolute coordinates.
    pub fn future_tensor(&self) -> Array3<f64> {
        let (a_n, t_f) = (self.n_agents(), self.t_f());
        let mut out = Array3::zeros((a_n, t_f, 2));
        for (a, agent) in self.agents.iter().enumerate() {
            for (t, p) in agent.future.iter().enumerate() {
                out[[a, t, 0]] = p[0];
                out[[a, t, 1]] = p[1];
            }
        }
        out
    }

    /// Check structural invariants: at least one agent, uniform window
    /// lengths, positive `dt`, finite coordinates.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::scene(&self.scene_id, msg));
        if self.agents.is_empty() {
            return fail("scene has no agents".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return fail(format!("dt must be positive and finite, got {}", self.dt));
        }
        let (t_p, t_f) = (self.agents[0].past.len(), self.agents[0].future.len());
        if t_p == 0 || t_f == 0 {
            return fail("past and future must be non-empty".into());
        }
        for agent in &self.agents {
            if agent.past.len() != t_p {
                return fail(format!(
                    "agent `{}` has {} past frames, expected {}",
                    agent.agent_id,
                    agent.past.len(),
                    t_p
                ));
            }
            if agent.future.len() != t_f {
                return fail(format!(
                    "agent `{}` has {} future frames, expected {}",
                    agent.agent_id,
                    agent.future.len(),
                    t_f
                ));
            }
            let finite = |cs: &[Coord]| cs.iter().all(|c| c[0].is_finite() && c[1].is_finite());
            if !finite(&agent.past) || !finite(&agent.future) {
                return fail(format!("agent `{}` has non-finite coordinates", agent.agent_id));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn agent(id: &str, past: Vec<Coord>, future: Vec<Coord>) -> AgentRecord {
        AgentRecord {
            agent_id: id.into(),
            agent_type: "agent".into(),
            past,
            future,
        }
    }

    #[test]
    fn accepts_consistent_scene() {
        let s = Scene::new(
            "s0",
            0.4,
            vec![
                agent("a", vec![[0.0, 0.0], [1.0, 0.0]], vec![[2.0, 0.0]]),
                agent("b", vec![[5.0, 5.0], [5.0, 6.0]], vec![[5.0, 7.0]]),
            ],
        )
        .unwrap();
        assert_eq!(s.n_agents(), 2);
        assert_eq!(s.t_p(), 2);
        assert_eq!(s.t_f(), 1);
        assert_eq!(s.last_observed()[[1, 1]], 6.0);
    }

    #[test]
    fn rejects_ragged_windows() {
        let err = Scene::new(
            "s1",
            0.4,
            vec![
                agent("a", vec![[0.0, 0.0], [1.0, 0.0]], vec![[2.0, 0.0]]),
                agent("b", vec![[5.0, 5.0]], vec![[5.0, 7.0]]),
            ],
        )
        .unwrap_err();
        assert!(err.to_string().contains("past frames"));
    }

    #[test]
    fn rejects_bad_dt_and_nonfinite() {
        assert!(Scene::new("s2", 0.0, vec![agent("a", vec![[0.0, 0.0]], vec![[1.0, 0.0]])]).is_err());
        assert!(Scene::new(
            "s3",
            0.1,
            vec![agent("a", vec![[f64::NAN, 0.0]], vec![[1.0, 0.0]])]
        )
        .is_err());
        assert!(Scene::new("s4", 0.1, vec![]).is_err());
    }

    #[test]
    fn json_schema_round_trip() {
        let s = Scene::new(
            "walk",
            0.5,
            vec![agent("p1", vec![[0.0, 0.0], [0.5, 0.25]], vec![[1.0, 0.5]])],
        )
        .unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"id\":\"p1\""), "agent id key should be `id`: {json}");
        assert!(json.contains("\"type\":\"agent\""), "type key should be `type`: {json}");
        let back: Scene = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
