//! Per-agent conditioning features extracted from observed history.

use ndarray::Array2;

use crate::error::Result;
use crate::scene::Scene;

/// Features per observed frame: absolute position, position relative to the
/// last observed frame, and backward-difference velocity.
pub const CONTEXT_FEATURES: usize = 6;

/// Conditioning input for the networks: one row per agent, `6 * T_p` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTensor {
    /// Shape `[A, 6 * T_p]`. Frame-major: columns `6j..6j+6` hold frame `j`'s
    /// `[abs_x, abs_y, rel_x, rel_y, vel_x, vel_y]` in chronological order.
    pub values: Array2<f64>,
}

impl ContextTensor {
    pub fn n_agents(&self) -> usize {
        self.values.nrows()
    }

    pub fn t_p(&self) -> usize {
        self.values.ncols() / CONTEXT_FEATURES
    }
}

/// Build the conditioning tensor for a scene.
///
/// Relative coordinates are taken with respect to the last observed frame
/// (the anchor all displacements are measured from). Velocity is the
/// backward difference divided by `dt`; the earliest frame has no
/// predecessor, so its velocity is zero.
pub fn build_context(scene: &Scene) -> Result<ContextTensor> {
    scene.validate()?;
    let (a_n, t_p, dt) = (scene.n_agents(), scene.t_p(), scene.dt);
    let mut values = Array2::zeros((a_n, CONTEXT_FEATURES * t_p));
    for (a, agent) in scene.agents.iter().enumerate() {
        let anchor = agent.past[t_p - 1];
        for j in 0..t_p {
            let p = agent.past[j];
            let vel = if j == 0 {
                [0.0, 0.0]
            } else {
                let q = agent.past[j - 1];
                [(p[0] - q[0]) / dt, (p[1] - q[1]) / dt]
            };
            let col = CONTEXT_FEATURES * j;
            values[[a, col]] = p[0];
            values[[a, col + 1]] = p[1];
            values[[a, col + 2]] = p[0] - anchor[0];
            values[[a, col + 3]] = p[1] - anchor[1];
            values[[a, col + 4]] = vel[0];
            values[[a, col + 5]] = vel[1];
        }
    }
    Ok(ContextTensor { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::AgentRecord;

    fn one_agent_scene(past: Vec<[f64; 2]>, dt: f64) -> Scene {
        Scene::new(
            "c",
            dt,
            vec![AgentRecord {
                agent_id: "a".into(),
                agent_type: "agent".into(),
                past,
                future: vec![[0.0, 0.0]],
            }],
        )
        .unwrap()
    }

    #[test]
    fn stationary_agent_features() {
        let scene = one_agent_scene(vec![[3.0, 4.0]; 5], 0.5);
        let ctx = build_context(&scene).unwrap();
        assert_eq!(ctx.values.shape(), &[1, 30]);
        for j in 0..5 {
            let col = CONTEXT_FEATURES * j;
            assert_eq!(ctx.values[[0, col]], 3.0);
            assert_eq!(ctx.values[[0, col + 1]], 4.0);
            for f in 2..6 {
                assert_eq!(ctx.values[[0, col + f]], 0.0);
            }
        }
    }

    #[test]
    fn velocity_is_backward_difference() {
        let scene = one_agent_scene(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 1.0);
        let ctx = build_context(&scene).unwrap();
        let vel_x: Vec<f64> = (0..3).map(|j| ctx.values[[0, 6 * j + 4]]).collect();
        let vel_y: Vec<f64> = (0..3).map(|j| ctx.values[[0, 6 * j + 5]]).collect();
        assert_eq!(vel_x, vec![0.0, 1.0, 1.0]);
        assert_eq!(vel_y, vec![0.0, 0.0, 0.0]);
        // Relative coordinates anchor on the last observed frame.
        let rel_x: Vec<f64> = (0..3).map(|j| ctx.values[[0, 6 * j + 2]]).collect();
        assert_eq!(rel_x, vec![-2.0, -1.0, 0.0]);
    }

    #[test]
    fn two_agent_shape() {
        let mk = |id: &str| AgentRecord {
            agent_id: id.into(),
            agent_type: "agent".into(),
            past: vec![[0.0, 0.0]; 4],
            future: vec![[0.0, 0.0]; 2],
        };
        let scene = Scene::new("c2", 0.4, vec![mk("a"), mk("b")]).unwrap();
        let ctx = build_context(&scene).unwrap();
        assert_eq!(ctx.values.shape(), &[2, 24]);
        assert_eq!(ctx.n_agents(), 2);
        assert_eq!(ctx.t_p(), 4);
    }
}
