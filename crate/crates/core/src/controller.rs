//! Action-aware controller: switches between fine- and coarse-grained
//! pruning budgets from the end-effector's per-step displacement.

use serde::{Deserialize, Serialize};

/// Base top-k budget in coarse-grained mode before scaling by the prune ratio.
pub const COARSE_TOPK: usize = 24;
/// Base top-k budget in fine-grained mode before scaling by the prune ratio.
pub const FINE_TOPK: usize = 40;

/// Per-step end-effector displacement in normalized action units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActionDelta {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
    pub d_gamma: f64,
    pub gripper: f64,
}

impl ActionDelta {
    pub fn to_array(self) -> [f64; 7] {
        [self.dx, self.dy, self.dz, self.d_alpha, self.d_beta, self.d_gamma, self.gripper]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            dz: a[2],
            d_alpha: a[3],
            d_beta: a[4],
            d_gamma: a[5],
            gripper: a[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &ActionDelta) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn translational_speed(d: &ActionDelta) -> f64 {
    (d.dx * d.dx + d.dy * d.dy + d.dz * d.dz).sqrt()
}

pub fn rotational_speed(d: &ActionDelta) -> f64 {
    (d.d_alpha * d.d_alpha + d.d_beta * d.d_beta + d.d_gamma * d.d_gamma).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionMode {
    Fine,
    #[default]
    Coarse,
}

impl ActionMode {
    pub fn name(self) -> &'static str {
        match self {
            ActionMode::Fine => "fine",
            ActionMode::Coarse => "coarse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub translational: f64,
    pub rotational: f64,
    /// Entry requires `dz <= vertical`; zero reproduces the plain `dz <= 0` rule.
    pub vertical: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            translational: 0.03,
            rotational: 0.05,
            vertical: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub mode: ActionMode,
    pub v_t: f64,
    pub v_r: f64,
    pub thresholds: Thresholds,
    pub alpha: f64,
}

impl ControllerState {
    pub fn new(thresholds: Thresholds, alpha: f64) -> Self {
        Self {
            mode: ActionMode::Coarse,
            v_t: 0.0,
            v_r: 0.0,
            thresholds,
            alpha,
        }
    }

    /// `round_half_up(alpha * base)` for the current mode.
    pub fn k_base(&self) -> usize {
        k_base(self.mode, self.alpha)
    }
}

pub fn k_base(mode: ActionMode, alpha: f64) -> usize {
    let base = match mode {
        ActionMode::Fine => FINE_TOPK,
        ActionMode::Coarse => COARSE_TOPK,
    };
    // representation error must not push x.5 below the rounding point
    (alpha * base as f64 + 0.5 + 1e-9).floor() as usize
}

/// Two-state machine. From coarse, enter fine when both speeds are under
/// their thresholds and the gripper is not rising. From fine, leave only when
/// either speed exceeds its threshold.
pub fn classify(d: &ActionDelta, state: &ControllerState) -> ControllerState {
    let v_t = translational_speed(d);
    let v_r = rotational_speed(d);
    let th = state.thresholds;
    let mode = match state.mode {
        ActionMode::Coarse => {
            if v_t < th.translational && v_r < th.rotational && d.dz <= th.vertical {
                ActionMode::Fine
            } else {
                ActionMode::Coarse
            }
        }
        ActionMode::Fine => {
            if v_t > th.translational || v_r > th.rotational {
                ActionMode::Coarse
            } else {
                ActionMode::Fine
            }
        }
    };
    ControllerState { mode, v_t, v_r, ..*state }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta(t: [f64; 3], r: [f64; 3]) -> ActionDelta {
        ActionDelta {
            dx: t[0],
            dy: t[1],
            dz: t[2],
            d_alpha: r[0],
            d_beta: r[1],
            d_gamma: r[2],
            gripper: 0.0,
        }
    }

    #[test]
    fn speeds() {
        assert_eq!(translational_speed(&delta([3.0, 4.0, 0.0], [0.0; 3])), 5.0);
        assert_eq!(translational_speed(&ActionDelta::default()), 0.0);
        assert!((translational_speed(&delta([0.01, 0.02, 0.02], [0.0; 3])) - 0.03).abs() < 1e-15);
        assert_eq!(rotational_speed(&delta([0.0; 3], [0.6, 0.8, 0.0])), 1.0);
        let r = rotational_speed(&delta([0.0; 3], [0.1, -0.2, 0.3]));
        let scaled = rotational_speed(&delta([0.0; 3], [-0.3, 0.6, -0.9]));
        assert!((scaled - 3.0 * r).abs() < 1e-15);
    }

    #[test]
    fn classify_examples() {
        let st = ControllerState::new(Thresholds::default(), 1.0);
        let fine = classify(&delta([0.0, 0.0, -0.001], [0.001, 0.0, 0.0]), &st);
        assert_eq!(fine.mode, ActionMode::Fine);
        assert_eq!(fine.k_base(), 40);
        let coarse = classify(&delta([0.5, 0.0, 0.0], [0.0; 3]), &st);
        assert_eq!(coarse.mode, ActionMode::Coarse);
        assert_eq!(coarse.k_base(), 24);
        assert_eq!(k_base(ActionMode::Coarse, 0.6), 14);
        assert_eq!(k_base(ActionMode::Fine, 0.8), 32);
        assert_eq!(k_base(ActionMode::Fine, 0.6), 24);
    }

    #[test]
    fn rising_gripper_does_not_enter_fine() {
        let st = ControllerState::new(Thresholds::default(), 1.0);
        let up = classify(&delta([0.0, 0.0, 0.001], [0.0; 3]), &st);
        assert_eq!(up.mode, ActionMode::Coarse);
        let opt_in = ControllerState::new(Thresholds { vertical: 0.01, ..Thresholds::default() }, 1.0);
        assert_eq!(classify(&delta([0.0, 0.0, 0.001], [0.0; 3]), &opt_in).mode, ActionMode::Fine);
    }

    #[test]
    fn hysteresis_only_exits_on_speed() {
        let mut st = ControllerState::new(Thresholds::default(), 1.0);
        st = classify(&delta([0.0, 0.0, -0.01], [0.0; 3]), &st);
        assert_eq!(st.mode, ActionMode::Fine);
        // slow rise keeps fine mode
        st = classify(&delta([0.0, 0.0, 0.01], [0.0; 3]), &st);
        assert_eq!(st.mode, ActionMode::Fine);
        st = classify(&delta([0.0, 0.0, 0.05], [0.0; 3]), &st);
        assert_eq!(st.mode, ActionMode::Coarse);
    }
}
