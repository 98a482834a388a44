//! Three-stage view switching and composition of the overall loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("step {step} outside 0..{total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("{0} is gated on in stage {1:?} but was not supplied")]
    Missing(&'static str, Stage),
    #[error("{0} was supplied but is gated off in stage {1:?}")]
    Unexpected(&'static str, Stage),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Scale augmentation: the resized view is active.
    S1ScaleAug,
    /// Angle burn-in: the rotated/flipped view is active.
    S2AngleBurn,
    /// As S2, with proposals oriented by dense-to-sparse matching.
    S3DsMatch,
}

/// Which enhanced-view terms each gate switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateWiring {
    /// Resized gate: MIL on the resized view plus SSC. Rot/flp gate: MIL on
    /// the rotated/flipped view plus SSA.
    #[default]
    Narrative,
    /// The resized gate drives MIL on the rotated/flipped view and SSC; the
    /// rot/flp gate drives MIL on the resized view and SSA.
    AsPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub burn_in_1: usize,
    pub burn_in_2: usize,
    pub total_steps: usize,
}

impl StageSchedule {
    pub fn new(
        burn_in_1: usize,
        burn_in_2: usize,
        total_steps: usize,
    ) -> Result<Self, ScheduleError> {
        if !(0 < burn_in_1 && burn_in_1 < burn_in_2 && burn_in_2 < total_steps) {
            return Err(ScheduleError::Invalid(format!(
                "need 0 < {burn_in_1} < {burn_in_2} < {total_steps}"
            )));
        }
        Ok(Self {
            burn_in_1,
            burn_in_2,
            total_steps,
        })
    }

    /// Burn-ins at `round(f * total)`.
    pub fn from_fractions(total_steps: usize, f1: f64, f2: f64) -> Result<Self, ScheduleError> {
        let at = |f: f64| (f * total_steps as f64).round() as usize;
        Self::new(at(f1), at(f2), total_steps)
    }

    pub fn stage_at(&self, step: usize) -> Result<StageState, ScheduleError> {
        stage_at(step, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageState {
    pub stage: Stage,
    pub resized_gate: u8,
    pub rotflp_gate: u8,
}

impl StageState {
    pub fn of(stage: Stage) -> Self {
        let s1 = stage == Stage::S1ScaleAug;
        Self {
            stage,
            resized_gate: s1 as u8,
            rotflp_gate: (!s1) as u8,
        }
    }

    pub fn ds_active(&self) -> bool {
        self.stage == Stage::S3DsMatch
    }
}

pub fn stage_at(step: usize, sched: &StageSchedule) -> Result<StageState, ScheduleError> {
    if step >= sched.total_steps {
        return Err(ScheduleError::StepOutOfRange {
            step,
            total: sched.total_steps,
        });
    }
    let stage = if step < sched.burn_in_1 {
        Stage::S1ScaleAug
    } else if step < sched.burn_in_2 {
        Stage::S2AngleBurn
    } else {
        Stage::S3DsMatch
    };
    Ok(StageState::of(stage))
}

/// Loss terms of one step; `None` for terms whose view was not built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents<T> {
    pub mil_ori: Option<T>,
    pub mil_ref: Option<T>,
    pub mil_res: Option<T>,
    pub mil_rfv: Option<T>,
    pub ssc: Option<T>,
    pub ssa: Option<T>,
}

impl<T> Default for LossComponents<T> {
    fn default() -> Self {
        Self {
            mil_ori: None,
            mil_ref: None,
            mil_res: None,
            mil_rfv: None,
            ssc: None,
            ssa: None,
        }
    }
}

/// The gate multiplying each component under `wiring`, in the order
/// `mil_ori, mil_ref, mil_res, mil_rfv, ssc, ssa`.
pub fn component_gates(state: &StageState, wiring: GateWiring) -> [u8; 6] {
    let (a, b) = (state.resized_gate, state.rotflp_gate);
    match wiring {
        GateWiring::Narrative => [1, 1, a, b, a, b],
        GateWiring::AsPrinted => [1, 1, b, a, a, b],
    }
}

pub const COMPONENT_NAMES: [&str; 6] = ["mil_ori", "mil_ref", "mil_res", "mil_rfv", "ssc", "ssa"];

impl<T: Copy> LossComponents<T> {
    pub fn as_array(&self) -> [Option<T>; 6] {
        [
            self.mil_ori,
            self.mil_ref,
            self.mil_res,
            self.mil_rfv,
            self.ssc,
            self.ssa,
        ]
    }

    /// Checks that exactly the gated-on components are present.
    pub fn check(&self, state: &StageState, wiring: GateWiring) -> Result<(), ScheduleError> {
        let gates = component_gates(state, wiring);
        for ((c, gate), name) in self.as_array().iter().zip(gates).zip(COMPONENT_NAMES) {
            match (c.is_some(), gate == 1) {
                (false, true) => return Err(ScheduleError::Missing(name, state.stage)),
                (true, false) => return Err(ScheduleError::Unexpected(name, state.stage)),
                _ => {}
            }
        }
        Ok(())
    }
}

pub fn total_loss(
    c: &LossComponents<f64>,
    state: &StageState,
    wiring: GateWiring,
) -> Result<f64, ScheduleError> {
    c.check(state, wiring)?;
    let gates = component_gates(state, wiring);
    Ok(c.as_array()
        .iter()
        .zip(gates)
        .map(|(v, g)| v.map_or(0.0, |v| g as f64 * v))
        .sum())
}

pub fn total_loss_graph(
    g: &mut Graph,
    c: &LossComponents<Var>,
    state: &StageState,
    wiring: GateWiring,
) -> Result<Var, ScheduleError> {
    c.check(state, wiring)?;
    let mut acc: Option<Var> = None;
    for v in c.as_array().into_iter().flatten() {
        acc = Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => g.scalar(0.0),
    })
}
