//! Two-MDP instance where offline data covering only `{A, B}` cannot tell
//! the MDPs apart, while online play resolves the ambiguity at `C`.

use serde::{Deserialize, Serialize};

use crate::mdp::{Policy, RewardDist, TabularMdp};

pub const STATE_A: usize = 0;
pub const STATE_B: usize = 1;
pub const STATE_C: usize = 2;
pub const ACTION_L: usize = 0;
pub const ACTION_R: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HardInstanceVariant {
    M1,
    M2,
}

impl HardInstanceVariant {
    /// Action rewarded at `C`.
    pub fn rewarding_action_at_c(self) -> usize {
        match self {
            HardInstanceVariant::M1 => ACTION_R,
            HardInstanceVariant::M2 => ACTION_L,
        }
    }
}

/// `H = 2`, start at `A`; `A -L-> B`, `A -R-> C`. Both actions at `B`
/// pay 1, and exactly one action at `C` pays 1. Returns are bounded by 1,
/// so `v_max` is set to 1.
///
/// The optimal policy plays `L` at `A` and is uniform elsewhere.
pub fn make_hard_instance(variant: HardInstanceVariant) -> (TabularMdp, Policy) {
    let (hn, ns, na) = (2, 3, 2);
    let mut transition = vec![0.0; hn * ns * na * ns];
    let mut rewards = Vec::with_capacity(hn * ns * na);
    for h in 0..hn {
        for s in 0..ns {
            for a in 0..na {
                let next = match (h, s, a) {
                    (0, STATE_A, ACTION_L) => STATE_B,
                    (0, STATE_A, _) => STATE_C,
                    // states are absorbing otherwise
                    _ => s,
                };
                transition[((h * ns + s) * na + a) * ns + next] = 1.0;
                let r = match (h, s) {
                    (1, STATE_B) => 1.0,
                    (1, STATE_C) if a == variant.rewarding_action_at_c() => 1.0,
                    _ => 0.0,
                };
                rewards.push(RewardDist::deterministic(r));
            }
        }
    }
    let mdp = TabularMdp::new(hn, ns, na, transition, rewards, vec![1.0, 0.0, 0.0])
        .and_then(|m| m.with_v_max(1.0))
        .expect("hard instance is valid");

    let mut pi = Policy::uniform(hn, ns, na);
    pi.set_row(0, STATE_A, &[1.0, 0.0]).expect("one-hot row");
    (mdp, pi)
}

/// `A -> R`, `C -> L` (and `L` elsewhere): value 0 in `M1`.
pub fn hard_instance_failure_policy() -> Policy {
    Policy::deterministic(2, 3, 2, |h, s| match (h, s) {
        (0, STATE_A) => ACTION_R,
        _ => ACTION_L,
    })
}
