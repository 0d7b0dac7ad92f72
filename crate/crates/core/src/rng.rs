//! Seed derivation.
//!
//! Every stage draws from its own ChaCha stream keyed by the root seed, so a
//! stage's randomness does not depend on how much another stage consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named stages. The discriminant is the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Split = 1,
    Noise = 2,
    TeacherInit = 3,
    StudentInit = 4,
    TeacherTrain = 5,
    StudentTrain = 6,
    Hash = 7,
    Synth = 8,
    Diagnose = 9,
    SelfTest = 10,
}

/// Rng for `stage` under `seed`.
pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

/// Rng for a sub-step (e.g. epoch) of a stage.
pub fn substage_rng(seed: u64, stage: Stage, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stage as u64);
    rng
}
