//! Seed derivation. Every stage seed is a pure function of the master seed,
//! so a single `--seed` reproduces the whole pipeline.

/// Fixed per-stage tags mixed into the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Cluster,
    Graph,
    Pairs,
    PairShuffle,
    Triplets,
    TrainInit,
    Eval,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Synth => 0x01,
            Stage::Cluster => 0x02,
            Stage::Graph => 0x03,
            Stage::Pairs => 0x04,
            Stage::PairShuffle => 0x05,
            Stage::Triplets => 0x06,
            Stage::TrainInit => 0x07,
            Stage::Eval => 0x08,
        }
    }
}

/// splitmix64 finalizer; decorrelates nearby seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a stage seed from the master seed.
pub fn stage_seed(master: u64, stage: Stage) -> u64 {
    derive_seed(master, stage.tag())
}

/// Derive a sub-seed from `seed` and an arbitrary tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}
