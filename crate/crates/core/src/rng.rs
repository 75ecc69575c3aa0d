//! Keyed random streams.
//!
//! Every random draw in the pipeline comes from a stream addressed by
//! `(seed, cell, frame, stage)`. The key is folded with SplitMix64 into a
//! ChaCha8 seed, so a stream's contents depend only on its key and never on
//! which thread asked for it or in what order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Label of the pipeline stage consuming a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    World,
    Data,
    StartLatent,
    ClipStartLatent,
    Inpaint,
    TaskSetup,
    Probe,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::World => 0x5752_4c44,
            Stage::Data => 0x4441_5441,
            Stage::StartLatent => 0x5354_4152,
            Stage::ClipStartLatent => 0x434c_4950,
            Stage::Inpaint => 0x494e_5041,
            Stage::TaskSetup => 0x5441_534b,
            Stage::Probe => 0x5052_4f42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub cell: u64,
    pub frame: u64,
    pub stage: Stage,
}

impl StreamKey {
    pub fn new(seed: u64, stage: Stage) -> Self {
        Self {
            seed,
            cell: 0,
            frame: 0,
            stage,
        }
    }

    pub fn cell(mut self, cell: u64) -> Self {
        self.cell = cell;
        self
    }

    pub fn frame(mut self, frame: u64) -> Self {
        self.frame = frame;
        self
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut h = splitmix64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        h = splitmix64(h ^ self.cell);
        h = splitmix64(h ^ self.frame.rotate_left(17));
        h = splitmix64(h ^ self.stage.tag());
        ChaCha8Rng::seed_from_u64(h)
    }

    pub fn normals(&self, n: usize) -> Vec<f64> {
        let mut rng = self.rng();
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    pub fn uniform(&self) -> f64 {
        self.rng().random::<f64>()
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
