//! Independent oracles shared by the integration targets.
#![allow(dead_code)]

use qdepth::experts::{Branches, CodeSpace, ExpertConfig, Observation, StackConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Attention permission written out rule by rule over positions:
/// text and image see only their own block, depth sees text, image and
/// depth, proprio sees text, image and proprio (plus depth in the
/// alternative scheme), actions see everything.
pub fn mask_oracle(counts: [usize; 5], dreamvla: bool) -> Vec<Vec<bool>> {
    let [t, i, d, p, a] = counts;
    let n = t + i + d + p + a;
    let block = |pos: usize| -> char {
        if pos < t {
            'T'
        } else if pos < t + i {
            'I'
        } else if pos < t + i + d {
            'D'
        } else if pos < t + i + d + p {
            'P'
        } else {
            'A'
        }
    };
    let mut m = vec![vec![false; n]; n];
    for (q, row) in m.iter_mut().enumerate() {
        for (k, cell) in row.iter_mut().enumerate() {
            *cell = match (block(q), block(k)) {
                ('T', 'T') | ('I', 'I') => true,
                ('D', 'T' | 'I' | 'D') => true,
                ('P', 'T' | 'I' | 'P') => true,
                ('P', 'D') => dreamvla,
                ('A', _) => true,
                _ => false,
            };
        }
    }
    m
}

pub fn tiny_config(hidden: usize) -> (ExpertConfig, CodeSpace) {
    let stack = StackConfig {
        layers: 1,
        heads: 2,
        hidden,
        intermediate: 2 * hidden,
    };
    let cfg = ExpertConfig {
        image_size: 8,
        patch: 4,
        backbone: stack,
        depth_expert: stack,
        action_expert: stack,
        depth_decoder_channels: 4,
        ..ExpertConfig::default()
    };
    let cs = CodeSpace {
        code_dim: 3,
        grid: 4,
        tau: 0.8,
        frame_size: 8,
    };
    (cfg, cs)
}

pub fn random_obs(cfg: &ExpertConfig, seed: u64) -> Observation {
    let mut r = rng(seed);
    let s = cfg.image_size;
    Observation {
        image: (0..s * s * 3).map(|_| r.gen::<f64>()).collect(),
        image_size: s,
        instruction: (0..cfg.instruction_len)
            .map(|_| r.gen_range(0..cfg.vocab_size))
            .collect(),
        proprio: (0..cfg.proprio_dim).map(|_| r.gen::<f64>()).collect(),
    }
}

pub fn branches() -> Branches {
    Branches::default()
}
