use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{ProxyConfig, TaskVariant};
use crate::bank::RawLayerStack;
use crate::error::Result;
use crate::grounding::VisualTokens;
use crate::numerics::Tensor2D;

/// One synthetic clip: frozen raw layers, visual tokens, per-token roles and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxySample {
    pub raw: RawLayerStack,
    pub visual: VisualTokens,
    pub roles: Vec<usize>,
    pub labels: Vec<usize>,
}

impl ProxySample {
    pub fn num_tokens(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplit {
    pub train: Vec<ProxySample>,
    pub test: Vec<ProxySample>,
}

const TRAIN_SPLIT: u64 = 1;
const TEST_SPLIT: u64 = 2;

/// Independent stream per (split, sample, part); part 0 holds roles, labels and visual
/// tokens, part `1 + id` the raw features of source layer `id`.
fn stream(seed: u64, split: u64, sample: usize, part: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split << 56) | ((sample as u64) << 16) | part as u64);
    rng
}

/// Deterministic train/test sets; only the bank's source layers are materialized.
pub fn generate_task(config: &ProxyConfig, seed: u64) -> Result<TaskSplit> {
    config.validate()?;
    let make = |split: u64, count: usize| -> Result<Vec<ProxySample>> {
        (0..count)
            .into_par_iter()
            .map(|s| generate_sample(config, seed, split, s))
            .collect()
    };
    Ok(TaskSplit {
        train: make(TRAIN_SPLIT, config.train_samples)?,
        test: make(TEST_SPLIT, config.test_samples)?,
    })
}

fn generate_sample(config: &ProxyConfig, seed: u64, split: u64, sample: usize) -> Result<ProxySample> {
    let shape = config.shape();
    let tokens = shape.num_merged();
    let bank = config.bank_layers()?;
    let sources = config.signal_sources()?;

    let mut rng = stream(seed, split, sample, 0);
    let roles: Vec<usize> = (0..tokens).map(|_| rng.gen_range(0..config.num_roles)).collect();
    let labels: Vec<usize> = (0..tokens).map(|_| rng.gen_range(0..config.num_classes)).collect();
    let mut v = Tensor2D::random_normal(tokens, config.d_model, config.role_noise_std, &mut rng);
    for (i, &r) in roles.iter().enumerate() {
        v.row_mut(i)[r] += 1.0;
    }
    let visual = VisualTokens::new(config.num_frames, shape.merged_per_frame(), v)?;

    let a = config.signal_amplitude;
    let layers = bank
        .iter()
        .map(|&id| {
            let mut rng = stream(seed, split, sample, 1 + id);
            let mut grid = Tensor2D::random_normal(shape.num_tokens(), config.d_geo, config.noise_std, &mut rng);
            for i in 0..tokens {
                let Some(part) = sources[roles[i]].iter().position(|&s| s == id) else {
                    continue;
                };
                let (lo, hi, hot) = match config.variant {
                    TaskVariant::SingleSignal => (0, config.num_classes, labels[i]),
                    TaskVariant::TwoSignal if part == 0 => (0, 2, labels[i] / 2),
                    TaskVariant::TwoSignal => (2, 4, 2 + labels[i] % 2),
                };
                for &row in &shape.block_rows(i) {
                    let dst = grid.row_mut(row);
                    for (c, x) in dst[lo..hi].iter_mut().enumerate() {
                        if lo + c == hot {
                            *x += a;
                        }
                    }
                }
            }
            grid
        })
        .collect();
    let raw = RawLayerStack::new(bank, shape, config.d_geo, layers)?;
    Ok(ProxySample {
        raw,
        visual,
        roles,
        labels,
    })
}
