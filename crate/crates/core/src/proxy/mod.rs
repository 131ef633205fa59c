//! Synthetic routed-evidence task.
//!
//! Every merged visual token carries a role. The token's label is written into the raw
//! geometry features of one layer chosen by its role; everything else is noise. The
//! visual token encodes the role but not the label, so a linear probe can only beat
//! chance by pulling evidence from the right bank layer.

mod data;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::bank::{select_layers, GridShape, LayerStrategy, MergeMode};
use crate::error::{Error, Result};
use crate::grounding::{AllocationMode, GroundingPosition};

pub use data::{generate_task, ProxySample, TaskSplit};
pub use model::{probe_loss, BatchObjective, GroundingModel, ProbeHead, SampleForward};
pub use train::{evaluate, train, train_on, EvalMetrics, TrainOutcome, TracePoint};

/// How labels are planted in the geometry layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskVariant {
    /// One-hot label in channels `[0, C)` of the role's signal layer.
    #[default]
    SingleSignal,
    /// Label `2a + b`: bit `a` one-hot in channels `[0, 2)` of the role's first signal layer,
    /// bit `b` one-hot in channels `[2, 4)` of its second. Either layer alone caps accuracy at 0.5.
    TwoSignal,
}

/// Task shape, data generation and optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    /// Depth of the synthetic source encoder.
    pub encoder_layers: usize,
    pub bank_strategy: LayerStrategy,
    /// Bank size `|S|`.
    pub num_layers: usize,
    pub num_frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_geo: usize,
    pub d_model: usize,
    pub num_roles: usize,
    pub num_classes: usize,
    /// Role -> bank-layer position carrying the label.
    pub signal_layer_map: Vec<usize>,
    /// Role -> bank-layer position of the second half of the label (two-signal variant).
    pub second_signal_layer_map: Vec<usize>,
    /// Pins the signal to these source-encoder layer ids instead of resolving the maps
    /// through the bank. Bank ablations use it to keep the data fixed while the bank moves.
    pub signal_source_override: Option<Vec<Vec<usize>>>,
    pub variant: TaskVariant,
    pub noise_std: f64,
    pub role_noise_std: f64,
    pub signal_amplitude: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Full-scale learning rate, recorded only.
    pub paper_lr: f64,
    pub merge: MergeMode,
    pub router_init_std: f64,
    pub probe_init_std: f64,
    /// Loss-curve sampling period in steps.
    pub log_every: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 24,
            bank_strategy: LayerStrategy::LatterHalf,
            num_layers: 12,
            num_frames: 2,
            grid_h: 8,
            grid_w: 8,
            d_geo: 16,
            d_model: 32,
            num_roles: 4,
            num_classes: 4,
            signal_layer_map: vec![2, 5, 8, 11],
            second_signal_layer_map: vec![0, 3, 6, 9],
            signal_source_override: None,
            variant: TaskVariant::SingleSignal,
            noise_std: 1.0,
            role_noise_std: 0.1,
            signal_amplitude: 1.3,
            train_samples: 2048,
            test_samples: 256,
            batch_size: 32,
            steps: 2000,
            lr: 1e-3,
            paper_lr: 1e-5,
            merge: MergeMode::Concat,
            router_init_std: 0.1,
            probe_init_std: 0.1,
            log_every: 100,
        }
    }
}

impl ProxyConfig {
    pub fn shape(&self) -> GridShape {
        GridShape {
            num_frames: self.num_frames,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
        }
    }

    /// Source-encoder layer ids of the bank.
    pub fn bank_layers(&self) -> Result<Vec<usize>> {
        select_layers(self.encoder_layers, &self.bank_strategy, self.num_layers)
    }

    fn signal_maps(&self) -> Vec<&[usize]> {
        match self.variant {
            TaskVariant::SingleSignal => vec![&self.signal_layer_map],
            TaskVariant::TwoSignal => vec![&self.signal_layer_map, &self.second_signal_layer_map],
        }
    }

    /// Per role, the source-encoder layer ids that carry its label (one per signal part).
    pub fn signal_sources(&self) -> Result<Vec<Vec<usize>>> {
        if let Some(ids) = &self.signal_source_override {
            return Ok(ids.clone());
        }
        let bank = self.bank_layers()?;
        Ok((0..self.num_roles)
            .map(|r| self.signal_maps().iter().map(|m| bank[m[r]]).collect())
            .collect())
    }

    /// Per role, bank positions holding its signal; parts outside the bank are dropped.
    pub fn signal_positions(&self) -> Result<Vec<Vec<usize>>> {
        let bank = self.bank_layers()?;
        Ok(self
            .signal_sources()?
            .iter()
            .map(|ids| {
                ids.iter()
                    .filter_map(|id| bank.iter().position(|b| b == id))
                    .collect()
            })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder_layers", self.encoder_layers),
            ("num_layers", self.num_layers),
            ("num_frames", self.num_frames),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("d_geo", self.d_geo),
            ("d_model", self.d_model),
            ("num_roles", self.num_roles),
            ("num_classes", self.num_classes),
            ("train_samples", self.train_samples),
            ("test_samples", self.test_samples),
            ("batch_size", self.batch_size),
            ("log_every", self.log_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("`{name}` must be >= 1")));
            }
        }
        if self.grid_h % 2 != 0 || self.grid_w % 2 != 0 {
            return Err(Error::config(format!(
                "`grid_h`/`grid_w` must be even, got {}x{}",
                self.grid_h, self.grid_w
            )));
        }
        if self.num_roles > self.d_model {
            return Err(Error::config("`num_roles` cannot exceed `d_model`"));
        }
        let bank = self.bank_layers()?;
        // pinned sources make the position maps irrelevant
        let maps = if self.signal_source_override.is_some() {
            Vec::new()
        } else {
            self.signal_maps()
        };
        for (name, map) in [
            ("signal_layer_map", &self.signal_layer_map),
            ("second_signal_layer_map", &self.second_signal_layer_map),
        ] {
            if !maps.iter().any(|m| std::ptr::eq(*m, map.as_slice())) {
                continue;
            }
            if map.len() != self.num_roles {
                return Err(Error::config(format!(
                    "`{name}` has {} entries for {} roles",
                    map.len(),
                    self.num_roles
                )));
            }
            if let Some(p) = map.iter().find(|&&p| p >= bank.len()) {
                return Err(Error::config(format!(
                    "`{name}` position {p} outside a {}-layer bank",
                    bank.len()
                )));
            }
        }
        let mut all: Vec<usize> = maps.iter().flat_map(|m| m.iter().copied()).collect();
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("signal layer maps must be injective and disjoint"));
        }
        match self.variant {
            TaskVariant::SingleSignal => {
                if self.num_classes > self.d_geo {
                    return Err(Error::config("`num_classes` cannot exceed `d_geo`"));
                }
            }
            TaskVariant::TwoSignal => {
                if self.num_classes != 4 || self.d_geo < 4 {
                    return Err(Error::config(
                        "the two_signal variant needs `num_classes` = 4 and `d_geo` >= 4",
                    ));
                }
            }
        }
        if let Some(ids) = &self.signal_source_override {
            if ids.len() != self.num_roles || ids.iter().any(|r| r.len() != self.signal_maps().len()) {
                return Err(Error::config(
                    "`signal_source_override` needs one entry per role and signal part",
                ));
            }
            if ids.iter().flatten().any(|&l| l >= self.encoder_layers) {
                return Err(Error::config("`signal_source_override` exceeds encoder depth"));
            }
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("role_noise_std", self.role_noise_std),
            ("signal_amplitude", self.signal_amplitude),
            ("router_init_std", self.router_init_std),
            ("probe_init_std", self.probe_init_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("`{name}` must be finite and >= 0")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("`lr` must be > 0"));
        }
        Ok(())
    }
}

/// Allocation mode, compactness and injection point of the grounding head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub mode: AllocationMode,
    pub top_k: usize,
    pub position: GroundingPosition,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            mode: AllocationMode::TokenAdaptive,
            top_k: 2,
            position: GroundingPosition::PreReasoning,
        }
    }
}
