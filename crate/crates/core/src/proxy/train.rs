use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{generate_task, GroundingModel, HeadConfig, ProxyConfig, ProxySample, TaskSplit};
use crate::error::{Error, Result};
use crate::numerics::{adam_update, AdamConfig, ParamStore};

/// Mean training-batch loss over one logging window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// Per bank position, fraction of tokens that selected it.
    pub selection_frequency: Vec<f64>,
    /// Fraction of tokens whose top-1 layer carries their role's signal.
    pub agreement: f64,
    /// Per role, the same agreement restricted to that role's tokens.
    pub role_agreement: Vec<f64>,
    /// Fraction of tokens whose top-1 layer was decided by the tie rule.
    pub tied_fraction: f64,
    pub num_tokens: usize,
}

impl EvalMetrics {
    /// All routing decisions came from the tie rule (constant logits), so agreement
    /// reflects layer order rather than anything learned.
    pub fn degenerate(&self) -> bool {
        self.tied_fraction == 1.0
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GroundingModel,
    pub store: ParamStore,
    pub trace: Vec<TracePoint>,
    pub initial_test: EvalMetrics,
    pub train: EvalMetrics,
    pub test: EvalMetrics,
}

impl TrainOutcome {
    pub fn train_loss_final(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |p| p.train_loss)
    }
}

const BATCH_STREAM: u64 = 4 << 56;

/// Generates the task for `seed` and trains on it.
pub fn train(config: &ProxyConfig, head: HeadConfig, seed: u64) -> Result<TrainOutcome> {
    let task = generate_task(config, seed)?;
    train_on(config, head, seed, &task)
}

/// Adam over shuffled minibatches of `task.train`; raw features are only read.
pub fn train_on(config: &ProxyConfig, head: HeadConfig, seed: u64, task: &TaskSplit) -> Result<TrainOutcome> {
    config.validate()?;
    let (model, mut store) = GroundingModel::init(config, head, seed)?;
    let positions = config.signal_positions()?;
    let initial_test = evaluate(&model, &store, &task.test, &positions)?;

    let adam = AdamConfig::with_lr(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BATCH_STREAM);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0;
    for step in 0..config.steps {
        let mut batch: Vec<&ProxySample> = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(task.train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&task.train[order[cursor]]);
            cursor += 1;
        }
        let loss = model
            .batch_loss_and_grad(&mut store, &batch)
            .map_err(|e| match e {
                Error::Numeric(message) => Error::Training { step, message },
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("loss became {loss}"),
            });
        }
        adam_update(&mut store, &adam)?;
        window += loss;
        window_len += 1;
        if (step + 1) % config.log_every == 0 || step + 1 == config.steps {
            trace.push(TracePoint {
                step: step + 1,
                train_loss: window / window_len as f64,
            });
            window = 0.0;
            window_len = 0;
        }
    }
    if let Some(id) = store.ids().find(|&id| !store.value(id).is_finite()) {
        return Err(Error::Training {
            step: config.steps,
            message: format!("parameter `{}` is not finite", store.name(id)),
        });
    }
    let train = evaluate(&model, &store, &task.train, &positions)?;
    let test = evaluate(&model, &store, &task.test, &positions)?;
    Ok(TrainOutcome {
        model,
        store,
        trace,
        initial_test,
        train,
        test,
    })
}

struct SampleStats {
    correct: usize,
    loss_sum: f64,
    selected: Vec<usize>,
    agree: Vec<(usize, usize)>,
    tied: usize,
    tokens: usize,
}

/// Accuracy, loss and routing statistics over `data` through the reference forward pass.
///
/// `signal_positions[role]` lists the bank positions that carry the role's label.
pub fn evaluate(
    model: &GroundingModel,
    store: &ParamStore,
    data: &[ProxySample],
    signal_positions: &[Vec<usize>],
) -> Result<EvalMetrics> {
    let s = model.head.num_layers;
    let roles = signal_positions.len();
    let per_sample: Vec<SampleStats> = data
        .par_iter()
        .map(|sample| {
            let f = model.forward(store, sample)?;
            let mut st = SampleStats {
                correct: 0,
                loss_sum: f.loss * sample.num_tokens() as f64,
                selected: vec![0; s],
                agree: vec![(0, 0); roles],
                tied: 0,
                tokens: sample.num_tokens(),
            };
            for i in 0..sample.num_tokens() {
                let row = f.logits.row(i);
                let pred = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                st.correct += usize::from(pred == sample.labels[i]);
                for (l, w) in f.routing.weights.row(i).iter().enumerate() {
                    st.selected[l] += usize::from(*w != 0.0);
                }
                let top = f.routing.selected[i][0];
                let role = sample.roles[i];
                if role >= roles {
                    return Err(Error::dim(format!("role {role} has no signal positions")));
                }
                st.agree[role].1 += 1;
                st.agree[role].0 += usize::from(signal_positions[role].contains(&top));
                let lg = f.routing.logits.row(i);
                st.tied += usize::from(lg.iter().filter(|&&v| v == lg[top]).count() > 1);
            }
            Ok(st)
        })
        .collect::<Result<_>>()?;

    let tokens: usize = per_sample.iter().map(|p| p.tokens).sum();
    if tokens == 0 {
        return Err(Error::dim("evaluation over zero tokens"));
    }
    let n = tokens as f64;
    let mut selected = vec![0usize; s];
    let mut agree = vec![(0usize, 0usize); roles];
    for p in &per_sample {
        for (o, v) in selected.iter_mut().zip(&p.selected) {
            *o += v;
        }
        for (o, v) in agree.iter_mut().zip(&p.agree) {
            o.0 += v.0;
            o.1 += v.1;
        }
    }
    Ok(EvalMetrics {
        accuracy: per_sample.iter().map(|p| p.correct).sum::<usize>() as f64 / n,
        mean_loss: per_sample.iter().map(|p| p.loss_sum).sum::<f64>() / n,
        selection_frequency: selected.iter().map(|&c| c as f64 / n).collect(),
        agreement: agree.iter().map(|a| a.0).sum::<usize>() as f64 / n,
        role_agreement: agree
            .iter()
            .map(|&(hit, all)| if all == 0 { 0.0 } else { hit as f64 / all as f64 })
            .collect(),
        tied_fraction: per_sample.iter().map(|p| p.tied).sum::<usize>() as f64 / n,
        num_tokens: tokens,
    })
}
