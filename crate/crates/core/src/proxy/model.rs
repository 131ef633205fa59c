use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{HeadConfig, ProxyConfig, ProxySample};
use crate::bank::{build_bank, BankParams, BankRow, MergeMode};
use crate::error::{Error, Result};
use crate::grounding::{
    ground_tokens, sparse_allocate, sparse_allocate_backward, Allocation, AllocationMode,
    GroundedTokens, GroundingHead, GroundingPosition, RoutingWeights,
};
use crate::numerics::{gemm, softmax_in_place, Objective, ParamStore, Tensor2D};

/// Linear classifier over grounded tokens (over `[v; g]` for decoder-side fusion).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeHead {
    /// `in_dim x num_classes`
    pub w: crate::numerics::ParamId,
    pub b: crate::numerics::ParamId,
    pub in_dim: usize,
    pub num_classes: usize,
}

impl ProbeHead {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_dim: usize,
        num_classes: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("the probe needs at least two classes"));
        }
        Ok(Self {
            w: store.add("probe.w", Tensor2D::random_normal(in_dim, num_classes, std, rng))?,
            b: store.add("probe.b", Tensor2D::zeros(1, num_classes))?,
            in_dim,
            num_classes,
        })
    }
}

fn probe_input(tokens: &GroundedTokens) -> Result<Tensor2D> {
    match &tokens.late_evidence {
        None => Ok(tokens.matrix.clone()),
        Some(g) => {
            if g.rows() != tokens.matrix.rows() {
                return Err(Error::dim("late evidence and tokens disagree on token count"));
            }
            let (t, d) = tokens.matrix.shape();
            let mut x = Tensor2D::zeros(t, d + g.cols());
            for i in 0..t {
                x.row_mut(i)[..d].copy_from_slice(tokens.matrix.row(i));
                x.row_mut(i)[d..].copy_from_slice(g.row(i));
            }
            Ok(x)
        }
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dim(format!("{} labels for {rows} tokens", labels.len())));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

/// Token-level cross entropy; returns the summed loss and leaves softmax probabilities in `logits`.
fn cross_entropy_in_place(logits: &mut Tensor2D, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
        softmax_in_place(row);
    }
    total
}

/// Mean token cross entropy of the probe and the per-token logits.
pub fn probe_loss(
    tokens: &GroundedTokens,
    probe: &ProbeHead,
    store: &ParamStore,
    labels: &[usize],
) -> Result<(f64, Tensor2D)> {
    let x = probe_input(tokens)?;
    if x.cols() != probe.in_dim {
        return Err(Error::dim(format!(
            "probe expects {} features, got {}",
            probe.in_dim,
            x.cols()
        )));
    }
    check_labels(labels, x.rows(), probe.num_classes)?;
    if labels.is_empty() {
        return Err(Error::dim("probe loss over zero tokens"));
    }
    let mut logits = Tensor2D::zeros(x.rows(), probe.num_classes);
    gemm(1.0, &x, false, store.value(probe.w), false, 0.0, &mut logits)?;
    logits.add_row_broadcast(store.value(probe.b).as_slice())?;
    let mut probs = logits.clone();
    let total = cross_entropy_in_place(&mut probs, labels);
    Ok((total / labels.len() as f64, logits))
}

/// Parameter handles of the trainable pipeline: bank, grounding head and probe.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingModel {
    pub bank: BankParams,
    pub head: GroundingHead,
    pub probe: ProbeHead,
}

/// Result of the reference forward pass over one sample.
#[derive(Clone, Debug)]
pub struct SampleForward {
    pub grounded: GroundedTokens,
    pub routing: RoutingWeights,
    pub loss: f64,
    pub logits: Tensor2D,
}

const INIT_STREAM: u64 = 3 << 56;

impl GroundingModel {
    /// Fresh parameters for `config`; initialization draws from its own stream of `seed`.
    pub fn init(config: &ProxyConfig, head: HeadConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        Self::init_with(
            config.num_layers,
            config.d_geo,
            config.d_model,
            config.num_classes,
            config.merge,
            head,
            config.router_init_std,
            config.probe_init_std,
            &mut rng,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init_with<R: Rng + ?Sized>(
        num_layers: usize,
        d_geo: usize,
        d_model: usize,
        num_classes: usize,
        merge: MergeMode,
        head: HeadConfig,
        router_std: f64,
        probe_std: f64,
        rng: &mut R,
    ) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let bank = BankParams::init(&mut store, num_layers, d_geo, d_model, merge, rng)?;
        let head = GroundingHead::init(
            &mut store,
            d_model,
            num_layers,
            head.mode,
            head.top_k,
            head.position,
            router_std,
            rng,
        )?;
        let in_dim = match head.position {
            GroundingPosition::DecoderFusion => 2 * d_model,
            _ => d_model,
        };
        let probe = ProbeHead::init(&mut store, in_dim, num_classes, probe_std, rng)?;
        store.zero_grad();
        Ok((Self { bank, head, probe }, store))
    }

    /// Reference pass built from the public operations: full bank, grounding, probe.
    pub fn forward(&self, store: &ParamStore, sample: &ProxySample) -> Result<SampleForward> {
        let bank = build_bank(&sample.raw, &self.bank, store)?;
        let (grounded, routing) = ground_tokens(&sample.visual, &bank, &self.head, store)?;
        let (loss, logits) = probe_loss(&grounded, &self.probe, store, &sample.labels)?;
        Ok(SampleForward {
            grounded,
            routing,
            loss,
            logits,
        })
    }

    /// Mean token loss over a batch via [`GroundingModel::forward`].
    pub fn batch_loss(&self, store: &ParamStore, batch: &[&ProxySample]) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0;
        for s in batch {
            total += self.forward(store, s)?.loss * s.num_tokens() as f64;
            tokens += s.num_tokens();
        }
        if tokens == 0 {
            return Err(Error::dim("empty batch"));
        }
        Ok(total / tokens as f64)
    }

    /// Mean token loss over a batch with gradients accumulated into freshly zeroed slots.
    ///
    /// Only the routed `(token, layer)` bank entries are evaluated.
    pub fn batch_loss_and_grad(&self, store: &mut ParamStore, batch: &[&ProxySample]) -> Result<f64> {
        store.zero_grad();
        let d = self.head.d_model;
        let s = self.head.num_layers;
        let n: usize = batch.iter().map(|x| x.num_tokens()).sum();
        if n == 0 {
            return Err(Error::dim("empty batch"));
        }
        let mut visual = Tensor2D::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        let mut owner = Vec::with_capacity(n);
        for (b, sample) in batch.iter().enumerate() {
            if sample.visual.d_model() != d || sample.raw.num_layers() != s {
                return Err(Error::dim("sample does not match the model dimensions"));
            }
            if sample.visual.num_tokens() != sample.raw.shape().num_merged() {
                return Err(Error::dim("visual and bank token counts differ"));
            }
            for i in 0..sample.num_tokens() {
                visual.row_mut(owner.len()).copy_from_slice(sample.visual.matrix.row(i));
                owner.push((b, i));
            }
            labels.extend_from_slice(&sample.labels);
        }
        check_labels(&labels, n, self.probe.num_classes)?;

        // allocation
        let mode = self.head.allocation();
        let k = self.head.effective_top_k();
        let allocs: Vec<Allocation> = match mode {
            AllocationMode::TokenAdaptive => {
                let mut logits = Tensor2D::zeros(n, s);
                gemm(1.0, &visual, false, store.value(self.head.router_w), false, 0.0, &mut logits)?;
                logits.add_row_broadcast(store.value(self.head.router_b).as_slice())?;
                (0..n)
                    .map(|t| sparse_allocate(logits.row(t), k))
                    .collect::<Result<_>>()?
            }
            AllocationMode::Global => {
                vec![sparse_allocate(store.value(self.head.global_logits).as_slice(), k)?; n]
            }
            AllocationMode::Uniform => vec![
                Allocation {
                    selected: (0..s).collect(),
                    weights: vec![1.0 / s as f64; s],
                };
                n
            ],
        };

        // routed bank entries, ascending layer order per token
        let mut rows = Vec::new();
        let mut row_of = Vec::new();
        for (t, a) in allocs.iter().enumerate() {
            let (b, i) = owner[t];
            for l in 0..s {
                if a.weights[l] != 0.0 {
                    rows.push(BankRow {
                        stack: &batch[b].raw,
                        layer: l,
                        token: i,
                    });
                    row_of.push((t, l));
                }
            }
        }
        // weights sum to one, so aggregation commutes with the projector's output layer
        let encoded = self.bank.encode_hidden(store, &rows)?;
        let mut h_bar = Tensor2D::zeros(n, encoded.hidden.cols());
        for (m, &(t, l)) in row_of.iter().enumerate() {
            let a = allocs[t].weights[l];
            for (o, v) in h_bar.row_mut(t).iter_mut().zip(encoded.hidden.row(m)) {
                *o += a * v;
            }
        }
        let g = self.bank.output_layer(store, &h_bar)?;

        // injection and probe
        let position = self.head.position;
        let gate = store.value(self.head.fusion_gate).get(0, 0);
        let x = match position {
            GroundingPosition::PreReasoning => {
                let mut x = visual.clone();
                gemm(1.0, &g, false, store.value(self.head.w_o), true, 1.0, &mut x)?;
                x
            }
            GroundingPosition::InputFusion => {
                let mut x = visual.clone();
                for (o, e) in x.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *o += gate * e;
                }
                x
            }
            GroundingPosition::DecoderFusion => probe_input(&GroundedTokens {
                matrix: visual.clone(),
                late_evidence: Some(g.clone()),
            })?,
        };
        if x.cols() != self.probe.in_dim {
            return Err(Error::dim("probe width does not match the grounding position"));
        }
        let mut dz = Tensor2D::zeros(n, self.probe.num_classes);
        gemm(1.0, &x, false, store.value(self.probe.w), false, 0.0, &mut dz)?;
        dz.add_row_broadcast(store.value(self.probe.b).as_slice())?;
        let loss = cross_entropy_in_place(&mut dz, &labels) / n as f64;
        for (t, &y) in labels.iter().enumerate() {
            dz.row_mut(t)[y] -= 1.0;
        }
        dz.scale(1.0 / n as f64);

        // backward
        dz.accumulate_col_sums(store.grad_mut(self.probe.b)?.as_mut_slice());
        gemm(1.0, &x, true, &dz, false, 1.0, store.grad_mut(self.probe.w)?)?;
        let mut dx = Tensor2D::zeros(n, self.probe.in_dim);
        gemm(1.0, &dz, false, store.value(self.probe.w), true, 0.0, &mut dx)?;

        let mut dg = Tensor2D::zeros(n, d);
        match position {
            GroundingPosition::PreReasoning => {
                gemm(1.0, &dx, true, &g, false, 1.0, store.grad_mut(self.head.w_o)?)?;
                gemm(1.0, &dx, false, store.value(self.head.w_o), false, 0.0, &mut dg)?;
            }
            GroundingPosition::InputFusion => {
                let dgate: f64 = dx.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
                let slot = store.grad_mut(self.head.fusion_gate)?;
                slot.set(0, 0, slot.get(0, 0) + dgate);
                for (o, v) in dg.as_mut_slice().iter_mut().zip(dx.as_slice()) {
                    *o = gate * v;
                }
            }
            GroundingPosition::DecoderFusion => {
                for t in 0..n {
                    dg.row_mut(t).copy_from_slice(&dx.row(t)[d..]);
                }
            }
        }

        let d_h_bar = self.bank.output_layer_backward(store, &h_bar, &dg)?;
        let b2 = store.value(self.bank.projector.b2).as_slice();
        let dg_b2: Vec<f64> = (0..n)
            .map(|t| dg.row(t).iter().zip(b2).map(|(p, q)| p * q).sum())
            .collect();
        let mut d_hidden = Tensor2D::zeros(rows.len(), encoded.hidden.cols());
        let mut d_alpha = Tensor2D::zeros(n, s);
        for (m, &(t, l)) in row_of.iter().enumerate() {
            let a = allocs[t].weights[l];
            let dh = d_h_bar.row(t);
            let hm = encoded.hidden.row(m);
            d_alpha.set(t, l, dh.iter().zip(hm).map(|(p, q)| p * q).sum::<f64>() + dg_b2[t]);
            for (o, v) in d_hidden.row_mut(m).iter_mut().zip(dh) {
                *o = a * v;
            }
        }
        self.bank.encode_hidden_backward(store, &encoded, &d_hidden)?;

        match mode {
            AllocationMode::TokenAdaptive => {
                let mut d_logits = Tensor2D::zeros(n, s);
                for t in 0..n {
                    let dl = sparse_allocate_backward(&allocs[t], d_alpha.row(t));
                    d_logits.row_mut(t).copy_from_slice(&dl);
                }
                d_logits.accumulate_col_sums(store.grad_mut(self.head.router_b)?.as_mut_slice());
                gemm(1.0, &visual, true, &d_logits, false, 1.0, store.grad_mut(self.head.router_w)?)?;
            }
            AllocationMode::Global => {
                let mut summed = vec![0.0; s];
                d_alpha.accumulate_col_sums(&mut summed);
                let dl = sparse_allocate_backward(&allocs[0], &summed);
                let slot = store.grad_mut(self.head.global_logits)?.as_mut_slice();
                for (o, v) in slot.iter_mut().zip(&dl) {
                    *o += v;
                }
            }
            AllocationMode::Uniform => {}
        }
        Ok(loss)
    }
}

/// Gradient-check objective: reference forward for the loss, fused path for gradients.
pub struct BatchObjective<'a> {
    pub model: &'a GroundingModel,
    pub batch: Vec<&'a ProxySample>,
}

impl Objective for BatchObjective<'_> {
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        self.model.batch_loss(params, &self.batch)
    }

    fn loss_and_grad(&self, params: &mut ParamStore) -> Result<f64> {
        self.model.batch_loss_and_grad(params, &self.batch)
    }
}
