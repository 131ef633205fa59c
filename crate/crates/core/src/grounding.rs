//! Token-adaptive evidence allocation and residual grounding.
//!
//! Each visual token scores the bank layers, keeps its `top_k` best, renormalizes over
//! them and adds the projected mixture back onto itself through `W_o`, which starts at
//! zero so the whole branch is an identity map at initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::GeometryBank;
use crate::error::{Error, Result};
use crate::numerics::{gemm, softmax_in_place, ParamId, ParamStore, Tensor2D};

/// Visual tokens `V`, frame-major, `N_p` merged tokens per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokens {
    pub num_frames: usize,
    pub tokens_per_frame: usize,
    pub matrix: Tensor2D,
}

impl VisualTokens {
    pub fn new(num_frames: usize, tokens_per_frame: usize, matrix: Tensor2D) -> Result<Self> {
        if matrix.rows() != num_frames * tokens_per_frame {
            return Err(Error::dim(format!(
                "{} token rows for {num_frames} frames x {tokens_per_frame} tokens",
                matrix.rows()
            )));
        }
        if !matrix.is_finite() {
            return Err(Error::Numeric("visual tokens contain non-finite values".into()));
        }
        Ok(Self {
            num_frames,
            tokens_per_frame,
            matrix,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.matrix.rows()
    }

    pub fn d_model(&self) -> usize {
        self.matrix.cols()
    }
}

/// How routing weights are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationMode {
    /// Per-token router logits, top-K masked softmax.
    TokenAdaptive,
    /// One learned logit vector shared by all tokens, top-K masked softmax.
    Global,
    /// `1/|S|` on every layer.
    Uniform,
}

impl AllocationMode {
    pub fn label(self) -> &'static str {
        match self {
            AllocationMode::TokenAdaptive => "token_adaptive",
            AllocationMode::Global => "global",
            AllocationMode::Uniform => "uniform",
        }
    }
}

/// Where the evidence enters the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingPosition {
    /// `v' = v + W_o g` with the head's allocation mode, before the probe.
    PreReasoning,
    /// Uniformly averaged evidence added to `v` through a scalar gate, no `W_o`.
    InputFusion,
    /// Tokens untouched; globally weighted evidence concatenated at the probe input.
    DecoderFusion,
}

impl GroundingPosition {
    pub fn label(self) -> &'static str {
        match self {
            GroundingPosition::PreReasoning => "pre_reasoning",
            GroundingPosition::InputFusion => "input_fusion",
            GroundingPosition::DecoderFusion => "decoder_fusion",
        }
    }

    /// Allocation actually used at this position.
    pub fn allocation(self, mode: AllocationMode) -> AllocationMode {
        match self {
            GroundingPosition::PreReasoning => mode,
            GroundingPosition::InputFusion => AllocationMode::Uniform,
            GroundingPosition::DecoderFusion => AllocationMode::Global,
        }
    }
}

/// Router, allocation settings and the residual output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingHead {
    /// `D x |S|`
    pub router_w: ParamId,
    /// `1 x |S|`
    pub router_b: ParamId,
    /// `1 x |S|`, used by global allocation.
    pub global_logits: ParamId,
    /// `D x D`, `v' = v + W_o g`.
    pub w_o: ParamId,
    /// `1 x 1` gate for input-level fusion.
    pub fusion_gate: ParamId,
    pub mode: AllocationMode,
    pub top_k: usize,
    pub position: GroundingPosition,
    pub d_model: usize,
    pub num_layers: usize,
}

impl GroundingHead {
    /// Router weights `N(0, router_std²)`, zero router bias, zero global logits, zero `W_o`
    /// and zero fusion gate.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d_model: usize,
        num_layers: usize,
        mode: AllocationMode,
        top_k: usize,
        position: GroundingPosition,
        router_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if top_k == 0 {
            return Err(Error::config("top_k must be >= 1"));
        }
        if num_layers == 0 {
            return Err(Error::config("the bank needs at least one layer"));
        }
        Ok(Self {
            router_w: store.add(
                "head.router_w",
                Tensor2D::random_normal(d_model, num_layers, router_std, rng),
            )?,
            router_b: store.add("head.router_b", Tensor2D::zeros(1, num_layers))?,
            global_logits: store.add("head.global_logits", Tensor2D::zeros(1, num_layers))?,
            w_o: store.add("head.w_o", Tensor2D::zeros(d_model, d_model))?,
            fusion_gate: store.add("head.fusion_gate", Tensor2D::zeros(1, 1))?,
            mode,
            top_k,
            position,
            d_model,
            num_layers,
        })
    }

    pub fn allocation(&self) -> AllocationMode {
        self.position.allocation(self.mode)
    }

    /// Decoder-side fusion weighs every layer with its global softmax; a top-K cut of
    /// zero-initialized global logits would pin the first K layers forever.
    pub fn effective_top_k(&self) -> usize {
        match self.position {
            GroundingPosition::DecoderFusion => self.num_layers,
            _ => self.top_k,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.router_w,
            self.router_b,
            self.global_logits,
            self.w_o,
            self.fusion_gate,
        ]
    }
}

/// Sparse weights of one token.
#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    /// Selected layer positions, best first.
    pub selected: Vec<usize>,
    /// Dense `|S|` vector, zero outside `selected`.
    pub weights: Vec<f64>,
}

/// Routing result for every token.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingWeights {
    /// `tokens x |S|`; all zeros for uniform allocation.
    pub logits: Tensor2D,
    pub selected: Vec<Vec<usize>>,
    /// `tokens x |S|`
    pub weights: Tensor2D,
}

impl RoutingWeights {
    pub fn num_tokens(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.cols()
    }

    /// Highest-weight layer of each token (the first selected).
    pub fn top1(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s[0]).collect()
    }
}

/// Grounded tokens `V'`, plus the evidence deferred to the probe for decoder-side fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundedTokens {
    pub matrix: Tensor2D,
    pub late_evidence: Option<Tensor2D>,
}

/// Router logits `r_i = W_rᵀ v_i + b_r` for every token.
pub fn route(visual: &VisualTokens, head: &GroundingHead, store: &ParamStore) -> Result<Tensor2D> {
    let w = store.value(head.router_w);
    if visual.d_model() != w.rows() {
        return Err(Error::dim(format!(
            "router expects {} features, tokens have {}",
            w.rows(),
            visual.d_model()
        )));
    }
    let mut logits = Tensor2D::zeros(visual.num_tokens(), w.cols());
    gemm(1.0, &visual.matrix, false, w, false, 0.0, &mut logits)?;
    logits.add_row_broadcast(store.value(head.router_b).as_slice())?;
    Ok(logits)
}

/// Keeps the `min(top_k, |S|)` largest logits (ties go to the lower layer position) and
/// softmaxes over them; every other entry is exactly zero.
pub fn sparse_allocate(logits: &[f64], top_k: usize) -> Result<Allocation> {
    if logits.is_empty() {
        return Err(Error::dim("cannot allocate over an empty logit vector"));
    }
    if top_k == 0 {
        return Err(Error::config("top_k must be >= 1"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("router produced non-finite logits".into()));
    }
    let k = top_k.min(logits.len());
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // stable sort keeps lower positions first among equal logits
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order.truncate(k);
    let mut picked: Vec<f64> = order.iter().map(|&l| logits[l]).collect();
    softmax_in_place(&mut picked);
    let mut weights = vec![0.0; logits.len()];
    for (&l, &w) in order.iter().zip(&picked) {
        weights[l] = w;
    }
    Ok(Allocation {
        selected: order,
        weights,
    })
}

/// Logit gradient of [`sparse_allocate`]: softmax VJP on the selected entries, zero elsewhere.
pub fn sparse_allocate_backward(alloc: &Allocation, d_weights: &[f64]) -> Vec<f64> {
    let dot: f64 = alloc
        .selected
        .iter()
        .map(|&l| alloc.weights[l] * d_weights[l])
        .sum();
    let mut d_logits = vec![0.0; alloc.weights.len()];
    for &l in &alloc.selected {
        d_logits[l] = alloc.weights[l] * (d_weights[l] - dot);
    }
    d_logits
}

fn uniform_allocation(num_layers: usize) -> Allocation {
    Allocation {
        selected: (0..num_layers).collect(),
        weights: vec![1.0 / num_layers as f64; num_layers],
    }
}

/// Allocations for all `num_tokens` tokens under `mode`.
pub fn allocate(
    mode: AllocationMode,
    visual: &VisualTokens,
    head: &GroundingHead,
    store: &ParamStore,
) -> Result<RoutingWeights> {
    let t = visual.num_tokens();
    let s = head.num_layers;
    let (logits, allocs) = match mode {
        AllocationMode::TokenAdaptive => {
            let logits = route(visual, head, store)?;
            let allocs = (0..t)
                .map(|i| sparse_allocate(logits.row(i), head.effective_top_k()))
                .collect::<Result<Vec<_>>>()?;
            (logits, allocs)
        }
        AllocationMode::Global => {
            let shared = store.value(head.global_logits).as_slice();
            let alloc = sparse_allocate(shared, head.effective_top_k())?;
            let mut logits = Tensor2D::zeros(t, s);
            for i in 0..t {
                logits.row_mut(i).copy_from_slice(shared);
            }
            (logits, vec![alloc; t])
        }
        AllocationMode::Uniform => (Tensor2D::zeros(t, s), vec![uniform_allocation(s); t]),
    };
    let mut weights = Tensor2D::zeros(t, s);
    for (i, a) in allocs.iter().enumerate() {
        weights.row_mut(i).copy_from_slice(&a.weights);
    }
    Ok(RoutingWeights {
        logits,
        selected: allocs.into_iter().map(|a| a.selected).collect(),
        weights,
    })
}

/// `g_i = Σ_l α_i^(l) G_i^(l)` over the nonzero weights, in ascending layer order.
pub fn aggregate_evidence(weights: &[f64], bank: &GeometryBank, token: usize) -> Result<Vec<f64>> {
    if weights.len() != bank.num_layers() {
        return Err(Error::dim(format!(
            "{} weights for a {}-layer bank",
            weights.len(),
            bank.num_layers()
        )));
    }
    if token >= bank.num_tokens() {
        return Err(Error::Index(format!(
            "token {token} out of range for {} bank tokens",
            bank.num_tokens()
        )));
    }
    let mut g = vec![0.0; bank.d_model];
    for (l, &a) in weights.iter().enumerate() {
        if a != 0.0 {
            for (o, v) in g.iter_mut().zip(bank.layers[l].row(token)) {
                *o += a * v;
            }
        }
    }
    Ok(g)
}

/// `v' = v + W_o g`.
pub fn residual_ground(v: &[f64], g: &[f64], w_o: &Tensor2D) -> Result<Vec<f64>> {
    if w_o.shape() != (v.len(), g.len()) {
        return Err(Error::dim(format!(
            "W_o is {:?}, token dim {} and evidence dim {}",
            w_o.shape(),
            v.len(),
            g.len()
        )));
    }
    Ok(v.iter()
        .enumerate()
        .map(|(a, &x)| x + w_o.row(a).iter().zip(g).map(|(w, e)| w * e).sum::<f64>())
        .collect())
}

/// Full grounding step over a prebuilt bank.
pub fn ground_tokens(
    visual: &VisualTokens,
    bank: &GeometryBank,
    head: &GroundingHead,
    store: &ParamStore,
) -> Result<(GroundedTokens, RoutingWeights)> {
    if visual.num_tokens() != bank.num_tokens() {
        return Err(Error::dim(format!(
            "{} visual tokens but {} bank tokens",
            visual.num_tokens(),
            bank.num_tokens()
        )));
    }
    if visual.d_model() != bank.d_model || visual.d_model() != head.d_model {
        return Err(Error::dim(format!(
            "hidden dims disagree: tokens {}, bank {}, head {}",
            visual.d_model(),
            bank.d_model,
            head.d_model
        )));
    }
    if bank.num_layers() != head.num_layers {
        return Err(Error::dim(format!(
            "head routes over {} layers, bank has {}",
            head.num_layers,
            bank.num_layers()
        )));
    }
    let routing = allocate(head.allocation(), visual, head, store)?;
    let t = visual.num_tokens();
    let mut evidence = Tensor2D::zeros(t, bank.d_model);
    for i in 0..t {
        let g = aggregate_evidence(routing.weights.row(i), bank, i)?;
        evidence.row_mut(i).copy_from_slice(&g);
    }
    let grounded = match head.position {
        GroundingPosition::PreReasoning => {
            let w_o = store.value(head.w_o);
            let mut out = Tensor2D::zeros(t, head.d_model);
            for i in 0..t {
                let v = residual_ground(visual.matrix.row(i), evidence.row(i), w_o)?;
                out.row_mut(i).copy_from_slice(&v);
            }
            GroundedTokens {
                matrix: out,
                late_evidence: None,
            }
        }
        GroundingPosition::InputFusion => {
            let gate = store.value(head.fusion_gate).get(0, 0);
            let mut out = visual.matrix.clone();
            for (o, e) in out.as_mut_slice().iter_mut().zip(evidence.as_slice()) {
                *o += gate * e;
            }
            GroundedTokens {
                matrix: out,
                late_evidence: None,
            }
        }
        GroundingPosition::DecoderFusion => GroundedTokens {
            matrix: visual.matrix.clone(),
            late_evidence: Some(evidence),
        },
    };
    Ok((grounded, routing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{build_bank, BankParams, GridShape, MergeMode, RawLayerStack};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sparse_allocate_top2_example() {
        let a = sparse_allocate(&[2.0, 1.0, 0.5, -1.0], 2).unwrap();
        let e = std::f64::consts::E;
        let oracle = [e * e / (e * e + e), e / (e * e + e)];
        assert_eq!(a.selected, vec![0, 1]);
        assert!((a.weights[0] - oracle[0]).abs() < 1e-15);
        assert!((a.weights[1] - oracle[1]).abs() < 1e-15);
        assert!((a.weights[0] - 0.731059).abs() < 1e-6);
        assert_eq!(&a.weights[2..], &[0.0, 0.0]);
    }

    #[test]
    fn ties_go_to_lowest_position() {
        let a = sparse_allocate(&[0.3; 5], 2).unwrap();
        assert_eq!(a.selected, vec![0, 1]);
        assert_eq!(a.weights, vec![0.5, 0.5, 0.0, 0.0, 0.0]);
        let b = sparse_allocate(&[0.0, 1.0, 0.0, 1.0], 3).unwrap();
        assert_eq!(b.selected, vec![1, 3, 0]);
    }

    #[test]
    fn full_top_k_is_dense_softmax() {
        let r = [0.4, -1.3, 2.2, 0.0, 0.9];
        let dense = crate::numerics::softmax(&r).unwrap();
        for k in [5, 6, 100] {
            let a = sparse_allocate(&r, k).unwrap();
            for (x, y) in a.weights.iter().zip(&dense) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_logits_rejected() {
        assert!(matches!(sparse_allocate(&[], 2), Err(Error::Dimension(_))));
        assert!(matches!(sparse_allocate(&[1.0], 0), Err(Error::Config(_))));
    }

    #[test]
    fn sparse_backward_masks_unselected() {
        let a = sparse_allocate(&[2.0, 1.0, 0.5, -1.0], 2).unwrap();
        let d = sparse_allocate_backward(&a, &[0.3, -0.2, 5.0, 7.0]);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[3], 0.0);
        assert!((d[0] + d[1]).abs() < 1e-15);
        // central difference on the selected entries
        let loss = |r: &[f64]| {
            let w = sparse_allocate(r, 2).unwrap().weights;
            0.3 * w[0] - 0.2 * w[1] + 5.0 * w[2] + 7.0 * w[3]
        };
        for j in 0..2 {
            let h = 1e-6;
            let mut p = [2.0, 1.0, 0.5, -1.0];
            let mut m = p;
            p[j] += h;
            m[j] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - d[j]).abs() < 1e-9);
        }
    }

    fn tiny_bank(weights: [[f64; 2]; 2]) -> GeometryBank {
        GeometryBank {
            layer_indices: vec![0, 1],
            num_frames: 1,
            tokens_per_frame: 1,
            d_model: 2,
            layers: weights
                .iter()
                .map(|row| Tensor2D::row_vector(row))
                .collect(),
        }
    }

    #[test]
    fn aggregate_examples() {
        let bank = tiny_bank([[1.0, 0.0], [0.0, 2.0]]);
        assert_eq!(aggregate_evidence(&[0.75, 0.25], &bank, 0).unwrap(), vec![0.75, 0.5]);
        assert_eq!(aggregate_evidence(&[0.0, 1.0], &bank, 0).unwrap(), vec![0.0, 2.0]);
        assert!(matches!(
            aggregate_evidence(&[0.5, 0.5], &bank, 1),
            Err(Error::Index(_))
        ));
        assert!(aggregate_evidence(&[1.0], &bank, 0).is_err());
    }

    #[test]
    fn aggregate_is_linear_in_bank() {
        let b1 = tiny_bank([[1.0, -3.0], [0.5, 2.0]]);
        let b2 = tiny_bank([[0.25, 4.0], [-1.0, 1.5]]);
        let alpha = [0.3, 0.7];
        let (a, b) = (2.0, -0.5);
        let mut mix = b1.clone();
        for l in 0..2 {
            for (o, (x, y)) in mix.layers[l]
                .as_mut_slice()
                .iter_mut()
                .zip(b1.layers[l].as_slice().iter().zip(b2.layers[l].as_slice()))
            {
                *o = a * x + b * y;
            }
        }
        let g = aggregate_evidence(&alpha, &mix, 0).unwrap();
        let g1 = aggregate_evidence(&alpha, &b1, 0).unwrap();
        let g2 = aggregate_evidence(&alpha, &b2, 0).unwrap();
        for j in 0..2 {
            assert!((g[j] - (a * g1[j] + b * g2[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_examples() {
        let v = [0.3, -1.7, 2.5];
        let g = [4.0, 1.0, -2.0];
        assert_eq!(residual_ground(&v, &g, &Tensor2D::zeros(3, 3)).unwrap(), v.to_vec());
        assert_eq!(residual_ground(&v, &[0.0; 3], &Tensor2D::identity(3)).unwrap(), v.to_vec());
        assert_eq!(
            residual_ground(&v, &g, &Tensor2D::identity(3)).unwrap(),
            vec![4.3, -0.7, 0.5]
        );
        assert!(residual_ground(&v, &g, &Tensor2D::zeros(2, 3)).is_err());
    }

    struct Fixture {
        store: ParamStore,
        head: GroundingHead,
        bank: GeometryBank,
        visual: VisualTokens,
    }

    fn fixture(seed: u64, mode: AllocationMode, top_k: usize, position: GroundingPosition) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = GridShape { num_frames: 2, grid_h: 4, grid_w: 4 };
        let (s, d_geo, d) = (4, 3, 5);
        let raw = RawLayerStack::new(
            (0..s).collect(),
            shape,
            d_geo,
            (0..s)
                .map(|_| Tensor2D::random_normal(shape.num_tokens(), d_geo, 1.0, &mut rng))
                .collect(),
        )
        .unwrap();
        let mut store = ParamStore::new();
        let params = BankParams::init(&mut store, s, d_geo, d, MergeMode::Concat, &mut rng).unwrap();
        let head = GroundingHead::init(&mut store, d, s, mode, top_k, position, 1.0, &mut rng).unwrap();
        *store.value_mut(head.global_logits) = Tensor2D::random_normal(1, s, 1.0, &mut rng);
        *store.value_mut(head.router_b) = Tensor2D::random_normal(1, s, 1.0, &mut rng);
        let bank = build_bank(&raw, &params, &store).unwrap();
        let visual = VisualTokens::new(
            2,
            shape.merged_per_frame(),
            Tensor2D::random_normal(shape.num_merged(), d, 1.0, &mut rng),
        )
        .unwrap();
        Fixture { store, head, bank, visual }
    }

    const MODES: [AllocationMode; 3] = [
        AllocationMode::TokenAdaptive,
        AllocationMode::Global,
        AllocationMode::Uniform,
    ];

    #[test]
    fn route_examples() {
        let f = fixture(1, AllocationMode::TokenAdaptive, 2, GroundingPosition::PreReasoning);
        let mut store = f.store.clone();
        store.value_mut(f.head.router_w).fill(0.0);
        store.value_mut(f.head.router_b).fill(0.0);
        let r = route(&f.visual, &f.head, &store).unwrap();
        assert!(r.as_slice().iter().all(|v| *v == 0.0));

        // selection rows: logit l copies token coordinate l
        let w = store.value_mut(f.head.router_w);
        for l in 0..4 {
            w.set(l, l, 1.0);
        }
        let mut m = Tensor2D::zeros(2 * 4, 5);
        m.set(0, 2, 1.0);
        m.set(1, 2, 1.0);
        let visual = VisualTokens::new(2, 4, m).unwrap();
        let r = route(&visual, &f.head, &store).unwrap();
        assert_eq!(r.row(0), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(r.row(0), r.row(1));

        let bad = VisualTokens::new(1, 1, Tensor2D::zeros(1, 3)).unwrap();
        assert!(matches!(route(&bad, &f.head, &store), Err(Error::Dimension(_))));
    }

    #[test]
    fn uniform_equals_zero_router_dense_bitwise() {
        let f = fixture(2, AllocationMode::Uniform, 2, GroundingPosition::PreReasoning);
        let mut store = f.store.clone();
        *store.value_mut(f.head.w_o) = Tensor2D::random_normal(5, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let (uniform, _) = ground_tokens(&f.visual, &f.bank, &f.head, &store).unwrap();
        store.value_mut(f.head.router_w).fill(0.0);
        store.value_mut(f.head.router_b).fill(0.0);
        let mut head = f.head.clone();
        head.mode = AllocationMode::TokenAdaptive;
        head.top_k = 4;
        let (adaptive, _) = ground_tokens(&f.visual, &f.bank, &head, &store).unwrap();
        assert_eq!(uniform.matrix.as_slice(), adaptive.matrix.as_slice());
    }

    #[test]
    fn global_rows_identical() {
        let f = fixture(3, AllocationMode::Global, 2, GroundingPosition::PreReasoning);
        let (_, routing) = ground_tokens(&f.visual, &f.bank, &f.head, &f.store).unwrap();
        for i in 1..routing.num_tokens() {
            assert_eq!(routing.weights.row(i), routing.weights.row(0));
        }
    }

    #[test]
    fn identity_at_init_every_mode() {
        for seed in 0..4 {
            for mode in MODES {
                for position in [
                    GroundingPosition::PreReasoning,
                    GroundingPosition::InputFusion,
                    GroundingPosition::DecoderFusion,
                ] {
                    let f = fixture(seed, mode, 2, position);
                    let (out, _) = ground_tokens(&f.visual, &f.bank, &f.head, &f.store).unwrap();
                    assert_eq!(out.matrix, f.visual.matrix);
                }
            }
        }
    }

    #[test]
    fn token_count_mismatch_rejected() {
        let f = fixture(4, AllocationMode::TokenAdaptive, 2, GroundingPosition::PreReasoning);
        let visual = VisualTokens::new(1, 4, Tensor2D::zeros(4, 5)).unwrap();
        assert!(matches!(
            ground_tokens(&visual, &f.bank, &f.head, &f.store),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn layer_permutation_equivariance() {
        let perm = [2usize, 0, 3, 1];
        for mode in MODES {
            let f = fixture(7, mode, 2, GroundingPosition::PreReasoning);
            let mut store = f.store.clone();
            *store.value_mut(f.head.w_o) =
                Tensor2D::random_normal(5, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
            let (base, _) = ground_tokens(&f.visual, &f.bank, &f.head, &store).unwrap();

            let mut bank = f.bank.clone();
            bank.layers = perm.iter().map(|&p| f.bank.layers[p].clone()).collect();
            let mut permuted = store.clone();
            let w = store.value(f.head.router_w);
            let b = store.value(f.head.router_b);
            let gl = store.value(f.head.global_logits);
            let (mut w2, mut b2, mut gl2) = (w.clone(), b.clone(), gl.clone());
            for (new, &old) in perm.iter().enumerate() {
                for r in 0..w.rows() {
                    w2.set(r, new, w.get(r, old));
                }
                b2.set(0, new, b.get(0, old));
                gl2.set(0, new, gl.get(0, old));
            }
            *permuted.value_mut(f.head.router_w) = w2;
            *permuted.value_mut(f.head.router_b) = b2;
            *permuted.value_mut(f.head.global_logits) = gl2;
            let (out, _) = ground_tokens(&f.visual, &bank, &f.head, &permuted).unwrap();
            for (x, y) in out.matrix.as_slice().iter().zip(base.matrix.as_slice()) {
                assert!((x - y).abs() < 1e-12, "{mode:?}");
            }
        }
    }

    /// Multiples of 2^-20 with small magnitude: adding such a shift is exact.
    fn dyadic(range: i64) -> impl Strategy<Value = f64> {
        (-range..range).prop_map(|n| n as f64 / (1u64 << 20) as f64)
    }

    proptest! {
        #[test]
        fn allocation_contract(
            logits in prop::collection::vec(dyadic(8 << 20), 1..16),
            top_k in 1usize..20,
            shift in dyadic(64 << 20),
        ) {
            let a = sparse_allocate(&logits, top_k).unwrap();
            let expect = top_k.min(logits.len());
            prop_assert_eq!(a.selected.len(), expect);
            prop_assert_eq!(a.weights.iter().filter(|w| **w != 0.0).count(), expect);
            prop_assert!(a.weights.iter().all(|w| *w >= 0.0));
            prop_assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = sparse_allocate(&shifted, top_k).unwrap();
            prop_assert_eq!(&a.selected, &b.selected);
            prop_assert_eq!(
                a.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>(),
                b.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
