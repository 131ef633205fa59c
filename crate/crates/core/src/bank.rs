//! Multi-level geometry bank: layer selection, per-layer normalization, 2×2 spatial
//! merge and a projector shared by every layer.
//!
//! Token layout is frame-major, then row-major within a frame. Raw patch token
//! `(frame, row, col)` lives at row `frame·grid_h·grid_w + row·grid_w + col` of each
//! layer grid; merged token `(frame, r, c)` covers raw rows `2r..2r+2` and columns
//! `2c..2c+2` and lives at `frame·N_p + r·(grid_w/2) + c`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    gelu, gelu_grad, gelu_with_grad, gemm, normalize_into, ParamId, ParamStore, Tensor2D,
    DEFAULT_LN_EPS,
};

/// Which encoder layers enter the bank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStrategy {
    FirstHalf,
    Uniform,
    LatterHalf,
    Explicit(Vec<usize>),
}

impl LayerStrategy {
    pub fn label(&self) -> String {
        match self {
            LayerStrategy::FirstHalf => "first_half".into(),
            LayerStrategy::Uniform => "uniform".into(),
            LayerStrategy::LatterHalf => "latter_half".into(),
            LayerStrategy::Explicit(ix) => format!("explicit{ix:?}"),
        }
    }
}

/// Picks `bank_size` strictly increasing layer ids out of `num_encoder_layers`.
///
/// `Uniform` splits the encoder into `bank_size` contiguous blocks of near-equal length
/// and keeps the last layer of each block, so the deepest layer is always included.
pub fn select_layers(
    num_encoder_layers: usize,
    strategy: &LayerStrategy,
    bank_size: usize,
) -> Result<Vec<usize>> {
    if bank_size == 0 || bank_size > num_encoder_layers {
        return Err(Error::config(format!(
            "bank_size {bank_size} must lie in [1, {num_encoder_layers}]"
        )));
    }
    let n = num_encoder_layers;
    let layers = match strategy {
        LayerStrategy::FirstHalf => (0..bank_size).collect(),
        LayerStrategy::LatterHalf => (n - bank_size..n).collect(),
        LayerStrategy::Uniform => (0..bank_size).map(|j| (j + 1) * n / bank_size - 1).collect(),
        LayerStrategy::Explicit(ix) => {
            if ix.len() != bank_size {
                return Err(Error::config(format!(
                    "explicit layer list has {} entries, bank_size is {bank_size}",
                    ix.len()
                )));
            }
            if ix.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config("explicit layer list must be strictly increasing"));
            }
            if ix.iter().any(|&l| l >= n) {
                return Err(Error::config(format!(
                    "explicit layer list exceeds encoder depth {n}"
                )));
            }
            ix.clone()
        }
    };
    Ok(layers)
}

/// Frame count and per-frame patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub num_frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl GridShape {
    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_tokens(&self) -> usize {
        self.num_frames * self.tokens_per_frame()
    }

    /// Merged tokens per frame, `N_p`.
    pub fn merged_per_frame(&self) -> usize {
        (self.grid_h / 2) * (self.grid_w / 2)
    }

    pub fn num_merged(&self) -> usize {
        self.num_frames * self.merged_per_frame()
    }

    pub fn merged_shape(&self) -> (usize, usize) {
        (self.grid_h / 2, self.grid_w / 2)
    }

    fn check_even(&self) -> Result<()> {
        if self.grid_h % 2 != 0 || self.grid_w % 2 != 0 {
            return Err(Error::dim(format!(
                "2x2 merge needs even grid dims, got {}x{}",
                self.grid_h, self.grid_w
            )));
        }
        Ok(())
    }

    /// Raw rows of the 2×2 block under merged token `token`, in TL, TR, BL, BR order.
    #[inline]
    pub fn block_rows(&self, token: usize) -> [usize; 4] {
        let per = self.merged_per_frame();
        let half_w = self.grid_w / 2;
        let frame = token / per;
        let within = token % per;
        let (r, c) = (within / half_w, within % half_w);
        let base = frame * self.tokens_per_frame();
        let top = base + 2 * r * self.grid_w + 2 * c;
        let bottom = top + self.grid_w;
        [top, top + 1, bottom, bottom + 1]
    }
}

/// Frozen per-layer encoder features on the patch grid, camera/register tokens removed.
#[derive(Clone, Debug, PartialEq)]
pub struct RawLayerStack {
    layer_indices: Vec<usize>,
    shape: GridShape,
    d_geo: usize,
    layers: Vec<Tensor2D>,
}

impl RawLayerStack {
    pub fn new(
        layer_indices: Vec<usize>,
        shape: GridShape,
        d_geo: usize,
        layers: Vec<Tensor2D>,
    ) -> Result<Self> {
        if layer_indices.is_empty() || layer_indices.len() != layers.len() {
            return Err(Error::dim(format!(
                "{} layer indices for {} layer grids",
                layer_indices.len(),
                layers.len()
            )));
        }
        if layer_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("layer indices must be strictly increasing"));
        }
        if shape.num_frames == 0 || shape.grid_h == 0 || shape.grid_w == 0 || d_geo == 0 {
            return Err(Error::dim("frames, grid dims and d_geo must all be >= 1"));
        }
        shape.check_even()?;
        for (pos, layer) in layers.iter().enumerate() {
            if layer.shape() != (shape.num_tokens(), d_geo) {
                return Err(Error::dim(format!(
                    "layer {pos} has shape {:?}, expected ({}, {d_geo})",
                    layer.shape(),
                    shape.num_tokens()
                )));
            }
            if !layer.is_finite() {
                return Err(Error::Numeric(format!("layer {pos} contains non-finite values")));
            }
        }
        Ok(Self {
            layer_indices,
            shape,
            d_geo,
            layers,
        })
    }

    pub fn layer_indices(&self) -> &[usize] {
        &self.layer_indices
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn d_geo(&self) -> usize {
        self.d_geo
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, pos: usize) -> &Tensor2D {
        &self.layers[pos]
    }

    pub fn layers(&self) -> &[Tensor2D] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Tensor2D> {
        self.layers
    }
}

/// Aligned evidence `G^(l)` at visual-token resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryBank {
    pub layer_indices: Vec<usize>,
    pub num_frames: usize,
    pub tokens_per_frame: usize,
    pub d_model: usize,
    pub layers: Vec<Tensor2D>,
}

impl GeometryBank {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_frames * self.tokens_per_frame
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Concatenate the four sub-tokens (TL, TR, BL, BR) into one `4·d_geo` vector.
    #[default]
    Concat,
    /// Average the four sub-tokens.
    Mean,
}

impl MergeMode {
    pub fn output_dim(self, d_geo: usize) -> usize {
        match self {
            MergeMode::Concat => 4 * d_geo,
            MergeMode::Mean => d_geo,
        }
    }
}

/// Two-layer GELU perceptron `x -> W2ᵀ gelu(W1ᵀ x + b1) + b2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Projector {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

#[derive(Clone, Debug)]
pub struct ProjectorCache {
    input: Tensor2D,
    pre_activation: Tensor2D,
    hidden: Tensor2D,
}

impl Projector {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w1 = store.add(
            format!("{prefix}.w1"),
            Tensor2D::random_normal(in_dim, hidden, (1.0 / in_dim as f64).sqrt(), rng),
        )?;
        let b1 = store.add(format!("{prefix}.b1"), Tensor2D::zeros(1, hidden))?;
        let w2 = store.add(
            format!("{prefix}.w2"),
            Tensor2D::random_normal(hidden, out_dim, (1.0 / hidden as f64).sqrt(), rng),
        )?;
        let b2 = store.add(format!("{prefix}.b2"), Tensor2D::zeros(1, out_dim))?;
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            in_dim,
            hidden,
            out_dim,
        })
    }

    pub fn forward(&self, store: &ParamStore, input: &Tensor2D) -> Result<Tensor2D> {
        self.forward_cached(store, input.clone()).map(|(y, _)| y)
    }

    pub fn forward_cached(
        &self,
        store: &ParamStore,
        input: Tensor2D,
    ) -> Result<(Tensor2D, ProjectorCache)> {
        if input.cols() != self.in_dim {
            return Err(Error::dim(format!(
                "projector expects {} input features, got {}",
                self.in_dim,
                input.cols()
            )));
        }
        let rows = input.rows();
        let mut pre = Tensor2D::zeros(rows, self.hidden);
        gemm(1.0, &input, false, store.value(self.w1), false, 0.0, &mut pre)?;
        pre.add_row_broadcast(store.value(self.b1).as_slice())?;
        let mut hidden = pre.clone();
        hidden.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
        let mut out = Tensor2D::zeros(rows, self.out_dim);
        gemm(1.0, &hidden, false, store.value(self.w2), false, 0.0, &mut out)?;
        out.add_row_broadcast(store.value(self.b2).as_slice())?;
        Ok((
            out,
            ProjectorCache {
                input,
                pre_activation: pre,
                hidden,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input rows.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &ProjectorCache,
        d_out: &Tensor2D,
    ) -> Result<Tensor2D> {
        let rows = d_out.rows();
        d_out.accumulate_col_sums(store.grad_mut(self.b2)?.as_mut_slice());
        gemm(1.0, &cache.hidden, true, d_out, false, 1.0, store.grad_mut(self.w2)?)?;

        let mut d_pre = Tensor2D::zeros(rows, self.hidden);
        gemm(1.0, d_out, false, store.value(self.w2), true, 0.0, &mut d_pre)?;
        for (d, a) in d_pre
            .as_mut_slice()
            .iter_mut()
            .zip(cache.pre_activation.as_slice())
        {
            *d *= gelu_grad(*a);
        }
        d_pre.accumulate_col_sums(store.grad_mut(self.b1)?.as_mut_slice());
        gemm(1.0, &cache.input, true, &d_pre, false, 1.0, store.grad_mut(self.w1)?)?;

        let mut d_in = Tensor2D::zeros(rows, self.in_dim);
        gemm(1.0, &d_pre, false, store.value(self.w1), true, 0.0, &mut d_in)?;
        Ok(d_in)
    }
}

/// Learnable bank parameters: one LN affine per selected layer plus the shared projector.
#[derive(Clone, Debug, PartialEq)]
pub struct BankParams {
    pub gammas: Vec<ParamId>,
    pub betas: Vec<ParamId>,
    pub projector: Projector,
    pub merge: MergeMode,
    pub eps: f64,
    pub d_geo: usize,
}

impl BankParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_layers: usize,
        d_geo: usize,
        d_model: usize,
        merge: MergeMode,
        rng: &mut R,
    ) -> Result<Self> {
        let mut gammas = Vec::with_capacity(num_layers);
        let mut betas = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            gammas.push(store.add(format!("bank.gamma.{l}"), Tensor2D::filled(1, d_geo, 1.0))?);
            betas.push(store.add(format!("bank.beta.{l}"), Tensor2D::zeros(1, d_geo))?);
        }
        let projector =
            Projector::init(store, "bank.phi", merge.output_dim(d_geo), d_model, d_model, rng)?;
        Ok(Self {
            gammas,
            betas,
            projector,
            merge,
            eps: DEFAULT_LN_EPS,
            d_geo,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.gammas.len()
    }

    pub fn d_model(&self) -> usize {
        self.projector.out_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let p = &self.projector;
        let mut ids: Vec<ParamId> = self.gammas.iter().chain(&self.betas).copied().collect();
        ids.extend([p.w1, p.b1, p.w2, p.b2]);
        ids
    }
}

/// Applies layer norm with this layer's affine to every token of `z`.
pub fn normalize_layer(z: &Tensor2D, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor2D> {
    if gamma.len() != z.cols() || beta.len() != z.cols() {
        return Err(Error::dim(format!(
            "affine length {}/{} does not match feature dim {}",
            gamma.len(),
            beta.len(),
            z.cols()
        )));
    }
    let mut out = Tensor2D::zeros(z.rows(), z.cols());
    for t in 0..z.rows() {
        let row = out.row_mut(t);
        normalize_into(z.row(t), eps, row);
        for (i, v) in row.iter_mut().enumerate() {
            *v = gamma[i] * *v + beta[i];
        }
    }
    Ok(out)
}

/// Collapses each non-overlapping 2×2 block of every frame into one token.
pub fn spatial_merge_2x2(grid: &Tensor2D, shape: GridShape, mode: MergeMode) -> Result<Tensor2D> {
    shape.check_even()?;
    if grid.rows() != shape.num_tokens() {
        return Err(Error::dim(format!(
            "grid has {} tokens, shape implies {}",
            grid.rows(),
            shape.num_tokens()
        )));
    }
    let d = grid.cols();
    let mut out = Tensor2D::zeros(shape.num_merged(), mode.output_dim(d));
    for t in 0..shape.num_merged() {
        let block = shape.block_rows(t);
        let dst = out.row_mut(t);
        match mode {
            MergeMode::Concat => {
                for (k, &src) in block.iter().enumerate() {
                    dst[k * d..(k + 1) * d].copy_from_slice(grid.row(src));
                }
            }
            MergeMode::Mean => {
                for &src in &block {
                    for (o, v) in dst.iter_mut().zip(grid.row(src)) {
                        *o += 0.25 * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Applies the shared projector token-wise.
pub fn project_layer(merged: &Tensor2D, projector: &Projector, store: &ParamStore) -> Result<Tensor2D> {
    projector.forward(store, merged)
}

/// Normalize, merge and project every layer of `raw`.
pub fn build_bank(raw: &RawLayerStack, params: &BankParams, store: &ParamStore) -> Result<GeometryBank> {
    if params.num_layers() != raw.num_layers() || params.d_geo != raw.d_geo() {
        return Err(Error::dim(format!(
            "bank params sized for {} layers x {} dims, stack has {} x {}",
            params.num_layers(),
            params.d_geo,
            raw.num_layers(),
            raw.d_geo()
        )));
    }
    let shape = raw.shape();
    let layers = (0..raw.num_layers())
        .map(|l| {
            let normed = normalize_layer(
                raw.layer(l),
                store.value(params.gammas[l]).as_slice(),
                store.value(params.betas[l]).as_slice(),
                params.eps,
            )?;
            let merged = spatial_merge_2x2(&normed, shape, params.merge)?;
            project_layer(&merged, &params.projector, store)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GeometryBank {
        layer_indices: raw.layer_indices().to_vec(),
        num_frames: shape.num_frames,
        tokens_per_frame: shape.merged_per_frame(),
        d_model: params.d_model(),
        layers,
    })
}

/// One bank entry to evaluate: merged token `token` of layer position `layer` in `stack`.
#[derive(Clone, Copy, Debug)]
pub struct BankRow<'a> {
    pub stack: &'a RawLayerStack,
    pub layer: usize,
    pub token: usize,
}

/// Projector hidden activations `gelu(W1ᵀ x + b1)` for an arbitrary set of bank entries.
///
/// Training only needs the routed `(token, layer)` pairs, and because the routing weights
/// sum to one the second projector layer can be applied after aggregation. Rows are
/// processed in per-layer groups so the layer's norm affine folds into `W1`.
#[derive(Clone, Debug)]
pub struct HiddenRows {
    /// `rows x hidden`, in request order.
    pub hidden: Tensor2D,
    groups: Vec<LayerGroup>,
}

#[derive(Clone, Debug)]
struct LayerGroup {
    layer: usize,
    rows: Vec<usize>,
    /// Standardized merged inputs before the affine, `rows x in_dim`.
    xhat: Tensor2D,
    /// `gelu'` at the pre-activations.
    slope: Tensor2D,
}

impl BankParams {
    fn affine_tiled(&self, store: &ParamStore, layer: usize) -> (Vec<f64>, Vec<f64>) {
        let gamma = store.value(self.gammas[layer]).as_slice();
        let beta = store.value(self.betas[layer]).as_slice();
        let reps = self.merge.output_dim(self.d_geo) / self.d_geo;
        (gamma.repeat(reps), beta.repeat(reps))
    }

    pub fn encode_hidden(&self, store: &ParamStore, rows: &[BankRow<'_>]) -> Result<HiddenRows> {
        let d = self.d_geo;
        let p = &self.projector;
        let mut by_layer: Vec<Vec<usize>> = vec![Vec::new(); self.num_layers()];
        for (i, row) in rows.iter().enumerate() {
            if row.layer >= self.num_layers() || row.stack.d_geo() != d {
                return Err(Error::dim(format!(
                    "bank row refers to layer {} of a {}-dim stack; params cover {} layers of {d} dims",
                    row.layer,
                    row.stack.d_geo(),
                    self.num_layers()
                )));
            }
            if row.token >= row.stack.shape().num_merged() {
                return Err(Error::Index(format!(
                    "merged token {} out of range {}",
                    row.token,
                    row.stack.shape().num_merged()
                )));
            }
            by_layer[row.layer].push(i);
        }

        let w1 = store.value(p.w1);
        let b1 = store.value(p.b1).as_slice();
        let mut hidden = Tensor2D::zeros(rows.len(), p.hidden);
        let mut groups = Vec::new();
        let mut sub = vec![0.0; d];
        for (layer, members) in by_layer.into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let mut xhat = Tensor2D::zeros(members.len(), p.in_dim);
            for (k, &i) in members.iter().enumerate() {
                let row = &rows[i];
                let grid = row.stack.layer(layer);
                let dst = xhat.row_mut(k);
                for (q, &src) in row.stack.shape().block_rows(row.token).iter().enumerate() {
                    match self.merge {
                        MergeMode::Concat => {
                            normalize_into(grid.row(src), self.eps, &mut dst[q * d..(q + 1) * d]);
                        }
                        MergeMode::Mean => {
                            normalize_into(grid.row(src), self.eps, &mut sub);
                            for (o, v) in dst.iter_mut().zip(&sub) {
                                *o += 0.25 * v;
                            }
                        }
                    }
                }
            }
            // (gamma ⊙ x̂ + beta) W1 + b1 = x̂ (diag(gamma) W1) + (beta W1 + b1)
            let (gamma, beta) = self.affine_tiled(store, layer);
            let mut w_scaled = w1.clone();
            let mut bias = b1.to_vec();
            for (i, (g, b)) in gamma.iter().zip(&beta).enumerate() {
                for (h, w) in w_scaled.row_mut(i).iter_mut().enumerate() {
                    bias[h] += b * *w;
                    *w *= g;
                }
            }
            let mut pre = Tensor2D::zeros(members.len(), p.hidden);
            gemm(1.0, &xhat, false, &w_scaled, false, 0.0, &mut pre)?;
            pre.add_row_broadcast(&bias)?;
            let mut slope = Tensor2D::zeros(members.len(), p.hidden);
            for (k, &i) in members.iter().enumerate() {
                let out = hidden.row_mut(i);
                for ((o, s), &a) in out.iter_mut().zip(slope.row_mut(k)).zip(pre.row(k)) {
                    let (y, dy) = gelu_with_grad(a);
                    *o = y;
                    *s = dy;
                }
            }
            groups.push(LayerGroup {
                layer,
                rows: members,
                xhat,
                slope,
            });
        }
        Ok(HiddenRows { hidden, groups })
    }

    /// Second projector layer `h W2 + b2`.
    pub fn output_layer(&self, store: &ParamStore, hidden: &Tensor2D) -> Result<Tensor2D> {
        let p = &self.projector;
        let mut out = Tensor2D::zeros(hidden.rows(), p.out_dim);
        gemm(1.0, hidden, false, store.value(p.w2), false, 0.0, &mut out)?;
        out.add_row_broadcast(store.value(p.b2).as_slice())?;
        Ok(out)
    }

    /// Accumulates `W2`/`b2` gradients of [`BankParams::output_layer`] and returns the
    /// gradient w.r.t. `hidden`.
    pub fn output_layer_backward(
        &self,
        store: &mut ParamStore,
        hidden: &Tensor2D,
        d_out: &Tensor2D,
    ) -> Result<Tensor2D> {
        let p = &self.projector;
        d_out.accumulate_col_sums(store.grad_mut(p.b2)?.as_mut_slice());
        gemm(1.0, hidden, true, d_out, false, 1.0, store.grad_mut(p.w2)?)?;
        let mut d_hidden = Tensor2D::zeros(hidden.rows(), p.hidden);
        gemm(1.0, d_out, false, store.value(p.w2), true, 0.0, &mut d_hidden)?;
        Ok(d_hidden)
    }

    /// Accumulates `W1`, `b1` and norm-affine gradients from `d_hidden` (rows in request order).
    pub fn encode_hidden_backward(
        &self,
        store: &mut ParamStore,
        encoded: &HiddenRows,
        d_hidden: &Tensor2D,
    ) -> Result<()> {
        let p = self.projector;
        let d = self.d_geo;
        let reps = p.in_dim / d;
        for group in &encoded.groups {
            let mut d_pre = Tensor2D::zeros(group.rows.len(), p.hidden);
            for (k, &i) in group.rows.iter().enumerate() {
                for ((o, g), s) in d_pre.row_mut(k).iter_mut().zip(d_hidden.row(i)).zip(group.slope.row(k)) {
                    *o = g * s;
                }
            }
            // M = x̂ᵀ d_pre carries W1 and both affine gradients
            let mut m = Tensor2D::zeros(p.in_dim, p.hidden);
            gemm(1.0, &group.xhat, true, &d_pre, false, 0.0, &mut m)?;
            let mut col = vec![0.0; p.hidden];
            d_pre.accumulate_col_sums(&mut col);
            add_into(store.grad_mut(p.b1)?.as_mut_slice(), &col);

            let (gamma, beta) = self.affine_tiled(store, group.layer);
            let w1 = store.value(p.w1).clone();
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for i in 0..p.in_dim {
                let w = w1.row(i);
                dgamma[i % d] += w.iter().zip(m.row(i)).map(|(a, b)| a * b).sum::<f64>();
                dbeta[i % d] += w.iter().zip(&col).map(|(a, b)| a * b).sum::<f64>();
            }
            let gw1 = store.grad_mut(p.w1)?;
            for i in 0..p.in_dim {
                for ((o, mv), c) in gw1.row_mut(i).iter_mut().zip(m.row(i)).zip(&col) {
                    *o += gamma[i] * mv + beta[i] * c;
                }
            }
            debug_assert_eq!(reps * d, p.in_dim);
            add_into(store.grad_mut(self.gammas[group.layer])?.as_mut_slice(), &dgamma);
            add_into(store.grad_mut(self.betas[group.layer])?.as_mut_slice(), &dbeta);
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
