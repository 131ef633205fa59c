//! Invariant and gradient suites shared by `selftest`, `gradcheck` and the acceptance gate.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bank::{build_bank, GridShape, LayerStrategy, MergeMode, RawLayerStack};
use crate::bank_io::{decode_geobank, encode_geobank, GeobankHeader, HEADER_LEN};
use crate::error::{Error, Result};
use crate::grounding::{ground_tokens, sparse_allocate, AllocationMode, GroundingPosition};
use crate::numerics::{check_gradients, GradCheckReport, ParamStore, Tensor2D};
use crate::proxy::{generate_task, BatchObjective, GroundingModel, HeadConfig, ProxyConfig};

/// Outcome of one suite item.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            pass,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

pub const ALL_POSITIONS: [GroundingPosition; 3] = [
    GroundingPosition::PreReasoning,
    GroundingPosition::InputFusion,
    GroundingPosition::DecoderFusion,
];

pub const ALL_MODES: [AllocationMode; 3] = [
    AllocationMode::TokenAdaptive,
    AllocationMode::Global,
    AllocationMode::Uniform,
];

/// Small task used by the gradient and init suites: 3-layer bank, 4x4 grid, d_geo 4, d_model 6.
pub fn small_task() -> ProxyConfig {
    ProxyConfig {
        encoder_layers: 6,
        bank_strategy: LayerStrategy::LatterHalf,
        num_layers: 3,
        num_frames: 2,
        grid_h: 4,
        grid_w: 4,
        d_geo: 4,
        d_model: 6,
        num_roles: 3,
        num_classes: 4,
        signal_layer_map: vec![0, 1, 2],
        second_signal_layer_map: vec![],
        train_samples: 3,
        test_samples: 1,
        batch_size: 3,
        ..ProxyConfig::default()
    }
}

/// Adds `N(0, std)` to every parameter so no gradient path is switched off by initialization.
pub fn perturb_all(store: &mut ParamStore, std: f64, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let v = store.value_mut(id);
        let (r, c) = v.shape();
        let noise = Tensor2D::random_normal(r, c, std, rng);
        v.add_assign(&noise).expect("same shape");
    }
}

/// Head settings covered by the gradient suite.
pub fn gradient_heads() -> Vec<(HeadConfig, MergeMode)> {
    let head = |mode, top_k, position| HeadConfig { mode, top_k, position };
    vec![
        (head(AllocationMode::TokenAdaptive, 2, GroundingPosition::PreReasoning), MergeMode::Concat),
        (head(AllocationMode::TokenAdaptive, 1, GroundingPosition::PreReasoning), MergeMode::Mean),
        (head(AllocationMode::Global, 2, GroundingPosition::PreReasoning), MergeMode::Concat),
        (head(AllocationMode::Global, 3, GroundingPosition::PreReasoning), MergeMode::Concat),
        (head(AllocationMode::Uniform, 3, GroundingPosition::PreReasoning), MergeMode::Concat),
        (head(AllocationMode::TokenAdaptive, 2, GroundingPosition::InputFusion), MergeMode::Concat),
        (head(AllocationMode::TokenAdaptive, 2, GroundingPosition::DecoderFusion), MergeMode::Concat),
    ]
}

/// Central-difference check of the composed pipeline for one seed and head.
pub fn gradient_check(seed: u64, head: HeadConfig, merge: MergeMode, h: f64, tol: f64) -> Result<GradCheckReport> {
    let task = ProxyConfig {
        merge,
        ..small_task()
    };
    let data = generate_task(&task, seed)?;
    let (model, mut store) = GroundingModel::init(&task, head, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    perturb_all(&mut store, 0.5, &mut rng);
    let objective = BatchObjective {
        model: &model,
        batch: data.train.iter().collect(),
    };
    check_gradients(&objective, &mut store, h, tol)
}

/// Every gradient-suite configuration over `seeds`; one report per (seed, head).
pub fn gradient_suite(seeds: &[u64], h: f64, tol: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for (head, merge) in gradient_heads() {
            let label = format!(
                "seed={seed} mode={} top_k={} position={} merge={merge:?}",
                head.mode.label(),
                head.top_k,
                head.position.label()
            );
            out.push((label, gradient_check(seed, head, merge, h, tol)?));
        }
    }
    Ok(out)
}

/// Gradient norms at initialization, grouped by parameter role.
#[derive(Clone, Debug, PartialEq)]
pub struct InitGradients {
    pub router: f64,
    pub global_logits: f64,
    pub projector: f64,
    pub affines: f64,
    pub w_o: f64,
}

fn group_norm(store: &ParamStore, prefix: &str) -> f64 {
    store
        .ids()
        .filter(|&id| store.name(id).starts_with(prefix))
        .map(|id| store.grad(id).map_or(0.0, |g| g.norm().powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// With `W_o = 0`, gradients upstream of the residual are exactly zero.
///
/// Token-adaptive and global heads are both run so router and global logits are live
/// in the graph; norms are combined by max.
pub fn init_gradients(seed: u64) -> Result<InitGradients> {
    let task = ProxyConfig {
        train_samples: 4,
        batch_size: 4,
        ..ProxyConfig::default()
    };
    let data = generate_task(&task, seed)?;
    let batch: Vec<_> = data.train.iter().collect();
    let mut out = InitGradients {
        router: 0.0,
        global_logits: 0.0,
        projector: 0.0,
        affines: 0.0,
        w_o: 0.0,
    };
    for mode in [AllocationMode::TokenAdaptive, AllocationMode::Global] {
        let head = HeadConfig {
            mode,
            top_k: 2,
            position: GroundingPosition::PreReasoning,
        };
        let (model, mut store) = GroundingModel::init(&task, head, seed)?;
        if store.value(model.head.w_o).max_abs() != 0.0 {
            return Err(Error::State("W_o is not zero at init".into()));
        }
        model.batch_loss_and_grad(&mut store, &batch)?;
        out.router = out.router.max(group_norm(&store, "head.router"));
        out.global_logits = out.global_logits.max(group_norm(&store, "head.global_logits"));
        out.projector = out.projector.max(group_norm(&store, "bank.phi"));
        out.affines = out
            .affines
            .max(group_norm(&store, "bank.gamma").hypot(group_norm(&store, "bank.beta")));
        out.w_o = out.w_o.max(group_norm(&store, "head.w_o"));
    }
    Ok(out)
}

/// `max |V' - V|` over random draws with `W_o = 0` for every mode and position.
pub fn identity_at_init(draws: u64) -> Result<f64> {
    let task = ProxyConfig {
        train_samples: 1,
        test_samples: 1,
        ..ProxyConfig::default()
    };
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let sample = generate_task(&task, draw)?.train.remove(0);
        for mode in ALL_MODES {
            for position in ALL_POSITIONS {
                let head = HeadConfig {
                    mode,
                    top_k: 2,
                    position,
                };
                let (model, mut store) = GroundingModel::init(&task, head, draw)?;
                let mut rng = ChaCha8Rng::seed_from_u64(draw);
                perturb_all(&mut store, 1.0, &mut rng);
                store.value_mut(model.head.w_o).fill(0.0);
                store.value_mut(model.head.fusion_gate).fill(0.0);
                let bank = build_bank(&sample.raw, &model.bank, &store)?;
                let (grounded, _) = ground_tokens(&sample.visual, &bank, &model.head, &store)?;
                for (a, b) in grounded.matrix.as_slice().iter().zip(sample.visual.matrix.as_slice()) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Sparse-allocation contract over `count` random logit vectors per `top_k` in
/// `{1, 2, 3, |S|}`. Logits and shifts are multiples of 2^-20 so shifting is exact.
pub fn sparse_allocation_contract(count: usize, seed: u64) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let dyadic = |rng: &mut ChaCha8Rng, span: i64| rng.gen_range(-span..=span) as f64 / (1 << 20) as f64;
    for case in 0..count {
        let s = rng.gen_range(1..=16);
        let logits: Vec<f64> = (0..s).map(|_| dyadic(&mut rng, 8 << 20)).collect();
        let shift = dyadic(&mut rng, 64 << 20);
        for top_k in [1, 2, 3, s] {
            let a = sparse_allocate(&logits, top_k)?;
            let nonzero = a.weights.iter().filter(|w| **w != 0.0).count();
            if nonzero != top_k.min(s) {
                failures.push(format!("case {case} top_k {top_k}: {nonzero} nonzero"));
            }
            let sum: f64 = a.weights.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                failures.push(format!("case {case} top_k {top_k}: sum {sum}"));
            }
            if top_k == s {
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                if a.weights.iter().zip(&e).any(|(w, x)| (w - x / z).abs() > 1e-12) {
                    failures.push(format!("case {case}: dense mismatch"));
                }
            }
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = sparse_allocate(&shifted, top_k)?;
            let bits = |w: &[f64]| w.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            if bits(&a.weights) != bits(&b.weights) {
                failures.push(format!("case {case} top_k {top_k}: shift changed weights"));
            }
        }
    }
    Ok(failures)
}

/// Random stacks that must survive encode/decode bit for bit.
pub fn geobank_round_trips(count: u64, seed: u64) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for case in 0..count {
        let shape = GridShape {
            num_frames: rng.gen_range(1..=3),
            grid_h: 2 * rng.gen_range(1..=4),
            grid_w: 2 * rng.gen_range(1..=4),
        };
        let layers = rng.gen_range(1..=5);
        let first = rng.gen_range(0..20);
        let d_geo = rng.gen_range(1..=6);
        let grids: Vec<Tensor2D> = (0..layers)
            .map(|_| {
                let v: Vec<f64> = (0..shape.num_tokens() * d_geo)
                    .map(|_| rng.gen_range(-1e3f32..1e3) as f64)
                    .collect();
                Tensor2D::from_vec(shape.num_tokens(), d_geo, v)
            })
            .collect::<Result<_>>()?;
        let raw = RawLayerStack::new((first..first + layers).collect(), shape, d_geo, grids)?;
        let bytes = encode_geobank(&raw)?;
        let back = decode_geobank(&bytes, Path::new("<memory>"))?;
        if back != raw || encode_geobank(&back)? != bytes {
            failures.push(format!("case {case}: round trip differs"));
        }
    }
    Ok(failures)
}

/// Header corruptions that must each be rejected with a format error.
pub fn corrupt_headers(valid: &[u8]) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut push = |name: &str, f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = valid.to_vec();
        f(&mut b);
        out.push((name.to_string(), b));
    };
    push("bad_magic", &|b| b[0] = b'X');
    push("bad_version", &|b| b[4] = 9);
    push("zero_layers", &|b| b[8..12].fill(0));
    push("zero_frames", &|b| b[16..20].fill(0));
    push("odd_grid", &|b| b[20] |= 1);
    push("zero_d_geo", &|b| b[28..32].fill(0));
    push("bad_dtype", &|b| b[32] = 7);
    push("reserved_set", &|b| b[36] = 1);
    push("truncated_header", &|b| b.truncate(HEADER_LEN - 1));
    push("truncated_payload", &|b| {
        b.pop();
    });
    push("trailing_bytes", &|b| b.push(0));
    push("empty", &|b| b.clear());
    out
}

/// Runs [`corrupt_headers`] against a fixed valid stack; returns the fixture count and the
/// cases that were not rejected with a format error.
pub fn header_corruption_failures() -> Result<(usize, Vec<String>)> {
    let shape = GridShape {
        num_frames: 2,
        grid_h: 4,
        grid_w: 4,
    };
    let grids = (0..3).map(|l| Tensor2D::filled(shape.num_tokens(), 2, l as f64)).collect();
    let raw = RawLayerStack::new(vec![12, 13, 14], shape, 2, grids)?;
    let bytes = encode_geobank(&raw)?;
    debug_assert_eq!(GeobankHeader::for_stack(&raw)?.to_bytes()[..], bytes[..HEADER_LEN]);
    let cases = corrupt_headers(&bytes);
    let total = cases.len();
    let failures = cases
        .into_iter()
        .filter_map(|(name, b)| match decode_geobank(&b, Path::new("<fixture>")) {
            Err(Error::Format { .. }) => None,
            other => Some(format!("{name}: {other:?}")),
        })
        .collect();
    Ok((total, failures))
}

/// The fast invariant checks behind `selftest`.
pub fn selftest() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let worst = identity_at_init(20)?;
    checks.push(Check::new(
        "identity_at_init",
        worst == 0.0,
        format!("max |V'-V| = {worst:e} over 20 draws x 3 modes x 3 positions"),
    ));
    let failures = sparse_allocation_contract(1000, 7)?;
    checks.push(Check::new(
        "sparse_allocation_contract",
        failures.is_empty(),
        format!("1000 vectors x top_k in {{1,2,3,|S|}}, {} violations {:?}", failures.len(), failures.first()),
    ));
    let g = init_gradients(0)?;
    checks.push(Check::new(
        "init_gradient_structure",
        g.router == 0.0 && g.global_logits == 0.0 && g.projector == 0.0 && g.affines == 0.0 && g.w_o > 1e-8,
        format!(
            "router {:e}, global_logits {:e}, phi {:e}, affines {:e}, W_o {:e}",
            g.router, g.global_logits, g.projector, g.affines, g.w_o
        ),
    ));
    let failures = geobank_round_trips(50, 11)?;
    checks.push(Check::new(
        "geobank_round_trip",
        failures.is_empty(),
        format!("50 random shapes, {} mismatches", failures.len()),
    ));
    let (total, failures) = header_corruption_failures()?;
    checks.push(Check::new(
        "geobank_corruption",
        failures.is_empty(),
        format!("{total} fixtures, accepted: {failures:?}"),
    ));
    Ok(checks)
}
