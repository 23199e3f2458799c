//! Registered finite-difference gradient suites, one per block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{bilstm_encode, BiLstm};
use crate::encoder::{dyt, DytParams, MegaConfig, MegaEncoder};
use crate::error::Result;
use crate::mlstm::{mlstm_cross, mlstm_self, MlstmParams};
use crate::params::ParamStore;
use crate::tensor::{grad_check, grad_check_params, GradCheckReport, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

pub const BLOCKS: [&str; 6] = ["tensor_core", "mlstm_self", "mlstm_cross", "dyt", "mega_forward", "bilstm_encode"];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub block: &'static str,
    pub max_rel_error: f64,
    /// Where the worst error occurred.
    pub worst: String,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape and data agree")
}

/// Replaces every parameter with values in [-0.5, 0.5], so that zero or
/// unit initializations do not hide any path.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let n = store.get(id).numel();
        store.set_data(id, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())?;
    }
    Ok(())
}

fn worst(block: &'static str, cases: Vec<(String, f64)>) -> SuiteResult {
    let (name, err) = cases
        .into_iter()
        .fold((String::new(), f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    SuiteResult {
        block,
        max_rel_error: err,
        worst: name,
    }
}

fn param_site(r: &GradCheckReport) -> String {
    match &r.worst {
        Some((name, i)) => format!("{name}[{i}]"),
        None => "no parameters".to_string(),
    }
}

type Case = (&'static str, Vec<usize>, Box<dyn Fn(&Tensor) -> Result<Tensor>>);

fn tensor_core(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let b = random(rng, &[4, 3], -2.0, 2.0);
    let w = random(rng, &[3, 5], -2.0, 2.0);
    let batched = random(rng, &[2, 4, 3], -2.0, 2.0);
    let kernel = random(rng, &[3, 3], -2.0, 2.0);
    let bias = random(rng, &[3], -2.0, 2.0);
    let x = random(rng, &[5, 3], -2.0, 2.0);
    let weights = random(rng, &[4, 5], -2.0, 2.0);
    let wsum = move |t: Tensor, wt: &Tensor| -> Result<Tensor> { t.mul(wt)?.sum_all() };
    let cases: Vec<Case> = vec![
        ("matmul lhs", vec![4, 3], {
            let w = w.clone();
            let ws = weights.clone();
            Box::new(move |a| wsum(a.matmul(&w)?, &ws))
        }),
        ("matmul rhs", vec![3, 5], {
            let b = b.clone();
            let ws = weights.clone();
            Box::new(move |a| wsum(b.matmul(a)?, &ws))
        }),
        ("matmul batched", vec![3, 5], {
            let bt = batched.clone();
            Box::new(move |a| bt.matmul(a)?.tanh()?.sum_all())
        }),
        ("causal_conv1d input", vec![5, 3], {
            let (k, bi) = (kernel.clone(), bias.clone());
            Box::new(move |a| a.causal_conv1d(&k, &bi)?.tanh()?.sum_all())
        }),
        ("causal_conv1d kernel", vec![3, 3], {
            let (x, bi) = (x.clone(), bias.clone());
            Box::new(move |a| x.causal_conv1d(a, &bi)?.tanh()?.sum_all())
        }),
        ("causal_conv1d bias", vec![3], {
            let (x, k) = (x.clone(), kernel.clone());
            Box::new(move |a| x.causal_conv1d(&k, a)?.tanh()?.sum_all())
        }),
        ("softmax_lastdim", vec![4, 5], {
            let ws = weights.clone();
            Box::new(move |a| wsum(a.softmax_lastdim()?, &ws))
        }),
        ("add/sub/mul broadcast", vec![5], {
            let y = random(rng, &[4, 5], -2.0, 2.0);
            Box::new(move |a| y.add(a)?.mul(a)?.sub(&y.mul(a)?)?.sum_all())
        }),
        ("silu", vec![4, 5], {
            let ws = weights.clone();
            Box::new(move |a| wsum(a.silu()?, &ws))
        }),
        ("tanh", vec![4, 5], {
            let ws = weights.clone();
            Box::new(move |a| wsum(a.tanh()?, &ws))
        }),
        ("sigmoid", vec![4, 5], {
            let ws = weights.clone();
            Box::new(move |a| wsum(a.sigmoid()?, &ws))
        }),
        ("exp", vec![4, 5], {
            let ws = weights.clone();
            Box::new(move |a| wsum(a.exp()?, &ws))
        }),
        ("log_sigmoid", vec![4, 5], {
            let ws = weights.clone();
            Box::new(move |a| wsum(a.log_sigmoid()?, &ws))
        }),
        ("concat_lastdim", vec![4, 2], {
            let (l, ws) = (random(rng, &[4, 3], -2.0, 2.0), weights.clone());
            Box::new(move |a| wsum(Tensor::concat_lastdim(&[a.clone(), l.clone()])?, &ws))
        }),
        ("narrow", vec![4, 5], {
            let ws = weights.narrow(1, 1, 3)?;
            Box::new(move |a| wsum(a.narrow(1, 1, 3)?, &ws))
        }),
        ("gather_rows", vec![4, 5], {
            let ws = random(rng, &[5, 5], -2.0, 2.0);
            Box::new(move |a| wsum(a.gather_rows(&[3, 0, 3, 1, 2])?, &ws))
        }),
        ("mean_over_positions", vec![4, 5], {
            let ws = weights.narrow(0, 0, 1)?.reshape(&[5])?;
            Box::new(move |a| wsum(a.mean_over_positions(&[1, 3])?, &ws))
        }),
    ];
    let mut errors = Vec::new();
    for (name, shape, f) in cases {
        let point = random(rng, &shape, -2.0, 2.0);
        errors.push((name.to_string(), grad_check(f, &point, GRAD_EPS)?));
    }
    Ok(worst("tensor_core", errors))
}

fn mlstm(rng: &mut ChaCha8Rng, cross: bool) -> Result<SuiteResult> {
    let (d, heads, t) = (6, 2, 4);
    let mut store = ParamStore::default();
    let p = MlstmParams::init(&mut store, "mlstm", d, heads, rng)?;
    jitter(&mut store, rng)?;
    let a = random(rng, &[t, d], -2.0, 2.0);
    let b = random(rng, &[t, d], -2.0, 2.0);
    let ws = random(rng, &[t, d], -2.0, 2.0);
    let report = grad_check_params(
        |s| {
            let y = if cross { mlstm_cross(s, &p, &a, &a, &b)? } else { mlstm_self(s, &p, &a)? };
            y.mul(&ws)?.sum_all()
        },
        &store,
        GRAD_EPS,
    )?;
    // input gradients flow through the fused recurrence as well
    let input = grad_check(
        |x| {
            let y = if cross { mlstm_cross(&store, &p, x, x, &b)? } else { mlstm_self(&store, &p, x)? };
            y.mul(&ws)?.sum_all()
        },
        &a,
        GRAD_EPS,
    )?;
    let mut cases = vec![(param_site(&report), report.max_rel_error), ("input".to_string(), input)];
    if cross {
        let values = grad_check(|v| mlstm_cross(&store, &p, &a, &a, v)?.mul(&ws)?.sum_all(), &b, GRAD_EPS)?;
        cases.push(("values".to_string(), values));
    }
    Ok(worst(if cross { "mlstm_cross" } else { "mlstm_self" }, cases))
}

fn dyt_suite(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut store = ParamStore::default();
    let p = DytParams::init(&mut store, "dyt", 5)?;
    jitter(&mut store, rng)?;
    let x = random(rng, &[3, 5], -2.0, 2.0);
    let ws = random(rng, &[3, 5], -2.0, 2.0);
    let report = grad_check_params(|s| dyt(s, &p, &x)?.mul(&ws)?.sum_all(), &store, GRAD_EPS)?;
    let input = grad_check(|x| dyt(&store, &p, x)?.mul(&ws)?.sum_all(), &x, GRAD_EPS)?;
    Ok(worst(
        "dyt",
        vec![(param_site(&report), report.max_rel_error), ("input".to_string(), input)],
    ))
}

fn mega_forward(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let cfg = MegaConfig {
        d_model: 8,
        heads: 2,
        fusion_heads: 2,
        conv_kernel: 2,
        ..MegaConfig::default()
    };
    let mut store = ParamStore::default();
    let enc = MegaEncoder::init(&mut store, &cfg, rng)?;
    jitter(&mut store, rng)?;
    let h = random(rng, &[4, 8], -2.0, 2.0);
    let loss = |s: &ParamStore, h: &Tensor| -> Result<Tensor> {
        enc.forward(s, h, (1, 3), None)?.narrow(0, 2, 1)?.ln_clamped(1e-12)?.neg()?.sum_all()
    };
    let report = grad_check_params(|s| loss(s, &h), &store, GRAD_EPS)?;
    let input = grad_check(|x| loss(&store, x), &h, GRAD_EPS)?;
    Ok(worst(
        "mega_forward",
        vec![(param_site(&report), report.max_rel_error), ("input".to_string(), input)],
    ))
}

fn bilstm(rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let mut store = ParamStore::default();
    let p = BiLstm::init(&mut store, "bilstm", 3, 4, rng)?;
    let x = random(rng, &[2, 3, 3], -2.0, 2.0);
    let ws = random(rng, &[2, 3, 4], -2.0, 2.0);
    let lengths = [3, 2];
    let report = grad_check_params(|s| bilstm_encode(s, &p, &x, &lengths)?.mul(&ws)?.sum_all(), &store, GRAD_EPS)?;
    let input = grad_check(|x| bilstm_encode(&store, &p, x, &lengths)?.mul(&ws)?.sum_all(), &x, GRAD_EPS)?;
    Ok(worst(
        "bilstm_encode",
        vec![(param_site(&report), report.max_rel_error), ("input".to_string(), input)],
    ))
}

/// Runs every block in [`BLOCKS`] order with a fixed seed.
pub fn run_gradient_suites() -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    Ok(vec![
        tensor_core(&mut rng)?,
        mlstm(&mut rng, false)?,
        mlstm(&mut rng, true)?,
        dyt_suite(&mut rng)?,
        mega_forward(&mut rng)?,
        bilstm(&mut rng)?,
    ])
}
