//! The MEGA encoder: a forward mLSTM stream and a partially flipped mLSTM
//! stream, fused by a cross-mode mLSTM, gated by a normalized branch of the
//! input and classified from a pooled representation.
//!
//! ```text
//! H_norm = DyT(SiLU(Linear(H)))
//! M̃      = mLSTM(Conv(Linear(DyT(H))))
//! Ñ      = mLSTM(flip_n(Conv(Linear(DyT(flip_n(H))))))
//! F̃      = mLSTM_cross(q = M̃, k = M̃, v = Ñ)
//! O      = Linear(M̃⊙H_norm ⊕ Ñ⊙H_norm ⊕ F̃⊙H_norm) + H
//! p      = softmax(W_p · mean(O[span]) + b_p)
//! ```

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlstm::{mlstm_cross, mlstm_self, uniform, MlstmParams};
use crate::params::ParamStore;
use crate::tensor::{ParamId, Tensor};

pub const CLASS_COUNT: usize = 3;

/// Initial DyT input scale.
pub const DYT_ALPHA_INIT: f64 = 0.5;

/// Which positions of the encoder output feed the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingScope {
    AspectSpan,
    WholeSentence,
}

impl std::str::FromStr for PoolingScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aspect_span" => Ok(PoolingScope::AspectSpan),
            "whole_sentence" => Ok(PoolingScope::WholeSentence),
            other => Err(Error::Config(format!(
                "pooling must be aspect_span or whole_sentence, got {other:?}"
            ))),
        }
    }
}

/// Architecture of the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MegaConfig {
    /// Width of every stream.
    pub d_model: usize,
    /// Causal convolution width.
    pub conv_kernel: usize,
    /// Heads of the two stream mLSTMs.
    pub heads: usize,
    /// Heads of the fusion mLSTM.
    pub fusion_heads: usize,
    /// Share of each sentence whose prefix is reversed, rounded half away
    /// from zero. Ignored when `flip_count` is set.
    pub flip_fraction: f64,
    /// Absolute prefix length, clamped to the sentence length.
    pub flip_count: Option<usize>,
    /// Undo the prefix reversal after the convolution of the flipped stream.
    pub pf_double_flip: bool,
    pub pooling: PoolingScope,
    /// When false the fused term is replaced by zeros.
    pub fusion: bool,
    /// Drop rate applied to the concatenated features before projection.
    pub dropout: f64,
}

impl Default for MegaConfig {
    fn default() -> Self {
        MegaConfig {
            d_model: 64,
            conv_kernel: 4,
            heads: 4,
            fusion_heads: 4,
            flip_fraction: 0.5,
            flip_count: None,
            pf_double_flip: true,
            pooling: PoolingScope::AspectSpan,
            fusion: true,
            dropout: 0.3,
        }
    }
}

impl MegaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 {
            return bad("d_model must be positive".into());
        }
        for (name, h) in [("heads", self.heads), ("fusion_heads", self.fusion_heads)] {
            if h == 0 || self.d_model % h != 0 {
                return bad(format!("{name} = {h} must divide d_model = {}", self.d_model));
            }
        }
        if self.conv_kernel == 0 {
            return bad("conv_kernel must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.flip_fraction) {
            return bad(format!("flip_fraction {} outside [0, 1]", self.flip_fraction));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Prefix length reversed in a sentence of `len` tokens.
    pub fn flip_len(&self, len: usize) -> usize {
        match self.flip_count {
            Some(n) => n.min(len),
            None => ((self.flip_fraction * len as f64).round() as usize).min(len),
        }
    }
}

/// `x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Uniform in `±1/√d_in`, or all zeros.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        zero: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let (w, b) = if zero {
            (vec![0.0; d_in * d_out], vec![0.0; d_out])
        } else {
            (uniform(rng, d_in * d_out, bound), uniform(rng, d_out, bound))
        };
        Ok(Linear {
            w: store.add(&format!("{name}.w"), &[d_in, d_out], w, true)?,
            b: store.add(&format!("{name}.b"), &[d_out], b, true)?,
        })
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.matmul(store.get(self.w))?.add(store.get(self.b))
    }
}

/// Dynamic tanh normalization `γ ⊙ tanh(α·x) + β`.
#[derive(Clone, Debug)]
pub struct DytParams {
    pub alpha: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl DytParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(DytParams {
            alpha: store.add(&format!("{name}.alpha"), &[1], vec![DYT_ALPHA_INIT], true)?,
            gamma: store.add(&format!("{name}.gamma"), &[d], vec![1.0; d], true)?,
            beta: store.add(&format!("{name}.beta"), &[d], vec![0.0; d], true)?,
        })
    }
}

pub fn dyt(store: &ParamStore, p: &DytParams, x: &Tensor) -> Result<Tensor> {
    x.mul(store.get(p.alpha))?
        .tanh()?
        .mul(store.get(p.gamma))?
        .add(store.get(p.beta))
}

/// Depthwise causal convolution with kernel `[k, d]` and bias `[d]`.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    pub fn init(store: &mut ParamStore, name: &str, k: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (k as f64).sqrt();
        Ok(ConvParams {
            kernel: store.add(&format!("{name}.kernel"), &[k, d], uniform(rng, k * d, bound), true)?,
            bias: store.add(&format!("{name}.bias"), &[d], uniform(rng, d, bound), true)?,
        })
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.causal_conv1d(store.get(self.kernel), store.get(self.bias))
    }
}

/// Reverses the first `n` rows of `x` and keeps the rest in place.
pub fn partial_flip(x: &Tensor, n: usize) -> Result<Tensor> {
    let rows = x.shape().first().copied().unwrap_or(0);
    if n > rows {
        return Err(Error::contract(
            "partial_flip",
            format!("prefix {n} longer than sequence of {rows}"),
        ));
    }
    let order: Vec<usize> = (0..n).rev().chain(n..rows).collect();
    x.gather_rows(&order)
}

/// Multiplies by an inverted-dropout mask drawn from `rng`.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut dyn RngCore) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - rate;
    let mask = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    x.mul(&Tensor::new(x.shape(), mask)?)
}

/// One stream: normalization, projection, causal convolution and mLSTM.
#[derive(Clone, Debug)]
pub struct StreamParams {
    pub dyt: DytParams,
    pub linear: Linear,
    pub conv: ConvParams,
    pub mlstm: MlstmParams,
}

impl StreamParams {
    fn init(store: &mut ParamStore, name: &str, cfg: &MegaConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(StreamParams {
            dyt: DytParams::init(store, &format!("{name}.dyt"), d)?,
            linear: Linear::init(store, &format!("{name}.linear"), d, d, false, rng)?,
            conv: ConvParams::init(store, &format!("{name}.conv"), cfg.conv_kernel, d, rng)?,
            mlstm: MlstmParams::init(store, &format!("{name}.mlstm"), d, cfg.heads, rng)?,
        })
    }

    fn conv_input(&self, store: &ParamStore, h: &Tensor) -> Result<Tensor> {
        let x = dyt(store, &self.dyt, h)?;
        let x = self.linear.apply(store, &x)?;
        self.conv.apply(store, &x)
    }
}

/// Parameter handles of a full encoder. The tensors live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct MegaEncoder {
    pub cfg: MegaConfig,
    pub gate_linear: Linear,
    pub gate_dyt: DytParams,
    pub fwd: StreamParams,
    pub pf: StreamParams,
    pub fuse: MlstmParams,
    pub fuse_proj: Linear,
    pub head: Linear,
}

impl MegaEncoder {
    /// Registers every parameter under `mega.*`. The fusion projection
    /// starts at zero so that the encoder output equals its input.
    pub fn init(store: &mut ParamStore, cfg: &MegaConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(MegaEncoder {
            cfg: cfg.clone(),
            gate_linear: Linear::init(store, "mega.gate.linear", d, d, false, rng)?,
            gate_dyt: DytParams::init(store, "mega.gate.dyt", d)?,
            fwd: StreamParams::init(store, "mega.fwd", cfg, rng)?,
            pf: StreamParams::init(store, "mega.pf", cfg, rng)?,
            fuse: MlstmParams::init(store, "mega.fuse.mlstm", d, cfg.fusion_heads, rng)?,
            fuse_proj: Linear::init(store, "mega.fuse.proj", 3 * d, d, true, rng)?,
            head: Linear::init(store, "mega.head", d, CLASS_COUNT, false, rng)?,
        })
    }

    /// Scalar count of every encoder parameter.
    pub fn param_count(cfg: &MegaConfig) -> usize {
        let d = cfg.d_model;
        let linear = |i: usize, o: usize| i * o + o;
        let dyt = 1 + 2 * d;
        let stream = dyt + linear(d, d) + cfg.conv_kernel * d + d + MlstmParams::param_count(d, cfg.heads);
        linear(d, d) + dyt + 2 * stream + MlstmParams::param_count(d, cfg.fusion_heads) + linear(3 * d, d) + linear(d, CLASS_COUNT)
    }

    /// Returns `(H_norm, M̃)` for `h: [N, d]`.
    pub fn forward_stream(&self, store: &ParamStore, h: &Tensor) -> Result<(Tensor, Tensor)> {
        let gate = self.gate_linear.apply(store, h)?.silu()?;
        let h_norm = dyt(store, &self.gate_dyt, &gate)?;
        let m = mlstm_self(store, &self.fwd.mlstm, &self.fwd.conv_input(store, h)?)?;
        Ok((h_norm, m))
    }

    /// Convolved features of the flipped stream, before the mLSTM.
    pub fn pf_conv(&self, store: &ParamStore, h: &Tensor, n: usize) -> Result<Tensor> {
        let con = self.pf.conv_input(store, &partial_flip(h, n)?)?;
        if self.cfg.pf_double_flip {
            partial_flip(&con, n)
        } else {
            Ok(con)
        }
    }

    /// Ñ for `h: [N, d]` with the first `n` tokens reversed.
    pub fn pf_stream(&self, store: &ParamStore, h: &Tensor, n: usize) -> Result<Tensor> {
        mlstm_self(store, &self.pf.mlstm, &self.pf_conv(store, h, n)?)
    }

    /// The concatenated gated features `M ⊕ N ⊕ F`, `[N, 3d]`.
    pub fn fused_features(&self, store: &ParamStore, m: &Tensor, n: &Tensor, h_norm: &Tensor) -> Result<Tensor> {
        let f = if self.cfg.fusion {
            mlstm_cross(store, &self.fuse, m, m, n)?
        } else {
            Tensor::zeros(m.shape())
        };
        Tensor::concat_lastdim(&[m.mul(h_norm)?, n.mul(h_norm)?, f.mul(h_norm)?])
    }

    /// `O = Linear(M ⊕ N ⊕ F) + H`. With `train`, dropout is applied to the
    /// concatenation.
    pub fn mecgaf_fuse(
        &self,
        store: &ParamStore,
        m: &Tensor,
        n: &Tensor,
        h_norm: &Tensor,
        h: &Tensor,
        train: Option<&mut dyn RngCore>,
    ) -> Result<Tensor> {
        for t in [n, h_norm, h] {
            if t.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "mecgaf_fuse",
                    lhs: m.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let mut o = self.fused_features(store, m, n, h_norm)?;
        if let Some(rng) = train {
            o = dropout(&o, self.cfg.dropout, rng)?;
        }
        self.fuse_proj.apply(store, &o)?.add(h)
    }

    /// Class probabilities from the mean of the rows of `o` at `positions`.
    pub fn classify(&self, store: &ParamStore, o: &Tensor, positions: &[usize]) -> Result<Tensor> {
        let pooled = o.mean_over_positions(positions)?.reshape(&[1, self.cfg.d_model])?;
        self.head
            .apply(store, &pooled)?
            .reshape(&[CLASS_COUNT])?
            .softmax_lastdim()
    }

    /// Probabilities for one sentence `h: [N, d]` with the aspect at
    /// `span = (start, end)`, end exclusive.
    pub fn forward(
        &self,
        store: &ParamStore,
        h: &Tensor,
        span: (usize, usize),
        train: Option<&mut dyn RngCore>,
    ) -> Result<Tensor> {
        let len = h.shape().first().copied().unwrap_or(0);
        if h.rank() != 2 || h.shape()[1] != self.cfg.d_model || len == 0 {
            return Err(Error::contract(
                "mega_forward",
                format!("expected [N>=1, {}], got {:?}", self.cfg.d_model, h.shape()),
            ));
        }
        if span.0 >= span.1 || span.1 > len {
            return Err(Error::contract(
                "mega_forward",
                format!("aspect span {span:?} invalid for {len} tokens"),
            ));
        }
        let (h_norm, m) = self.forward_stream(store, h)?;
        let n = self.pf_stream(store, h, self.cfg.flip_len(len))?;
        let o = self.mecgaf_fuse(store, &m, &n, &h_norm, h, train)?;
        let positions: Vec<usize> = match self.cfg.pooling {
            PoolingScope::AspectSpan => (span.0..span.1).collect(),
            PoolingScope::WholeSentence => (0..len).collect(),
        };
        self.classify(store, &o, &positions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlstm::{mlstm_step, MlstmState};
    use crate::tensor::{grad_check, grad_check_params};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(d: usize, heads: usize, seed: u64) -> (ParamStore, MegaEncoder) {
        let cfg = MegaConfig {
            d_model: d,
            heads,
            fusion_heads: heads,
            conv_kernel: 2,
            ..MegaConfig::default()
        };
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = MegaEncoder::init(&mut store, &cfg, &mut rng).unwrap();
        (store, enc)
    }

    /// Moves every parameter off its initial value, so that the zero fusion
    /// projection does not hide upstream gradients.
    fn jitter(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let data = store
                .get(id)
                .data()
                .iter()
                .map(|v| v + rng.gen_range(-0.3..0.3))
                .collect();
            store.set_data(id, data).unwrap();
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn rows(n: usize) -> Tensor {
        Tensor::new(&[n, 1], (1..=n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn dyt_zero_and_saturation() {
        let mut store = ParamStore::default();
        let p = DytParams::init(&mut store, "n", 2).unwrap();
        store.set_data(p.alpha, vec![1.0]).unwrap();
        let zero = dyt(&store, &p, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(zero.data(), &[0.0, 0.0]);
        store.set_data(p.gamma, vec![2.0, -1.0]).unwrap();
        store.set_data(p.beta, vec![0.5, 0.25]).unwrap();
        let big = dyt(&store, &p, &Tensor::full(&[1, 2], 1e3)).unwrap();
        assert_eq!(big.data(), &[2.5, -0.75]);
    }

    #[test]
    fn dyt_alpha_gradient() {
        let mut store = ParamStore::default();
        let p = DytParams::init(&mut store, "n", 3).unwrap();
        let x = random(&[4, 3], 1);
        let report = grad_check_params(|s| dyt(s, &p, &x)?.mul(&x)?.sum_all(), &store, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
    }

    #[test]
    fn flip_examples() {
        let x = rows(5);
        assert_eq!(partial_flip(&x, 3).unwrap().data(), &[3.0, 2.0, 1.0, 4.0, 5.0]);
        for n in [0, 1] {
            assert_eq!(partial_flip(&x, n).unwrap().data(), x.data());
        }
        assert_eq!(partial_flip(&x, 5).unwrap().data(), &[5.0, 4.0, 3.0, 2.0, 1.0]);
        assert!(partial_flip(&x, 6).is_err());
    }

    #[test]
    fn flip_len_rounds_and_clamps() {
        let mut cfg = MegaConfig::default();
        assert_eq!(cfg.flip_len(5), 3);
        assert_eq!(cfg.flip_len(4), 2);
        assert_eq!(cfg.flip_len(1), 1);
        cfg.flip_count = Some(7);
        assert_eq!(cfg.flip_len(4), 4);
    }

    #[test]
    fn config_validation() {
        let ok = MegaConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            MegaConfig { heads: 3, ..ok.clone() },
            MegaConfig { conv_kernel: 0, ..ok.clone() },
            MegaConfig { flip_fraction: 1.5, ..ok.clone() },
            MegaConfig { dropout: 1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn stream_shapes() {
        let (store, enc) = tiny(8, 2, 0);
        for n in [1, 2, 7] {
            let h = random(&[n, 8], n as u64);
            let (h_norm, m) = enc.forward_stream(&store, &h).unwrap();
            assert_eq!(h_norm.shape(), &[n, 8]);
            assert_eq!(m.shape(), &[n, 8]);
            assert_eq!(enc.pf_stream(&store, &h, n / 2).unwrap().shape(), &[n, 8]);
        }
    }

    #[test]
    fn forward_stream_single_step_by_hand() {
        let d = 4;
        let (mut store, enc) = tiny(d, 2, 3);
        let identity_kernel: Vec<f64> = [vec![0.0; d], vec![1.0; d]].concat();
        store.set_data(enc.fwd.conv.kernel, identity_kernel).unwrap();
        store.set_data(enc.fwd.conv.bias, vec![0.0; d]).unwrap();
        store.set_data(enc.fwd.mlstm.w_o, vec![0.0; d * d]).unwrap();
        store.set_data(enc.fwd.mlstm.b_o, vec![50.0; d]).unwrap();
        let h = random(&[1, d], 9);

        let x = enc.fwd.linear.apply(&store, &dyt(&store, &enc.fwd.dyt, &h).unwrap()).unwrap();
        let p = &enc.fwd.mlstm;
        let proj = |w| x.matmul(store.get(w)).unwrap().to_vec();
        let scale = 1.0 / (p.d_head() as f64).sqrt();
        let k: Vec<f64> = proj(p.w_k).iter().map(|v| v * scale).collect();
        let add = |a: Vec<f64>, b: ParamId| -> Vec<f64> {
            a.iter().zip(store.get(b).data()).map(|(x, y)| x + y).collect()
        };
        let i_pre = add(proj(p.w_i), p.b_i);
        let f_pre: Vec<f64> = add(proj(p.w_f), p.b_f)
            .iter()
            .map(|v| -(1.0 + (-v).exp()).ln())
            .collect();
        let (_, want) = mlstm_step(
            &MlstmState::zeros(2, p.d_head()),
            &proj(p.w_q),
            &k,
            &proj(p.w_v),
            &i_pre,
            &f_pre,
            0,
        )
        .unwrap();

        let (_, m) = enc.forward_stream(&store, &h).unwrap();
        for (a, b) in m.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_stream_gradient() {
        let (mut store, enc) = tiny(4, 2, 5);
        jitter(&mut store, 6);
        let h = random(&[3, 4], 7);
        let err = grad_check(
            |h| {
                let (a, b) = enc.forward_stream(&store, h)?;
                a.mul(&b)?.sum_all()
            },
            &h,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    fn copy_stream(store: &mut ParamStore, from: &StreamParams, to: &StreamParams) {
        let pairs = [
            (from.dyt.alpha, to.dyt.alpha),
            (from.dyt.gamma, to.dyt.gamma),
            (from.dyt.beta, to.dyt.beta),
            (from.linear.w, to.linear.w),
            (from.linear.b, to.linear.b),
            (from.conv.kernel, to.conv.kernel),
            (from.conv.bias, to.conv.bias),
            (from.mlstm.w_q, to.mlstm.w_q),
            (from.mlstm.w_k, to.mlstm.w_k),
            (from.mlstm.w_v, to.mlstm.w_v),
            (from.mlstm.w_i, to.mlstm.w_i),
            (from.mlstm.b_i, to.mlstm.b_i),
            (from.mlstm.w_f, to.mlstm.w_f),
            (from.mlstm.b_f, to.mlstm.b_f),
            (from.mlstm.w_o, to.mlstm.w_o),
            (from.mlstm.b_o, to.mlstm.b_o),
        ];
        for (a, b) in pairs {
            let data = store.get(a).to_vec();
            store.set_data(b, data).unwrap();
        }
    }

    #[test]
    fn unflipped_stream_matches_forward_stream() {
        let (mut store, enc) = tiny(8, 2, 11);
        copy_stream(&mut store, &enc.fwd, &enc.pf);
        let h = random(&[6, 8], 12);
        let (_, m) = enc.forward_stream(&store, &h).unwrap();
        let n = enc.pf_stream(&store, &h, 0).unwrap();
        for (a, b) in m.data().iter().zip(n.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn pointwise_conv_cancels_double_flip() {
        let d = 4;
        let (mut store, mut enc) = tiny(d, 2, 13);
        // rebuild the flipped stream with a width-1 identity kernel
        enc.pf.conv = ConvParams {
            kernel: store.add("k1", &[1, d], vec![1.0; d], true).unwrap(),
            bias: store.add("b1", &[d], vec![0.0; d], true).unwrap(),
        };
        let h = random(&[7, d], 14);
        let base = enc.pf_stream(&store, &h, 0).unwrap();
        for n in 1..=7 {
            let flipped = enc.pf_stream(&store, &h, n).unwrap();
            for (a, b) in base.data().iter().zip(flipped.data()) {
                assert!((a - b).abs() <= 1e-12, "n = {n}");
            }
        }
    }

    #[test]
    fn flip_reaches_tail_only_through_conv_lookback() {
        let d = 4;
        let (store, enc) = tiny(d, 2, 15);
        let k = enc.cfg.conv_kernel;
        let len = 9;
        let h = random(&[len, d], 16);
        let plain = enc.pf_conv(&store, &h, 0).unwrap();
        for n in 0..=len {
            let con = enc.pf_conv(&store, &h, n).unwrap();
            for t in (n + k - 1).max(n)..len {
                assert_eq!(
                    &con.data()[t * d..(t + 1) * d],
                    &plain.data()[t * d..(t + 1) * d],
                    "n = {n}, t = {t}"
                );
            }
        }
        // the row just inside the lookback window does move
        let n = 3;
        let con = enc.pf_conv(&store, &h, n).unwrap();
        let t = n + k - 2;
        assert_ne!(&con.data()[t * d..(t + 1) * d], &plain.data()[t * d..(t + 1) * d]);
    }

    #[test]
    fn zero_projection_returns_input() {
        let (store, enc) = tiny(8, 2, 17);
        let h = random(&[5, 8], 18);
        let (h_norm, m) = enc.forward_stream(&store, &h).unwrap();
        let n = enc.pf_stream(&store, &h, 2).unwrap();
        let o = enc.mecgaf_fuse(&store, &m, &n, &h_norm, &h, None).unwrap();
        assert_eq!(o.data(), h.data());
        assert_eq!(o.shape(), &[5, 8]);
    }

    #[test]
    fn unit_gate_passes_streams_through() {
        let (store, enc) = tiny(4, 2, 19);
        let m = random(&[3, 4], 20);
        let n = random(&[3, 4], 21);
        let ones = Tensor::full(&[3, 4], 1.0);
        let feats = enc.fused_features(&store, &m, &n, &ones).unwrap();
        let f = mlstm_cross(&store, &enc.fuse, &m, &m, &n).unwrap();
        let want = Tensor::concat_lastdim(&[m, n, f]).unwrap();
        assert_eq!(feats.data(), want.data());
    }

    #[test]
    fn disabled_fusion_zeroes_third_block() {
        let (store, mut enc) = tiny(4, 2, 22);
        enc.cfg.fusion = false;
        let m = random(&[3, 4], 23);
        let feats = enc.fused_features(&store, &m, &m, &m).unwrap();
        for t in 0..3 {
            assert!(feats.data()[t * 12 + 8..t * 12 + 12].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn classify_examples() {
        let (mut store, enc) = tiny(2, 1, 24);
        store.set_data(enc.head.w, vec![0.0; 6]).unwrap();
        store.set_data(enc.head.b, vec![0.0; 3]).unwrap();
        let o = random(&[4, 2], 25);
        let p = enc.classify(&store, &o, &[0, 1]).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() <= 1e-15);
        }

        // identity-like head exposes the pooled vector as logits
        store.set_data(enc.head.w, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let o = Tensor::new(&[4, 2], vec![9.0, 9.0, 9.0, 9.0, 1.0, 2.0, 3.0, 6.0]).unwrap();
        let p = enc.classify(&store, &o, &[2, 3]).unwrap();
        let logits = [2.0f64, 4.0, 0.0];
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (a, l) in p.data().iter().zip(logits) {
            assert!((a - l.exp() / z).abs() <= 1e-15);
        }

        let single = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let a = enc.classify(&store, &single, &[0]).unwrap();
        let b = enc.head.apply(&store, &single).unwrap().reshape(&[3]).unwrap().softmax_lastdim().unwrap();
        assert_eq!(a.data(), b.data());
        assert!(enc.classify(&store, &single, &[]).is_err());
    }

    #[test]
    fn forward_checks_span() {
        let (store, enc) = tiny(4, 2, 26);
        let h = random(&[3, 4], 27);
        assert!(enc.forward(&store, &h, (1, 1), None).is_err());
        assert!(enc.forward(&store, &h, (2, 4), None).is_err());
        assert!(enc.forward(&store, &random(&[3, 5], 0), (0, 1), None).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let (store, enc) = tiny(8, 2, 28);
        let (store2, enc2) = tiny(8, 2, 28);
        let h = random(&[5, 8], 29);
        let a = enc.forward(&store, &h, (1, 3), None).unwrap();
        let b = enc2.forward(&store2, &h, (1, 3), None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn dropout_only_in_training() {
        let (mut store, enc) = tiny(8, 2, 30);
        jitter(&mut store, 31);
        let h = random(&[4, 8], 32);
        let eval = enc.forward(&store, &h, (0, 2), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = enc.forward(&store, &h, (0, 2), Some(&mut rng)).unwrap();
        assert_ne!(eval.data(), train.data());
        let again = enc.forward(&store, &h, (0, 2), None).unwrap();
        assert_eq!(eval.data(), again.data());
    }

    fn nll(p: &Tensor, gold: usize) -> Result<Tensor> {
        p.narrow(0, gold, 1)?.ln_clamped(1e-12)?.neg()?.sum_all()
    }

    #[test]
    fn end_to_end_gradient_tiny_instance() {
        let (mut store, enc) = tiny(8, 2, 33);
        jitter(&mut store, 34);
        let h = random(&[4, 8], 35);
        let report = grad_check_params(|s| nll(&enc.forward(s, &h, (1, 3), None)?, 2), &store, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
        assert_eq!(report.coordinates, store.trainable_count());
    }

    #[test]
    fn end_to_end_gradient_two_tokens_input() {
        let (mut store, enc) = tiny(4, 2, 36);
        jitter(&mut store, 37);
        let h = random(&[2, 4], 38);
        let err = grad_check(|h| nll(&enc.forward(&store, h, (0, 1), None)?, 0), &h, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn flip_is_involution(len in 1usize..=32, d in 1usize..4, frac in 0.0f64..=1.0, seed in any::<u64>()) {
            let x = random(&[len, d], seed);
            let n = ((len as f64) * frac).floor() as usize;
            let twice = partial_flip(&partial_flip(&x, n).unwrap(), n).unwrap();
            prop_assert_eq!(twice.data(), x.data());
        }

        #[test]
        fn probabilities_on_simplex(len in 1usize..6, seed in any::<u64>()) {
            let (mut store, enc) = tiny(4, 2, seed);
            jitter(&mut store, seed ^ 1);
            let h = random(&[len, 4], seed ^ 2);
            let p = enc.forward(&store, &h, (0, len), None).unwrap();
            let s: f64 = p.data().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
