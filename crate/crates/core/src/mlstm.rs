//! Matrix-memory LSTM with stabilized exponential gating.
//!
//! Per head, with queries `q`, pre-scaled keys `k`, values `v`, input gate
//! preactivation `ĩ` and log-domain forget preactivation `f̃`:
//!
//! ```text
//! m' = max(f̃ + m, ĩ)
//! i' = exp(ĩ - m'),  f' = exp(f̃ + m - m')
//! C' = f'·C + i'·v kᵀ
//! n' = f'·n + i'·k
//! h  = C' q / max(|n'ᵀ q|, exp(-m'))
//! ```
//!
//! `C`, `n` are carried scaled by `exp(-m)`, so the `exp(-m')` floor is the
//! unit floor `max(|nᵀq|, 1)` of the unscaled memory. The forget
//! preactivation enters the cell as `log σ(w_f·x + b_f)`.
//!
//! [`mlstm_cross`] drives the recurrence with queries and gates from one
//! sequence, keys from a second and values from a third; [`mlstm_self`] is
//! the diagonal case. [`mlstm_parallel`] evaluates the same function in
//! closed form and is kept as an oracle for tests.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{ParamId, Tensor};

/// Forget-gate bias at initialization; σ(3) ≈ 0.95 keeps memory long.
pub const FORGET_BIAS_INIT: f64 = 3.0;

#[derive(Clone, Debug)]
pub struct MlstmParams {
    pub d_model: usize,
    pub heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_i: ParamId,
    pub b_i: ParamId,
    pub w_f: ParamId,
    pub b_f: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

pub(crate) fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

impl MlstmParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::contract(
                "MlstmParams::init",
                format!("{heads} heads do not divide d_model {d_model}"),
            ));
        }
        let bound = 1.0 / (d_model as f64).sqrt();
        let d = d_model;
        let mut add = |name: &str, shape: &[usize], data: Vec<f64>| store.add(&format!("{prefix}.{name}"), shape, data, true);
        Ok(MlstmParams {
            d_model,
            heads,
            w_q: add("w_q", &[d, d], uniform(rng, d * d, bound))?,
            w_k: add("w_k", &[d, d], uniform(rng, d * d, bound))?,
            w_v: add("w_v", &[d, d], uniform(rng, d * d, bound))?,
            w_i: add("w_i", &[d, heads], uniform(rng, d * heads, bound))?,
            b_i: add("b_i", &[heads], vec![0.0; heads])?,
            w_f: add("w_f", &[d, heads], uniform(rng, d * heads, bound))?,
            b_f: add("b_f", &[heads], vec![FORGET_BIAS_INIT; heads])?,
            w_o: add("w_o", &[d, d], uniform(rng, d * d, bound))?,
            b_o: add("b_o", &[d], vec![0.0; d])?,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    /// Scalar count, `4d² + 2dH + 2H + d`.
    pub fn param_count(d_model: usize, heads: usize) -> usize {
        4 * d_model * d_model + 2 * d_model * heads + 2 * heads + d_model
    }
}

/// Recurrent state of every head.
#[derive(Clone, Debug, PartialEq)]
pub struct MlstmState {
    pub heads: usize,
    pub d_head: usize,
    /// Per head, a row-major `d_head × d_head` memory.
    pub c: Vec<f64>,
    /// Per head, a `d_head` normalizer.
    pub n: Vec<f64>,
    /// Per head log-domain stabilizer.
    pub m: Vec<f64>,
}

impl MlstmState {
    pub fn zeros(heads: usize, d_head: usize) -> Self {
        MlstmState {
            heads,
            d_head,
            c: vec![0.0; heads * d_head * d_head],
            n: vec![0.0; heads * d_head],
            m: vec![0.0; heads],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().chain(&self.n).chain(&self.m).all(|v| v.is_finite())
    }
}

/// Gate factors and read-out denominator of one head step.
#[derive(Clone, Copy, Debug)]
struct StepTrace {
    forget: f64,
    input: f64,
    m: f64,
    s: f64,
    den: f64,
}

/// Advances one head in place and writes its read-out into `h`.
fn head_step(
    c: &mut [f64],
    n: &mut [f64],
    m: &mut f64,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    i_pre: f64,
    f_pre: f64,
    h: &mut [f64],
) -> StepTrace {
    let dh = q.len();
    let m_new = (f_pre + *m).max(i_pre);
    let forget = (f_pre + *m - m_new).exp();
    let input = (i_pre - m_new).exp();
    for r in 0..dh {
        let row = &mut c[r * dh..(r + 1) * dh];
        let vr = input * v[r];
        for (cv, kv) in row.iter_mut().zip(k) {
            *cv = forget * *cv + vr * kv;
        }
    }
    for (nv, kv) in n.iter_mut().zip(k) {
        *nv = forget * *nv + input * kv;
    }
    *m = m_new;
    let s: f64 = n.iter().zip(q).map(|(a, b)| a * b).sum();
    let den = s.abs().max((-m_new).exp());
    for r in 0..dh {
        let row = &c[r * dh..(r + 1) * dh];
        h[r] = row.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / den;
    }
    StepTrace {
        forget,
        input,
        m: m_new,
        s,
        den,
    }
}

fn check_gate(i_pre: f64, f_pre: f64, step: usize, head: usize) -> Result<()> {
    if i_pre.is_finite() && f_pre.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteGate { step, head })
    }
}

/// One recurrence step for all heads. `q`, `k`, `v` hold `heads·d_head`
/// values laid out head by head; `k` is expected pre-scaled. `step` is only
/// used to label errors.
pub fn mlstm_step(
    state: &MlstmState,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    i_pre: &[f64],
    f_pre: &[f64],
    step: usize,
) -> Result<(MlstmState, Vec<f64>)> {
    let (heads, dh) = (state.heads, state.d_head);
    let width = heads * dh;
    if q.len() != width || k.len() != width || v.len() != width || i_pre.len() != heads || f_pre.len() != heads {
        return Err(Error::contract(
            "mlstm_step",
            format!("expected {heads} heads of width {dh}"),
        ));
    }
    let mut next = state.clone();
    let mut h = vec![0.0; width];
    for hd in 0..heads {
        check_gate(i_pre[hd], f_pre[hd], step, hd)?;
        let sl = hd * dh..(hd + 1) * dh;
        head_step(
            &mut next.c[hd * dh * dh..(hd + 1) * dh * dh],
            &mut next.n[sl.clone()],
            &mut next.m[hd],
            &q[sl.clone()],
            &k[sl.clone()],
            &v[sl.clone()],
            i_pre[hd],
            f_pre[hd],
            &mut h[sl],
        );
    }
    if !next.is_finite() || h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "mlstm_step" });
    }
    Ok((next, h))
}

/// Sequence recurrence as a single graph node with hand-written
/// backpropagation through time. Inputs: `q`, `k`, `v` as `[T, H·dh]`,
/// gate preactivations as `[T, H]`. Output `[T, H·dh]`.
pub fn mlstm_recurrence(q: &Tensor, k: &Tensor, v: &Tensor, i_pre: &Tensor, f_pre: &Tensor, heads: usize) -> Result<Tensor> {
    if q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "mlstm_recurrence",
            lhs: q.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let (t_len, width) = (q.shape()[0], q.shape()[1]);
    if heads == 0 || width % heads != 0 || i_pre.shape() != [t_len, heads] || f_pre.shape() != [t_len, heads] {
        return Err(Error::contract(
            "mlstm_recurrence",
            format!("gates {:?} incompatible with {heads} heads over {:?}", i_pre.shape(), q.shape()),
        ));
    }
    let dh = width / heads;
    let (qd, kd, vd, id, fd) = (q.data(), k.data(), v.data(), i_pre.data(), f_pre.data());

    // memories C_0..C_T and normalizers n_0..n_T, per head
    let csz = heads * dh * dh;
    let nsz = heads * dh;
    let mut cs = vec![0.0; (t_len + 1) * csz];
    let mut ns = vec![0.0; (t_len + 1) * nsz];
    let mut ms = vec![0.0; heads];
    let mut traces = Vec::with_capacity(t_len * heads);
    let mut out = vec![0.0; t_len * width];
    for t in 0..t_len {
        let (c_prev, c_next) = cs.split_at_mut((t + 1) * csz);
        c_next[..csz].copy_from_slice(&c_prev[t * csz..]);
        let (n_prev, n_next) = ns.split_at_mut((t + 1) * nsz);
        n_next[..nsz].copy_from_slice(&n_prev[t * nsz..]);
        for hd in 0..heads {
            let (ip, fp) = (id[t * heads + hd], fd[t * heads + hd]);
            check_gate(ip, fp, t, hd)?;
            let row = t * width + hd * dh;
            let trace = head_step(
                &mut c_next[hd * dh * dh..(hd + 1) * dh * dh],
                &mut n_next[hd * dh..(hd + 1) * dh],
                &mut ms[hd],
                &qd[row..row + dh],
                &kd[row..row + dh],
                &vd[row..row + dh],
                ip,
                fp,
                &mut out[row..row + dh],
            );
            traces.push(trace);
        }
    }

    Tensor::from_op(
        "mlstm_recurrence",
        vec![t_len, width],
        out,
        vec![q.clone(), k.clone(), v.clone(), i_pre.clone(), f_pre.clone()],
        move |ctx, bufs| {
            let (qd, kd, vd) = (ctx.parents[0].data(), ctx.parents[1].data(), ctx.parents[2].data());
            let mut gq = vec![0.0; t_len * width];
            let mut gk = vec![0.0; t_len * width];
            let mut gv = vec![0.0; t_len * width];
            let mut gi = vec![0.0; t_len * heads];
            let mut gf = vec![0.0; t_len * heads];
            let mut dc = vec![0.0; dh * dh];
            let mut dn = vec![0.0; dh];
            let mut dnum = vec![0.0; dh];
            for hd in 0..heads {
                dc.iter_mut().for_each(|x| *x = 0.0);
                dn.iter_mut().for_each(|x| *x = 0.0);
                for t in (0..t_len).rev() {
                    let tr = traces[t * heads + hd];
                    let row = t * width + hd * dh;
                    let (q, k, v) = (&qd[row..row + dh], &kd[row..row + dh], &vd[row..row + dh]);
                    let c_cur = &cs[(t + 1) * csz + hd * dh * dh..][..dh * dh];
                    let c_old = &cs[t * csz + hd * dh * dh..][..dh * dh];
                    let n_cur = &ns[(t + 1) * nsz + hd * dh..][..dh];
                    let n_old = &ns[t * nsz + hd * dh..][..dh];
                    let gh = &ctx.grad[row..row + dh];
                    let h = &ctx.output[row..row + dh];

                    // read-out h = C q / den
                    let mut dden = 0.0;
                    for r in 0..dh {
                        dnum[r] = gh[r] / tr.den;
                        dden -= gh[r] * h[r] / tr.den;
                    }
                    let ds = if tr.s.abs() > (-tr.m).exp() { dden * tr.s.signum() } else { 0.0 };
                    let gq_row = &mut gq[row..row + dh];
                    for r in 0..dh {
                        for j in 0..dh {
                            dc[r * dh + j] += dnum[r] * q[j];
                            gq_row[j] += c_cur[r * dh + j] * dnum[r];
                        }
                    }
                    for j in 0..dh {
                        gq_row[j] += ds * n_cur[j];
                        dn[j] += ds * q[j];
                    }

                    // state update
                    let mut da = 0.0;
                    let mut db = 0.0;
                    for r in 0..dh {
                        for j in 0..dh {
                            let g = dc[r * dh + j];
                            da += g * c_old[r * dh + j];
                            db += v[r] * g * k[j];
                        }
                        da += dn[r] * n_old[r];
                        db += dn[r] * k[r];
                    }
                    gf[t * heads + hd] = da * tr.forget;
                    gi[t * heads + hd] = db * tr.input;
                    let gv_row = &mut gv[row..row + dh];
                    for r in 0..dh {
                        gv_row[r] = tr.input * (0..dh).map(|j| dc[r * dh + j] * k[j]).sum::<f64>();
                    }
                    let gk_row = &mut gk[row..row + dh];
                    for j in 0..dh {
                        gk_row[j] = tr.input * ((0..dh).map(|r| dc[r * dh + j] * v[r]).sum::<f64>() + dn[j]);
                    }
                    dc.iter_mut().for_each(|x| *x *= tr.forget);
                    dn.iter_mut().for_each(|x| *x *= tr.forget);
                }
            }
            for (buf, g) in bufs.iter_mut().zip([gq, gk, gv, gi, gf]) {
                if let Some(buf) = buf.as_mut() {
                    for (a, b) in buf.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        },
    )
}

fn check_sequences(q_src: &Tensor, k_src: &Tensor, v_src: &Tensor, d_model: usize) -> Result<()> {
    let expect = |t: &Tensor| t.rank() == 2 && t.shape()[1] == d_model && t.shape()[0] == q_src.shape()[0];
    for other in [q_src, k_src, v_src] {
        if !expect(other) {
            return Err(Error::ShapeMismatch {
                op: "mlstm_cross",
                lhs: q_src.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
    }
    if q_src.shape()[0] == 0 {
        return Err(Error::contract("mlstm_cross", "empty sequence"));
    }
    Ok(())
}

/// Cross-mode mLSTM: queries, gates and output gate from `q_src`, keys
/// from `k_src`, values from `v_src`. All `[T, d_model]`.
pub fn mlstm_cross(store: &ParamStore, p: &MlstmParams, q_src: &Tensor, k_src: &Tensor, v_src: &Tensor) -> Result<Tensor> {
    check_sequences(q_src, k_src, v_src, p.d_model)?;
    let key_scale = 1.0 / (p.d_head() as f64).sqrt();
    let q = q_src.matmul(store.get(p.w_q))?;
    let k = k_src.matmul(store.get(p.w_k))?.scale(key_scale)?;
    let v = v_src.matmul(store.get(p.w_v))?;
    let i_pre = q_src.matmul(store.get(p.w_i))?.add(store.get(p.b_i))?;
    let f_pre = q_src.matmul(store.get(p.w_f))?.add(store.get(p.b_f))?.log_sigmoid()?;
    let h = mlstm_recurrence(&q, &k, &v, &i_pre, &f_pre, p.heads)?;
    let gate = q_src.matmul(store.get(p.w_o))?.add(store.get(p.b_o))?.sigmoid()?;
    gate.mul(&h)
}

/// Self-mode mLSTM over `[T, d_model]`.
pub fn mlstm_self(store: &ParamStore, p: &MlstmParams, x: &Tensor) -> Result<Tensor> {
    mlstm_cross(store, p, x, x, x)
}

fn project(x: &[f64], w: &[f64], rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * dout];
    for t in 0..rows {
        for o in 0..dout {
            out[t * dout + o] = (0..din).map(|i| x[t * din + i] * w[i * dout + o]).sum();
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unstabilized closed-form decay weights of one head:
/// `a[t][s] = exp(ĩ_s + Σ_{u=s+1..t} f̃_u)` for `s ≤ t`, zero above the
/// diagonal.
pub fn decay_weights(i_pre: &[f64], f_pre: &[f64]) -> Vec<Vec<f64>> {
    let t_len = i_pre.len();
    (0..t_len)
        .map(|t| {
            (0..t_len)
                .map(|s| {
                    if s > t {
                        0.0
                    } else {
                        (i_pre[s] + f_pre[s + 1..=t].iter().sum::<f64>()).exp()
                    }
                })
                .collect()
        })
        .collect()
}

/// Quadratic closed form of [`mlstm_cross`] on plain arrays. Sums the
/// unrolled memory `Σ_s a[t][s]·v_s (k_sᵀ q_t)` in the log domain with the
/// same stabilizer the recurrence carries. Test oracle only.
pub fn mlstm_parallel(store: &ParamStore, p: &MlstmParams, q_src: &Tensor, k_src: &Tensor, v_src: &Tensor) -> Result<Vec<f64>> {
    check_sequences(q_src, k_src, v_src, p.d_model)?;
    let (t_len, d, heads, dh) = (q_src.shape()[0], p.d_model, p.heads, p.d_head());
    let w = |id: ParamId| store.get(id).data();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = project(q_src.data(), w(p.w_q), t_len, d, d);
    let k: Vec<f64> = project(k_src.data(), w(p.w_k), t_len, d, d).iter().map(|x| x * scale).collect();
    let v = project(v_src.data(), w(p.w_v), t_len, d, d);
    let mut i_pre = project(q_src.data(), w(p.w_i), t_len, d, heads);
    let mut f_pre = project(q_src.data(), w(p.w_f), t_len, d, heads);
    for t in 0..t_len {
        for hd in 0..heads {
            i_pre[t * heads + hd] += w(p.b_i)[hd];
            let z = f_pre[t * heads + hd] + w(p.b_f)[hd];
            f_pre[t * heads + hd] = -(1.0 + (-z).exp()).ln();
        }
    }
    let gate = project(q_src.data(), w(p.w_o), t_len, d, d);

    let mut out = vec![0.0; t_len * d];
    for hd in 0..heads {
        let ih: Vec<f64> = (0..t_len).map(|t| i_pre[t * heads + hd]).collect();
        let fh: Vec<f64> = (0..t_len).map(|t| f_pre[t * heads + hd]).collect();
        let mut cum = vec![0.0; t_len + 1];
        for t in 0..t_len {
            cum[t + 1] = cum[t] + fh[t];
        }
        for t in 0..t_len {
            // log a[t][s] = ĩ_s + F(t) - F(s), the initial zero state carries log weight F(t)
            let logs: Vec<f64> = (0..=t).map(|s| ih[s] + cum[t + 1] - cum[s + 1]).collect();
            let m = logs.iter().cloned().fold(cum[t + 1], f64::max);
            let qt = &q[t * d + hd * dh..t * d + (hd + 1) * dh];
            let mut num = vec![0.0; dh];
            let mut s_sum = 0.0;
            for (s, &lw) in logs.iter().enumerate() {
                let ks = &k[s * d + hd * dh..s * d + (hd + 1) * dh];
                let vs = &v[s * d + hd * dh..s * d + (hd + 1) * dh];
                let weight = (lw - m).exp() * ks.iter().zip(qt).map(|(a, b)| a * b).sum::<f64>();
                s_sum += weight;
                for r in 0..dh {
                    num[r] += weight * vs[r];
                }
            }
            let den = s_sum.abs().max((-m).exp());
            for r in 0..dh {
                let col = t * d + hd * dh + r;
                out[col] = sigmoid(gate[col] + w(p.b_o)[hd * dh + r]) * num[r] / den;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, d: usize, heads: usize) -> (ParamStore, MlstmParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let p = MlstmParams::init(&mut store, "m", d, heads, &mut rng).unwrap();
        (store, p, rng)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, uniform(rng, n, bound)).unwrap()
    }

    #[test]
    fn first_step_hand_value() {
        let s = MlstmState::zeros(1, 1);
        let (next, h) = mlstm_step(&s, &[1.0], &[1.0], &[5.0], &[0.0], &[0.0], 0).unwrap();
        assert_eq!(h, vec![5.0]);
        assert_eq!(next.c, vec![5.0]);
        assert_eq!(next.n, vec![1.0]);
    }

    #[test]
    fn no_write_limit_decays_state() {
        let s = MlstmState::zeros(1, 2);
        let (s1, _) = mlstm_step(&s, &[1.0, 0.0], &[1.0, 0.0], &[2.0, -3.0], &[0.0], &[0.0], 0).unwrap();
        let (s2, h) = mlstm_step(&s1, &[1.0, 0.0], &[0.3, 0.9], &[100.0, 100.0], &[-1e4], &[0.5f64.ln()], 1).unwrap();
        // the write of the second value vanishes; unscaled memory halves
        assert_eq!(h, vec![1.0, -1.5]);
        let unscale = s2.m[0].exp();
        assert!(s2.c.iter().zip(&s1.c).all(|(a, b)| (a * unscale - 0.5 * b).abs() < 1e-12));
    }

    #[test]
    fn write_once_then_read() {
        // write v1 at step 1 only; step 2 reads v1 scaled by k1·q2
        let s = MlstmState::zeros(1, 2);
        let k1 = [0.6, 0.8];
        let v1 = [1.5, -2.0];
        let (s1, h1) = mlstm_step(&s, &[0.6, 0.8], &k1, &v1, &[0.0], &[0.0], 0).unwrap();
        assert!((h1[0] - 1.5).abs() < 1e-12 && (h1[1] + 2.0).abs() < 1e-12);
        let q2 = [0.2, 0.1];
        let (_, h2) = mlstm_step(&s1, &q2, &[9.0, 9.0], &[9.0, 9.0], &[-1e4], &[0.0], 1).unwrap();
        // k1·q2 = 0.2, denominator max(0.2, 1) = 1
        assert!((h2[0] - 0.3).abs() < 1e-12, "{h2:?}");
        assert!((h2[1] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn stabilized_matches_unstabilized_reference() {
        // unstabilized: C = Σ i f... with raw exponentials, denominator max(|nq|, 1)
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dh = 3;
        let mut s = MlstmState::zeros(1, dh);
        let mut cu = vec![0.0; dh * dh];
        let mut nu = vec![0.0; dh];
        for step in 0..6 {
            let q = uniform(&mut rng, dh, 1.0);
            let k = uniform(&mut rng, dh, 1.0);
            let v = uniform(&mut rng, dh, 1.0);
            let ip: f64 = rng.gen_range(-2.0..2.0);
            let fp: f64 = rng.gen_range(-1.0..0.0);
            let (ns, h) = mlstm_step(&s, &q, &k, &v, &[ip], &[fp], step).unwrap();
            s = ns;
            let (fi, ii) = (fp.exp(), ip.exp());
            for r in 0..dh {
                for j in 0..dh {
                    cu[r * dh + j] = fi * cu[r * dh + j] + ii * v[r] * k[j];
                }
                nu[r] = fi * nu[r] + ii * k[r];
            }
            let den = nu.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>().abs().max(1.0);
            for r in 0..dh {
                let reference = (0..dh).map(|j| cu[r * dh + j] * q[j]).sum::<f64>() / den;
                assert!((h[r] - reference).abs() <= 1e-6 * reference.abs().max(1e-12), "{} vs {}", h[r], reference);
            }
        }
        // a huge input gate stays finite
        let (big, h) = mlstm_step(&s, &[0.1, 0.2, 0.3], &[0.3, 0.2, 0.1], &[1.0, 2.0, 3.0], &[1000.0], &[-0.1], 6).unwrap();
        assert!(big.is_finite() && h.iter().all(|x| x.is_finite()));
        // with the write dominating, h tends to v·sign(k·q)
        for (x, y) in h.iter().zip([1.0, 2.0, 3.0]) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_gate_is_reported() {
        let s = MlstmState::zeros(2, 1);
        let err = mlstm_step(&s, &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[0.0, f64::NAN], &[0.0, 0.0], 4).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGate { step: 4, head: 1 }));
    }

    #[test]
    fn convex_combination_with_shared_unit_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dh = 4;
        let mut u = uniform(&mut rng, dh, 1.0);
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= norm);
        let mut s = MlstmState::zeros(1, dh);
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for step in 0..10 {
            let v = uniform(&mut rng, dh, 5.0);
            seen.push(v.clone());
            let (ns, h) = mlstm_step(&s, &u, &u, &v, &[0.0], &[0.0], step).unwrap();
            s = ns;
            for r in 0..dh {
                let lo = seen.iter().map(|v| v[r]).fold(f64::INFINITY, f64::min);
                let hi = seen.iter().map(|v| v[r]).fold(f64::NEG_INFINITY, f64::max);
                assert!(h[r] >= lo - 1e-12 && h[r] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn single_step_sequence_equals_step() {
        let (store, p, mut rng) = setup(4, 4, 2);
        let x = random(&mut rng, &[1, 4], 1.0);
        let out = mlstm_self(&store, &p, &x).unwrap();
        let w = |id| store.get(id).data().to_vec();
        let q = project(x.data(), &w(p.w_q), 1, 4, 4);
        let k: Vec<f64> = project(x.data(), &w(p.w_k), 1, 4, 4).iter().map(|v| v / 2f64.sqrt()).collect();
        let v = project(x.data(), &w(p.w_v), 1, 4, 4);
        let ip: Vec<f64> = project(x.data(), &w(p.w_i), 1, 4, 2).iter().zip(w(p.b_i)).map(|(a, b)| a + b).collect();
        let fp: Vec<f64> = project(x.data(), &w(p.w_f), 1, 4, 2)
            .iter()
            .zip(w(p.b_f))
            .map(|(a, b)| -(1.0 + (-(a + b)).exp()).ln())
            .collect();
        let (_, h) = mlstm_step(&MlstmState::zeros(2, 2), &q, &k, &v, &ip, &fp, 0).unwrap();
        let og = project(x.data(), &w(p.w_o), 1, 4, 4);
        for r in 0..4 {
            let expect = sigmoid(og[r] + w(p.b_o)[r]) * h[r];
            assert!((out.data()[r] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_preactivations_weights() {
        // ĩ = 0, f̃ = log σ(0) = ln ½  =>  a[t][s] = ½^(t-s)
        let f = 0.5f64.ln();
        let a = decay_weights(&[0.0; 3], &[f; 3]);
        let expect = [[1.0, 0.0, 0.0], [0.5, 1.0, 0.0], [0.25, 0.5, 1.0]];
        for t in 0..3 {
            for s in 0..3 {
                assert!((a[t][s] - expect[t][s]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn parallel_matches_recurrent() {
        for seed in 0..5 {
            let (store, p, mut rng) = setup(seed, 8, 2);
            for t_len in [1, 2, 4, 8, 16] {
                let x = random(&mut rng, &[t_len, 8], 2.0);
                let rec = mlstm_self(&store, &p, &x).unwrap();
                let par = mlstm_parallel(&store, &p, &x, &x, &x).unwrap();
                for (a, b) in rec.data().iter().zip(&par) {
                    assert!((a - b).abs() <= 1e-5, "T={t_len}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn cross_diagonal_is_self() {
        let (store, p, mut rng) = setup(7, 8, 4);
        let x = random(&mut rng, &[5, 8], 1.0);
        let a = mlstm_self(&store, &p, &x).unwrap();
        let b = mlstm_cross(&store, &p, &x, &x, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn cross_rejects_length_mismatch() {
        let (store, p, mut rng) = setup(7, 4, 2);
        let x = random(&mut rng, &[5, 4], 1.0);
        let y = random(&mut rng, &[4, 4], 1.0);
        assert!(mlstm_cross(&store, &p, &x, &x, &y).is_err());
    }

    #[test]
    fn cross_is_causal_in_each_source() {
        let (store, p, mut rng) = setup(8, 4, 2);
        let t_len = 6;
        let srcs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[t_len, 4], 1.0)).collect();
        let base = mlstm_cross(&store, &p, &srcs[0], &srcs[1], &srcs[2]).unwrap();
        for which in 0..3 {
            for t in 0..t_len - 1 {
                let mut perturbed = srcs.clone();
                let mut d = perturbed[which].to_vec();
                for v in d[(t + 1) * 4..].iter_mut() {
                    *v += 3.0;
                }
                perturbed[which] = Tensor::new(&[t_len, 4], d).unwrap();
                let out = mlstm_cross(&store, &p, &perturbed[0], &perturbed[1], &perturbed[2]).unwrap();
                for i in 0..(t + 1) * 4 {
                    assert!((out.data()[i] - base.data()[i]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn extreme_gates_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (t_len, heads, dh) = (20, 2, 3);
        let w = heads * dh;
        let q = random(&mut rng, &[t_len, w], 1.0);
        let k = random(&mut rng, &[t_len, w], 1.0);
        let v = random(&mut rng, &[t_len, w], 1.0);
        let ip = random(&mut rng, &[t_len, heads], 50.0);
        let fp = random(&mut rng, &[t_len, heads], 50.0);
        let h = mlstm_recurrence(&q, &k, &v, &ip, &fp, heads).unwrap();
        assert!(h.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn recurrence_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (t_len, heads, dh) = (5, 2, 3);
        let w = heads * dh;
        let q = random(&mut rng, &[t_len, w], 1.0);
        let k = random(&mut rng, &[t_len, w], 1.0);
        let v = random(&mut rng, &[t_len, w], 1.0);
        let ip = random(&mut rng, &[t_len, heads], 2.0);
        let fp = random(&mut rng, &[t_len, heads], 1.0).add_scalar(-1.0).unwrap();
        let weights = random(&mut rng, &[t_len, w], 1.0);
        let loss = |h: Tensor| h.mul(&weights)?.sum_all();
        let checks = [
            grad_check(|x| loss(mlstm_recurrence(x, &k, &v, &ip, &fp, heads)?), &q, 1e-6),
            grad_check(|x| loss(mlstm_recurrence(&q, x, &v, &ip, &fp, heads)?), &k, 1e-6),
            grad_check(|x| loss(mlstm_recurrence(&q, &k, x, &ip, &fp, heads)?), &v, 1e-6),
            grad_check(|x| loss(mlstm_recurrence(&q, &k, &v, x, &fp, heads)?), &ip, 1e-6),
            grad_check(|x| loss(mlstm_recurrence(&q, &k, &v, &ip, x, heads)?), &fp, 1e-6),
        ];
        for (i, c) in checks.into_iter().enumerate() {
            let err = c.unwrap();
            assert!(err <= 1e-6, "input {i}: {err}");
        }
    }

    #[test]
    fn cross_value_gradient_and_params() {
        let (store, p, mut rng) = setup(5, 4, 2);
        let qk = random(&mut rng, &[4, 4], 1.0);
        let v = random(&mut rng, &[4, 4], 1.0);
        let err = grad_check(|x| mlstm_cross(&store, &p, &qk, &qk, x)?.tanh()?.sum_all(), &v, 1e-6).unwrap();
        assert!(err <= 1e-4, "{err}");
        let report = grad_check_params(|s| mlstm_cross(s, &p, &qk, &qk, &v)?.tanh()?.sum_all(), &store, 1e-6).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
