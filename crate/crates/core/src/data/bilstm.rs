use rand::Rng;

use crate::error::{Error, Result};
use crate::mlstm::uniform;
use crate::params::ParamStore;
use crate::tensor::{ParamId, Tensor};

/// One direction of an LSTM. Gate blocks are laid out `[i, f, g, o]`.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub hidden: usize,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

impl LstmParams {
    fn init(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let g = 4 * hidden;
        Ok(LstmParams {
            hidden,
            w_ih: store.add(&format!("{name}.w_ih"), &[d_in, g], uniform(rng, d_in * g, bound), true)?,
            w_hh: store.add(&format!("{name}.w_hh"), &[hidden, g], uniform(rng, hidden * g, bound), true)?,
            b: store.add(&format!("{name}.b"), &[g], uniform(rng, g, bound), true)?,
        })
    }

    fn param_count(d_in: usize, hidden: usize) -> usize {
        4 * hidden * (d_in + hidden + 1)
    }
}

/// Single-layer bidirectional LSTM whose two halves are concatenated.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstm {
    /// `d_out` must be even; each direction gets half.
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        if d_out == 0 || d_out % 2 != 0 {
            return Err(Error::Config(format!("BiLSTM width {d_out} must be even and positive")));
        }
        Ok(BiLstm {
            fwd: LstmParams::init(store, &format!("{name}.fwd"), d_in, d_out / 2, rng)?,
            bwd: LstmParams::init(store, &format!("{name}.bwd"), d_in, d_out / 2, rng)?,
        })
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        2 * LstmParams::param_count(d_in, d_out / 2)
    }
}

/// Encodes `x: [B, N, d_in]` where row `b` holds `lengths[b]` real
/// positions followed by padding. Returns `[B, N, d_out]`, zero at padding.
/// The backward direction starts at each row's last real token.
pub fn bilstm_encode(store: &ParamStore, p: &BiLstm, x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[0] != lengths.len() {
        return Err(Error::contract(
            "bilstm_encode",
            format!("input {:?} does not match {} lengths", x.shape(), lengths.len()),
        ));
    }
    let (b, n) = (x.shape()[0], x.shape()[1]);
    if let Some(&bad) = lengths.iter().find(|&&l| l > n) {
        return Err(Error::contract("bilstm_encode", format!("length {bad} exceeds width {n}")));
    }
    let fwd = run(store, &p.fwd, x, lengths, (0..n).collect(), b, n)?;
    let bwd = run(store, &p.bwd, x, lengths, (0..n).rev().collect(), b, n)?;
    Tensor::concat_lastdim(&[fwd, bwd])
}

fn run(
    store: &ParamStore,
    p: &LstmParams,
    x: &Tensor,
    lengths: &[usize],
    order: Vec<usize>,
    b: usize,
    n: usize,
) -> Result<Tensor> {
    let hd = p.hidden;
    let xproj = x.matmul(store.get(p.w_ih))?.add(store.get(p.b))?;
    let w_hh = store.get(p.w_hh);
    let mut h = Tensor::zeros(&[b, hd]);
    let mut c = Tensor::zeros(&[b, hd]);
    let mut outs: Vec<Option<Tensor>> = vec![None; n];
    for t in order {
        let mask = Tensor::new(
            &[b, 1],
            lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect(),
        )?;
        let gates = xproj
            .narrow(1, t, 1)?
            .reshape(&[b, 4 * hd])?
            .add(&h.matmul(w_hh)?)?;
        let i = gates.narrow(1, 0, hd)?.sigmoid()?;
        let f = gates.narrow(1, hd, hd)?.sigmoid()?;
        let g = gates.narrow(1, 2 * hd, hd)?.tanh()?;
        let o = gates.narrow(1, 3 * hd, hd)?.sigmoid()?;
        c = f.mul(&c)?.add(&i.mul(&g)?)?.mul(&mask)?;
        h = o.mul(&c.tanh()?)?.mul(&mask)?;
        outs[t] = Some(h.reshape(&[b, 1, hd])?);
    }
    let outs: Vec<Tensor> = outs.into_iter().flatten().collect();
    if outs.is_empty() {
        return Ok(Tensor::zeros(&[b, 0, hd]));
    }
    Tensor::concat(&outs, 1)
}
