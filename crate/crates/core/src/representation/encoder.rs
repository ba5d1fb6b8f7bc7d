//! Bidirectional LSTM over contextual embeddings.
//!
//! The input is first projected to the recurrent input width. Each direction
//! runs the standard LSTM update (gate order i, f, g, o) over unmasked
//! positions only; masked positions neither advance the state nor produce
//! output, and their rows are zero. Output columns `[0, H)` hold the forward
//! states and `[H, 2H)` the backward states.

use super::{ContextualEmbedding, EncodedSequence};
use crate::error::{Error, Result};
use crate::params::{Binder, Init, ParamStore};
use crate::tape::{Matrix, Tape, Var};

pub fn insert_lstm_params(store: &mut ParamStore, prefix: &str, input_dim: usize, lstm_in: usize, hidden: usize, seed: u64) {
    store.insert_glorot(&format!("{prefix}.proj"), input_dim, lstm_in, seed);
    for dir in ["fwd", "bwd"] {
        store.insert_glorot(&format!("{prefix}.{dir}.w_ih"), lstm_in, 4 * hidden, seed);
        store.insert_glorot(&format!("{prefix}.{dir}.w_hh"), hidden, 4 * hidden, seed);
        let mut bias = Matrix::zeros((1, 4 * hidden));
        bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        store.insert(format!("{prefix}.{dir}.b"), bias, true, Init::Constant);
    }
}

pub fn insert_linear_params(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, seed: u64) {
    store.insert_glorot(&format!("{prefix}.linear"), input_dim, 2 * hidden, seed);
}

fn run_direction(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    dir: &str,
    inputs: Var,
    mask: &[bool],
    reverse: bool,
) -> Result<Var> {
    let w_ih = binder.var(tape, &format!("{prefix}.{dir}.w_ih"))?;
    let w_hh = binder.var(tape, &format!("{prefix}.{dir}.w_hh"))?;
    let b = binder.var(tape, &format!("{prefix}.{dir}.b"))?;
    let hidden = tape.shape(w_hh).0;
    let xw = tape.matmul(inputs, w_ih);
    let xw = tape.add_row(xw, b);

    let mut h = tape.constant(Matrix::zeros((1, hidden)));
    let mut c = tape.constant(Matrix::zeros((1, hidden)));
    let mut rows: Vec<Option<Var>> = vec![None; mask.len()];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..mask.len()).rev())
    } else {
        Box::new(0..mask.len())
    };
    for t in order {
        if !mask[t] {
            continue;
        }
        let x = tape.row(xw, t);
        let hh = tape.matmul(h, w_hh);
        let z = tape.add(x, hh);
        let i = tape.slice_cols(z, 0, hidden);
        let f = tape.slice_cols(z, hidden, 2 * hidden);
        let g = tape.slice_cols(z, 2 * hidden, 3 * hidden);
        let o = tape.slice_cols(z, 3 * hidden, 4 * hidden);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        c = tape.add(fc, ig);
        let tc = tape.tanh(c);
        h = tape.mul(o, tc);
        rows[t] = Some(h);
    }
    Ok(tape.stack_rows(&rows, hidden))
}

/// `l × 2H` bidirectional encoding of `emb` (an `l × d` tape value).
pub fn bilstm_forward(tape: &mut Tape, binder: &mut Binder, prefix: &str, emb: Var, mask: &[bool]) -> Result<Var> {
    if mask.is_empty() || tape.shape(emb).0 != mask.len() {
        return Err(Error::Degenerate(format!(
            "sequence of {} rows with {} mask entries",
            tape.shape(emb).0,
            mask.len()
        )));
    }
    let proj = binder.var(tape, &format!("{prefix}.proj"))?;
    let inputs = tape.matmul(emb, proj);
    let fwd = run_direction(tape, binder, prefix, "fwd", inputs, mask, false)?;
    let bwd = run_direction(tape, binder, prefix, "bwd", inputs, mask, true)?;
    Ok(tape.concat_cols(&[fwd, bwd]))
}

/// Encoder-free replacement: a linear map straight to `2H`, masked rows zero.
pub fn linear_forward(tape: &mut Tape, binder: &mut Binder, prefix: &str, emb: Var, mask: &[bool]) -> Result<Var> {
    let w = binder.var(tape, &format!("{prefix}.linear"))?;
    let out = tape.matmul(emb, w);
    let m = tape.constant(super::plm::mask_column(mask));
    Ok(tape.scale_rows(out, m))
}

/// Stand-alone bidirectional encoder owning its parameters.
#[derive(Debug, Clone)]
pub struct RecurrentEncoder {
    pub params: ParamStore,
    pub prefix: String,
    pub hidden: usize,
}

impl RecurrentEncoder {
    pub fn new(input_dim: usize, lstm_in: usize, hidden: usize, seed: u64) -> Self {
        let prefix = "encoder".to_string();
        let mut params = ParamStore::new();
        insert_lstm_params(&mut params, &prefix, input_dim, lstm_in, hidden, seed);
        RecurrentEncoder { params, prefix, hidden }
    }

    pub fn encode(&self, emb: &ContextualEmbedding) -> Result<EncodedSequence> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let x = tape.constant(emb.matrix.clone());
        let out = bilstm_forward(&mut tape, &mut binder, &self.prefix, x, &emb.mask)?;
        Ok(EncodedSequence {
            matrix: tape.value(out).clone(),
            mask: emb.mask.clone(),
        })
    }

    /// The same encoder with forward and backward parameter sets exchanged.
    pub fn swapped_directions(&self) -> Self {
        let mut params = self.params.clone();
        for part in ["w_ih", "w_hh", "b"] {
            let f = format!("{}.fwd.{part}", self.prefix);
            let b = format!("{}.bwd.{part}", self.prefix);
            let fv = self.params.value(&f).expect("fwd param").clone();
            let bv = self.params.value(&b).expect("bwd param").clone();
            params.set_value(&f, bv).expect("same shape");
            params.set_value(&b, fv).expect("same shape");
        }
        RecurrentEncoder {
            params,
            prefix: self.prefix.clone(),
            hidden: self.hidden,
        }
    }
}
