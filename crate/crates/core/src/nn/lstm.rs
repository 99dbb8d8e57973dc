//! Masked LSTM cell and bidirectional wrapper.
//!
//! Sequences are right-padded; the mask carries hidden state across padded
//! steps so the forward direction's final state is the state at the last
//! valid position and padded outputs can be zeroed by the caller.

use candle_core::Tensor;

use super::layers::Linear;
use super::ParamRegistry;
use crate::Result;

pub struct LstmCell {
    ih: Linear,
    hh: Linear,
    hidden: usize,
}

impl LstmCell {
    pub fn new(reg: &mut ParamRegistry, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(LstmCell {
            ih: Linear::new(reg, &format!("{name}.ih"), input, 4 * hidden)?,
            hh: Linear::new_no_bias(reg, &format!("{name}.hh"), hidden, 4 * hidden)?,
            hidden,
        })
    }

    /// One step. x: (B, input), h/c: (B, hidden).
    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let gates = (self.ih.forward(x)? + self.hh.forward(h)?)?;
        let hsz = self.hidden;
        let i = candle_nn::ops::sigmoid(&gates.narrow(1, 0, hsz)?)?;
        let f = candle_nn::ops::sigmoid(&gates.narrow(1, hsz, hsz)?)?;
        let g = gates.narrow(1, 2 * hsz, hsz)?.tanh()?;
        let o = candle_nn::ops::sigmoid(&gates.narrow(1, 3 * hsz, hsz)?)?;
        let c_new = ((f * c)? + (i * g)?)?;
        let h_new = (o * c_new.tanh()?)?;
        Ok((h_new, c_new))
    }
}

pub struct BiLstm {
    fwd: LstmCell,
    bwd: LstmCell,
    hidden: usize,
}

pub struct BiLstmOutput {
    /// (B, T, 2*hidden); padded positions are all-zero.
    pub states: Tensor,
    /// (B, 2*hidden): forward state at the last valid position concatenated
    /// with backward state at position 0.
    pub finals: Tensor,
}

impl BiLstm {
    pub fn new(reg: &mut ParamRegistry, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(BiLstm {
            fwd: LstmCell::new(reg, &format!("{name}.fwd"), input, hidden)?,
            bwd: LstmCell::new(reg, &format!("{name}.bwd"), input, hidden)?,
            hidden,
        })
    }

    /// x: (B, T, input), mask: (B, T) in {0,1}.
    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<BiLstmOutput> {
        let (b, t, _in) = x.dims3()?;
        let dev = x.device();
        let zeros = Tensor::zeros((b, self.hidden), x.dtype(), dev)?;

        let run = |cell: &LstmCell, order: Box<dyn Iterator<Item = usize>>| -> Result<Vec<Tensor>> {
            let mut h = zeros.clone();
            let mut c = zeros.clone();
            let mut states = vec![Tensor::zeros((b, self.hidden), x.dtype(), dev)?; t];
            for step in order {
                let xt = x.narrow(1, step, 1)?.squeeze(1)?.contiguous()?;
                let mt = mask.narrow(1, step, 1)?.to_dtype(x.dtype())?; // (B, 1)
                let (h_new, c_new) = cell.step(&xt, &h, &c)?;
                // Carry previous state across padded positions.
                h = (h_new.broadcast_mul(&mt)? + h.broadcast_mul(&(1.0 - &mt)?)?)?;
                c = (c_new.broadcast_mul(&mt)? + c.broadcast_mul(&(1.0 - &mt)?)?)?;
                states[step] = h.clone();
            }
            Ok(states)
        };

        let fwd_states = run(&self.fwd, Box::new(0..t))?;
        let bwd_states = run(&self.bwd, Box::new((0..t).rev()))?;

        let mut per_step = Vec::with_capacity(t);
        for step in 0..t {
            let cat = Tensor::cat(&[&fwd_states[step], &bwd_states[step]], 1)?; // (B, 2H)
            per_step.push(cat.unsqueeze(1)?);
        }
        let states = Tensor::cat(&per_step, 1)?; // (B, T, 2H)
        let states = states.broadcast_mul(&mask.to_dtype(x.dtype())?.unsqueeze(2)?)?;

        // Forward carry ends at the final step; backward carry ends at step 0.
        let finals = Tensor::cat(&[&fwd_states[t - 1], &bwd_states[0]], 1)?;
        Ok(BiLstmOutput { states, finals })
    }
}
