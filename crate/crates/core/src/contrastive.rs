//! Cosine-similarity InfoNCE losses: global, cross-modal and frame-level.
//!
//! All tape functions take batched features and average over the batch.
//! Frame-level losses sum over timestamps before averaging.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Temperature(tau))
        } else {
            Err(Error::Config(format!("temperature must be positive, got {}", tau)))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(DEFAULT_TEMPERATURE)
    }
}

/// `h(x, y) = exp(cos(x, y) / τ)`.
pub fn sim_h(x: &[f64], y: &[f64], tau: Temperature) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("sim_h", format!("{} vs {}", x.len(), y.len())));
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::invalid("similarity of a zero vector is undefined"));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((dot / (nx * ny) / tau.value()).exp())
}

fn reject_zero_rows(tape: &Tape, x: Var, op: &'static str) -> Result<()> {
    let t = tape.value(x);
    let d = *t.shape().last().unwrap_or(&0);
    if d == 0 {
        return Err(Error::shape(op, format!("empty feature axis in {:?}", t.shape())));
    }
    if t.data().chunks(d).any(|row| row.iter().all(|&v| v == 0.0)) {
        return Err(Error::invalid(format!("{}: zero feature vector", op)));
    }
    Ok(())
}

fn normalized(tape: &mut Tape, x: Var, op: &'static str) -> Result<Var> {
    reject_zero_rows(tape, x, op)?;
    let axis = tape.shape(x).len() - 1;
    tape.l2_normalize(x, axis)
}

/// Cosine of matching rows along the last axis; the axis is kept with length 1.
fn row_cosine(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let p = tape.mul(a, b)?;
    let axis = tape.shape(p).len() - 1;
    let s = tape.sum_axis(p, axis)?;
    let mut shape = tape.shape(s).to_vec();
    shape.push(1);
    tape.reshape(s, &shape)
}

/// −log of the softmax mass on column 0 of `logits` (…×K), summed over all rows.
fn nll_first_column(tape: &mut Tape, logits: Var) -> Result<Var> {
    let axis = tape.shape(logits).len() - 1;
    let ls = tape.log_softmax(logits, axis)?;
    let first = tape.narrow(ls, axis, 0, 1)?;
    let s = tape.sum(first);
    Ok(tape.scale(s, -1.0))
}

fn check_same(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

/// InfoNCE of queries `q` (B×D) against positives `k_pos` (B×D) and a shared bank (N×D).
pub fn global_infonce(tape: &mut Tape, q: Var, k_pos: Var, bank: Var, tau: Temperature) -> Result<Var> {
    check_same(tape, q, k_pos, "global_infonce")?;
    let (qs, bs) = (tape.shape(q).to_vec(), tape.shape(bank).to_vec());
    if qs.len() != 2 || bs.len() != 2 || bs[1] != qs[1] {
        return Err(Error::shape(
            "global_infonce",
            format!("queries {:?} and bank {:?}", qs, bs),
        ));
    }
    if bs[0] == 0 {
        return Err(Error::invalid("global_infonce: memory bank is empty"));
    }
    let qn = normalized(tape, q, "global_infonce")?;
    let kn = normalized(tape, k_pos, "global_infonce")?;
    let bn = normalized(tape, bank, "global_infonce")?;
    let pos = row_cosine(tape, qn, kn)?;
    let bt = tape.transpose_last(bn)?;
    let neg = tape.matmul(qn, bt)?;
    let cat = tape.concat(&[pos, neg], 1)?;
    let logits = tape.scale(cat, 1.0 / tau.value());
    let total = nll_first_column(tape, logits)?;
    Ok(tape.scale(total, 1.0 / qs[0] as f64))
}

/// RGB queries against flow keys and flow queries against RGB keys.
#[allow(clippy::too_many_arguments)]
pub fn inter_modal_loss(
    tape: &mut Tape,
    rgb_q: Var,
    flow_k: Var,
    flow_bank: Var,
    flow_q: Var,
    rgb_k: Var,
    rgb_bank: Var,
    tau: Temperature,
) -> Result<Var> {
    let a = global_infonce(tape, rgb_q, flow_k, flow_bank, tau)?;
    let b = global_infonce(tape, flow_q, rgb_k, rgb_bank, tau)?;
    tape.add(a, b)
}

fn check_local(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    check_same(tape, a, b, op)?;
    let s = tape.shape(a);
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::shape(op, format!("expected B×T×D with T ≥ 1, got {:?}", s)));
    }
    Ok(())
}

/// B×T×K selector with ones on the leading T×T diagonal.
fn diagonal_mask(batch: usize, t: usize, k: usize) -> Tensor {
    Tensor::from_fn(&[batch, t, k], |i| {
        let (row, col) = ((i / k) % t, i % k);
        if row == col {
            1.0
        } else {
            0.0
        }
    })
}

/// Cross-entropy of the diagonal of `logits` (B×T×K) along the last axis, summed over T and averaged over B.
fn diagonal_nll(tape: &mut Tape, logits: Var) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let ls = tape.log_softmax(logits, 2)?;
    let mask = tape.constant(diagonal_mask(s[0], s[1], s[2]));
    let picked = tape.mul(ls, mask)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / s[0] as f64))
}

fn pairwise_logits(tape: &mut Tape, a: Var, b: Var, tau: Temperature) -> Result<Var> {
    let bt = tape.transpose_last(b)?;
    let s = tape.bmm(a, bt)?;
    Ok(tape.scale(s, 1.0 / tau.value()))
}

/// Frame-level loss: RGB frame i is matched to flow frame i against the other flow frames of the same clip.
pub fn lmcl(tape: &mut Tape, v_lc: Var, m_lc: Var, tau: Temperature) -> Result<Var> {
    check_local(tape, v_lc, m_lc, "lmcl")?;
    let vn = normalized(tape, v_lc, "lmcl")?;
    let mn = normalized(tape, m_lc, "lmcl")?;
    let logits = pairwise_logits(tape, vn, mn, tau)?;
    diagonal_nll(tape, logits)
}

/// [`lmcl`] with every frame of the rotated-flow features `m_hat` added as negatives.
pub fn lmcl_fra(tape: &mut Tape, v_lc: Var, m_lc: Var, m_hat: Var, tau: Temperature) -> Result<Var> {
    check_local(tape, v_lc, m_lc, "lmcl_fra")?;
    check_local(tape, v_lc, m_hat, "lmcl_fra")?;
    let vn = normalized(tape, v_lc, "lmcl_fra")?;
    let mn = normalized(tape, m_lc, "lmcl_fra")?;
    let hn = normalized(tape, m_hat, "lmcl_fra")?;
    let own = pairwise_logits(tape, vn, mn, tau)?;
    let aug = pairwise_logits(tape, vn, hn, tau)?;
    let logits = tape.concat(&[own, aug], 2)?;
    diagonal_nll(tape, logits)
}

/// Frame-level loss whose only negatives are same-timestamp features of independently rotated flows.
pub fn lmcl_ablation(tape: &mut Tape, v_lc: Var, m_lc: Var, m_hats: &[Var], tau: Temperature) -> Result<Var> {
    if m_hats.is_empty() {
        return Err(Error::invalid("lmcl_ablation needs at least one augmented flow"));
    }
    check_local(tape, v_lc, m_lc, "lmcl_ablation")?;
    let vn = normalized(tape, v_lc, "lmcl_ablation")?;
    let mn = normalized(tape, m_lc, "lmcl_ablation")?;
    let mut cols = vec![row_cosine(tape, vn, mn)?];
    for &h in m_hats {
        check_local(tape, v_lc, h, "lmcl_ablation")?;
        let hn = normalized(tape, h, "lmcl_ablation")?;
        cols.push(row_cosine(tape, vn, hn)?);
    }
    let cat = tape.concat(&cols, 2)?;
    let logits = tape.scale(cat, 1.0 / tau.value());
    let batch = tape.shape(v_lc)[0];
    let total = nll_first_column(tape, logits)?;
    Ok(tape.scale(total, 1.0 / batch as f64))
}

/// Weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// 1 includes the cross-modal term, 0 only logs it.
    pub rf: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rf: 1.0,
            lambda: 1.0,
        }
    }
}

/// Scalar loss nodes on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub rgb: Var,
    pub flow: Var,
    pub rf: Var,
    pub lmc: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_rgb: f64,
    pub l_flow: f64,
    pub l_rf: f64,
    pub l_lmc: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Recomputes the weighted sum from the parts.
    pub fn resum(&self) -> f64 {
        self.l_rgb + self.l_flow + self.weights.rf * self.l_rf + self.weights.lambda * self.l_lmc
    }
}

/// `L_rgb + L_flow + w_rf·L_rf + λ·L_lmc` as a tape node, plus its value breakdown.
pub fn total_loss(tape: &mut Tape, terms: LossTerms, weights: LossWeights) -> Result<(Var, LossBreakdown)> {
    let g = tape.add(terms.rgb, terms.flow)?;
    let rf = tape.scale(terms.rf, weights.rf);
    let g = tape.add(g, rf)?;
    let lmc = tape.scale(terms.lmc, weights.lambda);
    let total = tape.add(g, lmc)?;
    let val = |v: Var| tape.value(v).item();
    let breakdown = LossBreakdown {
        l_rgb: val(terms.rgb)?,
        l_flow: val(terms.flow)?,
        l_rf: val(terms.rf)?,
        l_lmc: val(terms.lmc)?,
        total: val(total)?,
        weights,
    };
    Ok((total, breakdown))
}
