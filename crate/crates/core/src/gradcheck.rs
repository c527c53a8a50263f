//! Central finite-difference checking of tape gradients (five-point stencil).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{
    global_infonce, inter_modal_loss, lmcl, lmcl_ablation, lmcl_fra, total_loss, LossTerms, LossWeights, Temperature,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Step of the fourth-order stencil; at 1e-3 its truncation and rounding errors balance for f64 losses.
pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Magnitude below which gradients are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.probes.iter().all(|p| p.rel_err < tolerance)
    }
}

/// Which entries of the inputs to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Selection {
    All,
    /// `count` entries drawn uniformly across all inputs.
    Random { count: usize, seed: u64 },
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` must build a scalar from the given leaves and be a pure function of
/// their values.
pub fn check<F>(inputs: &[Tensor], f: F, eps: f64, selection: Selection) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let root = f(&mut tape, &leaves)?;
    tape.backward(root)?;

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.numel();
            Some(start)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let flat: Vec<usize> = match selection {
        Selection::All => (0..total).collect(),
        Selection::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample(&mut rng, total, count.min(total)).into_vec();
            v.sort_unstable();
            v
        }
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let r = f(&mut t, &vars)?;
        t.value(r).item()
    };

    let mut probes = Vec::with_capacity(flat.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for idx in flat {
        let input = offsets.partition_point(|&o| o <= idx) - 1;
        let element = idx - offsets[input];
        let analytic = tape
            .grad(leaves[input])
            .map(|g| g.data()[element])
            .unwrap_or(0.0);
        let orig = work[input].data()[element];
        let mut at = |offset: f64| -> Result<f64> {
            work[input].data_mut()[element] = orig + offset;
            eval(&work)
        };
        // Fourth-order central stencil.
        let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
        work[input].data_mut()[element] = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        if !numeric.is_finite() || !analytic.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient at input {} element {}",
                input, element
            )));
        }
        probes.push(Probe {
            input,
            element,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport { probes })
}

/// Every contrastive loss on random features: batch 2, D = 8, T = 4, bank of 8.
pub fn check_losses(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    const B: usize = 2;
    const D: usize = 8;
    const T: usize = 4;
    const N: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let tau = Temperature::default();
    let global: Vec<Tensor> = vec![
        random(&[B, D]),
        random(&[B, D]),
        random(&[N, D]),
        random(&[B, D]),
        random(&[B, D]),
        random(&[N, D]),
    ];
    let local: Vec<Tensor> = (0..5).map(|_| random(&[B, T, D])).collect();
    let mut all = global.clone();
    all.extend(local.iter().cloned());
    let weights = LossWeights { rf: 1.0, lambda: 0.7 };

    let mut out = Vec::new();
    out.push((
        "global_infonce",
        check(&global[..3], |t, x| global_infonce(t, x[0], x[1], x[2], tau), DEFAULT_EPS, Selection::All)?,
    ));
    out.push((
        "inter_modal",
        check(
            &global,
            |t, x| inter_modal_loss(t, x[0], x[1], x[2], x[3], x[4], x[5], tau),
            DEFAULT_EPS,
            Selection::All,
        )?,
    ));
    out.push(("lmcl", check(&local[..2], |t, x| lmcl(t, x[0], x[1], tau), DEFAULT_EPS, Selection::All)?));
    out.push((
        "lmcl_fra",
        check(&local[..3], |t, x| lmcl_fra(t, x[0], x[1], x[2], tau), DEFAULT_EPS, Selection::All)?,
    ));
    out.push((
        "lmcl_ablation",
        check(&local, |t, x| lmcl_ablation(t, x[0], x[1], &x[2..], tau), DEFAULT_EPS, Selection::All)?,
    ));
    out.push((
        "total",
        check(
            &all,
            |t, x| {
                let terms = LossTerms {
                    rgb: global_infonce(t, x[0], x[1], x[2], tau)?,
                    flow: global_infonce(t, x[3], x[4], x[5], tau)?,
                    rf: inter_modal_loss(t, x[0], x[4], x[5], x[3], x[1], x[2], tau)?,
                    lmc: lmcl_fra(t, x[6], x[7], x[8], tau)?,
                };
                Ok(total_loss(t, terms, weights)?.0)
            },
            DEFAULT_EPS,
            Selection::All,
        )?,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact_enough() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let r = check(
            &[x],
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            DEFAULT_EPS,
            Selection::All,
        )
        .unwrap();
        assert!(r.max_rel_err() < 1e-10);
        assert_eq!(r.probes.len(), 3);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu has a kink at 0; straddling it gives a mismatch.
        let r = check(&[Tensor::from_vec(vec![0.0])], |t, v| Ok(t.relu(v[0])), 0.1, Selection::All).unwrap();
        assert!(!r.passes(DEFAULT_TOLERANCE));
    }

    #[test]
    fn every_loss_passes() {
        for (name, r) in check_losses(3).unwrap() {
            assert!(r.passes(DEFAULT_TOLERANCE), "{}: {:?}", name, r.worst());
            assert!(!r.probes.is_empty());
        }
    }
}
