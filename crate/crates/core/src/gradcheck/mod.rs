//! Central finite-difference checking of tape gradients at 64-bit.
//!
//! The loss is a fixed random projection `Σ out ⊙ R` of the checked op's
//! output, so every output element contributes to the compared gradient.
//!
//! Coordinates whose step interval straddles a kink (a relu switching, a
//! max or top-K changing its pick) are skipped and replaced. A kink shows
//! up as disagreement between the central differences at `h` and `h/2`,
//! which depends on forward values only.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub mod suite;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// Builds the graph under test from its inputs and returns the output.
pub type GraphFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    /// Number of input coordinates compared.
    pub probes: usize,
    /// Coordinates passed over because of a kink inside the step.
    pub skipped: usize,
}

impl CheckOutcome {
    /// Fails when more coordinates were skipped than compared.
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.probes > 0 && self.skipped <= self.probes
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn projected_loss(graph: &GraphFn<'_>, inputs: &[Tensor<f64>], proj_seed: u64, grads: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grads)).collect();
    let out = graph(&mut tape, &vars)?;
    let proj = tape.constant(Tensor::uniform(tape.shape(out), proj_seed, -1.0, 1.0)?);
    let weighted = tape.mul(out, proj)?;
    let loss = tape.sum(weighted)?;
    let value = tape.value(loss).item();
    if !grads {
        return Ok((value, Vec::new()));
    }
    let mut g = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| g.take(v).expect("leaf gradient")).collect()))
}

/// Compares the tape gradient of every input against central differences.
/// At most `max_probes` coordinates per input are probed, chosen by `seed`.
pub fn check_graph(graph: &GraphFn<'_>, inputs: &[Tensor<f64>], seed: u64, max_probes: usize) -> Result<CheckOutcome> {
    let proj_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5;
    let (_, analytic) = projected_loss(graph, inputs, proj_seed, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let (mut probes, mut skipped) = (0, 0);
    let mut shifted = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        // candidates beyond the budget stand in for skipped ones
        let candidates = sample(&mut rng, input.len(), input.len().min(2 * max_probes)).into_vec();
        let mut compared = 0;
        for j in candidates {
            if compared == max_probes {
                break;
            }
            let x = input.data()[j];
            let mut central = |step: f64| -> Result<f64> {
                shifted[i].data_mut()[j] = x + step;
                let (plus, _) = projected_loss(graph, &shifted, proj_seed, false)?;
                shifted[i].data_mut()[j] = x - step;
                let (minus, _) = projected_loss(graph, &shifted, proj_seed, false)?;
                shifted[i].data_mut()[j] = x;
                Ok((plus - minus) / (2.0 * step))
            };
            let numeric = central(FD_STEP)?;
            if relative_error(central(FD_STEP / 2.0)?, numeric) >= TOLERANCE / 2.0 {
                skipped += 1;
                continue;
            }
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
            compared += 1;
        }
        probes += compared;
    }
    Ok(CheckOutcome { max_rel_err: worst, probes, skipped })
}
