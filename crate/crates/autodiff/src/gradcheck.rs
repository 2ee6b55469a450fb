//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::DiffArray;
use crate::error::Result;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Check at most this many elements per input, chosen at random.
    pub max_elements_per_input: Option<usize>,
    pub seed: u64,
    /// Also accept a one-sided difference when it agrees better than the
    /// central one, and retry poorly matching elements at `step / 10` and
    /// `step / 100`. Deep ReLU/max-pool stacks put kinks inside the window
    /// for some elements; a side or a step that avoids them stays exact.
    pub one_sided_at_kinks: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, max_elements_per_input: None, seed: 0, one_sided_at_kinks: false }
    }
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(inputs: &[DiffArray<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out)[0])
}

const KINK_RETRY_ABOVE: f64 = 1e-6;

#[allow(clippy::too_many_arguments)]
fn element_error<F>(probe: &mut [DiffArray<f64>], f: &F, i: usize, e: usize, h: f64, base: f64, analytic: f64, one_sided: bool) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let orig = probe[i].data()[e];
    probe[i].data_mut()[e] = orig + h;
    let plus = evaluate(probe, f);
    probe[i].data_mut()[e] = orig - h;
    let minus = evaluate(probe, f);
    probe[i].data_mut()[e] = orig;
    let (plus, minus) = (plus?, minus?);
    let mut err = relative_error(analytic, (plus - minus) / (2.0 * h));
    if one_sided {
        err = err.min(relative_error(analytic, (plus - base) / h)).min(relative_error(analytic, (base - minus) / h));
    }
    Ok(err)
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences for every input that requires a gradient. Returns the maximum
/// relative error over all checked elements.
pub fn gradcheck<F>(inputs: &[DiffArray<f64>], f: F, opts: &GradcheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a)).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss)[0];
    let grads = tape.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    let tries = if opts.one_sided_at_kinks { 3 } else { 1 };
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let zeros = vec![0.0; input.len()];
        let analytic = grads.get(vars[i]).unwrap_or(&zeros);
        let elements: Vec<usize> = match opts.max_elements_per_input {
            Some(k) if k < input.len() => sample(&mut rng, input.len(), k).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for e in elements {
            let mut err = f64::INFINITY;
            let mut h = opts.step;
            for _ in 0..tries {
                err = err.min(element_error(&mut probe, &f, i, e, h, base, analytic[e], opts.one_sided_at_kinks)?);
                if err <= KINK_RETRY_ABOVE {
                    break;
                }
                h /= 10.0;
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
