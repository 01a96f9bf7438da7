//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Parameters, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Compares tape gradients of the scalar `f(params)` against central differences
/// with step `eps`, over at most `max_coords` coordinates sampled with `seed`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(
    f: F,
    params: &mut [Tensor],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if let Some(p) = params.iter().find(|p| !p.is_trainable()) {
        return Err(Error::Param(format!(
            "grad_check needs trainable params; tensor of shape {:?} is not",
            p.shape()
        )));
    }

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(params.iter())
            .map(|(&v, p)| {
                grads
                    .wrt(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect()
    };

    let sizes: Vec<usize> = params.iter().map(Tensor::numel).collect();
    compare(
        &analytic,
        &sizes,
        max_coords,
        seed,
        |i, j, delta| {
            let original = params[i].data()[j];
            params[i].data_mut()[j] = original + delta;
            let v = eval(params);
            params[i].data_mut()[j] = original;
            v
        },
        eps,
    )
}

/// [`grad_check`] over every trainable tensor of a model. Frozen tensors
/// enter `f` as constants and are not probed.
pub fn grad_check_model<P, F>(
    f: F,
    model: &mut P,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    P: Parameters + ?Sized,
    F: Fn(&mut Tape, &P) -> Result<Var>,
{
    let eval = |model: &P| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, model)?;
        scalar(&tape, out)
    };

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let out = f(&mut tape, model)?;
        let grads = tape.backward(out)?;
        let mut rows = Vec::new();
        model.visit(&mut |_, t| {
            if t.is_trainable() {
                rows.push(
                    grads
                        .for_tensor(t)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; t.numel()]),
                );
            }
        });
        rows
    };
    if analytic.is_empty() {
        return Err(Error::Param(
            "grad_check_model: no trainable tensors".into(),
        ));
    }

    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    compare(
        &analytic,
        &sizes,
        max_coords,
        seed,
        |i, j, delta| {
            let original = coord(model, i, j, |v| *v += delta);
            let out = eval(model);
            // Restore the exact bits rather than subtracting the step back.
            coord(model, i, j, |v| *v = original);
            out
        },
        eps,
    )
}

/// Applies `op` to element `j` of the `i`-th trainable tensor, returning its prior value.
fn coord<P: Parameters + ?Sized>(model: &mut P, i: usize, j: usize, op: impl Fn(&mut f64)) -> f64 {
    let (mut k, mut prior) = (0, 0.0);
    model.visit_mut(&mut |_, t| {
        if t.is_trainable() {
            if k == i {
                prior = t.data()[j];
                op(&mut t.data_mut()[j]);
            }
            k += 1;
        }
    });
    prior
}

fn scalar(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Tape(
            "grad_check needs a scalar-valued function".into(),
        ));
    }
    if !v[0].is_finite() {
        return Err(Error::Numeric("non-finite value while probing".into()));
    }
    Ok(v[0])
}

fn compare(
    analytic: &[Vec<f64>],
    sizes: &[usize],
    max_coords: usize,
    seed: u64,
    mut probe: impl FnMut(usize, usize, f64) -> Result<f64>,
    eps: f64,
) -> Result<GradCheckReport> {
    let coords: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| (0..n).map(move |j| (i, j)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, coords.len(), max_coords).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut worst = 0.0f64;
    for &c in &chosen {
        let (i, j) = coords[c];
        let plus = probe(i, j, eps)?;
        let minus = probe(i, j, -eps)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i][j];
        if !a.is_finite() {
            return Err(Error::Numeric("non-finite analytic gradient".into()));
        }
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        coords_checked: chosen.len(),
    })
}
