//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used for the numeric side, so the check is
//! independent of every backward rule it exercises.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Result, Tensor, Var};

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Checks every input coordinate of the scalar function `f`.
pub fn gradcheck<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (ti, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).unwrap_or_else(|| Tensor::zeros(inputs[ti].shape()));
        for i in 0..inputs[ti].len() {
            let x = inputs[ti].data()[i];
            work[ti].data_mut()[i] = x + h;
            let up = eval(&work, &f)?;
            work[ti].data_mut()[i] = x - h;
            let down = eval(&work, &f)?;
            work[ti].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck { max_rel_err: worst, checked })
}

/// Checks `samples` randomly chosen scalar parameters of `store` against
/// the loss built by `f`.
pub fn gradcheck_params<F>(store: &ParamStore, f: F, h: f64, samples: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?.params();

    let names: Vec<&String> = store.names().collect();
    let sizes: Vec<usize> = names.iter().map(|n| store.get(n).unwrap().len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut worst = 0.0f64;
    let forward = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let name = names[which];
        let x = store.get(name).unwrap().data()[flat];
        work.get_mut(name).unwrap().data_mut()[flat] = x + h;
        let up = forward(&work)?;
        work.get_mut(name).unwrap().data_mut()[flat] = x - h;
        let down = forward(&work)?;
        work.get_mut(name).unwrap().data_mut()[flat] = x;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(name.as_str()).map_or(0.0, |t| t.data()[flat]);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(GradCheck { max_rel_err: worst, checked: samples })
}
