//! Central finite-difference verification of analytic gradients.
//!
//! Builders are generic over the scalar type, so both the analytic sweep and
//! the probes run on a 64-bit shadow of the graph.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Array, Real};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Floor of the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub passed: bool,
    pub seed: u64,
}

/// Produces a scalar node from parameter leaves. Must be deterministic in
/// `seed`: every fixed input it uses is derived from it.
pub trait ScalarBuilder {
    fn name(&self) -> String;

    /// Parameter values at which gradients are checked.
    fn init(&self, seed: u64) -> Vec<Array<f64>>;

    fn build<T: Real>(&self, seed: u64, g: &mut Graph<T>, params: &[Var]) -> Result<Var>;
}

fn evaluate<B: ScalarBuilder>(builder: &B, seed: u64, params: &[Array<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = builder.build(seed, &mut g, &vars)?;
    Ok(g.value(root).item())
}

/// Checks every parameter element.
pub fn grad_check<B: ScalarBuilder>(builder: &B, seed: u64, tol: f64) -> Result<GradReport> {
    grad_check_sampled(builder, seed, tol, usize::MAX)
}

/// Checks at most `max_coords` parameter elements, chosen by `seed`.
pub fn grad_check_sampled<B: ScalarBuilder>(
    builder: &B,
    seed: u64,
    tol: f64,
    max_coords: usize,
) -> Result<GradReport> {
    let params = builder.init(seed);

    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = builder.build(seed, &mut g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Array<f64>> = vars.iter().map(|&v| grads.get(v)).collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, a)| (0..a.len()).map(move |e| (p, e)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= max_coords {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
        let mut picked: Vec<usize> = sample(&mut rng, coords.len(), max_coords).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| coords[i]).collect()
    };

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (p, e) in chosen {
        let x0 = params[p].data()[e];
        probe[p].data_mut()[e] = x0 + FD_STEP;
        let up = evaluate(builder, seed, &probe)?;
        probe[p].data_mut()[e] = x0 - FD_STEP;
        let down = evaluate(builder, seed, &probe)?;
        probe[p].data_mut()[e] = x0;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteProbe {
                param: p,
                element: e,
            });
        }
        let fd = (up - down) / (2.0 * FD_STEP);
        let an = analytic[p].data()[e];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }

    Ok(GradReport {
        op_name: builder.name(),
        max_relative_error: worst,
        passed: worst < tol,
        seed,
    })
}
