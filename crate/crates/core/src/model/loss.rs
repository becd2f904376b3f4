use serde::{Deserialize, Serialize};

use crate::data::corpus::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Array, Real};

/// Guard added to the redistribution denominator.
pub const REDISTRIBUTION_EPS: f64 = 1e-6;

/// Which vectors stand for the old classes in the numerator of the
/// redistribution loss. The denominator always compares anchors with the
/// reprojected old prototypes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OldOperand {
    /// Anchors frozen at the end of the previous session.
    #[default]
    Anchor,
    /// Old prototypes reprojected with the current projector.
    Projected,
}

/// Mean negative log-probability of each pixel's label.
///
/// `scores` is `[P, N]` with columns ordered as `class_ids`; `labels` holds
/// one class id per pixel, [`IGNORE_LABEL`] pixels are skipped.
pub fn ce_loss<T: Real>(
    g: &mut Graph<T>,
    scores: Var,
    labels: &[u8],
    class_ids: &[u32],
) -> Result<Var> {
    let s = g.shape(scores).to_vec();
    if s.len() != 2 || s[0] != labels.len() || s[1] != class_ids.len() {
        return Err(Error::ShapeMismatch {
            op: "ce_loss",
            left: s,
            right: vec![labels.len(), class_ids.len()],
        });
    }
    let n = class_ids.len();
    let mut column = [usize::MAX; 256];
    for (j, &c) in class_ids.iter().enumerate() {
        if c < 256 {
            column[c as usize] = j;
        }
    }
    let mut picks = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        let j = column[l as usize];
        if j == usize::MAX {
            return Err(Error::UnknownLabel(l));
        }
        picks.push(i * n + j);
    }
    if picks.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let p = g.pick(scores, picks)?;
    let lp = g.log(p);
    let m = g.mean(lp);
    Ok(g.scale(m, -1.0))
}

/// `Σ (1 + cos(a_i, b_j)) / 2` over all pairs.
fn pair_similarity_sum<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let cos = g.cosine_pairwise(a, b)?;
    let s = g.scale(cos, 0.5);
    let s = g.add_const(s, 0.5);
    Ok(g.sum(s))
}

fn check_sets<T: Real>(g: &Graph<T>, old: Var, new: Var, op: &'static str) -> Result<()> {
    let (o, n) = (g.shape(old), g.shape(new));
    if o.len() != 2 || n.len() != 2 || o[1] != n[1] {
        return Err(Error::ShapeMismatch {
            op,
            left: o.to_vec(),
            right: n.to_vec(),
        });
    }
    if o[0] == 0 || n[0] == 0 {
        return Err(Error::invalid(op, "old and new prototype sets must be non-empty"));
    }
    Ok(())
}

/// Redistribution loss: similarity of new projected prototypes to the old
/// classes, relative to how closely the reprojected old prototypes stay at
/// their anchors.
///
/// `anchors` and `old_projected` are `[Nb, d]` with matching rows,
/// `new_projected` is `[Nt, d]`. Similarities are `(1 + cos) / 2`.
pub fn redistribution_loss<T: Real>(
    g: &mut Graph<T>,
    anchors: Var,
    old_projected: Var,
    new_projected: Var,
    operand: OldOperand,
) -> Result<Var> {
    check_sets(g, anchors, new_projected, "redistribution_loss")?;
    if g.shape(anchors) != g.shape(old_projected) {
        return Err(Error::ShapeMismatch {
            op: "redistribution_loss",
            left: g.shape(anchors).to_vec(),
            right: g.shape(old_projected).to_vec(),
        });
    }
    let old = match operand {
        OldOperand::Anchor => anchors,
        OldOperand::Projected => old_projected,
    };
    let num = pair_similarity_sum(g, old, new_projected)?;
    let cos = g.cosine_rowwise(anchors, old_projected)?;
    let s = g.scale(cos, 0.5);
    let s = g.add_const(s, 0.5);
    let den = g.sum(s);
    let den = g.add_const(den, REDISTRIBUTION_EPS);
    g.div(num, den)
}

/// Separation-only variant: `Σ_i Σ_j (1 + cos(anchor_i, new_j)) / 2`.
pub fn inter_loss<T: Real>(g: &mut Graph<T>, anchors: Var, new_projected: Var) -> Result<Var> {
    check_sets(g, anchors, new_projected, "inter_loss")?;
    pair_similarity_sum(g, anchors, new_projected)
}

/// Gathers rows `idx` of a `[N, d]` node into `[idx.len(), d]`.
pub fn select_rows<T: Real>(g: &mut Graph<T>, x: Var, idx: &[usize]) -> Result<Var> {
    let d = g.shape(x)[1];
    let flat: Vec<usize> = idx.iter().flat_map(|&r| (r * d)..(r * d + d)).collect();
    let picked = g.pick(x, flat)?;
    g.reshape(picked, [idx.len(), d])
}

/// Evaluates [`redistribution_loss`] on plain arrays.
pub fn redistribution_value(
    anchors: &Array<f64>,
    old_projected: &Array<f64>,
    new_projected: &Array<f64>,
    operand: OldOperand,
) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.input(anchors.clone());
    let o = g.input(old_projected.clone());
    let n = g.input(new_projected.clone());
    let l = redistribution_loss(&mut g, a, o, n, operand)?;
    Ok(g.value(l).item())
}

/// Evaluates [`inter_loss`] on plain arrays.
pub fn inter_value(anchors: &Array<f64>, new_projected: &Array<f64>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.input(anchors.clone());
    let n = g.input(new_projected.clone());
    let l = inter_loss(&mut g, a, n)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: [usize; 2], v: &[f64]) -> Array<f64> {
        Array::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn orthogonal_new_and_fixed_old() {
        let anchors = arr([2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let new = arr([1, 3], &[0.0, 0.0, 2.0]);
        let l = redistribution_value(&anchors, &anchors, &new, OldOperand::Anchor).unwrap();
        let expected = (2.0 * 1.0 * 0.5) / (2.0 + REDISTRIBUTION_EPS);
        assert!((l - expected).abs() < 1e-7);
    }

    #[test]
    fn inter_of_identical_and_orthogonal_sets() {
        let a = arr([2, 2], &[1.0, 0.0, 1.0, 0.0]);
        assert!((inter_value(&a, &a).unwrap() - 4.0).abs() < 1e-7);
        let b = arr([3, 2], &[0.0, 1.0, 0.0, 2.0, 0.0, 3.0]);
        assert!((inter_value(&a, &b).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ce_of_one_hot_is_zero_and_uniform_is_log_n() {
        let mut g = Graph::<f64>::new();
        let one_hot = g.input(arr([2, 3], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
        let l = ce_loss(&mut g, one_hot, &[0, 7], &[0, 4, 7]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let uniform = g.input(Array::full([2, 3], 1.0 / 3.0));
        let l = ce_loss(&mut g, uniform, &[4, 255], &[0, 4, 7]).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_unknown_and_all_ignored() {
        let mut g = Graph::<f64>::new();
        let s = g.input(Array::full([2, 2], 0.5));
        assert!(matches!(ce_loss(&mut g, s, &[0, 9], &[0, 1]), Err(Error::UnknownLabel(9))));
        assert!(matches!(ce_loss(&mut g, s, &[255, 255], &[0, 1]), Err(Error::EmptyTarget)));
    }

    #[test]
    fn select_rows_gathers() {
        let mut g = Graph::<f64>::new();
        let x = g.input(arr([3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = select_rows(&mut g, x, &[2, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(g.shape(y), &[2, 2]);
    }
}
