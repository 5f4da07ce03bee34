//! Concordance correlation coefficient: evaluation metric and training loss.
//!
//! The metric path works in `f64` with no smoothing term. The loss path is
//! assembled from differentiable tape operators and adds a small epsilon to
//! the denominator so that two constant sequences give a finite loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Denominator smoothing used only by [`ccc_loss`].
pub const LOSS_EPSILON: f64 = 1e-8;

/// Per-dimension and mean CCC over one partition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CccReport {
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
    pub mean_ccc: f64,
}

impl CccReport {
    pub fn new(ccc_valence: f64, ccc_arousal: f64) -> Self {
        CccReport {
            ccc_valence,
            ccc_arousal,
            mean_ccc: (ccc_valence + ccc_arousal) / 2.0,
        }
    }
}

/// `2 cov(x, y) / (var x + var y + (mean x - mean y)^2)` with population
/// statistics. Two constant sequences give 0.
pub fn ccc(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(
            "ccc",
            format!("lengths differ: {} vs {}", pred.len(), target.len()),
        ));
    }
    if pred.len() < 2 {
        return Err(Error::invalid(
            "ccc",
            format!("need at least 2 points, got {}", pred.len()),
        ));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(pred) || constant(target) {
        return Ok(0.0);
    }
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = target.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in pred.iter().zip(target) {
        let (dx, dy) = (x - mx, y - my);
        vx += dx * dx;
        vy += dy * dy;
        cov += dx * dy;
    }
    let (vx, vy, cov) = (vx / n, vy / n, cov / n);
    let denom = vx + vy + (mx - my) * (mx - my);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * cov / denom).clamp(-1.0, 1.0))
}

/// `1 - mean_d CCC(pred[:, d], target[:, d])` over `[N, 2]` inputs, built
/// from tape operators.
pub fn ccc_loss<F: Real>(tape: &mut Tape<F>, pred: Var, target: Var) -> Result<Var> {
    let (sp, st) = (tape.shape(pred).to_vec(), tape.shape(target).to_vec());
    if sp != st || sp.len() != 2 {
        return Err(Error::shape(
            "ccc_loss",
            format!("prediction {sp:?} vs target {st:?} (expected matching [N, D])"),
        ));
    }
    let mx = tape.mean(pred, 0)?;
    let my = tape.mean(target, 0)?;
    let vx = tape.variance(pred, 0)?;
    let vy = tape.variance(target, 0)?;
    let dx = tape.sub(pred, mx)?;
    let dy = tape.sub(target, my)?;
    let prod = tape.mul(dx, dy)?;
    let cov = tape.mean(prod, 0)?;
    let num = tape.scale(cov, F::from_f64_lossy(2.0));
    let gap = tape.sub(mx, my)?;
    let gap2 = tape.mul(gap, gap)?;
    let den = tape.add(vx, vy)?;
    let den = tape.add(den, gap2)?;
    let den = tape.add_scalar(den, F::from_f64_lossy(LOSS_EPSILON));
    let per_dim = tape.div(num, den)?;
    let mean = tape.mean(per_dim, 1)?;
    let neg = tape.scale(mean, -F::one());
    let loss = tape.add_scalar(neg, F::one());
    tape.reshape(loss, &[1])
}

/// CCC per dimension over the frames where `mask` is set.
///
/// `pred` and `target` are `[N, 2]` row-major (valence, arousal) of a whole
/// partition concatenated.
pub fn masked_eval(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<CccReport> {
    if pred.len() != target.len() || pred.len() != 2 * mask.len() {
        return Err(Error::shape(
            "masked_eval",
            format!(
                "prediction {} / target {} values vs {} mask entries",
                pred.len(),
                target.len(),
                mask.len()
            ),
        ));
    }
    let mut cols = [[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for d in 0..2 {
            cols[d][0].push(pred[2 * i + d]);
            cols[d][1].push(target[2 * i + d]);
        }
    }
    if cols[0][0].is_empty() {
        return Err(Error::invalid("masked_eval", "no valid frames"));
    }
    Ok(CccReport::new(
        ccc(&cols[0][0], &cols[0][1])?,
        ccc(&cols[1][0], &cols[1][1])?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn fixed_examples() {
        assert_eq!(ccc(&[0.1, 0.5, -0.3], &[0.1, 0.5, -0.3]).unwrap(), 1.0);
        assert_eq!(ccc(&[0.2, 0.2, 0.2], &[0.1, 0.5, -0.3]).unwrap(), 0.0);
        assert_eq!(ccc(&[1.0, -1.0], &[-1.0, 1.0]).unwrap(), -1.0);
        assert_eq!(ccc(&[0.3, 0.3], &[0.3, 0.3]).unwrap(), 0.0);
    }

    #[test]
    fn rejects_short_or_mismatched() {
        assert!(ccc(&[1.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn loss_zero_on_perfect_match_and_one_on_constants() {
        let mut tape = Tape::<f64>::new();
        let data = vec![0.1, 0.4, -0.2, 0.3, 0.5, -0.6, 0.0, 0.9];
        let p = tape.constant(Tensor::new(vec![4, 2], data.clone()).unwrap());
        let t = tape.constant(Tensor::new(vec![4, 2], data).unwrap());
        let l = ccc_loss(&mut tape, p, t).unwrap();
        assert!(tape.scalar(l).abs() < 1e-7);

        let c = tape.constant(Tensor::full(&[4, 2], 0.3));
        let l = ccc_loss(&mut tape, c, c).unwrap();
        assert!((tape.scalar(l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::zeros(&[4, 2]));
        let t = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(ccc_loss(&mut tape, p, t).is_err());
    }

    #[test]
    fn masked_eval_all_true_matches_plain() {
        let pred = [0.1, 0.2, 0.4, -0.1, 0.3, 0.5, -0.2, 0.0];
        let target = [0.0, 0.1, 0.5, -0.3, 0.2, 0.4, -0.1, 0.2];
        let r = masked_eval(&pred, &target, &[true; 4]).unwrap();
        let v: Vec<f64> = pred.iter().step_by(2).copied().collect();
        let tv: Vec<f64> = target.iter().step_by(2).copied().collect();
        assert_eq!(r.ccc_valence, ccc(&v, &tv).unwrap());
        assert_eq!(r.mean_ccc, (r.ccc_valence + r.ccc_arousal) / 2.0);
        assert!(masked_eval(&pred, &target, &[false; 4]).is_err());
    }
}
