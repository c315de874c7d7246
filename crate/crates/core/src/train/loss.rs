use std::collections::BTreeMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DICE_EPS: f64 = 1e-6;

/// `2|P ∩ T| / (|P| + |T|)` for class `c`; two empty masks score 1.
pub fn dice_score(pred: &[u16], truth: &[u16], c: u16) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("masks of {} and {} pixels", pred.len(), truth.len())));
    }
    let mut counts = DiceCounts::default();
    counts.add(pred, truth, &[c]);
    Ok(counts.dice(c))
}

/// Pooled overlap counts per class, summed over any number of masks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiceCounts {
    /// `class -> (|P ∩ T|, |P|, |T|)`
    counts: BTreeMap<u16, (u64, u64, u64)>,
}

impl DiceCounts {
    pub fn add(&mut self, pred: &[u16], truth: &[u16], classes: &[u16]) {
        for &c in classes {
            let e = self.counts.entry(c).or_default();
            for (&p, &t) in pred.iter().zip(truth) {
                let (pp, tt) = (p == c, t == c);
                e.0 += (pp && tt) as u64;
                e.1 += pp as u64;
                e.2 += tt as u64;
            }
        }
    }

    pub fn merge(&mut self, other: &DiceCounts) {
        for (&c, &(i, p, t)) in &other.counts {
            let e = self.counts.entry(c).or_default();
            e.0 += i;
            e.1 += p;
            e.2 += t;
        }
    }

    pub fn dice(&self, c: u16) -> f64 {
        match self.counts.get(&c) {
            Some(&(i, p, t)) if p + t > 0 => 2.0 * i as f64 / (p + t) as f64,
            _ => 1.0,
        }
    }

    pub fn classes(&self) -> impl Iterator<Item = u16> + '_ {
        self.counts.keys().copied()
    }
}

/// Column index of every pixel's class within `classes`.
pub fn class_columns(mask: &[u16], classes: &[u16]) -> Result<Vec<usize>> {
    mask.iter()
        .map(|&c| {
            classes.iter().position(|&k| k == c).ok_or_else(|| {
                Error::Validation(format!("label id {c} is not among the model classes {classes:?}"))
            })
        })
        .collect()
}

/// Cross-entropy plus `1 - soft Dice` on normalised probabilities
/// (`N x C`), with the soft Dice averaged over classes present in `mask`.
pub fn seg_loss(probs: &Tensor, mask: &[u16], classes: &[u16]) -> Result<f64> {
    let (n, c) = probs.dims2()?;
    if n != mask.len() || c != classes.len() {
        return Err(Error::shape(format!(
            "probabilities {n}x{c} for {} pixels and {} classes",
            mask.len(),
            classes.len()
        )));
    }
    let cols = class_columns(mask, classes)?;
    let p = probs.data();
    let mut ce = 0.0;
    let mut inter = vec![0.0f64; c];
    let mut psum = vec![0.0f64; c];
    let mut tsum = vec![0.0f64; c];
    for (i, &t) in cols.iter().enumerate() {
        ce -= libm::log(p[i * c + t] as f64);
        inter[t] += p[i * c + t] as f64;
        tsum[t] += 1.0;
        for j in 0..c {
            psum[j] += p[i * c + j] as f64;
        }
    }
    let present: Vec<usize> = (0..c).filter(|&j| tsum[j] > 0.0).collect();
    let dice: f64 = present
        .iter()
        .map(|&j| (2.0 * inter[j] + DICE_EPS) / (psum[j] + tsum[j] + DICE_EPS))
        .sum::<f64>()
        / present.len() as f64;
    Ok(ce / n as f64 + 1.0 - dice)
}

/// The same loss recorded on a tape from pixel logits (`N x C`).
pub fn seg_loss_graph<T: Element>(tape: &mut Tape<T>, logits: Var, mask: &[u16], classes: &[u16]) -> Result<Var> {
    let (n, c) = tape.value(logits).dims2()?;
    if n != mask.len() || c != classes.len() {
        return Err(Error::shape(format!(
            "logits {n}x{c} for {} pixels and {} classes",
            mask.len(),
            classes.len()
        )));
    }
    let cols = class_columns(mask, classes)?;
    let mut onehot = vec![T::ZERO; n * c];
    let mut tsum = vec![0.0f64; c];
    for (i, &t) in cols.iter().enumerate() {
        onehot[i * c + t] = T::ONE;
        tsum[t] += 1.0;
    }
    let present = tsum.iter().filter(|&&v| v > 0.0).count() as f64;
    let weights: Vec<T> = tsum.iter().map(|&v| T::from_f64(if v > 0.0 { 1.0 / present } else { 0.0 })).collect();
    let onehot = tape.constant(Tensor::new([n, c], onehot)?)?;
    let tsum = tape.constant(Tensor::new([1, c], tsum.into_iter().map(T::from_f64).collect())?)?;
    let weights = tape.constant(Tensor::new([1, c], weights)?)?;

    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.mul(logp, onehot)?;
    let ce = tape.sum_all(picked)?;
    let ce = tape.scale(ce, -1.0 / n as f64)?;

    let p = tape.softmax_rows(logits)?;
    let hit = tape.mul(p, onehot)?;
    let inter = tape.sum_rows(hit)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_EPS)?;
    let psum = tape.sum_rows(p)?;
    let den = tape.add(psum, tsum)?;
    let den = tape.add_scalar(den, DICE_EPS)?;
    let dice = tape.div(num, den)?;
    let dice = tape.mul(dice, weights)?;
    let dice = tape.sum_all(dice)?;

    let loss = tape.sub(ce, dice)?;
    tape.add_scalar(loss, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        let a = vec![1u16; 10];
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
        let mut p = vec![0u16; 300];
        let mut t = vec![0u16; 300];
        p[..100].iter_mut().for_each(|v| *v = 1);
        t[50..150].iter_mut().for_each(|v| *v = 1);
        assert_eq!(dice_score(&p, &t, 1).unwrap(), 0.5);
        let disjoint: Vec<u16> = (0..300).map(|i| (i >= 200) as u16).collect();
        assert_eq!(dice_score(&p, &disjoint, 1).unwrap(), 0.0);
        assert_eq!(dice_score(&[0, 0], &[0, 0], 3).unwrap(), 1.0);
    }

    #[test]
    fn dice_symmetric_and_relabel_invariant() {
        let p = [0u16, 1, 1, 2, 2, 1, 0, 2];
        let t = [1u16, 1, 0, 2, 1, 1, 0, 0];
        let relabel = |m: &[u16]| m.iter().map(|&v| [7u16, 9, 4][v as usize]).collect::<Vec<_>>();
        for c in 0..3u16 {
            let d = dice_score(&p, &t, c).unwrap();
            assert_eq!(d, dice_score(&t, &p, c).unwrap());
            assert_eq!(d, dice_score(&relabel(&p), &relabel(&t), [7, 9, 4][c as usize]).unwrap());
        }
    }

    #[test]
    fn one_hot_correct_is_zero_and_uniform_is_ln_c() {
        let mask = [0u16, 2, 5, 2];
        let classes = [0u16, 2, 5];
        let mut onehot = vec![0.0f32; 12];
        for (i, &c) in mask.iter().enumerate() {
            onehot[i * 3 + classes.iter().position(|&k| k == c).unwrap()] = 1.0;
        }
        let l = seg_loss(&Tensor::new([4, 3], onehot).unwrap(), &mask, &classes).unwrap();
        assert!(l.abs() < 1e-12, "{l}");

        let uniform = Tensor::full([4, 3], 1.0f32 / 3.0);
        let l = seg_loss(&uniform, &mask, &classes).unwrap();
        let inter = [1.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0];
        let tsum = [1.0, 2.0, 1.0];
        let dice: f64 = (0..3).map(|j| (2.0 * inter[j] + DICE_EPS) / (4.0 / 3.0 + tsum[j] + DICE_EPS)).sum::<f64>() / 3.0;
        let want = libm::log(3.0) + 1.0 - dice;
        assert!((l - want).abs() < 1e-6, "{l} vs {want}");
    }

    #[test]
    fn graph_loss_matches_eager() {
        let mask = [0u16, 1, 1, 0, 3, 1];
        let classes = [0u16, 1, 3];
        let logits: Vec<f64> = (0..18).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let logits = Tensor::new([6, 3], logits).unwrap();
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(logits.clone()).unwrap();
        let l = seg_loss_graph(&mut tape, v, &mask, &classes).unwrap();
        let graph = tape.value(l).data()[0];
        let probs = logits.softmax(1).unwrap().cast::<f32>();
        let eager = seg_loss(&probs, &mask, &classes).unwrap();
        assert!((graph - eager).abs() < 1e-6, "{graph} vs {eager}");
    }

    #[test]
    fn unknown_label_is_a_validation_error() {
        let err = class_columns(&[0, 9], &[0, 1]).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains('9')));
    }
}
