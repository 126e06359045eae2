//! The two contrastive objectives and the FIFO memory bank.
//!
//! Pixel level: anchors from the noisy-branch decoder features, positives at
//! the same positions in the clean branch, negatives mined from
//! noise-dominated regions. Instance level: InfoNCE between pooled noisy and
//! clean embeddings with negatives drawn only from the bank.
//!
//! All feature vectors are L2-normalized before dot products, and losses are
//! averaged (over anchors / over the batch) so the alpha/beta weights
//! transfer across batch sizes.

use crate::error::{Error, Result};
use crate::tape::{Arr, Tape, Var};
use ndarray::Array1;
use std::collections::VecDeque;

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_BANK_CAPACITY: usize = 4096;

/// Fixed-capacity FIFO queue of unit-norm instance embeddings; oldest first.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    queue: VecDeque<Array1<f64>>,
    inserted: u64,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "bank capacity must be positive");
        MemoryBank {
            capacity,
            queue: VecDeque::with_capacity(capacity),
            inserted: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Total vectors pushed over the bank's lifetime.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn entries(&self) -> impl Iterator<Item = &Array1<f64>> {
        self.queue.iter()
    }

    /// Append in batch order, evicting from the front past capacity. Stored
    /// values are plain copies and never receive gradients.
    pub fn push_batch(&mut self, batch: &[Array1<f64>]) {
        for v in batch {
            debug_assert!(
                (v.dot(v).sqrt() - 1.0).abs() < 1e-6,
                "bank vectors must be unit norm"
            );
            self.queue.push_back(v.clone());
            self.inserted += 1;
            if self.queue.len() > self.capacity {
                self.queue.pop_front();
            }
        }
    }

    /// Rebuild from a serialized snapshot (checkpoint restore).
    pub fn from_parts(capacity: usize, entries: Vec<Array1<f64>>, inserted: u64) -> Self {
        assert!(entries.len() <= capacity);
        MemoryBank {
            capacity,
            queue: entries.into(),
            inserted,
        }
    }
}

/// Inputs to the pixel-level loss; `negatives[k]` lists the mined negatives
/// paired with anchor k.
#[derive(Debug, Clone)]
pub struct PixelContrastBatch {
    pub anchors: Vec<Array1<f64>>,
    pub positives: Vec<Array1<f64>>,
    pub negatives: Vec<Vec<Array1<f64>>>,
    pub temperature: f64,
}

fn to_leaf(tape: &mut Tape, v: &Array1<f64>) -> Var {
    tape.leaf(v.clone().into_dyn())
}

/// Tape-level pixel contrastive loss over already-recorded feature vectors.
/// Vectors are normalized internally; anchors with no negatives contribute 0.
pub fn pixel_contrast_loss_t(
    tape: &mut Tape,
    anchors: &[Var],
    positives: &[Var],
    negatives: &[Vec<Var>],
    temperature: f64,
) -> Result<Var> {
    if anchors.is_empty() {
        return Err(Error::Config("pixel contrast: empty anchor set".into()));
    }
    if anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(Error::Shape(format!(
            "pixel contrast: {} anchors, {} positives, {} negative lists",
            anchors.len(),
            positives.len(),
            negatives.len()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let inv_tau = 1.0 / temperature;
    let mut terms: Vec<Var> = Vec::new();
    for ((&a, &p), negs) in anchors.iter().zip(positives).zip(negatives) {
        if negs.is_empty() {
            continue; // -log(1) = 0
        }
        let an = tape.l2_normalize(a);
        let pn = tape.l2_normalize(p);
        let sp = tape.dot(an, pn);
        let sp = tape.scale(sp, inv_tau);
        let mut den = tape.exp(sp);
        for &n in negs {
            let nn = tape.l2_normalize(n);
            let sn = tape.dot(an, nn);
            let sn = tape.scale(sn, inv_tau);
            let en = tape.exp(sn);
            den = tape.add(den, en);
        }
        let log_den = tape.ln(den);
        let term = tape.sub(log_den, sp);
        terms.push(term);
    }
    let count = anchors.len() as f64;
    match terms.split_first() {
        None => Ok(tape.constant(Arr::zeros(ndarray::IxDyn(&[1])))),
        Some((&first, rest)) => {
            let mut sum = first;
            for &t in rest {
                sum = tape.add(sum, t);
            }
            Ok(tape.scale(sum, 1.0 / count))
        }
    }
}

/// Value-level pixel contrastive loss.
pub fn pixel_contrast_loss(batch: &PixelContrastBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let anchors: Vec<Var> = batch.anchors.iter().map(|v| to_leaf(&mut tape, v)).collect();
    let positives: Vec<Var> = batch
        .positives
        .iter()
        .map(|v| to_leaf(&mut tape, v))
        .collect();
    let negatives: Vec<Vec<Var>> = batch
        .negatives
        .iter()
        .map(|ns| ns.iter().map(|v| to_leaf(&mut tape, v)).collect())
        .collect();
    let out = pixel_contrast_loss_t(&mut tape, &anchors, &positives, &negatives, batch.temperature)?;
    Ok(tape.scalar(out))
}

/// Tape-level instance InfoNCE: positives are index-aligned (zN[i], zC[i])
/// pairs; negatives come only from the bank (stored as constants). An empty
/// bank yields a zero loss and trips `degenerate`.
pub fn instance_contrast_loss_t(
    tape: &mut Tape,
    z_noisy: &[Var],
    z_clean: &[Var],
    bank: &MemoryBank,
    temperature: f64,
) -> Result<(Var, bool)> {
    if z_noisy.is_empty() || z_noisy.len() != z_clean.len() {
        return Err(Error::Shape(format!(
            "instance contrast: {} noisy vs {} clean embeddings",
            z_noisy.len(),
            z_clean.len()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if bank.is_empty() {
        // lone positive term: -log(1) per pair
        return Ok((tape.constant(Arr::zeros(ndarray::IxDyn(&[1]))), true));
    }
    let inv_tau = 1.0 / temperature;
    let bank_vars: Vec<Var> = bank
        .entries()
        .map(|m| tape.constant(m.clone().into_dyn()))
        .collect();
    let mut sum: Option<Var> = None;
    for (&zn, &zc) in z_noisy.iter().zip(z_clean) {
        let sp = tape.dot(zn, zc);
        let sp = tape.scale(sp, inv_tau);
        let mut den = tape.exp(sp);
        for &m in &bank_vars {
            let sm = tape.dot(zn, m);
            let sm = tape.scale(sm, inv_tau);
            let em = tape.exp(sm);
            den = tape.add(den, em);
        }
        let log_den = tape.ln(den);
        let term = tape.sub(log_den, sp);
        sum = Some(match sum {
            None => term,
            Some(s) => tape.add(s, term),
        });
    }
    let mean = tape.scale(sum.unwrap(), 1.0 / z_noisy.len() as f64);
    Ok((mean, false))
}

/// Value-level instance InfoNCE over unit-norm embedding batches.
pub fn instance_contrast_loss(
    z_noisy: &[Array1<f64>],
    z_clean: &[Array1<f64>],
    bank: &MemoryBank,
    temperature: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let zn: Vec<Var> = z_noisy.iter().map(|v| to_leaf(&mut tape, v)).collect();
    let zc: Vec<Var> = z_clean.iter().map(|v| to_leaf(&mut tape, v)).collect();
    let (out, _) = instance_contrast_loss_t(&mut tape, &zn, &zc, bank, temperature)?;
    Ok(tape.scalar(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Array1<f64> {
        let a = arr1(v);
        let n = a.dot(&a).sqrt();
        a / n
    }

    fn rand_unit(d: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let a = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0f64..1.0));
        let n = a.dot(&a).sqrt().max(1e-9);
        a / n
    }

    #[test]
    fn pixel_loss_positive_only_is_zero() {
        let a = unit(&[1.0, 0.0, 0.0]);
        let batch = PixelContrastBatch {
            anchors: vec![a.clone()],
            positives: vec![a],
            negatives: vec![vec![]],
            temperature: 1.0,
        };
        assert_eq!(pixel_contrast_loss(&batch).unwrap(), 0.0);
    }

    #[test]
    fn pixel_loss_known_value() {
        // a.p = 1, a.n = 0, tau = 1 -> -log(e / (e + 1))
        let a = unit(&[1.0, 0.0]);
        let n = unit(&[0.0, 1.0]);
        let batch = PixelContrastBatch {
            anchors: vec![a.clone()],
            positives: vec![a],
            negatives: vec![vec![n]],
            temperature: 1.0,
        };
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        let got = pixel_contrast_loss(&batch).unwrap();
        assert!((got - expect).abs() < 1e-12, "got {got}");
        assert!((got - 0.31326168751822286).abs() < 1e-10);
    }

    #[test]
    fn pixel_loss_empty_anchors_errors() {
        let batch = PixelContrastBatch {
            anchors: vec![],
            positives: vec![],
            negatives: vec![],
            temperature: 1.0,
        };
        assert!(pixel_contrast_loss(&batch).is_err());
    }

    #[test]
    fn adding_a_negative_never_decreases_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let a = rand_unit(6, &mut rng);
            let p = rand_unit(6, &mut rng);
            let mut negs: Vec<Array1<f64>> = (0..3).map(|_| rand_unit(6, &mut rng)).collect();
            let base = pixel_contrast_loss(&PixelContrastBatch {
                anchors: vec![a.clone()],
                positives: vec![p.clone()],
                negatives: vec![negs.clone()],
                temperature: 0.3,
            })
            .unwrap();
            negs.push(rand_unit(6, &mut rng));
            let more = pixel_contrast_loss(&PixelContrastBatch {
                anchors: vec![a.clone()],
                positives: vec![p.clone()],
                negatives: vec![negs],
                temperature: 0.3,
            })
            .unwrap();
            assert!(more >= base - 1e-12);
            assert!(base >= 0.0);
        }
    }

    #[test]
    fn temperature_sharpens_separated_batches() {
        // positive similarity strictly above all negatives: loss decreases
        // as tau shrinks
        let a = unit(&[1.0, 0.0, 0.0]);
        let p = unit(&[0.9, 0.1, 0.0]);
        let n1 = unit(&[0.0, 1.0, 0.0]);
        let n2 = unit(&[0.2, 0.0, 1.0]);
        let loss_at = |tau: f64| {
            pixel_contrast_loss(&PixelContrastBatch {
                anchors: vec![a.clone()],
                positives: vec![p.clone()],
                negatives: vec![vec![n1.clone(), n2.clone()]],
                temperature: tau,
            })
            .unwrap()
        };
        let mut prev = loss_at(1.0);
        for tau in [0.5, 0.2, 0.1, 0.05] {
            let cur = loss_at(tau);
            assert!(cur < prev, "loss should shrink as tau -> 0+");
            prev = cur;
        }
    }

    #[test]
    fn instance_loss_values() {
        let z = unit(&[1.0, 0.0]);
        let empty = MemoryBank::new(8);
        assert_eq!(
            instance_contrast_loss(&[z.clone()], &[z.clone()], &empty, 1.0).unwrap(),
            0.0
        );
        let mut bank = MemoryBank::new(8);
        bank.push_batch(&[unit(&[0.0, 1.0])]);
        let got = instance_contrast_loss(&[z.clone()], &[z.clone()], &bank, 1.0).unwrap();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn instance_loss_invariant_to_bank_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let zn: Vec<_> = (0..3).map(|_| rand_unit(5, &mut rng)).collect();
        let zc: Vec<_> = (0..3).map(|_| rand_unit(5, &mut rng)).collect();
        let vecs: Vec<_> = (0..6).map(|_| rand_unit(5, &mut rng)).collect();
        let mut fwd = MemoryBank::new(16);
        fwd.push_batch(&vecs);
        let mut rev = MemoryBank::new(16);
        let mut rvecs = vecs.clone();
        rvecs.reverse();
        rev.push_batch(&rvecs);
        let a = instance_contrast_loss(&zn, &zc, &fwd, 0.07).unwrap();
        let b = instance_contrast_loss(&zn, &zc, &rev, 0.07).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a >= 0.0);
    }

    #[test]
    fn bank_fifo_eviction() {
        let mut bank = MemoryBank::new(4);
        let vecs: Vec<_> = (0..5)
            .map(|k| {
                let mut v = vec![0.0; 5];
                v[k] = 1.0;
                arr1(&v)
            })
            .collect();
        bank.push_batch(&vecs);
        assert_eq!(bank.len(), 4);
        let got: Vec<_> = bank.entries().cloned().collect();
        assert_eq!(got, vecs[1..].to_vec());
        assert_eq!(bank.inserted(), 5);
    }

    #[test]
    fn bank_empty_push_is_identity() {
        let mut bank = MemoryBank::new(4);
        bank.push_batch(&[unit(&[1.0, 1.0])]);
        let before: Vec<_> = bank.entries().cloned().collect();
        bank.push_batch(&[]);
        let after: Vec<_> = bank.entries().cloned().collect();
        assert_eq!(before, after);
    }

    #[test]
    fn bank_interleaved_pushes_keep_suffix() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut bank = MemoryBank::new(5);
        let mut history = Vec::new();
        for size in [2usize, 3, 2] {
            let batch: Vec<_> = (0..size).map(|_| rand_unit(4, &mut rng)).collect();
            history.extend(batch.clone());
            bank.push_batch(&batch);
        }
        let got: Vec<_> = bank.entries().cloned().collect();
        assert_eq!(got, history[history.len() - 5..].to_vec());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        // pixel loss wrt the anchor vector
        let p = rand_unit(4, &mut rng);
        let n1 = rand_unit(4, &mut rng);
        let n2 = rand_unit(4, &mut rng);
        let a0 = rand_unit(4, &mut rng);

        let eval = |a: &Array1<f64>| {
            pixel_contrast_loss(&PixelContrastBatch {
                anchors: vec![a.clone()],
                positives: vec![p.clone()],
                negatives: vec![vec![n1.clone(), n2.clone()]],
                temperature: 0.2,
            })
            .unwrap()
        };
        let mut tape = Tape::new();
        let av = tape.leaf(a0.clone().into_dyn());
        let pv = tape.leaf(p.clone().into_dyn());
        let nv1 = tape.leaf(n1.clone().into_dyn());
        let nv2 = tape.leaf(n2.clone().into_dyn());
        let loss =
            pixel_contrast_loss_t(&mut tape, &[av], &[pv], &[vec![nv1, nv2]], 0.2).unwrap();
        let grads = tape.backward(loss);
        let ga = grads[av.0].as_ref().unwrap();
        let eps = 1e-6;
        for k in 0..4 {
            let mut up = a0.clone();
            up[k] += eps;
            let mut dn = a0.clone();
            dn[k] -= eps;
            let num = (eval(&up) - eval(&dn)) / (2.0 * eps);
            let ana = ga.as_slice().unwrap()[k];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            assert!(rel < 1e-4, "component {k}: {num} vs {ana}");
        }
    }

    #[test]
    fn bank_holds_detached_copies() {
        // Stored vectors are plain copies: computing a loss and its
        // gradients leaves the bank contents bit-identical, and repeated
        // evaluation gives the same value.
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let originals = [rand_unit(4, &mut rng), rand_unit(4, &mut rng)];
        let mut bank = MemoryBank::new(4);
        bank.push_batch(&originals);
        let zn = rand_unit(4, &mut rng);
        let zc = rand_unit(4, &mut rng);
        let mut tape = Tape::new();
        let znv = tape.leaf(zn.clone().into_dyn());
        let zcv = tape.leaf(zc.clone().into_dyn());
        let (loss, degenerate) =
            instance_contrast_loss_t(&mut tape, &[znv], &[zcv], &bank, 0.07).unwrap();
        assert!(!degenerate);
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        assert!(grads[znv.0].is_some());
        let stored: Vec<_> = bank.entries().cloned().collect();
        assert_eq!(stored, originals.to_vec());
        let again = instance_contrast_loss(&[zn], &[zc], &bank, 0.07).unwrap();
        assert_eq!(value, again);
    }
}
