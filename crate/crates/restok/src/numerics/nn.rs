use std::sync::Arc;

use super::tape::{NodeId, Tape};
use super::{BoolMat, Scalar};
use crate::error::{Error, Result};

/// Precomputed rotary rotation angles for one token sequence: one
/// `(cos, sin)` per token and head-dimension pair.
#[derive(Debug, Clone)]
pub struct RotaryTable<T> {
    tokens: usize,
    pairs: usize,
    cos: Arc<Vec<T>>,
    sin: Arc<Vec<T>>,
}

impl<T: Scalar> RotaryTable<T> {
    /// Builds a table from per-token, per-pair angles (radians), row-major
    /// `[tokens, pairs]`.
    pub fn from_angles(tokens: usize, pairs: usize, angles: &[f64]) -> Result<Self> {
        if angles.len() != tokens * pairs {
            return Err(Error::Dimension(format!(
                "rotary angles len {} vs {tokens} tokens x {pairs} pairs",
                angles.len()
            )));
        }
        let cos = angles.iter().map(|&a| T::from_f64(a.cos())).collect();
        let sin = angles.iter().map(|&a| T::from_f64(a.sin())).collect();
        Ok(RotaryTable {
            tokens,
            pairs,
            cos: Arc::new(cos),
            sin: Arc::new(sin),
        })
    }

    /// All-zero angles: rotation is the identity.
    pub fn zero(tokens: usize, pairs: usize) -> Self {
        RotaryTable {
            tokens,
            pairs,
            cos: Arc::new(vec![T::ONE; tokens * pairs]),
            sin: Arc::new(vec![T::ZERO; tokens * pairs]),
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn cos(&self) -> &Arc<Vec<T>> {
        &self.cos
    }

    pub fn sin(&self) -> &Arc<Vec<T>> {
        &self.sin
    }

    /// Applies the rotation to a plain row-major `[tokens, 2*pairs]` buffer.
    /// Used by the cache-based inference path.
    pub fn apply_slice(&self, x: &mut [T], row0: usize, rows: usize, d: usize) {
        debug_assert_eq!(d, 2 * self.pairs);
        for r in 0..rows {
            let tok = row0 + r;
            for p in 0..self.pairs {
                let (c, s) = (self.cos[tok * self.pairs + p], self.sin[tok * self.pairs + p]);
                let xi = x[r * d + 2 * p];
                let yi = x[r * d + 2 * p + 1];
                x[r * d + 2 * p] = xi * c - yi * s;
                x[r * d + 2 * p + 1] = xi * s + yi * c;
            }
        }
    }
}

/// Scaled dot-product attention with an additive-style boolean mask and
/// optional rotary position rotation of queries and keys.
///
/// Output rows are convex combinations of value rows restricted to the
/// mask-allowed positions of each query row.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &Arc<BoolMat>,
    rope: Option<&RotaryTable<T>>,
) -> Result<NodeId> {
    let (nq, dq) = (tape.rows(q), tape.cols(q));
    let (nk, dk) = (tape.rows(k), tape.cols(k));
    let (nv, dv) = (tape.rows(v), tape.cols(v));
    if dq != dk {
        return Err(Error::Dimension(format!(
            "attention: query dim {dq} vs key dim {dk}"
        )));
    }
    if nk != nv {
        return Err(Error::Dimension(format!(
            "attention: {nk} keys vs {nv} values"
        )));
    }
    if mask.rows() != nq || mask.cols() != nk {
        return Err(Error::Dimension(format!(
            "attention: mask {}x{} vs {nq} queries x {nk} keys",
            mask.rows(),
            mask.cols()
        )));
    }
    let (q, k) = match rope {
        Some(table) => {
            if dq % 2 != 0 {
                return Err(Error::Dimension(format!(
                    "attention: head dim {dq} not divisible into rotary pairs"
                )));
            }
            if table.pairs() != dq / 2 || table.tokens() != nq || nq != nk {
                return Err(Error::Dimension(format!(
                    "attention: rotary table {}x{} vs {nq}/{nk} tokens, head dim {dq}",
                    table.tokens(),
                    table.pairs()
                )));
            }
            let q = tape.rotary(q, Arc::clone(table.cos()), Arc::clone(table.sin()))?;
            let k = tape.rotary(k, Arc::clone(table.cos()), Arc::clone(table.sin()))?;
            (q, k)
        }
        None => (q, k),
    };
    let scores = tape.matmul(q, k, false, true)?;
    let scale = T::from_f64(1.0 / (dq as f64).sqrt());
    let scaled = tape.mul_scalar(scores, scale);
    let probs = tape.softmax_rows_masked(scaled, Arc::clone(mask))?;
    tape.matmul(probs, v, false, false)
    // dv unused beyond the value matmul; output is [nq, dv].
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn single_token_identity_mask_returns_value_row() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(&Tensor::new(vec![1, 4], vec![0.3, -1.2, 0.0, 2.0]).unwrap());
        let k = tape.leaf(&Tensor::new(vec![1, 4], vec![1.0, 1.0, -0.5, 0.25]).unwrap());
        let v = tape.leaf(&Tensor::new(vec![1, 4], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let mask = Arc::new(BoolMat::new_true(1, 1));
        let rope = RotaryTable::zero(1, 2);
        let out = attention(&mut tape, q, k, v, &mask, Some(&rope)).unwrap();
        assert_eq!(tape.value(out), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn masked_token_cannot_influence_output() {
        // Token 2 masks token 1: perturbing v[0] must not change row 1.
        let run = |v0: f64| {
            let mut tape = Tape::<f64>::new();
            let q = tape.leaf(&Tensor::new(vec![2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap());
            let k = tape.leaf(&Tensor::new(vec![2, 2], vec![0.5, -0.1, 0.7, 0.9]).unwrap());
            let v = tape.leaf(&Tensor::new(vec![2, 2], vec![v0, 1.0, 2.0, 3.0]).unwrap());
            let mut mask = BoolMat::new_true(2, 2);
            mask.set(1, 0, false);
            let out = attention(&mut tape, q, k, v, &Arc::new(mask), None).unwrap();
            tape.value(out)[2..4].to_vec()
        };
        assert_eq!(run(-100.0), run(42.0));
    }

    #[test]
    fn matches_dense_reference_on_random_four_tokens() {
        // Independent dense computation of softmax(QK^T / sqrt(d) + mask) V.
        let n = 4;
        let d = 6;
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let qv: Vec<f64> = (0..n * d).map(|_| next()).collect();
        let kv: Vec<f64> = (0..n * d).map(|_| next()).collect();
        let vv: Vec<f64> = (0..n * d).map(|_| next()).collect();
        let mut mask = BoolMat::new_true(n, n);
        mask.set(0, 3, false);
        mask.set(2, 1, false);
        mask.set(2, 0, false);

        let mut expect = vec![0.0f64; n * d];
        for i in 0..n {
            let mut weights = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if mask.get(i, j) {
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += qv[i * d + c] * kv[j * d + c];
                    }
                    weights[j] = dot / (d as f64).sqrt();
                }
            }
            let mx = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let mut e = vec![0.0; n];
            for j in 0..n {
                if weights[j].is_finite() {
                    e[j] = (weights[j] - mx).exp();
                    z += e[j];
                }
            }
            for j in 0..n {
                for c in 0..d {
                    expect[i * d + c] += e[j] / z * vv[j * d + c];
                }
            }
        }

        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(&Tensor::new(vec![n, d], qv).unwrap());
        let k = tape.leaf(&Tensor::new(vec![n, d], kv).unwrap());
        let v = tape.leaf(&Tensor::new(vec![n, d], vv).unwrap());
        let out = attention(&mut tape, q, k, v, &Arc::new(mask), None).unwrap();
        for (a, b) in tape.value(out).iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn permutation_equivariant_in_keys_and_values() {
        let n = 5;
        let d = 4;
        let qv: Vec<f64> = (0..n * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let kv: Vec<f64> = (0..n * d).map(|i| (i as f64 * 0.73).cos()).collect();
        let vv: Vec<f64> = (0..n * d).map(|i| (i as f64 * 1.19).sin()).collect();
        let perm = [3usize, 0, 4, 1, 2];
        let mut mask = BoolMat::new_true(n, n);
        mask.set(0, 2, false);
        mask.set(4, 1, false);

        let base = {
            let mut tape = Tape::<f64>::new();
            let q = tape.leaf(&Tensor::new(vec![n, d], qv.clone()).unwrap());
            let k = tape.leaf(&Tensor::new(vec![n, d], kv.clone()).unwrap());
            let v = tape.leaf(&Tensor::new(vec![n, d], vv.clone()).unwrap());
            let out = attention(&mut tape, q, k, v, &Arc::new(mask.clone()), None).unwrap();
            tape.value(out).to_vec()
        };

        let mut kp = vec![0.0; n * d];
        let mut vp = vec![0.0; n * d];
        let mut mp = BoolMat::new_false(n, n);
        for (new, &old) in perm.iter().enumerate() {
            kp[new * d..(new + 1) * d].copy_from_slice(&kv[old * d..(old + 1) * d]);
            vp[new * d..(new + 1) * d].copy_from_slice(&vv[old * d..(old + 1) * d]);
            for r in 0..n {
                mp.set(r, new, mask.get(r, old));
            }
        }
        let permuted = {
            let mut tape = Tape::<f64>::new();
            let q = tape.leaf(&Tensor::new(vec![n, d], qv).unwrap());
            let k = tape.leaf(&Tensor::new(vec![n, d], kp).unwrap());
            let v = tape.leaf(&Tensor::new(vec![n, d], vp).unwrap());
            let out = attention(&mut tape, q, k, v, &Arc::new(mp), None).unwrap();
            tape.value(out).to_vec()
        };
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
