//! Orthonormal DCT codec for per-node trajectories.
//!
//! A trajectory of N timepoints maps to N frequency coefficients through a
//! precomputed N x N orthonormal matrix; with no cropping the transform is
//! lossless and its inverse is the transpose. The matrix form keeps the
//! codec a plain (differentiable) matmul on the tape.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, TensorId};

/// Precomputed transform matrix for one trajectory length.
#[derive(Debug, Clone)]
pub struct DctBasis {
    n: usize,
    /// Number of coefficients kept (== n unless cropped).
    keep: usize,
    /// keep x n transform matrix, row-major.
    matrix: Vec<Real>,
    /// n x keep transpose, used for inversion and right-multiplication.
    matrix_t: Vec<Real>,
}

impl DctBasis {
    /// Full (lossless) basis for trajectories of length `n`.
    pub fn new(n: usize) -> Result<Self> {
        Self::with_crop(n, None)
    }

    /// Basis keeping only the first `keep` coefficients when `crop` is
    /// set. Cropped bases cannot invert.
    pub fn with_crop(n: usize, crop: Option<usize>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("dct: empty trajectory".into()));
        }
        let keep = crop.unwrap_or(n);
        if keep == 0 || keep > n {
            return Err(Error::InvalidArgument(format!(
                "dct: crop {keep} out of range for length {n}"
            )));
        }
        let nf = n as Real;
        let norm = (2.0 / nf).sqrt();
        let mut matrix = vec![0.0; keep * n];
        for l in 1..=keep {
            let head = if l == 1 { (0.5 as Real).sqrt() } else { 1.0 };
            for t in 1..=n {
                let angle = std::f64::consts::PI as Real / (2.0 * nf)
                    * ((2 * t - 1) as Real)
                    * ((l - 1) as Real);
                matrix[(l - 1) * n + (t - 1)] = norm * head * angle.cos();
            }
        }
        let mut matrix_t = vec![0.0; n * keep];
        for l in 0..keep {
            for t in 0..n {
                matrix_t[t * keep + l] = matrix[l * n + t];
            }
        }
        Ok(DctBasis {
            n,
            keep,
            matrix,
            matrix_t,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn kept(&self) -> usize {
        self.keep
    }

    pub fn matrix(&self) -> &[Real] {
        &self.matrix
    }

    /// Coefficients of one trajectory.
    pub fn forward(&self, x: &[Real]) -> Result<Vec<Real>> {
        if x.len() != self.n {
            return Err(Error::ShapeMismatch {
                op: "dct_forward",
                lhs: vec![x.len()],
                rhs: vec![self.n],
            });
        }
        let mut out = vec![0.0; self.keep];
        for (l, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[l * self.n..(l + 1) * self.n];
            *o = row.iter().zip(x).map(|(&m, &v)| m * v).sum();
        }
        Ok(out)
    }

    /// Trajectory from a full coefficient vector.
    pub fn inverse(&self, c: &[Real]) -> Result<Vec<Real>> {
        if self.keep != self.n {
            return Err(Error::InvalidArgument(
                "dct_inverse: cropped basis is not invertible".into(),
            ));
        }
        if c.len() != self.n {
            return Err(Error::ShapeMismatch {
                op: "dct_inverse",
                lhs: vec![c.len()],
                rhs: vec![self.n],
            });
        }
        let mut out = vec![0.0; self.n];
        for (t, o) in out.iter_mut().enumerate() {
            let row = &self.matrix_t[t * self.n..(t + 1) * self.n];
            *o = row.iter().zip(c).map(|(&m, &v)| m * v).sum();
        }
        Ok(out)
    }

    /// Encode every row of a nodes x timepoints matrix.
    pub fn forward_rows(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.last() != Some(&self.n) {
            return Err(Error::ShapeMismatch {
                op: "dct_forward",
                lhs: shape.to_vec(),
                rhs: vec![self.n],
            });
        }
        let rows = x.numel() / self.n;
        let mut out = Vec::with_capacity(rows * self.keep);
        for r in 0..rows {
            out.extend(self.forward(&x.data()[r * self.n..(r + 1) * self.n])?);
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = self.keep;
        Tensor::new(out_shape, out)
    }

    /// Decode every row of a nodes x coefficients matrix.
    pub fn inverse_rows(&self, c: &Tensor) -> Result<Tensor> {
        let shape = c.shape();
        if shape.last() != Some(&self.keep) || self.keep != self.n {
            return Err(Error::ShapeMismatch {
                op: "dct_inverse",
                lhs: shape.to_vec(),
                rhs: vec![self.n],
            });
        }
        let rows = c.numel() / self.n;
        let mut out = Vec::with_capacity(rows * self.n);
        for r in 0..rows {
            out.extend(self.inverse(&c.data()[r * self.n..(r + 1) * self.n])?);
        }
        Tensor::new(shape.to_vec(), out)
    }

    /// Differentiable encode on the tape: `x @ Tᵀ` for a `[.., K, N]`
    /// tensor of row trajectories.
    pub fn encode_on_tape(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let t = tape.constant(Tensor::new(vec![self.n, self.keep], self.matrix_t.clone())?)?;
        tape.matmul(x, t)
    }

    /// Differentiable decode on the tape (full basis only).
    pub fn decode_on_tape(&self, tape: &mut Tape, c: TensorId) -> Result<TensorId> {
        if self.keep != self.n {
            return Err(Error::InvalidArgument(
                "dct_inverse: cropped basis is not invertible".into(),
            ));
        }
        let t = tape.constant(Tensor::new(vec![self.n, self.n], self.matrix.clone())?)?;
        tape.matmul(c, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::assert_gradients_match;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal double-loop evaluation of the coefficient formula,
    /// independent of the matrix code path.
    fn naive_dct(x: &[Real]) -> Vec<Real> {
        let n = x.len();
        let nf = n as Real;
        (1..=n)
            .map(|l| {
                let mut acc = 0.0;
                for (t, &v) in x.iter().enumerate() {
                    let tt = t + 1;
                    let delta = if l == 1 { 1.0 } else { 0.0 };
                    acc += v * (1.0 / ((1.0 as Real) + delta).sqrt())
                        * ((std::f64::consts::PI as Real) / (2.0 * nf)
                            * ((2 * tt - 1) as Real)
                            * ((l - 1) as Real))
                            .cos();
                }
                (2.0 / nf).sqrt() * acc
            })
            .collect()
    }

    #[test]
    fn constant_trajectory_concentrates_in_first_coefficient() {
        let n = 16;
        let c = 2.5;
        let basis = DctBasis::new(n).unwrap();
        let coeffs = basis.forward(&vec![c; n]).unwrap();
        assert!((coeffs[0] - c * (n as Real).sqrt()).abs() < 1e-10);
        for &v in &coeffs[1..] {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn length_one_is_identity() {
        let basis = DctBasis::new(1).unwrap();
        assert!((basis.forward(&[5.0]).unwrap()[0] - 5.0).abs() < 1e-12);
        assert!((basis.inverse(&[5.0]).unwrap()[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(DctBasis::new(0).is_err());
    }

    #[test]
    fn matches_naive_double_loop_on_random_length_50() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<Real> = (0..50).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let basis = DctBasis::new(50).unwrap();
        let got = basis.forward(&x).unwrap();
        let want = naive_dct(&x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn transform_matrix_is_orthonormal() {
        let n = 50;
        let basis = DctBasis::new(n).unwrap();
        let m = basis.matrix();
        let mut worst: Real = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dot: Real = (0..n).map(|t| m[i * n + t] * m[j * n + t]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        assert!(worst < 1e-9, "max |T Tᵀ − I| = {worst}");
    }

    #[test]
    fn two_sided_inverse_on_random_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let basis = DctBasis::new(50).unwrap();
        let c: Vec<Real> = (0..50).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let back = basis.forward(&basis.inverse(&c).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&c) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cropped_basis_refuses_to_invert() {
        let basis = DctBasis::with_crop(10, Some(4)).unwrap();
        assert_eq!(basis.kept(), 4);
        assert!(basis.inverse(&[0.0; 4]).is_err());
    }

    #[test]
    fn gradient_through_forward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let basis = DctBasis::new(12).unwrap();
        let xval: Vec<Real> = (0..2 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let shape = vec![2usize, 12usize];
        let forward = |vals: &[Real]| {
            let mut tape = Tape::new();
            let x = tape
                .leaf(Tensor::new(shape.clone(), vals.to_vec()).unwrap(), false)
                .unwrap();
            let c = basis.encode_on_tape(&mut tape, x).unwrap();
            let sq = tape.square(c).unwrap();
            let s = tape.sum_all(sq).unwrap();
            tape.scalar_value(s)
        };
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::new(shape.clone(), xval.clone()).unwrap(), true)
            .unwrap();
        let c = basis.encode_on_tape(&mut tape, x).unwrap();
        let sq = tape.square(c).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_gradients_match("dct encode", &xval, grads.get(x).unwrap(), forward);
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(x in proptest::collection::vec(-10.0f64..10.0, 1..64)) {
            let x: Vec<Real> = x.iter().map(|&v| v as Real).collect();
            let basis = DctBasis::new(x.len()).unwrap();
            let back = basis.inverse(&basis.forward(&x).unwrap()).unwrap();
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn forward_is_linear(
            x in proptest::collection::vec(-5.0f64..5.0, 20),
            y in proptest::collection::vec(-5.0f64..5.0, 20),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let basis = DctBasis::new(20).unwrap();
            let x: Vec<Real> = x.iter().map(|&v| v as Real).collect();
            let y: Vec<Real> = y.iter().map(|&v| v as Real).collect();
            let combo: Vec<Real> = x.iter().zip(&y).map(|(&xv, &yv)| (a as Real) * xv + (b as Real) * yv).collect();
            let lhs = basis.forward(&combo).unwrap();
            let cx = basis.forward(&x).unwrap();
            let cy = basis.forward(&y).unwrap();
            for ((l, &cxv), &cyv) in lhs.iter().zip(&cx).zip(&cy) {
                prop_assert!((l - ((a as Real) * cxv + (b as Real) * cyv)).abs() < 1e-10);
            }
        }
    }
}
