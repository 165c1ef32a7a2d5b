//! Graph-convolutional building blocks.
//!
//! A graph convolutional layer (GCL) mixes nodes with a learnable matrix S,
//! mixes features with W, adds a bias and applies GeLU; it may change both
//! node count and feature width. A graph convolutional block (GCB) stacks
//! two shape-preserving GCLs and adds the input back through a learnable
//! residual weight that starts at exactly zero, so a fresh stack behaves
//! like its branch alone.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamBinding, ParamId, ParamStore, Real, Tape, Tensor, TensorId};

/// Shape of one GCL: node counts and feature widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GclShape {
    pub n_in: usize,
    pub n_out: usize,
    pub f_in: usize,
    pub f_out: usize,
}

impl GclShape {
    pub fn square(n: usize, f: usize) -> Self {
        GclShape {
            n_in: n,
            n_out: n,
            f_in: f,
            f_out: f,
        }
    }

    /// Exact learnable scalar count: S + W + b.
    pub fn param_count(&self) -> usize {
        self.n_out * self.n_in + self.f_in * self.f_out + self.n_out * self.f_out
    }
}

/// Store handles for one GCL.
#[derive(Debug, Clone, Copy)]
pub struct GclParams {
    pub s: ParamId,
    pub w: ParamId,
    pub b: ParamId,
    pub shape: GclShape,
}

/// Store handles for one GCB.
#[derive(Debug, Clone, Copy)]
pub struct GcbParams {
    pub l1: GclParams,
    pub l2: GclParams,
    pub alpha: ParamId,
}

/// Tape-bound GCL parameters.
#[derive(Debug, Clone, Copy)]
pub struct GclIds {
    pub s: TensorId,
    pub w: TensorId,
    pub b: TensorId,
}

/// Tape-bound GCB parameters.
#[derive(Debug, Clone, Copy)]
pub struct GcbIds {
    pub l1: GclIds,
    pub l2: GclIds,
    pub alpha: TensorId,
}

/// Near-identity node-mixing matrix: I padded or truncated to
/// n_out x n_in, plus small uniform noise.
fn init_s(rng: &mut ChaCha8Rng, n_out: usize, n_in: usize) -> Tensor {
    let mut data = vec![0.0; n_out * n_in];
    for (i, v) in data.iter_mut().enumerate() {
        let (r, c) = (i / n_in, i % n_in);
        let eye = if r == c { 1.0 } else { 0.0 };
        *v = eye + rng.gen_range(-0.01..0.01);
    }
    Tensor::new(vec![n_out, n_in], data).expect("init_s shape")
}

/// Fan-balanced uniform init for the feature-mixing matrix.
fn init_w(rng: &mut ChaCha8Rng, f_in: usize, f_out: usize) -> Tensor {
    let bound = (6.0 / (f_in + f_out) as Real).sqrt();
    let data = (0..f_in * f_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![f_in, f_out], data).expect("init_w shape")
}

impl GclParams {
    /// Register freshly initialized parameters under `name.{s,w,b}`.
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: GclShape) -> Self {
        let s = store.register(format!("{name}.s"), init_s(rng, shape.n_out, shape.n_in));
        let w = store.register(format!("{name}.w"), init_w(rng, shape.f_in, shape.f_out));
        let b = store.register(
            format!("{name}.b"),
            Tensor::zeros(vec![shape.n_out, shape.f_out]),
        );
        GclParams { s, w, b, shape }
    }

    pub fn bind(&self, binding: &ParamBinding) -> GclIds {
        GclIds {
            s: binding.id(self.s),
            w: binding.id(self.w),
            b: binding.id(self.b),
        }
    }
}

impl GcbParams {
    /// Two square-preserving GCLs plus the residual weight, which starts
    /// at exactly 0.
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, n: usize, f: usize) -> Self {
        let l1 = GclParams::init(store, rng, &format!("{name}.l1"), GclShape::square(n, f));
        let l2 = GclParams::init(store, rng, &format!("{name}.l2"), GclShape::square(n, f));
        let alpha = store.register(format!("{name}.alpha"), Tensor::scalar(0.0));
        GcbParams { l1, l2, alpha }
    }

    pub fn bind(&self, binding: &ParamBinding) -> GcbIds {
        GcbIds {
            l1: self.l1.bind(binding),
            l2: self.l2.bind(binding),
            alpha: binding.id(self.alpha),
        }
    }
}

/// GCL forward: `sigma(S A W + b)`, skipping the activation for
/// distribution heads. `a` is `[B, n_in, f_in]` (or `[n_in, f_in]`).
pub fn gcl(tape: &mut Tape, a: TensorId, p: &GclIds, activate: bool) -> Result<TensorId> {
    let sa = tape.matmul(p.s, a)?;
    let saw = tape.matmul(sa, p.w)?;
    let z = tape.add(saw, p.b)?;
    if activate {
        tape.gelu(z)
    } else {
        Ok(z)
    }
}

/// GCB forward: two stacked GCLs plus the residual-weighted input. With
/// `rezero_on_branch = false` the weight multiplies the input path, which
/// is the form this block is defined in; `true` selects the conventional
/// rezero wiring (weight on the branch, identity skip).
pub fn gcb(tape: &mut Tape, a: TensorId, p: &GcbIds, rezero_on_branch: bool) -> Result<TensorId> {
    let h = gcl(tape, a, &p.l1, true)?;
    let h = gcl(tape, h, &p.l2, true)?;
    if rezero_on_branch {
        let hb = tape.mul(h, p.alpha)?;
        tape.add(hb, a)
    } else {
        let ab = tape.mul(a, p.alpha)?;
        tape.add(h, ab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::assert_gradients_match;
    use rand::SeedableRng;

    fn erf_gelu(x: Real) -> Real {
        0.5 * x * (1.0 + libm::erf(x as f64 / std::f64::consts::SQRT_2) as Real)
    }

    /// Direct triple-loop evaluation of sigma(S A W + b) for a single
    /// (unbatched) graph, independent of the tape.
    fn gcl_loop_oracle(
        s: &[Real],
        a: &[Real],
        w: &[Real],
        b: &[Real],
        shape: GclShape,
        activate: bool,
    ) -> Vec<Real> {
        let GclShape {
            n_in,
            n_out,
            f_in,
            f_out,
        } = shape;
        let mut out = vec![0.0; n_out * f_out];
        for i in 0..n_out {
            for j in 0..f_out {
                let mut acc = 0.0;
                for p in 0..n_in {
                    for q in 0..f_in {
                        acc += s[i * n_in + p] * a[p * f_in + q] * w[q * f_out + j];
                    }
                }
                acc += b[i * f_out + j];
                out[i * f_out + j] = if activate { erf_gelu(acc) } else { acc };
            }
        }
        out
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_parameters_pass_input_through() {
        let mut tape = Tape::new();
        let n = 3;
        let f = 4;
        let s = tape.constant(Tensor::new(vec![n, n], {
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                d[i * n + i] = 1.0;
            }
            d
        }).unwrap()).unwrap();
        let w = tape.constant(Tensor::new(vec![f, f], {
            let mut d = vec![0.0; f * f];
            for i in 0..f {
                d[i * f + i] = 1.0;
            }
            d
        }).unwrap()).unwrap();
        let b = tape.constant(Tensor::zeros(vec![n, f])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let aval = rand_tensor(&mut rng, vec![n, f]);
        let a = tape.constant(aval.clone()).unwrap();
        let out = gcl(&mut tape, a, &GclIds { s, w, b }, false).unwrap();
        for (g, w) in tape.data(out).iter().zip(aval.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let shape = GclShape {
            n_in: 4,
            n_out: 2,
            f_in: 3,
            f_out: 5,
        };
        let p = GclParams::init(&mut store, &mut rng, "g", shape);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape).unwrap();
        let a = tape.constant(Tensor::zeros(vec![4, 3])).unwrap();
        let out = gcl(&mut tape, a, &p.bind(&binding), true).unwrap();
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_gcl_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = GclShape {
            n_in: 4,
            n_out: 2,
            f_in: 3,
            f_out: 5,
        };
        let s = rand_tensor(&mut rng, vec![2, 4]);
        let w = rand_tensor(&mut rng, vec![3, 5]);
        let b = rand_tensor(&mut rng, vec![2, 5]);
        let a = rand_tensor(&mut rng, vec![4, 3]);
        let mut tape = Tape::new();
        let ids = GclIds {
            s: tape.constant(s.clone()).unwrap(),
            w: tape.constant(w.clone()).unwrap(),
            b: tape.constant(b.clone()).unwrap(),
        };
        let aid = tape.constant(a.clone()).unwrap();
        let got = gcl(&mut tape, aid, &ids, true).unwrap();
        let want = gcl_loop_oracle(s.data(), a.data(), w.data(), b.data(), shape, true);
        for (g, w) in tape.data(got).iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn gcb_with_zero_alpha_equals_branch_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let p = GcbParams::init(&mut store, &mut rng, "blk", 3, 4);
        assert_eq!(store.value(p.alpha).data(), &[0.0]);

        let mut tape = Tape::new();
        let binding = store.bind(&mut tape).unwrap();
        let ids = p.bind(&binding);
        let a = tape.constant(rand_tensor(&mut rng, vec![3, 4])).unwrap();
        let full = gcb(&mut tape, a, &ids, false).unwrap();
        let h = gcl(&mut tape, a, &ids.l1, true).unwrap();
        let branch = gcl(&mut tape, h, &ids.l2, true).unwrap();
        assert_eq!(tape.data(full), tape.data(branch));
    }

    #[test]
    fn gcb_with_unit_alpha_and_dead_branch_is_identity() {
        let mut tape = Tape::new();
        let n = 3;
        let f = 4;
        let zeros_s = tape.constant(Tensor::zeros(vec![n, n])).unwrap();
        let zeros_w = tape.constant(Tensor::zeros(vec![f, f])).unwrap();
        let zeros_b = tape.constant(Tensor::zeros(vec![n, f])).unwrap();
        let dead = GclIds {
            s: zeros_s,
            w: zeros_w,
            b: zeros_b,
        };
        let alpha = tape.constant(Tensor::scalar(1.0)).unwrap();
        let ids = GcbIds {
            l1: dead,
            l2: dead,
            alpha,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let aval = rand_tensor(&mut rng, vec![n, f]);
        let a = tape.constant(aval.clone()).unwrap();
        let out = gcb(&mut tape, a, &ids, false).unwrap();
        assert_eq!(tape.data(out), aval.data());
    }

    #[test]
    fn random_gcb_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, f) = (3, 4);
        let sq = GclShape::square(n, f);
        let s1 = rand_tensor(&mut rng, vec![n, n]);
        let w1 = rand_tensor(&mut rng, vec![f, f]);
        let b1 = rand_tensor(&mut rng, vec![n, f]);
        let s2 = rand_tensor(&mut rng, vec![n, n]);
        let w2 = rand_tensor(&mut rng, vec![f, f]);
        let b2 = rand_tensor(&mut rng, vec![n, f]);
        let alpha = 0.37;
        let a = rand_tensor(&mut rng, vec![n, f]);

        let h = gcl_loop_oracle(s1.data(), a.data(), w1.data(), b1.data(), sq, true);
        let h = gcl_loop_oracle(s2.data(), &h, w2.data(), b2.data(), sq, true);
        let want: Vec<Real> = h
            .iter()
            .zip(a.data())
            .map(|(&hv, &av)| hv + alpha * av)
            .collect();

        let mut tape = Tape::new();
        let ids = GcbIds {
            l1: GclIds {
                s: tape.constant(s1).unwrap(),
                w: tape.constant(w1).unwrap(),
                b: tape.constant(b1).unwrap(),
            },
            l2: GclIds {
                s: tape.constant(s2).unwrap(),
                w: tape.constant(w2).unwrap(),
                b: tape.constant(b2).unwrap(),
            },
            alpha: tape.constant(Tensor::scalar(alpha)).unwrap(),
        };
        let aid = tape.constant(a).unwrap();
        let got = gcb(&mut tape, aid, &ids, false).unwrap();
        for (g, w) in tape.data(got).iter().zip(&want) {
            assert!((g - w).abs() < 1e-10);
        }
    }

    #[test]
    fn stacked_blocks_at_init_compose_their_branches() {
        // alpha starts at 0 everywhere, so a stack of fresh GCBs equals
        // the composition of their two-layer branches
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let blocks: Vec<GcbParams> = (0..3)
            .map(|k| GcbParams::init(&mut store, &mut rng, &format!("blk{k}"), 3, 4))
            .collect();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape).unwrap();
        let a = tape.constant(rand_tensor(&mut rng, vec![3, 4])).unwrap();

        let mut stacked = a;
        for b in &blocks {
            stacked = gcb(&mut tape, stacked, &b.bind(&binding), false).unwrap();
        }
        let mut composed = a;
        for b in &blocks {
            let ids = b.bind(&binding);
            composed = gcl(&mut tape, composed, &ids.l1, true).unwrap();
            composed = gcl(&mut tape, composed, &ids.l2, true).unwrap();
        }
        assert_eq!(tape.data(stacked), tape.data(composed));
    }

    #[test]
    fn init_is_deterministic_per_seed_and_near_identity() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(55);
            let mut store = ParamStore::new();
            let p = GclParams::init(&mut store, &mut rng, "g", GclShape::square(6, 3));
            (
                store.value(p.s).clone(),
                store.value(p.w).clone(),
                store.value(p.b).clone(),
            )
        };
        let (s1, w1, b1) = build();
        let (s2, w2, b2) = build();
        assert_eq!(s1, s2);
        assert_eq!(w1, w2);
        assert_eq!(b1, b2);

        let n = 6;
        let diag_mean: Real = (0..n).map(|i| s1.data()[i * n + i]).sum::<Real>() / n as Real;
        assert!((diag_mean - 1.0).abs() < 0.011, "diagonal mean {diag_mean}");
        assert!(b1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcl_param_count_is_exact() {
        let shape = GclShape {
            n_in: 7,
            n_out: 5,
            f_in: 11,
            f_out: 13,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        GclParams::init(&mut store, &mut rng, "g", shape);
        assert_eq!(store.scalar_count(), shape.param_count());
        assert_eq!(shape.param_count(), 5 * 7 + 11 * 13 + 5 * 13);
    }

    #[test]
    fn gcl_and_gcb_gradients_match_finite_differences() {
        // flatten all parameters of a GCB into one vector and check the
        // whole block end to end, input included
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (n, f) = (3, 4);
        let mut store = ParamStore::new();
        let _ = GcbParams::init(&mut store, &mut rng, "blk", n, f);
        let aval = rand_tensor(&mut rng, vec![2, n, f]); // batch of 2

        let flat: Vec<Real> = store
            .ids()
            .flat_map(|id| store.value(id).data().to_vec())
            .chain(aval.data().to_vec())
            .collect();

        let eval = |vals: &[Real], want_grad: bool| -> (Real, Option<Vec<Real>>) {
            let mut store2 = ParamStore::new();
            let mut rng2 = ChaCha8Rng::seed_from_u64(10);
            let p2 = GcbParams::init(&mut store2, &mut rng2, "blk", n, f);
            let mut cursor = 0;
            let ids: Vec<_> = store2.ids().collect();
            for id in ids {
                let len = store2.value(id).numel();
                store2
                    .value_mut(id)
                    .data_mut()
                    .copy_from_slice(&vals[cursor..cursor + len]);
                cursor += len;
            }
            let a2 = Tensor::new(vec![2, n, f], vals[cursor..].to_vec()).unwrap();
            let mut tape = Tape::new();
            let binding = store2.bind(&mut tape).unwrap();
            let aid = tape.leaf(a2, true).unwrap();
            let out = gcb(&mut tape, aid, &p2.bind(&binding), false).unwrap();
            let sq = tape.square(out).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            let v = tape.scalar_value(loss);
            if !want_grad {
                return (v, None);
            }
            let grads = tape.backward(loss).unwrap();
            let mut flatg: Vec<Real> = store2
                .ids()
                .flat_map(|id| grads.get(binding.id(id)).unwrap().to_vec())
                .collect();
            flatg.extend(grads.get(aid).unwrap().to_vec());
            (v, Some(flatg))
        };

        let (_, analytic) = eval(&flat, true);
        assert_gradients_match("gcb", &flat, &analytic.unwrap(), |vals| eval(vals, false).0);
    }
}
