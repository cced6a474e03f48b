//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive as it is evaluated; [`Tape::backward`]
//! replays the record in reverse to accumulate gradients. Binary operations
//! broadcast NumPy-style, which covers biases, per-row scalars and rank-0
//! curvature/temperature scalars.

mod check;
mod tape;
mod tensor;

pub use check::grad_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new(DType::F64);
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let i = t.leaf(&Tensor::eye(2)).unwrap();
        let av = t.leaf(&a).unwrap();
        let out = t.matmul(i, av).unwrap();
        assert_eq!(t.value(out), &a);
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut t = Tape::new(DType::F64);
        let x = t.leaf(&Tensor::full(&[2, 5], 3.7)).unwrap();
        let s = t.softmax(x).unwrap();
        for v in t.value(s).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn trig_identities_at_zero() {
        let mut t = Tape::new(DType::F64);
        let z = t.scalar(0.0).unwrap();
        let one = t.scalar(1.0).unwrap();
        let a = t.asinh(z).unwrap();
        let b = t.acos(one).unwrap();
        assert_eq!(t.value(a).item(), 0.0);
        assert_eq!(t.value(b).item(), 0.0);
    }

    #[test]
    fn domain_violations_are_numeric_errors() {
        let mut t = Tape::new(DType::F64);
        let x = t.scalar(-1.0).unwrap();
        assert!(matches!(t.sqrt(x), Err(crate::Error::Numeric(_))));
        assert!(matches!(t.log(x), Err(crate::Error::Numeric(_))));
        assert!(matches!(t.acosh(x), Err(crate::Error::Numeric(_))));
        let big = t.scalar(1.5).unwrap();
        assert!(matches!(t.asin(big), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut t = Tape::new(DType::F64);
        let a = t.leaf(&Tensor::zeros(&[2, 3])).unwrap();
        let b = t.leaf(&Tensor::zeros(&[2, 4])).unwrap();
        assert!(matches!(t.add(a, b), Err(crate::Error::Dimension(_))));
        assert!(matches!(t.matmul(a, a), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut t = Tape::new(DType::F64);
        let x = t.leaf(&Tensor::full(&[3, 2], 0.5)).unwrap();
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[1.0; 6]);
    }

    #[test]
    fn lorentz_form_gradient() {
        // <x,x>_L = -x0^2 + sum xi^2  ->  grad (-2 x0, 2 xi)
        let mut t = Tape::new(DType::F64);
        let xv = Tensor::vector(vec![1.3, 0.4, -0.7]);
        let x = t.leaf(&xv).unwrap();
        let metric = t.leaf(&Tensor::vector(vec![-1.0, 1.0, 1.0])).unwrap();
        let xm = t.mul(x, metric).unwrap();
        let p = t.mul(xm, x).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap().get(x);
        assert_eq!(g.data(), &[-2.6, 0.8, -1.4]);
    }

    #[test]
    fn untouched_parameter_has_zero_gradient() {
        let mut t = Tape::new(DType::F64);
        let x = t.leaf(&Tensor::full(&[2], 1.0)).unwrap();
        let unused = t.leaf(&Tensor::full(&[4], 1.0)).unwrap();
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros(&[4]));
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let mut t = Tape::new(DType::F64);
        let x = t.leaf(&Tensor::full(&[2], 1.0)).unwrap();
        assert!(matches!(t.backward(x), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn nan_trips_numeric_error() {
        let mut t = Tape::new(DType::F64);
        let x = t.scalar(1e300).unwrap();
        assert!(matches!(t.mul(x, x), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn f32_tape_rounds_values() {
        let mut t = Tape::new(DType::F32);
        let x = t.scalar(0.1).unwrap();
        assert_eq!(t.value(x).item(), 0.1f32 as f64);
    }

    #[test]
    fn linear_function_checks_exactly() {
        let w = Tensor::new(&[3], vec![0.5, -2.0, 3.0]).unwrap();
        let x = Tensor::new(&[3], vec![1.0, 2.0, -1.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let wv = t.leaf(&w)?;
                let p = t.mul(v[0], wv)?;
                t.sum(p)
            },
            &[x],
            (2.0f64).powi(-20),
        )
        .unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn primitives_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, &[2, 3, 4]);
            let b = rand_tensor(&mut rng, &[4, 5]);
            let bias = rand_tensor(&mut rng, &[2, 1, 5]);
            let err = grad_check(
                |t, v| {
                    let m = t.matmul(v[0], v[1])?;
                    let m = t.add(m, v[2])?;
                    let s = t.softmax(m)?;
                    let g = t.gelu(m)?;
                    let th = t.tanh(g)?;
                    let prod = t.mul(s, th)?;
                    let tr = t.transpose(prod)?;
                    let sl = t.slice(tr, 1, 3)?;
                    let sq = t.square(sl)?;
                    let lse = t.logsumexp(m, None)?;
                    let sp = t.softplus(lse)?;
                    let cat = t.concat(&[sp, sp])?;
                    let s1 = t.sum_axis(sq, 1)?;
                    let a = t.sum(s1)?;
                    let b = t.mean(cat)?;
                    let e = t.exp(b)?;
                    let l = t.log(e)?;
                    let q = t.div(a, l)?;
                    let ash = t.asinh(q)?;
                    t.add(ash, a)
                },
                &[a, b, bias],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "err {err}");
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_tensor(&mut rng, &[4, 6]);
        let run = || {
            let mut t = Tape::new(DType::F64);
            let x = t.leaf(&a).unwrap();
            let s = t.softmax(x).unwrap();
            let tr = t.transpose(x).unwrap();
            let mm = t.matmul(s, tr).unwrap();
            let l = t.sum(mm).unwrap();
            t.backward(l).unwrap().get(x)
        };
        let g1 = run();
        let g2 = run();
        assert!(g1.data().iter().zip(g2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn masked_logsumexp_excludes_entries() {
        let mut t = Tape::new(DType::F64);
        let x = t.leaf(&Tensor::new(&[1, 3], vec![0.0, 100.0, 0.0]).unwrap()).unwrap();
        let l = t.logsumexp(x, Some(vec![true, false, true])).unwrap();
        assert!((t.value(l).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn clamp_blocks_gradient_outside() {
        let mut t = Tape::new(DType::F64);
        let x = t.leaf(&Tensor::vector(vec![-1.0, 0.5, 2.0])).unwrap();
        let c = t.clamp(x, 0.0, 1.0).unwrap();
        let s = t.sum(c).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn constants_and_detach_carry_no_gradient() {
        let mut t = Tape::new(DType::F64);
        let w = t.leaf(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let x = t.constant(&Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap()).unwrap();
        let y = t.matmul(x, w).unwrap();
        let d = t.detach(y).unwrap();
        let z = t.mul(y, d).unwrap();
        let l = t.sum(z).unwrap();
        let g = t.backward(l).unwrap();
        // d/dw sum(y * const(y)) = x^T y
        assert_eq!(g.get(w).data(), &[-2.0, -2.0, 2.0, 2.0]);
        assert_eq!(g.get(x).data(), &[0.0, 0.0]);
        assert_eq!(g.get(d).data(), &[0.0, 0.0]);
    }
}
