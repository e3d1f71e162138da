use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikesal::grad::{central_difference, relative_error, surrogate_grad, surrogate_primitive, GradError, NormStats, Tape, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0))
}

/// Builds `sum(f(inputs) * probe)` and compares the tape gradient of every
/// input against central differences at h = 1e-3. Returns the worst
/// relative error.
fn gradcheck(inputs: &[Tensor], f: impl for<'t> Fn(&[Var<'t>]) -> Var<'t> + Copy) -> f64 {
    let probe_for = |shape: &[usize]| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        random(&mut rng, shape)
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&vars);
        let probe = probe_for(&out.shape());
        out.value().zip_map(&probe, |a, b| a * b).sum()
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&vars);
    let probe = tape.constant(probe_for(&out.shape()));
    let loss = out.mul(probe).unwrap().sum();
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = v.grad().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = central_difference(&inputs[i], 1e-3, None, |x| {
            let mut xs = inputs.to_vec();
            xs[i] = x.clone();
            eval(&xs)
        });
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

const TOL: f64 = 1e-4;

#[test]
fn elementwise_ops_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 4]);
    let p = positive(&mut rng, &[3, 4]);
    assert!(gradcheck(&[a.clone(), b.clone()], |v| v[0].add(v[1]).unwrap()) < TOL);
    assert!(gradcheck(&[a.clone(), b.clone()], |v| v[0].sub(v[1]).unwrap()) < TOL);
    assert!(gradcheck(&[a.clone(), b.clone()], |v| v[0].mul(v[1]).unwrap()) < TOL);
    assert!(gradcheck(&[a.clone(), p.clone()], |v| v[0].div(v[1]).unwrap()) < TOL);
    assert!(gradcheck(&[a.clone()], |v| v[0].scale(-2.5)) < TOL);
    assert!(gradcheck(&[a.clone()], |v| v[0].add_scalar(3.0)) < TOL);
    assert!(gradcheck(&[p.clone()], |v| v[0].ln()) < TOL);
    assert!(gradcheck(&[a.clone()], |v| v[0].sigmoid()) < TOL);
    assert!(gradcheck(&[a.clone()], |v| v[0].clamp(-5.0, 5.0)) < TOL);
    assert!(gradcheck(&[a.clone()], |v| v[0].mul(v[0]).unwrap().sum()) < TOL);
    assert!(gradcheck(&[a], |v| v[0].mean()) < TOL);
}

#[test]
fn shape_ops_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[2, 3, 4]);
    let b = random(&mut rng, &[2, 5, 4]);
    assert!(gradcheck(&[a.clone()], |v| v[0].reshape(&[6, 4]).unwrap()) < TOL);
    assert!(gradcheck(&[a.clone()], |v| v[0].permute(&[2, 0, 1]).unwrap()) < TOL);
    assert!(gradcheck(&[a.clone()], |v| v[0].narrow(1, 1, 2).unwrap()) < TOL);
    assert!(gradcheck(&[a, b], |v| Var::concat(&[v[0], v[1]], 1).unwrap()) < TOL);
}

#[test]
fn linear_algebra_ops_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 5]);
    assert!(gradcheck(&[a.clone(), b], |v| v[0].matmul(v[1]).unwrap()) < TOL);
    let a3 = random(&mut rng, &[2, 3, 4]);
    let b3 = random(&mut rng, &[2, 4, 2]);
    assert!(gradcheck(&[a3, b3], |v| v[0].matmul(v[1]).unwrap()) < TOL);
    let w = random(&mut rng, &[6, 4]);
    let bias = random(&mut rng, &[6]);
    assert!(gradcheck(&[a.clone(), w.clone(), bias], |v| v[0].linear(v[1], Some(v[2])).unwrap()) < TOL);
    assert!(gradcheck(&[a, w], |v| v[0].linear(v[1], None).unwrap()) < TOL);
}

#[test]
fn spatial_ops_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 3, 6, 6]);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    let b = random(&mut rng, &[4]);
    assert!(gradcheck(&[x.clone(), w.clone(), b], |v| v[0].conv2d(v[1], Some(v[2]), 1).unwrap()) < TOL);
    let w1 = random(&mut rng, &[2, 3, 1, 1]);
    assert!(gradcheck(&[x.clone(), w1], |v| v[0].conv2d(v[1], None, 0).unwrap()) < TOL);
    // Continuous random values: no ties inside pooling windows.
    assert!(gradcheck(&[x.clone()], |v| v[0].maxpool2d().unwrap()) < TOL);
    assert!(gradcheck(&[x], |v| v[0].upsample_nearest(2).unwrap()) < TOL);
}

#[test]
fn batchnorm_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[4, 3, 2, 2]);
    let g = positive(&mut rng, &[3]);
    let b = random(&mut rng, &[3]);
    let err = gradcheck(&[x.clone(), g.clone(), b.clone()], |v| {
        v[0].batchnorm(v[1], v[2], NormStats::Batch { eps: 1e-5 }).unwrap().0
    });
    assert!(err < TOL, "{err}");
    let tokens = random(&mut rng, &[7, 3]);
    let err = gradcheck(&[tokens, g.clone(), b.clone()], |v| v[0].batchnorm(v[1], v[2], NormStats::Batch { eps: 1e-5 }).unwrap().0);
    assert!(err < TOL, "{err}");
    let err = gradcheck(&[x, g, b], |v| {
        v[0].batchnorm(v[1], v[2], NormStats::Fixed { mean: &[0.1, -0.2, 0.3], var: &[1.5, 0.5, 2.0], eps: 1e-5 }).unwrap().0
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn random_compositions_pass_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random(&mut rng, &[2, 2, 4, 4]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let g = positive(&mut rng, &[3]);
        let b = random(&mut rng, &[3]);
        let lw = random(&mut rng, &[5, 12]);
        let err = gradcheck(&[x, w, g, b, lw], |v| {
            let y = v[0].conv2d(v[1], None, 1).unwrap();
            let (y, _) = y.batchnorm(v[2], v[3], NormStats::Batch { eps: 1e-5 }).unwrap();
            let y = y.sigmoid().maxpool2d().unwrap().upsample_nearest(2).unwrap().maxpool2d().unwrap();
            let t = y.permute(&[0, 2, 3, 1]).unwrap().reshape(&[2, 12]).unwrap();
            let z = t.linear(v[4], None).unwrap();
            z.mul(z).unwrap().mean()
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn matmul_with_identity_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tape = Tape::new();
    let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let a = random(&mut rng, &[3, 5]);
    let out = eye.matmul(tape.constant(a.clone())).unwrap();
    assert_eq!(*out.value(), a);
}

#[test]
fn zero_kernel_conv_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tape = Tape::new();
    let x = tape.constant(random(&mut rng, &[1, 2, 5, 5]));
    let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let y = x.conv2d(w, None, 1).unwrap();
    assert_eq!(y.shape(), vec![1, 3, 5, 5]);
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_errors_name_the_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    let err = a.matmul(b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    assert!(matches!(a.add(b), Err(GradError::Shape { .. })));
}

#[test]
fn heaviside_forward_and_surrogate_at_threshold() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3], vec![1.0, 11.0, -9.0]).unwrap(), true);
    let s = x.heaviside(1.0, 2.0);
    assert_eq!(s.value().data(), &[1.0, 1.0, 0.0]);
    tape.backward(s.sum()).unwrap();
    let g = x.grad().unwrap();
    assert_eq!(g.data()[0], 1.0); // alpha / 2
    assert!(g.data()[1] < 1e-2 && g.data()[2] < 1e-2);
}

#[test]
fn surrogate_matches_derivative_of_its_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let alpha = rng.random_range(0.5..4.0);
        let x = rng.random_range(-3.0..3.0);
        let h = 1e-5;
        let numeric = (surrogate_primitive(x + h, alpha) - surrogate_primitive(x - h, alpha)) / (2.0 * h);
        let analytic = surrogate_grad(x, alpha);
        assert!((numeric - analytic).abs() / analytic < 1e-5, "x={x} alpha={alpha}");
    }
}

#[test]
fn or_truth_table_and_identity() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::new(&[4], vec![0., 0., 1., 1.]).unwrap());
    let b = tape.constant(Tensor::new(&[4], vec![0., 1., 0., 1.]).unwrap());
    assert_eq!(a.or(b).unwrap().value().data(), &[0., 1., 1., 1.]);
    let z = tape.constant(Tensor::zeros(&[4]));
    assert_eq!(*a.or(z).unwrap().value(), *a.value());
}

#[test]
fn or_rejects_non_binary_operands() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::full(&[2], 0.5));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(a.or(b), Err(GradError::NonBinary(_))));
}

#[test]
fn or_backward_passes_gradient_to_both() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::new(&[2], vec![1., 0.]).unwrap(), true);
    let b = tape.leaf(Tensor::new(&[2], vec![1., 1.]).unwrap(), true);
    let out = a.or(b).unwrap().scale(3.0).sum();
    tape.backward(out).unwrap();
    assert_eq!(a.grad().unwrap().data(), &[3., 3.]);
    assert_eq!(b.grad().unwrap().data(), &[3., 3.]);
}

proptest! {
    #[test]
    fn or_commutes(bits in proptest::collection::vec(any::<(bool, bool)>(), 1..64)) {
        let tape = Tape::new();
        let n = bits.len();
        let a = tape.constant(Tensor::from_fn(&[n], |i| bits[i].0 as u8 as f64));
        let b = tape.constant(Tensor::from_fn(&[n], |i| bits[i].1 as u8 as f64));
        prop_assert_eq!(&*a.or(b).unwrap().value(), &*b.or(a).unwrap().value());
    }
}

#[test]
fn backward_of_sum_is_ones_and_of_square_is_twice() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w0 = random(&mut rng, &[2, 3, 2]);
    let tape = Tape::new();
    let w = tape.leaf(w0.clone(), true);
    tape.backward(w.sum()).unwrap();
    assert_eq!(w.grad().unwrap(), Tensor::ones(&[2, 3, 2]));

    let tape = Tape::new();
    let w = tape.leaf(w0.clone(), true);
    tape.backward(w.mul(w).unwrap().sum()).unwrap();
    assert_eq!(w.grad().unwrap(), w0.map(|v| 2.0 * v));
}

#[test]
fn repeated_backward_accumulates() {
    let tape = Tape::new();
    let w = tape.leaf(Tensor::new(&[2], vec![1.0, -3.0]).unwrap(), true);
    let loss = w.mul(w).unwrap().sum();
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(w.grad().unwrap().data(), &[4.0, -12.0]);
    tape.zero_grad();
    assert!(w.grad().is_none());
}

#[test]
fn backward_on_non_scalar_fails() {
    let tape = Tape::new();
    let w = tape.leaf(Tensor::zeros(&[3]), true);
    assert!(matches!(tape.backward(w.scale(2.0)), Err(GradError::NonScalarLoss(_))));
}

#[test]
fn branch_accumulation_is_order_independent() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1], vec![2.0]).unwrap(), true);
    let a = x.scale(3.0);
    let b = x.mul(x).unwrap();
    tape.backward(a.add(b).unwrap().sum()).unwrap();
    let g1 = x.grad().unwrap();
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1], vec![2.0]).unwrap(), true);
    let b = x.mul(x).unwrap();
    let a = x.scale(3.0);
    tape.backward(b.add(a).unwrap().sum()).unwrap();
    assert_eq!(g1, x.grad().unwrap());
    assert_eq!(g1.data(), &[7.0]);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let tape = Tape::new();
        let x = tape.constant(random(&mut rng, &[2, 3, 8, 8]));
        let w = tape.constant(random(&mut rng, &[4, 3, 3, 3]));
        let y = x.conv2d(w, None, 1).unwrap().maxpool2d().unwrap().sigmoid();
        (*y.value()).clone()
    };
    assert_eq!(run().data(), run().data());
}
