//! Central finite-difference checks of every tape op in 64-bit arithmetic.

use mcgan_nn::{BatchNorm, Conv2d, Ctx, Linear, Mode, Params, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

/// Checks d f / d inputs against central differences; returns the worst relative error.
fn check<F>(inputs: Vec<ArrayD<f64>>, f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|a| tape.input(a.clone())).collect();
    let out = f(&vars);
    let grads = tape.backward(out);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .map(|v| grads.wrt(*v).cloned().unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim())))
        .collect();

    let eval = |xs: &[ArrayD<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|a| tape.constant(a.clone())).collect();
        f(&vars).item()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        for k in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].as_slice_mut().unwrap()[k] += h;
            let mut minus = inputs.clone();
            minus[i].as_slice_mut().unwrap()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = a.as_slice().unwrap()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3, 2, 2], &mut rng);
    let b = random(&[2, 3, 2, 2], &mut rng);
    let err = check(vec![a, b], |v| {
        let x = v[0].mul(&v[1]).add(&v[0].sigmoid()).sub(&v[1].tanh());
        let y = x
            .leaky_relu(0.2)
            .add(&v[0].relu())
            .add(&v[1].abs())
            .add(&v[0].scale(0.3).exp());
        y.square().add_scalar(0.5).ln().mean()
    });
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 2, 3], &mut rng);
    let b = random(&[2, 2, 2, 3], &mut rng);
    let c = random(&[2, 4], &mut rng);
    let w = random(&[2, 5, 4, 6], &mut rng);
    let err = check(vec![a, b, c, w], |v| {
        let cat = Var::concat(&[v[0], v[1], v[2].replicate(2, 3)]);
        let part = cat.narrow(2, 5).upsample2x().upsample2x().avg_pool2x();
        let flat = part.reshape(&[2, 5 * 4 * 6]).reshape(&[2, 5, 4, 6]);
        flat.mul(&v[3]).sum()
    });
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn convolution_and_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 4)] {
        let x = random(&[2, 3, 5, 4], &mut rng);
        let w = random(&[4, 3, k, k], &mut rng);
        let b = random(&[4], &mut rng);
        let err = check(vec![x, w, b], |v| {
            v[0].conv2d(&v[1], Some(&v[2]), stride, pad).square().sum()
        });
        assert!(err < 1e-4, "conv stride {stride} pad {pad}: {err}");
    }
    let x = random(&[3, 5], &mut rng);
    let w = random(&[4, 5], &mut rng);
    let b = random(&[4], &mut rng);
    let err = check(vec![x, w, b], |v| v[0].linear(&v[1], Some(&v[2])).tanh().sum());
    assert!(err < 1e-6, "linear {err}");
}

#[test]
fn batch_norm_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 2, 2, 2], &mut rng);
    let g = random(&[2], &mut rng);
    let b = random(&[2], &mut rng);
    let probe = random(&[3, 2, 2, 2], &mut rng);
    let err = check(vec![x.clone(), g.clone(), b.clone(), probe.clone()], |v| {
        v[0].batch_norm(&v[1], &v[2], None, 1e-5).0.mul(&v[3]).sum()
    });
    assert!(err < 1e-5, "train-mode bn {err}");
    let rm = random(&[2], &mut rng);
    let rv = random(&[2], &mut rng).mapv(|v| v.abs() + 0.5);
    let err = check(vec![x, g, b, probe], |v| {
        v[0].batch_norm(&v[1], &v[2], Some((&rm, &rv)), 1e-5)
            .0
            .mul(&v[3])
            .sum()
    });
    assert!(err < 1e-6, "eval-mode bn {err}");
}

#[test]
fn layer_parameter_gradients_are_reported_by_name() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = Params::<f64>::new();
    let conv = Conv2d::new("c", 2, 3, 3, 1, true);
    let bn = BatchNorm::new("bn", 3);
    let fc = Linear::new("fc", 12, 2, true);
    conv.init(&mut params, &mut rng);
    bn.init(&mut params, &mut rng);
    fc.init(&mut params, &mut rng);
    let x = random(&[2, 2, 2, 2], &mut rng);

    let loss = |p: &Params<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, p, Mode::Train, true);
        let xv = tape.constant(x.clone());
        let y = conv.forward(&ctx, &xv).unwrap();
        let y = bn.forward(&ctx, &y).unwrap().relu().reshape(&[2, 12]);
        let y = fc.forward(&ctx, &y).unwrap();
        let l = y.square().sum();
        (l.item(), tape.backward(l).by_name())
    };
    let (_, grads) = loss(&params);
    assert!(grads.contains_key("c.weight") && grads.contains_key("fc.bias"));
    assert!(!grads.contains_key("bn.running_mean"));
    let h = 1e-6;
    for (name, g) in &grads {
        for k in 0..g.len() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().as_slice_mut().unwrap()[k] += h;
            let mut m = params.clone();
            m.get_mut(name).unwrap().as_slice_mut().unwrap()[k] -= h;
            let fd = (loss(&p).0 - loss(&m).0) / (2.0 * h);
            let an = g.as_slice().unwrap()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
            assert!(rel < 1e-4, "{name}[{k}]: fd {fd} analytic {an}");
        }
    }
}

#[test]
fn shared_bindings_accumulate() {
    let mut params = Params::<f64>::new();
    params.insert("w", ArrayD::from_elem(IxDyn(&[2]), 3.0), mcgan_nn::Kind::Weight);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &params, Mode::Eval, true);
    let a = ctx.bind("w").unwrap();
    let b = ctx.bind("w").unwrap();
    let l = a.mul(&b).sum();
    let g = tape.backward(l).by_name();
    assert_eq!(g["w"].as_slice().unwrap(), &[6.0, 6.0]);
}

#[test]
fn eval_mode_is_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut params = Params::<f32>::new();
    let conv = Conv2d::new("c", 3, 8, 3, 2, false);
    let bn = BatchNorm::new("bn", 8);
    conv.init(&mut params, &mut rng);
    bn.init(&mut params, &mut rng);
    let x = ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 8, 8]), || rng.random_range(-1.0f32..1.0));
    let run = || {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &params, Mode::Eval, false);
        let xv = tape.constant(x.clone());
        let y = bn.forward(&ctx, &conv.forward(&ctx, &xv).unwrap()).unwrap();
        (*y.value()).clone()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
