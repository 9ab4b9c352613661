use ctxdiff::tensor::{grad_check, grad_check_many, Bits, UnaryFn};
use ctxdiff::{Error, Graph, Result, Rng, Tensor, Var};

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape)
}

/// Six nested loops, zero padding, cross-correlation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b_ in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b_ * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b_ * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, oh, ow], out).unwrap()
}

fn conv_value(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, Some(bv), stride, pad)?;
    Ok(g.value(y).clone())
}

fn assert_close_rel(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol * y.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn conv_identity_and_constant_kernels() {
    let x = Tensor::full(&[1, 1, 3, 3], 1.0);
    let y = conv_value(&x, &Tensor::full(&[1, 1, 1, 1], 1.0), &Tensor::zeros(&[1]), 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 1.0));

    let mut rng = Rng::new(1);
    let x = randn(&mut rng, &[2, 3, 5, 5]);
    let y = conv_value(&x, &Tensor::zeros(&[2, 3, 3, 3]), &Tensor::from_vec(&[2], vec![0.7, 0.7]).unwrap(), 1, 1)
        .unwrap();
    assert!(y.data().iter().all(|&v| v == 0.7));
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = Rng::new(2);
    let x = randn(&mut rng, &[1, 2, 4, 4]);
    let w = randn(&mut rng, &[3, 2, 3, 3]);
    let b = randn(&mut rng, &[3]);
    assert_close_rel(&conv_value(&x, &w, &b, 1, 1).unwrap(), &naive_conv(&x, &w, b.data(), 1, 1), 1e-6);
}

#[test]
fn conv_randomized_suite_matches_naive_oracle() {
    let mut rng = Rng::new(3);
    for case in 0..60 {
        let n = rng.int_inclusive(1, 2);
        let ci = rng.int_inclusive(1, 4);
        let co = rng.int_inclusive(1, 4);
        let k = *rng.choose(&[1usize, 3, 5]);
        let stride = rng.int_inclusive(1, 2);
        let pad = rng.int_inclusive(0, k / 2 + 1);
        let h = rng.int_inclusive(k.saturating_sub(2 * pad).max(1), 9);
        let w = rng.int_inclusive(k.saturating_sub(2 * pad).max(1), 9);
        let x = randn(&mut rng, &[n, ci, h, w]);
        let wt = randn(&mut rng, &[co, ci, k, k]);
        let b = randn(&mut rng, &[co]);
        let got = conv_value(&x, &wt, &b, stride, pad).unwrap();
        let want = naive_conv(&x, &wt, b.data(), stride, pad);
        assert_eq!(got.shape(), want.shape(), "case {case}");
        assert_close_rel(&got, &want, 1e-6);
    }
}

#[test]
fn conv_rejects_bad_arguments() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let even = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let wrong_c = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let ok = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, even, None, 1, 0), Err(Error::Shape { .. })));
    assert!(matches!(g.conv2d(x, wrong_c, None, 1, 1), Err(Error::Shape { .. })));
    assert!(g.conv2d(x, ok, None, 0, 1).is_err());
}

fn check<G>(f: G, points: &[Tensor<f64>])
where
    G: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = grad_check_many(f, points, 1e-3, None).unwrap();
    assert!(r.max_rel_error < 1e-4, "max rel error {} ({:?})", r.max_rel_error, r.per_input);
}

/// Reduces any tensor to a scalar with a random projection so every output
/// coordinate contributes a distinct weight.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = Rng::new(seed);
    let r = g.constant(rng.normal_tensor(&shape));
    let p = g.mul(y, r)?;
    g.sum(p)
}

const SHAPES: [[usize; 4]; 5] = [[1, 4, 2, 2], [2, 4, 4, 4], [1, 8, 2, 4], [3, 4, 2, 2], [2, 8, 4, 2]];

#[test]
fn elementwise_primitives_pass_grad_check() {
    for (i, s) in SHAPES.iter().enumerate() {
        let mut rng = Rng::new(100 + i as u64);
        let a = randn(&mut rng, s);
        let b = randn(&mut rng, s);
        let pos = a.map(|v| v.abs() + 0.5);
        let seed = i as u64;
        check(|g, v| { let y = g.add(v[0], v[1])?; project(g, y, seed) }, &[a.clone(), b.clone()]);
        check(|g, v| { let y = g.sub(v[0], v[1])?; project(g, y, seed) }, &[a.clone(), b.clone()]);
        check(|g, v| { let y = g.mul(v[0], v[1])?; project(g, y, seed) }, &[a.clone(), b.clone()]);
        check(|g, v| { let y = g.affine(v[0], -1.7, 0.3)?; project(g, y, seed) }, std::slice::from_ref(&a));
        check(|g, v| { let y = g.silu(v[0])?; project(g, y, seed) }, std::slice::from_ref(&a));
        check(|g, v| { let y = g.sigmoid(v[0])?; project(g, y, seed) }, std::slice::from_ref(&a));
        check(|g, v| { let y = g.tanh(v[0])?; project(g, y, seed) }, std::slice::from_ref(&a));
        check(|g, v| { let y = g.square(v[0])?; project(g, y, seed) }, std::slice::from_ref(&a));
        check(|g, v| { let y = g.sqrt(v[0])?; project(g, y, seed) }, &[pos]);
        check(|g, v| g.mse(v[0], v[1]), &[a.clone(), b.clone()]);
        check(|g, v| g.mean(v[0]), std::slice::from_ref(&a));
    }
}

#[test]
fn structural_primitives_pass_grad_check() {
    for (i, s) in SHAPES.iter().enumerate() {
        let mut rng = Rng::new(200 + i as u64);
        let seed = i as u64;
        let x = randn(&mut rng, s);
        let x2 = randn(&mut rng, &[s[0], 3, s[2], s[3]]);
        let gamma = randn(&mut rng, &[s[1]]);
        let beta = randn(&mut rng, &[s[1]]);
        check(
            |g, v| { let y = g.group_norm(v[0], 4, v[1], v[2], 1e-5)?; project(g, y, seed) },
            &[x.clone(), gamma, beta],
        );
        check(|g, v| { let y = g.concat_channels(&[v[0], v[1]])?; project(g, y, seed) }, &[x.clone(), x2]);
        check(|g, v| { let y = g.upsample2x(v[0])?; project(g, y, seed) }, std::slice::from_ref(&x));
        check(|g, v| { let y = g.avg_pool2x(v[0])?; project(g, y, seed) }, std::slice::from_ref(&x));
        check(|g, v| { let y = g.pad_replicate(v[0], 1)?; project(g, y, seed) }, std::slice::from_ref(&x));
        let bias = randn(&mut rng, &[s[1]]);
        check(|g, v| { let y = g.add_channel(v[0], v[1])?; project(g, y, seed) }, &[x.clone(), bias]);
        let nbias = randn(&mut rng, &[s[0], s[1]]);
        check(|g, v| { let y = g.add_channel(v[0], v[1])?; project(g, y, seed) }, &[x.clone(), nbias]);

        let fin = s[1] * s[2];
        let lx = randn(&mut rng, &[s[0], fin]);
        let lw = randn(&mut rng, &[5, fin]);
        let lb = randn(&mut rng, &[5]);
        check(|g, v| { let y = g.linear(v[0], v[1], v[2])?; project(g, y, seed) }, &[lx, lw, lb]);

        let table = randn(&mut rng, &[6, 4]);
        check(|g, v| { let y = g.select_rows(v[0], &[2, 0, 2])?; project(g, y, seed) }, &[table]);

        let cw = randn(&mut rng, &[3, s[1], 3, 3]);
        let cb = randn(&mut rng, &[3]);
        check(|g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?; project(g, y, seed) }, &[x.clone(), cw.clone(), cb.clone()]);
        check(|g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?; project(g, y, seed) }, &[x.clone(), cw, cb]);
        let pw = randn(&mut rng, &[2, s[1], 1, 1]);
        check(|g, v| { let y = g.conv2d(v[0], v[1], None, 1, 0)?; project(g, y, seed) }, &[x.clone(), pw]);
    }
}

#[test]
fn clamp_gradient_is_one_inside_zero_outside() {
    let x = Tensor::from_vec(&[4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap();
    let mut g = Graph::new();
    let v = g.param(x);
    let c = g.clamp(v, -1.0, 1.0).unwrap();
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    assert_eq!(g.value(c).data(), &[-1.0, -0.5, 0.5, 1.0]);
}

#[test]
fn mse_and_silu_examples() {
    let mut rng = Rng::new(4);
    let a = randn(&mut rng, &[3, 5]);
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(a);
    let m = g.mse(av, bv).unwrap();
    assert_eq!(g.value(m).item(), 0.0);

    let grid: Vec<f64> = (0..=1200).map(|i| -6.0 + i as f64 * 0.01).collect();
    let x = g.constant(Tensor::from_vec(&[grid.len()], grid).unwrap());
    let y = g.silu(x).unwrap();
    let ys = g.value(y).data();
    assert_eq!(ys[600], 0.0);
    // silu has its minimum near -1.278; it is monotone on either side.
    let argmin = ys.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert!((-6.0 + argmin as f64 * 0.01 + 1.278).abs() < 0.01);
    assert!(ys[argmin..].windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn group_norm_output_statistics() {
    let mut rng = Rng::new(5);
    let x = randn(&mut rng, &[2, 8, 6, 6]).map(|v| 3.0 * v + 2.0);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::full(&[8], 1.0));
    let beta = g.constant(Tensor::zeros(&[8]));
    let y = g.group_norm(xv, 4, gamma, beta, 1e-8).unwrap();
    let per = 2 * 36;
    for chunk in g.value(y).data().chunks(per) {
        let mean = chunk.iter().sum::<f64>() / per as f64;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
    let bad_gamma = g.constant(Tensor::full(&[8], 1.0));
    assert!(g.group_norm(xv, 3, bad_gamma, beta, 1e-5).is_err());
}

#[test]
fn shapes_must_match_exactly() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    assert!(matches!(g.mse(a, b), Err(Error::Shape { .. })));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let w = g.param(Tensor::scalar(3.0));
    let z = g.constant(Tensor::scalar(0.0));
    let unused = g.param(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    let loss = g.mse(w, z).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().item(), 6.0);
    assert!(g.grad(unused).unwrap().data().iter().all(|v| v.bits() == 0.0f64.bits()));
    assert!(matches!(g.backward(loss), Err(Error::BackwardTwice)));
    g.zero_grad();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().item(), 6.0);

    let mut g = Graph::new();
    let v = g.param(Tensor::<f64>::zeros(&[2]));
    let y = g.silu(v).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shared_subexpressions_accumulate() {
    // d/dx sum(x * x + x) = 2x + 1
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.add(sq, x).unwrap();
    let l = g.sum(s).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, -3.0, 2.0]);
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::scalar(1e300));
    assert!(matches!(g.mul(a, a), Err(Error::NonFinite(_))));
    let z = g.constant(Tensor::scalar(-1.0));
    assert!(g.sqrt(z).is_err());
}

#[test]
fn grad_check_examples() {
    let mut rng = Rng::new(6);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let err = grad_check(|g, v| g.sum(v), &x, 1e-3).unwrap();
    assert!(err < 1e-12, "{err}");

    let w = randn(&mut rng, &[2, 3, 3, 3]);
    let target = randn(&mut rng, &[2, 2, 4, 4]);
    let err = grad_check(
        |g, v| {
            let wv = g.constant(w.clone());
            let y = g.conv2d(v, wv, None, 1, 1)?;
            let t = g.constant(target.clone());
            g.mse(y, t)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");

    let wrong = UnaryFn { name: "wrong_sin", f: f64::sin, df: |x: f64| x.cos() + 0.5 };
    let err = grad_check(
        |g, v| {
            let y = g.map_unary(v, wrong)?;
            g.sum(y)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err > 1e-2, "{err}");
}

#[test]
fn grad_check_detects_non_determinism() {
    let calls = std::cell::Cell::new(0u32);
    let x = Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap();
    let r = grad_check(
        |g, v| {
            calls.set(calls.get() + 1);
            let s = g.sum(v)?;
            g.affine(s, 1.0, calls.get() as f64)
        },
        &x,
        1e-3,
    );
    assert!(matches!(r, Err(Error::NonDeterministic)));
    assert!(grad_check(|g, v| g.sum(v), &x, 0.0).is_err());
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let run = || {
        let mut rng = Rng::new(9);
        let x: Tensor<f32> = rng.normal_tensor(&[2, 4, 8, 8]);
        let w: Tensor<f32> = rng.normal_tensor(&[8, 4, 3, 3]);
        let gamma: Tensor<f32> = rng.normal_tensor(&[8]);
        let mut g = Graph::new();
        let (xv, wv) = (g.param(x), g.param(w));
        let gv = g.param(gamma);
        let bv = g.constant(Tensor::zeros(&[8]));
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = g.group_norm(y, 4, gv, bv, 1e-5).unwrap();
        let y = g.silu(y).unwrap();
        let l = g.mean(y).unwrap();
        g.backward(l).unwrap();
        (g.value(y).clone(), g.grad(wv).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bit_eq(&b));
    assert!(ga.bit_eq(&gb));
}

#[test]
fn tensor_construction_contract() {
    assert!(Tensor::<f64>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::<f64>::from_vec(&[2, 0], vec![]).is_err());
    let t = Tensor::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
    assert_eq!(t.len(), 6);
    assert_eq!(t.reshape(&[3, 2]).unwrap().shape(), &[3, 2]);
    assert!(t.reshape(&[4]).is_err());
    let rows = t.slice_outer(1, 1).unwrap();
    assert_eq!(rows.data(), &[3.0, 4.0, 5.0]);
    let stacked = Tensor::concat_outer(&[rows.clone(), rows]).unwrap();
    assert_eq!(stacked.shape(), &[2, 3]);
}
