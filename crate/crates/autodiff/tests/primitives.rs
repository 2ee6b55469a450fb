use moct_autodiff::{
    gradcheck, AutodiffError, BatchNormState, DiffArray, GradcheckOptions, NormMode, Tape, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arr(shape: &[usize], data: &[f64]) -> DiffArray<f64> {
    DiffArray::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> DiffArray<f64> {
    let n = shape.iter().product();
    DiffArray::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap().with_grad()
}

/// Contracts an output against fixed random weights so every element of the
/// upstream gradient is distinct and non-zero.
fn probe_loss(tape: &mut Tape<f64>, out: Var, seed: u64) -> moct_autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).len();
    let w = tape.constant(&shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect())?;
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

// ---------------------------------------------------------------- conv2d

fn conv_oracle(x: &DiffArray<f64>, w: &DiffArray<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[co];
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel_returns_input() {
    let mut tape = Tape::new();
    let xdata: Vec<f64> = (0..16).map(|v| v as f64 * 0.5 - 3.0).collect();
    let x = tape.leaf(&arr(&[1, 1, 4, 4], &xdata));
    let w = tape.leaf(&arr(&[1, 1, 1, 1], &[1.0]));
    let b = tape.leaf(&arr(&[1], &[0.0]));
    let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.value(y), xdata.as_slice());
}

#[test]
fn conv_same_padding_shape() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&DiffArray::zeros(&[1, 2, 8, 8]));
    let w = tape.leaf(&DiffArray::zeros(&[4, 2, 3, 3]));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 4, 8, 8]);
}

#[test]
fn conv_ones_kernel_matches_sliding_window() {
    let x = arr(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let w = arr(&[1, 1, 3, 3], &[1.0; 9]);
    let want = conv_oracle(&x, &w, &[0.0], 1, 1);
    assert_eq!(want, vec![10.0; 4]);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
    let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
    assert_eq!(tape.value(y), want.as_slice());
}

#[test]
fn conv_matches_oracle_random_strided() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5), (1, 0, 3)] {
        let x = random(&[2, 3, 7, 6], &mut rng);
        let w = random(&[4, 3, k, k], &mut rng);
        let b: Vec<f64> = (0..4).map(|i| i as f64 * 0.1).collect();
        let want = conv_oracle(&x, &w, &b, stride, pad);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&arr(&[4], &b)));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        for (a, b) in tape.value(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&DiffArray::zeros(&[1, 3, 4, 4]));
    let w = tape.leaf(&DiffArray::zeros(&[2, 2, 3, 3]));
    let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(matches!(err, AutodiffError::Shape { op: "conv2d", .. }), "{err}");
    assert!(err.to_string().contains("3 channels"));
}

// ------------------------------------------------------------- batchnorm

#[test]
fn batchnorm_eval_identity() {
    let mut tape = Tape::new();
    let xd: Vec<f64> = (0..8).map(|v| v as f64 - 4.0).collect();
    let x = tape.leaf(&arr(&[1, 2, 2, 2], &xd));
    let g = tape.leaf(&arr(&[2], &[1.0, 1.0]));
    let b = tape.leaf(&arr(&[2], &[0.0, 0.0]));
    let state = BatchNormState::new(2);
    let (y, stats) = tape.batchnorm2d(x, g, b, &state, NormMode::Eval, 1e-5).unwrap();
    assert!(stats.is_none());
    for (a, b) in tape.value(y).iter().zip(&xd) {
        assert!((a - b).abs() <= b.abs() * 1e-5);
    }
}

#[test]
fn batchnorm_train_closed_form() {
    let eps = 1e-5;
    let mut tape = Tape::new();
    let x = tape.leaf(&arr(&[2, 1, 1, 1], &[-1.0, 1.0]));
    let g = tape.leaf(&arr(&[1], &[1.0]));
    let b = tape.leaf(&arr(&[1], &[0.0]));
    let mut state = BatchNormState::new(1);
    let y = tape.batchnorm2d_update(x, g, b, &mut state, NormMode::Train, 0.1, eps).unwrap();
    let s = 1.0 / (1.0f64 + eps).sqrt();
    assert!((tape.value(y)[0] + s).abs() < 1e-15);
    assert!((tape.value(y)[1] - s).abs() < 1e-15);
    // running var folds in the unbiased estimate 2.0
    assert!((state.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    assert_eq!(state.running_mean[0], 0.0);
}

#[test]
fn batchnorm_zero_gamma_gives_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.leaf(&random(&[2, 3, 4, 4], &mut rng));
    let g = tape.leaf(&arr(&[3], &[0.0; 3]));
    let b = tape.leaf(&arr(&[3], &[0.5, -1.0, 2.0]));
    let (y, _) = tape.batchnorm2d(x, g, b, &BatchNormState::new(3), NormMode::Train, 1e-5).unwrap();
    for (i, v) in tape.value(y).iter().enumerate() {
        assert_eq!(*v, [0.5, -1.0, 2.0][(i / 16) % 3]);
    }
}

#[test]
fn batchnorm_rejects_bad_eps_and_tiny_batch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&DiffArray::zeros(&[1, 1, 1, 1]));
    let g = tape.leaf(&DiffArray::full(&[1], 1.0));
    let b = tape.leaf(&DiffArray::zeros(&[1]));
    let st = BatchNormState::new(1);
    assert!(tape.batchnorm2d(x, g, b, &st, NormMode::Eval, 0.0).is_err());
    assert!(tape.batchnorm2d(x, g, b, &st, NormMode::Train, 1e-5).is_err());
}

// ------------------------------------------------------------ elementwise

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&arr(&[3], &[-1.0, 0.0, 2.0]).with_grad());
    let r = tape.relu(x);
    assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
    let z = tape.leaf(&DiffArray::zeros(&[3]));
    let s = tape.add(x, z).unwrap();
    assert_eq!(tape.value(s), &[-1.0, 0.0, 2.0]);
    let sc = tape.scale(x, 2.0);
    let loss = tape.sum(sc);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(&arr(&[3], &[-1.0, 0.0, 2.0]).with_grad());
    let r = tape.relu(x);
    let loss = tape.sum(r);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn add_rejects_shape_mismatch() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(&DiffArray::zeros(&[3]));
    let b = tape.leaf(&DiffArray::zeros(&[4]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.mul(a, b).is_err());
}

// --------------------------------------------------------------- maxpool

#[test]
fn maxpool_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&arr(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.maxpool2d(x).unwrap();
    assert_eq!(tape.value(y), &[4.0]);

    let c = tape.leaf(&DiffArray::full(&[1, 3, 8, 8], 7.0).with_grad());
    let p = tape.maxpool2d(c).unwrap();
    assert_eq!(tape.shape(p), &[1, 3, 4, 4]);
    assert!(tape.value(p).iter().all(|&v| v == 7.0));
    let loss = tape.sum(p);
    let g = tape.backward(loss).unwrap();
    let gx = g.get(c).unwrap();
    // tie rule: the top-left cell of each window takes the whole gradient
    for (i, &v) in gx.iter().enumerate() {
        let (y, x) = ((i % 64) / 8, i % 8);
        assert_eq!(v, if y % 2 == 0 && x % 2 == 0 { 1.0 } else { 0.0 });
    }
}

#[test]
fn maxpool_rejects_odd() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&DiffArray::zeros(&[1, 1, 3, 4]));
    assert!(tape.maxpool2d(x).is_err());
}

// ---------------------------------------------------------------- linear

#[test]
fn linear_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&arr(&[1, 2], &[1.0, 2.0]));
    let eye = tape.leaf(&arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zb = tape.leaf(&arr(&[2], &[0.0, 0.0]));
    let y = tape.linear(x, eye, Some(zb)).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0]);
    let w = tape.leaf(&arr(&[2, 2], &[1.0, 1.0, 1.0, -1.0]));
    let y = tape.linear(x, w, Some(zb)).unwrap();
    assert_eq!(tape.value(y), &[3.0, -1.0]);

    let big = tape.leaf(&DiffArray::zeros(&[5, 7, 16]));
    let w2 = tape.leaf(&DiffArray::zeros(&[8, 16]));
    let y = tape.linear(big, w2, None).unwrap();
    assert_eq!(tape.shape(y), &[5, 7, 8]);
    let w3 = tape.leaf(&DiffArray::zeros(&[8, 15]));
    assert!(tape.linear(big, w3, None).is_err());
}

// --------------------------------------------------------------- softmax

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    for (input, want) in [
        ([0.0, 0.0], [0.5, 0.5]),
        ([1000.0, 1000.0], [0.5, 0.5]),
        ([0.0, 3f64.ln()], [0.25, 0.75]),
    ] {
        let x = tape.leaf(&arr(&[2], &input));
        let y = tape.softmax(x, 0).unwrap();
        for (a, b) in tape.value(y).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let x = tape.leaf(&arr(&[2], &[0.0, 0.0]));
    assert!(tape.softmax(x, 1).is_err());
}

// ------------------------------------------------------------- attention

fn mha_oracle(x: &[f64], n: usize, d: usize, heads: usize, w: &[Vec<f64>; 4], b: &[Vec<f64>; 4]) -> Vec<f64> {
    let proj = |m: usize, src: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        let bias = |o: usize| if m == 1 { 0.0 } else { b[m][o] };
        for t in 0..n {
            for o in 0..d {
                out[t * d + o] = bias(o) + (0..d).map(|i| w[m][o * d + i] * src[t * d + i]).sum::<f64>();
            }
        }
        out
    };
    let (q, k, v) = (proj(0, x), proj(1, x), proj(2, x));
    let _ = &b[1]; // key bias is unused by the layer under test
    let dh = d / heads;
    let mut cat = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                cat[i * d + h * dh + c] = (0..n).map(|j| e[j] / z * v[j * d + h * dh + c]).sum();
            }
        }
    }
    proj(3, &cat)
}

fn mha(tape: &mut Tape<f64>, x: Var, p: &[Var], heads: usize) -> Var {
    let q = tape.linear(x, p[0], Some(p[4])).unwrap();
    // no key bias: it shifts every score in a row equally and cancels in the softmax
    let k = tape.linear(x, p[1], None).unwrap();
    let v = tape.linear(x, p[2], Some(p[6])).unwrap();
    let a = tape.attention(q, k, v, heads).unwrap();
    tape.linear(a, p[3], Some(p[7])).unwrap()
}

fn mha_params(d: usize, rng: &mut ChaCha8Rng) -> Vec<DiffArray<f64>> {
    let mut v: Vec<_> = (0..4).map(|_| random(&[d, d], rng)).collect();
    v.extend((0..4).map(|_| random(&[d], rng)));
    v[5].set_requires_grad(false);
    v
}

#[test]
fn attention_two_tokens_matches_bruteforce() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for heads in [1, 2] {
        let (n, d) = (2, 4);
        let x = random(&[n, d], &mut rng);
        let params = mha_params(d, &mut rng);
        let w: [Vec<f64>; 4] = std::array::from_fn(|i| params[i].data().to_vec());
        let b: [Vec<f64>; 4] = std::array::from_fn(|i| params[4 + i].data().to_vec());
        let want = mha_oracle(x.data(), n, d, heads, &w, &b);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let pv: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
        let y = mha(&mut tape, xv, &pv, heads);
        for (a, b) in tape.value(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_single_token_is_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 8], &mut rng);
    let params = mha_params(8, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let pv: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let y = mha(&mut tape, xv, &pv, 2);
    let v = tape.linear(xv, pv[2], Some(pv[6])).unwrap();
    let expect = tape.linear(v, pv[3], Some(pv[7])).unwrap();
    for (a, b) in tape.value(y).iter().zip(tape.value(expect)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_shape_and_head_divisibility() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&DiffArray::zeros(&[65, 32]));
    let y = tape.attention(x, x, x, 4).unwrap();
    assert_eq!(tape.shape(y), &[65, 32]);
    assert!(tape.attention(x, x, x, 3).is_err());
}

// -------------------------------------------------------------- backward

#[test]
fn backward_closed_forms() {
    let mut tape = Tape::new();
    let x = tape.leaf(&arr(&[4], &[1.0, -2.0, 0.5, 3.0]).with_grad());
    let s = tape.sum(x);
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0; 4]);
    let sq = tape.mul(x, x).unwrap();
    let s2 = tape.sum(sq);
    assert_eq!(tape.backward(s2).unwrap().get(x).unwrap(), &[2.0, -4.0, 1.0, 6.0]);
    assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn fan_out_equals_sum_of_per_use_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[3, 4], &mut rng);
    let w = random(&[4, 4], &mut rng);
    // shared: f(x) = sum(relu(x W^T) * x) uses x twice
    let mut tape = Tape::new();
    let (xv, wv) = (tape.leaf(&x), tape.leaf(&w.clone().with_grad()));
    let h = tape.linear(xv, wv, None).unwrap();
    let r = tape.relu(h);
    let m = tape.mul(r, xv).unwrap();
    let loss = tape.sum(m);
    let shared = tape.backward(loss).unwrap().get(xv).unwrap().to_vec();
    // cloned oracle: two independent copies of x, gradients added
    let mut t2 = Tape::new();
    let (xa, xb, wv) = (t2.leaf(&x), t2.leaf(&x), t2.leaf(&w));
    let h = t2.linear(xa, wv, None).unwrap();
    let r = t2.relu(h);
    let m = t2.mul(r, xb).unwrap();
    let loss = t2.sum(m);
    let g = t2.backward(loss).unwrap();
    let (ga, gb) = (g.get(xa).unwrap(), g.get(xb).unwrap());
    for i in 0..shared.len() {
        assert!((shared[i] - (ga[i] + gb[i])).abs() < 1e-12);
    }
}

#[test]
fn tape_is_topologically_ordered_and_intact_after_backward() {
    let mut tape = Tape::new();
    let x = tape.leaf(&arr(&[2], &[1.0, 2.0]).with_grad());
    let y = tape.scale(x, 3.0);
    let z = tape.sum(y);
    let before = tape.len();
    tape.backward(z).unwrap();
    tape.backward(z).unwrap();
    assert_eq!(tape.len(), before);
    for i in 0..tape.len() {
        let v = Var::clone(&[x, y, z][i]);
        assert!(tape.inputs_of(v).iter().all(|inp| inp.index() < v.index()));
    }
    assert_eq!(tape.op_kinds(), vec!["leaf", "scale", "sum"]);
}

#[test]
fn enroll_and_absorb() {
    let mut p = arr(&[2], &[1.0, 2.0]).with_grad();
    let mut tape = Tape::new();
    let v = tape.enroll(&mut p);
    assert_eq!(p.node(), Some(v));
    let s = tape.mul(v, v).unwrap();
    let l = tape.sum(s);
    let g = tape.backward(l).unwrap();
    assert!(p.absorb_grad(&g));
    assert_eq!(p.grad().unwrap(), &[2.0, 4.0]);
    assert_eq!(p.node(), None);
}

// ------------------------------------------------------------- gradcheck

fn check(inputs: &[DiffArray<f64>], seed: u64, f: impl Fn(&mut Tape<f64>, &[Var]) -> moct_autodiff::Result<Var>) -> f64 {
    gradcheck(inputs, |t, v| { let out = f(t, v)?; probe_loss(t, out, seed) }, &GradcheckOptions::default()).unwrap()
}

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

#[test]
fn gradcheck_conv2d() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[2, 3, 6, 6], &mut rng), random(&[4, 3, 3, 3], &mut rng), random(&[4], &mut rng)];
        let stride = 1 + (seed as usize % 2);
        let err = check(&inputs, seed, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, 1));
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_batchnorm_both_modes() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[2, 3, 3, 3], &mut rng), random(&[3], &mut rng), random(&[3], &mut rng)];
        let mut st = BatchNormState::new(3);
        st.running_mean = vec![0.1, -0.2, 0.3];
        st.running_var = vec![0.5, 1.5, 2.0];
        for mode in [NormMode::Train, NormMode::Eval] {
            let err = check(&inputs, seed, |t, v| Ok(t.batchnorm2d(v[0], v[1], v[2], &st, mode, 1e-5)?.0));
            assert!(err < TOL, "seed {seed} {mode:?}: {err}");
        }
    }
}

#[test]
fn gradcheck_elementwise_and_shape_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[2, 3, 4], &mut rng), random(&[2, 3, 4], &mut rng), random(&[3, 4], &mut rng), random(&[2, 1, 4], &mut rng)];
        let err = check(&inputs, seed, |t, v| {
            let r = t.relu(v[0]);
            let m = t.mul(r, v[1])?;
            let s = t.scale(m, 1.7);
            let a = t.add(s, v[0])?;
            let b = t.add_broadcast(a, v[2])?;
            let c = t.concat(&[v[3], b], 1)?;
            let sl = t.slice(c, 1, 1, 3)?;
            let ar = t.add_to_rows(c, sl, 1)?;
            let g = t.gather(ar, &[4, 8], (0..32).map(|i| (i * 5) % 32).collect())?;
            t.reshape(g, &[32])
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_maxpool() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[2, 2, 4, 6], &mut rng)];
        let err = check(&inputs, seed, |t, v| t.maxpool2d(v[0]));
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_linear_layernorm_softmax() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[3, 5, 6], &mut rng), random(&[4, 6], &mut rng), random(&[4], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)];
        let err = check(&inputs, seed, |t, v| {
            let n = t.layernorm(v[0], v[3], v[4], 1e-5)?;
            let l = t.linear(n, v[1], Some(v[2]))?;
            let p = t.softmax(l, 2)?;
            // other axes straight on the input: a shift shared along the
            // normalized axis would cancel and leave structurally zero gradients
            let q = t.softmax(v[0], (seed % 2) as usize)?;
            let p = t.reshape(p, &[60])?;
            let q = t.reshape(q, &[90])?;
            t.concat(&[p, q], 0)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_multihead_attention() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = vec![random(&[5, 8], &mut rng)];
        inputs.extend(mha_params(8, &mut rng));
        let err = check(&inputs, seed, |t, v| Ok(mha(t, v[0], &v[1..], 2)));
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_losses() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[2, 3, 4, 4], &mut rng)];
        let labels: Vec<usize> = (0..32).map(|_| rng.random_range(0..3)).collect();
        let mut onehot = vec![0.0; 96];
        for (i, &l) in labels.iter().enumerate() {
            onehot[((i / 16) * 3 + l) * 16 + i % 16] = 1.0;
        }
        let err = check(&inputs, seed, |t, v| {
            let ce = t.cross_entropy(v[0], &labels)?;
            let p = t.softmax(v[0], 1)?;
            let dl = t.soft_dice(p, &onehot, 1.0)?;
            t.add(ce, dl)
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_detects_broken_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs = [random(&[6], &mut rng)];
    let err = gradcheck(
        &inputs,
        |t, v| {
            let x = t.value(v[0]).to_vec();
            let y: Vec<f64> = x.iter().map(|a| a * a).collect();
            // wrong: claims dy/dx = x instead of 2x
            let out = t.custom(&[v[0]], &[6], y, |ins, _, g| vec![ins[0].iter().zip(g).map(|(a, b)| a * b).collect()])?;
            Ok(t.sum(out))
        },
        &GradcheckOptions::default(),
    )
    .unwrap();
    assert!(err > 0.1);
}

#[test]
fn one_sided_option_still_detects_broken_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs = [random(&[6], &mut rng)];
    let opts = GradcheckOptions { one_sided_at_kinks: true, ..Default::default() };
    let err = gradcheck(
        &inputs,
        |t, v| {
            let y: Vec<f64> = t.value(v[0]).iter().map(|a| a * a).collect();
            let out = t.custom(&[v[0]], &[6], y, |ins, _, g| vec![ins[0].iter().zip(g).map(|(a, b)| a * b).collect()])?;
            Ok(t.sum(out))
        },
        &opts,
    )
    .unwrap();
    assert!(err > 0.1);
}

#[test]
fn one_sided_option_handles_a_kink_inside_the_step() {
    // 3e-6 sits inside the 1e-5 central window of relu's kink.
    let inputs = [DiffArray::new(&[2], vec![3e-6, 0.5]).unwrap().with_grad()];
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let r = t.relu(v[0]);
        Ok(t.sum(r))
    };
    let central = gradcheck(&inputs, f, &GradcheckOptions::default()).unwrap();
    assert!(central > 0.1, "{central}");
    let opts = GradcheckOptions { one_sided_at_kinks: true, ..Default::default() };
    assert!(gradcheck(&inputs, f, &opts).unwrap() < 1e-9);
}

#[test]
fn kinks_on_both_sides_are_retried_at_a_smaller_step() {
    // 3 relu(x - 4e-6) + relu(-x - 4e-6) at x = 0: flat, but both kinks lie inside a 1e-5 window.
    let inputs = [DiffArray::new(&[1], vec![0.0]).unwrap().with_grad()];
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let c = t.constant(&[1], vec![-4e-6])?;
        let up = t.add(v[0], c)?;
        let up = t.relu(up);
        let up = t.scale(up, 3.0);
        let neg = t.scale(v[0], -1.0);
        let down = t.add(neg, c)?;
        let down = t.relu(down);
        let y = t.add(up, down)?;
        Ok(t.sum(y))
    };
    assert!(gradcheck(&inputs, f, &GradcheckOptions::default()).unwrap() > 0.5);
    let opts = GradcheckOptions { one_sided_at_kinks: true, ..Default::default() };
    assert!(gradcheck(&inputs, f, &opts).unwrap() < 1e-9);
}

#[test]
fn operations_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&random(&[2, 3, 8, 8], &mut rng).cast());
        let w = tape.leaf(&random(&[4, 3, 3, 3], &mut rng).cast::<f32>().with_grad());
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let p = tape.maxpool2d(y).unwrap();
        let s = tape.softmax(p, 1).unwrap();
        let l = tape.sum(s);
        let l2 = tape.mul(s, s).unwrap();
        let l2 = tape.sum(l2);
        let g = tape.backward(l2).unwrap();
        (tape.value(l).to_vec(), g.get(w).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
