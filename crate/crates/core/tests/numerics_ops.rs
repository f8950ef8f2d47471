use diffkan_core::numerics::gradcheck::check_gradients;
use diffkan_core::numerics::{Attention2d, Ctx, Mode, ParamBuilder, ParamStore, Tape, Tensor};
use diffkan_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for p in 0..kh {
                            for q in 0..kw {
                                let r = (i * stride + p) as isize - pad as isize;
                                let s = (j * stride + q) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((b * cin + c) * h + r as usize) * w + s as usize]
                                    * k.data()[((o * cin + c) * kh + p) * kw + q];
                            }
                        }
                    }
                    out[((b * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out).unwrap()
}

fn conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let tape = Tape::new();
    let y = tape.constant(x.clone()).conv2d(tape.constant(k.clone()), stride, pad).unwrap();
    (*y.value()).clone()
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::from_fn(vec![1, 1, 3, 3], |i| i as f64 * 0.3 - 1.0);
    let y = conv(&x, &Tensor::ones(vec![1, 1, 1, 1]), 1, 0);
    assert_eq!(y, x);
}

#[test]
fn conv_constant_input() {
    let y = conv(&Tensor::full(vec![1, 1, 5, 5], 7.0), &Tensor::ones(vec![1, 1, 3, 3]), 1, 0);
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 63.0));
}

#[test]
fn conv_matches_nested_loops() {
    let mut r = rng(3);
    let x = Tensor::randn(vec![2, 3, 8, 8], &mut r);
    let k = Tensor::randn(vec![4, 3, 3, 3], &mut r);
    for (stride, pad) in [(1, 0), (1, 1), (1, 2)] {
        let fast = conv(&x, &k, stride, pad);
        let slow = naive_conv(&x, &k, stride, pad);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) < 1e-10);
    }
}

#[test]
fn conv_shape_errors_name_axes() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    match x.conv2d(k, 1, 1) {
        Err(Error::Dimension { axes, .. }) => assert!(axes.contains("axis 1")),
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let eye = tape.constant(Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let b = Tensor::from_fn(vec![3, 2], |i| i as f64 - 2.5);
    let y = eye.matmul(tape.constant(b.clone())).unwrap();
    assert_eq!(*y.value(), b);

    let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = tape.constant(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap());
    assert_eq!(a.matmul(c).unwrap().value().data(), &[17.0, 39.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(5);
    let a = Tensor::randn(vec![7, 5], &mut r);
    let b = Tensor::randn(vec![5, 4], &mut r);
    let tape = Tape::new();
    let y = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
    for i in 0..7 {
        for j in 0..4 {
            let expect: f64 = (0..5).map(|k| a.data()[i * 5 + k] * b.data()[k * 4 + j]).sum();
            assert!((y.value().data()[i * 4 + j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_inner_mismatch_is_dimension_error() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(a.matmul(b), Err(Error::Dimension { .. })));
}

fn build_attention(seed: u64, channels: usize, heads: usize) -> (ParamStore, Attention2d) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let attn = {
        let mut pb = ParamBuilder::new(&mut store, &mut r);
        Attention2d::new(&mut pb.sub("attn"), channels, heads).unwrap()
    };
    (store, attn)
}

fn run_attention(store: &ParamStore, attn: &Attention2d, x: &Tensor) -> Tensor {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, Mode::Eval);
    let y = attn.forward(&ctx, ctx.constant(x.clone())).unwrap();
    (*y.value()).clone()
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let mut pb = ParamBuilder::new(&mut store, &mut r);
    assert!(matches!(Attention2d::new(&mut pb, 6, 4), Err(Error::Config(_))));
}

#[test]
fn attention_zero_output_projection_is_identity() {
    let (mut store, attn) = build_attention(1, 4, 2);
    for id in [attn.output.weight, attn.output.bias.unwrap()] {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape)).unwrap();
    }
    let x = Tensor::randn(vec![2, 4, 3, 3], &mut rng(2));
    assert_eq!(run_attention(&store, &attn, &x), x);
}

fn linear(store: &ParamStore, l: &diffkan_core::numerics::Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(l.weight).data();
    let b = store.get(l.bias.unwrap()).data();
    (0..l.out_features)
        .map(|o| b[o] + (0..l.in_features).map(|i| w[o * l.in_features + i] * x[i]).sum::<f64>())
        .collect()
}

#[test]
fn attention_single_token_is_input_plus_projected_value() {
    let (store, attn) = build_attention(4, 4, 1);
    let x = Tensor::randn(vec![1, 4, 1, 1], &mut rng(5));
    let y = run_attention(&store, &attn, &x);
    let v = linear(&store, &attn.value, x.data());
    let o = linear(&store, &attn.output, &v);
    for c in 0..4 {
        assert!((y.data()[c] - (x.data()[c] + o[c])).abs() < 1e-12);
    }
}

#[test]
fn attention_matches_explicit_loops() {
    let (store, attn) = build_attention(6, 4, 1);
    let x = Tensor::randn(vec![1, 4, 3, 3], &mut rng(7));
    let y = run_attention(&store, &attn, &x);
    let tokens: Vec<Vec<f64>> = (0..9).map(|p| (0..4).map(|c| x.data()[c * 9 + p]).collect()).collect();
    let q: Vec<_> = tokens.iter().map(|t| linear(&store, &attn.query, t)).collect();
    let k: Vec<_> = tokens.iter().map(|t| linear(&store, &attn.key, t)).collect();
    let v: Vec<_> = tokens.iter().map(|t| linear(&store, &attn.value, t)).collect();
    for p in 0..9 {
        let scores: Vec<f64> = (0..9)
            .map(|s| (0..4).map(|d| q[p][d] * k[s][d]).sum::<f64>() / 2.0)
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mixed: Vec<f64> = (0..4).map(|d| (0..9).map(|s| e[s] / z * v[s][d]).sum()).collect();
        let out = linear(&store, &attn.output, &mixed);
        for c in 0..4 {
            assert!((y.data()[c * 9 + p] - (tokens[p][c] + out[c])).abs() < 1e-8);
        }
    }
}

#[test]
fn repeated_forward_is_bit_identical() {
    let (store, attn) = build_attention(8, 4, 2);
    let x = Tensor::randn(vec![1, 4, 2, 3], &mut rng(9));
    assert_eq!(run_attention(&store, &attn, &x), run_attention(&store, &attn, &x));
}

#[test]
fn composite_gradcheck() {
    let mut r = rng(10);
    let x = Tensor::randn(vec![2, 2, 5, 5], &mut r);
    let k = Tensor::randn(vec![3, 2, 3, 3], &mut r).map(|v| v * 0.3);
    let w = Tensor::randn(vec![75, 4], &mut r).map(|v| v * 0.2);
    let report = check_gradients(
        |_, v| {
            let y = v[0].conv2d(v[1], 1, 1)?.silu()?.layer_norm(3, 1e-5)?;
            y.reshape(&[2, 75])?.matmul(v[2])?.square()?.mean()
        },
        &[x, k, w],
        1e-5,
        40,
        &mut r,
    )
    .unwrap();
    assert!(report.rel_error < 1e-4, "rel error {}", report.rel_error);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let x = Tensor::randn(vec![1, 2, 6, 6], &mut r);
        let y = Tensor::randn(vec![1, 2, 6, 6], &mut r);
        let k = Tensor::randn(vec![3, 2, 3, 3], &mut r);
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = conv(&mix, &k, 1, 1);
        let rhs = conv(&x, &k, 1, 1).zip_map(&conv(&y, &k, 1, 1), |p, q| a * p + b * q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }
}
