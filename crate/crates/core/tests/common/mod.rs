#![allow(dead_code)]

use fiberfill::tensor::{ConvSpec, Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Direct seven-loop convolution with TensorFlow-style "same" padding.
/// Input `[N,X,Y,Z,Ci]`, weights `[K,K,K,Ci,Co]`.
pub fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], k: usize, s: usize, d: usize) -> Tensor<f64> {
    let xs = x.shape();
    let (n, ci, co) = (xs[0], xs[4], w.shape()[4]);
    let dims = [xs[1], xs[2], xs[3]];
    let out: Vec<usize> = dims.iter().map(|e| e.div_ceil(s)).collect();
    let pad: Vec<i64> = (0..3)
        .map(|a| {
            let need = (out[a] as i64 - 1) * s as i64 + (k as i64 - 1) * d as i64 + 1 - dims[a] as i64;
            need.max(0) / 2
        })
        .collect();
    let mut y = vec![0.0; n * out[0] * out[1] * out[2] * co];
    for bi in 0..n {
        for ox in 0..out[0] {
            for oy in 0..out[1] {
                for oz in 0..out[2] {
                    for c in 0..co {
                        let mut acc = b[c];
                        for kx in 0..k {
                            for ky in 0..k {
                                for kz in 0..k {
                                    let ix = (ox * s + kx * d) as i64 - pad[0];
                                    let iy = (oy * s + ky * d) as i64 - pad[1];
                                    let iz = (oz * s + kz * d) as i64 - pad[2];
                                    let inside = |v: i64, e: usize| v >= 0 && (v as usize) < e;
                                    if !(inside(ix, dims[0]) && inside(iy, dims[1]) && inside(iz, dims[2])) {
                                        continue;
                                    }
                                    for cc in 0..ci {
                                        let xi = ((((bi * dims[0]) + ix as usize) * dims[1] + iy as usize) * dims[2] + iz as usize) * ci + cc;
                                        let wi = (((kx * k + ky) * k + kz) * ci + cc) * co + c;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        y[(((bi * out[0] + ox) * out[1] + oy) * out[2] + oz) * co + c] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, out[0], out[1], out[2], co], y).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Fast convolution through the graph.
pub fn graph_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: ConvSpec) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(Tensor::from_vec(b.to_vec())));
    let y = g.conv3d(xv, wv, bv, &spec).unwrap();
    g.value(y).clone()
}

/// Largest elementwise `|a - b| / max(|a|, |b|, 1)`.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0)).fold(0.0, f64::max)
}

/// The (kernel, stride, dilation) combinations of the network layers.
pub const LAYER_CONVS: [(usize, usize, usize); 5] = [(3, 1, 1), (3, 2, 1), (3, 1, 2), (3, 1, 4), (1, 2, 1)];

/// Also covers the K1S1 output heads.
pub fn all_layer_convs() -> Vec<(usize, usize, usize)> {
    let mut v = LAYER_CONVS.to_vec();
    v.push((1, 1, 1));
    v
}

/// Runs `count` random convolutions per layer type against the oracle and
/// returns the worst relative difference.
pub fn conv_oracle_sweep(rng: &mut ChaCha8Rng, count: usize) -> f64 {
    let mut worst = 0.0f64;
    let kinds = all_layer_convs();
    for i in 0..count {
        let (k, s, d) = kinds[i % kinds.len()];
        let dims: Vec<usize> = (0..3).map(|_| rng.gen_range(1..=7)).collect();
        let (n, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let x = random_tensor(rng, &[n, dims[0], dims[1], dims[2], ci]);
        let w = random_tensor(rng, &[k, k, k, ci, co]);
        let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = graph_conv3d(&x, &w, &b, ConvSpec::new(k, co, s).dilated(d));
        let slow = naive_conv3d(&x, &w, &b, k, s, d);
        assert_eq!(fast.shape(), slow.shape(), "K{k}S{s}D{d} on {dims:?}");
        worst = worst.max(max_rel_diff(fast.data(), slow.data()));
    }
    worst
}
