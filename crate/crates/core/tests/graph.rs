mod common;

use chanprune::graph::{
    apply_channel_prune, fold_batchnorm, infer_shapes, insert_channel_select, load_graph, save_graph,
    GraphBuilder,
};
use chanprune::infer::{conv2d, count_flops, forward, Activation};
use chanprune::sampler::Dataset;
use chanprune::{zoo, Error, Graph, Matrix, TensorShape};
use proptest::prelude::*;

/// Direct seven-loop convolution.
fn conv_oracle(x: &Activation, w: &[f32], bias: &[f32], n: usize, k: usize, stride: usize, pad: usize) -> Vec<f32> {
    let s = x.shape;
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; n * oh * ow];
    for o in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o] as f64;
                for c in 0..s.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                continue;
                            }
                            let wv = w[((o * s.c + c) * k + ky) * k + kx] as f64;
                            acc += wv * x.at(0, c, iy as usize, ix as usize) as f64;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_matches_direct_loops(
        seed in 0u64..1000,
        c in 1usize..4,
        n in 1usize..4,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        size in 4usize..8,
    ) {
        let pad = k / 2;
        let mut b = GraphBuilder::new(c, size, size, seed);
        let conv = b.conv("conv", "input", n, k, stride, pad);
        b.output(&conv);
        let g = b.build().unwrap();
        let x = Dataset::synthetic(1, c, size, size, seed + 1).images.remove(0);
        let got = conv2d(&x, g.conv_attrs("conv").unwrap(), &g.weight("conv").unwrap().data,
            Some(&g.weight("conv.bias").unwrap().data)).unwrap();
        let want = conv_oracle(&x, &g.weight("conv").unwrap().data, &g.weight("conv.bias").unwrap().data, n, k, stride, pad);
        for (a, b) in got.data.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn folding_preserves_outputs(seed in 0u64..500) {
        let g = zoo::random_bn_graph(seed);
        let folded = fold_batchnorm(&g).unwrap();
        prop_assert!(folded.nodes().all(|n| n.op.kind_name() != "BatchNorm"));
        let s = g.input_shape(1);
        let x = &Dataset::synthetic(1, s.c, s.h, s.w, seed).images[0];
        let a = &forward(&g, x, &[]).unwrap()["output"];
        let b = &forward(&folded, x, &[]).unwrap()["output"];
        prop_assert_eq!(a.shape, b.shape);
        for (p, q) in a.data.iter().zip(&b.data) {
            prop_assert!((p - q).abs() <= 1e-4);
        }
    }
}

#[test]
fn bn_fold_hand_example() {
    // One 1×1 conv, w = 2, b = 1, then BN with γ = 3, β = 0.5, μ = 1, σ² = 4 − ε.
    let mut b = GraphBuilder::new(1, 1, 1, 0);
    let c = b.conv("conv", "input", 1, 1, 1, 0);
    let bn = b.batchnorm("bn", &c);
    b.output(&bn);
    b.weight_mut("conv").data = vec![2.0];
    b.weight_mut("conv.bias").data = vec![1.0];
    b.weight_mut("bn").data = vec![3.0, 0.5, 1.0, 4.0 - 1e-5];
    let folded = fold_batchnorm(&b.build().unwrap()).unwrap();
    // s = γ/√(σ²+ε) = 1.5; w′ = 3; b′ = s·(b − μ) + β = 0.5.
    assert!((folded.weight("conv").unwrap().data[0] - 3.0).abs() < 1e-6);
    assert!((folded.weight("conv.bias").unwrap().data[0] - 0.5).abs() < 1e-6);
}

#[test]
fn shapes_flops_and_hand_counts() {
    let g = zoo::plain_cnn(0);
    let shapes = infer_shapes(&g, g.input_shape(2)).unwrap();
    assert_eq!(shapes["conv3"], TensorShape::new(2, 32, 8, 8));
    assert_eq!(shapes["output"], TensorShape::new(2, 10, 1, 1));

    let f = count_flops(&g, g.input_shape(1)).unwrap();
    // conv1: 2 · 16 · 27 · 16 · 16.
    assert_eq!(f.get("conv1"), Some(2 * 16 * 27 * 256));
    assert_eq!(f.get("relu1"), Some(16 * 256));
    assert_eq!(f.get("fc"), Some(2 * 48 * 10));
    assert_eq!(f.total, f.per_layer.iter().map(|l| l.flops).sum::<u64>());
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for g in [zoo::plain_cnn(3), zoo::residual_net(4, 2), zoo::random_bn_graph(5)] {
        let (gp, wp) = (dir.path().join("g.json"), dir.path().join("g.pkw"));
        save_graph(&g, &gp, &wp).unwrap();
        let back = load_graph(&gp, &wp).unwrap();
        assert_eq!(back.topo_order(), g.topo_order());
        for (k, t) in g.weights() {
            let u = back.weight(k).unwrap();
            assert_eq!(u.dims, t.dims);
            assert!(u.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn load_rejects_missing_and_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let gp = dir.path().join("g.json");
    let wp = dir.path().join("g.pkw");
    assert!(matches!(load_graph(&gp, &wp), Err(Error::FileNotFound(_))));
    save_graph(&zoo::plain_cnn(0), &gp, &wp).unwrap();
    let mut bytes = std::fs::read(&wp).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&wp, bytes).unwrap();
    assert!(load_graph(&gp, &wp).is_err());
}

fn first_channels_weights(g: &Graph, conv: &str, kept: &[usize]) -> Matrix {
    let w = g.conv_weight_matrix(conv).unwrap();
    let block = g.conv_attrs(conv).unwrap().kernel_area();
    let cols: Vec<usize> = kept.iter().flat_map(|&k| k * block..(k + 1) * block).collect();
    w.select_cols(&cols)
}

#[test]
fn channel_prune_drops_producer_filters() {
    let g = zoo::plain_cnn(7);
    let kept = [0, 2, 5, 9];
    let w = first_channels_weights(&g, "conv2", &kept);
    let p = apply_channel_prune(&g, "conv2", &kept, &w, None).unwrap();
    assert_eq!(p.conv_attrs("conv1").unwrap().out_channels, 4);
    assert_eq!(p.conv_attrs("conv2").unwrap().in_channels, 4);
    assert_eq!(infer_shapes(&p, p.input_shape(1)).unwrap()["output"], TensorShape::new(1, 10, 1, 1));

    // With the dropped channels zeroed in the input, the outputs agree.
    let x = &Dataset::synthetic(1, 3, 16, 16, 1).images[0];
    let a = &forward(&p, x, &["conv2"]).unwrap()["conv2"];
    let mut weights = g.weights().clone();
    let t = weights.get_mut("conv2").unwrap();
    let (n, c, k) = (t.dims[0], t.dims[1], t.dims[2] * t.dims[3]);
    for o in 0..n {
        for ch in (0..c).filter(|ch| !kept.contains(ch)) {
            t.data[(o * c + ch) * k..(o * c + ch + 1) * k].fill(0.0);
        }
    }
    let masked = Graph::new(g.nodes().cloned().collect(), g.topo_order().to_vec(), weights).unwrap();
    let b = &forward(&masked, x, &["conv2"]).unwrap()["conv2"];
    for (p, q) in a.data.iter().zip(&b.data) {
        assert!((p - q).abs() < 1e-5);
    }
}

#[test]
fn channel_select_on_shared_edge() {
    let g = zoo::residual_net(8, 1);
    let kept = [1, 4, 6];
    let p = insert_channel_select(&g, "stem_relu", "res1_branch2a", &kept).unwrap();
    assert!(p.contains("res1_branch2a_select"));
    assert_eq!(p.conv_attrs("stem").unwrap().out_channels, 16);
    assert_eq!(p.conv_attrs("res1_branch2a").unwrap().in_channels, 3);
    assert!(matches!(
        apply_channel_prune(&g, "res1_branch2a", &kept, &first_channels_weights(&g, "res1_branch2a", &kept), None),
        Err(Error::ProducerNotRemovable { .. })
    ));
}
