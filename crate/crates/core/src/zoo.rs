//! Seeded synthetic models with random weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, GraphBuilder};
use crate::pruner::SamplingConfig;
use crate::sampler::Dataset;

/// First deep layer of [`vgg16`].
pub const VGG16_BOUNDARY: &str = "conv4_1";

/// The final-stage convs of [`vgg16`].
pub fn vgg16_final_stage() -> Vec<String> {
    ["conv5_1", "conv5_2", "conv5_3"].map(String::from).to_vec()
}

/// VGG-16 layout on a 3×224×224 input: thirteen 3×3 convs in five stages,
/// max pooling between stages, global average pooling and a 10-way Dense.
pub fn vgg16(seed: u64) -> Graph {
    let stages: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
    let mut b = GraphBuilder::new(3, 224, 224, seed);
    let mut x = "input".to_string();
    for (s, widths) in stages.iter().enumerate() {
        for (i, &w) in widths.iter().enumerate() {
            let c = b.conv(&format!("conv{}_{}", s + 1, i + 1), &x, w, 3, 1, 1);
            x = b.relu(&format!("relu{}_{}", s + 1, i + 1), &c);
        }
        x = b.maxpool(&format!("pool{}", s + 1), &x, 2, 2);
    }
    let gap = b.avgpool("gap", &x, 7, 7);
    let fc = b.dense("fc", &gap, 10);
    b.output(&fc);
    b.build().expect("vgg16 is well formed")
}

/// Six 3×3 convs on 3×16×16 inputs with two pooling stages.
pub fn plain_cnn(seed: u64) -> Graph {
    let mut b = GraphBuilder::new(3, 16, 16, seed);
    let widths = [16, 24, 32, 32, 48, 48];
    let mut x = "input".to_string();
    for (i, &w) in widths.iter().enumerate() {
        let c = b.conv(&format!("conv{}", i + 1), &x, w, 3, 1, 1);
        x = b.relu(&format!("relu{}", i + 1), &c);
        if i == 1 || i == 3 {
            x = b.maxpool(&format!("pool{}", i / 2 + 1), &x, 2, 2);
        }
    }
    let gap = b.avgpool("gap", &x, 4, 4);
    let fc = b.dense("fc", &gap, 10);
    b.output(&fc);
    b.build().expect("plain cnn is well formed")
}

/// Appends a bottleneck block (1×1 reduce, 3×3, 1×1 expand) on `from` and
/// returns the id of its final ReLU. Branch convs are
/// `{prefix}_branch2a/2b/2c`; a projection shortcut is `{prefix}_branch1`.
pub fn bottleneck(b: &mut GraphBuilder, prefix: &str, from: &str, mid: usize, out: usize, projection: bool) -> String {
    let a = b.conv(&format!("{prefix}_branch2a"), from, mid, 1, 1, 0);
    let ra = b.relu(&format!("{prefix}_branch2a_relu"), &a);
    let m = b.conv(&format!("{prefix}_branch2b"), &ra, mid, 3, 1, 1);
    let rm = b.relu(&format!("{prefix}_branch2b_relu"), &m);
    let c = b.conv(&format!("{prefix}_branch2c"), &rm, out, 1, 1, 0);
    let short = if projection {
        b.conv(&format!("{prefix}_branch1"), from, out, 1, 1, 0)
    } else {
        from.to_string()
    };
    let s = b.add(&format!("{prefix}_sum"), &c, &short);
    b.relu(&format!("{prefix}_relu"), &s)
}

/// Two stem convs followed by one identity bottleneck block `res`, with
/// widths drawn from `seed`. The second stem conv is prunable, so the
/// block's shortcut input can drift from the original network.
pub fn residual_block_graph(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 2 * rng.gen_range(4..=8);
    let mid = rng.gen_range(4..=8);
    let mut b = GraphBuilder::new(3, 8, 8, seed);
    let s1 = b.conv("stem1", "input", width, 3, 1, 1);
    let r1 = b.relu("stem1_relu", &s1);
    let s2 = b.conv("stem2", &r1, width, 3, 1, 1);
    let x = b.relu("stem2_relu", &s2);
    let out = bottleneck(&mut b, "res", &x, mid, width, false);
    b.output(&out);
    b.build().expect("residual block graph is well formed")
}

/// Stem conv plus `blocks` identity bottlenecks, pooled into a 10-way Dense.
pub fn residual_net(seed: u64, blocks: usize) -> Graph {
    let mut b = GraphBuilder::new(3, 8, 8, seed);
    let s = b.conv("stem", "input", 16, 3, 1, 1);
    let mut x = b.relu("stem_relu", &s);
    for i in 0..blocks {
        x = bottleneck(&mut b, &format!("res{}", i + 1), &x, 8, 16, false);
    }
    let gap = b.avgpool("gap", &x, 8, 8);
    let fc = b.dense("fc", &gap, 10);
    b.output(&fc);
    b.build().expect("residual net is well formed")
}

/// A small conv/BN/ReLU stack with random depth, widths and input size;
/// some variants include pooling and a BN-bearing residual add.
pub fn random_bn_graph(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = rng.gen_range(6..=10);
    let depth = rng.gen_range(2..=4);
    let mut b = GraphBuilder::new(3, size, size, seed.wrapping_add(1));
    let mut x = "input".to_string();
    for i in 0..depth {
        let w = rng.gen_range(2..=8);
        let k = if rng.gen_bool(0.5) { 3 } else { 1 };
        let c = b.conv(&format!("conv{i}"), &x, w, k, 1, k / 2);
        let bn = b.batchnorm(&format!("bn{i}"), &c);
        x = b.relu(&format!("relu{i}"), &bn);
        if i == 0 && rng.gen_bool(0.5) {
            x = b.maxpool("pool", &x, 2, 2);
        }
    }
    if rng.gen_bool(0.5) {
        let w = b.channels_of(&x);
        let c = b.conv("res_conv", &x, w, 3, 1, 1);
        let bn = b.batchnorm("res_bn", &c);
        x = b.add("res_sum", &bn, &x);
    }
    b.output(&x);
    b.build().expect("random BN graph is well formed")
}

/// One prunable layer with its data.
#[derive(Debug, Clone)]
pub struct LayerInstance {
    pub graph: Graph,
    pub data: Dataset,
    /// The conv whose input channels are pruned.
    pub layer: String,
    pub sampling: SamplingConfig,
}

/// `conv1 → ReLU → conv2` on 3×8×8 inputs; `conv2` has `channels` inputs
/// and `outputs` filters. Each `conv1` filter is scaled by a factor drawn
/// from U[0.2, 2] so channels differ in importance. The sampling config
/// yields `rows` sample rows (8 per image).
pub fn single_layer_instance(seed: u64, channels: usize, outputs: usize, rows: usize) -> LayerInstance {
    let mut b = GraphBuilder::new(3, 8, 8, seed);
    let c1 = b.conv("conv1", "input", channels, 3, 1, 1);
    let r1 = b.relu("relu1", &c1);
    let c2 = b.conv("conv2", &r1, outputs, 3, 1, 1);
    b.output(&c2);
    let scales: Vec<f32> = (0..channels).map(|_| b.rng().gen_range(0.2..2.0)).collect();
    let fan = 27;
    let w = b.weight_mut("conv1");
    for (o, s) in scales.iter().enumerate() {
        for v in &mut w.data[o * fan..(o + 1) * fan] {
            *v *= s;
        }
    }
    let bias = b.weight_mut("conv1.bias");
    for (v, s) in bias.data.iter_mut().zip(&scales) {
        *v *= s;
    }
    let per_image = 8;
    let images = rows.div_ceil(per_image);
    LayerInstance {
        graph: b.build().expect("single layer instance is well formed"),
        data: Dataset::synthetic(images, 3, 8, 8, seed ^ 0x5eed),
        layer: "conv2".into(),
        sampling: SamplingConfig {
            samples_per_image: per_image,
            seed,
            ..Default::default()
        },
    }
}
