//! Bundled networks and generators (ResNet, random fan/join nets, uniform chains).

use rand::seq::SliceRandom;
use rand::Rng;

use crate::netgraph::{parse_network, JoinMode, LayerId, LayerKind, LayerSpec, NetworkDef, ShapeParams};

pub const ALEXNET: &str = include_str!("../fixtures/alexnet.net");
pub const FAN12: &str = include_str!("../fixtures/fan12.net");
pub const NESTED_FAN10: &str = include_str!("../fixtures/nested_fan10.net");

pub fn alexnet() -> NetworkDef {
    parse_network(ALEXNET).expect("bundled fixture parses")
}

pub fn fan12() -> NetworkDef {
    parse_network(FAN12).expect("bundled fixture parses")
}

pub fn nested_fan10() -> NetworkDef {
    parse_network(NESTED_FAN10).expect("bundled fixture parses")
}

/// Counted depth of a bottleneck ResNet: three convolutions per block plus
/// the stem convolution and the classifier.
pub fn resnet_depth(blocks: [usize; 4]) -> usize {
    3 * blocks.iter().sum::<usize>() + 2
}

/// Bottleneck ResNet for 224x224 inputs with `blocks[k]` blocks in stage k.
/// The first block of every stage uses a projection shortcut.
pub fn resnet_text(blocks: [usize; 4]) -> String {
    let mut out = String::new();
    let mut edges = String::new();
    let layer = |out: &mut String, name: &str, spec: &str| {
        out.push_str(&format!("layer {name} {spec}\n"));
    };
    let mut edge = |a: &str, b: &str| edges.push_str(&format!("edge {a} {b}\n"));
    out.push_str(&format!("# bottleneck resnet, stages {blocks:?}, depth {}\n", resnet_depth(blocks)));
    layer(&mut out, "data", "DATA c=3 h=224 w=224");
    layer(&mut out, "conv1", "CONV out=64 k=7 s=2 p=3");
    layer(&mut out, "bn1", "BN");
    layer(&mut out, "relu1", "ACT");
    layer(&mut out, "pool1", "POOL k=3 s=2 p=1");
    edge("data", "conv1");
    edge("conv1", "bn1");
    edge("bn1", "relu1");
    edge("relu1", "pool1");
    let mut x = "pool1".to_string();
    for (stage, &n) in blocks.iter().enumerate() {
        let mid = 64u64 << stage;
        for b in 0..n {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let p = format!("s{}b{}", stage + 1, b + 1);
            let convs = [
                (format!("{p}_conv_a"), format!("CONV out={mid} k=1 s={stride}")),
                (format!("{p}_bn_a"), "BN".to_string()),
                (format!("{p}_relu_a"), "ACT".to_string()),
                (format!("{p}_conv_b"), format!("CONV out={mid} k=3 p=1")),
                (format!("{p}_bn_b"), "BN".to_string()),
                (format!("{p}_relu_b"), "ACT".to_string()),
                (format!("{p}_conv_c"), format!("CONV out={} k=1", 4 * mid)),
                (format!("{p}_bn_c"), "BN".to_string()),
            ];
            let mut prev = x.clone();
            for (name, spec) in &convs {
                layer(&mut out, name, spec);
                edge(&prev, name);
                prev = name.clone();
            }
            let join = format!("{p}_add");
            layer(&mut out, &join, "JOIN mode=add");
            edge(&prev, &join);
            if b == 0 {
                let proj = format!("{p}_proj");
                let proj_bn = format!("{p}_proj_bn");
                layer(&mut out, &proj, &format!("CONV out={} k=1 s={stride}", 4 * mid));
                layer(&mut out, &proj_bn, "BN");
                edge(&x, &proj);
                edge(&proj, &proj_bn);
                edge(&proj_bn, &join);
            } else {
                edge(&x, &join);
            }
            let relu = format!("{p}_relu");
            layer(&mut out, &relu, "ACT");
            edge(&join, &relu);
            x = relu;
        }
    }
    layer(&mut out, "pool5", "POOL global=1");
    layer(&mut out, "fc", "FC out=1000");
    layer(&mut out, "softmax", "SOFTMAX");
    edge(&x, "pool5");
    edge("pool5", "fc");
    edge("fc", "softmax");
    out.push_str(&edges);
    out
}

pub fn resnet(blocks: [usize; 4]) -> NetworkDef {
    parse_network(&resnet_text(blocks)).expect("generated resnet parses")
}

struct Builder {
    specs: Vec<LayerSpec>,
    edges: Vec<(LayerId, LayerId)>,
    chw: Vec<(u64, u64, u64)>,
}

impl Builder {
    fn add(&mut self, kind: LayerKind, params: ShapeParams, inputs: &[LayerId], chw: (u64, u64, u64)) -> LayerId {
        let id = self.specs.len();
        self.specs.push(LayerSpec::new(format!("{}{}", kind.as_str().to_ascii_lowercase(), id), kind, params));
        for &i in inputs {
            self.edges.push((i, id));
        }
        self.chw.push(chw);
        id
    }

    fn finish(self) -> NetworkDef {
        NetworkDef::new(self.specs, &self.edges).expect("generator emits valid networks")
    }
}

/// One layer after `x` that keeps height and width; keeps channels too
/// unless `free_channels`.
fn shape_keeping_layer<R: Rng>(rng: &mut R, b: &mut Builder, x: LayerId, free_channels: bool) -> LayerId {
    let (c, h, w) = b.chw[x];
    match rng.gen_range(0..6) {
        0 => {
            let out = if free_channels { rng.gen_range(1..=8) } else { c };
            let k = *[1u64, 3].choose(rng).unwrap();
            b.add(LayerKind::Conv, ShapeParams::Conv { out, kernel: k, stride: 1, pad: k / 2 }, &[x], (out, h, w))
        }
        1 => b.add(LayerKind::Pool, ShapeParams::Pool { kernel: 3, stride: 1, pad: 1, global: false }, &[x], (c, h, w)),
        2 => b.add(LayerKind::Act, ShapeParams::None, &[x], (c, h, w)),
        3 => b.add(LayerKind::Lrn, ShapeParams::None, &[x], (c, h, w)),
        4 => b.add(LayerKind::Bn, ShapeParams::None, &[x], (c, h, w)),
        _ => b.add(LayerKind::Dropout, ShapeParams::None, &[x], (c, h, w)),
    }
}

/// Fork at `x` into two or three branches and join them, adding at most
/// `budget` layers (join included). Needs `budget >= 2`. With
/// `keep_channels` the join output has the channels of `x`.
fn fork_join<R: Rng>(rng: &mut R, b: &mut Builder, x: LayerId, budget: usize, nest: bool, keep_channels: bool) -> LayerId {
    let room = budget - 1;
    let branches = rng.gen_range(2..=3).min(room + 1);
    // Concat branches each need a layer; add allows one identity branch.
    let concat = !keep_channels && room >= branches && rng.gen_bool(0.5);
    let mut lens = Vec::with_capacity(branches);
    let mut used = 0;
    let mut identity = false;
    for j in 0..branches {
        let rest = branches - j - 1;
        let min_rest = if concat || identity { rest } else { rest.saturating_sub(1) };
        let max_len = (room - used - min_rest).min(4);
        let min_len = usize::from(concat || identity);
        let len = rng.gen_range(min_len..=max_len.max(min_len));
        identity |= len == 0;
        used += len;
        lens.push(len);
    }
    let mut ends = Vec::new();
    for len in lens {
        let mut cur = x;
        let mut k = 0;
        while k < len {
            if nest && len - k >= 3 && rng.gen_bool(0.3) {
                let before = b.specs.len();
                cur = fork_join(rng, b, cur, len - k, false, !concat);
                k += b.specs.len() - before;
            } else {
                cur = shape_keeping_layer(rng, b, cur, concat);
                k += 1;
            }
        }
        ends.push(cur);
    }
    let (c0, h, w) = b.chw[ends[0]];
    let c = if concat { ends.iter().map(|&e| b.chw[e].0).sum() } else { c0 };
    let mode = if concat { JoinMode::Concat } else { JoinMode::Add };
    b.add(LayerKind::Join, ShapeParams::Join { mode }, &ends, (c, h, w))
}

/// Random connected fan/join network with at most `max_layers` layers,
/// ending in a SOFTMAX layer.
pub fn random_network<R: Rng>(rng: &mut R, max_layers: usize) -> NetworkDef {
    assert!(max_layers >= 3);
    let target = rng.gen_range(3..=max_layers);
    let mut b = Builder { specs: Vec::new(), edges: Vec::new(), chw: Vec::new() };
    let c = rng.gen_range(1..=8);
    let hw = *[4u64, 8, 16].choose(rng).unwrap();
    let mut x = b.add(LayerKind::Data, ShapeParams::Data { c, h: hw, w: hw }, &[], (c, hw, hw));
    while b.specs.len() + 1 < target {
        let remaining = target - 1 - b.specs.len();
        let (c, h, w) = b.chw[x];
        if remaining >= 2 && rng.gen_bool(0.35) {
            x = fork_join(rng, &mut b, x, remaining, true, false);
            continue;
        }
        x = match rng.gen_range(0..8) {
            0 if h >= 2 => {
                b.add(LayerKind::Pool, ShapeParams::Pool { kernel: 2, stride: 2, pad: 0, global: false }, &[x], (c, (h - 2) / 2 + 1, (w - 2) / 2 + 1))
            }
            1 if h >= 4 => {
                let out = rng.gen_range(1..=8);
                b.add(LayerKind::Conv, ShapeParams::Conv { out, kernel: 3, stride: 2, pad: 1 }, &[x], (out, (h - 1) / 2 + 1, (w - 1) / 2 + 1))
            }
            2 => {
                let out = rng.gen_range(1..=16);
                b.add(LayerKind::Fc, ShapeParams::Fc { out }, &[x], (out, 1, 1))
            }
            _ => shape_keeping_layer(rng, &mut b, x, true),
        };
    }
    b.add(LayerKind::Softmax, ShapeParams::None, &[x], b.chw[x]);
    b.finish()
}

/// Chain of `blocks` blocks, each a 1x1 CONV followed by three to five
/// shape-keeping non-checkpoint layers, ending in SOFTMAX. Every tensor has
/// the same shape.
pub fn uniform_chain<R: Rng>(rng: &mut R, blocks: usize, c: u64, hw: u64) -> NetworkDef {
    let mut b = Builder { specs: Vec::new(), edges: Vec::new(), chw: Vec::new() };
    let chw = (c, hw, hw);
    let mut x = b.add(LayerKind::Data, ShapeParams::Data { c, h: hw, w: hw }, &[], chw);
    for _ in 0..blocks {
        x = b.add(LayerKind::Conv, ShapeParams::Conv { out: c, kernel: 1, stride: 1, pad: 0 }, &[x], chw);
        let len = rng.gen_range(3..=5);
        for i in 0..len {
            let kinds: &[LayerKind] = if i + 1 == len {
                &[LayerKind::Act, LayerKind::Lrn, LayerKind::Dropout, LayerKind::Pool]
            } else {
                &[LayerKind::Act, LayerKind::Lrn, LayerKind::Dropout, LayerKind::Pool, LayerKind::Bn]
            };
            let kind = *kinds.choose(rng).unwrap();
            let params = match kind {
                LayerKind::Pool => ShapeParams::Pool { kernel: 1, stride: 1, pad: 0, global: false },
                _ => ShapeParams::None,
            };
            x = b.add(kind, params, &[x], chw);
        }
    }
    b.add(LayerKind::Softmax, ShapeParams::None, &[x], chw);
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{infer_shapes, Shape};
    use crate::netgraph::build_execution_order;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixtures_parse() {
        assert_eq!(alexnet().len(), 24);
        assert_eq!(fan12().len(), 12);
        assert_eq!(nested_fan10().len(), 10);
    }

    #[test]
    fn resnet_shapes_and_depth() {
        let net = resnet([3, 4, 6, 3]);
        assert_eq!(resnet_depth([3, 4, 6, 3]), 50);
        let convs = net.layers().iter().filter(|l| l.kind == LayerKind::Conv).count();
        assert_eq!(convs, 49 + 4);
        let plan = build_execution_order(&net).unwrap();
        let shapes = infer_shapes(&net, &plan, 2).unwrap();
        let pool5 = net.find("pool5").unwrap();
        assert_eq!(shapes[pool5], Shape::new(2, 2048, 1, 1));
        let last_block = net.find("s4b3_relu").unwrap();
        assert_eq!(shapes[last_block], Shape::new(2, 2048, 7, 7));
    }

    #[test]
    fn random_networks_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let net = random_network(&mut rng, 64);
            assert!(net.len() <= 64);
            let plan = build_execution_order(&net).unwrap();
            infer_shapes(&net, &plan, 2).unwrap();
        }
    }

    #[test]
    fn uniform_chain_has_one_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = uniform_chain(&mut rng, 4, 3, 4);
        let plan = build_execution_order(&net).unwrap();
        let shapes = infer_shapes(&net, &plan, 2).unwrap();
        assert!(shapes.iter().all(|s| *s == shapes[0]));
    }
}
