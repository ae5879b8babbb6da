//! Reverse-mode gradients against central finite differences, 20 random
//! instances per operation.

use rand_core::RngCore;
use toolnet_core::graph::{finite_diff_check, FdConfig, ForwardCtx, Graph, NodeId, Op, ParamKind};
use toolnet_core::rng::{self, StreamRng};
use toolnet_core::{Shape, Tensor};

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;

fn rand_tensor(r: &mut impl RngCore, s: Shape, scale: f64) -> Tensor {
    Tensor::from_vec(s, (0..s.numel()).map(|_| (rng::uniform(r) * 2.0 - 1.0) * scale).collect())
}

fn one_hot(r: &mut impl RngCore, n: usize, k: usize, h: usize, w: usize) -> Tensor {
    let s = Shape::new(n, k, h, w);
    let mut t = Tensor::zeros(s);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let c = rng::below(r, k);
                t.set(b, c, y, x, 1.0);
            }
        }
    }
    t
}

/// Random linear functional reducing `x` to a scalar.
fn probe(g: &mut Graph, r: &mut impl RngCore, x: NodeId, s: Shape) -> NodeId {
    let k = g
        .add_param("probe.weight", ParamKind::Free, rand_tensor(r, Shape::new(1, s.c, s.h, s.w), 1.0))
        .unwrap();
    g.push(
        "probe",
        Op::Conv2d {
            input: x,
            kernel: k,
            bias: None,
            stride: 1,
            pad: 0,
        },
    )
    .unwrap()
}

fn check(g: &mut Graph, loss: NodeId, params: &[&str], seed: u64, ctx: &ForwardCtx) -> f64 {
    let cfg = FdConfig {
        eps: 1e-5,
        samples: 32,
        seed,
    };
    let mut worst: f64 = 0.0;
    for p in params {
        let rep = finite_diff_check(g, loss, p, &cfg, ctx).unwrap();
        assert!(rep.checked > 0, "no coordinates of {p} were checked");
        worst = worst.max(rep.max_rel_error);
    }
    worst
}

fn instance_rng(op: &str, i: u64) -> StreamRng {
    rng::stream(2024, op, i)
}

fn dims(r: &mut impl RngCore, lo: usize, span: usize) -> usize {
    lo + rng::below(r, span)
}

#[test]
fn conv2d_gradients() {
    for i in 0..INSTANCES {
        let mut r = instance_rng("conv2d", i);
        let (c, o) = (dims(&mut r, 1, 3), dims(&mut r, 1, 3));
        let kk = dims(&mut r, 1, 3);
        let stride = dims(&mut r, 1, 2);
        let pad = rng::below(&mut r, kk);
        let xs = Shape::new(1, c, dims(&mut r, kk, 4), dims(&mut r, kk, 4));
        let mut g = Graph::new();
        let x = g.param_node("x", ParamKind::Free, rand_tensor(&mut r, xs, 1.0)).unwrap();
        let k = g.add_param("k", ParamKind::Kernel, rand_tensor(&mut r, Shape::new(o, c, kk, kk), 1.0)).unwrap();
        let b = g.add_param("b", ParamKind::Bias, rand_tensor(&mut r, Shape::new(1, o, 1, 1), 1.0)).unwrap();
        let y = g
            .push(
                "conv",
                Op::Conv2d {
                    input: x,
                    kernel: k,
                    bias: Some(b),
                    stride,
                    pad,
                },
            )
            .unwrap();
        // Softmax keeps the probed map nonlinear in every operand.
        let s = g.push("s", Op::Softmax(y)).unwrap();
        let ys = g_shape(&mut g, s);
        let l = probe(&mut g, &mut r, s, ys);
        let err = check(&mut g, l, &["x", "k", "b"], i, &ForwardCtx::eval());
        assert!(err < TOL, "instance {i}: {err}");
    }
}

fn g_shape(g: &mut Graph, id: NodeId) -> Shape {
    g.forward(&[id], &ForwardCtx::eval()).unwrap();
    g.value(id).unwrap().shape()
}

#[test]
fn conv_transpose2d_gradients() {
    for i in 0..INSTANCES {
        let mut r = instance_rng("convt", i);
        let (c, o) = (dims(&mut r, 1, 3), dims(&mut r, 1, 3));
        let stride = dims(&mut r, 1, 3);
        let kk = stride + rng::below(&mut r, 3);
        let pad = rng::below(&mut r, kk / 2 + 1);
        let xs = Shape::new(1, c, dims(&mut r, 2, 3), dims(&mut r, 2, 3));
        let mut g = Graph::new();
        let x = g.param_node("x", ParamKind::Free, rand_tensor(&mut r, xs, 1.0)).unwrap();
        let k = g.add_param("k", ParamKind::Upsample, rand_tensor(&mut r, Shape::new(c, o, kk, kk), 1.0)).unwrap();
        let b = g.add_param("b", ParamKind::Bias, rand_tensor(&mut r, Shape::new(1, o, 1, 1), 1.0)).unwrap();
        let y = g
            .push(
                "convt",
                Op::ConvTranspose2d {
                    input: x,
                    kernel: k,
                    bias: Some(b),
                    stride,
                    pad,
                },
            )
            .unwrap();
        let s = g.push("s", Op::Softmax(y)).unwrap();
        let ys = g_shape(&mut g, s);
        let l = probe(&mut g, &mut r, s, ys);
        let err = check(&mut g, l, &["x", "k", "b"], i, &ForwardCtx::eval());
        assert!(err < TOL, "instance {i}: {err}");
    }
}

#[test]
fn prelu_gradients_input_and_slope() {
    for i in 0..INSTANCES {
        let mut r = instance_rng("prelu", i);
        let c = dims(&mut r, 1, 4);
        let xs = Shape::new(1, c, dims(&mut r, 2, 4), dims(&mut r, 2, 4));
        let mut g = Graph::new();
        let x = g.param_node("x", ParamKind::Free, rand_tensor(&mut r, xs, 1.0)).unwrap();
        let a = g.add_param("a", ParamKind::Slope, rand_tensor(&mut r, Shape::new(1, c, 1, 1), 0.5)).unwrap();
        let y = g.push("prelu", Op::PRelu { input: x, slopes: a }).unwrap();
        let s = g.push("s", Op::Softmax(y)).unwrap();
        let l = probe(&mut g, &mut r, s, xs);
        let err = check(&mut g, l, &["x", "a"], i, &ForwardCtx::eval());
        assert!(err < TOL, "instance {i}: {err}");
    }
}

#[test]
fn softmax_gradients() {
    for i in 0..INSTANCES {
        let mut r = instance_rng("softmax", i);
        let xs = Shape::new(1, dims(&mut r, 1, 4), dims(&mut r, 1, 4), dims(&mut r, 1, 4));
        let mut g = Graph::new();
        let x = g.param_node("x", ParamKind::Free, rand_tensor(&mut r, xs, 3.0)).unwrap();
        let s = g.push("s", Op::Softmax(x)).unwrap();
        let l = probe(&mut g, &mut r, s, xs);
        let err = check(&mut g, l, &["x"], i, &ForwardCtx::eval());
        assert!(err < TOL, "instance {i}: {err}");
    }
}

#[test]
fn maxpool_add_concat_scale_gradients() {
    for i in 0..INSTANCES {
        let mut r = instance_rng("misc", i);
        let c = dims(&mut r, 1, 3);
        let xs = Shape::new(1, c, 2 * dims(&mut r, 1, 3), 2 * dims(&mut r, 1, 3));
        let mut g = Graph::new();
        let x = g.param_node("x", ParamKind::Free, rand_tensor(&mut r, xs, 1.0)).unwrap();
        let z = g.param_node("z", ParamKind::Free, rand_tensor(&mut r, xs, 1.0)).unwrap();
        let sum = g.push("sum", Op::Add(x, z)).unwrap();
        let sc = g.push("scaled", Op::Scale { input: sum, factor: -1.7 }).unwrap();
        let cat = g.push("cat", Op::Concat(vec![sc, x])).unwrap();
        let pool = g.push("pool", Op::MaxPool2d { input: cat, k: 2, stride: 2 }).unwrap();
        let s = g.push("s", Op::Softmax(pool)).unwrap();
        let ps = g_shape(&mut g, s);
        let l = probe(&mut g, &mut r, s, ps);
        let err = check(&mut g, l, &["x", "z"], i, &ForwardCtx::eval());
        assert!(err < TOL, "instance {i}: {err}");
    }
}

#[test]
fn dropout_gradient_in_train_mode() {
    for i in 0..INSTANCES {
        let mut r = instance_rng("dropout", i);
        let xs = Shape::new(1, 2, 4, 4);
        let mut g = Graph::new();
        let x = g.param_node("x", ParamKind::Free, rand_tensor(&mut r, xs, 1.0)).unwrap();
        let d = g.push("drop", Op::Dropout { input: x, p: 0.5 }).unwrap();
        let s = g.push("s", Op::Softmax(d)).unwrap();
        let l = probe(&mut g, &mut r, s, xs);
        let err = check(&mut g, l, &["x"], i, &ForwardCtx::train(9, i));
        assert!(err < TOL, "instance {i}: {err}");
    }
}

#[test]
fn dice_loss_gradient_through_alpha() {
    for i in 0..INSTANCES {
        let mut r = instance_rng("dice", i);
        let k = dims(&mut r, 2, 2);
        let (h, w) = (dims(&mut r, 1, 5), dims(&mut r, 1, 5));
        let mut g = Graph::new();
        // A raw prediction in (0, 1), not normalized, exercises the alpha path directly.
        let p = Tensor::from_vec(Shape::new(1, k, h, w), (0..k * h * w).map(|_| rng::uniform(&mut r)).collect());
        let pred = g.param_node("pred", ParamKind::Free, p).unwrap();
        let logits = g.param_node("logits", ParamKind::Free, rand_tensor(&mut r, Shape::new(1, k, h, w), 2.0)).unwrap();
        let soft = g.push("soft", Op::Softmax(logits)).unwrap();
        let target = g.input("target");
        g.set_input(target, one_hot(&mut r, 1, k, h, w)).unwrap();
        let l1 = g.push("l1", Op::DiceLoss { pred, target }).unwrap();
        let l2 = g.push("l2", Op::DiceLoss { pred: soft, target }).unwrap();
        let l = g
            .push(
                "loss",
                Op::WeightedSum {
                    inputs: vec![l1, l2],
                    coeffs: vec![0.7, 1.3],
                },
            )
            .unwrap();
        let err = check(&mut g, l, &["pred", "logits"], i, &ForwardCtx::eval());
        assert!(err < TOL, "instance {i}: {err}");
    }
}

#[test]
fn msdl_gradient_through_fusion_weights() {
    for i in 0..INSTANCES {
        let mut r = instance_rng("msdl", i);
        let m = dims(&mut r, 1, 4);
        let (h, w) = (dims(&mut r, 2, 4), dims(&mut r, 2, 4));
        let s = Shape::new(1, 2, h, w);
        let mut g = Graph::new();
        let target = g.input("target");
        g.set_input(target, one_hot(&mut r, 1, 2, h, w)).unwrap();
        let mut probs = Vec::new();
        let mut names = Vec::new();
        for j in 0..m {
            let name = format!("logits{j}");
            let x = g.param_node(name.clone(), ParamKind::Free, rand_tensor(&mut r, s, 2.0)).unwrap();
            names.push(name);
            probs.push(g.push(format!("prob{j}"), Op::Softmax(x)).unwrap());
        }
        let wts = rand_tensor(&mut r, Shape::new(1, m, 1, 1), 1.0);
        let weights = g.add_param("fuse.weight", ParamKind::Fusion, wts).unwrap();
        let raw = g
            .push(
                "fuse",
                Op::Fuse {
                    inputs: probs.clone(),
                    weights,
                },
            )
            .unwrap();
        let renorm = i % 2 == 0;
        let fused = if renorm { g.push("fused", Op::Softmax(raw)).unwrap() } else { raw };
        let mut terms: Vec<NodeId> = probs
            .iter()
            .enumerate()
            .map(|(j, p)| g.push(format!("loss{j}"), Op::DiceLoss { pred: *p, target }).unwrap())
            .collect();
        terms.push(g.push("loss_fused", Op::DiceLoss { pred: fused, target }).unwrap());
        let coeffs = (0..=m).map(|_| 0.5 + rng::uniform(&mut r)).collect();
        let l = g.push("loss", Op::WeightedSum { inputs: terms, coeffs }).unwrap();
        let mut all: Vec<&str> = names.iter().map(String::as_str).collect();
        all.push("fuse.weight");
        let err = check(&mut g, l, &all, i, &ForwardCtx::eval());
        assert!(err < TOL, "instance {i}: {err}");
    }
}

#[test]
fn conv_prelu_pool_dice_composite() {
    for i in 0..INSTANCES {
        let mut r = instance_rng("composite", i);
        let mut g = Graph::new();
        let img = g.input("img");
        g.set_input(img, rand_tensor(&mut r, Shape::new(1, 3, 8, 8), 1.0)).unwrap();
        let target = g.input("target");
        g.set_input(target, one_hot(&mut r, 1, 2, 8, 8)).unwrap();
        let k1 = g.add_param("k1", ParamKind::Kernel, rand_tensor(&mut r, Shape::new(4, 3, 3, 3), 0.5)).unwrap();
        let b1 = g.add_param("b1", ParamKind::Bias, rand_tensor(&mut r, Shape::new(1, 4, 1, 1), 0.1)).unwrap();
        let c1 = g
            .push(
                "c1",
                Op::Conv2d {
                    input: img,
                    kernel: k1,
                    bias: Some(b1),
                    stride: 1,
                    pad: 1,
                },
            )
            .unwrap();
        let a = g.add_param("a", ParamKind::Slope, Tensor::full(Shape::new(1, 4, 1, 1), 0.25)).unwrap();
        let p1 = g.push("p1", Op::PRelu { input: c1, slopes: a }).unwrap();
        let mp = g.push("mp", Op::MaxPool2d { input: p1, k: 2, stride: 2 }).unwrap();
        let k2 = g.add_param("k2", ParamKind::Kernel, rand_tensor(&mut r, Shape::new(2, 4, 1, 1), 0.5)).unwrap();
        let sc = g
            .push(
                "score",
                Op::Conv2d {
                    input: mp,
                    kernel: k2,
                    bias: None,
                    stride: 1,
                    pad: 0,
                },
            )
            .unwrap();
        let ku = g
            .add_param("ku", ParamKind::Upsample, toolnet_core::layers::bilinear_kernel(2, 2).unwrap())
            .unwrap();
        let up = g
            .push(
                "up",
                Op::ConvTranspose2d {
                    input: sc,
                    kernel: ku,
                    bias: None,
                    stride: 2,
                    pad: 1,
                },
            )
            .unwrap();
        let prob = g.push("prob", Op::Softmax(up)).unwrap();
        let l = g.push("loss", Op::DiceLoss { pred: prob, target }).unwrap();
        let err = check(&mut g, l, &["k1", "b1", "a", "k2", "ku"], i, &ForwardCtx::eval());
        assert!(err < TOL, "instance {i}: {err}");
    }
}
