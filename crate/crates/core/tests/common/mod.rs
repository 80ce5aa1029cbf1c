#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpl_core::encoders::{Backbone, Binder, ModelConfig, ParamStore};
use tpl_core::harness::model::{init_learnables, Forward};
use tpl_core::harness::Components;
use tpl_core::numerics::{Graph, NodeId, Tensor};
use tpl_core::objective::{loss_ls, loss_lv, total_loss, LossBatch, Weights};
use tpl_core::Result;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so exact zeros do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor {
    Tensor::randn(shape, std, &mut rng(seed))
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Reduces any node to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let w = randn(&shape, 1.0, seed ^ 0x5eed);
    let w = g.constant(&shape, w.values().to_vec())?;
    let y = g.mul(x, w)?;
    g.sum_all(y)
}

/// Largest relative error between reverse-mode gradients and central
/// differences over every element of every input.
pub fn fd_check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ts: &[Tensor], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ts
            .iter()
            .map(|t| g.leaf(&t.clone().with_requires_grad(grads)).unwrap())
            .collect();
        let loss = build(&mut g, &ids).unwrap();
        let v = g.value(loss)[0];
        if !grads {
            return (v, Vec::new());
        }
        g.backward(loss).unwrap();
        let gs = ids
            .iter()
            .zip(ts)
            .map(|(&id, t)| g.grad(id).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        (v, gs)
    };
    let (_, analytic) = eval(inputs, true);
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[j] -= FD_STEP;
            let n = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], n));
        }
    }
    worst
}

pub type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// One differentiable op on fixed random inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

impl OpCase {
    /// Max relative error of the op's gradients, reduced through [`weighted_sum`].
    pub fn error(&self) -> f64 {
        fd_check(&self.inputs, |g, x| {
            let y = (self.build)(g, x)?;
            weighted_sum(g, y, 11)
        })
    }
}

fn case(
    v: &mut Vec<OpCase>,
    name: &'static str,
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static,
) {
    v.push(OpCase { name, inputs: inputs.to_vec(), build: Box::new(build) });
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let t = randn(shape, 1.0, seed);
    let v = t.values().iter().map(|x| 0.5 + x.abs()).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Every differentiable op, including transposed and repeated-input variants.
pub fn op_cases() -> Vec<OpCase> {
    let mut v = Vec::new();
    let a = randn(&[3, 4], 1.0, 1);
    let b = randn(&[4, 2], 1.0, 2);
    case(&mut v, "matmul", &[a.clone(), b.clone()], |g, x| g.matmul(x[0], x[1]));
    let bt = randn(&[2, 4], 1.0, 3);
    case(&mut v, "matmul b^T", &[a.clone(), bt.clone()], |g, x| g.matmul_ex(x[0], x[1], false, true));
    let at = randn(&[4, 3], 1.0, 4);
    case(&mut v, "matmul a^T", &[at.clone(), b.clone()], |g, x| g.matmul_ex(x[0], x[1], true, false));
    case(&mut v, "matmul a^T b^T", &[at, bt], |g, x| g.matmul_ex(x[0], x[1], true, true));
    let p = randn(&[2, 3, 4], 1.0, 5);
    let q = randn(&[2, 4, 5], 1.0, 6);
    case(&mut v, "batch_matmul", &[p.clone(), q], |g, x| g.batch_matmul(x[0], x[1], false));
    let k = randn(&[2, 5, 4], 1.0, 7);
    case(&mut v, "batch_matmul b^T", &[p, k], |g, x| g.batch_matmul(x[0], x[1], true));
    // the same leaf on both sides
    case(&mut v, "matmul self", &[randn(&[3, 3], 1.0, 8)], |g, x| g.matmul_ex(x[0], x[0], false, true));

    let a = randn(&[2, 3, 4], 1.0, 1);
    let b = randn(&[2, 3, 4], 1.0, 2);
    let row = randn(&[4], 1.0, 3);
    let mat = randn(&[3, 4], 1.0, 4);
    case(&mut v, "add", &[a.clone(), b.clone()], |g, x| g.add(x[0], x[1]));
    case(&mut v, "sub", &[a.clone(), b.clone()], |g, x| g.sub(x[0], x[1]));
    case(&mut v, "mul", &[a.clone(), b.clone()], |g, x| g.mul(x[0], x[1]));
    case(&mut v, "add_row vector", &[a.clone(), row.clone()], |g, x| g.add_row(x[0], x[1]));
    case(&mut v, "add_row matrix", &[a.clone(), mat], |g, x| g.add_row(x[0], x[1]));
    case(&mut v, "mul_row", &[a.clone(), row], |g, x| g.mul_row(x[0], x[1]));
    case(&mut v, "scale", std::slice::from_ref(&a), |g, x| g.scale(x[0], -1.7));
    case(&mut v, "exp", std::slice::from_ref(&a), |g, x| g.exp(x[0]));
    case(&mut v, "log", &[positive(&[3, 4], 9)], |g, x| g.log(x[0]));
    case(&mut v, "gelu", &[randn(&[5, 4], 2.0, 10)], |g, x| g.gelu(x[0]));

    let a = randn(&[2, 3, 4], 1.0, 1);
    let b = randn(&[2, 2, 4], 1.0, 2);
    case(&mut v, "concat axis 1", &[a.clone(), b], |g, x| g.concat(&[x[0], x[1]], 1));
    let c = randn(&[1, 3, 4], 1.0, 3);
    case(&mut v, "concat axis 0", &[a.clone(), c], |g, x| g.concat(&[x[0], x[1], x[0]], 0));
    case(&mut v, "slice", std::slice::from_ref(&a), |g, x| g.slice(x[0], 1, 1, 3));
    case(&mut v, "select_rows", &[randn(&[4, 3], 1.0, 4)], |g, x| g.select_rows(x[0], &[2, 0, 2, 3]));
    case(&mut v, "reshape", std::slice::from_ref(&a), |g, x| g.reshape(x[0], &[6, 4]));
    case(&mut v, "permute", std::slice::from_ref(&a), |g, x| g.permute(x[0], &[2, 0, 1]));
    case(&mut v, "mean axis 0", std::slice::from_ref(&a), |g, x| g.mean(x[0], 0));
    case(&mut v, "mean axis 1", std::slice::from_ref(&a), |g, x| g.mean(x[0], 1));
    case(&mut v, "sum_all", std::slice::from_ref(&a), |g, x| g.sum_all(x[0]));
    case(&mut v, "pick", &[randn(&[3, 4], 1.0, 5)], |g, x| g.pick(x[0], &[3, 0, 3]));

    let a = randn(&[3, 5], 1.5, 1);
    case(&mut v, "layer_norm", std::slice::from_ref(&a), |g, x| g.layer_norm(x[0], 1e-5));
    case(&mut v, "softmax", std::slice::from_ref(&a), |g, x| g.softmax(x[0]));
    case(&mut v, "log_softmax", std::slice::from_ref(&a), |g, x| g.log_softmax(x[0]));
    case(&mut v, "l2_normalize", std::slice::from_ref(&a), |g, x| g.l2_normalize(x[0]));
    case(&mut v, "cosine_similarity", &[a, randn(&[2, 5], 1.0, 2)], |g, x| g.cosine_similarity(x[0], x[1]));

    v
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 4,
        channels: 3,
        patch_size: 2,
        width: 4,
        vision_layers: 1,
        heads: 2,
        mlp_ratio: 2,
        vision_prompt_len: 2,
        text_layers: 1,
        context_len: 8,
        joint_dim: 4,
        text_prompt_len: 2,
        num_classes: 2,
        template_len: 2,
        generator_hidden: 6,
        ..ModelConfig::default()
    }
}

/// Full objective over two samples from two domains: vision prompts, prompt
/// generator, both text sets, all three gates, `w_V·L_V + w_S·L_S`.
fn composed_loss(bb: &Backbone, learn: &ParamStore, pixels: &[f64], original: &[f64], t: &[f64]) -> (f64, Vec<(String, Vec<f64>)>) {
    let cfg = &bb.config;
    let fwd = Forward::new(bb, Components::default());
    let mut g = Graph::new();
    let mut b = Binder::new(vec![&bb.params, learn], true);
    let (fused, pre) = fwd.images(&mut g, &mut b, pixels, 2, original).unwrap();
    let prompts = fwd.domain_prompts(&mut g, &mut b, pre, &[vec![0], vec![1]]).unwrap();
    let t = g.constant(&[cfg.num_classes, cfg.joint_dim], t.to_vec()).unwrap();
    let sets = fwd.text(&mut g, &mut b, t, &prompts).unwrap();
    let batch = LossBatch {
        image: fused,
        labels: vec![0, 1],
        slots: vec![0, 1],
        agnostic: sets.agnostic,
        specific: sets.specific,
        temperature: 0.5,
    };
    let lv = loss_lv(&mut g, &batch).unwrap();
    let ls = loss_ls(&mut g, &batch).unwrap();
    let loss = total_loss(&mut g, lv, ls, Weights { vision: 0.3, language: 0.7 }).unwrap();
    let v = g.value(loss)[0];
    g.backward(loss).unwrap();
    let mut grads: Vec<(String, Vec<f64>)> = b
        .bound()
        .filter_map(|(n, id)| g.grad(id).map(|gr| (n.to_string(), gr.to_vec())))
        .collect();
    grads.sort_by(|x, y| x.0.cmp(&y.0));
    (v, grads)
}

/// `(max relative error, values checked)` of the composed objective over
/// every backbone and learnable parameter.
pub fn composed_check() -> (f64, usize) {
    let cfg = tiny_config();
    let mut bb = Backbone::init(cfg.clone(), 3).unwrap();
    let original = bb.encode_images(None, &randn(&[2 * cfg.pixels_per_image()], 1.0, 0).into_values(), 2).unwrap();
    let t = bb.encode_classes(None).unwrap();
    bb.params.set_all_trainable(true);
    let mut learn = init_learnables(&cfg, Components::default(), 4).unwrap();
    // prompts and gates large enough that every path carries signal
    for p in learn.iter_mut() {
        let bump = randn(p.tensor.shape(), 0.3, p.name.len() as u64);
        p.tensor.values_mut().iter_mut().zip(bump.values()).for_each(|(v, d)| *v += d);
    }
    let pixels = randn(&[2 * cfg.pixels_per_image()], 1.0, 0).into_values();

    let (_, grads) = composed_loss(&bb, &learn, &pixels, &original, &t);
    let names: Vec<&str> = grads.iter().map(|(n, _)| n.as_str()).collect();
    for must in ["prompt.vision.0", "gen.fc1.w", "gen.fc3.b", "gate.p", "gate.q", "gate.r", "vision.proj", "text.tok"] {
        assert!(names.iter().any(|n| n.starts_with(must)), "no gradient reached {must}");
    }
    let mut worst = 0.0f64;
    let mut count = 0;
    for (name, analytic) in &grads {
        for (j, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let (mut bb2, mut l2) = (bb.clone(), learn.clone());
                match l2.get_mut(name) {
                    Some(t) => t.values_mut()[j] += delta,
                    None => bb2.params.get_mut(name).unwrap().values_mut()[j] += delta,
                }
                composed_loss(&bb2, &l2, &pixels, &original, &t).0
            };
            let n = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, n));
            count += 1;
        }
    }
    (worst, count)
}

pub fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Least-squares orthogonal alignment (rotation or reflection) of centered
/// `x` onto centered `y`; returns the largest remaining coordinate error.
pub fn procrustes(x: &[[f64; 2]], y: &[[f64; 2]]) -> f64 {
    let center = |p: &[[f64; 2]]| {
        let n = p.len() as f64;
        let m = [p.iter().map(|v| v[0]).sum::<f64>() / n, p.iter().map(|v| v[1]).sum::<f64>() / n];
        p.iter().map(|v| [v[0] - m[0], v[1] - m[1]]).collect::<Vec<_>>()
    };
    let (x, y) = (center(x), center(y));
    let mut best = f64::INFINITY;
    for flip in [1.0, -1.0] {
        let xf: Vec<[f64; 2]> = x.iter().map(|v| [v[0], flip * v[1]]).collect();
        // the optimal angle maximizes Σ yᵀR x
        let (mut s, mut c) = (0.0, 0.0);
        for (p, q) in xf.iter().zip(&y) {
            c += p[0] * q[0] + p[1] * q[1];
            s += p[0] * q[1] - p[1] * q[0];
        }
        let th = s.atan2(c);
        let err = xf
            .iter()
            .zip(&y)
            .map(|(p, q)| {
                let r = [th.cos() * p[0] - th.sin() * p[1], th.sin() * p[0] + th.cos() * p[1]];
                (r[0] - q[0]).abs().max((r[1] - q[1]).abs())
            })
            .fold(0.0, f64::max);
        best = best.min(err);
    }
    best
}
