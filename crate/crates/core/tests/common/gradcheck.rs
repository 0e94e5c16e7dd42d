//! Finite-difference gradient oracle on 64-bit evaluation.
//!
//! Derivatives use the five-point central stencil with step `H`:
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`. Inputs are drawn away
//! from the kinks of relu, clamp, max pooling, loss mining and hinges, so no
//! stencil point crosses one.

use fsml::losses::{self, BatchLabels, LabeledBatch, LossConfig};
use fsml::network::{Architecture, EmbeddingModel, ParamId, RectifiedModel};
use fsml::rng::Stream;
use fsml::tensor::{Tape, Tensor, Var};
use rand::Rng;

use super::randn;

pub const H: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Inputs stay this far from non-smooth points.
const KINK_GAP: f64 = 1e-2;

/// `|a - b| / max(|a|, |b|, 1e-3)`; the floor keeps vanishing gradients from
/// turning round-off into large ratios.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

type Build = dyn for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>;

/// Inputs plus a scalar function of them.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub f: Box<Build>,
}

fn value_at(f: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&vars).item()
}

fn five_point(mut at: impl FnMut(f64) -> f64) -> f64 {
    (-at(2.0 * H) + 8.0 * at(H) - 8.0 * at(-H) + at(-2.0 * H)) / (12.0 * H)
}

/// Largest relative error between reverse-mode and finite-difference gradients.
pub fn check(case: &Case) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let grads = tape.backward((case.f)(&vars)).expect("scalar loss");
    let mut worst = 0.0f64;
    for (n, input) in case.inputs.iter().enumerate() {
        let g = grads.wrt(vars[n]);
        for i in 0..input.len() {
            let fd = five_point(|delta| {
                let mut moved = case.inputs.clone();
                moved[n].data_mut()[i] += delta;
                value_at(&*case.f, &moved)
            });
            worst = worst.max(rel_error(g.data()[i], fd));
        }
    }
    worst
}

fn constant<'t>(like: &Var<'t, f64>, t: &Tensor<f64>) -> Var<'t, f64> {
    like.tape().constant(t.clone())
}

/// `sum(y * w)` with fixed random weights, so every output element matters.
fn project<'t>(y: Var<'t, f64>, w: &Tensor<f64>) -> Var<'t, f64> {
    y.mul(constant(&y, w)).expect("weights match output shape").sum()
}

fn dims(r: &mut Stream, lo: usize, hi: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(lo..=hi)).collect()
}

/// Resamples entries closer than `KINK_GAP` to `at`.
fn away_from(r: &mut Stream, mut t: Tensor<f64>, at: f64) -> Tensor<f64> {
    for x in t.data_mut() {
        while (*x - at).abs() < KINK_GAP {
            *x = at + r.random_range(-1.0..1.0);
        }
    }
    t
}

fn positive(r: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    randn(r, shape).map(|x| 0.5 + x.abs())
}

/// A unary op applied to one input and projected onto random weights.
fn unary(
    input: Tensor<f64>,
    out_shape: &[usize],
    r: &mut Stream,
    op: impl for<'t> Fn(Var<'t, f64>) -> Var<'t, f64> + 'static,
) -> Case {
    let w = randn(r, out_shape);
    Case {
        inputs: vec![input],
        f: Box::new(move |v| project(op(v[0]), &w)),
    }
}

fn binary(
    a: Tensor<f64>,
    b: Tensor<f64>,
    out_shape: &[usize],
    r: &mut Stream,
    op: impl for<'t> Fn(Var<'t, f64>, Var<'t, f64>) -> Var<'t, f64> + 'static,
) -> Case {
    let w = randn(r, out_shape);
    Case {
        inputs: vec![a, b],
        f: Box::new(move |v| project(op(v[0], v[1]), &w)),
    }
}

/// Operand shapes for elementwise binary ops: equal, or a broadcast row.
fn elementwise_shapes(r: &mut Stream, case: usize) -> (Vec<usize>, Vec<usize>) {
    let d = dims(r, 1, 5, 2);
    let b = if case.is_multiple_of(2) { d.clone() } else { vec![d[1]] };
    (d, b)
}

fn conv_case(r: &mut Stream) -> Case {
    let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
    let k = if r.random_bool(0.5) { 1 } else { 3 };
    let (stride, padding) = (r.random_range(1..=2), r.random_range(0..=1));
    let hw = r.random_range(k.max(3)..=6);
    let x = randn(r, &[n, c, hw, hw]);
    let w = randn(r, &[o, c, k, k]);
    let bias = randn(r, &[o]);
    let out = (hw + 2 * padding - k) / stride + 1;
    let proj = randn(r, &[n, o, out, out]);
    Case {
        inputs: vec![x, w, bias],
        f: Box::new(move |v| project(v[0].conv2d(v[1], Some(v[2]), stride, padding).unwrap(), &proj)),
    }
}

/// Random `[N,C,H,W]` whose 2x2 windows have a clear maximum.
fn poolable(r: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    loop {
        let t = randn(r, shape);
        let (h, w) = (shape[2], shape[3]);
        let planes = shape[0] * shape[1];
        let clear = (0..planes).all(|p| {
            (0..h / 2).all(|i| {
                (0..w / 2).all(|j| {
                    let mut win: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(a, b)| t.data()[(p * h + 2 * i + a) * w + 2 * j + b])
                        .collect();
                    win.sort_by(|a, b| b.total_cmp(a));
                    win[0] - win[1] > KINK_GAP
                })
            })
        });
        if clear {
            return t;
        }
    }
}

/// `mean(relu(conv(x, w) + b))` on `2x3x8x8` inputs with pre-activations away from zero.
fn conv_relu_mean_case(r: &mut Stream) -> Case {
    loop {
        let x = randn(r, &[2, 3, 8, 8]);
        let w = randn(r, &[4, 3, 3, 3]).map(|v| v * 0.3);
        let b = randn(r, &[4]);
        let pre = {
            let tape = Tape::new();
            let y = tape
                .constant(x.clone())
                .conv2d(tape.constant(w.clone()), Some(tape.constant(b.clone())), 1, 1)
                .unwrap();
            y.to_tensor()
        };
        if pre.data().iter().all(|p| p.abs() > 2.0 * KINK_GAP) {
            return Case {
                inputs: vec![x, w, b],
                f: Box::new(|v| v[0].conv2d(v[1], Some(v[2]), 1, 1).unwrap().relu().mean()),
            };
        }
    }
}

fn unit_rows(r: &mut Stream, b: usize, d: usize) -> Tensor<f64> {
    let mut t = randn(r, &[b, d]);
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    t
}

fn similarities(e: &Tensor<f64>) -> Vec<f64> {
    let (b, d) = (e.shape()[0], e.shape()[1]);
    let x = e.data();
    let mut s = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            s[i * b + j] = (0..d).map(|k| x[i * d + k] * x[j * d + k]).sum();
        }
    }
    s
}

/// No similarity within `gap` of a mining threshold.
fn ms_mining_is_stable(sim: &[f64], labels: &[usize], margin: f64, gap: f64) -> bool {
    let b = labels.len();
    (0..b).all(|i| {
        let others = || (0..b).filter(move |&k| k != i);
        let hardest_neg = others().filter(|&k| labels[k] != labels[i]).map(|k| sim[i * b + k]).fold(f64::NEG_INFINITY, f64::max);
        let hardest_pos = others().filter(|&k| labels[k] == labels[i]).map(|k| sim[i * b + k]).fold(f64::INFINITY, f64::min);
        others().all(|k| {
            let threshold = if labels[k] == labels[i] { hardest_neg + margin } else { hardest_pos - margin };
            !threshold.is_finite() || (sim[i * b + k] - threshold).abs() > gap
        })
    })
}

fn class_labels(r: &mut Stream, b: usize) -> Vec<usize> {
    let classes = r.random_range(2..=3);
    (0..b).map(|i| if i < classes { i } else { r.random_range(0..classes) }).collect()
}

fn ms_case(r: &mut Stream) -> Case {
    let cfg = LossConfig::default();
    loop {
        let b = r.random_range(4..=8);
        let e = unit_rows(r, b, 4);
        let labels = class_labels(r, b);
        if ms_mining_is_stable(&similarities(&e), &labels, cfg.ms_mining_margin, 0.05) {
            let cfg = cfg.clone();
            return Case {
                inputs: vec![e],
                f: Box::new(move |v| {
                    let batch = LabeledBatch {
                        embeddings: v[0],
                        labels: BatchLabels::Discrete(labels.clone()),
                    };
                    losses::multi_similarity_loss(&batch, &cfg).unwrap().loss
                }),
            };
        }
    }
}

fn sq_distances(e: &Tensor<f64>) -> Vec<f64> {
    let (b, d) = (e.shape()[0], e.shape()[1]);
    let x = e.data();
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            out[i * b + j] = (0..d).map(|k| (x[i * d + k] - x[j * d + k]).powi(2)).sum();
        }
    }
    out
}

fn triplet_case(r: &mut Stream) -> Case {
    let cfg = LossConfig::default();
    loop {
        let b = r.random_range(4..=8);
        let e = randn(r, &[b, 3]).map(|x| 0.5 * x);
        let labels = class_labels(r, b);
        let d = sq_distances(&e);
        let stable = (0..b).all(|a| {
            (0..b).filter(|&p| p != a && labels[p] == labels[a]).all(|p| {
                (0..b)
                    .filter(|&n| labels[n] != labels[a])
                    .all(|n| (d[a * b + p] - d[a * b + n] + cfg.triplet_margin).abs() > 0.05)
            })
        });
        if stable {
            let cfg = cfg.clone();
            return Case {
                inputs: vec![e],
                f: Box::new(move |v| {
                    let batch = LabeledBatch {
                        embeddings: v[0],
                        labels: BatchLabels::Discrete(labels.clone()),
                    };
                    losses::triplet_loss(&batch, &cfg).unwrap().loss
                }),
            };
        }
    }
}

/// Symmetric positive label distances with some unknown pairs.
pub fn random_label_distances(r: &mut Stream, b: usize, unknown: f64) -> Vec<Option<f64>> {
    let mut d = vec![None; b * b];
    for i in 0..b {
        for j in i + 1..b {
            if !r.random_bool(unknown) {
                let v = 0.1 + r.random_range(0.0..2.0);
                d[i * b + j] = Some(v);
                d[j * b + i] = Some(v);
            }
        }
    }
    d
}

fn log_ratio_case(r: &mut Stream) -> Case {
    let b = r.random_range(3..=6);
    let e = randn(r, &[b, 3]);
    let dist = random_label_distances(r, b, 0.2);
    let cfg = LossConfig::with_kind(losses::LossKind::LogRatio);
    Case {
        inputs: vec![e],
        f: Box::new(move |v| {
            let batch = LabeledBatch {
                embeddings: v[0],
                labels: BatchLabels::Continuous(dist.clone()),
            };
            losses::log_ratio_loss(&batch, &cfg, 0).unwrap().loss
        }),
    }
}

pub type Generator = fn(&mut Stream, usize) -> Case;

/// Named case generators; case `i` of each draws from a stream seeded by `i`.
pub fn generators() -> Vec<(&'static str, Generator)> {
    vec![
        ("add", |r, i| {
            let (a, b) = elementwise_shapes(r, i);
            let (x, y) = (randn(r, &a), randn(r, &b));
            binary(x, y, &a, r, |x, y| x.add(y).unwrap())
        }),
        ("sub", |r, i| {
            let (a, b) = elementwise_shapes(r, i);
            let (x, y) = (randn(r, &a), randn(r, &b));
            binary(x, y, &a, r, |x, y| x.sub(y).unwrap())
        }),
        ("mul", |r, i| {
            let (a, b) = elementwise_shapes(r, i);
            let (x, y) = (randn(r, &a), randn(r, &b));
            binary(x, y, &a, r, |x, y| x.mul(y).unwrap())
        }),
        ("div", |r, i| {
            let (a, b) = elementwise_shapes(r, i);
            let x = randn(r, &a);
            let y = positive(r, &b).map(|v| if i % 4 < 2 { v } else { -v });
            binary(x, y, &a, r, |x, y| x.div(y).unwrap())
        }),
        ("broadcast_to", |r, _| {
            let d = dims(r, 1, 5, 2);
            let from = if r.random_bool(0.5) { vec![d[1]] } else { vec![1, d[1]] };
            let x = randn(r, &from);
            unary(x, &d.clone(), r, move |x| x.broadcast_to(&d).unwrap())
        }),
        ("scale", |r, _| {
            let d = dims(r, 1, 6, 2);
            let s = r.random_range(-3.0..3.0);
            let x = randn(r, &d);
            unary(x, &d, r, move |x| x.scale(s))
        }),
        ("neg", |r, _| {
            let d = dims(r, 1, 6, 2);
            let x = randn(r, &d);
            unary(x, &d, r, |x| x.neg())
        }),
        ("offset", |r, _| {
            let d = dims(r, 1, 6, 2);
            let c = r.random_range(-3.0..3.0);
            let x = randn(r, &d);
            unary(x, &d, r, move |x| x.offset(c))
        }),
        ("exp", |r, _| {
            let d = dims(r, 1, 6, 2);
            let x = randn(r, &d);
            unary(x, &d, r, |x| x.exp())
        }),
        ("ln", |r, _| {
            let d = dims(r, 1, 6, 2);
            let x = positive(r, &d);
            unary(x, &d, r, |x| x.ln())
        }),
        ("sqrt", |r, _| {
            let d = dims(r, 1, 6, 2);
            let x = positive(r, &d);
            unary(x, &d, r, |x| x.sqrt())
        }),
        ("square", |r, _| {
            let d = dims(r, 1, 6, 2);
            let x = randn(r, &d);
            unary(x, &d, r, |x| x.square())
        }),
        ("relu", |r, _| {
            let d = dims(r, 1, 6, 2);
            let x = randn(r, &d);
            let x = away_from(r, x, 0.0);
            unary(x, &d, r, |x| x.relu())
        }),
        ("clamp_min", |r, _| {
            let d = dims(r, 1, 6, 2);
            let x = randn(r, &d);
            let x = away_from(r, x, 0.3);
            unary(x, &d, r, |x| x.clamp_min(0.3))
        }),
        ("sum", |r, _| {
            let d = dims(r, 1, 6, 3);
            let x = randn(r, &d);
            let s = r.random_range(-2.0..2.0);
            Case {
                inputs: vec![x],
                f: Box::new(move |v| v[0].sum().scale(s)),
            }
        }),
        ("mean", |r, _| {
            let d = dims(r, 1, 6, 3);
            let x = randn(r, &d);
            Case {
                inputs: vec![x],
                f: Box::new(|v| v[0].square().mean()),
            }
        }),
        ("sum_axis", |r, _| {
            let d = dims(r, 1, 5, 3);
            let axis = r.random_range(0..3);
            let keep = r.random_bool(0.5);
            let mut out = d.clone();
            if keep {
                out[axis] = 1;
            } else {
                out.remove(axis);
            }
            let x = randn(r, &d);
            unary(x, &out, r, move |x| x.sum_axis(axis, keep).unwrap())
        }),
        ("matmul", |r, _| {
            let d = dims(r, 1, 6, 3);
            let (a, b) = (randn(r, &[d[0], d[1]]), randn(r, &[d[1], d[2]]));
            binary(a, b, &[d[0], d[2]], r, |a, b| a.matmul(b).unwrap())
        }),
        ("transpose", |r, _| {
            let d = dims(r, 1, 6, 2);
            let x = randn(r, &d);
            unary(x, &[d[1], d[0]], r, |x| x.t().unwrap())
        }),
        ("reshape", |r, _| {
            let d = dims(r, 1, 4, 3);
            let to = vec![d[0] * d[1], d[2]];
            let x = randn(r, &d);
            unary(x, &to.clone(), r, move |x| x.reshape(&to).unwrap())
        }),
        ("conv2d", |r, _| conv_case(r)),
        ("maxpool2d", |r, _| {
            let n = r.random_range(1..=2);
            let c = r.random_range(1..=3);
            let hw = 2 * r.random_range(1..=3);
            let x = poolable(r, &[n, c, hw, hw]);
            unary(x, &[n, c, hw / 2, hw / 2], r, |x| x.maxpool2d(2).unwrap())
        }),
        ("l2_normalize", |r, _| {
            let d = dims(r, 2, 5, 2);
            let axis = r.random_range(0..2);
            let x = randn(r, &d);
            unary(x, &d, r, move |x| x.l2_normalize(axis).unwrap())
        }),
        ("pairwise_sq_distance", |r, _| {
            let d = dims(r, 1, 5, 3);
            let (a, b) = (randn(r, &[d[0], d[2]]), randn(r, &[d[1], d[2]]));
            binary(a, b, &[d[0], d[1]], r, |a, b| a.pairwise_sq_distance(b).unwrap())
        }),
        ("gather", |r, _| {
            let d = dims(r, 1, 5, 2);
            let len = d[0] * d[1];
            let idx: Vec<usize> = (0..r.random_range(1..=8)).map(|_| r.random_range(0..len)).collect();
            let x = randn(r, &d);
            let n = idx.len();
            unary(x, &[n], r, move |x| x.gather(&idx).unwrap())
        }),
        ("conv2d+relu+mean", |r, _| conv_relu_mean_case(r)),
        ("multi_similarity_loss", |r, _| ms_case(r)),
        ("triplet_loss", |r, _| triplet_case(r)),
        ("log_ratio_loss", |r, _| log_ratio_case(r)),
    ]
}

pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub failures: usize,
}

pub fn run_suite(cases: usize, seed: u64) -> Vec<SuiteResult> {
    generators()
        .into_iter()
        .enumerate()
        .map(|(g, (name, make))| {
            let mut worst = 0.0f64;
            let mut failures = 0;
            for i in 0..cases {
                let mut r = super::stream(fsml::rng::child(fsml::rng::child(seed, g as u64), i as u64));
                let err = check(&make(&mut r, i));
                worst = worst.max(err);
                failures += usize::from(err.is_nan() || err >= TOLERANCE);
            }
            SuiteResult {
                name,
                cases,
                worst,
                failures,
            }
        })
        .collect()
}

/// Gradient check of the full embedding model (MLP or conv, with a random
/// rectifier) with respect to every parameter. `None` if a stencil point
/// changes the relu activation pattern, or if an embedding sits near the
/// normalization floor.
pub fn model_check(r: &mut Stream, conv: bool) -> Option<f64> {
    let arch = if conv {
        Architecture::Conv {
            in_channels: 2,
            image_size: 4,
            channels: vec![3],
            embed_dim: 3,
        }
    } else {
        Architecture::Mlp {
            input_dim: 3,
            hidden: vec![4, 3],
            embed_dim: 3,
        }
    };
    let mut net = RectifiedModel::with_identity_rectifier(EmbeddingModel::<f64>::new(arch.clone(), r).unwrap());
    let ids = net.all_ids();
    for &id in &ids {
        if matches!(id, ParamId::Gamma(_) | ParamId::Beta(_)) {
            for v in net.param_mut(id).unwrap().data_mut() {
                *v += 0.3 * (r.random::<f64>() - 0.5);
            }
        }
    }
    let mut in_shape = vec![3];
    in_shape.extend(arch.input_shape());
    let x = randn(r, &in_shape);
    let w = randn(r, &[3, 3]);
    let value = |net: &RectifiedModel<f64>| -> (f64, Vec<bool>) {
        let tape = Tape::new();
        let f = net.forward(&tape, tape.constant(x.clone()), &[]).unwrap();
        let (pattern, _) = hidden_pattern(net, &x);
        (project(f.embedding, &w).item(), pattern)
    };
    let tape = Tape::new();
    let f = net.forward(&tape, tape.constant(x.clone()), &ids).unwrap();
    let grads = tape.backward(project(f.embedding, &w)).unwrap();
    let (_, base_pattern) = value(&net);
    if hidden_pattern(&net, &x).1 < 0.1 {
        return None;
    }
    let mut worst = 0.0f64;
    for (id, var) in &f.params {
        let g = grads.wrt(*var);
        for i in 0..g.len() {
            let mut stable = true;
            let fd = five_point(|delta| {
                let mut moved = net.clone();
                moved.param_mut(*id).unwrap().data_mut()[i] += delta;
                let (v, pattern) = value(&moved);
                stable &= pattern == base_pattern;
                v
            });
            if !stable {
                return None;
            }
            worst = worst.max(rel_error(g.data()[i], fd));
        }
    }
    Some(worst)
}

/// Signs of every hidden pre-activation, recomputed outside the model, plus
/// which element wins each pooling window; and the smallest row norm of the
/// head output ahead of normalization.
fn hidden_pattern(net: &RectifiedModel<f64>, x: &Tensor<f64>) -> (Vec<bool>, f64) {
    let tape = Tape::new();
    let mut h = tape.constant(x.clone());
    let conv = matches!(net.model.architecture(), Architecture::Conv { .. });
    let mut pattern = Vec::new();
    for l in 0..net.model.blocks().len() {
        let mut w = tape.constant(net.param(ParamId::Weight(l)).unwrap().clone());
        let mut b = tape.constant(net.param(ParamId::Bias(l)).unwrap().clone());
        if let Some(g) = net.param(ParamId::Gamma(l)) {
            w = w.mul(tape.constant(g.clone())).unwrap();
            b = b.add(tape.constant(net.param(ParamId::Beta(l)).unwrap().clone())).unwrap();
        }
        let pre = if conv {
            h.conv2d(w, Some(b), 1, 1).unwrap()
        } else {
            h.matmul(w.t().unwrap()).unwrap().add(b).unwrap()
        };
        pattern.extend(pre.to_tensor().data().iter().map(|&p| p > 0.0));
        h = pre.relu();
        if conv {
            let v = h.to_tensor();
            let s = v.shape().to_vec();
            for p in 0..s[0] * s[1] {
                for i in 0..s[2] / 2 {
                    for j in 0..s[3] / 2 {
                        let at = |a: usize, b: usize| v.data()[(p * s[2] + 2 * i + a) * s[3] + 2 * j + b];
                        let win = [at(0, 0), at(0, 1), at(1, 0), at(1, 1)];
                        let best = (0..4).fold(0, |m, k| if win[k] > win[m] { k } else { m });
                        pattern.extend((0..4).map(|k| k == best));
                    }
                }
            }
            h = h.maxpool2d(2).unwrap();
        }
    }
    let rows = x.shape()[0];
    let flat = h.reshape(&[rows, h.to_tensor().len() / rows]).unwrap();
    let head_w = tape.constant(net.param(ParamId::HeadWeight).unwrap().clone());
    let head_b = tape.constant(net.param(ParamId::HeadBias).unwrap().clone());
    let head = flat.matmul(head_w.t().unwrap()).unwrap().add(head_b).unwrap().to_tensor();
    let e = head.len() / rows;
    let min_norm = head
        .data()
        .chunks(e)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min);
    (pattern, min_norm)
}

