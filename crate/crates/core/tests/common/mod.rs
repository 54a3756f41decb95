//! Direct nested-loop reference implementations used as test oracles.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod metric;

use casgnn::cascade::{CascadeParams, GuidancePair};
use casgnn::graph::{GrParams, GraphTopology, Readout};
use casgnn::nn::Conv2d;
use casgnn::tensor::{ParamStore, Shape, Tape, Tensor, Var};
use casgnn::Modality;
use rand::Rng;

pub type T = Tensor<f64>;

pub fn random_shape(rng: &mut impl Rng) -> Shape {
    Shape::new(
        rng.gen_range(1..=2),
        rng.gen_range(1..=4),
        rng.gen_range(1..=9),
        rng.gen_range(1..=9),
    )
}

pub fn random(shape: Shape, rng: &mut impl Rng) -> T {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

pub fn max_diff(a: &T, b: &T) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn conv(x: &T, w: &T, b: Option<&T>, stride: usize, pad: usize) -> T {
    let (xs, ws) = (x.shape(), w.shape());
    assert_eq!(xs.c, ws.c);
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, o, y, xx| {
        let mut acc = b.map_or(0.0, |b| b.get(0, o, 0, 0));
        for c in 0..xs.c {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (xx * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                        acc += x.get(n, c, iy as usize, ix as usize) * w.get(o, c, ky, kx);
                    }
                }
            }
        }
        acc
    })
}

/// Same-padded convolution with a layer's stored parameters.
pub fn conv_layer(store: &ParamStore<f64>, layer: &Conv2d, x: &T) -> T {
    conv(
        x,
        store.get(layer.weight),
        Some(store.get(layer.bias)),
        layer.stride,
        layer.padding,
    )
}

pub fn pool(x: &T, oh: usize, ow: usize) -> T {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, i, j| {
        let y0 = (i as f64 * s.h as f64 / oh as f64).floor() as usize;
        let y1 = ((i + 1) as f64 * s.h as f64 / oh as f64).ceil() as usize;
        let x0 = (j as f64 * s.w as f64 / ow as f64).floor() as usize;
        let x1 = ((j + 1) as f64 * s.w as f64 / ow as f64).ceil() as usize;
        let mut acc = 0.0;
        let mut count = 0;
        for y in y0..y1 {
            for xx in x0..x1 {
                acc += x.get(n, c, y, xx);
                count += 1;
            }
        }
        acc / count as f64
    })
}

fn source(d: usize, len_in: usize, len_out: usize) -> (usize, usize, f64) {
    let src = (d as f64 + 0.5) * len_in as f64 / len_out as f64 - 0.5;
    let src = src.max(0.0).min((len_in - 1) as f64);
    let lo = src.floor() as usize;
    (lo, (lo + 1).min(len_in - 1), src - lo as f64)
}

pub fn resize(x: &T, oh: usize, ow: usize) -> T {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, i, j| {
        let (y0, y1, fy) = source(i, s.h, oh);
        let (x0, x1, fx) = source(j, s.w, ow);
        let top = x.get(n, c, y0, x0) * (1.0 - fx) + x.get(n, c, y0, x1) * fx;
        let bottom = x.get(n, c, y1, x0) * (1.0 - fx) + x.get(n, c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn gap(x: &T) -> T {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
        let mut acc = 0.0;
        for y in 0..s.h {
            for xx in 0..s.w {
                acc += x.get(n, c, y, xx);
            }
        }
        acc / (s.h * s.w) as f64
    })
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn map(x: &T, f: impl Fn(f64) -> f64) -> T {
    Tensor::from_fn(x.shape(), |n, c, y, xx| f(x.get(n, c, y, xx)))
}

pub fn zip(a: &T, b: &T, f: impl Fn(f64, f64) -> f64) -> T {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_fn(a.shape(), |n, c, y, x| f(a.get(n, c, y, x), b.get(n, c, y, x)))
}

pub fn concat(parts: &[&T]) -> T {
    let s = parts[0].shape();
    let total: usize = parts.iter().map(|p| p.shape().c).sum();
    Tensor::from_fn(Shape::new(s.n, total, s.h, s.w), |n, mut c, y, x| {
        for p in parts {
            if c < p.shape().c {
                return p.get(n, c, y, x);
            }
            c -= p.shape().c;
        }
        unreachable!()
    })
}

/// Multiplies channel `c` of `x` by `gate[c]`.
pub fn scale_channels(x: &T, gate: &T) -> T {
    Tensor::from_fn(x.shape(), |n, c, y, xx| x.get(n, c, y, xx) * gate.get(n, c, 0, 0))
}

/// `sigmoid(GAP(g))`.
pub fn attention(g: &T) -> T {
    map(&gap(g), sigmoid)
}

pub fn edge(store: &ParamStore<f64>, p: &GrParams, vk: &T, vl: &T) -> T {
    conv_layer(store, &p.edge, &zip(vl, vk, |a, b| a - b))
}

/// Whether node `k` sends to node `l`: any other node of the same modality,
/// or the node of the other modality at the same scale.
pub fn linked(topo: &GraphTopology, k: usize, l: usize) -> bool {
    let (a, b) = (topo.nodes()[k], topo.nodes()[l]);
    if a.modality == b.modality {
        k != l
    } else {
        a.scale == b.scale
    }
}

/// `sum_k sigmoid(conv(v_l - v_k)) * v_k` over the senders of each node.
pub fn messages(store: &ParamStore<f64>, p: &GrParams, nodes: &[T], topo: &GraphTopology) -> Vec<T> {
    (0..nodes.len())
        .map(|l| {
            let mut acc = Tensor::zeros(nodes[l].shape());
            for k in 0..nodes.len() {
                if linked(topo, k, l) {
                    let gate = map(&edge(store, p, &nodes[k], &nodes[l]), sigmoid);
                    acc = zip(&acc, &zip(&gate, &nodes[k], |g, v| g * v), |a, b| a + b);
                }
            }
            acc
        })
        .collect()
}

pub fn gru(store: &ParamStore<f64>, p: &GrParams, v: &T, m: &T) -> T {
    let vm = concat(&[v, m]);
    let z = map(&conv_layer(store, &p.gru.update, &vm), sigmoid);
    let r = map(&conv_layer(store, &p.gru.reset, &vm), sigmoid);
    let rv = zip(&r, v, |a, b| a * b);
    let h = map(&conv_layer(store, &p.gru.candidate, &concat(&[&rv, m])), f64::tanh);
    Tensor::from_fn(v.shape(), |n, c, y, x| {
        let z = z.get(n, c, y, x);
        (1.0 - z) * v.get(n, c, y, x) + z * h.get(n, c, y, x)
    })
}

pub fn build_nodes(store: &ParamStore<f64>, p: &GrParams, feat: &T, modality: Modality, hw: (usize, usize)) -> Vec<T> {
    p.config
        .scales
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let proj = &p.projections[modality.index() * p.config.scales.len() + i];
            resize(&conv_layer(store, proj, &pool(feat, s, s)), hw.0, hw.1)
        })
        .collect()
}

pub struct GrOracle {
    pub appearance: T,
    pub geometry: T,
    /// Final node states in topology order.
    pub nodes: Vec<T>,
}

/// The whole graph-reasoning module, unrolled.
pub fn run_gr(
    store: &ParamStore<f64>,
    p: &GrParams,
    topo: &GraphTopology,
    feat_c: &T,
    feat_d: &T,
    guidance: Option<(&T, &T)>,
) -> GrOracle {
    let s = feat_c.shape();
    let init = [
        build_nodes(store, p, feat_c, Modality::Appearance, (s.h, s.w)),
        build_nodes(store, p, feat_d, Modality::Geometry, (s.h, s.w)),
    ];
    let mut nodes: Vec<T> = topo
        .nodes()
        .iter()
        .map(|t| init[t.modality.index()][t.scale].clone())
        .collect();
    let gates = guidance.map(|(a, g)| [attention(a), attention(g)]);
    for _ in 0..p.config.iterations {
        let m = messages(store, p, &nodes, topo);
        nodes = nodes
            .iter()
            .zip(&m)
            .enumerate()
            .map(|(l, (v, m))| {
                let u = gru(store, p, v, m);
                match &gates {
                    Some(g) => scale_channels(&u, &g[topo.nodes()[l].modality.index()]),
                    None => u,
                }
            })
            .collect();
    }
    let merge = |m: Modality| {
        let maps: Vec<&T> = topo.modality_nodes(m).into_iter().map(|i| &nodes[i]).collect();
        conv_layer(store, &p.merge[m.index()], &concat(&maps))
    };
    GrOracle {
        appearance: merge(Modality::Appearance),
        geometry: merge(Modality::Geometry),
        nodes: nodes.clone(),
    }
}

pub fn readout(store: &ParamStore<f64>, r: &Readout, inputs: &[&T], hw: (usize, usize)) -> T {
    let hidden = conv_layer(store, &r.first, &concat(inputs));
    resize(&conv_layer(store, &r.second, &hidden), hw.0, hw.1)
}

/// Evaluates a tape computation and returns the value of its result.
pub fn eval(f: impl FnOnce(&mut Tape<f64>) -> casgnn::Result<Var>) -> T {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).clone()
}

/// Reads a guidance pair's values off a tape.
pub fn guidance_values(tape: &Tape<f64>, g: &GuidancePair) -> (T, T) {
    (tape.value(g.appearance).clone(), tape.value(g.geometry).clone())
}

/// Replaces every parameter (biases included) with uniform noise in `[-a, a]`.
pub fn randomize(store: &mut ParamStore<f64>, a: f64, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).shape().numel();
        let vals = (0..n).map(|_| rng.gen_range(-a..a)).collect();
        store.set_values(id, vals).unwrap();
    }
}

pub struct CascadeOracle {
    pub logits: T,
    pub embeddings: Vec<(T, T)>,
    pub guidance: Vec<Option<(T, T)>>,
}

/// Composes the module oracles level by level, deepest first.
pub fn cascade(
    store: &ParamStore<f64>,
    p: &CascadeParams,
    feats: &[Vec<T>; 2],
    guided: bool,
    out_hw: (usize, usize),
) -> CascadeOracle {
    let w = p.config.levels();
    let topo = GraphTopology::new(p.config.scales).unwrap();
    let mut embeddings = vec![None; w];
    let mut guidance = vec![None; w];
    let mut pending: Option<(T, T)> = None;
    for l in (0..w).rev() {
        let (h, wd) = p.config.level_sizes[l];
        let received = pending.take().map(|(a, g)| (resize(&a, h, wd), resize(&g, h, wd)));
        let out = run_gr(
            store,
            &p.levels[l],
            &topo,
            &feats[0][l],
            &feats[1][l],
            received.as_ref().map(|(a, g)| (a, g)),
        );
        if guided && l > 0 {
            let coarsen = p.coarsen[l].as_ref().unwrap();
            let per = |m: Modality| {
                let maps: Vec<&T> = topo.modality_nodes(m).into_iter().map(|i| &out.nodes[i]).collect();
                conv_layer(store, &coarsen.convs[m.index()], &concat(&maps))
            };
            pending = Some((per(Modality::Appearance), per(Modality::Geometry)));
        }
        embeddings[l] = Some((out.appearance, out.geometry));
        guidance[l] = received;
    }
    let embeddings: Vec<(T, T)> = embeddings.into_iter().map(Option::unwrap).collect();
    let fused = match &p.fusion {
        None => embeddings[0].clone(),
        Some(convs) => {
            let (h, wd) = p.config.level_sizes[0];
            let fuse = |m: usize| {
                let maps: Vec<T> = embeddings
                    .iter()
                    .map(|e| resize(if m == 0 { &e.0 } else { &e.1 }, h, wd))
                    .collect();
                conv_layer(store, &convs[m], &concat(&maps.iter().collect::<Vec<_>>()))
            };
            (fuse(0), fuse(1))
        }
    };
    CascadeOracle {
        logits: readout(store, &p.readout, &[&fused.0, &fused.1], out_hw),
        embeddings,
        guidance,
    }
}

/// Feature pyramid of one encoder: per level, a stride-2 then a stride-1
/// 3x3 convolution, each followed by ReLU. Reads parameters by name.
pub fn encoder(store: &ParamStore<f64>, modality: Modality, input: &T, levels: usize) -> Vec<T> {
    let conv_named = |name: String, x: &T, stride: usize| {
        let w = store.get(store.id(&format!("{name}.weight")).unwrap());
        let b = store.get(store.id(&format!("{name}.bias")).unwrap());
        map(&conv(x, w, Some(b), stride, 1), |v| v.max(0.0))
    };
    let mut x = input.clone();
    (0..levels)
        .map(|l| {
            let prefix = format!("backbone.{}.l{l}", modality.tag());
            let d = conv_named(format!("{prefix}.down"), &x, 2);
            x = conv_named(format!("{prefix}.refine"), &d, 1);
            x.clone()
        })
        .collect()
}
