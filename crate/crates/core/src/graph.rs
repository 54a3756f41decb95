//! Graph-based reasoning over multi-scale appearance and geometry nodes.
//!
//! One graph is built per feature level. Each modality contributes `n` nodes,
//! one per pyramid-pooling scale, so the graph has `2n` nodes. Nodes of the
//! same modality are fully connected; across modalities only nodes of equal
//! scale are linked, in both directions.
//!
//! Each of the `T` iterations computes edge embeddings
//! `e(k,l) = conv3x3(v_l - v_k)`, aggregates messages
//! `m_l = sum over k in N(l) of sigmoid(e(k,l)) * v_k`, and updates every node
//! once with a shared convolutional GRU. When guidance from a deeper graph is
//! attached, each updated node is then channel-gated by its modality's
//! attention vector.

use rand::Rng;

use crate::cascade::GuidancePair;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::tensor::{ParamStore, Scalar, Tape, Var};
use crate::Modality;

/// Identity of one graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeTag {
    pub modality: Modality,
    /// Zero-based pyramid scale index.
    pub scale: usize,
}

/// Directed edge `from -> to` between node indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Debug)]
pub struct GraphTopology {
    scales: usize,
    nodes: Vec<NodeTag>,
    edges: Vec<Edge>,
    incoming: Vec<Vec<usize>>,
}

impl GraphTopology {
    /// Default node order: appearance scales `0..n`, then geometry scales.
    pub fn new(scales: usize) -> Result<Self> {
        let nodes = Modality::ALL
            .iter()
            .flat_map(|&modality| (0..scales).map(move |scale| NodeTag { modality, scale }))
            .collect();
        Self::with_nodes(scales, nodes)
    }

    /// Same graph with nodes listed in the given order. The order must be a
    /// permutation of the default node set.
    pub fn with_nodes(scales: usize, nodes: Vec<NodeTag>) -> Result<Self> {
        if scales == 0 {
            return Err(Error::Config("a graph needs at least one scale".into()));
        }
        let mut seen = vec![false; 2 * scales];
        for t in &nodes {
            let slot = t.modality.index() * scales + t.scale;
            if t.scale >= scales || seen[slot] {
                return Err(Error::Config(format!("invalid or repeated node {t:?}")));
            }
            seen[slot] = true;
        }
        if nodes.len() != 2 * scales {
            return Err(Error::Config(format!(
                "expected {} nodes, got {}",
                2 * scales,
                nodes.len()
            )));
        }
        let mut edges = Vec::new();
        for (k, a) in nodes.iter().enumerate() {
            for (l, b) in nodes.iter().enumerate() {
                let linked = if a.modality == b.modality {
                    k != l
                } else {
                    a.scale == b.scale
                };
                if linked {
                    edges.push(Edge { from: k, to: l });
                }
            }
        }
        let mut incoming = vec![Vec::new(); nodes.len()];
        for (i, e) in edges.iter().enumerate() {
            incoming[e.to].push(i);
        }
        Ok(Self {
            scales,
            nodes,
            edges,
            incoming,
        })
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn nodes(&self) -> &[NodeTag] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Indices into [`edges`](Self::edges) of the edges entering `node`.
    pub fn incoming(&self, node: usize) -> &[usize] {
        &self.incoming[node]
    }

    pub fn position(&self, tag: NodeTag) -> Option<usize> {
        self.nodes.iter().position(|t| *t == tag)
    }

    /// Node indices of one modality, ordered by scale.
    pub fn modality_nodes(&self, modality: Modality) -> Vec<usize> {
        (0..self.scales)
            .map(|scale| self.position(NodeTag { modality, scale }).expect("complete node set"))
            .collect()
    }
}

/// Pyramid-pooling scales `2, 4, 8, ...` (`n` of them), each clipped to `limit`.
pub fn default_scales(n: usize, limit: usize) -> Vec<usize> {
    (1..=n).map(|i| (1usize << i.min(30)).min(limit)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrConfig {
    /// Channels of the incoming feature maps (same for both modalities).
    pub in_channels: usize,
    /// Node embedding channels `c`.
    pub node_channels: usize,
    /// Pooled output size of each scale.
    pub scales: Vec<usize>,
    /// Message-passing iterations `T`.
    pub iterations: usize,
}

impl GrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("graph reasoning needs at least one iteration".into()));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::Config(format!("invalid scales {:?}", self.scales)));
        }
        if self.in_channels == 0 || self.node_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Convolutional GRU cell over `c`-channel maps.
#[derive(Clone, Debug)]
pub struct ConvGru {
    pub update: Conv2d,
    pub reset: Conv2d,
    pub candidate: Conv2d,
}

impl ConvGru {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, c: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            update: Conv2d::new(store, &format!("{name}.z"), 2 * c, c, 3, 1, rng)?,
            reset: Conv2d::new(store, &format!("{name}.r"), 2 * c, c, 3, 1, rng)?,
            candidate: Conv2d::new(store, &format!("{name}.h"), 2 * c, c, 3, 1, rng)?,
        })
    }
}

/// Parameters of one graph-reasoning module.
#[derive(Clone, Debug)]
pub struct GrParams {
    pub config: GrConfig,
    /// 1x1 projections, indexed `modality * n + scale`.
    pub projections: Vec<Conv2d>,
    pub edge: Conv2d,
    pub gru: ConvGru,
    /// Per-modality merge, indexed by [`Modality::index`].
    pub merge: [Conv2d; 2],
}

impl GrParams {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, config: GrConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (cin, c, n) = (config.in_channels, config.node_channels, config.scales.len());
        let mut projections = Vec::with_capacity(2 * n);
        for m in Modality::ALL {
            for i in 0..n {
                projections.push(Conv2d::new(
                    store,
                    &format!("{name}.proj.{}.s{i}", m.tag()),
                    cin,
                    c,
                    1,
                    1,
                    rng,
                )?);
            }
        }
        let edge = Conv2d::new(store, &format!("{name}.edge"), c, c, 3, 1, rng)?;
        let gru = ConvGru::new(store, &format!("{name}.gru"), c, rng)?;
        let merge = [
            Conv2d::new(
                store,
                &format!("{name}.merge.{}", Modality::Appearance.tag()),
                n * c,
                c,
                3,
                1,
                rng,
            )?,
            Conv2d::new(
                store,
                &format!("{name}.merge.{}", Modality::Geometry.tag()),
                n * c,
                c,
                3,
                1,
                rng,
            )?,
        ];
        Ok(Self {
            config,
            projections,
            edge,
            gru,
            merge,
        })
    }

    pub fn projection(&self, tag: NodeTag) -> &Conv2d {
        &self.projections[tag.modality.index() * self.config.scales.len() + tag.scale]
    }
}

/// Node embeddings of one graph during message passing.
#[derive(Clone, Debug)]
pub struct GraphState {
    /// One `(1, c, h, w)` map per topology node.
    pub nodes: Vec<Var>,
    pub iteration: usize,
    pub guidance: Option<GuidancePair>,
}

/// Initial embeddings of one modality's nodes:
/// `resize(conv1x1(adaptive_avg_pool(feat, s_i)), h, w)` for each scale.
pub fn build_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &GrParams,
    feat: Var,
    modality: Modality,
    target_hw: (usize, usize),
) -> Result<Vec<Var>> {
    let fs = tape.shape(feat);
    let mut out = Vec::with_capacity(params.config.scales.len());
    for (scale, &s) in params.config.scales.iter().enumerate() {
        if s > fs.h.min(fs.w) {
            return Err(Error::Config(format!(
                "pooling scale {s} exceeds feature extent {}x{}",
                fs.h, fs.w
            )));
        }
        let pooled = tape.adaptive_avg_pool(feat, s, s)?;
        let proj = params
            .projection(NodeTag { modality, scale })
            .forward(tape, store, pooled)?;
        out.push(tape.bilinear_resize(proj, target_hw.0, target_hw.1)?);
    }
    Ok(out)
}

/// Edge embeddings in topology edge order.
///
/// The convolution is linear, so `conv(v_l - v_k) = W*v_l - W*v_k + b`; each
/// node is convolved once per iteration instead of once per edge.
pub fn compute_edges<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &GrParams,
    state: &GraphState,
    topology: &GraphTopology,
) -> Result<Vec<Var>> {
    let projected = state
        .nodes
        .iter()
        .map(|&v| params.edge.forward_linear(tape, store, v))
        .collect::<Result<Vec<_>>>()?;
    let bias = params.edge.bias_var(tape, store);
    topology
        .edges()
        .iter()
        .map(|e| {
            let diff = tape.sub(projected[e.to], projected[e.from])?;
            tape.add_bias(diff, bias)
        })
        .collect()
}

/// `m_l = sum over incoming edges (k, l) of sigmoid(e(k,l)) * v_k`.
pub fn aggregate_messages<S: Scalar>(
    tape: &mut Tape<S>,
    state: &GraphState,
    edges: &[Var],
    topology: &GraphTopology,
) -> Result<Vec<Var>> {
    (0..topology.node_count())
        .map(|l| {
            let incoming = topology.incoming(l);
            if incoming.is_empty() {
                return Err(Error::Usage(format!("node {l} has no incoming edges")));
            }
            let terms = incoming
                .iter()
                .map(|&ei| {
                    let gate = tape.sigmoid(edges[ei])?;
                    tape.mul(gate, state.nodes[topology.edges()[ei].from])
                })
                .collect::<Result<Vec<_>>>()?;
            tape.add_all(&terms)
        })
        .collect()
}

/// One ConvGRU step:
/// `z = sig(Wz*[v,m])`, `r = sig(Wr*[v,m])`, `h = tanh(Wh*[r.v, m])`,
/// `v' = (1 - z).v + z.h`.
pub fn gru_update<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore<S>, gru: &ConvGru, v: Var, m: Var) -> Result<Var> {
    let vm = tape.concat_channels(&[v, m])?;
    let z = gru.update.forward(tape, store, vm)?;
    let z = tape.sigmoid(z)?;
    let r = gru.reset.forward(tape, store, vm)?;
    let r = tape.sigmoid(r)?;
    let rv = tape.mul(r, v)?;
    let rvm = tape.concat_channels(&[rv, m])?;
    let h = gru.candidate.forward(tape, store, rvm)?;
    let h = tape.tanh(h)?;
    // (1 - z) v + z h  ==  v + z (h - v)
    let delta = tape.sub(h, v)?;
    let step = tape.mul(z, delta)?;
    tape.add(v, step)
}

/// Channel attention `sigmoid(global_avg_pool(g))`.
pub fn guidance_attention<S: Scalar>(tape: &mut Tape<S>, guidance: Var) -> Result<Var> {
    let pooled = tape.global_avg_pool(guidance)?;
    tape.sigmoid(pooled)
}

/// Result of one graph-reasoning pass.
#[derive(Clone, Debug)]
pub struct GrOutput {
    pub appearance: Var,
    pub geometry: Var,
    /// Node states after the last iteration (used for guidance generation).
    pub state: GraphState,
}

/// Builds nodes, runs `T` rounds of message passing and merges each
/// modality's nodes into one embedding.
pub fn run_gr<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &GrParams,
    topology: &GraphTopology,
    feat_c: Var,
    feat_d: Var,
    guidance: Option<&GuidancePair>,
) -> Result<GrOutput> {
    params.config.validate()?;
    if topology.scales() != params.config.scales.len() {
        return Err(Error::Config(format!(
            "topology has {} scales, parameters {}",
            topology.scales(),
            params.config.scales.len()
        )));
    }
    let (sc, sd) = (tape.shape(feat_c), tape.shape(feat_d));
    if (sc.n, sc.h, sc.w) != (sd.n, sd.h, sd.w) {
        return Err(Error::dim("run_gr", format!("appearance {sc} vs geometry {sd}")));
    }
    let target = (sc.h, sc.w);
    let initial = [
        build_nodes(tape, store, params, feat_c, Modality::Appearance, target)?,
        build_nodes(tape, store, params, feat_d, Modality::Geometry, target)?,
    ];
    let nodes = topology
        .nodes()
        .iter()
        .map(|t| initial[t.modality.index()][t.scale])
        .collect();

    let gates = match guidance {
        Some(g) => Some([
            guidance_attention(tape, g.appearance)?,
            guidance_attention(tape, g.geometry)?,
        ]),
        None => None,
    };
    let mut state = GraphState {
        nodes,
        iteration: 0,
        guidance: guidance.cloned(),
    };
    for _ in 0..params.config.iterations {
        let edges = compute_edges(tape, store, params, &state, topology)?;
        let messages = aggregate_messages(tape, &state, &edges, topology)?;
        let mut next = Vec::with_capacity(state.nodes.len());
        for (l, (&v, &m)) in state.nodes.iter().zip(&messages).enumerate() {
            let mut updated = gru_update(tape, store, &params.gru, v, m)?;
            if let Some(gates) = &gates {
                let gate = gates[topology.nodes()[l].modality.index()];
                updated = tape.scale_channels(updated, gate)?;
            }
            next.push(updated);
        }
        state.nodes = next;
        state.iteration += 1;
    }

    let mut merged = [None, None];
    for m in Modality::ALL {
        let maps: Vec<Var> = topology.modality_nodes(m).into_iter().map(|i| state.nodes[i]).collect();
        let cat = tape.concat_channels(&maps)?;
        merged[m.index()] = Some(params.merge[m.index()].forward(tape, store, cat)?);
    }
    Ok(GrOutput {
        appearance: merged[0].expect("merged"),
        geometry: merged[1].expect("merged"),
        state,
    })
}

/// Saliency readout: concat, two 1x1 convolutions, resize to the input size.
#[derive(Clone, Debug)]
pub struct Readout {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl Readout {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            first: Conv2d::new(store, &format!("{name}.0"), in_channels, hidden, 1, 1, rng)?,
            second: Conv2d::new(store, &format!("{name}.1"), hidden, 1, 1, 1, rng)?,
        })
    }

    /// Single-channel logit map of size `out_hw`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        inputs: &[Var],
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let cat = tape.concat_channels(inputs)?;
        let hidden = self.first.forward(tape, store, cat)?;
        let logits = self.second.forward(tape, store, hidden)?;
        tape.bilinear_resize(logits, out_hw.0, out_hw.1)
    }
}
