//! Cascaded graph reasoning across pyramid levels.
//!
//! Graphs run deepest level first. When a graph finishes, each modality's
//! node states are coarsened into one guidance embedding that channel-gates
//! the same modality's nodes in the next shallower graph. The merged
//! embeddings of all levels are then fused at the shallowest resolution and
//! read out into a saliency logit map.

use rand::Rng;

use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::graph::{default_scales, run_gr, GrConfig, GrParams, GraphState, GraphTopology, Readout};
use crate::nn::Conv2d;
use crate::tensor::{ParamStore, Scalar, Tape, Var};
use crate::Modality;

/// Fixed guidance embeddings handed from one graph to the next.
#[derive(Clone, Debug)]
pub struct GuidancePair {
    pub appearance: Var,
    pub geometry: Var,
    /// Pyramid level of the graph the guidance was coarsened from.
    pub source_level: usize,
}

impl GuidancePair {
    pub fn get(&self, modality: Modality) -> Var {
        match modality {
            Modality::Appearance => self.appearance,
            Modality::Geometry => self.geometry,
        }
    }
}

/// Per-modality graph merging operator: concat the `n` nodes, 3x3 conv.
#[derive(Clone, Debug)]
pub struct Coarsen {
    pub convs: [Conv2d; 2],
}

impl Coarsen {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        scales: usize,
        c: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let a = Conv2d::new(
            store,
            &format!("{name}.{}", Modality::Appearance.tag()),
            scales * c,
            c,
            3,
            1,
            rng,
        )?;
        let g = Conv2d::new(
            store,
            &format!("{name}.{}", Modality::Geometry.tag()),
            scales * c,
            c,
            3,
            1,
            rng,
        )?;
        Ok(Self { convs: [a, g] })
    }
}

pub fn coarsen_to_guidance<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    coarsen: &Coarsen,
    state: &GraphState,
    topology: &GraphTopology,
    source_level: usize,
) -> Result<GuidancePair> {
    let mut out = [None, None];
    for m in Modality::ALL {
        let maps: Vec<Var> = topology.modality_nodes(m).into_iter().map(|i| state.nodes[i]).collect();
        let cat = tape.concat_channels(&maps)?;
        out[m.index()] = Some(coarsen.convs[m.index()].forward(tape, store, cat)?);
    }
    Ok(GuidancePair {
        appearance: out[0].expect("coarsened"),
        geometry: out[1].expect("coarsened"),
        source_level,
    })
}

/// Shape of the cascade shared by every level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CascadeConfig {
    /// Channels of each pyramid level, shallow to deep. `W` is its length.
    pub level_channels: Vec<usize>,
    /// Spatial (h, w) of each pyramid level, shallow to deep.
    pub level_sizes: Vec<(usize, usize)>,
    pub node_channels: usize,
    /// Scales per modality `n`.
    pub scales: usize,
    pub iterations: usize,
}

impl CascadeConfig {
    pub fn levels(&self) -> usize {
        self.level_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_channels.is_empty() {
            return Err(Error::Config("a cascade needs at least one level".into()));
        }
        if self.level_sizes.len() != self.level_channels.len() {
            return Err(Error::Config("one size per cascade level is required".into()));
        }
        if self.scales == 0 || self.iterations == 0 || self.node_channels == 0 {
            return Err(Error::Config(format!(
                "scales ({}), iterations ({}) and node channels ({}) must be positive",
                self.scales, self.iterations, self.node_channels
            )));
        }
        Ok(())
    }

    pub fn gr_config(&self, level: usize) -> GrConfig {
        let (h, w) = self.level_sizes[level];
        GrConfig {
            in_channels: self.level_channels[level],
            node_channels: self.node_channels,
            scales: default_scales(self.scales, h.min(w)),
            iterations: self.iterations,
        }
    }
}

/// Parameters of the hierarchical and cascaded variants.
#[derive(Clone, Debug)]
pub struct CascadeParams {
    pub config: CascadeConfig,
    /// One GR module per pyramid level, shallow to deep.
    pub levels: Vec<GrParams>,
    /// Guidance generators indexed by source level; level 0 never has one.
    /// Empty in hierarchical models.
    pub coarsen: Vec<Option<Coarsen>>,
    /// Per-modality multi-level fusion; absent when `W = 1`.
    pub fusion: Option<[Conv2d; 2]>,
    pub readout: Readout,
}

impl CascadeParams {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        config: CascadeConfig,
        guided: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (c, n, w) = (config.node_channels, config.scales, config.levels());
        let levels = (0..w)
            .map(|l| GrParams::new(store, &format!("gr.l{l}"), config.gr_config(l), rng))
            .collect::<Result<Vec<_>>>()?;
        let coarsen = if guided {
            (0..w)
                .map(|l| {
                    (l > 0)
                        .then(|| Coarsen::new(store, &format!("guide.l{l}"), n, c, rng))
                        .transpose()
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let fusion = if w > 1 {
            Some([
                Conv2d::new(
                    store,
                    &format!("fuse.{}", Modality::Appearance.tag()),
                    w * c,
                    c,
                    3,
                    1,
                    rng,
                )?,
                Conv2d::new(
                    store,
                    &format!("fuse.{}", Modality::Geometry.tag()),
                    w * c,
                    c,
                    3,
                    1,
                    rng,
                )?,
            ])
        } else {
            None
        };
        let readout = Readout::new(store, "readout", 2 * c, c, rng)?;
        Ok(Self {
            config,
            levels,
            coarsen,
            fusion,
            readout,
        })
    }

    pub fn guided(&self) -> bool {
        !self.coarsen.is_empty()
    }
}

/// Intermediate results of a hierarchical or cascaded pass.
#[derive(Clone, Debug)]
pub struct CascadeOutput {
    pub logits: Var,
    /// Merged (appearance, geometry) embeddings per level, shallow to deep.
    pub embeddings: Vec<(Var, Var)>,
    /// Guidance received by each level, shallow to deep.
    pub guidance: Vec<Option<GuidancePair>>,
    /// Final node states per level, shallow to deep.
    pub states: Vec<GraphState>,
}

fn check_pyramids<S: Scalar>(
    tape: &Tape<S>,
    params: &CascadeParams,
    appearance: &FeaturePyramid,
    geometry: &FeaturePyramid,
) -> Result<()> {
    let w = params.config.levels();
    if appearance.levels.len() != geometry.levels.len() {
        return Err(Error::dim(
            "cascade",
            format!(
                "pyramid depths differ: {} vs {}",
                appearance.levels.len(),
                geometry.levels.len()
            ),
        ));
    }
    if appearance.levels.len() != w {
        return Err(Error::dim(
            "cascade",
            format!("expected {w} pyramid levels, got {}", appearance.levels.len()),
        ));
    }
    for (l, &v) in appearance.levels.iter().enumerate() {
        let s = tape.shape(v);
        if (s.h, s.w) != params.config.level_sizes[l] {
            return Err(Error::dim(
                "cascade",
                format!("level {l} is {s}, configured {:?}", params.config.level_sizes[l]),
            ));
        }
    }
    Ok(())
}

/// Runs every level's graph, deepest first, then fuses and reads out.
/// Guidance is passed between levels only when `params` was built guided.
pub fn run_levels<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &CascadeParams,
    appearance: &FeaturePyramid,
    geometry: &FeaturePyramid,
    out_hw: (usize, usize),
) -> Result<CascadeOutput> {
    params.config.validate()?;
    check_pyramids(tape, params, appearance, geometry)?;
    let w = params.config.levels();
    let topology = GraphTopology::new(params.config.scales)?;

    let mut embeddings = vec![None; w];
    let mut guidance = vec![None; w];
    let mut states = vec![None; w];
    let mut pending: Option<GuidancePair> = None;
    for l in (0..w).rev() {
        let received = match pending.take() {
            Some(g) => {
                let (h, wd) = params.config.level_sizes[l];
                Some(GuidancePair {
                    appearance: tape.bilinear_resize(g.appearance, h, wd)?,
                    geometry: tape.bilinear_resize(g.geometry, h, wd)?,
                    source_level: g.source_level,
                })
            }
            None => None,
        };
        let out = run_gr(
            tape,
            store,
            &params.levels[l],
            &topology,
            appearance.levels[l],
            geometry.levels[l],
            received.as_ref(),
        )?;
        if let Some(Some(coarsen)) = params.coarsen.get(l) {
            pending = Some(coarsen_to_guidance(tape, store, coarsen, &out.state, &topology, l)?);
        }
        embeddings[l] = Some((out.appearance, out.geometry));
        guidance[l] = received;
        states[l] = Some(out.state);
    }
    let embeddings: Vec<(Var, Var)> = embeddings.into_iter().map(|e| e.expect("ran")).collect();

    let fused = match &params.fusion {
        None => embeddings[0],
        Some(convs) => {
            let (h, wd) = params.config.level_sizes[0];
            let mut merged = [None, None];
            for m in Modality::ALL {
                let maps = embeddings
                    .iter()
                    .map(|&(a, g)| {
                        let v = if m == Modality::Appearance { a } else { g };
                        tape.bilinear_resize(v, h, wd)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let cat = tape.concat_channels(&maps)?;
                merged[m.index()] = Some(convs[m.index()].forward(tape, store, cat)?);
            }
            (merged[0].expect("fused"), merged[1].expect("fused"))
        }
    };
    let logits = params.readout.forward(tape, store, &[fused.0, fused.1], out_hw)?;
    Ok(CascadeOutput {
        logits,
        embeddings,
        guidance,
        states: states.into_iter().map(|s| s.expect("ran")).collect(),
    })
}

/// Cascade graph reasoning. `params` must have been built guided.
pub fn run_cascade<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &CascadeParams,
    appearance: &FeaturePyramid,
    geometry: &FeaturePyramid,
    out_hw: (usize, usize),
) -> Result<CascadeOutput> {
    if !params.guided() && params.config.levels() > 1 {
        return Err(Error::Config("cascade parameters lack guidance generators".into()));
    }
    run_levels(tape, store, params, appearance, geometry, out_hw)
}

/// Independent per-level reasoning; any guidance parameters are ignored.
pub fn run_hierarchical<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &CascadeParams,
    appearance: &FeaturePyramid,
    geometry: &FeaturePyramid,
    out_hw: (usize, usize),
) -> Result<CascadeOutput> {
    let unguided = CascadeParams {
        coarsen: Vec::new(),
        ..params.clone()
    };
    run_levels(tape, store, &unguided, appearance, geometry, out_hw)
}

/// Baseline without graphs: concat the deepest features of both modalities,
/// two 1x1 convolutions, resize.
#[derive(Clone, Debug)]
pub struct FusionBaseline {
    pub readout: Readout,
}

impl FusionBaseline {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        deepest_channels: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            readout: Readout::new(store, "baseline", 2 * deepest_channels, hidden, rng)?,
        })
    }
}

pub fn run_fusion_baseline<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &FusionBaseline,
    appearance: &FeaturePyramid,
    geometry: &FeaturePyramid,
    out_hw: (usize, usize),
) -> Result<Var> {
    let (Some(&a), Some(&g)) = (appearance.levels.last(), geometry.levels.last()) else {
        return Err(Error::dim("fusion_baseline", "empty feature pyramid"));
    };
    params.readout.forward(tape, store, &[a, g], out_hw)
}
