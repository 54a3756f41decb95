//! End-to-end saliency models: twin encoders plus one of three heads.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::cascade::{run_fusion_baseline, run_levels, CascadeConfig, CascadeParams, FusionBaseline};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Shape, Tape, Tensor, Var};
use crate::Modality;

/// Which head sits on top of the encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Concatenate the deepest features and read out directly.
    Fusion,
    /// Independent graph reasoning per level, fused.
    Hierarchical,
    /// Graphs chained deepest first through guidance nodes, fused.
    Cascade,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Fusion, Mode::Hierarchical, Mode::Cascade];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Fusion => "fusion",
            Mode::Hierarchical => "hr",
            Mode::Cascade => "cgr",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected fusion, hr or cgr)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Input (height, width).
    pub input_size: (usize, usize),
    /// Pyramid levels `W`, taken from the front of `level_channels`.
    pub levels: usize,
    pub level_channels: Vec<usize>,
    /// Node embedding channels `c`.
    pub node_channels: usize,
    /// Scales per modality `n`.
    pub scales: usize,
    /// Message-passing iterations `T`.
    pub iterations: usize,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cascade,
            input_size: (64, 64),
            levels: 3,
            level_channels: vec![8, 16, 32],
            node_channels: 16,
            scales: 3,
            iterations: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> Result<BackboneConfig> {
        if self.levels == 0 || self.levels > self.level_channels.len() {
            return Err(Error::Config(format!(
                "{} levels requested but {} level widths configured",
                self.levels,
                self.level_channels.len()
            )));
        }
        let cfg = BackboneConfig {
            input_size: self.input_size,
            level_channels: self.level_channels[..self.levels].to_vec(),
            level_strides: (1..=self.levels).map(|l| 1 << l).collect(),
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cascade(&self) -> Result<CascadeConfig> {
        let bb = self.backbone()?;
        let shapes = bb.level_shapes();
        let cfg = CascadeConfig {
            level_channels: shapes.iter().map(|s| s.0).collect(),
            level_sizes: shapes.iter().map(|s| (s.1, s.2)).collect(),
            node_channels: self.node_channels,
            scales: self.scales,
            iterations: self.iterations,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.cascade().map(|_| ())
    }

    /// `key=value` lines describing this configuration.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("model.mode".into(), self.mode.to_string()),
            ("data.size".into(), size_string(self.input_size)),
            ("cascade.w".into(), self.levels.to_string()),
            ("model.channels".into(), list(&self.level_channels)),
            ("graph.c".into(), self.node_channels.to_string()),
            ("graph.n".into(), self.scales.to_string()),
            ("graph.t".into(), self.iterations.to_string()),
            ("model.seed".into(), self.seed.to_string()),
        ]
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` when the key is
    /// not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "model.mode" => self.mode = value.parse()?,
            "data.size" => self.input_size = parse_size(value)?,
            "cascade.w" => self.levels = parse_num(key, value)?,
            "model.channels" => {
                self.level_channels = value
                    .split(',')
                    .map(|v| parse_num(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "graph.c" => self.node_channels = parse_num(key, value)?,
            "graph.n" => self.scales = parse_num(key, value)?,
            "graph.t" => self.iterations = parse_num(key, value)?,
            "model.seed" => self.seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn size_string((h, w): (usize, usize)) -> String {
    if h == w {
        h.to_string()
    } else {
        format!("{h}x{w}")
    }
}

/// `64` or `64x48` (height x width).
pub fn parse_size(value: &str) -> Result<(usize, usize)> {
    match value.split_once('x') {
        Some((h, w)) => Ok((parse_num("size", h)?, parse_num("size", w)?)),
        None => {
            let s = parse_num("size", value)?;
            Ok((s, s))
        }
    }
}

#[derive(Clone, Debug)]
enum Head {
    Fusion(FusionBaseline),
    Graph(Box<CascadeParams>),
}

/// Model structure. Parameter values live in a separate [`ParamStore`] so
/// the same model can be evaluated in either precision.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    encoders: [Backbone; 2],
    head: Head,
}

impl Model {
    /// Registers all parameters in `store`, initialized from `config.seed`.
    pub fn new<S: Scalar>(config: ModelConfig, store: &mut ParamStore<S>) -> Result<Self> {
        let bb = config.backbone()?;
        let cascade = config.cascade()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoders = [
            Backbone::new(&bb, Modality::Appearance, store, &mut rng)?,
            Backbone::new(&bb, Modality::Geometry, store, &mut rng)?,
        ];
        let head = match config.mode {
            Mode::Fusion => Head::Fusion(FusionBaseline::new(
                store,
                *cascade.level_channels.last().expect("validated"),
                config.node_channels,
                &mut rng,
            )?),
            Mode::Hierarchical => Head::Graph(Box::new(CascadeParams::new(store, cascade, false, &mut rng)?)),
            Mode::Cascade => Head::Graph(Box::new(CascadeParams::new(store, cascade, true, &mut rng)?)),
        };
        Ok(Self { config, encoders, head })
    }

    /// Convenience constructor with a fresh store.
    pub fn init<S: Scalar>(config: ModelConfig) -> Result<(Self, ParamStore<S>)> {
        let mut store = ParamStore::new();
        let model = Self::new(config, &mut store)?;
        Ok((model, store))
    }

    pub fn encoder(&self, modality: Modality) -> &Backbone {
        &self.encoders[modality.index()]
    }

    pub fn cascade_params(&self) -> Option<&CascadeParams> {
        match &self.head {
            Head::Graph(p) => Some(p),
            Head::Fusion(_) => None,
        }
    }

    /// Saliency logits `(N, 1, H, W)` for a batch of color images
    /// `(N, 3, H, W)` and depth maps `(N, 1, H, W)`.
    pub fn logits<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, rgb: Var, depth: Var) -> Result<Var> {
        let (a, d) = (tape.shape(rgb), tape.shape(depth));
        if (a.n, a.h, a.w) != (d.n, d.h, d.w) {
            return Err(Error::dim("forward", format!("rgb {a} and depth {d} differ in size")));
        }
        if (a.h, a.w) != self.config.input_size {
            return Err(Error::dim(
                "forward",
                format!(
                    "input {}x{} but the model expects {:?}",
                    a.h, a.w, self.config.input_size
                ),
            ));
        }
        let pa = self.encoders[0].encode(tape, store, rgb)?;
        let pd = self.encoders[1].encode(tape, store, depth)?;
        let out_hw = (a.h, a.w);
        match &self.head {
            Head::Fusion(p) => run_fusion_baseline(tape, store, p, &pa, &pd, out_hw),
            Head::Graph(p) => Ok(run_levels(tape, store, p, &pa, &pd, out_hw)?.logits),
        }
    }

    /// Saliency probabilities `sigmoid(logits)` without recording gradients.
    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, rgb: &Tensor<S>, depth: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let r = tape.constant(rgb.clone());
        let d = tape.constant(depth.clone());
        let logits = self.logits(&mut tape, store, r, d)?;
        let probs = tape.sigmoid(logits)?;
        Ok(tape.value(probs).clone())
    }

    /// Parameter tensor names with their shapes, in registration order.
    pub fn parameter_shapes<S: Scalar>(store: &ParamStore<S>) -> Vec<(String, Shape)> {
        store.iter().map(|(_, n, t)| (n.to_owned(), t.shape())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("bogus".parse::<Mode>().is_err());
    }

    #[test]
    fn config_pairs_round_trip() {
        let cfg = ModelConfig {
            mode: Mode::Hierarchical,
            input_size: (32, 48),
            scales: 2,
            iterations: 5,
            seed: 9,
            ..Default::default()
        };
        let mut back = ModelConfig::default();
        for (k, v) in cfg.to_pairs() {
            assert!(back.set(&k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set("train.lr", "1").unwrap());
    }

    #[test]
    fn parameter_counts_grow_with_the_head() {
        let count = |mode| {
            let (_, s) = Model::init::<f32>(ModelConfig {
                mode,
                ..Default::default()
            })
            .unwrap();
            s.numel()
        };
        let (f, h, c) = (count(Mode::Fusion), count(Mode::Hierarchical), count(Mode::Cascade));
        assert!(f < h && h < c, "{f} {h} {c}");
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = ModelConfig {
            input_size: (63, 63),
            ..Default::default()
        };
        assert!(matches!(Model::init::<f32>(cfg), Err(Error::Config(_))));
    }
}
