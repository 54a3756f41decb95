//! Twin toy encoders producing multi-level side outputs for the color image
//! and the depth map.
//!
//! Each level is a stride-2 3x3 convolution followed by a stride-1 3x3
//! convolution, both with ReLU. Levels are ordered shallow to deep.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::tensor::{ParamStore, Scalar, Tape, Var};
use crate::Modality;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Input (height, width) in pixels.
    pub input_size: (usize, usize),
    pub level_channels: Vec<usize>,
    /// Cumulative downsampling factor at each level.
    pub level_strides: Vec<usize>,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            level_channels: vec![8, 16, 32],
            level_strides: vec![2, 4, 8],
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn levels(&self) -> usize {
        self.level_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if self.level_channels.is_empty() || self.level_channels.len() != self.level_strides.len() {
            return Err(Error::Config(format!(
                "backbone needs one stride per level: channels {:?}, strides {:?}",
                self.level_channels, self.level_strides
            )));
        }
        if self.level_channels.contains(&0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        let mut prev = 1;
        for &s in &self.level_strides {
            if s <= prev || s % prev != 0 || s / prev != 2 {
                return Err(Error::Config(format!(
                    "level strides must double at each level, got {:?}",
                    self.level_strides
                )));
            }
            prev = s;
        }
        if h == 0 || w == 0 || h % prev != 0 || w % prev != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} is not divisible by the largest stride {prev}"
            )));
        }
        Ok(())
    }

    /// (channels, height, width) of every level.
    pub fn level_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (h, w) = self.input_size;
        self.level_channels
            .iter()
            .zip(&self.level_strides)
            .map(|(&c, &s)| (c, h / s, w / s))
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Level {
    down: Conv2d,
    refine: Conv2d,
}

/// One encoder's parameters.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub modality: Modality,
    levels: Vec<Level>,
}

/// Side outputs of one encoder, shallow to deep.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub modality: Modality,
    pub levels: Vec<Var>,
}

impl Backbone {
    /// Registers the encoder's convolutions under `backbone.<modality>.*`.
    pub fn new<S: Scalar>(
        config: &BackboneConfig,
        modality: Modality,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut in_c = modality.input_channels();
        let mut levels = Vec::with_capacity(config.levels());
        for (i, &c) in config.level_channels.iter().enumerate() {
            let prefix = format!("backbone.{}.l{i}", modality.tag());
            let down = Conv2d::new(store, &format!("{prefix}.down"), in_c, c, 3, 2, rng)?;
            let refine = Conv2d::new(store, &format!("{prefix}.refine"), c, c, 3, 1, rng)?;
            levels.push(Level { down, refine });
            in_c = c;
        }
        Ok(Self { modality, levels })
    }

    pub fn encode<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, input: Var) -> Result<FeaturePyramid> {
        let want = self.modality.input_channels();
        let got = tape.shape(input).c;
        if got != want {
            return Err(Error::dim(
                "encode",
                format!("{} encoder expects {want} channels, got {got}", self.modality.tag()),
            ));
        }
        let mut x = input;
        let mut levels = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let d = level.down.forward(tape, store, x)?;
            let d = tape.relu(d)?;
            let r = level.refine.forward(tape, store, d)?;
            x = tape.relu(r)?;
            levels.push(x);
        }
        Ok(FeaturePyramid {
            modality: self.modality,
            levels,
        })
    }
}
