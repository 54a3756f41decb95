//! Parameterized layers built on the tape.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Scalar, Shape, Tape, Tensor, Var};

/// Glorot/Xavier uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(in_c: usize, out_c: usize, kernel: usize) -> f64 {
    let area = (kernel * kernel) as f64;
    (6.0 / (in_c as f64 * area + out_c as f64 * area)).sqrt()
}

/// Square-kernel convolution with bias; padding keeps "same" extents at stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Registers `<name>.weight` (Xavier uniform) and `<name>.bias` (zeros).
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let b = xavier_bound(in_c, out_c, kernel);
        let weight = store.insert(
            format!("{name}.weight"),
            Tensor::uniform(Shape::new(out_c, in_c, kernel, kernel), -b, b, rng),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(Shape::new(1, out_c, 1, 1)))?;
        Ok(Self {
            weight,
            bias,
            in_c,
            out_c,
            kernel,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }

    /// The convolution without its bias term.
    pub fn forward_linear<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        tape.conv2d(x, w, None, self.stride, self.padding)
    }

    pub fn bias_var<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>) -> Var {
        tape.param(store, self.bias)
    }
}
