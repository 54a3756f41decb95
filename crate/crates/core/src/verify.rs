//! Finite-difference gradient suites at double precision.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cascade::GuidancePair;
use crate::error::{Error, Result};
use crate::graph::{run_gr, GrConfig, GrParams, GraphTopology};
use crate::model::{Mode, Model, ModelConfig};
use crate::tensor::gradcheck::{check_inputs_with_tape, check_params, CheckConfig, TensorCheck};
use crate::tensor::{OpKind, ParamStore, Shape, Tape, Tensor, Var};

/// Tolerance on the max relative error of single operations.
pub const OPS_TOLERANCE: f64 = 1e-6;
/// Tolerance for whole modules and the end-to-end model.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Gr,
    Cascade,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Ops, Scope::Gr, Scope::Cascade];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Gr => "gr",
            Scope::Cascade => "cascade",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown scope `{s}` (expected ops, gr or cascade)")))
    }
}

/// One checked tensor.
#[derive(Clone, Debug)]
pub struct CheckRow {
    pub scope: Scope,
    /// Operation name for the ops suite, parameter or input name otherwise.
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coords: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub rows: Vec<CheckRow>,
    pub injected: Option<OpKind>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.passed)
    }

    /// Fixed-width table, one line per row.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<8} {:<40} {:>12} {:>8} {:>7}  result\n",
            "scope", "tensor", "max_rel_err", "tol", "coords"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<8} {:<40} {:>12.3e} {:>8.0e} {:>7}  {}\n",
                r.scope.name(),
                r.name,
                r.max_rel_err,
                r.tolerance,
                r.coords,
                if r.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

fn rows(scope: Scope, checks: Vec<TensorCheck>, tolerance: f64, prefix: &str) -> Vec<CheckRow> {
    checks
        .into_iter()
        .map(|c| CheckRow {
            scope,
            name: format!("{prefix}{}", c.name),
            passed: c.max_rel_err < tolerance && c.max_rel_err.is_finite(),
            max_rel_err: c.max_rel_err,
            tolerance,
            coords: c.coords,
        })
        .collect()
}

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero so ReLU is never probed at its kink.
fn off_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Contracts an op output against fixed random weights so every output
/// element contributes a distinct amount to the loss.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(tape.shape(out), &mut rng));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

type OpCase = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> OpCase {
    let s = Shape::new(2, 3, 5, 4);
    let x = random(s, rng);
    let w = |t: &mut Tape<f64>, v: Var| weighted_sum(t, v, 17);
    match kind {
        OpKind::Conv2d => (
            vec![
                random(Shape::new(2, 3, 6, 5), rng),
                random(Shape::new(4, 3, 3, 3), rng),
                random(Shape::new(1, 4, 1, 1), rng),
            ],
            Box::new(move |t, v| {
                let a = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                let b = t.conv2d(v[0], v[1], None, 2, 1)?;
                let (a, b) = (w(t, a)?, w(t, b)?);
                t.add(a, b)
            }),
        ),
        OpKind::AdaptiveAvgPool => (
            vec![random(Shape::new(1, 2, 7, 5), rng)],
            Box::new(move |t, v| {
                let y = t.adaptive_avg_pool(v[0], 3, 2)?;
                w(t, y)
            }),
        ),
        OpKind::BilinearResize => (
            vec![random(Shape::new(1, 2, 3, 4), rng)],
            Box::new(move |t, v| {
                let up = t.bilinear_resize(v[0], 7, 9)?;
                let down = t.bilinear_resize(v[0], 2, 3)?;
                let (a, b) = (w(t, up)?, w(t, down)?);
                t.add(a, b)
            }),
        ),
        OpKind::GlobalAvgPool => (
            vec![x],
            Box::new(move |t, v| {
                let y = t.global_avg_pool(v[0])?;
                w(t, y)
            }),
        ),
        OpKind::Add | OpKind::Sub | OpKind::Mul => (
            vec![x, random(s, rng)],
            Box::new(move |t, v| {
                let y = match kind {
                    OpKind::Add => t.add(v[0], v[1])?,
                    OpKind::Sub => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                w(t, y)
            }),
        ),
        OpKind::Sigmoid | OpKind::Tanh | OpKind::Relu => (
            vec![off_zero(s, rng)],
            Box::new(move |t, v| {
                let y = match kind {
                    OpKind::Sigmoid => t.sigmoid(v[0])?,
                    OpKind::Tanh => t.tanh(v[0])?,
                    _ => t.relu(v[0])?,
                };
                w(t, y)
            }),
        ),
        OpKind::ScaleChannels => (
            vec![x, random(Shape::new(2, 3, 1, 1), rng)],
            Box::new(move |t, v| {
                let y = t.scale_channels(v[0], v[1])?;
                w(t, y)
            }),
        ),
        OpKind::AddBias => (
            vec![x, random(Shape::new(1, 3, 1, 1), rng)],
            Box::new(move |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                w(t, y)
            }),
        ),
        OpKind::ConcatChannels => (
            vec![x, random(Shape::new(2, 1, 5, 4), rng)],
            Box::new(move |t, v| {
                let y = t.concat_channels(&[v[0], v[1], v[0]])?;
                w(t, y)
            }),
        ),
        OpKind::SliceChannels => (
            vec![x],
            Box::new(move |t, v| {
                let y = t.slice_channels(v[0], 1, 2)?;
                w(t, y)
            }),
        ),
        OpKind::BceWithLogits => {
            let target = Tensor::uniform(s, 0.0, 1.0, rng);
            (
                vec![random(s, rng)],
                Box::new(move |t, v| {
                    let scaled = t.add(v[0], v[0])?;
                    let y = t.constant(target.clone());
                    t.bce_with_logits(scaled, y)
                }),
            )
        }
        OpKind::Sum | OpKind::Mean => (
            vec![x],
            Box::new(move |t, v| {
                let sq = t.mul(v[0], v[0])?;
                if kind == OpKind::Sum {
                    t.sum(sq)
                } else {
                    t.mean(sq)
                }
            }),
        ),
        OpKind::Leaf => unreachable!("leaves are not operations"),
    }
}

/// Every differentiable operation against central differences.
pub fn check_ops(fault: Option<OpKind>) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut out = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        let (inputs, f) = op_case(kind, &mut rng);
        let mut tape = Tape::new();
        tape.inject_fault(fault);
        let checks = check_inputs_with_tape(&inputs, &f, CheckConfig::F64, &mut rng, &mut tape)?;
        let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
        let coords = checks.iter().map(|c| c.coords).sum();
        let finite = checks.iter().all(|c| c.max_rel_err.is_finite());
        out.push(CheckRow {
            scope: Scope::Ops,
            name: kind.name().to_owned(),
            max_rel_err: if finite { worst } else { f64::NAN },
            tolerance: OPS_TOLERANCE,
            coords,
            passed: finite && worst < OPS_TOLERANCE,
        });
    }
    Ok(out)
}

/// One guided graph-reasoning module: every parameter, both feature maps
/// and both guidance embeddings.
pub fn check_gr(fault: Option<OpKind>) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let config = GrConfig {
        in_channels: 3,
        node_channels: 2,
        scales: vec![1, 2],
        iterations: 2,
    };
    let mut store = ParamStore::<f64>::new();
    let params = GrParams::new(&mut store, "gr", config, &mut rng)?;
    let topology = GraphTopology::new(2)?;
    let feat = Shape::new(1, 3, 4, 4);
    let guide = Shape::new(1, 2, 4, 4);
    let inputs = vec![
        random(feat, &mut rng),
        random(feat, &mut rng),
        random(guide, &mut rng),
        random(guide, &mut rng),
    ];

    let forward = |t: &mut Tape<f64>, s: &ParamStore<f64>, v: &[Var]| -> Result<Var> {
        let g = GuidancePair {
            appearance: v[2],
            geometry: v[3],
            source_level: 1,
        };
        let out = run_gr(t, s, &params, &topology, v[0], v[1], Some(&g))?;
        let cat = t.concat_channels(&[out.appearance, out.geometry])?;
        weighted_sum(t, cat, 23)
    };

    let mut tape = Tape::new();
    tape.inject_fault(fault);
    let p = check_params(
        &store,
        |t, s| {
            let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            forward(t, s, &v)
        },
        CheckConfig::F64,
        &mut rng,
        &mut tape,
    )?;
    let i = check_inputs_with_tape(
        &inputs,
        |t, v| forward(t, &store, v),
        CheckConfig::F64,
        &mut rng,
        &mut tape,
    )?;
    let mut out = rows(Scope::Gr, p, MODEL_TOLERANCE, "");
    let names = ["feat.rgb", "feat.depth", "guide.rgb", "guide.depth"];
    for (mut r, n) in rows(Scope::Gr, i, MODEL_TOLERANCE, "").into_iter().zip(names) {
        r.name = n.to_owned();
        out.push(r);
    }
    Ok(out)
}

/// The smallest cascade model that still exercises guidance and fusion.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        mode: Mode::Cascade,
        input_size: (8, 8),
        levels: 2,
        level_channels: vec![2, 3],
        node_channels: 2,
        scales: 2,
        iterations: 2,
        seed: 303,
    }
}

/// The end-to-end cascade model under BCE loss, every parameter.
pub fn check_cascade(fault: Option<OpKind>) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (model, store) = Model::init::<f64>(micro_config())?;
    let (h, w) = model.config.input_size;
    let rgb = Tensor::uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng);
    let depth = Tensor::uniform(Shape::new(1, 1, h, w), 0.0, 1.0, &mut rng);
    let mask = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
        if (2..6).contains(&y) && (3..7).contains(&x) {
            1.0
        } else {
            0.0
        }
    });
    let mut tape = Tape::new();
    tape.inject_fault(fault);
    let checks = check_params(
        &store,
        |t, s| {
            let (r, d, m) = (
                t.constant(rgb.clone()),
                t.constant(depth.clone()),
                t.constant(mask.clone()),
            );
            let logits = model.logits(t, s, r, d)?;
            t.bce_with_logits(logits, m)
        },
        CheckConfig::F64,
        &mut rng,
        &mut tape,
    )?;
    Ok(rows(Scope::Cascade, checks, MODEL_TOLERANCE, ""))
}

pub fn run_suite(scopes: &[Scope], fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut rows = Vec::new();
    for scope in scopes {
        rows.extend(match scope {
            Scope::Ops => check_ops(fault)?,
            Scope::Gr => check_gr(fault)?,
            Scope::Cascade => check_cascade(fault)?,
        });
    }
    Ok(SuiteReport { rows, injected: fault })
}
