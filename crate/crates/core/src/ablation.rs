//! Ablation sweeps: the three heads over several seeds, plus a grid over
//! graph scales and iterations for the cascade head.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ModelConfig};
use crate::train::{evaluate, train, TrainConfig};

/// `(n, T)` settings of the cascade sweep.
pub const SWEEP: [(usize, usize); 5] = [(1, 3), (3, 3), (5, 3), (3, 1), (3, 5)];

/// Arm names used in `ablation.csv`.
pub const ARMS: [&str; 4] = ["fusion", "hr", "cgr", "cgr_sweep"];

/// `(f_beta, mae)` on the evaluation set, or the error that stopped the run.
pub type RunOutcome = std::result::Result<(f64, f64), String>;

#[derive(Clone, Debug)]
pub struct AblationConfig {
    /// Shared model settings; mode, scales, iterations and seed are set per run.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Worker threads; runs are independent so any count gives the same table.
    pub jobs: usize,
}

/// One trained and evaluated configuration.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Run {
    pub mode: Mode,
    pub scales: usize,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub arm: &'static str,
    pub run: Run,
    pub outcome: RunOutcome,
}

impl AblationConfig {
    /// Distinct runs in execution order. The `(3, 3)` sweep point reuses the
    /// main cascade runs when the base model has `n = 3, T = 3`.
    pub fn runs(&self) -> Vec<Run> {
        let mut runs = Vec::new();
        let mut push = |r: Run| {
            if !runs.contains(&r) {
                runs.push(r);
            }
        };
        for mode in Mode::ALL {
            for &seed in &self.seeds {
                push(self.main_run(mode, seed));
            }
        }
        for (n, t) in SWEEP {
            for &seed in &self.seeds {
                push(Run {
                    mode: Mode::Cascade,
                    scales: n,
                    iterations: t,
                    seed,
                });
            }
        }
        runs
    }

    pub fn main_run(&self, mode: Mode, seed: u64) -> Run {
        Run {
            mode,
            scales: self.model.scales,
            iterations: self.model.iterations,
            seed,
        }
    }

    /// Trains one run from scratch and scores it: `(f_beta, mae)`.
    pub fn execute(&self, run: &Run, train_set: &[SceneSample], eval_set: &[SceneSample]) -> Result<(f64, f64)> {
        let config = ModelConfig {
            mode: run.mode,
            scales: run.scales,
            iterations: run.iterations,
            seed: run.seed,
            ..self.model.clone()
        };
        let (model, mut store) = Model::init::<f32>(config)?;
        let tc = TrainConfig {
            seed: run.seed,
            ..self.train.clone()
        };
        train(&model, &mut store, train_set, &tc, |_| {})?;
        let report = evaluate(&model, &store, eval_set)?;
        Ok((report.mean.f_beta, report.mean.mae))
    }
}

/// Trains and evaluates every run; `on_done` sees each result as it lands.
/// Failed runs are reported in their rows and do not stop the others.
pub fn run_ablation(
    config: &AblationConfig,
    train_set: &[SceneSample],
    eval_set: &[SceneSample],
    on_done: impl Fn(&Run, &RunOutcome) + Sync,
) -> Result<Vec<AblationRow>> {
    if config.seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::Usage("ablation needs training and evaluation samples".into()));
    }
    config.model.validate()?;
    config.train.validate()?;
    let runs = config.runs();
    let results: Mutex<Vec<Option<RunOutcome>>> = Mutex::new(vec![None; runs.len()]);
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..config.jobs.clamp(1, runs.len()) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(run) = runs.get(i) else { break };
                let out = config.execute(run, train_set, eval_set).map_err(|e| e.to_string());
                on_done(run, &out);
                results.lock().expect("results lock")[i] = Some(out);
            });
        }
    });
    let results = results.into_inner().expect("results lock");
    let result_of = |r: &Run| {
        let i = runs.iter().position(|x| x == r).expect("every run is scheduled");
        results[i].clone().expect("every run finished")
    };

    let mut rows = Vec::new();
    for (arm, mode) in ARMS.iter().zip(Mode::ALL) {
        for &seed in &config.seeds {
            let run = config.main_run(mode, seed);
            rows.push(AblationRow {
                arm,
                outcome: result_of(&run),
                run,
            });
        }
    }
    for (n, t) in SWEEP {
        for &seed in &config.seeds {
            let run = Run {
                mode: Mode::Cascade,
                scales: n,
                iterations: t,
                seed,
            };
            rows.push(AblationRow {
                arm: ARMS[3],
                outcome: result_of(&run),
                run,
            });
        }
    }
    Ok(rows)
}

/// CSV `arm,n,t,seed,f_beta,mae`. The fusion head has no graph, so its
/// `n` and `t` are 0. Failed runs get `nan` scores.
pub fn render_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("arm,n,t,seed,f_beta,mae\n");
    for r in rows {
        let (n, t) = if r.run.mode == Mode::Fusion {
            (0, 0)
        } else {
            (r.run.scales, r.run.iterations)
        };
        let (f, m) = match &r.outcome {
            Ok((f, m)) => (format!("{f:.6}"), format!("{m:.6}")),
            Err(_) => ("nan".into(), "nan".into()),
        };
        let _ = writeln!(out, "{},{n},{t},{},{f},{m}", r.arm, r.run.seed);
    }
    out
}

pub fn write_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    std::fs::write(path, render_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Mean F-measure of the successful rows matching `arm`, `n` and `t`.
pub fn mean_f_beta(rows: &[AblationRow], arm: &str, n: usize, t: usize) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.arm == arm && r.run.scales == n && r.run.iterations == t)
        .filter_map(|r| r.outcome.as_ref().ok().map(|o| o.0))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
