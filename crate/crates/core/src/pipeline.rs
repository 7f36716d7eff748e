//! The self-training driver.
//!
//! Starting from the few-shot annotations `D0`, each round `t` fine-tunes
//! the backend on `D(t-1)`, predicts on the target images, keeps
//! predictions scoring at least `tau_s`, applies class-wise NMS at `tau_n`,
//! converts the survivors to pseudo annotations and merges them with `D0`
//! (or with `D(t-1)` under [`CrossRound::Accumulate`]) to form `D(t)`.
//!
//! With a run directory, every round leaves
//! `round_<t>/{train.json, raw_preds.json, kept_preds.json, merged.json,
//! report.json}` (plus `query_preds.json` when evaluating), written
//! atomically, so an aborted run keeps every completed round intact. Wall
//! clock timings go to the run-level `timings.json` and never into round
//! artifacts, which are byte-reproducible for a fixed seed.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{
    backend_predict, backend_train, BackendDescriptor, DetectorBackend, PredictRequest,
    SimulatorBackend, TrainRequest,
};
use crate::boxes::{class_wise_nms, filter_by_score, PredictionSet};
use crate::coco::Dataset;
use crate::error::{Error, Result};
use crate::eval::{check_references, evaluate_at, EvalReport, DEFAULT_IOU};
use crate::io::write_atomic;
use crate::merge::{merge_pseudo_summarized, to_pseudo_annotations, CrossRound, MergePolicy};
use crate::sim::{SimulatorConfig, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub rounds: u32,
    pub tau_s: f64,
    pub tau_n: f64,
    pub merge: MergePolicy,
    pub backend: BackendDescriptor,
    /// Evaluate the round's detector on the query set every round.
    pub eval_each_round: bool,
    /// After the last round, fine-tune once more on `D(T)` and evaluate.
    pub eval_final: bool,
    pub reset_weights_each_round: bool,
    pub epochs_hint: u32,
    pub eval_iou: f64,
    /// Seeds the simulator backend.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            tau_s: 0.6,
            tau_n: 0.5,
            merge: MergePolicy::default(),
            backend: BackendDescriptor::default(),
            eval_each_round: true,
            eval_final: true,
            reset_weights_each_round: true,
            epochs_hint: 200,
            eval_iou: DEFAULT_IOU,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn check(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        for (name, v) in [("tau_s", self.tau_s), ("tau_n", self.tau_n), ("eval_iou", self.eval_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside [0, 1]")));
            }
        }
        self.merge.check()?;
        self.backend.check()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageCounts {
    pub raw: usize,
    pub after_filter: usize,
    pub after_nms: usize,
    pub pseudo_kept: usize,
    pub pseudo_dropped: usize,
    pub gt_count: usize,
    pub merged_total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub train: Duration,
    pub predict: Duration,
    pub postprocess: Duration,
    pub eval: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub counts: StageCounts,
    /// Query-set evaluation of the detector fine-tuned on `D(t-1)`.
    pub eval: Option<EvalReport>,
    #[serde(skip)]
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    /// `D(T)`.
    pub dataset: Dataset,
    /// `D(1) .. D(T)`.
    pub history: Vec<Dataset>,
    pub rounds: Vec<RoundReport>,
    /// Query evaluation of the detector fine-tuned on `D(T)`.
    pub final_eval: Option<EvalReport>,
}

impl PipelineOutcome {
    /// mAP of the detector trained on the few-shot set alone.
    pub fn baseline_map(&self) -> Option<f64> {
        self.rounds.first()?.eval.as_ref().map(|e| e.map_50)
    }

    pub fn final_map(&self) -> Option<f64> {
        self.final_eval.as_ref().map(|e| e.map_50)
    }
}

struct RunDir(Option<PathBuf>);

impl RunDir {
    fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        match &self.0 {
            Some(root) => write_atomic(&root.join(rel), bytes),
            None => Ok(()),
        }
    }
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("artifact serialization is infallible")
}

/// Predict on the query images, apply NMS (no score cut), evaluate.
fn evaluate_round(
    backend: &mut dyn DetectorBackend,
    query: &Dataset,
    cfg: &PipelineConfig,
    round: u32,
) -> Result<(PredictionSet, EvalReport)> {
    let request = PredictRequest {
        image_ids: query.image_ids(),
        round,
    };
    let raw = backend_predict(backend, &request, query)?;
    check_references(query, &raw).map_err(|e| Error::MalformedPredictions(e.to_string()))?;
    let report = evaluate_at(query, &class_wise_nms(&raw, cfg.tau_n), cfg.eval_iou)?;
    Ok((raw, report))
}

/// Run the self-training loop. `images` are the target images predicted on
/// each round and must all belong to `d_fs`.
pub fn run_pipeline(
    d_fs: &Dataset,
    images: &[u64],
    cfg: &PipelineConfig,
    query: Option<&Dataset>,
    backend: &mut dyn DetectorBackend,
    run_dir: Option<&Path>,
) -> Result<PipelineOutcome> {
    cfg.check()?;
    d_fs.check()?;
    let dir = RunDir(run_dir.map(Path::to_path_buf));
    let started = Instant::now();

    let mut current = d_fs.clone();
    let mut history = Vec::with_capacity(cfg.rounds as usize);
    let mut reports = Vec::with_capacity(cfg.rounds as usize);
    let mut all_timings = Vec::new();

    for t in 1..=cfg.rounds {
        let prefix = format!("round_{t}");
        let mut timings = Timings::default();
        dir.write(&format!("{prefix}/train.json"), &current.to_json())?;

        let clock = Instant::now();
        backend_train(
            backend,
            &TrainRequest {
                train_annotations: current.clone(),
                epochs_hint: cfg.epochs_hint,
                reset_weights: cfg.reset_weights_each_round || t == 1,
                round: t,
            },
        )?;
        timings.train = clock.elapsed();

        let clock = Instant::now();
        let raw = backend_predict(
            backend,
            &PredictRequest {
                image_ids: images.to_vec(),
                round: t,
            },
            d_fs,
        )?;
        check_references(d_fs, &raw).map_err(|e| Error::MalformedPredictions(e.to_string()))?;
        timings.predict = clock.elapsed();
        dir.write(&format!("{prefix}/raw_preds.json"), &raw.to_json())?;

        let clock = Instant::now();
        let filtered = filter_by_score(&raw, cfg.tau_s);
        let kept = class_wise_nms(&filtered, cfg.tau_n);
        dir.write(&format!("{prefix}/kept_preds.json"), &kept.to_json())?;
        let base = match cfg.merge.cross_round {
            CrossRound::FromScratch => d_fs,
            CrossRound::Accumulate => &current,
        };
        let pseudo = to_pseudo_annotations(&kept, base)?;
        let (merged, summary) = merge_pseudo_summarized(base, &pseudo, &cfg.merge)?;
        timings.postprocess = clock.elapsed();
        dir.write(&format!("{prefix}/merged.json"), &merged.to_json())?;

        let eval = match query {
            Some(q) if cfg.eval_each_round => {
                let clock = Instant::now();
                let (query_raw, report) = evaluate_round(backend, q, cfg, t)?;
                timings.eval = clock.elapsed();
                dir.write(&format!("{prefix}/query_preds.json"), &query_raw.to_json())?;
                Some(report)
            }
            _ => None,
        };

        let report = RoundReport {
            round: t,
            counts: StageCounts {
                raw: raw.len(),
                after_filter: filtered.len(),
                after_nms: kept.len(),
                pseudo_kept: summary.kept_pseudo,
                pseudo_dropped: summary.dropped_pseudo,
                gt_count: summary.gt_count,
                merged_total: merged.annotations.len(),
            },
            eval,
            timings,
        };
        dir.write(&format!("{prefix}/report.json"), &json(&report))?;
        all_timings.push(timings);
        reports.push(report);
        history.push(merged.clone());
        current = merged;
    }

    let final_eval = match query {
        Some(q) if cfg.eval_final => {
            let t = cfg.rounds + 1;
            backend_train(
                backend,
                &TrainRequest {
                    train_annotations: current.clone(),
                    epochs_hint: cfg.epochs_hint,
                    reset_weights: cfg.reset_weights_each_round,
                    round: t,
                },
            )?;
            let (query_raw, report) = evaluate_round(backend, q, cfg, t)?;
            dir.write("final/query_preds.json", &query_raw.to_json())?;
            dir.write("final/report.json", &json(&report))?;
            Some(report)
        }
        _ => None,
    };

    #[derive(Serialize)]
    struct TimingFile<'a> {
        total: Duration,
        rounds: &'a [Timings],
    }
    dir.write(
        "timings.json",
        &json(&TimingFile {
            total: started.elapsed(),
            rounds: &all_timings,
        }),
    )?;

    Ok(PipelineOutcome {
        dataset: current,
        history,
        rounds: reports,
        final_eval,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    TauS,
    TauN,
    RoundsT,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau_s" => Ok(SweepParam::TauS),
            "tau_n" => Ok(SweepParam::TauN),
            "rounds_T" | "rounds_t" | "rounds" => Ok(SweepParam::RoundsT),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep parameter {other:?} (expected tau_s, tau_n or rounds_T)"
            ))),
        }
    }
}

impl SweepParam {
    pub fn apply(&self, cfg: &mut PipelineConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::TauS => cfg.tau_s = value,
            SweepParam::TauN => cfg.tau_n = value,
            SweepParam::RoundsT => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidConfig(format!("rounds_T value {value} is not a positive integer")));
                }
                cfg.rounds = value as u32;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param_value: f64,
    pub seed: u64,
    pub map_50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// `(value, mean mAP)` in sweep order.
    pub fn means(&self) -> Vec<(f64, f64)> {
        self.grouped()
            .into_iter()
            .map(|(v, maps)| (v, maps.iter().sum::<f64>() / maps.len() as f64))
            .collect()
    }

    pub fn medians(&self) -> Vec<(f64, f64)> {
        self.grouped()
            .into_iter()
            .map(|(v, mut maps)| {
                maps.sort_by(f64::total_cmp);
                let n = maps.len();
                let m = if n % 2 == 1 {
                    maps[n / 2]
                } else {
                    (maps[n / 2 - 1] + maps[n / 2]) / 2.0
                };
                (v, m)
            })
            .collect()
    }

    fn grouped(&self) -> Vec<(f64, Vec<f64>)> {
        let mut out: Vec<(f64, Vec<f64>)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(v, _)| *v == r.param_value) {
                Some((_, maps)) => maps.push(r.map_50),
                None => out.push((r.param_value, vec![r.map_50])),
            }
        }
        out
    }

    /// `param_value,seed,map_50`, one line per run.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("param_value,seed,map_50\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.param_value, r.seed, r.map_50));
        }
        s
    }

    /// `param_value,mean_map_50,median_map_50`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("param_value,mean_map_50,median_map_50\n");
        for ((v, mean), (_, median)) in self.means().into_iter().zip(self.medians()) {
            s.push_str(&format!("{v},{mean},{median}\n"));
        }
        s
    }
}

/// One simulator-backed pipeline run on `world`, returning the final query
/// mAP (detector fine-tuned on `D(T)`).
pub fn simulated_run(cfg: &PipelineConfig, world: &Arc<World>) -> Result<PipelineOutcome> {
    let sim_cfg = match &cfg.backend {
        BackendDescriptor::Simulator(s) => s.config,
        _ => SimulatorConfig::default(),
    };
    let mut backend = SimulatorBackend::new(world.clone(), SimulatorConfig { seed: cfg.seed, ..sim_cfg })?;
    run_pipeline(
        &world.visible_train,
        &world.train_image_ids(),
        cfg,
        Some(&world.query_gt),
        &mut backend,
        None,
    )
}

/// Run the pipeline for every `(value, seed)` pair on the simulator,
/// in parallel. Rows come back ordered by value, then seed, as given.
pub fn sweep(
    base: &PipelineConfig,
    param: SweepParam,
    values: &[f64],
    world: &World,
    seeds: &[u64],
) -> Result<SweepTable> {
    let world = Arc::new(world.clone());
    let mut jobs = Vec::with_capacity(values.len() * seeds.len());
    for &v in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            param.apply(&mut cfg, v)?;
            cfg.seed = seed;
            cfg.eval_final = true;
            cfg.check()?;
            jobs.push((v, seed, cfg));
        }
    }
    let rows = jobs
        .into_par_iter()
        .map(|(v, seed, cfg)| {
            let outcome = simulated_run(&cfg, &world)?;
            Ok(SweepRow {
                param_value: v,
                seed,
                map_50: outcome.final_map().unwrap_or(0.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { param, rows })
}
