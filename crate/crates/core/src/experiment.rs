//! Teacher training, the comparison methods, ablations and the λ sweep.
//!
//! Every run is single-threaded and keyed by an explicit seed. Independent
//! `(method, seed)` runs are spread over a rayon pool and collected back in
//! input order, so reports do not depend on scheduling.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{batches, mix_seed, LabeledExample, SplitDataset, UnlabeledExample};
use crate::distill::{
    combined_batch_loss, labeled_sample_loss, student_logit_gradient, unlabeled_sample_loss, CombinePolicy,
    DistillConfig, LossBreakdown,
};
use crate::ensemble::{teacher_task_losses_with_eps, uniform_ensemble, TeacherPredictionSet};
use crate::error::{Error, Result};
use crate::model::{init_parameters, GradientSet, MlpArchitecture, MlpParameters};
use crate::numerics::{cross_entropy_with_eps, ProbVector};
use crate::optim::{Optimizer, OptimizerKind};
use crate::persistence::{Checkpoint, RunConfig};

/// Seed of teacher `i` under a master seed.
pub fn teacher_seed(master: u64, i: usize) -> u64 {
    master.wrapping_add(1000 * (i as u64 + 1))
}

/// Seed of student repetition `r` under a master seed.
pub fn student_seed(master: u64, r: usize) -> u64 {
    master.wrapping_add(100 + r as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

impl TrainSettings {
    pub fn teacher(cfg: &RunConfig) -> Self {
        Self::with_epochs(cfg, cfg.teacher_epochs)
    }

    pub fn student(cfg: &RunConfig) -> Self {
        Self::with_epochs(cfg, cfg.student_epochs)
    }

    fn with_epochs(cfg: &RunConfig, epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: cfg.batch_size,
            optimizer: cfg.optimizer,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps_adam: cfg.eps_adam,
        }
    }

    fn optimizer(&self, params: &MlpParameters) -> Optimizer {
        Optimizer::new(self.optimizer, params, self.lr, self.beta1, self.beta2, self.eps_adam)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: MlpParameters,
    pub seed: u64,
    pub epochs: usize,
    /// Mean objective over the last epoch.
    pub final_train_loss: f64,
}

impl TrainedModel {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.params, self.seed, self.epochs, self.final_train_loss)
    }
}

fn one_hot_gradient(p: &ProbVector, label: usize) -> Vec<f64> {
    p.as_slice()
        .iter()
        .enumerate()
        .map(|(c, &pc)| if c == label { pc - 1.0 } else { pc })
        .collect()
}

/// Minibatch cross-entropy training from a fresh initialization keyed by
/// `seed`; batch order is keyed by the same seed.
pub fn train_classifier(
    arch: &MlpArchitecture,
    rows: &[LabeledExample],
    settings: &TrainSettings,
    seed: u64,
    eps_log: f64,
) -> Result<TrainedModel> {
    if rows.is_empty() {
        return Err(Error::InvalidDataset("no training rows".into()));
    }
    let mut params = init_parameters(arch, seed)?;
    let mut opt = settings.optimizer(&params);
    let mut grads = GradientSet::zeros_like(&params);
    let shuffle = mix_seed(seed, 1);
    let mut epoch_loss = f64::NAN;
    for epoch in 0..settings.epochs {
        let mut total = 0.0;
        for batch in batches(rows.len(), settings.batch_size, shuffle, epoch as u64) {
            grads.fill_zero();
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let row = &rows[i];
                let trace = params.forward_trace(&row.features)?;
                let p = trace.probabilities()?;
                let one_hot = ProbVector::one_hot(row.label, arch.num_classes)?;
                total += cross_entropy_with_eps(one_hot.as_slice(), p.as_slice(), eps_log)?;
                params.accumulate_gradients(&trace, &one_hot_gradient(&p, row.label), scale, &mut grads)?;
            }
            opt.step(&mut params, &grads)?;
        }
        epoch_loss = total / rows.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite training loss at epoch {epoch}")));
        }
    }
    Ok(TrainedModel {
        params,
        seed,
        epochs: settings.epochs,
        final_train_loss: epoch_loss,
    })
}

/// Trains `n_teachers` classifiers that differ only by derived seed.
pub fn train_teachers(
    arch: &MlpArchitecture,
    rows: &[LabeledExample],
    n_teachers: usize,
    settings: &TrainSettings,
    master_seed: u64,
    eps_log: f64,
) -> Result<Vec<TrainedModel>> {
    if n_teachers < 2 {
        return Err(Error::TooFewTeachers(n_teachers));
    }
    (0..n_teachers)
        .into_par_iter()
        .map(|i| {
            train_classifier(arch, rows, settings, teacher_seed(master_seed, i), eps_log)
                .map_err(|e| Error::TeacherTraining { index: i, source: Box::new(e) })
        })
        .collect()
}

pub fn accuracy(params: &MlpParameters, rows: &[LabeledExample]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InvalidDataset("no evaluation rows".into()));
    }
    let mut correct = 0usize;
    for row in rows {
        if params.predict_proba(&row.features)?.argmax() == row.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / rows.len() as f64)
}

// ---------------------------------------------------------------------------
// Student training
// ---------------------------------------------------------------------------

/// Distillation data: rows with the teachers' predictions on each row.
#[derive(Debug, Clone, Copy)]
pub struct DistillPools<'a> {
    pub labeled: &'a [LabeledExample],
    pub labeled_teachers: &'a [TeacherPredictionSet],
    pub unlabeled: &'a [UnlabeledExample],
    pub unlabeled_teachers: &'a [TeacherPredictionSet],
}

impl DistillPools<'_> {
    pub fn without_unlabeled(self) -> Self {
        Self {
            unlabeled: &[],
            unlabeled_teachers: &[],
            ..self
        }
    }

    pub fn without_labeled(self) -> Self {
        Self {
            labeled: &[],
            labeled_teachers: &[],
            ..self
        }
    }
}

/// One sample's loss at one optimizer step, for verbose logs.
#[derive(Debug, Clone, Serialize)]
pub struct LossRecord<'a> {
    pub epoch: usize,
    pub step: usize,
    /// Row index within its pool.
    pub index: usize,
    pub breakdown: &'a LossBreakdown,
}

pub type LossSink<'s> = &'s mut dyn FnMut(&LossRecord<'_>) -> Result<()>;

#[derive(Debug, Clone, Copy)]
enum Pool {
    Labeled,
    Unlabeled,
}

/// Optimizer steps for one epoch. Under `Sum` each step carries one batch
/// from each non-empty pool, the shorter pool cycling; under `Interleave`
/// steps alternate between pools.
fn schedule(
    policy: CombinePolicy,
    lab: &[Vec<usize>],
    unl: &[Vec<usize>],
) -> Vec<Vec<(Pool, usize)>> {
    let steps = lab.len().max(unl.len());
    let mut out = Vec::new();
    for k in 0..steps {
        match policy {
            CombinePolicy::Sum => {
                let mut step = Vec::with_capacity(2);
                if !lab.is_empty() {
                    step.push((Pool::Labeled, k % lab.len()));
                }
                if !unl.is_empty() {
                    step.push((Pool::Unlabeled, k % unl.len()));
                }
                out.push(step);
            }
            CombinePolicy::Interleave => {
                if k < lab.len() {
                    out.push(vec![(Pool::Labeled, k)]);
                }
                if k < unl.len() {
                    out.push(vec![(Pool::Unlabeled, k)]);
                }
            }
        }
    }
    out
}

/// Trains a fresh student on the distillation objective. Each step averages
/// per-sample gradients within each pool's batch and sums the two pools.
pub fn train_student(
    arch: &MlpArchitecture,
    pools: DistillPools<'_>,
    cfg: &DistillConfig,
    settings: &TrainSettings,
    seed: u64,
    mut sink: Option<LossSink<'_>>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if pools.labeled.len() != pools.labeled_teachers.len() || pools.unlabeled.len() != pools.unlabeled_teachers.len()
    {
        return Err(Error::DimensionMismatch {
            context: "teacher predictions per pool",
            expected: pools.labeled.len() + pools.unlabeled.len(),
            found: pools.labeled_teachers.len() + pools.unlabeled_teachers.len(),
        });
    }
    if pools.labeled.is_empty() && pools.unlabeled.is_empty() {
        return Err(Error::EmptyBatches);
    }
    let mut params = init_parameters(arch, seed)?;
    let mut opt = settings.optimizer(&params);
    let mut grads = GradientSet::zeros_like(&params);
    let (lab_stream, unl_stream) = (mix_seed(seed, 1), mix_seed(seed, 2));
    let mut epoch_loss = f64::NAN;
    let mut step_index = 0usize;

    for epoch in 0..settings.epochs {
        let lab = batches(pools.labeled.len(), settings.batch_size, lab_stream, epoch as u64);
        let unl = batches(pools.unlabeled.len(), settings.batch_size, unl_stream, epoch as u64);
        let plan = schedule(cfg.combine_policy, &lab, &unl);
        let mut total = 0.0;
        for step in &plan {
            grads.fill_zero();
            let mut lab_losses = Vec::new();
            let mut unl_losses = Vec::new();
            for &(pool, b) in step {
                let batch = match pool {
                    Pool::Labeled => &lab[b],
                    Pool::Unlabeled => &unl[b],
                };
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    let features = match pool {
                        Pool::Labeled => &pools.labeled[i].features,
                        Pool::Unlabeled => &pools.unlabeled[i].features,
                    };
                    let trace = params.forward_trace(features)?;
                    let p = trace.probabilities()?;
                    let breakdown = match pool {
                        Pool::Labeled => {
                            labeled_sample_loss(&pools.labeled_teachers[i], &p, pools.labeled[i].label, cfg)?
                        }
                        Pool::Unlabeled => unlabeled_sample_loss(&pools.unlabeled_teachers[i], &p, cfg)?,
                    };
                    let g = student_logit_gradient(&breakdown, &p)?;
                    params.accumulate_gradients(&trace, &g, scale, &mut grads)?;
                    if let Some(sink) = sink.as_mut() {
                        sink(&LossRecord {
                            epoch,
                            step: step_index,
                            index: i,
                            breakdown: &breakdown,
                        })?;
                    }
                    match pool {
                        Pool::Labeled => lab_losses.push(breakdown),
                        Pool::Unlabeled => unl_losses.push(breakdown),
                    }
                }
            }
            total += combined_batch_loss(&lab_losses, &unl_losses, cfg)?;
            opt.step(&mut params, &grads)?;
            step_index += 1;
        }
        epoch_loss = total / plan.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite distillation loss at epoch {epoch}")));
        }
    }
    Ok(TrainedModel {
        params,
        seed,
        epochs: settings.epochs,
        final_train_loss: epoch_loss,
    })
}

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Single,
    Ensemble,
    KdLabeled,
    KdUnlabeled,
    Unikd,
}

impl MethodId {
    pub const ALL: [MethodId; 5] = [
        MethodId::Single,
        MethodId::Ensemble,
        MethodId::KdLabeled,
        MethodId::KdUnlabeled,
        MethodId::Unikd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Single => "single",
            MethodId::Ensemble => "ensemble",
            MethodId::KdLabeled => "kd_labeled",
            MethodId::KdUnlabeled => "kd_unlabeled",
            MethodId::Unikd => "unikd",
        }
    }

    /// Methods that train a student.
    pub fn is_distillation(self) -> bool {
        matches!(self, MethodId::KdLabeled | MethodId::KdUnlabeled | MethodId::Unikd)
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// Everything a method needs: the data partitions, the trained teachers and
/// their cached predictions on every row.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub arch: MlpArchitecture,
    pub master_seed: u64,
    pub data: SplitDataset,
    pub teachers: Vec<TrainedModel>,
    labeled_teachers: Vec<TeacherPredictionSet>,
    unlabeled_teachers: Vec<TeacherPredictionSet>,
    /// `test_predictions[t][i]`: teacher `t` on test row `i`.
    test_predictions: Vec<Vec<ProbVector>>,
}

impl Workbench {
    pub fn new(
        arch: MlpArchitecture,
        master_seed: u64,
        data: SplitDataset,
        teachers: Vec<TrainedModel>,
        eps_log: f64,
    ) -> Result<Self> {
        if teachers.len() < 2 {
            return Err(Error::TooFewTeachers(teachers.len()));
        }
        let predict = |x: &[f64]| -> Result<Vec<ProbVector>> {
            teachers.iter().map(|t| t.params.predict_proba(x)).collect()
        };
        let labeled_teachers = data
            .labeled_train
            .par_iter()
            .map(|row| {
                let preds = predict(&row.features)?;
                let losses = teacher_task_losses_with_eps(&preds, row.label, eps_log)?;
                TeacherPredictionSet::new(preds)?.with_task_losses(losses)
            })
            .collect::<Result<Vec<_>>>()?;
        let unlabeled_teachers = data
            .unlabeled_train
            .par_iter()
            .map(|row| TeacherPredictionSet::new(predict(&row.features)?))
            .collect::<Result<Vec<_>>>()?;
        let test_predictions = teachers
            .iter()
            .map(|t| data.test.iter().map(|r| t.params.predict_proba(&r.features)).collect())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch,
            master_seed,
            data,
            teachers,
            labeled_teachers,
            unlabeled_teachers,
            test_predictions,
        })
    }

    pub fn pools(&self) -> DistillPools<'_> {
        DistillPools {
            labeled: &self.data.labeled_train,
            labeled_teachers: &self.labeled_teachers,
            unlabeled: &self.data.unlabeled_train,
            unlabeled_teachers: &self.unlabeled_teachers,
        }
    }

    pub fn student_seeds(&self, n: usize) -> Vec<u64> {
        (0..n).map(|r| student_seed(self.master_seed, r)).collect()
    }

    /// Test accuracy of each teacher, in teacher order.
    pub fn teacher_accuracies(&self) -> Vec<f64> {
        self.test_predictions
            .iter()
            .map(|preds| {
                let hits = preds.iter().zip(&self.data.test).filter(|(p, r)| p.argmax() == r.label).count();
                hits as f64 / self.data.test.len() as f64
            })
            .collect()
    }

    /// Test accuracy of the argmax of the uniform teacher average.
    pub fn ensemble_accuracy(&self) -> Result<f64> {
        let mut hits = 0usize;
        for (i, row) in self.data.test.iter().enumerate() {
            let set = TeacherPredictionSet::new(self.test_predictions.iter().map(|t| t[i].clone()).collect())?;
            if uniform_ensemble(&set).argmax() == row.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / self.data.test.len() as f64)
    }
}

/// Configuration and pools a distillation method trains on.
fn method_setup<'a>(
    method: MethodId,
    wb: &'a Workbench,
    cfg: &DistillConfig,
) -> Result<(DistillConfig, DistillPools<'a>)> {
    let baseline = DistillConfig {
        enable_teacher_weighting: false,
        enable_labeled_loss_weighting: false,
        enable_disagreement_weighting: false,
        ..*cfg
    };
    match method {
        MethodId::KdLabeled => Ok((baseline, wb.pools().without_unlabeled())),
        MethodId::KdUnlabeled => Ok((baseline, wb.pools().without_labeled())),
        MethodId::Unikd => Ok((*cfg, wb.pools())),
        other => Err(Error::UnknownMethod(format!("{other} does not train a student"))),
    }
}

/// Trains the student of a distillation method.
pub fn train_method(
    method: MethodId,
    wb: &Workbench,
    cfg: &DistillConfig,
    settings: &TrainSettings,
    seed: u64,
    sink: Option<LossSink<'_>>,
) -> Result<TrainedModel> {
    let (cfg, pools) = method_setup(method, wb, cfg)?;
    train_student(&wb.arch, pools, &cfg, settings, seed, sink)
}

/// Test accuracy of one method. `single` is the mean over teachers and
/// `ensemble` does not train; both ignore `seed`.
pub fn run_method(
    method: MethodId,
    wb: &Workbench,
    cfg: &DistillConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<f64> {
    match method {
        MethodId::Single => {
            let acc = wb.teacher_accuracies();
            Ok(acc.iter().sum::<f64>() / acc.len() as f64)
        }
        MethodId::Ensemble => wb.ensemble_accuracy(),
        m => accuracy(&train_method(m, wb, cfg, settings, seed, None)?.params, &wb.data.test),
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEntry {
    pub method: String,
    pub seed: u64,
    pub lambda: Option<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub lambda: Option<f64>,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single entry.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub command: String,
    pub master_seed: u64,
    pub entries: Vec<ReportEntry>,
    pub summary: Vec<MethodSummary>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ExperimentReport {
    pub fn new(command: impl Into<String>, master_seed: u64, entries: Vec<ReportEntry>) -> Self {
        let mut groups: Vec<(String, Option<f64>, Vec<f64>)> = Vec::new();
        for e in &entries {
            match groups.iter_mut().find(|(m, l, _)| *m == e.method && *l == e.lambda) {
                Some(g) => g.2.push(e.accuracy),
                None => groups.push((e.method.clone(), e.lambda, vec![e.accuracy])),
            }
        }
        let summary = groups
            .into_iter()
            .map(|(method, lambda, values)| {
                let (mean, std) = mean_std(&values);
                MethodSummary {
                    method,
                    lambda,
                    n: values.len(),
                    mean,
                    std,
                }
            })
            .collect();
        Self {
            command: command.into(),
            master_seed,
            entries,
            summary,
        }
    }

    /// Mean accuracy of `method` (first matching λ group).
    pub fn mean(&self, method: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.method == method).map(|s| s.mean)
    }

    pub fn entries_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a ReportEntry> + 'a {
        self.entries.iter().filter(move |e| e.method == method)
    }

    /// `method,seed,lambda,accuracy` with a header row; floats use the
    /// shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,seed,lambda,accuracy\n");
        for e in &self.entries {
            let lambda = e.lambda.map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.method, e.seed, lambda, e.accuracy));
        }
        out
    }

    /// Aligned summary table, accuracies in percent.
    pub fn table(&self) -> String {
        let width = self.summary.iter().map(|s| s.method.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  {:>7}  {:>2}  {:>8}  {:>6}\n", "method", "lambda", "n", "mean(%)", "std");
        for s in &self.summary {
            let lambda = s.lambda.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<width$}  {:>7}  {:>2}  {:>8.2}  {:>6.2}\n",
                s.method,
                lambda,
                s.n,
                100.0 * s.mean,
                100.0 * s.std
            ));
        }
        out
    }

    pub fn to_json(&self, config: &RunConfig) -> serde_json::Value {
        serde_json::json!({
            "command": self.command,
            "master_seed": self.master_seed,
            "config": config,
            "results": self.entries,
            "summary": self.summary,
        })
    }
}

/// The full ordering single < kd_labeled < kd_unlabeled < unikd ≤ ensemble
/// over method means.
pub fn full_ordering_holds(report: &ExperimentReport) -> bool {
    let m = |k: MethodId| report.mean(k.as_str());
    match (
        m(MethodId::Single),
        m(MethodId::KdLabeled),
        m(MethodId::KdUnlabeled),
        m(MethodId::Unikd),
        m(MethodId::Ensemble),
    ) {
        (Some(s), Some(kl), Some(ku), Some(u), Some(e)) => s < kl && kl < ku && ku < u && u <= e,
        _ => false,
    }
}

fn run_jobs<J: Sync>(
    jobs: &[J],
    run: impl Fn(&J) -> Result<ReportEntry> + Sync + Send,
) -> Result<Vec<ReportEntry>> {
    jobs.par_iter().map(run).collect()
}

fn student_entry(
    name: &str,
    lambda: Option<f64>,
    pools: DistillPools<'_>,
    wb: &Workbench,
    cfg: &DistillConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<ReportEntry> {
    let student = train_student(&wb.arch, pools, cfg, settings, seed, None)?;
    Ok(ReportEntry {
        method: name.to_string(),
        seed,
        lambda,
        accuracy: accuracy(&student.params, &wb.data.test)?,
    })
}

/// Five-method comparison: one `single` entry per teacher, one `ensemble`
/// entry, and one entry per seed for each distillation method.
pub fn compare(
    wb: &Workbench,
    cfg: &DistillConfig,
    settings: &TrainSettings,
    seeds: &[u64],
) -> Result<ExperimentReport> {
    let mut entries: Vec<ReportEntry> = wb
        .teacher_accuracies()
        .into_iter()
        .zip(&wb.teachers)
        .map(|(accuracy, t)| ReportEntry {
            method: MethodId::Single.to_string(),
            seed: t.seed,
            lambda: None,
            accuracy,
        })
        .collect();
    entries.push(ReportEntry {
        method: MethodId::Ensemble.to_string(),
        seed: wb.master_seed,
        lambda: None,
        accuracy: wb.ensemble_accuracy()?,
    });
    let jobs: Vec<(MethodId, u64)> = [MethodId::KdLabeled, MethodId::KdUnlabeled, MethodId::Unikd]
        .into_iter()
        .flat_map(|m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    entries.extend(run_jobs(&jobs, |&(m, seed)| {
        let (mcfg, pools) = method_setup(m, wb, cfg)?;
        student_entry(m.as_str(), None, pools, wb, &mcfg, settings, seed)
    })?);
    Ok(ExperimentReport::new("compare", wb.master_seed, entries))
}

/// Which pools UniKD distills on.
pub const DATA_SOURCE_CONFIGS: [&str; 3] = ["labeled_only", "unlabeled_only", "both"];

pub fn ablation_data_sources(
    wb: &Workbench,
    cfg: &DistillConfig,
    settings: &TrainSettings,
    seeds: &[u64],
) -> Result<ExperimentReport> {
    let jobs: Vec<(&str, u64)> = DATA_SOURCE_CONFIGS
        .into_iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let entries = run_jobs(&jobs, |&(name, seed)| {
        let pools = match name {
            "labeled_only" => wb.pools().without_unlabeled(),
            "unlabeled_only" => wb.pools().without_labeled(),
            _ => wb.pools(),
        };
        student_entry(name, None, pools, wb, cfg, settings, seed)
    })?;
    Ok(ExperimentReport::new("ablate_data_sources", wb.master_seed, entries))
}

/// UniKD with one weighting mechanism switched off at a time.
pub const WEIGHTING_CONFIGS: [&str; 4] = [
    "full",
    "no_teacher_weighting",
    "no_labeled_loss_weighting",
    "no_disagreement_weighting",
];

pub fn weighting_config(name: &str, cfg: &DistillConfig) -> Result<DistillConfig> {
    let mut c = *cfg;
    match name {
        "full" => {}
        "no_teacher_weighting" => c.enable_teacher_weighting = false,
        "no_labeled_loss_weighting" => c.enable_labeled_loss_weighting = false,
        "no_disagreement_weighting" => c.enable_disagreement_weighting = false,
        other => return Err(Error::UnknownMethod(other.to_string())),
    }
    Ok(c)
}

pub fn ablation_weighting(
    wb: &Workbench,
    cfg: &DistillConfig,
    settings: &TrainSettings,
    seeds: &[u64],
) -> Result<ExperimentReport> {
    let jobs: Vec<(&str, u64)> = WEIGHTING_CONFIGS
        .into_iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let entries = run_jobs(&jobs, |&(name, seed)| {
        let c = weighting_config(name, cfg)?;
        student_entry(name, None, wb.pools(), wb, &c, settings, seed)
    })?;
    Ok(ExperimentReport::new("ablate_weighting", wb.master_seed, entries))
}

pub fn sweep_lambda(
    wb: &Workbench,
    cfg: &DistillConfig,
    settings: &TrainSettings,
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<ExperimentReport> {
    if lambdas.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    let jobs: Vec<(f64, u64)> = lambdas.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    let entries = run_jobs(&jobs, |&(lambda, seed)| {
        let c = DistillConfig { lambda, ..*cfg };
        student_entry(MethodId::Unikd.as_str(), Some(lambda), wb.pools(), wb, &c, settings, seed)
    })?;
    Ok(ExperimentReport::new("sweep", wb.master_seed, entries))
}

// ---------------------------------------------------------------------------
// End-to-end setup from a RunConfig
// ---------------------------------------------------------------------------

/// Training source and test rows, either synthetic or from CSV.
pub fn load_sources(cfg: &RunConfig) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    use crate::data::{circle_means, generate_multimodal_mixture, load_csv, CsvSchema};
    match (&cfg.train_csv, &cfg.test_csv) {
        (Some(train), Some(test)) => {
            let schema = CsvSchema::default();
            Ok((load_csv(train, &schema)?, load_csv(test, &schema)?))
        }
        _ => {
            let means = circle_means(cfg.num_classes * cfg.modes_per_class, cfg.input_dim, cfg.class_radius);
            let train =
                generate_multimodal_mixture(cfg.num_classes, cfg.train_per_class, &means, cfg.cov_scale, cfg.seed)?;
            let test = generate_multimodal_mixture(
                cfg.num_classes,
                cfg.test_per_class,
                &means,
                cfg.cov_scale,
                cfg.seed.wrapping_add(1),
            )?;
            Ok((train, test))
        }
    }
}

/// Partitions plus the rows teachers are trained on.
pub fn prepare_data(cfg: &RunConfig) -> Result<(SplitDataset, Vec<LabeledExample>)> {
    let (source, test) = load_sources(cfg)?;
    if let Some(bad) = source.iter().chain(&test).find(|r| r.features.len() != cfg.input_dim) {
        return Err(Error::DimensionMismatch {
            context: "feature count",
            expected: cfg.input_dim,
            found: bad.features.len(),
        });
    }
    if let Some(bad) = source.iter().chain(&test).find(|r| r.label >= cfg.num_classes) {
        return Err(Error::InvalidLabel {
            label: bad.label,
            num_classes: cfg.num_classes,
        });
    }
    let (mut split, indices) = crate::data::split_indexed(
        &source,
        cfg.labeled_fraction,
        cfg.val_fraction,
        0.0,
        cfg.seed.wrapping_add(2),
    )?;
    split.test = test;
    let mut teacher_rows = split.labeled_train.clone();
    if cfg.include_unlabeled_in_teachers {
        teacher_rows.extend(indices.unlabeled_train.iter().map(|&i| source[i].clone()));
    }
    Ok((split, teacher_rows))
}

/// Data, teachers and cached predictions for `cfg`.
pub fn build_workbench(cfg: &RunConfig) -> Result<Workbench> {
    cfg.validate()?;
    let (split, teacher_rows) = prepare_data(cfg)?;
    let arch = cfg.architecture();
    let teachers = train_teachers(
        &arch,
        &teacher_rows,
        cfg.n_teachers,
        &TrainSettings::teacher(cfg),
        cfg.seed,
        cfg.eps_log,
    )?;
    Workbench::new(arch, cfg.seed, split, teachers, cfg.eps_log)
}
