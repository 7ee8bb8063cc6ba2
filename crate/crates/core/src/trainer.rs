//! Single-pass streaming training, evaluation and the ablation suite.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{argmax, task_loss, ForwardOptions, Model, Sample, SiteRouter};
use crate::checkpoint;
use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradDiff};
use crate::metrics::{homogeneity_report, HomogeneityReport, MetricLedger};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::routing::{RoutingDecision, SitePin};
use crate::stability::{reference_weights, reg_loss, total_loss, EmaShadow};
use crate::stream::{build_stream, Chunk, Stream};
use crate::tensor::Tensor;
use crate::trace::{trace_sample, write_jsonl, TraceRecord};

/// Checkpoint prefix for optimizer moments.
pub const OPT_PREFIX: &str = "opt.";
/// Checkpoint prefix for run progress.
pub const RUN_PREFIX: &str = "run.";

/// Adam with bias correction:
///
/// ```text
/// m ← β1 m + (1 − β1) g          v ← β2 v + (1 − β2) g²
/// m̂ = m / (1 − β1^k)             v̂ = v / (1 − β2^k)
/// θ ← θ − lr · m̂ / (√v̂ + ε)
/// ```
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<ParamId, Tensor>,
    v: BTreeMap<ParamId, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `grads`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<ParamId, Tensor>,
    ) -> Result<()> {
        self.step += 1;
        let k = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(k), 1.0 - b2.powi(k));
        for (&id, g) in grads {
            let shape = (g.rows(), g.cols());
            let m = self
                .m
                .entry(id)
                .or_insert_with(|| Tensor::zeros(shape.0, shape.1));
            let v = self
                .v
                .entry(id)
                .or_insert_with(|| Tensor::zeros(shape.0, shape.1));
            let theta = store.value_mut(id);
            if !theta.same_shape(g) {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: theta.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let md = m.data_mut();
            let vd = v.data_mut();
            for (i, (t, &gi)) in theta.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                *t -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn records(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (id, t) in &self.m {
            out.insert(format!("{OPT_PREFIX}m.{}", store.name(*id)), t.clone());
        }
        for (id, t) in &self.v {
            out.insert(format!("{OPT_PREFIX}v.{}", store.name(*id)), t.clone());
        }
        out.insert(
            format!("{OPT_PREFIX}__step"),
            Tensor::scalar(self.step as f64),
        );
        out
    }

    pub fn load_records(
        &mut self,
        store: &ParamStore,
        records: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (path, t) in records {
            let Some(rest) = path.strip_prefix(OPT_PREFIX) else {
                continue;
            };
            if rest == "__step" {
                self.step = t.item() as u64;
            } else if let Some(p) = rest.strip_prefix("m.") {
                self.m.insert(store.id(p)?, t.clone());
            } else if let Some(p) = rest.strip_prefix("v.") {
                self.v.insert(store.id(p)?, t.clone());
            } else {
                return Err(Error::Invalid(format!("unknown optimizer record `{path}`")));
            }
        }
        Ok(())
    }
}

/// Loss terms of one sample on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub task: f64,
    pub reg: f64,
}

/// Per-site values frozen at a reference point: routing pins and the
/// reference weights `s̄`.
#[derive(Clone, Debug, Default)]
pub struct SamplePins {
    pub routes: Vec<Option<SitePin>>,
    pub s_bar: Vec<Option<Tensor>>,
}

/// `task_loss + λ · Σ_sites reg_loss` for one sample.
///
/// The regularizer is summed over every routed site with token weighting;
/// each site's term is already averaged over tokens.
pub fn sample_objective(
    tape: &mut Tape,
    model: &Model,
    shadow: &EmaShadow,
    sample: &Sample,
    lambda: f64,
    use_reg: bool,
    pins: Option<&SamplePins>,
) -> Result<Objective> {
    let routes = pins.map(|p| p.routes.as_slice());
    let out = model.forward(tape, sample, &ForwardOptions { pins: routes })?;
    let task = task_loss(tape, out.logits, sample.label)?;
    let mut reg: Option<Var> = None;
    if use_reg {
        for sf in &out.sites {
            let (Some(routed), SiteRouter::Routed(state)) =
                (&sf.routed, &model.sites[sf.site].router)
            else {
                continue;
            };
            if routed.z.is_none() {
                continue;
            }
            let s_bar = match pins
                .and_then(|p| p.s_bar.get(sf.site))
                .and_then(Option::as_ref)
            {
                Some(t) => tape.constant(t.clone()),
                None => reference_weights(tape, shadow, state, sf.h, out.x_text, &routed.mask)?,
            };
            let term = reg_loss(tape, s_bar, routed.s, &routed.mask, &routed.mask)?;
            reg = Some(match reg {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    let total = total_loss(tape, task, reg, lambda)?;
    Ok(Objective {
        total,
        task: tape.value(task).item(),
        reg: reg.map_or(0.0, |r| tape.value(r).item()),
    })
}

/// Batch-mean gradients and losses.
#[derive(Clone, Debug)]
pub struct BatchGrad {
    pub task: f64,
    pub reg: f64,
    pub total: f64,
    pub grads: BTreeMap<ParamId, Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub chunk: usize,
    pub step: u64,
    pub task: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Serialize)]
struct NanDump<'a> {
    sample_ids: Vec<u64>,
    task_ids: Vec<usize>,
    labels: Vec<usize>,
    task_loss: Vec<f64>,
    reg_loss: Vec<f64>,
    total_loss: Vec<f64>,
    variant: &'a str,
}

/// Model, EMA shadow and optimizer moving through the stream together.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub shadow: EmaShadow,
    pub opt: Adam,
    pub variant: Variant,
    pub lambda: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub trace_every: usize,
    /// Number of chunks consumed.
    pub chunks_done: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(
            cfg.backbone.clone(),
            cfg.adapter.clone(),
            cfg.variant.mode,
            rng::derive_seed(cfg.seed, "model"),
        )?;
        let shadow = EmaShadow::init_from(&model.store, &model.shadow_tracked_params(), cfg.beta)?;
        Ok(Self {
            model,
            shadow,
            opt: Adam::new(cfg.lr),
            variant: cfg.variant,
            lambda: cfg.lambda,
            batch_size: cfg.batch_size,
            grad_clip: cfg.grad_clip,
            trace_every: cfg.trace_every,
            chunks_done: 0,
        })
    }

    fn reg_active(&self) -> bool {
        self.variant.use_reg && self.lambda != 0.0
    }

    /// Per-sample forward/backward in parallel, reduced in batch order.
    pub fn batch_gradients(&self, batch: &[Sample]) -> Result<BatchGrad> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let use_reg = self.reg_active();
        let per_sample: Vec<(f64, f64, f64, Vec<(ParamId, Tensor)>)> = batch
            .par_iter()
            .map(|s| {
                let mut tape = Tape::new();
                let obj = sample_objective(
                    &mut tape,
                    &self.model,
                    &self.shadow,
                    s,
                    self.lambda,
                    use_reg,
                    None,
                )?;
                let total = tape.value(obj.total).item();
                let grads = if total.is_finite() {
                    let g = tape.backward(obj.total)?;
                    g.param_grads().map(|(id, t)| (id, t.clone())).collect()
                } else {
                    Vec::new()
                };
                Ok((obj.task, obj.reg, total, grads))
            })
            .collect::<Result<_>>()?;

        if per_sample.iter().any(|r| !r.2.is_finite()) {
            let dump = NanDump {
                sample_ids: batch.iter().map(|s| s.id).collect(),
                task_ids: batch.iter().map(|s| s.task_id).collect(),
                labels: batch.iter().map(|s| s.label).collect(),
                task_loss: per_sample.iter().map(|r| r.0).collect(),
                reg_loss: per_sample.iter().map(|r| r.1).collect(),
                total_loss: per_sample.iter().map(|r| r.2).collect(),
                variant: &self.variant.to_string(),
            };
            return Err(Error::NonFinite(serde_json::to_string(&dump)?));
        }

        let n = batch.len() as f64;
        let mut grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        let (mut task, mut reg, mut total) = (0.0, 0.0, 0.0);
        for (t, r, tot, g) in per_sample {
            task += t;
            reg += r;
            total += tot;
            for (id, gi) in g {
                match grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&gi),
                    None => {
                        grads.insert(id, gi);
                    }
                }
            }
        }
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        Ok(BatchGrad {
            task: task / n,
            reg: reg / n,
            total: total / n,
            grads,
        })
    }

    /// One optimizer step on `batch` followed by one EMA update.
    pub fn train_batch(&mut self, batch: &[Sample], chunk: usize) -> Result<StepLog> {
        let mut bg = self.batch_gradients(batch)?;
        if self.grad_clip > 0.0 {
            let norm = bg
                .grads
                .values()
                .map(Tensor::frobenius_sq)
                .sum::<f64>()
                .sqrt();
            if norm > self.grad_clip {
                let c = self.grad_clip / norm;
                for g in bg.grads.values_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= c);
                }
            }
        }
        if !bg.grads.is_empty() {
            self.opt.step(&mut self.model.store, &bg.grads)?;
        }
        self.shadow.update(&self.model.store)?;
        Ok(StepLog {
            chunk,
            step: self.shadow.step(),
            task: bg.task,
            reg: bg.reg,
            total: bg.total,
        })
    }

    /// One epoch over the chunk in order, in batches of `batch_size`.
    pub fn train_chunk(&mut self, chunk: &Chunk) -> Result<(Vec<StepLog>, Vec<TraceRecord>)> {
        let mut steps = Vec::new();
        let mut traces = Vec::new();
        for (b, batch) in chunk.samples.chunks(self.batch_size).enumerate() {
            if self.trace_every > 0 && b % self.trace_every == 0 {
                for s in batch {
                    traces.extend(trace_sample(&self.model, s, chunk.t)?);
                }
            }
            steps.push(self.train_batch(batch, chunk.t)?);
        }
        self.chunks_done = chunk.t;
        Ok((steps, traces))
    }

    /// Model, shadow, optimizer and run progress as one record map.
    pub fn checkpoint_records(&self, ledger: &MetricLedger) -> BTreeMap<String, Tensor> {
        let store = &self.model.store;
        let mut rec = store.records();
        rec.extend(self.shadow.records(store));
        rec.extend(self.opt.records(store));
        rec.insert(
            format!("{RUN_PREFIX}chunk"),
            Tensor::scalar(self.chunks_done as f64),
        );
        let m = ledger.n_tasks();
        if !ledger.rows().is_empty() && m > 0 {
            let data = ledger
                .rows()
                .iter()
                .flat_map(|r| r.tasks.iter().map(|t| t.map_or(f64::NAN, |t| t.a)))
                .collect();
            rec.insert(
                format!("{RUN_PREFIX}acc"),
                Tensor::new(ledger.rows().len(), m, data).expect("ledger is rectangular"),
            );
        }
        rec
    }

    /// Restores state written by [`Trainer::checkpoint_records`] and returns the ledger.
    pub fn restore(
        &mut self,
        rec: &BTreeMap<String, Tensor>,
        n_tasks: usize,
    ) -> Result<MetricLedger> {
        let model_rec: BTreeMap<String, Tensor> = rec
            .iter()
            .filter(|(k, _)| {
                !k.starts_with(crate::stability::EMA_PREFIX)
                    && !k.starts_with(OPT_PREFIX)
                    && !k.starts_with(RUN_PREFIX)
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let unknown = self.model.store.load_records(&model_rec)?;
        if let Some(p) = unknown.first() {
            return Err(Error::Invalid(format!(
                "checkpoint has unknown parameter `{p}`"
            )));
        }
        self.shadow.load_records(&self.model.store, rec)?;
        self.opt.load_records(&self.model.store, rec)?;
        self.chunks_done = rec
            .get(&format!("{RUN_PREFIX}chunk"))
            .map_or(0, |t| t.item() as usize);
        let mut ledger = MetricLedger::new(n_tasks);
        if let Some(acc) = rec.get(&format!("{RUN_PREFIX}acc")) {
            for r in 0..acc.rows() {
                let row: Vec<Option<f64>> = acc
                    .row_slice(r)
                    .iter()
                    .map(|&v| (!v.is_nan()).then_some(v))
                    .collect();
                ledger.push(&row)?;
            }
        }
        Ok(ledger)
    }
}

/// Predicted class of every sample.
pub fn predictions(model: &Model, samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .par_iter()
        .map(|s| model.predict_logits(s).map(|l| argmax(&l)))
        .collect()
}

/// Exact fraction of correct predictions.
pub fn accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    let pred = predictions(model, samples)?;
    let correct = pred
        .iter()
        .zip(samples)
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Accuracy on every test set flagged in `seen`; `None` elsewhere.
pub fn eval_model(
    model: &Model,
    test_sets: &[Vec<Sample>],
    seen: &[bool],
) -> Result<Vec<Option<f64>>> {
    test_sets
        .iter()
        .zip(seen)
        .map(|(t, &s)| {
            if s {
                accuracy(model, t).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct RunLog {
    pub config: RunConfig,
    pub schedule: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
    pub steps: Vec<StepLog>,
    pub accuracies: Vec<Vec<Option<f64>>>,
    pub wall_clock_secs: f64,
}

pub struct RunOutput {
    pub ledger: MetricLedger,
    pub log: RunLog,
    pub trainer: Trainer,
    /// Training-time routing traces (every `trace_every`-th batch).
    pub traces: Vec<TraceRecord>,
    /// Routing of every test sample under the final model.
    pub eval_traces: Vec<TraceRecord>,
}

impl RunOutput {
    /// Cross-task routing homogeneity of the final model on the test sets.
    pub fn homogeneity(&self) -> Result<HomogeneityReport> {
        let tasks: Vec<usize> = (0..self.ledger.n_tasks()).collect();
        homogeneity_report(&self.eval_traces, &tasks)
    }

    pub fn final_map_maf(&self) -> (f64, f64) {
        self.ledger.last().map_or((0.0, 0.0), |r| (r.map, r.maf))
    }
}

/// Trains on `chunks` strictly in order, evaluating every seen task after each.
///
/// `chunks` is consumed once; nothing is buffered across chunks.
pub fn run_on_chunks<I>(
    cfg: &RunConfig,
    mut trainer: Trainer,
    mut ledger: MetricLedger,
    chunks: I,
    test_sets: &[Vec<Sample>],
) -> Result<RunOutput>
where
    I: IntoIterator<Item = Result<Chunk>>,
{
    let start = Instant::now();
    let m = test_sets.len();
    let mut seen: Vec<bool> = vec![false; m];
    if let Some(last) = ledger.last() {
        for (s, t) in seen.iter_mut().zip(&last.tasks) {
            *s = t.is_some();
        }
    }
    let mut steps = Vec::new();
    let mut counts = Vec::new();
    let mut traces = Vec::new();
    let mut schedule = Vec::new();
    for chunk in chunks {
        let chunk = chunk?;
        if chunk.t <= trainer.chunks_done {
            return Err(Error::Invalid(format!(
                "chunk {} arrived after chunk {}",
                chunk.t, trainer.chunks_done
            )));
        }
        if chunk.counts.len() != m {
            return Err(Error::Invalid(format!(
                "chunk {} covers {} tasks, expected {m}",
                chunk.t,
                chunk.counts.len()
            )));
        }
        let n = chunk.samples.len() as f64;
        schedule.push(chunk.counts.iter().map(|&c| c as f64 / n).collect());
        for (s, &c) in seen.iter_mut().zip(&chunk.counts) {
            *s |= c > 0;
        }
        let (st, tr) = match trainer.train_chunk(&chunk) {
            Ok(v) => v,
            Err(Error::NonFinite(dump)) => {
                if let Some(out) = &cfg.out {
                    fs::create_dir_all(out)?;
                    fs::write(out.join("nan_dump.json"), &dump)?;
                }
                return Err(Error::NonFinite(format!(
                    "non-finite loss in chunk {}: {dump}",
                    chunk.t
                )));
            }
            Err(e) => return Err(e),
        };
        steps.extend(st);
        traces.extend(tr);
        counts.push(chunk.counts.clone());
        let acc = eval_model(&trainer.model, test_sets, &seen)?;
        ledger.push(&acc)?;
        if let Some(out) = &cfg.out {
            fs::create_dir_all(out)?;
            checkpoint::save(
                &out.join("checkpoint.slck"),
                &trainer.checkpoint_records(&ledger),
            )?;
        }
    }
    let last = trainer.chunks_done;
    let eval_traces = test_sets
        .par_iter()
        .flat_map_iter(|set| set.iter().map(|s| trace_sample(&trainer.model, s, last)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let log = RunLog {
        config: cfg.clone(),
        schedule,
        counts,
        steps,
        accuracies: ledger
            .rows()
            .iter()
            .map(|r| r.tasks.iter().map(|t| t.map(|t| t.a)).collect())
            .collect(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        ledger,
        log,
        trainer,
        traces,
        eval_traces,
    })
}

/// Builds the stream and model from `cfg`, trains over every chunk and, if
/// `cfg.out` is set, writes the run artifacts there.
pub fn run_stream(cfg: &RunConfig) -> Result<RunOutput> {
    let stream = stream_for(cfg)?;
    let trainer = Trainer::new(cfg)?;
    let ledger = MetricLedger::new(stream.config.n_tasks);
    let tests: Vec<Vec<Sample>> = stream
        .generators
        .iter()
        .map(|g| g.test_set().to_vec())
        .collect();
    let out = run_on_chunks(cfg, trainer, ledger, stream.chunks(), &tests)?;
    if let Some(dir) = &cfg.out {
        write_outputs(dir, &out)?;
    }
    Ok(out)
}

/// Continues a run from `checkpoint`, skipping the chunks it already covers.
pub fn resume_stream(cfg: &RunConfig, checkpoint: &Path) -> Result<RunOutput> {
    let stream = stream_for(cfg)?;
    let mut trainer = Trainer::new(cfg)?;
    let ledger = trainer.restore(&checkpoint::load(checkpoint)?, stream.config.n_tasks)?;
    let tests: Vec<Vec<Sample>> = stream
        .generators
        .iter()
        .map(|g| g.test_set().to_vec())
        .collect();
    let from = trainer.chunks_done + 1;
    let chunks = (from..=stream.schedule.n_chunks()).map(|t| stream.chunk(t));
    let out = run_on_chunks(cfg, trainer, ledger, chunks, &tests)?;
    if let Some(dir) = &cfg.out {
        write_outputs(dir, &out)?;
    }
    Ok(out)
}

pub fn stream_for(cfg: &RunConfig) -> Result<Stream> {
    cfg.validate()?;
    build_stream(cfg.stream.clone(), cfg.seed)
}

/// `metrics.csv`, `metrics_summary.csv`, `traces.jsonl`, `eval_traces.jsonl`,
/// `run_log.json`, `config.txt` and, when defined, `cka.csv` and `activation.csv`.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    out.ledger
        .write_task_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?))?;
    out.ledger.write_summary_csv(BufWriter::new(File::create(
        dir.join("metrics_summary.csv"),
    )?))?;
    write_jsonl(
        BufWriter::new(File::create(dir.join("traces.jsonl"))?),
        &out.traces,
    )?;
    write_jsonl(
        BufWriter::new(File::create(dir.join("eval_traces.jsonl"))?),
        &out.eval_traces,
    )?;
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(dir.join("run_log.json"))?),
        &out.log,
    )?;
    fs::write(dir.join("config.txt"), out.log.config.to_text())?;
    if !out.eval_traces.is_empty() {
        if let Ok(report) = out.homogeneity() {
            report.write_cka_csv(BufWriter::new(File::create(dir.join("cka.csv"))?))?;
            report
                .write_activation_csv(BufWriter::new(File::create(dir.join("activation.csv"))?))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub map: f64,
    pub maf: f64,
    /// Mean off-diagonal routing CKA of the final model, when defined.
    pub cka: Option<f64>,
}

/// Runs the six component combinations on the same stream and model seed.
/// With `base.out` set each variant writes to its own subdirectory and the
/// table goes to `ablation.csv`.
pub fn run_ablation_suite(base: &RunConfig) -> Result<Vec<AblationRow>> {
    run_variants(base, &Variant::ablation_grid())
}

/// Runs `variants` on the same stream and model seed.
pub fn run_variants(base: &RunConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let rows = variants
        .par_iter()
        .map(|&v| {
            let mut cfg = base.clone();
            cfg.variant = v;
            cfg.out = base.out.as_ref().map(|d| d.join(variant_dir(v)));
            let out = run_stream(&cfg)?;
            let (map, maf) = out.final_map_maf();
            let cka = out.homogeneity().ok().and_then(|r| r.mean_off_diagonal());
            Ok(AblationRow {
                variant: v,
                map,
                maf,
                cka,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &base.out {
        fs::create_dir_all(dir)?;
        let mut text =
            String::from("use_selection,use_token_weighting,use_reg,variant,MAP,MAF,CKA\n");
        for r in &rows {
            let (p, s, g) = r.variant.flags().unwrap_or((false, false, false));
            let cka = r.cka.map_or(String::new(), |c| c.to_string());
            text += &format!("{p},{s},{g},{},{},{},{cka}\n", r.variant, r.map, r.maf);
        }
        fs::write(dir.join("ablation.csv"), text)?;
    }
    Ok(rows)
}

/// Directory name of a variant's artifacts.
pub fn variant_dir(v: Variant) -> String {
    match v.flags() {
        Some((p, s, r)) => format!("p{}_s{}_reg{}", u8::from(p), u8::from(s), u8::from(r)),
        None => v.mode.to_string(),
    }
}

/// Mean per-sample objective over `samples` on one tape.
fn audit_objective(
    tape: &mut Tape,
    model: &Model,
    shadow: &EmaShadow,
    samples: &[Sample],
    pins: &[SamplePins],
    lambda: f64,
    use_reg: bool,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (s, pin) in samples.iter().zip(pins) {
        let obj = sample_objective(tape, model, shadow, s, lambda, use_reg, Some(pin))?;
        acc = Some(match acc {
            Some(a) => tape.add(a, obj.total)?,
            None => obj.total,
        });
    }
    let total = acc.ok_or_else(|| Error::Invalid("no samples to audit".into()))?;
    Ok(tape.scale(total, 1.0 / samples.len() as f64))
}

/// Finite-difference audit of the full training objective.
///
/// Routing subsets, the detached selection probabilities and the reference
/// weights `s̄` are pinned at the current parameters. The surrogate is then
/// smooth, equals the real objective at the pin point, and its gradient is
/// the one training uses: the straight-through path into `W_g` included and
/// the stop-gradient on `s̄` respected.
pub fn gradient_audit(
    trainer: &Trainer,
    samples: &[Sample],
    epsilon: f64,
) -> Result<Vec<GradDiff>> {
    let model = &trainer.model;
    let use_reg = trainer.variant.use_reg;
    let pins: Vec<SamplePins> = samples
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, s, &ForwardOptions::default())?;
            let n = model.sites.len();
            let mut pins = SamplePins {
                routes: vec![None; n],
                s_bar: vec![None; n],
            };
            for sf in &out.sites {
                let Some(r) = &sf.routed else { continue };
                pins.routes[sf.site] = RoutingDecision::from_routed(&tape, r).pin();
                if let (SiteRouter::Routed(state), Some(_)) = (&model.sites[sf.site].router, r.z) {
                    if use_reg {
                        let sb = reference_weights(
                            &mut tape,
                            &trainer.shadow,
                            state,
                            sf.h,
                            out.x_text,
                            &r.mask,
                        )?;
                        pins.s_bar[sf.site] = Some(tape.value(sb).clone());
                    }
                }
            }
            Ok(pins)
        })
        .collect::<Result<_>>()?;

    let mut analytic = model.store.clone();
    analytic.zero_grad();
    let mut tape = Tape::new();
    let root = audit_objective(
        &mut tape,
        model,
        &trainer.shadow,
        samples,
        &pins,
        trainer.lambda,
        use_reg,
    )?;
    tape.backward_into(root, &mut analytic)?;

    let mut probe = model.clone();
    let mut store = std::mem::take(&mut probe.store);
    let numeric = gradcheck::finite_diff_grad(
        |s| {
            let mut m = probe.clone();
            m.store = s.clone();
            let mut tape = Tape::new();
            let root = audit_objective(
                &mut tape,
                &m,
                &trainer.shadow,
                samples,
                &pins,
                trainer.lambda,
                use_reg,
            )?;
            Ok(tape.value(root).item())
        },
        &mut store,
        epsilon,
    )?;
    Ok(gradcheck::compare(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> RunConfig {
        let mut c = RunConfig::parse("d_hidden = 16\nd_ff = 32\nrank = 4\nrouting_dim = 8\nn_chunks = 3\nchunk_size = 40\ntest_size = 20\nbatch_size = 8\n").unwrap();
        c.variant = variant;
        c
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut store = ParamStore::new();
        let id = store
            .insert("w", Tensor::row(vec![1.0, -2.0]), true)
            .unwrap();
        let mut opt = Adam::new(0.1);
        let g = BTreeMap::from([(id, Tensor::row(vec![0.5, -4.0]))]);
        opt.step(&mut store, &g).unwrap();
        // First bias-corrected step moves each coordinate by lr·sign(g) (up to ε).
        let v = store.value(id).data();
        assert!((v[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((v[1] - (-2.0 + 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn frozen_variant_changes_nothing() {
        let cfg = tiny(Variant::FROZEN);
        let stream = stream_for(&cfg).unwrap();
        let mut tr = Trainer::new(&cfg).unwrap();
        let before = tr.model.store.records();
        let chunk = stream.chunk(1).unwrap();
        let (steps, _) = tr.train_chunk(&chunk).unwrap();
        assert_eq!(tr.model.store.records(), before);
        assert_eq!(steps.len(), 5);
        assert_eq!(tr.shadow.step(), 5);
        let again = tr.batch_gradients(&chunk.samples[..8]).unwrap();
        assert_eq!(again.total, steps[0].total);
    }

    #[test]
    fn ema_steps_once_per_optimizer_step() {
        let cfg = tiny(Variant::FULL);
        let stream = stream_for(&cfg).unwrap();
        let mut tr = Trainer::new(&cfg).unwrap();
        tr.train_chunk(&stream.chunk(1).unwrap()).unwrap();
        assert_eq!(tr.shadow.step(), tr.opt.step_count());
        assert_eq!(tr.shadow.step(), 5);
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let cfg = tiny(Variant::FULL);
        let stream = stream_for(&cfg).unwrap();
        let mut tr = Trainer::new(&cfg).unwrap();
        let head = tr.model.store.id("head.b").unwrap();
        tr.model
            .store
            .set_value(head, Tensor::row(vec![f64::NAN; 4]))
            .unwrap();
        let err = tr.train_chunk(&stream.chunk(1).unwrap()).unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("sample_ids")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Variant::FULL);
        let full = run_stream(&cfg).unwrap();

        cfg.stream.n_chunks = 3;
        cfg.out = Some(dir.path().to_path_buf());
        let stream = stream_for(&cfg).unwrap();
        let tests: Vec<Vec<Sample>> = stream
            .generators
            .iter()
            .map(|g| g.test_set().to_vec())
            .collect();
        let tr = Trainer::new(&cfg).unwrap();
        let partial = run_on_chunks(
            &cfg,
            tr,
            MetricLedger::new(5),
            (1..=2).map(|t| stream.chunk(t)),
            &tests,
        )
        .unwrap();
        assert_eq!(partial.ledger.rows().len(), 2);
        let resumed = resume_stream(&cfg, &dir.path().join("checkpoint.slck")).unwrap();
        assert_eq!(resumed.ledger.rows(), full.ledger.rows());
        assert_eq!(
            resumed.trainer.model.store.records(),
            full.trainer.model.store.records()
        );
    }

    #[test]
    fn out_of_order_chunks_are_rejected() {
        let cfg = tiny(Variant::UNIFORM_MOE);
        let stream = stream_for(&cfg).unwrap();
        let tests: Vec<Vec<Sample>> = stream
            .generators
            .iter()
            .map(|g| g.test_set().to_vec())
            .collect();
        let tr = Trainer::new(&cfg).unwrap();
        let chunks = [2, 1].into_iter().map(|t| stream.chunk(t));
        assert!(run_on_chunks(&cfg, tr, MetricLedger::new(5), chunks, &tests).is_err());
    }
}
