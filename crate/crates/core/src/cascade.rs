//! Coarse-to-fine cascades of kernel-network classifiers.
//!
//! Stages run cheapest first. A pattern is rejected as soon as one stage
//! scores it at or below that stage's threshold, and it is accepted only
//! if every stage accepts. The last stage is the reference network and
//! classifier itself. The earlier stages are cheaper networks distilled
//! from it with conservation weighting, so they rarely reject what the
//! reference would accept. On imbalanced data most patterns leave at
//! stage 1.
//!
//! Support vectors of every stage live in one shared [`SampleStore`] and
//! stages refer to them by position.
//!
//! # Artifact format
//!
//! Little-endian. `b"DKCS"`, version `u32`, config hash (`u32` length +
//! UTF-8), kernel bank (`u64` chunks, `u64` chunk size, `f64` scales),
//! `u32` stage count, then per stage: network (layer count `u32`, sizes
//! `u64`, row-major `f64` weights), SVM (`f64` bias, `f64` C, `u8`
//! converged, `u8` degenerate, `u64` iterations, `u64` support count, then
//! per support vector `u64` store position, `f64` alpha, `i8` label),
//! `f64` threshold, distill settings. Finally the sample store: `u64` count,
//! `u64` dimension, then per sample `u64` id and `f64` features.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::base_kernels::KernelBank;
use crate::codec::{Reader, Writer};
use crate::distill::{self, DistillConfig, Targets, TrainingState};
use crate::error::{Error, Result};
use crate::kernel_net::{Architecture, KernelNetwork, Scratch};
use crate::metrics::{self, ReportRow};
use crate::svm::{sign_label, SvmModel};

const CASCADE_MAGIC: &[u8; 4] = b"DKCS";
const CASCADE_VERSION: u32 = 1;

/// `(units per hidden layer, hidden layers)` of the five surrogate stages.
/// "4 layers" counts three hidden layers plus the single output unit.
pub const SURROGATE_SHAPES: [(usize, usize); 5] = [(2, 3), (8, 3), (8, 5), (32, 5), (64, 5)];
/// Hidden layers of the reference network (8 layers including the output unit).
pub const REFERENCE_HIDDEN_LAYERS: usize = 7;
pub const REFERENCE_WIDTH: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub arch: Architecture,
    pub distill: DistillConfig,
}

/// Reference architecture `[n1, width x 7, 1]`.
pub fn reference_architecture(n1: usize, width: usize) -> Result<Architecture> {
    Architecture::uniform(n1, width, REFERENCE_HIDDEN_LAYERS)
}

/// The six default stage architectures. Surrogate widths are capped at the
/// reference width so no surrogate costs more than the reference.
pub fn default_architectures(n1: usize, reference_width: usize) -> Result<Vec<Architecture>> {
    let mut archs = SURROGATE_SHAPES
        .iter()
        .map(|&(w, h)| Architecture::uniform(n1, w.min(reference_width), h))
        .collect::<Result<Vec<_>>>()?;
    archs.push(reference_architecture(n1, reference_width)?);
    Ok(archs)
}

pub fn default_stage_specs(n1: usize, reference_width: usize, g_config: &DistillConfig, f_config: &DistillConfig) -> Result<Vec<StageSpec>> {
    let archs = default_architectures(n1, reference_width)?;
    let last = archs.len() - 1;
    Ok(archs
        .into_iter()
        .enumerate()
        .map(|(t, arch)| StageSpec {
            arch,
            distill: if t == last { f_config.clone() } else { g_config.clone() },
        })
        .collect())
}

/// Features referenced by the stages, keyed by a caller-chosen sample id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleStore {
    pub ids: Vec<u64>,
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub network: KernelNetwork,
    /// Compact SVM: one entry per support vector.
    pub svm: SvmModel,
    /// Store position of each support vector.
    pub support: Vec<usize>,
    /// Scores strictly above the threshold pass the stage.
    pub threshold: f64,
    pub spec: StageSpec,
}

impl Stage {
    /// Network forward passes per evaluated pattern.
    pub fn kernel_evals(&self) -> usize {
        self.support.len()
    }
}

/// `|support| x` multiply-accumulates of one network forward pass.
pub fn stage_cost(stage: &Stage) -> u64 {
    (stage.support.len() * stage.network.arch().mac_count()) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub label: f64,
    pub stages_consumed: usize,
    pub kernel_evals: usize,
    /// Sum of [`stage_cost`] over consumed stages.
    pub cost: u64,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    pub bank: KernelBank,
    pub stages: Vec<Stage>,
    pub store: SampleStore,
    /// Provenance tag carried into artifacts; empty when built outside a run.
    pub config_hash: String,
}

/// Per-pattern cache of base kernel vectors against store samples.
struct BaseCache {
    values: Vec<f64>,
    ready: Vec<bool>,
    n1: usize,
}

impl BaseCache {
    fn new(store_len: usize, n1: usize) -> Self {
        Self {
            values: vec![0.0; store_len * n1],
            ready: vec![false; store_len],
            n1,
        }
    }

    fn get(&mut self, bank: &KernelBank, x: &[f64], store: &SampleStore, pos: usize) -> &[f64] {
        let r = pos * self.n1..(pos + 1) * self.n1;
        if !self.ready[pos] {
            bank.base_kernel_into(x, &store.features[pos], &mut self.values[r.clone()]);
            self.ready[pos] = true;
        }
        &self.values[r]
    }
}

fn build_thread_pool(threads: Option<usize>) -> Result<Option<rayon::ThreadPool>> {
    threads
        .map(|t| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))
        })
        .transpose()
}

/// Run `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(match build_thread_pool(threads)? {
        Some(pool) => pool.install(f),
        None => f(),
    })
}

impl Cascade {
    /// One-stage cascade wrapping a trained network and its SVM.
    ///
    /// `ids[i]` names training sample `samples[i]`; support vectors are
    /// stored under those ids.
    pub fn single(bank: KernelBank, state: &TrainingState, spec: StageSpec, samples: &[Vec<f64>], ids: &[u64]) -> Result<Self> {
        if samples.len() != ids.len() || state.svm.len() != samples.len() {
            return Err(Error::invalid(format!(
                "{} samples, {} ids, SVM over {} samples",
                samples.len(),
                ids.len(),
                state.svm.len()
            )));
        }
        if state.network.arch() != &spec.arch {
            return Err(Error::invalid("trained network does not match the stage architecture"));
        }
        let (svm, keep) = state.svm.compact();
        let mut order: Vec<usize> = (0..keep.len()).collect();
        order.sort_by_key(|&k| ids[keep[k]]);
        let mut store = SampleStore::default();
        let mut support = vec![0; keep.len()];
        for k in order {
            let id = ids[keep[k]];
            if store.ids.last() != Some(&id) {
                store.ids.push(id);
                store.features.push(samples[keep[k]].clone());
            }
            support[k] = store.ids.len() - 1;
        }
        Ok(Self {
            bank,
            stages: vec![Stage {
                network: state.network.clone(),
                svm,
                support,
                threshold: 0.0,
                spec,
            }],
            store,
            config_hash: String::new(),
        })
    }

    /// Chain cascades in order, merging their sample stores by id.
    pub fn concat(parts: Vec<Cascade>) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("no stages to concatenate"))?;
        let bank = first.bank.clone();
        let config_hash = first.config_hash.clone();
        let mut merged: BTreeMap<u64, &Vec<f64>> = BTreeMap::new();
        for p in &parts {
            if p.bank != bank {
                return Err(Error::invalid("stages were trained with different kernel banks"));
            }
            for (id, f) in p.store.ids.iter().zip(&p.store.features) {
                if let Some(prev) = merged.insert(*id, f) {
                    if prev != f {
                        return Err(Error::invalid(format!("sample id {id} refers to different features")));
                    }
                }
            }
        }
        let position: BTreeMap<u64, usize> = merged.keys().enumerate().map(|(i, &id)| (id, i)).collect();
        let store = SampleStore {
            ids: merged.keys().copied().collect(),
            features: merged.values().map(|f| (*f).clone()).collect(),
        };
        let mut stages = Vec::new();
        for p in &parts {
            for s in &p.stages {
                let mut s = s.clone();
                s.support = s.support.iter().map(|&pos| position[&p.store.ids[pos]]).collect();
                stages.push(s);
            }
        }
        Ok(Self {
            bank,
            stages,
            store,
            config_hash,
        })
    }

    /// Build the full cascade from a trained reference.
    ///
    /// `specs` run cheap to expensive; the last one must describe the
    /// reference network, which is wrapped unchanged. Every other stage is
    /// distilled against the reference's scores on `samples`.
    pub fn build(bank: &KernelBank, reference: &TrainingState, samples: &[Vec<f64>], ids: &[u64], specs: &[StageSpec]) -> Result<Self> {
        let last = specs.last().ok_or_else(|| Error::invalid("empty stage list"))?;
        let f = Cascade::single(bank.clone(), reference, last.clone(), samples, ids)?;
        let mut parts = Vec::with_capacity(specs.len());
        for (t, spec) in specs[..specs.len() - 1].iter().enumerate() {
            let g = distill_stage(&f, spec, samples, ids, None).map_err(|e| e.with_stage(t + 1))?;
            parts.push(g);
        }
        parts.push(f);
        Cascade::concat(parts)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.bank.dim() {
            return Err(Error::invalid(format!("pattern has dimension {}, cascade expects {}", x.len(), self.bank.dim())));
        }
        Ok(())
    }

    fn score_with(&self, t: usize, x: &[f64], cache: &mut BaseCache, scratch: &mut Scratch, row: &mut Vec<f64>) -> f64 {
        let stage = &self.stages[t];
        row.clear();
        for &pos in &stage.support {
            let base = cache.get(&self.bank, x, &self.store, pos);
            row.push(stage.network.forward_value(base, scratch));
        }
        stage.svm.decision_unchecked(row)
    }

    fn scratch(&self) -> Scratch {
        let widest = self
            .stages
            .iter()
            .max_by_key(|s| s.network.arch().layer_sizes().iter().max().copied())
            .expect("cascade has stages");
        Scratch::new(widest.network.arch())
    }

    /// Score of stage `t` (0-based) alone.
    pub fn stage_score(&self, t: usize, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        if t >= self.stages.len() {
            return Err(Error::invalid(format!("stage {t} out of range")));
        }
        let mut cache = BaseCache::new(self.store.ids.len(), self.bank.num_chunks());
        Ok(self.score_with(t, x, &mut cache, &mut self.scratch(), &mut Vec::new()))
    }

    /// Scores of every stage, without short-circuiting.
    pub fn stage_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut cache = BaseCache::new(self.store.ids.len(), self.bank.num_chunks());
        let mut scratch = self.scratch();
        let mut row = Vec::new();
        Ok((0..self.stages.len()).map(|t| self.score_with(t, x, &mut cache, &mut scratch, &mut row)).collect())
    }

    /// Short-circuit evaluation: stop at the first stage that does not pass.
    pub fn evaluate(&self, x: &[f64]) -> Result<EvalOutcome> {
        self.check_dim(x)?;
        let mut cache = BaseCache::new(self.store.ids.len(), self.bank.num_chunks());
        let mut scratch = self.scratch();
        let mut row = Vec::new();
        let mut scores = Vec::with_capacity(self.stages.len());
        let mut kernel_evals = 0;
        let mut cost = 0;
        for (t, stage) in self.stages.iter().enumerate() {
            let s = self.score_with(t, x, &mut cache, &mut scratch, &mut row);
            scores.push(s);
            kernel_evals += stage.kernel_evals();
            cost += stage_cost(stage);
            if s <= stage.threshold {
                break;
            }
        }
        let stages_consumed = scores.len();
        let label = if stages_consumed == self.stages.len() && scores[stages_consumed - 1] > self.stages[stages_consumed - 1].threshold {
            1.0
        } else {
            -1.0
        };
        Ok(EvalOutcome {
            label,
            stages_consumed,
            kernel_evals,
            cost,
            scores,
        })
    }

    /// Evaluate many patterns; results are in input order and identical for any thread count.
    pub fn evaluate_many(&self, xs: &[Vec<f64>], threads: Option<usize>) -> Result<Vec<EvalOutcome>> {
        with_threads(threads, || xs.par_iter().map(|x| self.evaluate(x)).collect::<Result<Vec<_>>>())?
    }

    pub fn stage_scores_many(&self, xs: &[Vec<f64>], threads: Option<usize>) -> Result<Vec<Vec<f64>>> {
        with_threads(threads, || xs.par_iter().map(|x| self.stage_scores(x)).collect::<Result<Vec<_>>>())?
    }

    /// Decision of every stage on `x` in isolation.
    pub fn stage_decisions(&self, scores: &[f64]) -> Vec<f64> {
        scores
            .iter()
            .zip(&self.stages)
            .map(|(&s, st)| if s > st.threshold { 1.0 } else { -1.0 })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CASCADE_MAGIC);
        w.u32(CASCADE_VERSION);
        w.str(&self.config_hash);
        w.u64(self.bank.num_chunks() as u64);
        w.u64(self.bank.chunk_size() as u64);
        w.f64s(self.bank.scales());
        w.u32(self.stages.len() as u32);
        for s in &self.stages {
            s.network.encode(&mut w);
            w.f64(s.svm.bias);
            w.f64(s.svm.c);
            w.u8(s.svm.converged as u8);
            w.u8(s.svm.degenerate as u8);
            w.u64(s.svm.iterations as u64);
            w.u64(s.support.len() as u64);
            for ((&pos, &a), &y) in s.support.iter().zip(&s.svm.alphas).zip(&s.svm.labels) {
                w.u64(pos as u64);
                w.f64(a);
                w.i8(if y > 0.0 { 1 } else { -1 });
            }
            w.f64(s.threshold);
            encode_config(&mut w, &s.spec.distill);
        }
        w.u64(self.store.ids.len() as u64);
        w.u64(self.bank.dim() as u64);
        for (id, f) in self.store.ids.iter().zip(&self.store.features) {
            w.u64(*id);
            w.f64s(f);
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        r.expect_magic(CASCADE_MAGIC)?;
        let version = r.u32()?;
        if version != CASCADE_VERSION {
            return Err(Error::Version {
                kind: "cascade artifact",
                found: version,
                expected: CASCADE_VERSION,
            });
        }
        let config_hash = r.str()?;
        let at = r.offset();
        let n1 = r.u64()? as usize;
        let cs = r.u64()? as usize;
        if n1 == 0 || n1 > 1 << 20 || cs == 0 || cs > 1 << 24 {
            return Err(Error::Parse { offset: at, message: format!("implausible bank layout {n1}x{cs}") });
        }
        let scales = r.f64s(n1)?;
        let bank = KernelBank::new(n1, cs, scales).map_err(|e| Error::Parse { offset: at, message: e.to_string() })?;
        let num_stages = r.u32()? as usize;
        if num_stages == 0 {
            return Err(r.error("cascade has no stages"));
        }
        let mut stages = Vec::with_capacity(num_stages.min(64));
        for _ in 0..num_stages {
            let network = KernelNetwork::decode(&mut r)?;
            let bias = r.f64()?;
            let c = r.f64()?;
            let converged = r.u8()? != 0;
            let degenerate = r.u8()? != 0;
            let iterations = r.u64()? as usize;
            let n_sv = r.len(17)?;
            let mut support = Vec::with_capacity(n_sv);
            let mut alphas = Vec::with_capacity(n_sv);
            let mut labels = Vec::with_capacity(n_sv);
            for _ in 0..n_sv {
                support.push(r.u64()? as usize);
                alphas.push(r.f64()?);
                let at = r.offset();
                labels.push(match r.i8()? {
                    1 => 1.0,
                    -1 => -1.0,
                    v => return Err(Error::Parse { offset: at, message: format!("bad label {v}") }),
                });
            }
            let threshold = r.f64()?;
            let distill = decode_config(&mut r)?;
            let arch = network.arch().clone();
            stages.push(Stage {
                network,
                svm: SvmModel {
                    alphas,
                    labels,
                    bias,
                    c,
                    converged,
                    degenerate,
                    iterations,
                },
                support,
                threshold,
                spec: StageSpec { arch, distill },
            });
        }
        let count = r.len(8)?;
        let at = r.offset();
        let dim = r.u64()? as usize;
        if dim != bank.dim() {
            return Err(Error::Parse { offset: at, message: format!("store dimension {dim} does not match bank dimension {}", bank.dim()) });
        }
        let mut store = SampleStore::default();
        for _ in 0..count {
            store.ids.push(r.u64()?);
            store.features.push(r.f64s(dim)?);
        }
        r.finish()?;
        for (t, s) in stages.iter().enumerate() {
            if s.network.arch().input_size() != n1 {
                return Err(r.error(format!("stage {} input size does not match the bank", t + 1)));
            }
            if s.support.iter().any(|&p| p >= store.ids.len()) {
                return Err(r.error(format!("stage {} references a missing sample", t + 1)));
            }
        }
        Ok(Self {
            bank,
            stages,
            store,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn encode_config(w: &mut Writer, c: &DistillConfig) {
    for v in [c.beta_plus, c.beta_minus, c.gamma, c.initial_step, c.step_decay, c.svm_c, c.svm_tol, c.convergence_tol] {
        w.f64(v);
    }
    for v in [c.max_epochs, c.num_batches, c.svm_max_passes, c.convergence_window] {
        w.u64(v as u64);
    }
    w.u64(c.seed);
}

fn decode_config(r: &mut Reader<'_>) -> Result<DistillConfig> {
    let mut f = [0.0; 8];
    for v in &mut f {
        *v = r.f64()?;
    }
    let mut u = [0usize; 4];
    for v in &mut u {
        *v = r.u64()? as usize;
    }
    let seed = r.u64()?;
    Ok(DistillConfig {
        beta_plus: f[0],
        beta_minus: f[1],
        gamma: f[2],
        initial_step: f[3],
        step_decay: f[4],
        svm_c: f[5],
        svm_tol: f[6],
        convergence_tol: f[7],
        max_epochs: u[0],
        num_batches: u[1],
        svm_max_passes: u[2],
        convergence_window: u[3],
        seed,
    })
}

/// Scores of the reference (last) stage on `samples`.
pub fn reference_scores(reference: &Cascade, samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    let t = reference.num_stages() - 1;
    samples.par_iter().map(|x| reference.stage_score(t, x)).collect()
}

/// Distill one surrogate stage against the last stage of `reference`.
///
/// The surrogate is trained on `samples` (ids in `ids`) with pseudo-labels
/// from the reference and conservation weighting. `validation` optionally
/// reports surrogate-vs-reference EER per epoch through `on_epoch`.
pub fn distill_stage_with(
    reference: &Cascade,
    spec: &StageSpec,
    samples: &[Vec<f64>],
    ids: &[u64],
    validation: Option<&[Vec<f64>]>,
    on_epoch: impl FnMut(&distill::EpochRecord),
) -> Result<Cascade> {
    let f_scores = reference_scores(reference, samples)?;
    let config = spec.distill.clone().with_betas(distill::betas_for_g(&f_scores)?);
    let val_scores = validation.map(|v| reference_scores(reference, v)).transpose()?;
    let val = validation.zip(val_scores.as_deref()).map(|(s, sc)| distill::Validation {
        samples: s,
        targets: Targets::Scores(sc),
    });
    let state = distill::train_with(
        samples,
        Targets::Scores(&f_scores),
        KernelNetwork::init_flat(&spec.arch),
        &reference.bank,
        &config,
        val.as_ref(),
        on_epoch,
    )?;
    let mut spec = spec.clone();
    spec.distill = config;
    let mut c = Cascade::single(reference.bank.clone(), &state, spec, samples, ids)?;
    c.config_hash = reference.config_hash.clone();
    Ok(c)
}

pub fn distill_stage(reference: &Cascade, spec: &StageSpec, samples: &[Vec<f64>], ids: &[u64], validation: Option<&[Vec<f64>]>) -> Result<Cascade> {
    distill_stage_with(reference, spec, samples, ids, validation, |_| {})
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

/// Per-stage and pipeline report rows on labeled patterns.
///
/// Rows `1..T` evaluate each stage alone on every pattern, with cons/rFA
/// measured against stage `T` (left empty for `T` itself). Rows
/// `cascade@t` apply stages `1..t` in sequence; `cascade@T` is the full
/// cascade. Timing cells are left empty; see [`benchmark`].
pub fn evaluation_report(cascade: &Cascade, xs: &[Vec<f64>], truth: &[f64], threads: Option<usize>) -> Result<Vec<ReportRow>> {
    if xs.len() != truth.len() {
        return Err(Error::invalid(format!("{} patterns but {} labels", xs.len(), truth.len())));
    }
    let t_count = cascade.num_stages();
    let all_scores = cascade.stage_scores_many(xs, threads)?;
    let outcomes = cascade.evaluate_many(xs, threads)?;
    let decisions: Vec<Vec<f64>> = all_scores.iter().map(|s| cascade.stage_decisions(s)).collect();
    let column = |t: usize| -> Vec<f64> { decisions.iter().map(|d| d[t]).collect() };
    let reference = column(t_count - 1);
    let n = xs.len();

    let mut rows = Vec::new();
    for (t, stage) in cascade.stages.iter().enumerate() {
        let pred = column(t);
        let r = metrics::detection_metrics(&pred, truth)?;
        let (cons, rfa) = if t + 1 == t_count {
            (None, None)
        } else {
            let (c, f) = metrics::conservation_metrics(&pred, &reference)?;
            (Some(c), Some(f))
        };
        rows.push(ReportRow {
            label: format!("{}", t + 1),
            cons,
            rfa,
            dr: r.dr,
            fa: r.fa,
            eer: r.eer(),
            time_ms: None,
            mean_kernel_evals: stage.kernel_evals() as f64,
            mean_cost: stage_cost(stage) as f64,
        });
    }
    for t in 0..t_count {
        let pred: Vec<f64> = decisions.iter().map(|d| if d[..=t].iter().all(|&v| v > 0.0) { 1.0 } else { -1.0 }).collect();
        let r = metrics::detection_metrics(&pred, truth)?;
        let consumed: Vec<usize> = outcomes.iter().map(|o| o.stages_consumed.min(t + 1)).collect();
        let evals = mean(consumed.iter().map(|&c| cascade.stages[..c].iter().map(|s| s.kernel_evals()).sum::<usize>() as f64), n);
        let cost = mean(consumed.iter().map(|&c| cascade.stages[..c].iter().map(stage_cost).sum::<u64>() as f64), n);
        rows.push(ReportRow {
            label: format!("cascade@{}", t + 1),
            cons: None,
            rfa: None,
            dr: r.dr,
            fa: r.fa,
            eer: r.eer(),
            time_ms: None,
            mean_kernel_evals: evals,
            mean_cost: cost,
        });
    }
    Ok(rows)
}

/// Wall-clock comparison of each stage alone against the short-circuit cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub stage_ms: Vec<f64>,
    pub cascade_ms: f64,
    pub stage_mean_cost: Vec<f64>,
    pub cascade_mean_cost: f64,
    pub cascade_mean_kernel_evals: f64,
    pub patterns: usize,
}

impl BenchReport {
    /// Reference stage time over cascade time.
    pub fn speedup(&self) -> f64 {
        self.stage_ms.last().copied().unwrap_or(0.0) / self.cascade_ms.max(f64::MIN_POSITIVE)
    }

    pub fn cost_ratio(&self) -> f64 {
        self.cascade_mean_cost / self.stage_mean_cost.last().copied().unwrap_or(f64::NAN)
    }

    pub fn render(&self, preamble: &[String]) -> String {
        let mut out = String::new();
        for p in preamble {
            out.push_str(&format!("# {p}\n"));
        }
        out.push_str("row,time_ms,mean_cost\n");
        for (t, (ms, c)) in self.stage_ms.iter().zip(&self.stage_mean_cost).enumerate() {
            out.push_str(&format!("stage{},{ms:.3},{c:.2}\n", t + 1));
        }
        out.push_str(&format!("cascade,{:.3},{:.2}\n", self.cascade_ms, self.cascade_mean_cost));
        out.push_str(&format!("# patterns={} speedup={:.2} cost_ratio={:.4}\n", self.patterns, self.speedup(), self.cost_ratio()));
        out
    }
}

pub fn benchmark(cascade: &Cascade, xs: &[Vec<f64>], threads: Option<usize>) -> Result<BenchReport> {
    let mut stage_ms = Vec::new();
    for t in 0..cascade.num_stages() {
        let start = Instant::now();
        let scores: Vec<f64> = with_threads(threads, || xs.par_iter().map(|x| cascade.stage_score(t, x)).collect::<Result<Vec<_>>>())??;
        std::hint::black_box(scores);
        stage_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let start = Instant::now();
    let outcomes = cascade.evaluate_many(xs, threads)?;
    let cascade_ms = start.elapsed().as_secs_f64() * 1e3;
    let n = outcomes.len();
    Ok(BenchReport {
        stage_ms,
        cascade_ms,
        stage_mean_cost: cascade.stages.iter().map(|s| stage_cost(s) as f64).collect(),
        cascade_mean_cost: mean(outcomes.iter().map(|o| o.cost as f64), n),
        cascade_mean_kernel_evals: mean(outcomes.iter().map(|o| o.kernel_evals as f64), n),
        patterns: n,
    })
}

/// Reference-stage label for a pattern (sign rule with the stage threshold).
pub fn reference_label(cascade: &Cascade, x: &[f64]) -> Result<f64> {
    let t = cascade.num_stages() - 1;
    let s = cascade.stage_score(t, x)? - cascade.stages[t].threshold;
    Ok(sign_label(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::distill::betas_for_f;

    struct Toy {
        bank: KernelBank,
        samples: Vec<Vec<f64>>,
        labels: Vec<f64>,
        ids: Vec<u64>,
    }

    fn toy(n: usize, seed: u64) -> Toy {
        let d = generate_synthetic(&SyntheticSpec { n, dim: 4, positive_fraction: 0.2, separation: 4.0, seed }).unwrap();
        let (bank, _) = KernelBank::fit(&d.features, 2, 5).unwrap();
        Toy {
            bank,
            ids: (0..n as u64).map(|i| i * 3 + 1).collect(),
            labels: d.labels.unwrap(),
            samples: d.features,
        }
    }

    fn cfg(epochs: usize) -> DistillConfig {
        DistillConfig {
            max_epochs: epochs,
            num_batches: 3,
            ..DistillConfig::default()
        }
    }

    fn small_specs(n1: usize) -> Vec<StageSpec> {
        vec![
            StageSpec { arch: Architecture::uniform(n1, 2, 3).unwrap(), distill: cfg(2) },
            StageSpec { arch: Architecture::uniform(n1, 4, 3).unwrap(), distill: cfg(2) },
            StageSpec { arch: Architecture::uniform(n1, 6, 3).unwrap(), distill: cfg(2) },
        ]
    }

    fn trained_reference(t: &Toy, spec: &StageSpec) -> TrainingState {
        let mut c = spec.distill.clone().with_betas(betas_for_f(&t.labels).unwrap());
        c.max_epochs = 60;
        distill::train(&t.samples, Targets::Labels(&t.labels), &spec.arch, &t.bank, &c).unwrap()
    }

    #[test]
    fn default_specs_follow_the_stage_list() {
        let g = cfg(5000);
        let f = cfg(10_000);
        let specs = default_stage_specs(128, REFERENCE_WIDTH, &g, &f).unwrap();
        assert_eq!(specs.len(), 6);
        assert_eq!(specs[0].arch.layer_sizes(), &[128, 2, 2, 2, 1]);
        assert_eq!(specs[1].arch.layer_sizes(), &[128, 8, 8, 8, 1]);
        assert_eq!(specs[2].arch.layer_sizes(), &[128, 8, 8, 8, 8, 8, 1]);
        assert_eq!(specs[3].arch.layer_sizes(), &[128, 32, 32, 32, 32, 32, 1]);
        assert_eq!(specs[4].arch.layer_sizes(), &[128, 64, 64, 64, 64, 64, 1]);
        assert_eq!(specs[5].arch, reference_architecture(128, 128).unwrap());
        assert_eq!(specs[5].arch.num_layers(), 9);
        assert_eq!(specs[5].distill, f);
        assert_eq!(specs[0].distill, g);
        // stage 2 differs from stage 1 only in width
        assert_eq!(specs[0].arch.num_layers(), specs[1].arch.num_layers());
        let costs: Vec<usize> = specs.iter().map(|s| s.arch.mac_count()).collect();
        assert!(costs.windows(2).all(|w| w[0] < w[1]), "{costs:?}");
        // narrow banks cap surrogate widths at the reference width
        let narrow = default_architectures(16, 16).unwrap();
        let costs: Vec<usize> = narrow.iter().map(|a| a.mac_count()).collect();
        assert!(costs.windows(2).all(|w| w[0] <= w[1]), "{costs:?}");
    }

    #[test]
    fn stage_cost_arithmetic() {
        let arch = Architecture::new(vec![2, 2, 2, 1]).unwrap();
        let stage = Stage {
            network: KernelNetwork::init_flat(&arch),
            svm: SvmModel { alphas: vec![0.1; 5], labels: vec![1.0; 5], bias: 0.0, c: 1.0, converged: true, degenerate: false, iterations: 0 },
            support: (0..5).collect(),
            threshold: 0.0,
            spec: StageSpec { arch, distill: cfg(1) },
        };
        assert_eq!(stage_cost(&stage), 50);
        let empty = Stage { support: vec![], ..stage };
        assert_eq!(stage_cost(&empty), 0);
    }

    #[test]
    fn single_stage_cascade_is_the_reference() {
        let t = toy(40, 1);
        let spec = small_specs(2).pop().unwrap();
        let f = trained_reference(&t, &spec);
        let c = Cascade::build(&t.bank, &f, &t.samples, &t.ids, &[spec]).unwrap();
        assert_eq!(c.num_stages(), 1);
        for (i, x) in t.samples.iter().enumerate() {
            let o = c.evaluate(x).unwrap();
            assert_eq!(o.stages_consumed, 1);
            assert_eq!(o.label, sign_label(f.train_scores[i]));
            assert_eq!(o.scores[0], f.train_scores[i]);
        }
    }

    #[test]
    fn short_circuit_matches_exhaustive_and_round_trips() {
        let t = toy(45, 2);
        let specs = small_specs(2);
        let f = trained_reference(&t, specs.last().unwrap());
        let c = Cascade::build(&t.bank, &f, &t.samples, &t.ids, &specs).unwrap();
        assert_eq!(c.num_stages(), 3);

        let probe = generate_synthetic(&SyntheticSpec { n: 200, dim: 4, positive_fraction: 0.3, separation: 4.0, seed: 99 }).unwrap();
        let outcomes = c.evaluate_many(&probe.features, Some(1)).unwrap();
        assert_eq!(outcomes, c.evaluate_many(&probe.features, Some(4)).unwrap());
        let mut saw_early = false;
        for (x, o) in probe.features.iter().zip(&outcomes) {
            let all = c.stage_scores(x).unwrap();
            let and = c.stage_decisions(&all).iter().all(|&d| d > 0.0);
            assert_eq!(o.label > 0.0, and);
            assert_eq!(&all[..o.stages_consumed], &o.scores[..]);
            if o.label > 0.0 {
                assert_eq!(o.stages_consumed, 3);
            }
            if o.stages_consumed == 1 {
                saw_early = true;
                assert!(o.scores[0] <= 0.0);
            }
            let expected_cost: u64 = c.stages[..o.stages_consumed].iter().map(stage_cost).sum();
            assert_eq!(o.cost, expected_cost);
        }
        assert!(saw_early);

        let bytes = c.to_bytes();
        let back = Cascade::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.evaluate_many(&probe.features, None).unwrap(), outcomes);
    }

    #[test]
    fn build_is_deterministic() {
        let t = toy(36, 3);
        let specs = small_specs(2);
        let f = trained_reference(&t, specs.last().unwrap());
        let a = Cascade::build(&t.bank, &f, &t.samples, &t.ids, &specs).unwrap();
        let b = Cascade::build(&t.bank, &f, &t.samples, &t.ids, &specs).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn corrupted_artifacts_are_rejected() {
        let t = toy(30, 4);
        let spec = small_specs(2).pop().unwrap();
        let f = trained_reference(&t, &spec);
        let c = Cascade::build(&t.bank, &f, &t.samples, &t.ids, &[spec]).unwrap();
        let bytes = c.to_bytes();
        assert!(matches!(Cascade::from_bytes(&bytes[..bytes.len() - 2]), Err(Error::Parse { .. })));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(Cascade::from_bytes(&bad), Err(Error::Version { .. })));
        assert!(matches!(Cascade::from_bytes(b"NOPE"), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn threshold_controls_rejection() {
        let t = toy(30, 5);
        let specs = small_specs(2);
        let f = trained_reference(&t, specs.last().unwrap());
        let mut c = Cascade::build(&t.bank, &f, &t.samples, &t.ids, &specs[1..]).unwrap();
        c.stages[0].threshold = f64::INFINITY;
        for x in &t.samples {
            let o = c.evaluate(x).unwrap();
            assert_eq!(o.stages_consumed, 1);
            assert_eq!(o.label, -1.0);
        }
    }

    #[test]
    fn report_shapes() {
        let t = toy(45, 6);
        let specs = small_specs(2);
        let f = trained_reference(&t, specs.last().unwrap());
        let c = Cascade::build(&t.bank, &f, &t.samples, &t.ids, &specs).unwrap();
        let rows = evaluation_report(&c, &t.samples, &t.labels, None).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows[2].cons.is_none() && rows[2].rfa.is_none());
        assert!(rows[0].cons.is_some());
        assert_eq!(rows[5].label, "cascade@3");
        for r in &rows {
            assert!((r.eer - metrics::eer(r.dr, r.fa)).abs() < 1e-9);
        }
        assert!(rows[3].mean_cost <= rows[5].mean_cost);
        let b = benchmark(&c, &t.samples, Some(2)).unwrap();
        assert_eq!(b.stage_ms.len(), 3);
        assert!((b.cascade_mean_cost - rows[5].mean_cost).abs() < 1e-9);
    }
}
