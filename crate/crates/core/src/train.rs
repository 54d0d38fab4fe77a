//! Replay-based continual learning driver.
//!
//! `run_continual` trains task `t = 1..T` sequentially on the training halves
//! of the current supersample plus a mini-batched view of the replay buffer,
//! warm-starting each task from the previous optimum:
//!
//! ```text
//! W_r = W_{r-1} + η_r · G(W_{r-1}; buffer batch, current batch) + N_r
//! ```
//!
//! with `G` the negative mean surrogate gradient over the concatenated batch
//! (so buffer and current samples are weighted by count) and `N_r` the SGLD
//! noise when enabled. Gradient covariance probes for the trajectory bound
//! are taken at the pre-step parameters of every final-task iteration.
//!
//! All sample access during optimization goes through a [`TrainingView`]
//! that can only return training halves and records an access audit, so a
//! run can prove it never read a test column while training.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, ModelSpec, Params};
use crate::rng::{tags, RngStream};
use crate::tasks::{
    draw_buffer_index, draw_buffer_index_balanced, BufferIndex, BufferSampling,
    MembershipVectors, Sample, TaskError, TaskSequence,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("non-finite parameters at task {task}, step {step}; run aborted")]
    NonFiniteParams { task: usize, step: usize },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("m_probes = {m_probes} < 2")]
    ProbeCount { m_probes: usize },
    #[error("serialization: {0}")]
    Serialization(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Sgd,
    Sgld,
    Adam,
}

/// Per-step scalar schedule; `at(r)` is 1-based in the step index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant(f64),
    /// `base / r` decay.
    InvDecay { base: f64 },
}

impl Schedule {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            Schedule::Constant(v) => v,
            Schedule::InvDecay { base } => base / step as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamCfg {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamCfg {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeCfg {
    pub enabled: bool,
    pub m_probes: usize,
}

impl Default for ProbeCfg {
    fn default() -> Self {
        Self {
            enabled: false,
            m_probes: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerCfg {
    pub kind: OptimKind,
    pub eta: Schedule,
    /// SGLD noise scale per step; ignored by SGD/Adam.
    pub xi: Schedule,
    pub steps_per_task: usize,
    /// Mini-batch plan over buffer positions: (|B^U|, |B^V|), capped by the
    /// buffer actually available at each task.
    pub batch_buffer: (usize, usize),
    /// Mini-batch plan over current-task samples: |B^T|.
    pub batch_current: usize,
    pub adam: AdamCfg,
    pub probe: ProbeCfg,
}

impl OptimizerCfg {
    pub fn sgd(eta: f64, steps_per_task: usize, batch_current: usize) -> Self {
        Self {
            kind: OptimKind::Sgd,
            eta: Schedule::Constant(eta),
            xi: Schedule::Constant(0.0),
            steps_per_task,
            batch_buffer: (usize::MAX, usize::MAX),
            batch_current,
            adam: AdamCfg::default(),
            probe: ProbeCfg::default(),
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.steps_per_task < 1 {
            return Err(TrainError::InvalidConfig("steps_per_task >= 1".into()));
        }
        if self.batch_current < 1 {
            return Err(TrainError::InvalidConfig("batch_current >= 1".into()));
        }
        for r in [1, self.steps_per_task] {
            if self.eta.at(r) < 0.0 {
                return Err(TrainError::InvalidConfig("eta must be >= 0".into()));
            }
            if self.kind == OptimKind::Sgld && self.xi.at(r) < 0.0 {
                return Err(TrainError::InvalidConfig("xi must be >= 0".into()));
            }
        }
        if self.probe.enabled && self.probe.m_probes < 2 {
            return Err(TrainError::ProbeCount {
                m_probes: self.probe.m_probes,
            });
        }
        Ok(())
    }
}

/// Per-cell losses at the final parameters: both supersample columns plus
/// the membership bit. Under the 0-1 loss every entry is 0 or 1 and the
/// difference sits in {−1, 0, 1}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub task: usize,
    pub sample: usize,
    pub l0: f64,
    pub l1: f64,
    pub s_bit: u8,
}

impl LossEntry {
    pub fn delta(&self) -> f64 {
        self.l1 - self.l0
    }

    pub fn train_loss(&self) -> f64 {
        if self.s_bit == 0 {
            self.l0
        } else {
            self.l1
        }
    }

    pub fn test_loss(&self) -> f64 {
        if self.s_bit == 0 {
            self.l1
        } else {
            self.l0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTable {
    pub entries: Vec<LossEntry>,
}

impl LossTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn train_risk(&self) -> f64 {
        self.entries.iter().map(LossEntry::train_loss).sum::<f64>() / self.entries.len() as f64
    }

    pub fn test_risk(&self) -> f64 {
        self.entries.iter().map(LossEntry::test_loss).sum::<f64>() / self.entries.len() as f64
    }

    /// Supersample gap identity for one run: mean of (test − train).
    pub fn gap(&self) -> f64 {
        self.test_risk() - self.train_risk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferMode {
    /// Draw the step-T buffer once; intermediate tasks replay its prefix.
    Fixed,
    /// Redraw (U, V) at every task with k capped by the tasks seen so far.
    Redraw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferPolicy {
    pub k: usize,
    pub l: usize,
    pub mode: BufferMode,
    pub sampling: BufferSampling,
    /// Pre-drawn step-T (U, V); supplied by block-structured harnesses that
    /// condition on a shared supersample. Drawn from the run stream if absent.
    pub analysis: Option<BufferIndex>,
}

/// Counts of sample reads performed through the training view.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessAudit {
    pub train_half_reads: u64,
    pub test_half_reads: u64,
}

/// The only sample access path available during optimization: resolves a
/// cell to its training half and records which column was touched.
pub struct TrainingView<'a> {
    seq: &'a TaskSequence,
    s: &'a MembershipVectors,
    audit: AccessAudit,
}

impl<'a> TrainingView<'a> {
    pub fn new(seq: &'a TaskSequence, s: &'a MembershipVectors) -> Self {
        Self {
            seq,
            s,
            audit: AccessAudit::default(),
        }
    }

    /// Resolve a specific column, recording whether it is the cell's
    /// training or test half under the current membership bits.
    pub fn column(&mut self, task: usize, pair: usize, column: usize) -> &'a Sample {
        if column == usize::from(self.s.bit(task, pair)) {
            self.audit.train_half_reads += 1;
        } else {
            self.audit.test_half_reads += 1;
        }
        self.seq.sample(task, pair, column)
    }

    pub fn train_sample(&mut self, task: usize, pair: usize) -> &'a Sample {
        let bit = usize::from(self.s.bit(task, pair));
        self.column(task, pair, bit)
    }

    pub fn audit(&self) -> AccessAudit {
        self.audit
    }
}

/// Config snapshot carried inside every run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub model: ModelSpec,
    pub optimizer: OptimizerCfg,
    pub k: usize,
    pub l: usize,
    pub n: usize,
    pub t_count: usize,
    pub buffer_mode: BufferMode,
    pub sampling: BufferSampling,
}

/// One Monte-Carlo realization of (W, D̃, S, U, V): losses, probes, audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: u64,
    pub block_id: u64,
    pub membership: MembershipVectors,
    /// Buffer used at each task step (None for the first task).
    pub buffers: Vec<Option<BufferIndex>>,
    /// The step-T buffer entering the loss table and the bounds.
    pub analysis_buffer: BufferIndex,
    pub final_params: Params,
    pub loss_table: LossTable,
    /// Centered probe matrices per final-task step (SGLD with probing only).
    pub probe_log: Option<Vec<Vec<Vec<f64>>>>,
    pub audit: AccessAudit,
    pub snapshot: RunSnapshot,
}

#[derive(Debug, Clone, Default)]
pub struct OptimState {
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimState {
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }
}

/// One optimizer update at (1-based) `step`: SGD `W + ηG`, SGLD `W + ηG + N`
/// with `N ~ Normal(0, ξ_r² I)`, or Adam moment updates on `−G`.
pub fn optimizer_step(
    params: &Params,
    batch: &[&Sample],
    step: usize,
    opt: &OptimizerCfg,
    state: &mut OptimState,
    noise_stream: &RngStream,
) -> Params {
    let g = model::grad_batch(params, batch);
    let eta = opt.eta.at(step);
    let mut theta = params.theta.clone();
    match opt.kind {
        OptimKind::Sgd => {
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t += eta * gi;
            }
        }
        OptimKind::Sgld => {
            let xi = opt.xi.at(step);
            let mut rng = noise_stream.rng();
            for (t, gi) in theta.iter_mut().zip(&g) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *t += eta * gi + xi * z;
            }
        }
        OptimKind::Adam => {
            if state.m.is_empty() {
                state.m = vec![0.0; theta.len()];
                state.v = vec![0.0; theta.len()];
            }
            state.step += 1;
            let AdamCfg { beta1, beta2, eps } = opt.adam;
            let bc1 = 1.0 - beta1.powi(state.step as i32);
            let bc2 = 1.0 - beta2.powi(state.step as i32);
            for i in 0..theta.len() {
                let grad = -g[i];
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad;
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad * grad;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                theta[i] -= eta * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Params {
        spec: params.spec.clone(),
        theta,
    }
}

fn sorted_subset(rng: &mut rand_chacha::ChaCha12Rng, population: usize, amount: usize) -> Vec<usize> {
    let amount = amount.min(population);
    let mut picked = rand::seq::index::sample(rng, population, amount).into_vec();
    picked.sort_unstable();
    picked
}

/// Draw one replay mini-batch: independent subsets over buffer task
/// positions, buffer sample positions, and current-task samples, concatenated
/// in canonical order.
fn draw_replay_batch<'a>(
    view: &mut TrainingView<'a>,
    buffer: Option<&BufferIndex>,
    current_task: usize,
    n: usize,
    opt: &OptimizerCfg,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Vec<&'a Sample> {
    let mut batch = Vec::new();
    if let Some(buf) = buffer {
        if buf.capacity() > 0 && opt.batch_buffer.0 > 0 && opt.batch_buffer.1 > 0 {
            let b_u = sorted_subset(rng, buf.k(), opt.batch_buffer.0);
            let b_v = sorted_subset(rng, buf.l(), opt.batch_buffer.1);
            for &a in &b_u {
                for &b in &b_v {
                    batch.push(view.train_sample(buf.task_ids[a], buf.sample_ids[b]));
                }
            }
        }
    }
    let b_t = sorted_subset(rng, n, opt.batch_current);
    for &j in &b_t {
        batch.push(view.train_sample(current_task, j));
    }
    batch
}

/// `m_probes` independent (B^U, B^V, B^T) draws at the current parameters;
/// returns the probe-mean-centered G rows. Rows feed `logdet_cov_gram` with
/// scale `η_r²/(ξ_r²(m_probes−1))`.
pub fn probe_grad_covariance(
    params: &Params,
    view: &mut TrainingView<'_>,
    buffer: Option<&BufferIndex>,
    current_task: usize,
    n: usize,
    opt: &OptimizerCfg,
    m_probes: usize,
    stream: &RngStream,
) -> Result<Vec<Vec<f64>>, TrainError> {
    if m_probes < 2 {
        return Err(TrainError::ProbeCount { m_probes });
    }
    let d = params.theta.len();
    let mut rows = Vec::with_capacity(m_probes);
    for p in 0..m_probes {
        let mut rng = stream.child(p as u64).rng();
        let batch = draw_replay_batch(view, buffer, current_task, n, opt, &mut rng);
        rows.push(model::grad_batch(params, &batch));
    }
    // Center anchored at the first row so identical draws (no batch
    // randomness) give exact zeros instead of rounding residue.
    let anchor = rows[0].clone();
    let mut mean_offset = vec![0.0f64; d];
    for row in &rows {
        for ((m, v), a) in mean_offset.iter_mut().zip(row).zip(&anchor) {
            *m += v - a;
        }
    }
    for m in mean_offset.iter_mut() {
        *m /= m_probes as f64;
    }
    for row in rows.iter_mut() {
        for ((v, m), a) in row.iter_mut().zip(&mean_offset).zip(&anchor) {
            *v -= a + m;
        }
    }
    Ok(rows)
}

/// 0-1 losses on both supersample columns for every cell of
/// `{U,V} ∪ {T,[n]}` at the given parameters.
pub fn evaluate_losses(
    params: &Params,
    seq: &TaskSequence,
    s: &MembershipVectors,
    buffer: &BufferIndex,
) -> LossTable {
    let t_last = seq.t_count() - 1;
    let mut entries = Vec::with_capacity(buffer.capacity() + seq.n());
    let mut push = |task: usize, sample: usize| {
        let l0 = model::loss_eval(params, seq.sample(task, sample, 0), model::LossKind::ZeroOne);
        let l1 = model::loss_eval(params, seq.sample(task, sample, 1), model::LossKind::ZeroOne);
        entries.push(LossEntry {
            task,
            sample,
            l0,
            l1,
            s_bit: s.bit(task, sample),
        });
    };
    for (u, v) in buffer.cells() {
        push(u, v);
    }
    for j in 0..seq.n() {
        push(t_last, j);
    }
    LossTable { entries }
}

/// Train `T` tasks sequentially with replay and return the completed record.
pub fn run_continual(
    seq: &TaskSequence,
    s: &MembershipVectors,
    policy: &BufferPolicy,
    model_spec: &ModelSpec,
    opt: &OptimizerCfg,
    stream: &RngStream,
) -> Result<RunRecord, TrainError> {
    opt.validate()?;
    let t_count = seq.t_count();
    let n = seq.n();
    if s.t_count() != t_count || s.n() != n {
        return Err(TrainError::InvalidConfig(
            "membership shape does not match sequence".into(),
        ));
    }
    if model_spec.input_dim != seq.dim() {
        return Err(TrainError::InvalidConfig(format!(
            "model input_dim {} != sequence dim {}",
            model_spec.input_dim,
            seq.dim()
        )));
    }
    let prev = t_count - 1;
    if policy.k > prev {
        return Err(TaskError::BufferTasksExceeded {
            k: policy.k,
            prev_tasks: prev,
        }
        .into());
    }
    if policy.l > n {
        return Err(TaskError::BufferSamplesExceeded { l: policy.l, n }.into());
    }

    let draw_buffer = |prev_tasks: usize,
                       k: usize,
                       st: &RngStream|
     -> Result<BufferIndex, TaskError> {
        match policy.sampling {
            BufferSampling::Uniform => draw_buffer_index(prev_tasks, n, k, policy.l, st),
            BufferSampling::Balanced => {
                draw_buffer_index_balanced(prev_tasks, n, k, policy.l, seq, s, st)
            }
        }
    };

    let analysis = match &policy.analysis {
        Some(b) => {
            if b.k() != policy.k || (policy.k > 0 && b.l() != policy.l) {
                return Err(TrainError::InvalidConfig(
                    "supplied analysis buffer does not match (k, l)".into(),
                ));
            }
            b.clone()
        }
        None => draw_buffer(prev, policy.k, &stream.descend(&[tags::BUFFER, prev as u64]))?,
    };

    let mut params = model::init_params(model_spec, &stream.child(tags::INIT));
    let mut view = TrainingView::new(seq, s);
    let mut buffers: Vec<Option<BufferIndex>> = Vec::with_capacity(t_count);
    let mut probe_log: Option<Vec<Vec<Vec<f64>>>> =
        (opt.kind == OptimKind::Sgld && opt.probe.enabled).then(Vec::new);
    let mut state = OptimState::default();

    for t in 0..t_count {
        let buffer_t: Option<BufferIndex> = if t == 0 || policy.k == 0 || policy.l == 0 {
            None
        } else if t == t_count - 1 {
            Some(analysis.clone())
        } else {
            match policy.mode {
                BufferMode::Fixed => {
                    let restricted = analysis.restricted_to(t);
                    (restricted.capacity() > 0).then_some(restricted)
                }
                BufferMode::Redraw => {
                    let k_t = policy.k.min(t);
                    let b = draw_buffer(t, k_t, &stream.descend(&[tags::BUFFER, t as u64]))?;
                    (b.capacity() > 0).then_some(b)
                }
            }
        };
        state.reset();
        for r in 1..=opt.steps_per_task {
            let step_stream = stream.descend(&[tags::TASK, t as u64, tags::STEP, r as u64]);
            if t == t_count - 1 {
                if let Some(log) = probe_log.as_mut() {
                    let rows = probe_grad_covariance(
                        &params,
                        &mut view,
                        buffer_t.as_ref(),
                        t,
                        n,
                        opt,
                        opt.probe.m_probes,
                        &step_stream.child(tags::PROBE),
                    )?;
                    log.push(rows);
                }
            }
            let mut batch_rng = step_stream.child(tags::BATCH).rng();
            let batch = draw_replay_batch(&mut view, buffer_t.as_ref(), t, n, opt, &mut batch_rng);
            params = optimizer_step(
                &params,
                &batch,
                r,
                opt,
                &mut state,
                &step_stream.child(tags::NOISE),
            );
            if !params.all_finite() {
                return Err(TrainError::NonFiniteParams { task: t, step: r });
            }
        }
        buffers.push(buffer_t);
    }

    let loss_table = evaluate_losses(&params, seq, s, &analysis);
    Ok(RunRecord {
        run_id: 0,
        block_id: 0,
        membership: s.clone(),
        buffers,
        analysis_buffer: analysis,
        final_params: params,
        loss_table,
        probe_log,
        audit: view.audit(),
        snapshot: RunSnapshot {
            model: model_spec.clone(),
            optimizer: opt.clone(),
            k: policy.k,
            l: policy.l,
            n,
            t_count,
            buffer_mode: policy.mode,
            sampling: policy.sampling,
        },
    })
}

// ---------------------------------------------------------------------------
// Run record serialization: JSON with base64 params and packed loss bits
// ---------------------------------------------------------------------------

pub const RUN_RECORD_FORMAT_VERSION: u32 = 1;

fn pack_bits(bits: impl Iterator<Item = bool>) -> (String, usize) {
    use base64::Engine;
    let mut bytes: Vec<u8> = Vec::new();
    let mut count = 0usize;
    for (i, bit) in bits.enumerate() {
        if i % 8 == 0 {
            bytes.push(0);
        }
        if bit {
            *bytes.last_mut().unwrap() |= 1 << (i % 8);
        }
        count += 1;
    }
    (
        base64::engine::general_purpose::STANDARD.encode(bytes),
        count,
    )
}

fn unpack_bits(encoded: &str, count: usize) -> Result<Vec<bool>, String> {
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(encoded)
        .map_err(|e| e.to_string())?;
    if bytes.len() * 8 < count {
        return Err("bit payload too short".into());
    }
    Ok((0..count)
        .map(|i| bytes[i / 8] & (1 << (i % 8)) != 0)
        .collect())
}

#[derive(Serialize, Deserialize)]
struct RunRecordWire {
    version: u32,
    run_id: u64,
    block_id: u64,
    snapshot: RunSnapshot,
    membership_bits: String,
    buffers: Vec<Option<BufferIndex>>,
    analysis_buffer: BufferIndex,
    params_b64: String,
    loss_cells: Vec<(usize, usize)>,
    loss_l0: String,
    loss_l1: String,
    loss_s: String,
    probe_log: Option<Vec<Vec<Vec<f64>>>>,
    audit: AccessAudit,
}

pub fn run_record_to_json(record: &RunRecord) -> String {
    let (membership_bits, _) = pack_bits(record.membership.bits().iter().map(|&b| b == 1));
    let (loss_l0, _) = pack_bits(record.loss_table.entries.iter().map(|e| e.l0 > 0.5));
    let (loss_l1, _) = pack_bits(record.loss_table.entries.iter().map(|e| e.l1 > 0.5));
    let (loss_s, _) = pack_bits(record.loss_table.entries.iter().map(|e| e.s_bit == 1));
    let wire = RunRecordWire {
        version: RUN_RECORD_FORMAT_VERSION,
        run_id: record.run_id,
        block_id: record.block_id,
        snapshot: record.snapshot.clone(),
        membership_bits,
        buffers: record.buffers.clone(),
        analysis_buffer: record.analysis_buffer.clone(),
        params_b64: model::params_to_base64(&record.final_params),
        loss_cells: record
            .loss_table
            .entries
            .iter()
            .map(|e| (e.task, e.sample))
            .collect(),
        loss_l0,
        loss_l1,
        loss_s,
        probe_log: record.probe_log.clone(),
        audit: record.audit,
    };
    serde_json::to_string(&wire).expect("run record serializes")
}

pub fn run_record_from_json(json: &str) -> Result<RunRecord, TrainError> {
    let wire: RunRecordWire =
        serde_json::from_str(json).map_err(|e| TrainError::Serialization(e.to_string()))?;
    if wire.version != RUN_RECORD_FORMAT_VERSION {
        return Err(TrainError::Serialization(format!(
            "unsupported run record version {}",
            wire.version
        )));
    }
    let t_count = wire.snapshot.t_count;
    let n = wire.snapshot.n;
    let bits = unpack_bits(&wire.membership_bits, t_count * n)
        .map_err(TrainError::Serialization)?
        .into_iter()
        .map(u8::from)
        .collect();
    let cell_count = wire.loss_cells.len();
    let l0 = unpack_bits(&wire.loss_l0, cell_count).map_err(TrainError::Serialization)?;
    let l1 = unpack_bits(&wire.loss_l1, cell_count).map_err(TrainError::Serialization)?;
    let s = unpack_bits(&wire.loss_s, cell_count).map_err(TrainError::Serialization)?;
    let entries = wire
        .loss_cells
        .iter()
        .enumerate()
        .map(|(i, &(task, sample))| LossEntry {
            task,
            sample,
            l0: f64::from(l0[i]),
            l1: f64::from(l1[i]),
            s_bit: u8::from(s[i]),
        })
        .collect();
    let final_params = model::params_from_base64(&wire.snapshot.model, &wire.params_b64)
        .map_err(TrainError::Serialization)?;
    Ok(RunRecord {
        run_id: wire.run_id,
        block_id: wire.block_id,
        membership: MembershipVectors::from_bits(t_count, n, bits),
        buffers: wire.buffers,
        analysis_buffer: wire.analysis_buffer,
        final_params,
        loss_table: LossTable { entries },
        probe_log: wire.probe_log,
        audit: wire.audit,
        snapshot: wire.snapshot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LossKind};
    use crate::tasks::{draw_membership, gen_synthetic_sequence, SyntheticCfg};

    fn separable_seq(n: usize) -> TaskSequence {
        gen_synthetic_sequence(
            &SyntheticCfg {
                t_count: 3,
                n,
                dim: 2,
                class_sep: 10.0,
                rotation_per_task: 0.15,
            },
            &RngStream::new(400),
        )
        .unwrap()
    }

    fn base_opt() -> OptimizerCfg {
        OptimizerCfg {
            kind: OptimKind::Sgd,
            eta: Schedule::Constant(0.8),
            xi: Schedule::Constant(0.0),
            steps_per_task: 60,
            batch_buffer: (2, 4),
            batch_current: 8,
            adam: AdamCfg::default(),
            probe: ProbeCfg::default(),
        }
    }

    fn base_policy(k: usize, l: usize) -> BufferPolicy {
        BufferPolicy {
            k,
            l,
            mode: BufferMode::Fixed,
            sampling: BufferSampling::Uniform,
            analysis: None,
        }
    }

    #[test]
    fn run_is_deterministic_and_audited() {
        let seq = separable_seq(12);
        let s = draw_membership(3, 12, &RngStream::new(41));
        let spec = ModelSpec::linear(2, 2);
        let opt = base_opt();
        let policy = base_policy(2, 4);
        let a = run_continual(&seq, &s, &policy, &spec, &opt, &RngStream::new(42)).unwrap();
        let b = run_continual(&seq, &s, &policy, &spec, &opt, &RngStream::new(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss_table.len(), 2 * 4 + 12);
        assert_eq!(a.audit.test_half_reads, 0);
        assert!(a.audit.train_half_reads > 0);
        // 0-1 losses and their differences stay in range.
        for e in &a.loss_table.entries {
            assert!(e.l0 == 0.0 || e.l0 == 1.0);
            assert!(e.l1 == 0.0 || e.l1 == 1.0);
            assert!([-1.0, 0.0, 1.0].contains(&e.delta()));
        }
    }

    #[test]
    fn replay_free_baseline_still_evaluates_current_cells() {
        let seq = separable_seq(10);
        let s = draw_membership(3, 10, &RngStream::new(1));
        let spec = ModelSpec::linear(2, 2);
        let record = run_continual(
            &seq,
            &s,
            &base_policy(0, 0),
            &spec,
            &base_opt(),
            &RngStream::new(2),
        )
        .unwrap();
        assert!(record.buffers.iter().all(Option::is_none));
        assert_eq!(record.loss_table.len(), 10);
    }

    #[test]
    fn separable_tasks_interpolate() {
        let seq = separable_seq(16);
        let s = draw_membership(3, 16, &RngStream::new(7));
        let spec = ModelSpec::linear(2, 2);
        let mut opt = base_opt();
        opt.steps_per_task = 120;
        let record =
            run_continual(&seq, &s, &base_policy(2, 6), &spec, &opt, &RngStream::new(8)).unwrap();
        // Direct evaluation over the training view.
        assert_eq!(record.loss_table.train_risk(), 0.0);
    }

    #[test]
    fn warm_start_replays_step_by_step() {
        let seq = separable_seq(6);
        let s = draw_membership(3, 6, &RngStream::new(9));
        let spec = ModelSpec::linear(2, 2);
        let mut opt = base_opt();
        opt.steps_per_task = 3;
        let stream = RngStream::new(77);
        let record =
            run_continual(&seq, &s, &base_policy(1, 2), &spec, &opt, &stream).unwrap();

        // Replay the exact trajectory manually: same init, same per-step
        // streams, buffers carried across tasks without reinitializing.
        let analysis = record.analysis_buffer.clone();
        let mut params = model::init_params(&spec, &stream.child(tags::INIT));
        let mut view = TrainingView::new(&seq, &s);
        let mut state = OptimState::default();
        for t in 0..3 {
            let buffer_t = if t == 0 {
                None
            } else if t == 2 {
                Some(analysis.clone())
            } else {
                let r = analysis.restricted_to(t);
                (r.capacity() > 0).then_some(r)
            };
            state.reset();
            for r in 1..=3 {
                let step = stream.descend(&[tags::TASK, t as u64, tags::STEP, r as u64]);
                let mut rng = step.child(tags::BATCH).rng();
                let batch = draw_replay_batch(&mut view, buffer_t.as_ref(), t, 6, &opt, &mut rng);
                params = optimizer_step(&params, &batch, r, &opt, &mut state, &step.child(tags::NOISE));
            }
        }
        assert_eq!(params, record.final_params);
    }

    #[test]
    fn sgld_with_zero_noise_equals_sgd() {
        let seq = separable_seq(8);
        let s = draw_membership(3, 8, &RngStream::new(3));
        let spec = ModelSpec::linear(2, 2);
        let sgd = base_opt();
        let mut sgld = base_opt();
        sgld.kind = OptimKind::Sgld;
        sgld.xi = Schedule::Constant(0.0);
        let a = run_continual(&seq, &s, &base_policy(1, 2), &spec, &sgd, &RngStream::new(5))
            .unwrap();
        let b = run_continual(&seq, &s, &base_policy(1, 2), &spec, &sgld, &RngStream::new(5))
            .unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.loss_table, b.loss_table);
    }

    #[test]
    fn zero_eta_leaves_params_unchanged() {
        let spec = ModelSpec::linear(2, 2);
        let params = model::init_params(&spec, &RngStream::new(1));
        let sample = Sample {
            features: vec![1.0, -1.0],
            label: 0,
        };
        let mut opt = base_opt();
        opt.eta = Schedule::Constant(0.0);
        let mut state = OptimState::default();
        let next = optimizer_step(&params, &[&sample], 1, &opt, &mut state, &RngStream::new(2));
        assert_eq!(params, next);
    }

    #[test]
    fn sgld_noise_variance_matches_xi_squared() {
        let spec = ModelSpec::linear(2, 2);
        let params = model::init_params(&spec, &RngStream::new(10));
        let sample = Sample {
            features: vec![0.0, 0.0],
            label: 0,
        };
        let mut opt = base_opt();
        opt.kind = OptimKind::Sgld;
        opt.eta = Schedule::Constant(0.0);
        let xi = 0.3;
        opt.xi = Schedule::Constant(xi);
        let mut state = OptimState::default();
        let stream = RngStream::new(11);
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for i in 0..10_000usize {
            let next = optimizer_step(
                &params,
                &[&sample],
                1,
                &opt,
                &mut state,
                &stream.child(i as u64),
            );
            for (a, b) in next.theta.iter().zip(&params.theta) {
                sum_sq += (a - b) * (a - b);
                count += 1;
            }
        }
        let var = sum_sq / count as f64;
        assert!(
            (var - xi * xi).abs() <= 0.05 * xi * xi,
            "variance {var} vs {}",
            xi * xi
        );
    }

    #[test]
    fn adam_descends_on_toy_problem() {
        let spec = ModelSpec::linear(2, 2);
        let mut params = model::init_params(&spec, &RngStream::new(12));
        let pos = Sample {
            features: vec![2.0, 0.5],
            label: 1,
        };
        let neg = Sample {
            features: vec![-2.0, -0.5],
            label: 0,
        };
        let mut opt = base_opt();
        opt.kind = OptimKind::Adam;
        opt.eta = Schedule::Constant(0.05);
        let mut state = OptimState::default();
        let before: f64 = [&pos, &neg]
            .iter()
            .map(|s| model::loss_eval(&params, s, LossKind::Surrogate))
            .sum();
        for r in 1..=200 {
            params = optimizer_step(
                &params,
                &[&pos, &neg],
                r,
                &opt,
                &mut state,
                &RngStream::new(0),
            );
        }
        let after: f64 = [&pos, &neg]
            .iter()
            .map(|s| model::loss_eval(&params, s, LossKind::Surrogate))
            .sum();
        assert!(after < before * 0.5, "before {before}, after {after}");
    }

    #[test]
    fn full_batch_probes_are_exactly_zero() {
        let seq = separable_seq(5);
        let s = draw_membership(3, 5, &RngStream::new(20));
        let spec = ModelSpec::linear(2, 2);
        let params = model::init_params(&spec, &RngStream::new(21));
        let mut opt = base_opt();
        opt.batch_current = 5;
        opt.batch_buffer = (8, 8);
        let buffer = BufferIndex {
            task_ids: vec![0, 1],
            sample_ids: vec![0, 3],
        };
        let mut view = TrainingView::new(&seq, &s);
        let rows = probe_grad_covariance(
            &params,
            &mut view,
            Some(&buffer),
            2,
            5,
            &opt,
            6,
            &RngStream::new(22),
        )
        .unwrap();
        for row in rows {
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn singleton_probes_converge_to_population_covariance() {
        // Three samples, batch size 1: G is uniform over the three
        // per-sample gradients; the probe covariance must approach the
        // population covariance of those three vectors.
        let seq = separable_seq(3);
        let s = draw_membership(3, 3, &RngStream::new(30));
        let spec = ModelSpec::linear(2, 2);
        let params = model::init_params(&spec, &RngStream::new(31));
        let mut opt = base_opt();
        opt.batch_current = 1;
        let current_task = 2;

        // Exact enumeration over the three single-sample outcomes.
        let mut view = TrainingView::new(&seq, &s);
        let gs: Vec<Vec<f64>> = (0..3)
            .map(|j| {
                let sample = view.train_sample(current_task, j);
                model::grad_batch(&params, &[sample])
            })
            .collect();
        let d = gs[0].len();
        let mut mean = vec![0.0; d];
        for g in &gs {
            for (m, v) in mean.iter_mut().zip(g) {
                *m += v / 3.0;
            }
        }
        let mut pop_cov = vec![0.0; d * d];
        for g in &gs {
            for i in 0..d {
                for j in 0..d {
                    pop_cov[i * d + j] += (g[i] - mean[i]) * (g[j] - mean[j]) / 3.0;
                }
            }
        }

        let m_probes = 4000;
        let rows = probe_grad_covariance(
            &params,
            &mut view,
            None,
            current_task,
            3,
            &opt,
            m_probes,
            &RngStream::new(32),
        )
        .unwrap();
        let mut est = vec![0.0; d * d];
        for row in &rows {
            for i in 0..d {
                for j in 0..d {
                    est[i * d + j] += row[i] * row[j] / (m_probes as f64 - 1.0);
                }
            }
        }
        let scale: f64 = pop_cov
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max)
            .max(1e-12);
        for (a, b) in est.iter().zip(&pop_cov) {
            assert!((a - b).abs() <= 0.15 * scale, "est {a} vs pop {b}");
        }
    }

    #[test]
    fn probe_requires_two_draws() {
        let seq = separable_seq(3);
        let s = draw_membership(3, 3, &RngStream::new(33));
        let spec = ModelSpec::linear(2, 2);
        let params = model::init_params(&spec, &RngStream::new(34));
        let mut view = TrainingView::new(&seq, &s);
        assert!(matches!(
            probe_grad_covariance(
                &params,
                &mut view,
                None,
                2,
                3,
                &base_opt(),
                1,
                &RngStream::new(35)
            ),
            Err(TrainError::ProbeCount { m_probes: 1 })
        ));
    }

    #[test]
    fn evaluate_losses_on_constant_classifier() {
        // Zero params predict the top class everywhere; on balanced binary
        // data the mean 0-1 loss is about one half.
        let seq = separable_seq(400);
        let s = draw_membership(3, 400, &RngStream::new(40));
        let zero = Params {
            spec: ModelSpec::linear(2, 2),
            theta: vec![0.0; 6],
        };
        let table = evaluate_losses(&zero, &seq, &s, &BufferIndex::empty());
        let mean = (table.train_risk() + table.test_risk()) / 2.0;
        assert!((mean - 0.5).abs() < 0.06, "mean loss {mean}");
    }

    #[test]
    fn run_record_json_round_trip() {
        let seq = separable_seq(6);
        let s = draw_membership(3, 6, &RngStream::new(50));
        let spec = ModelSpec::mlp(2, 3, 2, Activation::Tanh);
        let mut opt = base_opt();
        opt.kind = OptimKind::Sgld;
        opt.xi = Schedule::Constant(0.01);
        opt.steps_per_task = 2;
        opt.probe = ProbeCfg {
            enabled: true,
            m_probes: 3,
        };
        let record = run_continual(
            &seq,
            &s,
            &base_policy(1, 2),
            &spec,
            &opt,
            &RngStream::new(51),
        )
        .unwrap();
        assert_eq!(record.probe_log.as_ref().unwrap().len(), 2);
        let json = run_record_to_json(&record);
        let back = run_record_from_json(&json).unwrap();
        assert_eq!(record, back);
    }
}
