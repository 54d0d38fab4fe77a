//! From Monte-Carlo run collections to the measured generalization gap and
//! every tractable bound on it.
//!
//! All prediction-side quantities are plug-in estimates over discrete joint
//! histograms of (loss outcome, membership bit), built across runs. With
//! `N = kl + n` cells per run, the reported bounds are:
//!
//! - `e_mi`   — `(1/N)·Σ √(2·Î(L⁰,L¹; S))` over the loss-pair tables,
//! - `e_cmi`  — the same quantity stratified by supersample block and
//!              averaged across blocks (conditioning on the realized data),
//! - `ld_mi`  — `(1/N)·Σ √(2·Î(Δ; S))` over loss differences,
//! - `loss_kl`— binary-KL budget `B = Σ Î(pair;S)/N` inverted to the largest
//!              consistent population risk; reported as the implied gap bound,
//! - `fast_loss` / `fast_var` — weighted fast-rate bounds
//!              `C1·L̂ + Σ min(Î(pair;S), 2·Î(L¹;S)) / (N·C2)` minimized over
//!              an admissible C2 grid, with `L̂` replaced by the loss variance
//!              `Var(γ)` (minimized over a γ grid) for the variance form,
//! - `sgld`   — the trajectory bound `√(Σ_r log|I + (η_r²/ξ_r²)·Σ̂_r| / (4N))`
//!              from pooled gradient-covariance probes.
//!
//! Monte-Carlo error bars come from a deterministic block bootstrap (blocks
//! are the unit of data sharing, so resampling blocks respects the
//! dependence structure); the gap itself reports the plain across-run
//! standard error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    self, invert_binary_kl, min_c1, plugin_mi, C1Variant, JointHistogram, LOG_2,
};
use crate::rng::{tags, RngStream};
use crate::train::{RunRecord, Schedule};

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("need at least {needed} runs, got {got}")]
    TooFewRuns { needed: usize, got: usize },
    #[error("runs have mismatched configurations: {0}")]
    MismatchedRuns(String),
    #[error("e-CMI stratification needs >= 2 supersample blocks, found {blocks}")]
    MissingStrata { blocks: usize },
    #[error("probe log missing or incomplete in run {run}")]
    MissingProbes { run: usize },
    #[error("gamma = {0} outside (0, 1)")]
    BadGamma(f64),
    #[error("empty admissible C2/gamma grid")]
    EmptyGrid,
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMode {
    /// One histogram per (task, sample) cell, weighted by occupancy.
    PerIndex,
    /// Buffer cells pooled together, current-task cells pooled together.
    PooledByGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSearchCfg {
    pub c2_points: usize,
    pub gamma_grid: Vec<f64>,
    pub mode: EstimationMode,
    /// Standard-error multiplier for the interpolating-identity band.
    pub confidence: f64,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

impl Default for BoundSearchCfg {
    fn default() -> Self {
        Self {
            c2_points: 64,
            gamma_grid: (1..10).map(|i| i as f64 / 10.0).collect(),
            mode: EstimationMode::PooledByGroup,
            confidence: 3.0,
            bootstrap_resamples: 64,
            bootstrap_seed: 7,
        }
    }
}

/// A validated collection of runs with identical (k, l, n, T) and a block
/// structure: runs `[b·block_size, (b+1)·block_size)` share one supersample
/// realization and buffer draw.
#[derive(Debug, Clone)]
pub struct RunSet {
    runs: Vec<RunRecord>,
    block_size: usize,
    k: usize,
    l: usize,
    n: usize,
    t_count: usize,
}

impl RunSet {
    pub fn new(runs: Vec<RunRecord>, block_size: usize) -> Result<Self, BoundsError> {
        if runs.len() < 2 {
            return Err(BoundsError::TooFewRuns {
                needed: 2,
                got: runs.len(),
            });
        }
        let block_size = block_size.max(1);
        if runs.len() % block_size != 0 {
            return Err(BoundsError::MismatchedRuns(format!(
                "{} runs do not divide into blocks of {}",
                runs.len(),
                block_size
            )));
        }
        let first = &runs[0].snapshot;
        let (k, l, n, t_count) = (first.k, first.l, first.n, first.t_count);
        for (i, run) in runs.iter().enumerate() {
            let s = &run.snapshot;
            if (s.k, s.l, s.n, s.t_count) != (k, l, n, t_count) {
                return Err(BoundsError::MismatchedRuns(format!(
                    "run {i} has (k,l,n,T) = ({},{},{},{})",
                    s.k, s.l, s.n, s.t_count
                )));
            }
            if run.loss_table.len() != k * l + n {
                return Err(BoundsError::MismatchedRuns(format!(
                    "run {i} loss table has {} cells, expected {}",
                    run.loss_table.len(),
                    k * l + n
                )));
            }
        }
        Ok(Self {
            runs,
            block_size,
            k,
            l,
            n,
            t_count,
        })
    }

    pub fn runs(&self) -> &[RunRecord] {
        &self.runs
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t_count(&self) -> usize {
        self.t_count
    }

    /// Cells per run: `kl + n`.
    pub fn cells(&self) -> usize {
        self.k * self.l + self.n
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn block_count(&self) -> usize {
        self.runs.len() / self.block_size
    }

    fn block_runs(&self, block: usize) -> &[RunRecord] {
        &self.runs[block * self.block_size..(block + 1) * self.block_size]
    }
}

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

/// Pair outcomes are indexed `2·l0 + l1` over the alphabet
/// [(0,0), (0,1), (1,0), (1,1)].
pub const PAIR_ALPHABET: usize = 4;
/// Pushforward pair → Δ = l1 − l0 onto the alphabet [−1, 0, +1].
pub const PAIR_TO_DELTA: [usize; 4] = [1, 2, 0, 1];
/// Pushforward pair → column-1 loss onto the alphabet [0, 1].
pub const PAIR_TO_SINGLE: [usize; 4] = [0, 1, 0, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupKey {
    Buffer,
    Current,
    Cell(usize, usize),
}

/// Loss-pair counts for one estimation group; loss-difference and
/// single-loss tables are exact pushforwards of the pair table, so the
/// data-processing inequality holds on the empirical counts themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupHists {
    /// Number of (run, cell) observations recorded.
    pub occurrences: u64,
    pub pair: JointHistogram,
}

impl GroupHists {
    fn new() -> Self {
        Self {
            occurrences: 0,
            pair: JointHistogram::new(PAIR_ALPHABET),
        }
    }

    fn record(&mut self, l0: f64, l1: f64, s_bit: u8) {
        let idx = 2 * usize::from(l0 > 0.5) + usize::from(l1 > 0.5);
        self.pair.record(idx, s_bit as usize);
        self.occurrences += 1;
    }

    fn absorb(&mut self, other: &GroupHists) {
        self.pair.absorb(&other.pair);
        self.occurrences += other.occurrences;
    }

    pub fn delta(&self) -> JointHistogram {
        self.pair.pushforward(&PAIR_TO_DELTA, 3)
    }

    pub fn single(&self) -> JointHistogram {
        self.pair.pushforward(&PAIR_TO_SINGLE, 2)
    }
}

/// Build the per-group loss histograms (pair tables; Δ and single-loss
/// tables derive from them) for a collection of runs.
pub fn build_histograms(
    runs: &[RunRecord],
    mode: EstimationMode,
    t_last: usize,
) -> BTreeMap<GroupKey, GroupHists> {
    let mut groups: BTreeMap<GroupKey, GroupHists> = BTreeMap::new();
    for run in runs {
        for e in &run.loss_table.entries {
            let key = match mode {
                EstimationMode::PooledByGroup => {
                    if e.task == t_last {
                        GroupKey::Current
                    } else {
                        GroupKey::Buffer
                    }
                }
                EstimationMode::PerIndex => GroupKey::Cell(e.task, e.sample),
            };
            groups
                .entry(key)
                .or_insert_with(GroupHists::new)
                .record(e.l0, e.l1, e.s_bit);
        }
    }
    groups
}

// ---------------------------------------------------------------------------
// Gap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub gap: f64,
    pub se: f64,
    pub empirical_risk: f64,
    pub population_risk: f64,
}

/// Supersample gap: per run the mean over `{U,V} ∪ {T,[n]}` of
/// (test-half − train-half), then mean and standard error across runs.
pub fn gap_estimate(rs: &RunSet) -> GapEstimate {
    let gaps: Vec<f64> = rs.runs.iter().map(|r| r.loss_table.gap()).collect();
    let k = gaps.len() as f64;
    let gap = gaps.iter().sum::<f64>() / k;
    let var = gaps.iter().map(|g| (g - gap) * (g - gap)).sum::<f64>() / (k - 1.0);
    let se = (var / k).sqrt();
    let empirical_risk = rs
        .runs
        .iter()
        .map(|r| r.loss_table.train_risk())
        .sum::<f64>()
        / k;
    let population_risk = rs
        .runs
        .iter()
        .map(|r| r.loss_table.test_risk())
        .sum::<f64>()
        / k;
    GapEstimate {
        gap,
        se,
        empirical_risk,
        population_risk,
    }
}

// ---------------------------------------------------------------------------
// Point estimates over a block multiset (shared by report and bootstrap)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct BlockStats {
    run_count: usize,
    gap_sum: f64,
    train_sum: f64,
    test_sum: f64,
    /// Σ over runs of the direct per-run Var(γ) form, per γ grid point.
    var_gamma_sums: Vec<f64>,
    interpolating_runs: usize,
    groups: BTreeMap<GroupKey, GroupHists>,
}

struct Precomp<'a> {
    rs: &'a RunSet,
    cfg: &'a BoundSearchCfg,
    blocks: Vec<BlockStats>,
    c2_loss: Vec<f64>,
    sgld: Option<SgldPrecomp>,
}

/// Direct evaluation of the loss-variance form for one run:
/// `(1/N)·Σ_cells (ℓ − (1+γ)·L_Z)²` over the training view.
fn run_var_gamma(run: &RunRecord, gamma: f64) -> f64 {
    let table = &run.loss_table;
    let l_z = table.train_risk();
    let n = table.len() as f64;
    table
        .entries
        .iter()
        .map(|e| {
            let d = e.train_loss() - (1.0 + gamma) * l_z;
            d * d
        })
        .sum::<f64>()
        / n
}

fn precompute<'a>(rs: &'a RunSet, cfg: &'a BoundSearchCfg) -> Result<Precomp<'a>, BoundsError> {
    for &g in &cfg.gamma_grid {
        if !(g > 0.0 && g < 1.0) {
            return Err(BoundsError::BadGamma(g));
        }
    }
    let t_last = rs.t_count - 1;
    let blocks = (0..rs.block_count())
        .map(|b| {
            let runs = rs.block_runs(b);
            let groups = build_histograms(runs, cfg.mode, t_last);
            BlockStats {
                run_count: runs.len(),
                gap_sum: runs.iter().map(|r| r.loss_table.gap()).sum(),
                train_sum: runs.iter().map(|r| r.loss_table.train_risk()).sum(),
                test_sum: runs.iter().map(|r| r.loss_table.test_risk()).sum(),
                var_gamma_sums: cfg
                    .gamma_grid
                    .iter()
                    .map(|&g| runs.iter().map(|r| run_var_gamma(r, g)).sum())
                    .collect(),
                interpolating_runs: runs
                    .iter()
                    .filter(|r| r.loss_table.train_risk() == 0.0)
                    .count(),
                groups,
            }
        })
        .collect();
    Ok(Precomp {
        rs,
        cfg,
        blocks,
        c2_loss: numerics::c2_grid(C1Variant::Loss, cfg.c2_points),
        sgld: sgld_precompute(rs)?,
    })
}

/// All bound values for one multiset of block ids. Parameter choices
/// (argmin C2/γ, budgets) are reported alongside.
#[derive(Debug, Clone, Default)]
struct PointEstimates {
    values: BTreeMap<&'static str, f64>,
    params: BTreeMap<&'static str, BTreeMap<String, f64>>,
}

fn mi_of(hist: &JointHistogram) -> Result<f64, BoundsError> {
    Ok(plugin_mi(hist)?)
}

/// Per-group weighted sums shared by the bound formulas. Weights are
/// occurrences per run, so `Σ_g w_g = kl + n` and sums estimate the paper's
/// `Σ_{(i,j)}` with the (U, V) expectation realized by the runs' draws.
struct GroupSums {
    sqrt_pair: f64,
    sqrt_delta: f64,
    pair: f64,
    delta: f64,
    min_pair_2single: f64,
}

fn group_sums(
    groups: &BTreeMap<GroupKey, GroupHists>,
    run_count: usize,
) -> Result<GroupSums, BoundsError> {
    let mut sums = GroupSums {
        sqrt_pair: 0.0,
        sqrt_delta: 0.0,
        pair: 0.0,
        delta: 0.0,
        min_pair_2single: 0.0,
    };
    for g in groups.values() {
        if g.occurrences == 0 {
            continue;
        }
        let weight = g.occurrences as f64 / run_count as f64;
        let mi_pair = mi_of(&g.pair)?;
        let mi_delta = mi_of(&g.delta())?;
        let mi_single = mi_of(&g.single())?;
        sums.sqrt_pair += weight * (2.0 * mi_pair).sqrt();
        sums.sqrt_delta += weight * (2.0 * mi_delta).sqrt();
        sums.pair += weight * mi_pair;
        sums.delta += weight * mi_delta;
        sums.min_pair_2single += weight * mi_pair.min(2.0 * mi_single);
    }
    Ok(sums)
}

fn estimates_for(pre: &Precomp<'_>, block_ids: &[usize]) -> Result<PointEstimates, BoundsError> {
    let rs = pre.rs;
    let cells = rs.cells() as f64;
    let mut run_count = 0usize;
    let mut train_sum = 0.0;
    let mut test_sum = 0.0;
    let mut var_sums = vec![0.0f64; pre.cfg.gamma_grid.len()];
    let mut merged: BTreeMap<GroupKey, GroupHists> = BTreeMap::new();
    for &b in block_ids {
        let stats = &pre.blocks[b];
        run_count += stats.run_count;
        train_sum += stats.train_sum;
        test_sum += stats.test_sum;
        for (acc, v) in var_sums.iter_mut().zip(&stats.var_gamma_sums) {
            *acc += v;
        }
        for (key, g) in &stats.groups {
            merged
                .entry(*key)
                .and_modify(|m| m.absorb(g))
                .or_insert_with(|| g.clone());
        }
    }
    let runs_f = run_count as f64;
    let emp_risk = train_sum / runs_f;
    let pop_risk = test_sum / runs_f;

    let sums = group_sums(&merged, run_count)?;
    let mut out = PointEstimates::default();
    out.values.insert("e_mi", sums.sqrt_pair / cells);
    out.values.insert("ld_mi", sums.sqrt_delta / cells);

    // e-CMI: stratify by block, average the per-block bound.
    if block_ids.len() >= 2 {
        let mut acc = 0.0;
        for &b in block_ids {
            let stats = &pre.blocks[b];
            let s = group_sums(&stats.groups, stats.run_count)?;
            acc += s.sqrt_pair / cells;
        }
        out.values.insert("e_cmi", acc / block_ids.len() as f64);
    }

    // Binary-KL inversion.
    let budget = sums.pair / cells;
    let pop_bound = invert_binary_kl(emp_risk, budget)?;
    out.values.insert("loss_kl", pop_bound - emp_risk);
    out.params.insert(
        "loss_kl",
        BTreeMap::from([
            ("budget".to_string(), budget),
            ("population_bound".to_string(), pop_bound),
        ]),
    );

    // Fast-rate family over the admissible C2 grid. With a zero MI
    // numerator the infimum over C2 -> 0+ is exactly zero (C1_min -> 0).
    let zero_numerator = sums.min_pair_2single == 0.0;
    let mi_term = |c2: f64| sums.min_pair_2single / (cells * c2);
    let mut fast_loss: Option<(f64, f64, f64)> = None; // (value, c2, c1)
    if zero_numerator {
        fast_loss = Some((0.0, pre.c2_loss[0], 0.0));
    }
    for &c2 in &pre.c2_loss {
        if zero_numerator {
            break;
        }
        let c1 = min_c1(c2, C1Variant::Loss)?;
        let value = c1 * emp_risk + mi_term(c2);
        if fast_loss.is_none_or(|(best, _, _)| value < best) {
            fast_loss = Some((value, c2, c1));
        }
    }
    let (fl_value, fl_c2, fl_c1) = fast_loss.ok_or(BoundsError::EmptyGrid)?;
    out.values.insert("fast_loss", fl_value);
    out.params.insert(
        "fast_loss",
        BTreeMap::from([
            ("c1".to_string(), fl_c1),
            ("c2".to_string(), fl_c2),
            ("numerator".to_string(), sums.min_pair_2single),
        ]),
    );

    let mut fast_var: Option<(f64, f64, f64, f64)> = None; // (value, c2, c1, gamma)
    if zero_numerator {
        fast_var = Some((0.0, pre.c2_loss[0], 0.0, pre.cfg.gamma_grid[0]));
    }
    for (gi, &gamma) in pre.cfg.gamma_grid.iter().enumerate() {
        if zero_numerator {
            break;
        }
        let var_gamma = var_sums[gi] / runs_f;
        for &c2 in &pre.c2_loss {
            let c1 = min_c1(c2, C1Variant::Loss)?;
            let value = c1 * var_gamma + mi_term(c2);
            if fast_var.is_none_or(|(best, _, _, _)| value < best) {
                fast_var = Some((value, c2, c1, gamma));
            }
        }
    }
    let (fv_value, fv_c2, fv_c1, fv_gamma) = fast_var.ok_or(BoundsError::EmptyGrid)?;
    out.values.insert("fast_var", fv_value);
    out.params.insert(
        "fast_var",
        BTreeMap::from([
            ("c1".to_string(), fv_c1),
            ("c2".to_string(), fv_c2),
            ("gamma".to_string(), fv_gamma),
        ]),
    );

    // Interpolating-identity quantities: in the interpolating regime the
    // population risk equals Σ Î(Δ;S)/(N·log 2), and the pair form agrees.
    let rhs_delta = sums.delta / (cells * LOG_2);
    let rhs_pair = sums.pair / (cells * LOG_2);
    out.values.insert("pop_risk", pop_risk);
    out.values.insert("identity_rhs_delta", rhs_delta);
    out.values.insert("identity_rhs_pair", rhs_pair);
    out.values.insert("identity_diff_delta", pop_risk - rhs_delta);
    out.values.insert("identity_diff_pair", pop_risk - rhs_pair);
    Ok(out)
}

// ---------------------------------------------------------------------------
// SGLD trajectory bound
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct SgldPrecomp {
    dim: usize,
    steps: usize,
    m_probes: usize,
    eta: Vec<f64>,
    xi: Vec<f64>,
    /// Per run, per step: the d×d probe Gram matrix AᵀA (rows centered).
    grams: Vec<Vec<Vec<f64>>>,
}

fn schedule_values(schedule: &Schedule, steps: usize) -> Vec<f64> {
    (1..=steps).map(|r| schedule.at(r)).collect()
}

fn sgld_precompute(rs: &RunSet) -> Result<Option<SgldPrecomp>, BoundsError> {
    if rs.runs.iter().all(|r| r.probe_log.is_none()) {
        return Ok(None);
    }
    let opt = &rs.runs[0].snapshot.optimizer;
    let steps = opt.steps_per_task;
    let dim = rs.runs[0]
        .probe_log
        .as_ref()
        .and_then(|log| log.first())
        .and_then(|rows| rows.first())
        .map(Vec::len)
        .ok_or(BoundsError::MissingProbes { run: 0 })?;
    let m_probes = opt.probe.m_probes;
    let mut grams = Vec::with_capacity(rs.runs.len());
    for (i, run) in rs.runs.iter().enumerate() {
        let log = run
            .probe_log
            .as_ref()
            .ok_or(BoundsError::MissingProbes { run: i })?;
        if log.len() != steps {
            return Err(BoundsError::MissingProbes { run: i });
        }
        let mut per_step = Vec::with_capacity(steps);
        for rows in log {
            let mut g = vec![0.0f64; dim * dim];
            for row in rows {
                for a in 0..dim {
                    let ra = row[a];
                    if ra == 0.0 {
                        continue;
                    }
                    for b in a..dim {
                        g[a * dim + b] += ra * row[b];
                    }
                }
            }
            for a in 0..dim {
                for b in 0..a {
                    g[a * dim + b] = g[b * dim + a];
                }
            }
            per_step.push(g);
        }
        grams.push(per_step);
    }
    Ok(Some(SgldPrecomp {
        dim,
        steps,
        m_probes,
        eta: schedule_values(&opt.eta, steps),
        xi: schedule_values(&opt.xi, steps),
        grams,
    }))
}

fn logdet_identity_plus(matrix: &[f64], dim: usize, scale: f64) -> f64 {
    let mut m = vec![0.0f64; dim * dim];
    for i in 0..dim * dim {
        m[i] = scale * matrix[i];
    }
    for i in 0..dim {
        m[i * dim + i] += 1.0;
    }
    // Cholesky log-determinant (I + PSD is positive definite).
    let mut logdet = 0.0;
    for j in 0..dim {
        let mut diag = m[j * dim + j];
        for k in 0..j {
            diag -= m[j * dim + k] * m[j * dim + k];
        }
        let l_jj = diag.max(f64::MIN_POSITIVE).sqrt();
        m[j * dim + j] = l_jj;
        logdet += 2.0 * l_jj.ln();
        for i in (j + 1)..dim {
            let mut v = m[i * dim + j];
            for k in 0..j {
                v -= m[i * dim + k] * m[j * dim + k];
            }
            m[i * dim + j] = v / l_jj;
        }
    }
    logdet.max(0.0)
}

fn sgld_value(pre: &SgldPrecomp, run_ids: &[usize], cells: f64) -> f64 {
    let dim = pre.dim;
    let mut total = 0.0;
    let mut pooled = vec![0.0f64; dim * dim];
    for r in 0..pre.steps {
        pooled.iter_mut().for_each(|v| *v = 0.0);
        for &run in run_ids {
            for (p, g) in pooled.iter_mut().zip(&pre.grams[run][r]) {
                *p += g;
            }
        }
        let denom = (run_ids.len() * (pre.m_probes - 1)) as f64;
        let xi = pre.xi[r].max(f64::MIN_POSITIVE);
        let scale = pre.eta[r] * pre.eta[r] / (xi * xi * denom);
        total += logdet_identity_plus(&pooled, dim, scale);
    }
    (total / (4.0 * cells)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgldBound {
    /// Bound from probes pooled across runs per step (the reported value).
    pub value: f64,
    /// Mean and spread of the per-run log-det bounds, for comparison.
    pub per_run_mean: f64,
    pub per_run_se: f64,
    pub steps: usize,
}

/// Trajectory bound from the recorded probe logs of an SGLD run set.
pub fn bound_sgld(rs: &RunSet) -> Result<SgldBound, BoundsError> {
    let pre = sgld_precompute(rs)?.ok_or(BoundsError::MissingProbes { run: 0 })?;
    let cells = rs.cells() as f64;
    let all: Vec<usize> = (0..rs.runs.len()).collect();
    let value = sgld_value(&pre, &all, cells);
    let per_run: Vec<f64> = all.iter().map(|&r| sgld_value(&pre, &[r], cells)).collect();
    let mean = per_run.iter().sum::<f64>() / per_run.len() as f64;
    let var = per_run.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (per_run.len() as f64 - 1.0).max(1.0);
    Ok(SgldBound {
        value,
        per_run_mean: mean,
        per_run_se: (var / per_run.len() as f64).sqrt(),
        steps: pre.steps,
    })
}

// ---------------------------------------------------------------------------
// Public per-bound entry points
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqrtKind {
    EMi,
    ECmi,
    LdMi,
}

/// Square-root family: `(1/N)·Σ √(2·Î)` with the pair MI (`EMi`), the pair
/// MI stratified by supersample block (`ECmi`), or the difference MI
/// (`LdMi`).
pub fn bound_sqrt_family(
    rs: &RunSet,
    cfg: &BoundSearchCfg,
    kind: SqrtKind,
) -> Result<f64, BoundsError> {
    let pre = precompute(rs, cfg)?;
    let all: Vec<usize> = (0..pre.blocks.len()).collect();
    if kind == SqrtKind::ECmi && all.len() < 2 {
        return Err(BoundsError::MissingStrata { blocks: all.len() });
    }
    let est = estimates_for(&pre, &all)?;
    let name = match kind {
        SqrtKind::EMi => "e_mi",
        SqrtKind::ECmi => "e_cmi",
        SqrtKind::LdMi => "ld_mi",
    };
    Ok(est.values[name])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryKlBound {
    pub budget: f64,
    pub population_bound: f64,
    pub gap_bound: f64,
}

/// Binary-KL bound: budget `B = Σ Î(pair;S)/N`, population bound
/// `L* = invert_binary_kl(L̂, B)`, implied gap bound `L* − L̂`.
pub fn bound_binary_kl(rs: &RunSet, cfg: &BoundSearchCfg) -> Result<BinaryKlBound, BoundsError> {
    let pre = precompute(rs, cfg)?;
    let all: Vec<usize> = (0..pre.blocks.len()).collect();
    let est = estimates_for(&pre, &all)?;
    let p = &est.params["loss_kl"];
    Ok(BinaryKlBound {
        budget: p["budget"],
        population_bound: p["population_bound"],
        gap_bound: est.values["loss_kl"],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FastKind {
    FastLoss,
    FastVar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastBound {
    pub value: f64,
    pub c1: f64,
    pub c2: f64,
    pub gamma: Option<f64>,
}

/// Fast-rate family: minimum over the admissible C2 grid (and γ grid for the
/// variance form) of `C1_min(C2)·L̂ + Σ min(Î(pair;S), 2·Î(L¹;S))/(N·C2)`.
pub fn bound_fast_family(
    rs: &RunSet,
    cfg: &BoundSearchCfg,
    kind: FastKind,
) -> Result<FastBound, BoundsError> {
    let pre = precompute(rs, cfg)?;
    let all: Vec<usize> = (0..pre.blocks.len()).collect();
    let est = estimates_for(&pre, &all)?;
    match kind {
        FastKind::FastLoss => {
            let p = &est.params["fast_loss"];
            Ok(FastBound {
                value: est.values["fast_loss"],
                c1: p["c1"],
                c2: p["c2"],
                gamma: None,
            })
        }
        FastKind::FastVar => {
            let p = &est.params["fast_var"];
            Ok(FastBound {
                value: est.values["fast_var"],
                c1: p["c1"],
                c2: p["c2"],
                gamma: Some(p["gamma"]),
            })
        }
    }
}

/// Loss variance `Var(γ)`: mean over runs of
/// `(1/N)·Σ (ℓ − (1+γ)·L_Z(W))²` over the training view.
pub fn empirical_variance(rs: &RunSet, gamma: f64) -> Result<f64, BoundsError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(BoundsError::BadGamma(gamma));
    }
    Ok(rs.runs.iter().map(|r| run_var_gamma(r, gamma)).sum::<f64>() / rs.runs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub applicable: bool,
    pub population_risk: f64,
    pub rhs_delta: f64,
    pub rhs_pair: f64,
    pub diff_delta_se: f64,
    pub diff_pair_se: f64,
    pub satisfied: bool,
}

/// Compare the measured population risk against the two MI identities
/// `Σ Î(Δ;S)/(N·log 2)` and `Σ Î(pair;S)/(N·log 2)`. Applicable only when
/// every run has zero training risk; `satisfied` holds when both agree
/// within the configured confidence band of the bootstrap spread.
pub fn check_interpolating_identity(
    rs: &RunSet,
    cfg: &BoundSearchCfg,
) -> Result<IdentityCheck, BoundsError> {
    let pre = precompute(rs, cfg)?;
    let all: Vec<usize> = (0..pre.blocks.len()).collect();
    let point = estimates_for(&pre, &all)?;
    let mut samples: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let boot_stream = RngStream::new(cfg.bootstrap_seed).child(tags::BOOTSTRAP);
    for b in 0..cfg.bootstrap_resamples {
        let mut rng = boot_stream.child(b as u64).rng();
        let ids: Vec<usize> = (0..all.len())
            .map(|_| rand::Rng::random_range(&mut rng, 0..all.len()))
            .collect();
        let est = estimates_for(&pre, &ids)?;
        for (name, value) in est.values {
            samples.entry(name).or_default().push(value);
        }
    }
    let interpolating: usize = pre.blocks.iter().map(|b| b.interpolating_runs).sum();
    Ok(identity_check(
        &point,
        &samples,
        interpolating as f64 / rs.runs.len() as f64,
        cfg,
    ))
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub name: String,
    pub value: f64,
    pub se: f64,
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub version: u32,
    pub config_hash: String,
    pub master_seed: u64,
    pub run_count: usize,
    pub block_size: usize,
    pub t_count: usize,
    pub k: usize,
    pub l: usize,
    pub n: usize,
    pub estimation_mode: EstimationMode,
    pub gap: Stat,
    pub empirical_risk: f64,
    pub population_risk: f64,
    pub interpolating_fraction: f64,
    pub bounds: Vec<BoundEntry>,
    pub identity: IdentityCheck,
    pub metadata: BTreeMap<String, String>,
}

pub const BOUND_REPORT_VERSION: u32 = 1;

/// Compute the full report: gap, every applicable bound with bootstrap
/// standard errors, and the interpolating-identity check.
pub fn compute_report(
    rs: &RunSet,
    cfg: &BoundSearchCfg,
    config_hash: &str,
    master_seed: u64,
) -> Result<BoundReport, BoundsError> {
    let pre = precompute(rs, cfg)?;
    let all_blocks: Vec<usize> = (0..pre.blocks.len()).collect();
    let point = estimates_for(&pre, &all_blocks)?;
    let gap = gap_estimate(rs);

    // Deterministic block bootstrap for Monte-Carlo error bars.
    let mut samples: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let boot_stream = RngStream::new(cfg.bootstrap_seed).child(tags::BOOTSTRAP);
    let mut sgld_samples: Vec<f64> = Vec::new();
    let sgld_resamples = cfg.bootstrap_resamples.min(16);
    for b in 0..cfg.bootstrap_resamples {
        let mut rng = boot_stream.child(b as u64).rng();
        let ids: Vec<usize> = (0..all_blocks.len())
            .map(|_| rand::Rng::random_range(&mut rng, 0..all_blocks.len()))
            .collect();
        let est = estimates_for(&pre, &ids)?;
        for (name, value) in est.values {
            samples.entry(name).or_default().push(value);
        }
        if b < sgld_resamples {
            if let Some(sp) = &pre.sgld {
                let runs: Vec<usize> = ids
                    .iter()
                    .flat_map(|&blk| {
                        (blk * rs.block_size..(blk + 1) * rs.block_size).collect::<Vec<_>>()
                    })
                    .collect();
                sgld_samples.push(sgld_value(sp, &runs, rs.cells() as f64));
            }
        }
    }
    let se_of = |name: &str| -> f64 {
        samples
            .get(name)
            .map(|v| sample_std(v))
            .unwrap_or(0.0)
    };

    let mut bounds = Vec::new();
    let order = ["e_mi", "e_cmi", "ld_mi", "loss_kl", "fast_loss", "fast_var"];
    for name in order {
        if let Some(&value) = point.values.get(name) {
            bounds.push(BoundEntry {
                name: name.to_string(),
                value,
                se: se_of(name),
                params: point.params.get(name).cloned().unwrap_or_default(),
            });
        }
    }
    if let Some(sp) = &pre.sgld {
        let all_runs: Vec<usize> = (0..rs.runs.len()).collect();
        let value = sgld_value(sp, &all_runs, rs.cells() as f64);
        bounds.push(BoundEntry {
            name: "sgld".to_string(),
            value,
            se: sample_std(&sgld_samples),
            params: BTreeMap::from([("steps".to_string(), sp.steps as f64)]),
        });
    }

    let interpolating_runs: usize = pre.blocks.iter().map(|b| b.interpolating_runs).sum();
    let interpolating_fraction = interpolating_runs as f64 / rs.runs.len() as f64;
    let identity = identity_check(&point, &samples, interpolating_fraction, cfg);

    let mut metadata = BTreeMap::new();
    metadata.insert("loss".into(), "zero_one".into());
    metadata.insert(
        "surrogate".into(),
        format!(
            "clipped_cross_entropy(clip={})",
            rs.runs[0].snapshot.model.surrogate_clip
        ),
    );
    metadata.insert(
        "buffer_mode".into(),
        format!("{:?}", rs.runs[0].snapshot.buffer_mode).to_lowercase(),
    );
    metadata.insert(
        "sampling".into(),
        format!("{:?}", rs.runs[0].snapshot.sampling).to_lowercase(),
    );
    metadata.insert("mi_estimator".into(), "plugin".into());
    metadata.insert("se_method".into(), "block_bootstrap".into());
    // The loss-side C1 constraint: the appendix-proof exponent e^{2C2} is
    // implemented; the theorem-statement form e^{C2} is surfaced alongside.
    if let Some(p) = point.params.get("fast_loss") {
        let c2 = p["c2"];
        metadata.insert(
            "c1_loss_proof_form".into(),
            format!("{}", min_c1(c2, C1Variant::Loss).unwrap_or(f64::NAN)),
        );
        let statement = -(2.0 - c2.exp()).ln() / (2.0 * c2) - 1.0;
        metadata.insert("c1_loss_statement_form".into(), format!("{statement}"));
    }

    Ok(BoundReport {
        version: BOUND_REPORT_VERSION,
        config_hash: config_hash.to_string(),
        master_seed,
        run_count: rs.runs.len(),
        block_size: rs.block_size,
        t_count: rs.t_count,
        k: rs.k,
        l: rs.l,
        n: rs.n,
        estimation_mode: cfg.mode,
        gap: Stat {
            value: gap.gap,
            se: gap.se,
        },
        empirical_risk: gap.empirical_risk,
        population_risk: gap.population_risk,
        interpolating_fraction,
        bounds,
        identity,
        metadata,
    })
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() as f64 - 1.0);
    var.sqrt()
}

fn identity_check(
    point: &PointEstimates,
    samples: &BTreeMap<&'static str, Vec<f64>>,
    interpolating_fraction: f64,
    cfg: &BoundSearchCfg,
) -> IdentityCheck {
    let applicable = interpolating_fraction == 1.0;
    let diff_delta = point.values["identity_diff_delta"];
    let diff_pair = point.values["identity_diff_pair"];
    let se = |name: &str| samples.get(name).map(|v| sample_std(v)).unwrap_or(0.0);
    let diff_delta_se = se("identity_diff_delta");
    let diff_pair_se = se("identity_diff_pair");
    // Bootstrap spread of the differences; a small floor guards the exact
    // degenerate fixtures where every resample agrees to machine precision.
    let band = |se: f64| cfg.confidence * se.max(1e-12);
    let satisfied = applicable
        && diff_delta.abs() <= band(diff_delta_se)
        && diff_pair.abs() <= band(diff_pair_se);
    IdentityCheck {
        applicable,
        population_risk: point.values["pop_risk"],
        rhs_delta: point.values["identity_rhs_delta"],
        rhs_pair: point.values["identity_rhs_pair"],
        diff_delta_se,
        diff_pair_se,
        satisfied,
    }
}

pub mod fixtures {
    //! Hand-constructable run records for estimator validation: loss tables
    //! are written directly, with no trained model behind them.

    use super::*;
    use crate::model::{ModelSpec, Params};
    use crate::tasks::{draw_buffer_index, BufferIndex, BufferSampling, MembershipVectors};
    use crate::train::{
        AccessAudit, BufferMode, LossEntry, LossTable, OptimKind, OptimizerCfg, ProbeCfg,
        RunRecord, RunSnapshot, Schedule,
    };

    pub fn snapshot(k: usize, l: usize, n: usize, t_count: usize) -> RunSnapshot {
        RunSnapshot {
            model: ModelSpec::linear(1, 2),
            optimizer: OptimizerCfg {
                kind: OptimKind::Sgd,
                eta: Schedule::Constant(0.0),
                xi: Schedule::Constant(0.0),
                steps_per_task: 1,
                batch_buffer: (0, 0),
                batch_current: 1,
                adam: Default::default(),
                probe: ProbeCfg::default(),
            },
            k,
            l,
            n,
            t_count,
            buffer_mode: BufferMode::Fixed,
            sampling: BufferSampling::Uniform,
        }
    }

    /// A record whose loss table is given directly.
    pub fn record_from_entries(
        k: usize,
        l: usize,
        n: usize,
        t_count: usize,
        buffer: BufferIndex,
        membership: MembershipVectors,
        entries: Vec<LossEntry>,
        run_id: u64,
        block_id: u64,
    ) -> RunRecord {
        let spec = ModelSpec::linear(1, 2);
        let theta = vec![0.0; spec.param_count()];
        RunRecord {
            run_id,
            block_id,
            membership,
            buffers: vec![None; t_count],
            analysis_buffer: buffer,
            final_params: Params { spec, theta },
            loss_table: LossTable { entries },
            probe_log: None,
            audit: AccessAudit::default(),
            snapshot: snapshot(k, l, n, t_count),
        }
    }

    /// Random-label memorizer: train loss 0 everywhere, test loss
    /// Bernoulli(`test_error`); the closed-form interpolating fixture where
    /// each per-cell MI equals `test_error·log 2`.
    pub fn memorizer_runs(
        t_count: usize,
        n: usize,
        k: usize,
        l: usize,
        run_count: usize,
        test_error: f64,
        stream: &RngStream,
    ) -> Vec<RunRecord> {
        use rand::Rng;
        (0..run_count)
            .map(|r| {
                let rst = stream.child(r as u64);
                let buffer = draw_buffer_index(t_count - 1, n, k, l, &rst.child(1)).unwrap();
                let mut rng = rst.child(2).rng();
                let bits: Vec<u8> = (0..t_count * n)
                    .map(|_| u8::from(rng.random_bool(0.5)))
                    .collect();
                let membership = MembershipVectors::from_bits(t_count, n, bits);
                let mut entries = Vec::new();
                let mut push = |task: usize, sample: usize, rng: &mut rand_chacha::ChaCha12Rng| {
                    let s_bit = membership.bit(task, sample);
                    let test = f64::from(rng.random_bool(test_error));
                    let (l0, l1) = if s_bit == 0 { (0.0, test) } else { (test, 0.0) };
                    entries.push(LossEntry {
                        task,
                        sample,
                        l0,
                        l1,
                        s_bit,
                    });
                };
                for (u, v) in buffer.cells() {
                    push(u, v, &mut rng);
                }
                for j in 0..n {
                    push(t_count - 1, j, &mut rng);
                }
                record_from_entries(
                    k,
                    l,
                    n,
                    t_count,
                    buffer,
                    membership,
                    entries,
                    r as u64,
                    r as u64 / 16,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::record_from_entries;
    use super::*;
    use crate::tasks::{BufferIndex, MembershipVectors};
    use crate::train::{LossEntry, OptimKind, ProbeCfg, RunRecord};

    fn entry(task: usize, sample: usize, l0: f64, l1: f64, s_bit: u8) -> LossEntry {
        LossEntry {
            task,
            sample,
            l0,
            l1,
            s_bit,
        }
    }

    /// Two hand-built runs over k=1, l=1, n=2, T=2 (3 cells each).
    fn hand_pair() -> RunSet {
        let buffer = BufferIndex {
            task_ids: vec![0],
            sample_ids: vec![0],
        };
        let run_a = record_from_entries(
            1,
            1,
            2,
            2,
            buffer.clone(),
            MembershipVectors::from_bits(2, 2, vec![0, 0, 1, 0]),
            vec![
                entry(0, 0, 0.0, 1.0, 0),
                entry(1, 0, 1.0, 0.0, 1),
                entry(1, 1, 0.0, 0.0, 0),
            ],
            0,
            0,
        );
        let run_b = record_from_entries(
            1,
            1,
            2,
            2,
            buffer,
            MembershipVectors::from_bits(2, 2, vec![0, 0, 0, 1]),
            vec![
                entry(0, 0, 1.0, 1.0, 0),
                entry(1, 0, 0.0, 0.0, 0),
                entry(1, 1, 0.0, 1.0, 1),
            ],
            1,
            1,
        );
        RunSet::new(vec![run_a, run_b], 1).unwrap()
    }

    #[test]
    fn gap_matches_manual_arithmetic() {
        // Run A: train 0, test 2/3; run B: train 2/3, test 1/3.
        let rs = hand_pair();
        let g = gap_estimate(&rs);
        assert!((g.gap - 1.0 / 6.0).abs() < 1e-15, "gap {}", g.gap);
        assert!((g.empirical_risk - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.population_risk - 0.5).abs() < 1e-15);
        // Across-run se of, per-run gaps {2/3, -1/3}: sd = 1/sqrt(2) ... /sqrt(2).
        assert!((g.se - 0.5).abs() < 1e-12, "se {}", g.se);
    }

    #[test]
    fn histograms_match_hand_tally() {
        let rs = hand_pair();
        let groups = build_histograms(rs.runs(), EstimationMode::PooledByGroup, 1);
        let buffer = &groups[&GroupKey::Buffer];
        assert_eq!(buffer.occurrences, 2);
        // Cell (0,0): run A pair (0,1) at s=0, run B pair (1,1) at s=0.
        assert_eq!(buffer.pair.counts()[1], [1, 0]);
        assert_eq!(buffer.pair.counts()[3], [1, 0]);
        let current = &groups[&GroupKey::Current];
        assert_eq!(current.occurrences, 4);
        assert_eq!(current.pair.counts()[0], [2, 0]); // (0,0) twice at s=0
        assert_eq!(current.pair.counts()[1], [0, 1]); // (0,1) at s=1
        assert_eq!(current.pair.counts()[2], [0, 1]); // (1,0) at s=1
        let per_index = build_histograms(rs.runs(), EstimationMode::PerIndex, 1);
        assert_eq!(per_index.len(), 3);
        assert!(per_index.contains_key(&GroupKey::Cell(0, 0)));
    }

    /// Alternating deterministic coupling on a single current-task cell:
    /// pooled pair MI is exactly log 2.
    fn coupled_runs(count: usize) -> RunSet {
        let runs: Vec<RunRecord> = (0..count)
            .map(|r| {
                let s_bit = (r % 2) as u8;
                let (l0, l1) = if s_bit == 0 { (0.0, 1.0) } else { (1.0, 0.0) };
                record_from_entries(
                    0,
                    0,
                    1,
                    2,
                    BufferIndex::empty(),
                    MembershipVectors::from_bits(2, 1, vec![0, s_bit]),
                    vec![entry(1, 0, l0, l1, s_bit)],
                    r as u64,
                    r as u64,
                )
            })
            .collect();
        RunSet::new(runs, 1).unwrap()
    }

    #[test]
    fn sqrt_family_on_deterministic_coupling() {
        let rs = coupled_runs(8);
        let cfg = BoundSearchCfg::default();
        let e_mi = bound_sqrt_family(&rs, &cfg, SqrtKind::EMi).unwrap();
        assert!((e_mi - (2.0 * LOG_2).sqrt()).abs() < 1e-12, "e_mi {e_mi}");
        let ld = bound_sqrt_family(&rs, &cfg, SqrtKind::LdMi).unwrap();
        assert!((ld - (2.0 * LOG_2).sqrt()).abs() < 1e-12);
        // Delta concentrated at zero gives zero MI.
        let flat: Vec<RunRecord> = (0..4)
            .map(|r| {
                record_from_entries(
                    0,
                    0,
                    1,
                    2,
                    BufferIndex::empty(),
                    MembershipVectors::from_bits(2, 1, vec![0, (r % 2) as u8]),
                    vec![entry(1, 0, 0.0, 0.0, (r % 2) as u8)],
                    r as u64,
                    r as u64,
                )
            })
            .collect();
        let flat_rs = RunSet::new(flat, 1).unwrap();
        assert_eq!(
            bound_sqrt_family(&flat_rs, &cfg, SqrtKind::LdMi).unwrap(),
            0.0
        );
    }

    #[test]
    fn delta_never_exceeds_pair_bound() {
        let rs = hand_pair();
        let cfg = BoundSearchCfg::default();
        let e_mi = bound_sqrt_family(&rs, &cfg, SqrtKind::EMi).unwrap();
        let ld = bound_sqrt_family(&rs, &cfg, SqrtKind::LdMi).unwrap();
        assert!(ld <= e_mi + 1e-12, "ld {ld} vs e_mi {e_mi}");
    }

    #[test]
    fn binary_kl_bound_closed_form_at_zero_risk() {
        // Memorizer runs: empirical risk 0, so the population bound is the
        // closed form 2(1 − e^{-B}).
        let runs =
            fixtures::memorizer_runs(3, 8, 1, 2, 64, 0.4, &RngStream::new(99));
        let rs = RunSet::new(runs, 16).unwrap();
        let cfg = BoundSearchCfg::default();
        let b = bound_binary_kl(&rs, &cfg).unwrap();
        let expected = 2.0 * (1.0 - (-b.budget).exp());
        assert!((b.population_bound - expected).abs() < 1e-9);
        assert!((b.gap_bound - b.population_bound).abs() < 1e-15);
    }

    #[test]
    fn fast_family_interpolating_limit() {
        let runs =
            fixtures::memorizer_runs(3, 8, 1, 2, 64, 0.3, &RngStream::new(5));
        let rs = RunSet::new(runs, 16).unwrap();
        let cfg = BoundSearchCfg::default();
        let fast = bound_fast_family(&rs, &cfg, FastKind::FastLoss).unwrap();
        // Independent route: numerator from public histogram plumbing.
        let groups = build_histograms(rs.runs(), EstimationMode::PooledByGroup, 2);
        let mut numerator = 0.0;
        for g in groups.values() {
            let w = g.occurrences as f64 / rs.runs().len() as f64;
            let pair = plugin_mi(&g.pair).unwrap();
            let single = plugin_mi(&g.single()).unwrap();
            numerator += w * pair.min(2.0 * single);
        }
        let expected = 2.0 * numerator / (rs.cells() as f64 * LOG_2);
        assert!(
            (fast.value - expected).abs() <= 1e-8 * expected.max(1e-12),
            "fast {} vs limit {expected}",
            fast.value
        );
        // The C2 argmin sits at the top of the admissible interval.
        assert!(fast.c2 > 0.34);
        let fv = bound_fast_family(&rs, &cfg, FastKind::FastVar).unwrap();
        assert!(fv.value <= fast.value + 1e-15);
    }

    #[test]
    fn empirical_variance_identity_for_binary_losses() {
        let rs = hand_pair();
        for &gamma in &[0.1, 0.5, 0.9] {
            let direct = empirical_variance(&rs, gamma).unwrap();
            let identity: f64 = rs
                .runs()
                .iter()
                .map(|r| {
                    let lz = r.loss_table.train_risk();
                    lz - (1.0 - gamma * gamma) * lz * lz
                })
                .sum::<f64>()
                / rs.runs().len() as f64;
            assert!(
                (direct - identity).abs() <= 1e-12,
                "gamma {gamma}: {direct} vs {identity}"
            );
        }
        assert!(empirical_variance(&rs, 0.0).is_err());
        assert!(empirical_variance(&rs, 1.0).is_err());
    }

    #[test]
    fn empirical_variance_all_ones_is_gamma_squared() {
        let runs: Vec<RunRecord> = (0..2)
            .map(|r| {
                record_from_entries(
                    0,
                    0,
                    2,
                    2,
                    BufferIndex::empty(),
                    MembershipVectors::from_bits(2, 2, vec![0, 0, 0, 1]),
                    vec![entry(1, 0, 1.0, 1.0, 0), entry(1, 1, 1.0, 1.0, 1)],
                    r,
                    r,
                )
            })
            .collect();
        let rs = RunSet::new(runs, 1).unwrap();
        let gamma = 0.3;
        let v = empirical_variance(&rs, gamma).unwrap();
        assert!((v - gamma * gamma).abs() < 1e-15);
    }

    #[test]
    fn memorizer_identity_holds_at_closed_form() {
        let runs =
            fixtures::memorizer_runs(3, 10, 1, 4, 256, 0.5, &RngStream::new(1234));
        let rs = RunSet::new(runs, 16).unwrap();
        let cfg = BoundSearchCfg::default();
        let check = check_interpolating_identity(&rs, &cfg).unwrap();
        assert!(check.applicable);
        assert!(check.satisfied, "identity violated: {check:?}");
        // Closed form: population risk = test-error, per-cell MI = α·log 2.
        assert!(
            (check.rhs_delta - 0.5).abs() < 0.04,
            "rhs_delta {}",
            check.rhs_delta
        );
        assert!((check.rhs_pair - check.rhs_delta).abs() < 1e-12);
    }

    #[test]
    fn non_interpolating_runs_gate_the_identity() {
        let rs = hand_pair();
        let check = check_interpolating_identity(&rs, &BoundSearchCfg::default()).unwrap();
        assert!(!check.applicable);
        assert!(!check.satisfied);
    }

    #[test]
    fn report_values_invariant_to_run_ordering() {
        let runs =
            fixtures::memorizer_runs(3, 6, 1, 2, 64, 0.4, &RngStream::new(31));
        let rs = RunSet::new(runs.clone(), 16).unwrap();
        let cfg = BoundSearchCfg::default();
        let base = compute_report(&rs, &cfg, "h", 0).unwrap();
        // Permute block order and shuffle runs within one block.
        let mut permuted = runs;
        permuted.rotate_left(16);
        permuted[0..16].reverse();
        let rs2 = RunSet::new(permuted, 16).unwrap();
        let other = compute_report(&rs2, &cfg, "h", 0).unwrap();
        for (a, b) in base.bounds.iter().zip(&other.bounds) {
            assert_eq!(a.name, b.name);
            assert!(
                (a.value - b.value).abs() <= 1e-12,
                "{}: {} vs {}",
                a.name,
                a.value,
                b.value
            );
            assert!(a.value >= 0.0);
        }
        assert!((base.gap.value - other.gap.value).abs() <= 1e-15);
    }

    #[test]
    fn report_contains_all_entries_and_is_deterministic() {
        let runs =
            fixtures::memorizer_runs(4, 6, 2, 3, 64, 0.25, &RngStream::new(8));
        let rs = RunSet::new(runs, 16).unwrap();
        let cfg = BoundSearchCfg::default();
        let a = compute_report(&rs, &cfg, "hash", 42).unwrap();
        let b = compute_report(&rs, &cfg, "hash", 42).unwrap();
        assert_eq!(a, b);
        let names: Vec<&str> = a.bounds.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(
            names,
            vec!["e_mi", "e_cmi", "ld_mi", "loss_kl", "fast_loss", "fast_var"]
        );
        assert!(a.bounds.iter().all(|e| e.se >= 0.0));
        assert_eq!(a.run_count, 64);
        assert!((a.interpolating_fraction - 1.0).abs() < 1e-15);
        let json = serde_json::to_string(&a).unwrap();
        let back: BoundReport = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
    }

    /// Fabricate an SGLD run with a given probe log.
    fn sgld_run(
        probe_rows: Vec<Vec<Vec<f64>>>,
        eta: f64,
        xi: f64,
        run_id: u64,
    ) -> RunRecord {
        let mut record = record_from_entries(
            0,
            0,
            1,
            2,
            BufferIndex::empty(),
            MembershipVectors::from_bits(2, 1, vec![0, 0]),
            vec![entry(1, 0, 0.0, 0.0, 0)],
            run_id,
            run_id,
        );
        record.snapshot.optimizer.kind = OptimKind::Sgld;
        record.snapshot.optimizer.eta = Schedule::Constant(eta);
        record.snapshot.optimizer.xi = Schedule::Constant(xi);
        record.snapshot.optimizer.steps_per_task = probe_rows.len();
        record.snapshot.optimizer.probe = ProbeCfg {
            enabled: true,
            m_probes: probe_rows[0].len(),
        };
        record.probe_log = Some(probe_rows);
        record
    }

    #[test]
    fn sgld_bound_zero_variance_and_rank_one_form() {
        // Zero probes: bound 0.
        let zero_rows = vec![vec![vec![0.0, 0.0]; 2]];
        let rs = RunSet::new(
            vec![
                sgld_run(zero_rows.clone(), 0.1, 0.05, 0),
                sgld_run(zero_rows, 0.1, 0.05, 1),
            ],
            1,
        )
        .unwrap();
        assert_eq!(bound_sgld(&rs).unwrap().value, 0.0);

        // Rank-one: rows ±a per run; pooled Gram = 4aaᵀ over 2 runs, with
        // normalization 1/(2·(m−1)) = 1/2. det(I + c·aaᵀ) = 1 + c·|a|².
        let a = [0.3, -0.4];
        let norm2: f64 = a.iter().map(|v| v * v).sum();
        let (eta, xi) = (0.2, 0.05);
        let mk = || vec![vec![a.to_vec(), a.iter().map(|v| -v).collect()]];
        let rs = RunSet::new(vec![sgld_run(mk(), eta, xi, 0), sgld_run(mk(), eta, xi, 1)], 1)
            .unwrap();
        let got = bound_sgld(&rs).unwrap();
        let c = eta * eta / (xi * xi * 2.0) * 4.0;
        let expected = ((1.0 + c * norm2).ln() / 4.0).sqrt();
        assert!(
            (got.value - expected).abs() < 1e-12,
            "got {} want {expected}",
            got.value
        );

        // Doubling xi strictly decreases, increasing eta strictly increases.
        let rs_xi = RunSet::new(
            vec![sgld_run(mk(), eta, 2.0 * xi, 0), sgld_run(mk(), eta, 2.0 * xi, 1)],
            1,
        )
        .unwrap();
        assert!(bound_sgld(&rs_xi).unwrap().value < got.value);
        let rs_eta = RunSet::new(
            vec![sgld_run(mk(), 2.0 * eta, xi, 0), sgld_run(mk(), 2.0 * eta, xi, 1)],
            1,
        )
        .unwrap();
        assert!(bound_sgld(&rs_eta).unwrap().value > got.value);
    }

    #[test]
    fn e_cmi_needs_strata() {
        let rs = coupled_runs(4);
        // Single block: every run in one stratum.
        let single = RunSet::new(rs.runs().to_vec(), 4).unwrap();
        assert!(matches!(
            bound_sqrt_family(&single, &BoundSearchCfg::default(), SqrtKind::ECmi),
            Err(BoundsError::MissingStrata { blocks: 1 })
        ));
    }

    #[test]
    fn runset_rejects_mismatched_runs() {
        let a = fixtures::memorizer_runs(3, 6, 1, 2, 2, 0.3, &RngStream::new(1));
        let mut b = fixtures::memorizer_runs(3, 7, 1, 2, 2, 0.3, &RngStream::new(2));
        let mut runs = a;
        runs.append(&mut b);
        assert!(matches!(
            RunSet::new(runs, 1),
            Err(BoundsError::MismatchedRuns(_))
        ));
    }
}
