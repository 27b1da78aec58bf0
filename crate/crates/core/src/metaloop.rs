//! The alternating RL -> SFT metaloop and its matched-budget baselines.
//!
//! Each loop runs one RL phase (diagnosis rollouts, rebalancing, GRPO epochs
//! with per-skill stagnation stopping), assembles the SFT set from the weak
//! samples, their skill-related samples and general replay data, runs SFT on
//! it and resets the buffer. Exactly one objective is optimised at a time.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::curation::{
    collect_weak, rebalance, reset, should_stop, DifficultyBuffer, RolloutRecord, StagnationConfig,
};
use crate::error::{config_err, DppoError, Result};
use crate::policy::{
    answer_distribution, format_probability, grpo_direction, sample_response, sft_gradient,
    sft_loss, snapshot_reference, Answer, PolicyParams, RolloutGroup, StructuredResponse,
};
use crate::rewards::{composite_reward, is_success, RewardBreakdown, RewardSpec};
use crate::taskgen::{related_samples, teacher_solve, SampleId, SampleSet, SkillDimension};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "RL")]
    Rl,
    #[serde(rename = "SFT")]
    Sft,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Rl => "RL",
            Phase::Sft => "SFT",
        })
    }
}

/// Phase selector state for one step of the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseSelector {
    pub sigma: Phase,
    pub loop_index: usize,
}

/// The `(RL, SFT) x K` schedule, with an optional trailing RL phase.
pub fn phase_schedule(loops: usize, final_rl_phase: bool) -> Vec<PhaseSelector> {
    let mut out: Vec<PhaseSelector> = (1..=loops)
        .flat_map(|k| {
            [Phase::Rl, Phase::Sft].map(|sigma| PhaseSelector {
                sigma,
                loop_index: k,
            })
        })
        .collect();
    if final_rl_phase {
        out.push(PhaseSelector {
            sigma: Phase::Rl,
            loop_index: loops + 1,
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Number of metaloop iterations K.
    pub loops: usize,
    /// Rollouts per sample per measurement (T).
    pub rollouts_per_sample: usize,
    pub rl_epoch_cap: usize,
    /// Rollout groups per GRPO update.
    pub rl_batch_size: usize,
    pub sft_epochs: usize,
    pub sft_batch_size: usize,
    pub lr_rl: f64,
    pub lr_sft: f64,
    /// `|D_gen|` as a fraction of `|D_weak u D_rel|`.
    pub gen_replay_fraction: f64,
    /// Share of each pool held out from training for evaluation.
    pub heldout_fraction: f64,
    /// Append one RL phase after the last loop.
    pub final_rl_phase: bool,
    /// Optional per-loop upper bound on the difficulty of RL candidates.
    pub difficulty_ceiling: Vec<f64>,
    pub reward: RewardSpec,
    pub stagnation: StagnationConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            loops: 3,
            rollouts_per_sample: 8,
            rl_epoch_cap: 50,
            rl_batch_size: 32,
            sft_epochs: 1,
            sft_batch_size: 32,
            lr_rl: 0.05,
            lr_sft: 0.1,
            gen_replay_fraction: 0.5,
            heldout_fraction: 0.2,
            final_rl_phase: false,
            difficulty_ceiling: Vec::new(),
            reward: RewardSpec::default(),
            stagnation: StagnationConfig::default(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loops == 0 {
            return Err(config_err("loop.loops must be >= 1"));
        }
        if self.rollouts_per_sample < 2 {
            return Err(config_err("loop.rollouts_per_sample must be >= 2"));
        }
        if self.rl_batch_size == 0 || self.sft_batch_size == 0 {
            return Err(config_err("loop batch sizes must be positive"));
        }
        if !(self.lr_rl.is_finite()
            && self.lr_rl >= 0.0
            && self.lr_sft.is_finite()
            && self.lr_sft >= 0.0)
        {
            return Err(config_err("loop learning rates must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.gen_replay_fraction) {
            return Err(config_err("loop.gen_replay_fraction must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(config_err("loop.heldout_fraction must lie in [0, 1)"));
        }
        if self
            .difficulty_ceiling
            .iter()
            .any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(config_err(
                "loop.difficulty_ceiling entries must lie in [0, 1]",
            ));
        }
        self.reward.validate()?;
        self.stagnation.validate()
    }

    fn ceiling(&self, loop_index: usize) -> f64 {
        self.difficulty_ceiling
            .get(loop_index.saturating_sub(1))
            .copied()
            .unwrap_or(1.0)
    }
}

/// Stratified train / held-out partition of both pools.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteSplit {
    pub embodied_train: Vec<SampleId>,
    pub embodied_heldout: Vec<SampleId>,
    pub general_train: Vec<SampleId>,
    pub general_heldout: Vec<SampleId>,
}

impl SuiteSplit {
    /// Holds out `round(fraction * n)` samples of every (skill, pool) stratum.
    pub fn new(suite: &SampleSet, heldout_fraction: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SPLIT]));
        let mut strata: BTreeMap<(bool, SkillDimension), Vec<SampleId>> = BTreeMap::new();
        for s in suite {
            strata
                .entry((s.is_general, s.skill))
                .or_default()
                .push(s.id);
        }
        let mut split = SuiteSplit {
            embodied_train: Vec::new(),
            embodied_heldout: Vec::new(),
            general_train: Vec::new(),
            general_heldout: Vec::new(),
        };
        for ((general, _), mut ids) in strata {
            ids.shuffle(&mut rng);
            let n_out = (heldout_fraction * ids.len() as f64).round() as usize;
            let (out, train) = ids.split_at(n_out);
            let (t, h) = if general {
                (&mut split.general_train, &mut split.general_heldout)
            } else {
                (&mut split.embodied_train, &mut split.embodied_heldout)
            };
            t.extend_from_slice(train);
            h.extend_from_slice(out);
        }
        for v in [
            &mut split.embodied_train,
            &mut split.embodied_heldout,
            &mut split.general_train,
            &mut split.general_heldout,
        ] {
            v.sort_unstable();
        }
        split
    }
}

const STREAM_SPLIT: u64 = 0x5311;
const STREAM_ROLLOUT: u64 = 0x7011;
const STREAM_SHUFFLE_RL: u64 = 0x5a1;
const STREAM_SHUFFLE_SFT: u64 = 0x5f7;
const STREAM_GEN: u64 = 0x6e4;
const STREAM_BASE: u64 = 0xba5e;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent 64-bit seed for a named sub-stream.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Probability that one sampled response succeeds.
pub fn expected_success(
    params: &PolicyParams,
    sample: &crate::taskgen::SampleInstance,
    spec: &RewardSpec,
) -> Result<f64> {
    let probs = answer_distribution(params, sample)?;
    let p_format = format_probability(params, sample)?;
    let mut p = 0.0;
    for (a, pa) in probs.iter().enumerate() {
        let answer = if sample.skill.is_numeric() {
            Answer::Numeric(sample.answers[a])
        } else {
            Answer::Choice(a)
        };
        let resp = StructuredResponse {
            format: true,
            answer,
        };
        if is_success(sample, &resp, spec) {
            p += pa;
        }
    }
    Ok(p_format * p)
}

/// Mean expected success over `ids`, overall and per skill.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall: f64,
    pub by_skill: BTreeMap<SkillDimension, f64>,
}

pub fn evaluate(
    params: &PolicyParams,
    suite: &SampleSet,
    ids: &[SampleId],
    spec: &RewardSpec,
) -> Result<Evaluation> {
    if ids.is_empty() {
        return Ok(Evaluation::default());
    }
    let mut total = 0.0;
    let mut per: BTreeMap<SkillDimension, (f64, usize)> = BTreeMap::new();
    for &id in ids {
        let s = suite.sample(id)?;
        let p = expected_success(params, s, spec)?;
        total += p;
        let e = per.entry(s.skill).or_default();
        e.0 += p;
        e.1 += 1;
    }
    Ok(Evaluation {
        overall: total / ids.len() as f64,
        by_skill: per
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect(),
    })
}

/// Work counted against the matched budget: one unit per sampled rollout and
/// one per per-example gradient evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub rollouts: u64,
    pub grad_evals: u64,
}

impl Budget {
    pub fn total(&self) -> u64 {
        self.rollouts + self.grad_evals
    }
}

/// Stagnation stop of one skill during an RL phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopEvent {
    pub loop_index: usize,
    pub skill: SkillDimension,
    /// Number of completed GRPO epochs when the rule fired.
    pub epoch: usize,
    pub task_stagnation: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseMetrics {
    pub rl_epochs: usize,
    pub d_rl: usize,
    pub d_weak: usize,
    pub d_rel: usize,
    pub d_gen: usize,
    pub grpo_steps: u64,
    pub sft_steps: u64,
    pub usage: Budget,
    pub stops: Vec<StopEvent>,
    /// Task stagnation per skill when the phase ended (RL only).
    pub task_stagnation: BTreeMap<SkillDimension, f64>,
    /// Mean buffer success rate per skill at the end of the phase (RL only).
    pub sr_means: BTreeMap<SkillDimension, f64>,
    pub nll_initial: Option<f64>,
    pub nll_final: Option<f64>,
}

/// One row per executed phase.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub loop_index: usize,
    pub phase: Phase,
    pub heldout: Evaluation,
    pub general: f64,
    pub metrics: PhaseMetrics,
    /// Cumulative budget consumed up to the end of this phase.
    pub cumulative: Budget,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoopHistory {
    /// Held-out embodied and general success before any training.
    pub initial_heldout: Evaluation,
    pub initial_general: f64,
    pub rows: Vec<HistoryRow>,
}

impl LoopHistory {
    pub fn budget(&self) -> Budget {
        self.rows.last().map(|r| r.cumulative).unwrap_or_default()
    }

    pub fn final_heldout(&self) -> f64 {
        self.rows
            .last()
            .map(|r| r.heldout.overall)
            .unwrap_or(self.initial_heldout.overall)
    }

    pub fn final_general(&self) -> f64 {
        self.rows
            .last()
            .map(|r| r.general)
            .unwrap_or(self.initial_general)
    }

    /// General-pool success after training minus before.
    pub fn general_retention(&self) -> f64 {
        self.final_general() - self.initial_general
    }

    pub fn stops(&self) -> impl Iterator<Item = &StopEvent> {
        self.rows.iter().flat_map(|r| r.metrics.stops.iter())
    }

    /// Held-out success at the end of each loop (last row of each loop index).
    pub fn per_loop_heldout(&self) -> Vec<(usize, Evaluation)> {
        let mut out: BTreeMap<usize, Evaluation> = BTreeMap::new();
        for r in &self.rows {
            out.insert(r.loop_index, r.heldout.clone());
        }
        out.into_iter().collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["loop", "phase", "heldout_embodied", "general_success"]
            .map(String::from)
            .to_vec();
        for prefix in ["heldout", "sr_mean", "stagnation"] {
            header.extend(SkillDimension::ALL.iter().map(|s| format!("{prefix}_{s}")));
        }
        header.extend(
            [
                "rl_epochs",
                "stops",
                "d_rl",
                "d_weak",
                "d_rel",
                "d_gen",
                "grpo_steps",
                "sft_steps",
                "nll_initial",
                "nll_final",
                "rollouts",
                "grad_evals",
            ]
            .map(String::from),
        );
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let m = &r.metrics;
            let mut rec = vec![
                r.loop_index.to_string(),
                r.phase.to_string(),
                r.heldout.overall.to_string(),
                r.general.to_string(),
            ];
            for s in SkillDimension::ALL {
                rec.push(opt(r.heldout.by_skill.get(&s).copied()));
            }
            for s in SkillDimension::ALL {
                rec.push(opt(m.sr_means.get(&s).copied()));
            }
            for s in SkillDimension::ALL {
                rec.push(opt(m.task_stagnation.get(&s).copied()));
            }
            let stops: Vec<String> = m
                .stops
                .iter()
                .map(|e| format!("{}@{}", e.skill, e.epoch))
                .collect();
            rec.extend([
                m.rl_epochs.to_string(),
                stops.join(";"),
                m.d_rl.to_string(),
                m.d_weak.to_string(),
                m.d_rel.to_string(),
                m.d_gen.to_string(),
                m.grpo_steps.to_string(),
                m.sft_steps.to_string(),
                opt(m.nll_initial),
                opt(m.nll_final),
                r.cumulative.rollouts.to_string(),
                r.cumulative.grad_evals.to_string(),
            ]);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Named sample collections of one loop, each SFT member paired with its
/// teacher target.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetPartition {
    pub d_rl: Vec<SampleId>,
    pub d_weak: Vec<SampleId>,
    pub d_rel: Vec<SampleId>,
    pub d_gen: Vec<SampleId>,
    pub targets: BTreeMap<SampleId, StructuredResponse>,
}

impl DatasetPartition {
    /// `D_weak u D_rel u D_gen`, sorted.
    pub fn d_sft(&self) -> Vec<SampleId> {
        let set: BTreeSet<SampleId> = self
            .d_weak
            .iter()
            .chain(&self.d_rel)
            .chain(&self.d_gen)
            .copied()
            .collect();
        set.into_iter().collect()
    }
}

/// Loop index and seed shared by the phase functions.
#[derive(Clone, Copy, Debug)]
pub struct PhaseContext {
    pub loop_index: usize,
    pub seed: u64,
}

struct Outcome {
    response: StructuredResponse,
    reward: RewardBreakdown,
    success: bool,
}

struct SampleRollouts {
    id: SampleId,
    seed: u64,
    outcomes: Vec<Outcome>,
}

/// Samples `T` responses per id from the current policy. Each sample gets its
/// own derived RNG stream, so the result does not depend on scheduling.
fn rollout(
    params: &PolicyParams,
    suite: &SampleSet,
    ids: &[SampleId],
    config: &LoopConfig,
    ctx: PhaseContext,
    epoch: usize,
) -> Result<Vec<SampleRollouts>> {
    ids.par_iter()
        .map(|&id| {
            let sample = suite.sample(id)?;
            let seed = derive_seed(
                ctx.seed,
                &[STREAM_ROLLOUT, ctx.loop_index as u64, epoch as u64, id],
            );
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let outcomes = (0..config.rollouts_per_sample)
                .map(|_| {
                    let response = sample_response(params, sample, &mut rng)?;
                    let reward = composite_reward(&config.reward, sample, &response)?;
                    let success = is_success(sample, &response, &config.reward);
                    Ok(Outcome {
                        response,
                        reward,
                        success,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SampleRollouts { id, seed, outcomes })
        })
        .collect()
}

fn log_all(
    buffer: &mut DifficultyBuffer,
    batches: &[SampleRollouts],
    ctx: PhaseContext,
    epoch: usize,
) -> Result<()> {
    for b in batches {
        buffer.restart_window(b.id);
        for o in &b.outcomes {
            buffer.log_rollout(RolloutRecord {
                sample_id: b.id,
                loop_index: ctx.loop_index,
                epoch,
                response: o.response,
                reward: o.reward,
                success: o.success,
                seed: b.seed,
                counter: 0,
            })?;
        }
    }
    Ok(())
}

fn non_finite(phase: Phase, loop_index: usize, detail: impl Into<String>) -> DppoError {
    DppoError::NonFinite {
        phase: phase.to_string(),
        loop_index,
        detail: detail.into(),
    }
}

/// Attributes a non-finite failure raised by a lower layer to `phase`.
fn in_phase(phase: Phase, loop_index: usize) -> impl Fn(DppoError) -> DppoError {
    move |e| match e {
        DppoError::NonFinite { detail, .. } => non_finite(phase, loop_index, detail),
        other => other,
    }
}

/// GRPO driver shared by the RL phase and the RL-only baseline.
struct RlEngine<'a> {
    config: &'a LoopConfig,
    suite: &'a SampleSet,
    params: PolicyParams,
    reference: PolicyParams,
    ctx: PhaseContext,
    usage: Budget,
    grpo_steps: u64,
}

impl<'a> RlEngine<'a> {
    fn new(
        config: &'a LoopConfig,
        suite: &'a SampleSet,
        params: PolicyParams,
        ctx: PhaseContext,
    ) -> Self {
        let reference = snapshot_reference(&params);
        Self {
            config,
            suite,
            params,
            reference,
            ctx,
            usage: Budget::default(),
            grpo_steps: 0,
        }
    }

    fn diagnosis_cost(&self, n: usize) -> u64 {
        (n * self.config.rollouts_per_sample) as u64
    }

    /// Measures every candidate once (epoch 0).
    fn diagnose(&mut self, buffer: &mut DifficultyBuffer, candidates: &[SampleId]) -> Result<()> {
        let batches = rollout(
            &self.params,
            self.suite,
            candidates,
            self.config,
            self.ctx,
            0,
        )
        .map_err(in_phase(Phase::Rl, self.ctx.loop_index))?;
        self.usage.rollouts += self.diagnosis_cost(candidates.len());
        log_all(buffer, &batches, self.ctx, 0)
    }

    /// One pass of on-policy GRPO updates over `ids`. With a `limit` on this
    /// engine's total usage, mini-batches are shrunk so the limit is never
    /// exceeded; returns `false` once it is exhausted.
    fn epoch(
        &mut self,
        buffer: &mut DifficultyBuffer,
        ids: &[SampleId],
        epoch: usize,
        limit: Option<u64>,
    ) -> Result<bool> {
        let mut order = ids.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.ctx.seed,
            &[STREAM_SHUFFLE_RL, self.ctx.loop_index as u64, epoch as u64],
        ));
        order.shuffle(&mut rng);
        let t = self.config.rollouts_per_sample as u64;
        let mut start = 0;
        while start < order.len() {
            let mut take = self.config.rl_batch_size.min(order.len() - start);
            if let Some(limit) = limit {
                // each sample costs T rollouts plus at most T gradient evaluations
                let affordable = (limit.saturating_sub(self.usage.total()) / (2 * t)) as usize;
                take = take.min(affordable);
                if take == 0 {
                    return Ok(false);
                }
            }
            let chunk = &order[start..start + take];
            start += take;

            let batches = rollout(
                &self.params,
                self.suite,
                chunk,
                self.config,
                self.ctx,
                epoch,
            )
            .map_err(in_phase(Phase::Rl, self.ctx.loop_index))?;
            self.usage.rollouts += t * chunk.len() as u64;
            log_all(buffer, &batches, self.ctx, epoch)?;

            let groups: Vec<RolloutGroup<'_>> = batches
                .iter()
                .map(|b| {
                    Ok(RolloutGroup {
                        sample: self.suite.sample(b.id)?,
                        responses: b.outcomes.iter().map(|o| o.response).collect(),
                        rewards: b.outcomes.iter().map(|o| o.reward.composite).collect(),
                    })
                })
                .collect::<Result<_>>()?;
            let (dir, evals) = grpo_direction(&self.params, &groups)
                .map_err(in_phase(Phase::Rl, self.ctx.loop_index))?;
            self.usage.grad_evals += evals;
            if evals == 0 {
                continue;
            }
            debug_assert!(self.params.same_shape(&self.reference));
            self.params.apply(&dir, self.config.lr_rl);
            self.params.step_count += 1;
            self.grpo_steps += 1;
            if !self.params.is_finite() {
                return Err(non_finite(
                    Phase::Rl,
                    self.ctx.loop_index,
                    "GRPO produced non-finite parameters",
                ));
            }
        }
        Ok(true)
    }
}

fn sr_means(buffer: &DifficultyBuffer) -> BTreeMap<SkillDimension, f64> {
    let mut acc: BTreeMap<SkillDimension, (f64, usize)> = BTreeMap::new();
    for st in buffer.stats().values().filter(|s| s.rollouts > 0) {
        let e = acc.entry(st.skill).or_default();
        e.0 += st.s_r;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

/// RL candidates of a loop: the embodied training pool under the loop's
/// difficulty ceiling.
pub fn rl_candidates(
    config: &LoopConfig,
    suite: &SampleSet,
    split: &SuiteSplit,
    loop_index: usize,
) -> Vec<SampleId> {
    let ceiling = config.ceiling(loop_index);
    split
        .embodied_train
        .iter()
        .copied()
        .filter(|&id| suite.get(id).is_some_and(|s| s.difficulty <= ceiling))
        .collect()
}

/// RL phase: diagnose candidates, rebalance, then GRPO epochs over the RL set
/// until every skill's stagnation reaches the threshold or the epoch cap hits.
///
/// The buffer is left holding the round's statistics for [`collect_weak`].
pub fn rl_phase(
    config: &LoopConfig,
    suite: &SampleSet,
    candidates: &[SampleId],
    params: PolicyParams,
    buffer: &mut DifficultyBuffer,
    ctx: PhaseContext,
) -> Result<(PolicyParams, PhaseMetrics)> {
    buffer.register(candidates.iter().filter_map(|&id| suite.get(id)));
    let mut engine = RlEngine::new(config, suite, params, ctx);
    engine.diagnose(buffer, candidates)?;

    let d_rl = rebalance(buffer);
    let mut metrics = PhaseMetrics {
        d_rl: d_rl.len(),
        ..Default::default()
    };
    if d_rl.is_empty() {
        info!(
            loop_index = ctx.loop_index,
            "RL set empty after rebalancing; skipping GRPO"
        );
    }

    let mut by_skill: BTreeMap<SkillDimension, Vec<SampleId>> = BTreeMap::new();
    for &id in &d_rl {
        by_skill
            .entry(suite.sample(id)?.skill)
            .or_default()
            .push(id);
    }
    let mut active: BTreeSet<SkillDimension> = by_skill.keys().copied().collect();
    let mut epoch = 0;
    while !active.is_empty() && epoch < config.rl_epoch_cap {
        epoch += 1;
        let ids: Vec<SampleId> = active
            .iter()
            .flat_map(|s| by_skill[s].iter().copied())
            .collect();
        engine.epoch(buffer, &ids, epoch, None)?;

        let stagnation = buffer.task_stagnation_by_skill(&ids.iter().copied().collect());
        for (skill, s_s) in stagnation {
            metrics.task_stagnation.insert(skill, s_s);
            if should_stop(s_s, buffer.threshold()) {
                active.remove(&skill);
                debug!(loop_index = ctx.loop_index, %skill, epoch, s_s, "stagnation stop");
                metrics.stops.push(StopEvent {
                    loop_index: ctx.loop_index,
                    skill,
                    epoch,
                    task_stagnation: s_s,
                });
            }
        }
    }
    if epoch == 0 {
        // no GRPO epoch ran; report diagnosis-time stagnation
        let all: BTreeSet<SampleId> = d_rl.iter().copied().collect();
        metrics.task_stagnation = buffer.task_stagnation_by_skill(&all);
    }
    buffer.flush()?;

    metrics.rl_epochs = epoch;
    metrics.grpo_steps = engine.grpo_steps;
    metrics.usage = engine.usage;
    metrics.sr_means = sr_means(buffer);
    Ok((engine.params, metrics))
}

/// `D_SFT = D_weak u D_rel u D_gen` with teacher targets.
pub fn build_sft_dataset(
    buffer: &DifficultyBuffer,
    suite: &SampleSet,
    split: &SuiteSplit,
    config: &LoopConfig,
    ctx: PhaseContext,
) -> Result<DatasetPartition> {
    let d_weak = collect_weak(buffer);
    let weak_set: BTreeSet<SampleId> = d_weak.iter().copied().collect();
    let mut weak_skills = BTreeSet::new();
    for &id in &d_weak {
        weak_skills.insert(suite.sample(id)?.skill);
    }
    let pool = split
        .embodied_train
        .iter()
        .filter(|id| !weak_set.contains(id))
        .filter_map(|&id| suite.get(id));
    let d_rel = related_samples(pool, &weak_skills);

    let n_gen = (config.gen_replay_fraction * (d_weak.len() + d_rel.len()) as f64).floor() as usize;
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, &[STREAM_GEN, ctx.loop_index as u64]));
    let mut d_gen: Vec<SampleId> = split
        .general_train
        .choose_multiple(&mut rng, n_gen.min(split.general_train.len()))
        .copied()
        .collect();
    d_gen.sort_unstable();

    let mut targets = BTreeMap::new();
    for &id in d_weak.iter().chain(&d_rel).chain(&d_gen) {
        targets.insert(id, teacher_solve(suite.sample(id)?).response);
    }
    Ok(DatasetPartition {
        d_rl: Vec::new(),
        d_weak,
        d_rel,
        d_gen,
        targets,
    })
}

type SftBatch<'a> = Vec<(&'a crate::taskgen::SampleInstance, StructuredResponse)>;

fn sft_examples<'a>(
    suite: &'a SampleSet,
    ids: &[SampleId],
    targets: &BTreeMap<SampleId, StructuredResponse>,
) -> Result<SftBatch<'a>> {
    ids.iter()
        .map(|&id| {
            let target = targets
                .get(&id)
                .copied()
                .ok_or_else(|| DppoError::Contract(format!("no SFT target for sample {id}")))?;
            Ok((suite.sample(id)?, target))
        })
        .collect()
}

fn sft_minibatch(
    params: &mut PolicyParams,
    batch: &[(&crate::taskgen::SampleInstance, StructuredResponse)],
    lr: f64,
    loop_index: usize,
) -> Result<()> {
    let grad = sft_gradient(params, batch).map_err(in_phase(Phase::Sft, loop_index))?;
    if !grad.is_finite() {
        return Err(non_finite(
            Phase::Sft,
            loop_index,
            "SFT gradient not finite",
        ));
    }
    params.apply(&grad, -lr);
    params.step_count += 1;
    if !params.is_finite() {
        return Err(non_finite(
            Phase::Sft,
            loop_index,
            "SFT produced non-finite parameters",
        ));
    }
    Ok(())
}

/// `sft_epochs` shuffled passes of mini-batch SFT over `D_SFT`. Aborts when the
/// mean NLL rises more than 10% above its starting value.
pub fn sft_phase(
    params: PolicyParams,
    partition: &DatasetPartition,
    suite: &SampleSet,
    config: &LoopConfig,
    ctx: PhaseContext,
) -> Result<(PolicyParams, PhaseMetrics)> {
    let d_sft = partition.d_sft();
    let mut metrics = PhaseMetrics {
        d_weak: partition.d_weak.len(),
        d_rel: partition.d_rel.len(),
        d_gen: partition.d_gen.len(),
        ..Default::default()
    };
    if d_sft.is_empty() || config.sft_epochs == 0 {
        return Ok((params, metrics));
    }
    let examples = sft_examples(suite, &d_sft, &partition.targets)?;
    let initial = sft_loss(&params, &examples)?;
    metrics.nll_initial = Some(initial);

    let mut params = params;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut current = initial;
    for epoch in 0..config.sft_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            ctx.seed,
            &[STREAM_SHUFFLE_SFT, ctx.loop_index as u64, epoch as u64],
        ));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.sft_batch_size) {
            let batch: SftBatch<'_> = chunk.iter().map(|&i| examples[i]).collect();
            sft_minibatch(&mut params, &batch, config.lr_sft, ctx.loop_index)?;
            metrics.sft_steps += 1;
            metrics.usage.grad_evals += batch.len() as u64;
        }
        current = sft_loss(&params, &examples)?;
        if current > 1.1 * initial {
            return Err(DppoError::Divergence {
                loop_index: ctx.loop_index,
                initial,
                current,
            });
        }
    }
    metrics.nll_final = Some(current);
    Ok((params, metrics))
}

/// Receives each completed phase; used for checkpoints and progress output.
pub trait PhaseObserver {
    fn on_phase(&mut self, row: &HistoryRow, params: &PolicyParams) -> Result<()>;
}

impl<F> PhaseObserver for F
where
    F: FnMut(&HistoryRow, &PolicyParams) -> Result<()>,
{
    fn on_phase(&mut self, row: &HistoryRow, params: &PolicyParams) -> Result<()> {
        self(row, params)
    }
}

/// No-op observer.
pub struct Silent;

impl PhaseObserver for Silent {
    fn on_phase(&mut self, _: &HistoryRow, _: &PolicyParams) -> Result<()> {
        Ok(())
    }
}

/// Optional hooks for a metaloop or baseline run.
#[derive(Default)]
pub struct RunHooks<'o> {
    pub rollout_sink: Option<Box<dyn Write + Send>>,
    pub observer: Option<&'o mut dyn PhaseObserver>,
}

struct Recorder<'a, 'o> {
    config: &'a LoopConfig,
    suite: &'a SampleSet,
    split: &'a SuiteSplit,
    history: LoopHistory,
    cumulative: Budget,
    observer: Option<&'o mut dyn PhaseObserver>,
}

impl<'a, 'o> Recorder<'a, 'o> {
    fn new(
        config: &'a LoopConfig,
        suite: &'a SampleSet,
        split: &'a SuiteSplit,
        params: &PolicyParams,
        observer: Option<&'o mut dyn PhaseObserver>,
    ) -> Result<Self> {
        let history = LoopHistory {
            initial_heldout: evaluate(params, suite, &split.embodied_heldout, &config.reward)?,
            initial_general: evaluate(params, suite, &split.general_heldout, &config.reward)?
                .overall,
            rows: Vec::new(),
        };
        Ok(Self {
            config,
            suite,
            split,
            history,
            cumulative: Budget::default(),
            observer,
        })
    }

    fn record(
        &mut self,
        loop_index: usize,
        phase: Phase,
        params: &PolicyParams,
        metrics: PhaseMetrics,
    ) -> Result<()> {
        if !params.is_finite() {
            return Err(non_finite(
                phase,
                loop_index,
                "parameters not finite at phase end",
            ));
        }
        self.cumulative.rollouts += metrics.usage.rollouts;
        self.cumulative.grad_evals += metrics.usage.grad_evals;
        let row = HistoryRow {
            loop_index,
            phase,
            heldout: evaluate(
                params,
                self.suite,
                &self.split.embodied_heldout,
                &self.config.reward,
            )?,
            general: evaluate(
                params,
                self.suite,
                &self.split.general_heldout,
                &self.config.reward,
            )?
            .overall,
            metrics,
            cumulative: self.cumulative,
        };
        info!(
            loop_index,
            %phase,
            heldout = row.heldout.overall,
            general = row.general,
            "phase complete"
        );
        if let Some(obs) = self.observer.as_mut() {
            obs.on_phase(&row, params)?;
        }
        self.history.rows.push(row);
        Ok(())
    }
}

/// Runs the metaloop. Deterministic in `(config, suite, params, seed)`.
pub fn run_metaloop(
    config: &LoopConfig,
    suite: &SampleSet,
    params: PolicyParams,
    seed: u64,
) -> Result<(PolicyParams, LoopHistory)> {
    run_metaloop_with(config, suite, params, seed, RunHooks::default())
}

pub fn run_metaloop_with(
    config: &LoopConfig,
    suite: &SampleSet,
    params: PolicyParams,
    seed: u64,
    hooks: RunHooks<'_>,
) -> Result<(PolicyParams, LoopHistory)> {
    config.validate()?;
    check_shape(&params, suite)?;
    let split = SuiteSplit::new(suite, config.heldout_fraction, seed);
    let mut buffer = DifficultyBuffer::new(config.stagnation)?;
    if let Some(sink) = hooks.rollout_sink {
        buffer = buffer.with_sink(sink);
    }
    let mut recorder = Recorder::new(config, suite, &split, &params, hooks.observer)?;

    let mut params = params;
    for step in phase_schedule(config.loops, config.final_rl_phase) {
        let ctx = PhaseContext {
            loop_index: step.loop_index,
            seed,
        };
        match step.sigma {
            Phase::Rl => {
                let candidates = rl_candidates(config, suite, &split, step.loop_index);
                let (next, metrics) =
                    rl_phase(config, suite, &candidates, params, &mut buffer, ctx)?;
                params = next;
                recorder.record(step.loop_index, Phase::Rl, &params, metrics)?;
            }
            Phase::Sft => {
                let partition = build_sft_dataset(&buffer, suite, &split, config, ctx)?;
                let (next, metrics) = sft_phase(params, &partition, suite, config, ctx)?;
                params = next;
                recorder.record(step.loop_index, Phase::Sft, &params, metrics)?;
                reset(&mut buffer);
            }
        }
    }
    buffer.flush()?;
    Ok((params, recorder.history))
}

fn check_shape(params: &PolicyParams, suite: &SampleSet) -> Result<()> {
    if params.features() != suite.feature_dim() || params.answers() != suite.num_answers() {
        return Err(DppoError::Contract(format!(
            "params shape (F={}, K={}) does not match suite (F={}, K={})",
            params.features(),
            params.answers(),
            suite.feature_dim(),
            suite.num_answers()
        )));
    }
    if !params.is_finite() {
        return Err(non_finite(
            Phase::Rl,
            0,
            "initial parameters are not finite",
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    RlOnly,
    SftOnly,
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMode::RlOnly => "rl_only",
            BaselineMode::SftOnly => "sft_only",
        })
    }
}

/// Allowed relative gap between a baseline's consumption and its target.
pub const BUDGET_TOLERANCE: f64 = 0.01;

/// Runs a single-objective baseline until it has consumed `budget` units.
///
/// `rl_only` repeats rounds of diagnosis, rebalancing and up to `rl_epoch_cap`
/// GRPO epochs; `sft_only` runs teacher-target SFT over the whole embodied
/// training pool. One history row is written each time another `1/K` of the
/// budget has been spent.
pub fn run_baseline(
    mode: BaselineMode,
    config: &LoopConfig,
    suite: &SampleSet,
    params: PolicyParams,
    seed: u64,
    budget: u64,
) -> Result<(PolicyParams, LoopHistory)> {
    run_baseline_with(
        mode,
        config,
        suite,
        params,
        seed,
        budget,
        RunHooks::default(),
    )
}

pub fn run_baseline_with(
    mode: BaselineMode,
    config: &LoopConfig,
    suite: &SampleSet,
    params: PolicyParams,
    seed: u64,
    budget: u64,
    hooks: RunHooks<'_>,
) -> Result<(PolicyParams, LoopHistory)> {
    config.validate()?;
    check_shape(&params, suite)?;
    let split = SuiteSplit::new(suite, config.heldout_fraction, seed);
    let mut recorder = Recorder::new(config, suite, &split, &params, hooks.observer)?;
    let checkpoints: Vec<u64> = (1..=config.loops as u64)
        .map(|k| budget * k / config.loops as u64)
        .collect();

    let params = match mode {
        BaselineMode::SftOnly => sft_only(
            config,
            suite,
            &split,
            params,
            seed,
            &checkpoints,
            &mut recorder,
        )?,
        BaselineMode::RlOnly => {
            let mut buffer = DifficultyBuffer::new(config.stagnation)?;
            if let Some(sink) = hooks.rollout_sink {
                buffer = buffer.with_sink(sink);
            }
            rl_only(
                config,
                suite,
                &split,
                params,
                seed,
                &checkpoints,
                &mut buffer,
                &mut recorder,
            )?
        }
    };

    let used = recorder.cumulative.total();
    let gap = used.abs_diff(budget) as f64;
    if gap > BUDGET_TOLERANCE * budget as f64 {
        return Err(config_err(format!(
            "{mode} consumed {used} units against a budget of {budget} (more than 1% apart)"
        )));
    }
    Ok((params, recorder.history))
}

fn sft_only(
    config: &LoopConfig,
    suite: &SampleSet,
    split: &SuiteSplit,
    mut params: PolicyParams,
    seed: u64,
    checkpoints: &[u64],
    recorder: &mut Recorder<'_, '_>,
) -> Result<PolicyParams> {
    let targets: BTreeMap<SampleId, StructuredResponse> = split
        .embodied_train
        .iter()
        .map(|&id| Ok((id, teacher_solve(suite.sample(id)?).response)))
        .collect::<Result<_>>()?;
    let examples = sft_examples(suite, &split.embodied_train, &targets)?;
    let mut used = 0u64;
    let mut pending = PhaseMetrics::default();
    let mut next_row = 0;
    let mut epoch = 0u64;
    let mut order: Vec<usize> = (0..examples.len()).collect();

    while next_row < checkpoints.len() {
        if examples.is_empty() {
            // nothing to train on; emit the remaining rows
            recorder.record(
                next_row + 1,
                Phase::Sft,
                &params,
                std::mem::take(&mut pending),
            )?;
            next_row += 1;
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SHUFFLE_SFT, 0, epoch]));
        order.shuffle(&mut rng);
        epoch += 1;
        let mut start = 0;
        while start < order.len() && next_row < checkpoints.len() {
            let boundary = checkpoints[next_row];
            let room = boundary.saturating_sub(used) as usize;
            let take = config.sft_batch_size.min(order.len() - start).min(room);
            if take > 0 {
                let batch: SftBatch<'_> = order[start..start + take]
                    .iter()
                    .map(|&i| examples[i])
                    .collect();
                if config.lr_sft != 0.0 {
                    sft_minibatch(&mut params, &batch, config.lr_sft, next_row + 1)?;
                }
                start += take;
                used += take as u64;
                pending.sft_steps += 1;
                pending.usage.grad_evals += take as u64;
            }
            if used >= boundary {
                recorder.record(
                    next_row + 1,
                    Phase::Sft,
                    &params,
                    std::mem::take(&mut pending),
                )?;
                next_row += 1;
            }
        }
    }
    Ok(params)
}

#[allow(clippy::too_many_arguments)]
fn rl_only(
    config: &LoopConfig,
    suite: &SampleSet,
    split: &SuiteSplit,
    mut params: PolicyParams,
    seed: u64,
    checkpoints: &[u64],
    buffer: &mut DifficultyBuffer,
    recorder: &mut Recorder<'_, '_>,
) -> Result<PolicyParams> {
    let candidates = split.embodied_train.clone();
    buffer.register(candidates.iter().filter_map(|&id| suite.get(id)));
    let total = *checkpoints.last().unwrap_or(&0);
    let mut used = 0u64;
    let mut next_row = 0;
    let mut pending = PhaseMetrics::default();
    let mut round = 0usize;
    let mut d_rl: Vec<SampleId> = Vec::new();

    while next_row < checkpoints.len() {
        round += 1;
        let ctx = PhaseContext {
            loop_index: round,
            seed,
        };
        let mut engine = RlEngine::new(config, suite, params, ctx);
        let remaining = total - used;
        let mut progressed = false;
        if engine.diagnosis_cost(candidates.len()) <= remaining {
            if round > 1 {
                reset(buffer);
            }
            engine.diagnose(buffer, &candidates)?;
            d_rl = rebalance(buffer);
            pending.d_rl = d_rl.len();
            progressed = true;
        }
        for epoch in 1..=config.rl_epoch_cap {
            if d_rl.is_empty() {
                break;
            }
            // stop at the next row boundary so rows land on budget fractions
            let boundary = checkpoints[next_row];
            let limit = boundary - used;
            let before = engine.usage.total();
            let more = engine.epoch(buffer, &d_rl, epoch, Some(limit))?;
            progressed |= engine.usage.total() > before;
            pending.rl_epochs += 1;
            if !more || engine.usage.total() >= limit {
                break;
            }
        }
        used += engine.usage.total();
        pending.grpo_steps += engine.grpo_steps;
        pending.usage.rollouts += engine.usage.rollouts;
        pending.usage.grad_evals += engine.usage.grad_evals;
        params = engine.params;

        let boundary = checkpoints[next_row];
        let stalled = !progressed;
        // a boundary is reached once less than one sample's worth of work remains
        let min_cost = 2 * config.rollouts_per_sample as u64;
        if used + min_cost > boundary || stalled {
            pending.sr_means = sr_means(buffer);
            recorder.record(
                next_row + 1,
                Phase::Rl,
                &params,
                std::mem::take(&mut pending),
            )?;
            next_row += 1;
            if stalled && next_row < checkpoints.len() && d_rl.is_empty() {
                // nothing trainable and no budget for a fresh diagnosis
                while next_row < checkpoints.len() {
                    recorder.record(next_row + 1, Phase::Rl, &params, PhaseMetrics::default())?;
                    next_row += 1;
                }
            }
        }
    }
    buffer.flush()?;
    Ok(params)
}

/// Base-model pretraining on the general pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.5,
            batch_size: 32,
        }
    }
}

/// Starting policy: zero parameters fitted by SFT on the general training
/// pool, so it is competent on general data before any embodied training.
pub fn pretrain_base(
    suite: &SampleSet,
    split: &SuiteSplit,
    base: &BaseConfig,
    seed: u64,
) -> Result<PolicyParams> {
    if base.batch_size == 0 || !base.lr.is_finite() {
        return Err(config_err(
            "base.batch_size must be positive and base.lr finite",
        ));
    }
    let mut params = PolicyParams::for_suite(suite);
    let targets: BTreeMap<SampleId, StructuredResponse> = split
        .general_train
        .iter()
        .map(|&id| Ok((id, teacher_solve(suite.sample(id)?).response)))
        .collect::<Result<_>>()?;
    let examples = sft_examples(suite, &split.general_train, &targets)?;
    if examples.is_empty() {
        return Ok(params);
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..base.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_BASE, epoch as u64]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(base.batch_size) {
            let batch: SftBatch<'_> = chunk.iter().map(|&i| examples[i]).collect();
            sft_minibatch(&mut params, &batch, base.lr, 0)?;
        }
    }
    params.step_count = 0;
    Ok(params)
}
