//! Difficulty-aware rollout bookkeeping.
//!
//! The buffer accumulates rollout outcomes per sample, derives the success
//! rate `S_R`, the change signal `Delta` against the previous round and the
//! stagnation score `S_S = 1 - 4 S_R (1 - S_R) Delta`. It also builds the RL
//! training set (drop mastered samples, cap complete failures) and the weak
//! set handed to SFT.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, DppoError, Result};
use crate::policy::StructuredResponse;
use crate::rewards::RewardBreakdown;
use crate::taskgen::{SampleId, SampleInstance, SkillDimension};

/// Lower/upper (exclusive) bounds for the change scale epsilon.
pub const EPSILON_RANGE: (f64, f64) = (0.05, 0.2);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagnationConfig {
    pub epsilon: f64,
    pub threshold: f64,
}

impl Default for StagnationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            threshold: 0.7,
        }
    }
}

impl StagnationConfig {
    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        if !self.threshold.is_finite() {
            return Err(config_err("stagnation.threshold must be finite"));
        }
        Ok(())
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > EPSILON_RANGE.0 && epsilon < EPSILON_RANGE.1 {
        Ok(())
    } else {
        Err(config_err(format!(
            "stagnation.epsilon = {epsilon} outside ({}, {})",
            EPSILON_RANGE.0, EPSILON_RANGE.1
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub sample_id: SampleId,
    #[serde(rename = "loop")]
    pub loop_index: usize,
    /// Measurement window within the loop (0 = diagnosis pass).
    pub epoch: usize,
    pub response: StructuredResponse,
    #[serde(flatten)]
    pub reward: RewardBreakdown,
    pub success: bool,
    pub seed: u64,
    /// Monotonic counter assigned by the buffer on append.
    pub counter: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub sample_id: SampleId,
    pub skill: SkillDimension,
    pub rollouts: u32,
    pub successes: u32,
    pub s_r: f64,
    pub s_r_prev: Option<f64>,
    pub delta: f64,
    pub s_s: f64,
}

impl SampleStats {
    fn fresh(sample_id: SampleId, skill: SkillDimension, s_r_prev: Option<f64>) -> Self {
        Self {
            sample_id,
            skill,
            rollouts: 0,
            successes: 0,
            s_r: 0.0,
            s_r_prev,
            delta: 1.0,
            s_s: 1.0,
        }
    }

    fn refresh(&mut self, epsilon: f64) {
        if self.rollouts == 0 {
            return;
        }
        self.s_r = self.successes as f64 / self.rollouts as f64;
        self.delta = delta_unchecked(self.s_r, self.s_r_prev, epsilon);
        self.s_s = sample_stagnation(self.s_r, self.delta);
    }
}

/// `S_R = successes / T`.
pub fn success_rate(stats: &SampleStats) -> Result<f64> {
    if stats.rollouts == 0 {
        return Err(DppoError::UndefinedStat(format!(
            "sample {} has no rollouts this round",
            stats.sample_id
        )));
    }
    Ok(stats.successes as f64 / stats.rollouts as f64)
}

/// `min(1, |S_R - S_R_prev| / epsilon)`; 1 when there is no previous round.
pub fn delta(s_r: f64, s_r_prev: Option<f64>, epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    Ok(delta_unchecked(s_r, s_r_prev, epsilon))
}

fn delta_unchecked(s_r: f64, s_r_prev: Option<f64>, epsilon: f64) -> f64 {
    match s_r_prev {
        None => 1.0,
        Some(prev) => ((s_r - prev).abs() / epsilon).min(1.0),
    }
}

/// `S_S = 1 - 4 S_R (1 - S_R) Delta`.
pub fn sample_stagnation(s_r: f64, delta: f64) -> f64 {
    1.0 - 4.0 * s_r * (1.0 - s_r) * delta
}

/// Mean per-sample stagnation over a task's samples.
pub fn task_stagnation<'a, I>(stats: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a SampleStats>,
{
    let (sum, n) = stats
        .into_iter()
        .fold((0.0, 0usize), |(s, n), st| (s + st.s_s, n + 1));
    if n == 0 {
        return Err(DppoError::UndefinedStat("task has no samples".into()));
    }
    Ok(sum / n as f64)
}

pub fn should_stop(task_stagnation: f64, threshold: f64) -> bool {
    task_stagnation >= threshold
}

/// Per-round rollout buffer.
///
/// Appends go through `&mut self`; with an attached sink every record is also
/// written as one JSON line.
pub struct DifficultyBuffer {
    epsilon: f64,
    threshold: f64,
    known: BTreeMap<SampleId, SkillDimension>,
    stats: BTreeMap<SampleId, SampleStats>,
    records: Vec<RolloutRecord>,
    previous: BTreeMap<SampleId, f64>,
    counter: u64,
    sink: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for DifficultyBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DifficultyBuffer")
            .field("epsilon", &self.epsilon)
            .field("threshold", &self.threshold)
            .field("samples", &self.stats.len())
            .field("records", &self.records.len())
            .field("counter", &self.counter)
            .finish()
    }
}

impl DifficultyBuffer {
    pub fn new(config: StagnationConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            epsilon: config.epsilon,
            threshold: config.threshold,
            known: BTreeMap::new(),
            stats: BTreeMap::new(),
            records: Vec::new(),
            previous: BTreeMap::new(),
            counter: 0,
            sink: None,
        })
    }

    pub fn with_sink(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Makes samples eligible for [`log_rollout`](Self::log_rollout).
    pub fn register<'a, I>(&mut self, samples: I)
    where
        I: IntoIterator<Item = &'a SampleInstance>,
    {
        for s in samples {
            self.known.insert(s.id, s.skill);
        }
    }

    pub fn log_rollout(&mut self, mut record: RolloutRecord) -> Result<()> {
        let skill = *self
            .known
            .get(&record.sample_id)
            .ok_or(DppoError::UnknownSample(record.sample_id))?;
        record.counter = self.counter;
        self.counter += 1;
        if let Some(sink) = self.sink.as_mut() {
            serde_json::to_writer(&mut *sink, &record)?;
            sink.write_all(b"\n")?;
        }
        let prev = self.previous.get(&record.sample_id).copied();
        let st = self
            .stats
            .entry(record.sample_id)
            .or_insert_with(|| SampleStats::fresh(record.sample_id, skill, prev));
        st.rollouts += 1;
        if record.success {
            st.successes += 1;
        }
        st.refresh(self.epsilon);
        self.records.push(record);
        Ok(())
    }

    /// Starts a new measurement window for a sample; the next logged rollouts
    /// replace its current success counts. `S_R_prev` is kept.
    pub fn restart_window(&mut self, id: SampleId) {
        if let Some(st) = self.stats.get_mut(&id) {
            st.rollouts = 0;
            st.successes = 0;
        }
    }

    pub fn stats(&self) -> &BTreeMap<SampleId, SampleStats> {
        &self.stats
    }

    pub fn stats_for(&self, id: SampleId) -> Option<&SampleStats> {
        self.stats.get(&id)
    }

    pub fn records(&self) -> &[RolloutRecord] {
        &self.records
    }

    /// Success rates carried over from the previous round.
    pub fn previous_rates(&self) -> &BTreeMap<SampleId, f64> {
        &self.previous
    }

    /// Task stagnation per skill, restricted to `ids`. Skills with no listed
    /// sample are absent from the result.
    pub fn task_stagnation_by_skill(
        &self,
        ids: &BTreeSet<SampleId>,
    ) -> BTreeMap<SkillDimension, f64> {
        let mut groups: BTreeMap<SkillDimension, Vec<&SampleStats>> = BTreeMap::new();
        for id in ids {
            if let Some(st) = self.stats.get(id) {
                groups.entry(st.skill).or_default().push(st);
            }
        }
        groups
            .into_iter()
            .filter_map(|(skill, v)| task_stagnation(v).ok().map(|s| (skill, s)))
            .collect()
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(sink) = self.sink.as_mut() {
            sink.flush()?;
        }
        Ok(())
    }

    /// Tabular export of the current per-sample statistics.
    pub fn write_stats_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            sample_id: SampleId,
            skill: SkillDimension,
            rollouts: u32,
            successes: u32,
            s_r: f64,
            s_r_prev: Option<f64>,
            delta: f64,
            s_s: f64,
        }
        let mut w = csv::Writer::from_writer(out);
        for st in self.stats.values() {
            w.serialize(Row {
                sample_id: st.sample_id,
                skill: st.skill,
                rollouts: st.rollouts,
                successes: st.successes,
                s_r: st.s_r,
                s_r_prev: st.s_r_prev,
                delta: st.delta,
                s_s: st.s_s,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// RL training ids: mastered samples dropped, complete failures capped at the
/// number of partial successes (lowest ids kept). Sorted ascending.
pub fn rebalance(buffer: &DifficultyBuffer) -> Vec<SampleId> {
    let mut partial = Vec::new();
    let mut failed = Vec::new();
    for st in buffer.stats.values() {
        debug_assert!(st.rollouts > 0, "rebalance on a sample without rollouts");
        if st.rollouts == 0 {
            continue;
        }
        if st.s_r == 0.0 {
            failed.push(st.sample_id);
        } else if st.s_r < 1.0 {
            partial.push(st.sample_id);
        }
    }
    failed.truncate(partial.len());
    let mut out = partial;
    out.extend(failed);
    out.sort_unstable();
    out
}

/// Samples whose success rate is 0 at the end of the round.
pub fn collect_weak(buffer: &DifficultyBuffer) -> Vec<SampleId> {
    buffer
        .stats
        .values()
        .filter(|st| st.rollouts > 0 && st.s_r == 0.0)
        .map(|st| st.sample_id)
        .collect()
}

/// Clears the round. Current success rates become next round's `S_R_prev`;
/// records already written to the sink stay there.
pub fn reset(buffer: &mut DifficultyBuffer) {
    for (id, st) in &buffer.stats {
        if st.rollouts > 0 {
            buffer.previous.insert(*id, st.s_r);
        }
    }
    buffer.stats.clear();
    buffer.records.clear();
}

/// Recomputes each sample's latest-window success rate from raw records.
pub fn recompute_success_rates(records: &[RolloutRecord]) -> BTreeMap<SampleId, f64> {
    // latest (loop, epoch) per sample, then count inside that window
    let mut latest: BTreeMap<SampleId, (usize, usize, u64)> = BTreeMap::new();
    for r in records {
        let e = latest
            .entry(r.sample_id)
            .or_insert((r.loop_index, r.epoch, r.counter));
        if r.counter >= e.2 {
            *e = (r.loop_index, r.epoch, r.counter);
        }
    }
    let mut counts: BTreeMap<SampleId, (u32, u32)> = BTreeMap::new();
    for r in records {
        let (l, ep, _) = latest[&r.sample_id];
        if r.loop_index == l && r.epoch == ep {
            let c = counts.entry(r.sample_id).or_default();
            c.0 += 1;
            c.1 += u32::from(r.success);
        }
    }
    counts
        .into_iter()
        .map(|(id, (n, s))| (id, s as f64 / n as f64))
        .collect()
}

/// Reads a rollout log. A trailing partial line (interrupted append) is
/// ignored; any other malformed line is an error.
pub fn read_rollout_log<R: BufRead>(mut input: R) -> Result<Vec<RolloutRecord>> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RolloutRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => {
                return Err(DppoError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}
