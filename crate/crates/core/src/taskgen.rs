//! Synthetic multi-skill task suite and its ground-truth teacher.
//!
//! Every sample is a K-way decision over a feature vector. A noisy "cue" marks
//! one of K positions; the gold answer is that position passed through a
//! skill-specific permutation. General-pool samples and "easy" skills use the
//! identity permutation, so a model pretrained on general data already solves
//! easy skills and is confidently wrong on the others.
//!
//! Feature layout (length `6 + 2 + K + 6K + G`):
//!
//! | block            | width | content                                              |
//! |------------------|-------|------------------------------------------------------|
//! | skill one-hot    | 6     | indicator of the sample's [`SkillDimension`]         |
//! | general flag     | 1     | 1 for general-pool samples                           |
//! | difficulty       | 1     | latent difficulty in `[0, 1]`                        |
//! | shared cue       | K     | cue vector, present for every sample                 |
//! | skill cues       | 6K    | cue vector copied into the sample's skill slot only  |
//! | noise            | G     | independent standard normals                         |

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, DppoError, Result};
use crate::policy::{Answer, StructuredResponse};

pub type SampleId = u64;

/// The six reward objectives of the rule-based reward table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SkillDimension {
    AffordanceReasoning,
    CountingDistance,
    CausalTemporal,
    TaskSuccessEval,
    TaskPlanning,
    TaskPrediction,
}

impl SkillDimension {
    pub const COUNT: usize = 6;

    pub const ALL: [SkillDimension; Self::COUNT] = [
        SkillDimension::AffordanceReasoning,
        SkillDimension::CountingDistance,
        SkillDimension::CausalTemporal,
        SkillDimension::TaskSuccessEval,
        SkillDimension::TaskPlanning,
        SkillDimension::TaskPrediction,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Counting/distance estimation is scored with the numeric reward; all
    /// other skills are choice-scored.
    pub fn is_numeric(self) -> bool {
        matches!(self, SkillDimension::CountingDistance)
    }

    pub fn name(self) -> &'static str {
        match self {
            SkillDimension::AffordanceReasoning => "AffordanceReasoning",
            SkillDimension::CountingDistance => "CountingDistance",
            SkillDimension::CausalTemporal => "CausalTemporal",
            SkillDimension::TaskSuccessEval => "TaskSuccessEval",
            SkillDimension::TaskPlanning => "TaskPlanning",
            SkillDimension::TaskPrediction => "TaskPrediction",
        }
    }
}

impl fmt::Display for SkillDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SkillDimension {
    type Err = DppoError;

    fn from_str(s: &str) -> Result<Self> {
        SkillDimension::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config_err(format!("unknown skill dimension `{s}`")))
    }
}

/// Correct answer of a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Gold {
    Choice(usize),
    /// Numeric target. `bin` is the candidate whose value lies closest to
    /// `target`; `tolerance` is the width of the reward band.
    Numeric {
        bin: usize,
        target: f64,
        tolerance: f64,
    },
}

impl Gold {
    /// Index of the gold candidate.
    pub fn index(&self) -> usize {
        match *self {
            Gold::Choice(i) => i,
            Gold::Numeric { bin, .. } => bin,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleInstance {
    pub id: SampleId,
    pub skill: SkillDimension,
    pub difficulty: f64,
    pub is_general: bool,
    pub gold: Gold,
    pub features: Vec<f64>,
    /// Candidate values. Choice skills use the option ids `0..K`; the numeric
    /// skill uses its bin centres.
    pub answers: Vec<f64>,
}

impl SampleInstance {
    pub fn num_answers(&self) -> usize {
        self.answers.len()
    }

    /// Checks `0 <= gold < K`, `K >= 2`, `difficulty in [0,1]`, finite features.
    pub fn validate(&self) -> Result<()> {
        let k = self.answers.len();
        if k < 2 {
            return Err(config_err(format!("sample {}: K = {k} < 2", self.id)));
        }
        if self.gold.index() >= k {
            return Err(config_err(format!("sample {}: gold out of range", self.id)));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(config_err(format!(
                "sample {}: difficulty out of [0,1]",
                self.id
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(config_err(format!(
                "sample {}: non-finite feature",
                self.id
            )));
        }
        match (&self.gold, self.skill.is_numeric()) {
            (Gold::Choice(_), false) | (Gold::Numeric { .. }, true) => Ok(()),
            _ => Err(config_err(format!(
                "sample {}: gold kind does not match skill {}",
                self.id, self.skill
            ))),
        }
    }
}

/// Reference solution produced by the teacher oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherResponse {
    pub sample_id: SampleId,
    pub response: StructuredResponse,
}

/// Generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Number of candidate answers K.
    pub answers: usize,
    /// Number of pure-noise feature coordinates G.
    pub noise_dims: usize,
    pub samples_per_skill: usize,
    /// Per-skill count overrides, keyed by skill name.
    pub counts: std::collections::BTreeMap<SkillDimension, usize>,
    /// Fraction of the whole suite flagged as general-pool data.
    pub general_fraction: f64,
    /// Cue magnitude at difficulty 0.
    pub signal: f64,
    /// Standard deviation of the per-coordinate cue noise.
    pub cue_noise: f64,
    pub difficulty_min: f64,
    pub difficulty_max: f64,
    /// Skills that share the general pool's identity answer mapping.
    pub easy_skills: Vec<SkillDimension>,
    /// Scale of the shared cue block on embodied samples.
    pub shared_cue_weight: f64,
    /// Spacing of numeric bin centres; also the numeric tolerance band.
    pub bin_width: f64,
    /// Numeric targets are jittered uniformly by up to this fraction of a bin.
    pub numeric_jitter: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            answers: 4,
            noise_dims: 4,
            samples_per_skill: 200,
            counts: Default::default(),
            general_fraction: 0.25,
            signal: 3.0,
            cue_noise: 1.0,
            difficulty_min: 0.0,
            difficulty_max: 1.0,
            easy_skills: vec![SkillDimension::TaskSuccessEval],
            shared_cue_weight: 3.0,
            bin_width: 1.0,
            numeric_jitter: 0.1,
            seed: 7,
        }
    }
}

impl SuiteConfig {
    pub fn feature_dim(&self) -> usize {
        feature_dim(self.answers, self.noise_dims)
    }

    pub fn count_for(&self, skill: SkillDimension) -> usize {
        self.counts
            .get(&skill)
            .copied()
            .unwrap_or(self.samples_per_skill)
    }

    pub fn validate(&self) -> Result<()> {
        if self.answers < 2 {
            return Err(config_err(format!(
                "suite.answers = {} (K must be >= 2)",
                self.answers
            )));
        }
        if self.feature_dim() < 2 {
            return Err(config_err("suite feature dimension F < 2"));
        }
        for skill in SkillDimension::ALL {
            if self.count_for(skill) == 0 {
                return Err(config_err(format!("suite count for {skill} is zero")));
            }
        }
        if !(0.0..=1.0).contains(&self.general_fraction) {
            return Err(config_err("suite.general_fraction must lie in [0, 1]"));
        }
        if !(self.signal.is_finite() && self.cue_noise.is_finite() && self.cue_noise >= 0.0) {
            return Err(config_err(
                "suite.signal / suite.cue_noise must be finite, noise >= 0",
            ));
        }
        if !(0.0..=0.1).contains(&self.difficulty_min)
            || !(0.9..=1.0).contains(&self.difficulty_max)
        {
            return Err(config_err(
                "suite difficulty range must cover [0.1, 0.9] within [0, 1]",
            ));
        }
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) {
            return Err(config_err("suite.bin_width must be positive"));
        }
        if !(0.0..0.5).contains(&self.numeric_jitter) {
            return Err(config_err("suite.numeric_jitter must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

pub fn feature_dim(answers: usize, noise_dims: usize) -> usize {
    SkillDimension::COUNT + 2 + answers * (1 + SkillDimension::COUNT) + noise_dims
}

/// Offsets of the feature blocks for a given K.
#[derive(Clone, Copy, Debug)]
pub struct FeatureLayout {
    pub answers: usize,
    pub noise_dims: usize,
}

impl FeatureLayout {
    pub const GENERAL: usize = SkillDimension::COUNT;
    pub const DIFFICULTY: usize = SkillDimension::COUNT + 1;
    pub const SHARED_CUE: usize = SkillDimension::COUNT + 2;

    pub fn skill_cue(&self, skill: SkillDimension) -> usize {
        Self::SHARED_CUE + self.answers * (1 + skill.index())
    }

    pub fn noise(&self) -> usize {
        Self::SHARED_CUE + self.answers * (1 + SkillDimension::COUNT)
    }

    pub fn dim(&self) -> usize {
        feature_dim(self.answers, self.noise_dims)
    }
}

/// Immutable collection of samples; ids are dense `0..len`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    feature_dim: usize,
    answers: usize,
    samples: Vec<SampleInstance>,
}

impl SampleSet {
    pub fn new(feature_dim: usize, answers: usize, samples: Vec<SampleInstance>) -> Result<Self> {
        for (pos, s) in samples.iter().enumerate() {
            if s.id != pos as SampleId {
                return Err(config_err(format!(
                    "sample ids must be dense; found {} at {pos}",
                    s.id
                )));
            }
            if s.features.len() != feature_dim || s.answers.len() != answers {
                return Err(config_err(format!("sample {} has the wrong shape", s.id)));
            }
            s.validate()?;
        }
        Ok(Self {
            feature_dim,
            answers,
            samples,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_answers(&self) -> usize {
        self.answers
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: SampleId) -> Option<&SampleInstance> {
        self.samples.get(id as usize)
    }

    pub fn sample(&self, id: SampleId) -> Result<&SampleInstance> {
        self.get(id).ok_or(DppoError::UnknownSample(id))
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SampleInstance> {
        self.samples.iter()
    }

    pub fn samples(&self) -> &[SampleInstance] {
        &self.samples
    }
}

impl<'a> IntoIterator for &'a SampleSet {
    type Item = &'a SampleInstance;
    type IntoIter = std::slice::Iter<'a, SampleInstance>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

/// Cyclic shift applied to the cue position to obtain the gold answer.
pub fn answer_shift(skill: SkillDimension, is_general: bool, config: &SuiteConfig) -> usize {
    if is_general || config.easy_skills.contains(&skill) {
        0
    } else {
        1 + skill.index() % (config.answers - 1)
    }
}

pub fn generate_suite(config: &SuiteConfig, seed: u64) -> Result<SampleSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.answers;
    let layout = FeatureLayout {
        answers: k,
        noise_dims: config.noise_dims,
    };

    // (skill, difficulty) in generation order; difficulties are stratified per
    // skill so each skill covers the whole configured range.
    let mut plan: Vec<(SkillDimension, f64)> = Vec::new();
    for skill in SkillDimension::ALL {
        let n = config.count_for(skill);
        let mut slots: Vec<usize> = (0..n).collect();
        slots.shuffle(&mut rng);
        let span = config.difficulty_max - config.difficulty_min;
        for slot in slots {
            let u: f64 = rng.random();
            let q = (slot as f64 + u) / n as f64;
            plan.push((skill, config.difficulty_min + span * q));
        }
    }

    let total = plan.len();
    let n_general = (config.general_fraction * total as f64).floor() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let mut general = vec![false; total];
    for &i in &order[..n_general] {
        general[i] = true;
    }

    let mut samples = Vec::with_capacity(total);
    for (i, &(skill, difficulty)) in plan.iter().enumerate() {
        let is_general = general[i];
        let cue_pos = rng.random_range(0..k);
        let strength = config.signal * (1.0 - difficulty);
        let cue: Vec<f64> = (0..k)
            .map(|j| {
                let z: f64 = rng.sample(StandardNormal);
                let base = if j == cue_pos { strength } else { 0.0 };
                base + config.cue_noise * z
            })
            .collect();

        let mut features = vec![0.0; layout.dim()];
        features[skill.index()] = 1.0;
        if is_general {
            features[FeatureLayout::GENERAL] = 1.0;
        }
        features[FeatureLayout::DIFFICULTY] = difficulty;
        let shared_scale = if is_general {
            1.0
        } else {
            config.shared_cue_weight
        };
        for j in 0..k {
            features[FeatureLayout::SHARED_CUE + j] = shared_scale * cue[j];
            if !is_general {
                features[layout.skill_cue(skill) + j] = cue[j];
            }
        }
        for g in 0..config.noise_dims {
            features[layout.noise() + g] = rng.sample(StandardNormal);
        }

        let gold_index = (cue_pos + answer_shift(skill, is_general, config)) % k;
        let (gold, answers) = if skill.is_numeric() {
            let centres: Vec<f64> = (0..k)
                .map(|a| (a as f64 + 1.0) * config.bin_width)
                .collect();
            let jitter = rng.random_range(-1.0..=1.0) * config.numeric_jitter * config.bin_width;
            let gold = Gold::Numeric {
                bin: gold_index,
                target: centres[gold_index] + jitter,
                tolerance: config.bin_width,
            };
            (gold, centres)
        } else {
            (Gold::Choice(gold_index), (0..k).map(|a| a as f64).collect())
        };

        samples.push(SampleInstance {
            id: i as SampleId,
            skill,
            difficulty,
            is_general,
            gold,
            features,
            answers,
        });
    }

    SampleSet::new(layout.dim(), k, samples)
}

/// Ground-truth oracle: formatted response carrying the gold answer.
pub fn teacher_solve(sample: &SampleInstance) -> TeacherResponse {
    let answer = match sample.gold {
        Gold::Choice(i) => Answer::Choice(i),
        Gold::Numeric { target, .. } => Answer::Numeric(target),
    };
    TeacherResponse {
        sample_id: sample.id,
        response: StructuredResponse {
            format: true,
            answer,
        },
    }
}

/// Embodied samples from `pool` whose skill is one of `weak_skills`.
///
/// The caller removes ids it wants excluded (e.g. the weak set itself) before
/// passing the pool in. An empty skill set yields an empty result.
pub fn related_samples<'a, I>(pool: I, weak_skills: &BTreeSet<SkillDimension>) -> Vec<SampleId>
where
    I: IntoIterator<Item = &'a SampleInstance>,
{
    if weak_skills.is_empty() {
        return Vec::new();
    }
    pool.into_iter()
        .filter(|s| !s.is_general && weak_skills.contains(&s.skill))
        .map(|s| s.id)
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SuiteHeader {
    format: String,
    version: u32,
    feature_dim: usize,
    answers: usize,
    count: usize,
}

const SUITE_FORMAT: &str = "dppo-suite";

/// Writes a header line followed by one JSON record per sample.
pub fn write_suite<W: Write>(suite: &SampleSet, mut out: W) -> Result<()> {
    let header = SuiteHeader {
        format: SUITE_FORMAT.to_string(),
        version: 1,
        feature_dim: suite.feature_dim,
        answers: suite.answers,
        count: suite.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for s in suite {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_suite<R: BufRead>(input: R) -> Result<SampleSet> {
    let mut lines = input.lines();
    let header_line = lines.next().ok_or(DppoError::Parse {
        line: 1,
        msg: "empty suite file".into(),
    })??;
    let header: SuiteHeader = serde_json::from_str(&header_line).map_err(|e| DppoError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.format != SUITE_FORMAT {
        return Err(DppoError::Parse {
            line: 1,
            msg: format!("not a suite file (format `{}`)", header.format),
        });
    }
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SampleInstance = serde_json::from_str(&line).map_err(|e| DppoError::Parse {
            line: i + 2,
            msg: e.to_string(),
        })?;
        samples.push(s);
    }
    if samples.len() != header.count {
        return Err(DppoError::Parse {
            line: samples.len() + 1,
            msg: format!("expected {} samples, found {}", header.count, samples.len()),
        });
    }
    SampleSet::new(header.feature_dim, header.answers, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SuiteConfig {
        SuiteConfig {
            samples_per_skill: 10,
            ..SuiteConfig::default()
        }
    }

    #[test]
    fn counts_follow_config() {
        let suite = generate_suite(&small_config(), 7).unwrap();
        assert_eq!(suite.len(), 60);
        for skill in SkillDimension::ALL {
            assert_eq!(suite.iter().filter(|s| s.skill == skill).count(), 10);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_suite(&small_config(), 7).unwrap();
        let b = generate_suite(&small_config(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_suite(&small_config(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn general_fraction_is_floored() {
        let mut cfg = small_config();
        cfg.counts = SkillDimension::ALL
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, if i < 2 { 34 } else { 33 }))
            .collect();
        cfg.general_fraction = 0.25;
        let suite = generate_suite(&cfg, 3).unwrap();
        assert_eq!(suite.len(), 200);
        assert_eq!(suite.iter().filter(|s| s.is_general).count(), 50);
    }

    #[test]
    fn difficulty_spans_range() {
        let suite = generate_suite(&small_config(), 11).unwrap();
        let lo = suite
            .iter()
            .map(|s| s.difficulty)
            .fold(f64::INFINITY, f64::min);
        let hi = suite
            .iter()
            .map(|s| s.difficulty)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= 0.1 && hi >= 0.9, "range [{lo}, {hi}]");
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small_config();
        cfg.answers = 1;
        assert!(matches!(generate_suite(&cfg, 0), Err(DppoError::Config(_))));
        let mut cfg = small_config();
        cfg.counts.insert(SkillDimension::TaskPlanning, 0);
        assert!(matches!(generate_suite(&cfg, 0), Err(DppoError::Config(_))));
        let mut cfg = small_config();
        cfg.samples_per_skill = 0;
        assert!(generate_suite(&cfg, 0).is_err());
    }

    #[test]
    fn teacher_returns_gold() {
        let suite = generate_suite(&small_config(), 5).unwrap();
        for s in &suite {
            let t = teacher_solve(s);
            assert!(t.response.format);
            match (&s.gold, t.response.answer) {
                (Gold::Choice(g), Answer::Choice(a)) => assert_eq!(*g, a),
                (Gold::Numeric { target, .. }, Answer::Numeric(v)) => assert_eq!(*target, v),
                other => panic!("kind mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn related_samples_filters_by_skill() {
        let mut cfg = small_config();
        cfg.general_fraction = 0.0;
        let suite = generate_suite(&cfg, 1).unwrap();
        let weak: BTreeSet<_> = [SkillDimension::TaskPlanning].into();
        let rel = related_samples(&suite, &weak);
        assert_eq!(rel.len(), 10);
        assert!(rel
            .iter()
            .all(|&id| suite.get(id).unwrap().skill == SkillDimension::TaskPlanning));

        let all: BTreeSet<_> = SkillDimension::ALL.into();
        assert_eq!(related_samples(&suite, &all).len(), suite.len());
        assert!(related_samples(&suite, &BTreeSet::new()).is_empty());
    }

    #[test]
    fn related_samples_skips_general_pool() {
        let suite = generate_suite(&small_config(), 2).unwrap();
        let all: BTreeSet<_> = SkillDimension::ALL.into();
        let rel = related_samples(&suite, &all);
        let embodied = suite.iter().filter(|s| !s.is_general).count();
        assert_eq!(rel.len(), embodied);
    }

    #[test]
    fn suite_round_trips_bit_exactly() {
        let suite = generate_suite(&small_config(), 9).unwrap();
        let mut buf = Vec::new();
        write_suite(&suite, &mut buf).unwrap();
        let back = read_suite(buf.as_slice()).unwrap();
        assert_eq!(suite, back);
        let mut again = Vec::new();
        write_suite(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn truncated_suite_file_is_rejected() {
        let suite = generate_suite(&small_config(), 9).unwrap();
        let mut buf = Vec::new();
        write_suite(&suite, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(read_suite(cut.as_bytes()).is_err());
    }
}
