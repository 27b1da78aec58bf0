//! Numerical checks of the unified preference-learning view.
//!
//! Trajectories are single structured responses, so a trajectory's
//! log-probability is [`log_prob`]. Implicit rewards are policy log-ratios
//! scaled by `beta`; ranked lists are scored with a Plackett-Luce model over
//! those rewards, and an expert trajectory is scored by its log-likelihood.

use std::io::Write;

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, DppoError, Result};
use crate::policy::{
    accumulate_grad_log_prob, log_prob, sample_response, sft_gradient, GradientVector,
    PolicyParams, StructuredResponse,
};
use crate::taskgen::{generate_suite, teacher_solve, SampleInstance, SuiteConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImplicitRewardConfig {
    pub beta: f64,
}

impl Default for ImplicitRewardConfig {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

impl ImplicitRewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(config_err(format!(
                "beta = {} must be finite and positive",
                self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PreferenceSample<'a> {
    ExpertTrajectory {
        sample: &'a SampleInstance,
        response: StructuredResponse,
    },
    /// Responses in preference order, best first.
    RankedList {
        sample: &'a SampleInstance,
        ranking: Vec<StructuredResponse>,
    },
}

impl PreferenceSample<'_> {
    pub fn validate(&self) -> Result<()> {
        match self {
            PreferenceSample::ExpertTrajectory { .. } => Ok(()),
            PreferenceSample::RankedList { sample, ranking } if ranking.len() < 2 => {
                Err(contract_err(format!(
                    "ranked list for sample {} has {} entries (need >= 2)",
                    sample.id,
                    ranking.len()
                )))
            }
            PreferenceSample::RankedList { .. } => Ok(()),
        }
    }
}

fn finite_log_prob(
    params: &PolicyParams,
    sample: &SampleInstance,
    response: &StructuredResponse,
) -> Result<f64> {
    let lp = log_prob(params, sample, response)?;
    if !lp.is_finite() {
        return Err(DppoError::NonFinite {
            phase: "prefcheck".into(),
            loop_index: 0,
            detail: format!("log-probability of sample {} is {lp}", sample.id),
        });
    }
    Ok(lp)
}

/// `beta * (log pi_theta - log pi_ref)`.
pub fn implicit_reward(
    params: &PolicyParams,
    reference: &PolicyParams,
    sample: &SampleInstance,
    response: &StructuredResponse,
    beta: f64,
) -> Result<f64> {
    let lp = finite_log_prob(params, sample, response)?;
    let lr = finite_log_prob(reference, sample, response)?;
    Ok(beta * (lp - lr))
}

fn check_rewards(rewards: &[f64]) -> Result<()> {
    if rewards.len() < 2 {
        return Err(contract_err(format!(
            "ranking needs >= 2 rewards, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(DppoError::NonFinite {
            phase: "prefcheck".into(),
            loop_index: 0,
            detail: "ranking reward is not finite".into(),
        });
    }
    Ok(())
}

/// Log of the sequential-selection probability of the listed order.
pub fn pl_log_prob(rewards: &[f64]) -> Result<f64> {
    check_rewards(rewards)?;
    let mut total = 0.0;
    for i in 0..rewards.len() {
        let tail = &rewards[i..];
        let m = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + tail.iter().map(|r| (r - m).exp()).sum::<f64>().ln();
        total += rewards[i] - lse;
    }
    Ok(total)
}

/// Plackett-Luce probability of the listed order (best first).
pub fn pl_ranking_prob(rewards: &[f64]) -> Result<f64> {
    pl_log_prob(rewards).map(f64::exp)
}

/// Largest `k` accepted by [`pl_normalization_check`].
pub const MAX_ENUMERATION_K: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationReport {
    /// Sum of ranking probabilities over all `k!` orderings.
    pub total: f64,
    /// Most probable ordering, as item indices best first.
    pub top_ordering: Vec<usize>,
    pub top_probability: f64,
}

/// Enumerates every ordering of the first `k` items.
pub fn pl_normalization_check(rewards_by_item: &[f64], k: usize) -> Result<NormalizationReport> {
    if k > MAX_ENUMERATION_K {
        return Err(config_err(format!(
            "k = {k} exceeds the enumeration limit {MAX_ENUMERATION_K}"
        )));
    }
    if k > rewards_by_item.len() {
        return Err(contract_err(format!(
            "k = {k} but only {} rewards given",
            rewards_by_item.len()
        )));
    }
    let items = &rewards_by_item[..k];
    check_rewards(items)?;
    let mut total = 0.0;
    let mut top = (Vec::new(), f64::NEG_INFINITY);
    for perm in (0..k).permutations(k) {
        let ordered: Vec<f64> = perm.iter().map(|&i| items[i]).collect();
        let p = pl_ranking_prob(&ordered)?;
        total += p;
        if p > top.1 {
            top = (perm, p);
        }
    }
    Ok(NormalizationReport {
        total,
        top_ordering: top.0,
        top_probability: top.1,
    })
}

/// `log P(c | pi_theta)` for one preference sample.
pub fn preference_log_likelihood(
    params: &PolicyParams,
    reference: &PolicyParams,
    sample: &PreferenceSample<'_>,
    beta: f64,
) -> Result<f64> {
    sample.validate()?;
    match sample {
        PreferenceSample::ExpertTrajectory { sample, response } => {
            finite_log_prob(params, sample, response)
        }
        PreferenceSample::RankedList { sample, ranking } => {
            let rewards = ranking
                .iter()
                .map(|r| implicit_reward(params, reference, sample, r, beta))
                .collect::<Result<Vec<_>>>()?;
            pl_log_prob(&rewards)
        }
    }
}

/// Mean `log P(c | pi_theta)` over the dataset.
pub fn upl_objective(
    params: &PolicyParams,
    reference: &PolicyParams,
    dataset: &[PreferenceSample<'_>],
    beta: f64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(contract_err("preference dataset is empty"));
    }
    ImplicitRewardConfig { beta }.validate()?;
    let mut total = 0.0;
    for s in dataset {
        total += preference_log_likelihood(params, reference, s, beta)?;
    }
    Ok(total / dataset.len() as f64)
}

fn accumulate_preference_gradient(
    params: &PolicyParams,
    reference: &PolicyParams,
    sample: &PreferenceSample<'_>,
    beta: f64,
    scale: f64,
    grad: &mut GradientVector,
) -> Result<()> {
    sample.validate()?;
    match sample {
        PreferenceSample::ExpertTrajectory { sample, response } => {
            accumulate_grad_log_prob(params, sample, response, scale, grad)
        }
        PreferenceSample::RankedList { sample, ranking } => {
            let rewards = ranking
                .iter()
                .map(|r| implicit_reward(params, reference, sample, r, beta))
                .collect::<Result<Vec<_>>>()?;
            // d/dr_j of sum_i [r_i - lse(r_i..)] is 1 - sum_{i <= j} softmax_j(r_i..)
            let mut coeff = vec![1.0; rewards.len()];
            for i in 0..rewards.len() {
                let tail = &rewards[i..];
                let m = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = tail.iter().map(|r| (r - m).exp()).sum();
                for (j, r) in tail.iter().enumerate() {
                    coeff[i + j] -= (r - m).exp() / z;
                }
            }
            for (resp, c) in ranking.iter().zip(coeff) {
                accumulate_grad_log_prob(params, sample, resp, scale * beta * c, grad)?;
            }
            Ok(())
        }
    }
}

/// Gradient of [`upl_objective`] with respect to `params` (the reference is
/// held fixed).
pub fn upl_gradient(
    params: &PolicyParams,
    reference: &PolicyParams,
    dataset: &[PreferenceSample<'_>],
    beta: f64,
) -> Result<GradientVector> {
    if dataset.is_empty() {
        return Err(contract_err("preference dataset is empty"));
    }
    let mut grad = GradientVector::zeros_like(params);
    let scale = 1.0 / dataset.len() as f64;
    for s in dataset {
        accumulate_preference_gradient(params, reference, s, beta, scale, &mut grad)?;
    }
    Ok(grad)
}

/// Summed expert log-likelihood gradient, `sum_i grad log pi(y_i | x_i)`.
pub fn expert_gradient_sum(
    params: &PolicyParams,
    batch: &[(&SampleInstance, StructuredResponse)],
) -> Result<GradientVector> {
    let mut grad = GradientVector::zeros_like(params);
    for (sample, response) in batch {
        accumulate_grad_log_prob(params, sample, response, 1.0, &mut grad)?;
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub max_abs_gradient_diff: f64,
}

impl EquivalenceReport {
    pub const THRESHOLD: f64 = 1e-10;

    pub fn passed(&self) -> bool {
        self.max_abs_gradient_diff < Self::THRESHOLD
    }
}

/// Compares the expert-trajectory gradient of the unified objective with the
/// negated SFT NLL gradient on the same batch.
pub fn sft_pl_equivalence_check(
    params: &PolicyParams,
    expert_batch: &[(&SampleInstance, StructuredResponse)],
) -> Result<EquivalenceReport> {
    if expert_batch.is_empty() {
        return Err(contract_err("expert batch is empty"));
    }
    let dataset: Vec<PreferenceSample<'_>> = expert_batch
        .iter()
        .map(|(sample, response)| PreferenceSample::ExpertTrajectory {
            sample,
            response: *response,
        })
        .collect();
    let upl = upl_gradient(params, params, &dataset, 1.0)?;
    let mut neg_sft = sft_gradient(params, expert_batch)?;
    neg_sft.scale(-1.0);
    Ok(EquivalenceReport {
        max_abs_gradient_diff: upl.max_abs_diff(&neg_sft),
    })
}

/// One row of the check report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub check: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckRow {
    fn at_most(check: &str, statistic: f64, threshold: f64) -> Self {
        Self {
            check: check.to_string(),
            statistic,
            threshold,
            pass: statistic <= threshold,
        }
    }
}

/// Settings for [`run_checks`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefcheckConfig {
    pub trials: usize,
    pub batch_size: usize,
    pub max_k: usize,
    pub param_scale: f64,
    pub implicit: ImplicitRewardConfig,
}

impl Default for PrefcheckConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            batch_size: 16,
            max_k: 5,
            param_scale: 0.3,
            implicit: ImplicitRewardConfig::default(),
        }
    }
}

fn random_params(like: &PolicyParams, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut p = like.clone();
    for t in p.theta_mut() {
        *t = scale * rng.sample::<f64, _>(StandardNormal);
    }
    p
}

/// Runs every check on random policies over a small generated suite.
///
/// Each statistic is a worst case over `trials` random draws.
pub fn run_checks(
    config: &PrefcheckConfig,
    suite_config: &SuiteConfig,
    seed: u64,
) -> Result<Vec<CheckRow>> {
    config.implicit.validate()?;
    if config.trials == 0 || config.batch_size == 0 {
        return Err(config_err(
            "prefcheck trials and batch_size must be positive",
        ));
    }
    if !(2..=MAX_ENUMERATION_K).contains(&config.max_k) {
        return Err(config_err(format!(
            "prefcheck.max_k must lie in [2, {MAX_ENUMERATION_K}]"
        )));
    }
    let suite = generate_suite(suite_config, seed)?;
    let base = PolicyParams::for_suite(&suite);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let beta = config.implicit.beta;

    let mut norm_err: f64 = 0.0;
    let mut shift_err: f64 = 0.0;
    let mut equiv: f64 = 0.0;
    let mut identity: f64 = 0.0;
    let mut reduction: f64 = 0.0;
    for _ in 0..config.trials {
        for k in 2..=config.max_k {
            let rewards: Vec<f64> = (0..k)
                .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            norm_err = norm_err.max((pl_normalization_check(&rewards, k)?.total - 1.0).abs());
            let c: f64 = rng.random_range(-10.0..10.0);
            let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
            shift_err =
                shift_err.max((pl_ranking_prob(&rewards)? - pl_ranking_prob(&shifted)?).abs());
        }

        let params = random_params(&base, config.param_scale, &mut rng);
        let reference = random_params(&base, config.param_scale, &mut rng);
        let batch: Vec<(&SampleInstance, StructuredResponse)> = (0..config.batch_size)
            .map(|_| {
                let s = &suite.samples()[rng.random_range(0..suite.len())];
                (s, teacher_solve(s).response)
            })
            .collect();
        equiv = equiv.max(sft_pl_equivalence_check(&params, &batch)?.max_abs_gradient_diff);

        let (sample, _) = batch[0];
        for _ in 0..config.max_k {
            let resp = sample_response(&params, sample, &mut rng)?;
            identity = identity.max(implicit_reward(&params, &params, sample, &resp, beta)?.abs());
        }

        let dataset: Vec<PreferenceSample<'_>> = batch
            .iter()
            .map(|&(sample, response)| PreferenceSample::ExpertTrajectory { sample, response })
            .collect();
        let upl = upl_objective(&params, &reference, &dataset, beta)?;
        let nll = crate::policy::sft_loss(&params, &batch)?;
        reduction = reduction.max((upl + nll).abs());
    }

    Ok(vec![
        CheckRow::at_most("pl_normalization", norm_err, 1e-9),
        CheckRow::at_most("pl_shift_invariance", shift_err, 1e-12),
        CheckRow::at_most(
            "sft_pl_gradient_equivalence",
            equiv,
            EquivalenceReport::THRESHOLD,
        ),
        CheckRow::at_most("implicit_reward_identity", identity, 0.0),
        CheckRow::at_most("upl_expert_reduction", reduction, 1e-12),
    ])
}

pub fn write_check_rows<W: Write>(rows: &[CheckRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
