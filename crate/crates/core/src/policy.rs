//! Linear-softmax policy.
//!
//! `theta` is an `F x (K+1)` matrix stored row-major. Column `a < K` scores
//! candidate `a` as `x . theta[:, a]`; column `K` is the logit of emitting a
//! well-formed response. The response probability factorises as
//! `pi(format) * pi(answer | x)`.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, DppoError, Result};
use crate::taskgen::{SampleInstance, SampleSet};

/// Answer payload of a response: a candidate index for choice skills or a
/// real value for the numeric skill.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Answer {
    Choice(usize),
    Numeric(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredResponse {
    pub format: bool,
    pub answer: Answer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    features: usize,
    answers: usize,
    theta: Vec<f64>,
    pub step_count: u64,
}

impl PolicyParams {
    pub fn zeros(features: usize, answers: usize) -> Self {
        Self {
            features,
            answers,
            theta: vec![0.0; features * (answers + 1)],
            step_count: 0,
        }
    }

    pub fn for_suite(suite: &SampleSet) -> Self {
        Self::zeros(suite.feature_dim(), suite.num_answers())
    }

    pub fn from_theta(features: usize, answers: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != features * (answers + 1) {
            return Err(contract_err(format!(
                "theta has {} entries, expected {}x{}",
                theta.len(),
                features,
                answers + 1
            )));
        }
        Ok(Self {
            features,
            answers,
            theta,
            step_count: 0,
        })
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn answers(&self) -> usize {
        self.answers
    }

    pub fn columns(&self) -> usize {
        self.answers + 1
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.theta[row * self.columns() + col]
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.features == other.features && self.answers == other.answers
    }

    /// `theta += scale * grad`.
    pub fn apply(&mut self, grad: &GradientVector, scale: f64) {
        debug_assert_eq!(grad.entries.len(), self.theta.len());
        for (t, g) in self.theta.iter_mut().zip(&grad.entries) {
            *t += scale * g;
        }
    }

    fn check_sample(&self, sample: &SampleInstance) -> Result<()> {
        if sample.features.len() != self.features || sample.answers.len() != self.answers {
            return Err(contract_err(format!(
                "sample {} shape (F={}, K={}) does not match params (F={}, K={})",
                sample.id,
                sample.features.len(),
                sample.answers.len(),
                self.features,
                self.answers
            )));
        }
        Ok(())
    }

    /// All K+1 logits: candidate scores followed by the format logit.
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.columns();
        let mut z = vec![0.0; cols];
        for (row, &xf) in self.theta.chunks_exact(cols).zip(x) {
            if xf == 0.0 {
                continue;
            }
            for (zc, &t) in z.iter_mut().zip(row) {
                *zc += xf * t;
            }
        }
        z
    }
}

/// Dense gradient with the same shape as `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub features: usize,
    pub answers: usize,
    pub entries: Vec<f64>,
}

impl GradientVector {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            features: params.features,
            answers: params.answers,
            entries: vec![0.0; params.theta.len()],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * (self.answers + 1) + col]
    }

    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.entries.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &GradientVector) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `log(sigmoid(z))` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Index of the candidate a response refers to.
///
/// Numeric values map to the nearest candidate value.
pub fn response_index(sample: &SampleInstance, response: &StructuredResponse) -> Result<usize> {
    match (sample.skill.is_numeric(), response.answer) {
        (false, Answer::Choice(i)) if i < sample.answers.len() => Ok(i),
        (false, Answer::Choice(i)) => Err(contract_err(format!(
            "choice {i} out of range for sample {}",
            sample.id
        ))),
        (true, Answer::Numeric(v)) if v.is_finite() => Ok(sample
            .answers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
            .map(|(i, _)| i)
            .expect("K >= 2")),
        _ => Err(contract_err(format!(
            "response {:?} does not fit skill {} of sample {}",
            response.answer, sample.skill, sample.id
        ))),
    }
}

pub fn answer_distribution(params: &PolicyParams, sample: &SampleInstance) -> Result<Vec<f64>> {
    params.check_sample(sample)?;
    let z = params.logits(&sample.features);
    Ok(softmax(&z[..params.answers]))
}

/// Probability of emitting a well-formed response.
pub fn format_probability(params: &PolicyParams, sample: &SampleInstance) -> Result<f64> {
    params.check_sample(sample)?;
    let z = params.logits(&sample.features);
    Ok(sigmoid(z[params.answers]))
}

pub fn sample_response<R: Rng + ?Sized>(
    params: &PolicyParams,
    sample: &SampleInstance,
    rng: &mut R,
) -> Result<StructuredResponse> {
    params.check_sample(sample)?;
    let z = params.logits(&sample.features);
    let probs = softmax(&z[..params.answers]);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut index = probs.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            index = i;
            break;
        }
    }
    let format = rng.random::<f64>() < sigmoid(z[params.answers]);
    let answer = if sample.skill.is_numeric() {
        Answer::Numeric(sample.answers[index])
    } else {
        Answer::Choice(index)
    };
    Ok(StructuredResponse { format, answer })
}

/// `log pi(format) + log pi(answer | x)`. Returns `-inf` when the response has
/// zero probability under degenerate parameters.
pub fn log_prob(
    params: &PolicyParams,
    sample: &SampleInstance,
    response: &StructuredResponse,
) -> Result<f64> {
    params.check_sample(sample)?;
    let index = response_index(sample, response)?;
    let z = params.logits(&sample.features);
    let k = params.answers;
    let answer_lp = z[index] - log_sum_exp(&z[..k]);
    let format_lp = if response.format {
        log_sigmoid(z[k])
    } else {
        log_sigmoid(-z[k])
    };
    let lp = answer_lp + format_lp;
    Ok(if lp.is_nan() { f64::NEG_INFINITY } else { lp })
}

/// Score-function gradient of [`log_prob`].
pub fn grad_log_prob(
    params: &PolicyParams,
    sample: &SampleInstance,
    response: &StructuredResponse,
) -> Result<GradientVector> {
    let mut grad = GradientVector::zeros_like(params);
    accumulate_grad_log_prob(params, sample, response, 1.0, &mut grad)?;
    Ok(grad)
}

/// `grad += scale * d/dtheta log pi(response | sample)`.
pub(crate) fn accumulate_grad_log_prob(
    params: &PolicyParams,
    sample: &SampleInstance,
    response: &StructuredResponse,
    scale: f64,
    grad: &mut GradientVector,
) -> Result<()> {
    params.check_sample(sample)?;
    let index = response_index(sample, response)?;
    let z = params.logits(&sample.features);
    let k = params.answers;
    let lse = log_sum_exp(&z[..k]);
    let lp = z[index] - lse;
    if !lp.is_finite() {
        return Err(DppoError::NonFinite {
            phase: "grad_log_prob".into(),
            loop_index: 0,
            detail: format!("log-probability of sample {} is not finite", sample.id),
        });
    }
    // d log softmax_i / dz_a = 1[a = i] - p_a; d log sigmoid(+-z) / dz = 1[format] - sigma(z)
    let mut coeff: Vec<f64> = z[..k].iter().map(|v| -(v - lse).exp()).collect();
    coeff[index] += 1.0;
    let fmt = if response.format { 1.0 } else { 0.0 };
    coeff.push(fmt - sigmoid(z[k]));

    let cols = k + 1;
    for (row, &xf) in grad.entries.chunks_exact_mut(cols).zip(&sample.features) {
        if xf == 0.0 {
            continue;
        }
        for (g, c) in row.iter_mut().zip(&coeff) {
            *g += scale * xf * c;
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of teacher targets.
pub fn sft_loss(
    params: &PolicyParams,
    batch: &[(&SampleInstance, StructuredResponse)],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(contract_err("SFT batch is empty"));
    }
    let mut total = 0.0;
    for (sample, target) in batch {
        total -= log_prob(params, sample, target)?;
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`sft_loss`] with respect to theta.
pub fn sft_gradient(
    params: &PolicyParams,
    batch: &[(&SampleInstance, StructuredResponse)],
) -> Result<GradientVector> {
    if batch.is_empty() {
        return Err(contract_err("SFT batch is empty"));
    }
    let mut grad = GradientVector::zeros_like(params);
    let scale = -1.0 / batch.len() as f64;
    for (sample, target) in batch {
        accumulate_grad_log_prob(params, sample, target, scale, &mut grad)?;
    }
    Ok(grad)
}

/// One gradient-descent step on the mean SFT NLL.
pub fn sft_step(
    params: &PolicyParams,
    batch: &[(&SampleInstance, StructuredResponse)],
    lr: f64,
) -> Result<PolicyParams> {
    let grad = sft_gradient(params, batch)?;
    if !grad.is_finite() {
        return Err(DppoError::NonFinite {
            phase: "sft".into(),
            loop_index: 0,
            detail: format!("SFT gradient not finite (max |g| = {})", grad.max_abs()),
        });
    }
    let mut next = params.clone();
    if lr != 0.0 {
        next.apply(&grad, -lr);
        next.step_count += 1;
    }
    Ok(next)
}

/// Rollouts of one sample with their composite rewards.
#[derive(Clone, Debug)]
pub struct RolloutGroup<'a> {
    pub sample: &'a SampleInstance,
    pub responses: Vec<StructuredResponse>,
    pub rewards: Vec<f64>,
}

/// Guard added to the group standard deviation.
pub const GRPO_STD_EPS: f64 = 1e-8;

/// Group-standardised advantages `(R_i - mean) / (std + 1e-8)`, using the
/// population standard deviation. Groups with zero spread get all-zero weights.
pub fn grpo_weights(rewards: &[f64]) -> Vec<f64> {
    // exact test first: the float mean of equal values can differ from them
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return vec![0.0; rewards.len()];
    }
    rewards
        .iter()
        .map(|r| (r - mean) / (std + GRPO_STD_EPS))
        .collect()
}

/// Ascent direction: mean over groups of `sum_i w_i * grad log pi(y_i | x)`.
///
/// Returns the direction and the number of per-response gradient evaluations.
pub fn grpo_direction(
    params: &PolicyParams,
    groups: &[RolloutGroup<'_>],
) -> Result<(GradientVector, u64)> {
    let mut dir = GradientVector::zeros_like(params);
    let mut evals = 0;
    if groups.is_empty() {
        return Ok((dir, 0));
    }
    let per_group = 1.0 / groups.len() as f64;
    for g in groups {
        if g.responses.len() < 2 || g.responses.len() != g.rewards.len() {
            return Err(contract_err(format!(
                "GRPO group for sample {} needs >= 2 rollouts with rewards (got {} / {})",
                g.sample.id,
                g.responses.len(),
                g.rewards.len()
            )));
        }
        let weights = grpo_weights(&g.rewards);
        for (resp, w) in g.responses.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            accumulate_grad_log_prob(params, g.sample, resp, per_group * w, &mut dir)?;
            evals += 1;
        }
    }
    Ok((dir, evals))
}

/// One GRPO ascent step. `reference` must match the policy shape; it does not
/// enter the update (no KL term).
pub fn grpo_step(
    params: &PolicyParams,
    reference: &PolicyParams,
    groups: &[RolloutGroup<'_>],
    lr: f64,
) -> Result<PolicyParams> {
    if !params.same_shape(reference) {
        return Err(contract_err("reference policy shape differs from policy"));
    }
    let (dir, _) = grpo_direction(params, groups)?;
    if !dir.is_finite() {
        return Err(DppoError::NonFinite {
            phase: "rl".into(),
            loop_index: 0,
            detail: "GRPO direction not finite".into(),
        });
    }
    let mut next = params.clone();
    next.apply(&dir, lr);
    next.step_count += 1;
    Ok(next)
}

/// Frozen deep copy used as `pi_ref`.
pub fn snapshot_reference(params: &PolicyParams) -> PolicyParams {
    params.clone()
}

const CHECKPOINT_MAGIC: &str = "dppo-params";

/// Text checkpoint: `dppo-params F K step_count`, then one row of `K+1`
/// shortest-round-trip floats per feature.
pub fn write_checkpoint<W: Write>(params: &PolicyParams, mut out: W) -> Result<()> {
    writeln!(
        out,
        "{CHECKPOINT_MAGIC} {} {} {}",
        params.features, params.answers, params.step_count
    )?;
    for row in params.theta.chunks_exact(params.columns()) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<PolicyParams> {
    let parse_err = |line: usize, msg: String| DppoError::Parse { line, msg };
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty checkpoint".into()))??;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != CHECKPOINT_MAGIC {
        return Err(parse_err(1, format!("bad checkpoint header `{header}`")));
    }
    let num = |s: &str| -> Result<u64> {
        s.parse::<u64>()
            .map_err(|e| parse_err(1, format!("{s}: {e}")))
    };
    let features = num(parts[1])? as usize;
    let answers = num(parts[2])? as usize;
    let step_count = num(parts[3])?;
    if answers < 2 {
        return Err(config_err("checkpoint has K < 2"));
    }
    let mut theta = Vec::with_capacity(features * (answers + 1));
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| parse_err(i + 2, format!("{t}: {e}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != answers + 1 {
            return Err(parse_err(i + 2, format!("expected {} values", answers + 1)));
        }
        theta.extend(row);
    }
    let mut params = PolicyParams::from_theta(features, answers, theta)?;
    params.step_count = step_count;
    Ok(params)
}
