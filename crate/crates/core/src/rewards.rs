//! Rule-based multi-task rewards.
//!
//! The composite reward is `lambda_f * R_f + lambda_t * R_t`, where `R_f`
//! checks output structure and `R_t` is the skill's task rule: exact match for
//! choice skills, a linear tolerance band for the numeric skill.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::policy::{Answer, StructuredResponse};
use crate::taskgen::{Gold, SampleInstance};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSpec {
    pub lambda_f: f64,
    pub lambda_t: f64,
    pub numeric_success_threshold: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            lambda_f: 0.1,
            lambda_t: 0.9,
            numeric_success_threshold: 0.75,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_f.is_finite() && self.lambda_t.is_finite()) {
            return Err(config_err("reward weights must be finite"));
        }
        if self.lambda_f < 0.0 || self.lambda_t < 0.0 || self.lambda_f + self.lambda_t <= 0.0 {
            return Err(config_err(
                "reward weights must be non-negative with lambda_f + lambda_t > 0",
            ));
        }
        if !(self.numeric_success_threshold > 0.0 && self.numeric_success_threshold <= 1.0) {
            return Err(config_err("numeric_success_threshold must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Largest attainable composite reward.
    pub fn max_reward(&self) -> f64 {
        self.lambda_f + self.lambda_t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_task: f64,
    pub composite: f64,
}

/// 1 when the response carries the required structure, else 0.
///
/// Every [`StructuredResponse`] holds an answer, so only the format flag can
/// fail.
pub fn format_reward(response: &StructuredResponse) -> f64 {
    if response.format {
        1.0
    } else {
        0.0
    }
}

pub fn task_reward(sample: &SampleInstance, response: &StructuredResponse) -> Result<f64> {
    match (&sample.gold, response.answer) {
        (Gold::Choice(gold), Answer::Choice(a)) => Ok(if a == *gold { 1.0 } else { 0.0 }),
        (
            Gold::Numeric {
                target, tolerance, ..
            },
            Answer::Numeric(v),
        ) => {
            if !v.is_finite() {
                return Ok(0.0);
            }
            Ok((1.0 - (v - target).abs() / tolerance).max(0.0))
        }
        _ => Err(contract_err(format!(
            "response kind does not match skill {} of sample {}",
            sample.skill, sample.id
        ))),
    }
}

pub fn composite_reward(
    spec: &RewardSpec,
    sample: &SampleInstance,
    response: &StructuredResponse,
) -> Result<RewardBreakdown> {
    let r_task = task_reward(sample, response)?;
    let r_format = format_reward(response);
    Ok(RewardBreakdown {
        r_format,
        r_task,
        composite: spec.lambda_f * r_format + spec.lambda_t * r_task,
    })
}

/// Binary outcome counted by the success rate. Format correctness is required.
pub fn is_success(
    sample: &SampleInstance,
    response: &StructuredResponse,
    spec: &RewardSpec,
) -> bool {
    if !response.format {
        return false;
    }
    match (&sample.gold, response.answer) {
        (Gold::Choice(gold), Answer::Choice(a)) => a == *gold,
        (Gold::Numeric { .. }, Answer::Numeric(_)) => task_reward(sample, response)
            .map(|r| r >= spec.numeric_success_threshold)
            .unwrap_or(false),
        _ => false,
    }
}
