//! Alternating RL / SFT training with difficulty-aware rollout curation.
//!
//! A linear softmax policy is trained on a synthetic multi-skill suite by a
//! metaloop that diagnoses weaknesses with GRPO rollouts, then repairs them
//! with supervised fine-tuning on teacher targets plus general replay data.
//!
//! ```
//! use dppo_core::{generate_suite, rebalance, DifficultyBuffer, SuiteConfig};
//!
//! let suite = generate_suite(&SuiteConfig { samples_per_skill: 5, ..Default::default() }, 1).unwrap();
//! assert_eq!(suite.len(), 30);
//! let buffer = DifficultyBuffer::new(Default::default()).unwrap();
//! assert!(rebalance(&buffer).is_empty());
//! ```

pub mod curation;
pub mod error;
pub mod harness;
pub mod metaloop;
pub mod policy;
pub mod prefcheck;
pub mod rewards;
pub mod taskgen;

pub use curation::{
    collect_weak, delta, read_rollout_log, rebalance, recompute_success_rates, reset,
    sample_stagnation, should_stop, success_rate, task_stagnation, DifficultyBuffer, RolloutRecord,
    SampleStats, StagnationConfig,
};
pub use error::{DppoError, Result};
pub use harness::{cmd_generate, cmd_report, cmd_run, run_seed, ExperimentConfig, Mode, RunOutput};
pub use metaloop::{
    build_sft_dataset, evaluate, expected_success, phase_schedule, pretrain_base, rl_phase,
    run_baseline, run_metaloop, sft_phase, BaseConfig, BaselineMode, Budget, DatasetPartition,
    Evaluation, LoopConfig, LoopHistory, Phase, PhaseSelector, SuiteSplit,
};
pub use policy::{
    answer_distribution, grad_log_prob, grpo_direction, grpo_step, grpo_weights, log_prob,
    read_checkpoint, sample_response, sft_gradient, sft_loss, sft_step, write_checkpoint, Answer,
    GradientVector, PolicyParams, RolloutGroup, StructuredResponse,
};
pub use prefcheck::{
    implicit_reward, pl_normalization_check, pl_ranking_prob, sft_pl_equivalence_check,
    upl_objective, PreferenceSample,
};
pub use rewards::{
    composite_reward, format_reward, is_success, task_reward, RewardBreakdown, RewardSpec,
};
pub use taskgen::{
    generate_suite, read_suite, related_samples, teacher_solve, write_suite, Gold, SampleId,
    SampleInstance, SampleSet, SkillDimension, SuiteConfig,
};
