//! Fixtures shared by the benchmarks.

use dppo_core::{
    composite_reward, generate_suite, is_success, sample_response, DifficultyBuffer, PolicyParams,
    RewardSpec, RolloutRecord, SampleSet, SuiteConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn suite(samples_per_skill: usize) -> SampleSet {
    generate_suite(
        &SuiteConfig {
            samples_per_skill,
            ..Default::default()
        },
        7,
    )
    .expect("default suite config")
}

/// Small random parameters so rollouts are neither all right nor all wrong.
pub fn params(suite: &SampleSet, seed: u64) -> PolicyParams {
    let mut p = PolicyParams::for_suite(suite);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in p.theta_mut() {
        *w = rng.random_range(-0.3..0.3);
    }
    p
}

/// A buffer holding `per_sample` logged rollouts for every sample.
pub fn filled_buffer(
    suite: &SampleSet,
    params: &PolicyParams,
    per_sample: usize,
) -> DifficultyBuffer {
    let spec = RewardSpec::default();
    let mut buffer = DifficultyBuffer::new(Default::default()).expect("default stagnation config");
    buffer.register(suite.samples());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for s in suite.samples() {
        for _ in 0..per_sample {
            let response = sample_response(params, s, &mut rng).expect("shapes match");
            let reward = composite_reward(&spec, s, &response).expect("shapes match");
            let success = is_success(s, &response, &spec);
            let record = RolloutRecord {
                sample_id: s.id,
                loop_index: 1,
                epoch: 0,
                response,
                reward,
                success,
                seed: 3,
                counter: 0,
            };
            buffer.log_rollout(record).expect("registered");
        }
    }
    buffer
}
