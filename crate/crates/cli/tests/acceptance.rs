//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dppo_core::curation::{DifficultyBuffer, RolloutRecord, SampleStats, StagnationConfig};
use dppo_core::harness::{base_policy, ExperimentConfig};
use dppo_core::metaloop::{run_baseline, run_metaloop, BaselineMode, LoopHistory};
use dppo_core::prefcheck::{implicit_reward, pl_normalization_check, sft_pl_equivalence_check};
use dppo_core::{
    delta, generate_suite, grad_log_prob, grpo_direction, grpo_step, grpo_weights, log_prob,
    rebalance, sample_response, sample_stagnation, sft_loss, sft_step, success_rate,
    task_stagnation, teacher_solve, Answer, PolicyParams, RewardBreakdown, RolloutGroup, SampleSet,
    SkillDimension, StructuredResponse, SuiteConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_params(suite: &SampleSet, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut p = PolicyParams::for_suite(suite);
    for t in p.theta_mut() {
        *t = rng.random_range(-scale..scale);
    }
    p
}

fn stats(successes: u32, rollouts: u32, prev: Option<f64>) -> SampleStats {
    SampleStats {
        sample_id: 0,
        skill: SkillDimension::TaskPlanning,
        rollouts,
        successes,
        s_r: 0.0,
        s_r_prev: prev,
        delta: 0.0,
        s_s: 0.0,
    }
}

fn record(id: u64, success: bool) -> RolloutRecord {
    RolloutRecord {
        sample_id: id,
        loop_index: 1,
        epoch: 0,
        response: StructuredResponse {
            format: true,
            answer: Answer::Choice(0),
        },
        reward: RewardBreakdown {
            r_format: 1.0,
            r_task: f64::from(u8::from(success)),
            composite: 0.0,
        },
        success,
        seed: 0,
        counter: 0,
    }
}

fn oracle_stagnation(s_r: f64, prev: Option<f64>, eps: f64) -> f64 {
    let d = match prev {
        None => 1.0,
        Some(p) => f64::min(1.0, (s_r - p).abs() / eps),
    };
    1.0 - 4.0 * s_r * (1.0 - s_r) * d
}

fn formula_conformance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let suite = generate_suite(
        &SuiteConfig {
            samples_per_skill: 1,
            ..Default::default()
        },
        1,
    )
    .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = rng.random_range(1..=32u32);
        let k = rng.random_range(0..=t);
        let prev = if rng.random_bool(0.2) {
            None
        } else {
            Some(rng.random_range(0..=16u32) as f64 / 16.0)
        };
        let eps = rng.random_range(0.0501..0.1999);
        let s_r = k as f64 / t as f64;

        let st = stats(k, t, prev);
        let got_sr = success_rate(&st).map_err(|e| e.to_string())?;
        let got_d = delta(got_sr, prev, eps).map_err(|e| e.to_string())?;
        let got_ss = sample_stagnation(got_sr, got_d);
        worst = worst
            .max((got_sr - s_r).abs())
            .max((got_ss - oracle_stagnation(s_r, prev, eps)).abs());

        // same quantities through the buffer, including the carried S_R_prev
        let mut buf = DifficultyBuffer::new(StagnationConfig {
            epsilon: eps,
            threshold: 0.7,
        })
        .map_err(|e| e.to_string())?;
        buf.register(suite.iter().take(1));
        if let Some(p) = prev {
            let hits = (p * 16.0).round() as u32;
            for i in 0..16 {
                buf.log_rollout(record(0, i < hits))
                    .map_err(|e| e.to_string())?;
            }
            dppo_core::reset(&mut buf);
        }
        for i in 0..t {
            buf.log_rollout(record(0, i < k))
                .map_err(|e| e.to_string())?;
        }
        let st = buf.stats_for(0).ok_or("missing stats")?;
        worst = worst.max((st.s_s - oracle_stagnation(s_r, prev, eps)).abs());
        let task = task_stagnation([st, st]).map_err(|e| e.to_string())?;
        worst = worst.max((task - st.s_s).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    for (s_r, d) in [
        (0.0, 1.0),
        (1.0, 1.0),
        (0.0, 0.3),
        (1.0, 0.0),
        (0.5, 0.0),
        (0.25, 0.0),
    ] {
        let ss = sample_stagnation(s_r, d);
        ensure(ss == 1.0, || format!("S_S({s_r}, {d}) = {ss}"))?;
    }
    Ok(format!(
        "1000 triples, max deviation {worst:.1e}; boundaries exact"
    ))
}

fn rebalance_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let suite = generate_suite(
        &SuiteConfig {
            samples_per_skill: 10,
            ..Default::default()
        },
        2,
    )
    .map_err(|e| e.to_string())?;
    for trial in 0..1000 {
        let n = rng.random_range(1..=suite.len());
        let t = rng.random_range(1..=8u32);
        let mut buf =
            DifficultyBuffer::new(StagnationConfig::default()).map_err(|e| e.to_string())?;
        buf.register(suite.iter());
        let mut rates = BTreeMap::new();
        // skewed outcome mix so all three classes appear
        let bias = rng.random_range(0.0..1.0);
        for id in 0..n as u64 {
            let mut hits = 0;
            for _ in 0..t {
                let s = rng.random_bool(bias);
                hits += u32::from(s);
                buf.log_rollout(record(id, s)).map_err(|e| e.to_string())?;
            }
            rates.insert(id, hits as f64 / t as f64);
        }
        let out = rebalance(&buf);
        ensure(out == rebalance(&buf), || {
            format!("trial {trial}: not deterministic")
        })?;
        let zeros = out.iter().filter(|id| rates[id] == 0.0).count();
        let partial: Vec<u64> = rates
            .iter()
            .filter(|(_, &r)| r > 0.0 && r < 1.0)
            .map(|(&i, _)| i)
            .collect();
        ensure(out.iter().all(|id| rates[id] < 1.0), || {
            format!("trial {trial}: mastered sample kept")
        })?;
        ensure(zeros <= partial.len(), || {
            format!(
                "trial {trial}: {zeros} failures > {} partial",
                partial.len()
            )
        })?;
        ensure(partial.iter().all(|id| out.contains(id)), || {
            format!("trial {trial}: partial sample dropped")
        })?;
        let n_zero = rates.values().filter(|&&r| r == 0.0).count();
        ensure(zeros == n_zero.min(partial.len()), || {
            format!("trial {trial}: failures not filled to cap")
        })?;
    }
    Ok("1000 random buffers".into())
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let suite = generate_suite(
        &SuiteConfig {
            samples_per_skill: 30,
            ..Default::default()
        },
        3,
    )
    .map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let params = random_params(&suite, 0.5, &mut rng);
        let s = &suite.samples()[rng.random_range(0..suite.len())];
        let resp = sample_response(&params, s, &mut rng).map_err(|e| e.to_string())?;
        let g = grad_log_prob(&params, s, &resp).map_err(|e| e.to_string())?;
        let cols = params.columns();
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..params.theta().len() {
            let mut plus = params.clone();
            plus.theta_mut()[i] += h;
            let mut minus = params.clone();
            minus.theta_mut()[i] -= h;
            let fd = (log_prob(&plus, s, &resp).unwrap() - log_prob(&minus, s, &resp).unwrap())
                / (2.0 * h);
            let an = g.get(i / cols, i % cols);
            num = num.max((fd - an).abs());
            den = den.max(an.abs()).max(fd.abs());
        }
        worst = worst.max(num / den.max(1e-12));
    }
    ensure(worst < 1e-5, || {
        format!("finite-difference relative error {worst:e}")
    })?;

    let mut rises = 0;
    for _ in 0..50 {
        let params = random_params(&suite, 0.5, &mut rng);
        let size = rng.random_range(1..=32);
        let batch: Vec<_> = (0..size)
            .map(|_| {
                let s = &suite.samples()[rng.random_range(0..suite.len())];
                (s, teacher_solve(s).response)
            })
            .collect();
        let before = sft_loss(&params, &batch).map_err(|e| e.to_string())?;
        let next = sft_step(&params, &batch, 1e-3).map_err(|e| e.to_string())?;
        let after = sft_loss(&next, &batch).map_err(|e| e.to_string())?;
        rises += usize::from(after > before);
    }
    ensure(rises == 0, || {
        format!("{rises} of 50 SFT steps increased the NLL")
    })?;
    Ok(format!(
        "100 FD checks, max rel err {worst:.1e}; 50 SFT steps descend"
    ))
}

fn grpo_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let suite = generate_suite(
        &SuiteConfig {
            samples_per_skill: 10,
            ..Default::default()
        },
        4,
    )
    .map_err(|e| e.to_string())?;
    let params = random_params(&suite, 0.5, &mut rng);
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let n = rng.random_range(2..=16);
        let equal = trial % 4 == 0;
        let constant = rng.random_range(0.0..1.0);
        let rewards: Vec<f64> = (0..n)
            .map(|_| {
                if equal {
                    constant
                } else {
                    rng.random_range(0.0..1.0)
                }
            })
            .collect();
        let w = grpo_weights(&rewards);
        worst = worst.max((w.iter().sum::<f64>() / n as f64).abs());
        if equal {
            let s = &suite.samples()[rng.random_range(0..suite.len())];
            let responses = (0..n)
                .map(|_| sample_response(&params, s, &mut rng))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            let group = RolloutGroup {
                sample: s,
                responses,
                rewards,
            };
            let (dir, _) =
                grpo_direction(&params, std::slice::from_ref(&group)).map_err(|e| e.to_string())?;
            ensure(dir.max_abs() == 0.0, || {
                format!("trial {trial}: equal rewards moved the policy")
            })?;
            let next = grpo_step(&params, &params, &[group], 0.5).map_err(|e| e.to_string())?;
            ensure(next.theta() == params.theta(), || {
                format!("trial {trial}: step changed theta")
            })?;
        }
    }
    ensure(worst <= 1e-9, || format!("max |mean weight| {worst:e}"))?;
    Ok(format!(
        "1000 groups, max |mean weight| {worst:.1e}; equal-reward groups inert"
    ))
}

fn preference_theory() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_norm: f64 = 0.0;
    for _ in 0..200 {
        for k in 2..=5 {
            let r: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
            let rep = pl_normalization_check(&r, k).map_err(|e| e.to_string())?;
            worst_norm = worst_norm.max((rep.total - 1.0).abs());
        }
    }
    ensure(worst_norm <= 1e-9, || {
        format!("PL total off by {worst_norm:e}")
    })?;

    let suite = generate_suite(
        &SuiteConfig {
            samples_per_skill: 20,
            ..Default::default()
        },
        5,
    )
    .map_err(|e| e.to_string())?;
    let mut worst_grad: f64 = 0.0;
    for _ in 0..50 {
        let params = random_params(&suite, 0.5, &mut rng);
        let size = rng.random_range(1..=24);
        let batch: Vec<_> = (0..size)
            .map(|_| {
                let s = &suite.samples()[rng.random_range(0..suite.len())];
                (s, teacher_solve(s).response)
            })
            .collect();
        let rep = sft_pl_equivalence_check(&params, &batch).map_err(|e| e.to_string())?;
        worst_grad = worst_grad.max(rep.max_abs_gradient_diff);
        for (s, _) in batch.iter().take(4) {
            let resp = sample_response(&params, s, &mut rng).map_err(|e| e.to_string())?;
            let r = implicit_reward(&params, &params, s, &resp, 1.0).map_err(|e| e.to_string())?;
            ensure(r == 0.0, || {
                format!("implicit reward {r} under identical policies")
            })?;
        }
    }
    ensure(worst_grad < 1e-10, || {
        format!("SFT/PL gradient gap {worst_grad:e}")
    })?;
    Ok(format!(
        "PL sum err {worst_norm:.1e}, gradient gap {worst_grad:.1e}, identity rewards 0"
    ))
}

struct Directional {
    dppo: Vec<LoopHistory>,
    rl_only: Vec<LoopHistory>,
    sft_only: Vec<LoopHistory>,
    elapsed: Duration,
}

fn seed_mean(hs: &[LoopHistory], f: impl Fn(&LoopHistory) -> f64) -> f64 {
    hs.iter().map(f).sum::<f64>() / hs.len() as f64
}

fn run_directional() -> Result<Directional, String> {
    let start = Instant::now();
    let config = ExperimentConfig::default();
    let lc = &config.loop_config;
    let suite = config.load_suite().map_err(|e| e.to_string())?;
    let mut out = Directional {
        dppo: Vec::new(),
        rl_only: Vec::new(),
        sft_only: Vec::new(),
        elapsed: Duration::ZERO,
    };
    for &seed in &config.seeds {
        let base = base_policy(&config, &suite, seed).map_err(|e| e.to_string())?;
        let (_, h) = run_metaloop(lc, &suite, base.clone(), seed).map_err(|e| e.to_string())?;
        let budget = h.budget().total();
        let (_, r) = run_baseline(BaselineMode::RlOnly, lc, &suite, base.clone(), seed, budget)
            .map_err(|e| e.to_string())?;
        let (_, s) = run_baseline(BaselineMode::SftOnly, lc, &suite, base, seed, budget)
            .map_err(|e| e.to_string())?;
        out.dppo.push(h);
        out.rl_only.push(r);
        out.sft_only.push(s);
    }
    out.elapsed = start.elapsed();
    Ok(out)
}

fn matched_budget_ordering(d: &Directional) -> Outcome {
    let dppo = seed_mean(&d.dppo, LoopHistory::final_heldout);
    let rl = seed_mean(&d.rl_only, LoopHistory::final_heldout);
    let sft = seed_mean(&d.sft_only, LoopHistory::final_heldout);
    let base = seed_mean(&d.dppo, |h| h.initial_heldout.overall);
    let summary = format!(
        "held-out: base {:.1}, sft_only {:.1}, rl_only {:.1}, dppo {:.1} (%); 5 seeds x 3 modes in {:.1}s",
        100.0 * base,
        100.0 * sft,
        100.0 * rl,
        100.0 * dppo,
        d.elapsed.as_secs_f64()
    );
    ensure(dppo - rl >= 0.05 && dppo - sft >= 0.05, || summary.clone())?;
    ensure(d.elapsed < Duration::from_secs(300), || {
        format!("{summary}; took {:?}", d.elapsed)
    })?;
    Ok(summary)
}

fn forgetting(d: &Directional) -> Outcome {
    let dppo = -seed_mean(&d.dppo, LoopHistory::general_retention);
    let rl = -seed_mean(&d.rl_only, LoopHistory::general_retention);
    let summary = format!(
        "general-pool drop: dppo {:.1}, rl_only {:.1} (points)",
        100.0 * dppo,
        100.0 * rl
    );
    ensure(dppo <= rl, || summary.clone())?;
    Ok(summary)
}

fn trajectory(d: &Directional) -> Outcome {
    let config = ExperimentConfig::default();
    let loops = config.loop_config.loops;
    let mut curve = vec![0.0; loops];
    for h in &d.dppo {
        for (k, eval) in h.per_loop_heldout() {
            curve[k - 1] += eval.overall / d.dppo.len() as f64;
        }
    }
    let shown: Vec<String> = curve.iter().map(|v| format!("{:.1}", 100.0 * v)).collect();
    ensure(curve.windows(2).all(|w| w[1] >= w[0]), || {
        format!("per-loop held-out {shown:?}")
    })?;

    let cap = config.loop_config.rl_epoch_cap;
    let easy = config.suite.easy_skills.clone();
    let stops: Vec<usize> = d
        .dppo
        .iter()
        .flat_map(|h| h.stops())
        .filter(|e| easy.contains(&e.skill) && e.epoch < cap)
        .map(|e| e.epoch)
        .collect();
    ensure(!stops.is_empty(), || {
        "easy skill never stopped before the epoch cap".into()
    })?;
    Ok(format!(
        "per-loop held-out {shown:?} (%); easy-skill stops {} (first at epoch {}, cap {cap})",
        stops.len(),
        stops[0]
    ))
}

fn collect_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("exp.toml");
    fs::write(
        &config,
        "seeds = [3, 4]\n\n[suite]\nsamples_per_skill = 40\n\n[loop]\nloops = 2\n",
    )
    .map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        for mode in ["dppo", "rl_only", "sft_only"] {
            let status = Command::new(env!("CARGO_BIN_EXE_dppo"))
                .args(["run", "--config"])
                .arg(&config)
                .args(["--mode", mode, "--out"])
                .arg(&out)
                .output()
                .map_err(|e| e.to_string())?;
            ensure(status.status.success(), || {
                format!(
                    "run {mode} failed: {}",
                    String::from_utf8_lossy(&status.stderr)
                )
            })?;
        }
        let status = Command::new(env!("CARGO_BIN_EXE_dppo"))
            .args(["report", "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || "report failed".into())?;
        trees.push(collect_files(&out));
    }
    let (a, b) = (&trees[0], &trees[1]);
    let count = |ext: &str| {
        a.keys()
            .filter(|p| p.extension().is_some_and(|e| e == ext))
            .count()
    };
    ensure(
        count("jsonl") >= 2 && count("ckpt") > 0 && a.contains_key(Path::new("comparison.csv")),
        || format!("missing artefacts: {:?}", a.keys().collect::<Vec<_>>()),
    )?;
    ensure(a.keys().eq(b.keys()), || "file sets differ".into())?;
    for (path, bytes) in a {
        ensure(b[path] == *bytes, || format!("{} differs", path.display()))?;
    }
    Ok(format!(
        "{} files identical ({} rollout logs, {} checkpoints, reports)",
        a.len(),
        count("jsonl"),
        count("ckpt")
    ))
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    let mut report = |id: usize,
                      name: &str,
                      limit: Option<Duration>,
                      f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(&mut *f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(msg), Some(l)) if elapsed > l => Err(format!("{msg}; took {elapsed:?} > {l:?}")),
            (r, _) => r,
        };
        let (tag, msg) = match result {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failures += 1;
                ("FAIL", m)
            }
        };
        println!("{tag} [{id}] {name} ({:.2}s): {msg}", elapsed.as_secs_f64());
    };

    let secs = Duration::from_secs;
    report(
        1,
        "stagnation formulas",
        Some(secs(1)),
        &mut formula_conformance,
    );
    report(
        2,
        "rebalance invariants",
        Some(secs(5)),
        &mut rebalance_invariants,
    );
    report(
        3,
        "gradient correctness",
        Some(secs(10)),
        &mut gradient_correctness,
    );
    report(4, "GRPO weight contract", Some(secs(1)), &mut grpo_contract);
    report(
        5,
        "preference-learning theory",
        Some(secs(5)),
        &mut preference_theory,
    );

    let directional = run_directional();
    let with = |f: fn(&Directional) -> Outcome| {
        let d = &directional;
        move || d.as_ref().map_err(Clone::clone).and_then(f)
    };
    report(
        6,
        "matched-budget ordering",
        None,
        &mut with(matched_budget_ordering),
    );
    report(7, "general-pool forgetting", None, &mut with(forgetting));
    report(
        8,
        "per-loop trajectory and stagnation stop",
        None,
        &mut with(trajectory),
    );
    report(9, "reproducibility", None, &mut reproducibility);

    if failures == 0 {
        println!("acceptance: all 9 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of 9 criteria failed");
        ExitCode::FAILURE
    }
}
