//! End-to-end acceptance checks. Each test prints one
//! `criterion N ... PASS|FAIL` line before asserting.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use edgecell_core::engine::{self, BenchSpec, EpisodeMetrics, SimConfig, Simulator};
use edgecell_core::jsord::{self, random::InstanceShape, OrchestrationSet, SolveMode};
use edgecell_core::lp::{self, oracle::vertex_enumeration, LpStatus};
use edgecell_core::nmac::{self, Activation, Mlp, RandomPolicy, StaticHalf, ACTION_DIM};

fn report(n: u32, name: &str, ok: bool, detail: String) {
    // Written to the stdout handle so the line survives test output capture.
    let line = format!("criterion {n} {name}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    std::io::stdout().write_all(line.as_bytes()).unwrap();
    assert!(ok, "criterion {n} {name} failed: {detail}");
}

#[test]
fn criterion_1_lp_exactness() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut gap, mut residual, mut done) = (0.0f64, 0.0f64, 0);
    while done < 200 {
        let shape = InstanceShape {
            services: rng.gen_range(1..=3),
            nodes: rng.gen_range(1..=2),
            cells: rng.gen_range(1..=3),
        };
        if shape.services * shape.nodes * shape.cells > 8 {
            continue;
        }
        let (inst, demand) = jsord::random::channel(&mut rng, shape);
        let mut set = OrchestrationSet::empty(inst.channel_id);
        for s in &inst.services {
            for c in &inst.cells {
                if rng.gen_bool(0.7) {
                    set.pairs.insert((s.key(), c.cell_id));
                }
            }
        }
        let program = jsord::build_dispatch_lp(&inst, &set, &demand);
        assert!(program.num_vars() <= 8);
        let sol = lp::solve_lp(&program).expect("solver error");
        assert_eq!(sol.status, LpStatus::Optimal);
        let (best, _) = vertex_enumeration(&program).expect("dispatch programs are feasible at zero");
        gap = gap.max((sol.objective_value - best).abs());
        let (rv, bv) = program.max_violation(&sol.y);
        residual = residual.max(rv).max(bv);
        done += 1;
    }
    let wall = t.elapsed();
    report(
        1,
        "lp exactness",
        gap <= 1e-8 && residual <= 1e-9 && wall < Duration::from_secs(10),
        format!("200 instances, max gap {gap:.2e}, max residual {residual:.2e}, {wall:.2?}"),
    );
}

#[test]
fn criterion_2_greedy_quality() {
    let t = Instant::now();
    let rep = edgecell::oracle_check(500, 3, 4, 3, 1).expect("oracle check runs");
    let wall = t.elapsed();
    let min = rep.min_ratio.unwrap();
    report(
        2,
        "greedy quality",
        min >= 0.5 && wall < Duration::from_secs(300),
        format!(
            "500 instances, min ratio {min:.4}, mean ratio {:.4}, {wall:.2?}",
            rep.mean_ratio.unwrap()
        ),
    );
}

fn frames(cfg: &SimConfig, n: usize) -> String {
    let mut sim = Simulator::new(cfg.clone()).unwrap();
    let mut policy = RandomPolicy::new(cfg.seed);
    let out: Vec<_> = (0..n).map(|_| sim.run_frame_with(&mut policy).unwrap()).collect();
    format!("{out:?}")
}

#[test]
fn criterion_3_parallel_matches_sequential() {
    let t = Instant::now();
    let mut mismatches = Vec::new();
    for seed in 1..=20u64 {
        let mut cfg = SimConfig::default();
        cfg.seed = seed;
        cfg.solve_mode = SolveMode::Parallel;
        let par = frames(&cfg, 2);
        cfg.solve_mode = SolveMode::Sequential;
        if par != frames(&cfg, 2) {
            mismatches.push(format!("frames seed {seed}"));
        }
        let inst = engine::bench_instance(
            BenchSpec {
                seed,
                ..BenchSpec::default()
            },
            &SimConfig::default(),
        )
        .unwrap();
        let (a, _) = jsord::solve_all_channels(&inst.channels, &inst.demand, SolveMode::Parallel).unwrap();
        let (b, _) = jsord::solve_all_channels(&inst.channels, &inst.demand, SolveMode::Sequential).unwrap();
        if format!("{a:?}") != format!("{b:?}") {
            mismatches.push(format!("bench seed {seed}"));
        }
    }
    report(
        3,
        "parallel equals sequential",
        mismatches.is_empty(),
        format!("20 seeds, mismatches {mismatches:?}, {:.2?}", t.elapsed()),
    );
}

#[test]
fn criterion_4_channelized_runtime() {
    let [chan, mono] = engine::run_bench(BenchSpec::default(), &SimConfig::default()).unwrap();
    let limit = 120_000.0;
    report(
        4,
        "runtime reduction",
        chan.wall_ms <= 0.5 * mono.wall_ms && chan.wall_ms < limit && mono.wall_ms < limit,
        format!(
            "channelized {:.1} ms, monolithic {:.1} ms, speedup {:.1}x",
            chan.wall_ms,
            mono.wall_ms,
            mono.wall_ms / chan.wall_ms
        ),
    );
}

fn randomize(net: &mut Mlp, rng: &mut impl Rng) {
    let p: Vec<f64> = (0..net.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    net.set_params(&p);
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-12)
}

fn central_differences(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut p = params.to_vec();
    (0..p.len())
        .map(|k| {
            let v = p[k];
            p[k] = v + h;
            let up = f(&p);
            p[k] = v - h;
            let down = f(&p);
            p[k] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn vec_of(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn criterion_5_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (sd, cd, batch) = (6, 10, 4);
    let (mut worst_actor, mut worst_critic) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let mut critic = Mlp::new(&[cd, 16, 16, 1], Activation::Linear, &mut rng);
        randomize(&mut critic, &mut rng);
        let inputs: Vec<Vec<f64>> = (0..batch).map(|_| vec_of(&mut rng, cd)).collect();
        let targets = vec_of(&mut rng, batch);
        let (_, grad) = nmac::critic_gradient(&critic, &inputs, &targets);
        let fd = central_differences(&critic.params(), |p| {
            let mut c = critic.clone();
            c.set_params(p);
            nmac::critic_gradient(&c, &inputs, &targets).0
        });
        worst_critic = worst_critic.max(rel_error(&grad.params(), &fd));

        let mut actor = Mlp::new(&[sd, 16, 16, ACTION_DIM], Activation::Sigmoid, &mut rng);
        randomize(&mut actor, &mut rng);
        let states: Vec<Vec<f64>> = (0..batch).map(|_| vec_of(&mut rng, sd)).collect();
        let offset = rng.gen_range(0..=cd - ACTION_DIM);
        let (_, grad) = nmac::actor_gradient(&actor, &critic, &states, &inputs, offset);
        let fd = central_differences(&actor.params(), |p| {
            let mut a = actor.clone();
            a.set_params(p);
            nmac::actor_gradient(&a, &critic, &states, &inputs, offset).0
        });
        worst_actor = worst_actor.max(rel_error(&grad.params(), &fd));
    }
    report(
        5,
        "gradient checks",
        worst_actor <= 1e-3 && worst_critic <= 1e-3,
        format!("20 draws each, worst relative error actor {worst_actor:.2e}, critic {worst_critic:.2e}"),
    );
}

fn mean_throughput(rows: &[EpisodeMetrics]) -> f64 {
    rows.iter().map(|r| r.throughput_rate).sum::<f64>() / rows.len() as f64
}

#[test]
fn criterion_6_learning_signal() {
    let t = Instant::now();
    let cfg = SimConfig::reference_tiny();
    let (trained, rows) = engine::train(&cfg, 300).unwrap();
    let mean = |r: &[EpisodeMetrics]| r.iter().map(|m| m.reward_mean).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&rows[..50]), mean(&rows[250..]));
    let mut paired = Vec::new();
    for seed in 1..=5 {
        let mut c = cfg.clone();
        c.seed = seed;
        let a = mean_throughput(&engine::evaluate(&c, &mut trained.policy(), 5).unwrap());
        let b = mean_throughput(&engine::evaluate(&c, &mut RandomPolicy::new(seed), 5).unwrap());
        paired.push((a, b));
    }
    let ok = last >= 1.2 * first && paired.iter().all(|(a, b)| a >= b);
    let pairs: Vec<String> = paired.iter().map(|(a, b)| format!("{a:.3}/{b:.3}")).collect();
    report(
        6,
        "learning signal",
        ok,
        format!(
            "reward first 50 {first:.3}, last 50 {last:.3}, ratio {:.2}; trained/random throughput {}; {:.2?}",
            last / first,
            pairs.join(" "),
            t.elapsed()
        ),
    );
}

#[test]
fn criterion_7_invariant_audit() {
    let t = Instant::now();
    let mut cfg = SimConfig::default();
    cfg.frames_per_episode = 50;
    let mut sim = Simulator::new(cfg.clone()).unwrap();
    let mut policy = RandomPolicy::new(cfg.seed);
    let mut problems = Vec::new();
    let mut frames = 0;
    while !sim.episode_done() {
        match sim.run_frame_with(&mut policy) {
            Ok(f) => {
                let (rate, _) = f.throughput_rate();
                if !(0.0..=1.0).contains(&rate) {
                    problems.push(format!("frame {} rate {rate}", f.frame));
                }
            }
            Err(e) => {
                problems.push(e.to_string());
                break;
            }
        }
        frames += 1;
        problems.extend(engine::audit_invariants(sim.ledger(), sim.live_cells(), &[]));
    }
    let wall = t.elapsed();
    report(
        7,
        "invariant audit",
        frames == 50 && problems.is_empty() && wall < Duration::from_secs(600),
        format!("{frames} frames, violations {problems:?}, {wall:.2?}"),
    );
}

fn horizontal(eps: f64, seed: u64, random: bool) -> f64 {
    let mut cfg = SimConfig::default();
    cfg.seed = seed;
    cfg.epsilon = eps;
    let rows = if random {
        engine::evaluate(&cfg, &mut RandomPolicy::new(seed), 1)
    } else {
        engine::evaluate(&cfg, &mut StaticHalf, 1)
    }
    .unwrap();
    rows[0].horizontal_share
}

#[test]
fn criterion_8_priority_direction() {
    let mut pairs = Vec::new();
    for seed in 1..=3 {
        pairs.push((format!("random seed {seed}"), horizontal(0.0, seed, true), horizontal(1.5, seed, true)));
    }
    pairs.push(("static_half seed 1".into(), horizontal(0.0, 1, false), horizontal(1.5, 1, false)));
    let ok = pairs.iter().all(|(_, lo, hi)| hi > lo);
    let detail: Vec<String> = pairs
        .iter()
        .map(|(n, lo, hi)| format!("{n}: eps 0 {lo:.3} vs eps 1.5 {hi:.3}"))
        .collect();
    report(8, "priority direction", ok, detail.join("; "));
}

fn run_cli(out: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_edgecell"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--no-timestamp")
        .env_remove("EDGECELL_CONFIG")
        .env_remove("EDGECELL_SEED")
        .output()
        .expect("binary runs");
    assert!(status.status.success(), "{args:?}: {}", String::from_utf8_lossy(&status.stderr));
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, serde_json::to_string(&SimConfig::reference_tiny()).unwrap()).unwrap();
    let cfg = cfg.to_str().unwrap();
    let runs: [(&str, Vec<&str>, &[&str]); 4] = [
        ("train", vec!["train", "--config", cfg, "--episodes", "8"], &["metrics.csv", "checkpoint.json"]),
        ("eval", vec!["eval", "--config", cfg, "--baseline", "random", "--episodes", "3"], &["metrics.csv"]),
        ("eval default", vec!["eval", "--baseline", "static_half", "--episodes", "1"], &["metrics.csv"]),
        ("bench", vec!["bench", "--nodes", "6", "--services", "8"], &["bench.csv"]),
    ];
    let mut differing = Vec::new();
    for (name, args, files) in &runs {
        let a = dir.path().join(format!("{name}-a"));
        let b = dir.path().join(format!("{name}-b"));
        run_cli(&a, args);
        run_cli(&b, args);
        for f in *files {
            let x = std::fs::read(a.join(f)).unwrap();
            let y = std::fs::read(b.join(f)).unwrap();
            if x != y || x.is_empty() {
                differing.push(format!("{name}/{f}"));
            }
        }
    }
    report(
        9,
        "determinism",
        differing.is_empty(),
        format!("{} subcommands rerun, differing files {differing:?}", runs.len()),
    );
}
