//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so every criterion reports even when an
//! earlier one fails. `REPORT_ONLY` criteria are printed but do not set the
//! exit status.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use pbmorl_core::domain::{make_weight, sample_weight, DiscountConfig, Label, PreferenceRecord, Segment, State, Step, Weight, WeightGrid};
use pbmorl_core::eql::{envelope_filter, greedy_action, q_distance, run_eql_oracle, run_pbmorl, NoHooks, QFunction, TabularQ, TrainerConfig};
use pbmorl_core::envs::{make_env, EnvKind, Environment, StepEncoder};
use pbmorl_core::metrics::{greedy_return, hypervolume, FrontierEstimate};
use pbmorl_core::pareto::{brute_force_frontier, convex_frontier, enumerate_policies, nonconvex_frontier, nonconvex_frontier_pairwise, EnumerateOptions, FinitePolicySet, FrontierConfig};
use pbmorl_core::replay::PreferenceBuffer;
use pbmorl_core::reward_model::{RewardModel, RewardModelConfig};
use pbmorl_core::teacher::{min_segment_length, scripted_preference, teacher_properties_check, ScriptedTeacher, TeacherQuery};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REPORT_ONLY: &[&str] = &["end-to-end DST"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let took = start.elapsed();
    (took < limit, format!("{:.1}s of {}s", took.as_secs_f64(), limit.as_secs()))
}

fn main() -> ExitCode {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("theorem suite", theorem_suite),
        ("contraction", contraction),
        ("reward-model gradient", reward_gradient),
        ("Bradley-Terry identifiability", identifiability),
        ("end-to-end FT", end_to_end_ft),
        ("end-to-end DST", end_to_end_dst),
        ("hypervolume oracle", hypervolume_oracle),
        ("teacher properties", teacher_properties),
        ("truncation corollary", truncation_corollary),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: {} [{:.1}s]", result.detail, start.elapsed().as_secs_f64());
        if !result.pass && !REPORT_ONLY.contains(&name) {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failing criteria: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}

/// Exact support test: is some simplex weight maximized (weakly) by `p`?
/// Checks every vertex of the feasible polygon of weights.
fn supported(p: &[f64], all: &[Vec<f64>]) -> bool {
    let m = p.len();
    // constraints a · (w_1 .. w_{m-1}) <= b with w_m = 1 - Σ
    let mut cons: Vec<(Vec<f64>, f64)> = Vec::new();
    for q in all {
        let d: Vec<f64> = q.iter().zip(p).map(|(a, b)| a - b).collect();
        // w · d <= 0
        let a: Vec<f64> = (0..m - 1).map(|k| d[k] - d[m - 1]).collect();
        cons.push((a, -d[m - 1]));
    }
    for k in 0..m - 1 {
        let mut a = vec![0.0; m - 1];
        a[k] = -1.0;
        cons.push((a, 0.0));
    }
    cons.push((vec![1.0; m - 1], 1.0));
    let feasible = |x: &[f64]| cons.iter().all(|(a, b)| a.iter().zip(x).map(|(u, v)| u * v).sum::<f64>() <= b + 1e-9);
    match m {
        2 => {
            let mut pts = vec![];
            for (a, b) in &cons {
                if a[0].abs() > 1e-15 {
                    pts.push(b / a[0]);
                }
            }
            pts.iter().any(|x| feasible(&[*x]))
        }
        3 => {
            for i in 0..cons.len() {
                for j in i + 1..cons.len() {
                    let (a1, b1) = &cons[i];
                    let (a2, b2) = &cons[j];
                    let det = a1[0] * a2[1] - a1[1] * a2[0];
                    if det.abs() < 1e-15 {
                        continue;
                    }
                    let x = (b1 * a2[1] - b2 * a1[1]) / det;
                    let y = (a1[0] * b2 - a2[0] * b1) / det;
                    if feasible(&[x, y]) {
                        return true;
                    }
                }
            }
            false
        }
        _ => unreachable!(),
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let m = rng.random_range(2..=3);
    let n = rng.random_range(5..=30);
    let concave = rng.random_bool(0.5);
    (0..n)
        .map(|_| {
            if concave {
                // on a sphere in the positive orthant, sometimes pulled inward
                let u: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
                let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let r = if rng.random_bool(0.7) { 10.0 } else { rng.random_range(3.0..9.0) };
                u.iter().map(|x| r * x / norm).collect()
            } else {
                (0..m).map(|_| rng.random_range(0.0..10.0)).collect()
            }
        })
        .collect()
}

fn theorem_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let teacher = ScriptedTeacher::new(DiscountConfig::new(0.99).unwrap());
    let cfg = FrontierConfig::new(DiscountConfig::new(0.99).unwrap());
    let (mut equal_cases, mut mismatches) = (0, Vec::new());
    for case in 0..200 {
        let returns = random_instance(&mut rng);
        let m = returns[0].len();
        let ps = FinitePolicySet::from_returns(&returns);
        let brute: BTreeSet<usize> = brute_force_frontier(&returns).unwrap().into_iter().collect();
        let insertion: BTreeSet<usize> = nonconvex_frontier(&ps, &teacher, 1, &cfg).unwrap().into_iter().collect();
        let pairwise: BTreeSet<usize> = nonconvex_frontier_pairwise(&ps, &teacher, 1, &cfg).unwrap().into_iter().collect();
        let grid = WeightGrid::new(m, if m == 2 { 100 } else { 30 }).unwrap();
        let convex: BTreeSet<usize> = convex_frontier(&ps, grid.points(), &teacher, 1, &cfg).unwrap().into_iter().collect();
        if insertion != brute || pairwise != brute {
            mismatches.push(format!("case {case}: nonconvex differs"));
        }
        if !convex.is_subset(&brute) {
            mismatches.push(format!("case {case}: convex not a subset"));
        }
        // direct per-weight argmax sets on the same grid
        let mut by_grid = BTreeSet::new();
        for w in grid.points() {
            let best = returns.iter().map(|r| w.dot(r)).fold(f64::NEG_INFINITY, f64::max);
            by_grid.extend((0..returns.len()).filter(|&i| w.dot(&returns[i]) >= best - 1e-12));
        }
        let front: Vec<Vec<f64>> = brute.iter().map(|&i| returns[i].clone()).collect();
        let all_supported = front.iter().all(|p| supported(p, &returns));
        if all_supported && by_grid == brute {
            equal_cases += 1;
            if convex != brute {
                mismatches.push(format!("case {case}: convex misses a supported point"));
            }
        }
    }
    let (fast, timing) = within(Duration::from_secs(30), start);
    outcome(
        mismatches.is_empty() && fast && equal_cases > 0,
        format!(
            "200 instances, {equal_cases} fully supported, {} mismatches{}, {timing}",
            mismatches.len(),
            mismatches.first().map_or(String::new(), |m| format!(" (first: {m})"))
        ),
    )
}

struct Mdp {
    n_states: usize,
    n_actions: usize,
    // [s][a] -> distribution over s'
    p: Vec<Vec<Vec<f64>>>,
    r: Vec<Vec<Vec<f64>>>,
}

fn random_mdp(rng: &mut ChaCha8Rng) -> Mdp {
    let n_states = rng.random_range(2..=10);
    let n_actions = rng.random_range(1..=4);
    let p = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| {
                    let raw: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>()).collect();
                    let z: f64 = raw.iter().sum();
                    raw.iter().map(|x| x / z).collect()
                })
                .collect()
        })
        .collect();
    let r = (0..n_states)
        .map(|_| (0..n_actions).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect())
        .collect();
    Mdp { n_states, n_actions, p, r }
}

fn random_q(mdp: &Mdp, grid: &WeightGrid, rng: &mut ChaCha8Rng) -> TabularQ {
    let mut q = TabularQ::new(mdp.n_states, mdp.n_actions, grid.clone());
    q.table_mut().iter_mut().for_each(|x| *x = rng.random_range(-10.0..10.0));
    q
}

/// `(BQ)(s, a, w) = r(s, a) + γ Σ_s' P(s' | s, a) · H(Q)(s', w)`, the filter
/// taken over every grid weight.
fn bellman(mdp: &Mdp, q: &TabularQ, gamma: f64) -> TabularQ {
    let grid = q.grid().clone();
    let qf = QFunction::Tabular(q.clone());
    let mut out = TabularQ::new(mdp.n_states, mdp.n_actions, grid.clone());
    for (wi, w) in grid.points().iter().enumerate() {
        let h: Vec<Vec<f64>> = (0..mdp.n_states)
            .map(|s| envelope_filter(&qf, &State::Discrete(s), w, grid.points()).unwrap())
            .collect();
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let mut v = mdp.r[s][a].clone();
                for (s2, p) in mdp.p[s][a].iter().enumerate() {
                    for k in 0..2 {
                        v[k] += gamma * p * h[s2][k];
                    }
                }
                out.set(s, wi, a, &v);
            }
        }
    }
    out
}

fn contraction() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let grid = WeightGrid::new(2, 10).unwrap();
    let gamma = 0.99;
    let (mut checks, mut worst, mut violations) = (0, 0.0f64, 0);
    for _ in 0..100 {
        let mdp = random_mdp(&mut rng);
        for _ in 0..3 {
            let q1 = random_q(&mdp, &grid, &mut rng);
            let q2 = random_q(&mdp, &grid, &mut rng);
            let before = q_distance(&q1, &q2).unwrap();
            let after = q_distance(&bellman(&mdp, &q1, gamma), &bellman(&mdp, &q2, gamma)).unwrap();
            checks += 1;
            worst = worst.max(after / before);
            if after > gamma * before + 1e-9 {
                violations += 1;
            }
        }
    }
    let (fast, timing) = within(Duration::from_secs(10), start);
    outcome(
        violations == 0 && fast,
        format!("{checks} pairs on 100 MDPs, worst ratio {worst:.4}, {violations} violations, {timing}"),
    )
}

fn toy_records(rng: &mut ChaCha8Rng, n_states: usize, n_actions: usize, m: usize, count: usize) -> Vec<PreferenceRecord> {
    let seg = |rng: &mut ChaCha8Rng| {
        let steps = (0..3).map(|_| Step::new(State::Discrete(rng.random_range(0..n_states)), rng.random_range(0..n_actions))).collect();
        Segment::padded(steps, rng.random_range(0..2)).unwrap()
    };
    (0..count)
        .map(|i| PreferenceRecord {
            first: seg(rng),
            second: seg(rng),
            weight: sample_weight(rng, m),
            label: [Label::FirstPreferred, Label::Indifferent, Label::SecondPreferred][i % 3],
        })
        .collect()
}

fn reward_gradient() -> Outcome {
    let env = make_env(EnvKind::DeepSeaTreasure, 0.99).unwrap();
    let spec = env.spec();
    let cfg = DiscountConfig::new(0.9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let records = toy_records(&mut rng, spec.n_states().unwrap(), spec.n_actions(), spec.m, 12);
    let refs: Vec<&PreferenceRecord> = records.iter().collect();
    let mut worst = 0.0f64;
    for bounded in [false, true] {
        let mcfg = RewardModelConfig {
            hidden: vec![6, 5],
            bounded,
            ..Default::default()
        };
        let mut model = RewardModel::new(spec, &mcfg, 1);
        model.params_mut().iter_mut().for_each(|p| *p = rng.random_range(-0.8..0.8));
        let (_, grad) = model.loss_and_grad(&refs, &cfg).unwrap();
        // fourth-order central difference
        let h = 1e-3;
        for i in 0..grad.len() {
            let keep = model.params()[i];
            let mut at = |x: f64| {
                model.params_mut()[i] = x;
                model.preference_loss(&records, &cfg).unwrap()
            };
            let numeric = (at(keep - 2.0 * h) - 8.0 * at(keep - h) + 8.0 * at(keep + h) - at(keep + 2.0 * h)) / (12.0 * h);
            model.params_mut()[i] = keep;
            let scale = grad[i].abs().max(numeric.abs());
            if scale > 1e-9 {
                worst = worst.max((grad[i] - numeric).abs() / scale);
            }
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over linear and bounded heads"))
}

/// Random walks on deep-sea treasure cut into fixed-length segments.
fn dst_segments(env: &dyn Environment, count: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let mut sim = env.clone_box();
    let n_actions = env.spec().n_actions();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut s = sim.reset(rng.random());
        let mut steps = Vec::new();
        for _ in 0..h {
            let a = rng.random_range(0..n_actions);
            steps.push(Step::new(s.clone(), a));
            let o = sim.step(a, rng).unwrap();
            if o.terminated || o.truncated {
                break;
            }
            s = o.next_state;
        }
        let absorbing = h - steps.len();
        out.push(Segment::padded(steps, absorbing).unwrap());
    }
    out
}

fn identifiability() -> Outcome {
    let start = Instant::now();
    let env = make_env(EnvKind::DeepSeaTreasure, 0.99).unwrap();
    let spec = env.spec().clone();
    let disc = DiscountConfig::new(0.99).unwrap();
    let encoder = StepEncoder::new(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let truth: Vec<Vec<f64>> = (0..spec.m).map(|_| (0..encoder.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let reward = |s: &Step| -> Vec<f64> {
        let x = encoder.encode(&s.state, s.action).unwrap();
        truth.iter().map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum()).collect()
    };
    let h = spec.segment_length;
    let make = |n: usize, rng: &mut ChaCha8Rng| -> Vec<PreferenceRecord> {
        let segs = dst_segments(env.as_ref(), 2 * n, h, rng);
        segs.chunks(2)
            .enumerate()
            .map(|(i, pair)| {
                let gt = |s: &Segment| s.steps().iter().map(reward).collect::<Vec<_>>();
                let q = TeacherQuery::new(i as u64, pair[0].clone(), pair[1].clone(), sample_weight(rng, spec.m))
                    .unwrap()
                    .with_ground_truth(gt(&pair[0]), gt(&pair[1]));
                q.answer(scripted_preference(&q, &disc).unwrap())
            })
            .collect()
    };
    let train = make(1000, &mut rng);
    let held = make(500, &mut rng);
    let mut prefs = PreferenceBuffer::new();
    prefs.extend(train);
    let mut model = RewardModel::new(
        &spec,
        &RewardModelConfig {
            validation: false,
            learning_rate: 1e-3,
            batch: 64,
            ..Default::default()
        },
        4,
    );
    model.train(&prefs, 1500, &disc, 9).unwrap();
    let held_refs: Vec<&PreferenceRecord> = held.iter().collect();
    let acc = model.accuracy(&held_refs, &disc).unwrap().unwrap_or(0.0);
    let (fast, timing) = within(Duration::from_secs(120), start);
    outcome(acc >= 0.9 && fast, format!("held-out accuracy {:.1}% on 500 pairs after 1000 training labels, {timing}", acc * 100.0))
}

fn end_to_end_ft() -> Outcome {
    let start = Instant::now();
    let env = make_env(EnvKind::FruitTree, 0.99).unwrap();
    let cfg = TrainerConfig::desk(EnvKind::FruitTree);
    let (mut oracle, mut pb) = (0.0, 0.0);
    for seed in 1..=3 {
        let o = run_eql_oracle(env.as_ref(), &cfg, seed, &mut NoHooks).unwrap();
        let mut teacher = ScriptedTeacher::new(DiscountConfig::new(cfg.gamma).unwrap());
        let p = run_pbmorl(env.as_ref(), &mut teacher, &cfg, seed, &mut NoHooks).unwrap();
        oracle += o.metrics.last().unwrap().eu / 3.0;
        pb += p.metrics.last().unwrap().eu / 3.0;
    }
    let ratio = pb / oracle;
    let (fast, timing) = within(Duration::from_secs(600), start);
    outcome(
        ratio >= 0.95 && fast,
        format!("{} steps x 3 seeds: EU {pb:.4} vs oracle {oracle:.4}, ratio {ratio:.3}, {timing}", cfg.total_timesteps),
    )
}

/// Grid weights at which the greedy policy attains the best enumerated
/// scalarized return.
fn dst_hits(env: &dyn Environment, q: &QFunction, best: &[Vec<f64>], grid: &WeightGrid) -> usize {
    let mut sim = env.clone_box();
    grid.points()
        .iter()
        .filter(|w| {
            let top = best.iter().map(|r| w.dot(r)).fold(f64::NEG_INFINITY, f64::max);
            let got = w.dot(&greedy_return(sim.as_mut(), q, w, 0.99, 0).unwrap());
            got >= top - 1e-6
        })
        .count()
}

fn end_to_end_dst() -> Outcome {
    let start = Instant::now();
    let env = make_env(EnvKind::DeepSeaTreasure, 0.99).unwrap();
    let cfg = TrainerConfig::desk(EnvKind::DeepSeaTreasure);
    let returns = enumerate_policies(env.as_ref(), &EnumerateOptions::default()).unwrap().returns(0.99);
    let grid = WeightGrid::new(2, 10).unwrap();
    let o = run_eql_oracle(env.as_ref(), &cfg, 1, &mut NoHooks).unwrap();
    let mut teacher = ScriptedTeacher::new(DiscountConfig::new(cfg.gamma).unwrap());
    let p = run_pbmorl(env.as_ref(), &mut teacher, &cfg, 1, &mut NoHooks).unwrap();
    let oracle_hits = dst_hits(env.as_ref(), &o.q, &returns, &grid);
    let pb_hits = dst_hits(env.as_ref(), &p.q, &returns, &grid);
    let (fast, timing) = within(Duration::from_secs(600), start);
    outcome(
        oracle_hits == 11 && pb_hits >= 9 && fast,
        format!("{} steps: oracle {oracle_hits}/11 (needs 11), Pb-MORL {pb_hits}/11 (needs 9), {timing}", cfg.total_timesteps),
    )
}

fn monte_carlo_hv(points: &[Vec<f64>], samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let upper: Vec<f64> = (0..3).map(|k| points.iter().map(|p| p[k]).fold(0.0, f64::max)).collect();
    let mut hits = 0usize;
    let mut x = [0.0; 3];
    for _ in 0..samples {
        for k in 0..3 {
            x[k] = rng.random::<f64>() * upper[k];
        }
        if points.iter().any(|p| p.iter().zip(&x).all(|(a, b)| a >= b)) {
            hits += 1;
        }
    }
    upper.iter().product::<f64>() * hits as f64 / samples as f64
}

fn hypervolume_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(3..=15);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(0.5..5.0)).collect()).collect();
        let exact = hypervolume(&FrontierEstimate {
            points: points.clone(),
            reference: vec![0.0; 3],
        })
        .unwrap();
        let mc = monte_carlo_hv(&points, 400_000, &mut rng);
        worst = worst.max((exact - mc).abs() / mc);
    }
    let example = hypervolume(&FrontierEstimate {
        points: vec![vec![2.0, 1.0], vec![1.0, 2.0]],
        reference: vec![0.0, 0.0],
    })
    .unwrap();
    outcome(
        worst < 0.01 && example == 3.0,
        format!("worst relative gap {:.3}% over 50 fronts, 2-D example {example}", worst * 100.0),
    )
}

fn teacher_properties() -> Outcome {
    let env = make_env(EnvKind::DeepSeaTreasure, 0.99).unwrap();
    let disc = DiscountConfig::new(0.99).unwrap();
    let teacher = ScriptedTeacher::new(disc);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h = env.spec().segment_length;
    let mut queries = Vec::new();
    let truth = |s: &Segment, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        s.steps().iter().map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
    };
    for t in 0..1000u64 {
        let segs = dst_segments(env.as_ref(), 3, h, &mut rng);
        let rewards: Vec<Vec<Vec<f64>>> = segs.iter().map(|s| truth(s, &mut rng)).collect();
        let w = sample_weight(&mut rng, 2);
        for (k, (i, j)) in [(0, 1), (1, 2), (0, 2)].into_iter().enumerate() {
            queries.push(
                TeacherQuery::new(3 * t + k as u64, segs[i].clone(), segs[j].clone(), w.clone())
                    .unwrap()
                    .with_ground_truth(rewards[i].clone(), rewards[j].clone()),
            );
        }
    }
    let report = teacher_properties_check(&teacher, &queries);
    outcome(
        report.is_clean() && report.transitivity_checks > 0,
        format!(
            "{} queries, {} transitivity chains, {} violations",
            report.queries,
            report.transitivity_checks,
            report.violations.len()
        ),
    )
}

/// `c_head` for `k` steps then `c_tail` forever.
struct Stream {
    k: usize,
    head: Vec<f64>,
    tail: Vec<f64>,
}

impl Stream {
    fn full(&self, w: &Weight, gamma: f64) -> f64 {
        let gk = gamma.powi(self.k as i32);
        (1.0 - gk) / (1.0 - gamma) * w.dot(&self.head) + gk / (1.0 - gamma) * w.dot(&self.tail)
    }

    fn rewards(&self, h: usize) -> Vec<Vec<f64>> {
        (0..h).map(|t| if t < self.k { self.head.clone() } else { self.tail.clone() }).collect()
    }
}

fn truncated_label(a: &Stream, b: &Stream, w: &Weight, h: usize, disc: &DiscountConfig) -> Label {
    let seg = |id: usize| Segment::new((0..h).map(|_| Step::new(State::Discrete(id), 0)).collect()).unwrap();
    let q = TeacherQuery::new(0, seg(0), seg(1), w.clone())
        .unwrap()
        .with_ground_truth(a.rewards(h), b.rewards(h));
    scripted_preference(&q, disc).unwrap()
}

fn full_label(a: &Stream, b: &Stream, w: &Weight, gamma: f64) -> Label {
    if b.full(w, gamma) > a.full(w, gamma) {
        Label::SecondPreferred
    } else {
        Label::FirstPreferred
    }
}

fn truncation_corollary() -> Outcome {
    let gamma = 0.99;
    let disc = DiscountConfig::new(gamma).unwrap();
    let h = min_segment_length(1.0, &disc, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut tested, mut disagreements) = (0, 0);
    while tested < 300 {
        let mut stream = || {
            let c = rng.random_range(-1.0..1.0);
            let d = rng.random_range(-1.0..1.0);
            Stream {
                k: rng.random_range(0..700),
                head: vec![c, c],
                tail: vec![d, d],
            }
        };
        let (a, b) = (stream(), stream());
        let w = sample_weight(&mut rng, 2);
        if (a.full(&w, gamma) - b.full(&w, gamma)).abs() < 1.0 {
            continue;
        }
        tested += 1;
        if truncated_label(&a, &b, &w, h, &disc) != full_label(&a, &b, &w, gamma) {
            disagreements += 1;
        }
    }
    let w = make_weight(&[0.5, 0.5]).unwrap();
    let early = Stream {
        k: 5,
        head: vec![1.0, 1.0],
        tail: vec![-1.0, -1.0],
    };
    let zero = Stream {
        k: 0,
        head: vec![0.0, 0.0],
        tail: vec![0.0, 0.0],
    };
    let short = truncated_label(&early, &zero, &w, 5, &disc);
    let full = full_label(&early, &zero, &w, gamma);
    outcome(
        h == 528 && disagreements == 0 && short != full,
        format!("H = {h}: {disagreements} of {tested} pairs disagree; H = 5 counterexample truncated {short:?} vs full {full:?}"),
    )
}

fn determinism() -> Outcome {
    let env = make_env(EnvKind::FruitTree, 0.99).unwrap();
    let cfg = TrainerConfig {
        total_timesteps: 6000,
        eval_interval: 2000,
        ..TrainerConfig::desk(EnvKind::FruitTree)
    };
    let log = || {
        let mut teacher = ScriptedTeacher::new(DiscountConfig::new(cfg.gamma).unwrap());
        let out = run_pbmorl(env.as_ref(), &mut teacher, &cfg, 42, &mut NoHooks).unwrap();
        let start = env.clone_box().reset(0);
        let greedy = greedy_action(&out.q, &start, &Weight::vertex(6, 0)).unwrap();
        (serde_json::to_vec(&out.metrics).unwrap(), greedy)
    };
    let (a, ga) = log();
    let (b, gb) = log();
    outcome(a == b && ga == gb && !a.is_empty(), format!("{} bytes of metric log, identical: {}", a.len(), a == b))
}
