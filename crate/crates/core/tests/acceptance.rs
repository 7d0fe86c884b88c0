//! End-to-end acceptance run on the Double Tank benchmark. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use isto::cia::{evaluate_eta, is_dwell_feasible, solve_cia, solve_cia_bnb, BinaryGrid, CiaOptions, DwellConstraints, RelaxedGrid, TIE_TOL};
use isto::model::{reference, simulate, DoubleTankParams, ProblemSpec};
use isto::nlp::{check_derivatives, NlpProblem, SolveStatus, SolverOptions};
use isto::relaxed::{solve_relaxed, transcribe_relaxed, RelaxedSolution};
use isto::seqopt::{double_tank_initial_sequence, run_isto, uptime_bounds, IstoOptions, IstoOutcome};
use isto::sto::{transcribe_sto, DurationSet, Sequence, StageCost, StoSetup};
use isto::Execution;

struct Tally {
    failed: Vec<String>,
}

impl Tally {
    fn line(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(name.to_string());
        }
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target.abs()
}

fn relaxed_solve(t: &mut Tally, spec: &ProblemSpec) -> RelaxedSolution {
    let clock = Instant::now();
    let sol = solve_relaxed(spec, 300, &SolverOptions::default()).expect("relaxed solve");
    let secs = clock.elapsed().as_secs_f64();
    let ok = within(sol.objective_value, 18.239, 0.02) && sol.nlp.status == SolveStatus::Converged && secs < 60.0;
    t.line(
        "1 relaxed solve",
        ok,
        format!("objective {:.4} (target 18.239 +-2%), status {:?}, {:.2} s (< 60 s)", sol.objective_value, sol.nlp.status, secs),
    );
    sol
}

fn projection(t: &mut Tally, spec: &ProblemSpec, relaxed: &RelaxedSolution) -> f64 {
    let cia = solve_cia_bnb(&relaxed.control_grid, 0.5).expect("projection");
    let traj = simulate(spec, &cia.grid.to_schedule(relaxed.trajectory.continuous.clone()).unwrap(), &spec.x0).unwrap();
    let cost = traj.total_cost();
    let dev = traj.times.iter().zip(&traj.states).map(|(&tm, x)| (x[1] - reference(tm)).abs()).fold(0.0, f64::max);
    t.line(
        "2 projection fails to track",
        cost > 100.0 && dev > 0.3,
        format!("simulated cost {cost:.2} (> 100), max |x2 - r| {dev:.3} (> 0.3), eta {:.4}", cia.bound.eta),
    );
    cost
}

fn run(spec: &ProblemSpec, up: f64) -> IstoOutcome {
    let seq = double_tank_initial_sequence();
    run_isto(spec, &seq, &uptime_bounds(&seq, up), &IstoOptions::default()).expect("iterative STO")
}

fn describe(o: &IstoOutcome) -> String {
    let seq: Vec<String> = o
        .solution
        .sequence
        .stages
        .iter()
        .map(|s| s.iter().map(|&v| if v > 0.5 { '1' } else { '0' }).collect())
        .collect();
    format!("{} iterations, final [{}], cost {:.4}", o.records.len(), seq.join(","), o.solution.cost)
}

fn isto_uptime(t: &mut Tally, spec: &ProblemSpec) -> IstoOutcome {
    let o = run(spec, 0.5);
    let single = o.solution.sequence.stages == vec![vec![0.0, 1.0]];
    let ok = o.records.len() == 6 && single && within(o.solution.cost, 19.406, 0.02);
    t.line(
        "3 iSTO with 0.5 s uptime",
        ok,
        format!(
            "{} (targets: 6 iterations {}, final [01] {}, cost 19.406 +-2% {})",
            describe(&o),
            o.records.len() == 6,
            single,
            within(o.solution.cost, 19.406, 0.02)
        ),
    );
    o
}

fn isto_free(t: &mut Tally, spec: &ProblemSpec) -> IstoOutcome {
    let o = run(spec, 0.0);
    // a u1 stage overlapping the early peak window around t = 0.5 s
    let starts: Vec<f64> = std::iter::once(0.0)
        .chain(o.solution.durations.w.iter().scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        }))
        .collect();
    let peak_by_u1 = o.solution.sequence.stages.iter().enumerate().any(|(i, s)| {
        s[0] > 0.5 && o.solution.durations.w[i] > 0.0 && starts[i] < 1.0 && starts[i + 1] > 0.25
    });
    let ok = o.records.len() == 3 && within(o.solution.cost, 18.702, 0.02) && peak_by_u1;
    t.line(
        "4 iSTO without uptime",
        ok,
        format!(
            "{} (targets: 3 iterations {}, cost 18.702 +-2% {}, u1 stage within [0.25, 1.0] s {})",
            describe(&o),
            o.records.len() == 3,
            within(o.solution.cost, 18.702, 0.02),
            peak_by_u1
        ),
    );
    o
}

fn ordering(t: &mut Tally, costs: [f64; 4]) {
    let ok = costs.windows(2).all(|w| w[1] >= 1.01 * w[0]);
    t.line(
        "5 cost ordering",
        ok,
        format!(
            "relaxed {:.4} < iSTO free {:.4} < iSTO uptime {:.4} < projected {:.2}, each step >= 1%",
            costs[0], costs[1], costs[2], costs[3]
        ),
    );
}

fn transform_identities(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst: f64 = 0.0;
    let mut min_rule = true;
    for _ in 0..1000 {
        let ns = rng.gen_range(1..8);
        let with_zero = rng.gen_bool(0.3);
        let w: Vec<f64> = (0..ns)
            .map(|_| if with_zero && rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.01..5.0) })
            .collect();
        if w.iter().all(|&v| v == 0.0) {
            continue;
        }
        let d = DurationSet::new(w.clone()).unwrap();
        let total = d.total();
        for _ in 0..10 {
            let tau = rng.gen_range(0.0..ns as f64);
            let back = d.tau_of_time(d.time_of_tau(tau).unwrap()).unwrap();
            if w.iter().all(|&v| v > 0.0) {
                worst = worst.max((back - tau).abs());
                let tt = rng.gen_range(0.0..total);
                worst = worst.max((d.time_of_tau(d.tau_of_time(tt).unwrap()).unwrap() - tt).abs());
            } else {
                min_rule &= back <= tau + 1e-12;
            }
        }
    }
    (worst < 1e-12 && min_rule, format!("max round-trip error {worst:.2e}, min rule holds {min_rule}"))
}

fn derivative_checks(spec: &ProblemSpec, rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst: f64 = 0.0;
    let relaxed = transcribe_relaxed(spec, 30).unwrap();
    let seq = Sequence::new(vec![vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
    let sto = transcribe_sto(spec, &seq, &StoSetup::uniform(3, 10, 0.5, StageCost { a: 1.0, b: 0.5 })).unwrap();
    let problems: [&dyn NlpProblem; 2] = [&relaxed, &sto];
    for p in problems {
        let (lo, hi) = p.bounds();
        for _ in 0..10 {
            let z: Vec<f64> = (0..p.num_variables())
                .map(|i| rng.gen_range(lo[i].max(0.2)..hi[i].min(5.0)))
                .collect();
            let r = check_derivatives(p, &z, Execution::Sequential);
            worst = worst.max(r.max_gradient_error).max(r.max_jacobian_error);
        }
    }
    (worst < 1e-5, format!("max relative error {worst:.2e} over 10 points per transcription"))
}

/// Naive minimum-uptime check: every on-run that ends before the horizon
/// lasts at least `up`.
fn naive_feasible(grid: &RelaxedGrid, word: &[Vec<u8>], up: f64) -> bool {
    let n = word.len();
    (0..word[0].len()).all(|i| {
        let mut run = 0.0;
        for k in 0..n {
            if word[k][i] == 1 {
                run += grid.intervals[k][1] - grid.intervals[k][0];
                let ends = k + 1 == n || word[k + 1][i] == 0;
                if ends && k + 1 < n && run < up - 1e-9 {
                    return false;
                }
            } else {
                run = 0.0;
            }
        }
        true
    })
}

fn cia_checks(rng: &mut ChaCha8Rng) -> (bool, bool, String) {
    let mut agree = 0;
    let mut dwell_ok = true;
    for _ in 0..100 {
        let n = rng.gen_range(1..=8);
        let mut t = 0.0;
        let intervals: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                let a = t;
                t += rng.gen_range(0.1..1.0);
                [a, t]
            })
            .collect();
        let values: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
        let grid = RelaxedGrid { intervals, values };
        let up = [0.0, 0.3, 0.8, 1.5][rng.gen_range(0..4)];
        let bits = 2 * n;
        let mut best: Option<(f64, Vec<Vec<u8>>)> = None;
        // codes ascend in time-major lexicographic order, so the first tie wins
        for code in 0u32..1 << bits {
            let word: Vec<Vec<u8>> =
                (0..n).map(|k| (0..2).map(|i| ((code >> (bits - 1 - (2 * k + i))) & 1) as u8).collect()).collect();
            if !naive_feasible(&grid, &word, up) {
                continue;
            }
            let eta = evaluate_eta(&grid, &BinaryGrid { intervals: grid.intervals.clone(), values: word.clone() })
                .unwrap()
                .eta;
            if best.as_ref().is_none_or(|b| eta < b.0 - TIE_TOL) {
                best = Some((eta, word));
            }
        }
        let (eta, word) = best.expect("all-zero word is feasible");
        let sol = solve_cia(&grid, &CiaOptions { constraints: DwellConstraints::min_uptime(up), ..CiaOptions::default() }).unwrap();
        if (sol.bound.eta - eta).abs() <= TIE_TOL && sol.grid.values == word {
            agree += 1;
        }
        dwell_ok &= is_dwell_feasible(&sol.grid, &DwellConstraints::min_uptime(up));
    }
    (agree == 100, dwell_ok, format!("{agree}/100 instances match enumeration (eta and tie-break winner)"))
}

fn properties(t: &mut Tally, spec: &ProblemSpec, runs: &[&IstoOutcome]) {
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    let (ok, detail) = transform_identities(&mut rng);
    t.line("6a time-transform identities", ok, detail);
    let (ok, detail) = derivative_checks(spec, &mut rng);
    t.line("6b transcription derivatives", ok, detail);
    let (ok, dwell, detail) = cia_checks(&mut rng);
    t.line("6c CIA branch and bound vs enumeration", ok, detail);
    t.line("6d dwell feasibility of every BnB output", dwell, "checked on the 100 instances above".into());

    let mut worst: f64 = 0.0;
    let mut solves = 0;
    for o in runs {
        for r in &o.records {
            worst = worst.max((r.w.iter().sum::<f64>() - spec.duration()).abs());
            solves += 1;
        }
    }
    t.line("6e durations sum to the horizon", worst < 1e-7, format!("max |sum w - tf| {worst:.2e} over {solves} STO solves"));

    let single = Sequence::new(vec![vec![0.0, 1.0]]);
    let fixed = run_isto(spec, &single, &[0.0], &IstoOptions::default()).unwrap();
    let ok = fixed.records.len() == 1 && fixed.records[0].removed.is_empty();
    t.line("6f single optimal stage is a fixed point", ok, format!("{} iteration(s), removed {:?}", fixed.records.len(), fixed.records[0].removed));

    let seq = Sequence::new(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
    let go = || run_isto(spec, &seq, &uptime_bounds(&seq, 0.5), &IstoOptions::default()).unwrap();
    let (a, b) = (go(), go());
    let strip = |o: &IstoOutcome| {
        let mut recs = o.records.clone();
        recs.iter_mut().for_each(|r| r.wall_time = 0.0);
        (serde_json::to_string(&recs).unwrap(), serde_json::to_string(&o.solution.report()).unwrap())
    };
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    a.solution.trajectory.write_csv(spec, &mut csv_a).unwrap();
    b.solution.trajectory.write_csv(spec, &mut csv_b).unwrap();
    t.line(
        "6g determinism",
        strip(&a) == strip(&b) && csv_a == csv_b,
        "two runs give identical logs, reports and trajectory CSVs".into(),
    );
}

fn main() {
    let spec = DoubleTankParams::default().problem();
    let mut t = Tally { failed: Vec::new() };
    let clock = Instant::now();
    let relaxed = relaxed_solve(&mut t, &spec);
    let relaxed_secs = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let projected = projection(&mut t, &spec, &relaxed);
    let projection_secs = clock.elapsed().as_secs_f64();
    let up = isto_uptime(&mut t, &spec);
    let free = isto_free(&mut t, &spec);
    ordering(&mut t, [relaxed.objective_value, free.solution.cost, up.solution.cost, projected]);
    properties(&mut t, &spec, &[&up, &free]);

    let times = |o: &IstoOutcome| o.records.iter().map(|r| format!("{:.2}", r.wall_time)).collect::<Vec<_>>().join(", ");
    t.line(
        "7 wall-clock (reported only)",
        true,
        format!(
            "relaxed {relaxed_secs:.2} s (published 0.5), projection {projection_secs:.2} s (published 0.8), \
             iSTO uptime [{}] (published [0.53, 0.20, 0.11, 0.10, 0.26, 0.12]), iSTO free [{}] (published [0.54, 0.13, 0.11])",
            times(&up),
            times(&free)
        ),
    );

    if t.failed.is_empty() {
        println!("all acceptance criteria pass");
    } else {
        println!("failed criteria: {}", t.failed.join("; "));
        std::process::exit(1);
    }
}
