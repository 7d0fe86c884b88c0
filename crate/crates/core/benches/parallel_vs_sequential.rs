use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use isto::model::DoubleTankParams;
use isto::nlp::{NlpProblem, SolverOptions};
use isto::relaxed::{solve_relaxed, RelaxedTranscription};
use isto::Execution;

fn evaluation(c: &mut Criterion) {
    let spec = DoubleTankParams::default().problem();
    let mut group = c.benchmark_group("relaxed_evaluation");
    for nodes in [300, 3000] {
        for exec in [Execution::Sequential, Execution::Parallel] {
            let tr = RelaxedTranscription::new(&spec, nodes).unwrap().with_execution(exec);
            let z = tr.initial_guess();
            let mut grad = vec![0.0; z.len()];
            let mut cons = vec![0.0; tr.num_constraints()];
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), nodes), &z, |b, z| {
                b.iter(|| {
                    let f = tr.objective(z, &mut grad);
                    tr.constraints(z, &mut cons);
                    (f, tr.jacobian(z))
                })
            });
        }
    }
    group.finish();
}

fn solve(c: &mut Criterion) {
    let spec = DoubleTankParams::default().problem();
    let mut group = c.benchmark_group("relaxed_solve");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let opts = SolverOptions { execution: exec, ..SolverOptions::default() };
        group.bench_function(format!("{exec:?}"), |b| b.iter(|| solve_relaxed(&spec, 300, &opts).unwrap().objective_value));
    }
    group.finish();
}

criterion_group!(benches, evaluation, solve);
criterion_main!(benches);
