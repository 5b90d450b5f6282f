use criterion::{black_box, criterion_group, criterion_main, Criterion};
use npu_prefill::scheduler::{random_instance, schedule_greedy, schedule_inorder, schedule_optimal};

fn schedulers(c: &mut Criterion) {
    let instances: Vec<_> = (0..32).map(|i| random_instance(3, i, 3, 4).unwrap()).collect();
    c.bench_function("greedy", |b| {
        b.iter(|| {
            for inst in &instances {
                black_box(schedule_greedy(&inst.graph, &inst.costs).unwrap());
            }
        })
    });
    c.bench_function("inorder", |b| {
        b.iter(|| {
            for inst in &instances {
                black_box(schedule_inorder(&inst.graph, &inst.costs).unwrap());
            }
        })
    });
    c.bench_function("optimal", |b| {
        b.iter(|| {
            for inst in &instances {
                black_box(schedule_optimal(&inst.graph, &inst.costs, 12).unwrap());
            }
        })
    });
}

criterion_group!(benches, schedulers);
criterion_main!(benches);
