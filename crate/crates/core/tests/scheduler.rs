use npu_prefill::graph::Processor;
use npu_prefill::scheduler::{
    build_dependencies, random_instance, schedule_greedy, schedule_inorder, schedule_optimal, validate_schedule,
    NodeCosts, StageDesc,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_schedule_is_valid(seed in any::<u64>(), idx in 0u64..1000) {
        let inst = random_instance(seed, idx, 3, 4).unwrap();
        let (g, c) = (&inst.graph, &inst.costs);
        let greedy = schedule_greedy(g, c).unwrap();
        let inorder = schedule_inorder(g, c).unwrap();
        let opt = schedule_optimal(g, c, 12).unwrap();
        for r in [&greedy, &inorder, &opt] {
            validate_schedule(g, c, r).unwrap();
        }
        prop_assert!(opt.makespan <= greedy.makespan);
        prop_assert!(opt.makespan <= inorder.makespan);
        // no schedule beats the busier processor's total work
        let (npu, cpu) = c.totals(g);
        prop_assert!(opt.makespan >= npu.max(cpu));
        prop_assert_eq!(schedule_greedy(g, c).unwrap(), greedy);
    }

    #[test]
    fn single_processor_is_serial(chunks in 1usize..4, stages in 1usize..5, durs in prop::collection::vec(1u64..30, 16)) {
        let descs: Vec<StageDesc> = (0..stages)
            .map(|j| StageDesc { cross_chunk: j % 2 == 1, processor: Processor::Cpu })
            .collect();
        let g = build_dependencies(chunks, &descs).unwrap();
        let c = NodeCosts::new(durs[..g.len()].to_vec()).unwrap();
        let total: u64 = c.as_slice().iter().sum();
        prop_assert_eq!(schedule_inorder(&g, &c).unwrap().makespan, total);
        prop_assert_eq!(schedule_greedy(&g, &c).unwrap().makespan, total);
    }
}

#[test]
fn chain_optimum_is_sum() {
    let descs: Vec<StageDesc> = (0..6)
        .map(|j| StageDesc {
            cross_chunk: false,
            processor: if j % 2 == 0 { Processor::Npu } else { Processor::Cpu },
        })
        .collect();
    let g = build_dependencies(1, &descs).unwrap();
    let c = NodeCosts::new(vec![3, 1, 4, 1, 5, 9]).unwrap();
    assert_eq!(schedule_optimal(&g, &c, 12).unwrap().makespan, 23);
}
