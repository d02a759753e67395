use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use anoncount::counting::{count_from_view, CountMode, CountResult};
use anoncount::engine::{make_scheduler, random_connected_graph, RunConfig, SchedulerSpec, Trace};
use anoncount::harness::run_experiment;
use anoncount::history_tree::{build_ground_truth, extract_view, is_generalized_view_of, InputLabel};
use anoncount::protocol::Output;

fn random_trace(n: usize, rounds: usize, seed: u64) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Trace::new(n, 1, (0..rounds).map(|_| random_connected_graph(n, 0.25, &mut rng)).collect())
}

fn labels(n: usize) -> Vec<InputLabel> {
    (0..n).map(|p| if p == 0 { InputLabel::Leader } else { InputLabel::Value(0) }).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ground_truth_levels_partition_processes(n in 1usize..9, seed in any::<u64>()) {
        let trace = random_trace(n, 8, seed);
        let gt = build_ground_truth(&trace, &labels(n), 8).unwrap();
        let mut width = 0;
        for t in 0..=8i64 {
            let level = gt.tree.level(t);
            let sum: u64 = level.iter().map(|&v| gt.anonymity[v]).sum();
            prop_assert_eq!(sum, n as u64);
            prop_assert!(level.len() >= width && level.len() <= n);
            width = level.len();
            for &v in level {
                let children: u64 = gt.tree.node(v).children.iter().map(|&c| gt.anonymity[c]).sum();
                if t < 8 {
                    prop_assert_eq!(children, gt.anonymity[v]);
                }
            }
        }
    }

    #[test]
    fn views_are_generalized_views(n in 1usize..8, seed in any::<u64>(), depth in 0usize..8) {
        let trace = random_trace(n, depth, seed);
        let gt = build_ground_truth(&trace, &labels(n), depth).unwrap();
        let view = extract_view(&gt.tree, gt.node_of(depth, 0)).unwrap();
        prop_assert!(is_generalized_view_of(&view.tree, &gt.tree));
    }

    #[test]
    fn counting_is_monotone(n in 1usize..7, seed in any::<u64>()) {
        let depth = 3 * n;
        let trace = random_trace(n, depth, seed);
        let gt = build_ground_truth(&trace, &labels(n), depth).unwrap();
        let mut seen: Option<u64> = None;
        for d in 0..=depth {
            let view = extract_view(&gt.tree, gt.node_of(d, 0)).unwrap();
            match count_from_view(&view, CountMode::Basic).unwrap() {
                CountResult::Count(c) => {
                    prop_assert_eq!(c, n as u64);
                    seen = Some(c);
                }
                CountResult::Unknown => prop_assert!(seen.is_none(), "count lost at depth {}", d),
                CountResult::Inputs(_) => prop_assert!(false, "basic mode returned inputs"),
            }
        }
        prop_assert_eq!(seen, Some(n as u64));
    }

    #[test]
    fn t_union_schedulers_are_union_connected(n in 1usize..10, t in 1usize..5, seed in any::<u64>()) {
        let mut s = make_scheduler(&SchedulerSpec::TUnion { t }, n, seed).unwrap();
        let rounds = (0..6 * t).map(|_| s.next_round().unwrap()).collect();
        prop_assert!(Trace::new(n, t, rounds).is_t_union_connected(t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn monitored_runs_count_exactly(n in 1usize..8, seed in any::<u64>(), permuted in any::<bool>()) {
        let spec = if permuted { SchedulerSpec::PermutedPath } else { SchedulerSpec::RandomConnected };
        let r = run_experiment(&RunConfig::new(n, spec).seed(seed), true).unwrap();
        prop_assert!(r.violations.is_empty(), "{:?}", r.violations);
        prop_assert_eq!(r.report.leader_output(), Some(&Output::Count(n as u64)));
    }
}
