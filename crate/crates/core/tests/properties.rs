mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{model_of, random_instance};
use qchain_core::{
    all_task_times, branch_time, effective_rates, evaluate_serialized, mm1_wait,
    optimize_exhaustive, parallel_time, selfish_baseline, sequential_time, serialize,
    structural_time, structure_factors, task_response_time, AbstractStep, AnalyticError,
    AssignmentMatrix, BranchMode, ChainNode, EvalOptions, IterationTimeConvention, Model,
    Objective, DEFAULT_SEARCH_CAP,
};

const ALL_OPTIONS: [EvalOptions; 4] = [
    EvalOptions {
        branch_mode: BranchMode::PaperFaithful,
        iteration: IterationTimeConvention::TotalSojourn,
    },
    EvalOptions {
        branch_mode: BranchMode::Expectation,
        iteration: IterationTimeConvention::TotalSojourn,
    },
    EvalOptions {
        branch_mode: BranchMode::PaperFaithful,
        iteration: IterationTimeConvention::PerVisit,
    },
    EvalOptions {
        branch_mode: BranchMode::Expectation,
        iteration: IterationTimeConvention::PerVisit,
    },
];

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn instance(seed: u64) -> (Model, AssignmentMatrix) {
    random_instance(&mut ChaCha8Rng::seed_from_u64(seed), 4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn serialized_matches_recursive(seed in any::<u64>()) {
        let (model, a) = instance(seed);
        for opts in ALL_OPTIONS {
            for t in model.tasks() {
                let flat = task_response_time(&model, &a, &t.id, opts).unwrap().value();
                let tree = structural_time(&model, &a, &t.id, opts).unwrap().value();
                prop_assert!(rel(flat, tree) <= 1e-12, "{flat} vs {tree}");
            }
        }
    }

    #[test]
    fn expectation_never_exceeds_paper_mode(seed in any::<u64>()) {
        let (model, a) = instance(seed);
        let paper = all_task_times(&model, &a, ALL_OPTIONS[0]).unwrap();
        let expect = all_task_times(&model, &a, ALL_OPTIONS[1]).unwrap();
        for ((_, p), (_, e)) in paper.iter().zip(&expect) {
            prop_assert!(e.value() <= p.value() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn effective_rates_are_linear_per_task(seed in any::<u64>(), k in 0usize..3, factor in 0.1f64..4.0) {
        let (model, a) = instance(seed);
        let k = k % model.tasks().len();
        let mut scaled_tasks = model.tasks().to_vec();
        scaled_tasks[k].lambda *= factor;
        let scaled = model.with_tasks(scaled_tasks).unwrap();
        let base = effective_rates(&model, &a).unwrap();
        let after = effective_rates(&scaled, &a).unwrap();
        let alone = model.with_tasks(vec![model.tasks()[k].clone()]).unwrap();
        let mut a_alone = AssignmentMatrix::new();
        for s in model.steps() {
            a_alone.set(&model.tasks()[k].id, &s.id, a.get(&model.tasks()[k].id, &s.id).unwrap());
        }
        let own = effective_rates(&alone, &a_alone).unwrap();
        for (station, &r) in &base.rates {
            let expected = r + (factor - 1.0) * own.rates[station];
            prop_assert!((after.rates[station] - expected).abs() <= 1e-9 * (1.0 + expected));
        }
    }

    #[test]
    fn structure_factors_ignore_rates(seed in any::<u64>()) {
        let (model, _) = instance(seed);
        let f = structure_factors(model.chain(), &EvalOptions::default()).unwrap();
        prop_assert_eq!(f.len(), model.steps().len());
        for sf in f.values() {
            prop_assert!(sf.kappa > 0.0 && sf.visit_weight > 0.0);
        }
        // Same shape, different service rates: same factors.
        let faster: Vec<AbstractStep> = model.steps().iter().map(|s| {
            let mus: Vec<f64> = s.candidates.iter().map(|c| c.mu * 3.0).collect();
            AbstractStep::with_rates(&s.id, &mus)
        }).collect();
        let other = Model::new(faster, model.chain().clone(), model.tasks().to_vec()).unwrap();
        prop_assert_eq!(structure_factors(other.chain(), &EvalOptions::default()).unwrap(), f);
    }

    #[test]
    fn adding_a_task_never_helps_others(seed in any::<u64>(), lambda in 0.05f64..0.5) {
        let (model, a) = instance(seed);
        let mut tasks = model.tasks().to_vec();
        tasks.push(qchain_core::Task::new("extra", lambda));
        let bigger = model.with_tasks(tasks).unwrap();
        let mut a2 = a.clone();
        for s in model.steps() {
            a2.set("extra", &s.id, 0);
        }
        let before = all_task_times(&model, &a, EvalOptions::default()).unwrap();
        match all_task_times(&bigger, &a2, EvalOptions::default()) {
            Ok(after) => {
                for ((_, b), (_, x)) in before.iter().zip(&after) {
                    prop_assert!(x.value() >= b.value() * (1.0 - 1e-12));
                }
            }
            Err(AnalyticError::Unstable { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn mm1_is_monotone(mu in 0.5f64..10.0, frac in 0.0f64..0.95, bump in 0.001f64..0.04) {
        let lambda = mu * frac;
        let base = mm1_wait(mu, lambda).unwrap().value();
        prop_assert!(mm1_wait(mu * (1.0 + bump), lambda).unwrap().value() < base);
        prop_assert!(mm1_wait(mu, lambda + mu * bump).unwrap().value() > base);
    }

    #[test]
    fn parallel_picks_a_maximal_branch(
        branches in prop::collection::vec(prop::collection::vec(2.0f64..20.0, 1..4), 1..5),
        lambda in 0.0f64..1.5,
    ) {
        let (t, k) = parallel_time(&branches, lambda).unwrap();
        let each: Vec<f64> = branches.iter().map(|b| sequential_time(b, lambda).unwrap().value()).collect();
        prop_assert_eq!(t.value(), each[k]);
        prop_assert!(each.iter().all(|&e| e <= t.value()));
        prop_assert!(each[..k].iter().all(|&e| e < t.value()));
    }

    #[test]
    fn branch_modes_are_ordered(
        arms in prop::collection::vec((0.1f64..1.0, prop::collection::vec(2.0f64..20.0, 1..3)), 1..4),
        lambda in 0.0f64..1.5,
    ) {
        let total: f64 = arms.iter().map(|(w, _)| w).sum();
        let arms: Vec<(f64, Vec<f64>)> = arms.into_iter().map(|(w, m)| (w / total, m)).collect();
        let paper = branch_time(&arms, lambda, BranchMode::PaperFaithful).unwrap().value();
        let expect = branch_time(&arms, lambda, BranchMode::Expectation).unwrap().value();
        prop_assert!(expect <= paper);
    }
}

#[test]
fn degenerate_tree_reductions() {
    let seq = model_of(
        &[("a", &[3.0]), ("b", &[5.0])],
        ChainNode::seq(vec![ChainNode::step("a"), ChainNode::step("b")]),
        &[1.0],
    );
    let looped = model_of(
        &[("a", &[3.0]), ("b", &[5.0])],
        ChainNode::iter(
            ChainNode::seq(vec![ChainNode::step("a"), ChainNode::step("b")]),
            1.0,
        ),
        &[1.0],
    );
    let expected = sequential_time(&[3.0, 5.0], 1.0).unwrap().value();
    for opts in ALL_OPTIONS {
        for m in [&seq, &looped] {
            let t = task_response_time(m, &AssignmentMatrix::uniform(m, 0), "t0", opts).unwrap();
            assert!(rel(t.value(), expected) < 1e-12);
        }
    }
}

#[test]
fn single_task_model_matches_flat_formulas() {
    let lam = 0.7;
    let par = model_of(
        &[("a", &[2.0]), ("b", &[3.0]), ("c", &[1.5])],
        ChainNode::par(vec![
            ChainNode::seq(vec![ChainNode::step("a"), ChainNode::step("b")]),
            ChainNode::step("c"),
        ]),
        &[lam],
    );
    let (flat, _) = parallel_time(&[vec![2.0, 3.0], vec![1.5]], lam).unwrap();
    let t = task_response_time(
        &par,
        &AssignmentMatrix::uniform(&par, 0),
        "t0",
        EvalOptions::default(),
    )
    .unwrap();
    assert!(rel(t.value(), flat.value()) < 1e-12);

    let br = model_of(
        &[("a", &[2.0]), ("b", &[3.0])],
        ChainNode::branch(vec![
            (0.3, ChainNode::step("a")),
            (0.7, ChainNode::step("b")),
        ]),
        &[lam],
    );
    for mode in [BranchMode::PaperFaithful, BranchMode::Expectation] {
        let flat = branch_time(&[(0.3, vec![2.0]), (0.7, vec![3.0])], lam, mode).unwrap();
        let opts = EvalOptions::new(mode, IterationTimeConvention::TotalSojourn);
        let t = task_response_time(&br, &AssignmentMatrix::uniform(&br, 0), "t0", opts).unwrap();
        assert!(rel(t.value(), flat.value()) < 1e-12);
    }

    let it = model_of(
        &[("a", &[3.0]), ("b", &[4.0])],
        ChainNode::iter(
            ChainNode::seq(vec![ChainNode::step("a"), ChainNode::step("b")]),
            0.6,
        ),
        &[lam],
    );
    for conv in [
        IterationTimeConvention::TotalSojourn,
        IterationTimeConvention::PerVisit,
    ] {
        let flat = qchain_core::iteration_time(&[3.0, 4.0], lam, 0.6, conv).unwrap();
        let opts = EvalOptions::new(BranchMode::PaperFaithful, conv);
        let t = task_response_time(&it, &AssignmentMatrix::uniform(&it, 0), "t0", opts).unwrap();
        assert!(rel(t.value(), flat.value()) < 1e-12);
    }
}

#[test]
fn branch_conservation_and_iteration_amplification() {
    let m = model_of(
        &[("a", &[9.0]), ("b", &[9.0]), ("c", &[9.0]), ("d", &[9.0])],
        ChainNode::seq(vec![
            ChainNode::branch(vec![
                (0.2, ChainNode::step("a")),
                (0.5, ChainNode::step("b")),
                (0.3, ChainNode::step("c")),
            ]),
            ChainNode::iter(ChainNode::step("d"), 0.4),
        ]),
        &[1.0, 0.5],
    );
    let load = effective_rates(&m, &AssignmentMatrix::uniform(&m, 0)).unwrap();
    let arms: f64 = ["a", "b", "c"]
        .iter()
        .map(|s| load.get(s, 0).unwrap())
        .sum();
    assert!((arms - 1.5).abs() < 1e-12);
    assert!((load.get("d", 0).unwrap() - 1.5 / 0.4).abs() < 1e-12);
}

#[test]
fn parallel_branches_see_full_rate() {
    let m = model_of(
        &[("a", &[9.0]), ("b", &[9.0])],
        ChainNode::par(vec![ChainNode::step("a"), ChainNode::step("b")]),
        &[1.25],
    );
    let load = effective_rates(&m, &AssignmentMatrix::uniform(&m, 0)).unwrap();
    assert_eq!(load.get("a", 0), Some(1.25));
    assert_eq!(load.get("b", 0), Some(1.25));
}

#[test]
fn serialized_chain_round_trips_through_eval() {
    let (model, a) = instance(99);
    let s = serialize(&model, &a, "t0", EvalOptions::default()).unwrap();
    assert!(s
        .steps
        .iter()
        .all(|st| st.kappa > 0.0 && st.visit_weight > 0.0));
    assert_eq!(
        evaluate_serialized(&s).unwrap(),
        task_response_time(&model, &a, "t0", EvalOptions::default()).unwrap()
    );
}

fn small_instance(seed: u64) -> Model {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps: Vec<(String, Vec<f64>)> = (0..2)
        .map(|l| {
            (
                format!("s{l}"),
                (0..2).map(|_| rng.random_range(1.5..6.0)).collect(),
            )
        })
        .collect();
    let lambdas: Vec<f64> = (0..rng.random_range(1..=3))
        .map(|_| rng.random_range(0.3..1.5))
        .collect();
    let chain = if rng.random_bool(0.5) {
        ChainNode::seq(vec![ChainNode::step("s0"), ChainNode::step("s1")])
    } else {
        ChainNode::par(vec![ChainNode::step("s0"), ChainNode::step("s1")])
    };
    let refs: Vec<(&str, &[f64])> = steps
        .iter()
        .map(|(i, m)| (i.as_str(), m.as_slice()))
        .collect();
    model_of(&refs, chain, &lambdas)
}

#[test]
fn composer_invariants_on_random_instances() {
    for seed in 0..60 {
        let model = small_instance(seed);
        for objective in [Objective::MinMaxTaskTime, Objective::MinMeanTaskTime] {
            let opts = EvalOptions::default();
            let selfish = selfish_baseline(&model, objective, opts, DEFAULT_SEARCH_CAP).unwrap();
            let Ok(best) = optimize_exhaustive(&model, objective, opts, DEFAULT_SEARCH_CAP) else {
                continue;
            };
            if let Some(s) = selfish.objective {
                assert!(best.objective.unwrap() <= s * (1.0 + 1e-12), "seed {seed}");
            }

            // Selfish choices are the single-task optima.
            for t in model.tasks() {
                let alone = model.with_tasks(vec![t.clone()]).unwrap();
                let solo =
                    optimize_exhaustive(&alone, objective, opts, DEFAULT_SEARCH_CAP).unwrap();
                for s in model.steps() {
                    assert_eq!(
                        solo.assignment.get(&t.id, &s.id),
                        selfish.assignment.get(&t.id, &s.id)
                    );
                }
            }

            // Removing a task never raises the optimum.
            if model.tasks().len() > 1 {
                let fewer = model.with_tasks(model.tasks()[1..].to_vec()).unwrap();
                let reduced =
                    optimize_exhaustive(&fewer, objective, opts, DEFAULT_SEARCH_CAP).unwrap();
                assert!(reduced.objective.unwrap() <= best.objective.unwrap() * (1.0 + 1e-12));
            }

            // Relabeling candidates leaves the optimum value unchanged and
            // maps the optimal assignment onto an equally good one.
            let swapped_steps: Vec<AbstractStep> = model
                .steps()
                .iter()
                .map(|s| AbstractStep::new(&s.id, s.candidates.iter().rev().cloned().collect()))
                .collect();
            let swapped =
                Model::new(swapped_steps, model.chain().clone(), model.tasks().to_vec()).unwrap();
            let best_swapped =
                optimize_exhaustive(&swapped, objective, opts, DEFAULT_SEARCH_CAP).unwrap();
            assert!(rel(best_swapped.objective.unwrap(), best.objective.unwrap()) < 1e-12);
            let mut mapped = AssignmentMatrix::new();
            for (t, s, c) in best.assignment.entries() {
                mapped.set(t, s, 1 - c);
            }
            let times = all_task_times(&swapped, &mapped, opts).unwrap();
            let v: Vec<_> = times.into_iter().map(|(_, t)| t).collect();
            assert!(rel(objective.value(&swapped, &v), best.objective.unwrap()) < 1e-12);
        }
    }
}
