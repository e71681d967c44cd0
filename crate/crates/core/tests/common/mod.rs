#![allow(dead_code)]

use qchain_core::{effective_rates, AbstractStep, AssignmentMatrix, ChainNode, Model, Task};
use rand::Rng;

pub fn model_of(steps: &[(&str, &[f64])], chain: ChainNode, lambdas: &[f64]) -> Model {
    Model::new(
        steps
            .iter()
            .map(|(id, mus)| AbstractStep::with_rates(*id, mus))
            .collect(),
        chain,
        lambdas
            .iter()
            .enumerate()
            .map(|(i, &l)| Task::new(format!("t{i}"), l))
            .collect(),
    )
    .unwrap()
}

fn random_node<R: Rng>(rng: &mut R, depth_left: usize, next: &mut usize) -> ChainNode {
    if depth_left <= 1 || rng.random_bool(0.3) {
        *next += 1;
        return ChainNode::step(format!("s{}", *next - 1));
    }
    let width = rng.random_range(2..=3);
    match rng.random_range(0..4) {
        0 => ChainNode::seq(
            (0..width)
                .map(|_| random_node(rng, depth_left - 1, next))
                .collect(),
        ),
        1 => ChainNode::par(
            (0..width)
                .map(|_| random_node(rng, depth_left - 1, next))
                .collect(),
        ),
        2 => {
            let weights: Vec<f64> = (0..width).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = weights.iter().sum();
            ChainNode::branch(
                weights
                    .into_iter()
                    .map(|w| (w / total, random_node(rng, depth_left - 1, next)))
                    .collect(),
            )
        }
        _ => {
            let p = rng.random_range(0.3..=1.0);
            ChainNode::iter(random_node(rng, depth_left - 1, next), p)
        }
    }
}

/// Random nested chain (depth <= `max_depth`) with 1-3 tasks, a random
/// assignment, and service rates chosen so every station is stable.
pub fn random_instance<R: Rng>(rng: &mut R, max_depth: usize) -> (Model, AssignmentMatrix) {
    let mut next = 0;
    let chain = random_node(rng, max_depth, &mut next);
    let mut steps: Vec<AbstractStep> = (0..next)
        .map(|i| {
            let j = rng.random_range(1..=3);
            AbstractStep::with_rates(format!("s{i}"), &vec![1.0; j])
        })
        .collect();
    let tasks: Vec<Task> = (0..rng.random_range(1..=3))
        .map(|i| Task::new(format!("t{i}"), rng.random_range(0.2..2.0)))
        .collect();
    let draft = Model::new(steps.clone(), chain.clone(), tasks.clone()).unwrap();
    let mut assignment = AssignmentMatrix::new();
    for t in draft.tasks() {
        for s in draft.steps() {
            assignment.set(&t.id, &s.id, rng.random_range(0..s.candidates.len()));
        }
    }
    let load = effective_rates(&draft, &assignment).unwrap();
    for s in &mut steps {
        for (j, c) in s.candidates.iter_mut().enumerate() {
            let lam = load.get(&s.id, j).unwrap();
            c.mu = lam * rng.random_range(1.2..3.0) + rng.random_range(0.5..2.0);
        }
    }
    (Model::new(steps, chain, tasks).unwrap(), assignment)
}
