//! Model builders shared by the benchmarks.

use qchain_core::{AbstractStep, AssignmentMatrix, ChainNode, Model, Task};

/// A mixed chain with `width` steps in each of its four regions: a tandem, a
/// fork-join, a two-arm branch and a feedback loop.
pub fn mixed_chain(width: usize, tasks: usize) -> (Model, AssignmentMatrix) {
    let mut steps = Vec::new();
    let mut region = |prefix: &str| -> Vec<ChainNode> {
        (0..width)
            .map(|i| {
                let id = format!("{prefix}{i}");
                steps.push(AbstractStep::with_rates(&id, &[40.0, 60.0]));
                ChainNode::step(id)
            })
            .collect()
    };
    let seq = region("s");
    let par = region("p");
    let arm_a = region("a");
    let looped = region("l");
    let chain = ChainNode::seq(vec![
        ChainNode::seq(seq),
        ChainNode::par(par),
        ChainNode::branch(vec![
            (0.4, ChainNode::seq(arm_a)),
            (0.6, ChainNode::iter(ChainNode::seq(looped), 0.5)),
        ]),
    ]);
    let tasks = (0..tasks)
        .map(|i| Task::new(format!("t{i}"), 1.0 + i as f64 * 0.5))
        .collect();
    let model = Model::new(steps, chain, tasks).expect("valid benchmark model");
    let assignment = AssignmentMatrix::uniform(&model, 0);
    (model, assignment)
}
