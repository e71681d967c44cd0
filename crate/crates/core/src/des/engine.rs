//! One replication of the event-driven simulation.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::model::{ChainNode, DenseAssignment, Model};

/// Raw per-replication observations.
#[derive(Debug, Clone)]
pub(crate) struct ReplicationOutcome {
    pub task_means: Vec<f64>,
    pub task_counts: Vec<u64>,
    pub stations: Vec<StationObservation>,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct StationObservation {
    pub utilization: f64,
    pub mean_in_system: f64,
    pub mean_sojourn: Option<f64>,
    pub throughput: f64,
    pub visits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StreamKind {
    Source = 1,
    Service = 2,
    Router = 3,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one (replication, kind, index) stream.
fn stream(seed: u64, replication: usize, kind: StreamKind, index: usize) -> ChaCha8Rng {
    let mut s = splitmix(seed);
    s = splitmix(s ^ replication as u64);
    s = splitmix(s ^ kind as u64);
    s = splitmix(s ^ index as u64);
    ChaCha8Rng::seed_from_u64(s)
}

#[derive(Debug)]
enum Kind {
    Step {
        step: usize,
    },
    Sequence(Vec<usize>),
    Parallel(Vec<usize>),
    Branch {
        arms: Vec<usize>,
        cdf: Vec<f64>,
        router: usize,
    },
    Iteration {
        body: usize,
        p_exit: f64,
        router: usize,
    },
}

#[derive(Debug)]
struct Node {
    kind: Kind,
    parent: Option<usize>,
    /// Position among the parent's children.
    slot: usize,
}

/// Tree flattened into an arena with parent links.
struct Compiled {
    nodes: Vec<Node>,
    root: usize,
    routers: usize,
}

impl Compiled {
    fn new(model: &Model) -> Self {
        let mut c = Compiled {
            nodes: Vec::new(),
            root: 0,
            routers: 0,
        };
        c.root = c.add(model, model.chain(), None, 0);
        c
    }

    fn add(
        &mut self,
        model: &Model,
        node: &ChainNode,
        parent: Option<usize>,
        slot: usize,
    ) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            kind: Kind::Sequence(Vec::new()),
            parent,
            slot,
        });
        let kind = match node {
            ChainNode::Step(s) => Kind::Step {
                step: model.step_position(s).expect("validated step"),
            },
            ChainNode::Sequence(children) => Kind::Sequence(
                children
                    .iter()
                    .enumerate()
                    .map(|(i, ch)| self.add(model, ch, Some(id), i))
                    .collect(),
            ),
            ChainNode::Parallel(children) => Kind::Parallel(
                children
                    .iter()
                    .enumerate()
                    .map(|(i, ch)| self.add(model, ch, Some(id), i))
                    .collect(),
            ),
            ChainNode::Branch(arms) => {
                let router = self.routers;
                self.routers += 1;
                let mut acc = 0.0;
                let cdf = arms
                    .iter()
                    .map(|a| {
                        acc += a.prob;
                        acc
                    })
                    .collect();
                Kind::Branch {
                    arms: arms
                        .iter()
                        .enumerate()
                        .map(|(i, a)| self.add(model, &a.body, Some(id), i))
                        .collect(),
                    cdf,
                    router,
                }
            }
            ChainNode::Iteration { body, p_exit } => {
                let router = self.routers;
                self.routers += 1;
                Kind::Iteration {
                    body: self.add(model, body, Some(id), 0),
                    p_exit: *p_exit,
                    router,
                }
            }
        };
        self.nodes[id].kind = kind;
        id
    }
}

#[derive(Debug, Clone, Copy)]
struct Token {
    job: usize,
    /// Innermost fork-join this token belongs to.
    join: Option<usize>,
}

#[derive(Debug)]
struct Join {
    remaining: usize,
    parent: Option<usize>,
}

#[derive(Debug)]
struct Job {
    task: usize,
    arrival: f64,
    measured: bool,
}

#[derive(Debug, Clone, Copy)]
struct Visit {
    token: Token,
    node: usize,
    arrived: f64,
    counted: bool,
}

struct Station {
    service: Exp<f64>,
    rng: ChaCha8Rng,
    queue: VecDeque<Visit>,
    in_service: Option<Visit>,
    // Time-weighted accumulators over the measurement window.
    last_change: f64,
    area_in_system: f64,
    busy_time: f64,
    visits: u64,
    sojourn_sum: f64,
    sojourn_count: u64,
}

impl Station {
    fn in_system(&self) -> usize {
        self.queue.len() + usize::from(self.in_service.is_some())
    }

    fn accumulate(&mut self, now: f64, window_open: bool) {
        if window_open {
            let dt = now - self.last_change;
            self.area_in_system += dt * self.in_system() as f64;
            if self.in_service.is_some() {
                self.busy_time += dt;
            }
        }
        self.last_change = now;
    }
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    Arrival { task: usize },
    Departure { station: usize },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Source {
    interarrival: Exp<f64>,
    rng: ChaCha8Rng,
    generated: u64,
}

pub(crate) struct Params {
    pub seed: u64,
    pub replication: usize,
    pub warmup: u64,
    pub measured: u64,
}

pub(crate) struct Replication {
    tree: Compiled,
    /// `route[task][step]` = station index.
    route: Vec<Vec<usize>>,
    stations: Vec<Station>,
    sources: Vec<Source>,
    routers: Vec<ChaCha8Rng>,
    jobs: Vec<Job>,
    joins: Vec<Join>,
    free_joins: Vec<usize>,
    events: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    window_start: Option<f64>,
    past_warmup: Vec<bool>,
    sums: Vec<f64>,
    counts: Vec<u64>,
    params: Params,
}

impl Replication {
    pub fn new(model: &Model, dense: &DenseAssignment, params: Params) -> Self {
        let tree = Compiled::new(model);
        let mut offsets = Vec::with_capacity(model.steps().len());
        let mut stations = Vec::new();
        for step in model.steps() {
            offsets.push(stations.len());
            for cand in &step.candidates {
                let idx = stations.len();
                stations.push(Station {
                    service: Exp::new(cand.mu).expect("validated rate"),
                    rng: stream(params.seed, params.replication, StreamKind::Service, idx),
                    queue: VecDeque::new(),
                    in_service: None,
                    last_change: 0.0,
                    area_in_system: 0.0,
                    busy_time: 0.0,
                    visits: 0,
                    sojourn_sum: 0.0,
                    sojourn_count: 0,
                });
            }
        }
        let route = dense
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(l, &j)| offsets[l] + j)
                    .collect()
            })
            .collect();
        let sources = model
            .tasks()
            .iter()
            .enumerate()
            .map(|(i, t)| Source {
                interarrival: Exp::new(t.lambda).expect("validated rate"),
                rng: stream(params.seed, params.replication, StreamKind::Source, i),
                generated: 0,
            })
            .collect();
        let routers = (0..tree.routers)
            .map(|r| stream(params.seed, params.replication, StreamKind::Router, r))
            .collect();
        let n_tasks = model.tasks().len();
        Self {
            tree,
            route,
            stations,
            sources,
            routers,
            jobs: Vec::new(),
            joins: Vec::new(),
            free_joins: Vec::new(),
            events: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            window_start: None,
            past_warmup: vec![params.warmup == 0; n_tasks],
            sums: vec![0.0; n_tasks],
            counts: vec![0; n_tasks],
            params,
        }
    }

    fn schedule(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn schedule_arrival(&mut self, task: usize) {
        let src = &mut self.sources[task];
        let gap = src.interarrival.sample(&mut src.rng);
        self.schedule(self.now + gap, EventKind::Arrival { task });
    }

    fn done(&self) -> bool {
        self.counts.iter().all(|&c| c >= self.params.measured)
    }

    pub fn run(mut self) -> ReplicationOutcome {
        if self.params.warmup == 0 {
            self.window_start = Some(0.0);
        }
        for task in 0..self.sources.len() {
            self.schedule_arrival(task);
        }
        while !self.done() {
            let ev = self
                .events
                .pop()
                .expect("sources keep the event queue non-empty");
            debug_assert!(ev.time >= self.now);
            self.now = ev.time;
            match ev.kind {
                EventKind::Arrival { task } => self.on_arrival(task),
                EventKind::Departure { station } => self.on_departure(station),
            }
        }
        self.finish()
    }

    fn on_arrival(&mut self, task: usize) {
        let index = self.sources[task].generated;
        self.sources[task].generated += 1;
        let (warmup, measured) = (self.params.warmup, self.params.measured);
        if index == warmup && !self.past_warmup[task] {
            self.past_warmup[task] = true;
            if self.window_start.is_none() && self.past_warmup.iter().all(|&p| p) {
                self.open_window();
            }
        }
        let job = self.jobs.len();
        self.jobs.push(Job {
            task,
            arrival: self.now,
            measured: index >= warmup && index < warmup + measured,
        });
        self.schedule_arrival(task);
        let root = self.tree.root;
        self.enter(root, Token { job, join: None });
    }

    fn open_window(&mut self) {
        let now = self.now;
        self.window_start = Some(now);
        for s in &mut self.stations {
            s.last_change = now;
        }
    }

    fn enter(&mut self, node: usize, token: Token) {
        match &self.tree.nodes[node].kind {
            Kind::Step { step } => {
                let task = self.jobs[token.job].task;
                let station = self.route[task][*step];
                self.arrive_at_station(station, node, token);
            }
            Kind::Sequence(children) => {
                let first = children[0];
                self.enter(first, token);
            }
            Kind::Parallel(children) => {
                let children = children.clone();
                let join = self.alloc_join(Join {
                    remaining: children.len(),
                    parent: token.join,
                });
                for child in children {
                    self.enter(
                        child,
                        Token {
                            job: token.job,
                            join: Some(join),
                        },
                    );
                }
            }
            Kind::Branch { arms, cdf, router } => {
                let u: f64 = self.routers[*router].random();
                let pick = cdf.iter().position(|&c| u < c).unwrap_or(arms.len() - 1);
                let arm = arms[pick];
                self.enter(arm, token);
            }
            Kind::Iteration { body, .. } => {
                let body = *body;
                self.enter(body, token);
            }
        }
    }

    /// `node` has finished for `token`; continue in its parent.
    fn exit(&mut self, node: usize, token: Token) {
        let Node { parent, slot, .. } = self.tree.nodes[node];
        let Some(parent) = parent else {
            self.complete(token.job);
            return;
        };
        match &self.tree.nodes[parent].kind {
            Kind::Sequence(children) => match children.get(slot + 1) {
                Some(&next) => self.enter(next, token),
                None => self.exit(parent, token),
            },
            Kind::Parallel(_) => {
                let join = token.join.expect("parallel child carries its join");
                self.joins[join].remaining -= 1;
                if self.joins[join].remaining == 0 {
                    let outer = self.joins[join].parent;
                    self.free_joins.push(join);
                    self.exit(
                        parent,
                        Token {
                            job: token.job,
                            join: outer,
                        },
                    );
                }
            }
            Kind::Branch { .. } => self.exit(parent, token),
            Kind::Iteration {
                body,
                p_exit,
                router,
            } => {
                let (body, p_exit) = (*body, *p_exit);
                let u: f64 = self.routers[*router].random();
                if u < p_exit {
                    self.exit(parent, token);
                } else {
                    self.enter(body, token);
                }
            }
            Kind::Step { .. } => unreachable!("steps have no children"),
        }
    }

    fn alloc_join(&mut self, join: Join) -> usize {
        match self.free_joins.pop() {
            Some(i) => {
                self.joins[i] = join;
                i
            }
            None => {
                self.joins.push(join);
                self.joins.len() - 1
            }
        }
    }

    fn complete(&mut self, job: usize) {
        let j = &self.jobs[job];
        if j.measured {
            self.sums[j.task] += self.now - j.arrival;
            self.counts[j.task] += 1;
        }
    }

    fn arrive_at_station(&mut self, station: usize, node: usize, token: Token) {
        let window_open = self.window_start.is_some();
        let now = self.now;
        let s = &mut self.stations[station];
        s.accumulate(now, window_open);
        if window_open {
            s.visits += 1;
        }
        let visit = Visit {
            token,
            node,
            arrived: now,
            counted: window_open,
        };
        if s.in_service.is_none() {
            s.in_service = Some(visit);
            let d = s.service.sample(&mut s.rng);
            self.schedule(now + d, EventKind::Departure { station });
        } else {
            s.queue.push_back(visit);
        }
    }

    fn on_departure(&mut self, station: usize) {
        let window_open = self.window_start.is_some();
        let now = self.now;
        let s = &mut self.stations[station];
        s.accumulate(now, window_open);
        let done = s.in_service.take().expect("departure from a busy station");
        debug_assert!(done.arrived <= now);
        if done.counted {
            s.sojourn_sum += now - done.arrived;
            s.sojourn_count += 1;
        }
        if let Some(next) = s.queue.pop_front() {
            s.in_service = Some(next);
            let d = s.service.sample(&mut s.rng);
            self.schedule(now + d, EventKind::Departure { station });
        }
        self.exit(done.node, done.token);
    }

    fn finish(mut self) -> ReplicationOutcome {
        let end = self.now;
        let start = self.window_start.unwrap_or(end);
        let span = end - start;
        let stations = self
            .stations
            .iter_mut()
            .map(|s| {
                s.accumulate(end, true);
                if span > 0.0 {
                    StationObservation {
                        utilization: s.busy_time / span,
                        mean_in_system: s.area_in_system / span,
                        mean_sojourn: (s.sojourn_count > 0)
                            .then(|| s.sojourn_sum / s.sojourn_count as f64),
                        throughput: s.visits as f64 / span,
                        visits: s.visits,
                    }
                } else {
                    StationObservation::default()
                }
            })
            .collect();
        ReplicationOutcome {
            task_means: self
                .sums
                .iter()
                .zip(&self.counts)
                .map(|(s, &c)| s / c as f64)
                .collect(),
            task_counts: self.counts,
            stations,
        }
    }
}
