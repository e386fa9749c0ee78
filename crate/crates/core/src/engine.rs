//! Synchronous Byzantine-resilient DSGD.
//!
//! Each step: every honest agent draws a batch from its local shard,
//! takes a gradient half-step, exchanges half-step models along the edges
//! (Byzantine agents fabricate per-target messages instead), and feeds its
//! own half-step plus everything received to its aggregation rule.
//!
//! All randomness is keyed by `(run seed, domain, agent, step)` — see
//! [`crate::rng`] — so runs are bit-reproducible, paired runs share every
//! draw, and within-step work could be scheduled in any order without
//! changing results.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationRule, InboundSet, InboundWeights, Message};
use crate::attacks::{
    alie_attack, duplicate_attack, gaussian_attack, sign_flip_attack, AttackContext, AttackSpec,
};
use crate::error::{Error, Result};
use crate::learner::{synth_dataset, LocalDataset, LossKind, LossSpec, Sample, StepSchedule, SynthSpec};
use crate::rng::{pack_pair, stream, StreamDomain};
use crate::scalar::Scalar;
use crate::topology::{
    gen_erdos_renyi, honest_subgraph_connected, metropolis_row, Graph, RoleAssignment,
};
use crate::vector::ParamVector;

/// How to build the communication graph.
#[derive(Clone, Debug)]
pub enum GraphKind {
    Complete { agents: usize },
    ErdosRenyi { agents: usize, p: f64 },
    Explicit(Graph),
}

/// How to pick the Byzantine agents.
#[derive(Clone, Debug)]
pub enum RoleSpec {
    /// Uniformly select this many Byzantine agents with the run seed.
    Count(usize),
    Ids(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct TopologySpec {
    pub kind: GraphKind,
    pub roles: RoleSpec,
}

/// Training data: a synthetic generator spec or pre-built shards.
#[derive(Clone, Debug)]
pub enum DataSpec<S> {
    Synth(SynthSpec<S>),
    Explicit {
        train: Vec<LocalDataset<S>>,
        test: Vec<Sample<S>>,
    },
}

/// Shared initialization for all honest agents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitSpec<S> {
    Zero,
    Constant(S),
}

/// Trust weighting an agent applies over itself and its neighbors. Agents
/// are role-blind, so the scheme uses full-graph degrees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Metropolis-Hastings `1/(1 + max(deg_n, deg_m))`, diagonal absorbing
    /// the remainder; doubly stochastic on the honest subgraph when no
    /// Byzantine agents are present.
    Metropolis,
    /// `1/(deg_n + 1)` for self and every neighbor (the uniform-weight
    /// setting of the fully-connected experiments).
    Uniform,
}

/// Complete description of one run.
#[derive(Clone, Debug)]
pub struct RunConfig<S> {
    pub topology: TopologySpec,
    pub aggregation: AggregationRule<S>,
    pub attack: AttackSpec<S>,
    /// Whether the attacker's view of a target's honest neighborhood also
    /// contains the target's own half-step.
    pub attack_view_includes_target: bool,
    pub loss: LossKind<S>,
    pub data: DataSpec<S>,
    pub schedule: StepSchedule<S>,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    /// Metrics are recorded every `stride` steps (and at the final step).
    pub stride: u64,
    pub init: InitSpec<S>,
    pub weights: WeightScheme,
}

/// One recorded trace row: the state at time `k`.
#[derive(Clone, Debug)]
pub struct TraceRow<S> {
    pub k: u64,
    pub train_loss: S,
    pub test_loss: S,
    pub test_accuracy: S,
    /// Disagreement `H^k`: mean squared distance of honest models to their
    /// average.
    pub h: S,
    pub model_norms: Vec<S>,
    pub mean_model: ParamVector<S>,
}

#[derive(Clone, Debug, Default)]
pub struct RunTrace<S> {
    pub rows: Vec<TraceRow<S>>,
}

impl<S: Scalar> RunTrace<S> {
    pub fn row_at(&self, k: u64) -> Option<&TraceRow<S>> {
        self.rows.iter().find(|r| r.k == k)
    }

    pub fn ks(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.k).collect()
    }
}

/// Stability metrics of a paired run.
#[derive(Clone, Debug)]
pub struct StabilityRow<S> {
    pub k: u64,
    /// `delta^k = ||mean(x) - mean(x')||`.
    pub delta: S,
    /// `eta^k = mean_n ||x_n - x'_n||`.
    pub eta: S,
}

#[derive(Clone, Debug, Default)]
pub struct StabilityTrace<S> {
    pub rows: Vec<StabilityRow<S>>,
}

impl<S: Scalar> StabilityTrace<S> {
    pub fn delta_at(&self, k: u64) -> Option<S> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.delta)
    }
}

/// Single-sample dataset perturbation for stability probes.
#[derive(Clone, Debug)]
pub struct PerturbSpec<S> {
    /// Honest agent whose shard is perturbed.
    pub agent: usize,
    /// Sample index within that shard.
    pub index: usize,
    pub replacement: Sample<S>,
}

/// Batch of local-dataset indices drawn by `agent` at `step`. Uniform with
/// replacement, keyed so both runs of a stability pair select the same
/// positions ("drawn in the same order").
pub fn sample_indices(seed: u64, agent: usize, step: u64, z: usize, batch: usize) -> Vec<usize> {
    let mut rng = stream(seed, StreamDomain::Sampling, agent as u64, step);
    (0..batch).map(|_| rng.random_range(0..z)).collect()
}

/// Resolves the graph and role assignment of a config (deterministic in the
/// run seed).
pub fn resolve_topology<S: Scalar>(cfg: &RunConfig<S>) -> Result<(Graph, RoleAssignment)> {
    let graph = match &cfg.topology.kind {
        GraphKind::Complete { agents } => Graph::complete(*agents),
        GraphKind::ErdosRenyi { agents, p } => gen_erdos_renyi(*agents, *p, cfg.seed)?,
        GraphKind::Explicit(g) => g.clone(),
    };
    let n = graph.n_agents();
    let roles = match &cfg.topology.roles {
        RoleSpec::Ids(ids) => RoleAssignment::from_byzantine_ids(n, ids)?,
        RoleSpec::Count(count) => {
            if *count >= n {
                return Err(Error::InvalidConfig(format!(
                    "{count} byzantine agents leaves no honest ones among {n}"
                )));
            }
            // partial Fisher-Yates over the agent ids
            let mut rng = stream(cfg.seed, StreamDomain::Roles, 0, 0);
            let mut ids: Vec<usize> = (0..n).collect();
            for i in 0..*count {
                let j = i + rng.random_range(0..n - i);
                ids.swap(i, j);
            }
            RoleAssignment::from_byzantine_ids(n, &ids[..*count])?
        }
    };
    Ok((graph, roles))
}

/// A run in progress. Step it manually for snapshot/resume workflows, or
/// use [`run`] / [`run_pair`] to drive it.
#[derive(Clone)]
pub struct Simulation<S: Scalar> {
    graph: Graph,
    roles: RoleAssignment,
    rule: AggregationRule<S>,
    attack: AttackSpec<S>,
    view_includes_target: bool,
    victim: Option<usize>,
    loss: LossSpec<S>,
    schedule: StepSchedule<S>,
    shards: Vec<LocalDataset<S>>,
    test: Vec<Sample<S>>,
    z: usize,
    batch: usize,
    seed: u64,
    runtime_weights: Vec<(S, Vec<S>)>,
    models: Vec<ParamVector<S>>,
    step: u64,
}

impl<S: Scalar> Simulation<S> {
    pub fn new(cfg: &RunConfig<S>) -> Result<Self> {
        if cfg.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if cfg.batch == 0 {
            return Err(Error::InvalidConfig("batch must be >= 1".into()));
        }
        if cfg.stride == 0 {
            return Err(Error::InvalidConfig("stride must be >= 1".into()));
        }
        let (graph, roles) = resolve_topology(cfg)?;
        if !honest_subgraph_connected(&graph, &roles) {
            return Err(Error::DisconnectedHonestSubgraph);
        }
        let honest = roles.honest_ids().to_vec();
        if !roles.byzantine_ids().is_empty() && cfg.attack.is_none() {
            return Err(Error::InvalidConfig(
                "byzantine agents present but attack kind is \"none\"; \
                 model the attack-free baseline with zero byzantine agents"
                    .into(),
            ));
        }

        let (shards, test, classes, features) = match &cfg.data {
            DataSpec::Synth(spec) => {
                if spec.honest_count != honest.len() {
                    return Err(Error::InvalidConfig(format!(
                        "synthetic spec allocates {} shards but there are {} honest agents",
                        spec.honest_count,
                        honest.len()
                    )));
                }
                let data = synth_dataset(spec)?;
                (data.train, data.test, spec.classes, spec.features)
            }
            DataSpec::Explicit { train, test } => {
                if train.len() != honest.len() {
                    return Err(Error::InvalidConfig(format!(
                        "{} shards for {} honest agents",
                        train.len(),
                        honest.len()
                    )));
                }
                if train.iter().any(|d| d.samples.is_empty()) {
                    return Err(Error::InvalidConfig("empty training shard".into()));
                }
                let features = train[0].samples[0].features.len();
                let classes = train
                    .iter()
                    .flat_map(|d| d.samples.iter())
                    .chain(test.iter())
                    .map(|s| s.label + 1)
                    .max()
                    .unwrap_or(1);
                (train.clone(), test.clone(), classes, features)
            }
        };
        let z = shards[0].samples.len();
        if shards.iter().any(|d| d.samples.len() != z) {
            return Err(Error::InvalidConfig(
                "all local datasets must share the same size Z".into(),
            ));
        }

        let loss = LossSpec::new(cfg.loss.clone(), classes, features);
        let dim = loss.param_dim();
        let initial = match cfg.init {
            InitSpec::Zero => ParamVector::zeros(dim),
            InitSpec::Constant(c) => ParamVector::from_vec(vec![c; dim]),
        };

        let victim = match &cfg.attack {
            AttackSpec::Duplicate { victim } => Some(match victim {
                Some(v) => {
                    if !roles.is_honest(*v) {
                        return Err(Error::InvalidConfig(format!(
                            "duplicate-attack victim {v} is not an honest agent"
                        )));
                    }
                    *v
                }
                None => {
                    let mut rng = stream(cfg.seed, StreamDomain::Victim, 0, 0);
                    honest[rng.random_range(0..honest.len())]
                }
            }),
            _ => None,
        };

        let runtime_weights = honest
            .iter()
            .map(|&n| match cfg.weights {
                WeightScheme::Metropolis => metropolis_row(&graph, n),
                WeightScheme::Uniform => {
                    let w = S::one() / S::from_usize(graph.degree(n) + 1).unwrap();
                    (w, vec![w; graph.degree(n)])
                }
            })
            .collect();
        let models = vec![initial; honest.len()];

        Ok(Simulation {
            graph,
            roles,
            rule: cfg.aggregation.clone(),
            attack: cfg.attack.clone(),
            view_includes_target: cfg.attack_view_includes_target,
            victim,
            loss,
            schedule: cfg.schedule.clone(),
            shards,
            test,
            z,
            batch: cfg.batch,
            seed: cfg.seed,
            runtime_weights,
            models,
            step: 0,
        })
    }

    pub fn time(&self) -> u64 {
        self.step
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn roles(&self) -> &RoleAssignment {
        &self.roles
    }

    pub fn loss_spec(&self) -> &LossSpec<S> {
        &self.loss
    }

    /// Honest agents' models, in ascending honest-id order.
    pub fn honest_models(&self) -> &[ParamVector<S>] {
        &self.models
    }

    pub fn mean_model(&self) -> ParamVector<S> {
        // mean = base + mean of (x_n - base): exact when the models agree
        // bitwise, so exact consensus yields H = 0 exactly
        let base = &self.models[0];
        let inv = S::one() / S::from_usize(self.models.len()).unwrap();
        let mut shift = ParamVector::zeros(base.dim());
        for m in &self.models[1..] {
            shift.axpy(inv, &m.sub(base));
        }
        base.add(&shift)
    }

    fn batch_for(&self, agent: usize, step: u64) -> Vec<Sample<S>> {
        let shard = &self.shards[self.roles.honest_index(agent).expect("honest agent")];
        sample_indices(self.seed, agent, step, self.z, self.batch)
            .into_iter()
            .map(|i| shard.samples[i].clone())
            .collect()
    }

    /// Advances the state from time `k` to `k + 1`.
    pub fn step(&mut self) -> Result<()> {
        let k = self.step;
        let alpha = self.schedule.step_size(k);
        let honest = self.roles.honest_ids();
        let dim = self.loss.param_dim();

        // local SGD half-steps
        let mut half: Vec<ParamVector<S>> = Vec::with_capacity(honest.len());
        for (idx, &agent) in honest.iter().enumerate() {
            let batch = self.batch_for(agent, k);
            let grad = self.loss.batch_grad(&self.models[idx], &batch)?;
            let mut h = self.models[idx].clone();
            h.axpy(-alpha, &grad);
            if !h.is_finite() {
                return Err(Error::NonFiniteModel { step: k, agent });
            }
            half.push(h);
        }

        // per-target Byzantine messages
        let mut byz_messages: HashMap<(usize, usize), ParamVector<S>> = HashMap::new();
        for (idx, &target) in honest.iter().enumerate() {
            let byz_neighbors: Vec<usize> = self
                .graph
                .neighbors(target)
                .iter()
                .copied()
                .filter(|&m| !self.roles.is_honest(m))
                .collect();
            if byz_neighbors.is_empty() {
                continue;
            }
            let mut view: Vec<Message<S>> = self
                .graph
                .neighbors(target)
                .iter()
                .filter_map(|&m| {
                    self.roles.honest_index(m).map(|h| Message {
                        sender: m,
                        values: half[h].clone(),
                    })
                })
                .collect();
            if self.view_includes_target {
                let pos = view.partition_point(|m| m.sender < target);
                view.insert(
                    pos,
                    Message {
                        sender: target,
                        values: half[idx].clone(),
                    },
                );
            }
            let ctx = AttackContext {
                target,
                honest_msgs: &view,
                step: k,
                dim,
            };
            for &b in &byz_neighbors {
                let message = match &self.attack {
                    AttackSpec::None => unreachable!("validated at construction"),
                    AttackSpec::Gaussian => {
                        let mut rng =
                            stream(self.seed, StreamDomain::Attack, pack_pair(b, target), k);
                        gaussian_attack(&ctx, &mut rng)
                    }
                    AttackSpec::Duplicate { .. } => {
                        duplicate_attack(&ctx, self.victim.expect("victim resolved"))?
                    }
                    AttackSpec::Alie { r } => alie_attack(&ctx, *r),
                    AttackSpec::SignFlip => sign_flip_attack(&ctx),
                };
                byz_messages.insert((b, target), message);
            }
        }

        // robust aggregation
        let mut next: Vec<ParamVector<S>> = Vec::with_capacity(honest.len());
        for (idx, &agent) in honest.iter().enumerate() {
            let messages: Vec<Message<S>> = self
                .graph
                .neighbors(agent)
                .iter()
                .map(|&m| Message {
                    sender: m,
                    values: match self.roles.honest_index(m) {
                        Some(h) => half[h].clone(),
                        None => byz_messages[&(m, agent)].clone(),
                    },
                })
                .collect();
            let (own_weight, per_message) = &self.runtime_weights[idx];
            let inbound = InboundSet {
                own_id: agent,
                own: half[idx].clone(),
                messages,
                weights: Some(InboundWeights {
                    own: *own_weight,
                    per_message: per_message.clone(),
                }),
            };
            let model = self.rule.aggregate(&inbound)?;
            if !model.is_finite() {
                return Err(Error::NonFiniteModel { step: k, agent });
            }
            next.push(model);
        }
        self.models = next;
        self.step = k + 1;
        Ok(())
    }

    /// Disagreement `H` of the current models.
    pub fn disagreement(&self) -> S {
        let mean = self.mean_model();
        let inv = S::one() / S::from_usize(self.models.len()).unwrap();
        self.models
            .iter()
            .map(|m| {
                let d = m.distance(&mean);
                d * d
            })
            .sum::<S>()
            * inv
    }

    /// Records the metrics of the current state.
    pub fn record(&self) -> Result<TraceRow<S>> {
        let mean = self.mean_model();
        let train: Vec<Sample<S>> = self
            .shards
            .iter()
            .flat_map(|d| d.samples.iter().cloned())
            .collect();
        let train_loss = self.loss.mean_loss(&mean, &train)?;
        let (test_loss, test_accuracy) = if self.test.is_empty() {
            (S::zero(), S::zero())
        } else {
            (
                self.loss.mean_loss(&mean, &self.test)?,
                self.loss.accuracy(&mean, &self.test)?,
            )
        };
        Ok(TraceRow {
            k: self.step,
            train_loss,
            test_loss,
            test_accuracy,
            h: self.disagreement(),
            model_norms: self.models.iter().map(|m| m.norm()).collect(),
            mean_model: mean,
        })
    }
}

fn should_record(k: u64, stride: u64, steps: u64) -> bool {
    k.is_multiple_of(stride) || k == steps
}

/// Runs a config to completion, recording every `stride` steps.
pub fn run<S: Scalar>(cfg: &RunConfig<S>) -> Result<RunTrace<S>> {
    let mut sim = Simulation::new(cfg)?;
    let mut rows = Vec::new();
    for k in 0..=cfg.steps {
        if should_record(k, cfg.stride, cfg.steps) {
            rows.push(sim.record()?);
        }
        if k < cfg.steps {
            sim.step()?;
        }
    }
    Ok(RunTrace { rows })
}

/// Output of a paired stability run.
#[derive(Clone, Debug)]
pub struct PairOutput<S> {
    pub base: RunTrace<S>,
    pub perturbed: RunTrace<S>,
    pub stability: StabilityTrace<S>,
}

/// Runs the config twice in lockstep on datasets differing in exactly one
/// sample, sharing every random decision (initialization, sample positions,
/// attack randomness), and records `delta^k`/`eta^k`.
pub fn run_pair<S: Scalar>(cfg: &RunConfig<S>, perturb: &PerturbSpec<S>) -> Result<PairOutput<S>> {
    let (train, test) = match &cfg.data {
        DataSpec::Synth(spec) => {
            let data = synth_dataset(spec)?;
            (data.train, data.test)
        }
        DataSpec::Explicit { train, test } => (train.clone(), test.clone()),
    };
    let (_, roles) = resolve_topology(cfg)?;
    let slot = roles.honest_index(perturb.agent).ok_or_else(|| {
        Error::InvalidConfig(format!("perturbed agent {} is not honest", perturb.agent))
    })?;
    if perturb.index >= train[slot].samples.len() {
        return Err(Error::InvalidConfig(format!(
            "perturbed index {} out of range for Z = {}",
            perturb.index,
            train[slot].samples.len()
        )));
    }
    if perturb.replacement.features.len() != train[slot].samples[perturb.index].features.len() {
        return Err(Error::DimensionMismatch {
            expected: train[slot].samples[perturb.index].features.len(),
            got: perturb.replacement.features.len(),
        });
    }
    let mut train_prime = train.clone();
    train_prime[slot].samples[perturb.index] = perturb.replacement.clone();

    let cfg_base = RunConfig {
        data: DataSpec::Explicit {
            train,
            test: test.clone(),
        },
        ..cfg.clone()
    };
    let cfg_prime = RunConfig {
        data: DataSpec::Explicit {
            train: train_prime,
            test,
        },
        ..cfg.clone()
    };

    let mut sim_base = Simulation::new(&cfg_base)?;
    let mut sim_prime = Simulation::new(&cfg_prime)?;
    let mut base_rows = Vec::new();
    let mut prime_rows = Vec::new();
    let mut stability_rows = Vec::new();
    let inv_r = S::one() / S::from_usize(sim_base.honest_models().len()).unwrap();
    for k in 0..=cfg.steps {
        if should_record(k, cfg.stride, cfg.steps) {
            base_rows.push(sim_base.record()?);
            prime_rows.push(sim_prime.record()?);
            let delta = sim_base.mean_model().distance(&sim_prime.mean_model());
            let eta = sim_base
                .honest_models()
                .iter()
                .zip(sim_prime.honest_models())
                .map(|(a, b)| a.distance(b))
                .sum::<S>()
                * inv_r;
            stability_rows.push(StabilityRow { k, delta, eta });
        }
        if k < cfg.steps {
            sim_base.step()?;
            sim_prime.step()?;
        }
    }
    Ok(PairOutput {
        base: RunTrace { rows: base_rows },
        perturbed: RunTrace { rows: prime_rows },
        stability: StabilityTrace {
            rows: stability_rows,
        },
    })
}

/// Sweep axis: which config field varies and over which values.
#[derive(Clone, Debug)]
pub enum SweepAxis<S> {
    Rule(Vec<AggregationRule<S>>),
    Attack(Vec<AttackSpec<S>>),
    HonestCount(Vec<usize>),
    SamplesPerAgent(Vec<usize>),
    Seed(Vec<u64>),
}

/// One sweep entry: the axis value label and the run outcome. Failures are
/// recorded, not propagated, so the sweep continues.
#[derive(Debug)]
pub struct SweepItem<S> {
    pub label: String,
    pub seed: u64,
    pub result: Result<RunTrace<S>>,
}

fn sweep_config<S: Scalar>(
    base: &RunConfig<S>,
    axis: &SweepAxis<S>,
    position: usize,
) -> Result<(String, RunConfig<S>)> {
    let mut cfg = base.clone();
    let label = match axis {
        SweepAxis::Rule(values) => {
            cfg.aggregation = values[position].clone();
            values[position].name().to_string()
        }
        SweepAxis::Attack(values) => {
            cfg.attack = values[position].clone();
            values[position].name().to_string()
        }
        SweepAxis::HonestCount(values) => {
            let honest = values[position];
            let byz = match &cfg.topology.roles {
                RoleSpec::Count(count) => *count,
                RoleSpec::Ids(ids) => ids.len(),
            };
            match &mut cfg.topology.kind {
                GraphKind::Complete { agents } => *agents = honest + byz,
                GraphKind::ErdosRenyi { agents, .. } => *agents = honest + byz,
                GraphKind::Explicit(_) => {
                    return Err(Error::InvalidConfig(
                        "cannot sweep honest_count over an explicit graph".into(),
                    ))
                }
            }
            if let RoleSpec::Ids(_) = cfg.topology.roles {
                return Err(Error::InvalidConfig(
                    "cannot sweep honest_count with explicit byzantine ids".into(),
                ));
            }
            match &mut cfg.data {
                DataSpec::Synth(spec) => spec.honest_count = honest,
                DataSpec::Explicit { .. } => {
                    return Err(Error::InvalidConfig(
                        "cannot sweep honest_count over explicit datasets".into(),
                    ))
                }
            }
            honest.to_string()
        }
        SweepAxis::SamplesPerAgent(values) => {
            let z = values[position];
            match &mut cfg.data {
                DataSpec::Synth(spec) => spec.z = z,
                DataSpec::Explicit { .. } => {
                    return Err(Error::InvalidConfig(
                        "cannot sweep Z over explicit datasets".into(),
                    ))
                }
            }
            z.to_string()
        }
        SweepAxis::Seed(values) => {
            cfg.seed = values[position];
            values[position].to_string()
        }
    };
    // independent runs per value: offset the seed deterministically except
    // on the explicit seed axis
    if !matches!(axis, SweepAxis::Seed(_)) {
        cfg.seed = base.seed.wrapping_add(position as u64);
    }
    if let DataSpec::Synth(spec) = &mut cfg.data {
        spec.seed = cfg.seed;
    }
    Ok((label, cfg))
}

fn axis_len<S>(axis: &SweepAxis<S>) -> usize {
    match axis {
        SweepAxis::Rule(v) => v.len(),
        SweepAxis::Attack(v) => v.len(),
        SweepAxis::HonestCount(v) => v.len(),
        SweepAxis::SamplesPerAgent(v) => v.len(),
        SweepAxis::Seed(v) => v.len(),
    }
}

/// Independent runs along one axis; items run in parallel and failures are
/// marked per-item.
pub fn sweep<S: Scalar>(base: &RunConfig<S>, axis: &SweepAxis<S>) -> Vec<SweepItem<S>> {
    (0..axis_len(axis))
        .into_par_iter()
        .map(|position| match sweep_config(base, axis, position) {
            Ok((label, cfg)) => SweepItem {
                label,
                seed: cfg.seed,
                result: run(&cfg),
            },
            Err(e) => SweepItem {
                label: format!("value {position}"),
                seed: base.seed,
                result: Err(e),
            },
        })
        .collect()
}

/// Trace CSV header shared by all emitted traces.
pub const TRACE_CSV_HEADER: &str = "k,avg_loss_train,avg_loss_test,acc_test,H,delta,eta";

/// Writes the documented trace CSV. The `delta`/`eta` columns are filled
/// from the stability trace when one is supplied (its grid must match) and
/// left empty otherwise.
pub fn write_trace_csv<S: Scalar, W: Write>(
    out: &mut W,
    trace: &RunTrace<S>,
    stability: Option<&StabilityTrace<S>>,
) -> Result<()> {
    if let Some(stab) = stability {
        if stab.rows.len() != trace.rows.len()
            || stab
                .rows
                .iter()
                .zip(&trace.rows)
                .any(|(s, t)| s.k != t.k)
        {
            return Err(Error::GridMismatch);
        }
    }
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for (i, row) in trace.rows.iter().enumerate() {
        let (delta, eta) = match stability {
            Some(stab) => (
                stab.rows[i].delta.to_string(),
                stab.rows[i].eta.to_string(),
            ),
            None => (String::new(), String::new()),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.k, row.train_loss, row.test_loss, row.test_accuracy, row.h, delta, eta
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::SynthSpec;

    fn synth_spec(honest: usize, z: usize, seed: u64) -> SynthSpec<f64> {
        SynthSpec {
            classes: 2,
            features: 6,
            z,
            honest_count: honest,
            test_count: 50,
            separation: 3.0,
            noise: 1.0,
            seed,
        }
    }

    fn base_config(seed: u64) -> RunConfig<f64> {
        RunConfig {
            topology: TopologySpec {
                kind: GraphKind::Complete { agents: 6 },
                roles: RoleSpec::Ids(vec![]),
            },
            aggregation: AggregationRule::WeightedMean,
            attack: AttackSpec::None,
            attack_view_includes_target: false,
            loss: LossKind::StronglyConvexSoftmax { lambda: 0.1 },
            data: DataSpec::Synth(synth_spec(6, 20, seed)),
            schedule: StepSchedule::Sc { mu: 0.1, k0: 10.0 },
            batch: 1,
            steps: 30,
            seed,
            stride: 5,
            init: InitSpec::Zero,
            weights: WeightScheme::Metropolis,
        }
    }

    #[test]
    fn full_averaging_restores_exact_consensus() {
        let mut cfg = base_config(3);
        cfg.weights = WeightScheme::Uniform;
        let trace = run(&cfg).unwrap();
        for row in &trace.rows {
            assert_eq!(row.h, 0.0, "H at k = {}", row.k);
        }
    }

    #[test]
    fn runs_are_bit_deterministic() {
        let cfg = base_config(11);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.k, rb.k);
            assert_eq!(ra.train_loss, rb.train_loss);
            assert_eq!(ra.test_loss, rb.test_loss);
            assert_eq!(ra.h, rb.h);
            assert_eq!(ra.mean_model, rb.mean_model);
        }
    }

    #[test]
    fn checkpoint_and_resume_is_exact() {
        let cfg = base_config(17);
        let mut straight = Simulation::new(&cfg).unwrap();
        for _ in 0..20 {
            straight.step().unwrap();
        }
        let mut first_half = Simulation::new(&cfg).unwrap();
        for _ in 0..10 {
            first_half.step().unwrap();
        }
        let mut resumed = first_half.clone();
        for _ in 0..10 {
            resumed.step().unwrap();
        }
        assert_eq!(straight.honest_models(), resumed.honest_models());
        assert_eq!(straight.time(), resumed.time());
    }

    #[test]
    fn mean_model_follows_average_gradient_identity() {
        // attack-free with doubly stochastic weighted averaging: the mean
        // model must evolve as mean - (alpha / R) * sum of gradients
        let cfg = base_config(23);
        let shards = match &cfg.data {
            DataSpec::Synth(spec) => synth_dataset(spec).unwrap().train,
            DataSpec::Explicit { train, .. } => train.clone(),
        };
        let mut sim = Simulation::new(&cfg).unwrap();
        let honest: Vec<usize> = sim.roles().honest_ids().to_vec();
        for _ in 0..10 {
            let k = sim.time();
            let alpha = cfg.schedule.step_size(k);
            let mut expected = sim.mean_model();
            let r_inv = 1.0 / honest.len() as f64;
            for (idx, &agent) in honest.iter().enumerate() {
                let batch: Vec<Sample<f64>> = sample_indices(cfg.seed, agent, k, 20, cfg.batch)
                    .into_iter()
                    .map(|i| shards[idx].samples[i].clone())
                    .collect();
                let grad = sim
                    .loss_spec()
                    .batch_grad(&sim.honest_models()[idx], &batch)
                    .unwrap();
                expected.axpy(-alpha * r_inv, &grad);
            }
            sim.step().unwrap();
            let got = sim.mean_model();
            assert!(got.distance(&expected) < 1e-10);
        }
    }

    #[test]
    fn identical_shards_keep_agents_identical() {
        let spec = synth_spec(1, 15, 5);
        let data = synth_dataset(&spec).unwrap();
        let shard = data.train[0].clone();
        let train: Vec<LocalDataset<f64>> = (0..4)
            .map(|slot| LocalDataset {
                agent: slot,
                samples: shard.samples.clone(),
            })
            .collect();
        let mut cfg = base_config(29);
        cfg.topology = TopologySpec {
            kind: GraphKind::Complete { agents: 4 },
            roles: RoleSpec::Ids(vec![]),
        };
        cfg.data = DataSpec::Explicit {
            train,
            test: data.test.clone(),
        };
        let mut sim = Simulation::new(&cfg).unwrap();
        for _ in 0..10 {
            sim.step().unwrap();
            let models = sim.honest_models();
            for m in &models[1..] {
                assert!(m.distance(&models[0]) < 1e-12);
            }
        }
    }

    #[test]
    fn disagreement_is_invariant_under_relabeling() {
        // Relabel agents by a rotation, carrying edges, roles, and shards
        // along. With Z = 1 the index draws are forced to 0 and the sign
        // flip attack is deterministic, so the permuted run is genuinely
        // equivalent and H may differ only by float reassociation.
        let spec = synth_spec(4, 1, 31);
        let data = synth_dataset(&spec).unwrap();

        let edges_a: Vec<(usize, usize)> = vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)];
        let perm = |v: usize| (v + 1) % 5;
        let edges_b: Vec<(usize, usize)> =
            edges_a.iter().map(|&(a, b)| (perm(a), perm(b))).collect();

        let mk_cfg = |edges: Vec<(usize, usize)>, byz: usize, shard_order: Vec<usize>| {
            let train: Vec<LocalDataset<f64>> = shard_order
                .iter()
                .enumerate()
                .map(|(slot, &src)| LocalDataset {
                    agent: slot,
                    samples: data.train[src].samples.clone(),
                })
                .collect();
            RunConfig {
                topology: TopologySpec {
                    kind: GraphKind::Explicit(Graph::new(5, edges).unwrap()),
                    roles: RoleSpec::Ids(vec![byz]),
                },
                aggregation: AggregationRule::TrimmedMean { b: 1 },
                attack: AttackSpec::SignFlip,
                attack_view_includes_target: false,
                loss: LossKind::StronglyConvexSoftmax { lambda: 0.1 },
                data: DataSpec::Explicit {
                    train,
                    test: data.test.clone(),
                },
                schedule: StepSchedule::Sc { mu: 0.1, k0: 10.0 },
                batch: 1,
                steps: 20,
                seed: 500,
                stride: 2,
                init: InitSpec::Zero,
                weights: WeightScheme::Metropolis,
            }
        };

        // run A: byzantine agent 4, honest 0..=3 hold shards 0..=3
        let cfg_a = mk_cfg(edges_a, 4, vec![0, 1, 2, 3]);
        // run B: byzantine agent 0, honest 1..=4 hold the rotated shards
        let cfg_b = mk_cfg(edges_b, 0, vec![0, 1, 2, 3]);
        let trace_a = run(&cfg_a).unwrap();
        let trace_b = run(&cfg_b).unwrap();
        for (ra, rb) in trace_a.rows.iter().zip(&trace_b.rows) {
            assert!(
                (ra.h - rb.h).abs() < 1e-12,
                "H diverged at k = {}: {} vs {}",
                ra.k,
                ra.h,
                rb.h
            );
        }
    }

    #[test]
    fn pair_with_identical_replacement_has_zero_delta() {
        let mut cfg = base_config(37);
        cfg.steps = 25;
        let data = match &cfg.data {
            DataSpec::Synth(spec) => synth_dataset(spec).unwrap(),
            _ => unreachable!(),
        };
        let perturb = PerturbSpec {
            agent: 2,
            index: 3,
            replacement: data.train[2].samples[3].clone(),
        };
        let out = run_pair(&cfg, &perturb).unwrap();
        for row in &out.stability.rows {
            assert_eq!(row.delta, 0.0);
            assert_eq!(row.eta, 0.0);
        }
    }

    #[test]
    fn delta_is_zero_until_perturbed_index_is_drawn() {
        let mut cfg = base_config(41);
        cfg.steps = 40;
        cfg.stride = 1;
        let agent = 1usize;
        let index = 7usize;
        let replacement = Sample {
            features: vec![9.0; 6],
            label: 0,
        };
        let out = run_pair(
            &cfg,
            &PerturbSpec {
                agent,
                index,
                replacement,
            },
        )
        .unwrap();
        // first step at which the perturbed agent draws the perturbed index
        let first_hit = (0..=cfg.steps)
            .find(|&k| sample_indices(cfg.seed, agent, k, 20, cfg.batch).contains(&index));
        if let Some(first_hit) = first_hit {
            for row in &out.stability.rows {
                if row.k <= first_hit {
                    assert_eq!(row.delta, 0.0, "delta at k = {} before first draw", row.k);
                }
            }
            assert!(
                out.stability.rows.iter().any(|r| r.delta > 0.0),
                "perturbation never propagated"
            );
        }
    }

    #[test]
    fn delta_never_exceeds_eta() {
        let mut cfg = base_config(43);
        cfg.topology = TopologySpec {
            kind: GraphKind::ErdosRenyi { agents: 6, p: 0.8 },
            roles: RoleSpec::Ids(vec![]),
        };
        cfg.steps = 50;
        let replacement = Sample {
            features: vec![-4.0; 6],
            label: 1,
        };
        let out = run_pair(
            &cfg,
            &PerturbSpec {
                agent: 0,
                index: 0,
                replacement,
            },
        )
        .unwrap();
        for row in &out.stability.rows {
            assert!(row.delta <= row.eta + 1e-12);
        }
    }

    #[test]
    fn gaussian_attack_with_ios_still_trains() {
        let mut cfg = base_config(47);
        cfg.topology = TopologySpec {
            kind: GraphKind::Complete { agents: 8 },
            roles: RoleSpec::Count(2),
        };
        cfg.data = DataSpec::Synth(synth_spec(6, 20, 47));
        cfg.aggregation = AggregationRule::Ios { q: 2 };
        cfg.attack = AttackSpec::Gaussian;
        let trace = run(&cfg).unwrap();
        let first = &trace.rows[0];
        let last = trace.rows.last().unwrap();
        assert!(last.train_loss < first.train_loss);
        assert!(last.h.is_finite());
    }

    #[test]
    fn sign_flip_degrades_plain_averaging() {
        // robustness failure of plain weighted averaging under sign flip:
        // training loss at k = 500 stays far above the attack-free baseline
        let seeds = [53u64, 59];
        let mut degraded = 0;
        for &seed in &seeds {
            let mut attack_free = base_config(seed);
            attack_free.steps = 500;
            let baseline = run(&attack_free).unwrap();

            let mut attacked = attack_free.clone();
            attacked.topology = TopologySpec {
                kind: GraphKind::Complete { agents: 8 },
                roles: RoleSpec::Count(2),
            };
            attacked.data = DataSpec::Synth(synth_spec(6, 20, seed));
            attacked.attack = AttackSpec::SignFlip;
            let hit = run(&attacked).unwrap();

            let base_loss = baseline.rows.last().unwrap().train_loss;
            let hit_loss = hit.rows.last().unwrap().train_loss;
            if hit_loss >= 2.0 * base_loss {
                degraded += 1;
            }
        }
        assert_eq!(degraded, seeds.len(), "sign flip failed to degrade plain averaging");
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let mut cfg = base_config(61);
        cfg.schedule = StepSchedule::ScaledInverse {
            s: 1e300,
            rate: 0.0,
        };
        match run(&cfg) {
            Err(Error::NonFiniteModel { .. }) => {}
            other => panic!("expected NonFiniteModel, got {other:?}"),
        }
    }

    #[test]
    fn byzantine_without_attack_is_rejected() {
        let mut cfg = base_config(67);
        cfg.topology = TopologySpec {
            kind: GraphKind::Complete { agents: 8 },
            roles: RoleSpec::Count(2),
        };
        assert!(matches!(
            Simulation::new(&cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn sweep_covers_values_and_marks_failures() {
        let mut cfg = base_config(71);
        cfg.steps = 10;
        let axis = SweepAxis::Seed(vec![1, 2, 3, 4, 5]);
        let items = sweep(&cfg, &axis);
        assert_eq!(items.len(), 5);
        assert!(items.iter().all(|i| i.result.is_ok()));
        assert_eq!(items[0].label, "1");

        let empty: SweepAxis<f64> = SweepAxis::Seed(vec![]);
        assert!(sweep(&cfg, &empty).is_empty());

        // honest_count sweep over an explicit graph must fail per-item
        let axis = SweepAxis::HonestCount(vec![3, 4]);
        let mut bad = cfg.clone();
        bad.topology = TopologySpec {
            kind: GraphKind::Explicit(Graph::complete(6)),
            roles: RoleSpec::Ids(vec![]),
        };
        let items = sweep(&bad, &axis);
        assert_eq!(items.len(), 2);
        assert!(items.iter().all(|i| i.result.is_err()));
    }

    #[test]
    fn honest_count_sweep_rebuilds_topology() {
        let mut cfg = base_config(73);
        cfg.steps = 10;
        cfg.topology = TopologySpec {
            kind: GraphKind::Complete { agents: 7 },
            roles: RoleSpec::Count(2),
        };
        cfg.aggregation = AggregationRule::Ios { q: 2 };
        cfg.attack = AttackSpec::Gaussian;
        cfg.data = DataSpec::Synth(synth_spec(5, 20, 73));
        let axis = SweepAxis::HonestCount(vec![3, 5, 8]);
        let items = sweep(&cfg, &axis);
        for (item, honest) in items.iter().zip([3usize, 5, 8]) {
            let trace = item.result.as_ref().unwrap();
            assert_eq!(trace.rows.last().unwrap().model_norms.len(), honest);
        }
    }

    #[test]
    fn trace_csv_has_documented_shape() {
        let mut cfg = base_config(79);
        cfg.steps = 10;
        cfg.stride = 3;
        let trace = run(&cfg).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &trace, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRACE_CSV_HEADER);
        let ks: Vec<u64> = lines
            .map(|l| l.split(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(ks, vec![0, 3, 6, 9, 10]);
        assert!(ks.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn runs_with_f32_scalar() {
        let cfg: RunConfig<f32> = RunConfig {
            topology: TopologySpec {
                kind: GraphKind::Complete { agents: 5 },
                roles: RoleSpec::Ids(vec![4]),
            },
            aggregation: AggregationRule::TrimmedMean { b: 1 },
            attack: AttackSpec::Gaussian,
            attack_view_includes_target: false,
            loss: LossKind::Softmax,
            data: DataSpec::Synth(SynthSpec {
                classes: 2,
                features: 4,
                z: 12,
                honest_count: 4,
                test_count: 20,
                separation: 3.0,
                noise: 1.0,
                seed: 3,
            }),
            schedule: StepSchedule::Cvx { k0: 10.0 },
            batch: 2,
            steps: 15,
            seed: 3,
            stride: 5,
            init: InitSpec::Zero,
            weights: WeightScheme::Metropolis,
        };
        let trace = run(&cfg).unwrap();
        assert!(trace.rows.iter().all(|r| r.train_loss.is_finite()));
        assert_eq!(trace.rows.last().unwrap().k, 15);
    }

    #[test]
    fn sampling_is_uniform() {
        // chi-square goodness of fit over 1e5 draws from Z = 10 at
        // significance 0.001 (critical value 27.877 for 9 degrees of freedom)
        let z = 10usize;
        let mut counts = vec![0usize; z];
        let draws = 100_000usize;
        let batch = 10;
        for step in 0..(draws / batch) as u64 {
            for i in sample_indices(123, 0, step, z, batch) {
                counts[i] += 1;
            }
        }
        let expected = draws as f64 / z as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 27.877, "chi-square statistic {chi2}");
    }
}
