//! TOML run-config model and its conversion into the engine config.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use brdsgd::aggregation::AggregationRule;
use brdsgd::attacks::AttackSpec;
use brdsgd::engine::{
    DataSpec, GraphKind, InitSpec, RoleSpec, RunConfig, TopologySpec, WeightScheme,
};
use brdsgd::learner::{load_idx, LocalDataset, LossKind, StepSchedule, SynthSpec};
use brdsgd::topology::Graph;
use brdsgd::Real;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub topology: TopologySection,
    pub aggregation: AggregationSection,
    #[serde(default)]
    pub attack: AttackSection,
    pub loss: LossSection,
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub run: RunSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub kind: String,
    #[serde(default)]
    pub agents: Option<usize>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub byzantine: Option<usize>,
    #[serde(default)]
    pub byzantine_ids: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationSection {
    pub rule: String,
    #[serde(default)]
    pub b: Option<usize>,
    #[serde(default)]
    pub q: Option<usize>,
    #[serde(default)]
    pub tau: Option<Real>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub r: Option<Real>,
    #[serde(default)]
    pub victim: Option<usize>,
    #[serde(default)]
    pub view_includes_target: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub kind: String,
    #[serde(default)]
    pub lambda: Option<Real>,
    #[serde(default)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub features: Option<usize>,
    #[serde(default)]
    pub z: Option<usize>,
    #[serde(default)]
    pub test: Option<usize>,
    #[serde(default)]
    pub separation: Option<Real>,
    #[serde(default)]
    pub noise: Option<Real>,
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: String,
    #[serde(default)]
    pub k0: Option<Real>,
    #[serde(default)]
    pub mu: Option<Real>,
    #[serde(default)]
    pub a: Option<Real>,
    #[serde(default)]
    pub l: Option<Real>,
    #[serde(default)]
    pub s: Option<Real>,
    #[serde(default)]
    pub rate: Option<Real>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub steps: u64,
    #[serde(default)]
    pub batch: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub stride: Option<u64>,
    #[serde(default)]
    pub weights: Option<String>,
    #[serde(default)]
    pub init: Option<Real>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Builds the engine config. `config_dir` anchors relative data paths.
    pub fn to_run_config(&self, config_dir: &Path) -> Result<RunConfig<Real>> {
        let seed = self.run.seed;

        let kind = match self.topology.kind.as_str() {
            "complete" => GraphKind::Complete {
                agents: self
                    .topology
                    .agents
                    .context("topology.agents required for kind = \"complete\"")?,
            },
            "erdos_renyi" => GraphKind::ErdosRenyi {
                agents: self
                    .topology
                    .agents
                    .context("topology.agents required for kind = \"erdos_renyi\"")?,
                p: self
                    .topology
                    .p
                    .context("topology.p required for kind = \"erdos_renyi\"")?,
            },
            "file" => {
                let rel = self
                    .topology
                    .path
                    .as_ref()
                    .context("topology.path required for kind = \"file\"")?;
                let path = config_dir.join(rel);
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading graph {}", path.display()))?;
                GraphKind::Explicit(Graph::from_text(&text)?)
            }
            other => bail!("unknown topology kind {other:?}"),
        };
        let roles = match (&self.topology.byzantine_ids, self.topology.byzantine) {
            (Some(ids), _) => RoleSpec::Ids(ids.clone()),
            (None, Some(count)) => RoleSpec::Count(count),
            (None, None) => RoleSpec::Ids(Vec::new()),
        };

        let aggregation = match self.aggregation.rule.as_str() {
            "mean" => AggregationRule::WeightedMean,
            "trimmed_mean" => AggregationRule::TrimmedMean {
                b: self
                    .aggregation
                    .b
                    .context("aggregation.b required for rule = \"trimmed_mean\"")?,
            },
            "ios" => AggregationRule::Ios {
                q: self
                    .aggregation
                    .q
                    .context("aggregation.q required for rule = \"ios\"")?,
            },
            "scc" => AggregationRule::Scc {
                tau: self.aggregation.tau.unwrap_or(1.0),
            },
            other => bail!("unknown aggregation rule {other:?}"),
        };

        let attack = match self.attack.kind.as_deref().unwrap_or("none") {
            "none" => AttackSpec::None,
            "gaussian" => AttackSpec::Gaussian,
            "duplicate" => AttackSpec::Duplicate {
                victim: self.attack.victim,
            },
            "alie" => AttackSpec::Alie {
                r: self.attack.r.unwrap_or(1.0),
            },
            "signflip" => AttackSpec::SignFlip,
            other => bail!("unknown attack kind {other:?}"),
        };

        let loss = match self.loss.kind.as_str() {
            "strongly_convex_softmax" => LossKind::StronglyConvexSoftmax {
                lambda: self.loss.lambda.unwrap_or(0.1),
            },
            "softmax" => LossKind::Softmax,
            "mlp" => LossKind::Mlp {
                hidden: self.loss.hidden.unwrap_or(16),
            },
            other => bail!("unknown loss kind {other:?}"),
        };

        let agents = match &kind {
            GraphKind::Complete { agents } | GraphKind::ErdosRenyi { agents, .. } => *agents,
            GraphKind::Explicit(g) => g.n_agents(),
        };
        let byz = match &roles {
            RoleSpec::Ids(ids) => ids.len(),
            RoleSpec::Count(count) => *count,
        };
        if byz >= agents {
            bail!("{byz} byzantine agents leaves no honest ones among {agents}");
        }
        let data = self.data_spec(config_dir, seed, agents - byz)?;

        let k0 = self.schedule.k0.unwrap_or(100.0);
        let schedule = match self.schedule.kind.as_str() {
            "sc" => {
                let mu = match (self.schedule.mu, &loss) {
                    (Some(mu), _) => mu,
                    (None, LossKind::StronglyConvexSoftmax { lambda }) => *lambda,
                    (None, _) => bail!("schedule.mu required for kind = \"sc\" with this loss"),
                };
                StepSchedule::Sc { mu, k0 }
            }
            "cvx" => StepSchedule::Cvx { k0 },
            "ncvx" => StepSchedule::Ncvx {
                a: self.schedule.a.unwrap_or(1.0),
                l: self.schedule.l.unwrap_or(1.0),
                k0,
            },
            "scaled_inverse" => StepSchedule::ScaledInverse {
                s: self.schedule.s.unwrap_or(1.0),
                rate: self.schedule.rate.unwrap_or(0.01),
            },
            other => bail!("unknown schedule kind {other:?}"),
        };

        let weights = match self.run.weights.as_deref().unwrap_or("metropolis") {
            "metropolis" => WeightScheme::Metropolis,
            "uniform" => WeightScheme::Uniform,
            other => bail!("unknown weight scheme {other:?}"),
        };
        let init = match self.run.init {
            None => InitSpec::Zero,
            Some(c) => {
                if c == 0.0 {
                    InitSpec::Zero
                } else {
                    InitSpec::Constant(c)
                }
            }
        };

        Ok(RunConfig {
            topology: TopologySpec { kind, roles },
            aggregation,
            attack,
            attack_view_includes_target: self.attack.view_includes_target.unwrap_or(false),
            loss,
            data,
            schedule,
            batch: self.run.batch.unwrap_or(1),
            steps: self.run.steps,
            seed,
            stride: self.run.stride.unwrap_or(10),
            init,
            weights,
        })
    }

    fn data_spec(&self, config_dir: &Path, seed: u64, honest: usize) -> Result<DataSpec<Real>> {
        let d = &self.data;
        if let (Some(images), Some(labels)) = (&d.images, &d.labels) {
            let train = load_idx::<Real>(&config_dir.join(images), &config_dir.join(labels))?;
            let test = match (&d.test_images, &d.test_labels) {
                (Some(ti), Some(tl)) => {
                    load_idx::<Real>(&config_dir.join(ti), &config_dir.join(tl))?
                }
                _ => Vec::new(),
            };
            // shard the IDX samples evenly across the honest agents
            let z = train.len() / honest;
            if z == 0 {
                bail!("{} IDX samples cannot cover {honest} agents", train.len());
            }
            let shards = (0..honest)
                .map(|slot| LocalDataset {
                    agent: slot,
                    samples: train[slot * z..(slot + 1) * z].to_vec(),
                })
                .collect();
            return Ok(DataSpec::Explicit {
                train: shards,
                test,
            });
        }
        Ok(DataSpec::Synth(SynthSpec {
            classes: d.classes.unwrap_or(2),
            features: d.features.unwrap_or(20),
            z: d.z.context("data.z required for synthetic data")?,
            honest_count: honest,
            test_count: d.test.unwrap_or(1000),
            separation: d.separation.unwrap_or(3.0),
            noise: d.noise.unwrap_or(1.0),
            seed,
        }))
    }
}
