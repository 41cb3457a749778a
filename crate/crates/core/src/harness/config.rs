use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::expert::ExpertConfig;
use crate::guardian::{GuardianConfig, GuardianMode};
use crate::learner::{Constraint, LambdaMode, LearnerConfig};
use crate::sim::{EnvConfig, SeedRange};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Egpo,
    Sac,
    SacRs,
    SacLag,
    Bc,
    CqlOffline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Egpo => "egpo",
            Method::Sac => "sac",
            Method::SacRs => "sac_rs",
            Method::SacLag => "sac_lag",
            Method::Bc => "bc",
            Method::CqlOffline => "cql_offline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "egpo" => Method::Egpo,
            "sac" => Method::Sac,
            "sac_rs" => Method::SacRs,
            "sac_lag" => Method::SacLag,
            "bc" => Method::Bc,
            "cql_offline" => Method::CqlOffline,
            _ => return Err(Error::Config(format!("unknown method `{s}`"))),
        })
    }

    pub fn is_online(self) -> bool {
        !matches!(self, Method::Bc | Method::CqlOffline)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Distance rule instead of the expert-density switch.
    pub rule_switch: bool,
    /// Multiplier held at zero.
    pub no_intervention_min: bool,
    /// Integral-only multiplier update.
    pub no_pid: bool,
    /// Conservative critic term removed.
    pub no_cql: bool,
    /// Environment reward replaced by zero.
    pub zero_env_reward: bool,
}

impl Ablations {
    pub fn any(&self) -> bool {
        self.rule_switch || self.no_intervention_min || self.no_pid || self.no_cql || self.zero_env_reward
    }

    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "rule_switch" => self.rule_switch = true,
            "no_intervention_min" => self.no_intervention_min = true,
            "no_pid" => self.no_pid = true,
            "no_cql" => self.no_cql = true,
            "zero_env_reward" => self.zero_env_reward = true,
            _ => return Err(Error::Config(format!("unknown ablation `{name}`"))),
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = vec![];
        for (on, n) in [
            (self.rule_switch, "rule_switch"),
            (self.no_intervention_min, "no_intervention_min"),
            (self.no_pid, "no_pid"),
            (self.no_cql, "no_cql"),
            (self.zero_env_reward, "zero_env_reward"),
        ] {
            if on {
                v.push(n);
            }
        }
        v
    }
}

/// Full description of one run; serialised as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub total_env_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Environment steps collected between two learner iterations.
    pub iteration_steps: usize,
    /// Rollout workers; 1 is the reproducible setting.
    pub workers: usize,
    /// Save a checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    /// `sac_rs`: reward minus `cost_weight * cost`.
    pub cost_weight: f64,
    /// `sac_lag`: limit on the mean episodic environment cost.
    pub cost_limit: f64,
    /// `bc` / `cql_offline` input.
    pub dataset: Option<PathBuf>,
    pub bc_epochs: usize,
    pub offline_updates: usize,
    pub ablation: Ablations,
    pub env: EnvConfig,
    pub train_scenes: SeedRange,
    pub test_scenes: SeedRange,
    pub guardian: GuardianConfig,
    pub expert: ExpertConfig,
    pub learner: LearnerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Egpo,
            seed: 0,
            total_env_steps: 100_000,
            eval_every: 5_000,
            eval_episodes: 20,
            iteration_steps: 200,
            workers: 1,
            checkpoint_every: 0,
            cost_weight: 1.0,
            cost_limit: 1.0,
            dataset: None,
            bc_epochs: 50,
            offline_updates: 20_000,
            ablation: Ablations::default(),
            env: EnvConfig::default(),
            train_scenes: SeedRange { start: 0, count: 100 },
            test_scenes: SeedRange { start: 1000, count: 50 },
            guardian: GuardianConfig::default(),
            expert: ExpertConfig::default(),
            learner: LearnerConfig::default(),
        }
    }
}

/// How the stored reward is derived from the environment signals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shaping {
    pub env_reward_weight: f64,
    pub cost_weight: f64,
}

impl Shaping {
    pub fn apply(&self, reward: f64, cost: f64) -> f64 {
        let r = if self.env_reward_weight == 1.0 {
            reward
        } else {
            self.env_reward_weight * reward
        };
        if self.cost_weight == 0.0 {
            r
        } else {
            r - self.cost_weight * cost
        }
    }
}

/// Method and ablations folded into concrete component settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub guardian: GuardianConfig,
    pub learner: LearnerConfig,
    pub shaping: Shaping,
    /// Whether expert statistics are computed for every step.
    pub query_expert: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let lag_only_pid = self.method == Method::SacLag && self.ablation.names() == ["no_pid"];
        if self.method != Method::Egpo && self.ablation.any() && !lag_only_pid {
            return bad(format!(
                "ablations {:?} are only valid with method egpo (sac_lag accepts no_pid)",
                self.ablation.names()
            ));
        }
        if self.workers == 0 || self.iteration_steps == 0 {
            return bad("workers and iteration_steps must be positive".into());
        }
        if self.eval_episodes == 0 || self.eval_every == 0 {
            return bad("eval_every and eval_episodes must be positive".into());
        }
        if self.train_scenes.count == 0 || self.test_scenes.count == 0 {
            return bad("scene sets must be non-empty".into());
        }
        if self.train_scenes.overlaps(&self.test_scenes) {
            return bad("train and test scene ranges overlap".into());
        }
        if !(self.cost_weight >= 0.0) || !(self.cost_limit >= 0.0) {
            return bad("cost_weight and cost_limit must be >= 0".into());
        }
        if matches!(self.method, Method::Bc | Method::CqlOffline) && self.dataset.is_none() {
            return bad(format!("method {} needs `dataset`", self.method.name()));
        }
        self.guardian.validate()?;
        self.expert.validate()?;
        self.learner.validate()
    }

    pub fn resolve(&self) -> Result<Resolved> {
        self.validate()?;
        let mut learner = self.learner.clone();
        let mut guardian = self.guardian;
        let mut shaping = Shaping {
            env_reward_weight: 1.0,
            cost_weight: 0.0,
        };
        match self.method {
            Method::Egpo => {
                let a = &self.ablation;
                if a.rule_switch {
                    guardian.mode = GuardianMode::RuleBased;
                }
                if a.no_intervention_min {
                    learner.lambda_mode = LambdaMode::Zero;
                }
                if a.no_pid {
                    learner.kp = 0.0;
                    learner.kd = 0.0;
                }
                if a.no_cql {
                    learner.beta = 0.0;
                }
                if a.zero_env_reward {
                    shaping.env_reward_weight = 0.0;
                }
                learner.constraint = Constraint::Intervention;
            }
            Method::Sac | Method::SacRs => {
                guardian = GuardianConfig::off();
                learner.beta = 0.0;
                learner.constraint = Constraint::None;
                learner.lambda_mode = LambdaMode::Zero;
                if self.method == Method::SacRs {
                    shaping.cost_weight = self.cost_weight;
                }
            }
            Method::SacLag => {
                guardian = GuardianConfig::off();
                learner.beta = 0.0;
                learner.constraint = Constraint::EnvCost;
                learner.intervention_limit = self.cost_limit;
                if self.ablation.no_pid {
                    learner.kp = 0.0;
                    learner.kd = 0.0;
                }
            }
            Method::Bc | Method::CqlOffline => {
                guardian = GuardianConfig::off();
                learner.constraint = Constraint::None;
                learner.lambda_mode = LambdaMode::Zero;
                if self.method == Method::Bc {
                    learner.beta = 0.0;
                }
            }
        }
        let query_expert = guardian.mode != GuardianMode::Off || learner.beta > 0.0 || self.method == Method::Egpo;
        Ok(Resolved {
            guardian,
            learner,
            shaping,
            query_expert,
        })
    }

    /// Short run label used to group runs in reports.
    pub fn label(&self) -> String {
        let mut s = self.method.name().to_string();
        for n in self.ablation.names() {
            s.push('+');
            s.push_str(n);
        }
        if self.method == Method::Egpo {
            let d = GuardianConfig::default();
            if self.guardian.eta != d.eta {
                s.push_str(&format!("@eta={}", self.guardian.eta));
            }
            if self.guardian.mode == GuardianMode::Off {
                s.push_str("@guardian=off");
            }
            if self.expert.quality != 1.0 {
                s.push_str(&format!("@quality={}", self.expert.quality));
            }
        }
        s
    }
}
