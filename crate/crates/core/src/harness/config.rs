use serde::{Deserialize, Serialize};

use crate::encoders::ModelConfig;
use crate::error::{Result, TplError};
use crate::exec::Execution;
use crate::numerics::AdamWConfig;
use crate::scheduler::StrategyKind;

/// `θ` in the λ schedule: a number, or `"auto"` for `θ = d₀·T` with `d₀`
/// measured at iteration 0 (so λ starts at exactly 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Theta {
    Fixed(f64),
    Rule(ThetaRule),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaRule {
    Auto,
}

impl Default for Theta {
    fn default() -> Self {
        Theta::Rule(ThetaRule::Auto)
    }
}

impl Theta {
    /// Resolves against the distance measured at iteration 0.
    pub fn resolve(self, d0: f64, total: usize) -> f64 {
        match self {
            Theta::Fixed(v) => v,
            // a zero initial distance would give θ = 0; keep θ positive
            Theta::Rule(ThetaRule::Auto) => d0.max(1e-6) * total as f64,
        }
    }
}

impl std::str::FromStr for Theta {
    type Err = TplError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Theta::Rule(ThetaRule::Auto));
        }
        s.parse::<f64>()
            .map(Theta::Fixed)
            .map_err(|_| TplError::invalid(format!("theta must be 'auto' or a number, got '{s}'")))
    }
}

/// Which learnable pieces a run has.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Components {
    pub vision_prompts: bool,
    pub language_prompts: bool,
    pub fusion: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            vision_prompts: true,
            language_prompts: true,
            fusion: true,
        }
    }
}

/// How tuned and original predictions are combined at evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSpace {
    #[default]
    Logit,
    Probability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            lr: 1e-3,
            lr_floor: 1e-5,
            batch_size: 32,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub lr: f64,
    pub lr_floor: f64,
    /// `T`, stage-2 iterations.
    pub iterations: usize,
    pub batch_size: usize,
    pub theta: Theta,
    pub seeds: Vec<u64>,
    pub strategy: StrategyKind,
    pub components: Components,
    pub per_domain_weights: bool,
    pub prompt_ensemble: bool,
    pub eval_average: bool,
    pub eval_space: EvalSpace,
    pub checkpoint_every: usize,
    /// Training samples used to measure the inter-domain distance.
    pub probe_size: usize,
    pub temperature: f64,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub optimizer: AdamWConfig,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            lr: 3e-5,
            lr_floor: 0.0,
            iterations: 2000,
            batch_size: 32,
            theta: Theta::default(),
            seeds: vec![0, 1, 2],
            strategy: StrategyKind::Transitive,
            components: Components::default(),
            per_domain_weights: false,
            prompt_ensemble: false,
            eval_average: true,
            eval_space: EvalSpace::Logit,
            checkpoint_every: 100,
            probe_size: 512,
            temperature: crate::objective::DEFAULT_TEMPERATURE,
            val_fraction: 0.2,
            split_seed: 0,
            optimizer: AdamWConfig::default(),
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.pretrain.optimizer.validate()?;
        let positive = [
            ("lr", self.lr),
            ("temperature", self.temperature),
            ("pretrain.lr", self.pretrain.lr),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(TplError::invalid(format!("{k} must be positive, got {v}")));
        }
        let counts = [
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
            ("probe_size", self.probe_size),
            ("pretrain.batch_size", self.pretrain.batch_size),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(TplError::invalid(format!("{k} must be positive")));
        }
        if self.lr_floor < 0.0 || self.lr_floor > self.lr || self.pretrain.lr_floor < 0.0 || self.pretrain.lr_floor > self.pretrain.lr {
            return Err(TplError::invalid("learning-rate floors must lie in [0, lr]"));
        }
        if self.seeds.is_empty() {
            return Err(TplError::invalid("seeds must be nonempty"));
        }
        if let Theta::Fixed(t) = self.theta {
            if !(t > 0.0 && t.is_finite()) {
                return Err(TplError::invalid(format!("theta must be positive, got {t}")));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(TplError::invalid("val_fraction must be in (0, 0.5)"));
        }
        if !self.components.vision_prompts && !self.components.language_prompts {
            return Err(TplError::invalid("a tuned run needs vision prompts, language prompts, or both"));
        }
        Ok(())
    }

    /// A faster preset for tests and the acceptance study: the compact
    /// model with a shorter, larger-step schedule.
    pub fn quick() -> Self {
        Self {
            model: ModelConfig::compact(),
            pretrain: PretrainConfig {
                iterations: 250,
                lr: 3e-4,
                ..PretrainConfig::default()
            },
            lr: 2e-3,
            iterations: 300,
            checkpoint_every: 30,
            probe_size: 256,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn theta_forms() {
        let a: Theta = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(a, Theta::Rule(ThetaRule::Auto));
        let b: Theta = serde_json::from_str("1250.0").unwrap();
        assert_eq!(b, Theta::Fixed(1250.0));
        assert!(serde_json::from_str::<Theta>("\"sometimes\"").is_err());
        assert_eq!(a.resolve(0.25, 2000), 500.0);
        assert_eq!("1.25e3".parse::<Theta>().unwrap(), Theta::Fixed(1250.0));
    }

    #[test]
    fn config_rejects_unknown_keys_and_roundtrips() {
        assert!(serde_json::from_str::<TrainConfig>("{\"lr\": 1e-4, \"bogus\": 1}").is_err());
        let c: TrainConfig = serde_json::from_str("{\"lr\": 1e-4}").unwrap();
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.iterations, 2000);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        c.validate().unwrap();
        let bad = TrainConfig { seeds: vec![], ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }
}
