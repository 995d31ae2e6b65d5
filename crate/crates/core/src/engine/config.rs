use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::collection::Collection;
use crate::metrics::{Metric, DEFAULT_NDCG_CUTOFF};
use crate::simulation::{generate_collection, SyntheticConfig};
use crate::strategies::StrategyConfig;
use crate::trec_io::Manifest;

/// A budget as an exact fraction of the pool size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BudgetRatio {
    num: u64,
    den: u64,
}

pub const DEFAULT_RATIOS: [(u64, u64); 10] = [
    (1, 512),
    (1, 256),
    (1, 128),
    (1, 64),
    (1, 32),
    (1, 16),
    (1, 8),
    (1, 4),
    (1, 2),
    (1, 1),
];

impl BudgetRatio {
    pub fn new(num: u64, den: u64) -> Result<Self, EngineError> {
        if den == 0 || num == 0 || num > den {
            return Err(EngineError::Config(format!("budget ratio {num}/{den} is not in (0, 1]")));
        }
        Ok(Self { num, den })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `ceil(ratio * pool)` in exact integer arithmetic.
    pub fn budget(self, pool: usize) -> usize {
        let n = pool as u128 * self.num as u128;
        n.div_ceil(self.den as u128) as usize
    }

    pub fn defaults() -> Vec<Self> {
        DEFAULT_RATIOS.iter().map(|&(n, d)| Self { num: n, den: d }).collect()
    }
}

impl fmt::Display for BudgetRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.num == self.den {
            f.write_str("1")
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for BudgetRatio {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EngineError::Config(format!("cannot parse budget ratio {s:?}"));
        let s = s.trim();
        match s.split_once('/') {
            Some((n, d)) => Self::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None if s == "all" => Self::new(1, 1),
            None => {
                let n: u64 = s.parse().map_err(|_| bad())?;
                Self::new(n, 1)
            }
        }
    }
}

impl Serialize for BudgetRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BudgetRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Int(u64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Int(n) => BudgetRatio::new(n, 1),
            Repr::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Where a sweep gets its collection from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CollectionSource {
    Manifest(PathBuf),
    /// Regenerated for every seed, with the cell seed as generator seed.
    Synthetic(SyntheticConfig),
}

impl CollectionSource {
    pub fn load(&self, seed: u64) -> Result<Collection, EngineError> {
        match self {
            CollectionSource::Manifest(path) => Ok(Collection::load(&Manifest::load(path)?)?),
            CollectionSource::Synthetic(cfg) => {
                let cfg = SyntheticConfig { seed, ..cfg.clone() };
                Ok(generate_collection(&cfg)?.to_collection()?)
            }
        }
    }

    pub fn per_seed(&self) -> bool {
        matches!(self, CollectionSource::Synthetic(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub collection: CollectionSource,
    pub methods: Vec<StrategyConfig>,
    #[serde(default = "BudgetRatio::defaults")]
    pub budget_ratios: Vec<BudgetRatio>,
    pub seeds: Vec<u64>,
    /// Defaults to MAP for binary collections and NDCG for graded ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
    #[serde(default = "default_cutoff")]
    pub ndcg_cutoff: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_cutoff() -> usize {
    DEFAULT_NDCG_CUTOFF
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, EngineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EngineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let CollectionSource::Manifest(p) = &mut cfg.collection {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.methods.is_empty() {
            return Err(EngineError::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(EngineError::Config("at least one seed is required".into()));
        }
        if self.budget_ratios.is_empty() {
            return Err(EngineError::Config("at least one budget ratio is required".into()));
        }
        Ok(())
    }

    pub fn metric_for(&self, collection: &Collection) -> Metric {
        self.metric.unwrap_or(if collection.max_grade > 1 { Metric::Ndcg } else { Metric::Map })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_parsing_and_budget() {
        let r: BudgetRatio = "1/64".parse().unwrap();
        assert_eq!(r.budget(3000), 47);
        assert_eq!(r.budget(64), 1);
        assert_eq!(r.budget(0), 0);
        assert_eq!("1".parse::<BudgetRatio>().unwrap().budget(17), 17);
        assert_eq!("all".parse::<BudgetRatio>().unwrap().to_string(), "1");
        assert!("3/2".parse::<BudgetRatio>().is_err());
        assert!("0/5".parse::<BudgetRatio>().is_err());
        assert!("x".parse::<BudgetRatio>().is_err());
        assert_eq!(BudgetRatio::defaults().len(), 10);
    }

    #[test]
    fn config_from_toml() {
        let text = r#"
seeds = [1, 2]
budget_ratios = ["1/64", "1/4", 1]

[collection.synthetic]
topics = 5
docs_per_topic = 20

[[methods]]
kind = "lara"
assessors = 3

[[methods]]
kind = "llm-only"
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.methods.len(), 2);
        assert_eq!(cfg.budget_ratios[2].to_string(), "1");
        assert!(cfg.collection.per_seed());
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::from_toml("seeds = []\nmethods = []\n[collection]\nmanifest = \"m\"\n").is_err());
    }
}
