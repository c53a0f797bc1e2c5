//! Run configuration: every knob of data generation, proposal, network,
//! training and evaluation, plus the method being run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelSpec, NetworkConfig};
use crate::phantom::PhantomConfig;
use crate::pipeline::{TrainConfig, Variant};
use crate::proposal::VesselnessConfig;

/// Segmentation methods; `-p` variants restrict lesions to proposal
/// candidates after inference and share the model of their base method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cam,
    CamP,
    Dcam,
    DcamP,
    Dram,
    DramP,
    Proposed,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Cam,
        Method::CamP,
        Method::Dcam,
        Method::DcamP,
        Method::Dram,
        Method::DramP,
        Method::Proposed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cam => "cam",
            Method::CamP => "cam-p",
            Method::Dcam => "dcam",
            Method::DcamP => "dcam-p",
            Method::Dram => "dram",
            Method::DramP => "dram-p",
            Method::Proposed => "proposed",
        }
    }

    pub fn post(self) -> bool {
        matches!(self, Method::CamP | Method::DcamP | Method::DramP)
    }

    /// The method whose trained model this one uses.
    pub fn base(self) -> Method {
        match self {
            Method::CamP => Method::Cam,
            Method::DcamP => Method::Dcam,
            Method::DramP => Method::Dram,
            m => m,
        }
    }

    pub fn kind(self) -> ModelKind {
        match self.base() {
            Method::Cam => ModelKind::SlimClassifier,
            Method::Dcam => ModelKind::DenseClassifier,
            _ => ModelKind::Regression,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Dataset split and report settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub num_cases: usize,
    /// The first `num_train` cases (by id) train; the rest are the test set.
    pub num_train: usize,
    pub bootstrap_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_cases: 40,
            num_train: 30,
            bootstrap_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    /// Ablation overrides of the method's equivariance, refinement and
    /// attention switches (regression methods only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub er: Option<bool>,
    #[serde(rename = "ref", skip_serializing_if = "Option::is_none")]
    pub refine: Option<bool>,
    #[serde(rename = "at", skip_serializing_if = "Option::is_none")]
    pub attention: Option<bool>,
    pub phantom: PhantomConfig,
    pub proposal: VesselnessConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Desk-scale defaults: 48³ chunks, 16 base features, 40 epochs over
    /// a 30/10 split of 40 phantoms.
    fn default() -> Self {
        Self {
            method: Method::Proposed,
            er: None,
            refine: None,
            attention: None,
            phantom: PhantomConfig::default(),
            proposal: VesselnessConfig::default(),
            network: NetworkConfig {
                chunk_size: [48; 3],
                base_width: 16,
                ..Default::default()
            },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The resolved configuration as TOML; parsing it back yields `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.proposal.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.eval.num_train > self.eval.num_cases {
            return Err(Error::Config("eval: num_train exceeds num_cases".into()));
        }
        if self.method.kind() != ModelKind::Regression
            && [self.er, self.refine, self.attention].contains(&Some(true))
        {
            return Err(Error::Config(format!(
                "er/ref/at apply to regression methods, not {}",
                self.method
            )));
        }
        Ok(())
    }

    /// This configuration with another method and no ablation overrides.
    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            er: None,
            refine: None,
            attention: None,
            ..self.clone()
        }
    }

    pub fn variant(&self) -> Variant {
        let full = self.method == Method::Proposed;
        let regression = self.method.kind() == ModelKind::Regression;
        Variant {
            er: regression && self.er.unwrap_or(full),
            refine: regression && self.refine.unwrap_or(full),
            attention: regression && self.attention.unwrap_or(full),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.method.kind(),
            attention: self.variant().attention,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let t = RunConfig::default().with_method(m).to_toml();
            assert_eq!(RunConfig::from_toml(&t).unwrap().method, m);
        }
        assert!("crf".parse::<Method>().is_err());
    }

    #[test]
    fn default_echo_round_trips() {
        let cfg = RunConfig {
            er: Some(false),
            ..Default::default()
        };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("colour = 3").is_err());
        assert!(RunConfig::from_toml("[train]\nlr = 0.1").is_err());
        assert!(RunConfig::from_toml("[network]\nbase_width = 8").is_ok());
    }

    #[test]
    fn variants_follow_method_and_overrides() {
        let v = |text: &str| RunConfig::from_toml(text).unwrap().variant();
        assert_eq!(
            v("method = \"proposed\""),
            Variant {
                er: true,
                refine: true,
                attention: true
            }
        );
        assert_eq!(v("method = \"dram\""), Variant::default());
        assert_eq!(
            v("method = \"dram\"\nref = true"),
            Variant {
                refine: true,
                ..Default::default()
            }
        );
        assert_eq!(
            v("method = \"proposed\"\nat = false").attention,
            false
        );
        assert!(RunConfig::from_toml("method = \"dcam\"\ner = true").is_err());
        assert_eq!(Method::DcamP.kind(), ModelKind::DenseClassifier);
        assert_eq!(Method::DramP.base(), Method::Dram);
    }

    #[test]
    fn invalid_sections_are_rejected() {
        assert!(RunConfig::from_toml("[eval]\nnum_cases = 4\nnum_train = 5").is_err());
        assert!(RunConfig::from_toml("[network]\nchunk_size = [50, 48, 48]").is_err());
    }
}
