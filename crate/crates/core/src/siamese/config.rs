use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Tap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConfigName {
    FIBC,
    UIBC,
    FIFB,
    UIFB,
    FICB,
    UICB,
    FCMB,
    UCMB,
}

impl ConfigName {
    pub const ALL: [ConfigName; 8] = [
        ConfigName::FIBC,
        ConfigName::UIBC,
        ConfigName::FIFB,
        ConfigName::UIFB,
        ConfigName::FICB,
        ConfigName::UICB,
        ConfigName::FCMB,
        ConfigName::UCMB,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConfigName::FIBC => "FIBC",
            ConfigName::UIBC => "UIBC",
            ConfigName::FIFB => "FIFB",
            ConfigName::UIFB => "UIFB",
            ConfigName::FICB => "FICB",
            ConfigName::UICB => "UICB",
            ConfigName::FCMB => "FCMB",
            ConfigName::UCMB => "UCMB",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|c| c.as_str()).join(", ")
    }

    /// Taps used by default for each configuration.
    pub fn default_taps(self) -> Vec<Tap> {
        match self {
            ConfigName::FIBC => vec![Tap::Layer2],
            ConfigName::UIBC => vec![Tap::Layer3],
            ConfigName::FIFB => vec![Tap::Layer1],
            ConfigName::UIFB => vec![Tap::Layer2],
            ConfigName::FICB | ConfigName::UICB => vec![Tap::Layer1],
            ConfigName::FCMB => vec![Tap::Layer1, Tap::Layer2],
            ConfigName::UCMB => vec![Tap::Layer1, Tap::Layer2, Tap::Avgpool],
        }
    }
}

impl fmt::Display for ConfigName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfigName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown siamese configuration `{s}`; valid names are {}", Self::valid_names())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainedMode {
    Frozen,
    Unfrozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Basic,
    Fc,
    Cnn,
    Mfc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Contrastive,
    Bce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiameseConfig {
    pub name: ConfigName,
    pub pretrained_mode: PretrainedMode,
    pub feature_taps: Vec<Tap>,
    pub head: HeadKind,
    pub loss: LossKind,
    /// Contrastive margin; unused by BCE heads.
    pub margin: f64,
}

pub const DEFAULT_MARGIN: f64 = 1.0;

impl SiameseConfig {
    /// Decode a configuration name: pretrained mode, individual/combined
    /// taps, head, loss.
    pub fn from_name(name: ConfigName) -> Self {
        let letters: Vec<char> = name.as_str().chars().collect();
        let pretrained_mode = if letters[0] == 'F' { PretrainedMode::Frozen } else { PretrainedMode::Unfrozen };
        let (head, loss) = match (letters[2], letters[3]) {
            ('B', 'C') => (HeadKind::Basic, LossKind::Contrastive),
            ('F', 'B') => (HeadKind::Fc, LossKind::Bce),
            ('C', 'B') => (HeadKind::Cnn, LossKind::Bce),
            ('M', 'B') => (HeadKind::Mfc, LossKind::Bce),
            _ => unreachable!("configuration names are fixed"),
        };
        Self { name, pretrained_mode, feature_taps: name.default_taps(), head, loss, margin: DEFAULT_MARGIN }
    }

    pub fn with_taps(mut self, taps: Vec<Tap>) -> Result<Self> {
        self.feature_taps = taps;
        self.validate()?;
        Ok(self)
    }

    pub fn with_margin(mut self, margin: f64) -> Result<Self> {
        self.margin = margin;
        self.validate()?;
        Ok(self)
    }

    pub fn is_combined(&self) -> bool {
        self.name.as_str().as_bytes()[1] == b'C'
    }

    pub fn is_frozen(&self) -> bool {
        self.pretrained_mode == PretrainedMode::Frozen
    }

    pub fn validate(&self) -> Result<()> {
        let inc = |m: String| Err(Error::Incompatible(format!("{}: {m}", self.name)));
        let mut taps = self.feature_taps.clone();
        taps.sort();
        taps.dedup();
        if taps.len() != self.feature_taps.len() {
            return inc("feature taps must be distinct".into());
        }
        if taps.is_empty() {
            return inc("at least one feature tap is required".into());
        }
        if self.is_combined() && taps.len() < 2 {
            return inc("combined configurations need at least two taps".into());
        }
        if !self.is_combined() && taps.len() != 1 {
            return inc("individual configurations take exactly one tap".into());
        }
        if (self.head == HeadKind::Basic) != (self.loss == LossKind::Contrastive) {
            return inc("the basic head pairs with the contrastive loss and only with it".into());
        }
        if (self.head == HeadKind::Mfc) != self.is_combined() {
            return inc("the MFC head is used exactly when taps are combined".into());
        }
        if self.head == HeadKind::Cnn && !taps[0].is_spatial() {
            return inc("the CNN head needs a spatial feature map; avgpool has no entry point".into());
        }
        if self.loss == LossKind::Contrastive && !(self.margin > 0.0) {
            return inc(format!("contrastive margin must be positive, got {}", self.margin));
        }
        Ok(())
    }

    /// Comma-separated tap names, as written in fold reports.
    pub fn layer_set(&self) -> String {
        self.feature_taps.iter().map(|t| t.name()).collect::<Vec<_>>().join("+")
    }

    /// Score threshold above which (BCE) or below which (contrastive) a pair
    /// counts as a match.
    pub fn decision_threshold(&self) -> f64 {
        match self.loss {
            LossKind::Bce => 0.5,
            LossKind::Contrastive => self.margin / 2.0,
        }
    }

    pub fn predicts_match(&self, score: f64) -> bool {
        match self.loss {
            LossKind::Bce => score >= 0.5,
            LossKind::Contrastive => score < self.margin / 2.0,
        }
    }
}
