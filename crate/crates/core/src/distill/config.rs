use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames over which distillation losses are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdRegion {
    All,
    MaskedOnly,
}

impl FromStr for KdRegion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "all" => Ok(KdRegion::All),
            "masked" | "masked_only" => Ok(KdRegion::MaskedOnly),
            other => Err(format!("unknown kd region {other:?} (all|masked)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Feature regression onto the aggregated teacher frames.
    Reg,
    /// KL divergence against distance-based soft labels.
    Kld,
    /// Cross-entropy against nearest-centroid labels.
    Ce,
}

impl LossKind {
    pub fn tag(self) -> &'static str {
        match self {
            LossKind::Reg => "reg",
            LossKind::Kld => "kld",
            LossKind::Ce => "ce",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Non-empty, duplicate-free list of distillation losses, e.g. `reg+kld`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LossSet(Vec<LossKind>);

impl LossSet {
    pub fn new(kinds: Vec<LossKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::InvalidConfig("loss set is empty".into()));
        }
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(Error::InvalidConfig(format!("loss {k} listed twice")));
            }
        }
        if kinds.contains(&LossKind::Kld) && kinds.contains(&LossKind::Ce) {
            return Err(Error::InvalidConfig("kld and ce share one label head; pick one".into()));
        }
        Ok(Self(kinds))
    }

    pub fn kinds(&self) -> &[LossKind] {
        &self.0
    }
}

impl Default for LossSet {
    fn default() -> Self {
        Self(vec![LossKind::Reg, LossKind::Kld])
    }
}

impl FromStr for LossSet {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let kinds = s
            .split('+')
            .map(|p| match p.trim() {
                "reg" => Ok(LossKind::Reg),
                "kld" => Ok(LossKind::Kld),
                "ce" => Ok(LossKind::Ce),
                other => Err(format!("unknown loss {other:?} (reg|kld|ce)")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        LossSet::new(kinds).map_err(|e| e.to_string())
    }
}

impl TryFrom<String> for LossSet {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<LossSet> for String {
    fn from(l: LossSet) -> String {
        l.to_string()
    }
}

impl fmt::Display for LossSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.0.iter().map(|k| k.tag()).collect();
        f.write_str(&parts.join("+"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Temperature on the cosine scores of the label head.
    pub tau: f64,
    /// Soft-label temperature.
    pub tau_prime: f64,
    /// Probability of mixing noise into the student's audio.
    pub p_noise: f64,
    /// SNR range in dB, sampled uniformly when noise is mixed.
    pub snr_range: (f64, f64),
    pub kd_region: KdRegion,
    pub losses: LossSet,
    /// Weight of the auxiliary distillation loss during finetuning.
    pub lambda: f64,
    /// Finetuning steps during which the backbone is frozen.
    pub n_freeze: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Eigenvalues below `eigen_floor * max eigenvalue` are dropped during gradient alignment.
    pub eigen_floor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            tau_prime: 0.1,
            p_noise: 0.25,
            snr_range: (-5.0, 10.0),
            kd_region: KdRegion::All,
            losses: LossSet::default(),
            lambda: 0.1,
            n_freeze: 0,
            steps: 2000,
            learning_rate: 0.05,
            eigen_floor: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.tau > 0.0 && self.tau_prime > 0.0) {
            return bad(format!("temperatures must be > 0 (tau {}, tau' {})", self.tau, self.tau_prime));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} < 0", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.p_noise) {
            return bad(format!("p_noise {} outside [0, 1]", self.p_noise));
        }
        if !(self.snr_range.0 <= self.snr_range.1) {
            return bad(format!("snr_range {:?} is inverted", self.snr_range));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if !(self.eigen_floor >= 0.0) {
            return bad(format!("eigen_floor {} < 0", self.eigen_floor));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_set_parsing() {
        for s in ["reg", "ce", "kld", "reg+ce", "reg+kld"] {
            let l: LossSet = s.parse().unwrap();
            assert_eq!(l.to_string(), s);
        }
        assert!("reg+reg".parse::<LossSet>().is_err());
        assert!("kld+ce".parse::<LossSet>().is_err());
        assert!("mse".parse::<LossSet>().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = TrainConfig {
            kd_region: KdRegion::MaskedOnly,
            losses: "reg+ce".parse().unwrap(),
            ..Default::default()
        };
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"reg+ce\"") && s.contains("\"masked_only\""));
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
    }
}
