use std::fmt;
use std::str::FromStr;

use crate::cell::Aggregation;
use crate::error::{Error, Result};
use crate::sampling::SamplingMode;

/// One abstraction layer: `Abstraction(npoint, nsample, as_neighbor, mlp)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerConfig {
    pub npoint: usize,
    pub nsample: usize,
    /// Neighborhood size of adaptive sampling; 0 disables it.
    pub as_neighbor: usize,
    /// First entry is the nonlocal bottleneck width, last is the output width.
    pub mlp: Vec<usize>,
}

impl LayerConfig {
    pub fn new(npoint: usize, nsample: usize, as_neighbor: usize, mlp: &[usize]) -> Self {
        Self { npoint, nsample, as_neighbor, mlp: mlp.to_vec() }
    }

    pub fn d_out(&self) -> usize {
        *self.mlp.last().expect("validated non-empty mlp")
    }

    pub fn d_attn(&self) -> usize {
        self.mlp[0]
    }
}

/// `npoint nsample as_neighbor c1,c2,...`
impl FromStr for LayerConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::Config(format!("layer `{s}`: expected `npoint nsample as_neighbor c1,c2,..`"));
        if parts.len() != 4 {
            return Err(bad());
        }
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        Ok(Self {
            npoint: num(parts[0])?,
            nsample: num(parts[1])?,
            as_neighbor: num(parts[2])?,
            mlp: parse_list(parts[3]).map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for LayerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.npoint, self.nsample, self.as_neighbor, join_list(&self.mlp))
    }
}

pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad integer list `{s}`"))))
        .collect()
}

pub fn join_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Which cells a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Pl,
    PlPnl,
    PlPnlAs,
}

impl Variant {
    pub fn use_pnl(self) -> bool {
        self != Variant::Pl
    }

    pub fn use_as(self) -> bool {
        self == Variant::PlPnlAs
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pl" => Ok(Variant::Pl),
            "pl+pnl" => Ok(Variant::PlPnl),
            "pl+pnl+as" => Ok(Variant::PlPnlAs),
            other => Err(Error::Config(format!("unknown variant `{other}` (pl | pl+pnl | pl+pnl+as)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Pl => "pl",
            Variant::PlPnl => "pl+pnl",
            Variant::PlPnlAs => "pl+pnl+as",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Classification,
    Segmentation,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "classification" => Ok(Task::Classification),
            "segmentation" => Ok(Task::Segmentation),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Segmentation => "segmentation",
        })
    }
}

/// Architecture of a classifier or segmenter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    /// Encoder layers; for classification the last entry is the global layer
    /// (`npoint == 1`, its `mlp` the global perceptron stack).
    pub layers: Vec<LayerConfig>,
    pub n_classes: usize,
    pub variant: Variant,
    pub sampling: SamplingMode,
    pub aggregation: Aggregation,
    /// Fully connected widths before the classification layer.
    pub head: Vec<usize>,
    pub dropout: f64,
}

impl ModelConfig {
    /// Small classifier that trains in minutes on one core.
    pub fn desk_classifier(n_classes: usize) -> Self {
        Self {
            task: Task::Classification,
            layers: vec![
                LayerConfig::new(128, 16, 8, &[32, 32, 64]),
                LayerConfig::new(32, 16, 8, &[64, 64, 128]),
                LayerConfig::new(1, 0, 0, &[128, 256, 512]),
            ],
            n_classes,
            variant: Variant::PlPnlAs,
            sampling: SamplingMode::default(),
            aggregation: Aggregation::Sum,
            head: vec![512, 256],
            dropout: 0.4,
        }
    }

    /// Layer settings of the full-scale classification network.
    pub fn full_scale_classifier(n_classes: usize) -> Self {
        Self {
            layers: vec![
                LayerConfig::new(512, 32, 12, &[64, 64, 128]),
                LayerConfig::new(128, 64, 12, &[128, 128, 256]),
                LayerConfig::new(1, 0, 0, &[256, 512, 1024]),
            ],
            ..Self::desk_classifier(n_classes)
        }
    }

    /// Small segmenter with a 256-64-16-8 encoder.
    pub fn desk_segmenter(n_classes: usize) -> Self {
        Self {
            task: Task::Segmentation,
            layers: vec![
                LayerConfig::new(256, 16, 8, &[16, 16, 32]),
                LayerConfig::new(64, 16, 4, &[32, 32, 64]),
                LayerConfig::new(16, 8, 0, &[64, 64, 128]),
                LayerConfig::new(8, 8, 0, &[128, 128, 256]),
            ],
            n_classes,
            variant: Variant::PlPnlAs,
            sampling: SamplingMode::default(),
            aggregation: Aggregation::Sum,
            head: vec![64],
            dropout: 0.4,
        }
    }

    /// Layer settings of the full-scale segmentation encoder (1024-256-64-16).
    pub fn full_scale_segmenter(n_classes: usize) -> Self {
        Self {
            layers: vec![
                LayerConfig::new(1024, 32, 8, &[32, 32, 64]),
                LayerConfig::new(256, 32, 4, &[64, 64, 128]),
                LayerConfig::new(64, 32, 0, &[128, 128, 256]),
                LayerConfig::new(16, 32, 0, &[256, 256, 512]),
            ],
            head: vec![128],
            ..Self::desk_segmenter(n_classes)
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.mlp.is_empty() || l.mlp.contains(&0) {
                return Err(Error::Config(format!("layer {} has an empty or zero-width mlp", i + 1)));
            }
            if l.npoint == 0 {
                return Err(Error::Config(format!("layer {} samples no points", i + 1)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_round_trip() {
        let l: LayerConfig = "512 32 12 64,64,128".parse().unwrap();
        assert_eq!(l, LayerConfig::new(512, 32, 12, &[64, 64, 128]));
        assert_eq!(l.to_string().parse::<LayerConfig>().unwrap(), l);
        assert!("512 32 12".parse::<LayerConfig>().is_err());
        assert!("a 32 12 1,2".parse::<LayerConfig>().is_err());
    }

    #[test]
    fn variants_parse() {
        for v in [Variant::Pl, Variant::PlPnl, Variant::PlPnlAs] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("pnl".parse::<Variant>().is_err());
    }
}
