use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One bag: an `M × d_h` instance-feature matrix with a bag label.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    pub features: Tensor<f32>,
    pub label: usize,
    /// Per-instance binary labels, when known.
    pub latent_labels: Option<Vec<u8>>,
}

impl Bag {
    pub fn new(bag_id: impl Into<String>, features: Tensor<f32>, label: usize) -> Result<Self> {
        let bag = Bag {
            bag_id: bag_id.into(),
            features,
            label,
            latent_labels: None,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn with_latent(mut self, latent: Vec<u8>) -> Result<Self> {
        self.latent_labels = Some(latent);
        self.validate()?;
        Ok(self)
    }

    pub fn num_instances(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Bag label implied by the latent labels: `1 - Π(1 - y_m)`.
    pub fn label_from_latent(latent: &[u8]) -> usize {
        1 - latent.iter().map(|&y| 1 - y as usize).product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        self.features.dims2()?;
        if !self.features.all_finite() {
            return Err(Error::Validation(format!(
                "bag {} has non-finite features",
                self.bag_id
            )));
        }
        if let Some(lat) = &self.latent_labels {
            if lat.len() != self.num_instances() {
                return Err(Error::Validation(format!(
                    "bag {}: {} latent labels for {} instances",
                    self.bag_id,
                    lat.len(),
                    self.num_instances()
                )));
            }
            if lat.iter().any(|&y| y > 1) {
                return Err(Error::Validation(format!(
                    "bag {}: latent labels must be 0 or 1",
                    self.bag_id
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the given instance rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Bag> {
        Ok(Bag {
            bag_id: self.bag_id.clone(),
            features: self.features.select_rows(idx)?,
            label: self.label,
            latent_labels: self
                .latent_labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

/// A labelled collection of bags with split tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub splits: Vec<Split>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn new(bags: Vec<Bag>, splits: Vec<Split>, num_classes: usize) -> Result<Self> {
        if bags.len() != splits.len() {
            return Err(Error::Validation(format!(
                "{} bags but {} split tags",
                bags.len(),
                splits.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Validation(format!(
                "need at least two classes, got {num_classes}"
            )));
        }
        let feature_dim = bags.first().map_or(0, Bag::feature_dim);
        let mut ids = HashSet::new();
        for bag in &bags {
            bag.validate()?;
            if bag.feature_dim() != feature_dim {
                return Err(Error::Format(format!(
                    "bag {} has feature dim {} but the dataset uses {feature_dim}",
                    bag.bag_id,
                    bag.feature_dim()
                )));
            }
            if bag.label >= num_classes {
                return Err(Error::Validation(format!(
                    "bag {} has label {} outside 0..{num_classes}",
                    bag.bag_id, bag.label
                )));
            }
            if !ids.insert(bag.bag_id.as_str()) {
                return Err(Error::Validation(format!("duplicate bag_id {}", bag.bag_id)));
            }
        }
        Ok(Dataset {
            bags,
            splits,
            num_classes,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Every bag not tagged `test`; k-fold cross-validation partitions this.
    pub fn train_pool(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] != Split::Test)
            .collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.bags[i].label).collect()
    }
}
