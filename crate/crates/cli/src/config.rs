//! The serializable run configuration. The exact configuration a run used is
//! always archived next to its results, and re-running an archived
//! configuration reproduces the run.

use std::path::PathBuf;

use bonsai_core::sched::SearchSettings;
use bonsai_core::NetConfig;
use serde::{Deserialize, Serialize};

use crate::{usage, CliResult};

/// Which dataset a run trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Seeded synthetic texture classification at an arbitrary size.
    Synthetic {
        classes: usize,
        per_class: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
    /// CIFAR-10 binary batches; `dir` defaults to
    /// `$BONSAI_DATA_DIR/cifar-10-batches-bin`.
    Cifar10 { dir: Option<PathBuf> },
}

impl DatasetConfig {
    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            DatasetConfig::Synthetic {
                channels,
                height,
                width,
                ..
            } => [*channels, *height, *width],
            DatasetConfig::Cifar10 { .. } => [3, 32, 32],
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { classes, .. } => *classes,
            DatasetConfig::Cifar10 { .. } => 10,
        }
    }
}

/// Training-time augmentation plus the per-channel normalization applied to
/// the whole dataset at load time. Empty `mean`/`std` disable normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub random_crop_pad: usize,
    pub horizontal_flip: bool,
    pub cutout_size: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            random_crop_pad: 1,
            horizontal_flip: true,
            cutout_size: 4,
            mean: vec![0.5; 3],
            std: vec![0.5; 3],
        }
    }
}

/// Random-baseline settings carried inside an archived configuration so that
/// re-running the file alone reproduces the baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// 1: random architecture grown and pruned on the reference schedule.
    /// 2: random architecture at the reference's final profile, never pruned.
    pub level: u8,
    /// Run directory of the completed search run to take the profile from.
    pub reference: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub cells: usize,
    pub nodes_per_cell: usize,
    pub channels0: usize,
    pub batch_size: usize,
    pub epoch_budget: u32,
    pub sections: usize,
    pub budget_bytes: u64,
    /// Fraction of the classification loss the compression term starts at.
    pub lambda0: f64,
    /// Pruner saw resolution.
    pub m: f64,
    pub gate_init: f64,
    pub drop_path: f64,
    pub aux_weight: f64,
    pub lr_max: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of the pool held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub augment: AugmentConfig,
    pub out_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// Desk-scale preset: minutes per run on a CPU, small synthetic data.
    pub fn desk() -> RunConfig {
        RunConfig {
            cells: 4,
            nodes_per_cell: 2,
            channels0: 16,
            batch_size: 64,
            epoch_budget: 60,
            sections: 2,
            budget_bytes: 56 * 1024 * 1024,
            lambda0: 0.01,
            m: 1e5,
            gate_init: 0.1,
            drop_path: 0.1,
            aux_weight: 0.4,
            lr_max: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
            val_fraction: 0.1,
            seed: 1,
            dataset: DatasetConfig::Synthetic {
                classes: 3,
                per_class: 150,
                channels: 3,
                height: 16,
                width: 16,
            },
            // half the full-scale cutout on half the image side; the
            // generator centers values near 0.5 with spread about 0.25
            augment: AugmentConfig {
                random_crop_pad: 2,
                horizontal_flip: true,
                cutout_size: 8,
                mean: vec![0.5, 0.5, 0.5],
                std: vec![0.25, 0.25, 0.25],
            },
            out_dir: PathBuf::from("bonsai-run"),
            baseline: None,
        }
    }

    /// Full-scale preset: 8 cells on CIFAR-10. Days of compute on a CPU;
    /// provided as the canonical record of the large configuration, not as
    /// something the test suite runs.
    pub fn paper_scale() -> RunConfig {
        RunConfig {
            cells: 8,
            nodes_per_cell: 4,
            channels0: 36,
            batch_size: 64,
            epoch_budget: 600,
            sections: 4,
            budget_bytes: 8 * 1024 * 1024 * 1024,
            lambda0: 0.01,
            m: 1e5,
            gate_init: 0.1,
            drop_path: 0.3,
            aux_weight: 0.4,
            lr_max: 0.01,
            momentum: 0.9,
            weight_decay: 3e-4,
            val_fraction: 0.1,
            seed: 1,
            dataset: DatasetConfig::Cifar10 { dir: None },
            augment: AugmentConfig {
                random_crop_pad: 4,
                horizontal_flip: true,
                cutout_size: 16,
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            },
            out_dir: PathBuf::from("bonsai-run"),
            baseline: None,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            cell_count: self.cells,
            nodes_per_cell: self.nodes_per_cell,
            channels0: self.channels0,
            input_shape: self.dataset.input_shape(),
            class_count: self.dataset.class_count(),
        }
    }

    pub fn settings(&self) -> SearchSettings {
        SearchSettings {
            config: self.net_config(),
            sections: self.sections,
            budget_bytes: self.budget_bytes,
            epoch_budget: self.epoch_budget,
            gate_m: self.m,
            gate_init: self.gate_init,
            lambda0: self.lambda0,
            lr_max: self.lr_max,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            drop_path: self.drop_path,
            aux_weight: self.aux_weight,
            batch: self.batch_size,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let err = |m: String| Err(usage(m));
        if self.cells == 0 || self.nodes_per_cell == 0 || self.channels0 == 0 {
            return err("cells, nodes_per_cell, and channels0 must be positive".into());
        }
        if self.batch_size == 0 || self.epoch_budget == 0 {
            return err("batch_size and epoch_budget must be positive".into());
        }
        if self.sections == 0 || self.sections > self.cells {
            return err(format!(
                "sections must be in 1..={} (got {})",
                self.cells, self.sections
            ));
        }
        if !(self.m > 0.0) {
            return err(format!("m must be positive (got {})", self.m));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return err(format!("drop_path must be in [0,1) (got {})", self.drop_path));
        }
        if !(self.lr_max > 0.0) {
            return err(format!("lr_max must be positive (got {})", self.lr_max));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return err(format!(
                "val_fraction must be in (0,1) (got {})",
                self.val_fraction
            ));
        }
        if self.lambda0 < 0.0 {
            return err(format!("lambda0 must be >= 0 (got {})", self.lambda0));
        }
        let [c, h, w] = self.dataset.input_shape();
        if self.dataset.class_count() < 2 {
            return err("dataset must have at least 2 classes".into());
        }
        if h < 8 || w < 8 || c == 0 {
            return err(format!("input shape {c}x{h}x{w} is too small (minimum 8x8)"));
        }
        if let DatasetConfig::Synthetic { per_class, .. } = self.dataset {
            if per_class == 0 {
                return err("per_class must be positive".into());
            }
        }
        let a = &self.augment;
        if a.cutout_size > h.min(w) {
            return err(format!(
                "cutout_size {} exceeds image side {}",
                a.cutout_size,
                h.min(w)
            ));
        }
        if a.mean.len() != a.std.len() {
            return err("augment.mean and augment.std must have the same length".into());
        }
        if !a.mean.is_empty() && a.mean.len() != c {
            return err(format!(
                "normalization has {} channels, images have {c}",
                a.mean.len()
            ));
        }
        if a.std.iter().any(|&s| s == 0.0) {
            return err("augment.std entries must be nonzero".into());
        }
        if let Some(b) = &self.baseline {
            if b.level != 1 && b.level != 2 {
                return err(format!("baseline level must be 1 or 2 (got {})", b.level));
            }
        }
        Ok(())
    }

    /// Equality on everything a paired baseline must share with its search
    /// run: seed, output directory, and the baseline block itself are
    /// expected to differ.
    pub fn shares_hyperparameters(&self, other: &RunConfig) -> bool {
        let strip = |c: &RunConfig| {
            let mut c = c.clone();
            c.seed = 0;
            c.out_dir = PathBuf::new();
            c.baseline = None;
            c
        };
        strip(self) == strip(other)
    }
}

pub fn load_config(path: &std::path::Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| usage(format!("bad config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
