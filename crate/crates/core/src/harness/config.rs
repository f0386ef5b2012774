use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_samples, load_dataset, DatasetSpec, Sample};
use crate::detector::DetectorConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;

/// Which distillation components are active for the student.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub memory_distill: bool,
    pub location_mask: bool,
    pub target_queries: bool,
}

impl Toggles {
    pub const BASELINE: Toggles = Toggles {
        memory_distill: false,
        location_mask: false,
        target_queries: false,
    };
    pub const MEM: Toggles = Toggles {
        memory_distill: true,
        location_mask: false,
        target_queries: false,
    };
    pub const MEM_LM: Toggles = Toggles {
        memory_distill: true,
        location_mask: true,
        target_queries: false,
    };
    pub const FULL: Toggles = Toggles {
        memory_distill: true,
        location_mask: true,
        target_queries: true,
    };

    /// Rows of the component ablation, in order.
    pub const CHAIN: [Toggles; 4] = [Toggles::BASELINE, Toggles::MEM, Toggles::MEM_LM, Toggles::FULL];

    pub fn any(&self) -> bool {
        self.memory_distill || self.target_queries
    }

    /// True for the monotone chain baseline, Mem, Mem+LM, Mem+LM+TQ.
    pub fn is_chain(&self) -> bool {
        Toggles::CHAIN.contains(self)
    }

    pub fn label(&self) -> String {
        if !self.memory_distill && !self.location_mask && !self.target_queries {
            return "baseline".into();
        }
        let mut parts = Vec::new();
        if self.memory_distill {
            parts.push("Mem");
        }
        if self.location_mask {
            parts.push("LM");
        }
        if self.target_queries {
            parts.push("TQ");
        }
        parts.join("+")
    }
}

/// A dataset split, either generated in memory or read from a directory
/// written by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub spec: DatasetSpec,
    pub dir: Option<PathBuf>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            spec: DatasetSpec::default(),
            dir: None,
        }
    }
}

impl SplitConfig {
    pub fn load(&self) -> Result<Vec<Sample>> {
        match &self.dir {
            Some(dir) => load_dataset(dir),
            None => generate_samples(&self.spec),
        }
    }

    pub fn with_dir(mut self, dir: &Path) -> Self {
        self.dir = Some(dir.to_path_buf());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 8,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.batch_size.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub top_k: usize,
    pub score_threshold: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_k: crate::eval::MAX_DETECTIONS,
            score_threshold: 0.0,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub teacher: DetectorConfig,
    pub student: DetectorConfig,
    pub distill: DistillConfig,
    pub train_data: SplitConfig,
    pub val_data: SplitConfig,
    pub teacher_training: TrainConfig,
    pub student_training: TrainConfig,
    pub eval: EvalConfig,
    pub toggles: Toggles,
    /// Accept toggle sets outside the baseline/Mem/Mem+LM/Mem+LM+TQ chain.
    pub allow_custom_toggles: bool,
    pub seed: u64,
    /// Student seeds of the ablation runs.
    pub ablation_seeds: Vec<u64>,
    /// Student `(encoder, decoder)` depths of the layer ablation.
    pub layer_grid: Vec<(usize, usize)>,
    /// Images (from the start of the validation split) used for the
    /// attention-mass metric.
    pub attention_images: usize,
    pub deterministic: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::reference()
    }
}

impl ExperimentConfig {
    /// Desk-scale reference experiment.
    pub fn reference() -> Self {
        let train = DatasetSpec {
            num_images: 512,
            seed: 1,
            ..DatasetSpec::default()
        };
        let val = DatasetSpec {
            num_images: 128,
            seed: 2,
            ..DatasetSpec::default()
        };
        // at this scale the detector barely moves in the budget at 1e-4
        let optimizer = OptimizerConfig {
            learning_rate: 1e-3,
            ..OptimizerConfig::default()
        };
        // Calibrated so that each distillation term stays within an order of
        // magnitude of the detection loss at this scale.
        let distill = DistillConfig {
            alpha: 0.2,
            beta: 4e-4,
            lambda_cls: 0.05,
            lambda_l1: 0.25,
            lambda_giou: 0.1,
            num_distill_points: 24,
            ..DistillConfig::default()
        };
        ExperimentConfig {
            teacher: DetectorConfig::reference_teacher(),
            student: DetectorConfig::reference_student(),
            distill,
            train_data: SplitConfig {
                spec: train,
                dir: None,
            },
            val_data: SplitConfig {
                spec: val,
                dir: None,
            },
            teacher_training: TrainConfig {
                epochs: 40,
                optimizer: optimizer.clone(),
                ..TrainConfig::default()
            },
            student_training: TrainConfig {
                epochs: 24,
                optimizer,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            toggles: Toggles::FULL,
            allow_custom_toggles: false,
            seed: 0,
            ablation_seeds: vec![0, 1, 2],
            layer_grid: vec![(2, 2), (1, 2), (2, 1), (1, 1)],
            attention_images: 20,
            deterministic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.distill.validate()?;
        self.train_data.spec.validate()?;
        self.val_data.spec.validate()?;
        for (name, t) in [("teacher", &self.teacher_training), ("student", &self.student_training)] {
            if t.batch_size == 0 {
                return Err(Error::Config(format!("{name} batch size must be positive")));
            }
            if !(t.optimizer.learning_rate >= 0.0 && t.optimizer.learning_rate.is_finite()) {
                return Err(Error::Config(format!("{name} learning rate is invalid")));
            }
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval batch size must be positive".into()));
        }
        if self.teacher.num_classes != self.student.num_classes {
            return Err(Error::Config("teacher and student class counts differ".into()));
        }
        if self.student.level_shapes() != self.teacher.level_shapes() {
            return Err(Error::Config(
                "teacher and student feature levels differ and no adapter can map them".into(),
            ));
        }
        if !self.allow_custom_toggles && !self.toggles.is_chain() {
            return Err(Error::Config(format!(
                "toggles {} break the Mem, LM, TQ chain; set allow_custom_toggles for custom runs",
                self.toggles.label()
            )));
        }
        if self.layer_grid.iter().any(|&(e, d)| e == 0 || d == 0) {
            return Err(Error::Config("layer grid cells need at least one layer each".into()));
        }
        Ok(())
    }

    /// Parses JSON text; missing fields take the reference values.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_json(&text)
    }

    /// Seed for a named random stream of this experiment.
    pub fn stream_seed(&self, stream: Stream) -> u64 {
        derive_seed(self.seed, stream as u64)
    }
}

/// Independent random streams derived from one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    TeacherInit = 1,
    StudentInit = 2,
    Shuffle = 3,
    Adapter = 4,
    Queries = 5,
}

/// SplitMix64 finalizer over `seed` and a stream tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
