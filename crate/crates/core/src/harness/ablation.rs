use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::attention::{attention_mass_in_boxes, LayerSelector};
use super::config::{ExperimentConfig, Toggles};
use super::metrics::MetricsLog;
use super::train::{compute_teacher_targets, distill_student, TeacherTargets, TrainedModel};
use crate::data::Sample;
use crate::detector::Detector;
use crate::error::Result;
use crate::eval::EvalReport;

/// Identifies one student run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RunKey {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub toggles: (bool, bool, bool),
    pub seed: u64,
}

impl RunKey {
    pub fn new(encoder_layers: usize, decoder_layers: usize, toggles: Toggles, seed: u64) -> Self {
        RunKey {
            encoder_layers,
            decoder_layers,
            toggles: (toggles.memory_distill, toggles.location_mask, toggles.target_queries),
            seed,
        }
    }
}

/// Shares a trained teacher, its cached outputs and finished student runs
/// between the ablation reports.
pub struct ExperimentRunner {
    pub config: ExperimentConfig,
    pub teacher: Detector,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub log: MetricsLog,
    /// Directory for last-good checkpoints of diverged runs.
    pub failure_dir: Option<PathBuf>,
    targets: Option<Vec<TeacherTargets>>,
    runs: BTreeMap<RunKey, TrainedModel>,
}

impl ExperimentRunner {
    pub fn new(
        config: ExperimentConfig,
        teacher: Detector,
        train: Vec<Sample>,
        val: Vec<Sample>,
        log: MetricsLog,
    ) -> Result<Self> {
        config.validate()?;
        Ok(ExperimentRunner {
            config,
            teacher,
            train,
            val,
            log,
            failure_dir: None,
            targets: None,
            runs: BTreeMap::new(),
        })
    }

    fn ensure_targets(&mut self) -> Result<()> {
        if self.targets.is_none() {
            let t = compute_teacher_targets(
                &self.teacher,
                &self.train,
                &self.config.distill,
                true,
                self.config.eval.batch_size,
            )?;
            self.targets = Some(t);
        }
        Ok(())
    }

    /// Trains (or returns the finished) student run.
    pub fn run(
        &mut self,
        encoder_layers: usize,
        decoder_layers: usize,
        toggles: Toggles,
        seed: u64,
    ) -> Result<&TrainedModel> {
        let key = RunKey::new(encoder_layers, decoder_layers, toggles, seed);
        if !self.runs.contains_key(&key) {
            let mut cfg = self.config.clone();
            cfg.student.encoder_layers = encoder_layers;
            cfg.student.decoder_layers = decoder_layers;
            cfg.toggles = toggles;
            cfg.allow_custom_toggles = true;
            cfg.seed = seed;
            let name = format!(
                "student[{encoder_layers}+{decoder_layers}|{}|seed {seed}]",
                toggles.label()
            );
            if toggles.any() {
                self.ensure_targets()?;
            }
            let targets = match &self.targets {
                Some(t) if toggles.any() => t.as_slice(),
                _ => &[],
            };
            let trained = distill_student(
                &cfg,
                &self.teacher.config,
                targets,
                &self.train,
                &self.val,
                &mut self.log,
                &name,
                self.failure_dir.as_deref(),
            )?;
            log::info!("{name}: AP {:.4}", trained.report.ap);
            self.runs.insert(key, trained);
        }
        Ok(&self.runs[&key])
    }

    fn reference_depths(&self) -> (usize, usize) {
        (self.config.student.encoder_layers, self.config.student.decoder_layers)
    }

    /// Baseline, Mem, Mem+LM and Mem+LM+TQ over the ablation seeds.
    pub fn ablate_components(&mut self) -> Result<ComponentReport> {
        let (e, d) = self.reference_depths();
        let seeds = self.config.ablation_seeds.clone();
        let mut rows = Vec::new();
        for toggles in Toggles::CHAIN {
            let mut reports = Vec::new();
            for &s in &seeds {
                reports.push(self.run(e, d, toggles, s)?.report.clone());
            }
            rows.push(ComponentRow::new(toggles, &seeds, reports));
        }
        Ok(ComponentReport { rows })
    }

    /// Baseline and full recipe for every `(encoder, decoder)` cell.
    pub fn ablate_layers(&mut self) -> Result<LayerReport> {
        let seeds = self.config.ablation_seeds.clone();
        let mut cells = Vec::new();
        for (e, d) in self.config.layer_grid.clone() {
            let mut base = Vec::new();
            let mut dist = Vec::new();
            for &s in &seeds {
                base.push(self.run(e, d, Toggles::BASELINE, s)?.report.ap);
                dist.push(self.run(e, d, Toggles::FULL, s)?.report.ap);
            }
            cells.push(LayerCell {
                encoder_layers: e,
                decoder_layers: d,
                baseline_mean_ap: mean(&base),
                distilled_mean_ap: mean(&dist),
                baseline_ap: base,
                distilled_ap: dist,
            });
        }
        Ok(LayerReport { seeds, cells })
    }

    /// Attention mass inside GT boxes on the first `attention_images`
    /// validation images, baseline against full recipe, averaged over seeds.
    pub fn attention_comparison(&mut self) -> Result<AttentionComparison> {
        let (e, d) = self.reference_depths();
        let n = self.config.attention_images.min(self.val.len());
        let scenes = self.val[..n].to_vec();
        let rule = self.config.distill.membership;
        let seeds = self.config.ablation_seeds.clone();
        let (mut base, mut dist) = (Vec::new(), Vec::new());
        for &s in &seeds {
            let m = &self.run(e, d, Toggles::BASELINE, s)?.detector;
            base.push(attention_mass_in_boxes(m, &scenes, LayerSelector::All, rule)?);
            let m = &self.run(e, d, Toggles::FULL, s)?.detector;
            dist.push(attention_mass_in_boxes(m, &scenes, LayerSelector::All, rule)?);
        }
        Ok(AttentionComparison {
            num_images: n,
            baseline_mean: mean(&base),
            distilled_mean: mean(&dist),
            baseline: base,
            distilled: dist,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    pub label: String,
    pub toggles: Toggles,
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
    pub mean_ap: f64,
    pub mean_ap50: f64,
    pub mean_ap75: f64,
}

impl ComponentRow {
    fn new(toggles: Toggles, seeds: &[u64], reports: Vec<EvalReport>) -> Self {
        let pick = |f: fn(&EvalReport) -> f64| mean(&reports.iter().map(f).collect::<Vec<_>>());
        ComponentRow {
            label: toggles.label(),
            toggles,
            seeds: seeds.to_vec(),
            mean_ap: pick(|r| r.ap),
            mean_ap50: pick(|r| r.ap50),
            mean_ap75: pick(|r| r.ap75),
            reports,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub rows: Vec<ComponentRow>,
}

impl ComponentReport {
    pub fn row(&self, toggles: Toggles) -> Option<&ComponentRow> {
        self.rows.iter().find(|r| r.toggles == toggles)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:>8} {:>8} {:>8}  per-seed AP\n", "recipe", "AP", "AP50", "AP75");
        for r in &self.rows {
            let per: Vec<String> = r.reports.iter().map(|x| format!("{:.4}", x.ap)).collect();
            let _ = writeln!(
                s,
                "{:<12} {:>8.4} {:>8.4} {:>8.4}  {}",
                r.label,
                r.mean_ap,
                r.mean_ap50,
                r.mean_ap75,
                per.join(" ")
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCell {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub baseline_ap: Vec<f64>,
    pub distilled_ap: Vec<f64>,
    pub baseline_mean_ap: f64,
    pub distilled_mean_ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub seeds: Vec<u64>,
    /// In grid order.
    pub cells: Vec<LayerCell>,
}

impl LayerReport {
    /// Number of student runs behind the report.
    pub fn num_runs(&self) -> usize {
        self.cells.len() * 2 * self.seeds.len()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8} {:>10} {:>10} {:>8}\n", "enc+dec", "baseline", "distilled", "gain");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<8} {:>10.4} {:>10.4} {:>+8.4}",
                format!("{}+{}", c.encoder_layers, c.decoder_layers),
                c.baseline_mean_ap,
                c.distilled_mean_ap,
                c.distilled_mean_ap - c.baseline_mean_ap
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionComparison {
    pub num_images: usize,
    pub baseline: Vec<f64>,
    pub distilled: Vec<f64>,
    pub baseline_mean: f64,
    pub distilled_mean: f64,
}
