//! Train/evaluate runs and placement sweeps.

use serde::{Deserialize, Serialize};
use tdet_core::{Error, Result};

use crate::data::{generate_dataset, DatasetConfig};
use crate::eval::{evaluate_map, EvalConfig, EvalReport};
use crate::model::{Model, Placement};
use crate::train::{prepare, train, LossPoint, PreparedClip, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of the synthetic clips; the model seed lives in `train.seed`.
    pub dataset_seed: u64,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset_seed: 7,
            train_sequences: 50,
            test_sequences: 20,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Prepared train and test clips.
pub struct Splits {
    pub train: Vec<PreparedClip>,
    pub test: Vec<PreparedClip>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        let (d, m) = (&self.dataset, &self.train.model);
        if d.image_size != m.image_size || d.num_classes != m.num_classes {
            return Err(Error::invalid(format!(
                "dataset ({}px, {} classes) and model ({}px, {} classes) disagree",
                d.image_size, d.num_classes, m.image_size, m.num_classes
            )));
        }
        if self.train_sequences == 0 {
            return Err(Error::invalid("train_sequences must be >= 1"));
        }
        Ok(())
    }

    /// Generates both splits from one stream: the first `train_sequences`
    /// clips train, the rest test.
    pub fn splits(&self) -> Result<Splits> {
        self.validate()?;
        let all = generate_dataset(self.dataset_seed, self.train_sequences + self.test_sequences, &self.dataset)?;
        let mut clips = prepare(&all, &self.train.model, self.train.pos_iou)?;
        let test = clips.split_off(self.train_sequences);
        Ok(Splits { train: clips, test })
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub model: Model,
    pub loss_curve: Vec<LossPoint>,
    pub report: EvalReport,
}

pub fn run_on(splits: &Splits, train_cfg: &TrainConfig, eval_cfg: &EvalConfig) -> Result<ExperimentResult> {
    let outcome = train(&splits.train, train_cfg)?;
    let report = evaluate_map(&outcome.model, &splits.test, eval_cfg)?;
    Ok(ExperimentResult {
        model: outcome.model,
        loss_curve: outcome.loss_curve,
        report,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run_on(&cfg.splits()?, &cfg.train, &cfg.eval)
}

/// Which module the sweep moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationTarget {
    Gru,
    Ie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub placement: Placement,
    pub map: f64,
    pub blurred_recall: Option<f64>,
    pub params: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub target: AblationTarget,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("placement,map,blurred_recall,params,final_loss\n");
        for r in &self.rows {
            let recall = r.blurred_recall.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6},{},{},{:.6}\n",
                r.placement, r.map, recall, r.params, r.final_loss
            ));
        }
        out
    }
}

/// One train/evaluate run per placement of `target`, on the same clips and
/// model seed; the other module keeps its configured placement.
pub fn run_ablation(placements: &[Placement], target: AblationTarget, cfg: &ExperimentConfig) -> Result<AblationTable> {
    if placements.len() < 2 || !placements.contains(&Placement::None) {
        return Err(Error::invalid(format!(
            "an ablation needs at least two placements including none, got [{}]",
            placements.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(", ")
        )));
    }
    let splits = cfg.splits()?;
    let mut rows = Vec::with_capacity(placements.len());
    for &p in placements {
        let mut train_cfg = cfg.train.clone();
        match target {
            AblationTarget::Gru => train_cfg.model.gru_placement = p,
            AblationTarget::Ie => train_cfg.model.ie_placement = p,
        }
        let result = run_on(&splits, &train_cfg, &cfg.eval)?;
        rows.push(AblationRow {
            placement: p,
            map: result.report.map,
            blurred_recall: result.report.blurred_recall,
            params: result.model.num_params(),
            final_loss: result.loss_curve.last().map_or(f64::NAN, |l| l.total),
        });
    }
    Ok(AblationTable { target, rows })
}
