//! Classification metrics and the cross-validation harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, FoldSplit, SubjectRecord};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{forward, positive_probability, ModelConfig, ModelParams, Mode};
use crate::train::{fit, StepLog, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub acc: f64,
    pub auc: f64,
    pub sen: f64,
    pub spe: f64,
}

impl MetricSet {
    fn values(&self) -> [f64; 4] {
        [self.acc, self.auc, self.sen, self.spe]
    }

    fn from_values(v: [f64; 4]) -> Self {
        Self {
            acc: v[0],
            auc: v[1],
            sen: v[2],
            spe: v[3],
        }
    }
}

/// Mann–Whitney AUC via mid-ranks: the fraction of positive/negative pairs
/// ordered correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

fn check_inputs(scores: &[f64], labels: &[usize]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidTarget(format!("label {l} is not binary")));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFiniteInput(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::SingleClassPresent);
    }
    Ok(())
}

/// ACC/SEN/SPE at threshold 0.5 (score ≥ 0.5 predicts positive) plus AUC.
pub fn compute_metrics(scores: &[f64], labels: &[usize]) -> Result<MetricSet> {
    check_inputs(scores, labels)?;
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= 0.5, l == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(MetricSet {
        acc: (tp + tn) as f64 / labels.len() as f64,
        auc: auc(scores, labels)?,
        sen: tp as f64 / (tp + fn_) as f64,
        spe: tn as f64 / (tn + fp) as f64,
    })
}

/// Eval-mode positive-class probability for every subject, in input order.
pub fn predict_scores(
    params: &ModelParams,
    cfg: &ModelConfig,
    subjects: &[&SubjectRecord],
) -> Result<Vec<f64>> {
    subjects
        .par_iter()
        .map(|s| {
            forward(s.matrix.values().view(), params, cfg, Mode::Eval)
                .map(|o| positive_probability(&o.z_g))
        })
        .collect()
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub id: String,
    pub fold: usize,
    pub label: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: MetricSet,
    pub train: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean: MetricSet,
    pub std: MetricSet,
    /// Always "population": the divisor is the fold count.
    pub std_kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub predictions: Vec<SubjectPrediction>,
}

impl CvReport {
    pub fn aggregate(
        folds: Vec<FoldResult>,
        predictions: Vec<SubjectPrediction>,
        seed: u64,
        config: serde_json::Value,
    ) -> Self {
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for i in 0..4 {
            let col: Vec<f64> = folds.iter().map(|f| f.metrics.values()[i]).collect();
            (mean[i], std[i]) = mean_std(&col);
        }
        Self {
            folds,
            mean: MetricSet::from_values(mean),
            std: MetricSet::from_values(std),
            std_kind: "population".into(),
            seed,
            config,
            predictions,
        }
    }

    /// Percent table, one `mm.mm±ss.ss` cell per metric.
    pub fn table(&self) -> String {
        let cell = |m: f64, s: f64| format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s);
        format!(
            "ACC(%)\tAUC(%)\tSEN(%)\tSPE(%)\n{}\t{}\t{}\t{}\n",
            cell(self.mean.acc, self.std.acc),
            cell(self.mean.auc, self.std.auc),
            cell(self.mean.sen, self.std.sen),
            cell(self.mean.spe, self.std.spe),
        )
    }

    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("id,fold,label,score\n");
        for p in &self.predictions {
            out.push_str(&format!("{},{},{},{:e}\n", p.id, p.fold, p.label, p.score));
        }
        out
    }
}

/// A finished cross-validation run: the report plus each fold's kept model.
pub struct CvRun {
    pub report: CvReport,
    pub fold_params: Vec<ModelParams>,
    pub fold_logs: Vec<Vec<StepLog>>,
}

/// Trains one fresh model per fold (`init(fold)`), early-stops on the fold's
/// validation subjects and scores its test subjects. Folds run in parallel;
/// results are assembled in fold order.
pub fn run_cv<F>(
    ds: &DatasetManifest,
    folds: &[FoldSplit],
    init: F,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    weights: &LossWeights,
    config_snapshot: serde_json::Value,
) -> Result<CvRun>
where
    F: Fn(usize) -> ModelParams + Sync,
{
    let outcomes: Vec<Result<_>> = folds
        .par_iter()
        .map(|f| {
            let wrap = |e: Error| Error::Fold {
                fold: f.fold_index,
                source: Box::new(e),
            };
            let train = ds.select(&f.train_ids);
            let val = ds.select(&f.val_ids);
            let test = ds.select(&f.test_ids);
            let mut cfg = train_cfg.clone();
            cfg.seed = crate::seed::derive_seed(train_cfg.seed, &[f.fold_index as u64]);
            let outcome = fit(&train, &val, init(f.fold_index), model_cfg, &cfg, weights)
                .map_err(wrap)?;
            let scores = predict_scores(&outcome.params, model_cfg, &test).map_err(wrap)?;
            let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
            let metrics = compute_metrics(&scores, &labels).map_err(wrap)?;
            let preds: Vec<SubjectPrediction> = test
                .iter()
                .zip(&scores)
                .map(|(s, &score)| SubjectPrediction {
                    id: s.id.clone(),
                    fold: f.fold_index,
                    label: s.label,
                    score,
                })
                .collect();
            log::info!(
                "fold {}: acc {:.3} auc {:.3} (best epoch {})",
                f.fold_index,
                metrics.acc,
                metrics.auc,
                outcome.report.best_epoch
            );
            Ok((
                FoldResult {
                    fold: f.fold_index,
                    metrics,
                    train: outcome.report,
                },
                preds,
                outcome.params,
                outcome.log,
            ))
        })
        .collect();

    let mut results = Vec::new();
    let mut predictions = Vec::new();
    let mut fold_params = Vec::new();
    let mut fold_logs = Vec::new();
    for o in outcomes {
        let (r, p, params, log) = o?;
        results.push(r);
        predictions.extend(p);
        fold_params.push(params);
        fold_logs.push(log);
    }
    Ok(CvRun {
        report: CvReport::aggregate(results, predictions, train_cfg.seed, config_snapshot),
        fold_params,
        fold_logs,
    })
}
