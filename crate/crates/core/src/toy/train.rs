//! Training loop, evaluation metrics, and their CSV form.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rpkg::RelationalPriorKnowledgeGraph;
use crate::tensor::optim::{Adam, AdamConfig};
use crate::tensor::rng::SeedStream;
use crate::tensor::Tensor;
use crate::toy::model::{argmax_rows, ModelConfig, ToyModel};
use crate::toy::task::{generate_scene, generate_scenes, ToyScene, ToyTaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Scenes per step.
    pub batch: usize,
    pub seed: u64,
    /// Evaluate every this many steps (and after the last one).
    pub eval_every: usize,
    pub eval_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            lr: 3e-3,
            batch: 16,
            seed: 0,
            eval_every: 50,
            eval_scenes: 167,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.eval_every == 0 || self.eval_scenes == 0 {
            return Err(Error::Config(
                "steps, batch, eval interval and eval scenes must be at least 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} is invalid",
                self.lr
            )));
        }
        Ok(())
    }

    fn stream(&self) -> SeedStream {
        SeedStream::new(self.seed)
    }

    /// Scenes scored at each evaluation; shared by every model trained with
    /// the same seed so paired comparisons see the same data.
    pub fn eval_set(&self, spec: &ToyTaskSpec) -> Vec<ToyScene> {
        generate_scenes(spec, self.stream().split("eval-scenes"), self.eval_scenes)
    }

    /// Scenes of training step `step` (1-based).
    pub fn train_batch(
        &self,
        spec: &ToyTaskSpec,
        protos: &Tensor<f64>,
        step: usize,
    ) -> Vec<ToyScene> {
        let stream = self.stream().split("train-scenes").nth(step as u64);
        (0..self.batch as u64)
            .map(|b| generate_scene(spec, protos, stream.nth(b)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub proposals: usize,
    pub overall_acc: f64,
    /// Absent when no proposal is ambiguous.
    pub ambiguous_acc: Option<f64>,
    /// Recall of the duplicate label; absent without duplicates.
    pub duplicate_detection_rate: Option<f64>,
    /// Accuracy per label (the last entry is the duplicate label).
    pub per_class_acc: Vec<Option<f64>>,
}

fn ratio(hit: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hit as f64 / total as f64)
}

/// Scores predictions against scene labels.
pub fn score(scenes: &[ToyScene], predictions: &[Vec<usize>], outputs: usize) -> Result<Metrics> {
    if scenes.is_empty() {
        return Err(Error::Contract(
            "evaluation needs at least one scene".into(),
        ));
    }
    let dup = outputs - 1;
    let (mut hit, mut total) = (0, 0);
    let (mut amb_hit, mut amb) = (0, 0);
    let mut per = vec![(0usize, 0usize); outputs];
    for (s, pred) in scenes.iter().zip(predictions) {
        for ((&l, &a), &y) in s.labels.iter().zip(&s.ambiguous).zip(pred) {
            let ok = usize::from(l == y);
            total += 1;
            hit += ok;
            per[l].0 += ok;
            per[l].1 += 1;
            if a {
                amb += 1;
                amb_hit += ok;
            }
        }
    }
    Ok(Metrics {
        proposals: total,
        overall_acc: hit as f64 / total as f64,
        ambiguous_acc: ratio(amb_hit, amb),
        duplicate_detection_rate: ratio(per[dup].0, per[dup].1),
        per_class_acc: per.iter().map(|&(h, t)| ratio(h, t)).collect(),
    })
}

pub fn evaluate(
    model: &ToyModel,
    rpkg: Option<&RelationalPriorKnowledgeGraph<f64>>,
    scenes: &[ToyScene],
) -> Result<Metrics> {
    let predictions = scenes
        .par_iter()
        .map(|s| model.logits(&s.features, rpkg).map(|l| argmax_rows(&l)))
        .collect::<Result<Vec<_>>>()?;
    score(scenes, &predictions, model.outputs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub metrics: Option<Metrics>,
}

/// Mean loss over `scenes` and the matching mean gradient, reduced in scene order.
pub fn batch_loss(
    model: &ToyModel,
    rpkg: Option<&RelationalPriorKnowledgeGraph<f64>>,
    scenes: &[ToyScene],
) -> Result<(f64, Vec<Tensor<f64>>)> {
    let parts = scenes
        .par_iter()
        .map(|s| model.loss_and_grads(&s.features, &s.labels, rpkg))
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / scenes.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, x) in grads.iter_mut().zip(&g) {
            acc.data_mut()
                .iter_mut()
                .zip(x.data())
                .for_each(|(a, b)| *a += b);
        }
    }
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss * inv, grads))
}

/// Trains a fresh model with Adam on freshly drawn scenes at every step.
///
/// `rpkg` is the full prior graph; it is restricted to the configured
/// relations here. Step `t` of the log holds the loss of the batch used
/// for update `t`.
pub fn train(
    spec: &ToyTaskSpec,
    rpkg: Option<&RelationalPriorKnowledgeGraph<f64>>,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ToyModel, Vec<StepLog>)> {
    spec.validate()?;
    config.validate()?;
    let selected = match (model_config.baseline, rpkg) {
        (false, Some(g)) => Some(g.select_relations(&model_config.relations)?),
        _ => None,
    };
    let rpkg = selected.as_ref();
    if let Some(g) = rpkg {
        if g.num_classes() != spec.num_classes {
            return Err(Error::Config(format!(
                "prior graph has {} classes, task has {}",
                g.num_classes(),
                spec.num_classes
            )));
        }
    }
    let root = SeedStream::new(config.seed);
    let mut model = ToyModel::new(
        model_config,
        spec.num_classes,
        spec.feature_width,
        rpkg,
        root,
    )?;
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let protos = spec.prototypes();
    let eval_set = config.eval_set(spec);

    let mut log = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let scenes = config.train_batch(spec, &protos, step);
        let (loss, grads) = batch_loss(&model, rpkg, &scenes)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        adam.step(model.store_mut(), &grads)?;
        let metrics = if step % config.eval_every == 0 || step == config.steps {
            Some(evaluate(&model, rpkg, &eval_set)?)
        } else {
            None
        };
        log.push(StepLog {
            step,
            loss,
            metrics,
        });
    }
    Ok((model, log))
}

/// Float formatting used in every CSV artifact: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// `metrics.csv`: one row per step; evaluation columns are empty between
/// evaluations and for absent metrics.
pub fn metrics_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,loss,overall_acc,ambiguous_acc,duplicate_detection_rate\n");
    for s in log {
        let m = s.metrics.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.step,
            fmt_f64(s.loss),
            fmt_opt(m.map(|m| m.overall_acc)),
            fmt_opt(m.and_then(|m| m.ambiguous_acc)),
            fmt_opt(m.and_then(|m| m.duplicate_detection_rate)),
        );
    }
    out
}

/// Last evaluation in a training log.
pub fn final_metrics(log: &[StepLog]) -> Option<&Metrics> {
    log.iter().rev().find_map(|s| s.metrics.as_ref())
}
