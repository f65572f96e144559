use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{EStep, ParamGroup};
use crate::em::{mstep_prior_update, Responsibilities};
use crate::error::{config_err, MgkError, Result};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::model::{Model, ModelSpec};
use crate::training::optim::{Adam, OptimizerSpec};
use crate::training::task::{generate_task, Example, TaskSpec};

/// Floor applied to learned mixing weights after each update.
const PI_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    /// Seeds parameter initialization and the per-epoch shuffles.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean batch loss and accuracy over the epoch's updates.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelSpec,
    pub task: TaskSpec,
    pub training: TrainConfig,
    pub seed: u64,
    pub initial_train: Evaluation,
    pub epochs: Vec<EpochMetrics>,
    pub final_train: Evaluation,
    pub test: Evaluation,
    /// When mixing weights are reset from responsibilities, if ever.
    pub prior_update: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub wall_time_secs: f64,
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

/// Mean cross-entropy and top-1 accuracy. Does not modify the model.
pub fn evaluate(model: &Model, examples: &[Example]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(MgkError::EmptyInput("no examples to evaluate".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for e in examples {
        let z = model.logits(&e.tokens)?;
        if e.label >= z.len() {
            return config_err(format!("label {} outside {} classes", e.label, z.len()));
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - z[e.label];
        correct += usize::from(argmax(&z) == e.label);
    }
    let n = examples.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

struct StepResult {
    loss: f64,
    correct: usize,
    grads: Vec<Option<Tensor>>,
    /// Batch-averaged responsibilities per (layer, head), soft mixtures only.
    responsibilities: Vec<Vec<Tensor>>,
}

fn batch_step(model: &Model, batch: &[&Example]) -> Result<StepResult> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut losses: Vec<Var> = Vec::with_capacity(batch.len());
    let mut correct = 0;
    let mut resp: Vec<Vec<Vec<f64>>> = Vec::new();
    let want_resp = model.spec.attention.estep == EStep::SoftMStepPrior;
    for e in batch {
        let fwd = model.forward_on(&mut tape, &bound, &e.tokens)?;
        correct += usize::from(argmax(tape.value(fwd.logits).data()) == e.label);
        losses.push(tape.cross_entropy(fwd.logits, e.label)?);
        if resp.is_empty() {
            resp = fwd.layers.iter().map(|l| vec![Vec::new(); l.heads.len()]).collect();
        }
        for (l, layer) in fwd.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                if !want_resp {
                    continue;
                }
                if let Some(g) = head.responsibilities(&tape)? {
                    resp[l][h].extend_from_slice(g.data());
                }
            }
        }
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss = tape.scale(total, 1.0 / batch.len() as f64);
    let value = tape.value(loss).data()[0];
    let g = tape.backward(loss)?;
    let grads = bound.registry.iter().map(|(_, v)| g.get(*v).cloned()).collect();
    let m = model.spec.attention.components;
    let responsibilities = resp
        .into_iter()
        .map(|layer| {
            layer
                .into_iter()
                .filter(|d| !d.is_empty())
                .map(|d| Tensor::new(vec![d.len() / m, m], d))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StepResult {
        loss: value,
        correct,
        grads,
        responsibilities,
    })
}

fn apply_step(model: &mut Model, adam: &mut Adam, mut step: StepResult) -> Result<()> {
    let estep = model.spec.attention.estep;
    let is_mixture = model.spec.attention.variant.is_mixture();
    let mut params = model.tensors_mut();
    if estep == EStep::SoftMStepPrior {
        for ((group, _), g) in params.iter().zip(step.grads.iter_mut()) {
            if *group == ParamGroup::Pi {
                *g = None;
            }
        }
    }
    let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| &mut **t).collect();
    adam.update(&mut refs, &step.grads);
    drop(refs);
    if is_mixture {
        for (group, t) in params.iter_mut() {
            if *group == ParamGroup::Pi {
                t.data_mut().iter_mut().for_each(|p| *p = p.max(PI_FLOOR));
            }
        }
    }
    drop(params);
    if estep == EStep::SoftMStepPrior && is_mixture {
        for (block, layer) in model.blocks.iter_mut().zip(&step.responsibilities) {
            for (head, gamma) in block.attention.heads.iter_mut().zip(layer) {
                let pi = mstep_prior_update(&Responsibilities::from_gamma(gamma.clone())?)?;
                head.keys.pi = Tensor::vector(pi.into_iter().map(|p| p.max(PI_FLOOR)).collect());
            }
        }
    }
    Ok(())
}

/// Trains `model` in place on `train` with per-epoch shuffles drawn from
/// `config.seed`. On divergence the error carries the model as it was
/// before the failing update.
pub fn fit(model: &mut Model, train: &[Example], config: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    if train.is_empty() {
        return Err(MgkError::EmptyInput("no training examples".into()));
    }
    if config.batch_size == 0 {
        return config_err("batch_size must be positive");
    }
    let mut adam = Adam::new(config.optimizer.clone())?;
    let mut rng = SplitMix64::new(config.seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    let mut last_finite = f64::NAN;
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle = rng.fork();
        for i in (1..order.len()).rev() {
            let j = shuffle.below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        let (mut loss_sum, mut correct, mut batches) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let step = match batch_step(model, &batch) {
                Ok(step) => step,
                Err(
                    MgkError::DegenerateRow { .. }
                    | MgkError::DegenerateNormalizer { .. }
                    | MgkError::DegenerateResponsibility { .. },
                ) => {
                    return Err(MgkError::TrainingFailure {
                        epoch,
                        step: adam.steps(),
                        last_finite_loss: last_finite,
                        last_finite_model: Box::new(model.clone()),
                    })
                }
                Err(e) => return Err(e),
            };
            let snapshot = model.clone();
            let loss = step.loss;
            if loss.is_finite() {
                correct += step.correct;
                apply_step(model, &mut adam, step)?;
            }
            if !loss.is_finite() || !model.is_finite() {
                return Err(MgkError::TrainingFailure {
                    epoch,
                    step: adam.steps(),
                    last_finite_loss: last_finite,
                    last_finite_model: Box::new(snapshot),
                });
            }
            last_finite = loss;
            loss_sum += loss;
            batches += 1;
        }
        metrics.push(EpochMetrics {
            epoch,
            loss: loss_sum / batches as f64,
            accuracy: correct as f64 / train.len() as f64,
        });
    }
    Ok(metrics)
}

/// Generates the task, initializes the model from `config.seed`, trains,
/// and evaluates on both splits.
pub fn train(model_spec: &ModelSpec, task: &TaskSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    let start = Instant::now();
    model_spec.validate()?;
    if model_spec.tokens < task.token_count() || model_spec.classes < task.classes() || model_spec.max_len < task.seq_len {
        return config_err("model vocabulary, classes or max_len too small for the task");
    }
    let data = generate_task(task)?;
    let mut model = Model::init(model_spec, config.seed)?;
    let initial_train = evaluate(&model, &data.train)?;
    let epochs = fit(&mut model, &data.train, config)?;
    let final_train = evaluate(&model, &data.train)?;
    let test = evaluate(&model, &data.test)?;
    let prior_update = (model_spec.attention.variant.is_mixture() && model_spec.attention.estep == EStep::SoftMStepPrior)
        .then(|| "m_step_every_training_step".to_string());
    Ok(TrainOutcome {
        report: TrainReport {
            model: model_spec.clone(),
            task: task.clone(),
            training: config.clone(),
            seed: config.seed,
            initial_train,
            epochs,
            final_train,
            test,
            prior_update,
        },
        model,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionConfig, KeyMode, Variant};
    use crate::training::task::TaskKind;

    fn small(attn: AttentionConfig) -> ModelSpec {
        let mut s = ModelSpec::new(attn, 8, 9, 8, 8);
        s.ff_hidden = 16;
        s.layers = 1;
        s
    }

    fn task(n: usize) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::AssociativeRecall,
            vocab: 8,
            seq_len: 8,
            train_size: n,
            test_size: 8,
            seed: 5,
        }
    }

    fn cfg(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            optimizer: OptimizerSpec { lr, ..Default::default() },
            seed: 3,
        }
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let spec = small(AttentionConfig::new(Variant::Mgk, 1, 4, 8));
        let out = train(&spec, &task(12), &cfg(0.0, 3)).unwrap();
        assert_eq!(out.model, Model::init(&spec, 3).unwrap());
        let r = &out.report;
        assert!((r.initial_train.loss - r.final_train.loss).abs() < 1e-12);
        for w in r.epochs.windows(2) {
            assert!((w[0].loss - w[1].loss).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_reports() {
        let spec = small(AttentionConfig::new(Variant::Softmax, 2, 4, 8));
        let a = train(&spec, &task(12), &cfg(1e-2, 2)).unwrap();
        let b = train(&spec, &task(12), &cfg(1e-2, 2)).unwrap();
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn every_group_moves_after_one_step() {
        for (variant, mode) in [
            (Variant::Mgk, KeyMode::IndependentProjections),
            (Variant::Mgk, KeyMode::SharedShifted),
            (Variant::Mlk, KeyMode::SharedShifted),
            (Variant::Softmax, KeyMode::IndependentProjections),
        ] {
            let spec = small(AttentionConfig::new(variant, 1, 4, 8).with_key_mode(mode));
            let data = generate_task(&task(4)).unwrap();
            let mut model = Model::init(&spec, 1).unwrap();
            let before = model.clone();
            fit(&mut model, &data.train, &cfg(1e-2, 1)).unwrap();
            let mut groups = vec![ParamGroup::WQ, ParamGroup::Keys, ParamGroup::WV, ParamGroup::WO];
            if variant.is_mixture() {
                groups.push(ParamGroup::Pi);
            }
            if mode == KeyMode::SharedShifted {
                groups.push(ParamGroup::Offsets);
            }
            let mut b = before.clone();
            let mut a = model.clone();
            let pairs: Vec<_> = b.tensors_mut().into_iter().zip(a.tensors_mut()).collect();
            for g in groups {
                let moved = pairs.iter().any(|((gb, tb), (_, ta))| *gb == g && tb != ta);
                assert!(moved, "{variant:?} {mode:?} {g:?}");
            }
        }
    }

    #[test]
    fn mstep_prior_stays_a_distribution() {
        let attn = AttentionConfig::new(Variant::Mgk, 1, 4, 8).with_estep(EStep::SoftMStepPrior);
        let spec = small(attn);
        let data = generate_task(&task(8)).unwrap();
        let mut model = Model::init(&spec, 2).unwrap();
        for _ in 0..3 {
            fit(&mut model, &data.train, &cfg(1e-2, 1)).unwrap();
            for b in &model.blocks {
                for h in &b.attention.heads {
                    let pi = h.keys.pi.data();
                    assert!(pi.iter().all(|&p| p > 0.0));
                    assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn hard_assign_trains() {
        let attn = AttentionConfig::new(Variant::Mgk, 1, 4, 8).with_estep(EStep::HardAssign);
        let out = train(&small(attn), &task(8), &cfg(1e-2, 2)).unwrap();
        assert!(out.report.final_train.loss.is_finite());
    }

    #[test]
    fn overfits_single_example() {
        let spec = small(AttentionConfig::new(Variant::Mgk, 1, 4, 8));
        let data = generate_task(&task(1)).unwrap();
        let mut model = Model::init(&spec, 4).unwrap();
        fit(&mut model, &data.train, &TrainConfig { batch_size: 1, ..cfg(1e-2, 60) }).unwrap();
        let e = evaluate(&model, &data.train).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(evaluate(&model, &data.train).unwrap(), e);
    }

    #[test]
    fn divergence_reports_last_finite_state() {
        let spec = small(AttentionConfig::new(Variant::Softmax, 1, 4, 8));
        let data = generate_task(&task(8)).unwrap();
        let mut model = Model::init(&spec, 4).unwrap();
        let err = fit(&mut model, &data.train, &cfg(1e200, 3)).unwrap_err();
        match err {
            MgkError::TrainingFailure { last_finite_model, .. } => {
                assert!(last_finite_model.is_finite());
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(evaluate(&model, &[]).is_err());
    }
}
