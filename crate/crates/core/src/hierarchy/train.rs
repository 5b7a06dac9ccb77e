//! Stage training, the flat three-class baseline, and evaluation helpers.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::{
    relabel_with_policy, HierarchicalClassifier, StageModel, StageRole, StageTarget,
    UsableStagePolicy,
};
use crate::backbones::{build_network, ArchConfig, MicroDenseConfig, MicroEffConfig, Network};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::label::QualityLabel;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::optim::Adam;
use crate::tensor::{NodeId, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Decoupled weight decay (0 disables it).
    pub weight_decay: f32,
    /// Randomly mirror training images horizontally/vertically per draw.
    /// Label-preserving for fundus fields; curbs memorization on small sets.
    pub augment_flips: bool,
    pub stage1_usable_policy: UsableStagePolicy,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            augment_flips: true,
            stage1_usable_policy: UsableStagePolicy::Exclude,
        }
    }
}

#[derive(Clone, Copy)]
struct Flip {
    horizontal: bool,
    vertical: bool,
}

const NO_FLIP: Flip = Flip { horizontal: false, vertical: false };

fn stack_batch(samples: &[Sample], indices: &[usize], flips: &[Flip]) -> Tensor {
    let shape = samples[indices[0]].image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut data = Vec::with_capacity(indices.len() * c * h * w);
    for (&i, flip) in indices.iter().zip(flips) {
        let src = samples[i].image.data();
        if !flip.horizontal && !flip.vertical {
            data.extend_from_slice(src);
            continue;
        }
        for ch in 0..c {
            for y in 0..h {
                let sy = if flip.vertical { h - 1 - y } else { y };
                let row = &src[ch * h * w + sy * w..ch * h * w + (sy + 1) * w];
                if flip.horizontal {
                    data.extend(row.iter().rev());
                } else {
                    data.extend_from_slice(row);
                }
            }
        }
    }
    Tensor::new(&[indices.len(), c, h, w], data).expect("uniform sample shapes")
}

fn draw_flips(rng: &mut StdRng, n: usize, enabled: bool) -> Vec<Flip> {
    use rand::Rng;
    (0..n)
        .map(|_| {
            if enabled {
                Flip { horizontal: rng.gen_bool(0.5), vertical: rng.gen_bool(0.5) }
            } else {
                NO_FLIP
            }
        })
        .collect()
}

/// Refresh batch-norm running statistics under the final parameters.
///
/// The moving averages recorded during training lag the parameter
/// trajectory; two forward-only passes over the unaugmented training set
/// re-estimate them for the weights inference will actually use.
fn recalibrate_batchnorm(
    net: &mut crate::backbones::Network,
    samples: &[Sample],
    indices: &[usize],
    batch_size: usize,
) -> Result<()> {
    for _pass in 0..2 {
        for chunk in indices.chunks(batch_size) {
            let flips = vec![NO_FLIP; chunk.len()];
            let batch = stack_batch(samples, chunk, &flips);
            net.trace_train(&batch)?;
        }
    }
    Ok(())
}

fn param_grads<'g>(
    traced_params: &[NodeId],
    grads: &'g crate::tensor::Gradients,
) -> Vec<&'g Tensor> {
    traced_params.iter().map(|&id| grads.wrt(id)).collect()
}

/// Train one stage model on its relabeled subset.
///
/// Images relabeled `Excluded` are dropped; both remaining classes must be
/// present. Runs `hp.epochs` epochs of Adam over shuffled mini-batches of
/// the mean binary cross entropy, returning the trained model and the
/// per-epoch mean loss history. Deterministic for a fixed seed.
pub fn train_stage(
    model: StageModel,
    samples: &[Sample],
    hp: &Hyperparams,
    seed: u64,
) -> Result<(StageModel, Vec<f64>)> {
    let mut model = model;
    let role = model.role();
    let mut indices = Vec::new();
    let mut targets = Vec::new();
    let mut class_present = [false; 2];
    for (i, s) in samples.iter().enumerate() {
        match relabel_with_policy(s.label, role, hp.stage1_usable_policy) {
            StageTarget::Positive => {
                indices.push(i);
                targets.push(1.0f32);
                class_present[1] = true;
            }
            StageTarget::Negative => {
                indices.push(i);
                targets.push(0.0f32);
                class_present[0] = true;
            }
            StageTarget::Excluded => {}
        }
    }
    if indices.is_empty() || !class_present[0] || !class_present[1] {
        return Err(Error::Train(format!(
            "{} training set lacks {} examples after relabeling",
            role.model_name(),
            if indices.is_empty() {
                "any"
            } else if class_present[0] {
                "positive"
            } else {
                "negative"
            }
        )));
    }
    if hp.batch_size == 0 {
        return Err(Error::Train("batch size must be >= 1".into()));
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let mut adam = Adam::new(hp.learning_rate).with_weight_decay(hp.weight_decay);
    let mut order: Vec<usize> = (0..indices.len()).collect();
    let mut history = Vec::with_capacity(hp.epochs);
    for _epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(hp.batch_size) {
            let batch_indices: Vec<usize> = chunk.iter().map(|&o| indices[o]).collect();
            let batch_targets: Vec<f32> = chunk.iter().map(|&o| targets[o]).collect();
            let flips = draw_flips(&mut rng, chunk.len(), hp.augment_flips);
            let batch = stack_batch(samples, &batch_indices, &flips);

            let mut traced = model.network_mut().trace_train(&batch)?;
            let margins = traced.tape.logit_margin(traced.logits)?;
            let loss = traced.tape.sigmoid_bce_mean(margins, &batch_targets)?;
            let loss_value = traced.tape.value(loss).item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "{} training loss became non-finite",
                    role.model_name()
                )));
            }
            epoch_loss += loss_value * chunk.len() as f64;

            let grads = traced.tape.backward(loss)?;
            let grad_refs = param_grads(&traced.param_nodes, &grads);
            adam.step(model.network_mut(), &grad_refs);
        }
        history.push(epoch_loss / indices.len() as f64);
    }
    if hp.epochs > 0 {
        recalibrate_batchnorm(model.network_mut(), samples, &indices, hp.batch_size)?;
    }
    Ok((model, history))
}

/// Backbone family and decision threshold for one stage. The optional
/// overrides replace the shared hyperparameters for this stage only; the
/// three stages train independently, so their budgets need not match.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSetup {
    pub config: ArchConfig,
    pub threshold: f64,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f32>,
}

impl StageSetup {
    pub fn new(config: ArchConfig, threshold: f64) -> Self {
        StageSetup { config, threshold, epochs: None, learning_rate: None }
    }

    fn hyperparams(&self, shared: &Hyperparams) -> Hyperparams {
        Hyperparams {
            epochs: self.epochs.unwrap_or(shared.epochs),
            learning_rate: self.learning_rate.unwrap_or(shared.learning_rate),
            ..shared.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyTrainConfig {
    /// Setups for model-1, model-2, model-3 in role order.
    pub stages: [StageSetup; 3],
    pub hyperparams: Hyperparams,
}

impl Default for HierarchyTrainConfig {
    /// The recommended family combination: dense backbones for model-1 and
    /// model-2, the inverted-bottleneck family for model-3.
    fn default() -> Self {
        let dense = ArchConfig::Dense(MicroDenseConfig::default());
        let eff = ArchConfig::Eff(MicroEffConfig::default());
        HierarchyTrainConfig {
            stages: [
                StageSetup::new(dense.clone(), 0.5),
                StageSetup::new(dense, 0.5),
                StageSetup::new(eff, 0.5),
            ],
            hyperparams: Hyperparams::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub role: StageRole,
    pub backbone: &'static str,
    /// Training-set size after relabeling dropped the excluded class.
    pub train_size: usize,
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainingReport {
    pub stages: Vec<StageReport>,
}

fn stage_train_size(samples: &[Sample], role: StageRole, policy: UsableStagePolicy) -> usize {
    samples
        .iter()
        .filter(|s| relabel_with_policy(s.label, role, policy) != StageTarget::Excluded)
        .count()
}

/// Train the three stage models independently and assemble the classifier.
///
/// The stages share no mutable state, so they train on parallel threads;
/// each stage's own loop stays sequential and seeded, keeping results
/// reproducible.
pub fn train_hierarchy(
    samples: &[Sample],
    config: &HierarchyTrainConfig,
    seed: u64,
) -> Result<(HierarchicalClassifier, TrainingReport)> {
    let roles = StageRole::ALL;
    let mut slots: Vec<Option<Result<(StageModel, Vec<f64>)>>> = vec![None, None, None];
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (i, role) in roles.into_iter().enumerate() {
            let setup = &config.stages[i];
            let hp = setup.hyperparams(&config.hyperparams);
            handles.push(scope.spawn(move || {
                let network = build_network(&setup.config, 2, seed.wrapping_add(i as u64 + 1))?;
                let model = StageModel::new(role, network, setup.threshold)?;
                train_stage(model, samples, &hp, seed.wrapping_add(100 + i as u64))
            }));
        }
        for (i, h) in handles.into_iter().enumerate() {
            slots[i] = Some(h.join().expect("stage training thread panicked"));
        }
    });
    let mut trained = Vec::new();
    let mut reports = Vec::new();
    for (i, slot) in slots.into_iter().enumerate() {
        let (model, history) = slot.expect("all slots filled")?;
        reports.push(StageReport {
            role: roles[i],
            backbone: config.stages[i].config.kind_name(),
            train_size: stage_train_size(samples, roles[i], config.hyperparams.stage1_usable_policy),
            loss_history: history,
        });
        trained.push(model);
    }
    let model3 = trained.pop().expect("three models");
    let model2 = trained.pop().expect("three models");
    let model1 = trained.pop().expect("three models");
    let hc = HierarchicalClassifier::new(model1, model2, model3)?;
    Ok((hc, TrainingReport { stages: reports }))
}

// ── flat three-class baseline ───────────────────────────────────────

/// Single 3-logit network over the same backbone families.
pub fn build_flat_baseline(config: &ArchConfig, seed: u64) -> Result<Network> {
    build_network(config, 3, seed)
}

/// Argmax over the three logits; ties break toward the lower class index.
pub fn predict_flat(net: &Network, image: &Tensor) -> Result<QualityLabel> {
    let logits = net.forward(image)?;
    let d = logits.data();
    let mut best = 0usize;
    for j in 1..d.len() {
        if d[j] > d[best] {
            best = j;
        }
    }
    QualityLabel::from_index(best)
        .ok_or_else(|| Error::Train(format!("flat baseline produced {} logits", d.len())))
}

/// Train the flat baseline with mean softmax cross entropy; same batching,
/// optimizer, and determinism contract as [`train_stage`].
pub fn train_flat(
    net: Network,
    samples: &[Sample],
    hp: &Hyperparams,
    seed: u64,
) -> Result<(Network, Vec<f64>)> {
    let mut net = net;
    if samples.is_empty() {
        return Err(Error::Train("flat baseline training set is empty".into()));
    }
    if hp.batch_size == 0 {
        return Err(Error::Train("batch size must be >= 1".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut adam = Adam::new(hp.learning_rate).with_weight_decay(hp.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(hp.epochs);
    for _epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(hp.batch_size) {
            let flips = draw_flips(&mut rng, chunk.len(), hp.augment_flips);
            let batch = stack_batch(samples, chunk, &flips);
            let classes: Vec<usize> = chunk.iter().map(|&i| samples[i].label.index()).collect();
            let mut traced = net.trace_train(&batch)?;
            let loss = traced.tape.softmax_cross_entropy_mean(traced.logits, &classes)?;
            let loss_value = traced.tape.value(loss).item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::Numeric("flat baseline loss became non-finite".into()));
            }
            epoch_loss += loss_value * chunk.len() as f64;
            let grads = traced.tape.backward(loss)?;
            let grad_refs = param_grads(&traced.param_nodes, &grads);
            adam.step(&mut net, &grad_refs);
        }
        history.push(epoch_loss / samples.len() as f64);
    }
    if hp.epochs > 0 {
        let all: Vec<usize> = (0..samples.len()).collect();
        recalibrate_batchnorm(&mut net, samples, &all, hp.batch_size)?;
    }
    Ok((net, history))
}

// ── evaluation ──────────────────────────────────────────────────────

pub fn evaluate_hierarchy(hc: &HierarchicalClassifier, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new();
    for s in samples {
        cm.record(s.label, hc.predict(&s.image)?.label);
    }
    Ok(cm)
}

pub fn evaluate_flat(net: &Network, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new();
    for s in samples {
        cm.record(s.label, predict_flat(net, &s.image)?);
    }
    Ok(cm)
}

/// Side-by-side metrics of the hierarchical classifier and the flat
/// baseline on one test set.
#[derive(Clone, Debug)]
pub struct ComparisonReport {
    pub hierarchical: MetricsReport,
    pub flat: MetricsReport,
}

impl ComparisonReport {
    pub fn to_text(&self) -> String {
        format!(
            "== hierarchical classifier ==\n{}\n== flat 3-class baseline ==\n{}\naccuracy delta (hierarchical - flat): {:+.4}\n",
            self.hierarchical.to_text(),
            self.flat.to_text(),
            self.hierarchical.accuracy - self.flat.accuracy,
        )
    }
}

pub fn compare_models(
    hc: &HierarchicalClassifier,
    flat: &Network,
    samples: &[Sample],
) -> Result<ComparisonReport> {
    Ok(ComparisonReport {
        hierarchical: MetricsReport::from_matrix(&evaluate_hierarchy(hc, samples)?),
        flat: MetricsReport::from_matrix(&evaluate_flat(flat, samples)?),
    })
}
