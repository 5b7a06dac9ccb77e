//! Two-stage hierarchical quality classifier.
//!
//! Three binary stage models cooperate: model-1 separates high from low
//! quality, then either model-2 (good vs usable, high branch) or model-3
//! (usable vs unusable, low branch) produces the final label. The stage-1
//! boundary itself never appears in the output: both second-stage models
//! can emit "usable". A flat three-class baseline lives in
//! [`train`](self::train) for comparison experiments.

mod train;

pub use train::{
    build_flat_baseline, compare_models, evaluate_flat, evaluate_hierarchy, predict_flat,
    train_flat, train_hierarchy, train_stage, ComparisonReport, HierarchyTrainConfig, Hyperparams,
    StageReport, StageSetup, TrainingReport,
};

pub use crate::data::Sample;
pub use crate::label::QualityLabel;

use crate::backbones::Network;
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::tensor::{sigmoid, Tensor};

/// The three binary decision roles of the hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageRole {
    /// Model-1: high quality (positive) vs low quality (negative).
    HighVsLow,
    /// Model-2: good (positive) vs usable (negative), high branch.
    GoodVsUsable,
    /// Model-3: usable (positive) vs unusable (negative), low branch.
    UsableVsUnusable,
}

impl StageRole {
    pub const ALL: [StageRole; 3] =
        [StageRole::HighVsLow, StageRole::GoodVsUsable, StageRole::UsableVsUnusable];

    pub fn model_name(self) -> &'static str {
        match self {
            StageRole::HighVsLow => "model1",
            StageRole::GoodVsUsable => "model2",
            StageRole::UsableVsUnusable => "model3",
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            StageRole::HighVsLow => "high-vs-low",
            StageRole::GoodVsUsable => "good-vs-usable",
            StageRole::UsableVsUnusable => "usable-vs-unusable",
        }
    }
}

/// Binary training target after stage relabeling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageTarget {
    Positive,
    Negative,
    Excluded,
}

/// How stage 1 treats usable images. The default keeps only the extremes
/// (good vs unusable); the alternatives exist for ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UsableStagePolicy {
    #[default]
    Exclude,
    AsPositive,
    AsNegative,
}

impl UsableStagePolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exclude" => Some(UsableStagePolicy::Exclude),
            "positive" => Some(UsableStagePolicy::AsPositive),
            "negative" => Some(UsableStagePolicy::AsNegative),
            _ => None,
        }
    }
}

/// Map a three-way label onto one stage's binary target (default stage-1
/// policy: usable images are excluded from the extremes-only boundary).
pub fn relabel_for_stage(label: QualityLabel, role: StageRole) -> StageTarget {
    relabel_with_policy(label, role, UsableStagePolicy::Exclude)
}

pub fn relabel_with_policy(
    label: QualityLabel,
    role: StageRole,
    policy: UsableStagePolicy,
) -> StageTarget {
    use QualityLabel::*;
    use StageTarget::*;
    match role {
        StageRole::HighVsLow => match label {
            Good => Positive,
            Unusable => Negative,
            Usable => match policy {
                UsableStagePolicy::Exclude => Excluded,
                UsableStagePolicy::AsPositive => Positive,
                UsableStagePolicy::AsNegative => Negative,
            },
        },
        StageRole::GoodVsUsable => match label {
            Good => Positive,
            Usable => Negative,
            Unusable => Excluded,
        },
        StageRole::UsableVsUnusable => match label {
            Usable => Positive,
            Unusable => Negative,
            Good => Excluded,
        },
    }
}

/// One trained binary stage: a 2-logit network and a decision threshold on
/// the positive-class probability.
#[derive(Clone, Debug)]
pub struct StageModel {
    role: StageRole,
    network: Network,
    threshold: f64,
}

impl StageModel {
    pub fn new(role: StageRole, network: Network, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!(
                "stage threshold must lie strictly inside (0, 1), got {threshold}"
            )));
        }
        if network.num_outputs() != 2 {
            return Err(Error::Config(format!(
                "stage networks need 2 logits, got {}",
                network.num_outputs()
            )));
        }
        Ok(StageModel { role, network, threshold })
    }

    pub fn role(&self) -> StageRole {
        self.role
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_threshold(&mut self, threshold: f64) -> Result<()> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!(
                "stage threshold must lie strictly inside (0, 1), got {threshold}"
            )));
        }
        self.threshold = threshold;
        Ok(())
    }

    /// Positive-class probability: the logistic of logit[1] - logit[0].
    pub fn positive_probability(&self, image: &Tensor) -> Result<f64> {
        let logits = self.network.forward(image)?;
        Ok(margin_probability(&logits))
    }
}

pub(crate) fn margin_probability(logits: &Tensor) -> f64 {
    let d = logits.data();
    sigmoid(d[1] as f64 - d[0] as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageDecision {
    Positive,
    Negative,
}

fn decide(probability: f64, threshold: f64) -> StageDecision {
    if probability >= threshold {
        StageDecision::Positive
    } else {
        StageDecision::Negative
    }
}

/// One traversed stage: which model ran, the positive-class probability it
/// produced, and the decision taken.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathStep {
    pub role: StageRole,
    pub probability: f64,
    pub decision: StageDecision,
}

/// Final three-class outcome with the two-step decision path.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: QualityLabel,
    /// Always starts with the high-vs-low gate, then the chosen stage-2 model.
    pub path: [PathStep; 2],
    /// The stage whose saliency explains this outcome (= `path[1].role`).
    pub explainer_role: StageRole,
}

impl Prediction {
    pub fn stage1(&self) -> &PathStep {
        &self.path[0]
    }

    pub fn stage2(&self) -> &PathStep {
        &self.path[1]
    }
}

/// Second-stage label assignment given which branch ran and its decision.
fn stage2_label(role: StageRole, decision: StageDecision) -> QualityLabel {
    match (role, decision) {
        (StageRole::GoodVsUsable, StageDecision::Positive) => QualityLabel::Good,
        (StageRole::GoodVsUsable, StageDecision::Negative) => QualityLabel::Usable,
        (StageRole::UsableVsUnusable, StageDecision::Positive) => QualityLabel::Usable,
        (StageRole::UsableVsUnusable, StageDecision::Negative) => QualityLabel::Unusable,
        (StageRole::HighVsLow, _) => unreachable!("stage 1 never assigns a final label"),
    }
}

/// The full two-stage classifier.
#[derive(Clone, Debug)]
pub struct HierarchicalClassifier {
    model1: StageModel,
    model2: StageModel,
    model3: StageModel,
}

impl HierarchicalClassifier {
    pub fn new(model1: StageModel, model2: StageModel, model3: StageModel) -> Result<Self> {
        let roles = [model1.role(), model2.role(), model3.role()];
        let expected = [StageRole::HighVsLow, StageRole::GoodVsUsable, StageRole::UsableVsUnusable];
        if roles != expected {
            return Err(Error::Config(format!(
                "stage roles must be {expected:?} in order, got {roles:?}"
            )));
        }
        Ok(HierarchicalClassifier { model1, model2, model3 })
    }

    pub fn stage(&self, role: StageRole) -> &StageModel {
        match role {
            StageRole::HighVsLow => &self.model1,
            StageRole::GoodVsUsable => &self.model2,
            StageRole::UsableVsUnusable => &self.model3,
        }
    }

    pub fn stage_mut(&mut self, role: StageRole) -> &mut StageModel {
        match role {
            StageRole::HighVsLow => &mut self.model1,
            StageRole::GoodVsUsable => &mut self.model2,
            StageRole::UsableVsUnusable => &mut self.model3,
        }
    }

    pub fn input_resolution(&self) -> usize {
        self.model1.network().input_resolution()
    }

    /// Route one image through the hierarchy.
    ///
    /// Model-1 decides the branch: positive goes to model-2 (good or
    /// usable), negative to model-3 (usable or unusable). The path records
    /// both stages; the second entry also names the explaining model.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let p1 = self.model1.positive_probability(image)?;
        let d1 = decide(p1, self.model1.threshold());
        let stage2 = match d1 {
            StageDecision::Positive => &self.model2,
            StageDecision::Negative => &self.model3,
        };
        let p2 = stage2.positive_probability(image)?;
        let d2 = decide(p2, stage2.threshold());
        let label = stage2_label(stage2.role(), d2);
        Ok(Prediction {
            label,
            path: [
                PathStep { role: StageRole::HighVsLow, probability: p1, decision: d1 },
                PathStep { role: stage2.role(), probability: p2, decision: d2 },
            ],
            explainer_role: stage2.role(),
        })
    }
}

/// Cartesian grid of the three stage thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdGrid {
    pub model1: Vec<f64>,
    pub model2: Vec<f64>,
    pub model3: Vec<f64>,
}

impl ThresholdGrid {
    pub fn uniform(values: Vec<f64>) -> Self {
        ThresholdGrid { model1: values.clone(), model2: values.clone(), model3: values }
    }

    pub fn len(&self) -> usize {
        self.model1.len() * self.model2.len() * self.model3.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One evaluated threshold triple.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub thresholds: (f64, f64, f64),
    pub matrix: ConfusionMatrix,
    /// How many images model-1 routed to the high branch (model-2).
    pub routed_high: usize,
}

/// Evaluate the hierarchy across a threshold grid. Stage probabilities are
/// computed once per image; each triple then re-routes them arithmetically.
pub fn sweep_thresholds(
    hc: &HierarchicalClassifier,
    samples: &[Sample],
    grid: &ThresholdGrid,
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    let mut probs = Vec::with_capacity(samples.len());
    for s in samples {
        let p1 = hc.model1.positive_probability(&s.image)?;
        let p2 = hc.model2.positive_probability(&s.image)?;
        let p3 = hc.model3.positive_probability(&s.image)?;
        probs.push((p1, p2, p3, s.label));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &t1 in &grid.model1 {
        for &t2 in &grid.model2 {
            for &t3 in &grid.model3 {
                let mut matrix = ConfusionMatrix::new();
                let mut routed_high = 0usize;
                for &(p1, p2, p3, truth) in &probs {
                    let label = match decide(p1, t1) {
                        StageDecision::Positive => {
                            routed_high += 1;
                            stage2_label(StageRole::GoodVsUsable, decide(p2, t2))
                        }
                        StageDecision::Negative => {
                            stage2_label(StageRole::UsableVsUnusable, decide(p3, t3))
                        }
                    };
                    matrix.record(truth, label);
                }
                points.push(SweepPoint { thresholds: (t1, t2, t3), matrix, routed_high });
            }
        }
    }
    Ok(points)
}

pub const PREDICTION_CSV_HEADER: &str = "image_id,predicted_code,true_code,m1_prob,stage2_role,stage2_prob";

/// One CSV row per prediction; `true_code` stays empty when unknown.
pub fn prediction_csv_row(image_id: &str, p: &Prediction, truth: Option<QualityLabel>) -> String {
    format!(
        "{},{},{},{:.6},{},{:.6}",
        image_id,
        p.label.code(),
        truth.map(|t| t.code().to_string()).unwrap_or_default(),
        p.stage1().probability,
        p.stage2().role.model_name(),
        p.stage2().probability,
    )
}
