//! Per-user acquisition sessions, independent of the transport.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use vaem::checkpoint::AnyModel;
use vaem::data::{ColumnKind, ColumnSpec, Schema};
use vaem::error::{Error, Result};
use vaem::model::{predict_target, TabularModel, TargetPrediction};
use vaem::rng::{self, derive_seed};
use vaem::saia::{self, SaiaConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// 95% central interval of a normal with the predictive moments.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProbability {
    pub label: String,
    pub probability: f64,
}

/// Target prediction in raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub mean: f64,
    pub std: f64,
    /// Continuous kinds only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interval: Option<[f64; 2]>,
    /// Discrete kinds only, in class order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_probabilities: Option<Vec<ClassProbability>>,
    /// Most likely class label for discrete kinds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Variance in normalized units, comparable across targets.
    pub normalized_variance: f64,
    pub samples: usize,
}

impl PredictiveSummary {
    pub fn new(spec: &ColumnSpec, p: &TargetPrediction) -> Self {
        match &p.probs {
            Some(probs) => PredictiveSummary {
                mean: p.mean,
                std: p.variance.sqrt(),
                interval: None,
                class_probabilities: Some(
                    probs
                        .iter()
                        .enumerate()
                        .map(|(k, &probability)| ClassProbability {
                            label: spec.label(k).unwrap_or_default().to_string(),
                            probability,
                        })
                        .collect(),
                ),
                label: spec.label(p.point as usize).map(str::to_string),
                normalized_variance: p.variance,
                samples: p.samples,
            },
            None => {
                let w = spec.max - spec.min;
                let mean = spec.min + p.mean * w;
                let std = p.variance.sqrt() * w;
                PredictiveSummary {
                    mean,
                    std,
                    interval: Some([mean - Z95 * std, mean + Z95 * std]),
                    class_probabilities: None,
                    label: None,
                    normalized_variance: p.variance,
                    samples: p.samples,
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub feature: String,
    pub index: usize,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub step: usize,
    pub status: Status,
    /// Descending reward; ties keep column order.
    pub ranking: Vec<RankedCandidate>,
    pub prediction: PredictiveSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    /// Top of the ranking offered before this observation.
    pub recommended: Option<String>,
    pub ranking: Vec<RankedCandidate>,
    pub feature: String,
    pub value: Value,
    pub prediction: PredictiveSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub feature: String,
    pub index: usize,
    /// As submitted.
    pub value: Value,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSession {
    pub id: String,
    pub model_id: String,
    pub target: usize,
    pub observed: Vec<Observation>,
    pub candidates: Vec<usize>,
    pub initial_prediction: PredictiveSummary,
    pub history: Vec<HistoryEntry>,
    pub seed: u64,
    pub saia: SaiaConfig,
}

/// Why a request against a session cannot proceed.
#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("invalid value for '{field}': {reason}")]
    Invalid { field: String, reason: String },
    #[error("feature '{0}' is not a candidate")]
    NotCandidate(String),
    #[error(transparent)]
    Model(#[from] Error),
}

/// Normalized value of a submitted raw value: numbers for numeric kinds or
/// class indices, strings for labels.
pub fn parse_value(spec: &ColumnSpec, value: &Value) -> std::result::Result<f64, SessionError> {
    let invalid = |reason: String| SessionError::Invalid {
        field: spec.name.clone(),
        reason,
    };
    match value {
        Value::Number(n) => {
            let x = n.as_f64().ok_or_else(|| invalid(format!("{n} is not representable")))?;
            spec.normalize(x).map_err(invalid)
        }
        Value::String(s) => match &spec.kind {
            ColumnKind::Categorical { .. } | ColumnKind::Ordinal { .. } => spec.normalize_str(s).map_err(invalid),
            _ => Err(invalid(format!("expected a number, got '{s}'"))),
        },
        other => Err(invalid(format!("expected a number or label, got {other}"))),
    }
}

/// Seed of the reward estimates offered at `step` of a session seeded `seed`.
pub fn reward_seed(seed: u64, step: usize) -> u64 {
    derive_seed(seed, &[0x71, step as u64])
}

/// Seed of the target prediction made at `step`.
pub fn prediction_seed(seed: u64, step: usize) -> u64 {
    derive_seed(seed, &[0x72, step as u64])
}

fn resolve_feature(schema: &Schema, name: &str) -> std::result::Result<usize, SessionError> {
    schema.index_of(name).ok_or_else(|| SessionError::Invalid {
        field: "feature".into(),
        reason: format!("unknown feature '{name}'"),
    })
}

impl AcquisitionSession {
    /// A session on `model` with optional initial observations by column name.
    pub fn create(
        id: String,
        model_id: String,
        model: &AnyModel,
        initial: &BTreeMap<String, Value>,
        seed: u64,
        saia: SaiaConfig,
    ) -> std::result::Result<Self, SessionError> {
        let schema = model.schema();
        let target = schema.target();
        let mut observed = Vec::new();
        for (name, value) in initial {
            let index = schema.index_of(name).ok_or_else(|| SessionError::Invalid {
                field: name.clone(),
                reason: "unknown feature".into(),
            })?;
            if index == target {
                return Err(SessionError::Invalid {
                    field: name.clone(),
                    reason: "the target cannot be observed".into(),
                });
            }
            let normalized = parse_value(&schema.columns[index], value)?;
            observed.push(Observation {
                feature: name.clone(),
                index,
                value: value.clone(),
                normalized,
            });
        }
        observed.sort_by_key(|o| o.index);
        let candidates = saia::candidates(model)
            .into_iter()
            .filter(|c| !observed.iter().any(|o| o.index == *c))
            .collect();
        let mut session = AcquisitionSession {
            id,
            model_id,
            target,
            observed,
            candidates,
            initial_prediction: PredictiveSummary {
                mean: 0.0,
                std: 0.0,
                interval: None,
                class_probabilities: None,
                label: None,
                normalized_variance: 0.0,
                samples: 0,
            },
            history: Vec::new(),
            seed,
            saia,
        };
        session.initial_prediction = session.predict(model)?;
        Ok(session)
    }

    pub fn step(&self) -> usize {
        self.history.len()
    }

    pub fn status(&self) -> Status {
        if self.candidates.is_empty() {
            Status::Complete
        } else {
            Status::Active
        }
    }

    /// Normalized row and mask of the observed set.
    pub fn row(&self, width: usize) -> (Vec<f64>, Vec<bool>) {
        let mut x = vec![0.0; width];
        let mut mask = vec![false; width];
        for o in &self.observed {
            x[o.index] = o.normalized;
            mask[o.index] = true;
        }
        (x, mask)
    }

    pub fn current_prediction(&self) -> &PredictiveSummary {
        self.history.last().map(|h| &h.prediction).unwrap_or(&self.initial_prediction)
    }

    fn predict(&self, model: &AnyModel) -> Result<PredictiveSummary> {
        let schema = model.schema();
        let (x, mask) = self.row(schema.width());
        let mut r = rng::seeded(prediction_seed(self.seed, self.step()));
        let p = predict_target(model, &x, &mask, self.saia.mc_samples, &mut r)?;
        Ok(PredictiveSummary::new(&schema.columns[self.target], &p))
    }

    /// Instance-wise reward ranking for the current observed set.
    pub fn recommend(&self, model: &AnyModel) -> Result<Recommendation> {
        let schema = model.schema();
        let mut ranking = Vec::with_capacity(self.candidates.len());
        if !self.candidates.is_empty() {
            let (x, mask) = self.row(schema.width());
            let seed = reward_seed(self.seed, self.step());
            let rewards = saia::estimate_rewards(model, &x, &mask, &self.candidates, &self.saia, seed)?;
            ranking = rewards
                .into_iter()
                .map(|e| RankedCandidate {
                    feature: schema.columns[e.candidate].name.clone(),
                    index: e.candidate,
                    reward: e.reward,
                })
                .collect();
            ranking.sort_by(|a, b| b.reward.total_cmp(&a.reward).then(a.index.cmp(&b.index)));
        }
        Ok(Recommendation {
            step: self.step(),
            status: self.status(),
            ranking,
            prediction: self.current_prediction().clone(),
        })
    }

    /// Moves `feature` from the candidates to the observed set and records
    /// the step. `offered` is the ranking shown for this step, if any.
    pub fn observe(
        &mut self,
        model: &AnyModel,
        feature: &str,
        value: &Value,
        offered: Option<Recommendation>,
    ) -> std::result::Result<&HistoryEntry, SessionError> {
        let schema = model.schema();
        let index = resolve_feature(schema, feature)?;
        if !self.candidates.contains(&index) {
            return Err(SessionError::NotCandidate(feature.to_string()));
        }
        let normalized = parse_value(&schema.columns[index], value)?;
        let offered = match offered {
            Some(r) if r.step == self.step() => r,
            _ => self.recommend(model)?,
        };
        self.candidates.retain(|&c| c != index);
        self.observed.push(Observation {
            feature: feature.to_string(),
            index,
            value: value.clone(),
            normalized,
        });
        self.observed.sort_by_key(|o| o.index);
        let step = self.step() + 1;
        let (x, mask) = self.row(schema.width());
        let p = predict_target(model, &x, &mask, self.saia.mc_samples, &mut rng::seeded(prediction_seed(self.seed, step)))?;
        self.history.push(HistoryEntry {
            step,
            recommended: offered.ranking.first().map(|c| c.feature.clone()),
            ranking: offered.ranking,
            feature: feature.to_string(),
            value: value.clone(),
            prediction: PredictiveSummary::new(&schema.columns[self.target], &p),
        });
        Ok(self.history.last().expect("just pushed"))
    }

    pub fn curve(&self) -> Vec<CurvePoint> {
        let mut steps = vec![CurvePoint {
            step: 0,
            feature: None,
            prediction: self.initial_prediction.clone(),
        }];
        steps.extend(self.history.iter().map(|h| CurvePoint {
            step: h.step,
            feature: Some(h.feature.clone()),
            prediction: h.prediction.clone(),
        }));
        steps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Feature observed to reach this step.
    pub feature: Option<String>,
    pub prediction: PredictiveSummary,
}
