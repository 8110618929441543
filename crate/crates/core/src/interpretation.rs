//! Cohort sets, prototype descriptors and per-visit trajectories.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PatientRecord};
use crate::error::{PpnError, Result};
use crate::model::{PpnModel, Prediction};

/// Summary of a group of patients. Empty cohorts carry no means or rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub size: usize,
    pub positive_rate: Option<f64>,
    /// Mean of each static feature, in dataset column order.
    pub static_means: Option<Vec<f64>>,
}

impl CohortStats {
    pub fn of(members: &[&PatientRecord]) -> Self {
        if members.is_empty() {
            return Self { size: 0, positive_rate: None, static_means: None };
        }
        let n = members.len() as f64;
        let m = members[0].statics.len();
        let mut means = vec![0.0; m];
        for r in members {
            for (acc, v) in means.iter_mut().zip(&r.statics) {
                *acc += v;
            }
        }
        means.iter_mut().for_each(|v| *v /= n);
        Self {
            size: members.len(),
            positive_rate: Some(members.iter().filter(|r| r.label == 1).count() as f64 / n),
            static_means: Some(means),
        }
    }
}

/// Patients whose most similar prototype is `index`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSet {
    pub index: usize,
    pub member_ids: Vec<String>,
    pub stats: CohortStats,
}

/// Cohort of each prediction: the most similar prototype, lowest index on
/// exact ties.
pub fn cohort_indices(predictions: &[Prediction]) -> Vec<usize> {
    predictions.iter().map(|p| p.nearest_prototype).collect()
}

/// Splits `patients` into K cohort sets. Statistics use the records as
/// given, so pass the raw dataset for readable static means.
pub fn build_cohorts(model: &PpnModel, patients: &Dataset) -> Result<Vec<CohortSet>> {
    let preds = model.score_dataset(patients)?;
    let mut members: Vec<Vec<&PatientRecord>> = vec![Vec::new(); model.k()];
    for (rec, j) in patients.records.iter().zip(cohort_indices(&preds)) {
        members[j].push(rec);
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(index, m)| CohortSet {
            index,
            member_ids: m.iter().map(|r| r.id.clone()).collect(),
            stats: CohortStats::of(&m),
        })
        .collect())
}

/// What a prototype stands for: its source patient and its cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeCard {
    pub index: usize,
    pub source_id: String,
    pub source_statics: Vec<f64>,
    pub source_label: u8,
    /// Planted subtype of the source patient, when the data carries one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_subtype: Option<usize>,
    /// `y_j`, the model's risk for the prototype itself.
    pub risk: f64,
    /// Absent when no patient population was scored.
    pub cohort: Option<CohortStats>,
}

/// Cards for every prototype, with cohorts computed over `source_set`.
pub fn prototype_cards(model: &PpnModel, source_set: &Dataset) -> Result<Vec<PrototypeCard>> {
    let cohorts = build_cohorts(model, source_set)?;
    prototype_cards_with(model, &source_set.records, Some(&cohorts))
}

/// Cards whose provenance is looked up in `sources` and whose cohort
/// statistics, if any, come from `cohorts`.
pub fn prototype_cards_with(
    model: &PpnModel,
    sources: &[PatientRecord],
    cohorts: Option<&[CohortSet]>,
) -> Result<Vec<PrototypeCard>> {
    if let Some(c) = cohorts {
        if c.len() != model.k() {
            return Err(PpnError::Contract(format!("{} cohorts for K = {}", c.len(), model.k())));
        }
    }
    if model.memory.source_ids.len() != model.k() {
        return Err(PpnError::Integrity("prototype memory has no provenance".into()));
    }
    let risks = model.prototype_risks()?;
    let by_id: HashMap<&str, &PatientRecord> = sources.iter().map(|r| (r.id.as_str(), r)).collect();
    model
        .memory
        .source_ids
        .iter()
        .enumerate()
        .map(|(j, id)| {
            let src = by_id
                .get(id.as_str())
                .ok_or_else(|| PpnError::Integrity(format!("prototype {j} source patient `{id}` is not in the dataset")))?;
            Ok(PrototypeCard {
                index: j,
                source_id: id.clone(),
                source_statics: src.statics.clone(),
                source_label: src.label,
                source_subtype: src.subtype,
                risk: risks[j],
                cohort: cohorts.map(|c| c[j].stats.clone()),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    /// Number of visits in the prefix, from 1.
    pub t: usize,
    pub similarity: Vec<f64>,
    pub nearest_prototype: usize,
    pub risk: f64,
}

/// Scores every visit prefix of a raw record. The last entry equals
/// `model.predict(raw)` exactly.
pub fn trajectory(model: &PpnModel, raw: &PatientRecord) -> Result<Vec<TrajectoryEntry>> {
    let prefixes = (1..=raw.n_visits())
        .map(|t| model.normalize(&raw.prefix(t)?))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PatientRecord> = prefixes.iter().collect();
    Ok(model
        .score(&refs)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| TrajectoryEntry {
            t: i + 1,
            similarity: p.similarity,
            nearest_prototype: p.nearest_prototype,
            risk: p.risk,
        })
        .collect())
}

/// One row per prototype: index, source patient, source statics, prototype
/// risk, then the cohort's static means, outcome rate and size.
pub fn write_cohort_csv(path: &Path, static_names: &[String], cards: &[PrototypeCard]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["index".to_string(), "source_id".into(), "source_label".into()];
    header.extend(static_names.iter().map(|n| format!("source_{n}")));
    header.push("prototype_risk".into());
    header.extend(static_names.iter().map(|n| format!("mean_{n}")));
    header.extend(["outcome_rate".to_string(), "size".into()]);
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in cards {
        let mut row = vec![c.index.to_string(), c.source_id.clone(), c.source_label.to_string()];
        row.extend(c.source_statics.iter().map(f64::to_string));
        row.push(c.risk.to_string());
        let stats = c.cohort.as_ref();
        match stats.and_then(|s| s.static_means.as_ref()) {
            Some(m) => row.extend(m.iter().map(f64::to_string)),
            None => row.extend(static_names.iter().map(|_| String::new())),
        }
        row.push(opt(stats.and_then(|s| s.positive_rate)));
        row.push(stats.map_or(0, |s| s.size).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Patient-to-cohort table: `patient_id, cohort, risk, label`.
pub fn write_membership_csv(path: &Path, patients: &Dataset, predictions: &[Prediction]) -> Result<()> {
    if patients.len() != predictions.len() {
        return Err(PpnError::Contract("one prediction per patient is required".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient_id", "cohort", "risk", "label"])?;
    for (r, p) in patients.records.iter().zip(predictions) {
        w.write_record([r.id.clone(), p.nearest_prototype.to_string(), p.risk.to_string(), r.label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
