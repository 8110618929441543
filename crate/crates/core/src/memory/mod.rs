//! Prototype memory: K prototypes tied to real training patients, selected
//! by clustering and kept faithful by per-epoch assign steps.

mod assignment;
mod kmeans;

use std::cmp::Ordering;

use ppn_autodiff::{Array, ParameterSet};
use serde::{Deserialize, Serialize};

use crate::error::{PpnError, Result};

pub use assignment::{match_prototypes, AssignmentResult};
pub use kmeans::{closest, kmeans_plus_plus, minibatch_kmeans, squared_distance, KMeansConfig};

/// Parameter path of the `K x (N+1)H` prototype matrix (one flattened
/// prototype per row).
pub const PROTOTYPES: &str = "memory.prototypes";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshKind {
    Init,
    Select,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefreshEvent {
    pub epoch: usize,
    pub kind: RefreshKind,
    pub source_ids: Vec<String>,
    /// Matching of old slots to new candidates (selects only).
    pub assignment: Option<AssignmentResult>,
}

/// Bookkeeping for the prototypes. The prototype values themselves live in
/// the model's parameter set under [`PROTOTYPES`] so they can be trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeMemory {
    pub k: usize,
    pub dim: usize,
    /// Training patient each prototype was last projected onto.
    pub source_ids: Vec<String>,
    pub frozen: bool,
    pub last_refresh_epoch: Option<usize>,
    pub history: Vec<RefreshEvent>,
}

/// Candidates picked for a set of targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// Set when fewer distinct patients than targets were available and a
    /// patient had to be reused.
    pub duplicates: bool,
}

fn by_distance_then_id<'a>(dist: &'a [f64], ids: &'a [String]) -> impl Fn(&usize, &usize) -> Ordering + 'a {
    move |&a, &b| dist[a].partial_cmp(&dist[b]).unwrap_or(Ordering::Equal).then_with(|| ids[a].cmp(&ids[b]))
}

/// The patient closest to `centroid` in Euclidean distance; ties go to the
/// lexicographically smallest id.
pub fn nearest_patient<'a>(centroid: &[f64], embeddings: &'a [Vec<f64>], ids: &'a [String]) -> Result<(&'a str, &'a [f64])> {
    if embeddings.is_empty() || embeddings.len() != ids.len() {
        return Err(PpnError::Contract("nearest_patient needs one id per embedding and at least one embedding".into()));
    }
    let dist: Vec<f64> = embeddings.iter().map(|e| squared_distance(centroid, e)).collect();
    let cmp = by_distance_then_id(&dist, ids);
    let best = (0..embeddings.len()).min_by(|a, b| cmp(a, b)).expect("nonempty");
    Ok((&ids[best], &embeddings[best]))
}

/// Nearest patient per target without reusing a patient. When two targets
/// want the same patient the closer one keeps it (lower index on equal
/// distance) and the other moves on to its next-nearest unclaimed patient.
pub fn select_distinct(targets: &[Vec<f64>], embeddings: &[Vec<f64>], ids: &[String]) -> Result<Selection> {
    if embeddings.is_empty() || embeddings.len() != ids.len() {
        return Err(PpnError::Contract("selection needs one id per embedding and at least one embedding".into()));
    }
    let n = embeddings.len();
    let dist: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| embeddings.iter().map(|e| squared_distance(t, e)).collect())
        .collect();
    let ranked: Vec<Vec<usize>> = dist
        .iter()
        .map(|d| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(by_distance_then_id(d, ids));
            order
        })
        .collect();

    let mut claimed = vec![false; n];
    let mut next = vec![0usize; targets.len()];
    let mut chosen: Vec<Option<usize>> = vec![None; targets.len()];
    let mut duplicates = false;
    let mut open: Vec<usize> = (0..targets.len()).collect();
    while !open.is_empty() {
        let mut proposals: Vec<(usize, usize)> = Vec::new();
        for &j in &open {
            while next[j] < n && claimed[ranked[j][next[j]]] {
                next[j] += 1;
            }
            if next[j] == n {
                chosen[j] = Some(ranked[j][0]);
                duplicates = true;
            } else {
                proposals.push((j, ranked[j][next[j]]));
            }
        }
        let mut still_open = Vec::new();
        for &(j, i) in &proposals {
            let winner = proposals
                .iter()
                .filter(|(_, p)| *p == i)
                .min_by(|a, b| dist[a.0][i].partial_cmp(&dist[b.0][i]).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)))
                .expect("own proposal")
                .0;
            if winner == j {
                chosen[j] = Some(i);
            } else {
                still_open.push(j);
            }
        }
        for &j in &open {
            if let Some(i) = chosen[j] {
                claimed[i] = true;
            }
        }
        open = still_open;
    }
    Ok(Selection {
        indices: chosen.into_iter().map(|c| c.expect("all resolved")).collect(),
        duplicates,
    })
}

impl PrototypeMemory {
    pub fn new(k: usize, dim: usize) -> Result<Self> {
        if k < 2 {
            return Err(PpnError::Config(format!("K = {k}; at least two prototypes are required")));
        }
        Ok(Self {
            k,
            dim,
            source_ids: Vec::new(),
            frozen: false,
            last_refresh_epoch: None,
            history: Vec::new(),
        })
    }

    /// Prototype `j`'s flattened values from `params`.
    pub fn prototype(params: &ParameterSet, j: usize) -> Result<Vec<f64>> {
        Ok(params.value(PROTOTYPES)?.row(j).to_vec())
    }

    pub fn prototypes(params: &ParameterSet) -> Result<Vec<Vec<f64>>> {
        let p = params.value(PROTOTYPES)?;
        Ok((0..p.rows()).map(|j| p.row(j).to_vec()).collect())
    }

    fn check(&self, embeddings: &[Vec<f64>], ids: &[String]) -> Result<()> {
        if embeddings.len() != ids.len() {
            return Err(PpnError::Contract("one id per embedding required".into()));
        }
        if embeddings.iter().any(|e| e.len() != self.dim) {
            return Err(PpnError::Contract(format!("embeddings must have dimension {}", self.dim)));
        }
        Ok(())
    }

    fn write(&mut self, params: &mut ParameterSet, picks: &[usize], embeddings: &[Vec<f64>], ids: &[String]) -> Result<()> {
        let data = picks.iter().flat_map(|&i| embeddings[i].iter().copied()).collect();
        params.set_value(PROTOTYPES, Array::new(self.k, self.dim, data)?)?;
        self.source_ids = picks.iter().map(|&i| ids[i].clone()).collect();
        Ok(())
    }

    fn diversity_warning(&self, what: &str, sel: &Selection) -> Vec<String> {
        if sel.duplicates {
            let msg = format!("{what}: fewer distinct training patients than K = {}; prototypes share patients", self.k);
            log::warn!("{msg}");
            vec![msg]
        } else {
            Vec::new()
        }
    }

    /// Initial prototypes: k-means++ seeding and mini-batch k-means on the
    /// epoch-0 embeddings, then the patient nearest each centroid.
    pub fn initialize(
        &mut self,
        params: &mut ParameterSet,
        embeddings: &[Vec<f64>],
        ids: &[String],
        kmeans: &KMeansConfig,
        seed: u64,
    ) -> Result<Vec<String>> {
        self.check(embeddings, ids)?;
        let init = kmeans_plus_plus(embeddings, self.k, seed)?;
        let centroids = minibatch_kmeans(embeddings, init, kmeans, seed.wrapping_add(1))?;
        let sel = select_distinct(&centroids, embeddings, ids)?;
        self.write(params, &sel.indices, embeddings, ids)?;
        self.last_refresh_epoch = Some(0);
        self.history.push(RefreshEvent {
            epoch: 0,
            kind: RefreshKind::Init,
            source_ids: self.source_ids.clone(),
            assignment: None,
        });
        Ok(self.diversity_warning("initialization", &sel))
    }

    /// Re-clusters the training embeddings starting from the current
    /// prototypes, picks the patient nearest each centroid, and matches old
    /// slots to the candidates by minimum total distance.
    pub fn progressive_select(
        &mut self,
        params: &mut ParameterSet,
        embeddings: &[Vec<f64>],
        ids: &[String],
        epoch: usize,
        kmeans: &KMeansConfig,
        seed: u64,
    ) -> Result<(AssignmentResult, Vec<String>)> {
        self.check(embeddings, ids)?;
        let old = Self::prototypes(params)?;
        let centroids = minibatch_kmeans(embeddings, old.clone(), kmeans, seed)?;
        let sel = select_distinct(&centroids, embeddings, ids)?;
        let cost: Vec<Vec<f64>> = old
            .iter()
            .map(|p| sel.indices.iter().map(|&i| squared_distance(p, &embeddings[i]).sqrt()).collect())
            .collect();
        let assignment = match_prototypes(&cost)?;
        let picks: Vec<usize> = assignment.permutation.iter().map(|&c| sel.indices[c]).collect();
        self.write(params, &picks, embeddings, ids)?;
        self.last_refresh_epoch = Some(epoch);
        self.history.push(RefreshEvent {
            epoch,
            kind: RefreshKind::Select,
            source_ids: self.source_ids.clone(),
            assignment: Some(assignment.clone()),
        });
        Ok((assignment, self.diversity_warning("progressive selection", &sel)))
    }

    /// Projects each (gradient-shifted) prototype onto its nearest training
    /// embedding, keeping the prototypes on distinct patients.
    pub fn assign_step(&mut self, params: &mut ParameterSet, embeddings: &[Vec<f64>], ids: &[String]) -> Result<Vec<String>> {
        self.check(embeddings, ids)?;
        let current = Self::prototypes(params)?;
        let sel = select_distinct(&current, embeddings, ids)?;
        self.write(params, &sel.indices, embeddings, ids)?;
        Ok(self.diversity_warning("assign step", &sel))
    }

    /// Checks that every prototype is bit-equal to the embedding of its
    /// recorded source patient.
    pub fn verify_fidelity(&self, params: &ParameterSet, embeddings: &[Vec<f64>], ids: &[String]) -> Result<()> {
        let protos = Self::prototypes(params)?;
        if self.source_ids.len() != self.k {
            return Err(PpnError::Integrity("prototypes have no recorded source patients".into()));
        }
        for (j, (p, id)) in protos.iter().zip(&self.source_ids).enumerate() {
            let i = ids
                .iter()
                .position(|x| x == id)
                .ok_or_else(|| PpnError::Integrity(format!("prototype {j}: source patient {id} not in the training set")))?;
            let same = p.len() == embeddings[i].len() && p.iter().zip(&embeddings[i]).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(PpnError::Integrity(format!("prototype {j} differs from the embedding of its source patient {id}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:03}")).collect()
    }

    fn memory_with(points: &[Vec<f64>], picks: &[usize]) -> (PrototypeMemory, ParameterSet) {
        let dim = points[0].len();
        let mut mem = PrototypeMemory::new(picks.len(), dim).unwrap();
        let mut ps = ParameterSet::new();
        ps.insert(PROTOTYPES, Array::zeros(picks.len(), dim)).unwrap();
        mem.write(&mut ps, picks, points, &ids(points.len())).unwrap();
        (mem, ps)
    }

    #[test]
    fn nearest_patient_exact_and_ties() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 5.0]];
        let names: Vec<String> = vec!["b".into(), "a".into(), "c".into()];
        assert_eq!(nearest_patient(&[1.0, 5.0], &pts, &names).unwrap().0, "c");
        // (1, 0) is equidistant from b and a
        assert_eq!(nearest_patient(&[1.0, 0.0], &pts, &names).unwrap().0, "a");
        assert!(nearest_patient(&[0.0], &[], &[]).is_err());
    }

    #[test]
    fn farther_target_takes_next_patient() {
        let pts = vec![vec![0.0], vec![10.0], vec![3.0]];
        let sel = select_distinct(&[vec![1.0], vec![0.5]], &pts, &ids(3)).unwrap();
        // both want p000; target 1 is closer, target 0 moves to p002
        assert_eq!(sel.indices, vec![2, 0]);
        assert!(!sel.duplicates);
    }

    #[test]
    fn assign_snaps_back_and_is_idempotent() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 2.0, 1.0]).collect();
        let (mut mem, mut ps) = memory_with(&pts, &[1, 4]);
        mem.assign_step(&mut ps, &pts, &ids(6)).unwrap();
        assert_eq!(mem.source_ids, vec!["p001", "p004"]);
        // perturb by less than half the minimum gap (2.0)
        let mut shifted = ps.value(PROTOTYPES).unwrap().clone();
        shifted.set(0, 0, 2.0 + 0.9).unwrap();
        shifted.set(1, 1, 1.0 - 0.7).unwrap();
        ps.set_value(PROTOTYPES, shifted).unwrap();
        mem.assign_step(&mut ps, &pts, &ids(6)).unwrap();
        assert_eq!(mem.source_ids, vec!["p001", "p004"]);
        mem.verify_fidelity(&ps, &pts, &ids(6)).unwrap();
    }

    #[test]
    fn single_patient_collapses_with_warning() {
        let pts = vec![vec![1.0, 2.0]];
        let mut mem = PrototypeMemory::new(3, 2).unwrap();
        let mut ps = ParameterSet::new();
        ps.insert(PROTOTYPES, Array::zeros(3, 2)).unwrap();
        let warnings = mem.assign_step(&mut ps, &pts, &ids(1)).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(mem.source_ids, vec!["p000"; 3]);
    }

    #[test]
    fn select_at_fixed_point_is_unchanged() {
        // two tight identical groups; prototypes already on the central members
        let mut pts = vec![vec![0.0, 0.0]; 5];
        pts.extend(vec![vec![8.0, 8.0]; 5]);
        let (mut mem, mut ps) = memory_with(&pts, &[0, 5]);
        let before = ps.value(PROTOTYPES).unwrap().clone();
        let (a, w) = mem
            .progressive_select(&mut ps, &pts, &ids(10), 10, &KMeansConfig::default(), 1)
            .unwrap();
        assert_eq!(a.permutation, vec![0, 1]);
        assert!(w.is_empty());
        assert_eq!(ps.value(PROTOTYPES).unwrap(), &before);
        assert_eq!(mem.source_ids, vec!["p000", "p005"]);
        assert_eq!(mem.last_refresh_epoch, Some(10));
    }

    #[test]
    fn fidelity_check_catches_drift() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        let (mem, mut ps) = memory_with(&pts, &[0, 2]);
        mem.verify_fidelity(&ps, &pts, &ids(3)).unwrap();
        ps.set_value(PROTOTYPES, Array::new(2, 1, vec![0.0, 2.0 + 1e-15]).unwrap()).unwrap();
        assert!(matches!(mem.verify_fidelity(&ps, &pts, &ids(3)), Err(PpnError::Integrity(_))));
        assert!(PrototypeMemory::new(1, 3).is_err());
    }
}
