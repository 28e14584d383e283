use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One keyword's annotation round: raters pick `selections_per_rater`
/// wheels from the candidate pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub id: String,
    pub keyword: String,
    pub candidate_wheel_ids: Vec<String>,
    pub selections_per_rater: usize,
}

impl AnnotationTask {
    pub const DEFAULT_CANDIDATES: usize = 25;
    pub const DEFAULT_SELECTIONS: usize = 10;

    pub fn new(id: &str, keyword: &str, candidates: Vec<String>, selections_per_rater: usize) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Param("annotation task needs candidates".into()));
        }
        let unique: BTreeSet<&String> = candidates.iter().collect();
        if unique.len() != candidates.len() {
            return Err(Error::Param("duplicate candidate ids".into()));
        }
        if selections_per_rater == 0 || selections_per_rater > candidates.len() {
            return Err(Error::Param(format!(
                "selections_per_rater {selections_per_rater} must be in 1..={}",
                candidates.len()
            )));
        }
        Ok(Self {
            id: id.to_string(),
            keyword: keyword.trim().to_lowercase(),
            candidate_wheel_ids: candidates,
            selections_per_rater,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VoteMatrix {
    pub keyword: String,
    pub counts: BTreeMap<String, u32>,
    pub rater_count: u32,
    #[serde(default)]
    pub raters: BTreeSet<String>,
}

impl VoteMatrix {
    /// Zero counts for every candidate.
    pub fn for_task(task: &AnnotationTask) -> Self {
        Self {
            keyword: task.keyword.clone(),
            counts: task.candidate_wheel_ids.iter().map(|id| (id.clone(), 0)).collect(),
            rater_count: 0,
            raters: BTreeSet::new(),
        }
    }

    pub fn from_counts(keyword: &str, counts: BTreeMap<String, u32>, rater_count: u32) -> Result<Self> {
        if let Some((id, c)) = counts.iter().find(|(_, c)| **c > rater_count) {
            return Err(Error::Param(format!("{id} has {c} votes but only {rater_count} raters")));
        }
        Ok(Self {
            keyword: keyword.to_string(),
            counts,
            rater_count,
            raters: BTreeSet::new(),
        })
    }

    pub fn votes(&self, id: &str) -> u32 {
        self.counts.get(id).copied().unwrap_or(0)
    }
}

/// Adds one rater's selection. Rejects repeat raters, wrong selection
/// counts, repeated ids and ids outside the task; on rejection the matrix
/// is unchanged.
pub fn record_vote(task: &AnnotationTask, votes: &mut VoteMatrix, rater_id: &str, selected: &[String]) -> Result<()> {
    if votes.raters.contains(rater_id) {
        return Err(Error::VoteRejected(format!("rater `{rater_id}` already voted on `{}`", task.id)));
    }
    if selected.len() != task.selections_per_rater {
        return Err(Error::VoteRejected(format!(
            "expected {} selections, got {}",
            task.selections_per_rater,
            selected.len()
        )));
    }
    let distinct: BTreeSet<&String> = selected.iter().collect();
    if distinct.len() != selected.len() {
        return Err(Error::VoteRejected("selection repeats a wheel".into()));
    }
    if let Some(bad) = selected.iter().find(|s| !task.candidate_wheel_ids.contains(s)) {
        return Err(Error::VoteRejected(format!("`{bad}` is not a candidate")));
    }
    for id in selected {
        *votes.counts.entry(id.clone()).or_insert(0) += 1;
    }
    votes.rater_count += 1;
    votes.raters.insert(rater_id.to_string());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub keyword: String,
    /// Members by votes descending, then id.
    pub wheel_ids: Vec<String>,
    pub threshold_votes: u32,
    pub percentile: f64,
}

/// `ceil(percentile · n)` clamped to `1..=n`, forgiving float noise such
/// as `0.07 · 100 = 7.000000000000001`.
pub fn percentile_target(percentile: f64, n: usize) -> usize {
    let raw = percentile * n as f64;
    ((raw - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Top `percentile` most-voted wheels among those with at least
/// `min_votes` votes. Every wheel tied with the cut-off wheel is included,
/// so the set can be larger than the target.
pub fn aggregate_top_percent(votes: &VoteMatrix, percentile: f64, min_votes: u32) -> Result<ExemplarSet> {
    if !(percentile > 0.0 && percentile <= 1.0) {
        return Err(Error::Param(format!("percentile {percentile} outside (0, 1]")));
    }
    let mut pool: Vec<(&String, u32)> = votes
        .counts
        .iter()
        .map(|(id, &c)| (id, c))
        .filter(|(_, c)| *c >= min_votes)
        .collect();
    if pool.is_empty() {
        return Err(Error::EmptySet(format!(
            "no wheel for `{}` has at least {min_votes} vote(s)",
            votes.keyword
        )));
    }
    pool.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let target = percentile_target(percentile, pool.len());
    let threshold = pool[target - 1].1;
    Ok(ExemplarSet {
        keyword: votes.keyword.clone(),
        wheel_ids: pool.iter().take_while(|(_, c)| *c >= threshold).map(|(id, _)| id.to_string()).collect(),
        threshold_votes: threshold,
        percentile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i:02}")).collect()
    }

    #[test]
    fn first_rater_sets_ten_counts() {
        let task = AnnotationTask::new("t", "dynamic", ids(25), 10).unwrap();
        let mut m = VoteMatrix::for_task(&task);
        let pick: Vec<String> = ids(25).into_iter().step_by(2).take(10).collect();
        record_vote(&task, &mut m, "r1", &pick).unwrap();
        assert_eq!(m.rater_count, 1);
        assert_eq!(m.counts.values().filter(|&&c| c == 1).count(), 10);
        assert!(pick.iter().all(|p| m.votes(p) == 1));
    }

    #[test]
    fn rejects_repeat_rater_and_wrong_counts() {
        let task = AnnotationTask::new("t", "dynamic", ids(25), 10).unwrap();
        let mut m = VoteMatrix::for_task(&task);
        let pick: Vec<String> = ids(10);
        record_vote(&task, &mut m, "r1", &pick).unwrap();
        let before = m.clone();
        assert!(matches!(record_vote(&task, &mut m, "r1", &pick), Err(Error::VoteRejected(_))));
        assert!(matches!(record_vote(&task, &mut m, "r2", &ids(9)), Err(Error::VoteRejected(_))));
        let mut dup = ids(9);
        dup.push("w00".into());
        assert!(record_vote(&task, &mut m, "r2", &dup).is_err());
        let mut foreign = ids(9);
        foreign.push("zzz".into());
        assert!(record_vote(&task, &mut m, "r2", &foreign).is_err());
        assert_eq!(m, before);
    }

    #[test]
    fn task_limits() {
        assert!(AnnotationTask::new("t", "k", ids(5), 6).is_err());
        assert!(AnnotationTask::new("t", "k", vec![], 1).is_err());
        assert!(AnnotationTask::new("t", "k", vec!["a".into(), "a".into()], 1).is_err());
    }

    #[test]
    fn distinct_counts_give_exactly_five_of_hundred() {
        let counts = (0..100).map(|i| (format!("w{i:03}"), i as u32 + 1)).collect();
        let m = VoteMatrix::from_counts("k", counts, 200).unwrap();
        let set = aggregate_top_percent(&m, 0.05, 1).unwrap();
        assert_eq!(set.wheel_ids, vec!["w099", "w098", "w097", "w096", "w095"]);
        assert_eq!(set.threshold_votes, 96);
    }

    #[test]
    fn ties_expand_membership() {
        let mut counts: BTreeMap<String, u32> = (0..40).map(|i| (format!("w{i:02}"), 1)).collect();
        counts.insert("w00".into(), 9);
        counts.insert("w01".into(), 5);
        counts.insert("w02".into(), 5);
        counts.insert("w03".into(), 5);
        let m = VoteMatrix::from_counts("k", counts, 10).unwrap();
        // n = 40, target = 2, second-highest count is 5 and is shared by three wheels
        let set = aggregate_top_percent(&m, 0.05, 1).unwrap();
        assert_eq!(set.wheel_ids.len(), 4);
        assert_eq!(set.threshold_votes, 5);
    }

    #[test]
    fn unvoted_wheels_are_outside_the_pool() {
        let mut counts: BTreeMap<String, u32> = (0..1000).map(|i| (format!("w{i:04}"), 0)).collect();
        for i in 0..20 {
            counts.insert(format!("w{i:04}"), 20 - i as u32);
        }
        let m = VoteMatrix::from_counts("k", counts, 30).unwrap();
        assert_eq!(aggregate_top_percent(&m, 0.05, 1).unwrap().wheel_ids.len(), 1);
        // counting unvoted wheels: target 50 lands on a zero count, so the tie takes everyone
        assert_eq!(aggregate_top_percent(&m, 0.05, 0).unwrap().wheel_ids.len(), 1000);
    }

    #[test]
    fn empty_matrix_errors() {
        let m = VoteMatrix::default();
        assert!(matches!(aggregate_top_percent(&m, 0.05, 1), Err(Error::EmptySet(_))));
        let m = VoteMatrix::from_counts("k", [("a".to_string(), 0)].into(), 1).unwrap();
        assert!(matches!(aggregate_top_percent(&m, 0.05, 1), Err(Error::EmptySet(_))));
        assert!(aggregate_top_percent(&m, 0.0, 0).is_err());
    }

    #[test]
    fn target_tolerates_float_noise() {
        assert_eq!(percentile_target(0.07, 100), 7);
        assert_eq!(percentile_target(0.05, 60), 3);
        assert_eq!(percentile_target(0.05, 61), 4);
        assert_eq!(percentile_target(0.05, 1), 1);
    }
}
