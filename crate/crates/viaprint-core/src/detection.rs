// SPDX-License-Identifier: Apache-2.0

//! Instance classification against per-type representatives.
//!
//! An instance is a suspected substitution when the representative of another
//! same-width type fits it better than the representative of the type the
//! design claims. Exact score ties cannot be resolved from vias alone and are
//! handled by an explicit policy.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    align_refined_within, match_vias, score_from_counts, similarity_score, Translation, ViaSet, MATCHING_RADIUS,
};
use crate::ingest::CellInstance;
use crate::math;
use crate::representative::Representative;
use crate::stats::{wilson_interval, Z95};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Ties are reported as suspicious (more false positives).
    FlagAsPositive,
    /// Ties are trusted as the claimed type (more false negatives).
    TreatAsBenign,
}

pub const DEFAULT_MAX_SHIFT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    /// How much better another type must fit before the claimed type is
    /// rejected.
    pub delta: f64,
    pub tie_policy: TiePolicy,
    pub tie_epsilon: f64,
    pub matching_radius: f64,
    /// Longest shift tried when aligning an instance to a representative, in
    /// units. Instances are cut out at their placement box, so their content
    /// is only off by the box error. Unbounded when absent.
    pub max_shift: Option<f64>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            delta: 0.0,
            tie_policy: TiePolicy::FlagAsPositive,
            tie_epsilon: 1e-9,
            matching_radius: MATCHING_RADIUS,
            max_shift: Some(DEFAULT_MAX_SHIFT),
        }
    }
}

/// Keeps the vias inside `rep`'s box (boundary inclusive). The vias must
/// already be in the representative's frame.
pub fn clip_to_box(vias: &ViaSet, rep: &Representative) -> ViaSet {
    vias.filtered(|p| rep.box_contains(*p))
}

/// Aligns the instance to `rep`, drops everything outside the box and scores
/// what is left against the representative.
///
/// With `max_shift` set, the clipped vias are scored at the shift found, not
/// re-aligned.
pub fn score_instance(rep: &Representative, vias: &ViaSet, cfg: &DetectionConfig) -> f64 {
    let r = cfg.matching_radius;
    let limit = cfg.max_shift.unwrap_or(f64::INFINITY);
    let t = align_refined_within(vias, &rep.vias, r, limit).translation;
    let clipped = clip_to_box(&vias.translated(t), rep);
    match cfg.max_shift {
        None => similarity_score(&clipped, &rep.vias, r),
        Some(_) => {
            if clipped.is_empty() && rep.vias.is_empty() {
                return 0.0;
            }
            let m = match_vias(&clipped, &rep.vias, Translation::ZERO, r).match_count;
            score_from_counts(m, clipped.len(), rep.vias.len())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictKind {
    Benign,
    Trojan,
    Ambiguous,
}

impl VerdictKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictKind::Benign => "Benign",
            VerdictKind::Trojan => "Trojan",
            VerdictKind::Ambiguous => "Ambiguous",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub instance_id: String,
    pub claimed: String,
    pub kind: VerdictKind,
    /// Trojan: the best-fitting other types. Ambiguous: the claimed type and
    /// every type tied with it. Benign: the claimed type.
    pub best: Vec<String>,
    pub score_claimed: f64,
    /// Lowest score over all candidates.
    pub score_best: f64,
    pub scores: BTreeMap<String, f64>,
    /// Whether the verdict counts as a detection under the tie policy.
    pub flagged: bool,
}

/// Representatives with the same cell width as `claimed`, `claimed` included.
pub fn same_width_candidates<'a>(claimed: &Representative, reps: &'a [Representative]) -> Vec<&'a Representative> {
    reps.iter().filter(|r| r.cell_width == claimed.cell_width).collect()
}

fn decide(
    instance_id: &str,
    claimed: &str,
    scores: BTreeMap<String, f64>,
    cfg: &DetectionConfig,
) -> Result<Verdict> {
    let score_claimed = *scores
        .get(claimed)
        .ok_or_else(|| Error::MissingRepresentative(claimed.into()))?;
    let score_best = scores.values().copied().fold(f64::INFINITY, f64::min);
    let other_best = scores
        .iter()
        .filter(|(id, _)| id.as_str() != claimed)
        .map(|(_, &s)| s)
        .fold(f64::INFINITY, f64::min);

    let (kind, best) = if !other_best.is_finite() {
        (VerdictKind::Benign, alloc::vec![claimed.into()])
    } else {
        let gap = score_claimed - other_best;
        if math::abs(gap) <= cfg.tie_epsilon {
            let tied = scores
                .iter()
                .filter(|(_, &s)| math::abs(s - score_claimed) <= cfg.tie_epsilon)
                .map(|(id, _)| id.clone())
                .collect();
            (VerdictKind::Ambiguous, tied)
        } else if gap > cfg.delta {
            let winners = scores
                .iter()
                .filter(|(id, &s)| id.as_str() != claimed && math::abs(s - other_best) <= cfg.tie_epsilon)
                .map(|(id, _)| id.clone())
                .collect();
            (VerdictKind::Trojan, winners)
        } else {
            (VerdictKind::Benign, alloc::vec![claimed.into()])
        }
    };
    let flagged = match kind {
        VerdictKind::Benign => false,
        VerdictKind::Trojan => true,
        VerdictKind::Ambiguous => cfg.tie_policy == TiePolicy::FlagAsPositive,
    };
    Ok(Verdict {
        instance_id: instance_id.into(),
        claimed: claimed.into(),
        kind,
        best,
        score_claimed,
        score_best,
        scores,
        flagged,
    })
}

/// Scores `instance` against every candidate and decides whether the claimed
/// type is the best fit.
pub fn classify(
    instance: &CellInstance,
    claimed: &str,
    candidates: &[&Representative],
    cfg: &DetectionConfig,
) -> Result<Verdict> {
    if !candidates.iter().any(|r| r.type_id == claimed) {
        return Err(Error::MissingRepresentative(claimed.into()));
    }
    let scores = candidates
        .iter()
        .map(|rep| (rep.type_id.clone(), score_instance(rep, &instance.vias, cfg)))
        .collect();
    decide(&instance.instance_id, claimed, scores, cfg)
}

/// Classifies one instance against all same-width representatives of its
/// claimed type (`instance.type_id`).
pub fn classify_in_library(
    instance: &CellInstance,
    reps: &[Representative],
    cfg: &DetectionConfig,
) -> Result<Verdict> {
    let claimed = reps
        .iter()
        .find(|r| r.type_id == instance.type_id)
        .ok_or_else(|| Error::MissingRepresentative(instance.type_id.clone()))?;
    classify(instance, &instance.type_id, &same_width_candidates(claimed, reps), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaErrorReport {
    pub type_a: String,
    pub type_b: String,
    /// Type every instance is claimed to be in this direction.
    pub claimed: String,
    /// Type whose instances play the substitutes.
    pub substituted: String,
    pub false_negatives: usize,
    /// Number of substitute instances evaluated.
    pub n: usize,
    pub false_negative_rate: f64,
    pub ci95: (f64, f64),
    /// Genuine instances of the claimed type that were flagged.
    pub false_positives: usize,
    pub n_genuine: usize,
}

/// Exhaustive swap evaluation of one pair.
///
/// In the first direction every instance of both types is claimed to be
/// `type_a` and classified against the two representatives; `type_b`
/// instances left unflagged are false negatives. The second direction swaps
/// the roles. `instances` carry their true type in `type_id`.
pub fn evaluate_pair(
    type_a: &str,
    type_b: &str,
    reps: &[Representative],
    instances: &[CellInstance],
    cfg: &DetectionConfig,
) -> Result<[BetaErrorReport; 2]> {
    let find = |id: &str| {
        reps.iter()
            .find(|r| r.type_id == id)
            .ok_or_else(|| Error::MissingRepresentative(id.into()))
    };
    let (rep_a, rep_b) = (find(type_a)?, find(type_b)?);
    let of_a: Vec<&CellInstance> = instances.iter().filter(|i| i.type_id == type_a).collect();
    let of_b: Vec<&CellInstance> = instances.iter().filter(|i| i.type_id == type_b).collect();
    if of_a.is_empty() || of_b.is_empty() {
        return Err(Error::InvalidInput(alloc::format!(
            "pair ({type_a}, {type_b}) needs instances of both types"
        )));
    }
    // Both directions use the same two scores per instance.
    let scored = |group: &[&CellInstance]| -> Vec<PairScores> {
        group
            .iter()
            .map(|i| PairScores {
                instance_id: i.instance_id.clone(),
                score_a: score_instance(rep_a, &i.vias, cfg),
                score_b: score_instance(rep_b, &i.vias, cfg),
            })
            .collect()
    };
    beta_reports(type_a, type_b, &scored(&of_a), &scored(&of_b), cfg)
}

/// Scores of one instance against both types of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub instance_id: String,
    pub score_a: f64,
    pub score_b: f64,
}

/// [`evaluate_pair`] on precomputed scores: `scores_a` for instances that
/// really are `type_a`, `scores_b` for those that are `type_b`.
pub fn beta_reports(
    type_a: &str,
    type_b: &str,
    scores_a: &[PairScores],
    scores_b: &[PairScores],
    cfg: &DetectionConfig,
) -> Result<[BetaErrorReport; 2]> {
    if scores_a.is_empty() || scores_b.is_empty() {
        return Err(Error::InvalidInput(alloc::format!(
            "pair ({type_a}, {type_b}) needs instances of both types"
        )));
    }
    let direction = |claimed: &str, genuine: &[PairScores], substitutes: &[PairScores]| {
        let flagged = |s: &PairScores| -> Result<bool> {
            let mut scores = BTreeMap::new();
            scores.insert(String::from(type_a), s.score_a);
            scores.insert(String::from(type_b), s.score_b);
            Ok(decide(&s.instance_id, claimed, scores, cfg)?.flagged)
        };
        let mut false_negatives = 0;
        for s in substitutes {
            if !flagged(s)? {
                false_negatives += 1;
            }
        }
        let mut false_positives = 0;
        for g in genuine {
            if flagged(g)? {
                false_positives += 1;
            }
        }
        let n = substitutes.len();
        Ok::<_, Error>(BetaErrorReport {
            type_a: type_a.into(),
            type_b: type_b.into(),
            claimed: claimed.into(),
            substituted: if claimed == type_a { type_b.into() } else { type_a.into() },
            false_negatives,
            n,
            false_negative_rate: false_negatives as f64 / n as f64,
            ci95: wilson_interval(false_negatives, n, Z95),
            false_positives,
            n_genuine: genuine.len(),
        })
    };
    Ok([
        direction(type_a, scores_a, scores_b)?,
        direction(type_b, scores_b, scores_a)?,
    ])
}

/// An extracted instance labelled with its claimed type (`instance.type_id`)
/// and, separately, the type it really is.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledInstance {
    pub instance: CellInstance,
    pub true_type: String,
}

impl LabelledInstance {
    pub fn is_planted(&self) -> bool {
        self.instance.type_id != self.true_type
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvalReport {
    pub true_positives: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub planted: usize,
    pub benign: usize,
    /// `None` when nothing was planted.
    pub false_negative_rate: Option<f64>,
    pub false_positive_rate: Option<f64>,
}

/// Tallies detections against ground truth from already computed verdicts,
/// given in the same order as `labelled`.
pub fn tally_planted(labelled: &[LabelledInstance], verdicts: &[Verdict]) -> PlantedEvalReport {
    let (mut tp, mut fn_, mut fp, mut planted, mut benign) = (0, 0, 0, 0, 0);
    for (l, v) in labelled.iter().zip(verdicts) {
        match (l.is_planted(), v.flagged) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => {}
        }
        if l.is_planted() {
            planted += 1;
        } else {
            benign += 1;
        }
    }
    PlantedEvalReport {
        true_positives: tp,
        false_negatives: fn_,
        false_positives: fp,
        planted,
        benign,
        false_negative_rate: (planted > 0).then(|| fn_ as f64 / planted as f64),
        false_positive_rate: (benign > 0).then(|| fp as f64 / benign as f64),
    }
}

/// Classifies every instance under its claimed type and counts planted
/// substitutions found (TP) and missed (FN), and genuine cells flagged (FP).
pub fn evaluate_planted(
    labelled: &[LabelledInstance],
    reps: &[Representative],
    cfg: &DetectionConfig,
) -> Result<PlantedEvalReport> {
    let verdicts = labelled
        .iter()
        .map(|l| classify_in_library(&l.instance, reps, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(tally_planted(labelled, &verdicts))
}
