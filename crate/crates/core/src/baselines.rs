//! Comparison strategies and the claim walk shared by every strategy.
//!
//! A strategy produces a ranked list of [`Pick`]s; [`claim`] walks it in
//! order and pays the oracle for each record whose tuple is still hidden.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    greedy_kcenter, sort_by_margin, summed_margin, AcquisitionOptions, Coreset, RoundOutcome, RoundState, ScoredId,
};
use crate::embedding::{EmbeddingBatch, EvalCounter, RecordId};
use crate::error::Result;
use crate::world::{AlignedTuple, AnnotationOracle, AnnotationSet};

/// Modality used by the random baseline.
pub const CANONICAL_MODALITY: usize = 0;

/// A record proposed for annotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pick {
    pub modality: usize,
    pub id: RecordId,
    pub margin: Option<f64>,
}

impl Pick {
    pub fn from_scored(modality: usize, s: ScoredId) -> Self {
        Self {
            modality,
            id: s.id,
            margin: s.margin,
        }
    }
}

/// `budget` records of the canonical modality drawn uniformly without replacement.
pub fn random_round<R: Rng + ?Sized>(candidates: &[RecordId], budget: usize, rng: &mut R) -> Vec<Pick> {
    let take = budget.min(candidates.len());
    sample(rng, candidates.len(), take)
        .into_iter()
        .map(|i| Pick {
            modality: CANONICAL_MODALITY,
            id: candidates[i],
            margin: None,
        })
        .collect()
}

/// Greedy k-center on a uniformly random modality with coreset size `B`.
///
/// No coverage distances are computed, so `coverages` is empty.
pub fn coreset_round<R: Rng + ?Sized>(
    state: &RoundState,
    options: &AcquisitionOptions,
    counter: &EvalCounter,
    rng: &mut R,
) -> Result<RoundOutcome> {
    let state = RoundState {
        coreset_size: state.budget,
        ..state.clone()
    };
    state.validate()?;
    let start = counter.snapshot();
    let modality = rng.random_range(0..state.num_modalities());
    let prep = |b: &EmbeddingBatch| {
        if options.normalize_coverage {
            b.normalized()
        } else {
            Ok(b.clone())
        }
    };
    let pool = prep(&state.unaligned[modality])?;
    if pool.is_empty() {
        return Err(crate::Error::Empty("unaligned pool is exhausted"));
    }
    let annotated = prep(&state.annotated[modality])?;
    let coreset = greedy_kcenter(
        &pool,
        &annotated,
        state.budget.min(pool.len()),
        options.cached_greedy,
        counter,
    )?;
    let selected = coreset
        .ids
        .iter()
        .map(|&id| ScoredId { id, margin: None })
        .collect();
    Ok(RoundOutcome {
        round: state.round,
        modality,
        coverages: Vec::new(),
        exhausted: pool.len() < state.budget,
        coreset: Coreset {
            ids: coreset.ids,
            short: coreset.short,
        },
        selected,
        counts: counter.snapshot().since(start),
        fallback: false,
    })
}

/// Every unaligned record of every modality ranked by summed margin against
/// the other modalities' unaligned records, ascending, ties by
/// (modality, id).
///
/// With fewer than 2 records in any modality no margin exists and the
/// ranking is plain (modality, id) order.
pub fn uncertainty_ranking(
    unaligned: &[EmbeddingBatch],
    normalize: bool,
    counter: &EvalCounter,
) -> Result<Vec<Pick>> {
    let prepared: Vec<EmbeddingBatch> = unaligned
        .iter()
        .map(|b| if normalize { b.normalized() } else { Ok(b.clone()) })
        .collect::<Result<_>>()?;
    if prepared.iter().any(|b| b.len() < 2) {
        log::warn!("fewer than 2 unaligned records in some modality; ranking by id");
        return Ok(prepared
            .iter()
            .enumerate()
            .flat_map(|(k, b)| {
                let mut ids = b.ids().to_vec();
                ids.sort_unstable();
                ids.into_iter().map(move |id| Pick {
                    modality: k,
                    id,
                    margin: None,
                })
            })
            .collect());
    }
    let mut scratch = Vec::new();
    let mut ranking = Vec::new();
    for (k, batch) in prepared.iter().enumerate() {
        let others: Vec<&EmbeddingBatch> = prepared
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .map(|(_, b)| b)
            .collect();
        let mut scored = batch
            .ids()
            .iter()
            .zip(batch.rows())
            .map(|(&id, row)| {
                Ok(ScoredId {
                    id,
                    margin: Some(summed_margin(row, &others, counter, &mut scratch)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        sort_by_margin(&mut scored);
        ranking.extend(scored.into_iter().map(|s| Pick::from_scored(k, s)));
    }
    // stable sort on margin keeps (modality, id) order within ties
    ranking.sort_by(|a, b| {
        let (x, y) = (a.margin.unwrap_or(f64::INFINITY), b.margin.unwrap_or(f64::INFINITY));
        x.total_cmp(&y)
    });
    Ok(ranking)
}

/// Result of walking a ranking against the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct Claimed {
    pub picks: Vec<Pick>,
    pub tuples: Vec<AlignedTuple>,
}

/// Walks `ranking` in order and reveals up to `budget` tuples, skipping
/// records whose tuple is already annotated (including tuples revealed
/// earlier in this walk).
pub fn claim(
    ranking: &[Pick],
    budget: usize,
    oracle: &mut AnnotationOracle,
    annotations: &mut AnnotationSet,
) -> Result<Claimed> {
    let mut out = Claimed {
        picks: Vec::new(),
        tuples: Vec::new(),
    };
    for pick in ranking {
        if out.picks.len() == budget {
            break;
        }
        if annotations.contains(pick.modality, pick.id) {
            continue;
        }
        let tuple = oracle.annotate(pick.modality, pick.id)?;
        annotations.insert(tuple.clone())?;
        out.picks.push(*pick);
        out.tuples.push(tuple);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(rows: &[[f64; 2]]) -> EmbeddingBatch {
        EmbeddingBatch::from_rows(
            (0..rows.len()).collect(),
            &rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    fn golden_pools() -> Vec<EmbeddingBatch> {
        vec![
            batch(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.75, 0.25]]),
            batch(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [-1.0, 0.0]]),
        ]
    }

    #[test]
    fn golden_uncertainty_ranking() {
        let c = EvalCounter::new();
        let ranking = uncertainty_ranking(&golden_pools(), false, &c).unwrap();
        // margins worked by hand from the dyadic inner products
        let expected = [
            (0, 2, 0.0),
            (1, 2, 0.0),
            (0, 3, 0.25),
            (1, 0, 0.25),
            (0, 0, 0.5),
            (0, 1, 0.5),
            (1, 1, 0.5),
            (1, 3, 0.5),
        ];
        let got: Vec<_> = ranking.iter().map(|p| (p.modality, p.id, p.margin.unwrap())).collect();
        assert_eq!(got, expected);
        assert_eq!(c.snapshot().sim_evals, 2 * 4 * 4);
    }

    #[test]
    fn claim_skips_pairs_already_revealed() {
        let mut oracle = AnnotationOracle::from_orders(vec![(0..4).collect(), (0..4).collect()]).unwrap();
        let mut ann = AnnotationSet::new(2, 4);
        let ranking = uncertainty_ranking(&golden_pools(), false, &EvalCounter::new()).unwrap();
        let got = claim(&ranking, 2, &mut oracle, &mut ann).unwrap();
        // text record 2 is the partner of image record 2, so it is skipped
        let ids: Vec<_> = got.picks.iter().map(|p| (p.modality, p.id)).collect();
        assert_eq!(ids, vec![(0, 2), (0, 3)]);
        assert_eq!(oracle.cost_spent(), 2);
        assert_eq!(ann.len(), 2);
    }

    #[test]
    fn claim_stops_when_ranking_runs_out() {
        let mut oracle = AnnotationOracle::from_orders(vec![(0..3).collect(), vec![2, 0, 1]]).unwrap();
        let mut ann = AnnotationSet::new(2, 3);
        let ranking: Vec<Pick> = (0..3)
            .flat_map(|id| (0..2).map(move |modality| Pick { modality, id, margin: None }))
            .collect();
        let got = claim(&ranking, 10, &mut oracle, &mut ann).unwrap();
        assert_eq!(got.picks.len(), 3);
        assert_eq!(oracle.cost_spent(), 3);
    }

    #[test]
    fn tiny_pool_ranking_falls_back_to_ids() {
        let pools = vec![batch(&[[1.0, 0.0]]), batch(&[[1.0, 0.0], [0.0, 1.0]])];
        let r = uncertainty_ranking(&pools, true, &EvalCounter::new()).unwrap();
        let ids: Vec<_> = r.iter().map(|p| (p.modality, p.id)).collect();
        assert_eq!(ids, vec![(0, 0), (1, 0), (1, 1)]);
    }

    #[test]
    fn random_round_is_uniform() {
        let ids: Vec<RecordId> = (100..120).collect();
        let (draws, budget) = (10_000u64, 5usize);
        let mut counts = vec![0u64; ids.len()];
        for seed in 0..draws {
            let picks = random_round(&ids, budget, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(picks.len(), budget);
            let mut seen: Vec<_> = picks.iter().map(|p| p.id).collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), budget);
            for p in picks {
                assert_eq!(p.modality, CANONICAL_MODALITY);
                counts[p.id - 100] += 1;
            }
        }
        let expected = (draws * budget as u64) as f64 / ids.len() as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99th percentile of chi-square with 19 degrees of freedom
        assert!(chi2 < 36.191, "chi2 = {chi2}");
    }

    #[test]
    fn coreset_baseline_modality_is_a_fair_coin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mk = |rng: &mut ChaCha8Rng, id0: usize| {
            let data = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            EmbeddingBatch::from_flat((id0..id0 + 6).collect(), 2, data).unwrap()
        };
        let state = RoundState {
            round: 1,
            unaligned: vec![mk(&mut rng, 0), mk(&mut rng, 0)],
            annotated: vec![EmbeddingBatch::empty(2), EmbeddingBatch::empty(2)],
            budget: 2,
            coreset_size: 4,
        };
        let trials = 1000;
        let mut zeros = 0;
        for seed in 0..trials {
            let out = coreset_round(
                &state,
                &AcquisitionOptions::default(),
                &EvalCounter::new(),
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            assert_eq!(out.selected.len(), 2);
            assert_eq!(out.coreset.ids[0], 0);
            zeros += usize::from(out.modality == 0);
        }
        // within 3.5 standard deviations of 500
        let sd = (trials as f64 * 0.25).sqrt();
        assert!((zeros as f64 - 500.0).abs() < 3.5 * sd, "{zeros}");
    }
}
