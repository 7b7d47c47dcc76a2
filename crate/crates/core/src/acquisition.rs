//! Per-round batch acquisition over an unaligned pool.
//!
//! One round runs three steps on embeddings from the current model:
//!
//! 1. **Modality selection**: for every modality, the largest distance from
//!    an unaligned record to its nearest annotated record; pick the modality
//!    with the largest value (the least covered one).
//! 2. **Coreset**: greedy farthest-point (k-center) traversal of the chosen
//!    modality's unaligned records, seeded with the annotated records.
//! 3. **Margin selection**: score every coreset record by the gap between
//!    its two highest similarities to the unaligned records of each other
//!    modality (summed over modalities) and keep the `B` smallest.
//!
//! Only steps 1 and 2 evaluate distances and only step 3 evaluates
//! similarities, so the cost of a round is visible on the [`EvalCounter`].
//! Ties anywhere break toward the lowest record id.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{dist_unchecked, dot, min_dists, EmbeddingBatch, EvalCounter, EvalCounts, RecordId};
use crate::error::{Error, Result};

/// How step 1 picks the modality to query from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModalityRule {
    /// Least-covered modality (max-min distance to the annotated set).
    #[default]
    Coverage,
    /// Always the given modality.
    Fixed(usize),
    /// Uniformly random modality.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionOptions {
    /// Normalize embeddings before steps 1 and 2.
    pub normalize_coverage: bool,
    /// Normalize embeddings before the step 3 similarities.
    pub normalize_similarity: bool,
    /// Use the distance cache in the greedy coreset.
    pub cached_greedy: bool,
    pub modality_rule: ModalityRule,
}

impl Default for AcquisitionOptions {
    fn default() -> Self {
        Self {
            normalize_coverage: true,
            normalize_similarity: true,
            cached_greedy: true,
            modality_rule: ModalityRule::Coverage,
        }
    }
}

/// Inputs to one acquisition round: model embeddings of the unaligned pool
/// `D_t` and the annotated set `S_{t-1}`, one batch per modality.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round: usize,
    pub unaligned: Vec<EmbeddingBatch>,
    pub annotated: Vec<EmbeddingBatch>,
    /// Records to select this round (`B`).
    pub budget: usize,
    /// Coreset size (`B_C >= B`).
    pub coreset_size: usize,
}

impl RoundState {
    pub fn num_modalities(&self) -> usize {
        self.unaligned.len()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let m = self.unaligned.len();
        if m < 2 || self.annotated.len() != m {
            return Err(Error::InvalidArgument(format!(
                "round state needs >= 2 modalities with matching annotated sets (got {m} / {})",
                self.annotated.len()
            )));
        }
        if self.budget == 0 {
            return Err(Error::InvalidArgument("budget must be at least 1".into()));
        }
        if self.coreset_size < self.budget {
            return Err(Error::InvalidArgument(format!(
                "coreset size {} is smaller than budget {}",
                self.coreset_size, self.budget
            )));
        }
        Ok(())
    }

    fn prepared(&self, normalize: bool) -> Result<(Vec<EmbeddingBatch>, Vec<EmbeddingBatch>)> {
        let prep = |b: &EmbeddingBatch| if normalize { b.normalized() } else { Ok(b.clone()) };
        Ok((
            self.unaligned.iter().map(prep).collect::<Result<_>>()?,
            self.annotated.iter().map(prep).collect::<Result<_>>()?,
        ))
    }
}

/// A record id with its uncertainty score (`None` when no margin exists).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: RecordId,
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coreset {
    pub ids: Vec<RecordId>,
    /// Fewer candidates than requested; every candidate was taken.
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySelection {
    pub picks: Vec<ScoredId>,
    /// Some other modality had fewer than 2 records; picks are the
    /// lowest-id prefix of the coreset.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: usize,
    pub modality: usize,
    pub coverages: Vec<f64>,
    pub coreset: Coreset,
    pub selected: Vec<ScoredId>,
    pub counts: EvalCounts,
    /// The chosen modality held fewer than `B` unaligned records.
    pub exhausted: bool,
    pub fallback: bool,
}

/// Largest distance from an unaligned record to its nearest annotated record
/// (`+inf` when nothing is annotated yet).
pub fn coverage_distance(
    unaligned: &EmbeddingBatch,
    annotated: &EmbeddingBatch,
    counter: &EvalCounter,
) -> Result<f64> {
    if unaligned.is_empty() {
        return Err(Error::Empty("no unaligned records to cover"));
    }
    Ok(min_dists(unaligned, annotated, counter)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Index of the largest coverage value; ties go to the lowest index.
pub fn select_modality(coverages: &[f64]) -> Result<usize> {
    if coverages.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need coverages for >= 2 modalities, got {}",
            coverages.len()
        )));
    }
    let mut best = 0;
    for (k, &c) in coverages.iter().enumerate().skip(1) {
        if c > coverages[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Position of the largest `score` among unpicked candidates; ties go to the
/// lowest record id.
fn farthest(scores: &[f64], picked: &[bool], ids: &[RecordId]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..scores.len() {
        if picked[i] {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) if scores[i] > scores[b] || (scores[i] == scores[b] && ids[i] < ids[b]) => Some(i),
            keep => keep,
        };
    }
    best
}

/// Greedy k-center coreset of `size` candidates.
///
/// Each step takes the candidate farthest from the annotated records and the
/// candidates already taken. With nothing annotated the first pick is the
/// lowest id. The cached variant keeps each candidate's running nearest
/// distance and only measures against the newest pick; it returns exactly the
/// same sequence as the naive variant, which recomputes every nearest
/// distance from scratch at each step.
pub fn greedy_kcenter(
    candidates: &EmbeddingBatch,
    annotated: &EmbeddingBatch,
    size: usize,
    cached: bool,
    counter: &EvalCounter,
) -> Result<Coreset> {
    if size == 0 {
        return Err(Error::InvalidArgument("coreset size must be at least 1".into()));
    }
    if !candidates.is_empty() && !annotated.is_empty() && candidates.dim() != annotated.dim() {
        return Err(Error::DimensionMismatch {
            expected: candidates.dim(),
            found: annotated.dim(),
        });
    }
    let n = candidates.len();
    let target = size.min(n);
    let ids = candidates.ids();
    let mut is_picked = vec![false; n];
    let mut picked: Vec<usize> = Vec::with_capacity(target);

    if cached {
        let mut nearest = min_dists(candidates, annotated, counter)?;
        for step in 0..target {
            let p = farthest(&nearest, &is_picked, ids).expect("unpicked candidate remains");
            is_picked[p] = true;
            picked.push(p);
            if step + 1 < target {
                let centre = candidates.row(p);
                let mut evals = 0;
                for i in 0..n {
                    if !is_picked[i] {
                        nearest[i] = nearest[i].min(dist_unchecked(candidates.row(i), centre));
                        evals += 1;
                    }
                }
                counter.add_dist(evals);
            }
        }
    } else {
        let mut nearest = vec![f64::INFINITY; n];
        for _ in 0..target {
            let mut evals = 0;
            for i in 0..n {
                if is_picked[i] {
                    continue;
                }
                let row = candidates.row(i);
                let mut best = f64::INFINITY;
                for r in annotated.rows() {
                    best = best.min(dist_unchecked(row, r));
                }
                for &p in &picked {
                    best = best.min(dist_unchecked(row, candidates.row(p)));
                }
                nearest[i] = best;
                evals += (annotated.len() + picked.len()) as u64;
            }
            counter.add_dist(evals);
            let p = farthest(&nearest, &is_picked, ids).expect("unpicked candidate remains");
            is_picked[p] = true;
            picked.push(p);
        }
    }

    Ok(Coreset {
        ids: picked.into_iter().map(|p| ids[p]).collect(),
        short: size > n,
    })
}

/// Top-1 minus top-2 similarity.
pub fn margin_score(similarities: &[f64]) -> Result<f64> {
    if similarities.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "margin needs at least 2 similarities, got {}",
            similarities.len()
        )));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &s in similarities {
        if s > first {
            second = first;
            first = s;
        } else if s > second {
            second = s;
        }
    }
    Ok(first - second)
}

/// Summed margin of `query` against each batch in `others`; counts one
/// similarity per pair.
pub(crate) fn summed_margin(
    query: &[f64],
    others: &[&EmbeddingBatch],
    counter: &EvalCounter,
    scratch: &mut Vec<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for other in others {
        scratch.clear();
        scratch.extend(other.rows().map(|r| dot(query, r)));
        counter.add_sim(other.len() as u64);
        total += margin_score(scratch)?;
    }
    Ok(total)
}

/// Sorts ascending by score, then id.
pub(crate) fn sort_by_margin(picks: &mut [ScoredId]) {
    picks.sort_by(|a, b| {
        let (x, y) = (a.margin.unwrap_or(f64::INFINITY), b.margin.unwrap_or(f64::INFINITY));
        x.total_cmp(&y).then(a.id.cmp(&b.id))
    });
}

/// The `budget` coreset records with the smallest summed margins against the
/// unaligned records of every other modality.
///
/// Similarities are inner products of the rows as given; callers normalize
/// beforehand when required.
pub fn uncertainty_select(
    coreset: &EmbeddingBatch,
    others: &[EmbeddingBatch],
    budget: usize,
    counter: &EvalCounter,
) -> Result<UncertaintySelection> {
    if others.is_empty() {
        return Err(Error::InvalidArgument("need at least one other modality".into()));
    }
    for o in others {
        if !o.is_empty() && !coreset.is_empty() && o.dim() != coreset.dim() {
            return Err(Error::DimensionMismatch {
                expected: coreset.dim(),
                found: o.dim(),
            });
        }
    }
    let take = budget.min(coreset.len());
    if others.iter().any(|o| o.len() < 2) {
        log::warn!(
            "fewer than 2 candidates in another modality; taking the lowest {take} coreset ids"
        );
        let mut ids = coreset.ids().to_vec();
        ids.sort_unstable();
        return Ok(UncertaintySelection {
            picks: ids
                .into_iter()
                .take(take)
                .map(|id| ScoredId { id, margin: None })
                .collect(),
            fallback: true,
        });
    }
    let refs: Vec<&EmbeddingBatch> = others.iter().collect();
    let mut scratch = Vec::new();
    let mut picks = coreset
        .ids()
        .iter()
        .zip(coreset.rows())
        .map(|(&id, row)| {
            Ok(ScoredId {
                id,
                margin: Some(summed_margin(row, &refs, counter, &mut scratch)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sort_by_margin(&mut picks);
    picks.truncate(take);
    Ok(UncertaintySelection {
        picks,
        fallback: false,
    })
}

/// Runs steps 1 to 3 for one round.
///
/// `rng` is only consulted by [`ModalityRule::Random`].
pub fn pool_round<R: Rng + ?Sized>(
    state: &RoundState,
    options: &AcquisitionOptions,
    counter: &EvalCounter,
    rng: &mut R,
) -> Result<RoundOutcome> {
    state.validate()?;
    let start = counter.snapshot();
    let m = state.num_modalities();
    if state.unaligned.iter().any(EmbeddingBatch::is_empty) {
        return Err(Error::Empty("unaligned pool is exhausted"));
    }

    let (unaligned, annotated) = state.prepared(options.normalize_coverage)?;
    let coverages = unaligned
        .iter()
        .zip(&annotated)
        .map(|(d, s)| coverage_distance(d, s, counter))
        .collect::<Result<Vec<_>>>()?;
    let modality = match options.modality_rule {
        ModalityRule::Coverage => select_modality(&coverages)?,
        ModalityRule::Fixed(k) if k < m => k,
        ModalityRule::Fixed(k) => {
            return Err(Error::InvalidArgument(format!("no modality {k}")));
        }
        ModalityRule::Random => rng.random_range(0..m),
    };

    let pool_len = unaligned[modality].len();
    let coreset = greedy_kcenter(
        &unaligned[modality],
        &annotated[modality],
        state.coreset_size.min(pool_len),
        options.cached_greedy,
        counter,
    )?;

    let (sim_unaligned, _) = if options.normalize_similarity == options.normalize_coverage {
        (unaligned, annotated)
    } else {
        state.prepared(options.normalize_similarity)?
    };
    let coreset_batch = sim_unaligned[modality].select_ids(&coreset.ids)?;
    let others: Vec<EmbeddingBatch> = sim_unaligned
        .into_iter()
        .enumerate()
        .filter(|&(j, _)| j != modality)
        .map(|(_, b)| b)
        .collect();
    let selection = uncertainty_select(&coreset_batch, &others, state.budget, counter)?;

    Ok(RoundOutcome {
        round: state.round,
        modality,
        coverages,
        exhausted: pool_len < state.budget,
        coreset,
        selected: selection.picks,
        counts: counter.snapshot().since(start),
        fallback: selection.fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(ids: &[usize], xs: &[f64]) -> EmbeddingBatch {
        EmbeddingBatch::from_flat(ids.to_vec(), 1, xs.to_vec()).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, id0: usize) -> EmbeddingBatch {
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingBatch::from_flat((id0..id0 + n).collect(), d, data).unwrap()
    }

    #[test]
    fn coverage_examples() {
        let c = EvalCounter::new();
        let pts = line(&[0, 1, 2], &[0.0, 1.0, 5.0]);
        assert_eq!(coverage_distance(&pts, &pts, &c).unwrap(), 0.0);
        assert_eq!(
            coverage_distance(&pts, &EmbeddingBatch::empty(1), &c).unwrap(),
            f64::INFINITY
        );
        // six points on a line, two annotated at 0 and 10
        let pool = line(&[0, 1, 2, 3, 4, 5], &[1.0, 2.0, 4.0, 6.5, 8.0, 13.0]);
        let ann = line(&[10, 11], &[0.0, 10.0]);
        // nearest distances 1, 2, 4, 3.5, 2, 3
        assert_eq!(coverage_distance(&pool, &ann, &c).unwrap(), 4.0);
        assert!(coverage_distance(&EmbeddingBatch::empty(1), &ann, &c).is_err());
    }

    #[test]
    fn select_modality_examples() {
        assert_eq!(select_modality(&[2.0, 1.0]).unwrap(), 0);
        assert_eq!(select_modality(&[1.0, 2.0]).unwrap(), 1);
        assert_eq!(select_modality(&[3.0, 3.0]).unwrap(), 0);
        assert_eq!(select_modality(&[f64::INFINITY; 3]).unwrap(), 0);
        let vals = [0.3, 1.7, 0.9, 1.2];
        let oracle = (0..4).fold(0, |b, k| if vals[k] > vals[b] { k } else { b });
        assert_eq!(select_modality(&vals).unwrap(), oracle);
        assert!(select_modality(&[1.0]).is_err());
    }

    #[test]
    fn greedy_picks_farthest_point() {
        let c = EvalCounter::new();
        let pts = line(&[0, 1, 2], &[0.0, 1.0, 10.0]);
        let ann = line(&[9], &[0.0]);
        for cached in [false, true] {
            let cs = greedy_kcenter(&pts, &ann, 1, cached, &c).unwrap();
            assert_eq!(cs.ids, vec![2]);
        }
    }

    #[test]
    fn greedy_cold_start_seeds_lowest_id() {
        let c = EvalCounter::new();
        let pts = line(&[7, 3, 5], &[0.0, 1.0, 10.0]);
        let cs = greedy_kcenter(&pts, &EmbeddingBatch::empty(1), 2, true, &c).unwrap();
        // id 3 (x = 1) first, then the farthest from it (x = 10, id 5)
        assert_eq!(cs.ids, vec![3, 5]);
    }

    #[test]
    fn greedy_short_coreset_takes_everything() {
        let c = EvalCounter::new();
        let pts = line(&[0, 1], &[0.0, 1.0]);
        let cs = greedy_kcenter(&pts, &EmbeddingBatch::empty(1), 5, false, &c).unwrap();
        assert!(cs.short);
        assert_eq!(cs.ids.len(), 2);
        assert!(greedy_kcenter(&pts, &EmbeddingBatch::empty(1), 0, false, &c).is_err());
    }

    #[test]
    fn cached_and_naive_agree_and_count_as_expected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_batch(&mut rng, 200, 4, 0);
        let ann = random_batch(&mut rng, 15, 4, 1000);
        let (cn, cc) = (EvalCounter::new(), EvalCounter::new());
        let naive = greedy_kcenter(&pts, &ann, 20, false, &cn).unwrap();
        let cached = greedy_kcenter(&pts, &ann, 20, true, &cc).unwrap();
        assert_eq!(naive, cached);
        let (n, s, b) = (200u64, 15u64, 20u64);
        let naive_expected: u64 = (0..b).map(|c| (n - c) * (s + c)).sum();
        assert_eq!(cn.snapshot().dist_evals, naive_expected);
        let cached_expected = n * s + (0..b - 1).map(|c| n - c - 1).sum::<u64>();
        assert_eq!(cc.snapshot().dist_evals, cached_expected);
        assert!(cc.snapshot().dist_evals <= (b + s) * n);
    }

    #[test]
    fn margin_examples() {
        assert!((margin_score(&[0.9, 0.5, 0.1]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(margin_score(&[0.7, 0.7, 0.1]).unwrap(), 0.0);
        assert!(margin_score(&[0.7]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let v: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            assert_eq!(margin_score(&v).unwrap(), sorted[0] - sorted[1]);
        }
    }

    #[test]
    fn uncertainty_whole_coreset_when_budget_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cs = random_batch(&mut rng, 5, 3, 10);
        let other = random_batch(&mut rng, 7, 3, 0);
        let c = EvalCounter::new();
        let sel = uncertainty_select(&cs, &[other], 5, &c).unwrap();
        let mut ids: Vec<_> = sel.picks.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![10, 11, 12, 13, 14]);
        assert_eq!(c.snapshot().sim_evals, 35);
    }

    #[test]
    fn ambiguous_item_ranks_first() {
        // item 1 sits halfway between two candidates; items 0 and 2 each have
        // one clearly best candidate
        let cs = EmbeddingBatch::from_rows(
            vec![0, 1, 2],
            &[vec![1.0, 0.0], vec![0.70710678, 0.70710678], vec![0.0, 1.0]],
        )
        .unwrap();
        let other = EmbeddingBatch::from_rows(
            vec![0, 1, 2],
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
        )
        .unwrap();
        let c = EvalCounter::new();
        let sel = uncertainty_select(&cs, &[other], 1, &c).unwrap();
        // margins by hand: item0 1 - 0 = 1; item1 0.7071 - 0.7071 = 0; item2 1 - 0 = 1
        assert_eq!(sel.picks[0].id, 1);
        assert!(sel.picks[0].margin.unwrap().abs() < 1e-12);
    }

    #[test]
    fn three_modalities_sum_pairwise_margins() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cs = random_batch(&mut rng, 6, 4, 0).normalized().unwrap();
        let o1 = random_batch(&mut rng, 9, 4, 0).normalized().unwrap();
        let o2 = random_batch(&mut rng, 5, 4, 0).normalized().unwrap();
        let c = EvalCounter::new();
        let sel = uncertainty_select(&cs, &[o1.clone(), o2.clone()], 6, &c).unwrap();
        assert_eq!(c.snapshot().sim_evals, 6 * 14);
        for p in &sel.picks {
            let q = cs.row(cs.position(p.id).unwrap());
            let pair = |o: &EmbeddingBatch| {
                let mut s: Vec<f64> = o.rows().map(|r| r.iter().zip(q).map(|(a, b)| a * b).sum()).collect();
                s.sort_by(|a, b| b.total_cmp(a));
                s[0] - s[1]
            };
            assert_eq!(p.margin.unwrap(), pair(&o1) + pair(&o2));
        }
    }

    #[test]
    fn uncertainty_falls_back_with_tiny_other_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cs = EmbeddingBatch::from_flat(vec![9, 4, 6], 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let other = random_batch(&mut rng, 1, 2, 0);
        let sel = uncertainty_select(&cs, &[other], 2, &EvalCounter::new()).unwrap();
        assert!(sel.fallback);
        assert_eq!(sel.picks.iter().map(|p| p.id).collect::<Vec<_>>(), vec![4, 6]);
    }

    fn state(rng: &mut ChaCha8Rng, n: usize, s: usize) -> RoundState {
        RoundState {
            round: 1,
            unaligned: vec![random_batch(rng, n, 3, 0), random_batch(rng, n, 3, 0)],
            annotated: vec![random_batch(rng, s, 3, 500), random_batch(rng, s, 3, 500)],
            budget: 4,
            coreset_size: 10,
        }
    }

    #[test]
    fn cold_start_round() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let st = state(&mut rng, 30, 0);
        let c = EvalCounter::new();
        let out = pool_round(&st, &AcquisitionOptions::default(), &c, &mut rng).unwrap();
        assert!(out.coverages.iter().all(|v| v.is_infinite()));
        assert_eq!(out.modality, 0);
        assert_eq!(out.coreset.ids[0], 0);
        assert_eq!(out.selected.len(), 4);
        assert_eq!(out.counts.sim_evals, 10 * 30);
    }

    #[test]
    fn round_respects_subset_relations_and_counter_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let st = state(&mut rng, 40, 12);
        for cached in [false, true] {
            let c = EvalCounter::new();
            let opts = AcquisitionOptions {
                cached_greedy: cached,
                ..Default::default()
            };
            let out = pool_round(&st, &opts, &c, &mut rng).unwrap();
            let pool_ids = st.unaligned[out.modality].ids();
            assert!(out.coreset.ids.iter().all(|id| pool_ids.contains(id)));
            assert!(out.selected.iter().all(|p| out.coreset.ids.contains(&p.id)));
            let (d, s, bc) = (40u64, 12u64, 10u64);
            let step1 = 2 * d * s;
            if cached {
                assert!(out.counts.dist_evals <= (bc + s) * d + step1);
            }
            assert_eq!(out.counts.sim_evals, bc * d);
        }
    }

    #[test]
    fn selection_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let st = state(&mut rng, 25, 5);
        let scaled = RoundState {
            unaligned: st.unaligned.iter().map(|b| b.scaled(7.5)).collect(),
            annotated: st.annotated.iter().map(|b| b.scaled(7.5)).collect(),
            ..st.clone()
        };
        let opts = AcquisitionOptions::default();
        let a = pool_round(&st, &opts, &EvalCounter::new(), &mut rng).unwrap();
        let b = pool_round(&scaled, &opts, &EvalCounter::new(), &mut rng).unwrap();
        assert_eq!(a.modality, b.modality);
        assert_eq!(a.coreset, b.coreset);
        let ids = |o: &RoundOutcome| o.selected.iter().map(|p| p.id).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn exhausted_pool_selects_remainder() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut st = state(&mut rng, 3, 2);
        st.budget = 5;
        st.coreset_size = 8;
        let out = pool_round(&st, &AcquisitionOptions::default(), &EvalCounter::new(), &mut rng).unwrap();
        assert!(out.exhausted);
        assert_eq!(out.selected.len(), 3);
    }

    fn radius(pts: &EmbeddingBatch, centres: &[usize]) -> f64 {
        pts.rows()
            .map(|r| {
                centres
                    .iter()
                    .map(|&c| dist_unchecked(r, pts.row(c)))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn greedy_is_within_twice_optimal_radius() {
        let c = EvalCounter::new();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_batch(&mut rng, 10, 2, 0);
            let k = 3;
            let cs = greedy_kcenter(&pts, &EmbeddingBatch::empty(2), k, seed % 2 == 0, &c).unwrap();
            let greedy = radius(&pts, &cs.ids);
            let mut opt = f64::INFINITY;
            for a in 0..10 {
                for b in a + 1..10 {
                    for d in b + 1..10 {
                        opt = opt.min(radius(&pts, &[a, b, d]));
                    }
                }
            }
            assert!(greedy <= 2.0 * opt + 1e-12, "seed {seed}: {greedy} vs opt {opt}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn grid_batch(coords: Vec<(i8, i8)>, id0: usize) -> EmbeddingBatch {
            let n = coords.len();
            let data = coords.iter().flat_map(|&(x, y)| [x as f64, y as f64]).collect();
            EmbeddingBatch::from_flat((id0..id0 + n).rev().collect(), 2, data).unwrap()
        }

        proptest! {
            // integer grid coordinates produce many exact ties
            #[test]
            fn cached_matches_naive(
                pts in prop::collection::vec((-3i8..3, -3i8..3), 1..40),
                ann in prop::collection::vec((-3i8..3, -3i8..3), 0..6),
                size in 1usize..45,
            ) {
                let pts = grid_batch(pts, 0);
                let ann = grid_batch(ann, 1000);
                let c = EvalCounter::new();
                let naive = greedy_kcenter(&pts, &ann, size, false, &c).unwrap();
                let cached = greedy_kcenter(&pts, &ann, size, true, &c).unwrap();
                prop_assert_eq!(&naive, &cached);
                prop_assert_eq!(naive.ids.len(), size.min(pts.len()));
                let mut uniq = naive.ids.clone();
                uniq.sort_unstable();
                uniq.dedup();
                prop_assert_eq!(uniq.len(), naive.ids.len());
            }

            #[test]
            fn margin_is_nonnegative(v in prop::collection::vec(-10.0f64..10.0, 2..50)) {
                prop_assert!(margin_score(&v).unwrap() >= 0.0);
            }
        }
    }
}
