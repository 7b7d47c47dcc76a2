//! Retrieval and matching metrics, the margin case study, the modality
//! ablation and 2-D embedding dumps.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::acquisition::ModalityRule;
use crate::embedding::{dot, EmbeddingBatch, RecordId};
use crate::engine::{run_experiment, ExperimentConfig, ExperimentResult};
use crate::error::{Error, Result};
use crate::model::TwoTowerModel;
use crate::world::{AlignmentView, TestSplit, UnalignedPool};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub round: usize,
    pub cost: usize,
    pub r1_i2t: f64,
    pub r1_t2i: f64,
    pub match_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Modality 0 queries, modality 1 candidates.
    ImageToText,
    TextToImage,
}

impl Direction {
    fn modalities(self) -> (usize, usize) {
        match self {
            Direction::ImageToText => (0, 1),
            Direction::TextToImage => (1, 0),
        }
    }
}

/// Best candidate for one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoMatch {
    pub query: RecordId,
    pub best: RecordId,
    /// Top-1 minus top-2 similarity (`None` with a single candidate).
    pub margin: Option<f64>,
}

/// For every query row, the candidate with the highest inner product
/// (lowest id on ties) and its margin. Rows are used as given.
pub fn pseudo_align(queries: &EmbeddingBatch, candidates: &EmbeddingBatch) -> Result<Vec<PseudoMatch>> {
    if candidates.is_empty() {
        return Err(Error::Empty("no candidates to match against"));
    }
    if !queries.is_empty() && queries.dim() != candidates.dim() {
        return Err(Error::DimensionMismatch {
            expected: queries.dim(),
            found: candidates.dim(),
        });
    }
    let cids = candidates.ids();
    Ok(queries
        .ids()
        .iter()
        .zip(queries.rows())
        .map(|(&query, q)| {
            let mut best = 0;
            let mut top = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for (j, c) in candidates.rows().enumerate() {
                let s = dot(q, c);
                if s > top || (s == top && cids[j] < cids[best]) {
                    second = top;
                    top = s;
                    best = j;
                } else if s > second {
                    second = s;
                }
            }
            PseudoMatch {
                query,
                best: cids[best],
                margin: (candidates.len() > 1).then(|| top - second),
            }
        })
        .collect())
}

fn encode_normalized(model: &TwoTowerModel, k: usize, ids: Vec<RecordId>, raw: &[f64]) -> Result<EmbeddingBatch> {
    model.encode(k, ids, raw)?.normalized()
}

/// Fraction of test queries whose partner is the top-ranked candidate.
pub fn recall_at_1(model: &TwoTowerModel, test: &TestSplit, direction: Direction) -> Result<f64> {
    if test.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "recall needs at least 2 test pairs, got {}",
            test.len()
        )));
    }
    let (from, to) = direction.modalities();
    let ids: Vec<RecordId> = (0..test.len()).collect();
    let q = encode_normalized(model, from, ids.clone(), test.modalities[from].as_flat())?;
    let c = encode_normalized(model, to, ids, test.modalities[to].as_flat())?;
    recall_from_embeddings(&q, &c)
}

/// Recall@1 where row `i` of `queries` is aligned with id `queries.ids()[i]`
/// in `candidates`.
pub fn recall_from_embeddings(queries: &EmbeddingBatch, candidates: &EmbeddingBatch) -> Result<f64> {
    let hits = pseudo_align(queries, candidates)?
        .iter()
        .filter(|m| m.best == m.query)
        .count();
    Ok(hits as f64 / queries.len() as f64)
}

/// Fraction of pool records of modality `from` whose nearest record of
/// modality `to` (by the model alone) is the true partner.
pub fn match_accuracy(
    model: &TwoTowerModel,
    pool: &UnalignedPool,
    view: &AlignmentView,
    from: usize,
    to: usize,
) -> Result<f64> {
    let all: Vec<RecordId> = (0..pool.len()).collect();
    let q = model.encode_records(pool, from, &all)?.normalized()?;
    let c = model.encode_records(pool, to, &all)?.normalized()?;
    let matches = pseudo_align(&q, &c)?;
    let hits = matches
        .iter()
        .filter(|m| view.partner(from, m.query, to) == m.best)
        .count();
    Ok(hits as f64 / matches.len().max(1) as f64)
}

pub fn evaluate(
    model: &TwoTowerModel,
    pool: &UnalignedPool,
    test: &TestSplit,
    view: &AlignmentView,
    round: usize,
    cost: usize,
) -> Result<MetricsSnapshot> {
    Ok(MetricsSnapshot {
        round,
        cost,
        r1_i2t: recall_at_1(model, test, Direction::ImageToText)?,
        r1_t2i: recall_at_1(model, test, Direction::TextToImage)?,
        match_acc: match_accuracy(model, pool, view, 0, 1)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginCaseStudy {
    /// `None` when no query was matched correctly.
    pub mean_correct: Option<f64>,
    /// `None` when every query was matched correctly.
    pub mean_incorrect: Option<f64>,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

/// Mean margins of correctly versus incorrectly pseudo-matched queries.
///
/// Queries are `query_ids` of modality 0; candidates are `candidate_ids` of
/// modality 1.
pub fn margin_case_study(
    model: &TwoTowerModel,
    pool: &UnalignedPool,
    view: &AlignmentView,
    query_ids: &[RecordId],
    candidate_ids: &[RecordId],
) -> Result<MarginCaseStudy> {
    if query_ids.len() < 2 || candidate_ids.len() < 2 {
        return Err(Error::InvalidArgument("margin case study needs >= 2 records per modality".into()));
    }
    let q = model.encode_records(pool, 0, query_ids)?.normalized()?;
    let c = model.encode_records(pool, 1, candidate_ids)?.normalized()?;
    let (mut sc, mut nc, mut si, mut ni) = (0.0, 0, 0.0, 0);
    for m in pseudo_align(&q, &c)? {
        let margin = m.margin.expect("two or more candidates");
        if view.partner(0, m.query, 1) == m.best {
            sc += margin;
            nc += 1;
        } else {
            si += margin;
            ni += 1;
        }
    }
    Ok(MarginCaseStudy {
        mean_correct: (nc > 0).then(|| sc / nc as f64),
        mean_incorrect: (ni > 0).then(|| si / ni as f64),
        n_correct: nc,
        n_incorrect: ni,
    })
}

/// One arm of the modality-selection ablation.
#[derive(Debug, Clone)]
pub struct AblationArm {
    pub name: String,
    pub rule: ModalityRule,
    pub result: ExperimentResult,
}

/// Runs `config` four times, changing only the modality rule: random,
/// modality 0 only, modality 1 only, and least-covered.
pub fn modality_ablation(config: &ExperimentConfig) -> Result<Vec<AblationArm>> {
    let arms = [
        ("random_modality", ModalityRule::Random),
        ("modality_0", ModalityRule::Fixed(0)),
        ("modality_1", ModalityRule::Fixed(1)),
        ("coverage", ModalityRule::Coverage),
    ];
    arms.into_iter()
        .map(|(name, rule)| {
            let mut cfg = config.clone();
            cfg.acquisition.modality_rule = rule;
            Ok(AblationArm {
                name: name.to_string(),
                rule,
                result: run_experiment(&cfg)?,
            })
        })
        .collect()
}

/// Deterministic 2-component PCA.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Unit principal directions; each is signed so its largest-magnitude
    /// coordinate is positive.
    pub components: [Vec<f64>; 2],
    /// Sample variance along each component (divided by `n - 1`).
    pub variances: [f64; 2],
    pub coords: Vec<[f64; 2]>,
}

pub fn pca_2d(batch: &EmbeddingBatch) -> Result<Pca2> {
    let (n, d) = (batch.len(), batch.dim());
    if d < 2 {
        return Err(Error::InvalidArgument(format!("PCA to 2-D needs dim >= 2, got {d}")));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("PCA needs at least 2 rows".into()));
    }
    let mut mean = vec![0.0; d];
    for r in batch.rows() {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let centred = DMatrix::from_fn(n, d, |i, j| batch.row(i)[j] - mean[j]);
    let svd = centred.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let component = |rank: usize| -> (Vec<f64>, f64) {
        let Some(&row) = order.get(rank) else {
            return (vec![0.0; d], 0.0);
        };
        let mut v: Vec<f64> = v_t.row(row).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let s = svd.singular_values[row];
        (v, s * s / (n - 1) as f64)
    };
    let (c0, v0) = component(0);
    let (c1, v1) = component(1);
    let coords = (0..n)
        .map(|i| {
            let r: Vec<f64> = centred.row(i).iter().copied().collect();
            [dot(&r, &c0), dot(&r, &c1)]
        })
        .collect();
    Ok(Pca2 {
        mean,
        components: [c0, c1],
        variances: [v0, v1],
        coords,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embed2dRow {
    pub id: RecordId,
    pub x: f64,
    pub y: f64,
    /// `;`-separated strategy names that selected this record.
    pub tags: String,
}

/// PCA of one modality's pool embeddings, tagged with the strategies that
/// selected each record.
pub fn dump_embeddings_2d(
    model: &TwoTowerModel,
    pool: &UnalignedPool,
    modality: usize,
    selections: &[(String, Vec<RecordId>)],
) -> Result<Vec<Embed2dRow>> {
    let ids: Vec<RecordId> = (0..pool.len()).collect();
    let emb = model.encode_records(pool, modality, &ids)?.normalized()?;
    let pca = pca_2d(&emb)?;
    Ok(ids
        .iter()
        .zip(&pca.coords)
        .map(|(&id, xy)| Embed2dRow {
            id,
            x: xy[0],
            y: xy[1],
            tags: selections
                .iter()
                .filter(|(_, sel)| sel.contains(&id))
                .map(|(name, _)| name.as_str())
                .collect::<Vec<_>>()
                .join(";"),
        })
        .collect())
}

pub fn write_embed2d(path: &Path, rows: &[Embed2dRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{train, ModelConfig, TrainConfig, TrainingPairs};
    use crate::world::{generate_world, AnnotationOracle, AnnotationSet, ModalityFeatures};
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(ids: Vec<usize>, r: &[[f64; 2]]) -> EmbeddingBatch {
        EmbeddingBatch::from_rows(ids, &r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn ties_go_to_the_lowest_id() {
        let q = rows(vec![0, 1], &[[1.0, 0.0], [0.0, 1.0]]);
        // candidates 0 and 3 identical; 0 is the partner of query 0
        let c = rows(vec![3, 0, 1], &[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let m = pseudo_align(&q, &c).unwrap();
        assert_eq!(m[0].best, 0);
        assert_eq!(m[0].margin, Some(0.0));
        assert_eq!(recall_from_embeddings(&q, &c).unwrap(), 1.0);
    }

    #[test]
    fn recall_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha8Rng| {
            let data = (0..40 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            EmbeddingBatch::from_flat((0..40).collect(), 3, data).unwrap()
        };
        let (q, c) = (mk(&mut rng), mk(&mut rng));
        let base = recall_from_embeddings(&q, &c).unwrap();
        assert_eq!(recall_from_embeddings(&q.scaled(3.0), &c.scaled(3.0)).unwrap(), base);
    }

    fn tiny_world() -> crate::world::GeneratedWorld {
        let mut s = crate::world::tests::spec(55, 4);
        s.hard_pair_fraction = 0.0;
        for m in &mut s.modalities {
            m.noise_sigma = 0.0;
        }
        generate_world(&s).unwrap()
    }

    #[test]
    fn match_accuracy_agrees_with_exhaustive_matcher() {
        let world = tiny_world();
        let model = TwoTowerModel::random(&world.pool.raw_dims(), &ModelConfig {
            out_dim: 4,
            depth: 1,
            hidden_dim: 8,
            init_temperature: 10.0,
        }, 9)
        .unwrap();
        let view = world.oracle.view();
        let acc = match_accuracy(&model, &world.pool, &view, 0, 1).unwrap();
        // independent matcher: normalize by hand and scan every pair
        let n = world.pool.len();
        assert!(n <= 50);
        let emb = |k: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|r| {
                    let e = model.encode_records(&world.pool, k, &[r]).unwrap();
                    let v = e.row(0).to_vec();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.iter().map(|x| x / norm).collect()
                })
                .collect()
        };
        let (a, b) = (emb(0), emb(1));
        let mut errors = 0;
        for i in 0..n {
            let sims: Vec<f64> = b.iter().map(|y| a[i].iter().zip(y).map(|(p, q)| p * q).sum()).collect();
            let best = (0..n).fold(0, |bj, j| if sims[j] > sims[bj] { j } else { bj });
            errors += usize::from(best != view.partner(0, i, 1));
        }
        assert!((acc - (1.0 - errors as f64 / n as f64)).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_trained_model_matches_everything() {
        let world = tiny_world();
        let raw = world.pool.raw_dims();
        let cfg = ModelConfig {
            out_dim: 8,
            depth: 0,
            hidden_dim: 0,
            init_temperature: 10.0,
        };
        let model = TwoTowerModel::random(&raw, &cfg, 1).unwrap();
        let mut oracle: AnnotationOracle = world.oracle.clone();
        let mut ann = AnnotationSet::new(2, world.pool.len());
        for r in 0..world.pool.len() {
            if !ann.contains(0, r) {
                ann.insert(oracle.annotate(0, r).unwrap()).unwrap();
            }
        }
        let pairs = TrainingPairs::from_annotations(&world.pool, &ann).unwrap();
        let tc = TrainConfig {
            epochs: 800,
            batch_size: 16,
            learning_rate: 0.05,
            weight_decay: 0.0,
            seed: 0,
            learn_temperature: true,
        };
        let model = train(&model, &pairs, &tc).unwrap().model;
        let view = world.oracle.view();
        assert_eq!(match_accuracy(&model, &world.pool, &view, 0, 1).unwrap(), 1.0);
        assert_eq!(recall_at_1(&model, &world.test, Direction::ImageToText).unwrap(), 1.0);
        let ids: Vec<usize> = (0..world.pool.len()).collect();
        let cs = margin_case_study(&model, &world.pool, &view, &ids, &ids).unwrap();
        assert_eq!(cs.n_incorrect, 0);
        assert_eq!(cs.mean_incorrect, None);
        assert!(cs.mean_correct.unwrap() > 0.0);
    }

    #[test]
    fn recall_needs_two_pairs() {
        let test = TestSplit {
            items: vec![0],
            modalities: vec![
                ModalityFeatures::new(2, vec![1.0, 0.0]).unwrap(),
                ModalityFeatures::new(2, vec![1.0, 0.0]).unwrap(),
            ],
        };
        let model = TwoTowerModel::random(&[2, 2], &ModelConfig {
            out_dim: 2,
            depth: 0,
            hidden_dim: 0,
            init_temperature: 10.0,
        }, 0)
        .unwrap();
        assert!(recall_at_1(&model, &test, Direction::TextToImage).is_err());
    }

    #[test]
    fn pca_of_2d_data_is_a_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..60).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b = EmbeddingBatch::from_flat((0..30).collect(), 2, data).unwrap();
        let pca = pca_2d(&b).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                let d0 = crate::embedding::dist_unchecked(b.row(i), b.row(j));
                let p = pca.coords[i];
                let q = pca.coords[j];
                let d1 = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_rank_one_has_no_second_variance() {
        let data: Vec<f64> = (0..20).flat_map(|i| [i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let b = EmbeddingBatch::from_flat((0..20).collect(), 3, data).unwrap();
        let pca = pca_2d(&b).unwrap();
        assert!(pca.variances[1] < 1e-20);
        assert!(pca.variances[0] > 0.0);
        assert!(pca_2d(&EmbeddingBatch::from_flat(vec![0, 1], 1, vec![0.0, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn pca_matches_covariance_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (n, d) = (50, 5);
        let data: Vec<f64> = (0..n * d)
            .map(|i| rng.random_range(-1.0..1.0) * (1.0 + (i % d) as f64))
            .collect();
        let b = EmbeddingBatch::from_flat((0..n).collect(), d, data).unwrap();
        let pca = pca_2d(&b).unwrap();

        let x = DMatrix::from_fn(n, d, |i, j| b.row(i)[j] - pca.mean[j]);
        let cov = x.transpose() * &x / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        assert!((pca.variances[0] - ev[0]).abs() < 1e-9);
        assert!((pca.variances[1] - ev[1]).abs() < 1e-9);

        // reconstruction error equals the discarded eigenvalue mass
        let mut err = 0.0;
        for i in 0..n {
            for j in 0..d {
                let rec = pca.coords[i][0] * pca.components[0][j] + pca.coords[i][1] * pca.components[1][j];
                err += (x[(i, j)] - rec).powi(2);
            }
        }
        let tail: f64 = ev[2..].iter().sum();
        assert!((err / (n - 1) as f64 - tail).abs() < 1e-9);
    }
}
