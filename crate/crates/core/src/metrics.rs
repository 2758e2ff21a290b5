//! Leave-one-out ranking metrics, seed aggregation, paired t-test and
//! embedding geometry diagnostics.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::embedstore::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::tensor::{cosine, dot};

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const MAX_ANISOTROPY_PAIRS: usize = 10_000;

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("cutoff K must be >= 1".into()));
    }
    Ok(())
}

/// 1-based rank of `target` in `ranked`.
fn rank_of(ranked: &[String], target: &str) -> Option<usize> {
    ranked.iter().position(|r| r == target).map(|p| p + 1)
}

pub fn recall_at_k(ranked: &[String], target: &str, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    })
}

/// Single relevant item, so the ideal DCG is 1.
pub fn ndcg_at_k(ranked: &[String], target: &str, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    })
}

/// One user's ranked list for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRanking {
    pub user: String,
    pub target: Option<String>,
    pub ranked: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserScores {
    pub user: String,
    /// Aligned with the report's `ks`.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    /// Aligned with the report's `ks`.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub users: usize,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedMetrics>,
    pub mean: MetricSet,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: MetricSet,
    pub config_digest: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.per_seed.is_empty() {
            return Err(Error::Contract("report has no seeds".into()));
        }
        if self.ks.is_empty() {
            return Err(Error::Contract("report has no cutoffs".into()));
        }
        Ok(())
    }

    pub fn k_index(&self, k: usize) -> Option<usize> {
        self.ks.iter().position(|&x| x == k)
    }
}

/// Per-user recall and NDCG at every cutoff.
pub fn score_rankings(rankings: &[UserRanking], ks: &[usize]) -> Result<Vec<UserScores>> {
    for &k in ks {
        check_k(k)?;
    }
    rankings
        .iter()
        .map(|r| {
            let target = r
                .target
                .as_deref()
                .ok_or_else(|| Error::Protocol(format!("user {} has no test target", r.user)))?;
            Ok(UserScores {
                user: r.user.clone(),
                recall: ks.iter().map(|&k| recall_at_k(&r.ranked, target, k)).collect::<Result<_>>()?,
                ndcg: ks.iter().map(|&k| ndcg_at_k(&r.ranked, target, k)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

fn column_means(scores: &[UserScores], pick: impl Fn(&UserScores) -> &Vec<f64>, n_k: usize) -> Vec<f64> {
    (0..n_k)
        .map(|j| scores.iter().map(|s| pick(s)[j]).sum::<f64>() / scores.len() as f64)
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Evaluation result plus the per-user scores behind it (one list per seed).
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub per_user: Vec<Vec<UserScores>>,
}

/// Runs `rank_for_seed` for every seed, scores each user, and aggregates in seed order.
pub fn evaluate(
    seeds: &[u64],
    ks: &[usize],
    config_digest: &str,
    mut rank_for_seed: impl FnMut(u64) -> Result<Vec<UserRanking>>,
) -> Result<Evaluation> {
    if seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one seed".into()));
    }
    if ks.is_empty() {
        return Err(Error::Config("evaluation needs at least one cutoff".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut per_user = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let rankings = rank_for_seed(seed)?;
        if rankings.is_empty() {
            return Err(Error::Protocol(format!("seed {seed} produced no test users")));
        }
        let scores = score_rankings(&rankings, ks)?;
        per_seed.push(SeedMetrics {
            seed,
            users: scores.len(),
            recall: column_means(&scores, |s| &s.recall, ks.len()),
            ndcg: column_means(&scores, |s| &s.ndcg, ks.len()),
        });
        per_user.push(scores);
    }
    let agg = |pick: &dyn Fn(&SeedMetrics) -> &Vec<f64>| -> (Vec<f64>, Vec<f64>) {
        (0..ks.len())
            .map(|j| mean_std(&per_seed.iter().map(|m| pick(m)[j]).collect::<Vec<_>>()))
            .unzip()
    };
    let (recall_mean, recall_std) = agg(&|m| &m.recall);
    let (ndcg_mean, ndcg_std) = agg(&|m| &m.ndcg);
    Ok(Evaluation {
        report: EvalReport {
            ks: ks.to_vec(),
            seeds: seeds.to_vec(),
            per_seed,
            mean: MetricSet {
                recall: recall_mean,
                ndcg: ndcg_mean,
            },
            std: MetricSet {
                recall: recall_std,
                ndcg: ndcg_std,
            },
            config_digest: config_digest.to_string(),
        },
        per_user,
    })
}

/// Each user's score at cutoff index `j`, averaged over seeds. Users are
/// matched by name and returned in first-seed order.
pub fn user_means(per_user: &[Vec<UserScores>], j: usize, recall: bool) -> Vec<(String, f64)> {
    let mut order = Vec::new();
    let mut sums: HashMap<&str, (f64, usize)> = HashMap::new();
    for seed in per_user {
        for s in seed {
            let v = if recall { s.recall[j] } else { s.ndcg[j] };
            let e = sums.entry(&s.user).or_insert_with(|| {
                order.push(s.user.clone());
                (0.0, 0)
            });
            e.0 += v;
            e.1 += 1;
        }
    }
    order
        .into_iter()
        .map(|u| {
            let (s, n) = sums[u.as_str()];
            (u, s / n as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TTest {
    Test { t: f64, df: f64, p_value: f64, mean_diff: f64 },
    /// All paired differences are identical, so the statistic is undefined.
    Degenerate { mean_diff: f64 },
}

impl TTest {
    pub fn p_value(&self) -> Option<f64> {
        match self {
            TTest::Test { p_value, .. } => Some(*p_value),
            TTest::Degenerate { .. } => None,
        }
    }
}

/// Two-sided paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Contract("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_std(&d);
    if !(sd > 0.0) {
        return Ok(TTest::Degenerate { mean_diff: mean });
    }
    let n = d.len() as f64;
    let t = mean / (sd / n.sqrt());
    let df = n - 1.0;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Data(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest::Test {
        t,
        df,
        p_value: p,
        mean_diff: mean,
    })
}

/// `100 · (low − high) / high`
pub fn relative_change(low: f64, high: f64) -> f64 {
    100.0 * (low - high) / high
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub item: String,
    /// 0 for the first matrix, 1 for the second.
    pub source: u8,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryStats {
    pub pairs: usize,
    /// Mean of `1 − cos` over paired rows.
    pub modality_gap: f64,
    pub anisotropy_a: f64,
    pub anisotropy_b: f64,
    /// Top-2 principal coordinates of the stacked, mean-centred paired rows.
    pub projection: Vec<ProjectedPoint>,
}

/// Mean pairwise cosine over all pairs, or over `MAX_ANISOTROPY_PAIRS` sampled
/// pairs when there are more.
pub fn anisotropy(rows: &[&[f64]], seed: u64) -> f64 {
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let total = n * (n - 1) / 2;
    if total <= MAX_ANISOTROPY_PAIRS {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += cosine(rows[i], rows[j]);
            }
        }
        return s / total as f64;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = 0.0;
    for _ in 0..MAX_ANISOTROPY_PAIRS {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        s += cosine(rows[i], rows[j]);
    }
    s / MAX_ANISOTROPY_PAIRS as f64
}

fn check_unit_rows(m: &EmbeddingMatrix) -> Result<()> {
    for (i, id) in m.item_ids.iter().enumerate() {
        let r = m.rows.row(i);
        let n = dot(r, r).sqrt();
        if (n - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!(
                "row for {id} has norm {n}; geometry needs unit-normalized rows"
            )));
        }
    }
    Ok(())
}

/// PCA onto two axes. Each axis is signed so its largest-magnitude loading is positive.
pub fn pca_2d(rows: &[&[f64]]) -> Vec<(f64, f64)> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if n == 0 || d == 0 {
        return Vec::new();
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(*r) {
            *m += x / n as f64;
        }
    }
    let centred = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap().then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if lead < 0.0 {
                v.iter().map(|x| -x).collect()
            } else {
                v
            }
        })
        .collect();
    let proj = |i: usize, a: usize| -> f64 {
        axes.get(a)
            .map_or(0.0, |ax| (0..d).map(|j| centred[(i, j)] * ax[j]).sum())
    };
    (0..n).map(|i| (proj(i, 0), proj(i, 1))).collect()
}

/// Joins `a` and `b` on item id (in `a`'s order) and computes the diagnostics.
pub fn geometry_stats(a: &EmbeddingMatrix, b: &EmbeddingMatrix, seed: u64) -> Result<GeometryStats> {
    check_unit_rows(a)?;
    check_unit_rows(b)?;
    let b_index: HashMap<&str, usize> = b.item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let pairs: Vec<(usize, usize)> = a
        .item_ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| b_index.get(id.as_str()).map(|&j| (i, j)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Pairing);
    }
    let rows_a: Vec<&[f64]> = pairs.iter().map(|&(i, _)| a.rows.row(i)).collect();
    let rows_b: Vec<&[f64]> = pairs.iter().map(|&(_, j)| b.rows.row(j)).collect();
    let gap = rows_a
        .iter()
        .zip(&rows_b)
        .map(|(x, y)| 1.0 - cosine(x, y))
        .sum::<f64>()
        / pairs.len() as f64;
    let stacked: Vec<&[f64]> = rows_a.iter().chain(&rows_b).copied().collect();
    let coords = pca_2d(&stacked);
    let projection = coords
        .into_iter()
        .enumerate()
        .map(|(k, (x, y))| {
            let (src, p) = if k < pairs.len() { (0, k) } else { (1, k - pairs.len()) };
            ProjectedPoint {
                item: a.item_ids[pairs[p].0].clone(),
                source: src,
                x,
                y,
            }
        })
        .collect();
    Ok(GeometryStats {
        pairs: pairs.len(),
        modality_gap: gap.clamp(0.0, 2.0),
        anisotropy_a: anisotropy(&rows_a, seed),
        anisotropy_b: anisotropy(&rows_b, seed.wrapping_add(1)),
        projection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::Modality;
    use crate::tensor::Matrix;

    fn items(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn recall_and_ndcg_points() {
        let ranked = items(&["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k"]);
        assert_eq!(recall_at_k(&ranked, "a", 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ranked, "f", 5).unwrap(), 0.0);
        assert_eq!(recall_at_k(&ranked, "zz", 20).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&ranked, "a", 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&ranked, "c", 5).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&ranked, "k", 10).unwrap(), 0.0);
        assert!(matches!(recall_at_k(&ranked, "a", 0), Err(Error::Config(_))));
        assert!(matches!(ndcg_at_k(&ranked, "a", 0), Err(Error::Config(_))));
    }

    fn two_user_fixture() -> Vec<UserRanking> {
        vec![
            UserRanking {
                user: "u1".into(),
                target: Some("x".into()),
                ranked: items(&["x", "y", "z"]),
            },
            UserRanking {
                user: "u2".into(),
                target: Some("z".into()),
                ranked: items(&["x", "y", "z"]),
            },
        ]
    }

    #[test]
    fn hand_built_fixture() {
        let ev = evaluate(&[0], &[5], "d", |_| Ok(two_user_fixture())).unwrap();
        assert_eq!(ev.report.mean.recall, vec![1.0]);
        assert_eq!(ev.report.mean.ndcg, vec![0.75]);
    }

    #[test]
    fn perfect_memorizer() {
        let rankings: Vec<UserRanking> = (0..3)
            .map(|u| UserRanking {
                user: format!("u{u}"),
                target: Some(format!("t{u}")),
                ranked: vec![format!("t{u}"), "other".into()],
            })
            .collect();
        let ev = evaluate(&DEFAULT_SEEDS, &DEFAULT_KS, "d", |_| Ok(rankings.clone())).unwrap();
        assert_eq!(ev.report.mean.recall[0], 1.0);
        assert_eq!(ev.report.mean.ndcg[0], 1.0);
        assert_eq!(ev.report.std.recall, vec![0.0; 3]);
        assert_eq!(ev.report.seeds.len(), 5);
    }

    #[test]
    fn missing_target_is_protocol_error() {
        let mut r = two_user_fixture();
        r[1].target = None;
        assert!(matches!(evaluate(&[0], &[5], "d", |_| Ok(r.clone())), Err(Error::Protocol(_))));
        assert!(matches!(evaluate(&[], &[5], "d", |_| Ok(vec![])), Err(Error::Config(_))));
    }

    #[test]
    fn std_across_seeds() {
        let ev = evaluate(&[0, 1], &[1], "d", |s| {
            let mut r = two_user_fixture();
            if s == 1 {
                r[0].ranked.reverse();
            }
            Ok(r)
        })
        .unwrap();
        // seed 0: recall@1 = 0.5, seed 1: 0.0
        assert!((ev.report.mean.recall[0] - 0.25).abs() < 1e-12);
        assert!((ev.report.std.recall[0] - (0.125f64).sqrt()).abs() < 1e-12);
        let means = user_means(&ev.per_user, 0, true);
        assert_eq!(means, vec![("u1".to_string(), 0.5), ("u2".to_string(), 0.0)]);
    }

    /// Two-sided p-value by Simpson integration of the t density (odd df only,
    /// where Γ((ν+1)/2) / Γ(ν/2) has a closed product form).
    fn reference_p(t: f64, df: u32) -> f64 {
        assert!(df % 2 == 1);
        let nu = df as f64;
        // Γ((ν+1)/2) = ((ν−1)/2)!  and  Γ(ν/2) = √π · Π_{k<(ν−1)/2} (k + 1/2)
        let half = (df - 1) / 2;
        let num: f64 = (1..=half).map(|k| k as f64).product();
        let den: f64 = std::f64::consts::PI.sqrt() * (0..half).map(|k| k as f64 + 0.5).product::<f64>();
        let c = num / den / (nu * std::f64::consts::PI).sqrt();
        let pdf = |x: f64| c * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
        let n = 200_000;
        let h = t / n as f64;
        let mut s = pdf(0.0) + pdf(t);
        for i in 1..n {
            s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let inner = s * h / 3.0;
        1.0 - 2.0 * inner
    }

    #[test]
    fn t_test_against_reference() {
        let a: Vec<f64> = (0..10).map(|i| if i == 3 { 0.4 } else { 0.6 }).collect();
        let b = vec![0.5; 10];
        let r = paired_t_test(&a, &b).unwrap();
        let TTest::Test { t, df, p_value, .. } = r else { panic!("degenerate") };
        assert!((t - 4.0).abs() < 1e-9);
        assert_eq!(df, 9.0);
        let oracle = reference_p(4.0, 9);
        assert!((p_value - oracle).abs() < 1e-3, "{p_value} vs {oracle}");
        assert!((oracle - 0.0031).abs() < 2e-4);
        let swapped = paired_t_test(&b, &a).unwrap().p_value().unwrap();
        assert!((swapped - p_value).abs() < 1e-15);
    }

    #[test]
    fn t_test_degenerate_and_contracts() {
        let a = [0.1, 0.2, 0.3];
        assert!(matches!(paired_t_test(&a, &a).unwrap(), TTest::Degenerate { .. }));
        assert!(paired_t_test(&a, &a[..2]).is_err());
        assert!(paired_t_test(&a[..1], &a[..1]).is_err());
    }

    #[test]
    fn relative_change_matches_table_convention() {
        assert_eq!(format!("{:+.2}", relative_change(0.0570, 0.0586)), "-2.73");
    }

    fn matrix(ids: &[&str], rows: Vec<Vec<f64>>) -> EmbeddingMatrix {
        EmbeddingMatrix::new(Modality::Text, "t", items(ids), Matrix::from_rows(&rows)).unwrap()
    }

    #[test]
    fn identical_matrices_have_no_gap() {
        let m = matrix(&["a", "b"], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = geometry_stats(&m, &m, 0).unwrap();
        assert!(g.modality_gap.abs() < 1e-12);
        assert!(g.anisotropy_a.abs() < 1e-12);
        assert_eq!(g.projection.len(), 4);
    }

    #[test]
    fn orthonormal_rows_are_isotropic() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| (0..6).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        assert_eq!(anisotropy(&refs, 0), 0.0);
    }

    #[test]
    fn random_unit_vectors_near_zero_anisotropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Matrix::randn(1000, 64, 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|i| {
                let n = dot(m.row(i), m.row(i)).sqrt();
                m.row(i).iter().map(|x| x / n).collect()
            })
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        assert!(anisotropy(&refs, 7).abs() < 0.05);
    }

    #[test]
    fn pairing_and_norm_errors() {
        let a = matrix(&["a"], vec![vec![1.0, 0.0]]);
        let b = matrix(&["b"], vec![vec![0.0, 1.0]]);
        assert!(matches!(geometry_stats(&a, &b, 0), Err(Error::Pairing)));
        let c = matrix(&["a"], vec![vec![2.0, 0.0]]);
        assert!(matches!(geometry_stats(&a, &c, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn projection_is_centred() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Matrix::randn(40, 5, 1.0, &mut rng);
        let rows: Vec<&[f64]> = (0..40).map(|i| m.row(i)).collect();
        let p = pca_2d(&rows);
        let (sx, sy) = p.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        assert!(sx.abs() / 40.0 < 1e-9 && sy.abs() / 40.0 < 1e-9);
        let vx: f64 = p.iter().map(|q| q.0 * q.0).sum();
        let vy: f64 = p.iter().map(|q| q.1 * q.1).sum();
        assert!(vx >= vy);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn monotone_in_k(perm in Just((0..30).collect::<Vec<usize>>()).prop_shuffle(), target in 0usize..35) {
                let ranked: Vec<String> = perm.iter().map(|i| format!("i{i}")).collect();
                let t = format!("i{target}");
                let mut prev = (0.0, 0.0);
                for k in 1..=32 {
                    let r = recall_at_k(&ranked, &t, k).unwrap();
                    let n = ndcg_at_k(&ranked, &t, k).unwrap();
                    prop_assert!(r >= prev.0 && n >= prev.1);
                    prop_assert!(r >= n);
                    prev = (r, n);
                }
            }
        }
    }
}
