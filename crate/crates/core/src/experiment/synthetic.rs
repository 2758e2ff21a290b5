//! Self-contained study: clustered item embeddings, users walking between
//! clusters, and pseudo-word descriptions for the rendering route.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Interaction, InteractionLog};
use crate::embedstore::{synthesize_embeddings, EmbeddingMatrix, SynthSpec};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticStudy {
    pub n_items: usize,
    pub n_clusters: usize,
    pub n_users: usize,
    pub dim: usize,
    pub cross_modal_correlation: f64,
    pub subclusters: usize,
    pub sub_spread: f64,
    pub noise: f64,
    pub min_length: usize,
    pub max_length: usize,
    /// Probability that the next interaction stays in the current cluster.
    pub stay_probability: f64,
    /// Permutes embedding rows across items, so IDs no longer reflect the
    /// clusters users move between.
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for SyntheticStudy {
    fn default() -> Self {
        SyntheticStudy {
            n_items: 200,
            n_clusters: 8,
            n_users: 300,
            dim: 64,
            cross_modal_correlation: 0.8,
            subclusters: 4,
            sub_spread: 0.5,
            noise: 0.1,
            min_length: 5,
            max_length: 15,
            stay_probability: 0.8,
            shuffle_labels: false,
            seed: 0,
        }
    }
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ren", "tu", "sa", "vex", "di", "nor", "pa", "qui", "zu", "bel", "fo", "gra", "hin",
];
const WORDS_PER_CLUSTER: usize = 6;

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub catalog: Vec<String>,
    pub log: InteractionLog,
    pub text: EmbeddingMatrix,
    pub image: EmbeddingMatrix,
    /// Content cluster of every item, catalog order.
    pub clusters: Vec<usize>,
    pub descriptions: Vec<String>,
}

impl SyntheticStudy {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("synthetic study: {m}")));
        if self.n_users == 0 {
            return err("n_users must be positive");
        }
        if self.min_length < crate::corpus::MIN_INTERACTIONS || self.max_length < self.min_length {
            return err("need 3 <= min_length <= max_length");
        }
        if !(0.0..=1.0).contains(&self.stay_probability) {
            return err("stay_probability must lie in [0, 1]");
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_items {
            return err("need 1 <= n_clusters <= n_items");
        }
        Ok(())
    }

    fn embedding_spec(&self) -> SynthSpec {
        SynthSpec {
            subclusters: self.subclusters,
            sub_spread: self.sub_spread,
            noise: self.noise,
            ..SynthSpec::new(
                self.n_items,
                self.dim,
                self.n_clusters,
                self.cross_modal_correlation,
                self.seed,
            )
        }
    }

    pub fn generate(&self) -> Result<SyntheticData> {
        self.validate()?;
        let emb = synthesize_embeddings(&self.embedding_spec())?;
        let catalog = emb.text.item_ids.clone();
        let clusters = emb.text_labels.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f05_e5e5);

        let mut members: Vec<Vec<usize>> = vec![Vec::new(); self.n_clusters];
        for (i, &c) in clusters.iter().enumerate() {
            members[c].push(i);
        }
        let mut records = Vec::new();
        for u in 0..self.n_users {
            let user = format!("user{u:05}");
            let len = rng.random_range(self.min_length..=self.max_length);
            let mut c = rng.random_range(0..self.n_clusters);
            for t in 0..len {
                if t > 0 && rng.random::<f64>() >= self.stay_probability {
                    // sparse transition structure: each cluster leads to one successor
                    c = (c + 1) % self.n_clusters;
                }
                let item = *members[c].choose(&mut rng).expect("every cluster is populated");
                records.push(Interaction {
                    user: user.clone(),
                    item: catalog[item].clone(),
                    timestamp: t as i64,
                });
            }
        }
        let log = InteractionLog::from_records(records);

        let lexicon = cluster_lexicon(self.n_clusters, &mut rng);
        let descriptions = clusters
            .iter()
            .enumerate()
            .map(|(i, &c)| describe(&catalog[i], &lexicon[c], &lexicon, &mut rng))
            .collect();

        let (mut text, mut image) = (emb.text, emb.image);
        if self.shuffle_labels {
            let mut perm: Vec<usize> = (0..self.n_items).collect();
            perm.shuffle(&mut rng);
            text.rows = permute_rows(&text.rows, &perm);
            image.rows = permute_rows(&image.rows, &perm);
        }
        Ok(SyntheticData {
            catalog,
            log,
            text,
            image,
            clusters,
            descriptions,
        })
    }
}

fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(p));
    }
    out
}

fn cluster_lexicon(n_clusters: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    (0..n_clusters)
        .map(|_| {
            (0..WORDS_PER_CLUSTER)
                .map(|_| {
                    let n = rng.random_range(2..=3);
                    (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
                })
                .collect()
        })
        .collect()
}

fn describe(id: &str, own: &[String], all: &[Vec<String>], rng: &mut ChaCha8Rng) -> String {
    let mut words = vec![id.to_string()];
    for _ in 0..8 {
        // mostly the item's own cluster vocabulary, occasionally another's
        let pool = if rng.random::<f64>() < 0.85 {
            own
        } else {
            all.choose(rng).expect("non-empty")
        };
        words.push(pool.choose(rng).expect("non-empty").clone());
    }
    words.join(" ")
}
