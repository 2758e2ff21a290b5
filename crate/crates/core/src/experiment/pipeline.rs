//! Staged experiment runner. Every stage writes its artifacts plus a
//! `stage.json` record under the output directory, and every stage reads its
//! inputs back from disk.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_splits, load_catalog, load_interactions, load_metadata, make_training_instances, Instances, SplitSpec,
};
use crate::embedstore::{project_rows, read_matrix, write_matrix, EmbeddingMatrix, Modality, Projection};
use crate::error::{Error, Result};
use crate::fusion::{
    build_catalog, early_fuse_rows, fit_gated_rqvae, make_alignment_pairs, AlignmentPair, Channel, GateNetwork,
    IdTables, Layout, TokenSequence, Vocab,
};
use crate::metrics::{evaluate, geometry_stats, EvalReport, GeometryStats, UserRanking, UserScores};
use crate::renderkit::{downsample, reference_projection, encode_with, render_text};
use crate::rvq::{self, assign_ids, resolve_collisions, RvqMode, RvqModel, SemanticId};
use crate::seq2seq::{
    align_pretrain, beam_decode, build_item_trie, init_model, loss_curve_csv, train, Example, Model,
};
use crate::tensor::Matrix;

use super::config::{digest_bytes, digest_json, DataSource, ExperimentConfig, ModalitySource, RenderSource};
use super::report::{emit_report, ReportFormat};

const STAGE_FILE: &str = "stage.json";
const SENTINEL: &str = ".incomplete";
const LOCK: &str = ".lock";

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Embed,
    Tokenize,
    Fuse,
    Train,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Tokenize => "tokenize",
            Stage::Fuse => "fuse",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    stage: String,
    key: String,
    /// Relative path to SHA-256 of every artifact the stage wrote.
    outputs: BTreeMap<String, String>,
    digest: String,
}

/// Exclusive use of an output directory for one run. The lock file is removed
/// on drop; the sentinel only once the run has finished.
#[derive(Debug)]
pub struct RunGuard {
    root: PathBuf,
}

impl RunGuard {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(Error::Locked(root.to_path_buf())),
            Err(e) => return Err(Error::io(lock, e)),
        }
        let guard = RunGuard {
            root: root.to_path_buf(),
        };
        write_bytes(&root.join(SENTINEL), b"")?;
        Ok(guard)
    }

    pub fn finish(self) -> Result<()> {
        let s = self.root.join(SENTINEL);
        fs::remove_file(&s).map_err(|e| Error::io(s, e))
    }
}

impl Drop for RunGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK));
    }
}

/// Fails when `root` holds the outputs of an unfinished run.
pub fn check_complete(root: &Path) -> Result<()> {
    if root.join(SENTINEL).exists() {
        return Err(Error::Incomplete(root.to_path_buf()));
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stays below root").to_path_buf();
            if rel != Path::new(STAGE_FILE) && rel != Path::new(SENTINEL) {
                out.push(rel);
            }
        }
    }
    Ok(())
}

fn hash_outputs(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    list_files(dir, dir, &mut files)?;
    files
        .into_iter()
        .map(|rel| {
            let p = dir.join(&rel);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let key = rel.to_string_lossy().replace('\\', "/");
            Ok((key, digest_bytes(&[&bytes])))
        })
        .collect()
}

/// Runs `build` into `dir` unless a complete record with the same key is
/// present and its artifacts are unchanged. Returns the artifacts' digest.
fn cached(dir: &Path, stage: &str, key: &str, build: impl FnOnce(&Path) -> Result<()>) -> Result<String> {
    let record_path = dir.join(STAGE_FILE);
    if record_path.exists() && !dir.join(SENTINEL).exists() {
        if let Ok(rec) = read_json::<StageRecord>(&record_path) {
            if rec.key == key && hash_outputs(dir)? == rec.outputs {
                return Ok(rec.digest);
            }
        }
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_bytes(&dir.join(SENTINEL), b"")?;
    build(dir).map_err(|e| e.in_stage(stage))?;
    let outputs = hash_outputs(dir)?;
    let digest = digest_json(&outputs);
    write_json(
        &record_path,
        &StageRecord {
            stage: stage.to_string(),
            key: key.to_string(),
            outputs,
            digest: digest.clone(),
        },
    )?;
    let s = dir.join(SENTINEL);
    fs::remove_file(&s).map_err(|e| Error::io(s, e))?;
    Ok(digest)
}

/// Which Semantic-ID tables a configuration quantizes.
fn id_channels(cfg: &ExperimentConfig) -> Vec<Channel> {
    match cfg.fusion {
        Layout::Unimodal => vec![Channel::Text],
        Layout::Early => vec![Channel::Fused],
        _ => vec![Channel::Text, Channel::Image],
    }
}

/// Embedding sources in use, keyed by the directory name under `embed/`.
fn sources(cfg: &ExperimentConfig) -> Vec<(&'static str, &ModalitySource)> {
    let mut v = Vec::new();
    if let Some(s) = &cfg.text {
        v.push(("text", s));
    }
    if let Some(s) = &cfg.image {
        v.push(("image", s));
    }
    v
}

fn channel_name(c: Channel) -> &'static str {
    match c {
        Channel::Text => "text",
        Channel::Image => "image",
        Channel::Fused => "fused",
    }
}

/// Final artifacts of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    /// Per-user scores, one list per seed.
    pub per_user: Vec<Vec<UserScores>>,
    pub geometry: Option<GeometryStats>,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

#[derive(Debug, Default)]
struct Digests {
    ingest: String,
    embed: BTreeMap<&'static str, String>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out
            .or_else(|| cfg.output_dir.clone())
            .ok_or_else(|| Error::Config("no output directory: set `output_dir` or pass --out".into()))?;
        Ok(Pipeline { cfg, out })
    }

    fn dir(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.out.clone(), |p, s| p.join(s))
    }

    fn seed_dir(&self, stage: Stage, seed: u64) -> PathBuf {
        self.dir(&[stage.name(), &format!("seed-{seed}")])
    }

    /// Runs every stage up to and including `until`. The report and geometry
    /// are produced only when `until` is [`Stage::Eval`].
    pub fn run(&self, until: Stage) -> Result<Option<RunOutcome>> {
        let guard = RunGuard::acquire(&self.out)?;
        let outcome = self.run_locked(until)?;
        guard.finish()?;
        Ok(outcome)
    }

    fn run_locked(&self, until: Stage) -> Result<Option<RunOutcome>> {
        let mut d = Digests {
            ingest: self.ingest()?,
            ..Default::default()
        };
        if until == Stage::Ingest {
            return Ok(None);
        }
        for (name, src) in sources(&self.cfg) {
            let digest = self.embed(name, src, &d.ingest)?;
            d.embed.insert(name, digest);
        }
        if until == Stage::Embed {
            return Ok(None);
        }
        let mut train_digests = BTreeMap::new();
        for &s in &self.cfg.eval.seeds {
            let tok = self.tokenize(s, &d)?;
            if until == Stage::Tokenize {
                continue;
            }
            let fuse = self.fuse(s, &tok)?;
            if until == Stage::Fuse {
                continue;
            }
            let tr = self.train_seed(s, &fuse, &d.ingest)?;
            train_digests.insert(s, (tr, fuse));
        }
        if until < Stage::Eval {
            return Ok(None);
        }
        for (&s, (tr, fuse)) in &train_digests {
            self.eval_seed(s, tr, fuse, &d.ingest)?;
        }
        let evaluation = evaluate(&self.cfg.eval.seeds, &self.cfg.eval.ks, &self.cfg.digest(), |s| {
            read_json(&self.seed_dir(Stage::Eval, s).join("rankings.json"))
        })
        .map_err(|e| e.in_stage("eval"))?;
        write_json(&self.dir(&["eval", "per_user.json"]), &evaluation.per_user)?;
        for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Table] {
            write_bytes(
                &self.out.join(format!("report.{}", f.extension())),
                emit_report(&evaluation.report, f)?.as_bytes(),
            )?;
        }
        let geometry = if self.cfg.modality_count() == 2 {
            Some(self.geometry_locked()?)
        } else {
            None
        };
        Ok(Some(RunOutcome {
            report: evaluation.report,
            per_user: evaluation.per_user,
            geometry,
            out: self.out.clone(),
        }))
    }

    /// Modality gap, anisotropy and 2D projection of the two projected modalities.
    pub fn geometry(&self) -> Result<GeometryStats> {
        let guard = RunGuard::acquire(&self.out)?;
        let mut d = Digests {
            ingest: self.ingest()?,
            ..Default::default()
        };
        for (name, src) in sources(&self.cfg) {
            d.embed.insert(name, self.embed(name, src, &d.ingest)?);
        }
        let g = self.geometry_locked()?;
        guard.finish()?;
        Ok(g)
    }

    fn geometry_locked(&self) -> Result<GeometryStats> {
        if self.cfg.modality_count() != 2 {
            return Err(Error::Config("geometry needs both a text and an image modality".into()));
        }
        let a = read_matrix(&self.dir(&["embed", "text", "projected"]))?;
        let b = read_matrix(&self.dir(&["embed", "image", "projected"]))?;
        let seed = self.cfg.eval.seeds[0];
        let g = geometry_stats(&a, &b, seed).map_err(|e| e.in_stage("geometry"))?;
        write_json(&self.out.join("geometry.json"), &g)?;
        Ok(g)
    }

    fn ingest(&self) -> Result<String> {
        let cfg = &self.cfg;
        let mut key_parts = vec![digest_json(&cfg.data), cfg.max_history.to_string()];
        if let DataSource::Files {
            interactions,
            catalog,
            metadata,
        } = &cfg.data
        {
            for p in [Some(interactions), Some(catalog), metadata.as_ref()].into_iter().flatten() {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e).in_stage("ingest"))?;
                key_parts.push(digest_bytes(&[&bytes]));
            }
        }
        let key = digest_json(&key_parts);
        cached(&self.dir(&["ingest"]), "ingest", &key, |dir| {
            let (catalog, log, desc) = match &cfg.data {
                DataSource::Synthetic(study) => {
                    let data = study.generate()?;
                    write_matrix(&data.text, &dir.join("synthetic").join("text"))?;
                    write_matrix(&data.image, &dir.join("synthetic").join("image"))?;
                    write_json(&dir.join("clusters.json"), &data.clusters)?;
                    let desc: BTreeMap<String, String> =
                        data.catalog.iter().cloned().zip(data.descriptions).collect();
                    (data.catalog, data.log, desc)
                }
                DataSource::Files {
                    interactions,
                    catalog,
                    metadata,
                } => {
                    let catalog = load_catalog(catalog)?;
                    let set: HashSet<String> = catalog.iter().cloned().collect();
                    let log = load_interactions(interactions, &set)?;
                    let mut desc = BTreeMap::new();
                    if let Some(m) = metadata {
                        for rec in load_metadata(m)? {
                            if !set.contains(&rec.item_id) {
                                return Err(Error::UnknownItem {
                                    item: rec.item_id,
                                    line: 0,
                                });
                            }
                            desc.insert(rec.item_id, rec.description);
                        }
                    }
                    (catalog, log, desc)
                }
            };
            let splits = build_splits(&log)?;
            let instances = make_training_instances(&splits, cfg.max_history)?;
            write_json(&dir.join("catalog.json"), &catalog)?;
            write_json(&dir.join("splits.json"), &splits)?;
            write_json(&dir.join("instances.json"), &instances)?;
            write_json(&dir.join("descriptions.json"), &desc)?;
            Ok(())
        })
    }

    fn embed(&self, name: &'static str, src: &ModalitySource, ingest: &str) -> Result<String> {
        let cfg = &self.cfg;
        let key = digest_json(&(ingest, name, src, cfg.projection_dim, cfg.projection_seed));
        let ingest_dir = self.dir(&["ingest"]);
        cached(&self.dir(&["embed", name]), "embed", &key, |dir| {
            let catalog: Vec<String> = read_json(&ingest_dir.join("catalog.json"))?;
            let raw = match src {
                ModalitySource::Embeddings(path) => read_matrix(path)?,
                ModalitySource::Synthetic(m) => read_matrix(&ingest_dir.join("synthetic").join(m.as_str()))?,
                ModalitySource::Render(r) => {
                    let desc: BTreeMap<String, String> = read_json(&ingest_dir.join("descriptions.json"))?;
                    render_matrix(&catalog, &desc, r, dir)?
                }
            };
            let raw = align_to_catalog(raw, &catalog)?;
            write_matrix(&raw, &dir.join("raw"))?;
            let proj = Projection::for_modality(raw.modality, raw.dim(), cfg.projection_dim, cfg.projection_seed);
            let rows = project_rows(&raw, &proj)?;
            let mut projected = EmbeddingMatrix::new(raw.modality, raw.encoder.clone(), catalog, rows)?;
            projected.metadata = raw.metadata.clone();
            write_matrix(&projected, &dir.join("projected"))?;
            Ok(())
        })
    }

    fn tokenize(&self, s: u64, d: &Digests) -> Result<String> {
        let cfg = &self.cfg;
        let mut rvq_cfg = cfg.rvq.clone();
        rvq_cfg.seed = cfg.rvq.seed.wrapping_add(s);
        let key = digest_json(&(&d.embed, &rvq_cfg, cfg.fusion.as_str(), cfg.gate_alpha, s));
        let embed_dir = self.dir(&["embed"]);
        cached(&self.seed_dir(Stage::Tokenize, s), "tokenize", &key, |dir| {
            let load = |name: &str| read_matrix(&embed_dir.join(name).join("projected"));
            let quantize = |channel: Channel, m: &EmbeddingMatrix, data: &Matrix, model: Option<RvqModel>| {
                let model = match model {
                    Some(m) => m,
                    None => rvq::fit(data, &rvq_cfg)?,
                };
                let ch = channel_name(channel);
                model.save(&dir.join(format!("rvq-{ch}")))?;
                let ids = resolve_collisions(&assign_ids(&model, &m.item_ids, data)?);
                write_json(&dir.join(format!("ids-{ch}.json")), &ids)
            };
            match cfg.fusion {
                Layout::Unimodal => {
                    let name = if cfg.text.is_some() { "text" } else { "image" };
                    let m = load(name)?;
                    quantize(Channel::Text, &m, &m.rows, None)?;
                }
                Layout::Early => {
                    let t = load("text")?;
                    let i = load("image")?;
                    let (model, gate, fused) = match rvq_cfg.mode {
                        RvqMode::KmeansRvq => {
                            let gate = GateNetwork::constant(t.dim(), cfg.gate_alpha)?;
                            let fused = early_fuse_rows(&t.rows, &i.rows, &gate)?;
                            (None, gate, fused)
                        }
                        RvqMode::Rqvae => {
                            let (model, gate, fused) = fit_gated_rqvae(&t.rows, &i.rows, &rvq_cfg)?;
                            (Some(model), gate, fused)
                        }
                    };
                    write_json(&dir.join("gate.json"), &gate)?;
                    let fm = EmbeddingMatrix::new(Modality::Text, "early-fusion", t.item_ids.clone(), fused)?;
                    quantize(Channel::Fused, &fm, &fm.rows, model)?;
                }
                _ => {
                    for (channel, name) in [(Channel::Text, "text"), (Channel::Image, "image")] {
                        let m = load(name)?;
                        quantize(channel, &m, &m.rows, None)?;
                    }
                }
            }
            Ok(())
        })
    }

    fn fuse(&self, s: u64, tokenize: &str) -> Result<String> {
        let cfg = &self.cfg;
        let key = digest_json(&(tokenize, cfg.fusion.as_str(), cfg.image_first, cfg.alignment.enabled));
        let tok_dir = self.seed_dir(Stage::Tokenize, s);
        cached(&self.seed_dir(Stage::Fuse, s), "fuse", &key, |dir| {
            let mut tables = IdTables::default();
            let mut loaded = Vec::new();
            for ch in id_channels(cfg) {
                let ids: BTreeMap<String, SemanticId> =
                    read_json(&tok_dir.join(format!("ids-{}.json", channel_name(ch))))?;
                loaded.push((ch, ids));
            }
            let refs: Vec<(Channel, &BTreeMap<String, SemanticId>)> = loaded.iter().map(|(c, m)| (*c, m)).collect();
            let vocab = Vocab::for_ids(cfg.rvq.levels, cfg.rvq.codebook_size, &refs);
            for (ch, ids) in &loaded {
                let slot = match ch {
                    Channel::Text => &mut tables.text,
                    Channel::Image => &mut tables.image,
                    Channel::Fused => &mut tables.fused,
                };
                *slot = Some(ids.clone());
            }
            let catalog = build_catalog(cfg.fusion, &tables, &vocab, cfg.image_first)?;
            build_item_trie(&catalog)?;
            write_json(&dir.join("vocab.json"), &vocab)?;
            write_json(&dir.join("sequences.json"), &catalog)?;
            if cfg.alignment.enabled {
                let pairs = make_alignment_pairs(
                    tables.image.as_ref().expect("late fusion has image IDs"),
                    tables.text.as_ref().expect("late fusion has text IDs"),
                    &vocab,
                )?;
                write_json(&dir.join("alignment.json"), &pairs)?;
            }
            Ok(())
        })
    }

    fn train_seed(&self, s: u64, fuse: &str, ingest: &str) -> Result<String> {
        let cfg = &self.cfg;
        let key = digest_json(&(fuse, ingest, &cfg.model, &cfg.train, &cfg.alignment, s));
        let fuse_dir = self.seed_dir(Stage::Fuse, s);
        let ingest_dir = self.dir(&["ingest"]);
        cached(&self.seed_dir(Stage::Train, s), "train", &key, |dir| {
            let vocab: Vocab = read_json(&fuse_dir.join("vocab.json"))?;
            let catalog: BTreeMap<String, TokenSequence> = read_json(&fuse_dir.join("sequences.json"))?;
            let instances: Instances = read_json(&ingest_dir.join("instances.json"))?;
            let mut mc = cfg.model.clone();
            mc.vocab_size = vocab.size;
            mc.seed = cfg.model.seed.wrapping_add(s);
            let mut model = init_model(&mc)?;
            if cfg.alignment.enabled {
                let pairs: Vec<AlignmentPair> = read_json(&fuse_dir.join("alignment.json"))?;
                let examples: Vec<Example> = pairs
                    .into_iter()
                    .map(|p| Example {
                        source: p.source,
                        target: p.target,
                    })
                    .collect();
                let mut tc = cfg.alignment.train.clone();
                tc.seed = tc.seed.wrapping_add(s);
                let curve = align_pretrain(&mut model, &examples, &tc)?;
                write_bytes(&dir.join("alignment_loss.csv"), loss_curve_csv(&curve).as_bytes())?;
            }
            let examples = instances
                .train
                .iter()
                .map(|inst| {
                    Ok(Example {
                        source: history_tokens(&catalog, &inst.history, mc.max_positions)?,
                        target: catalog_tokens(&catalog, &inst.target)?.to_vec(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if examples.is_empty() {
                return Err(Error::Data("no next-item training instances; user sequences are too short".into()));
            }
            let mut tc = cfg.train.clone();
            tc.seed = tc.seed.wrapping_add(s);
            let curve = train(&mut model, &examples, &tc)?;
            write_bytes(&dir.join("loss.csv"), loss_curve_csv(&curve).as_bytes())?;
            model.save(&dir.join("model"))
        })
    }

    fn eval_seed(&self, s: u64, train: &str, fuse: &str, ingest: &str) -> Result<String> {
        let cfg = &self.cfg;
        let key = digest_json(&(train, fuse, ingest, &cfg.eval.beam, cfg.eval.filter_history));
        let fuse_dir = self.seed_dir(Stage::Fuse, s);
        let train_dir = self.seed_dir(Stage::Train, s);
        let ingest_dir = self.dir(&["ingest"]);
        cached(&self.seed_dir(Stage::Eval, s), "eval", &key, |dir| {
            let catalog: BTreeMap<String, TokenSequence> = read_json(&fuse_dir.join("sequences.json"))?;
            let instances: Instances = read_json(&ingest_dir.join("instances.json"))?;
            let splits: SplitSpec = read_json(&ingest_dir.join("splits.json"))?;
            let model = Model::load(&train_dir.join("model"))?;
            let trie = build_item_trie(&catalog)?;
            let targets: BTreeMap<&str, &str> = instances
                .test
                .iter()
                .map(|i| (i.user.as_str(), i.target.as_str()))
                .collect();
            let by_user: BTreeMap<&str, _> = instances.test.iter().map(|i| (i.user.as_str(), i)).collect();
            let mut rankings = Vec::with_capacity(splits.users.len());
            for u in &splits.users {
                let ranked = match by_user.get(u.user.as_str()) {
                    Some(inst) => {
                        let context = history_tokens(&catalog, &inst.history, model.config.max_positions)?;
                        let hyps = beam_decode(&model, &context, &trie, &cfg.eval.beam)?;
                        let seen: HashSet<&str> = inst.history.iter().map(String::as_str).collect();
                        hyps.into_iter()
                            .map(|h| h.item)
                            .filter(|i| !cfg.eval.filter_history || !seen.contains(i.as_str()))
                            .collect()
                    }
                    None => Vec::new(),
                };
                rankings.push(UserRanking {
                    user: u.user.clone(),
                    target: targets.get(u.user.as_str()).map(|t| t.to_string()),
                    ranked,
                });
            }
            write_json(&dir.join("rankings.json"), &rankings)
        })
    }
}

fn catalog_tokens<'a>(catalog: &'a BTreeMap<String, TokenSequence>, item: &str) -> Result<&'a [usize]> {
    catalog
        .get(item)
        .map(|s| s.tokens.as_slice())
        .ok_or_else(|| Error::Integrity(format!("item `{item}` has no token sequence")))
}

/// Concatenated item sequences of a history, oldest items dropped until the
/// context fits `max_positions`.
pub fn history_tokens(
    catalog: &BTreeMap<String, TokenSequence>,
    history: &[String],
    max_positions: usize,
) -> Result<Vec<usize>> {
    let seqs = history
        .iter()
        .map(|h| catalog_tokens(catalog, h))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0;
    let mut start = seqs.len();
    while start > 0 && total + seqs[start - 1].len() <= max_positions {
        start -= 1;
        total += seqs[start].len();
    }
    if start == seqs.len() && !seqs.is_empty() {
        return Err(Error::Config(format!(
            "max_positions {max_positions} cannot hold a single item sequence"
        )));
    }
    Ok(seqs[start..].concat())
}

/// Rows reordered to `catalog`; rows for items outside the catalog are dropped.
fn align_to_catalog(m: EmbeddingMatrix, catalog: &[String]) -> Result<EmbeddingMatrix> {
    if m.item_ids == catalog {
        return Ok(m);
    }
    let index = m.index_of();
    let missing: Vec<String> = catalog
        .iter()
        .filter(|c| !index.contains_key(c.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    let mut rows = Matrix::zeros(catalog.len(), m.dim());
    for (i, id) in catalog.iter().enumerate() {
        rows.row_mut(i).copy_from_slice(m.row(index[id.as_str()]));
    }
    let mut out = EmbeddingMatrix::new(m.modality, m.encoder.clone(), catalog.to_vec(), rows)?;
    out.metadata = m.metadata;
    Ok(out)
}

/// Renders each description, box-filters it to the configured resolution and
/// encodes it with the reference visual encoder.
fn render_matrix(
    catalog: &[String],
    desc: &BTreeMap<String, String>,
    r: &RenderSource,
    dir: &Path,
) -> Result<EmbeddingMatrix> {
    let proj = reference_projection(r.encode_dim, r.encoder_seed);
    let mut rows = Matrix::zeros(catalog.len(), r.encode_dim);
    for (i, id) in catalog.iter().enumerate() {
        let text = desc.get(id).map(String::as_str).unwrap_or("");
        let img = render_text(text, &r.render)?;
        let img = if r.resolution == img.width {
            img
        } else {
            downsample(&img, r.resolution)?
        };
        if i < r.export_png {
            img.write_png(&dir.join("png").join(format!("{id}.png")))?;
        }
        rows.row_mut(i).copy_from_slice(&encode_with(&img, &proj)?);
    }
    let mut m = EmbeddingMatrix::new(Modality::OcrText, "renderkit-reference", catalog.to_vec(), rows)?;
    m.metadata.insert("resolution".into(), r.resolution.into());
    m.metadata.insert("canvas".into(), r.render.canvas.into());
    m.metadata.insert("encoder_seed".into(), r.encoder_seed.into());
    Ok(m)
}
