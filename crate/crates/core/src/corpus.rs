//! Interaction ingestion, leave-one-out splits and sliding-window instances.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Users with fewer interactions than this are dropped on ingestion.
pub const MIN_INTERACTIONS: usize = 3;

/// Default maximum history length, in items.
pub const DEFAULT_MAX_HISTORY: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Chronologically ordered interactions of one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: String,
    pub items: Vec<String>,
    pub timestamps: Vec<i64>,
}

/// Interactions grouped per user, users ordered by id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub users: Vec<UserSequence>,
}

impl InteractionLog {
    /// Groups records by user, orders each user's records by timestamp (ties keep
    /// input order) and drops users below [`MIN_INTERACTIONS`].
    pub fn from_records(records: impl IntoIterator<Item = Interaction>) -> Self {
        let mut grouped: BTreeMap<String, Vec<(i64, String)>> = BTreeMap::new();
        for r in records {
            grouped.entry(r.user).or_default().push((r.timestamp, r.item));
        }
        let users = grouped
            .into_iter()
            .filter(|(_, recs)| recs.len() >= MIN_INTERACTIONS)
            .map(|(user, mut recs)| {
                // stable sort: equal timestamps stay in input order
                recs.sort_by_key(|(ts, _)| *ts);
                let (timestamps, items) = recs.into_iter().unzip();
                UserSequence {
                    user,
                    items,
                    timestamps,
                }
            })
            .collect();
        InteractionLog { users }
    }

    pub fn num_records(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }

    pub fn items(&self) -> HashSet<&str> {
        self.users
            .iter()
            .flat_map(|u| u.items.iter().map(String::as_str))
            .collect()
    }
}

/// Parses a `user<TAB>item<TAB>timestamp` file. Every item must be in `catalog`.
pub fn load_interactions(path: &Path, catalog: &HashSet<String>) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, catalog)
}

pub fn parse_interactions(text: &str, catalog: &HashSet<String>) -> Result<InteractionLog> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let timestamp = fields[2].trim().parse::<i64>().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("bad timestamp `{}`: {e}", fields[2]),
        })?;
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty user or item id".into(),
            });
        }
        if !catalog.contains(item) {
            return Err(Error::UnknownItem {
                item: item.to_string(),
                line: line_no,
            });
        }
        records.push(Interaction {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        });
    }
    Ok(InteractionLog::from_records(records))
}

/// Reads a JSON list of item ids.
pub fn load_catalog(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ids: Vec<String> = serde_json::from_str(&text)?;
    let mut seen = HashSet::new();
    for id in &ids {
        if !seen.insert(id) {
            return Err(Error::Data(format!("duplicate catalog item `{id}`")));
        }
    }
    Ok(ids)
}

/// One line of the item metadata file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMetadata {
    pub item_id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub image_path: Option<String>,
}

/// Reads JSONL item metadata, one object per line; blank lines are skipped.
pub fn load_metadata(path: &Path) -> Result<Vec<ItemMetadata>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metadata(&text)
}

pub fn parse_metadata(text: &str) -> Result<Vec<ItemMetadata>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: ItemMetadata = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(m.item_id.clone()) {
            return Err(Error::Data(format!("duplicate metadata item `{}`", m.item_id)));
        }
        out.push(m);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user: String,
    pub train: Vec<String>,
    pub valid: String,
    pub test: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub users: Vec<UserSplit>,
}

/// Leave-one-out: last item is test, second to last validation, rest training.
pub fn build_splits(log: &InteractionLog) -> Result<SplitSpec> {
    let users = log
        .users
        .iter()
        .map(|u| {
            let n = u.items.len();
            if n < MIN_INTERACTIONS {
                return Err(Error::Contract(format!(
                    "user `{}` has {n} interactions, need at least {MIN_INTERACTIONS}",
                    u.user
                )));
            }
            Ok(UserSplit {
                user: u.user.clone(),
                train: u.items[..n - 2].to_vec(),
                valid: u.items[n - 2].clone(),
                test: u.items[n - 1].clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SplitSpec { users })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub user: String,
    pub history: Vec<String>,
    pub target: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instances {
    pub train: Vec<TrainingInstance>,
    pub valid: Vec<TrainingInstance>,
    pub test: Vec<TrainingInstance>,
}

fn tail(items: &[String], max_history: usize) -> Vec<String> {
    items[items.len().saturating_sub(max_history)..].to_vec()
}

/// Sliding-window next-item instances over each training prefix, plus one
/// validation and one test instance per user.
///
/// The validation history is the training prefix; the test history is the
/// training prefix followed by the validation item. Histories keep their last
/// `max_history` items.
pub fn make_training_instances(split: &SplitSpec, max_history: usize) -> Result<Instances> {
    if max_history == 0 {
        return Err(Error::Config("maximum history length must be >= 1".into()));
    }
    let mut out = Instances::default();
    for u in &split.users {
        for k in 1..u.train.len() {
            out.train.push(TrainingInstance {
                user: u.user.clone(),
                history: tail(&u.train[..k], max_history),
                target: u.train[k].clone(),
            });
        }
        out.valid.push(TrainingInstance {
            user: u.user.clone(),
            history: tail(&u.train, max_history),
            target: u.valid.clone(),
        });
        let mut full = u.train.clone();
        full.push(u.valid.clone());
        out.test.push(TrainingInstance {
            user: u.user.clone(),
            history: tail(&full, max_history),
            target: u.test.clone(),
        });
    }
    Ok(out)
}
