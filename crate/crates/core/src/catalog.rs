//! Interaction logs and item metadata: ingestion with frequency filtering,
//! chronological user sequences, leave-one-out folds and negative sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{derive_seed, read_jsonl_numbered};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub description: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

impl Item {
    pub fn new(item_id: impl Into<String>, description: impl Into<String>) -> Self {
        Item {
            item_id: item_id.into(),
            description: description.into(),
            image_ref: None,
            summary: None,
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, timestamp: i64) -> Self {
        Interaction {
            user_id: user_id.into(),
            item_id: item_id.into(),
            timestamp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub min_user_interactions: usize,
    pub min_item_interactions: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            min_user_interactions: 5,
            min_item_interactions: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub raw_interactions: usize,
    pub duplicates_removed: usize,
    pub filter_rounds: usize,
    pub users_removed: usize,
    pub items_removed: usize,
    pub interactions_removed: usize,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

/// Filtered items and interactions. Immutable once built.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    items: BTreeMap<String, Item>,
    interactions: Vec<Interaction>,
}

impl Catalog {
    /// Reads both line-delimited files and builds a filtered catalog.
    ///
    /// Relative `image_ref` paths are resolved against the items file's
    /// directory.
    pub fn ingest(
        interactions_file: &Path,
        items_file: &Path,
        thresholds: Thresholds,
    ) -> Result<(Catalog, IngestReport)> {
        let base = items_file.parent().unwrap_or_else(|| Path::new(""));
        let mut items = Vec::new();
        for (line, mut item) in read_jsonl_numbered::<Item>(items_file)? {
            if let Some(image_ref) = &item.image_ref {
                item.image_ref = Some(resolve_image_ref(base, image_ref));
            }
            items.push((line, item));
        }

        let mut interactions = Vec::new();
        for (line, record) in read_jsonl_numbered::<Interaction>(interactions_file)? {
            if record.timestamp < 0 {
                return Err(Error::Parse {
                    path: interactions_file.to_path_buf(),
                    line,
                    message: format!("negative timestamp {}", record.timestamp),
                });
            }
            interactions.push((line, record));
        }

        Catalog::build(items, interactions, thresholds)
    }

    /// Builds a catalog from in-memory records; line numbers are synthesized
    /// from positions.
    pub fn from_records(
        items: Vec<Item>,
        interactions: Vec<Interaction>,
        thresholds: Thresholds,
    ) -> Result<(Catalog, IngestReport)> {
        let items = items.into_iter().enumerate().map(|(i, it)| (i + 1, it)).collect();
        let interactions = interactions
            .into_iter()
            .enumerate()
            .map(|(i, it)| (i + 1, it))
            .collect();
        Catalog::build(items, interactions, thresholds)
    }

    fn build(
        items: Vec<(usize, Item)>,
        interactions: Vec<(usize, Interaction)>,
        thresholds: Thresholds,
    ) -> Result<(Catalog, IngestReport)> {
        let mut catalog_items = BTreeMap::new();
        for (line, item) in items {
            if item.description.trim().is_empty() {
                return Err(Error::Data(format!(
                    "items line {line}: item {} has an empty description",
                    item.item_id
                )));
            }
            if catalog_items.contains_key(&item.item_id) {
                return Err(Error::Data(format!(
                    "items line {line}: duplicate item_id {}",
                    item.item_id
                )));
            }
            catalog_items.insert(item.item_id.clone(), item);
        }

        if interactions.is_empty() {
            return Err(Error::Data("no interactions".into()));
        }
        let mut report = IngestReport {
            raw_interactions: interactions.len(),
            ..Default::default()
        };

        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(interactions.len());
        for (line, interaction) in interactions {
            if !catalog_items.contains_key(&interaction.item_id) {
                return Err(Error::Data(format!(
                    "interactions line {line}: unknown item_id {}",
                    interaction.item_id
                )));
            }
            if seen.insert(interaction.clone()) {
                kept.push(interaction);
            } else {
                report.duplicates_removed += 1;
            }
        }

        let initial_users: BTreeSet<&str> = kept.iter().map(|i| i.user_id.as_str()).collect();
        let initial_users = initial_users.len();
        let initial_items = catalog_items.len();
        let deduped = kept.len();

        loop {
            report.filter_rounds += 1;
            let mut per_user: HashMap<&str, usize> = HashMap::new();
            let mut per_item: HashMap<&str, usize> = HashMap::new();
            for i in &kept {
                *per_user.entry(&i.user_id).or_default() += 1;
                *per_item.entry(&i.item_id).or_default() += 1;
            }
            let before = kept.len();
            let keep: Vec<bool> = kept
                .iter()
                .map(|i| {
                    per_user[i.user_id.as_str()] >= thresholds.min_user_interactions
                        && per_item[i.item_id.as_str()] >= thresholds.min_item_interactions
                })
                .collect();
            let mut flags = keep.into_iter();
            kept.retain(|_| flags.next().unwrap_or(false));
            if kept.len() == before {
                break;
            }
        }

        if thresholds.min_item_interactions > 0 {
            let live: HashSet<&str> = kept.iter().map(|i| i.item_id.as_str()).collect();
            catalog_items.retain(|id, _| live.contains(id.as_str()));
        }
        if kept.is_empty() {
            return Err(Error::Data(
                "no interactions survive frequency filtering".into(),
            ));
        }

        let users: BTreeSet<&str> = kept.iter().map(|i| i.user_id.as_str()).collect();
        report.users = users.len();
        report.items = catalog_items.len();
        report.interactions = kept.len();
        report.users_removed = initial_users - report.users;
        report.items_removed = initial_items - report.items;
        report.interactions_removed = deduped - report.interactions;

        Ok((
            Catalog {
                items: catalog_items,
                interactions: kept,
            },
            report,
        ))
    }

    /// Reassembles a catalog from its persisted, already-filtered parts.
    pub fn from_parts(items: Vec<Item>, interactions: Vec<Interaction>) -> Self {
        Catalog {
            items: items.into_iter().map(|i| (i.item_id.clone(), i)).collect(),
            interactions,
        }
    }

    pub fn item(&self, item_id: &str) -> Option<&Item> {
        self.items.get(item_id)
    }

    /// Items in `item_id` order.
    pub fn items(&self) -> impl Iterator<Item = &Item> {
        self.items.values()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn attach_summaries<'a>(&mut self, summaries: impl IntoIterator<Item = (&'a str, &'a str)>) {
        for (id, summary) in summaries {
            if let Some(item) = self.items.get_mut(id) {
                item.summary = Some(summary.to_string());
            }
        }
    }
}

fn resolve_image_ref(base: &Path, image_ref: &str) -> String {
    if image_ref.starts_with("http://") || image_ref.starts_with("https://") {
        return image_ref.to_string();
    }
    let path = Path::new(image_ref);
    if path.is_absolute() || base.as_os_str().is_empty() {
        image_ref.to_string()
    } else {
        base.join(path).to_string_lossy().into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<String>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Everything but the held-out last item.
    pub fn history(&self) -> &[String] {
        &self.items[..self.items.len().saturating_sub(1)]
    }

    pub fn last(&self) -> Option<&String> {
        self.items.last()
    }
}

/// One chronological sequence per user, ordered by `user_id`.
///
/// Items are sorted by timestamp with ties broken by `item_id`; an item the
/// user already consumed keeps only its first position, so the held-out last
/// item never reappears in the history; sequences shorter than `min_seq_len`
/// are dropped.
pub fn build_sequences(catalog: &Catalog, min_seq_len: usize) -> Vec<UserSequence> {
    let mut per_user: BTreeMap<&str, Vec<(i64, &str)>> = BTreeMap::new();
    for i in catalog.interactions() {
        per_user
            .entry(&i.user_id)
            .or_default()
            .push((i.timestamp, &i.item_id));
    }
    per_user
        .into_iter()
        .filter_map(|(user, mut events)| {
            events.sort_unstable();
            let mut seen = HashSet::with_capacity(events.len());
            let items: Vec<String> = events
                .into_iter()
                .filter(|(_, item)| seen.insert(*item))
                .map(|(_, item)| item.to_string())
                .collect();
            (items.len() >= min_seq_len).then(|| UserSequence {
                user_id: user.to_string(),
                items,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Eval,
    Train,
}

/// One user's leave-one-out split within one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub fold: usize,
    pub user_id: String,
    pub role: SplitRole,
    pub history: Vec<String>,
    pub target: String,
    pub negatives: Vec<String>,
}

/// Seeded fold index per sequence (aligned with `sequences`).
pub fn assign_folds(sequences: &[UserSequence], n_folds: usize, seed: u64) -> Result<Vec<usize>> {
    if n_folds < 2 {
        return Err(Error::Precondition(format!("n_folds must be >= 2, got {n_folds}")));
    }
    if n_folds > sequences.len() {
        return Err(Error::Precondition(format!(
            "n_folds {n_folds} exceeds user count {}",
            sequences.len()
        )));
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.sort_by(|&a, &b| sequences[a].user_id.cmp(&sequences[b].user_id));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["folds"]));
    order.shuffle(&mut rng);
    let mut folds = vec![0; sequences.len()];
    for (position, idx) in order.into_iter().enumerate() {
        folds[idx] = position % n_folds;
    }
    Ok(folds)
}

/// Evaluation splits: each user lands in exactly one fold with its last item
/// held out. Negatives are left empty; see [`build_split_manifest`].
pub fn split_leave_one_out(
    sequences: &[UserSequence],
    n_folds: usize,
    seed: u64,
) -> Result<Vec<Split>> {
    if let Some(short) = sequences.iter().find(|s| s.len() < 2) {
        return Err(Error::Precondition(format!(
            "user {} has a sequence of length {}; leave-one-out needs at least 2",
            short.user_id,
            short.len()
        )));
    }
    let folds = assign_folds(sequences, n_folds, seed)?;
    let mut splits: Vec<Split> = sequences
        .iter()
        .zip(folds)
        .map(|(seq, fold)| Split {
            seed,
            fold,
            user_id: seq.user_id.clone(),
            role: SplitRole::Eval,
            history: seq.history().to_vec(),
            target: seq.last().expect("length checked").clone(),
            negatives: Vec::new(),
        })
        .collect();
    splits.sort_by(|a, b| (a.fold, &a.user_id).cmp(&(b.fold, &b.user_id)));
    Ok(splits)
}

/// Exactly `ratio` distinct items the user never interacted with, sampled
/// uniformly without replacement from the catalog.
pub fn sample_negatives(
    user_items: &[String],
    catalog: &Catalog,
    ratio: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let excluded: HashSet<&str> = user_items.iter().map(String::as_str).collect();
    let pool: Vec<&str> = catalog
        .items()
        .map(|i| i.item_id.as_str())
        .filter(|id| !excluded.contains(id))
        .collect();
    if pool.len() < ratio {
        return Err(Error::Precondition(format!(
            "negative pool has {} items, need {ratio}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool.len(), ratio)
        .into_iter()
        .map(|i| pool[i].to_string())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSettings {
    pub n_folds: usize,
    pub seed: u64,
    pub train_ratio: usize,
    pub eval_ratio: usize,
}

/// Full split manifest: for every fold, each user appears once, as an
/// evaluation user (with `eval_ratio` negatives) in its own fold and as a
/// training user (with `train_ratio` negatives) in every other fold.
pub fn build_split_manifest(
    catalog: &Catalog,
    sequences: &[UserSequence],
    settings: SplitSettings,
) -> Result<Vec<Split>> {
    let eval = split_leave_one_out(sequences, settings.n_folds, settings.seed)?;
    let eval_fold: HashMap<&str, usize> =
        eval.iter().map(|s| (s.user_id.as_str(), s.fold)).collect();

    let mut manifest = Vec::with_capacity(sequences.len() * settings.n_folds);
    for fold in 0..settings.n_folds {
        for seq in sequences {
            let role = if eval_fold[seq.user_id.as_str()] == fold {
                SplitRole::Eval
            } else {
                SplitRole::Train
            };
            let (ratio, label) = match role {
                SplitRole::Eval => (settings.eval_ratio, "eval"),
                SplitRole::Train => (settings.train_ratio, "train"),
            };
            let fold_label = fold.to_string();
            let neg_seed = derive_seed(settings.seed, &["negatives", &fold_label, &seq.user_id, label]);
            let negatives = sample_negatives(&seq.items, catalog, ratio, neg_seed)
                .map_err(|e| e.context(format!("user {}", seq.user_id)))?;
            manifest.push(Split {
                seed: settings.seed,
                fold,
                user_id: seq.user_id.clone(),
                role,
                history: seq.history().to_vec(),
                target: seq.last().expect("validated by split_leave_one_out").clone(),
                negatives,
            });
        }
    }
    Ok(manifest)
}
