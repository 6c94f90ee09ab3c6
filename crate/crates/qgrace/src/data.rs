//! Interaction datasets: parsing, splitting, batch sampling, noise injection.
//!
//! Raw logs are whitespace-separated `user item` lines. Ids are remapped to
//! contiguous indices in first-appearance order and duplicate interactions
//! collapse to a single edge, so the edge set is binary.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::{Error, Result};

/// Sparse bipartite interaction graph with contiguous ids.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    /// Unique (user, item) pairs in first-appearance order.
    edges: Vec<(u32, u32)>,
    /// index -> raw id
    user_ids: Vec<String>,
    item_ids: Vec<String>,
}

impl InteractionDataset {
    pub fn new(
        edges: Vec<(u32, u32)>,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
    ) -> Result<Self> {
        let num_users = user_ids.len();
        let num_items = item_ids.len();
        let mut seen = HashSet::with_capacity(edges.len());
        for &(u, i) in &edges {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(Error::IndexOutOfRange(format!(
                    "edge ({u}, {i}) outside {num_users} users x {num_items} items"
                )));
            }
            if !seen.insert((u, i)) {
                return Err(Error::BadFormat(format!("duplicate edge ({u}, {i})")));
            }
        }
        Ok(InteractionDataset {
            num_users,
            num_items,
            edges,
            user_ids,
            item_ids,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }
}

/// Parse an interaction log. Lines starting with `#` are skipped; each
/// remaining line must carry at least `raw_user raw_item`; extra fields are
/// ignored. Duplicate interactions collapse to one edge.
pub fn parse_interactions<R: BufRead>(reader: R) -> Result<InteractionDataset> {
    let mut user_index: HashMap<String, u32> = HashMap::new();
    let mut item_index: HashMap<String, u32> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut edges = Vec::new();
    let mut seen = HashSet::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let (raw_u, raw_i) = match (fields.next(), fields.next()) {
            (Some(u), Some(i)) => (u, i),
            _ => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected at least 2 fields, got {trimmed:?}"),
                })
            }
        };
        let u = *user_index.entry(raw_u.to_string()).or_insert_with(|| {
            user_ids.push(raw_u.to_string());
            (user_ids.len() - 1) as u32
        });
        let i = *item_index.entry(raw_i.to_string()).or_insert_with(|| {
            item_ids.push(raw_i.to_string());
            (item_ids.len() - 1) as u32
        });
        if seen.insert((u, i)) {
            edges.push((u, i));
        }
    }

    if edges.is_empty() {
        return Err(Error::EmptyInput);
    }
    InteractionDataset::new(edges, user_ids, item_ids)
}

pub fn parse_interactions_file(path: &Path) -> Result<InteractionDataset> {
    let file = fs::File::open(path)?;
    parse_interactions(std::io::BufReader::new(file))
}

/// Train/validation/test partition of a dataset, with per-user train
/// adjacency and the set of injected noise edges (train only).
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<(u32, u32)>,
    pub validation: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
    /// Per-user sorted item lists over the train edges.
    train_adj: Vec<Vec<u32>>,
    /// Injected edges; always a subset of `train`.
    pub noise_flags: HashSet<(u32, u32)>,
}

impl SplitDataset {
    /// Assemble a split directly from edge lists, building the train
    /// adjacency.
    pub fn from_parts(
        num_users: usize,
        num_items: usize,
        train: Vec<(u32, u32)>,
        validation: Vec<(u32, u32)>,
        test: Vec<(u32, u32)>,
        noise_flags: HashSet<(u32, u32)>,
    ) -> Self {
        let mut split = SplitDataset {
            num_users,
            num_items,
            train,
            validation,
            test,
            train_adj: Vec::new(),
            noise_flags,
        };
        split.rebuild_adjacency();
        split
    }

    fn rebuild_adjacency(&mut self) {
        let mut adj = vec![Vec::new(); self.num_users];
        for &(u, i) in &self.train {
            adj[u as usize].push(i);
        }
        for items in &mut adj {
            items.sort_unstable();
        }
        self.train_adj = adj;
    }

    pub fn train_items_of(&self, user: u32) -> &[u32] {
        &self.train_adj[user as usize]
    }

    pub fn is_train_edge(&self, user: u32, item: u32) -> bool {
        self.train_adj[user as usize].binary_search(&item).is_ok()
    }

    /// Users that ended up with no train edges (excluded from evaluation).
    pub fn users_without_train(&self) -> Vec<u32> {
        (0..self.num_users as u32)
            .filter(|&u| self.train_adj[u as usize].is_empty())
            .collect()
    }

    /// Train edges that are not injected noise.
    pub fn clean_train_edges(&self) -> Vec<(u32, u32)> {
        self.train
            .iter()
            .copied()
            .filter(|e| !self.noise_flags.contains(e))
            .collect()
    }

    pub fn noise_train_edges(&self) -> Vec<(u32, u32)> {
        self.train
            .iter()
            .copied()
            .filter(|e| self.noise_flags.contains(e))
            .collect()
    }
}

/// Deterministically shuffle the edge set by `seed` and partition it by
/// `ratios` (train and validation sizes floor, remainder to test).
pub fn split_dataset(
    ds: &InteractionDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitDataset> {
    let (rt, rv, rs) = ratios;
    let arr = [rt, rv, rs];
    if arr.iter().any(|&r| r <= 0.0) || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidRatios(arr));
    }

    // Sort before shuffling so the partition depends only on the edge set,
    // not on file order.
    let mut edges = ds.edges().to_vec();
    edges.sort_unstable();
    let mut rng = crate::config::seeded_rng(seed, crate::config::RngStream::Split);
    edges.shuffle(&mut rng);

    let n = edges.len();
    let n_train = (rt * n as f64).floor() as usize;
    let n_val = (rv * n as f64).floor() as usize;

    let train = edges[..n_train].to_vec();
    let validation = edges[n_train..n_train + n_val].to_vec();
    let test = edges[n_train + n_val..].to_vec();

    let mut split = SplitDataset {
        num_users: ds.num_users(),
        num_items: ds.num_items(),
        train,
        validation,
        test,
        train_adj: Vec::new(),
        noise_flags: HashSet::new(),
    };
    split.rebuild_adjacency();
    Ok(split)
}

/// Add `floor(ratio * |train|)` uniformly random absent (user, item) pairs to
/// the train set, flagged as noise. Validation and test are untouched.
pub fn inject_noise(split: &SplitDataset, ratio: f64, seed: u64) -> Result<SplitDataset> {
    assert!((0.0..=1.0).contains(&ratio), "noise ratio must be in [0,1]");
    let requested = (ratio * split.train.len() as f64).floor() as usize;
    let mut out = split.clone();
    if requested == 0 {
        return Ok(out);
    }

    let mut present: HashSet<(u32, u32)> = HashSet::new();
    present.extend(split.train.iter().copied());
    present.extend(split.validation.iter().copied());
    present.extend(split.test.iter().copied());

    let mut rng = crate::config::seeded_rng(seed, crate::config::RngStream::Noise);
    let max_attempts = 1000 * requested + 10_000;
    let mut attempts = 0;
    let mut placed = 0;
    while placed < requested {
        if attempts >= max_attempts {
            return Err(Error::NoiseSaturated {
                requested,
                attempts,
            });
        }
        attempts += 1;
        let u = rng.gen_range(0..split.num_users as u32);
        let i = rng.gen_range(0..split.num_items as u32);
        if present.insert((u, i)) {
            out.train.push((u, i));
            out.noise_flags.insert((u, i));
            placed += 1;
        }
    }
    out.rebuild_adjacency();
    Ok(out)
}

/// A sampled training batch: positive pairs, per-positive negatives, and
/// deduplicated user/item index lists over all pairs.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub positives: Vec<(u32, u32)>,
    pub negatives: Vec<(u32, u32)>,
    /// Sorted, unique over positives and negatives.
    pub users_unique: Vec<u32>,
    pub items_unique: Vec<u32>,
}

impl TrainBatch {
    pub fn from_pairs(positives: Vec<(u32, u32)>, negatives: Vec<(u32, u32)>) -> Self {
        let mut users: Vec<u32> = positives
            .iter()
            .chain(negatives.iter())
            .map(|&(u, _)| u)
            .collect();
        let mut items: Vec<u32> = positives
            .iter()
            .chain(negatives.iter())
            .map(|&(_, i)| i)
            .collect();
        users.sort_unstable();
        users.dedup();
        items.sort_unstable();
        items.dedup();
        TrainBatch {
            positives,
            negatives,
            users_unique: users,
            items_unique: items,
        }
    }

    /// All pairs, positives first, in sampling order.
    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.positives
            .iter()
            .chain(self.negatives.iter())
            .copied()
    }

    pub fn num_pairs(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }
}

const NEG_REJECTION_CAP: usize = 1000;

/// Draw `batch_size` positives uniformly with replacement from the train
/// edges, and `k_neg` negatives per positive by rejection against the user's
/// train adjacency.
pub fn sample_batch<R: Rng>(
    split: &SplitDataset,
    batch_size: usize,
    k_neg: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    assert!(!split.train.is_empty(), "train set is empty");

    let mut positives = Vec::with_capacity(batch_size);
    let mut negatives = Vec::with_capacity(batch_size * k_neg);
    for _ in 0..batch_size {
        let &(u, i) = split.train.choose(rng).expect("nonempty train");
        positives.push((u, i));
        for _ in 0..k_neg {
            let mut found = None;
            for _ in 0..NEG_REJECTION_CAP {
                let cand = rng.gen_range(0..split.num_items as u32);
                if !split.is_train_edge(u, cand) {
                    found = Some(cand);
                    break;
                }
            }
            match found {
                Some(cand) => negatives.push((u, cand)),
                None => return Err(Error::SamplingExhausted { user: u }),
            }
        }
    }
    Ok(TrainBatch::from_pairs(positives, negatives))
}

// ---------------------------------------------------------------------------
// Split manifest files
// ---------------------------------------------------------------------------

fn write_edge_file(path: &Path, edges: &[(u32, u32)], ds: &InteractionDataset) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for &(u, i) in edges {
        writeln!(w, "{} {}", ds.user_ids()[u as usize], ds.item_ids()[i as usize])?;
    }
    w.flush()?;
    Ok(())
}

fn write_id_map(path: &Path, ids: &[String]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (idx, raw) in ids.iter().enumerate() {
        writeln!(w, "{raw}\t{idx}")?;
    }
    w.flush()?;
    Ok(())
}

/// Write a split manifest: `train.txt`, `validation.txt`, `test.txt`,
/// `users.tsv`, `items.tsv`, and `noise.txt` when noise edges exist.
pub fn write_split_manifest(dir: &Path, ds: &InteractionDataset, split: &SplitDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_edge_file(&dir.join("train.txt"), &split.train, ds)?;
    write_edge_file(&dir.join("validation.txt"), &split.validation, ds)?;
    write_edge_file(&dir.join("test.txt"), &split.test, ds)?;
    write_id_map(&dir.join("users.tsv"), ds.user_ids())?;
    write_id_map(&dir.join("items.tsv"), ds.item_ids())?;
    if !split.noise_flags.is_empty() {
        let mut noise: Vec<(u32, u32)> = split.noise_flags.iter().copied().collect();
        noise.sort_unstable();
        write_edge_file(&dir.join("noise.txt"), &noise, ds)?;
    }
    Ok(())
}

fn read_id_map(path: &Path) -> Result<Vec<String>> {
    let content = fs::read_to_string(path)?;
    let mut entries: Vec<(usize, String)> = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (raw, idx) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: "expected raw_id<TAB>index".into(),
        })?;
        let idx: usize = idx.parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad index {idx:?}"),
        })?;
        entries.push((idx, raw.to_string()));
    }
    entries.sort_by_key(|&(idx, _)| idx);
    for (pos, &(idx, _)) in entries.iter().enumerate() {
        if pos != idx {
            return Err(Error::BadFormat(format!(
                "id map {} is not a bijection onto 0..{}",
                path.display(),
                entries.len()
            )));
        }
    }
    Ok(entries.into_iter().map(|(_, raw)| raw).collect())
}

fn read_edge_file(
    path: &Path,
    user_index: &HashMap<&str, u32>,
    item_index: &HashMap<&str, u32>,
) -> Result<Vec<(u32, u32)>> {
    let content = fs::read_to_string(path)?;
    let mut edges = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let (raw_u, raw_i) = match (fields.next(), fields.next()) {
            (Some(u), Some(i)) => (u, i),
            _ => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected 2 fields in {}", path.display()),
                })
            }
        };
        let u = *user_index.get(raw_u).ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: format!("unknown user id {raw_u:?}"),
        })?;
        let i = *item_index.get(raw_i).ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: format!("unknown item id {raw_i:?}"),
        })?;
        edges.push((u, i));
    }
    Ok(edges)
}

/// Read a split manifest written by [`write_split_manifest`]. Returns the
/// reconstructed dataset (edges = train without noise + validation + test)
/// and the split.
pub fn read_split_manifest(dir: &Path) -> Result<(InteractionDataset, SplitDataset)> {
    let user_ids = read_id_map(&dir.join("users.tsv"))?;
    let item_ids = read_id_map(&dir.join("items.tsv"))?;
    let user_index: HashMap<&str, u32> = user_ids
        .iter()
        .enumerate()
        .map(|(idx, raw)| (raw.as_str(), idx as u32))
        .collect();
    let item_index: HashMap<&str, u32> = item_ids
        .iter()
        .enumerate()
        .map(|(idx, raw)| (raw.as_str(), idx as u32))
        .collect();

    let train = read_edge_file(&dir.join("train.txt"), &user_index, &item_index)?;
    let validation = read_edge_file(&dir.join("validation.txt"), &user_index, &item_index)?;
    let test = read_edge_file(&dir.join("test.txt"), &user_index, &item_index)?;
    let noise_path = dir.join("noise.txt");
    let noise_flags: HashSet<(u32, u32)> = if noise_path.exists() {
        read_edge_file(&noise_path, &user_index, &item_index)?
            .into_iter()
            .collect()
    } else {
        HashSet::new()
    };

    let mut edges: Vec<(u32, u32)> = train
        .iter()
        .filter(|e| !noise_flags.contains(e))
        .chain(validation.iter())
        .chain(test.iter())
        .copied()
        .collect();
    edges.sort_unstable();
    let ds = InteractionDataset::new(edges, user_ids, item_ids)?;

    let mut split = SplitDataset {
        num_users: ds.num_users(),
        num_items: ds.num_items(),
        train,
        validation,
        test,
        train_adj: Vec::new(),
        noise_flags,
    };
    split.rebuild_adjacency();
    Ok((ds, split))
}
