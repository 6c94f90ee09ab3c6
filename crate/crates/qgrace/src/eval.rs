//! Top-K ranking evaluation, the noise/alpha sweep harnesses, and interest
//! dumps.
//!
//! Scoring is the cosine between user and item embeddings; candidates are all
//! items except the user's train items; ties break by ascending item index so
//! rankings are identical across platforms.

use std::io::Write;

use crate::config::TrainConfig;
use crate::data::{inject_noise, split_dataset, InteractionDataset, SplitDataset};
use crate::encoder::{encoder_forward, normalize_adjacency, EmbeddingState, Embeddings, EncoderKind};
use crate::interest::{gen_forward, GenerativeParams};
use crate::math::{dot, norm2};
use crate::matcher::{normal_train, qgrace_train};
use crate::{Error, Result};

/// Per-cutoff metrics averaged over evaluable users.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub num_users_evaluated: usize,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.ndcg[p])
    }
}

fn unit_or_zero(row: &[f64]) -> Vec<f64> {
    let n = norm2(row);
    if n <= crate::loss::EPS_NORM {
        vec![0.0; row.len()]
    } else {
        row.iter().map(|v| v / n).collect()
    }
}

/// All candidate items (not in `exclude`) sorted by descending cosine score,
/// ties by ascending item index. `exclude` must be sorted.
pub fn rank_items(z: &Embeddings<'_>, user: u32, exclude: &[u32]) -> Vec<u32> {
    let zu = unit_or_zero(z.user_row(user));
    let mut scored: Vec<(f64, u32)> = (0..z.num_items() as u32)
        .filter(|i| exclude.binary_search(i).is_err())
        .map(|i| (dot(&unit_or_zero(z.item_row(i)), &zu), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

/// |top-K intersect test| / |test|.
pub fn recall_at_k(ranked: &[u32], test_items: &[u32], k: usize) -> f64 {
    if test_items.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| test_items.binary_search(i).is_ok())
        .count();
    hits as f64 / test_items.len() as f64
}

/// Binary-relevance NDCG: DCG over hit ranks r (1-based, r <= K) of
/// 1/log2(r+1), normalized by the ideal DCG for min(K, |test|) hits.
pub fn ndcg_at_k(ranked: &[u32], test_items: &[u32], k: usize) -> f64 {
    if test_items.is_empty() {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (rank0, item) in ranked.iter().take(k).enumerate() {
        if test_items.binary_search(item).is_ok() {
            dcg += 1.0 / ((rank0 + 2) as f64).log2();
        }
    }
    let ideal = k.min(test_items.len());
    let idcg: f64 = (0..ideal).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    dcg / idcg
}

/// Top `k` of the candidate ranking, via partial selection; agrees with the
/// prefix of [`rank_items`].
fn top_k_items(item_unit: &[Vec<f64>], zu: &[f64], exclude: &[u32], k: usize) -> Vec<u32> {
    let mut scored: Vec<(f64, u32)> = (0..item_unit.len() as u32)
        .filter(|i| exclude.binary_search(i).is_err())
        .map(|i| (dot(&item_unit[i as usize], zu), i))
        .collect();
    let cmp = |a: &(f64, u32), b: &(f64, u32)| {
        b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
    };
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Mean per-user metrics over users with at least one test and one train
/// item.
pub fn evaluate(state: &EmbeddingState, split: &SplitDataset, ks: &[usize]) -> Result<MetricsReport> {
    let adjacency = match state.kind {
        EncoderKind::LightGcn => Some(normalize_adjacency(split)),
        EncoderKind::Gmf => None,
    };
    let z = encoder_forward(state, adjacency.as_ref())?;
    evaluate_embeddings(&z, split, ks)
}

/// As [`evaluate`] but on an already-propagated encoder output.
pub fn evaluate_embeddings(
    z: &Embeddings<'_>,
    split: &SplitDataset,
    ks: &[usize],
) -> Result<MetricsReport> {
    assert!(!ks.is_empty());
    let max_k = *ks.iter().max().unwrap();

    // Per-user sorted test lists.
    let mut test_items = vec![Vec::new(); split.num_users];
    for &(u, i) in &split.test {
        test_items[u as usize].push(i);
    }
    for items in &mut test_items {
        items.sort_unstable();
        items.dedup();
    }

    let item_unit: Vec<Vec<f64>> = (0..split.num_items as u32)
        .map(|i| unit_or_zero(z.item_row(i)))
        .collect();

    let mut recall_sum = vec![0.0; ks.len()];
    let mut ndcg_sum = vec![0.0; ks.len()];
    let mut evaluated = 0usize;
    for u in 0..split.num_users as u32 {
        let tests = &test_items[u as usize];
        let train = split.train_items_of(u);
        if tests.is_empty() || train.is_empty() {
            continue;
        }
        let zu = unit_or_zero(z.user_row(u));
        let top = top_k_items(&item_unit, &zu, train, max_k);
        debug_assert!(top.iter().all(|i| train.binary_search(i).is_err()));
        for (pos, &k) in ks.iter().enumerate() {
            recall_sum[pos] += recall_at_k(&top, tests, k);
            ndcg_sum[pos] += ndcg_at_k(&top, tests, k);
        }
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::NoEvaluableUsers);
    }
    let n = evaluated as f64;
    Ok(MetricsReport {
        ks: ks.to_vec(),
        recall: recall_sum.into_iter().map(|v| v / n).collect(),
        ndcg: ndcg_sum.into_iter().map(|v| v / n).collect(),
        num_users_evaluated: evaluated,
    })
}

/// Metric CSV with the stable schema `method,metric,k,value,seed`.
pub fn write_metrics_csv<W: Write>(
    mut w: W,
    method: &str,
    report: &MetricsReport,
    seed: u64,
) -> Result<()> {
    writeln!(w, "method,metric,k,value,seed")?;
    for (pos, &k) in report.ks.iter().enumerate() {
        writeln!(w, "{method},recall,{k},{},{seed}", report.recall[pos])?;
        writeln!(w, "{method},ndcg,{k},{},{seed}", report.ndcg[pos])?;
    }
    Ok(())
}

/// One (ratio, method, seed) cell of a noise sweep.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub ratio: f64,
    pub method: String,
    pub seed: u64,
    pub report: MetricsReport,
    /// Relative drops vs the ratio-0 run, aligned with `report.ks`.
    pub recall_drop: Vec<f64>,
    pub ndcg_drop: Vec<f64>,
}

fn relative_drop(base: f64, value: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        (base - value) / base
    }
}

fn train_and_evaluate(
    method: &str,
    cfg: &TrainConfig,
    split: &SplitDataset,
) -> Result<MetricsReport> {
    let state = match method {
        "qgrace" => qgrace_train(cfg, split)?.state,
        "normal" => normal_train(cfg, split)?.state,
        other => return Err(Error::Config(format!("unknown method {other:?}"))),
    };
    evaluate(&state, split, &cfg.eval_ks)
}

/// Robustness harness: for every seed and noise ratio, inject noise into the
/// train split, run both training methods, and evaluate against the
/// untouched test set. Drops are relative to each (seed, method)'s ratio-0
/// metrics.
pub fn noise_sweep(
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    split_ratios: (f64, f64, f64),
    ratios: &[f64],
    num_seeds: usize,
    mut progress: impl FnMut(&str),
) -> Result<Vec<SweepEntry>> {
    let methods = ["normal", "qgrace"];
    let mut entries = Vec::new();
    for s in 0..num_seeds as u64 {
        let seed = cfg.seed + s;
        let split = split_dataset(ds, split_ratios, seed)?;
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        for method in methods {
            progress(&format!("seed {seed} {method} ratio 0"));
            let base = train_and_evaluate(method, &run_cfg, &split)?;
            for &ratio in ratios {
                let noisy = if ratio == 0.0 {
                    split.clone()
                } else {
                    inject_noise(&split, ratio, seed)?
                };
                let report = if ratio == 0.0 {
                    base.clone()
                } else {
                    progress(&format!("seed {seed} {method} ratio {ratio}"));
                    train_and_evaluate(method, &run_cfg, &noisy)?
                };
                let recall_drop = base
                    .recall
                    .iter()
                    .zip(&report.recall)
                    .map(|(&b, &v)| relative_drop(b, v))
                    .collect();
                let ndcg_drop = base
                    .ndcg
                    .iter()
                    .zip(&report.ndcg)
                    .map(|(&b, &v)| relative_drop(b, v))
                    .collect();
                entries.push(SweepEntry {
                    ratio,
                    method: method.to_string(),
                    seed,
                    report,
                    recall_drop,
                    ndcg_drop,
                });
            }
        }
    }
    Ok(entries)
}

/// CSV for [`noise_sweep`]: `ratio,method,metric,k,value,relative_drop,seed`.
pub fn write_sweep_csv<W: Write>(mut w: W, entries: &[SweepEntry]) -> Result<()> {
    writeln!(w, "ratio,method,metric,k,value,relative_drop,seed")?;
    for e in entries {
        for (pos, &k) in e.report.ks.iter().enumerate() {
            writeln!(
                w,
                "{},{},recall,{k},{},{},{}",
                e.ratio, e.method, e.report.recall[pos], e.recall_drop[pos], e.seed
            )?;
            writeln!(
                w,
                "{},{},ndcg,{k},{},{},{}",
                e.ratio, e.method, e.report.ndcg[pos], e.ndcg_drop[pos], e.seed
            )?;
        }
    }
    Ok(())
}

/// One (alpha, seed) cell of an alpha sweep.
#[derive(Debug, Clone)]
pub struct AlphaEntry {
    pub alpha: f64,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Sensitivity harness: train the matcher once per (alpha, seed) and
/// evaluate.
pub fn alpha_sweep(
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    split_ratios: (f64, f64, f64),
    alphas: &[f64],
    num_seeds: usize,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AlphaEntry>> {
    let mut entries = Vec::new();
    for s in 0..num_seeds as u64 {
        let seed = cfg.seed + s;
        let split = split_dataset(ds, split_ratios, seed)?;
        for &alpha in alphas {
            progress(&format!("seed {seed} alpha {alpha}"));
            let run_cfg = TrainConfig { seed, alpha, ..cfg.clone() };
            let report = train_and_evaluate("qgrace", &run_cfg, &split)?;
            entries.push(AlphaEntry { alpha, seed, report });
        }
    }
    Ok(entries)
}

/// CSV for [`alpha_sweep`]: `alpha,metric,k,value,seed`.
pub fn write_alpha_csv<W: Write>(mut w: W, entries: &[AlphaEntry]) -> Result<()> {
    writeln!(w, "alpha,metric,k,value,seed")?;
    for e in entries {
        for (pos, &k) in e.report.ks.iter().enumerate() {
            writeln!(w, "{},recall,{k},{},{}", e.alpha, e.report.recall[pos], e.seed)?;
            writeln!(w, "{},ndcg,{k},{},{}", e.alpha, e.report.ndcg[pos], e.seed)?;
        }
    }
    Ok(())
}

/// Deterministic interest weights over the cross product of the index
/// subsets, user-major.
pub fn dump_interests(
    gen: &GenerativeParams,
    z: &Embeddings<'_>,
    user_subset: &[u32],
    item_subset: &[u32],
) -> Result<Vec<(u32, u32, f64)>> {
    for &u in user_subset {
        if u as usize >= z.num_users() {
            return Err(Error::IndexOutOfRange(format!("user {u}")));
        }
    }
    for &i in item_subset {
        if i as usize >= z.num_items() {
            return Err(Error::IndexOutOfRange(format!("item {i}")));
        }
    }
    let pairs: Vec<(u32, u32)> = user_subset
        .iter()
        .flat_map(|&u| item_subset.iter().map(move |&i| (u, i)))
        .collect();
    let mut det = gen.clone();
    det.deterministic_mode = true;
    let weights = gen_forward(&det, &pairs, z, None)?;
    Ok(pairs
        .into_iter()
        .zip(weights.values)
        .map(|((u, i), w)| (u, i, w))
        .collect())
}

/// CSV for [`dump_interests`]: `user_index,item_index,weight`.
pub fn write_interests_csv<W: Write>(mut w: W, rows: &[(u32, u32, f64)]) -> Result<()> {
    writeln!(w, "user_index,item_index,weight")?;
    for &(u, i, weight) in rows {
        writeln!(w, "{u},{i},{weight}")?;
    }
    Ok(())
}
