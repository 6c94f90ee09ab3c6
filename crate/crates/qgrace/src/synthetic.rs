//! Planted-preference synthetic data: low-rank ground-truth affinities with
//! the globally top-scoring pairs kept as positive interactions. Used by the
//! experiment harness and the acceptance suite, where real-scale datasets are
//! out of reach.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{seeded_rng, RngStream};
use crate::data::InteractionDataset;
use crate::math::Mat;

#[derive(Debug, Clone, Copy)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// Rank of the ground-truth affinity factors.
    pub rank: usize,
    /// Fraction of all user-item pairs kept as positive edges.
    pub edge_fraction: f64,
    pub seed: u64,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Ground-truth affinity matrix from Gaussian rank-`r` factors.
pub fn planted_affinities(cfg: &SyntheticConfig) -> Mat {
    let mut rng = seeded_rng(cfg.seed, RngStream::Subset);
    let mut users = Mat::zeros(cfg.num_users, cfg.rank);
    for v in users.data_mut() {
        *v = standard_normal(&mut rng);
    }
    let mut items = Mat::zeros(cfg.num_items, cfg.rank);
    for v in items.data_mut() {
        *v = standard_normal(&mut rng);
    }
    let mut affinity = Mat::zeros(cfg.num_users, cfg.num_items);
    for u in 0..cfg.num_users {
        for i in 0..cfg.num_items {
            affinity.set(u, i, crate::math::dot(users.row(u), items.row(i)));
        }
    }
    affinity
}

/// Build a dataset whose edges are the top `edge_fraction` of all pairs by
/// planted affinity, in (user, item) order.
pub fn planted_dataset(cfg: &SyntheticConfig) -> InteractionDataset {
    assert!(cfg.edge_fraction > 0.0 && cfg.edge_fraction < 1.0);
    let affinity = planted_affinities(cfg);
    let total = cfg.num_users * cfg.num_items;
    let keep = ((cfg.edge_fraction * total as f64).floor() as usize).max(1);

    let mut scored: Vec<(f64, u32, u32)> = Vec::with_capacity(total);
    for u in 0..cfg.num_users {
        for i in 0..cfg.num_items {
            scored.push((affinity.get(u, i), u as u32, i as u32));
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    scored.truncate(keep);

    let mut edges: Vec<(u32, u32)> = scored.into_iter().map(|(_, u, i)| (u, i)).collect();
    edges.sort_unstable();
    let user_ids = (0..cfg.num_users).map(|u| format!("u{u}")).collect();
    let item_ids = (0..cfg.num_items).map(|i| format!("i{i}")).collect();
    InteractionDataset::new(edges, user_ids, item_ids).expect("synthetic edges are unique")
}
