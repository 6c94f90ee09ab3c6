//! Embedding encoders: table lookup (GMF) and light graph convolution.
//!
//! Both encoders own an M x d user table and an N x d item table. The graph
//! convolution averages powers of the symmetrically normalized train
//! adjacency applied to the stacked tables; because that map is linear and
//! symmetric, the backward pass reuses the same propagation.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};

use crate::config::{seeded_rng, RngStream};
use crate::data::SplitDataset;
use crate::math::Mat;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Gmf,
    LightGcn,
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EncoderKind::Gmf => write!(f, "gmf"),
            EncoderKind::LightGcn => write!(f, "lightgcn"),
        }
    }
}

/// User/item embedding tables plus encoder configuration.
#[derive(Debug, Clone)]
pub struct EmbeddingState {
    pub user_table: Mat,
    pub item_table: Mat,
    pub kind: EncoderKind,
    /// Convolution depth; unused by the lookup encoder.
    pub num_layers: usize,
}

impl EmbeddingState {
    pub fn num_users(&self) -> usize {
        self.user_table.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_table.rows()
    }

    pub fn dim(&self) -> usize {
        self.user_table.cols()
    }
}

/// Xavier-uniform initialization: each table's entries are drawn from
/// [-sqrt(6/(rows+d)), +sqrt(6/(rows+d))], seeded.
pub fn init_embeddings(
    num_users: usize,
    num_items: usize,
    dim: usize,
    kind: EncoderKind,
    num_layers: usize,
    seed: u64,
) -> EmbeddingState {
    assert!(num_users >= 1 && num_items >= 1 && dim >= 1);
    let mut rng = seeded_rng(seed, RngStream::EmbedInit);
    let mut init_table = |rows: usize| {
        let bound = (6.0 / (rows + dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut m = Mat::zeros(rows, dim);
        for v in m.data_mut() {
            *v = dist.sample(&mut rng);
        }
        m
    };
    let user_table = init_table(num_users);
    let item_table = init_table(num_items);
    EmbeddingState {
        user_table,
        item_table,
        kind,
        num_layers,
    }
}

/// Symmetrically normalized train adjacency over M+N nodes in CSR layout.
/// Users occupy rows 0..M, items rows M..M+N; each train edge contributes
/// 1/sqrt(deg(u) * deg(i)) in both orientations.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
    num_users: usize,
    num_items: usize,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        let start = self.indptr[r];
        let end = self.indptr[r + 1];
        self.indices[start..end]
            .iter()
            .copied()
            .zip(self.values[start..end].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }
}

pub fn normalize_adjacency(split: &SplitDataset) -> NormalizedAdjacency {
    let m = split.num_users;
    let n = split.num_items;
    let nodes = m + n;

    let mut deg = vec![0usize; nodes];
    for &(u, i) in &split.train {
        deg[u as usize] += 1;
        deg[m + i as usize] += 1;
    }

    let mut counts = vec![0usize; nodes + 1];
    for &(u, i) in &split.train {
        counts[u as usize + 1] += 1;
        counts[m + i as usize + 1] += 1;
    }
    for k in 0..nodes {
        counts[k + 1] += counts[k];
    }
    let indptr = counts.clone();

    let nnz = 2 * split.train.len();
    let mut indices = vec![0u32; nnz];
    let mut values = vec![0.0; nnz];
    let mut cursor = indptr.clone();
    for &(u, i) in &split.train {
        let w = 1.0 / ((deg[u as usize] * deg[m + i as usize]) as f64).sqrt();
        let ru = u as usize;
        let ri = m + i as usize;
        indices[cursor[ru]] = ri as u32;
        values[cursor[ru]] = w;
        cursor[ru] += 1;
        indices[cursor[ri]] = u as u32;
        values[cursor[ri]] = w;
        cursor[ri] += 1;
    }
    // Sort each row by column for deterministic iteration.
    let mut adj = NormalizedAdjacency {
        indptr,
        indices,
        values,
        num_users: m,
        num_items: n,
    };
    for r in 0..nodes {
        let start = adj.indptr[r];
        let end = adj.indptr[r + 1];
        let mut entries: Vec<(u32, f64)> = adj.indices[start..end]
            .iter()
            .copied()
            .zip(adj.values[start..end].iter().copied())
            .collect();
        entries.sort_unstable_by_key(|&(c, _)| c);
        for (k, (c, v)) in entries.into_iter().enumerate() {
            adj.indices[start + k] = c;
            adj.values[start + k] = v;
        }
    }
    adj
}

/// Sparse multiply: out = adjacency * x.
fn spmm(adj: &NormalizedAdjacency, x: &Mat, out: &mut Mat) {
    let d = x.cols();
    for r in 0..adj.num_nodes() {
        let out_row = out.row_mut(r);
        out_row.fill(0.0);
        for (c, w) in adj.row(r) {
            let x_row = x.row(c as usize);
            for k in 0..d {
                out_row[k] += w * x_row[k];
            }
        }
    }
}

/// (1/(L+1)) * sum over l of A^l x. The map is its own adjoint because the
/// normalized adjacency is symmetric.
pub fn propagate(adj: &NormalizedAdjacency, x: &Mat, layers: usize) -> Result<Mat> {
    let mut acc = x.clone();
    let mut cur = x.clone();
    let mut next = Mat::zeros(x.rows(), x.cols());
    for layer in 1..=layers {
        spmm(adj, &cur, &mut next);
        if !next.is_finite() {
            return Err(Error::NonFinite {
                context: format!("propagation layer {layer}"),
            });
        }
        acc.add_scaled(&next, 1.0);
        std::mem::swap(&mut cur, &mut next);
    }
    let scale = 1.0 / (layers as f64 + 1.0);
    for v in acc.data_mut() {
        *v *= scale;
    }
    Ok(acc)
}

/// Encoder output: either a direct view of the tables (lookup) or the owned
/// propagated matrix (graph convolution).
pub enum Embeddings<'a> {
    Tables(&'a EmbeddingState),
    Propagated { z: Mat, num_users: usize },
}

impl Embeddings<'_> {
    #[inline]
    pub fn user_row(&self, u: u32) -> &[f64] {
        match self {
            Embeddings::Tables(s) => s.user_table.row(u as usize),
            Embeddings::Propagated { z, .. } => z.row(u as usize),
        }
    }

    #[inline]
    pub fn item_row(&self, i: u32) -> &[f64] {
        match self {
            Embeddings::Tables(s) => s.item_table.row(i as usize),
            Embeddings::Propagated { z, num_users } => z.row(num_users + i as usize),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Embeddings::Tables(s) => s.dim(),
            Embeddings::Propagated { z, .. } => z.cols(),
        }
    }

    pub fn num_users(&self) -> usize {
        match self {
            Embeddings::Tables(s) => s.num_users(),
            Embeddings::Propagated { num_users, .. } => *num_users,
        }
    }

    pub fn num_items(&self) -> usize {
        match self {
            Embeddings::Tables(s) => s.num_items(),
            Embeddings::Propagated { z, num_users } => z.rows() - num_users,
        }
    }
}

/// Stack user and item tables into one (M+N) x d matrix.
pub fn stack_tables(state: &EmbeddingState) -> Mat {
    let m = state.num_users();
    let n = state.num_items();
    let d = state.dim();
    let mut e = Mat::zeros(m + n, d);
    for u in 0..m {
        e.row_mut(u).copy_from_slice(state.user_table.row(u));
    }
    for i in 0..n {
        e.row_mut(m + i).copy_from_slice(state.item_table.row(i));
    }
    e
}

/// Forward propagation. The adjacency is required iff the encoder is graph
/// convolution.
pub fn encoder_forward<'a>(
    state: &'a EmbeddingState,
    adjacency: Option<&NormalizedAdjacency>,
) -> Result<Embeddings<'a>> {
    match state.kind {
        EncoderKind::Gmf => Ok(Embeddings::Tables(state)),
        EncoderKind::LightGcn => {
            let adj = adjacency.ok_or_else(|| {
                Error::ShapeMismatch("graph convolution requires an adjacency".into())
            })?;
            if adj.num_nodes() != state.num_users() + state.num_items() {
                return Err(Error::ShapeMismatch(format!(
                    "adjacency has {} nodes, state has {}",
                    adj.num_nodes(),
                    state.num_users() + state.num_items()
                )));
            }
            let e = stack_tables(state);
            let z = propagate(adj, &e, state.num_layers)?;
            Ok(Embeddings::Propagated {
                z,
                num_users: state.num_users(),
            })
        }
    }
}

/// Adjoint of `encoder_forward`'s propagation: maps a gradient on the encoder
/// output back to a gradient on the stacked tables. Identical to the forward
/// map because the adjacency is symmetric.
pub fn backprop_propagation(
    adj: &NormalizedAdjacency,
    grad_on_z: &Mat,
    layers: usize,
) -> Result<Mat> {
    if grad_on_z.rows() != adj.num_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} rows, adjacency has {} nodes",
            grad_on_z.rows(),
            adj.num_nodes()
        )));
    }
    propagate(adj, grad_on_z, layers)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const EMBED_MAGIC: &[u8; 4] = b"QGE1";

pub fn write_checkpoint(path: &Path, state: &EmbeddingState) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    w.write_all(EMBED_MAGIC)?;
    for v in [
        state.num_users() as u64,
        state.num_items() as u64,
        state.dim() as u64,
        state.num_layers as u64,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&[match state.kind {
        EncoderKind::Gmf => 0u8,
        EncoderKind::LightGcn => 1u8,
    }])?;
    for v in state.user_table.data().iter().chain(state.item_table.data()) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_checkpoint(path: &Path) -> Result<EmbeddingState> {
    let mut r = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EMBED_MAGIC {
        return Err(Error::BadFormat(format!(
            "{} is not an embedding checkpoint",
            path.display()
        )));
    }
    let m = read_u64(&mut r)? as usize;
    let n = read_u64(&mut r)? as usize;
    let d = read_u64(&mut r)? as usize;
    let layers = read_u64(&mut r)? as usize;
    let mut kind_byte = [0u8; 1];
    r.read_exact(&mut kind_byte)?;
    let kind = match kind_byte[0] {
        0 => EncoderKind::Gmf,
        1 => EncoderKind::LightGcn,
        k => return Err(Error::BadFormat(format!("unknown encoder tag {k}"))),
    };
    let mut read_table = |rows: usize| -> Result<Mat> {
        let mut data = vec![0.0; rows * d];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(Mat::from_vec(rows, d, data))
    };
    let user_table = read_table(m)?;
    let item_table = read_table(n)?;
    Ok(EmbeddingState {
        user_table,
        item_table,
        kind,
        num_layers: layers,
    })
}
