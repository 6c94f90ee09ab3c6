//! The gradient-matching engine: branch gradients on the interaction and
//! interest weightings, the cosine column distance between them, the outer
//! gradient into the generator through the alignment-linearity decomposition,
//! and the full training loops (matcher and normal baseline).
//!
//! Per iteration both branches share one batch, one forward pass (single
//! trajectory mode), the per-pair distance gradients, and the uniformity
//! gradient; only the pair weights differ, so the interest branch costs
//! little more than a weighted re-sum plus the generator passes.

use rand_chacha::ChaCha8Rng;

use crate::config::{
    seeded_rng, GenInput, LossKind, RngStream, TrainConfig, TrajectoryMode,
};
use crate::data::{sample_batch, SplitDataset, TrainBatch};
use crate::encoder::{
    encoder_forward, init_embeddings, normalize_adjacency, propagate, EmbeddingState, Embeddings,
    EncoderKind, NormalizedAdjacency,
};
use crate::interest::{
    gen_backward, gen_forward, init_gen, vae_kl, GenDims, GenGrad, GenVariant, GenerativeParams,
    InterestWeights,
};
use crate::loss::{
    alignment_value, bpr_grad, bpr_loss, pair_distance_grads_with, uniformity_grads,
    uniformity_value, wau_grad_with, NormalizedBatch, PairGrad, PairWeights, RowGrads,
};
use crate::math::{axpy, dot, Mat};
use crate::{Error, Result};

/// Per-parameter-matrix gradients restricted to batch-touched rows; the two
/// layers are the user table and the item table.
pub type GradientBundle = RowGrads;

/// Columns with a norm below this on either side contribute zero to the
/// distance and receive zero gradient.
pub const COLUMN_SKIP_EPS: f64 = 1e-12;

/// Everything the mapping between output-space gradients and table-space
/// bundles needs to know about the encoder.
pub struct EncoderContext<'a> {
    pub kind: EncoderKind,
    pub adjacency: Option<&'a NormalizedAdjacency>,
    pub layers: usize,
    pub num_users: usize,
    pub num_items: usize,
}

impl<'a> EncoderContext<'a> {
    pub fn new(cfg: &TrainConfig, split: &SplitDataset, adjacency: Option<&'a NormalizedAdjacency>) -> Self {
        EncoderContext {
            kind: cfg.encoder,
            adjacency,
            layers: cfg.layers,
            num_users: split.num_users,
            num_items: split.num_items,
        }
    }
}

/// Map output-space row gradients to table-space bundles: identity for the
/// lookup encoder, adjoint propagation (restricted back to the same touched
/// rows) for graph convolution.
pub fn map_z_grads(zg: &RowGrads, ctx: &EncoderContext<'_>) -> Result<GradientBundle> {
    match ctx.kind {
        EncoderKind::Gmf => Ok(zg.clone()),
        EncoderKind::LightGcn => {
            let adj = ctx
                .adjacency
                .ok_or_else(|| Error::ShapeMismatch("graph convolution requires an adjacency".into()))?;
            let d = zg.user_grad.cols();
            let mut full = Mat::zeros(ctx.num_users + ctx.num_items, d);
            for (slot, &u) in zg.users.iter().enumerate() {
                full.row_mut(u as usize).copy_from_slice(zg.user_grad.row(slot));
            }
            for (slot, &i) in zg.items.iter().enumerate() {
                full.row_mut(ctx.num_users + i as usize)
                    .copy_from_slice(zg.item_grad.row(slot));
            }
            let mapped = propagate(adj, &full, ctx.layers)?;
            let mut out = zg.clone();
            for (slot, &u) in out.users.iter().enumerate() {
                out.user_grad
                    .row_mut(slot)
                    .copy_from_slice(mapped.row(u as usize));
            }
            let items = out.items.clone();
            for (slot, &i) in items.iter().enumerate() {
                out.item_grad
                    .row_mut(slot)
                    .copy_from_slice(mapped.row(ctx.num_users + i as usize));
            }
            Ok(out)
        }
    }
}

/// Output-space row gradients for a given weight vector: the weighted sum of
/// the per-pair distance gradients plus alpha times the uniformity gradient.
pub fn weighted_row_grads(
    batch: &TrainBatch,
    pair_grads: &[PairGrad],
    weights: &[f64],
    unif: &RowGrads,
    alpha: f64,
    dim: usize,
) -> RowGrads {
    let mut zg = RowGrads::zeros(batch, dim);
    for (pg, &w) in pair_grads.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let slot = zg.user_slot(pg.user);
        axpy(zg.user_grad.row_mut(slot), &pg.user_grad, w);
        let slot = zg.item_slot(pg.item);
        axpy(zg.item_grad.row_mut(slot), &pg.item_grad, w);
    }
    if alpha != 0.0 {
        zg.add_scaled(unif, alpha);
    }
    zg
}

/// One iteration's worth of branch state.
pub struct BranchGradients {
    pub bundle_a: GradientBundle,
    pub bundle_r: GradientBundle,
    pub pair_grads: Vec<PairGrad>,
    pub weights_r: InterestWeights,
    pub align_a: f64,
    pub align_r: f64,
    pub uniformity: f64,
}

/// Compute both branch bundles at one parameter state: indicator weights on
/// the interaction branch, generated weights on the interest branch. The
/// same batch, forward pass, pair gradients, and uniformity gradient back
/// both bundles.
#[allow(clippy::too_many_arguments)]
pub fn compute_branch_gradients(
    batch: &TrainBatch,
    z: &Embeddings<'_>,
    gen_z: &Embeddings<'_>,
    gen: &GenerativeParams,
    split: &SplitDataset,
    alpha: f64,
    ctx: &EncoderContext<'_>,
    eps_rng: Option<&mut ChaCha8Rng>,
) -> Result<BranchGradients> {
    let pairs: Vec<(u32, u32)> = batch.pairs().collect();
    let weights_a = PairWeights::from_interactions(batch, split);
    let weights_r = gen_forward(gen, &pairs, gen_z, eps_rng)?;

    let dim = z.dim();
    let nb = NormalizedBatch::new(batch, z)?;
    let pair_grads = pair_distance_grads_with(&nb, batch, dim);
    let unif = uniformity_grads(&nb, batch, dim);

    let zg_a = weighted_row_grads(batch, &pair_grads, weights_a.values(), &unif, alpha, dim);
    let zg_r = weighted_row_grads(batch, &pair_grads, &weights_r.values, &unif, alpha, dim);
    let bundle_a = map_z_grads(&zg_a, ctx)?;
    let bundle_r = map_z_grads(&zg_r, ctx)?;
    assert!(bundle_a.same_rows_as(&bundle_r), "branch bundles must share touched rows");

    let align_a = alignment_value(&nb, batch, weights_a.values());
    let align_r = alignment_value(&nb, batch, &weights_r.values);
    let uniformity = uniformity_value(&nb);
    Ok(BranchGradients {
        bundle_a,
        bundle_r,
        pair_grads,
        weights_r,
        align_a,
        align_r,
        uniformity,
    })
}

fn column_stats(a: &Mat, b: &Mat, c: usize) -> (f64, f64, f64) {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for r in 0..a.rows() {
        let x = a.get(r, c);
        let y = b.get(r, c);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (ab, aa.sqrt(), bb.sqrt())
}

/// Sum over layers and columns of one minus the column cosine between the two
/// bundles. Columns where either norm is below [`COLUMN_SKIP_EPS`]
/// contribute zero.
pub fn grad_distance(g_a: &GradientBundle, g_r: &GradientBundle) -> Result<f64> {
    if !g_a.same_rows_as(g_r) {
        return Err(Error::ShapeMismatch("bundles carry different touched rows".into()));
    }
    let mut total = 0.0;
    for (ma, mb) in [(&g_a.user_grad, &g_r.user_grad), (&g_a.item_grad, &g_r.item_grad)] {
        for c in 0..ma.cols() {
            let (ab, na, nb) = column_stats(ma, mb, c);
            if na < COLUMN_SKIP_EPS || nb < COLUMN_SKIP_EPS {
                continue;
            }
            total += 1.0 - ab / (na * nb);
        }
    }
    Ok(total)
}

/// Gradient of [`grad_distance`] with respect to the interest-branch bundle.
pub fn grad_distance_backward(
    g_a: &GradientBundle,
    g_r: &GradientBundle,
) -> Result<GradientBundle> {
    if !g_a.same_rows_as(g_r) {
        return Err(Error::ShapeMismatch("bundles carry different touched rows".into()));
    }
    let mut out = g_r.clone();
    out.user_grad.fill(0.0);
    out.item_grad.fill(0.0);
    for (ma, mb, mo) in [
        (&g_a.user_grad, &g_r.user_grad, &mut out.user_grad),
        (&g_a.item_grad, &g_r.item_grad, &mut out.item_grad),
    ] {
        for c in 0..ma.cols() {
            let (ab, na, nb) = column_stats(ma, mb, c);
            if na < COLUMN_SKIP_EPS || nb < COLUMN_SKIP_EPS {
                continue;
            }
            let cos = ab / (na * nb);
            // d/dG^R_c of (1 - cos) = -(A_hat/||R|| - cos * R / ||R||^2)
            for r in 0..ma.rows() {
                let a_hat = ma.get(r, c) / na;
                let v = -(a_hat / nb - cos * mb.get(r, c) / (nb * nb));
                mo.set(r, c, v);
            }
        }
    }
    Ok(out)
}

/// Chain the distance gradient through the per-pair decomposition into the
/// generator parameters: dD/dR_(u,i) is the inner product of dD/dG_R with the
/// pair's (encoder-mapped) distance gradient, and dD/dphi follows from the
/// generator backward pass with those per-pair upstreams.
#[allow(clippy::too_many_arguments)]
pub fn outer_gradient(
    dd_dgr: &GradientBundle,
    pair_grads: &[PairGrad],
    gen: &GenerativeParams,
    batch: &TrainBatch,
    gen_z: &Embeddings<'_>,
    weights_r: &InterestWeights,
    ctx: &EncoderContext<'_>,
) -> Result<GenGrad> {
    let upstream = pair_upstreams(dd_dgr, pair_grads, ctx)?;
    let pairs: Vec<(u32, u32)> = batch.pairs().collect();
    gen_backward(gen, &pairs, gen_z, &upstream, weights_r)
}

/// dD/dR per pair. For graph convolution the bundle gradient is pulled back
/// through the (self-adjoint) propagation once, then dotted with the
/// output-space pair gradients.
pub fn pair_upstreams(
    dd_dgr: &GradientBundle,
    pair_grads: &[PairGrad],
    ctx: &EncoderContext<'_>,
) -> Result<Vec<f64>> {
    match ctx.kind {
        EncoderKind::Gmf => Ok(pair_grads
            .iter()
            .map(|pg| {
                let us = dd_dgr.user_slot(pg.user);
                let is = dd_dgr.item_slot(pg.item);
                dot(dd_dgr.user_grad.row(us), &pg.user_grad)
                    + dot(dd_dgr.item_grad.row(is), &pg.item_grad)
            })
            .collect()),
        EncoderKind::LightGcn => {
            let adj = ctx
                .adjacency
                .ok_or_else(|| Error::ShapeMismatch("graph convolution requires an adjacency".into()))?;
            let d = dd_dgr.user_grad.cols();
            let mut full = Mat::zeros(ctx.num_users + ctx.num_items, d);
            for (slot, &u) in dd_dgr.users.iter().enumerate() {
                full.row_mut(u as usize).copy_from_slice(dd_dgr.user_grad.row(slot));
            }
            for (slot, &i) in dd_dgr.items.iter().enumerate() {
                full.row_mut(ctx.num_users + i as usize)
                    .copy_from_slice(dd_dgr.item_grad.row(slot));
            }
            let pulled = propagate(adj, &full, ctx.layers)?;
            Ok(pair_grads
                .iter()
                .map(|pg| {
                    dot(pulled.row(pg.user as usize), &pg.user_grad)
                        + dot(pulled.row(ctx.num_users + pg.item as usize), &pg.item_grad)
                })
                .collect())
        }
    }
}

/// One plain gradient-descent step on the touched rows.
pub fn inner_step(state: &mut EmbeddingState, bundle: &GradientBundle, eta: f64) {
    for (slot, &u) in bundle.users.iter().enumerate() {
        axpy(
            state.user_table.row_mut(u as usize),
            bundle.user_grad.row(slot),
            -eta,
        );
    }
    for (slot, &i) in bundle.items.iter().enumerate() {
        axpy(
            state.item_table.row_mut(i as usize),
            bundle.item_grad.row(slot),
            -eta,
        );
    }
}

/// Adam over the generator's flat parameter vector.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let m_hat = self.m[k] / b1t;
            let v_hat = self.v[k] / b2t;
            params[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One training-log row; the CSV schema is
/// `round,iter,D,align_A,align_R,unif,loss_A,loss_R`.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub round: usize,
    pub iter: usize,
    pub d: f64,
    pub align_a: f64,
    pub align_r: f64,
    pub unif: f64,
    pub loss_a: f64,
    pub loss_r: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct RoundMean {
    pub round: usize,
    pub mean_d: f64,
    pub mean_loss_a: f64,
    pub mean_loss_r: f64,
}

#[derive(Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub round_means: Vec<RoundMean>,
}

impl TrainLog {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "round,iter,D,align_A,align_R,unif,loss_A,loss_R")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.round, r.iter, r.d, r.align_a, r.align_r, r.unif, r.loss_a, r.loss_r
            )?;
        }
        Ok(())
    }

    fn push_round_mean(&mut self, round: usize) {
        let rows: Vec<&LogRow> = self.rows.iter().filter(|r| r.round == round).collect();
        if rows.is_empty() {
            return;
        }
        let n = rows.len() as f64;
        self.round_means.push(RoundMean {
            round,
            mean_d: rows.iter().map(|r| r.d).sum::<f64>() / n,
            mean_loss_a: rows.iter().map(|r| r.loss_a).sum::<f64>() / n,
            mean_loss_r: rows.iter().map(|r| r.loss_r).sum::<f64>() / n,
        });
    }
}

pub struct QgraceOutcome {
    /// Embeddings trained on the interest branch.
    pub state: EmbeddingState,
    pub gen: GenerativeParams,
    pub log: TrainLog,
}

fn gen_dims(cfg: &TrainConfig, split: &SplitDataset) -> GenDims {
    GenDims {
        embed_dim: cfg.dim,
        num_users: split.num_users,
        num_items: split.num_items,
        factor_dim: cfg.effective_gen_dim(),
        hidden: cfg.effective_hidden(),
        latent: cfg.effective_latent(),
    }
}

/// The full matcher loop: `iter_out` rounds of `iter_in` inner iterations.
/// Each inner iteration samples a batch, computes both branch gradient
/// bundles, steps the embeddings on the interest branch, and accumulates the
/// distance gradient into the generator; each round ends with one Adam step
/// on the generator.
pub fn qgrace_train(cfg: &TrainConfig, split: &SplitDataset) -> Result<QgraceOutcome> {
    cfg.validate()?;
    if cfg.loss == LossKind::Bpr {
        return Err(Error::Config(
            "gradient matching requires the wau loss; bpr applies to normal training only".into(),
        ));
    }
    let adjacency = match cfg.encoder {
        EncoderKind::LightGcn => Some(normalize_adjacency(split)),
        EncoderKind::Gmf => None,
    };
    let ctx = EncoderContext::new(cfg, split, adjacency.as_ref());

    let mut state = init_embeddings(
        split.num_users,
        split.num_items,
        cfg.dim,
        cfg.encoder,
        cfg.layers,
        cfg.seed,
    );
    // Second trajectory for the interaction branch in dual mode.
    let mut state_a = match cfg.trajectory {
        TrajectoryMode::Dual => Some(state.clone()),
        TrajectoryMode::Single => None,
    };
    let mut gen = init_gen(cfg.generator, gen_dims(cfg, split), cfg.seed);
    let mut adam = Adam::new(gen.num_params());
    let mut batch_rng = seeded_rng(cfg.seed, RngStream::Batch);
    let mut eps_rng = seeded_rng(cfg.seed, RngStream::VaeEps);
    let mut log = TrainLog::default();

    for round in 0..cfg.iter_out {
        let mut accum = GenGrad::zeros_like(&gen);
        for iter in 0..cfg.iter_in {
            let batch = sample_batch(split, cfg.batch_size, cfg.k_neg, &mut batch_rng)?;
            let (bundle_a, bundle_r, phi_grad, row) = match &mut state_a {
                None => {
                    single_iteration(cfg, split, &ctx, &state, &gen, &batch, &mut eps_rng, round, iter)?
                }
                Some(state_a) => dual_iteration(
                    cfg, split, &ctx, &state, state_a, &gen, &batch, &mut eps_rng, round, iter,
                )?,
            };
            if !row.d.is_finite() {
                return Err(Error::Diverged { round, what: "matching distance".into() });
            }
            if !row.loss_a.is_finite() || !row.loss_r.is_finite() {
                return Err(Error::Diverged { round, what: "loss".into() });
            }
            accum.add_scaled(&phi_grad, 1.0);
            if let Some(sa) = &mut state_a {
                inner_step(sa, &bundle_a, cfg.eta);
            }
            inner_step(&mut state, &bundle_r, cfg.eta);
            log.rows.push(row);
        }
        if !accum.is_finite() {
            return Err(Error::Diverged { round, what: "generator gradient".into() });
        }
        adam.step(gen.flat_mut(), &accum.flat, cfg.outer_lr);
        log.push_round_mean(round);
    }
    Ok(QgraceOutcome { state, gen, log })
}

#[allow(clippy::too_many_arguments)]
fn single_iteration(
    cfg: &TrainConfig,
    split: &SplitDataset,
    ctx: &EncoderContext<'_>,
    state: &EmbeddingState,
    gen: &GenerativeParams,
    batch: &TrainBatch,
    eps_rng: &mut ChaCha8Rng,
    round: usize,
    iter: usize,
) -> Result<(GradientBundle, GradientBundle, GenGrad, LogRow)> {
    let z = encoder_forward(state, ctx.adjacency)?;
    let base_view;
    let gen_z: &Embeddings<'_> = match cfg.gen_input {
        GenInput::Propagated => &z,
        GenInput::BaseTables => {
            base_view = Embeddings::Tables(state);
            &base_view
        }
    };
    let bg = compute_branch_gradients(batch, &z, gen_z, gen, split, cfg.alpha, ctx, Some(eps_rng))?;
    let d = grad_distance(&bg.bundle_a, &bg.bundle_r)?;
    let dd = grad_distance_backward(&bg.bundle_a, &bg.bundle_r)?;
    let mut phi_grad = outer_gradient(&dd, &bg.pair_grads, gen, batch, gen_z, &bg.weights_r, ctx)?;
    if cfg.beta_kl > 0.0 && gen.variant == GenVariant::Vae {
        let pairs: Vec<(u32, u32)> = batch.pairs().collect();
        let (_, kl_grad) = vae_kl(gen, &pairs, gen_z, &bg.weights_r)?;
        phi_grad.add_scaled(&kl_grad, cfg.beta_kl);
    }
    let row = LogRow {
        round,
        iter,
        d,
        align_a: bg.align_a,
        align_r: bg.align_r,
        unif: bg.uniformity,
        loss_a: bg.align_a + cfg.alpha * bg.uniformity,
        loss_r: bg.align_r + cfg.alpha * bg.uniformity,
    };
    Ok((bg.bundle_a, bg.bundle_r, phi_grad, row))
}

#[allow(clippy::too_many_arguments)]
fn dual_iteration(
    cfg: &TrainConfig,
    split: &SplitDataset,
    ctx: &EncoderContext<'_>,
    state_r: &EmbeddingState,
    state_a: &EmbeddingState,
    gen: &GenerativeParams,
    batch: &TrainBatch,
    eps_rng: &mut ChaCha8Rng,
    round: usize,
    iter: usize,
) -> Result<(GradientBundle, GradientBundle, GenGrad, LogRow)> {
    let dim = cfg.dim;
    // Interaction branch at its own trajectory.
    let (bundle_a, align_a, unif_a) = {
        let z_a = encoder_forward(state_a, ctx.adjacency)?;
        let nb = NormalizedBatch::new(batch, &z_a)?;
        let weights_a = PairWeights::from_interactions(batch, split);
        let pair_grads = pair_distance_grads_with(&nb, batch, dim);
        let unif = uniformity_grads(&nb, batch, dim);
        let zg = weighted_row_grads(batch, &pair_grads, weights_a.values(), &unif, cfg.alpha, dim);
        (
            map_z_grads(&zg, ctx)?,
            alignment_value(&nb, batch, weights_a.values()),
            uniformity_value(&nb),
        )
    };
    // Interest branch.
    let z_r = encoder_forward(state_r, ctx.adjacency)?;
    let base_view;
    let gen_z: &Embeddings<'_> = match cfg.gen_input {
        GenInput::Propagated => &z_r,
        GenInput::BaseTables => {
            base_view = Embeddings::Tables(state_r);
            &base_view
        }
    };
    let pairs: Vec<(u32, u32)> = batch.pairs().collect();
    let weights_r = gen_forward(gen, &pairs, gen_z, Some(eps_rng))?;
    let nb = NormalizedBatch::new(batch, &z_r)?;
    let pair_grads = pair_distance_grads_with(&nb, batch, dim);
    let unif = uniformity_grads(&nb, batch, dim);
    let zg_r = weighted_row_grads(batch, &pair_grads, &weights_r.values, &unif, cfg.alpha, dim);
    let bundle_r = map_z_grads(&zg_r, ctx)?;
    assert!(bundle_a.same_rows_as(&bundle_r), "branch bundles must share touched rows");

    let d = grad_distance(&bundle_a, &bundle_r)?;
    let dd = grad_distance_backward(&bundle_a, &bundle_r)?;
    let mut phi_grad = outer_gradient(&dd, &pair_grads, gen, batch, gen_z, &weights_r, ctx)?;
    if cfg.beta_kl > 0.0 && gen.variant == GenVariant::Vae {
        let (_, kl_grad) = vae_kl(gen, &pairs, gen_z, &weights_r)?;
        phi_grad.add_scaled(&kl_grad, cfg.beta_kl);
    }
    let align_r = alignment_value(&nb, batch, &weights_r.values);
    let unif_r = uniformity_value(&nb);
    let row = LogRow {
        round,
        iter,
        d,
        align_a,
        align_r,
        unif: unif_r,
        loss_a: align_a + cfg.alpha * unif_a,
        loss_r: align_r + cfg.alpha * unif_r,
    };
    Ok((bundle_a, bundle_r, phi_grad, row))
}

pub struct NormalOutcome {
    pub state: EmbeddingState,
    pub log: TrainLog,
}

/// Baseline loop: plain gradient descent on WAU with interaction weights (or
/// BPR), with the same batching and iteration grid as the matcher.
pub fn normal_train(cfg: &TrainConfig, split: &SplitDataset) -> Result<NormalOutcome> {
    cfg.validate()?;
    if cfg.loss == LossKind::Bpr && cfg.k_neg < 1 {
        return Err(Error::Config("bpr requires k_neg >= 1".into()));
    }
    let adjacency = match cfg.encoder {
        EncoderKind::LightGcn => Some(normalize_adjacency(split)),
        EncoderKind::Gmf => None,
    };
    let ctx = EncoderContext::new(cfg, split, adjacency.as_ref());
    let mut state = init_embeddings(
        split.num_users,
        split.num_items,
        cfg.dim,
        cfg.encoder,
        cfg.layers,
        cfg.seed,
    );
    let mut batch_rng = seeded_rng(cfg.seed, RngStream::Batch);
    let mut log = TrainLog::default();

    for round in 0..cfg.iter_out {
        for iter in 0..cfg.iter_in {
            let batch = sample_batch(split, cfg.batch_size, cfg.k_neg, &mut batch_rng)?;
            let (bundle, row) = {
                let z = encoder_forward(&state, ctx.adjacency)?;
                match cfg.loss {
                    LossKind::Wau => {
                        let nb = NormalizedBatch::new(&batch, &z)?;
                        let weights = PairWeights::from_interactions(&batch, split);
                        let zg = wau_grad_with(&nb, &batch, weights.values(), cfg.alpha, cfg.dim);
                        let bundle = map_z_grads(&zg, &ctx)?;
                        let align = alignment_value(&nb, &batch, weights.values());
                        let unif = uniformity_value(&nb);
                        let loss = align + cfg.alpha * unif;
                        (
                            bundle,
                            LogRow {
                                round,
                                iter,
                                d: 0.0,
                                align_a: align,
                                align_r: align,
                                unif,
                                loss_a: loss,
                                loss_r: loss,
                            },
                        )
                    }
                    LossKind::Bpr => {
                        let zg = bpr_grad(&batch, &z)?;
                        let bundle = map_z_grads(&zg, &ctx)?;
                        let loss = bpr_loss(&batch, &z)?;
                        (
                            bundle,
                            LogRow {
                                round,
                                iter,
                                d: 0.0,
                                align_a: 0.0,
                                align_r: 0.0,
                                unif: 0.0,
                                loss_a: loss,
                                loss_r: loss,
                            },
                        )
                    }
                }
            };
            if !row.loss_a.is_finite() {
                return Err(Error::Diverged { round, what: "loss".into() });
            }
            inner_step(&mut state, &bundle, cfg.eta);
            log.rows.push(row);
        }
        log.push_round_mean(round);
    }
    Ok(NormalOutcome { state, log })
}
