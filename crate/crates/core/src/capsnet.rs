//! Capsule classifier head: ComposeCaps, squash, prediction vectors,
//! routing-by-agreement, margin and reconstruction losses, plus the fully
//! connected baseline it replaces.

use capsnet3d_tensor::{Element, Tensor, Var};

use crate::config::{ModelConfig, ReconPairing, SquashVariant};
use crate::error::{Error, Result};
use crate::params::{init_bn, init_dense, Ctx, Init, ParamStore};

/// Guard inside every norm's square root.
pub const NORM_EPS: f64 = 1e-9;

pub fn init_head<T: Element>(store: &mut ParamStore<T>, init: &mut Init, cfg: &ModelConfig) {
    let (m, c) = (cfg.feature_dim(), cfg.num_classes);
    match cfg.classifier {
        crate::config::ClassifierKind::Fc => {
            let mut fan_in = m;
            for (i, &w) in cfg.fc_widths.iter().enumerate() {
                init_dense(store, init, &format!("head.fc.{i}"), fan_in, w, false);
                init_bn(store, &format!("head.fc.{i}.bn"), w);
                fan_in = w;
            }
            init_dense(store, init, "head.fc.out", fan_in, c, true);
        }
        crate::config::ClassifierKind::Capsule => {
            let (q, t, z) = (cfg.primary_caps(), cfg.t, cfg.z);
            if cfg.compose_caps {
                store.insert_param("head.compose.w", init.normal(&[m, t * q], 0.1 / (m as f64).sqrt()));
                store.insert_param("head.compose.b", Tensor::zeros(&[t * q]));
            }
            store.insert_param("head.pred.w", init.normal(&[q, c, z, t], 0.1 / (t as f64).sqrt()));
            let mut fan_in = c * z;
            for (i, &w) in cfg.decoder_widths.iter().enumerate() {
                init_dense(store, init, &format!("head.decoder.{i}"), fan_in, w, true);
                fan_in = w;
            }
            init_dense(store, init, "head.decoder.out", fan_in, cfg.n_points * 3, true);
        }
    }
}

/// Squashes vectors along the last axis.
///
/// `Canonical`: `v = |s|²/(1+|s|²) · s/|s|`, norms in `[0, 1)`.
/// `PaperLiteral`: `v = s / (1 + |s|²)`.
pub fn squash<T: Element>(ctx: &mut Ctx<'_, T>, s: Var, variant: SquashVariant) -> Result<Var> {
    let axis = ctx.g.shape(s).len() - 1;
    let sq = ctx.g.square(s);
    let n2 = ctx.g.sum(sq, axis, true)?;
    let one_plus = ctx.g.shift(n2, T::one());
    let factor = match variant {
        SquashVariant::Canonical => {
            let norm = ctx.g.l2_norm(s, axis, T::from_f64_lossy(NORM_EPS), true)?;
            let denom = ctx.g.mul(one_plus, norm)?;
            ctx.g.div(n2, denom)?
        }
        SquashVariant::PaperLiteral => {
            let one = ctx.g.constant(Tensor::scalar(T::one()));
            ctx.g.div(one, one_plus)?
        }
    };
    Ok(ctx.g.mul(s, factor)?)
}

/// Lengths of the vectors along the last axis (epsilon-guarded).
pub fn capsule_norms<T: Element>(ctx: &mut Ctx<'_, T>, v: Var) -> Result<Var> {
    let axis = ctx.g.shape(v).len() - 1;
    Ok(ctx.g.l2_norm(v, axis, T::from_f64_lossy(NORM_EPS), false)?)
}

/// `f: [b, m] -> u: [b, q, t]`. With ComposeCaps, `P = sigmoid(f·W + b)` is
/// split row-major into `q` capsules of dimension `t`; without it, `f` itself
/// is split. Each capsule is squashed.
pub fn compose_caps<T: Element>(ctx: &mut Ctx<'_, T>, f: Var, cfg: &ModelConfig) -> Result<Var> {
    let &[b, m] = ctx.g.shape(f) else {
        return Err(Error::Argument("feature vector must be [b, m]".into()));
    };
    let t = cfg.t;
    let p = if cfg.compose_caps {
        let w = ctx.param("head.compose.w")?;
        let rows = ctx.g.shape(w)[0];
        if rows != m {
            return Err(Error::config(
                "aggregator",
                format!("feature vector has {m} entries but ComposeCaps expects {rows}"),
            ));
        }
        let a = ctx.dense(f, "head.compose", true)?;
        ctx.g.sigmoid(a)
    } else {
        if m % t != 0 {
            return Err(Error::config("t", format!("feature width {m} is not divisible by {t}")));
        }
        f
    };
    let width = ctx.g.shape(p)[1];
    let caps = ctx.g.reshape(p, &[b, width / t, t])?;
    squash(ctx, caps, cfg.squash_variant)
}

/// `û_ij = W_ij u_i` for `u: [b, q, t]` and `W: [q, c, z, t]`, giving
/// `[b, q, c, z]`.
pub fn predict_vectors<T: Element>(ctx: &mut Ctx<'_, T>, u: Var, w: Var) -> Result<Var> {
    let (&[b, q, t], &[wq, c, z, wt]) = (ctx.g.shape(u), ctx.g.shape(w)) else {
        return Err(Error::Argument("prediction expects u: [b, q, t] and W: [q, c, z, t]".into()));
    };
    if (wq, wt) != (q, t) {
        return Err(Error::config("q", format!("{q} primary capsules of dim {t}, weights are for {wq} of dim {wt}")));
    }
    let wt_ = ctx.g.permute(w, &[0, 3, 1, 2])?;
    let wt_ = ctx.g.reshape(wt_, &[q, t, c * z])?;
    let ut = ctx.g.permute(u, &[1, 0, 2])?;
    let prod = ctx.g.bmm(ut, wt_)?;
    let prod = ctx.g.permute(prod, &[1, 0, 2])?;
    Ok(ctx.g.reshape(prod, &[b, q, c, z])?)
}

pub struct Routed {
    /// Class capsules `[b, c, z]`.
    pub v: Var,
    /// Coupling coefficients `[b, q, c]` used in each iteration.
    pub couplings: Vec<Var>,
}

/// Routing-by-agreement over predictions `û: [b, q, c, z]`, unrolled for
/// `r` iterations with gradients through every step.
pub fn route<T: Element>(ctx: &mut Ctx<'_, T>, u_hat: Var, r: usize, variant: SquashVariant) -> Result<Routed> {
    if r < 1 {
        return Err(Error::Argument("routing needs at least one iteration".into()));
    }
    let &[b, q, c, z] = ctx.g.shape(u_hat) else {
        return Err(Error::Argument("routing expects [b, q, c, z] predictions".into()));
    };
    let mut logits = ctx.g.constant(Tensor::zeros(&[b, q, c]));
    let mut couplings = Vec::with_capacity(r);
    let mut v = None;
    for it in 0..r {
        let coupling = ctx.g.softmax(logits, 2)?;
        couplings.push(coupling);
        let cw = ctx.g.reshape(coupling, &[b, q, c, 1])?;
        let weighted = ctx.g.mul(cw, u_hat)?;
        let s = ctx.g.sum(weighted, 1, false)?;
        let out = squash(ctx, s, variant)?;
        v = Some(out);
        if it + 1 < r {
            let vb = ctx.g.reshape(out, &[b, 1, c, z])?;
            let prod = ctx.g.mul(u_hat, vb)?;
            let agreement = ctx.g.sum(prod, 3, false)?;
            logits = ctx.g.add(logits, agreement)?;
        }
    }
    Ok(Routed {
        v: v.expect("r >= 1"),
        couplings,
    })
}

fn one_hot<T: Element>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Argument(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// `Σ_j T_j max(0, m⁺ − |v_j|)² + λ (1 − T_j) max(0, |v_j| − m⁻)²`, summed
/// over classes and averaged over the batch.
pub fn margin_loss<T: Element>(ctx: &mut Ctx<'_, T>, v: Var, labels: &[usize], cfg: &ModelConfig) -> Result<Var> {
    let &[b, c, _] = ctx.g.shape(v) else {
        return Err(Error::Argument("margin loss expects [b, c, z] capsules".into()));
    };
    if labels.len() != b {
        return Err(Error::Argument(format!("{} labels for a batch of {b}", labels.len())));
    }
    let target: Tensor<T> = one_hot(labels, c)?;
    let rest = Tensor::from_fn(&[b, c], |i| T::one() - target.data()[i]);
    let norms = capsule_norms(ctx, v)?;
    let neg_norms = ctx.g.scale(norms, -T::one());
    let pos_gap = ctx.g.shift(neg_norms, T::from_f64_lossy(cfg.m_plus));
    let pos_gap = ctx.g.relu(pos_gap);
    let pos = ctx.g.square(pos_gap);
    let neg_gap = ctx.g.shift(norms, T::from_f64_lossy(-cfg.m_minus));
    let neg_gap = ctx.g.relu(neg_gap);
    let neg = ctx.g.square(neg_gap);
    let target = ctx.g.constant(target);
    let rest = ctx.g.constant(rest);
    let pos = ctx.g.mul(pos, target)?;
    let neg = ctx.g.mul(neg, rest)?;
    let neg = ctx.g.scale(neg, T::from_f64_lossy(cfg.lambda));
    let per = ctx.g.add(pos, neg)?;
    let total = ctx.g.sum_all(per)?;
    Ok(ctx.g.scale(total, T::from_f64_lossy(1.0 / b as f64)))
}

/// Index of the longest capsule per sample; the first index wins ties.
pub fn classify<T: Element>(norms: &Tensor<T>) -> Vec<usize> {
    let c = norms.shape()[norms.rank() - 1];
    norms
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Zeros every class capsule except `keep[i]` and decodes the flattened
/// result through the dense stack into `[b, n, 3]`.
pub fn decode<T: Element>(ctx: &mut Ctx<'_, T>, v: Var, keep: &[usize], cfg: &ModelConfig) -> Result<Var> {
    let &[b, c, z] = ctx.g.shape(v) else {
        return Err(Error::Argument("decoder expects [b, c, z] capsules".into()));
    };
    let mask = one_hot::<T>(keep, c)?.reshape(&[b, c, 1])?;
    let mask = ctx.g.constant(mask);
    let masked = ctx.g.mul(v, mask)?;
    let mut h = ctx.g.reshape(masked, &[b, c * z])?;
    for i in 0..cfg.decoder_widths.len() {
        h = ctx.dense(h, &format!("head.decoder.{i}"), true)?;
        h = ctx.g.relu(h);
    }
    let out = ctx.dense(h, "head.decoder.out", true)?;
    let n = ctx.g.shape(out)[1] / 3;
    Ok(ctx.g.reshape(out, &[b, n, 3])?)
}

/// Unscaled reconstruction error, averaged over the batch: the index-paired
/// squared error summed over points, or the symmetric Chamfer distance.
pub fn reconstruction_error<T: Element>(ctx: &mut Ctx<'_, T>, rec: Var, x: Var, pairing: ReconPairing) -> Result<Var> {
    let (rs, xs) = (ctx.g.shape(rec).to_vec(), ctx.g.shape(x).to_vec());
    if rs != xs || rs.len() != 3 {
        return Err(Error::Tensor(capsnet3d_tensor::TensorError::Shape {
            op: "reconstruction_loss",
            lhs: rs,
            rhs: xs,
        }));
    }
    let b = rs[0];
    let total = match pairing {
        ReconPairing::Index => {
            let d = ctx.g.sub(rec, x)?;
            let sq = ctx.g.square(d);
            ctx.g.sum_all(sq)?
        }
        ReconPairing::Chamfer => {
            let per = ctx.g.chamfer(rec, x)?;
            ctx.g.sum_all(per)?
        }
    };
    Ok(ctx.g.scale(total, T::from_f64_lossy(1.0 / b as f64)))
}

/// `α` times [`reconstruction_error`].
pub fn reconstruction_loss<T: Element>(ctx: &mut Ctx<'_, T>, rec: Var, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let e = reconstruction_error(ctx, rec, x, cfg.recon_pairing)?;
    Ok(ctx.g.scale(e, T::from_f64_lossy(cfg.alpha)))
}

/// `f: [b, m]` through dense + BN + ReLU + dropout blocks to class logits.
pub fn fc_baseline<T: Element>(ctx: &mut Ctx<'_, T>, f: Var, cfg: &ModelConfig) -> Result<Var> {
    let mut h = f;
    for i in 0..cfg.fc_widths.len() {
        let path = format!("head.fc.{i}");
        h = ctx.dense(h, &path, false)?;
        h = ctx.batch_norm(h, &format!("{path}.bn"))?;
        h = ctx.g.relu(h);
        h = ctx.dropout(h, cfg.dropout_keep)?;
    }
    ctx.dense(h, "head.fc.out", true)
}

/// Mean softmax cross-entropy of `logits: [b, c]`.
pub fn cross_entropy<T: Element>(ctx: &mut Ctx<'_, T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let &[b, c] = ctx.g.shape(logits) else {
        return Err(Error::Argument("cross entropy expects [b, c] logits".into()));
    };
    let target: Tensor<T> = one_hot(labels, c)?;
    let logp = ctx.g.log_softmax(logits, 1)?;
    let target = ctx.g.constant(target);
    let picked = ctx.g.mul(logp, target)?;
    let total = ctx.g.sum_all(picked)?;
    Ok(ctx.g.scale(total, T::from_f64_lossy(-1.0 / b as f64)))
}
