//! End-to-end network: extractor, aggregator and classifier head.

use capsnet3d_tensor::{Element, Graph, Tensor, Var};

use crate::aggregation::{aggregate, vlad_init, VladParams};
use crate::capsnet::{
    capsule_norms, classify, compose_caps, cross_entropy, decode, fc_baseline, init_head, margin_loss, predict_vectors,
    reconstruction_error, route,
};
use crate::config::{AggregatorKind, ClassifierKind, ExtractorKind, ModelConfig};
use crate::error::{Error, Result};
use crate::features::{extract, init_extractor, orthogonality_penalty};
use crate::params::{Ctx, Init, Mode, ParamStore};

pub struct Forward {
    /// Per-point features `[b, n, d]`.
    pub features: Var,
    /// Aggregated feature vector `[b, m]`.
    pub pooled: Var,
    /// Class scores `[b, c]`: capsule lengths or FC logits.
    pub scores: Var,
    /// Class capsules `[b, c, z]` (capsule head only).
    pub capsules: Option<Var>,
    /// Reconstructed cloud `[b, n, 3]` when the decoder is active.
    pub reconstruction: Option<Var>,
    pub transforms: Vec<Var>,
    pub couplings: Vec<Var>,
}

pub struct LossParts {
    pub total: Var,
    /// Margin loss (capsule) or cross-entropy (FC).
    pub classification: Var,
    /// Unscaled reconstruction error; `total` adds `alpha` times this.
    pub reconstruction: Option<Var>,
    pub regularizer: Option<Var>,
}

/// Fresh parameters. NetVLAD centers start as a placeholder until
/// [`init_vlad_from_corpus`] runs k-means over extractor features.
pub fn init_params<T: Element>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    init_extractor(&mut store, &mut init, cfg);
    if cfg.aggregator == AggregatorKind::NetVlad {
        let (k, d) = (cfg.clusters, cfg.final_width);
        let centers: Tensor<f64> = init.normal(&[k, d], 1.0);
        let c = centers.data().to_vec();
        VladParams {
            weights: Tensor::from_fn(&[d, k], |i| 2.0 * c[(i % k) * d + i / k]),
            bias: Tensor::from_fn(&[k], |j| -c[j * d..(j + 1) * d].iter().map(|v| v * v).sum::<f64>()),
            centers,
        }
        .store_into(&mut store);
    }
    init_head(&mut store, &mut init, cfg);
    store
}

/// Runs the untrained extractor over `batches` and places the NetVLAD
/// centers by k-means on the collected per-point features.
pub fn init_vlad_from_corpus<T: Element>(
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    batches: &[Tensor<T>],
    seed: u64,
) -> Result<()> {
    let mut rows: Vec<f64> = Vec::new();
    for pts in batches {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, store, Mode::Eval).with_grads(false);
        let x = ctx.g.constant(pts.clone());
        let ex = extract(&mut ctx, x, cfg)?;
        rows.extend(ctx.g.value(ex.features).to_f64_vec());
    }
    let d = cfg.final_width;
    let corpus = Tensor::new(&[rows.len() / d, d], rows)?;
    // keep k-means cheap on large corpora
    let corpus = if corpus.shape()[0] > 8192 {
        let stride = corpus.shape()[0].div_ceil(8192);
        let kept: Vec<f64> = corpus.data().chunks(d).step_by(stride).flatten().copied().collect();
        Tensor::new(&[kept.len() / d, d], kept)?
    } else {
        corpus
    };
    vlad_init(&corpus, cfg.clusters, seed)?.store_into(store);
    Ok(())
}

/// Forward pass over `points: [b, n, 3]`. In training with labels, the
/// decoder sees the target capsule; otherwise the longest capsule.
pub fn forward<T: Element>(ctx: &mut Ctx<'_, T>, points: Var, cfg: &ModelConfig, labels: Option<&[usize]>) -> Result<Forward> {
    let ex = extract(ctx, points, cfg)?;
    let pooled = aggregate(ctx, ex.features, cfg)?;
    match cfg.classifier {
        ClassifierKind::Fc => {
            let logits = fc_baseline(ctx, pooled, cfg)?;
            Ok(Forward {
                features: ex.features,
                pooled,
                scores: logits,
                capsules: None,
                reconstruction: None,
                transforms: ex.transforms,
                couplings: Vec::new(),
            })
        }
        ClassifierKind::Capsule => {
            let u = compose_caps(ctx, pooled, cfg)?;
            let w = ctx.param("head.pred.w")?;
            let u_hat = predict_vectors(ctx, u, w)?;
            let routed = route(ctx, u_hat, cfg.r, cfg.squash_variant)?;
            let norms = capsule_norms(ctx, routed.v)?;
            let reconstruction = if cfg.reconstruction_loss {
                let keep = match (ctx.mode(), labels) {
                    (Mode::Train, Some(l)) => l.to_vec(),
                    _ => classify(ctx.g.value(norms)),
                };
                Some(decode(ctx, routed.v, &keep, cfg)?)
            } else {
                None
            };
            Ok(Forward {
                features: ex.features,
                pooled,
                scores: norms,
                capsules: Some(routed.v),
                reconstruction,
                transforms: ex.transforms,
                couplings: routed.couplings,
            })
        }
    }
}

pub fn loss<T: Element>(
    ctx: &mut Ctx<'_, T>,
    out: &Forward,
    points: Var,
    labels: &[usize],
    cfg: &ModelConfig,
) -> Result<LossParts> {
    let (classification, reconstruction) = match cfg.classifier {
        ClassifierKind::Fc => (cross_entropy(ctx, out.scores, labels)?, None),
        ClassifierKind::Capsule => {
            let v = out.capsules.ok_or_else(|| Error::Argument("capsule output missing".into()))?;
            let m = margin_loss(ctx, v, labels, cfg)?;
            let r = match out.reconstruction {
                Some(rec) => Some(reconstruction_error(ctx, rec, points, cfg.recon_pairing)?),
                None => None,
            };
            (m, r)
        }
    };
    let mut total = classification;
    if let Some(r) = reconstruction {
        let scaled = ctx.g.scale(r, T::from_f64_lossy(cfg.alpha));
        total = ctx.g.add(total, scaled)?;
    }
    let mut regularizer = None;
    if cfg.stn_reg > 0.0 && cfg.extractor == ExtractorKind::PointNet && cfg.feature_stn {
        if let Some(&m) = out.transforms.last() {
            let p = orthogonality_penalty(ctx, m)?;
            let scaled = ctx.g.scale(p, T::from_f64_lossy(cfg.stn_reg));
            total = ctx.g.add(total, scaled)?;
            regularizer = Some(p);
        }
    }
    Ok(LossParts {
        total,
        classification,
        reconstruction,
        regularizer,
    })
}

/// Predicted labels from class scores.
pub fn predictions<T: Element>(scores: &Tensor<T>) -> Vec<usize> {
    classify(scores)
}

/// Evaluation-mode class scores for a batch, without gradient tracking.
pub fn infer<T: Element>(store: &ParamStore<T>, cfg: &ModelConfig, points: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, Mode::Eval).with_grads(false);
    let x = ctx.g.constant(points.clone());
    let out = forward(&mut ctx, x, cfg, None)?;
    Ok(ctx.g.value(out.scores).clone())
}
