//! Per-point feature extractors: the shared-MLP extractor with spatial
//! transformers, and EdgeConv over k-nearest-neighbor graphs.

use capsnet3d_tensor::{Element, Tensor, Var};

use crate::config::{ExtractorKind, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{init_bn, init_dense, Ctx, Init, ParamStore};

/// Dense (no bias) + BatchNorm + ReLU layers at `path.0`, `path.1`, ...
pub fn init_shared_mlp<T: Element>(store: &mut ParamStore<T>, init: &mut Init, path: &str, in_width: usize, widths: &[usize]) {
    let mut fan_in = in_width;
    for (i, &w) in widths.iter().enumerate() {
        init_dense(store, init, &format!("{path}.{i}"), fan_in, w, false);
        init_bn(store, &format!("{path}.{i}.bn"), w);
        fan_in = w;
    }
}

/// Applies the same layers to every row of `x: [rows, c]`.
pub fn shared_mlp<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, path: &str, depth: usize) -> Result<Var> {
    let mut h = x;
    for i in 0..depth {
        let layer = format!("{path}.{i}");
        h = ctx.dense(h, &layer, false)?;
        h = ctx.batch_norm(h, &format!("{layer}.bn"))?;
        h = ctx.g.relu(h);
    }
    Ok(h)
}

/// Transform-predicting network for a `side × side` matrix. The output layer
/// starts at zero weights with the flattened identity as bias.
pub fn init_stn<T: Element>(store: &mut ParamStore<T>, init: &mut Init, path: &str, side: usize, cfg: &ModelConfig) {
    init_shared_mlp(store, init, &format!("{path}.mlp"), side, &cfg.stn_widths);
    let pooled = *cfg.stn_widths.last().unwrap_or(&side);
    init_shared_mlp(store, init, &format!("{path}.fc"), pooled, &cfg.stn_fc);
    let hidden = *cfg.stn_fc.last().unwrap_or(&pooled);
    store.insert_param(format!("{path}.out.w"), Tensor::zeros(&[hidden, side * side]));
    store.insert_param(
        format!("{path}.out.b"),
        Tensor::eye(side).reshape(&[side * side]).expect("square"),
    );
}

/// Predicts one `[side, side]` matrix per sample from `x: [b, n, side]`.
pub fn stn_predict<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, path: &str, cfg: &ModelConfig) -> Result<Var> {
    let &[b, n, side] = ctx.g.shape(x) else {
        return Err(Error::Argument(format!("stn input must be [b, n, c], got {:?}", ctx.g.shape(x))));
    };
    let rows = ctx.g.reshape(x, &[b * n, side])?;
    let h = shared_mlp(ctx, rows, &format!("{path}.mlp"), cfg.stn_widths.len())?;
    let width = ctx.g.shape(h)[1];
    let h = ctx.g.reshape(h, &[b, n, width])?;
    let pooled = ctx.g.max(h, 1, false)?;
    let h = shared_mlp(ctx, pooled, &format!("{path}.fc"), cfg.stn_fc.len())?;
    let m = ctx.dense(h, &format!("{path}.out"), true)?;
    Ok(ctx.g.reshape(m, &[b, side, side])?)
}

/// Right-multiplies every row of `x: [b, n, side]` by its sample's predicted
/// matrix. Returns the transformed rows and the matrices.
pub fn stn_apply<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, path: &str, cfg: &ModelConfig) -> Result<(Var, Var)> {
    let m = stn_predict(ctx, x, path, cfg)?;
    Ok((ctx.g.bmm(x, m)?, m))
}

/// `mean_b ‖I − A Aᵀ‖²` over predicted matrices `[b, k, k]`.
pub fn orthogonality_penalty<T: Element>(ctx: &mut Ctx<'_, T>, m: Var) -> Result<Var> {
    let &[b, k, _] = ctx.g.shape(m) else {
        return Err(Error::Argument("transform must be [b, k, k]".into()));
    };
    let mt = ctx.g.permute(m, &[0, 2, 1])?;
    let aat = ctx.g.bmm(m, mt)?;
    let eye = ctx.g.constant(Tensor::eye(k));
    let d = ctx.g.sub(aat, eye)?;
    let sq = ctx.g.square(d);
    let total = ctx.g.sum_all(sq)?;
    Ok(ctx.g.scale(total, T::from_f64_lossy(1.0 / b as f64)))
}

/// Per-point features plus any transform matrices the extractor predicted.
pub struct Extracted {
    pub features: Var,
    pub transforms: Vec<Var>,
}

pub fn init_extractor<T: Element>(store: &mut ParamStore<T>, init: &mut Init, cfg: &ModelConfig) {
    match cfg.extractor {
        ExtractorKind::PointNet => {
            init_stn(store, init, "extractor.stn3", 3, cfg);
            init_shared_mlp(store, init, "extractor.mlp1", 3, &cfg.pointnet_widths1);
            let mid = *cfg.pointnet_widths1.last().unwrap_or(&3);
            if cfg.feature_stn {
                init_stn(store, init, "extractor.stn_feat", mid, cfg);
            }
            let mut widths = cfg.pointnet_widths2.clone();
            widths.push(cfg.final_width);
            init_shared_mlp(store, init, "extractor.mlp2", mid, &widths);
        }
        ExtractorKind::EdgeConv => {
            init_shared_mlp(store, init, "extractor.edge1", 6, &cfg.edgeconv_widths1);
            let w1 = *cfg.edgeconv_widths1.last().unwrap_or(&3);
            init_shared_mlp(store, init, "extractor.edge2", 2 * w1, &cfg.edgeconv_widths2);
            let w2 = *cfg.edgeconv_widths2.last().unwrap_or(&w1);
            init_shared_mlp(store, init, "extractor.out", w1 + w2, &[cfg.final_width]);
        }
    }
}

/// Maps `points: [b, n, 3]` to per-point features `[b, n, final_width]`.
pub fn extract<T: Element>(ctx: &mut Ctx<'_, T>, points: Var, cfg: &ModelConfig) -> Result<Extracted> {
    match cfg.extractor {
        ExtractorKind::PointNet => pointnet_extract(ctx, points, cfg),
        ExtractorKind::EdgeConv => edgeconv_extract(ctx, points, cfg),
    }
}

fn check_points(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [b, n, 3] => Ok((b, n)),
        _ => Err(Error::Argument(format!("points must be [b, n, 3], got {shape:?}"))),
    }
}

pub fn pointnet_extract<T: Element>(ctx: &mut Ctx<'_, T>, points: Var, cfg: &ModelConfig) -> Result<Extracted> {
    let (b, n) = check_points(ctx.g.shape(points))?;
    let mut transforms = Vec::new();
    let (x, m) = stn_apply(ctx, points, "extractor.stn3", cfg)?;
    transforms.push(m);
    let rows = ctx.g.reshape(x, &[b * n, 3])?;
    let mut h = shared_mlp(ctx, rows, "extractor.mlp1", cfg.pointnet_widths1.len())?;
    if cfg.feature_stn {
        let mid = ctx.g.shape(h)[1];
        let hb = ctx.g.reshape(h, &[b, n, mid])?;
        let (t, m) = stn_apply(ctx, hb, "extractor.stn_feat", cfg)?;
        transforms.push(m);
        h = ctx.g.reshape(t, &[b * n, mid])?;
    }
    let h = shared_mlp(ctx, h, "extractor.mlp2", cfg.pointnet_widths2.len() + 1)?;
    let width = ctx.g.shape(h)[1];
    if width != cfg.final_width {
        return Err(Error::config("final_width", format!("extractor produced {width} channels")));
    }
    Ok(Extracted {
        features: ctx.g.reshape(h, &[b, n, width])?,
        transforms,
    })
}

/// Indices of the `k` nearest neighbors of every point, excluding the point
/// itself. `data` is `[b, n, d]` row-major; the result is `[b, n, k]` with
/// indices local to each sample, nearest first, ties to the lower index.
pub fn knn_graph<T: Element>(data: &[T], b: usize, n: usize, d: usize, k: usize) -> Result<Vec<usize>> {
    if k >= n {
        return Err(Error::config("knn_k", format!("k = {k} must be smaller than the {n} points per cloud")));
    }
    if data.len() != b * n * d {
        return Err(Error::Argument(format!("knn data has {} values, expected {}", data.len(), b * n * d)));
    }
    let mut out = Vec::with_capacity(b * n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut pts = vec![0.0f64; n * d];
    for s in 0..b {
        for (dst, &src) in pts.iter_mut().zip(&data[s * n * d..(s + 1) * n * d]) {
            *dst = src.to_f64_lossy();
        }
        for i in 0..n {
            let pi = &pts[i * d..(i + 1) * d];
            cand.clear();
            for j in (0..n).filter(|&j| j != i) {
                let pj = &pts[j * d..(j + 1) * d];
                let mut dist = 0.0;
                for t in 0..d {
                    let e = pi[t] - pj[t];
                    dist += e * e;
                }
                cand.push((dist, j));
            }
            let order = |a: &(f64, usize), c: &(f64, usize)| a.0.total_cmp(&c.0).then(a.1.cmp(&c.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k, order);
                cand.truncate(k);
            }
            cand.sort_unstable_by(order);
            out.extend(cand.iter().map(|&(_, j)| j));
        }
    }
    Ok(out)
}

/// One EdgeConv block over `x: [b, n, c]`: shared MLP on `(x_i, x_j − x_i)`
/// for every neighbor `j`, then max over the neighbors.
pub fn edgeconv_block<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, path: &str, depth: usize, k: usize) -> Result<Var> {
    let &[b, n, c] = ctx.g.shape(x) else {
        return Err(Error::Argument("edgeconv input must be [b, n, c]".into()));
    };
    let knn = knn_graph(ctx.g.value(x).data(), b, n, c, k)?;
    let mut centers = Vec::with_capacity(b * n * k);
    let mut neighbors = Vec::with_capacity(b * n * k);
    for s in 0..b {
        for i in 0..n {
            for &j in &knn[(s * n + i) * k..(s * n + i + 1) * k] {
                centers.push(s * n + i);
                neighbors.push(s * n + j);
            }
        }
    }
    let flat = ctx.g.reshape(x, &[b * n, c])?;
    let xi = ctx.g.gather_rows(flat, &centers)?;
    let xj = ctx.g.gather_rows(flat, &neighbors)?;
    let diff = ctx.g.sub(xj, xi)?;
    let edges = ctx.g.concat(&[xi, diff], 1)?;
    let h = shared_mlp(ctx, edges, path, depth)?;
    let width = ctx.g.shape(h)[1];
    let h = ctx.g.reshape(h, &[b * n, k, width])?;
    let pooled = ctx.g.max(h, 1, false)?;
    Ok(ctx.g.reshape(pooled, &[b, n, width])?)
}

/// Two EdgeConv blocks, the second on a graph rebuilt in feature space; the
/// block outputs are concatenated and mapped to `final_width`.
pub fn edgeconv_extract<T: Element>(ctx: &mut Ctx<'_, T>, points: Var, cfg: &ModelConfig) -> Result<Extracted> {
    let (b, n) = check_points(ctx.g.shape(points))?;
    let x1 = edgeconv_block(ctx, points, "extractor.edge1", cfg.edgeconv_widths1.len(), cfg.knn_k)?;
    let x2 = edgeconv_block(ctx, x1, "extractor.edge2", cfg.edgeconv_widths2.len(), cfg.knn_k)?;
    let cat = ctx.g.concat(&[x1, x2], 2)?;
    let width = ctx.g.shape(cat)[2];
    let rows = ctx.g.reshape(cat, &[b * n, width])?;
    let h = shared_mlp(ctx, rows, "extractor.out", 1)?;
    Ok(Extracted {
        features: ctx.g.reshape(h, &[b, n, cfg.final_width])?,
        transforms: Vec::new(),
    })
}
