//! Gradient-check cases for the network modules and the end-to-end loss.
//!
//! Every case differentiates with respect to both its data inputs and all
//! parameters the module touches, at tiny dimensions in 64-bit.

use capsnet3d_tensor::suite::{uniform, weighted_sum, GradcheckCase};
use capsnet3d_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{maxpool_aggregate, vlad_aggregate, VladParams};
use crate::capsnet::{compose_caps, decode, fc_baseline, init_head, predict_vectors, route};
use crate::config::{AggregatorKind, ClassifierKind, ExtractorKind, ModelConfig, ReconPairing, SquashVariant};
use crate::dataset::derive_seed;
use crate::error::Result;
use crate::features::{edgeconv_extract, init_extractor, init_stn, pointnet_extract, stn_apply};
use crate::model::{forward, init_params, loss};
use crate::params::{Ctx, Init, Mode, ParamStore};

type ModuleFn = dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> + Send + Sync;

/// Tiny capsule-network config: 4 points, 6 features, 3 primary capsules of
/// dimension 2, 2 classes with capsules of dimension 2.
pub fn tiny_config(r: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(ExtractorKind::PointNet, AggregatorKind::MaxPool, ClassifierKind::Capsule);
    cfg.pointnet_widths1 = vec![3];
    cfg.pointnet_widths2 = vec![4];
    cfg.final_width = 6;
    cfg.stn_widths = vec![4, 5];
    cfg.stn_fc = vec![4];
    cfg.edgeconv_widths1 = vec![3];
    cfg.edgeconv_widths2 = vec![4];
    cfg.knn_k = 2;
    cfg.clusters = 2;
    cfg.fc_widths = vec![5, 4];
    cfg.num_classes = 2;
    cfg.q = 3;
    cfg.t = 2;
    cfg.z = 2;
    cfg.r = r;
    cfg.decoder_widths = vec![5];
    cfg.n_points = 4;
    cfg.batch_size = 3;
    // a larger weight keeps the reconstruction term visible in the check
    cfg.alpha = 0.5;
    cfg.shapes.truncate(2);
    cfg
}

/// Wraps a module as a scalar function of `data` and every parameter in
/// `store`. Non-scalar outputs are reduced with a seeded weighted sum.
fn module_case(name: &str, store: ParamStore<f64>, data: Vec<Tensor<f64>>, seed: u64, f: Box<ModuleFn>) -> GradcheckCase {
    let names: Vec<String> = store.params().map(|(k, _)| k.clone()).collect();
    let mut inputs = data;
    let n_data = inputs.len();
    inputs.extend(store.params().map(|(_, v)| v.clone()));
    let func = move |g: &mut Graph<f64>, vars: &[Var]| -> capsnet3d_tensor::Result<Var> {
        let mut ctx = Ctx::new(g, &store, Mode::Train);
        for (name, &v) in names.iter().zip(&vars[n_data..]) {
            ctx.bind(name.clone(), v);
        }
        let out = f(&mut ctx, &vars[..n_data]).map_err(to_tensor_err)?;
        if ctx.g.value(out).len() == 1 {
            return ctx.g.sum_all(out);
        }
        let shape = ctx.g.shape(out).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = uniform(&mut rng, &shape, -1.0, 1.0);
        weighted_sum(ctx.g, out, &w)
    };
    GradcheckCase::new(name, inputs, Box::new(func))
}

fn to_tensor_err(e: crate::Error) -> capsnet3d_tensor::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => capsnet3d_tensor::TensorError::Usage(other.to_string()),
    }
}

fn cloud(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Tensor<f64> {
    uniform(rng, &[b, n, 3], -1.0, 1.0)
}

/// One case per network module.
pub fn module_cases(seed: u64) -> Vec<GradcheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let base = tiny_config(3);
    let s = |k: u64| derive_seed(seed, k);

    {
        let cfg = base.clone();
        let mut store = ParamStore::new();
        init_stn(&mut store, &mut Init::new(s(1)), "stn", 3, &cfg);
        // move the output layer off its identity start so every path is live
        *store.param_mut("stn.out.w").unwrap() = uniform(&mut rng, &[4, 9], -0.3, 0.3);
        let x = cloud(&mut rng, 3, 4);
        cases.push(module_case(
            "stn",
            store,
            vec![x],
            s(2),
            Box::new(move |ctx, d| Ok(stn_apply(ctx, d[0], "stn", &cfg)?.0)),
        ));
    }
    {
        let cfg = base.clone();
        let mut store = ParamStore::new();
        init_extractor(&mut store, &mut Init::new(s(3)), &cfg);
        let x = cloud(&mut rng, 3, 4);
        cases.push(module_case(
            "pointnet",
            store,
            vec![x],
            s(4),
            Box::new(move |ctx, d| Ok(pointnet_extract(ctx, d[0], &cfg)?.features)),
        ));
    }
    {
        let mut cfg = base.clone();
        cfg.extractor = ExtractorKind::EdgeConv;
        cfg.n_points = 6;
        let mut store = ParamStore::new();
        init_extractor(&mut store, &mut Init::new(s(5)), &cfg);
        let x = cloud(&mut rng, 2, 6);
        cases.push(module_case(
            "edgeconv",
            store,
            vec![x],
            s(6),
            Box::new(move |ctx, d| Ok(edgeconv_extract(ctx, d[0], &cfg)?.features)),
        ));
    }
    {
        let f = uniform(&mut rng, &[2, 4, 3], -1.0, 1.0);
        cases.push(module_case(
            "maxpool",
            ParamStore::new(),
            vec![f],
            s(7),
            Box::new(|ctx, d| maxpool_aggregate(ctx, d[0])),
        ));
    }
    for intra in [true, false] {
        let mut store = ParamStore::new();
        let centers = uniform(&mut rng, &[2, 3], -1.0, 1.0);
        VladParams {
            weights: uniform(&mut rng, &[3, 2], -1.0, 1.0),
            bias: uniform(&mut rng, &[2], -0.5, 0.5),
            centers,
        }
        .store_into(&mut store);
        let f = uniform(&mut rng, &[2, 4, 3], -1.0, 1.0);
        let name = if intra { "netvlad" } else { "netvlad_no_intra" };
        cases.push(module_case(
            name,
            store,
            vec![f],
            s(8),
            Box::new(move |ctx, d| vlad_aggregate(ctx, d[0], intra)),
        ));
    }
    for variant in [SquashVariant::Canonical, SquashVariant::PaperLiteral] {
        let mut cfg = base.clone();
        cfg.q = 2;
        cfg.t = 3;
        cfg.squash_variant = variant;
        let mut store = ParamStore::new();
        store.insert_param("head.compose.w", uniform(&mut rng, &[6, 6], -1.0, 1.0));
        store.insert_param("head.compose.b", uniform(&mut rng, &[6], -0.5, 0.5));
        let f = uniform(&mut rng, &[2, 6], -1.0, 1.0);
        cases.push(module_case(
            &format!("compose_caps_{}", variant.as_str()),
            store,
            vec![f],
            s(9),
            Box::new(move |ctx, d| compose_caps(ctx, d[0], &cfg)),
        ));
    }
    {
        let u = uniform(&mut rng, &[2, 3, 2], -1.0, 1.0);
        let w = uniform(&mut rng, &[3, 2, 2, 2], -1.0, 1.0);
        cases.push(module_case(
            "predict_vectors",
            ParamStore::new(),
            vec![u, w],
            s(10),
            Box::new(|ctx, d| predict_vectors(ctx, d[0], d[1])),
        ));
    }
    for r in 1..=3 {
        let u_hat = uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        cases.push(module_case(
            &format!("routing_r{r}"),
            ParamStore::new(),
            vec![u_hat],
            s(11),
            Box::new(move |ctx, d| Ok(route(ctx, d[0], r, SquashVariant::Canonical)?.v)),
        ));
    }
    {
        let cfg = base.clone();
        let mut store = ParamStore::new();
        init_head(&mut store, &mut Init::new(s(12)), &cfg);
        store.params_retain(|k| k.starts_with("head.decoder"));
        let v = uniform(&mut rng, &[2, 2, 2], -0.7, 0.7);
        cases.push(module_case(
            "decoder",
            store,
            vec![v],
            s(13),
            Box::new(move |ctx, d| decode(ctx, d[0], &[1, 0], &cfg)),
        ));
    }
    {
        let mut cfg = base.clone();
        cfg.classifier = ClassifierKind::Fc;
        let mut store = ParamStore::new();
        init_head(&mut store, &mut Init::new(s(14)), &cfg);
        let f = uniform(&mut rng, &[3, 6], -1.0, 1.0);
        cases.push(module_case(
            "fc_baseline",
            store,
            vec![f],
            s(15),
            Box::new(move |ctx, d| fc_baseline(ctx, d[0], &cfg)),
        ));
    }
    cases
}

pub fn full_case(name: &str, cfg: ModelConfig, points: Tensor<f64>, labels: Vec<usize>, seed: u64) -> GradcheckCase {
    let mut store = init_params::<f64>(&cfg, seed);
    // Zero-initialised biases put ReLU inputs exactly on the kink when the
    // incoming activations are small; start them away from it.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let biases: Vec<String> = store
        .params()
        .map(|(k, _)| k.clone())
        .filter(|k| k.ends_with(".b") || k.ends_with(".beta"))
        .collect();
    for k in biases {
        let p = store.param_mut(&k).unwrap();
        let jitter = uniform(&mut rng, p.shape(), -0.5, 0.5);
        for (a, j) in p.data_mut().iter_mut().zip(jitter.data()) {
            *a += j;
        }
    }
    module_case(
        name,
        store,
        vec![points],
        seed,
        Box::new(move |ctx, d| {
            let out = forward(ctx, d[0], &cfg, Some(&labels))?;
            Ok(loss(ctx, &out, d[0], &labels, &cfg)?.total)
        }),
    )
}

/// End-to-end training loss of the capsule network at `r = 2` and `r = 3`,
/// plus the other pipeline variants at `r = 2`.
pub fn full_cases(seed: u64) -> Vec<GradcheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100));
    let labels = vec![0, 1, 1];
    let mut cases = Vec::new();
    for r in [2, 3] {
        cases.push(full_case(
            &format!("capsnet_pointnet_maxpool_r{r}"),
            tiny_config(r),
            cloud(&mut rng, 3, 4),
            labels.clone(),
            derive_seed(seed, 101 + r as u64),
        ));
    }
    let mut chamfer = tiny_config(2);
    chamfer.recon_pairing = ReconPairing::Chamfer;
    cases.push(full_case("capsnet_chamfer_r2", chamfer, cloud(&mut rng, 3, 4), labels.clone(), derive_seed(seed, 104)));

    let mut no_compose = tiny_config(2);
    no_compose.compose_caps = false;
    cases.push(full_case("capsnet_no_compose_r2", no_compose, cloud(&mut rng, 3, 4), labels.clone(), derive_seed(seed, 105)));

    let mut edge_vlad = tiny_config(2);
    edge_vlad.extractor = ExtractorKind::EdgeConv;
    edge_vlad.aggregator = AggregatorKind::NetVlad;
    edge_vlad.final_width = 3;
    edge_vlad.n_points = 5;
    cases.push(full_case("capsnet_edgeconv_netvlad_r2", edge_vlad, cloud(&mut rng, 3, 5), labels.clone(), derive_seed(seed, 106)));

    let mut fc = tiny_config(2);
    fc.classifier = ClassifierKind::Fc;
    cases.push(full_case("fc_pointnet_maxpool", fc, cloud(&mut rng, 3, 4), labels, derive_seed(seed, 107)));
    cases
}

#[cfg(test)]
mod tests {
    use super::*;
    use capsnet3d_tensor::GradcheckOptions;

    #[test]
    fn tiny_config_is_valid() {
        tiny_config(2).validate().unwrap();
        tiny_config(3).validate().unwrap();
    }

    #[test]
    fn module_cases_pass() {
        for case in module_cases(11) {
            let report = case.run(&GradcheckOptions::default()).unwrap();
            assert!(report.passed, "{}: {:e}", case.name, report.max_rel_error);
        }
    }
}
