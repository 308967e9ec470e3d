//! Declarative run configuration.
//!
//! Plain-text `key = value` lines grouped under `[model]`, `[capsule]`,
//! `[training]` and `[data]` headers; `#` starts a comment. List values are
//! comma-separated. [`ModelConfig::to_config_string`] writes every resolved
//! key, and parsing that output yields an equal config.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dataset::Shape;
use crate::error::{Error, Result};

macro_rules! keyword_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown value `{other}` (expected one of: {})",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(ExtractorKind { PointNet => "pointnet", EdgeConv => "edgeconv" });
keyword_enum!(AggregatorKind { MaxPool => "maxpool", NetVlad => "netvlad" });
keyword_enum!(ClassifierKind { Fc => "fc", Capsule => "capsule" });
keyword_enum!(
    /// `Canonical` saturates norms toward 1; `PaperLiteral` is `s / (1 + |s|^2)`.
    SquashVariant { Canonical => "canonical", PaperLiteral => "paper_literal" }
);
keyword_enum!(ReconPairing { Index => "index", Chamfer => "chamfer" });
keyword_enum!(DataSource { Synthetic => "synthetic", Directory => "directory" });
keyword_enum!(DataFormat { Blob => "blob", Xyz => "xyz", Off => "off" });

impl AggregatorKind {
    /// Per-point feature width the aggregator expects by default.
    pub fn default_feature_width(self) -> usize {
        match self {
            AggregatorKind::MaxPool => 1024,
            AggregatorKind::NetVlad => 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    // [model]
    pub extractor: ExtractorKind,
    pub aggregator: AggregatorKind,
    pub classifier: ClassifierKind,
    pub final_width: usize,
    pub pointnet_widths1: Vec<usize>,
    pub pointnet_widths2: Vec<usize>,
    pub stn_widths: Vec<usize>,
    pub stn_fc: Vec<usize>,
    pub feature_stn: bool,
    /// Weight of the orthogonality penalty on the feature transform; 0 disables it.
    pub stn_reg: f64,
    pub edgeconv_widths1: Vec<usize>,
    pub edgeconv_widths2: Vec<usize>,
    pub knn_k: usize,
    pub clusters: usize,
    pub vlad_intra_norm: bool,
    pub vlad_init_batches: usize,
    pub fc_widths: Vec<usize>,
    pub dropout_keep: f64,
    pub num_classes: usize,
    // [capsule]
    pub compose_caps: bool,
    pub reconstruction_loss: bool,
    pub squash_variant: SquashVariant,
    pub recon_pairing: ReconPairing,
    pub q: usize,
    pub t: usize,
    pub z: usize,
    pub r: usize,
    pub decoder_widths: Vec<usize>,
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
    pub alpha: f64,
    // [training]
    pub n_points: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    pub record_wall_time: bool,
    pub train_outliers: usize,
    pub train_perturb: f64,
    // [data]
    pub source: DataSource,
    pub root: Option<PathBuf>,
    pub format: DataFormat,
    pub shapes: Vec<Shape>,
    pub samples_per_class: usize,
    pub data_seed: u64,
}

impl ModelConfig {
    /// Full-width architecture with desk-scale data defaults.
    pub fn new(extractor: ExtractorKind, aggregator: AggregatorKind, classifier: ClassifierKind) -> Self {
        Self {
            extractor,
            aggregator,
            classifier,
            final_width: aggregator.default_feature_width(),
            pointnet_widths1: vec![64, 64],
            pointnet_widths2: vec![64, 128],
            stn_widths: vec![64, 128, 1024],
            stn_fc: vec![512, 256],
            feature_stn: true,
            stn_reg: 0.0,
            edgeconv_widths1: vec![64, 64, 64],
            edgeconv_widths2: vec![128],
            knn_k: 20,
            clusters: 128,
            vlad_intra_norm: true,
            vlad_init_batches: 4,
            fc_widths: vec![512, 256],
            dropout_keep: 0.7,
            num_classes: 4,
            compose_caps: true,
            reconstruction_loss: true,
            squash_variant: SquashVariant::Canonical,
            recon_pairing: ReconPairing::Index,
            q: 500,
            t: 8,
            z: 4,
            r: 3,
            decoder_widths: vec![512, 1024],
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
            alpha: 0.0005,
            n_points: 256,
            batch_size: 16,
            epochs: 60,
            lr: 0.001,
            lr_decay_every: 20,
            lr_decay: 0.5,
            bn_momentum: 0.9,
            seed: 1,
            record_wall_time: true,
            train_outliers: 0,
            train_perturb: 0.0,
            source: DataSource::Synthetic,
            root: None,
            format: DataFormat::Blob,
            shapes: vec![Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Cone],
            samples_per_class: 100,
            data_seed: 7,
        }
    }

    /// Width of the aggregated feature vector fed to the classifier.
    pub fn feature_dim(&self) -> usize {
        match self.aggregator {
            AggregatorKind::MaxPool => self.final_width,
            AggregatorKind::NetVlad => self.clusters * self.final_width,
        }
    }

    /// Number of primary capsules the head routes from.
    pub fn primary_caps(&self) -> usize {
        if self.compose_caps {
            self.q
        } else {
            self.feature_dim() / self.t
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(key, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("final_width", self.final_width)?;
        positive("num_classes", self.num_classes)?;
        positive("q", self.q)?;
        positive("t", self.t)?;
        positive("z", self.z)?;
        positive("r", self.r)?;
        positive("K", self.clusters)?;
        positive("knn_k", self.knn_k)?;
        positive("n_points", self.n_points)?;
        positive("batch_size", self.batch_size)?;
        positive("lr_decay_every", self.lr_decay_every)?;
        for (key, list) in [
            ("pointnet_widths1", &self.pointnet_widths1),
            ("edgeconv_widths1", &self.edgeconv_widths1),
            ("edgeconv_widths2", &self.edgeconv_widths2),
            ("stn_widths", &self.stn_widths),
        ] {
            if list.is_empty() || list.contains(&0) {
                return Err(Error::config(key, "needs one or more positive widths"));
            }
        }
        for (key, list) in [
            ("pointnet_widths2", &self.pointnet_widths2),
            ("stn_fc", &self.stn_fc),
            ("fc_widths", &self.fc_widths),
            ("decoder_widths", &self.decoder_widths),
        ] {
            if list.contains(&0) {
                return Err(Error::config(key, "widths must be positive"));
            }
        }
        if self.extractor == ExtractorKind::EdgeConv && self.knn_k >= self.n_points {
            return Err(Error::config("knn_k", format!("must be below n_points ({})", self.n_points)));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::config("dropout_keep", "must be in (0, 1]"));
        }
        if !self.compose_caps && self.feature_dim() % self.t != 0 {
            return Err(Error::config(
                "compose_caps",
                format!("feature width {} is not divisible by t={}", self.feature_dim(), self.t),
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr", "learning rate must be positive and decay in (0, 1]"));
        }
        if !(self.bn_momentum >= 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::config("bn_momentum", "must be in [0, 1)"));
        }
        if self.train_outliers > self.n_points {
            return Err(Error::config("train_outliers", "cannot exceed n_points"));
        }
        if !(self.stn_reg >= 0.0) {
            return Err(Error::config("stn_reg", "must be non-negative"));
        }
        if !(self.train_perturb >= 0.0) {
            return Err(Error::config("train_perturb", "must be non-negative"));
        }
        if self.alpha < 0.0 || self.m_plus <= self.m_minus {
            return Err(Error::config("alpha", "loss constants out of range"));
        }
        match self.source {
            DataSource::Directory if self.root.is_none() => {
                return Err(Error::config("root", "required when source = directory"))
            }
            DataSource::Synthetic => {
                if self.shapes.len() != self.num_classes {
                    return Err(Error::config(
                        "shapes",
                        format!("{} shapes listed but num_classes = {}", self.shapes.len(), self.num_classes),
                    ));
                }
                if self.samples_per_class < 5 {
                    return Err(Error::config("samples_per_class", "need at least 5 for an 80/20 split"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn to_config_string(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            if k.starts_with('[') {
                if !s.is_empty() {
                    s.push('\n');
                }
                s.push_str(k);
            } else {
                s.push_str(k);
                s.push_str(" = ");
                s.push_str(&v);
            }
            s.push('\n');
        };
        kv("[model]", String::new());
        kv("extractor", self.extractor.to_string());
        kv("aggregator", self.aggregator.to_string());
        kv("classifier", self.classifier.to_string());
        kv("final_width", self.final_width.to_string());
        kv("pointnet_widths1", list(&self.pointnet_widths1));
        kv("pointnet_widths2", list(&self.pointnet_widths2));
        kv("stn_widths", list(&self.stn_widths));
        kv("stn_fc", list(&self.stn_fc));
        kv("feature_stn", self.feature_stn.to_string());
        kv("stn_reg", fmt_f64(self.stn_reg));
        kv("edgeconv_widths1", list(&self.edgeconv_widths1));
        kv("edgeconv_widths2", list(&self.edgeconv_widths2));
        kv("knn_k", self.knn_k.to_string());
        kv("K", self.clusters.to_string());
        kv("vlad_intra_norm", self.vlad_intra_norm.to_string());
        kv("vlad_init_batches", self.vlad_init_batches.to_string());
        kv("fc_widths", list(&self.fc_widths));
        kv("dropout_keep", fmt_f64(self.dropout_keep));
        kv("num_classes", self.num_classes.to_string());
        kv("[capsule]", String::new());
        kv("compose_caps", self.compose_caps.to_string());
        kv("reconstruction_loss", self.reconstruction_loss.to_string());
        kv("squash_variant", self.squash_variant.to_string());
        kv("recon_pairing", self.recon_pairing.to_string());
        kv("q", self.q.to_string());
        kv("t", self.t.to_string());
        kv("z", self.z.to_string());
        kv("r", self.r.to_string());
        kv("decoder_widths", list(&self.decoder_widths));
        kv("m_plus", fmt_f64(self.m_plus));
        kv("m_minus", fmt_f64(self.m_minus));
        kv("lambda", fmt_f64(self.lambda));
        kv("alpha", fmt_f64(self.alpha));
        kv("[training]", String::new());
        kv("n_points", self.n_points.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", fmt_f64(self.lr));
        kv("lr_decay_every", self.lr_decay_every.to_string());
        kv("lr_decay", fmt_f64(self.lr_decay));
        kv("bn_momentum", fmt_f64(self.bn_momentum));
        kv("seed", self.seed.to_string());
        kv("record_wall_time", self.record_wall_time.to_string());
        kv("train_outliers", self.train_outliers.to_string());
        kv("train_perturb", fmt_f64(self.train_perturb));
        kv("[data]", String::new());
        kv("source", self.source.to_string());
        if let Some(root) = &self.root {
            kv("root", root.display().to_string());
        }
        kv("format", self.format.to_string());
        kv(
            "shapes",
            self.shapes.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
        );
        kv("samples_per_class", self.samples_per_class.to_string());
        kv("data_seed", self.data_seed.to_string());
        s
    }

    /// SHA-256 over the architecture-defining keys. Checkpoints carry it so a
    /// parameter file cannot be loaded into a different network.
    pub fn architecture_hash(&self) -> String {
        let arch: String = self
            .to_config_string()
            .lines()
            .filter(|l| {
                let key = l.split('=').next().unwrap_or("").trim();
                ARCH_KEYS.contains(&key)
            })
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(arch.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

const ARCH_KEYS: &[&str] = &[
    "extractor",
    "aggregator",
    "classifier",
    "final_width",
    "pointnet_widths1",
    "pointnet_widths2",
    "stn_widths",
    "stn_fc",
    "feature_stn",
    "edgeconv_widths1",
    "edgeconv_widths2",
    "K",
    "fc_widths",
    "num_classes",
    "compose_caps",
    "reconstruction_loss",
    "q",
    "t",
    "z",
    "decoder_widths",
    "n_points",
];

/// Shortest representation that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(v, _)| v)
    }

    fn parse<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<T>()
                .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    fn required<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.take(key).ok_or_else(|| Error::config(key, "missing required key"))?;
        v.parse::<T>()
            .map_err(|e| Error::config(key, format!("cannot parse `{v}`: {e}")))
    }

    fn list(&mut self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.take(key) {
            None => Ok(default),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::config(key, format!("cannot parse `{x}`: {e}")))
                })
                .collect(),
        }
    }
}

const SECTIONS: &[&str] = &["model", "capsule", "training", "data"];

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::config(name, format!("unknown section on line {}", i + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {} is not `key = value`", i + 1)))?;
            if section.is_none() {
                return Err(Error::config(k.trim(), "key outside of a section"));
            }
            if map.insert(k.trim().to_string(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(Error::config(k.trim(), "duplicate key"));
            }
        }
        let mut e = Entries { map };
        let extractor: ExtractorKind = e.required("extractor")?;
        let aggregator: AggregatorKind = e.required("aggregator")?;
        let classifier: ClassifierKind = e.required("classifier")?;
        let d = ModelConfig::new(extractor, aggregator, classifier);
        let shapes = match e.take("shapes") {
            None => d.shapes.clone(),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse::<Shape>().map_err(|m| Error::config("shapes", m)))
                .collect::<Result<Vec<_>>>()?,
        };
        let cfg = ModelConfig {
            extractor,
            aggregator,
            classifier,
            final_width: e.parse("final_width", d.final_width)?,
            pointnet_widths1: e.list("pointnet_widths1", d.pointnet_widths1)?,
            pointnet_widths2: e.list("pointnet_widths2", d.pointnet_widths2)?,
            stn_widths: e.list("stn_widths", d.stn_widths)?,
            stn_fc: e.list("stn_fc", d.stn_fc)?,
            feature_stn: e.parse("feature_stn", d.feature_stn)?,
            stn_reg: e.parse("stn_reg", d.stn_reg)?,
            edgeconv_widths1: e.list("edgeconv_widths1", d.edgeconv_widths1)?,
            edgeconv_widths2: e.list("edgeconv_widths2", d.edgeconv_widths2)?,
            knn_k: e.parse("knn_k", d.knn_k)?,
            clusters: e.parse("K", d.clusters)?,
            vlad_intra_norm: e.parse("vlad_intra_norm", d.vlad_intra_norm)?,
            vlad_init_batches: e.parse("vlad_init_batches", d.vlad_init_batches)?,
            fc_widths: e.list("fc_widths", d.fc_widths)?,
            dropout_keep: e.parse("dropout_keep", d.dropout_keep)?,
            num_classes: e.parse("num_classes", d.num_classes)?,
            compose_caps: e.parse("compose_caps", d.compose_caps)?,
            reconstruction_loss: e.parse("reconstruction_loss", d.reconstruction_loss)?,
            squash_variant: e.parse("squash_variant", d.squash_variant)?,
            recon_pairing: e.parse("recon_pairing", d.recon_pairing)?,
            q: e.parse("q", d.q)?,
            t: e.parse("t", d.t)?,
            z: e.parse("z", d.z)?,
            r: e.parse("r", d.r)?,
            decoder_widths: e.list("decoder_widths", d.decoder_widths)?,
            m_plus: e.parse("m_plus", d.m_plus)?,
            m_minus: e.parse("m_minus", d.m_minus)?,
            lambda: e.parse("lambda", d.lambda)?,
            alpha: e.parse("alpha", d.alpha)?,
            n_points: e.parse("n_points", d.n_points)?,
            batch_size: e.parse("batch_size", d.batch_size)?,
            epochs: e.parse("epochs", d.epochs)?,
            lr: e.parse("lr", d.lr)?,
            lr_decay_every: e.parse("lr_decay_every", d.lr_decay_every)?,
            lr_decay: e.parse("lr_decay", d.lr_decay)?,
            bn_momentum: e.parse("bn_momentum", d.bn_momentum)?,
            seed: e.parse("seed", d.seed)?,
            record_wall_time: e.parse("record_wall_time", d.record_wall_time)?,
            train_outliers: e.parse("train_outliers", d.train_outliers)?,
            train_perturb: e.parse("train_perturb", d.train_perturb)?,
            source: e.parse("source", d.source)?,
            root: e.take("root").filter(|s| !s.is_empty()).map(PathBuf::from),
            format: e.parse("format", d.format)?,
            shapes,
            samples_per_class: e.parse("samples_per_class", d.samples_per_class)?,
            data_seed: e.parse("data_seed", d.data_seed)?,
        };
        if let Some((key, (_, line))) = e.map.into_iter().next() {
            return Err(Error::config(key, format!("unknown key on line {line}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
