//! Synthetic scenarios and their on-disk format.
//!
//! Classes are isotropic Gaussian clusters around image prototypes; each
//! sample also carries a text feature, a noisy copy of its class text
//! prototype. Rare target classes sit close to one protected class so that
//! improving them puts that class at risk.
//!
//! A scenario directory holds `manifest.json` and `samples.csv` with header
//! `id,split,tag,label,f0..f{d-1}` where the features are the image features
//! followed by the text features.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::losses::mean_ce_with_grad;
use crate::metrics::{accuracy, LabeledSet};
use crate::model::{ModelShape, ParamVector};
use crate::rng::{self, Stream, StreamRng};

pub const FORMAT_VERSION: u32 = 1;
pub const SAMPLES_FILE: &str = "samples.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub d_x: usize,
    pub d_t: usize,
    pub num_classes: usize,
    /// Rare classes, excluded from base-model training.
    pub targets: Vec<usize>,
    /// Protected class each rare class is placed next to.
    pub confusable_with: Vec<usize>,
    pub train_per_class: usize,
    /// Training pairs per rare class.
    pub target_train: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// External target-related pairs per rare class (retrieved-data stand-in).
    pub external_pairs: usize,
    /// Negative pairs per objective pair (target train plus external).
    pub negative_multiplier: usize,
    /// Norm of every protected image prototype.
    pub separation: f64,
    /// Distance of a rare prototype from its confusable partner.
    pub target_offset: f64,
    pub noise: f64,
    pub text_noise: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            d_x: 12,
            d_t: 12,
            num_classes: 6,
            targets: vec![5],
            confusable_with: vec![0],
            train_per_class: 4000,
            target_train: 60,
            external_pairs: 140,
            val_per_class: 400,
            test_per_class: 1000,
            negative_multiplier: 10,
            separation: 3.0,
            target_offset: 4.0,
            noise: 0.6,
            text_noise: 0.1,
            seed: 7,
        }
    }
}

impl ScenarioSpec {
    pub fn feature_dim(&self) -> usize {
        self.d_x + self.d_t
    }

    pub fn protected_classes(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|c| !self.targets.contains(c)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("scenario.{name}"), "must be >= 1"))
            } else {
                Ok(())
            }
        };
        pos("d_x", self.d_x)?;
        pos("d_t", self.d_t)?;
        pos("train_per_class", self.train_per_class)?;
        pos("target_train", self.target_train)?;
        pos("val_per_class", self.val_per_class)?;
        pos("test_per_class", self.test_per_class)?;
        if self.num_classes < 2 {
            return Err(Error::config("scenario.num_classes", "need at least two classes"));
        }
        if self.targets.len() != self.confusable_with.len() {
            return Err(Error::config("scenario.confusable_with", "one partner per target class"));
        }
        if self.targets.is_empty() || self.targets.len() >= self.num_classes {
            return Err(Error::config("scenario.targets", "need at least one target and one protected class"));
        }
        for (&t, &c) in self.targets.iter().zip(&self.confusable_with) {
            if t >= self.num_classes || c >= self.num_classes || self.targets.contains(&c) {
                return Err(Error::config("scenario.targets", "targets and partners must be distinct valid classes"));
            }
        }
        let mut sorted = self.targets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.targets.len() {
            return Err(Error::config("scenario.targets", "duplicate target class"));
        }
        if !(self.separation >= 0.0 && self.target_offset >= 0.0 && self.noise >= 0.0 && self.text_noise >= 0.0) {
            return Err(Error::config("scenario.separation", "scales must be >= 0"));
        }
        if !(self.separation > 0.0) {
            return Err(Error::Generation("separation must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Protected,
    Target,
    External,
    Negative,
    ClassText,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Protected => "protected",
            Tag::Target => "target",
            Tag::External => "external",
            Tag::Negative => "negative",
            Tag::ClassText => "class_text",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "protected" => Some(Tag::Protected),
            "target" => Some(Tag::Target),
            "external" => Some(Tag::External),
            "negative" => Some(Tag::Negative),
            "class_text" => Some(Tag::ClassText),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub split: Split,
    pub tag: Tag,
    pub label: usize,
    pub image: Vec<f64>,
    pub text: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: ScenarioSpec,
    pub feature_dim: usize,
    pub num_records: usize,
    pub split_sizes: SplitSizes,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

fn unit_vector(rng: &mut StreamRng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng::normal(rng)).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn jitter(rng: &mut StreamRng, center: &[f64], scale: f64) -> Vec<f64> {
    center.iter().map(|c| c + scale * rng::normal(rng)).collect()
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Data);
    let k = spec.num_classes;
    let mut img_proto: Vec<Vec<f64>> = vec![Vec::new(); k];
    for c in 0..k {
        if !spec.targets.contains(&c) {
            img_proto[c] = unit_vector(&mut rng, spec.d_x).into_iter().map(|v| v * spec.separation).collect();
        }
    }
    for (&t, &p) in spec.targets.iter().zip(&spec.confusable_with) {
        let dir = unit_vector(&mut rng, spec.d_x);
        img_proto[t] = img_proto[p].iter().zip(&dir).map(|(a, b)| a + spec.target_offset * b).collect();
    }
    let txt_proto: Vec<Vec<f64>> = (0..k).map(|_| unit_vector(&mut rng, spec.d_t)).collect();

    for a in 0..k {
        for b in a + 1..k {
            let d: f64 = img_proto[a].iter().zip(&img_proto[b]).map(|(x, y)| (x - y).powi(2)).sum();
            if d == 0.0 {
                return Err(Error::Generation(format!("classes {a} and {b} share a prototype")));
            }
        }
    }

    let mut records = Vec::new();
    let push = |records: &mut Vec<SampleRecord>, split, tag, label, image, text| {
        let id = records.len() as u64;
        records.push(SampleRecord {
            id,
            split,
            tag,
            label,
            image,
            text,
        });
    };
    for c in 0..k {
        push(&mut records, Split::Train, Tag::ClassText, c, img_proto[c].clone(), txt_proto[c].clone());
    }
    for c in 0..k {
        let rare = spec.targets.contains(&c);
        let tag = if rare { Tag::Target } else { Tag::Protected };
        let n_train = if rare { spec.target_train } else { spec.train_per_class };
        for (split, n) in [(Split::Train, n_train), (Split::Val, spec.val_per_class), (Split::Test, spec.test_per_class)] {
            for _ in 0..n {
                let x = jitter(&mut rng, &img_proto[c], spec.noise);
                let t = jitter(&mut rng, &txt_proto[c], spec.text_noise);
                push(&mut records, split, tag, c, x, t);
            }
        }
    }
    for &c in &spec.targets {
        for _ in 0..spec.external_pairs {
            let x = jitter(&mut rng, &img_proto[c], spec.noise);
            let t = jitter(&mut rng, &txt_proto[c], spec.text_noise);
            push(&mut records, Split::Train, Tag::External, c, x, t);
        }
    }
    let protected = spec.protected_classes();
    let n_neg = spec.negative_multiplier * (spec.target_train + spec.external_pairs) * spec.targets.len();
    for _ in 0..n_neg {
        let c = protected[rng.random_range(0..protected.len())];
        let x = jitter(&mut rng, &img_proto[c], spec.noise);
        let t = jitter(&mut rng, &txt_proto[c], spec.text_noise);
        push(&mut records, Split::Train, Tag::Negative, c, x, t);
    }

    let s = Scenario { spec: spec.clone(), records };
    let acc = s.nearest_mean_accuracy()?;
    if acc < 0.9 {
        return Err(Error::Generation(format!(
            "protected classes are not separable enough (nearest-mean train accuracy {acc:.3} < 0.9)"
        )));
    }
    Ok(s)
}

impl Scenario {
    pub fn class_texts(&self) -> Vec<Vec<f64>> {
        let mut v: Vec<(usize, Vec<f64>)> = self
            .records
            .iter()
            .filter(|r| r.tag == Tag::ClassText)
            .map(|r| (r.label, r.text.clone()))
            .collect();
        v.sort_by_key(|(l, _)| *l);
        v.into_iter().map(|(_, t)| t).collect()
    }

    /// Class samples (not negatives or class texts) of one split and label.
    pub fn class_samples(&self, split: Split, label: usize) -> Vec<&SampleRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.label == label && matches!(r.tag, Tag::Protected | Tag::Target))
            .collect()
    }

    pub fn negatives(&self) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.tag == Tag::Negative).collect()
    }

    /// External target-related pairs for one rare class.
    pub fn external(&self, label: usize) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.tag == Tag::External && r.label == label).collect()
    }

    pub fn labeled_set(&self, split: Split, label: usize) -> LabeledSet {
        LabeledSet {
            label,
            samples: self.class_samples(split, label).iter().map(|r| r.image.clone()).collect(),
        }
    }

    pub fn split_sizes(&self) -> SplitSizes {
        let count = |s| self.records.iter().filter(|r| r.split == s).count();
        SplitSizes {
            train: count(Split::Train),
            val: count(Split::Val),
            test: count(Split::Test),
        }
    }

    /// Train accuracy of the nearest class-mean rule on protected classes.
    pub fn nearest_mean_accuracy(&self) -> Result<f64> {
        let k = self.spec.num_classes;
        let mut means = vec![vec![0.0; self.spec.d_x]; k];
        for c in 0..k {
            let xs = self.class_samples(Split::Train, c);
            if xs.is_empty() {
                return Err(Error::Generation(format!("class {c} has no training samples")));
            }
            for r in &xs {
                for (m, v) in means[c].iter_mut().zip(&r.image) {
                    *m += v;
                }
            }
            means[c].iter_mut().for_each(|m| *m /= xs.len() as f64);
        }
        let protected = self.spec.protected_classes();
        let (mut hit, mut total) = (0usize, 0usize);
        for &c in &protected {
            for r in self.class_samples(Split::Train, c) {
                let best = (0..k)
                    .min_by(|&a, &b| {
                        let da: f64 = means[a].iter().zip(&r.image).map(|(m, x)| (m - x).powi(2)).sum();
                        let db: f64 = means[b].iter().zip(&r.image).map(|(m, x)| (m - x).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                hit += usize::from(best == c);
                total += 1;
            }
        }
        Ok(hit as f64 / total as f64)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            feature_dim: self.spec.feature_dim(),
            num_records: self.records.len(),
            split_sizes: self.split_sizes(),
            files: vec![SAMPLES_FILE.to_string()],
        }
    }
}

fn fmt_float(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").unwrap();
}

pub fn save_scenario(s: &Scenario, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = serde_json::to_string_pretty(&s.manifest())?;
    manifest.push('\n');
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    let d = s.spec.feature_dim();
    let mut out = String::from("id,split,tag,label");
    for j in 0..d {
        write!(out, ",f{j}").unwrap();
    }
    out.push('\n');
    for r in &s.records {
        write!(out, "{},{},{},{}", r.id, r.split.as_str(), r.tag.as_str(), r.label).unwrap();
        for v in r.image.iter().chain(&r.text) {
            out.push(',');
            fmt_float(&mut out, *v);
        }
        out.push('\n');
    }
    fs::write(dir.join(SAMPLES_FILE), out)?;
    Ok(())
}

pub fn load_scenario(dir: &Path) -> Result<Scenario> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath)?).map_err(|e| Error::Parse {
        path: mpath.display().to_string(),
        line: e.line() as u64,
        field: "manifest".into(),
        msg: e.to_string(),
    })?;
    let spath = dir.join(SAMPLES_FILE);
    let pstr = spath.display().to_string();
    let perr = |line: u64, field: &str, msg: String| Error::Parse {
        path: pstr.clone(),
        line,
        field: field.to_string(),
        msg,
    };
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            path: mpath.display().to_string(),
            line: 1,
            field: "format_version".into(),
            msg: format!("unsupported version {}", manifest.format_version),
        });
    }
    let spec = manifest.spec;
    let d = spec.feature_dim();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(&spath)?;
    let header = rdr.headers()?.clone();
    let mut expected: Vec<String> = ["id", "split", "tag", "label"].iter().map(|s| s.to_string()).collect();
    expected.extend((0..d).map(|j| format!("f{j}")));
    for (j, name) in expected.iter().enumerate() {
        match header.get(j) {
            Some(h) if h == name => {}
            Some(h) => return Err(perr(1, name, format!("expected column `{name}`, found `{h}`"))),
            None => return Err(perr(1, name, "missing column".into())),
        }
    }
    if header.len() != expected.len() {
        return Err(perr(1, "header", format!("expected {} columns, found {}", expected.len(), header.len())));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| perr(line, "row", e.to_string()))?;
        if row.len() != expected.len() {
            return Err(perr(line, "row", format!("expected {} fields, found {}", expected.len(), row.len())));
        }
        let id: u64 = row[0].parse().map_err(|e| perr(line, "id", format!("{e}")))?;
        let split = Split::parse(&row[1]).ok_or_else(|| perr(line, "split", format!("unknown split `{}`", &row[1])))?;
        let tag = Tag::parse(&row[2]).ok_or_else(|| perr(line, "tag", format!("unknown tag `{}`", &row[2])))?;
        let label: usize = row[3].parse().map_err(|e| perr(line, "label", format!("{e}")))?;
        if label >= spec.num_classes {
            return Err(perr(line, "label", format!("label {label} out of range")));
        }
        let mut feats = Vec::with_capacity(d);
        for j in 0..d {
            let v: f64 = row[4 + j].parse().map_err(|e| perr(line, &expected[4 + j], format!("{e}")))?;
            feats.push(v);
        }
        let text = feats.split_off(spec.d_x);
        if id != records.len() as u64 {
            return Err(perr(line, "id", format!("ids must be sequential, expected {}", records.len())));
        }
        records.push(SampleRecord {
            id,
            split,
            tag,
            label,
            image: feats,
            text,
        });
    }
    if records.len() != manifest.num_records {
        return Err(perr(
            records.len() as u64 + 1,
            "row",
            format!("manifest lists {} records, file has {}", manifest.num_records, records.len()),
        ));
    }
    Ok(Scenario { spec, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub iterations: u64,
    pub eta: f64,
    pub momentum: f64,
    pub tau0: f64,
    pub seed: u64,
    /// Minimum protected-class train accuracy the base model must reach.
    #[serde(default = "default_min_accuracy")]
    pub min_accuracy: f64,
}

fn default_min_accuracy() -> f64 {
    0.9
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            iterations: 100,
            eta: 0.5,
            momentum: 0.9,
            tau0: 0.05,
            seed: 0,
            min_accuracy: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainReport {
    /// Ids of every sample the base model saw.
    pub trained_ids: Vec<u64>,
    /// Train accuracy per class (rare classes included for reference).
    pub class_accuracy: Vec<f64>,
    pub protected_accuracy: f64,
    pub final_loss: f64,
}

/// Trains `w_old` on the protected classes' training samples only, by full
/// batch gradient descent with heavy-ball momentum on the mean cross-entropy.
/// Only the shared blocks are trained; task heads keep `U_k = 0`.
pub fn make_base_model(
    scenario: &Scenario,
    shape: &ModelShape,
    cfg: &BaseTrainConfig,
) -> Result<(ParamVector, BaseTrainReport)> {
    if shape.d_x != scenario.spec.d_x || shape.d_t != scenario.spec.d_t || shape.num_classes != scenario.spec.num_classes {
        return Err(Error::config("model", "model dimensions do not match the scenario"));
    }
    let class_texts = scenario.class_texts();
    let protected = scenario.spec.protected_classes();
    let groups: Vec<(usize, Vec<&SampleRecord>)> = protected
        .iter()
        .map(|&c| (c, scenario.class_samples(Split::Train, c)))
        .collect();
    let n_total: usize = groups.iter().map(|(_, g)| g.len()).sum();
    let trained_ids: Vec<u64> = groups.iter().flat_map(|(_, g)| g.iter().map(|r| r.id)).collect();

    let mut p = ParamVector::init(shape.clone(), cfg.seed)?;
    let shared = p.layout().shared();
    let mut vel = vec![0.0; p.len()];
    let mut last = f64::NAN;
    for _ in 0..cfg.iterations {
        let mut g = vec![0.0; p.len()];
        let mut loss = 0.0;
        for (c, recs) in &groups {
            let xs: Vec<&[f64]> = recs.iter().map(|r| r.image.as_slice()).collect();
            let w = xs.len() as f64 / n_total as f64;
            let l = mean_ce_with_grad(&p, &xs, *c, &class_texts, cfg.tau0, Some((&mut g, w)))?;
            loss += l.iter().sum::<f64>() / n_total as f64;
        }
        g[shared.end..].iter_mut().for_each(|x| *x = 0.0);
        for ((v, gi), x) in vel.iter_mut().zip(&g).zip(p.as_mut_slice()) {
            *v = cfg.momentum * *v + gi;
            *x -= cfg.eta * *v;
        }
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: 0,
                reason: "base training loss is not finite".into(),
                last_checkpoint: None,
            });
        }
        last = loss;
    }
    let class_accuracy = (0..scenario.spec.num_classes)
        .map(|c| accuracy(&p, &scenario.labeled_set(Split::Train, c), &class_texts))
        .collect::<Result<Vec<_>>>()?;
    let hits: f64 = groups.iter().map(|(c, g)| class_accuracy[*c] * g.len() as f64).sum();
    let protected_accuracy = hits / n_total as f64;
    if protected_accuracy < cfg.min_accuracy {
        return Err(Error::Generation(format!(
            "base model reached only {protected_accuracy:.3} protected train accuracy (< {})",
            cfg.min_accuracy
        )));
    }
    Ok((
        p,
        BaseTrainReport {
            trained_ids,
            class_accuracy,
            protected_accuracy,
            final_loss: last,
        },
    ))
}

/// Cosine similarity helper for diagnostics.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}
