//! Desk-scale two-tower encoder.
//!
//! The image tower maps a feature vector `x ∈ R^{d_x}` to `A x` (linear) or
//! `B σ(H x)` (one hidden layer), then normalizes. The text tower computes a
//! backbone feature `ē = T t ∈ R^{d_1}`, applies a head `M ∈ R^{d_2×d_1}` and
//! normalizes. The head is the shared `W`, or `W + U_k V_kᵀ` for task `k` when
//! task-dependent heads are enabled.
//!
//! All parameters live in one flat `f64` buffer. [`Layout`] fixes the order:
//! image hidden (if any), image output, text backbone, `W`, `U_0..U_C`,
//! `V_0..V_C`; every block is row-major.

use std::ops::Range;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_outer, dot, matvec, matvec_t, norm};
use crate::rng::{self, StreamRng};

/// Pre-normalization vectors shorter than this are rejected.
pub const DEGENERATE_NORM: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub d_x: usize,
    pub d_t: usize,
    /// Hidden width of the image tower; 0 means linear.
    pub d_h: usize,
    pub d_1: usize,
    pub d_2: usize,
    pub r: usize,
    /// Number of classes (tasks), `m + 1`.
    pub num_classes: usize,
    pub heads_enabled: bool,
    pub activation: Activation,
}

impl ModelShape {
    /// Embedding dimension shared by both towers.
    pub fn d_emb(&self) -> usize {
        self.d_2
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_x", self.d_x),
            ("d_t", self.d_t),
            ("d_1", self.d_1),
            ("d_2", self.d_2),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be >= 1"));
            }
        }
        if self.heads_enabled {
            if self.r == 0 {
                return Err(Error::config("model.r", "must be >= 1 when heads are enabled"));
            }
            if self.r >= self.d_1.min(self.d_2) {
                return Err(Error::config("model.r", "rank must be < min(d_1, d_2)"));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Offsets of every parameter block inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub img_hidden: Option<Range<usize>>,
    pub img_out: Range<usize>,
    pub txt: Range<usize>,
    pub head_w: Range<usize>,
    pub heads_u: Vec<Range<usize>>,
    pub heads_v: Vec<Range<usize>>,
    pub len: usize,
}

impl Layout {
    fn new(s: &ModelShape) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let img_hidden = (s.d_h > 0).then(|| take(s.d_h * s.d_x));
        let img_in = if s.d_h > 0 { s.d_h } else { s.d_x };
        let img_out = take(s.d_2 * img_in);
        let txt = take(s.d_1 * s.d_t);
        let head_w = take(s.d_2 * s.d_1);
        let (heads_u, heads_v) = if s.heads_enabled {
            let u = (0..s.num_classes).map(|_| take(s.d_2 * s.r)).collect();
            let v = (0..s.num_classes).map(|_| take(s.d_1 * s.r)).collect();
            (u, v)
        } else {
            (Vec::new(), Vec::new())
        };
        Layout {
            img_hidden,
            img_out,
            txt,
            head_w,
            heads_u,
            heads_v,
            len: off,
        }
    }

    /// Range covering the shared parameters `(u, W)`: everything except the
    /// low-rank head blocks.
    pub fn shared(&self) -> Range<usize> {
        0..self.head_w.end
    }
}

/// Flat parameter state of the two-tower model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    shape: ModelShape,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        let len = shape.layout().len;
        Ok(ParamVector {
            shape,
            data: vec![0.0; len],
        })
    }

    /// Random initialization: dense blocks uniform in `±1/√fan_in`, `U_k = 0`
    /// and `V_k` uniform in `±1/√d_1`, so every `U_k V_kᵀ` starts at zero.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, rng::Stream::Init);
        Self::init_with(shape, &mut rng)
    }

    pub fn init_with(shape: ModelShape, rng: &mut StreamRng) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let s = p.shape.clone();
        let l = s.layout();
        let mut fill = |data: &mut [f64], range: Range<usize>, fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            for v in &mut data[range] {
                *v = rng::uniform(rng, -b, b);
            }
        };
        if let Some(h) = l.img_hidden.clone() {
            fill(&mut p.data, h, s.d_x);
        }
        let img_in = if s.d_h > 0 { s.d_h } else { s.d_x };
        fill(&mut p.data, l.img_out.clone(), img_in);
        fill(&mut p.data, l.txt.clone(), s.d_t);
        fill(&mut p.data, l.head_w.clone(), s.d_1);
        for v in &l.heads_v {
            fill(&mut p.data, v.clone(), s.d_1);
        }
        Ok(p)
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(shape: ModelShape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        let len = shape.layout().len;
        if data.len() != len {
            return Err(Error::Shape(format!(
                "flat parameter vector has length {}, layout needs {len}",
                data.len()
            )));
        }
        Ok(ParamVector { shape, data })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn layout(&self) -> Layout {
        self.shape.layout()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same shape, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::unflatten(self.shape.clone(), data)
    }

    pub fn head_u(&self, k: usize) -> Option<&[f64]> {
        let l = self.layout();
        l.heads_u.get(k).map(|r| &self.data[r.clone()])
    }

    pub fn head_v(&self, k: usize) -> Option<&[f64]> {
        let l = self.layout();
        l.heads_v.get(k).map(|r| &self.data[r.clone()])
    }

    /// True when every `U_k V_kᵀ` is exactly zero (or heads are disabled).
    pub fn low_rank_updates_vanish(&self) -> bool {
        let s = &self.shape;
        if !s.heads_enabled {
            return true;
        }
        (0..s.num_classes).all(|k| {
            let u = self.head_u(k).unwrap();
            let v = self.head_v(k).unwrap();
            (0..s.d_2).all(|a| {
                (0..s.d_1).all(|b| (0..s.r).map(|j| u[a * s.r + j] * v[b * s.r + j]).sum::<f64>() == 0.0)
            })
        })
    }
}

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for Embedding {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Image,
    /// `task = None` uses the shared head `W`.
    Text { task: Option<usize> },
}

fn normalize(z: Vec<f64>, what: &str) -> Result<(Vec<f64>, f64)> {
    let n = norm(&z);
    if !(n >= DEGENERATE_NORM) {
        return Err(Error::DegenerateInput(format!(
            "{what} pre-normalization vector has norm {n:e}"
        )));
    }
    Ok((z.into_iter().map(|v| v / n).collect(), n))
}

/// Cotangent through `y = z/‖z‖`: `(g − y (yᵀg)) / ‖z‖`.
fn normalize_backward(y: &[f64], zn: f64, g: &[f64]) -> Vec<f64> {
    let yg = dot(y, g);
    y.iter().zip(g).map(|(yi, gi)| (gi - yi * yg) / zn).collect()
}

/// Forward pass of the image tower with everything backprop needs.
#[derive(Debug, Clone)]
pub struct ImagePass {
    x: Vec<f64>,
    hidden: Option<Vec<f64>>,
    y: Vec<f64>,
    zn: f64,
}

impl ImagePass {
    pub fn new(p: &ParamVector, x: &[f64]) -> Result<Self> {
        let s = &p.shape;
        if x.len() != s.d_x {
            return Err(Error::Shape(format!("image input has length {}, expected {}", x.len(), s.d_x)));
        }
        let l = p.layout();
        let (z, hidden) = match &l.img_hidden {
            Some(hr) => {
                let pre = matvec(&p.data[hr.clone()], s.d_h, s.d_x, x);
                let a: Vec<f64> = pre.into_iter().map(|v| s.activation.apply(v)).collect();
                let z = matvec(&p.data[l.img_out.clone()], s.d_2, s.d_h, &a);
                (z, Some(a))
            }
            None => (matvec(&p.data[l.img_out.clone()], s.d_2, s.d_x, x), None),
        };
        let (y, zn) = normalize(z, "image")?;
        Ok(ImagePass {
            x: x.to_vec(),
            hidden,
            y,
            zn,
        })
    }

    pub fn embedding(&self) -> &[f64] {
        &self.y
    }

    /// `grad += (∂E1/∂p)ᵀ cot`.
    pub fn backprop(&self, p: &ParamVector, cot: &[f64], grad: &mut [f64]) {
        let s = &p.shape;
        let l = p.layout();
        let dz = normalize_backward(&self.y, self.zn, cot);
        match (&l.img_hidden, &self.hidden) {
            (Some(hr), Some(a)) => {
                add_outer(&mut grad[l.img_out.clone()], &dz, a, 1.0);
                let da = matvec_t(&p.data[l.img_out.clone()], s.d_2, s.d_h, &dz);
                let dpre: Vec<f64> = da
                    .iter()
                    .zip(a)
                    .map(|(d, ai)| d * s.activation.derivative_from_output(*ai))
                    .collect();
                add_outer(&mut grad[hr.clone()], &dpre, &self.x, 1.0);
            }
            _ => add_outer(&mut grad[l.img_out.clone()], &dz, &self.x, 1.0),
        }
    }
}

/// Forward pass of the text tower.
#[derive(Debug, Clone)]
pub struct TextPass {
    t: Vec<f64>,
    ebar: Vec<f64>,
    /// Head index actually used (None = shared `W`).
    head: Option<usize>,
    /// `V_kᵀ ē` when a task head is active.
    vte: Vec<f64>,
    y: Vec<f64>,
    zn: f64,
}

impl TextPass {
    pub fn new(p: &ParamVector, t: &[f64], task: Option<usize>) -> Result<Self> {
        let s = &p.shape;
        if t.len() != s.d_t {
            return Err(Error::Shape(format!("text input has length {}, expected {}", t.len(), s.d_t)));
        }
        if let Some(k) = task {
            if s.heads_enabled && k >= s.num_classes {
                return Err(Error::Shape(format!("task index {k} out of range (num_classes = {})", s.num_classes)));
            }
        }
        let head = task.filter(|_| s.heads_enabled);
        let l = p.layout();
        let ebar = matvec(&p.data[l.txt.clone()], s.d_1, s.d_t, t);
        let mut z = matvec(&p.data[l.head_w.clone()], s.d_2, s.d_1, &ebar);
        let mut vte = Vec::new();
        if let Some(k) = head {
            let u = &p.data[l.heads_u[k].clone()];
            let v = &p.data[l.heads_v[k].clone()];
            vte = matvec_t(v, s.d_1, s.r, &ebar);
            let uv = matvec(u, s.d_2, s.r, &vte);
            for (zi, a) in z.iter_mut().zip(uv) {
                *zi += a;
            }
        }
        let (y, zn) = normalize(z, "text")?;
        Ok(TextPass {
            t: t.to_vec(),
            ebar,
            head,
            vte,
            y,
            zn,
        })
    }

    pub fn embedding(&self) -> &[f64] {
        &self.y
    }

    pub fn backprop(&self, p: &ParamVector, cot: &[f64], grad: &mut [f64]) {
        let s = &p.shape;
        let l = p.layout();
        let dz = normalize_backward(&self.y, self.zn, cot);
        add_outer(&mut grad[l.head_w.clone()], &dz, &self.ebar, 1.0);
        let mut debar = matvec_t(&p.data[l.head_w.clone()], s.d_2, s.d_1, &dz);
        if let Some(k) = self.head {
            let u = &p.data[l.heads_u[k].clone()];
            let v = &p.data[l.heads_v[k].clone()];
            // dU_k = dz (V_kᵀ ē)ᵀ, dV_k = ē (U_kᵀ dz)ᵀ
            add_outer(&mut grad[l.heads_u[k].clone()], &dz, &self.vte, 1.0);
            let utdz = matvec_t(u, s.d_2, s.r, &dz);
            add_outer(&mut grad[l.heads_v[k].clone()], &self.ebar, &utdz, 1.0);
            let vu = matvec(v, s.d_1, s.r, &utdz);
            for (d, a) in debar.iter_mut().zip(vu) {
                *d += a;
            }
        }
        add_outer(&mut grad[l.txt.clone()], &debar, &self.t, 1.0);
    }
}

/// Vector–Jacobian product of one embedding with respect to the flat
/// parameters, with the forward pass cached.
#[derive(Debug, Clone)]
pub enum EmbeddingVjp {
    Image(ImagePass),
    Text(TextPass),
}

impl EmbeddingVjp {
    pub fn embedding(&self) -> &[f64] {
        match self {
            EmbeddingVjp::Image(i) => i.embedding(),
            EmbeddingVjp::Text(t) => t.embedding(),
        }
    }

    pub fn accumulate(&self, p: &ParamVector, cot: &[f64], grad: &mut [f64]) {
        match self {
            EmbeddingVjp::Image(i) => i.backprop(p, cot, grad),
            EmbeddingVjp::Text(t) => t.backprop(p, cot, grad),
        }
    }

    /// `dL/dp` for `dL/d(embedding) = cot`.
    pub fn apply(&self, p: &ParamVector, cot: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; p.len()];
        self.accumulate(p, cot, &mut g);
        g
    }
}

pub fn encode_image(p: &ParamVector, x: &[f64]) -> Result<Embedding> {
    Ok(Embedding(ImagePass::new(p, x)?.y))
}

pub fn encode_text(p: &ParamVector, t: &[f64], task: Option<usize>) -> Result<Embedding> {
    Ok(Embedding(TextPass::new(p, t, task)?.y))
}

/// Build the cached VJP for an input through the given tower.
pub fn grad_embedding_wrt_params(p: &ParamVector, input: &[f64], tower: Tower) -> Result<EmbeddingVjp> {
    match tower {
        Tower::Image => Ok(EmbeddingVjp::Image(ImagePass::new(p, input)?)),
        Tower::Text { task } => Ok(EmbeddingVjp::Text(TextPass::new(p, input, task)?)),
    }
}

/// Embeddings of the class descriptions, class `k` through head `k`.
pub fn class_text_passes(p: &ParamVector, class_texts: &[Vec<f64>]) -> Result<Vec<TextPass>> {
    if class_texts.len() != p.shape.num_classes {
        return Err(Error::Shape(format!(
            "{} class texts for {} classes",
            class_texts.len(),
            p.shape.num_classes
        )));
    }
    class_texts
        .iter()
        .enumerate()
        .map(|(k, t)| TextPass::new(p, t, Some(k)))
        .collect()
}

/// `s_k = ⟨E1(x), E2(t̂_k)⟩` for every class.
pub fn logits(p: &ParamVector, x: &[f64], class_texts: &[Vec<f64>]) -> Result<Vec<f64>> {
    let img = ImagePass::new(p, x)?;
    let classes = class_text_passes(p, class_texts)?;
    Ok(classes.iter().map(|c| dot(img.embedding(), c.embedding())).collect())
}

/// Argmax with ties broken toward the lowest index.
pub fn predict(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Shape("cannot predict from an empty logit vector".into()));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Deterministic random parameters for tests and examples.
pub fn random_params(shape: ModelShape, seed: u64) -> Result<ParamVector> {
    let mut rng = StreamRng::seed_from_u64(seed);
    ParamVector::init_with(shape, &mut rng)
}
