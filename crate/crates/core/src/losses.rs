//! Scalar losses, constraint functions and their exact gradients.
//!
//! Pair data lives in a [`PairSet`]: a registry of image and text feature
//! vectors plus one [`PairContext`] per positive pair whose negative pools are
//! index lists into that registry. Pools are reference counted so thousands of
//! pairs can share one negative list.
//!
//! Gradients are assembled by accumulating a cotangent per distinct embedding
//! and back-propagating each embedding once, in ascending registry order.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, pairwise_sum};
use crate::model::{class_text_passes, ImagePass, ParamVector, TextPass};

/// Floor applied to `g` before taking its logarithm.
pub const LOG_FLOOR: f64 = 1e-300;

/// A negative pool: a shared index list plus an optional extra member (the
/// positive element when the shared list does not already hold it).
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    shared: Arc<Vec<usize>>,
    extra: Option<usize>,
}

impl Pool {
    pub fn new(shared: Arc<Vec<usize>>, extra: Option<usize>) -> Self {
        Pool { shared, extra }
    }

    pub fn from_vec(members: Vec<usize>) -> Self {
        Pool::new(Arc::new(members), None)
    }

    pub fn len(&self) -> usize {
        self.shared.len() + usize::from(self.extra.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registry index of pool position `j`.
    pub fn get(&self, j: usize) -> usize {
        if j < self.shared.len() {
            self.shared[j]
        } else {
            match self.extra {
                Some(e) if j == self.shared.len() => e,
                _ => panic!("pool position {j} out of range (len {})", self.len()),
            }
        }
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.extra == Some(idx) || self.shared.contains(&idx)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.shared.iter().copied().chain(self.extra)
    }
}

/// One positive image–text pair with its contrast pools.
#[derive(Debug, Clone, PartialEq)]
pub struct PairContext {
    /// Position of this pair in its [`PairSet`].
    pub index: usize,
    pub image: usize,
    pub text: usize,
    /// Texts contrasted with `image` (contains `text`).
    pub text_pool: Pool,
    /// Images contrasted with `text` (contains `image`).
    pub image_pool: Pool,
}

/// Pairs plus the feature registry they index into.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub images: Vec<Vec<f64>>,
    pub texts: Vec<Vec<f64>>,
    pub pairs: Vec<PairContext>,
    /// Contrastive temperature `τ`.
    pub tau: f64,
}

impl PairSet {
    pub fn new(images: Vec<Vec<f64>>, texts: Vec<Vec<f64>>, pairs: Vec<PairContext>, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::config("tau", "temperature must be > 0"));
        }
        for (i, c) in pairs.iter().enumerate() {
            if c.index != i {
                return Err(Error::Shape(format!("pair {i} carries index {}", c.index)));
            }
            if c.text_pool.is_empty() || c.image_pool.is_empty() {
                return Err(Error::Shape(format!("pair {i} has an empty pool")));
            }
            if !c.text_pool.contains(c.text) || !c.image_pool.contains(c.image) {
                return Err(Error::Shape(format!("pair {i}: pools must contain the positive pair")));
            }
            if c.image >= images.len() || c.text >= texts.len() {
                return Err(Error::Shape(format!("pair {i} indexes outside the registry")));
            }
            if c.text_pool.iter().any(|t| t >= texts.len()) || c.image_pool.iter().any(|x| x >= images.len()) {
                return Err(Error::Shape(format!("pair {i}: pool indexes outside the registry")));
            }
        }
        Ok(PairSet { images, texts, pairs, tau })
    }

    /// Every pair contrasted against every registry entry of the other
    /// modality (the global contrastive setting).
    pub fn global(images: Vec<Vec<f64>>, texts: Vec<Vec<f64>>, positives: &[(usize, usize)], tau: f64) -> Result<Self> {
        let text_all = Arc::new((0..texts.len()).collect::<Vec<_>>());
        let img_all = Arc::new((0..images.len()).collect::<Vec<_>>());
        let pairs = positives
            .iter()
            .enumerate()
            .map(|(i, &(x, t))| PairContext {
                index: i,
                image: x,
                text: t,
                text_pool: Pool::new(text_all.clone(), None),
                image_pool: Pool::new(img_all.clone(), None),
            })
            .collect();
        PairSet::new(images, texts, pairs, tau)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Lazily computed forward passes over the pair registry.
pub(crate) struct PairPasses<'a> {
    p: &'a ParamVector,
    set: &'a PairSet,
    images: BTreeMap<usize, ImagePass>,
    texts: BTreeMap<usize, TextPass>,
    img_cot: BTreeMap<usize, Vec<f64>>,
    txt_cot: BTreeMap<usize, Vec<f64>>,
}

impl<'a> PairPasses<'a> {
    pub(crate) fn new(p: &'a ParamVector, set: &'a PairSet) -> Self {
        PairPasses {
            p,
            set,
            images: BTreeMap::new(),
            texts: BTreeMap::new(),
            img_cot: BTreeMap::new(),
            txt_cot: BTreeMap::new(),
        }
    }

    fn image(&mut self, idx: usize) -> Result<&[f64]> {
        if !self.images.contains_key(&idx) {
            let pass = ImagePass::new(self.p, &self.set.images[idx])?;
            self.images.insert(idx, pass);
        }
        Ok(self.images[&idx].embedding())
    }

    fn text(&mut self, idx: usize) -> Result<&[f64]> {
        if !self.texts.contains_key(&idx) {
            // pair texts go through the shared head
            let pass = TextPass::new(self.p, &self.set.texts[idx], None)?;
            self.texts.insert(idx, pass);
        }
        Ok(self.texts[&idx].embedding())
    }

    fn add_img_cot(&mut self, idx: usize, scale: f64, v: &[f64]) {
        let e = self.img_cot.entry(idx).or_insert_with(|| vec![0.0; v.len()]);
        axpy(e, scale, v);
    }

    fn add_txt_cot(&mut self, idx: usize, scale: f64, v: &[f64]) {
        let e = self.txt_cot.entry(idx).or_insert_with(|| vec![0.0; v.len()]);
        axpy(e, scale, v);
    }

    /// `ĝ_1` over the given pool positions and the per-position exponentials.
    fn g1_terms(&mut self, ctx: &PairContext, subset: &[usize]) -> Result<(f64, Vec<f64>)> {
        if subset.is_empty() {
            return Err(Error::Estimator("empty negative-text subset".into()));
        }
        let a = self.image(ctx.image)?.to_vec();
        let pos = dot(&a, self.text(ctx.text)?);
        let tau = self.set.tau;
        if let Some(&bad) = subset.iter().find(|&&j| j >= ctx.text_pool.len()) {
            return Err(Error::Shape(format!("pool position {bad} out of range (len {})", ctx.text_pool.len())));
        }
        let mut e = Vec::with_capacity(subset.len());
        for &j in subset {
            let tj = ctx.text_pool.get(j);
            let s = dot(&a, self.text(tj)?);
            e.push(((s - pos) / tau).exp());
        }
        Ok((pairwise_sum(&e) / subset.len() as f64, e))
    }

    fn g2_terms(&mut self, ctx: &PairContext, subset: &[usize]) -> Result<(f64, Vec<f64>)> {
        if subset.is_empty() {
            return Err(Error::Estimator("empty negative-image subset".into()));
        }
        let a = self.text(ctx.text)?.to_vec();
        let pos = dot(&a, self.image(ctx.image)?);
        let tau = self.set.tau;
        if let Some(&bad) = subset.iter().find(|&&j| j >= ctx.image_pool.len()) {
            return Err(Error::Shape(format!("pool position {bad} out of range (len {})", ctx.image_pool.len())));
        }
        let mut e = Vec::with_capacity(subset.len());
        for &j in subset {
            let xj = ctx.image_pool.get(j);
            let s = dot(&a, self.image(xj)?);
            e.push(((s - pos) / tau).exp());
        }
        Ok((pairwise_sum(&e) / subset.len() as f64, e))
    }

    /// Adds `weight · ∇ĝ_1` (as embedding cotangents) for precomputed terms.
    fn push_g1_grad(&mut self, ctx: &PairContext, subset: &[usize], e: &[f64], weight: f64) -> Result<()> {
        let c = weight / (subset.len() as f64 * self.set.tau);
        let a = self.image(ctx.image)?.to_vec();
        let bi = self.text(ctx.text)?.to_vec();
        let mut da = vec![0.0; a.len()];
        let mut esum = 0.0;
        for (&j, &ej) in subset.iter().zip(e) {
            let tj = ctx.text_pool.get(j);
            let bj = self.text(tj)?.to_vec();
            for k in 0..da.len() {
                da[k] += ej * (bj[k] - bi[k]);
            }
            self.add_txt_cot(tj, c * ej, &a);
            esum += ej;
        }
        self.add_txt_cot(ctx.text, -c * esum, &a);
        self.add_img_cot(ctx.image, c, &da);
        Ok(())
    }

    fn push_g2_grad(&mut self, ctx: &PairContext, subset: &[usize], e: &[f64], weight: f64) -> Result<()> {
        let c = weight / (subset.len() as f64 * self.set.tau);
        let a = self.text(ctx.text)?.to_vec();
        let ci = self.image(ctx.image)?.to_vec();
        let mut da = vec![0.0; a.len()];
        let mut esum = 0.0;
        for (&j, &ej) in subset.iter().zip(e) {
            let xj = ctx.image_pool.get(j);
            let cj = self.image(xj)?.to_vec();
            for k in 0..da.len() {
                da[k] += ej * (cj[k] - ci[k]);
            }
            self.add_img_cot(xj, c * ej, &a);
            esum += ej;
        }
        self.add_img_cot(ctx.image, -c * esum, &a);
        self.add_txt_cot(ctx.text, c, &da);
        Ok(())
    }

    /// Back-propagates all accumulated cotangents into `grad`.
    fn flush(self, grad: &mut [f64]) {
        for (idx, cot) in &self.img_cot {
            self.images[idx].backprop(self.p, cot, grad);
        }
        for (idx, cot) in &self.txt_cot {
            self.texts[idx].backprop(self.p, cot, grad);
        }
    }
}

fn full_subset(pool: &Pool) -> Vec<usize> {
    (0..pool.len()).collect()
}

fn check_pair(set: &PairSet, i: usize) -> Result<&PairContext> {
    set.pairs
        .get(i)
        .ok_or_else(|| Error::Shape(format!("pair index {i} out of range ({} pairs)", set.len())))
}

/// `ĝ_1i` over the given positions of the text pool (`None` = whole pool,
/// which is the exact `g_1i`).
pub fn g1(p: &ParamVector, set: &PairSet, i: usize, subset: Option<&[usize]>) -> Result<f64> {
    let ctx = check_pair(set, i)?;
    let full;
    let sub = match subset {
        Some(s) => s,
        None => {
            full = full_subset(&ctx.text_pool);
            &full
        }
    };
    PairPasses::new(p, set).g1_terms(ctx, sub).map(|(g, _)| g)
}

/// `ĝ_2i` over the given positions of the image pool.
pub fn g2(p: &ParamVector, set: &PairSet, i: usize, subset: Option<&[usize]>) -> Result<f64> {
    let ctx = check_pair(set, i)?;
    let full;
    let sub = match subset {
        Some(s) => s,
        None => {
            full = full_subset(&ctx.image_pool);
            &full
        }
    };
    PairPasses::new(p, set).g2_terms(ctx, sub).map(|(g, _)| g)
}

/// `τ log g_1i + τ log g_2i` with full pools.
pub fn contrastive_pair_loss(p: &ParamVector, set: &PairSet, i: usize) -> Result<f64> {
    let ctx = check_pair(set, i)?;
    let mut passes = PairPasses::new(p, set);
    let (ga, _) = passes.g1_terms(ctx, &full_subset(&ctx.text_pool))?;
    let (gb, _) = passes.g2_terms(ctx, &full_subset(&ctx.image_pool))?;
    Ok(set.tau * ga.max(LOG_FLOOR).ln() + set.tau * gb.max(LOG_FLOOR).ln())
}

/// `Σ_i w_i L_ctr(i) / denom` over the listed `(pair, w_i)` terms and,
/// optionally, its gradient.
fn weighted_impl(
    p: &ParamVector,
    set: &PairSet,
    terms: &[(usize, f64)],
    denom: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if terms.is_empty() {
        return Err(Error::Estimator("objective over an empty pair set".into()));
    }
    let tau = set.tau;
    let mut passes = PairPasses::new(p, set);
    let mut vals = Vec::with_capacity(terms.len());
    for &(i, w) in terms {
        let ctx = check_pair(set, i)?;
        let s1 = full_subset(&ctx.text_pool);
        let s2 = full_subset(&ctx.image_pool);
        let (ga, ea) = passes.g1_terms(ctx, &s1)?;
        let (gb, eb) = passes.g2_terms(ctx, &s2)?;
        let ga = ga.max(LOG_FLOOR);
        let gb = gb.max(LOG_FLOOR);
        let l = tau * ga.ln() + tau * gb.ln();
        vals.push(if w == 1.0 { l } else { w * l });
        if want_grad {
            passes.push_g1_grad(ctx, &s1, &ea, w * tau / (denom * ga))?;
            passes.push_g2_grad(ctx, &s2, &eb, w * tau / (denom * gb))?;
        }
    }
    let value = pairwise_sum(&vals) / denom;
    if want_grad {
        let mut g = vec![0.0; p.len()];
        passes.flush(&mut g);
        Ok((value, Some(g)))
    } else {
        Ok((value, None))
    }
}

fn all_pairs(set: &PairSet) -> Vec<(usize, f64)> {
    (0..set.len()).map(|i| (i, 1.0)).collect()
}

/// `F = (1/n) Σ_i L_ctr(i)`.
pub fn objective_f(p: &ParamVector, set: &PairSet) -> Result<f64> {
    weighted_impl(p, set, &all_pairs(set), set.len() as f64, false).map(|(v, _)| v)
}

/// Exact `F` and `∇F = (τ/n) Σ_i (∇g_1i/g_1i + ∇g_2i/g_2i)`.
pub fn grad_f(p: &ParamVector, set: &PairSet) -> Result<(f64, Vec<f64>)> {
    weighted_impl(p, set, &all_pairs(set), set.len() as f64, true).map(|(v, g)| (v, g.unwrap()))
}

/// `Σ_i w_i L_ctr(i)` over selected pairs, with its gradient.
pub fn weighted_contrastive(p: &ParamVector, set: &PairSet, terms: &[(usize, f64)]) -> Result<(f64, Vec<f64>)> {
    weighted_impl(p, set, terms, 1.0, true).map(|(v, g)| (v, g.unwrap()))
}

/// Per-pair minibatch request used by the stochastic estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDraw {
    pub pair: usize,
    pub text_subset: Vec<usize>,
    pub image_subset: Vec<usize>,
}

/// Evaluates `ĝ_1i, ĝ_2i` for every draw, hands them to `weights`, which
/// returns `(w1, w2)`, and accumulates `Σ w1 ∇ĝ_1i + w2 ∇ĝ_2i` into `grad`.
/// Returns the `(ĝ_1i, ĝ_2i)` values in draw order.
pub fn pair_estimates_with_grad<W>(
    p: &ParamVector,
    set: &PairSet,
    draws: &[PairDraw],
    mut weights: W,
    grad: &mut [f64],
) -> Result<Vec<(f64, f64)>>
where
    W: FnMut(usize, f64, f64) -> Result<(f64, f64)>,
{
    let mut passes = PairPasses::new(p, set);
    let mut out = Vec::with_capacity(draws.len());
    for d in draws {
        let ctx = check_pair(set, d.pair)?;
        let (ga, ea) = passes.g1_terms(ctx, &d.text_subset)?;
        let (gb, eb) = passes.g2_terms(ctx, &d.image_subset)?;
        let (w1, w2) = weights(d.pair, ga, gb)?;
        passes.push_g1_grad(ctx, &d.text_subset, &ea, w1)?;
        passes.push_g2_grad(ctx, &d.image_subset, &eb, w2)?;
        out.push((ga, gb));
    }
    passes.flush(grad);
    Ok(out)
}

fn check_tau0(tau0: f64) -> Result<()> {
    if tau0 > 0.0 {
        Ok(())
    } else {
        Err(Error::config("tau0", "temperature must be > 0"))
    }
}

/// Softmax cross-entropy of `logits/τ0` against class `y`.
pub fn ce_from_logits(logits: &[f64], y: usize, tau0: f64) -> Result<f64> {
    check_tau0(tau0)?;
    if y >= logits.len() {
        return Err(Error::Shape(format!("label {y} out of range for {} classes", logits.len())));
    }
    let z: Vec<f64> = logits.iter().map(|s| s / tau0).collect();
    let zy = z[y];
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if zy >= zmax {
        let rest: f64 = z.iter().enumerate().filter(|&(l, _)| l != y).map(|(_, zl)| (zl - zy).exp()).sum();
        Ok(rest.ln_1p())
    } else {
        let s: f64 = z.iter().map(|zl| (zl - zmax).exp()).sum();
        Ok((zmax - zy) + s.ln())
    }
}

/// `∂ℓ_ce/∂s_l = (softmax_l − [l = y]) / τ0`.
fn ce_logit_grad(logits: &[f64], y: usize, tau0: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|s| s / tau0).collect();
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|zl| (zl - zmax).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter()
        .enumerate()
        .map(|(l, el)| (el / s - if l == y { 1.0 } else { 0.0 }) / tau0)
        .collect()
}

pub fn ce_loss(p: &ParamVector, x: &[f64], y: usize, class_texts: &[Vec<f64>], tau0: f64) -> Result<f64> {
    check_tau0(tau0)?;
    let s = crate::model::logits(p, x, class_texts)?;
    ce_from_logits(&s, y, tau0)
}

pub fn zero_one_loss(p: &ParamVector, x: &[f64], y: usize, class_texts: &[Vec<f64>]) -> Result<u8> {
    let s = crate::model::logits(p, x, class_texts)?;
    if y >= s.len() {
        return Err(Error::Shape(format!("label {y} out of range for {} classes", s.len())));
    }
    Ok(u8::from(crate::model::predict(&s)? != y))
}

/// Mean cross-entropy over `samples` (all labelled `label`) and, when
/// `grad_scale` is given, `grad += grad_scale · ∇(mean ce)`.
pub fn mean_ce_with_grad(
    p: &ParamVector,
    samples: &[&[f64]],
    label: usize,
    class_texts: &[Vec<f64>],
    tau0: f64,
    grad: Option<(&mut [f64], f64)>,
) -> Result<Vec<f64>> {
    check_tau0(tau0)?;
    let classes = class_text_passes(p, class_texts)?;
    if label >= classes.len() {
        return Err(Error::Shape(format!("label {label} out of range for {} classes", classes.len())));
    }
    let n = samples.len() as f64;
    let mut losses = Vec::with_capacity(samples.len());
    match grad {
        None => {
            for x in samples {
                let img = ImagePass::new(p, x)?;
                let s: Vec<f64> = classes.iter().map(|c| dot(img.embedding(), c.embedding())).collect();
                losses.push(ce_from_logits(&s, label, tau0)?);
            }
        }
        Some((grad, scale)) => {
            let d = p.shape().d_emb();
            let mut class_cot = vec![vec![0.0; d]; classes.len()];
            for x in samples {
                let img = ImagePass::new(p, x)?;
                let s: Vec<f64> = classes.iter().map(|c| dot(img.embedding(), c.embedding())).collect();
                losses.push(ce_from_logits(&s, label, tau0)?);
                let ds = ce_logit_grad(&s, label, tau0);
                let mut img_cot = vec![0.0; d];
                for (l, c) in classes.iter().enumerate() {
                    let w = scale * ds[l] / n;
                    axpy(&mut img_cot, w, c.embedding());
                    axpy(&mut class_cot[l], w, img.embedding());
                }
                img.backprop(p, &img_cot, grad);
            }
            for (c, cot) in classes.iter().zip(&class_cot) {
                c.backprop(p, cot, grad);
            }
        }
    }
    Ok(losses)
}

/// One retention constraint `h_k(w) = L_k(w, D_k) − L_k(w_old, D_k)`.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub task: usize,
    pub samples: Vec<Vec<f64>>,
    /// `ℓ_ce(w_old, x_j, k)` computed once at construction.
    pub reference: Vec<f64>,
    pub class_texts: Arc<Vec<Vec<f64>>>,
    pub tau0: f64,
}

impl ConstraintSpec {
    pub fn new(
        w_old: &ParamVector,
        task: usize,
        samples: Vec<Vec<f64>>,
        class_texts: Arc<Vec<Vec<f64>>>,
        tau0: f64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Shape(format!("constraint for task {task} has no samples")));
        }
        let refs: Vec<&[f64]> = samples.iter().map(|s| s.as_slice()).collect();
        let reference = mean_ce_with_grad(w_old, &refs, task, &class_texts, tau0, None)?;
        Ok(ConstraintSpec {
            task,
            samples,
            reference,
            class_texts,
            tau0,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean cached reference loss over the whole set.
    pub fn reference_mean(&self) -> f64 {
        pairwise_sum(&self.reference) / self.reference.len() as f64
    }
}

fn constraint_impl(
    p: &ParamVector,
    spec: &ConstraintSpec,
    subset: Option<&[usize]>,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    let idx: Vec<usize> = match subset {
        Some([]) => return Err(Error::Estimator(format!("empty minibatch for constraint {}", spec.task))),
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&j| j >= spec.len()) {
                return Err(Error::Shape(format!("sample index {bad} outside D_{} (n = {})", spec.task, spec.len())));
            }
            s.to_vec()
        }
        None => (0..spec.len()).collect(),
    };
    let xs: Vec<&[f64]> = idx.iter().map(|&j| spec.samples[j].as_slice()).collect();
    let live = mean_ce_with_grad(p, &xs, spec.task, &spec.class_texts, spec.tau0, grad)?;
    let diffs: Vec<f64> = live.iter().zip(&idx).map(|(l, &j)| l - spec.reference[j]).collect();
    Ok(pairwise_sum(&diffs) / diffs.len() as f64)
}

/// `ĥ_k` over `subset` (all of `D_k` when `None`).
pub fn constraint_h(p: &ParamVector, spec: &ConstraintSpec, subset: Option<&[usize]>) -> Result<f64> {
    constraint_impl(p, spec, subset, None)
}

/// `ĥ_k` and `∇ĥ_k`. The reference term is constant in `p`.
pub fn grad_h(p: &ParamVector, spec: &ConstraintSpec, subset: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; p.len()];
    let v = constraint_impl(p, spec, subset, Some((&mut g, 1.0)))?;
    Ok((v, g))
}

/// `ĥ_k` with `grad += scale · ∇ĥ_k`.
pub fn accumulate_grad_h(
    p: &ParamVector,
    spec: &ConstraintSpec,
    subset: Option<&[usize]>,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    constraint_impl(p, spec, subset, Some((grad, scale)))
}

fn positive_part(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// `[v]_+`; the subgradient at 0 is taken as 0.
pub fn plus(v: f64) -> f64 {
    positive_part(v)
}

/// `Φ = F + (1/m) Σ_k (β/2) [h_k]_+²`.
pub fn penalty_phi(p: &ParamVector, set: &PairSet, specs: &[ConstraintSpec], beta: f64) -> Result<f64> {
    if beta < 0.0 {
        return Err(Error::config("beta", "penalty parameter must be >= 0"));
    }
    let f = objective_f(p, set)?;
    Ok(f + penalty_term(p, specs, beta)?)
}

fn penalty_term(p: &ParamVector, specs: &[ConstraintSpec], beta: f64) -> Result<f64> {
    if specs.is_empty() {
        return Ok(0.0);
    }
    let m = specs.len() as f64;
    let terms = specs
        .iter()
        .map(|s| constraint_h(p, s, None).map(|h| 0.5 * beta * plus(h).powi(2)))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&terms) / m)
}

/// Exact `Φ` and `∇Φ = ∇F + (β/m) Σ_k [h_k]_+ ∇h_k`.
pub fn grad_phi(p: &ParamVector, set: &PairSet, specs: &[ConstraintSpec], beta: f64) -> Result<(f64, Vec<f64>)> {
    if beta < 0.0 {
        return Err(Error::config("beta", "penalty parameter must be >= 0"));
    }
    let (f, mut g) = grad_f(p, set)?;
    let m = specs.len().max(1) as f64;
    let mut pen = Vec::with_capacity(specs.len());
    for s in specs {
        let h = constraint_h(p, s, None)?;
        let w = beta * plus(h) / m;
        if w > 0.0 {
            accumulate_grad_h(p, s, None, w, &mut g)?;
        }
        pen.push(0.5 * beta * plus(h).powi(2));
    }
    Ok((f + pairwise_sum(&pen) / m, g))
}
