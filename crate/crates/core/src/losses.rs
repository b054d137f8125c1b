//! The four cascading loss terms, their signed combination, and the
//! end-to-end objective `z ↦ L_total(project(decode(z)))` with its gradient.
//!
//! Every term is built by one tape function; the plain-value entry points
//! (`loss_loc`, `loss_id`, ...) wrap the same builders around constant
//! leaves, so the numbers they return are the numbers the optimizer sees.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{projection_bounds, ImageTensor};
use crate::saliency::{LayerMasks, MaskSet};
use crate::tensor::Tensor;
use crate::types::{EmbeddingVector, LatentCode, LossWeights};
use crate::victim::{AttentionTap, FeatureTap, VictimBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    Loc,
    Id,
    Attn,
    Feat,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Loc, Term::Id, Term::Attn, Term::Feat];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Term::Loc => "loc",
            Term::Id => "id",
            Term::Attn => "attn",
            Term::Feat => "feat",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Term values at one evaluation. Disabled terms report zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_loc: f64,
    pub l_id: f64,
    /// Ensemble mean of the hinge part `max(0, m − D_cos(adv, src))` of `l_id`.
    pub l_id_hinge: f64,
    pub l_attn: f64,
    pub l_feat: f64,
    pub l_total: f64,
    pub enabled: [bool; 4],
}

impl LossReport {
    pub fn terms(&self) -> [f64; 4] {
        [self.l_loc, self.l_id, self.l_attn, self.l_feat]
    }
}

/// `(L_loc, L_id, L_attn, L_feat) · Λᵀ` over enabled terms.
pub fn loss_total(terms: [f64; 4], enabled: [bool; 4], weights: &LossWeights) -> f64 {
    weighted_sum(terms, enabled, weights.as_array())
}

fn weighted_sum(terms: [f64; 4], enabled: [bool; 4], coefficients: [f64; 4]) -> f64 {
    (0..4)
        .filter(|&i| enabled[i])
        .map(|i| coefficients[i] * terms[i])
        .sum()
}

fn loc_on(tape: &mut Tape, offsets_adv: Var, offsets_src: &Tensor, mask: Arc<Tensor>) -> Var {
    let diff = tape.sub_const(offsets_adv, offsets_src);
    let masked = tape.mul_const(diff, mask);
    let n = tape.norm(masked);
    let neg = tape.scale(n, -1.0);
    tape.exp(neg)
}

fn cosine_distance_on(tape: &mut Tape, u: Var, v: &Tensor) -> Result<Var> {
    let nu = tape.value(u).frobenius();
    let nv = v.frobenius();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNormEmbedding("identity loss".into()));
    }
    let v_leaf = tape.leaf(v.clone());
    let dot = tape.dot(u, v_leaf);
    let norm_u = tape.norm(u);
    let scaled = tape.scale(norm_u, nv);
    let cos = tape.div(dot, scaled);
    let neg = tape.scale(cos, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Returns `(L_id, hinge)` for one encoder.
fn id_on(
    tape: &mut Tape,
    e_adv: Var,
    e_src: &Tensor,
    e_null: &Tensor,
    margin: f64,
) -> Result<(Var, Var)> {
    let d_null = cosine_distance_on(tape, e_adv, e_null)?;
    let d_src = cosine_distance_on(tape, e_adv, e_src)?;
    let gap = tape.scale(d_src, -1.0);
    let gap = tape.add_scalar(gap, margin);
    let hinge = tape.relu(gap);
    Ok((tape.add(d_null, hinge), hinge))
}

fn attn_on(tape: &mut Tape, adv: &[(Var, Var)], src: &[(&Tensor, &Tensor)]) -> Var {
    let mut total: Option<Var> = None;
    for (&(k, v), &(ks, vs)) in adv.iter().zip(src) {
        let dk = tape.sub_const(k, ks);
        let nk = tape.norm(dk);
        let dv = tape.sub_const(v, vs);
        let nv = tape.norm(dv);
        let layer = tape.add(nk, nv);
        total = Some(match total {
            Some(t) => tape.add(t, layer),
            None => layer,
        });
    }
    total.unwrap_or_else(|| tape.leaf(Tensor::scalar(0.0)))
}

fn feat_on(tape: &mut Tape, adv: &[Var], src: &[&Tensor], masks: &[Vec<Arc<Tensor>>]) -> Var {
    let mut total: Option<Var> = None;
    for ((&f, &fs), layer_masks) in adv.iter().zip(src).zip(masks) {
        let diff = tape.sub_const(f, fs);
        for m in layer_masks {
            let masked = tape.mul_const(diff, m.clone());
            let n = tape.norm(masked);
            total = Some(match total {
                Some(t) => tape.add(t, n),
                None => n,
            });
        }
    }
    total.unwrap_or_else(|| tape.leaf(Tensor::scalar(0.0)))
}

fn anchor_tensor(mask: &[f64]) -> Tensor {
    let j = mask.len();
    let mut t = Tensor::zeros(&[j, 4]);
    for (a, &m) in mask.iter().enumerate() {
        for c in 0..4 {
            t.data_mut()[a * 4 + c] = m;
        }
    }
    t
}

/// `exp(−‖(Φ_reg(adv) − Φ_reg(src)) ⊙ M_p‖₂)`, or `None` when the anchor
/// mask is empty and the term is disabled.
pub fn loss_loc(
    offsets_adv: &[[f64; 4]],
    offsets_src: &[[f64; 4]],
    anchor_mask: &[f64],
) -> Result<Option<f64>> {
    let j = anchor_mask.len();
    if offsets_adv.len() != j || offsets_src.len() != j {
        return Err(Error::ShapeMismatch(format!(
            "offsets ({}, {}) vs anchor mask {j}",
            offsets_adv.len(),
            offsets_src.len()
        )));
    }
    if anchor_mask.iter().all(|&m| m == 0.0) {
        return Ok(None);
    }
    let flat = |o: &[[f64; 4]]| Tensor::new(&[j, 4], o.iter().flatten().copied().collect());
    let mut tape = Tape::new();
    let adv = tape.leaf(flat(offsets_adv));
    let l = loc_on(&mut tape, adv, &flat(offsets_src), Arc::new(anchor_tensor(anchor_mask)));
    Ok(Some(tape.value(l).item()))
}

/// Ensemble-mean identity erasure loss and its hinge component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdLoss {
    pub value: f64,
    pub hinge: f64,
}

pub fn loss_id(
    adv: &[EmbeddingVector],
    src: &[EmbeddingVector],
    null: &[EmbeddingVector],
    margin: f64,
) -> Result<IdLoss> {
    check_margin(margin)?;
    if adv.is_empty() || adv.len() != src.len() || adv.len() != null.len() {
        return Err(Error::ShapeMismatch("one embedding per encoder required".into()));
    }
    let mut value = 0.0;
    let mut hinge = 0.0;
    for ((a, s), n) in adv.iter().zip(src).zip(null) {
        let mut tape = Tape::new();
        let av = tape.leaf(Tensor::new(&[a.dim()], a.data.clone()));
        let (l, h) = id_on(
            &mut tape,
            av,
            &Tensor::new(&[s.dim()], s.data.clone()),
            &Tensor::new(&[n.dim()], n.data.clone()),
            margin,
        )?;
        value += tape.value(l).item();
        hinge += tape.value(h).item();
    }
    let k = adv.len() as f64;
    Ok(IdLoss {
        value: value / k,
        hinge: hinge / k,
    })
}

fn check_margin(margin: f64) -> Result<()> {
    if !(margin > 0.0 && margin < 2.0) {
        return Err(Error::param("margin", "must lie in (0, 2)"));
    }
    Ok(())
}

fn check_layers<'a>(a: impl Iterator<Item = &'a str>, b: impl Iterator<Item = &'a str>) -> Result<()> {
    let a: Vec<&str> = a.collect();
    let b: Vec<&str> = b.collect();
    if a != b {
        return Err(Error::TapMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// `Σ_l ‖K_adv − K_src‖₂ + ‖V_adv − V_src‖₂` with Frobenius norms.
pub fn loss_attn(adv: &[AttentionTap], src: &[AttentionTap]) -> Result<f64> {
    check_layers(
        adv.iter().map(|t| t.layer_id.as_str()),
        src.iter().map(|t| t.layer_id.as_str()),
    )?;
    let mut tape = Tape::new();
    let mut vars = Vec::new();
    for (a, s) in adv.iter().zip(src) {
        if a.k.shape() != s.k.shape() || a.v.shape() != s.v.shape() {
            return Err(Error::TapMismatch(format!("shape mismatch in `{}`", a.layer_id)));
        }
        vars.push((tape.leaf(a.k.clone()), tape.leaf(a.v.clone())));
    }
    let src_refs: Vec<(&Tensor, &Tensor)> = src.iter().map(|s| (&s.k, &s.v)).collect();
    let l = attn_on(&mut tape, &vars, &src_refs);
    Ok(tape.value(l).item())
}

fn broadcast_layer_masks(
    layer: &str,
    fmap_shape: &[usize],
    masks: &BTreeMap<String, LayerMasks>,
) -> Result<Vec<Arc<Tensor>>> {
    let m = masks
        .get(layer)
        .ok_or_else(|| Error::TapMismatch(format!("no masks for layer `{layer}`")))?;
    let (c, h, w) = (fmap_shape[0], fmap_shape[1], fmap_shape[2]);
    [&m.semantic, &m.cam]
        .into_iter()
        .map(|mask| {
            if mask.dims() != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "mask {:?} vs feature map {h}x{w} in `{layer}`",
                    mask.dims()
                )));
            }
            Ok(Arc::new(mask.broadcast(c)))
        })
        .collect()
}

/// `Σ_{l ∈ {down, up}} Σ_{k ∈ {sem, cam}} ‖(F_adv − F_src) ⊙ M_k‖₂`.
pub fn loss_feat(
    adv: &[FeatureTap],
    src: &[FeatureTap],
    masks: &BTreeMap<String, LayerMasks>,
) -> Result<f64> {
    check_layers(
        adv.iter().map(|t| t.layer_id.as_str()),
        src.iter().map(|t| t.layer_id.as_str()),
    )?;
    let mut tape = Tape::new();
    let mut vars = Vec::new();
    let mut layer_masks = Vec::new();
    for (a, s) in adv.iter().zip(src) {
        if a.fmap.shape() != s.fmap.shape() {
            return Err(Error::TapMismatch(format!("shape mismatch in `{}`", a.layer_id)));
        }
        layer_masks.push(broadcast_layer_masks(&a.layer_id, a.fmap.shape(), masks)?);
        vars.push(tape.leaf(a.fmap.clone()));
    }
    let src_refs: Vec<&Tensor> = src.iter().map(|s| &s.fmap).collect();
    let l = feat_on(&mut tape, &vars, &src_refs, &layer_masks);
    Ok(tape.value(l).item())
}

/// How `Z_t` is drawn for the generative taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "timestep", rename_all = "kebab-case")]
pub enum TimestepPolicy {
    /// A fresh timestep drawn uniformly per iteration.
    Uniform,
    Fixed(usize),
}

/// Loss-side settings of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub margin: f64,
    pub tau_p: f64,
    /// Projection radius; a protection run overwrites it with the budget's ε.
    pub epsilon: f64,
    /// Backward pass through the pixel projection: identity when `true`,
    /// the exact clamp derivative otherwise.
    pub straight_through: bool,
    /// User-level term switches; localization is additionally disabled when
    /// the anchor mask is empty.
    pub enabled: [bool; 4],
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            margin: 0.6,
            tau_p: 0.5,
            epsilon: 12.0 / 255.0,
            straight_through: true,
            enabled: [true; 4],
        }
    }
}

/// Source-side quantities computed once per run.
#[derive(Debug, Clone)]
pub struct SourceCache {
    pub x_src: ImageTensor,
    pub z_src: LatentCode,
    pub masks: MaskSet,
    offsets_src: Tensor,
    anchor: Arc<Tensor>,
    emb_src: Vec<Tensor>,
    emb_null: Vec<Tensor>,
    attn_src: Vec<(String, Tensor, Tensor)>,
    /// Per timestep: noisy source latent and source feature maps.
    noisy: Vec<Tensor>,
    feat_src: Vec<Vec<(String, Tensor)>>,
    feat_masks: Vec<Vec<Arc<Tensor>>>,
    lo: Arc<Tensor>,
    hi: Arc<Tensor>,
}

/// The end-to-end objective of one protection run.
pub struct Objective<'b> {
    bundle: &'b VictimBundle,
    settings: LossSettings,
    enabled: [bool; 4],
    cache: SourceCache,
}

impl fmt::Debug for Objective<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Objective")
            .field("settings", &self.settings)
            .field("enabled", &self.enabled)
            .finish_non_exhaustive()
    }
}

impl<'b> Objective<'b> {
    /// Freezes every source-side quantity: detector offsets, anchor and
    /// saliency masks, source and null embeddings, source K/V, and one
    /// noise draw plus source feature maps per timestep.
    pub fn new(
        bundle: &'b VictimBundle,
        x_src: &ImageTensor,
        settings: LossSettings,
        noise_seed: u64,
    ) -> Result<Self> {
        bundle.check_image(x_src)?;
        settings.weights.validate()?;
        check_margin(settings.margin)?;
        if !(settings.epsilon >= 0.0) {
            return Err(Error::param("epsilon", "must be non-negative"));
        }

        let masks = MaskSet::build(x_src, bundle, settings.tau_p)?;
        let det = bundle.detector.detect(x_src)?;
        let j = det.anchor_count();
        let offsets_src = Tensor::new(&[j, 4], det.reg_offsets.iter().flatten().copied().collect());
        let anchor = Arc::new(anchor_tensor(masks.anchor.data()));

        let (h, w) = x_src.dims();
        let null = ImageTensor::filled(h, w, 0.0)?;
        let mut emb_src = Vec::new();
        let mut emb_null = Vec::new();
        for enc in bundle.attack_encoders() {
            let es = enc.embed(x_src)?;
            let en = enc.embed(&null)?;
            emb_src.push(Tensor::new(&[es.dim()], es.data));
            emb_null.push(Tensor::new(&[en.dim()], en.data));
        }

        let z_src = bundle.codec.encode(x_src)?;
        let steps = bundle.backbone.timestep_count();
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let shape = z_src.tensor().shape().to_vec();
        let mut noisy = Vec::with_capacity(steps);
        let mut feat_src = Vec::with_capacity(steps);
        let mut attn_src = Vec::new();
        for t in 0..steps {
            let n: usize = shape.iter().product();
            let noise = Tensor::new(&shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect());
            let zt = bundle.backbone.add_noise(&z_src, &noise, t)?;
            let (attn, feats) = bundle.backbone.tap_generation(x_src, &zt, t)?;
            if t == 0 {
                attn_src = attn.into_iter().map(|a| (a.layer_id, a.k, a.v)).collect();
            }
            feat_src.push(feats.into_iter().map(|f| (f.layer_id, f.fmap)).collect::<Vec<_>>());
            noisy.push(zt.into_tensor());
        }
        let feat_masks = feat_src
            .first()
            .map(|layers| {
                layers
                    .iter()
                    .map(|(id, f)| broadcast_layer_masks(id, f.shape(), &masks.per_layer))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?
            .unwrap_or_default();

        let chw = x_src.to_chw();
        let lo = Arc::new(chw.map(|c| projection_bounds(c, settings.epsilon).0));
        let hi = Arc::new(chw.map(|c| projection_bounds(c, settings.epsilon).1));

        let mut enabled = settings.enabled;
        enabled[Term::Loc.index()] &= masks.localization_enabled();

        Ok(Self {
            bundle,
            settings,
            enabled,
            cache: SourceCache {
                x_src: x_src.clone(),
                z_src,
                masks,
                offsets_src,
                anchor,
                emb_src,
                emb_null,
                attn_src,
                noisy,
                feat_src,
                feat_masks,
                lo,
                hi,
            },
        })
    }

    pub fn bundle(&self) -> &VictimBundle {
        self.bundle
    }

    pub fn settings(&self) -> &LossSettings {
        &self.settings
    }

    pub fn cache(&self) -> &SourceCache {
        &self.cache
    }

    /// Effective term switches.
    pub fn enabled(&self) -> [bool; 4] {
        self.enabled
    }

    pub fn timestep_count(&self) -> usize {
        self.cache.noisy.len()
    }

    /// `z_adv⁰ = encode(x_src)`.
    pub fn initial_latent(&self) -> LatentCode {
        self.cache.z_src.clone()
    }

    /// Decoded, budget-projected image for `z`.
    pub fn project_decode(&self, z: &LatentCode) -> Result<ImageTensor> {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.tensor().clone());
        let x = self.decode_projected(&mut tape, zv)?;
        ImageTensor::from_chw(tape.value(x))
    }

    /// Per pixel element, whether the projection clamps the decode of `z`.
    pub fn projection_active_set(&self, z: &LatentCode) -> Result<Vec<bool>> {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.tensor().clone());
        let x = self.bundle.codec.decode_on(&mut tape, zv)?;
        Ok(tape
            .value(x)
            .data()
            .iter()
            .zip(self.cache.lo.data().iter().zip(self.cache.hi.data()))
            .map(|(&v, (&lo, &hi))| v < lo || v > hi)
            .collect())
    }

    fn decode_projected(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let x = self.bundle.codec.decode_on(tape, z)?;
        Ok(tape.clamp(
            x,
            self.cache.lo.clone(),
            self.cache.hi.clone(),
            self.settings.straight_through,
        ))
    }

    /// Builds every term on the tape. Returns per-term scalar nodes (in
    /// [`Term`] order) and the mean hinge node.
    fn build(&self, tape: &mut Tape, z: Var, timestep: usize) -> Result<([Var; 4], Var)> {
        let x = self.decode_projected(tape, z)?;
        self.build_terms(tape, x, timestep)
    }

    fn build_terms(&self, tape: &mut Tape, x: Var, timestep: usize) -> Result<([Var; 4], Var)> {
        if timestep >= self.cache.noisy.len() {
            return Err(Error::TimestepOutOfRange {
                timestep,
                count: self.cache.noisy.len(),
            });
        }

        let loc = if self.enabled[Term::Loc.index()] {
            let det = self.bundle.detector.forward(tape, x)?;
            loc_on(tape, det.offsets, &self.cache.offsets_src, self.cache.anchor.clone())
        } else {
            tape.leaf(Tensor::scalar(0.0))
        };

        let encoders: Vec<_> = self.bundle.attack_encoders().collect();
        let k = encoders.len() as f64;
        let mut id_sum: Option<Var> = None;
        let mut hinge_sum: Option<Var> = None;
        for (i, enc) in encoders.iter().enumerate() {
            let e = enc.forward(tape, x)?.embedding;
            let (l, h) = id_on(
                tape,
                e,
                &self.cache.emb_src[i],
                &self.cache.emb_null[i],
                self.settings.margin,
            )?;
            id_sum = Some(match id_sum {
                Some(s) => tape.add(s, l),
                None => l,
            });
            hinge_sum = Some(match hinge_sum {
                Some(s) => tape.add(s, h),
                None => h,
            });
        }
        let id = tape.scale(id_sum.expect("at least one attack encoder"), 1.0 / k);
        let hinge = tape.scale(hinge_sum.expect("at least one attack encoder"), 1.0 / k);

        let zt = tape.leaf(self.cache.noisy[timestep].clone());
        let taps = self.bundle.backbone.forward(tape, x, zt, timestep)?;
        check_layers(
            taps.attention.iter().map(|(id, _, _)| id.as_str()),
            self.cache.attn_src.iter().map(|(id, _, _)| id.as_str()),
        )?;
        let adv_kv: Vec<(Var, Var)> = taps.attention.iter().map(|(_, k, v)| (*k, *v)).collect();
        let src_kv: Vec<(&Tensor, &Tensor)> =
            self.cache.attn_src.iter().map(|(_, k, v)| (k, v)).collect();
        let attn = attn_on(tape, &adv_kv, &src_kv);

        let feat_src = &self.cache.feat_src[timestep];
        check_layers(
            taps.features.iter().map(|(id, _)| id.as_str()),
            feat_src.iter().map(|(id, _)| id.as_str()),
        )?;
        let adv_f: Vec<Var> = taps.features.iter().map(|(_, f)| *f).collect();
        let src_f: Vec<&Tensor> = feat_src.iter().map(|(_, f)| f).collect();
        let feat = feat_on(tape, &adv_f, &src_f, &self.cache.feat_masks);

        Ok(([loc, id, attn, feat], hinge))
    }

    fn report(&self, tape: &Tape, terms: [Var; 4], hinge: Var) -> LossReport {
        let v = terms.map(|t| tape.value(t).item());
        let mut values = [0.0; 4];
        for i in 0..4 {
            if self.enabled[i] {
                values[i] = v[i];
            }
        }
        LossReport {
            l_loc: values[0],
            l_id: values[1],
            l_id_hinge: if self.enabled[1] { tape.value(hinge).item() } else { 0.0 },
            l_attn: values[2],
            l_feat: values[3],
            l_total: loss_total(values, self.enabled, &self.settings.weights),
            enabled: self.enabled,
        }
    }

    pub fn evaluate(&self, z: &LatentCode, timestep: usize) -> Result<LossReport> {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.tensor().clone());
        let (terms, hinge) = self.build(&mut tape, zv, timestep)?;
        Ok(self.report(&tape, terms, hinge))
    }

    /// `Σ c_i · L_i` over enabled terms for arbitrary coefficients.
    pub fn combined_value(&self, z: &LatentCode, timestep: usize, coefficients: [f64; 4]) -> Result<f64> {
        let r = self.evaluate(z, timestep)?;
        Ok(weighted_sum(r.terms(), self.enabled, coefficients))
    }

    /// Reverse-mode gradient of `L_total` with respect to the latent.
    pub fn gradient(&self, z: &LatentCode, timestep: usize) -> Result<(LossReport, Tensor)> {
        let (report, grad) = self.gradient_with(z, timestep, self.settings.weights.as_array())?;
        if !grad.all_finite() {
            for term in Term::ALL {
                let mut unit = [0.0; 4];
                unit[term.index()] = 1.0;
                let (_, g) = self.gradient_with(z, timestep, unit)?;
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient(term.name().into()));
                }
            }
            return Err(Error::NonFiniteGradient("total".into()));
        }
        Ok((report, grad))
    }

    /// Gradient of `Σ c_i · L_i` over enabled terms.
    pub fn gradient_with(
        &self,
        z: &LatentCode,
        timestep: usize,
        coefficients: [f64; 4],
    ) -> Result<(LossReport, Tensor)> {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.tensor().clone());
        let (terms, hinge) = self.build(&mut tape, zv, timestep)?;
        let report = self.report(&tape, terms, hinge);
        let mut total: Option<Var> = None;
        for i in 0..4 {
            if !self.enabled[i] || coefficients[i] == 0.0 {
                continue;
            }
            let t = tape.scale(terms[i], coefficients[i]);
            total = Some(match total {
                Some(s) => tape.add(s, t),
                None => t,
            });
        }
        let grad = match total {
            Some(t) => tape.backward(t).wrt(zv),
            None => Tensor::zeros(z.tensor().shape()),
        };
        Ok((report, grad))
    }

    /// Evaluates the loss with `x_adv` supplied directly in pixel space,
    /// bypassing the codec and projection.
    pub fn evaluate_image(&self, x_adv: &ImageTensor, timestep: usize) -> Result<LossReport> {
        self.bundle.check_image(x_adv)?;
        let mut tape = Tape::new();
        let x = tape.leaf(x_adv.to_chw());
        let (terms, hinge) = self.build_terms(&mut tape, x, timestep)?;
        Ok(self.report(&tape, terms, hinge))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_face;
    use crate::types::{MaskKind, SpatialMask};
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec(), "t").unwrap()
    }

    #[test]
    fn loc_examples() {
        let src = vec![[0.0; 4]; 2];
        let adv = vec![[3.0, 4.0, 0.0, 0.0], [9.0, 9.0, 9.0, 9.0]];
        assert_eq!(loss_loc(&src, &src, &[1.0, 1.0]).unwrap(), Some(1.0));
        let v = loss_loc(&adv, &src, &[1.0, 0.0]).unwrap().unwrap();
        assert!((v - (-5.0f64).exp()).abs() < 1e-15);
        assert!((v - 6.7379e-3).abs() < 1e-7);
        assert_eq!(loss_loc(&adv, &src, &[0.0, 0.0]).unwrap(), None);
        assert!(loss_loc(&adv, &src, &[1.0]).is_err());
    }

    #[test]
    fn id_examples() {
        let src = emb(&[1.0, 0.0]);
        let null = emb(&[0.0, 1.0]);
        let r = loss_id(std::slice::from_ref(&src), std::slice::from_ref(&src), std::slice::from_ref(&null), 0.6).unwrap();
        assert!((r.hinge - 0.6).abs() < 1e-12);
        assert!((r.value - 1.6).abs() < 1e-12);
        let r = loss_id(std::slice::from_ref(&null), std::slice::from_ref(&src), std::slice::from_ref(&null), 0.6).unwrap();
        assert!(r.value.abs() < 1e-12);
        assert!(loss_id(&[emb(&[0.0, 0.0])], std::slice::from_ref(&src), std::slice::from_ref(&null), 0.6).is_err());
        assert!(loss_id(std::slice::from_ref(&src), std::slice::from_ref(&src), &[null], 2.0).is_err());
    }

    #[test]
    fn attn_examples() {
        let tap = |k: f64, v: f64| AttentionTap {
            layer_id: "a".into(),
            k: Tensor::filled(&[2, 2], k),
            v: Tensor::filled(&[2, 2], v),
        };
        assert_eq!(loss_attn(&[tap(1.0, 0.5)], &[tap(1.0, 0.5)]).unwrap(), 0.0);
        assert!((loss_attn(&[tap(1.0, 0.0)], &[tap(0.0, 0.0)]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(
            loss_attn(&[tap(0.3, 0.7)], &[tap(1.0, 0.2)]).unwrap(),
            loss_attn(&[tap(1.0, 0.2)], &[tap(0.3, 0.7)]).unwrap()
        );
        let mut other = tap(0.0, 0.0);
        other.layer_id = "b".into();
        assert!(loss_attn(&[tap(0.0, 0.0)], &[other]).is_err());
    }

    fn masks(value: f64, h: usize, w: usize) -> BTreeMap<String, LayerMasks> {
        let m = SpatialMask::filled(h, w, value, MaskKind::Field).unwrap();
        let mut out = BTreeMap::new();
        out.insert(
            "f".to_string(),
            LayerMasks {
                semantic: m.clone(),
                cam: SpatialMask::filled(h, w, 0.0, MaskKind::Cam).unwrap(),
            },
        );
        out
    }

    #[test]
    fn feat_examples() {
        let tap = |v: f64| FeatureTap {
            layer_id: "f".into(),
            fmap: Tensor::filled(&[1, 2, 2], v),
        };
        assert!((loss_feat(&[tap(2.0)], &[tap(0.0)], &masks(1.0, 2, 2)).unwrap() - 4.0).abs() < 1e-15);
        assert_eq!(loss_feat(&[tap(2.0)], &[tap(0.0)], &masks(0.0, 2, 2)).unwrap(), 0.0);
        assert_eq!(loss_feat(&[tap(2.0)], &[tap(2.0)], &masks(1.0, 2, 2)).unwrap(), 0.0);
        assert!(loss_feat(&[tap(2.0)], &[tap(0.0)], &masks(1.0, 3, 2)).is_err());
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::new(-1.0, -1.0, 1.0, 1.0).unwrap();
        assert_eq!(loss_total([0.0; 4], [true; 4], &w), 0.0);
        assert_eq!(loss_total([1.0, 2.0, 3.0, 4.0], [true; 4], &w), 4.0);
        assert_eq!(loss_total([1.0, 2.0, 3.0, 4.0], [false, true, true, true], &w), 5.0);
    }

    #[test]
    fn identity_case_on_surrogate() {
        for seed in 0..2 {
            let bundle = VictimBundle::surrogate_seeded(seed);
            let x = synthetic_face(seed + 40, 64);
            let obj = Objective::new(&bundle, &x, LossSettings::default(), seed).unwrap();
            for t in [0, obj.timestep_count() - 1] {
                let r = obj.evaluate_image(&x, t).unwrap();
                assert!(r.enabled[0]);
                assert!((r.l_loc - 1.0).abs() < 1e-9);
                assert!(r.l_attn.abs() < 1e-9);
                assert!(r.l_feat.abs() < 1e-9);
                assert!((r.l_id_hinge - 0.6).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn objective_is_deterministic_and_shaped() {
        let bundle = VictimBundle::surrogate_seeded(5);
        let x = synthetic_face(5, 64);
        let obj = Objective::new(&bundle, &x, LossSettings::default(), 9).unwrap();
        let z = obj.initial_latent();
        let (r1, g1) = obj.gradient(&z, 3).unwrap();
        let (r2, g2) = obj.gradient(&z, 3).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(g1, g2);
        assert_eq!(g1.shape(), z.tensor().shape());
        assert!(g1.all_finite());
        assert!(r1.l_loc > 0.0 && r1.l_loc <= 1.0);
        assert!(r1.l_id >= 0.0 && r1.l_attn >= 0.0 && r1.l_feat >= 0.0);
        let expected = loss_total(r1.terms(), r1.enabled, &LossWeights::default());
        assert_eq!(r1.l_total, expected);
        assert!(obj.evaluate(&z, obj.timestep_count()).is_err());
    }

    #[test]
    fn disabled_term_has_zero_gradient() {
        let bundle = VictimBundle::surrogate_seeded(6);
        let x = synthetic_face(6, 64);
        let settings = LossSettings {
            enabled: [true, false, true, true],
            ..LossSettings::default()
        };
        let obj = Objective::new(&bundle, &x, settings, 1).unwrap();
        let z = obj.initial_latent();
        let (r, g) = obj.gradient_with(&z, 0, [0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.l_id, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blank_source_disables_localization() {
        let bundle = VictimBundle::surrogate_seeded(2);
        let x = ImageTensor::filled(64, 64, 0.5).unwrap();
        let settings = LossSettings::default();
        match Objective::new(&bundle, &x, settings, 0) {
            Ok(obj) => assert!(!obj.enabled()[0]),
            Err(Error::ZeroNormEmbedding(_)) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    proptest! {
        #[test]
        fn total_is_linear_in_weights(
            terms in prop::array::uniform4(0.0f64..5.0),
            a in prop::array::uniform4(0.0f64..2.0),
            b in prop::array::uniform4(0.0f64..2.0),
        ) {
            let wa = LossWeights::new(-a[0], -a[1], a[2], a[3]).unwrap();
            let wb = LossWeights::new(-b[0], -b[1], b[2], b[3]).unwrap();
            let ws = LossWeights::new(-a[0] - b[0], -a[1] - b[1], a[2] + b[2], a[3] + b[3]).unwrap();
            let lhs = loss_total(terms, [true; 4], &ws);
            let rhs = loss_total(terms, [true; 4], &wa) + loss_total(terms, [true; 4], &wb);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn loc_in_unit_interval(d in prop::collection::vec(-3.0f64..3.0, 12)) {
            let adv: Vec<[f64; 4]> = d.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
            let v = loss_loc(&adv, &[[0.0; 4]; 3], &[1.0, 0.0, 1.0]).unwrap().unwrap();
            prop_assert!(v > 0.0 && v <= 1.0);
        }
    }
}
