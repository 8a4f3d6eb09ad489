//! Attention-feature surgery on sampling runs: progressive ablation sweeps,
//! style transfer by replaying single-stream features, group-truncation
//! training for semantic disentanglement, and region-scoped edits that
//! replay only one group's features. Recording and replay pair up by model
//! evaluation index, so two runs with the same schedule align exactly and a
//! self-replay reproduces the original output bit for bit.

use crate::error::{Result, UvError};
use crate::flowdit::{
    DisentangleConfig, FeatureCache, FlowModel, InjectionSpec, TrainConfig, TrainSample,
};
use crate::landmarks::Detector;
use crate::metrics::masked_l2;
use crate::sampler::{
    check_resolution, guided_sample_with, integrate, CondField, GuidanceConfig, SampleTrace,
    VelocityField,
};
use crate::tensor::{Scalar, Tensor};
use crate::toyfaces::{
    eye_mask, nose_mask, region_masks, Image, Portrait, UvTexture, CANVAS,
};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::sync::Arc;

/// Editable semantic regions; each one names a layer group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Mouth,
    Brow,
}

impl Region {
    pub fn parse(s: &str) -> Result<Region> {
        match s {
            "mouth" => Ok(Region::Mouth),
            "brow" => Ok(Region::Brow),
            other => Err(UvError::validation("region", &format!("unknown region {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Mouth => "mouth",
            Region::Brow => "brow",
        }
    }
}

/// The three layer groups cut at the configured boundaries: group 1 carries
/// skin and coarse layout, group 2 the mouth, group 3 the brows. Disjoint,
/// ordered, and exhaustive over all layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    pub group1: Vec<usize>,
    pub group2: Vec<usize>,
    pub group3: Vec<usize>,
}

impl GroupSpec {
    pub fn from_config(cfg: &crate::flowdit::ModelConfig) -> Result<GroupSpec> {
        cfg.validate()?;
        let (b1, b2) = cfg.group_boundaries;
        Ok(GroupSpec {
            group1: (0..b1).collect(),
            group2: (b1..b2).collect(),
            group3: (b2..cfg.n_layers()).collect(),
        })
    }

    pub fn label(group_k: usize) -> &'static str {
        match group_k {
            1 => "skin/coarse",
            2 => "mouth",
            _ => "brow",
        }
    }

    /// Layers replayed when editing `region`.
    pub fn layers_for(&self, region: Region) -> &[usize] {
        match region {
            Region::Mouth => &self.group2,
            Region::Brow => &self.group3,
        }
    }
}

/// A region-scoped edit: keep the source everywhere except the named
/// regions, which take the reference's features.
#[derive(Clone, Debug)]
pub struct EditRequest {
    pub source: Portrait,
    pub reference: Portrait,
    pub regions: BTreeSet<Region>,
}

impl EditRequest {
    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(UvError::validation("edit request", "region set is empty"));
        }
        Ok(())
    }
}

/// Velocity source that records every evaluation's attention features.
struct RecordingField<'a, S: Scalar> {
    model: &'a FlowModel<S>,
    cond: Tensor<S>,
    caches: Vec<FeatureCache<S>>,
}

impl<'a, S: Scalar> RecordingField<'a, S> {
    fn new(model: &'a FlowModel<S>, portrait: &Portrait) -> Result<Self> {
        let cond = model.prepare_cond(&portrait.pixels.mapv(|v| S::from_f64(v as f64)).into_dyn())?;
        Ok(RecordingField { model, cond, caches: Vec::new() })
    }
}

impl<S: Scalar> VelocityField<S> for RecordingField<'_, S> {
    fn velocity(&mut self, _call: usize, x: &ArrayD<S>, t: f64) -> Result<ArrayD<S>> {
        let mut cache = FeatureCache::empty(self.model.cfg().n_layers());
        let spec = InjectionSpec::passthrough(self.model.cfg().n_layers());
        let v = self.model.velocity(x, t, &self.cond, &spec, Some(&mut cache))?;
        self.caches.push(cache);
        Ok(v)
    }
}

/// Velocity source replaying recorded features into a fixed layer set, one
/// cache per evaluation in order.
struct InjectingField<'a, S: Scalar> {
    model: &'a FlowModel<S>,
    cond: Tensor<S>,
    layers: Vec<usize>,
    caches: &'a [FeatureCache<S>],
}

impl<'a, S: Scalar> InjectingField<'a, S> {
    fn new(
        model: &'a FlowModel<S>,
        portrait: &Portrait,
        layers: Vec<usize>,
        caches: &'a [FeatureCache<S>],
    ) -> Result<Self> {
        let cond = model.prepare_cond(&portrait.pixels.mapv(|v| S::from_f64(v as f64)).into_dyn())?;
        Ok(InjectingField { model, cond, layers, caches })
    }
}

impl<S: Scalar> VelocityField<S> for InjectingField<'_, S> {
    fn velocity(&mut self, call: usize, x: &ArrayD<S>, t: f64) -> Result<ArrayD<S>> {
        let cache = self.caches.get(call).ok_or_else(|| {
            UvError::validation(
                "feature replay",
                &format!("recorded {} evaluations, pass asked for {}", self.caches.len(), call + 1),
            )
        })?;
        let spec = InjectionSpec::replacing(
            self.model.cfg().n_layers(),
            &self.layers,
            Arc::new(cache.clone()),
        )?;
        self.model.velocity(x, t, &self.cond, &spec, None)
    }
}

/// Guided sample that also returns the per-evaluation feature record.
pub fn record_sample<S: Scalar>(
    cond: &Portrait,
    model: &FlowModel<S>,
    detector: &Detector<S>,
    gcfg: &GuidanceConfig,
    seed: u64,
) -> Result<(UvTexture, Vec<FeatureCache<S>>, SampleTrace)> {
    check_resolution(model)?;
    let mut field = RecordingField::new(model, cond)?;
    let (tex, trace) = guided_sample_with(&mut field, detector, gcfg, seed)?;
    Ok((tex, field.caches, trace))
}

/// Guided sample conditioned on `cond` with `layers` taking their attention
/// outputs from `caches`, matched per evaluation. Errors if the schedule
/// needs more evaluations than were recorded.
pub fn inject_sample<S: Scalar>(
    cond: &Portrait,
    model: &FlowModel<S>,
    detector: &Detector<S>,
    gcfg: &GuidanceConfig,
    seed: u64,
    layers: &[usize],
    caches: &[FeatureCache<S>],
) -> Result<(UvTexture, SampleTrace)> {
    check_resolution(model)?;
    let expected = gcfg.steps * gcfg.inner_iters;
    if caches.len() != expected {
        return Err(UvError::validation(
            "feature replay",
            &format!("recorded {} evaluations but the schedule runs {expected}", caches.len()),
        ));
    }
    let mut field = InjectingField::new(model, cond, layers.to_vec(), caches)?;
    guided_sample_with(&mut field, detector, gcfg, seed)
}

/// Identity from one portrait, style from another: record a full guided
/// sample conditioned on the identity, then sample conditioned on the style
/// while every single-stream attention output is replayed from the identity
/// pass. With identity == style and the same seed the replay is the
/// recording, so the output equals plain reconstruction exactly.
pub fn style_transfer<S: Scalar>(
    identity: &Portrait,
    style: &Portrait,
    model: &FlowModel<S>,
    detector: &Detector<S>,
    gcfg: &GuidanceConfig,
    seed: u64,
) -> Result<UvTexture> {
    let (_, caches, _) = record_sample(identity, model, detector, gcfg, seed)?;
    let layers = model.cfg().single_layers();
    let (tex, _) = inject_sample(style, model, detector, gcfg, seed, &layers, &caches)?;
    Ok(tex)
}

/// Region-scoped edit on a disentanglement-trained model: the reference pass
/// is recorded, then the source is reconstructed with only the named
/// regions' group layers replaying reference features.
pub fn regional_edit<S: Scalar>(
    req: &EditRequest,
    model: &FlowModel<S>,
    detector: &Detector<S>,
    gcfg: &GuidanceConfig,
    seed: u64,
) -> Result<UvTexture> {
    req.validate()?;
    if !model.disentangled() {
        return Err(UvError::validation(
            "regional edit",
            "model checkpoint is not disentanglement-trained",
        ));
    }
    let groups = GroupSpec::from_config(model.cfg())?;
    let mut layers: Vec<usize> = Vec::new();
    for r in &req.regions {
        layers.extend_from_slice(groups.layers_for(*r));
    }
    layers.sort_unstable();
    let (_, caches, _) = record_sample(&req.reference, model, detector, gcfg, seed)?;
    let (tex, _) = inject_sample(&req.source, model, detector, gcfg, seed, &layers, &caches)?;
    Ok(tex)
}

/// The blunt baseline regional edits are measured against: replay the
/// reference pass into every layer at once.
pub fn full_cache_fuse<S: Scalar>(
    source: &Portrait,
    reference: &Portrait,
    model: &FlowModel<S>,
    detector: &Detector<S>,
    gcfg: &GuidanceConfig,
    seed: u64,
) -> Result<UvTexture> {
    let (_, caches, _) = record_sample(reference, model, detector, gcfg, seed)?;
    let layers: Vec<usize> = (0..model.cfg().n_layers()).collect();
    let (tex, _) = inject_sample(source, model, detector, gcfg, seed, &layers, &caches)?;
    Ok(tex)
}

/// One sweep entry: the first k layers of the sweep order were scaled.
#[derive(Clone, Debug)]
pub struct AblationStep {
    pub k: usize,
    pub texture: Image,
    pub nose_l2: f64,
    pub eye_l2: f64,
    pub mouth_l2: f64,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub eps: f64,
    pub order: Vec<usize>,
    pub steps: Vec<AblationStep>,
}

impl AblationReport {
    /// Regions ordered by degradation onset: the first k where a region
    /// reaches a tenth of its peak deviation from the unablated output.
    /// Reported, never asserted; regions that never move sort last.
    pub fn onset_order(&self) -> Vec<(&'static str, usize)> {
        let series = [
            ("nose", self.steps.iter().map(|s| s.nose_l2).collect::<Vec<_>>()),
            ("eye", self.steps.iter().map(|s| s.eye_l2).collect::<Vec<_>>()),
            ("mouth", self.steps.iter().map(|s| s.mouth_l2).collect::<Vec<_>>()),
        ];
        let mut onsets: Vec<(&'static str, usize)> = series
            .iter()
            .map(|(name, vals)| {
                let peak = vals.iter().cloned().fold(0.0f64, f64::max);
                let onset = if peak > 0.0 {
                    vals.iter().position(|&v| v >= 0.1 * peak).unwrap()
                } else {
                    self.steps.len()
                };
                (*name, onset)
            })
            .collect();
        onsets.sort_by_key(|o| o.1);
        onsets
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,nose_l2,eye_l2,mouth_l2\n");
        for st in &self.steps {
            s.push_str(&format!("{},{},{},{}\n", st.k, st.nose_l2, st.eye_l2, st.mouth_l2));
        }
        s
    }
}

/// For k = 0..=len(order), sample with the attention outputs of the first k
/// layers in `order` scaled by eps, unguided, and measure per-region
/// deviation from the k = 0 output. k = 0 and eps = 1 reproduce plain
/// sampling exactly.
pub fn ablation_sweep<S: Scalar>(
    cond: &Portrait,
    model: &FlowModel<S>,
    gcfg: &GuidanceConfig,
    order: &[usize],
    eps: f64,
    seed: u64,
) -> Result<AblationReport> {
    check_resolution(model)?;
    let n_layers = model.cfg().n_layers();
    let (nose, eye, mouth) = (nose_mask(), eye_mask(), region_masks().mouth);
    let mut steps = Vec::with_capacity(order.len() + 1);
    let mut baseline: Option<Image> = None;
    for k in 0..=order.len() {
        let spec = InjectionSpec::scaled(n_layers, &order[..k], eps)?;
        let mut field = CondField::with_spec(model, cond, spec)?;
        let shape = [crate::flowdit::CHANNELS, CANVAS, CANVAS];
        let (x, _) = integrate(&mut field, None, &shape, gcfg, seed, 0)?;
        let texture = to_unit(&x);
        let base = baseline.get_or_insert_with(|| texture.clone());
        steps.push(AblationStep {
            k,
            nose_l2: masked_l2(&texture, base, &nose)?,
            eye_l2: masked_l2(&texture, base, &eye)?,
            mouth_l2: masked_l2(&texture, base, &mouth)?,
            texture,
        });
    }
    Ok(AblationReport { eps, order: order.to_vec(), steps })
}

fn to_unit<S: Scalar>(x: &ArrayD<S>) -> Image {
    let mut img = Image::zeros((3, x.shape()[1], x.shape()[2]));
    for (o, &v) in img.iter_mut().zip(x.iter()) {
        *o = ((Scalar::to_f64(v) as f32 + 1.0) / 2.0).clamp(0.0, 1.0);
    }
    img
}

/// Group-truncation training: delegates to the trainer with the truncation
/// branch enabled at probability `p` and marks the model disentangled.
pub fn disentangle_train<S: Scalar>(
    model: &mut FlowModel<S>,
    data: &[TrainSample<S>],
    tcfg: &TrainConfig,
    p: f64,
    on_step: impl FnMut(u64, f64),
) -> Result<Vec<f64>> {
    crate::flowdit::train(model, data, tcfg, Some(&DisentangleConfig { p }), on_step)
}

/// What a group decode reconstructs on held-out data: noise `texture` to
/// time t along the straight path, decode after `group_k` groups, map back
/// to [0, 1]. Group-1 decodes on a disentangled model should sit nearer the
/// base-skin target than the full texture in mouth and brow regions.
pub fn truncated_reconstruction<S: Scalar>(
    model: &FlowModel<S>,
    texture: &Image,
    portrait: &Portrait,
    t: f64,
    group_k: usize,
    seed: u64,
) -> Result<Image> {
    if !(0.0..=1.0).contains(&t) {
        return Err(UvError::validation("time", &format!("t {t} outside [0, 1]")));
    }
    let cond = model.prepare_cond(&portrait.pixels.mapv(|v| S::from_f64(v as f64)).into_dyn())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = texture.mapv(|v| S::from_f64(2.0 * v as f64 - 1.0)).into_dyn();
    let eps = ArrayD::from_shape_fn(x0.raw_dim(), |_| S::std_normal(&mut rng));
    let tt = S::from_f64(t);
    let one = S::from_f64(1.0);
    let mut x_t = x0.clone();
    x_t.zip_mut_with(&eps, |x, &e| *x = (one - tt) * *x + tt * e);
    let v = model.velocity_truncated(&x_t, t, &cond, group_k)?;
    let mut xhat = x_t;
    xhat.zip_mut_with(&v, |x, &vi| *x = *x - tt * vi);
    Ok(to_unit(&xhat))
}
