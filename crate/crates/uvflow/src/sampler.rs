//! Flow ODE sampling with optional landmark-energy guidance. Integration
//! walks t from 1 to 0 in equal Euler steps on a velocity field. Guidance
//! descends the alignment energy of the denoised estimate, nudging the state
//! before each step; the velocity is treated as constant within a step, so a
//! correction costs one detector backward pass and no extra model evaluation.
//! All randomness comes from the seed; outputs are bit-reproducible.

use crate::error::{Result, UvError};
use crate::flowdit::{FlowModel, InjectionSpec, CHANNELS};
use crate::landmarks::Detector;
use crate::tensor::Scalar;
use crate::toyfaces::{canonical_landmarks, Image, LandmarkSet, Portrait, UvTexture, CANVAS};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Euler schedule and guidance strength. The guidance window is a closed
/// t-interval; steps whose t falls outside it integrate plainly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Energy-descent step size; 0 disables guidance entirely.
    pub eta: f64,
    /// Euler step count over t in [0, 1].
    pub steps: usize,
    /// Guidance applies while guide_to_t <= t <= guide_from_t.
    pub guide_from_t: f64,
    pub guide_to_t: f64,
    /// Max gradient norm; larger gradients are rescaled onto this sphere.
    pub grad_clip: f64,
    /// Correction iterations per step; each re-predicts the velocity.
    pub inner_iters: usize,
    /// Evaluate the energy on the noisy state itself instead of the
    /// denoised estimate.
    pub noisy_energy: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            eta: 0.5,
            steps: 20,
            guide_from_t: 0.8,
            guide_to_t: 0.0,
            grad_clip: 1.0,
            inner_iters: 1,
            noisy_energy: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, why: String| Err(UvError::validation(what, &why));
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("eta", format!("must be finite and >= 0, got {}", self.eta));
        }
        if self.steps < 1 {
            return bad("steps", "must be >= 1".into());
        }
        let (hi, lo) = (self.guide_from_t, self.guide_to_t);
        if !(hi.is_finite() && lo.is_finite() && 1.0 >= hi && hi >= lo && lo >= 0.0) {
            return bad("guide interval", format!("need 1 >= from >= to >= 0, got [{lo}, {hi}]"));
        }
        if !(self.grad_clip > 0.0 && self.grad_clip.is_finite()) {
            return bad("grad_clip", format!("must be finite and > 0, got {}", self.grad_clip));
        }
        if self.inner_iters < 1 {
            return bad("inner_iters", "must be >= 1".into());
        }
        Ok(())
    }
}

/// One recorded guidance application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    pub energy: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Diagnostics from one sampling run: a row per guidance application with t
/// decreasing across rows, plus optional denoised snapshots in [0, 1].
#[derive(Clone, Debug, Default)]
pub struct SampleTrace {
    pub rows: Vec<TraceRow>,
    pub snapshots: Vec<(usize, Image)>,
}

impl SampleTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,t,energy,grad_norm\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.t, r.energy, r.grad_norm));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| UvError::io(path, e))
    }
}

/// Velocity sources the integrator can drive. `call` counts model
/// evaluations from 0 across the whole run, so recording and replaying
/// passes line up call for call.
pub trait VelocityField<S: Scalar> {
    fn velocity(&mut self, call: usize, x: &ArrayD<S>, t: f64) -> Result<ArrayD<S>>;
}

/// Scalar energies with gradients taken in the sampler's model space.
pub trait AlignmentEnergy<S: Scalar> {
    fn energy_grad(&self, x: &ArrayD<S>) -> Result<(f64, ArrayD<S>)>;
}

/// Denoised estimate under straight-line paths: with v close to x1 - x0 the
/// point x_t - t v sits near x0 for any t.
pub fn x0_estimate<S: Scalar>(x_t: &ArrayD<S>, v: &ArrayD<S>, t: f64) -> ArrayD<S> {
    let tt = S::from_f64(t);
    let mut out = x_t.clone();
    out.zip_mut_with(v, |x, &vi| *x = *x - tt * vi);
    out
}

/// One Euler update moving t downward: x - dt v.
pub fn euler_step<S: Scalar>(x_t: &ArrayD<S>, _t: f64, dt: f64, v: &ArrayD<S>) -> ArrayD<S> {
    let d = S::from_f64(dt);
    let mut out = x_t.clone();
    out.zip_mut_with(v, |x, &vi| *x = *x - d * vi);
    out
}

/// The seeded starting state x1; exposed so callers can reconstruct the
/// exact trajectory a given seed produces.
pub fn initial_noise<S: Scalar>(shape: &[usize], seed: u64) -> ArrayD<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| S::std_normal(&mut rng))
}

fn l2_norm<S: Scalar>(a: &ArrayD<S>) -> f64 {
    a.iter().map(|&v| Scalar::to_f64(v) * Scalar::to_f64(v)).sum::<f64>().sqrt()
}

fn all_finite<S: Scalar>(a: &ArrayD<S>) -> bool {
    a.iter().all(|&v| Scalar::to_f64(v).is_finite())
}

/// Maps model space [-1, 1] onto image space, clamped.
fn to_unit_image<S: Scalar>(x: &ArrayD<S>) -> Image {
    let mut img = Image::zeros((CHANNELS, x.shape()[1], x.shape()[2]));
    for (o, &v) in img.iter_mut().zip(x.iter()) {
        *o = ((Scalar::to_f64(v) as f32 + 1.0) / 2.0).clamp(0.0, 1.0);
    }
    img
}

/// Core integrator in model space. Per step: predict v (inner_iters times),
/// apply the clipped energy-descent update inside the guidance window, then
/// take the Euler step with the last v. Returns the final state, which after
/// the last step is the denoised estimate itself, plus the trace.
/// `snapshot_every` > 0 stores the denoised estimate of every n-th step.
pub fn integrate<S: Scalar, F: VelocityField<S>>(
    field: &mut F,
    energy: Option<&dyn AlignmentEnergy<S>>,
    shape: &[usize],
    gcfg: &GuidanceConfig,
    seed: u64,
    snapshot_every: usize,
) -> Result<(ArrayD<S>, SampleTrace)> {
    gcfg.validate()?;
    let mut x = initial_noise::<S>(shape, seed);
    let dt = 1.0 / gcfg.steps as f64;
    let mut trace = SampleTrace::default();
    let mut call = 0usize;
    for i in 0..gcfg.steps {
        let t = 1.0 - i as f64 * dt;
        let mut v = ArrayD::zeros(IxDyn(shape));
        for _ in 0..gcfg.inner_iters {
            v = field.velocity(call, &x, t)?;
            call += 1;
            let guided = gcfg.eta > 0.0 && t <= gcfg.guide_from_t && t >= gcfg.guide_to_t;
            if let (true, Some(en)) = (guided, energy) {
                let probe = if gcfg.noisy_energy { x.clone() } else { x0_estimate(&x, &v, t) };
                let (e, mut g) = en.energy_grad(&probe)?;
                if !e.is_finite() || !all_finite(&g) {
                    return Err(UvError::Runtime(format!(
                        "non-finite guidance energy or gradient at step {i}"
                    )));
                }
                let norm = l2_norm(&g);
                if norm > gcfg.grad_clip {
                    let s = S::from_f64(gcfg.grad_clip / norm);
                    g.mapv_inplace(|gi| gi * s);
                }
                let eta = S::from_f64(gcfg.eta);
                x.zip_mut_with(&g, |xi, &gi| *xi = *xi - eta * gi);
                trace.rows.push(TraceRow { step: i, t, energy: e, grad_norm: norm });
            }
        }
        if snapshot_every > 0 && i % snapshot_every == 0 {
            trace.snapshots.push((i, to_unit_image(&x0_estimate(&x, &v, t))));
        }
        x = euler_step(&x, t, dt, &v);
    }
    if !all_finite(&x) {
        return Err(UvError::Runtime("non-finite sample state after integration".into()));
    }
    Ok((x, trace))
}

/// A flow model bound to one prepared condition.
pub struct CondField<'a, S: Scalar> {
    model: &'a FlowModel<S>,
    cond: crate::tensor::Tensor<S>,
    spec: InjectionSpec<S>,
}

impl<'a, S: Scalar> CondField<'a, S> {
    pub fn new(model: &'a FlowModel<S>, portrait: &Portrait) -> Result<Self> {
        Self::with_spec(model, portrait, InjectionSpec::passthrough(model.cfg().n_layers()))
    }

    /// Same field with a fixed injection applied on every evaluation.
    pub fn with_spec(
        model: &'a FlowModel<S>,
        portrait: &Portrait,
        spec: InjectionSpec<S>,
    ) -> Result<Self> {
        let cond = model.prepare_cond(&portrait.pixels.mapv(|v| S::from_f64(v as f64)).into_dyn())?;
        Ok(CondField { model, cond, spec })
    }
}

impl<S: Scalar> VelocityField<S> for CondField<'_, S> {
    fn velocity(&mut self, _call: usize, x: &ArrayD<S>, t: f64) -> Result<ArrayD<S>> {
        self.model.velocity(x, t, &self.cond, &self.spec, None)
    }
}

/// Landmark alignment energy in model space: the detector reads the state
/// mapped to [0, 1] and the 1/2 slope of that map scales the gradient back.
pub struct LandmarkEnergy<'a, S: Scalar> {
    detector: &'a Detector<S>,
    target: LandmarkSet,
}

impl<'a, S: Scalar> LandmarkEnergy<'a, S> {
    pub fn new(detector: &'a Detector<S>, target: LandmarkSet) -> Self {
        LandmarkEnergy { detector, target }
    }
}

impl<S: Scalar> AlignmentEnergy<S> for LandmarkEnergy<'_, S> {
    fn energy_grad(&self, x: &ArrayD<S>) -> Result<(f64, ArrayD<S>)> {
        let half = S::from_f64(0.5);
        let img = x.mapv(|v| (v + S::from_f64(1.0)) * half);
        let (e, mut g) = self.detector.energy_grad(&img, &self.target);
        g.mapv_inplace(|gi| gi * half);
        Ok((e, g))
    }
}

fn model_state_shape<S: Scalar>(model: &FlowModel<S>) -> [usize; 3] {
    [CHANNELS, model.cfg().image_size, model.cfg().image_size]
}

/// Guided sampling over any velocity source at detector resolution: the
/// canonical layout is the guidance target, the detector reads the final
/// landmarks. The footing for style transfer and regional edits.
pub fn guided_sample_with<S: Scalar, F: VelocityField<S>>(
    field: &mut F,
    detector: &Detector<S>,
    gcfg: &GuidanceConfig,
    seed: u64,
) -> Result<(UvTexture, SampleTrace)> {
    let energy = LandmarkEnergy::new(detector, canonical_landmarks());
    let (x, trace) =
        integrate(field, Some(&energy), &[CHANNELS, CANVAS, CANVAS], gcfg, seed, 0)?;
    let pixels = to_unit_image(&x);
    let landmarks = detector.detect(&crate::landmarks::image_to_array::<S>(&pixels));
    Ok((UvTexture { pixels, landmarks }, trace))
}

/// Conditional sampling steered toward the canonical landmark layout.
/// Returns the texture in [0, 1] with the detector's read of its landmarks,
/// and the guidance trace.
pub fn guided_sample<S: Scalar>(
    cond: &Portrait,
    model: &FlowModel<S>,
    detector: &Detector<S>,
    gcfg: &GuidanceConfig,
    seed: u64,
) -> Result<(UvTexture, SampleTrace)> {
    check_resolution(model)?;
    let mut field = CondField::new(model, cond)?;
    guided_sample_with(&mut field, detector, gcfg, seed)
}

/// Errors unless the model emits detector-sized images.
pub fn check_resolution<S: Scalar>(model: &FlowModel<S>) -> Result<()> {
    if model.cfg().image_size != CANVAS {
        return Err(UvError::validation(
            "model resolution",
            &format!("detector expects {CANVAS}, model produces {}", model.cfg().image_size),
        ));
    }
    Ok(())
}

/// Plain conditional sampling. The recorded landmarks are the canonical
/// anchor, not a measurement; no detector is involved.
pub fn unguided_sample<S: Scalar>(
    cond: &Portrait,
    model: &FlowModel<S>,
    steps: usize,
    seed: u64,
) -> Result<UvTexture> {
    let gcfg = GuidanceConfig { eta: 0.0, steps, ..GuidanceConfig::default() };
    let mut field = CondField::new(model, cond)?;
    let (x, _) = integrate::<S, _>(&mut field, None, &model_state_shape(model), &gcfg, seed, 0)?;
    Ok(UvTexture { pixels: to_unit_image(&x), landmarks: canonical_landmarks() })
}
