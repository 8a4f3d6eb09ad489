//! Differentiable landmark detection on textures. Three conv stages reduce a
//! [3, 64, 64] image to K heatmaps on a 16x16 grid; a temperature softmax and
//! soft-argmax over cell centers give pixel coordinates, so detected
//! positions are differentiable in the input image. The alignment energy is
//! the summed squared deviation from reference points, and `energy_grad`
//! returns its exact input gradient from the same graph.

use crate::ckpt::{Checkpoint, MAGIC_LANDMARKS};
use crate::error::{Result, UvError};
use crate::nn::{cosine_lr, init_normal, Adam, GradBuf, ParamId, ParamStore};
use crate::tensor::{gather_table_conv2d, no_grad, Scalar, Tensor};
use crate::toyfaces::{Image, LandmarkSet, CANVAS, N_LANDMARKS};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Heatmap side; each cell covers a STRIDE x STRIDE pixel block.
pub const HEAT: usize = 16;
pub const STRIDE: usize = CANVAS / HEAT;
const CELLS: usize = HEAT * HEAT;

/// Gradient key for the input image leaf; parameter ids stay well below.
const INPUT_KEY: u64 = u64::MAX;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Channel widths of the three conv stages.
    pub channels: [usize; 3],
    /// Softmax temperature; smaller sharpens the heatmap peak.
    pub tau: f64,
    pub init_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { channels: [32, 64, 64], tau: 0.1, init_seed: 0 }
    }
}

struct Conv {
    w: ParamId,
    b: ParamId,
    table: Arc<Vec<u32>>,
    cols_shape: [usize; 2],
}

impl Conv {
    fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        side: usize,
        k: usize,
        stride: usize,
    ) -> (Self, usize) {
        let (table, oh, ow) = gather_table_conv2d(c_in, side, side, k, stride, 1);
        let fan_in = c_in * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = ps.register(&format!("{name}.w"), init_normal(rng, &[c_out, fan_in], std));
        let b = ps.register(&format!("{name}.b"), crate::nn::init_zeros(&[c_out]));
        (Conv { w, b, table, cols_shape: [fan_in, oh * ow] }, oh)
    }

    fn fwd<S: Scalar>(&self, ps: &ParamStore<S>, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let (w, b) = if train {
            (ps.leaf(self.w), ps.leaf(self.b))
        } else {
            (ps.frozen(self.w), ps.frozen(self.b))
        };
        let cols = x.gather(Arc::clone(&self.table), &self.cols_shape);
        w.matmul(&cols).add_colvec(&b).silu()
    }
}

pub struct Detector<S: Scalar> {
    pub ps: ParamStore<S>,
    pub cfg: DetectorConfig,
    conv1: Conv,
    conv2: Conv,
    conv3: Conv,
    head_w: ParamId,
    head_b: ParamId,
    /// [CELLS, 2] cell-center coordinates in texture pixels.
    coords: Arc<ArrayD<S>>,
}

impl<S: Scalar> Detector<S> {
    pub fn new(cfg: DetectorConfig) -> Self {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let [c1, c2, c3] = cfg.channels;
        let (conv1, s1) = Conv::new(&mut ps, &mut rng, "conv1", 3, c1, CANVAS, 3, 2);
        let (conv2, s2) = Conv::new(&mut ps, &mut rng, "conv2", c1, c2, s1, 3, 2);
        let (conv3, s3) = Conv::new(&mut ps, &mut rng, "conv3", c2, c3, s2, 3, 1);
        assert_eq!(s3, HEAT, "conv stack must land on the heatmap grid");
        let std = (1.0 / c3 as f64).sqrt();
        let head_w = ps.register("head.w", init_normal(&mut rng, &[N_LANDMARKS, c3], std));
        let head_b = ps.register("head.b", crate::nn::init_zeros(&[N_LANDMARKS]));

        let mut coords = ArrayD::zeros(IxDyn(&[CELLS, 2]));
        for cy in 0..HEAT {
            for cx in 0..HEAT {
                coords[[cy * HEAT + cx, 0]] = S::from_f64((cx as f64 + 0.5) * STRIDE as f64);
                coords[[cy * HEAT + cx, 1]] = S::from_f64((cy as f64 + 0.5) * STRIDE as f64);
            }
        }
        Detector { ps, cfg, conv1, conv2, conv3, head_w, head_b, coords: Arc::new(coords) }
    }

    /// Smooth squash keeping out-of-range sampling iterates bounded; values
    /// already in [0, 1] pass through with mild compression.
    fn soft_clamp(x: &Tensor<S>) -> Tensor<S> {
        x.add_scalar(S::from_f64(-0.5))
            .scale(S::from_f64(2.0))
            .tanh_act()
            .scale(S::from_f64(0.5))
            .add_scalar(S::from_f64(0.5))
    }

    /// Raw heatmap logits [K, CELLS].
    pub fn logits(&self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let x = Self::soft_clamp(x);
        let h = self.conv1.fwd(&self.ps, &x, train);
        let h = self.conv2.fwd(&self.ps, &h, train);
        let h = self.conv3.fwd(&self.ps, &h, train);
        let (w, b) = if train {
            (self.ps.leaf(self.head_w), self.ps.leaf(self.head_b))
        } else {
            (self.ps.frozen(self.head_w), self.ps.frozen(self.head_b))
        };
        w.matmul(&h).add_colvec(&b)
    }

    /// Soft-argmax positions [K, 2] in texture pixels.
    pub fn positions(&self, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let probs = self.logits(x, train).scale(S::from_f64(1.0 / self.cfg.tau)).softmax_rows();
        probs.matmul(&Tensor::constant_shared(Arc::clone(&self.coords)))
    }

    pub fn detect(&self, img: &ArrayD<S>) -> LandmarkSet {
        no_grad(|| {
            let pos = self.positions(&Tensor::constant(img.clone()), false);
            let mut out = [[0.0f32; 2]; N_LANDMARKS];
            for k in 0..N_LANDMARKS {
                out[k][0] = pos.data()[[k, 0]].to_f64() as f32;
                out[k][1] = pos.data()[[k, 1]].to_f64() as f32;
            }
            LandmarkSet(out)
        })
    }

    /// Alignment energy of image `x` against `target` and its gradient in x.
    pub fn energy_grad(&self, x: &ArrayD<S>, target: &LandmarkSet) -> (f64, ArrayD<S>) {
        let leaf = Tensor::leaf(Arc::new(x.clone()), INPUT_KEY);
        let pos = self.positions(&leaf, false);
        let tgt = Tensor::constant(landmarks_to_array::<S>(target));
        let d = pos.sub(&tgt);
        let e = d.mul(&d).sum_all();
        let energy = e.value().to_f64();
        let mut grads = e.backward();
        let g = grads.take(INPUT_KEY).expect("input leaf gradient");
        (energy, g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "landmark-detector",
            "config": self.cfg,
            "layout_version": crate::toyfaces::layout::VERSION,
            "param_count": self.ps.n_scalars(),
        });
        let mut ck = Checkpoint::new(MAGIC_LANDMARKS, meta.to_string());
        ck.push_params(&self.ps);
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path, MAGIC_LANDMARKS)?;
        let meta = ck.meta_value()?;
        let cfg: DetectorConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| UvError::Checkpoint { path: path.into(), why: format!("bad config: {e}") })?;
        let mut det = Detector::new(cfg);
        ck.load_params(&mut det.ps)?;
        Ok(det)
    }
}

/// Summed squared coordinate deviation; the quantity whose input gradient
/// steers sampling.
pub fn energy(pred: &LandmarkSet, target: &LandmarkSet) -> f64 {
    let mut e = 0.0f64;
    for k in 0..N_LANDMARKS {
        for c in 0..2 {
            let d = pred.0[k][c] as f64 - target.0[k][c] as f64;
            e += d * d;
        }
    }
    e
}

/// Mean Euclidean distance per landmark, the evaluation metric. Distinct from
/// `energy`, which sums squared coordinates.
pub fn landmark_l2(pred: &LandmarkSet, target: &LandmarkSet) -> f64 {
    let mut acc = 0.0f64;
    for k in 0..N_LANDMARKS {
        let dx = pred.0[k][0] as f64 - target.0[k][0] as f64;
        let dy = pred.0[k][1] as f64 - target.0[k][1] as f64;
        acc += (dx * dx + dy * dy).sqrt();
    }
    acc / N_LANDMARKS as f64
}

pub fn landmarks_to_array<S: Scalar>(l: &LandmarkSet) -> ArrayD<S> {
    let mut a = ArrayD::zeros(IxDyn(&[N_LANDMARKS, 2]));
    for k in 0..N_LANDMARKS {
        a[[k, 0]] = S::from_f64(l.0[k][0] as f64);
        a[[k, 1]] = S::from_f64(l.0[k][1] as f64);
    }
    a
}

pub fn image_to_array<S: Scalar>(img: &Image) -> ArrayD<S> {
    img.mapv(|v| S::from_f64(v as f64)).into_dyn()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub seed: u64,
    /// Width of the Gaussian heatmap targets, in texture pixels.
    pub sigma_px: f64,
    pub grad_clip: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            steps: 600,
            batch: 16,
            lr: 1e-3,
            warmup: 30,
            seed: 0,
            sigma_px: 1.5,
            grad_clip: 5.0,
        }
    }
}

/// Normalized Gaussian heatmap targets [K, CELLS] centered on the landmarks.
fn heatmap_targets<S: Scalar>(l: &LandmarkSet, sigma_px: f64) -> ArrayD<S> {
    let mut t = ArrayD::zeros(IxDyn(&[N_LANDMARKS, CELLS]));
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    for k in 0..N_LANDMARKS {
        let (lx, ly) = (l.0[k][0] as f64, l.0[k][1] as f64);
        let mut sum = 0.0f64;
        let mut row = [0.0f64; CELLS];
        for cy in 0..HEAT {
            for cx in 0..HEAT {
                let dx = (cx as f64 + 0.5) * STRIDE as f64 - lx;
                let dy = (cy as f64 + 0.5) * STRIDE as f64 - ly;
                let v = (-(dx * dx + dy * dy) * inv).exp();
                row[cy * HEAT + cx] = v;
                sum += v;
            }
        }
        for (i, &v) in row.iter().enumerate() {
            t[[k, i]] = S::from_f64(v / sum);
        }
    }
    t
}

/// One training step's loss: coordinate regression plus per-landmark
/// cross-entropy of the heatmap against its Gaussian target.
fn sample_loss<S: Scalar>(
    det: &Detector<S>,
    img: &ArrayD<S>,
    l: &LandmarkSet,
    sigma_px: f64,
) -> Tensor<S> {
    let x = Tensor::constant(img.clone());
    let logits = det.logits(&x, true);
    let probs = logits.scale(S::from_f64(1.0 / det.cfg.tau)).softmax_rows();
    let pos = probs.matmul(&Tensor::constant_shared(Arc::clone(&det.coords)));
    let coord = pos.mse(&Tensor::constant(landmarks_to_array::<S>(l)));
    let logp = logits.scale(S::from_f64(1.0 / det.cfg.tau)).log_softmax_rows();
    let tgt = Tensor::constant(heatmap_targets::<S>(l, sigma_px));
    let ce = tgt.mul(&logp).sum_all().scale(S::from_f64(-1.0 / N_LANDMARKS as f64));
    coord.add(&ce)
}

/// Adam training on (texture, landmarks) pairs; returns per-step losses.
pub fn train_detector<S: Scalar>(
    det: &mut Detector<S>,
    samples: &[(ArrayD<S>, LandmarkSet)],
    cfg: &DetectorTrainConfig,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(UvError::validation("samples", "training set is empty"));
    }
    if cfg.batch == 0 || cfg.steps == 0 {
        return Err(UvError::validation("train config", "batch and steps must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&det.ps);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut total: Option<Tensor<S>> = None;
        for _ in 0..cfg.batch {
            let (img, l) = &samples[rng.random_range(0..samples.len())];
            let loss = sample_loss(det, img, l, cfg.sigma_px);
            total = Some(match total {
                Some(t) => t.add(&loss),
                None => loss,
            });
        }
        let total = total.unwrap().scale(S::from_f64(1.0 / cfg.batch as f64));
        losses.push(total.value().to_f64());
        let mut gb = GradBuf::new(det.ps.len());
        gb.absorb(total.backward(), det.ps.len());
        gb.clip_global_norm(cfg.grad_clip);
        opt.apply(&mut det.ps, &gb, cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup));
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyfaces::{canonical_landmarks, render_texture, sample_params, FaceParams, Style};

    #[test]
    fn parameter_count_is_pinned() {
        let det = Detector::<f32>::new(DetectorConfig::default());
        assert_eq!(det.ps.n_scalars(), 57_100);
    }

    #[test]
    fn uniform_input_soft_argmax_hits_exact_center() {
        // Constant input + replicate padding keep every stage spatially
        // constant, so heatmaps are uniform and soft-argmax averages all
        // cell centers.
        let det = Detector::<f64>::new(DetectorConfig::default());
        for fill in [0.0, 0.37, 1.0] {
            let img = ArrayD::from_elem(IxDyn(&[3, CANVAS, CANVAS]), fill);
            let l = det.detect(&img);
            for k in 0..N_LANDMARKS {
                assert!((l.0[k][0] - 32.0).abs() < 1e-6, "x {:?}", l.0[k]);
                assert!((l.0[k][1] - 32.0).abs() < 1e-6, "y {:?}", l.0[k]);
            }
        }
    }

    #[test]
    fn far_pixels_cannot_reach_a_cell_logit() {
        // Three stages of 3x3 convs (strides 2, 2, 1) see at most 15 input
        // pixels around a cell; opposite corners are far outside that.
        let det = Detector::<f32>::new(DetectorConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = ArrayD::from_shape_fn(IxDyn(&[3, CANVAS, CANVAS]), |_| rng.random::<f32>());
        let mut bumped = base.clone();
        bumped[[0, 0, 0]] = 9.0;
        let a = no_grad(|| det.logits(&Tensor::constant(base), false).data().clone());
        let b = no_grad(|| det.logits(&Tensor::constant(bumped), false).data().clone());
        let far = HEAT - 1;
        for k in 0..N_LANDMARKS {
            assert_eq!(a[[k, far * HEAT + far]], b[[k, far * HEAT + far]]);
        }
        assert!(a[[0, 0]] != b[[0, 0]], "bumped pixel must reach its own cell");
    }

    #[test]
    fn energy_is_zero_iff_equal() {
        let a = canonical_landmarks();
        assert_eq!(energy(&a, &a), 0.0);
        let mut b = a;
        b.0[3][1] += 2.0;
        assert_eq!(energy(&a, &b), 4.0);
        assert!(energy(&b, &a) > 0.0);
    }

    #[test]
    fn landmark_l2_is_mean_euclidean() {
        let a = canonical_landmarks();
        let mut b = a;
        b.0[0][0] += 3.0;
        b.0[0][1] += 4.0;
        assert!((landmark_l2(&a, &b) - 5.0 / 12.0).abs() < 1e-9);
    }

    #[test]
    fn energy_grad_matches_directional_finite_difference() {
        let det = Detector::<f64>::new(DetectorConfig { init_seed: 5, ..Default::default() });
        let target = canonical_landmarks();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = sample_params(&mut rng, Style::Flat);
        let img = image_to_array::<f64>(&render_texture(&p).unwrap().pixels);
        let (e0, g) = det.energy_grad(&img, &target);
        assert!(e0 >= 0.0);

        let dir = ArrayD::from_shape_fn(IxDyn(&[3, CANVAS, CANVAS]), |_| {
            rng.random::<f64>() - 0.5
        });
        let h = 1e-6;
        let ep = det.energy_grad(&(&img + &(&dir * h)), &target).0;
        let em = det.energy_grad(&(&img - &(&dir * h)), &target).0;
        let fd = (ep - em) / (2.0 * h);
        let dot: f64 = g.iter().zip(dir.iter()).map(|(a, b)| a * b).sum();
        let rel = (fd - dot).abs() / fd.abs().max(dot.abs()).max(1e-12);
        assert!(rel < 1e-6, "fd={fd} dot={dot} rel={rel}");
    }

    #[test]
    fn training_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<(ArrayD<f32>, LandmarkSet)> = (0..24)
            .map(|i| {
                let p = sample_params(&mut rng, Style::ALL[i % 4]);
                let t = render_texture(&p).unwrap();
                (image_to_array::<f32>(&t.pixels), t.landmarks)
            })
            .collect();
        let mut det = Detector::<f32>::new(DetectorConfig::default());
        let cfg = DetectorTrainConfig { steps: 30, batch: 8, warmup: 5, ..Default::default() };
        let losses = train_detector(&mut det, &samples, &cfg).unwrap();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head * 0.6, "head={head} tail={tail}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let det = Detector::<f32>::new(DetectorConfig { init_seed: 9, ..Default::default() });
        let p = FaceParams::default();
        let img = image_to_array::<f32>(&render_texture(&p).unwrap().pixels);
        let before = det.detect(&img);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ckpt");
        det.save(&path).unwrap();
        let loaded = Detector::<f32>::load(&path).unwrap();
        let after = loaded.detect(&img);
        assert_eq!(before, after);
        let other = dir.path().join("det2.ckpt");
        loaded.save(&other).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&other).unwrap());
    }
}
