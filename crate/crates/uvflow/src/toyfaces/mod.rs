//! Procedural face-texture domain: UV textures with features at canonical
//! positions plus small parametric offsets, portraits derived by a fixed
//! piecewise-affine warp with style shading and occluders, layered partial
//! targets, and deterministic dataset generation.
//!
//! Everything here is pixel-exact by construction: features are rasterized
//! without anti-aliasing, the warp is a precompiled integer lookup table, and
//! all randomness comes from per-sample counter-split ChaCha streams.

mod dataset;
mod render;
mod warp;

pub use dataset::{
    dataset_gen, load_dataset, load_png, save_png, style_counts, DatasetConfig, LoadedSample,
    Manifest, ManifestEntry,
};
pub use render::{render_portrait, render_texture, style_texture_pixel_reference};
pub use warp::{unwarp_portrait, warp_table, WarpTable};

use crate::error::{Result, UvError};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

pub const CANVAS: usize = 64;
pub const N_LANDMARKS: usize = 12;

/// Channels-first float image in [0, 1]: [3, 64, 64].
pub type Image = Array3<f32>;

pub fn blank(fill: [f32; 3]) -> Image {
    let mut img = Array3::zeros((3, CANVAS, CANVAS));
    for c in 0..3 {
        img.index_axis_mut(ndarray::Axis(0), c).fill(fill[c]);
    }
    img
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Flat,
    Painterly,
    Pixel,
    Sketch,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Flat, Style::Painterly, Style::Pixel, Style::Sketch];

    pub fn name(self) -> &'static str {
        match self {
            Style::Flat => "flat",
            Style::Painterly => "painterly",
            Style::Pixel => "pixel",
            Style::Sketch => "sketch",
        }
    }

    pub fn parse(s: &str) -> Result<Style> {
        match s {
            "flat" => Ok(Style::Flat),
            "painterly" => Ok(Style::Painterly),
            "pixel" => Ok(Style::Pixel),
            "sketch" => Ok(Style::Sketch),
            other => Err(UvError::validation("style", format!("unknown style {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct BrowParams {
    /// Vertical offset from the canonical brow line, in pixels.
    pub y_offset: i32,
    pub thickness: u32,
    /// Upward bend of the brow middle, in pixels; endpoints stay pinned.
    pub arch: f32,
    pub color: [f32; 3],
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MouthParams {
    /// Corner-to-corner width in pixels; even so corners sit symmetrically.
    pub width: u32,
    /// Upward bend of the lip middle, in pixels; corners stay pinned.
    pub curve: f32,
    pub color: [f32; 3],
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct EyeParams {
    /// Horizontal shift of each eye away from the nose, in pixels.
    pub spacing: i32,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FaceParams {
    pub skin: [f32; 3],
    pub brow: BrowParams,
    pub mouth: MouthParams,
    pub eyes: EyeParams,
    /// Nose shading strength in [0, 1].
    pub nose_shading: f32,
    pub style: Style,
    /// Drives style pattern phases; rendering is a pure function of params.
    pub seed: u64,
}

impl Default for FaceParams {
    fn default() -> Self {
        FaceParams {
            skin: [0.82, 0.67, 0.55],
            brow: BrowParams { y_offset: 0, thickness: 2, arch: 1.0, color: [0.25, 0.18, 0.12] },
            mouth: MouthParams { width: 20, curve: 1.0, color: [0.72, 0.30, 0.32] },
            eyes: EyeParams { spacing: 0, color: [0.10, 0.10, 0.12] },
            nose_shading: 0.5,
            style: Style::Flat,
            seed: 0,
        }
    }
}

/// Canonical feature layout, version 1. All coordinates are texture pixels.
pub mod layout {
    pub const VERSION: u32 = 1;
    pub const BROW_Y: i32 = 18;
    pub const BROW_L: (i32, i32) = (13, 26);
    pub const BROW_R: (i32, i32) = (38, 51);
    pub const EYE_Y: i32 = 29;
    pub const EYE_L: (i32, i32) = (15, 25);
    pub const EYE_R: (i32, i32) = (39, 49);
    pub const MOUTH_CX: i32 = 32;
    pub const MOUTH_Y: i32 = 48;
    pub const NOSE_TIP: (i32, i32) = (32, 40);
    pub const CHIN: (i32, i32) = (32, 57);
}

/// K = 12 named points, (x, y) in pixels.
/// Order: brow L outer/inner, brow R inner/outer, eye L outer/inner,
/// eye R inner/outer, mouth L/R corner, nose tip, chin anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet(pub [[f32; 2]; N_LANDMARKS]);

impl LandmarkSet {
    pub fn iter(&self) -> impl Iterator<Item = &[f32; 2]> {
        self.0.iter()
    }
}

/// Fixed reference layout every valid texture approximates; the alignment
/// energy measures deviation from these points.
pub fn canonical_landmarks() -> LandmarkSet {
    use layout::*;
    LandmarkSet([
        [BROW_L.0 as f32, BROW_Y as f32],
        [BROW_L.1 as f32, BROW_Y as f32],
        [BROW_R.0 as f32, BROW_Y as f32],
        [BROW_R.1 as f32, BROW_Y as f32],
        [EYE_L.0 as f32, EYE_Y as f32],
        [EYE_L.1 as f32, EYE_Y as f32],
        [EYE_R.0 as f32, EYE_Y as f32],
        [EYE_R.1 as f32, EYE_Y as f32],
        [(MOUTH_CX - 10) as f32, MOUTH_Y as f32],
        [(MOUTH_CX + 10) as f32, MOUTH_Y as f32],
        [NOSE_TIP.0 as f32, NOSE_TIP.1 as f32],
        [CHIN.0 as f32, CHIN.1 as f32],
    ])
}

/// Where this parameter set actually places each landmark: canonical position
/// plus the declared offsets, exactly.
pub fn landmark_positions(p: &FaceParams) -> LandmarkSet {
    use layout::*;
    let mut l = canonical_landmarks();
    let by = (BROW_Y + p.brow.y_offset) as f32;
    for i in 0..4 {
        l.0[i][1] = by;
    }
    let s = p.eyes.spacing as f32;
    l.0[4][0] -= s;
    l.0[5][0] -= s;
    l.0[6][0] += s;
    l.0[7][0] += s;
    let hw = (p.mouth.width / 2) as f32;
    l.0[8][0] = MOUTH_CX as f32 - hw;
    l.0[9][0] = MOUTH_CX as f32 + hw;
    l
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccluderShape {
    Rect,
    Bar,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Occluder {
    pub shape: OccluderShape,
    /// (x0, y0, x1, y1), half-open, canvas coordinates.
    pub bbox: (u32, u32, u32, u32),
    pub color: [f32; 3],
}

#[derive(Clone, Debug)]
pub struct UvTexture {
    pub pixels: Image,
    /// Ground-truth landmark placement for these params.
    pub landmarks: LandmarkSet,
}

#[derive(Clone, Debug)]
pub struct Portrait {
    pub pixels: Image,
    pub pose_shift: (i32, i32),
    pub occluders: Vec<Occluder>,
}

/// Partial supervision targets: base face, mouth added, brows added.
#[derive(Clone, Debug)]
pub struct LayeredTargets {
    pub t_skin: Image,
    pub t_skin_mouth: Image,
    pub t_full: Image,
}

/// Fixed semantic regions in texture space. Mouth and brow are generous boxes
/// containing the feature for every valid parameter set; skin is the
/// complement of all feature boxes. The union covers the canvas.
pub struct RegionMasks {
    pub skin: Array2<bool>,
    pub mouth: Array2<bool>,
    pub brow: Array2<bool>,
}

fn in_any(x: usize, y: usize, boxes: &[(usize, usize, usize, usize)]) -> bool {
    boxes.iter().any(|&(x0, y0, x1, y1)| x >= x0 && x < x1 && y >= y0 && y < y1)
}

const BROW_BOXES: [(usize, usize, usize, usize); 2] = [(10, 10, 29, 26), (35, 10, 54, 26)];
const MOUTH_BOX: [(usize, usize, usize, usize); 1] = [(18, 42, 46, 56)];
const EYE_BOXES: [(usize, usize, usize, usize); 2] = [(12, 25, 28, 34), (36, 25, 52, 34)];
const NOSE_BOX: [(usize, usize, usize, usize); 1] = [(28, 28, 37, 42)];

pub fn region_masks() -> RegionMasks {
    let mut skin = Array2::from_elem((CANVAS, CANVAS), false);
    let mut mouth = skin.clone();
    let mut brow = skin.clone();
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let b = in_any(x, y, &BROW_BOXES);
            let m = in_any(x, y, &MOUTH_BOX);
            let e = in_any(x, y, &EYE_BOXES);
            let n = in_any(x, y, &NOSE_BOX);
            brow[[y, x]] = b;
            mouth[[y, x]] = m;
            skin[[y, x]] = !(b || m || e || n);
        }
    }
    RegionMasks { skin, mouth, brow }
}

/// Nose feature box, for degradation reports.
pub fn nose_mask() -> Array2<bool> {
    Array2::from_shape_fn((CANVAS, CANVAS), |(y, x)| in_any(x, y, &NOSE_BOX))
}

/// Both eye feature boxes, for degradation reports.
pub fn eye_mask() -> Array2<bool> {
    Array2::from_shape_fn((CANVAS, CANVAS), |(y, x)| in_any(x, y, &EYE_BOXES))
}

/// Inter-lid bands where the closed-eye lash lines live; bright means the
/// model failed to close the eye.
pub fn eye_interior_mask() -> Array2<bool> {
    let mut m = Array2::from_elem((CANVAS, CANVAS), false);
    for &(x0, x1) in &[(layout::EYE_L.0 + 2, layout::EYE_L.1 - 2), (layout::EYE_R.0 + 2, layout::EYE_R.1 - 2)] {
        for y in 28..32 {
            for x in x0..=x1 {
                m[[y as usize, x as usize]] = true;
            }
        }
    }
    m
}

pub fn validate_params(p: &FaceParams) -> Result<()> {
    let bad = |what: &str, why: String| Err(UvError::validation(what, why));
    for (i, &v) in p.skin.iter().enumerate() {
        if !(0.25..=0.95).contains(&v) {
            return bad("skin", format!("channel {i} = {v}, want [0.25, 0.95]"));
        }
    }
    if !(-4..=4).contains(&p.brow.y_offset) {
        return bad("brow.y_offset", format!("{} outside [-4, 4]", p.brow.y_offset));
    }
    if !(2..=3).contains(&p.brow.thickness) {
        return bad("brow.thickness", format!("{} outside [2, 3]", p.brow.thickness));
    }
    if !(0.0..=3.0).contains(&p.brow.arch) {
        return bad("brow.arch", format!("{} outside [0, 3]", p.brow.arch));
    }
    if p.brow.color.iter().any(|&v| !(0.0..=0.45).contains(&v)) {
        return bad("brow.color", format!("{:?} outside [0, 0.45]", p.brow.color));
    }
    if !(12..=24).contains(&p.mouth.width) || p.mouth.width % 2 != 0 {
        return bad("mouth.width", format!("{} not an even number in [12, 24]", p.mouth.width));
    }
    if !(-3.0..=3.0).contains(&p.mouth.curve) {
        return bad("mouth.curve", format!("{} outside [-3, 3]", p.mouth.curve));
    }
    if !(0.30..=0.90).contains(&p.mouth.color[0])
        || p.mouth.color[1..].iter().any(|&v| !(0.0..=0.60).contains(&v))
    {
        return bad("mouth.color", format!("{:?} outside lip gamut", p.mouth.color));
    }
    if !(-2..=2).contains(&p.eyes.spacing) {
        return bad("eyes.spacing", format!("{} outside [-2, 2]", p.eyes.spacing));
    }
    if p.eyes.color.iter().any(|&v| !(0.0..=0.30).contains(&v)) {
        return bad("eyes.color", format!("{:?} outside [0, 0.3]", p.eyes.color));
    }
    if !(0.0..=1.0).contains(&p.nose_shading) {
        return bad("nose_shading", format!("{} outside [0, 1]", p.nose_shading));
    }
    Ok(())
}

/// Draws a parameter set uniformly from the valid ranges. The style is an
/// input so dataset generation can enforce exact style counts.
pub fn sample_params<R: rand::Rng + ?Sized>(rng: &mut R, style: Style) -> FaceParams {
    let u = |rng: &mut R, lo: f32, hi: f32| lo + (hi - lo) * rng.random::<f32>();
    FaceParams {
        skin: [u(rng, 0.55, 0.92), u(rng, 0.45, 0.80), u(rng, 0.35, 0.70)],
        brow: BrowParams {
            y_offset: rng.random_range(-3..=3),
            thickness: rng.random_range(2..=3),
            arch: u(rng, 0.0, 3.0),
            color: [u(rng, 0.08, 0.40), u(rng, 0.05, 0.32), u(rng, 0.02, 0.25)],
        },
        mouth: MouthParams {
            width: 2 * rng.random_range(7..=11),
            curve: u(rng, -2.5, 2.5),
            color: [u(rng, 0.40, 0.85), u(rng, 0.10, 0.40), u(rng, 0.15, 0.45)],
        },
        eyes: EyeParams {
            spacing: rng.random_range(-2..=2),
            color: [u(rng, 0.02, 0.22), u(rng, 0.02, 0.22), u(rng, 0.04, 0.26)],
        },
        nose_shading: u(rng, 0.15, 0.95),
        style,
        seed: rng.random::<u64>(),
    }
}

/// Partial targets rendered with the same seed and style so the three layers
/// differ only inside the feature masks.
pub fn layered_targets(p: &FaceParams) -> LayeredTargets {
    LayeredTargets {
        t_skin: render::render_texture_with(p, false, false),
        t_skin_mouth: render::render_texture_with(p, false, true),
        t_full: render::render_texture_with(p, true, true),
    }
}
