//! Rasterization of textures and portraits. Features are drawn crisp (no
//! anti-aliasing) so placement invariants hold exactly; styles are applied
//! per pixel on textures and may act spatially on portraits.

use super::warp::warp_to_portrait;
use super::{
    blank, layout, validate_params, FaceParams, Image, Occluder, Portrait, Style, UvTexture,
    CANVAS,
};
use crate::error::{Result, UvError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn put(img: &mut Image, x: i32, y: i32, color: [f32; 3]) {
    if (0..CANVAS as i32).contains(&x) && (0..CANVAS as i32).contains(&y) {
        for c in 0..3 {
            img[[c, y as usize, x as usize]] = color[c];
        }
    }
}

fn scale_px(img: &mut Image, x: i32, y: i32, f: f32) {
    if (0..CANVAS as i32).contains(&x) && (0..CANVAS as i32).contains(&y) {
        for c in 0..3 {
            img[[c, y as usize, x as usize]] *= f;
        }
    }
}

/// Arc displacement: zero at the ends, `amp` pixels at the middle.
fn arc(amp: f32, x: i32, x0: i32, x1: i32) -> i32 {
    let u = (x - x0) as f32 / (x1 - x0) as f32;
    (amp * 4.0 * u * (1.0 - u)).round() as i32
}

fn draw_brow(img: &mut Image, p: &FaceParams, x0: i32, x1: i32) {
    let y_base = layout::BROW_Y + p.brow.y_offset;
    for x in x0..=x1 {
        let y_top = y_base - arc(p.brow.arch, x, x0, x1);
        for t in 0..p.brow.thickness as i32 {
            put(img, x, y_top + t, p.brow.color);
        }
    }
}

fn draw_eye(img: &mut Image, p: &FaceParams, x0: i32, x1: i32) {
    for x in x0..=x1 {
        let y = layout::EYE_Y + arc(1.0, x, x0, x1);
        put(img, x, y, p.eyes.color);
        put(img, x, y + 1, p.eyes.color);
    }
}

fn draw_mouth(img: &mut Image, p: &FaceParams) {
    let hw = (p.mouth.width / 2) as i32;
    let (x0, x1) = (layout::MOUTH_CX - hw, layout::MOUTH_CX + hw);
    for x in x0..=x1 {
        let y_top = layout::MOUTH_Y - 2 - arc(p.mouth.curve, x, x0, x1);
        for t in 0..4 {
            put(img, x, y_top + t, p.mouth.color);
        }
    }
}

fn draw_nose_and_chin(img: &mut Image, p: &FaceParams) {
    for y in 30..=39 {
        for x in 29..=35 {
            let wx = (1.0 - (x as f32 - 32.0).abs() / 4.5).max(0.0);
            let wy = (1.0 - (y as f32 - 35.0).abs() / 6.5).max(0.0);
            scale_px(img, x, y, 1.0 - 0.35 * p.nose_shading * wx * wy);
        }
    }
    for x in 30..=34 {
        scale_px(img, x, layout::NOSE_TIP.1, 0.55);
    }
    for x in 27..=37 {
        scale_px(img, x, layout::CHIN.1, 0.70);
    }
}

/// Seeded per-sample pattern constants shared by texture and portrait styling.
struct StyleNoise {
    fx: f32,
    fy: f32,
    ph1: f32,
    ph2: f32,
    hatch_period: f32,
    hatch_phase: f32,
}

fn style_noise(seed: u64) -> StyleNoise {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_594c); // distinct stream per purpose
    StyleNoise {
        fx: 1.5 + 2.0 * rng.random::<f32>(),
        fy: 1.5 + 2.0 * rng.random::<f32>(),
        ph1: std::f32::consts::TAU * rng.random::<f32>(),
        ph2: std::f32::consts::TAU * rng.random::<f32>(),
        hatch_period: 5.5 + 3.0 * rng.random::<f32>(),
        hatch_phase: std::f32::consts::TAU * rng.random::<f32>(),
    }
}

fn painterly_px(v: [f32; 3], x: usize, y: usize, n: &StyleNoise) -> [f32; 3] {
    let tau = std::f32::consts::TAU;
    let pat = 0.06
        * (tau * n.fx * x as f32 / CANVAS as f32 + n.ph1).sin()
        * (tau * n.fy * y as f32 / CANVAS as f32 + n.ph2).sin();
    [
        (v[0] + pat + 0.03).clamp(0.0, 1.0),
        (v[1] + pat).clamp(0.0, 1.0),
        (v[2] + pat - 0.02).clamp(0.0, 1.0),
    ]
}

fn posterize_px(v: [f32; 3]) -> [f32; 3] {
    [
        (v[0] * 5.0).round() / 5.0,
        (v[1] * 5.0).round() / 5.0,
        (v[2] * 5.0).round() / 5.0,
    ]
}

fn sketch_px(v: [f32; 3], hatch: f32) -> [f32; 3] {
    let gray = 0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2];
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let desat = v[c] + 0.75 * (gray - v[c]);
        let contrast = 0.5 + 1.3 * (desat - 0.5);
        out[c] = (contrast + hatch).clamp(0.0, 1.0);
    }
    out
}

/// Per-pixel texture styling. Pixel style posterizes the palette (no spatial
/// blocking, so texture spectra keep their smooth decay); sketch styling on
/// textures has no hatch pattern for the same reason.
fn style_texture(img: &mut Image, style: Style, n: &StyleNoise) {
    if style == Style::Flat {
        return;
    }
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let v = [img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]];
            let out = match style {
                Style::Flat => v,
                Style::Painterly => painterly_px(v, x, y, n),
                Style::Pixel => posterize_px(v),
                Style::Sketch => sketch_px(v, 0.0),
            };
            for c in 0..3 {
                img[[c, y, x]] = out[c];
            }
        }
    }
}

/// Blockwise mean then nearest-neighbor upsample, block size 4.
pub fn style_texture_pixel_reference(img: &Image) -> Image {
    let b = 4;
    let mut out = img.clone();
    for c in 0..3 {
        for by in (0..CANVAS).step_by(b) {
            for bx in (0..CANVAS).step_by(b) {
                let mut acc = 0.0f32;
                for dy in 0..b {
                    for dx in 0..b {
                        acc += img[[c, by + dy, bx + dx]];
                    }
                }
                let mean = acc / (b * b) as f32;
                for dy in 0..b {
                    for dx in 0..b {
                        out[[c, by + dy, bx + dx]] = mean;
                    }
                }
            }
        }
    }
    out
}

fn style_portrait(img: &mut Image, style: Style, n: &StyleNoise) {
    match style {
        Style::Flat => {}
        Style::Painterly => {
            for y in 0..CANVAS {
                for x in 0..CANVAS {
                    let v = [img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]];
                    let out = painterly_px(v, x, y, n);
                    for c in 0..3 {
                        img[[c, y, x]] = out[c];
                    }
                }
            }
        }
        Style::Pixel => {
            *img = style_texture_pixel_reference(img);
        }
        Style::Sketch => {
            let tau = std::f32::consts::TAU;
            for y in 0..CANVAS {
                for x in 0..CANVAS {
                    let hatch =
                        0.06 * (tau * (x + y) as f32 / n.hatch_period + n.hatch_phase).sin();
                    let v = [img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]];
                    let out = sketch_px(v, hatch);
                    for c in 0..3 {
                        img[[c, y, x]] = out[c];
                    }
                }
            }
        }
    }
}

/// Renders the flat (pre-style) face with optional feature layers.
fn render_base(p: &FaceParams, brows: bool, mouth: bool) -> Image {
    let mut img = blank(p.skin);
    draw_nose_and_chin(&mut img, p);
    let s = p.eyes.spacing;
    draw_eye(&mut img, p, layout::EYE_L.0 - s, layout::EYE_L.1 - s);
    draw_eye(&mut img, p, layout::EYE_R.0 + s, layout::EYE_R.1 + s);
    if mouth {
        draw_mouth(&mut img, p);
    }
    if brows {
        draw_brow(&mut img, p, layout::BROW_L.0, layout::BROW_L.1);
        draw_brow(&mut img, p, layout::BROW_R.0, layout::BROW_R.1);
    }
    img
}

pub(super) fn render_texture_with(p: &FaceParams, brows: bool, mouth: bool) -> Image {
    let mut img = render_base(p, brows, mouth);
    style_texture(&mut img, p.style, &style_noise(p.seed));
    img
}

pub fn render_texture(p: &FaceParams) -> Result<UvTexture> {
    validate_params(p)?;
    Ok(UvTexture { pixels: render_texture_with(p, true, true), landmarks: super::landmark_positions(p) })
}

fn face_pixel_count() -> usize {
    super::warp::warp_table().portrait_face.iter().filter(|&&v| v).count()
}

/// Fraction of the (unshifted) portrait face region covered by occluders.
pub(super) fn occluder_coverage(occluders: &[Occluder], pose_shift: (i32, i32)) -> f32 {
    let t = super::warp::warp_table();
    let mut covered = 0usize;
    for py in 0..CANVAS {
        for px in 0..CANVAS {
            let sx = px as i32 - pose_shift.0;
            let sy = py as i32 - pose_shift.1;
            let on_face = (0..CANVAS as i32).contains(&sx)
                && (0..CANVAS as i32).contains(&sy)
                && t.portrait_face[sy as usize * CANVAS + sx as usize];
            if !on_face {
                continue;
            }
            let hit = occluders.iter().any(|o| {
                let (x0, y0, x1, y1) = o.bbox;
                (px as u32) >= x0 && (px as u32) < x1 && (py as u32) >= y0 && (py as u32) < y1
            });
            if hit {
                covered += 1;
            }
        }
    }
    covered as f32 / face_pixel_count() as f32
}

/// Warp, style, then composite occluders, in that order. Fails validation if
/// the pose shift exceeds 8 px, a bbox is degenerate or off-canvas, or
/// occluders cover more than 40% of the face region.
pub fn render_portrait(
    p: &FaceParams,
    pose_shift: (i32, i32),
    occluders: &[Occluder],
) -> Result<Portrait> {
    validate_params(p)?;
    if pose_shift.0.abs() > 8 || pose_shift.1.abs() > 8 {
        return Err(UvError::validation(
            "pose_shift",
            format!("{pose_shift:?} exceeds 8 px"),
        ));
    }
    for o in occluders {
        let (x0, y0, x1, y1) = o.bbox;
        if x0 >= x1 || y0 >= y1 || x1 > CANVAS as u32 || y1 > CANVAS as u32 {
            return Err(UvError::validation("occluder", format!("bad bbox {:?}", o.bbox)));
        }
    }
    let coverage = occluder_coverage(occluders, pose_shift);
    if coverage > 0.40 {
        return Err(UvError::validation(
            "occluders",
            format!("cover {:.0}% of the face region, cap is 40%", coverage * 100.0),
        ));
    }

    // The portrait warps the *flat* appearance and styles in portrait space,
    // so flat-style round trips are exact.
    let base = render_base(p, true, true);
    let mut img = warp_to_portrait(&base, pose_shift);
    style_portrait(&mut img, p.style, &style_noise(p.seed));
    for o in occluders {
        let (x0, y0, x1, y1) = o.bbox;
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..3 {
                    img[[c, y as usize, x as usize]] = o.color[c];
                }
            }
        }
    }
    Ok(Portrait { pixels: img, pose_shift, occluders: occluders.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::super::{canonical_landmarks, layered_targets, region_masks, OccluderShape};
    use super::*;

    #[test]
    fn default_params_mouth_corner_is_lip_colored() {
        let p = FaceParams::default();
        let tex = render_texture(&p).unwrap();
        let l = canonical_landmarks();
        for k in [8usize, 9] {
            let (x, y) = (l.0[k][0] as usize, l.0[k][1] as usize);
            for c in 0..3 {
                assert_eq!(tex.pixels[[c, y, x]], p.mouth.color[c]);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut p = FaceParams::default();
        p.style = Style::Sketch;
        p.seed = 99;
        let a = render_texture(&p).unwrap().pixels;
        let b = render_texture(&p).unwrap().pixels;
        assert_eq!(a, b);
        let pa = render_portrait(&p, (2, -1), &[]).unwrap().pixels;
        let pb = render_portrait(&p, (2, -1), &[]).unwrap().pixels;
        assert_eq!(pa, pb);
    }

    #[test]
    fn brow_offset_moves_drawn_pixels_exactly() {
        let mut p = FaceParams::default();
        p.brow.arch = 0.0;
        for off in [-3i32, 0, 3] {
            p.brow.y_offset = off;
            let tex = render_texture(&p).unwrap();
            let y = (layout::BROW_Y + off) as usize;
            let x = layout::BROW_L.0 as usize;
            for c in 0..3 {
                assert_eq!(tex.pixels[[c, y, x]], p.brow.color[c], "offset {off}");
            }
            assert_eq!(tex.landmarks.0[0][1], y as f32);
        }
    }

    #[test]
    fn flat_portrait_is_exactly_the_table_warp() {
        let p = FaceParams::default();
        let tex = render_texture(&p).unwrap();
        let portrait = render_portrait(&p, (0, 0), &[]).unwrap();
        let expect = warp_to_portrait(&tex.pixels, (0, 0));
        assert_eq!(portrait.pixels, expect);
    }

    #[test]
    fn occluder_pixels_take_occluder_color() {
        let p = FaceParams::default();
        let o = Occluder { shape: OccluderShape::Rect, bbox: (20, 20, 30, 28), color: [0.0, 1.0, 0.0] };
        let portrait = render_portrait(&p, (0, 0), &[o]).unwrap();
        for y in 20..28 {
            for x in 20..30 {
                assert_eq!(portrait.pixels[[1, y, x]], 1.0);
                assert_eq!(portrait.pixels[[0, y, x]], 0.0);
            }
        }
    }

    #[test]
    fn oversized_occluder_is_rejected() {
        let p = FaceParams::default();
        let o = Occluder { shape: OccluderShape::Rect, bbox: (0, 0, 64, 40), color: [0.0; 3] };
        let e = render_portrait(&p, (0, 0), &[o]).unwrap_err();
        assert!(e.is_validation(), "{e}");
    }

    #[test]
    fn pixel_style_portrait_matches_blockwise_reference() {
        let mut p = FaceParams::default();
        p.style = Style::Pixel;
        let got = render_portrait(&p, (1, 2), &[]).unwrap().pixels;
        // independent recomputation: flat-style portrait, then 4x4 block means
        let mut flat = p.clone();
        flat.style = Style::Flat;
        let base = render_portrait(&flat, (1, 2), &[]).unwrap().pixels;
        let b = 4;
        for c in 0..3 {
            for by in (0..CANVAS).step_by(b) {
                for bx in (0..CANVAS).step_by(b) {
                    let mut acc = 0.0f32;
                    for dy in 0..b {
                        for dx in 0..b {
                            acc += base[[c, by + dy, bx + dx]];
                        }
                    }
                    let mean = acc / 16.0;
                    for dy in 0..b {
                        for dx in 0..b {
                            assert!((got[[c, by + dy, bx + dx]] - mean).abs() < 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn layered_targets_differ_only_inside_feature_masks() {
        let m = region_masks();
        for style in Style::ALL {
            let mut p = FaceParams::default();
            p.style = style;
            p.seed = 1234;
            p.brow.y_offset = 2;
            let lt = layered_targets(&p);
            for y in 0..CANVAS {
                for x in 0..CANVAS {
                    for c in 0..3 {
                        let skin = lt.t_skin[[c, y, x]];
                        let skin_mouth = lt.t_skin_mouth[[c, y, x]];
                        let full = lt.t_full[[c, y, x]];
                        if !m.mouth[[y, x]] {
                            assert_eq!(skin, skin_mouth, "mouth leak at ({x},{y}) {style:?}");
                        }
                        if !m.brow[[y, x]] {
                            assert_eq!(skin_mouth, full, "brow leak at ({x},{y}) {style:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn t_skin_has_skin_not_brow_color_inside_brow_mask() {
        let p = FaceParams::default();
        let lt = layered_targets(&p);
        let l = canonical_landmarks();
        let (x, y) = (l.0[0][0] as usize, l.0[0][1] as usize);
        for c in 0..3 {
            assert_eq!(lt.t_skin[[c, y, x]], p.skin[c]);
            assert_eq!(lt.t_full[[c, y, x]], p.brow.color[c]);
        }
    }
}
