//! Fixed piecewise-affine warp between texture (UV) space and portrait space.
//!
//! A 3x3 control grid defines 8 triangles. The warp is compiled once into
//! integer pixel lookup tables: `fwd` maps each portrait pixel to its source
//! texture pixel, `inv` picks one portrait preimage per texture pixel. Each
//! texture face pixel claims the free portrait pixel nearest its geometric
//! image and that pixel's forward entry is rewritten to point back, so
//! fwd(inv(q)) == q holds exactly on the whole texture face region and the
//! round trip is lossless by construction. The portrait-side grid is a little
//! larger than the texture-side grid, which keeps free pixels available.

use super::{Image, CANVAS};
use std::sync::OnceLock;

pub const WARP_VERSION: u32 = 1;

/// Texture-side control grid, row-major 3x3, (x, y).
const GRID_TEX: [[f32; 2]; 9] = [
    [5.0, 4.0],
    [32.0, 3.0],
    [59.0, 4.0],
    [3.0, 32.0],
    [31.0, 33.0],
    [61.0, 32.0],
    [7.0, 60.0],
    [32.0, 61.0],
    [57.0, 60.0],
];

/// Portrait-side control grid; same topology, slightly expanded.
const GRID_POR: [[f32; 2]; 9] = [
    [2.0, 1.0],
    [32.0, 0.0],
    [62.0, 1.0],
    [0.0, 31.0],
    [30.0, 33.0],
    [63.0, 31.0],
    [4.0, 62.0],
    [32.0, 63.0],
    [60.0, 62.0],
];

/// The 8 triangles of the 2x2 quad grid, indices into the control grids.
const TRIS: [[usize; 3]; 8] = [
    [0, 1, 3],
    [1, 4, 3],
    [1, 2, 4],
    [2, 5, 4],
    [3, 4, 6],
    [4, 7, 6],
    [4, 5, 7],
    [5, 8, 7],
];

pub struct WarpTable {
    pub version: u32,
    /// Portrait pixel -> texture pixel index, -1 outside the face region.
    pub fwd: Vec<i32>,
    /// Texture pixel -> a portrait pixel p with fwd[p] == this pixel, -1
    /// outside the texture face region.
    pub inv: Vec<i32>,
    pub tex_face: Vec<bool>,
    pub portrait_face: Vec<bool>,
}

fn barycentric(p: [f32; 2], a: [f32; 2], b: [f32; 2], c: [f32; 2]) -> Option<[f32; 3]> {
    let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
    if det.abs() < 1e-9 {
        return None;
    }
    let l0 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / det;
    let l1 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / det;
    let l2 = 1.0 - l0 - l1;
    const EPS: f32 = -1e-5;
    if l0 >= EPS && l1 >= EPS && l2 >= EPS {
        Some([l0, l1, l2])
    } else {
        None
    }
}

fn compile() -> WarpTable {
    let n = CANVAS * CANVAS;
    let mut fwd = vec![-1i32; n];
    let mut inv = vec![-1i32; n];
    let mut tex_face = vec![false; n];
    let mut portrait_face = vec![false; n];

    for py in 0..CANVAS {
        for px in 0..CANVAS {
            let p = [px as f32 + 0.5, py as f32 + 0.5];
            for tri in &TRIS {
                let (a, b, c) = (GRID_POR[tri[0]], GRID_POR[tri[1]], GRID_POR[tri[2]]);
                if let Some(l) = barycentric(p, a, b, c) {
                    let (ta, tb, tc) = (GRID_TEX[tri[0]], GRID_TEX[tri[1]], GRID_TEX[tri[2]]);
                    let tx = l[0] * ta[0] + l[1] * tb[0] + l[2] * tc[0];
                    let ty = l[0] * ta[1] + l[1] * tb[1] + l[2] * tc[1];
                    let ix = (tx.floor() as i32).clamp(0, CANVAS as i32 - 1);
                    let iy = (ty.floor() as i32).clamp(0, CANVAS as i32 - 1);
                    let q = iy as usize * CANVAS + ix as usize;
                    fwd[py * CANVAS + px] = q as i32;
                    portrait_face[py * CANVAS + px] = true;
                    break;
                }
            }
        }
    }

    for ty in 0..CANVAS {
        for tx in 0..CANVAS {
            let p = [tx as f32 + 0.5, ty as f32 + 0.5];
            for tri in &TRIS {
                let (a, b, c) = (GRID_TEX[tri[0]], GRID_TEX[tri[1]], GRID_TEX[tri[2]]);
                if barycentric(p, a, b, c).is_some() {
                    tex_face[ty * CANVAS + tx] = true;
                    break;
                }
            }
        }
    }

    // Claim pass: every texture face pixel gets a distinct portrait face
    // pixel within a 7x7 window of its geometric image, via bipartite
    // matching with augmenting paths (nearest candidates preferred). The
    // matched pixel's forward entry is rewritten to point back, so the table,
    // not the float triangles, defines the warp: round trips stay exact and
    // the face has no holes.
    let tex_pixels: Vec<usize> = (0..n).filter(|&q| tex_face[q]).collect();
    let mut adj: Vec<Vec<usize>> = Vec::with_capacity(tex_pixels.len());
    for &q in &tex_pixels {
        let (tx, ty) = (q % CANVAS, q / CANVAS);
        let p = [tx as f32 + 0.5, ty as f32 + 0.5];
        let mut target = None;
        for tri in &TRIS {
            let (a, b, c) = (GRID_TEX[tri[0]], GRID_TEX[tri[1]], GRID_TEX[tri[2]]);
            if let Some(l) = barycentric(p, a, b, c) {
                let (pa, pb, pc) = (GRID_POR[tri[0]], GRID_POR[tri[1]], GRID_POR[tri[2]]);
                target = Some([
                    l[0] * pa[0] + l[1] * pb[0] + l[2] * pc[0],
                    l[0] * pa[1] + l[1] * pb[1] + l[2] * pc[1],
                ]);
                break;
            }
        }
        let t = target.expect("face pixel lies in a triangle");
        let (cx, cy) = (t[0].floor() as i32, t[1].floor() as i32);
        let mut cands: Vec<(f32, i32, i32)> = Vec::with_capacity(49);
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                let (x, y) = (cx + dx, cy + dy);
                if (0..CANVAS as i32).contains(&x)
                    && (0..CANVAS as i32).contains(&y)
                    && portrait_face[y as usize * CANVAS + x as usize]
                {
                    let d2 = (x as f32 + 0.5 - t[0]).powi(2) + (y as f32 + 0.5 - t[1]).powi(2);
                    cands.push((d2, x, y));
                }
            }
        }
        cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then((a.2, a.1).cmp(&(b.2, b.1))));
        adj.push(cands.iter().map(|&(_, x, y)| y as usize * CANVAS + x as usize).collect());
    }

    fn augment(
        u: usize,
        adj: &[Vec<usize>],
        match_por: &mut [usize],
        visited: &mut [bool],
    ) -> bool {
        for &p in &adj[u] {
            if visited[p] {
                continue;
            }
            visited[p] = true;
            if match_por[p] == usize::MAX || augment(match_por[p], adj, match_por, visited) {
                match_por[p] = u;
                return true;
            }
        }
        false
    }

    let mut match_por = vec![usize::MAX; n];
    for u in 0..tex_pixels.len() {
        let mut visited = vec![false; n];
        assert!(
            augment(u, &adj, &mut match_por, &mut visited),
            "texture face pixel ({}, {}) has no assignable portrait pixel",
            tex_pixels[u] % CANVAS,
            tex_pixels[u] / CANVAS
        );
    }
    for p in 0..n {
        if match_por[p] != usize::MAX {
            let q = tex_pixels[match_por[p]];
            inv[q] = p as i32;
            fwd[p] = q as i32;
        }
    }

    WarpTable { version: WARP_VERSION, fwd, inv, tex_face, portrait_face }
}

pub fn warp_table() -> &'static WarpTable {
    static TABLE: OnceLock<WarpTable> = OnceLock::new();
    TABLE.get_or_init(compile)
}

pub const BACKGROUND: [f32; 3] = [0.13, 0.12, 0.14];

/// Applies the fixed warp to a texture, shifting the face by `pose_shift`
/// portrait pixels. Pixels outside the (shifted) face region take the
/// background color.
pub fn warp_to_portrait(tex: &Image, pose_shift: (i32, i32)) -> Image {
    let t = warp_table();
    let mut out = super::blank(BACKGROUND);
    for py in 0..CANVAS {
        for px in 0..CANVAS {
            let sx = px as i32 - pose_shift.0;
            let sy = py as i32 - pose_shift.1;
            if sx < 0 || sy < 0 || sx >= CANVAS as i32 || sy >= CANVAS as i32 {
                continue;
            }
            let q = t.fwd[sy as usize * CANVAS + sx as usize];
            if q < 0 {
                continue;
            }
            let (qx, qy) = ((q as usize) % CANVAS, (q as usize) / CANVAS);
            for c in 0..3 {
                out[[c, py, px]] = tex[[c, qy, qx]];
            }
        }
    }
    out
}

/// Inverse lookup: rebuilds texture-space pixels from a portrait. Texture
/// pixels outside the face region (or whose preimage fell off-canvas after the
/// pose shift) take the background color.
pub fn unwarp_portrait(portrait: &Image, pose_shift: (i32, i32)) -> Image {
    let t = warp_table();
    let mut out = super::blank(BACKGROUND);
    for qy in 0..CANVAS {
        for qx in 0..CANVAS {
            let p = t.inv[qy * CANVAS + qx];
            if p < 0 {
                continue;
            }
            let px = (p as usize) % CANVAS;
            let py = (p as usize) / CANVAS;
            let sx = px as i32 + pose_shift.0;
            let sy = py as i32 + pose_shift.1;
            if sx < 0 || sy < 0 || sx >= CANVAS as i32 || sy >= CANVAS as i32 {
                continue;
            }
            for c in 0..3 {
                out[[c, qy, qx]] = portrait[[c, sy as usize, sx as usize]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_compiles_and_inverse_is_exact() {
        let t = warp_table();
        assert_eq!(t.version, WARP_VERSION);
        let n_face = t.tex_face.iter().filter(|&&v| v).count();
        assert!(n_face > 2000, "texture face region suspiciously small: {n_face}");
        for q in 0..CANVAS * CANVAS {
            if t.tex_face[q] {
                let p = t.inv[q] as usize;
                assert_eq!(t.fwd[p], q as i32, "fwd(inv(q)) != q at {q}");
            }
        }
    }

    #[test]
    fn features_live_inside_the_face_region() {
        let t = warp_table();
        for &[x, y] in super::super::canonical_landmarks().iter() {
            let q = y as usize * CANVAS + x as usize;
            assert!(t.tex_face[q], "landmark ({x},{y}) outside face region");
        }
    }

    #[test]
    fn pose_shift_moves_the_face_exactly() {
        let mut tex = super::super::blank([0.5, 0.5, 0.5]);
        tex[[0, 30, 30]] = 1.0;
        let a = warp_to_portrait(&tex, (0, 0));
        let b = warp_to_portrait(&tex, (3, -2));
        for py in 0..CANVAS {
            for px in 0..CANVAS {
                let sx = px as i32 - 3;
                let sy = py as i32 + 2;
                if (0..CANVAS as i32).contains(&sx) && (0..CANVAS as i32).contains(&sy) {
                    for c in 0..3 {
                        assert_eq!(b[[c, py, px]], a[[c, sy as usize, sx as usize]]);
                    }
                }
            }
        }
    }
}
