//! Dataset generation and loading. Every sample is a pure function of
//! (seed, index): per-sample ChaCha streams keep output independent of
//! generation order, and the manifest pins every byte with a sha256.

use super::{
    canonical_landmarks, landmark_positions, layered_targets, render_portrait, sample_params,
    validate_params, FaceParams, Image, LandmarkSet, Occluder, OccluderShape, Style, CANVAS,
};
use crate::error::{Result, UvError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub n: usize,
    pub seed: u64,
    /// Fraction of each style in [flat, painterly, pixel, sketch] order;
    /// realized counts are exact (largest-remainder rounding).
    pub style_fracs: [f32; 4],
    /// Probability that a sample's portrait carries occluders.
    pub occlusion_rate: f32,
    /// Pose shifts are drawn uniformly from [-pose_max, pose_max] per axis.
    pub pose_max: i32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n: 16,
            seed: 0,
            style_fracs: [0.25; 4],
            occlusion_rate: 0.35,
            pose_max: 4,
        }
    }
}

impl DatasetConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        DatasetConfig { n, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(UvError::validation("n", "must be >= 1"));
        }
        let sum: f32 = self.style_fracs.iter().sum();
        if self.style_fracs.iter().any(|&f| f < 0.0) || (sum - 1.0).abs() > 1e-4 {
            return Err(UvError::validation(
                "style_fracs",
                format!("{:?} must be nonnegative and sum to 1", self.style_fracs),
            ));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(UvError::validation(
                "occlusion_rate",
                format!("{} outside [0, 1]", self.occlusion_rate),
            ));
        }
        if !(0..=8).contains(&self.pose_max) {
            return Err(UvError::validation("pose_max", format!("{} outside [0, 8]", self.pose_max)));
        }
        Ok(())
    }
}

/// Exact per-style counts: floor of the ideal share, leftovers to the largest
/// fractional remainders (ties favor earlier styles).
pub fn style_counts(fracs: [f32; 4], n: usize) -> [usize; 4] {
    let ideal: Vec<f64> = fracs.iter().map(|&f| f as f64 * n as f64).collect();
    let mut counts = [0usize; 4];
    for i in 0..4 {
        counts[i] = ideal[i].floor() as usize;
    }
    let mut rest: usize = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

/// Line-oriented `path<TAB>sha256` listing of every generated file,
/// sorted by path.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.path);
            out.push('\t');
            out.push_str(&e.sha256);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (path, hash) = line.split_once('\t').ok_or_else(|| {
                UvError::validation("manifest", format!("line {} has no tab", i + 1))
            })?;
            if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(UvError::validation(
                    "manifest",
                    format!("line {} has a malformed hash", i + 1),
                ));
            }
            entries.push(ManifestEntry { path: path.to_string(), sha256: hash.to_string() });
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| UvError::io(path, e))?;
        Manifest::parse(&text)
    }

    /// Recomputes every listed hash against the files under `root`.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for e in &self.entries {
            let p = root.join(&e.path);
            let bytes = fs::read(&p).map_err(|err| UvError::io(&p, err))?;
            let got = sha256_hex(&bytes);
            if got != e.sha256 {
                return Err(UvError::Runtime(format!(
                    "manifest mismatch for {}: recorded {} found {}",
                    e.path, e.sha256, got
                )));
            }
        }
        Ok(())
    }
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let mut buf = vec![0u8; CANVAS * CANVAS * 3];
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            for c in 0..3 {
                buf[(y * CANVAS + x) * 3 + c] =
                    (img[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let rgb = image::RgbImage::from_raw(CANVAS as u32, CANVAS as u32, buf)
        .expect("buffer sized to canvas");
    rgb.save(path)
        .map_err(|e| UvError::Runtime(format!("png encode {}: {e}", path.display())))
}

pub fn load_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path)
        .map_err(|e| UvError::Runtime(format!("png decode {}: {e}", path.display())))?;
    let rgb = dynimg.to_rgb8();
    if rgb.width() as usize != CANVAS || rgb.height() as usize != CANVAS {
        return Err(UvError::validation(
            "png",
            format!("{} is {}x{}, want {CANVAS}x{CANVAS}", path.display(), rgb.width(), rgb.height()),
        ));
    }
    let mut img = super::blank([0.0; 3]);
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                img[[c, y, x]] = px.0[c] as f32 / 255.0;
            }
        }
    }
    Ok(img)
}

/// Everything generated for one sample, in metadata form.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct SampleRecord {
    index: usize,
    style: Style,
    params: FaceParams,
    landmarks: LandmarkSet,
    pose_shift: (i32, i32),
    occluders: Vec<Occluder>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CanonicalRecord {
    layout_version: u32,
    landmarks: LandmarkSet,
}

fn sample_occluders<R: Rng + ?Sized>(rng: &mut R, rate: f32) -> Vec<Occluder> {
    if rng.random::<f32>() >= rate {
        return Vec::new();
    }
    let k = rng.random_range(1..=2);
    let mut occluders = Vec::with_capacity(k);
    for _ in 0..k {
        let shape = if rng.random::<f32>() < 0.5 { OccluderShape::Rect } else { OccluderShape::Bar };
        let (w, h) = match shape {
            OccluderShape::Rect => (rng.random_range(8..=18u32), rng.random_range(6..=14u32)),
            OccluderShape::Bar => (rng.random_range(20..=34u32), rng.random_range(3..=6u32)),
        };
        let x0 = rng.random_range(0..=(CANVAS as u32 - w));
        let y0 = rng.random_range(6..=(CANVAS as u32 - h - 4));
        let color = [
            0.1 + 0.8 * rng.random::<f32>(),
            0.1 + 0.8 * rng.random::<f32>(),
            0.1 + 0.8 * rng.random::<f32>(),
        ];
        occluders.push(Occluder { shape, bbox: (x0, y0, x0 + w, y0 + h), color });
    }
    occluders
}

/// Draws one sample from its dedicated stream. Stream 0 belongs to the style
/// shuffle; sample i uses stream i + 1, so samples are order-independent.
fn generate_sample(cfg: &DatasetConfig, index: usize, style: Style) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let params = sample_params(&mut rng, style);
    validate_params(&params)?;
    let pose_shift = (
        rng.random_range(-cfg.pose_max..=cfg.pose_max),
        rng.random_range(-cfg.pose_max..=cfg.pose_max),
    );
    let occluders = sample_occluders(&mut rng, cfg.occlusion_rate);
    Ok(SampleRecord {
        index,
        style,
        landmarks: landmark_positions(&params),
        params,
        pose_shift,
        occluders,
    })
}

fn style_assignment(cfg: &DatasetConfig) -> Vec<Style> {
    let counts = style_counts(cfg.style_fracs, cfg.n);
    let mut styles = Vec::with_capacity(cfg.n);
    for (i, &c) in counts.iter().enumerate() {
        styles.extend(std::iter::repeat(Style::ALL[i]).take(c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    styles.shuffle(&mut rng);
    styles
}

/// Writes n sample directories plus `canonical.json`, `dataset.json`, and
/// `manifest.tsv`; returns the manifest. Reruns with equal config produce
/// byte-identical output.
pub fn dataset_gen(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| UvError::io(out_dir, e))?;
    let styles = style_assignment(cfg);
    let mut entries = Vec::new();
    let add = |entries: &mut Vec<ManifestEntry>, rel: String, bytes: &[u8]| {
        entries.push(ManifestEntry { path: rel, sha256: sha256_hex(bytes) });
    };

    for i in 0..cfg.n {
        let rec = generate_sample(cfg, i, styles[i])?;
        let dir_rel = format!("sample_{i:05}");
        let dir = out_dir.join(&dir_rel);
        fs::create_dir_all(&dir).map_err(|e| UvError::io(&dir, e))?;

        let layers = layered_targets(&rec.params);
        let portrait = render_portrait(&rec.params, rec.pose_shift, &rec.occluders)?;
        let images = [
            ("texture.png", &layers.t_full),
            ("portrait.png", &portrait.pixels),
            ("t_skin.png", &layers.t_skin),
            ("t_skin_mouth.png", &layers.t_skin_mouth),
        ];
        for (name, img) in images {
            let p = dir.join(name);
            save_png(img, &p)?;
            let bytes = fs::read(&p).map_err(|e| UvError::io(&p, e))?;
            add(&mut entries, format!("{dir_rel}/{name}"), &bytes);
        }
        let json = serde_json::to_string_pretty(&rec)
            .map_err(|e| UvError::Runtime(format!("encode sample record: {e}")))?;
        let p = dir.join("params.json");
        fs::write(&p, &json).map_err(|e| UvError::io(&p, e))?;
        add(&mut entries, format!("{dir_rel}/params.json"), json.as_bytes());
    }

    let canonical = CanonicalRecord {
        layout_version: super::layout::VERSION,
        landmarks: canonical_landmarks(),
    };
    let json = serde_json::to_string_pretty(&canonical)
        .map_err(|e| UvError::Runtime(format!("encode canonical record: {e}")))?;
    let p = out_dir.join("canonical.json");
    fs::write(&p, &json).map_err(|e| UvError::io(&p, e))?;
    add(&mut entries, "canonical.json".into(), json.as_bytes());

    let json = serde_json::to_string_pretty(cfg)
        .map_err(|e| UvError::Runtime(format!("encode dataset config: {e}")))?;
    let p = out_dir.join("dataset.json");
    fs::write(&p, &json).map_err(|e| UvError::io(&p, e))?;
    add(&mut entries, "dataset.json".into(), json.as_bytes());

    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest { entries };
    let p = out_dir.join("manifest.tsv");
    fs::write(&p, manifest.to_text()).map_err(|e| UvError::io(&p, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub index: usize,
    pub params: FaceParams,
    pub landmarks: LandmarkSet,
    pub pose_shift: (i32, i32),
    pub occluders: Vec<Occluder>,
    pub texture: Image,
    pub portrait: Image,
    pub t_skin: Image,
    pub t_skin_mouth: Image,
}

/// Loads every sample listed by the dataset's own config record.
pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedSample>> {
    let cfg_path = dir.join("dataset.json");
    let text = fs::read_to_string(&cfg_path).map_err(|e| UvError::io(&cfg_path, e))?;
    let cfg: DatasetConfig = serde_json::from_str(&text)
        .map_err(|e| UvError::validation("dataset.json", e.to_string()))?;
    let mut samples = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let sdir = dir.join(format!("sample_{i:05}"));
        let rec_path = sdir.join("params.json");
        let text = fs::read_to_string(&rec_path).map_err(|e| UvError::io(&rec_path, e))?;
        let rec: SampleRecord = serde_json::from_str(&text)
            .map_err(|e| UvError::validation("params.json", e.to_string()))?;
        samples.push(LoadedSample {
            index: rec.index,
            params: rec.params,
            landmarks: rec.landmarks,
            pose_shift: rec.pose_shift,
            occluders: rec.occluders,
            texture: load_png(&sdir.join("texture.png"))?,
            portrait: load_png(&sdir.join("portrait.png"))?,
            t_skin: load_png(&sdir.join("t_skin.png"))?,
            t_skin_mouth: load_png(&sdir.join("t_skin_mouth.png"))?,
        });
    }
    Ok(samples)
}
