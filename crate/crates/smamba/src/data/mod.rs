//! Synthetic camouflaged-blob data, image/mask types, resizing and
//! dataset directory I/O.
//!
//! Blobs are star-convex Fourier contours `r(theta) = r0 * (1 + sum_m a_m
//! cos(m*theta + phi_m))`, m = 1..5, a_m ~ U(-0.2, 0.2), drawn on a
//! procedural background with a small foreground offset (the camouflage)
//! and a Gaussian-blurred boundary. Every sample's randomness is keyed by
//! (master seed, split, index, attempt) through the counter generator, so
//! datasets are bit-stable across platforms and generation order.
//!
//! Two texture families exist: the seen family is a smooth sinusoid
//! mixture, the unseen family is bilinear value noise plus fine grain
//! (and a wider blob-size distribution).

pub mod pnm;

use crate::config::GenSpec;
use crate::error::{Error, Result};
use crate::rng::{fnv1a, CounterRng};
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeen => "test-seen",
            Split::TestUnseen => "test-unseen",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Ok(match s {
            "train" => Split::Train,
            "test-seen" => Split::TestSeen,
            "test-unseen" => Split::TestUnseen,
            other => return Err(Error::Dataset(format!("unknown split `{other}`"))),
        })
    }
}

/// RGB image, values in [0, 1], row-major [h, w, 3].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

/// Binary mask, values in {0, 1}, row-major [h, w].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn foreground_fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.data.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub image: Image,
    pub mask: Mask,
    pub id: String,
    pub seed: u64,
    pub split: Split,
}

// ── generation ───────────────────────────────────────────────────────

struct Blob {
    cx: f64,
    cy: f64,
    r0: f64,
    amp: [f64; 5],
    phase: [f64; 5],
}

impl Blob {
    fn radius(&self, theta: f64) -> f64 {
        let mut f = 1.0;
        for m in 0..5 {
            f += self.amp[m] * ((m as f64 + 1.0) * theta + self.phase[m]).cos();
        }
        self.r0 * f
    }

    /// Contour sanity: the radial factor must stay clearly positive.
    fn well_formed(&self) -> bool {
        (0..256).all(|i| {
            let theta = TAU * i as f64 / 256.0;
            self.radius(theta) > 0.05 * self.r0
        })
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let dist = (dx * dx + dy * dy).sqrt();
        dist < self.radius(dy.atan2(dx))
    }
}

fn draw_blob(rng: &mut CounterRng, size: f64, primary: bool, family: u32) -> Blob {
    let span = if primary { (0.30, 0.70) } else { (0.15, 0.85) };
    let r_range = match (primary, family) {
        (true, 0) => (0.12, 0.26),
        (true, _) => (0.09, 0.33),
        (false, 0) => (0.05, 0.10),
        (false, _) => (0.04, 0.13),
    };
    let mut amp = [0.0; 5];
    let mut phase = [0.0; 5];
    let cx = rng.range(span.0, span.1) * size;
    let cy = rng.range(span.0, span.1) * size;
    let r0 = rng.range(r_range.0, r_range.1) * size;
    for m in 0..5 {
        amp[m] = rng.range(-0.2, 0.2);
        phase[m] = rng.range(0.0, TAU);
    }
    Blob { cx, cy, r0, amp, phase }
}

/// Separable Gaussian blur with zero padding, radius 3*sigma.
fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut norm = 0.0;
    for d in -radius..=radius {
        let v = (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        norm += v;
    }
    for v in kernel.iter_mut() {
        *v /= norm;
    }
    let mut tmp = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (ki, d) in (-radius..=radius).enumerate() {
                let xx = x + d;
                if xx >= 0 && xx < w as isize {
                    acc += kernel[ki] * src[(y * w as isize + xx) as usize];
                }
            }
            tmp[(y * w as isize + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (ki, d) in (-radius..=radius).enumerate() {
                let yy = y + d;
                if yy >= 0 && yy < h as isize {
                    acc += kernel[ki] * tmp[(yy * w as isize + x) as usize];
                }
            }
            out[(y * w as isize + x) as usize] = acc;
        }
    }
    out
}

fn background(rng: &mut CounterRng, size: usize, family: u32) -> Vec<f64> {
    let n = size * size;
    let mut img = vec![0.0f64; n * 3];
    if family == 0 {
        // Smooth sinusoid mixture, channel-correlated base.
        let base: [f64; 3] = [rng.range(0.35, 0.60), rng.range(0.30, 0.55), rng.range(0.30, 0.55)];
        for c in 0..3 {
            let mut waves = Vec::new();
            for _ in 0..3 {
                waves.push((
                    rng.range(0.04, 0.10),
                    rng.range(0.5, 2.0),
                    rng.range(0.5, 2.0),
                    rng.range(0.0, TAU),
                ));
            }
            for y in 0..size {
                for x in 0..size {
                    let mut v = base[c];
                    for &(amp, fx, fy, ph) in &waves {
                        v += amp * (TAU * (fx * x as f64 + fy * y as f64) / size as f64 + ph).sin();
                    }
                    img[(y * size + x) * 3 + c] = v;
                }
            }
        }
    } else {
        // Bilinear value noise on a 16-cell grid plus fine grain.
        let grid = 16usize;
        let base: [f64; 3] = [rng.range(0.35, 0.60), rng.range(0.30, 0.55), rng.range(0.30, 0.55)];
        let coarse_amp = rng.range(0.06, 0.12);
        for c in 0..3 {
            let nodes: Vec<f64> = (0..(grid + 1) * (grid + 1)).map(|_| rng.range(-1.0, 1.0)).collect();
            for y in 0..size {
                for x in 0..size {
                    let gx = x as f64 * grid as f64 / size as f64;
                    let gy = y as f64 * grid as f64 / size as f64;
                    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
                    let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
                    let idx = |yy: usize, xx: usize| nodes[yy.min(grid) * (grid + 1) + xx.min(grid)];
                    let v = (1.0 - fy) * ((1.0 - fx) * idx(y0, x0) + fx * idx(y0, x0 + 1))
                        + fy * ((1.0 - fx) * idx(y0 + 1, x0) + fx * idx(y0 + 1, x0 + 1));
                    img[(y * size + x) * 3 + c] = base[c] + coarse_amp * v;
                }
            }
            for y in 0..size {
                for x in 0..size {
                    img[(y * size + x) * 3 + c] += rng.range(-0.05, 0.05);
                }
            }
        }
    }
    img
}

fn try_sample(spec: &GenSpec, key: [u64; 4], family: u32) -> Option<(Image, Mask)> {
    let size = spec.size;
    let mut rng = CounterRng::keyed(&key);

    let mut blobs = vec![draw_blob(&mut rng, size as f64, true, family)];
    for _ in 0..2 {
        // Secondary blob draws happen unconditionally so the stream
        // position does not depend on earlier outcomes.
        let take = rng.uniform() < spec.secondary_prob;
        let blob = draw_blob(&mut rng, size as f64, false, family);
        if take {
            blobs.push(blob);
        }
    }
    if !blobs.iter().all(Blob::well_formed) {
        return None;
    }

    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if blobs.iter().any(|b| b.contains(px, py)) {
                mask[y * size + x] = 1;
            }
        }
    }
    let fg = mask.iter().map(|&v| v as usize).sum::<usize>() as f64 / (size * size) as f64;
    if !(0.02..=0.5).contains(&fg) {
        return None;
    }

    let mut img = background(&mut rng, size, family);
    let soft: Vec<f64> = gaussian_blur(
        &mask.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        size,
        size,
        spec.boundary_blur,
    );
    let chan_scale: [f64; 3] = [rng.range(0.9, 1.1), rng.range(0.9, 1.1), rng.range(0.9, 1.1)];
    for pos in 0..size * size {
        for c in 0..3 {
            let v = img[pos * 3 + c] + spec.contrast * chan_scale[c] * soft[pos];
            // Clamp, then snap to the 8-bit lattice so in-memory pairs
            // equal their saved-and-reloaded form exactly.
            img[pos * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    Some((
        Image { h: size, w: size, data: img },
        Mask { h: size, w: size, data: mask },
    ))
}

/// Generate `spec.n` samples of one split. Every sample retries up to 10
/// sub-seeds when its contour degenerates or its foreground fraction
/// leaves [0.02, 0.5].
pub fn gen_synthetic(spec: &GenSpec, master_seed: u64, split: Split) -> Result<Vec<SamplePair>> {
    if spec.contrast <= 0.0 {
        return Err(Error::Config("contrast must be positive".into()));
    }
    if spec.size < 32 {
        return Err(Error::Config(format!("size {} below minimum 32", spec.size)));
    }
    let family = match split {
        Split::TestUnseen => 1 - spec.texture_family.min(1),
        _ => spec.texture_family.min(1),
    };
    let count = match split {
        Split::Train => spec.n,
        _ => spec.n_test,
    };
    let split_tag = fnv1a(split.as_str().as_bytes());
    let prefix = match split {
        Split::Train => "tr",
        Split::TestSeen => "ts",
        Split::TestUnseen => "tu",
    };
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut made = None;
        for attempt in 0..10u64 {
            let key = [master_seed, split_tag, i as u64, attempt];
            if let Some((image, mask)) = try_sample(spec, key, family) {
                made = Some((image, mask, CounterRng::keyed(&key).state().0));
                break;
            }
        }
        let (image, mask, seed) = made.ok_or_else(|| {
            Error::Dataset(format!("sample {i} of {split:?} failed after 10 attempts"))
        })?;
        out.push(SamplePair {
            image,
            mask,
            id: format!("{prefix}{i:05}"),
            seed,
            split,
        });
    }
    Ok(out)
}

/// Full dataset: train + test-seen (same texture family) + test-unseen
/// (swapped family and blob-size distribution).
pub fn gen_dataset(spec: &GenSpec, master_seed: u64) -> Result<Vec<SamplePair>> {
    let mut all = gen_synthetic(spec, master_seed, Split::Train)?;
    all.extend(gen_synthetic(spec, master_seed, Split::TestSeen)?);
    all.extend(gen_synthetic(spec, master_seed, Split::TestUnseen)?);
    Ok(all)
}

// ── resizing and augmentation ────────────────────────────────────────

pub const AUGMENT_SCALES: [f64; 3] = [0.75, 1.0, 1.25];

fn resize_plane(src: &[f64], h: usize, w: usize, ch: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow * ch];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = (oy as f64 + 0.5) * sy - 0.5;
        let y0 = (fy.floor() as isize).clamp(0, h as isize - 1) as usize;
        let y1 = ((fy.floor() as isize + 1).clamp(0, h as isize - 1)) as usize;
        let wy = fy - fy.floor();
        for ox in 0..ow {
            let fx = (ox as f64 + 0.5) * sx - 0.5;
            let x0 = (fx.floor() as isize).clamp(0, w as isize - 1) as usize;
            let x1 = ((fx.floor() as isize + 1).clamp(0, w as isize - 1)) as usize;
            let wx = fx - fx.floor();
            for c in 0..ch {
                let v00 = src[(y0 * w + x0) * ch + c];
                let v01 = src[(y0 * w + x1) * ch + c];
                let v10 = src[(y1 * w + x0) * ch + c];
                let v11 = src[(y1 * w + x1) * ch + c];
                out[(oy * ow + ox) * ch + c] =
                    (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) + wy * ((1.0 - wx) * v10 + wx * v11);
            }
        }
    }
    out
}

/// Bilinear resize of image and mask (the mask re-binarized at 0.5).
/// Fails when the result would be smaller than `min_side`.
pub fn resize_bilinear(pair: &SamplePair, scale: f64, min_side: usize) -> Result<SamplePair> {
    if scale <= 0.0 {
        return Err(Error::invalid("resize_bilinear", "scale must be positive"));
    }
    let oh = (pair.image.h as f64 * scale).round() as usize;
    let ow = (pair.image.w as f64 * scale).round() as usize;
    if oh < min_side || ow < min_side {
        return Err(Error::invalid(
            "resize_bilinear",
            format!("result {}x{} smaller than minimum side {}", oh, ow, min_side),
        ));
    }
    if oh == pair.image.h && ow == pair.image.w {
        return Ok(pair.clone());
    }
    let image = Image {
        h: oh,
        w: ow,
        data: resize_plane(&pair.image.data, pair.image.h, pair.image.w, 3, oh, ow),
    };
    let soft: Vec<f64> = pair.mask.data.iter().map(|&v| v as f64).collect();
    let resized = resize_plane(&soft, pair.mask.h, pair.mask.w, 1, oh, ow);
    let mask = Mask {
        h: oh,
        w: ow,
        data: resized.iter().map(|&v| (v >= 0.5) as u8).collect(),
    };
    Ok(SamplePair { image, mask, ..pair.clone() })
}

/// Resize restricted to the training scale set {0.75, 1, 1.25}.
pub fn resize_for_augment(pair: &SamplePair, scale: f64, min_side: usize) -> Result<SamplePair> {
    if !AUGMENT_SCALES.contains(&scale) {
        return Err(Error::invalid(
            "multiscale_augment",
            format!("scale {scale} outside {{0.75, 1, 1.25}}"),
        ));
    }
    resize_bilinear(pair, scale, min_side)
}

/// Draw one scale uniformly and resize; identity when 1.0 is drawn.
pub fn multiscale_augment(pair: &SamplePair, rng: &mut CounterRng, min_side: usize) -> Result<SamplePair> {
    let scale = AUGMENT_SCALES[rng.below(3)];
    resize_for_augment(pair, scale, min_side)
}

// ── dataset directory I/O ────────────────────────────────────────────

fn quantize(image: &Image) -> Vec<u8> {
    image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Write `<id>.ppm` / `<id>.pgm` pairs plus `manifest.tsv` (id, split,
/// seed per line, sorted by id).
pub fn save_dataset(dir: &Path, pairs: &[SamplePair]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut sorted: Vec<&SamplePair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for p in sorted {
        pnm::write_ppm(&dir.join(format!("{}.ppm", p.id)), p.image.w, p.image.h, &quantize(&p.image))?;
        let gray: Vec<u8> = p.mask.data.iter().map(|&v| v * 255).collect();
        pnm::write_pgm(&dir.join(format!("{}.pgm", p.id)), p.mask.w, p.mask.h, &gray)?;
        manifest.push_str(&format!("{}\t{}\t{}\n", p.id, p.split.as_str(), p.seed));
    }
    pnm::atomic_write(&dir.join("manifest.tsv"), manifest.as_bytes())
}

/// Load paired `<id>.ppm` / `<id>.pgm` files, sorted by id, masks
/// binarized at 128. A `manifest.tsv` (when present) supplies split and
/// seed metadata; otherwise everything lands in the train split.
pub fn load_dir(dir: &Path) -> Result<Vec<SamplePair>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut meta: BTreeMap<String, (Split, u64)> = BTreeMap::new();
    let manifest = dir.join("manifest.tsv");
    if manifest.is_file() {
        for line in std::fs::read_to_string(&manifest)?.lines() {
            let mut it = line.split('\t');
            let (Some(id), Some(split), Some(seed)) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Dataset(format!("manifest line `{line}` is not id<TAB>split<TAB>seed")));
            };
            let seed = seed
                .parse()
                .map_err(|_| Error::Dataset(format!("manifest seed `{seed}` for id {id}")))?;
            meta.insert(id.to_string(), (Split::parse(split)?, seed));
        }
    }

    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::EmptyDataset(dir.display().to_string()));
    }

    let mut problems = Vec::new();
    let mut out = Vec::new();
    for id in &ids {
        let mask_path = dir.join(format!("{id}.pgm"));
        if !mask_path.is_file() {
            problems.push(format!("{id}: missing mask partner"));
            continue;
        }
        let (iw, ih, rgb) = pnm::read_ppm(&dir.join(format!("{id}.ppm")))?;
        let (mw, mh, gray) = pnm::read_pgm(&mask_path)?;
        if (iw, ih) != (mw, mh) {
            problems.push(format!("{id}: image {iw}x{ih} vs mask {mw}x{mh}"));
            continue;
        }
        let (split, seed) = meta.get(id).copied().unwrap_or((Split::Train, 0));
        out.push(SamplePair {
            image: Image {
                h: ih,
                w: iw,
                data: rgb.iter().map(|&b| b as f64 / 255.0).collect(),
            },
            mask: Mask {
                h: mh,
                w: mw,
                data: gray.iter().map(|&b| (b >= 128) as u8).collect(),
            },
            id: id.clone(),
            seed,
            split,
        })
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(problems.join("; ")));
    }
    Ok(out)
}
