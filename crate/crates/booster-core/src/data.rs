//! Dataset loading and generation.
//!
//! Two on-disk formats are recognized: the big-endian IDX pair used by the
//! classic digit corpus, and the 3073-byte-record binary batches used by the
//! 32x32 color corpus. The synthetic generator renders stroke digits and is
//! the fallback when no real data is present; it writes genuine IDX files so
//! the same readers are exercised either way.

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;
use rand::Rng;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub struct Dataset {
    pub images: Tensor, // [n, c, h, w] in [0,1]
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::data(format!("{} labels for {} images", labels.len(), n)));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::data(format!(
                "label {} out of range for {} classes",
                bad, num_classes
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// First n examples, in stored order.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.gather(&idx)
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Dataset> {
        let (c, h, w) = self.dims();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::data(format!("index {} out of range", i)));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            images: Tensor::from_vec(vec![indices.len(), c, h, w], data)?,
            labels,
            num_classes: self.num_classes,
        })
    }

    /// Batch view as an owned tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.gather(indices)?;
        Ok((d.images, d.labels))
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub fn write_idx_images(path: &Path, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (h * w);
    if n * h * w != pixels.len() {
        return Err(Error::format("pixel buffer does not tile into images"));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(h as u32).to_be_bytes())?;
    f.write_all(&(w as u32).to_be_bytes())?;
    f.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut f = fs::File::open(path)?;
    let magic = read_u32(&mut f, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "{}: bad image magic {:#010x}",
            path.display(),
            magic
        )));
    }
    let n = read_u32(&mut f, path)? as usize;
    let h = read_u32(&mut f, path)? as usize;
    let w = read_u32(&mut f, path)? as usize;
    let mut pixels = vec![0u8; n * h * w];
    f.read_exact(&mut pixels)
        .map_err(|_| Error::format(format!("{}: truncated image payload", path.display())))?;
    Ok((n, h, w, pixels))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path)?;
    let magic = read_u32(&mut f, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "{}: bad label magic {:#010x}",
            path.display(),
            magic
        )));
    }
    let n = read_u32(&mut f, path)? as usize;
    let mut labels = vec![0u8; n];
    f.read_exact(&mut labels)
        .map_err(|_| Error::format(format!("{}: truncated label payload", path.display())))?;
    Ok(labels)
}

fn read_u32(f: &mut fs::File, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)
        .map_err(|_| Error::format(format!("{}: truncated header", path.display())))?;
    Ok(u32::from_be_bytes(b))
}

fn idx_to_dataset(n: usize, h: usize, w: usize, pixels: &[u8], labels: &[u8]) -> Result<Dataset> {
    if labels.len() != n {
        return Err(Error::format(format!(
            "image file has {} entries, label file has {}",
            n,
            labels.len()
        )));
    }
    let data: Vec<f32> = pixels.iter().map(|p| *p as f32 / 255.0).collect();
    Dataset::new(
        Tensor::from_vec(vec![n, 1, h, w], data)?,
        labels.iter().map(|l| *l as usize).collect(),
        10,
    )
}

// ---------------------------------------------------------------------------
// 32x32 color batches
// ---------------------------------------------------------------------------

const COLOR_RECORD: usize = 1 + 3 * 32 * 32;

pub fn read_color_batch(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % COLOR_RECORD != 0 {
        return Err(Error::format(format!(
            "{}: {} bytes is not a whole number of {}-byte records",
            path.display(),
            bytes.len(),
            COLOR_RECORD
        )));
    }
    let n = bytes.len() / COLOR_RECORD;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(COLOR_RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::format(format!("{}: label byte {}", path.display(), label)));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|p| *p as f32 / 255.0));
    }
    Ok((data, labels))
}

// ---------------------------------------------------------------------------
// directory loading
// ---------------------------------------------------------------------------

/// Load (train, test) from a directory laid out either as the IDX digit
/// corpus or as color binary batches.
pub fn load_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let idx_train = dir.join("train-images-idx3-ubyte");
    if idx_train.exists() {
        let (n, h, w, px) = read_idx_images(&idx_train)?;
        let ltr = read_idx_labels(&dir.join("train-labels-idx1-ubyte"))?;
        let train = idx_to_dataset(n, h, w, &px, &ltr)?;
        let (n2, h2, w2, px2) = read_idx_images(&dir.join("t10k-images-idx3-ubyte"))?;
        let lte = read_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?;
        let test = idx_to_dataset(n2, h2, w2, &px2, &lte)?;
        return Ok((train, test));
    }
    if dir.join("data_batch_1.bin").exists() {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 1..=5 {
            let p = dir.join(format!("data_batch_{}.bin", i));
            if !p.exists() {
                break;
            }
            let (d, l) = read_color_batch(&p)?;
            data.extend(d);
            labels.extend(l);
        }
        let n = labels.len();
        let train = Dataset::new(Tensor::from_vec(vec![n, 3, 32, 32], data)?, labels, 10)?;
        let (dt, lt) = read_color_batch(&dir.join("test_batch.bin"))?;
        let nt = lt.len();
        let test = Dataset::new(Tensor::from_vec(vec![nt, 3, 32, 32], dt)?, lt, 10)?;
        return Ok((train, test));
    }
    Err(Error::data(format!(
        "{}: no recognizable dataset (expected train-images-idx3-ubyte or data_batch_1.bin)",
        dir.display()
    )))
}

// ---------------------------------------------------------------------------
// synthetic stroke digits
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub jitter_px: f32,
    pub max_angle: f32,
    pub scale_lo: f32,
    pub scale_hi: f32,
    pub thickness: f32,
    pub noise: f32,
    pub clutter: usize,
    /// Per-image stroke brightness draw range.
    pub stroke_lo: f32,
    pub stroke_hi: f32,
    /// Per-segment clutter brightness draw range.
    pub clutter_lo: f32,
    pub clutter_hi: f32,
    /// Upper bound of the per-image background level draw.
    pub background: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            jitter_px: 3.0,
            max_angle: 0.35,
            scale_lo: 0.62,
            scale_hi: 1.15,
            thickness: 0.038,
            noise: 0.18,
            clutter: 3,
            stroke_lo: 0.75,
            stroke_hi: 1.15,
            clutter_lo: 0.30,
            clutter_hi: 0.60,
            background: 0.10,
        }
    }
}

type Seg = ((f32, f32), (f32, f32));

fn glyph(d: usize) -> Vec<Seg> {
    let s = |a: (f32, f32), b: (f32, f32)| (a, b);
    match d {
        0 => vec![
            s((0.32, 0.18), (0.68, 0.18)),
            s((0.68, 0.18), (0.78, 0.35)),
            s((0.78, 0.35), (0.78, 0.65)),
            s((0.78, 0.65), (0.68, 0.82)),
            s((0.68, 0.82), (0.32, 0.82)),
            s((0.32, 0.82), (0.22, 0.65)),
            s((0.22, 0.65), (0.22, 0.35)),
            s((0.22, 0.35), (0.32, 0.18)),
        ],
        1 => vec![
            s((0.35, 0.28), (0.52, 0.16)),
            s((0.52, 0.16), (0.52, 0.84)),
            s((0.36, 0.84), (0.68, 0.84)),
        ],
        2 => vec![
            s((0.26, 0.30), (0.36, 0.17)),
            s((0.36, 0.17), (0.64, 0.17)),
            s((0.64, 0.17), (0.74, 0.30)),
            s((0.74, 0.30), (0.70, 0.44)),
            s((0.70, 0.44), (0.26, 0.83)),
            s((0.26, 0.83), (0.76, 0.83)),
        ],
        3 => vec![
            s((0.27, 0.17), (0.70, 0.17)),
            s((0.70, 0.17), (0.46, 0.44)),
            s((0.46, 0.44), (0.70, 0.52)),
            s((0.70, 0.52), (0.75, 0.68)),
            s((0.75, 0.68), (0.60, 0.84)),
            s((0.60, 0.84), (0.32, 0.84)),
            s((0.32, 0.84), (0.24, 0.74)),
        ],
        4 => vec![
            s((0.60, 0.16), (0.24, 0.60)),
            s((0.24, 0.60), (0.80, 0.60)),
            s((0.62, 0.16), (0.62, 0.84)),
        ],
        5 => vec![
            s((0.74, 0.17), (0.30, 0.17)),
            s((0.30, 0.17), (0.28, 0.45)),
            s((0.28, 0.45), (0.60, 0.43)),
            s((0.60, 0.43), (0.75, 0.56)),
            s((0.75, 0.56), (0.72, 0.74)),
            s((0.72, 0.74), (0.55, 0.85)),
            s((0.55, 0.85), (0.27, 0.80)),
        ],
        6 => vec![
            s((0.66, 0.15), (0.36, 0.36)),
            s((0.36, 0.36), (0.25, 0.60)),
            s((0.25, 0.60), (0.30, 0.80)),
            s((0.30, 0.80), (0.55, 0.87)),
            s((0.55, 0.87), (0.72, 0.74)),
            s((0.72, 0.74), (0.70, 0.57)),
            s((0.70, 0.57), (0.50, 0.50)),
            s((0.50, 0.50), (0.28, 0.58)),
        ],
        7 => vec![
            s((0.24, 0.17), (0.76, 0.17)),
            s((0.76, 0.17), (0.44, 0.84)),
            s((0.38, 0.50), (0.62, 0.50)),
        ],
        8 => vec![
            s((0.50, 0.15), (0.68, 0.28)),
            s((0.68, 0.28), (0.50, 0.46)),
            s((0.50, 0.46), (0.32, 0.28)),
            s((0.32, 0.28), (0.50, 0.15)),
            s((0.50, 0.46), (0.72, 0.64)),
            s((0.72, 0.64), (0.50, 0.85)),
            s((0.50, 0.85), (0.28, 0.64)),
            s((0.28, 0.64), (0.50, 0.46)),
        ],
        _ => vec![
            s((0.50, 0.15), (0.31, 0.25)),
            s((0.31, 0.25), (0.29, 0.42)),
            s((0.29, 0.42), (0.50, 0.50)),
            s((0.50, 0.50), (0.69, 0.42)),
            s((0.69, 0.42), (0.71, 0.25)),
            s((0.71, 0.25), (0.50, 0.15)),
            s((0.70, 0.44), (0.61, 0.85)),
        ],
    }
}

/// gen_range panics on an empty interval; zeroed-out jitter knobs are valid.
fn draw(rng: &mut impl Rng, lo: f32, hi: f32) -> f32 {
    if lo < hi {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn seg_dist(p: (f32, f32), ((x0, y0), (x1, y1)): Seg) -> f32 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - x0) * dx + (p.1 - y0) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

pub const SYNTH_SIDE: usize = 28;

/// Render one jittered digit to u8 pixels. Quantizing here keeps the IDX
/// write/read round trip lossless.
fn render_digit(label: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<u8> {
    let side = SYNTH_SIDE;
    let segs = glyph(label);
    let angle = draw(rng, -cfg.max_angle, cfg.max_angle);
    let scale = draw(rng, cfg.scale_lo, cfg.scale_hi);
    let tx = draw(rng, -cfg.jitter_px, cfg.jitter_px) / side as f32;
    let ty = draw(rng, -cfg.jitter_px, cfg.jitter_px) / side as f32;
    let thickness: f32 = cfg.thickness * rng.gen_range(0.8..1.3);
    let (sin, cos) = angle.sin_cos();

    // Contrast varies per image; clutter segments land in a brightness band
    // below the strokes but well above the noise floor.
    let stroke_amp = draw(rng, cfg.stroke_lo, cfg.stroke_hi);
    let background = draw(rng, 0.0, cfg.background);
    let mut clutter = Vec::with_capacity(cfg.clutter);
    for _ in 0..cfg.clutter {
        let cx: f32 = rng.gen_range(0.1..0.9);
        let cy: f32 = rng.gen_range(0.1..0.9);
        let ex: f32 = cx + rng.gen_range(-0.25..0.25);
        let ey: f32 = cy + rng.gen_range(-0.25..0.25);
        let amp = draw(rng, cfg.clutter_lo, cfg.clutter_hi);
        clutter.push((((cx, cy), (ex, ey)), amp));
    }

    let mut out = Vec::with_capacity(side * side);
    for py in 0..side {
        for px in 0..side {
            let u = (px as f32 + 0.5) / side as f32;
            let v = (py as f32 + 0.5) / side as f32;
            // invert translate/rotate/scale about the canvas center
            let (qx, qy) = (u - 0.5 - tx, v - 0.5 - ty);
            let gx = (cos * qx + sin * qy) / scale + 0.5;
            let gy = (-sin * qx + cos * qy) / scale + 0.5;
            let mut d = f32::INFINITY;
            for s in &segs {
                d = d.min(seg_dist((gx, gy), *s));
            }
            let mut val = background + stroke_amp * (-0.5 * (d / thickness).powi(2)).exp();
            for (s, amp) in &clutter {
                let dc = seg_dist((u, v), *s);
                val += amp * (-0.5 * (dc / (thickness * 0.9)).powi(2)).exp();
            }
            val += draw(rng, -cfg.noise, cfg.noise);
            out.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Balanced, seeded corpus as raw u8 pixels plus labels.
pub fn synth_digits_raw(n: usize, seed: u64, cfg: &SynthConfig) -> (Vec<u8>, Vec<u8>) {
    let mut rng = rng::stream(seed, &[tag::SYNTH]);
    let mut pixels = Vec::with_capacity(n * SYNTH_SIDE * SYNTH_SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 10;
        pixels.extend(render_digit(label, cfg, &mut rng));
        labels.push(label as u8);
    }
    // interleave classes but decorrelate position from label
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let per = SYNTH_SIDE * SYNTH_SIDE;
    let mut sp = Vec::with_capacity(pixels.len());
    let mut sl = Vec::with_capacity(n);
    for &i in &order {
        sp.extend_from_slice(&pixels[i * per..(i + 1) * per]);
        sl.push(labels[i]);
    }
    (sp, sl)
}

/// Write a train/test pair of IDX files into `dir` using the standard names.
pub fn write_synth_corpus(dir: &Path, n_train: usize, n_test: usize, seed: u64, cfg: &SynthConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (tp, tl) = synth_digits_raw(n_train, seed, cfg);
    write_idx_images(&dir.join("train-images-idx3-ubyte"), SYNTH_SIDE, SYNTH_SIDE, &tp)?;
    write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &tl)?;
    // disjoint stream for the test split
    let (ep, el) = synth_digits_raw(n_test, seed ^ 0x9e37_79b9_7f4a_7c15, cfg);
    write_idx_images(&dir.join("t10k-images-idx3-ubyte"), SYNTH_SIDE, SYNTH_SIDE, &ep)?;
    write_idx_labels(&dir.join("t10k-labels-idx1-ubyte"), &el)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u8> = (0..2 * 9).map(|i| (i * 7) as u8).collect();
        let ip = dir.path().join("imgs");
        write_idx_images(&ip, 3, 3, &px).unwrap();
        let (n, h, w, back) = read_idx_images(&ip).unwrap();
        assert_eq!((n, h, w), (2, 3, 3));
        assert_eq!(back, px);

        let lp = dir.path().join("lbls");
        write_idx_labels(&lp, &[7, 1]).unwrap();
        assert_eq!(read_idx_labels(&lp).unwrap(), vec![7, 1]);
    }

    #[test]
    fn idx_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk");
        fs::write(&p, [0, 0, 8, 99, 0, 0, 0, 0]).unwrap();
        assert!(matches!(read_idx_images(&p), Err(Error::Format(_))));
    }

    #[test]
    fn idx_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_images(&dir.path().join("train-images-idx3-ubyte"), 3, 3, &[0u8; 2 * 9]).unwrap();
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &[1, 2, 3]).unwrap();
        assert!(matches!(load_dir(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn color_batch_parses_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat_n(128u8, 3072));
        bytes.push(9);
        bytes.extend(std::iter::repeat_n(0u8, 3072));
        fs::write(&p, &bytes).unwrap();
        let (data, labels) = read_color_batch(&p).unwrap();
        assert_eq!(labels, vec![3, 9]);
        assert_eq!(data.len(), 2 * 3072);
        assert!((data[0] - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn color_batch_label_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        let mut bytes = vec![255u8];
        bytes.extend(std::iter::repeat_n(0u8, 3072));
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_color_batch(&p), Err(Error::Format(_))));
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let cfg = SynthConfig::default();
        let (a, la) = synth_digits_raw(30, 5, &cfg);
        let (b, lb) = synth_digits_raw(30, 5, &cfg);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = synth_digits_raw(30, 6, &cfg);
        assert_ne!(a, c);
    }

    #[test]
    fn synth_corpus_loads_back_as_dataset() {
        let dir = tempfile::tempdir().unwrap();
        write_synth_corpus(dir.path(), 40, 20, 1, &SynthConfig::default()).unwrap();
        let (train, test) = load_dir(dir.path()).unwrap();
        assert_eq!(train.len(), 40);
        assert_eq!(test.len(), 20);
        assert_eq!(train.dims(), (1, 28, 28));
        // balanced labels: each class appears 4 times in 40
        for cls in 0..10 {
            assert_eq!(train.labels.iter().filter(|l| **l == cls).count(), 4);
        }
        assert!(train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn glyphs_are_pairwise_distinct() {
        let cfg = SynthConfig {
            jitter_px: 0.0,
            max_angle: 0.0,
            scale_lo: 0.999,
            scale_hi: 1.0,
            noise: 0.0,
            clutter: 0,
            ..SynthConfig::default()
        };
        let mut rng = crate::rng::stream(0, &[tag::SYNTH]);
        let renders: Vec<Vec<u8>> = (0..10).map(|d| render_digit(d, &cfg, &mut rng)).collect();
        for i in 0..10 {
            for j in i + 1..10 {
                let diff: u64 = renders[i]
                    .iter()
                    .zip(&renders[j])
                    .map(|(a, b)| (*a as i64 - *b as i64).unsigned_abs())
                    .sum();
                assert!(diff > 2000, "digits {} and {} render nearly identically", i, j);
            }
        }
    }
}
