//! Synthetic multi-modal phantom generation, dataset splitting, and tensor /
//! image file I/O. Phantoms stand in for clinical data: each sample is one
//! elliptical "brain" containing three nested elliptical tumor regions,
//! rendered once per modality with modality-specific contrast and noise over
//! an exactly-zero background (as in skull-stripped MRI).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::seeds;
use crate::tensor::{TensorData, TensorError, TensorShape};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad tensor file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// ".ten" tensor files: magic "STEN", version u8 = 1, rank u8 = 4,
// four u32 little-endian dims (B, C, H, W), then B*C*H*W f32 LE values.
// ---------------------------------------------------------------------------

const TEN_MAGIC: &[u8; 4] = b"STEN";
const TEN_VERSION: u8 = 1;

pub fn write_ten(w: &mut impl Write, t: &TensorData) -> std::io::Result<()> {
    w.write_all(TEN_MAGIC)?;
    w.write_all(&[TEN_VERSION, 4])?;
    for d in [
        t.shape.batch as u32,
        t.shape.channels as u32,
        t.shape.height as u32,
        t.shape.width as u32,
    ] {
        w.write_all(&d.to_le_bytes())?;
    }
    for v in &t.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads exactly one ".ten" record from the stream, leaving anything after
/// it unread (checkpoints and protocol messages embed these back to back).
pub fn read_ten_prefix(r: &mut impl Read, path: &Path) -> Result<TensorData, DataError> {
    let bad = |reason: String| DataError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(io_err(path))?;
    if &head[..4] != TEN_MAGIC {
        return Err(bad(format!("bad magic {:?}", &head[..4])));
    }
    if head[4] != TEN_VERSION {
        return Err(bad(format!("unsupported version {}", head[4])));
    }
    if head[5] != 4 {
        return Err(bad(format!("unsupported rank {}", head[5])));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf).map_err(io_err(path))?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let shape = TensorShape::new(dims[0], dims[1], dims[2], dims[3])
        .map_err(|e| bad(e.to_string()))?;
    let mut values = vec![0.0f32; shape.numel()];
    let mut buf = vec![0u8; shape.numel() * 4];
    r.read_exact(&mut buf).map_err(|_| {
        bad(format!(
            "payload shorter than the {} elements promised by the header",
            shape.numel()
        ))
    })?;
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        values[i] = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
    }
    Ok(TensorData { shape, values })
}

pub fn read_ten(r: &mut impl Read, path: &Path) -> Result<TensorData, DataError> {
    let t = read_ten_prefix(r, path)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(io_err(path))? != 0 {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            reason: "trailing bytes after payload".into(),
        });
    }
    Ok(t)
}

pub fn ten_bytes(t: &TensorData) -> Vec<u8> {
    let mut out = Vec::with_capacity(22 + t.values.len() * 4);
    write_ten(&mut out, t).expect("writing to Vec cannot fail");
    out
}

pub fn save_ten(path: &Path, t: &TensorData) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    write_ten(&mut f, t).map_err(io_err(path))
}

pub fn load_ten(path: &Path) -> Result<TensorData, DataError> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    read_ten(&mut f, path)
}

// ---------------------------------------------------------------------------
// PGM export: binary P5, 8-bit, min-max scaled per image.
// A degenerate (constant) range maps to all zeros.
// ---------------------------------------------------------------------------

pub fn pgm_bytes(values: &[f32], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(values.len(), height * width);
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for v in values {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for v in values {
        let byte = if span > 0.0 {
            (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        out.push(byte);
    }
    out
}

pub fn save_pgm(path: &Path, values: &[f32], height: usize, width: usize) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    fs::write(path, pgm_bytes(values, height, width)).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Phantoms
// ---------------------------------------------------------------------------

/// One synthetic subject: K co-registered single-channel modality images of
/// shape (1, 1, S, S) and a label mask with classes 0..3.
#[derive(Clone, Debug)]
pub struct PhantomSample {
    pub modalities: Vec<TensorData>,
    pub label: TensorData,
}

#[derive(Clone, Debug)]
pub struct PhantomSet {
    pub n: usize,
    pub sites: usize,
    pub size: usize,
    pub seed: u64,
    pub samples: Vec<PhantomSample>,
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
    cos_t: f32,
    sin_t: f32,
}

impl Ellipse {
    fn contains(&self, x: f32, y: f32) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn scaled(&self, f: f32) -> Ellipse {
        Ellipse {
            a: self.a * f,
            b: self.b * f,
            ..*self
        }
    }
}

const NOISE_STD: f32 = 0.02;
const BRAIN_BASE: f32 = 0.30;
const TUMOR_LEVELS: [f32; 3] = [0.55, 0.75, 0.95];

/// Per-modality contrast table: intensity for brain tissue and the three
/// tumor classes. Stable for a given (seed, modality).
fn modality_contrast(seed: u64, modality: usize) -> [f32; 4] {
    let mut rng = seeds::rng(seed, &[seeds::TAG_PHANTOM, u64::MAX, modality as u64]);
    let brain = BRAIN_BASE + rng.random_range(0.0..0.10);
    let mut tumor = TUMOR_LEVELS;
    tumor.shuffle(&mut rng);
    [
        brain,
        tumor[0] + rng.random_range(-0.04..0.04),
        tumor[1] + rng.random_range(-0.04..0.04),
        tumor[2] + rng.random_range(-0.04..0.04),
    ]
}

/// Generates `n` phantoms with `sites` modalities of size `size`x`size`.
/// Deterministic: the same arguments always produce the same set.
pub fn gen_phantoms(n: usize, sites: usize, size: usize, seed: u64) -> Result<PhantomSet, DataError> {
    if size % 16 != 0 || size == 0 {
        return Err(DataError::Invalid(format!(
            "phantom size must be a positive multiple of 16, got {size}"
        )));
    }
    if sites == 0 {
        return Err(DataError::Invalid("need at least one site".into()));
    }
    let contrasts: Vec<[f32; 4]> = (0..sites).map(|m| modality_contrast(seed, m)).collect();
    let samples = (0..n)
        .map(|idx| gen_sample(idx, sites, size, seed, &contrasts))
        .collect();
    Ok(PhantomSet {
        n,
        sites,
        size,
        seed,
        samples,
    })
}

fn gen_sample(
    idx: usize,
    sites: usize,
    size: usize,
    seed: u64,
    contrasts: &[[f32; 4]],
) -> PhantomSample {
    let mut rng = seeds::rng(seed, &[seeds::TAG_PHANTOM, idx as u64]);
    let s = size as f32;
    let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let brain = Ellipse {
        cx: s * 0.5 + rng.random_range(-0.05..0.05) * s,
        cy: s * 0.5 + rng.random_range(-0.05..0.05) * s,
        a: rng.random_range(0.30..0.42) * s,
        b: rng.random_range(0.30..0.42) * s,
        cos_t: theta.cos(),
        sin_t: theta.sin(),
    };
    let ta = rng.random_range(0.10..0.18) * s;
    let tb = rng.random_range(0.10..0.18) * s;
    // keep the whole tumor inside the brain
    let margin = brain.a.min(brain.b) - ta.max(tb);
    let dir: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let r = rng.random_range(0.0..0.5) * margin.max(0.0);
    let phi: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let outer = Ellipse {
        cx: brain.cx + dir.cos() * r,
        cy: brain.cy + dir.sin() * r,
        a: ta,
        b: tb,
        cos_t: phi.cos(),
        sin_t: phi.sin(),
    };
    let mid = outer.scaled(rng.random_range(0.60..0.80));
    let core = outer.scaled(rng.random_range(0.30..0.50));
    // per-sample, per-modality intensity jitter
    let jitter: Vec<f32> = (0..sites).map(|_| rng.random_range(-0.03..0.03)).collect();

    let shape = TensorShape::new(1, 1, size, size).expect("validated size");
    let mut label = vec![0.0f32; size * size];
    let mut tissue = vec![0u8; size * size]; // 0 bg, 1 brain, 2..4 tumor rings
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let i = y * size + x;
            if core.contains(fx, fy) {
                tissue[i] = 4;
                label[i] = 3.0;
            } else if mid.contains(fx, fy) {
                tissue[i] = 3;
                label[i] = 2.0;
            } else if outer.contains(fx, fy) {
                tissue[i] = 2;
                label[i] = 1.0;
            } else if brain.contains(fx, fy) {
                tissue[i] = 1;
            }
        }
    }
    let modalities = (0..sites)
        .map(|m| {
            let mut noise_rng = seeds::rng(seed, &[seeds::TAG_PHANTOM, idx as u64, m as u64]);
            let normal = Normal::new(0.0f32, NOISE_STD).expect("fixed std");
            let values = tissue
                .iter()
                .map(|&t| {
                    if t == 0 {
                        0.0
                    } else {
                        let base = contrasts[m][t as usize - 1] + jitter[m];
                        (base + normal.sample(&mut noise_rng)).clamp(0.01, 1.0)
                    }
                })
                .collect();
            TensorData { shape, values }
        })
        .collect();
    PhantomSample {
        modalities,
        label: TensorData {
            shape,
            values: label,
        },
    }
}

// ---------------------------------------------------------------------------
// Dataset split: 70/10/20 with the exact counts train = floor(0.7 n),
// test = ceil(0.2 n), val = remainder (484 -> 338/49/97).
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_dataset(n: usize, seed: u64) -> Result<DatasetSplit, DataError> {
    if n < 10 {
        return Err(DataError::Invalid(format!(
            "dataset split needs n >= 10, got {n}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = seeds::rng(seed, &[seeds::TAG_SPLIT]);
    indices.shuffle(&mut rng);
    let n_train = n * 7 / 10;
    let n_test = (n * 2).div_ceil(10);
    let n_val = n - n_train - n_test;
    Ok(DatasetSplit {
        train: indices[..n_train].to_vec(),
        val: indices[n_train..n_train + n_val].to_vec(),
        test: indices[n_train + n_val..].to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Phantom set directory layout: sample_%04d/mod_%d.ten, sample_%04d/label.ten
// and a manifest text file with n, sites, size, seed.
// ---------------------------------------------------------------------------

pub fn save_phantom_set(dir: &Path, set: &PhantomSet) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = format!(
        "n = {}\nsites = {}\nsize = {}\nseed = {}\n",
        set.n, set.sites, set.size, set.seed
    );
    fs::write(dir.join("manifest.txt"), manifest).map_err(io_err(dir))?;
    for (i, sample) in set.samples.iter().enumerate() {
        let sdir = dir.join(format!("sample_{i:04}"));
        for (m, img) in sample.modalities.iter().enumerate() {
            save_ten(&sdir.join(format!("mod_{m}.ten")), img)?;
        }
        save_ten(&sdir.join("label.ten"), &sample.label)?;
    }
    Ok(())
}

pub fn load_phantom_set(dir: &Path) -> Result<PhantomSet, DataError> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut n = None;
    let mut sites = None;
    let mut size = None;
    let mut seed = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| DataError::Format {
            path: manifest_path.clone(),
            reason: format!("bad manifest line '{line}'"),
        })?;
        let v = v.trim();
        match k.trim() {
            "n" => n = v.parse().ok(),
            "sites" => sites = v.parse().ok(),
            "size" => size = v.parse().ok(),
            "seed" => seed = v.parse().ok(),
            other => {
                return Err(DataError::Format {
                    path: manifest_path.clone(),
                    reason: format!("unknown manifest key '{other}'"),
                })
            }
        }
    }
    let (n, sites, size, seed) = match (n, sites, size, seed) {
        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
        _ => {
            return Err(DataError::Format {
                path: manifest_path,
                reason: "manifest must define n, sites, size, seed".into(),
            })
        }
    };
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let sdir = dir.join(format!("sample_{i:04}"));
        let modalities = (0..sites)
            .map(|m| load_ten(&sdir.join(format!("mod_{m}.ten"))))
            .collect::<Result<Vec<_>, _>>()?;
        let label = load_ten(&sdir.join("label.ten"))?;
        samples.push(PhantomSample { modalities, label });
    }
    Ok(PhantomSet {
        n,
        sites,
        size,
        seed,
        samples,
    })
}
