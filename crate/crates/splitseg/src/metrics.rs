//! SSIM leakage metric, segmentation Dice score, and leakage report assembly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::tensor::TensorData;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0}")]
    Invalid(String),
    #[error("label {0} out of range (classes are 0..=3)")]
    BadLabel(f32),
    #[error("empty input: {0}")]
    Empty(String),
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

/// Standard SSIM parameterization: 11x11 Gaussian window with sigma 1.5,
/// K1 = 0.01, K2 = 0.03, dynamic range 1.0 (images are min-max rescaled to
/// [0, 1] per image before comparison).
#[derive(Clone, Copy, Debug)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized 1-D window weights (the 2-D window is their outer product).
    pub fn weights(&self) -> Vec<f64> {
        let r = (self.window / 2) as isize;
        let mut w: Vec<f64> = (-r..=r)
            .map(|i| (-((i * i) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        w
    }
}

#[derive(Clone, Debug)]
pub struct SsimScores {
    pub per_sample: Vec<f32>,
    pub mean: f32,
}

fn checked_pair(a: &TensorData, b: &TensorData, window: usize) -> Result<(), MetricsError> {
    if a.shape != b.shape {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} vs {}",
            a.shape, b.shape
        )));
    }
    if a.shape.channels != 1 {
        return Err(MetricsError::Invalid(format!(
            "ssim expects single-channel images, got {} channels",
            a.shape.channels
        )));
    }
    if a.shape.height < window || a.shape.width < window {
        return Err(MetricsError::ShapeMismatch(format!(
            "spatial size {}x{} is smaller than the {window}x{window} window",
            a.shape.height, a.shape.width
        )));
    }
    Ok(())
}

/// Separable Gaussian blur over the valid region of one image.
/// Input h x w, output (h - win + 1) x (w - win + 1).
fn blur_valid(img: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut horiz = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, wi) in win.iter().enumerate() {
                s += wi * img[y * w + x + i];
            }
            horiz[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, wi) in win.iter().enumerate() {
                s += wi * horiz[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, p: &SsimParams) -> f64 {
    let win = p.weights();
    let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let aa: Vec<f64> = af.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = bf.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = af.iter().zip(&bf).map(|(x, y)| x * y).collect();
    let mu_a = blur_valid(&af, h, w, &win);
    let mu_b = blur_valid(&bf, h, w, &win);
    let m_aa = blur_valid(&aa, h, w, &win);
    let m_bb = blur_valid(&bb, h, w, &win);
    let m_ab = blur_valid(&ab, h, w, &win);
    let (c1, c2) = (p.c1(), p.c2());
    let mut sum = 0.0f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    sum / mu_a.len() as f64
}

/// SSIM on the images exactly as given (no rescaling). Mean of the local SSIM
/// map over every position where the full window fits.
pub fn ssim_prescaled(
    a: &TensorData,
    b: &TensorData,
    p: &SsimParams,
) -> Result<SsimScores, MetricsError> {
    checked_pair(a, b, p.window)?;
    let s = a.shape;
    let hw = s.hw();
    let per_sample: Vec<f32> = (0..s.batch)
        .map(|i| {
            ssim_plane(
                &a.values[i * hw..(i + 1) * hw],
                &b.values[i * hw..(i + 1) * hw],
                s.height,
                s.width,
                p,
            ) as f32
        })
        .collect();
    let mean = per_sample.iter().sum::<f32>() / per_sample.len() as f32;
    Ok(SsimScores { per_sample, mean })
}

/// Min-max rescale to [0, 1]; a constant image maps to all zeros.
pub fn rescale_unit(values: &[f32]) -> Vec<f32> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for v in values {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let span = hi - lo;
    if span > 0.0 {
        values.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// The leakage metric: both images are min-max rescaled to [0, 1] per image,
/// then compared with [`ssim_prescaled`].
pub fn ssim(a: &TensorData, b: &TensorData, p: &SsimParams) -> Result<SsimScores, MetricsError> {
    checked_pair(a, b, p.window)?;
    let s = a.shape;
    let hw = s.hw();
    let rescale_batch = |t: &TensorData| -> TensorData {
        let mut values = Vec::with_capacity(t.values.len());
        for i in 0..s.batch {
            values.extend(rescale_unit(&t.values[i * hw..(i + 1) * hw]));
        }
        TensorData {
            shape: t.shape,
            values,
        }
    };
    ssim_prescaled(&rescale_batch(a), &rescale_batch(b), p)
}

// ---------------------------------------------------------------------------
// Dice
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiceScores {
    /// Foreground classes 1..=3.
    pub per_class: [f32; 3],
    pub mean: f32,
}

/// Intersection / prediction / truth pixel counts per foreground class.
/// Accumulate over batches with [`DiceCounts::merge`], then [`DiceCounts::scores`].
#[derive(Clone, Copy, Debug, Default)]
pub struct DiceCounts {
    pub inter: [u64; 3],
    pub pred: [u64; 3],
    pub truth: [u64; 3],
}

fn label_at(v: f32) -> Result<usize, MetricsError> {
    if v == 0.0 || v == 1.0 || v == 2.0 || v == 3.0 {
        Ok(v as usize)
    } else {
        Err(MetricsError::BadLabel(v))
    }
}

impl DiceCounts {
    pub fn from_labels(pred: &TensorData, truth: &TensorData) -> Result<Self, MetricsError> {
        if pred.shape != truth.shape {
            return Err(MetricsError::ShapeMismatch(format!(
                "{} vs {}",
                pred.shape, truth.shape
            )));
        }
        let mut c = DiceCounts::default();
        for (&p, &t) in pred.values.iter().zip(&truth.values) {
            let (p, t) = (label_at(p)?, label_at(t)?);
            if p > 0 {
                c.pred[p - 1] += 1;
            }
            if t > 0 {
                c.truth[t - 1] += 1;
            }
            if p == t && p > 0 {
                c.inter[p - 1] += 1;
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &DiceCounts) {
        for i in 0..3 {
            self.inter[i] += other.inter[i];
            self.pred[i] += other.pred[i];
            self.truth[i] += other.truth[i];
        }
    }

    /// Dice_c = 2|P∩T| / (|P|+|T|); a class absent from both sides scores 1.
    pub fn scores(&self) -> DiceScores {
        let mut per_class = [0.0f32; 3];
        for i in 0..3 {
            let denom = self.pred[i] + self.truth[i];
            per_class[i] = if denom == 0 {
                1.0
            } else {
                2.0 * self.inter[i] as f32 / denom as f32
            };
        }
        DiceScores {
            per_class,
            mean: (per_class[0] + per_class[1] + per_class[2]) / 3.0,
        }
    }
}

/// Per-class and mean-foreground Dice between two label maps (classes 0..=3,
/// class 0 is background and excluded from the mean).
pub fn mean_dice(pred: &TensorData, truth: &TensorData) -> Result<DiceScores, MetricsError> {
    Ok(DiceCounts::from_labels(pred, truth)?.scores())
}

// ---------------------------------------------------------------------------
// Leakage report
// ---------------------------------------------------------------------------

/// One scored inversion: the SSIM between an original sample and its
/// reconstruction from the level-`level` share of `site` under `defense`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimRecord {
    pub site: usize,
    pub level: usize,
    pub sample: usize,
    pub defense: String,
    pub ssim: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeakageRow {
    pub site: usize,
    pub level: usize,
    pub defense: String,
    pub mean_ssim: f32,
    pub per_sample: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeakageReport {
    pub rows: Vec<LeakageRow>,
}

/// Groups per-sample SSIM records by (site, level, defense), in that order.
pub fn build_leakage_report(records: &[SsimRecord]) -> Result<LeakageReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty("no inversion results to report".into()));
    }
    let mut groups: BTreeMap<(usize, usize, String), Vec<(usize, f32)>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.site, r.level, r.defense.clone()))
            .or_default()
            .push((r.sample, r.ssim));
    }
    let rows = groups
        .into_iter()
        .map(|((site, level, defense), mut samples)| {
            samples.sort_by_key(|(s, _)| *s);
            let per_sample: Vec<f32> = samples.iter().map(|(_, v)| *v).collect();
            let mean_ssim = per_sample.iter().sum::<f32>() / per_sample.len() as f32;
            LeakageRow {
                site,
                level,
                defense,
                mean_ssim,
                per_sample,
            }
        })
        .collect();
    Ok(LeakageReport { rows })
}

impl LeakageReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("site,level,defense,mean_ssim,ssim_per_sample\n");
        for r in &self.rows {
            let samples: Vec<String> = r.per_sample.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{}",
                r.site,
                r.level,
                r.defense,
                r.mean_ssim,
                samples.join("/")
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::from("leakage summary (mean SSIM original vs inversion)\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "  site {} level {} [{}]: {:.4} over {} samples",
                r.site,
                r.level,
                r.defense,
                r.mean_ssim,
                r.per_sample.len()
            );
        }
        out
    }
}
