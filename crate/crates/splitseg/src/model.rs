//! U-Net and split U-Net construction.
//!
//! The default network has encoder widths [32, 32, 64, 128, 256] and decoder
//! widths [128, 64, 32, 32] over 4 down/up levels. The split variant gives
//! every site its own single-channel encoder with the encoder widths divided
//! by the number of sites K; the decoder at the label site consumes the
//! channel-concatenated activation bundles, whose totals match the default
//! encoder widths again.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{self, DataError};
use crate::nn::{Conv1x1, ConvBlock, Param, ParamTape, TConv2d};
use crate::seeds;
use crate::tensor::{Graph, Tensor, TensorData, TensorError, TensorShape};

pub const DEFAULT_WIDTHS: [usize; 9] = [32, 32, 64, 128, 256, 128, 64, 32, 32];
pub const NUM_CLASSES: usize = 4;
/// Encoder levels 0..=4; level i lives at spatial scale (H/2^i, W/2^i).
pub const ENCODER_LEVELS: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bad model config: {0}")]
    Config(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Which encoder levels are shared with (and consumed by) the decoder site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipVariant {
    /// All five activation levels are shared (full skip connections).
    AllSkips,
    /// Only the bottleneck x4 is shared; the decoder runs an upsample-only path.
    NoSkips,
    /// Only x3 and x4 are shared; levels 0..2 are zero-filled at the decoder
    /// so the channel arithmetic stays that of the full network.
    X3X4Only,
}

impl SkipVariant {
    pub fn shared_levels(&self) -> &'static [usize] {
        match self {
            SkipVariant::AllSkips => &[0, 1, 2, 3, 4],
            SkipVariant::NoSkips => &[4],
            SkipVariant::X3X4Only => &[3, 4],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SkipVariant::AllSkips => "all_skips",
            SkipVariant::NoSkips => "no_skips",
            SkipVariant::X3X4Only => "x3_x4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all_skips" => Some(SkipVariant::AllSkips),
            "no_skips" => Some(SkipVariant::NoSkips),
            "x3_x4" => Some(SkipVariant::X3X4Only),
            _ => None,
        }
    }
}

/// Feature widths and channel counts of the network family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub widths: [usize; 9],
    pub out_classes: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            in_channels: 4,
            widths: DEFAULT_WIDTHS,
            out_classes: NUM_CLASSES,
        }
    }
}

impl ArchSpec {
    pub fn encoder_widths(&self) -> [usize; 5] {
        [
            self.widths[0],
            self.widths[1],
            self.widths[2],
            self.widths[3],
            self.widths[4],
        ]
    }

    pub fn decoder_widths(&self) -> [usize; 4] {
        [self.widths[5], self.widths[6], self.widths[7], self.widths[8]]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SplitConfig {
    pub num_sites: usize,
    pub label_site: usize,
    pub skip_variant: SkipVariant,
}

impl SplitConfig {
    pub fn validate(&self, arch: &ArchSpec) -> Result<(), ModelError> {
        if self.num_sites == 0 {
            return Err(ModelError::Config("need at least one site".into()));
        }
        for (i, w) in arch.encoder_widths().iter().enumerate() {
            if w % self.num_sites != 0 {
                return Err(ModelError::Config(format!(
                    "encoder width {w} at level {i} is not divisible by {} sites",
                    self.num_sites
                )));
            }
        }
        if self.label_site >= self.num_sites {
            return Err(ModelError::Config(format!(
                "label site {} out of range for {} sites",
                self.label_site, self.num_sites
            )));
        }
        Ok(())
    }
}

/// Map from encoder level index to the activation tensor x_i of one site.
pub struct ActivationBundle {
    pub site: usize,
    pub levels: BTreeMap<usize, Tensor>,
}

impl ActivationBundle {
    /// The subset of levels a site shares under `variant`.
    pub fn shared(&self, variant: SkipVariant) -> BTreeMap<usize, Tensor> {
        variant
            .shared_levels()
            .iter()
            .filter_map(|l| self.levels.get(l).map(|t| (*l, t.clone())))
            .collect()
    }
}

/// Per-site encoder: five conv blocks separated by 2x2 max pooling.
pub struct SplitEncoder {
    pub site: usize,
    pub in_channels: usize,
    pub widths: [usize; 5],
    blocks: Vec<ConvBlock>,
}

impl SplitEncoder {
    pub fn new(site: usize, in_channels: usize, widths: [usize; 5], seed: u64) -> Self {
        let mut rng = seeds::rng(seed, &[seeds::TAG_PARAMS, 0, site as u64]);
        let mut blocks = Vec::with_capacity(ENCODER_LEVELS);
        let mut cin = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(ConvBlock::new(&format!("l{i}"), cin, w, &mut rng));
            cin = w;
        }
        Self {
            site,
            in_channels,
            widths,
            blocks,
        }
    }

    fn check_input(&self, images: &Tensor) -> Result<(), ModelError> {
        let s = images.shape();
        if s.channels != self.in_channels {
            return Err(ModelError::Config(format!(
                "encoder for site {} expects {} input channels, got {}",
                self.site, self.in_channels, s.channels
            )));
        }
        if s.height % 16 != 0 || s.width % 16 != 0 {
            return Err(ModelError::Config(format!(
                "input H and W must be divisible by 16, got {s}"
            )));
        }
        Ok(())
    }

    /// Computes the full bundle {x_0 .. x_4}.
    pub fn forward(
        &self,
        images: &Tensor,
        tape: &mut ParamTape,
    ) -> Result<ActivationBundle, ModelError> {
        self.check_input(images)?;
        let mut levels = BTreeMap::new();
        let mut x = self.blocks[0].forward(images, tape)?;
        levels.insert(0, x.clone());
        for i in 1..ENCODER_LEVELS {
            x = self.blocks[i].forward(&x.max_pool2()?, tape)?;
            levels.insert(i, x.clone());
        }
        Ok(ActivationBundle {
            site: self.site,
            levels,
        })
    }

    /// Computes only x_level (the attack replica runs this).
    pub fn forward_to_level(
        &self,
        images: &Tensor,
        level: usize,
        tape: &mut ParamTape,
    ) -> Result<Tensor, ModelError> {
        if level >= ENCODER_LEVELS {
            return Err(ModelError::Config(format!(
                "encoder has levels 0..{}, got {level}",
                ENCODER_LEVELS - 1
            )));
        }
        self.check_input(images)?;
        let mut x = self.blocks[0].forward(images, tape)?;
        for i in 1..=level {
            x = self.blocks[i].forward(&x.max_pool2()?, tape)?;
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.values.len()).sum()
    }
}

/// Decoder at the label site: four up blocks and a 1x1 classification head.
pub struct Decoder {
    pub variant: SkipVariant,
    pub skip_widths: [usize; 5],
    pub out_classes: usize,
    ups: Vec<TConv2d>,
    blocks: Vec<ConvBlock>,
    head: Conv1x1,
}

impl Decoder {
    pub fn new(arch: &ArchSpec, variant: SkipVariant, seed: u64) -> Self {
        let mut rng = seeds::rng(seed, &[seeds::TAG_PARAMS, 1]);
        let enc_w = arch.encoder_widths();
        let dec_w = arch.decoder_widths();
        let mut ups = Vec::with_capacity(4);
        let mut blocks = Vec::with_capacity(4);
        let mut cin = enc_w[4];
        for j in 0..4 {
            let skip_level = 3 - j;
            ups.push(TConv2d::new(&format!("u{}", j + 5), cin, dec_w[j], &mut rng));
            let skip_c = if variant == SkipVariant::NoSkips {
                0
            } else {
                enc_w[skip_level]
            };
            blocks.push(ConvBlock::new(
                &format!("d{}", j + 5),
                dec_w[j] + skip_c,
                dec_w[j],
                &mut rng,
            ));
            cin = dec_w[j];
        }
        let head = Conv1x1::new("head", dec_w[3], arch.out_classes, &mut rng);
        Self {
            variant,
            skip_widths: enc_w,
            out_classes: arch.out_classes,
            ups,
            blocks,
            head,
        }
    }

    /// Runs the decoder on per-level tensors that are already concatenated
    /// across sites. `cat` must contain level 4 plus, for skip variants, the
    /// skip levels the variant consumes.
    pub fn forward_cat(
        &self,
        cat: &BTreeMap<usize, Tensor>,
        tape: &mut ParamTape,
    ) -> Result<Tensor, ModelError> {
        let bottleneck = cat
            .get(&4)
            .ok_or_else(|| ModelError::Config("decoder needs the level-4 bottleneck".into()))?;
        let mut x = bottleneck.clone();
        for j in 0..4 {
            let skip_level = 3 - j;
            x = self.ups[j].forward(&x, tape)?;
            if self.variant != SkipVariant::NoSkips {
                let skip = match cat.get(&skip_level) {
                    Some(t) => t.clone(),
                    None if self.variant == SkipVariant::X3X4Only && skip_level <= 2 => {
                        let s = x.shape();
                        x.graph().zeros(TensorShape::new(
                            s.batch,
                            self.skip_widths[skip_level],
                            s.height,
                            s.width,
                        )?)
                    }
                    None => {
                        return Err(ModelError::Config(format!(
                            "decoder variant {} needs level {skip_level}",
                            self.variant.name()
                        )))
                    }
                };
                x = x.graph().concat_channels(&[x.clone(), skip])?;
            }
            x = self.blocks[j].forward(&x, tape)?;
        }
        Ok(self.head.forward(&x, tape)?)
    }

    /// Concatenates the K bundles per level (ascending site index) and runs
    /// the decoder. Returns logits of shape (B, out_classes, H, W).
    pub fn forward(
        &self,
        bundles: &[ActivationBundle],
        tape: &mut ParamTape,
    ) -> Result<Tensor, ModelError> {
        if bundles.is_empty() {
            return Err(ModelError::Config("decoder got no bundles".into()));
        }
        let mut order: Vec<&ActivationBundle> = bundles.iter().collect();
        order.sort_by_key(|b| b.site);
        let needed: Vec<usize> = match self.variant {
            SkipVariant::AllSkips => vec![0, 1, 2, 3, 4],
            SkipVariant::NoSkips => vec![4],
            SkipVariant::X3X4Only => vec![3, 4],
        };
        let mut cat = BTreeMap::new();
        for &level in &needed {
            let parts: Vec<Tensor> = order
                .iter()
                .map(|b| {
                    b.levels.get(&level).cloned().ok_or_else(|| {
                        ModelError::Config(format!(
                            "bundle from site {} is missing level {level}",
                            b.site
                        ))
                    })
                })
                .collect::<Result<_, _>>()?;
            let first = parts[0].shape();
            for p in &parts[1..] {
                let s = p.shape();
                if (s.batch, s.height, s.width) != (first.batch, first.height, first.width) {
                    return Err(ModelError::Config(format!(
                        "bundle shapes disagree at level {level}: {s} vs {first}"
                    )));
                }
            }
            let joined = parts[0].graph().concat_channels(&parts)?;
            if joined.shape().channels != self.skip_widths[level] {
                return Err(ModelError::Config(format!(
                    "concatenated level {level} has {} channels, decoder expects {}",
                    joined.shape().channels,
                    self.skip_widths[level]
                )));
            }
            cat.insert(level, joined);
        }
        self.forward_cat(&cat, tape)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for j in 0..4 {
            out.push(&self.ups[j].weight);
            out.push(&self.ups[j].bias);
            out.extend(self.blocks[j].params());
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for (up, block) in self.ups.iter_mut().zip(self.blocks.iter_mut()) {
            out.push(&mut up.weight);
            out.push(&mut up.bias);
            out.extend(block.params_mut());
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.values.len()).sum()
    }
}

/// Monolithic U-Net: one encoder plus the decoder, wired without the
/// bundle/concatenation machinery. Serves as the centralized baseline and as
/// the equivalence oracle for the K=1 split model.
pub struct UNet {
    pub encoder: SplitEncoder,
    pub decoder: Decoder,
}

impl UNet {
    pub fn forward(&self, images: &Tensor, tape: &mut ParamTape) -> Result<Tensor, ModelError> {
        let bundle = self.encoder.forward(images, tape)?;
        self.decoder.forward_cat(&bundle.levels, tape)
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params()
    }
}

/// Builds K per-site encoders (single-channel, widths divided by K) and the
/// shared-width decoder, with parameters drawn deterministically from `seed`.
pub fn build_split(
    arch: &ArchSpec,
    cfg: &SplitConfig,
    seed: u64,
) -> Result<(Vec<SplitEncoder>, Decoder), ModelError> {
    cfg.validate(arch)?;
    let widths = per_site_widths(arch, cfg.num_sites);
    let encoders = (0..cfg.num_sites)
        .map(|k| SplitEncoder::new(k, 1, widths, seed))
        .collect();
    let decoder = Decoder::new(arch, cfg.skip_variant, seed);
    Ok((encoders, decoder))
}

pub fn per_site_widths(arch: &ArchSpec, num_sites: usize) -> [usize; 5] {
    let w = arch.encoder_widths();
    [
        w[0] / num_sites,
        w[1] / num_sites,
        w[2] / num_sites,
        w[3] / num_sites,
        w[4] / num_sites,
    ]
}

/// The centralized baseline: all modalities as input channels, default widths.
pub fn build_default_unet(arch: &ArchSpec, seed: u64) -> UNet {
    UNet {
        encoder: SplitEncoder::new(0, arch.in_channels, arch.encoder_widths(), seed),
        decoder: Decoder::new(arch, SkipVariant::AllSkips, seed),
    }
}

/// Channel argmax of logits, as a (B, 1, H, W) label map.
pub fn predict_labels(logits: &TensorData) -> TensorData {
    let s = logits.shape;
    let hw = s.hw();
    let mut out = vec![0.0f32; s.batch * hw];
    for b in 0..s.batch {
        for i in 0..hw {
            let mut best = 0usize;
            let mut bestv = logits.values[b * s.channels * hw + i];
            for c in 1..s.channels {
                let v = logits.values[(b * s.channels + c) * hw + i];
                if v > bestv {
                    bestv = v;
                    best = c;
                }
            }
            out[b * hw + i] = best as f32;
        }
    }
    TensorData {
        shape: TensorShape::new(s.batch, 1, s.height, s.width).expect("valid shape"),
        values: out,
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: header (arch, K, variant, seed) + named parameter tensors.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"SCKP";
const CKPT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Central,
    Split,
}

#[derive(Clone, Copy, Debug)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub num_sites: usize,
    pub label_site: usize,
    pub variant: SkipVariant,
    pub seed: u64,
    pub arch: ArchSpec,
}

pub enum LoadedModel {
    Central(UNet),
    Split {
        encoders: Vec<SplitEncoder>,
        decoder: Decoder,
    },
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: LoadedModel,
}

impl Checkpoint {
    /// The encoder replica for one site (white-box attack input).
    pub fn encoder(&self, site: usize) -> Option<&SplitEncoder> {
        match &self.model {
            LoadedModel::Central(u) if site == 0 => Some(&u.encoder),
            LoadedModel::Central(_) => None,
            LoadedModel::Split { encoders, .. } => encoders.get(site),
        }
    }
}

fn write_component(
    w: &mut impl Write,
    name: &str,
    params: &[&Param],
) -> std::io::Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        w.write_all(&(p.name.len() as u16).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        data::write_ten(w, &p.value)?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    components: &[(&str, Vec<&Param>)],
) -> Result<(), ModelError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.push(CKPT_VERSION);
    buf.push(match meta.kind {
        ModelKind::Central => 0,
        ModelKind::Split => 1,
    });
    buf.push(match meta.variant {
        SkipVariant::AllSkips => 0,
        SkipVariant::NoSkips => 1,
        SkipVariant::X3X4Only => 2,
    });
    buf.extend_from_slice(&(meta.num_sites as u32).to_le_bytes());
    buf.extend_from_slice(&(meta.label_site as u32).to_le_bytes());
    buf.extend_from_slice(&meta.seed.to_le_bytes());
    buf.extend_from_slice(&(meta.arch.in_channels as u32).to_le_bytes());
    buf.extend_from_slice(&(meta.arch.out_classes as u32).to_le_bytes());
    for w in meta.arch.widths {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(components.len() as u32).to_le_bytes());
    for (name, params) in components {
        write_component(&mut buf, name, params).expect("writing to Vec cannot fail");
    }
    fs::write(path, buf).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} is truncated",
                self.path.display()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ModelError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("non-utf8 name".into()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let buf = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = ByteReader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(4)? != CKPT_MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    if r.u8()? != CKPT_VERSION {
        return Err(ModelError::Checkpoint("unsupported version".into()));
    }
    let kind = match r.u8()? {
        0 => ModelKind::Central,
        1 => ModelKind::Split,
        other => return Err(ModelError::Checkpoint(format!("bad kind {other}"))),
    };
    let variant = match r.u8()? {
        0 => SkipVariant::AllSkips,
        1 => SkipVariant::NoSkips,
        2 => SkipVariant::X3X4Only,
        other => return Err(ModelError::Checkpoint(format!("bad variant {other}"))),
    };
    let num_sites = r.u32()? as usize;
    let label_site = r.u32()? as usize;
    let seed = r.u64()?;
    let in_channels = r.u32()? as usize;
    let out_classes = r.u32()? as usize;
    let mut widths = [0usize; 9];
    for w in &mut widths {
        *w = r.u32()? as usize;
    }
    let arch = ArchSpec {
        in_channels,
        widths,
        out_classes,
    };
    let meta = CheckpointMeta {
        kind,
        num_sites,
        label_site,
        variant,
        seed,
        arch,
    };

    let n_components = r.u32()? as usize;
    let mut components: BTreeMap<String, BTreeMap<String, TensorData>> = BTreeMap::new();
    for _ in 0..n_components {
        let cname = r.string()?;
        let n_params = r.u32()? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..n_params {
            let pname = r.string()?;
            let rest = &r.buf[r.pos..];
            let mut cursor = std::io::Cursor::new(rest);
            let t = data::read_ten_prefix(&mut cursor, path)?;
            r.pos += cursor.position() as usize;
            params.insert(pname, t);
        }
        components.insert(cname, params);
    }

    let restore = |target: Vec<&mut Param>, stored: &BTreeMap<String, TensorData>,
                   cname: &str|
     -> Result<(), ModelError> {
        if target.len() != stored.len() {
            return Err(ModelError::Checkpoint(format!(
                "component {cname} has {} parameters, expected {}",
                stored.len(),
                target.len()
            )));
        }
        for p in target {
            let t = stored.get(&p.name).ok_or_else(|| {
                ModelError::Checkpoint(format!("component {cname} is missing '{}'", p.name))
            })?;
            if t.shape != p.value.shape {
                return Err(ModelError::Checkpoint(format!(
                    "parameter '{}' has shape {}, expected {}",
                    p.name, t.shape, p.value.shape
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    };

    let model = match kind {
        ModelKind::Central => {
            let mut unet = build_default_unet(&arch, seed);
            let enc = components
                .get("enc0")
                .ok_or_else(|| ModelError::Checkpoint("missing component enc0".into()))?;
            restore(unet.encoder.params_mut(), enc, "enc0")?;
            let dec = components
                .get("dec")
                .ok_or_else(|| ModelError::Checkpoint("missing component dec".into()))?;
            restore(unet.decoder.params_mut(), dec, "dec")?;
            LoadedModel::Central(unet)
        }
        ModelKind::Split => {
            let cfg = SplitConfig {
                num_sites,
                label_site,
                skip_variant: variant,
            };
            let (mut encoders, mut decoder) = build_split(&arch, &cfg, seed)?;
            for (k, enc) in encoders.iter_mut().enumerate() {
                let name = format!("enc{k}");
                let stored = components.get(&name).ok_or_else(|| {
                    ModelError::Checkpoint(format!("missing component {name}"))
                })?;
                restore(enc.params_mut(), stored, &name)?;
            }
            let dec = components
                .get("dec")
                .ok_or_else(|| ModelError::Checkpoint("missing component dec".into()))?;
            restore(decoder.params_mut(), dec, "dec")?;
            LoadedModel::Split { encoders, decoder }
        }
    };
    Ok(Checkpoint { meta, model })
}
