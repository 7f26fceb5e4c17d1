//! The split-learning protocol: a coordinator at the label site and K site
//! state machines exchanging batch indices, guarded activation bundles and
//! per-level gradients, completing one optimizer step per iteration.
//!
//! Sites and coordinator are explicit state machines that consume and produce
//! encoded messages; the sequential and threaded drivers move the same bytes,
//! so final states are schedule-independent.

pub mod wire;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::data::PhantomSet;
use crate::metrics::DiceCounts;
use crate::model::{
    build_default_unet, build_split, ActivationBundle, ArchSpec, Decoder, ModelError, SkipVariant,
    SplitConfig, SplitEncoder, UNet,
};
use crate::nn::{dice_ce_loss, dropout, gaussian_noise, Adam, NnError, ParamTape};
use crate::seeds;
use crate::tensor::{Graph, Tensor, TensorData, TensorError, TensorShape};
use wire::{recv_message, send_bytes, wire_up, Message};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("iteration mismatch: expected {expected}, got {got}")]
    IterationMismatch { expected: u32, got: u32 },
    #[error("unexpected {got} while waiting for {want}")]
    UnexpectedMessage { want: &'static str, got: &'static str },
    #[error("transport timeout after {0:?} waiting for {1}")]
    Timeout(Duration, String),
    #[error("codec error: {0}")]
    Codec(String),
    #[error("level {level} is not shared under variant {variant}")]
    LevelNotShared { level: usize, variant: &'static str },
    #[error("protocol state error: {0}")]
    State(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Defense applied to every shared activation at the share boundary:
/// inverted dropout followed by additive Gaussian noise.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ShareGuard {
    pub dropout_p: f32,
    pub noise_sigma: f32,
}

impl ShareGuard {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ProtocolError::State(format!(
                "guard dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(ProtocolError::State(format!(
                "guard noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("p={},sigma={}", self.dropout_p, self.noise_sigma)
    }
}

/// Applies the guard to one shared tensor. The dropout mask is recorded in
/// the graph (it participates in backward); the noise has unit Jacobian.
/// Seeds derive from (experiment seed, iteration, site, level).
pub fn apply_guard(
    guard: &ShareGuard,
    x: &Tensor,
    exp_seed: u64,
    iteration: u32,
    site: usize,
    level: usize,
) -> Result<Tensor, NnError> {
    let tags = [iteration as u64, site as u64, level as u64];
    let dropped = dropout(
        x,
        guard.dropout_p,
        seeds::derive(exp_seed, &[seeds::TAG_DROPOUT, tags[0], tags[1], tags[2]]),
    )?;
    gaussian_noise(
        &dropped,
        guard.noise_sigma,
        seeds::derive(exp_seed, &[seeds::TAG_NOISE, tags[0], tags[1], tags[2]]),
    )
}

/// Applies the guard to a whole shared bundle, per level.
pub fn apply_guard_bundle(
    guard: &ShareGuard,
    shared: &BTreeMap<usize, Tensor>,
    exp_seed: u64,
    iteration: u32,
    site: usize,
) -> Result<BTreeMap<usize, Tensor>, NnError> {
    shared
        .iter()
        .map(|(&level, t)| {
            apply_guard(guard, t, exp_seed, iteration, site, level).map(|g| (level, g))
        })
        .collect()
}

/// Horizontal flip (mirror along W) of every sample in a (B,C,H,W) batch.
fn flip_horizontal(t: &mut TensorData) {
    let s = t.shape;
    for plane in t.values.chunks_mut(s.width) {
        plane.reverse();
    }
}

/// Whether sample `id` flips under `aug_seed` (0 disables augmentation).
fn flips(aug_seed: u64, id: u32) -> bool {
    use rand::Rng;
    if aug_seed == 0 {
        return false;
    }
    seeds::rng(aug_seed, &[seeds::TAG_AUG, id as u64]).random::<f32>() < 0.5
}

/// Stacks `ids` rows of a per-sample store into one batch, flip-augmented.
fn assemble_batch(store: &[TensorData], ids: &[u32], aug_seed: u64) -> Result<TensorData, ProtocolError> {
    if ids.is_empty() {
        return Err(ProtocolError::State("empty batch".into()));
    }
    let first = store
        .get(ids[0] as usize)
        .ok_or_else(|| ProtocolError::State(format!("sample id {} out of range", ids[0])))?;
    let s = first.shape;
    let mut values = Vec::with_capacity(ids.len() * s.numel());
    for &id in ids {
        let sample = store
            .get(id as usize)
            .ok_or_else(|| ProtocolError::State(format!("sample id {id} out of range")))?;
        if sample.shape != s {
            return Err(ProtocolError::State(format!(
                "sample {id} has shape {}, expected {}",
                sample.shape, s
            )));
        }
        let mut img = sample.clone();
        if flips(aug_seed, id) {
            flip_horizontal(&mut img);
        }
        values.extend_from_slice(&img.values);
    }
    Ok(TensorData {
        shape: TensorShape::new(ids.len(), s.channels, s.height, s.width)?,
        values,
    })
}

/// Work a site keeps alive between sending its ActShare and receiving the
/// matching GradShare: the recorded graph, the parameter tape and the guarded
/// share nodes to seed backward at. Lives on the site's own thread.
pub struct PendingStep {
    iteration: u32,
    #[allow(dead_code)]
    graph: Graph,
    tape: ParamTape,
    share_nodes: BTreeMap<usize, Tensor>,
}

/// One data site: its encoder, optimizer, guard and modality slice.
pub struct SiteState {
    pub site: usize,
    pub encoder: SplitEncoder,
    pub guard: ShareGuard,
    pub variant: SkipVariant,
    pub images: Vec<TensorData>,
    pub exp_seed: u64,
    lr: f32,
    optimizer: Adam,
    next_iteration: u32,
    pub capture_grads: bool,
    pub last_grads: Option<BTreeMap<String, Vec<f32>>>,
}

impl SiteState {
    pub fn new(
        site: usize,
        encoder: SplitEncoder,
        guard: ShareGuard,
        variant: SkipVariant,
        images: Vec<TensorData>,
        exp_seed: u64,
        lr: f32,
    ) -> Self {
        Self {
            site,
            encoder,
            guard,
            variant,
            images,
            exp_seed,
            lr,
            optimizer: Adam::new(),
            next_iteration: 0,
            capture_grads: false,
            last_grads: None,
        }
    }

    /// Handles a BatchSelect: runs the local forward pass, applies the guard
    /// and produces the ActShare plus the pending state for the backward half.
    pub fn start_step(&mut self, msg: Message) -> Result<(Message, PendingStep), ProtocolError> {
        let (iteration, indices, aug_seed) = match msg {
            Message::BatchSelect {
                iteration,
                indices,
                aug_seed,
            } => (iteration, indices, aug_seed),
            other => {
                return Err(ProtocolError::UnexpectedMessage {
                    want: "BatchSelect",
                    got: other.kind(),
                })
            }
        };
        if iteration != self.next_iteration {
            return Err(ProtocolError::IterationMismatch {
                expected: self.next_iteration,
                got: iteration,
            });
        }
        let batch = assemble_batch(&self.images, &indices, aug_seed)?;
        let graph = Graph::new();
        let input = graph.leaf(batch);
        let mut tape = ParamTape::new();
        let bundle = self.encoder.forward(&input, &mut tape)?;
        let shared = bundle.shared(self.variant);
        let guarded =
            apply_guard_bundle(&self.guard, &shared, self.exp_seed, iteration, self.site)?;
        let levels: BTreeMap<u8, TensorData> = guarded
            .iter()
            .map(|(&l, t)| (l as u8, t.to_data()))
            .collect();
        let act = Message::ActShare {
            iteration,
            site: self.site as u8,
            levels,
        };
        Ok((
            act,
            PendingStep {
                iteration,
                graph,
                tape,
                share_nodes: guarded,
            },
        ))
    }

    /// Handles the GradShare for a pending step: backpropagates from the
    /// received gradients through the local graph and updates the encoder.
    pub fn finish_step(
        &mut self,
        pending: PendingStep,
        msg: Message,
    ) -> Result<Message, ProtocolError> {
        let (iteration, levels) = match msg {
            Message::GradShare {
                iteration,
                site,
                levels,
            } => {
                if site as usize != self.site {
                    return Err(ProtocolError::State(format!(
                        "GradShare for site {site} delivered to site {}",
                        self.site
                    )));
                }
                (iteration, levels)
            }
            other => {
                return Err(ProtocolError::UnexpectedMessage {
                    want: "GradShare",
                    got: other.kind(),
                })
            }
        };
        if iteration != pending.iteration {
            return Err(ProtocolError::IterationMismatch {
                expected: pending.iteration,
                got: iteration,
            });
        }
        let mut seeds_vec: Vec<(&Tensor, &[f32])> = Vec::new();
        for (&level, node) in &pending.share_nodes {
            let g = levels.get(&(level as u8)).ok_or_else(|| {
                ProtocolError::State(format!("GradShare is missing level {level}"))
            })?;
            if g.shape != node.shape() {
                return Err(ProtocolError::State(format!(
                    "gradient for level {level} has shape {}, expected {}",
                    g.shape,
                    node.shape()
                )));
            }
            seeds_vec.push((node, &g.values));
        }
        if levels.len() != pending.share_nodes.len() {
            return Err(ProtocolError::State(
                "GradShare carries levels that were never shared".into(),
            ));
        }
        pending.graph.backward_seeded(&seeds_vec)?;
        let grads = pending.tape.grads()?;
        if self.capture_grads {
            self.last_grads = Some(grads.clone());
        }
        self.optimizer
            .step(self.encoder.params_mut(), &grads, self.lr)?;
        self.next_iteration = iteration + 1;
        Ok(Message::Ack {
            iteration,
            site: self.site as u8,
        })
    }
}

/// Statistics of one completed training iteration.
pub struct StepStats {
    pub iteration: u32,
    pub loss: f32,
    pub dice: DiceCounts,
    /// Per-site forward time; filled by the sequential driver, empty when the
    /// sites run on their own threads.
    pub site_micros: Vec<u64>,
}

/// The label site: decoder, loss, decoder optimizer and the sample RNG.
pub struct Coordinator {
    pub decoder: Decoder,
    pub labels: Vec<TensorData>,
    pub exp_seed: u64,
    num_sites: usize,
    lr: f32,
    optimizer: Adam,
    next_iteration: u32,
    pending: Option<(u32, Vec<u32>, u64)>,
    pub capture_grads: bool,
    pub last_grads: Option<BTreeMap<String, Vec<f32>>>,
}

impl Coordinator {
    pub fn new(
        decoder: Decoder,
        labels: Vec<TensorData>,
        num_sites: usize,
        exp_seed: u64,
        lr: f32,
    ) -> Self {
        Self {
            decoder,
            labels,
            exp_seed,
            num_sites,
            lr,
            optimizer: Adam::new(),
            next_iteration: 0,
            pending: None,
            capture_grads: false,
            last_grads: None,
        }
    }

    /// Opens an iteration by fixing its sample ids and augmentation seed.
    pub fn batch_select(&mut self, indices: Vec<u32>, aug_seed: u64) -> Message {
        let iteration = self.next_iteration;
        self.pending = Some((iteration, indices.clone(), aug_seed));
        Message::BatchSelect {
            iteration,
            indices,
            aug_seed,
        }
    }

    /// Consumes the K ActShares of the open iteration: concatenates, runs the
    /// decoder, computes the loss, backpropagates, updates the decoder and
    /// returns each site's per-level activation gradients.
    pub fn process_acts(
        &mut self,
        acts: Vec<Message>,
    ) -> Result<(Vec<Message>, StepStats), ProtocolError> {
        let (iteration, indices, aug_seed) = self
            .pending
            .take()
            .ok_or_else(|| ProtocolError::State("no open iteration".into()))?;
        if acts.len() != self.num_sites {
            return Err(ProtocolError::State(format!(
                "expected {} ActShares, got {}",
                self.num_sites,
                acts.len()
            )));
        }
        let graph = Graph::new();
        let mut bundles = Vec::with_capacity(self.num_sites);
        let mut leaf_nodes: BTreeMap<(usize, usize), Tensor> = BTreeMap::new();
        for (k, msg) in acts.into_iter().enumerate() {
            let (it, site, levels) = match msg {
                Message::ActShare {
                    iteration,
                    site,
                    levels,
                } => (iteration, site as usize, levels),
                other => {
                    return Err(ProtocolError::UnexpectedMessage {
                        want: "ActShare",
                        got: other.kind(),
                    })
                }
            };
            if it != iteration {
                return Err(ProtocolError::IterationMismatch {
                    expected: iteration,
                    got: it,
                });
            }
            if site != k {
                return Err(ProtocolError::State(format!(
                    "ActShare from site {site} arrived on the site-{k} link"
                )));
            }
            let mut bundle_levels = BTreeMap::new();
            for (level, tensor) in levels {
                let leaf = graph.leaf(tensor);
                leaf_nodes.insert((site, level as usize), leaf.clone());
                bundle_levels.insert(level as usize, leaf);
            }
            bundles.push(ActivationBundle {
                site,
                levels: bundle_levels,
            });
        }
        let mut tape = ParamTape::new();
        let logits = self.decoder.forward(&bundles, &mut tape)?;
        let label_batch = assemble_batch(&self.labels, &indices, aug_seed)?;
        let labels_u8: Vec<u8> = label_batch.values.iter().map(|&v| v as u8).collect();
        let loss = dice_ce_loss(&logits, &labels_u8)?;
        let loss_value = loss.data()[0];
        loss.backward()?;

        let mut grad_msgs = Vec::with_capacity(self.num_sites);
        for k in 0..self.num_sites {
            let mut levels = BTreeMap::new();
            for ((site, level), leaf) in leaf_nodes.range((k, 0)..=(k, usize::MAX)) {
                debug_assert_eq!(*site, k);
                let g = leaf
                    .grad()
                    .expect("shared activation is reachable from the loss");
                levels.insert(
                    *level as u8,
                    TensorData::new(leaf.shape(), g)?,
                );
            }
            grad_msgs.push(Message::GradShare {
                iteration,
                site: k as u8,
                levels,
            });
        }
        let grads = tape.grads()?;
        if self.capture_grads {
            self.last_grads = Some(grads.clone());
        }
        self.optimizer
            .step(self.decoder.params_mut(), &grads, self.lr)?;

        let pred = crate::model::predict_labels(&logits.to_data());
        let dice = DiceCounts::from_labels(&pred, &label_batch)
            .map_err(|e| ProtocolError::State(e.to_string()))?;
        Ok((
            grad_msgs,
            StepStats {
                iteration,
                loss: loss_value,
                dice,
                site_micros: Vec::new(),
            },
        ))
    }

    /// Closes the iteration once every site has acknowledged its update.
    pub fn handle_acks(&mut self, acks: Vec<Message>) -> Result<(), ProtocolError> {
        let iteration = self.next_iteration;
        if acks.len() != self.num_sites {
            return Err(ProtocolError::State(format!(
                "expected {} Acks, got {}",
                self.num_sites,
                acks.len()
            )));
        }
        for (k, msg) in acks.into_iter().enumerate() {
            match msg {
                Message::Ack { iteration: it, site } => {
                    if it != iteration {
                        return Err(ProtocolError::IterationMismatch {
                            expected: iteration,
                            got: it,
                        });
                    }
                    if site as usize != k {
                        return Err(ProtocolError::State(format!(
                            "Ack from site {site} arrived on the site-{k} link"
                        )));
                    }
                }
                other => {
                    return Err(ProtocolError::UnexpectedMessage {
                        want: "Ack",
                        got: other.kind(),
                    })
                }
            }
        }
        self.next_iteration = iteration + 1;
        Ok(())
    }
}

/// One full protocol iteration with all participants stepped in-line on the
/// caller's thread. Messages still pass through the byte codec, so this is
/// numerically identical to the threaded driver.
pub fn run_training_step(
    coordinator: &mut Coordinator,
    sites: &mut [SiteState],
    indices: Vec<u32>,
    aug_seed: u64,
) -> Result<StepStats, ProtocolError> {
    let bs = coordinator.batch_select(indices, aug_seed).encode();
    let mut acts = Vec::with_capacity(sites.len());
    let mut pendings = Vec::with_capacity(sites.len());
    let mut micros = Vec::with_capacity(sites.len());
    for site in sites.iter_mut() {
        let t0 = Instant::now();
        let (act, pending) = site.start_step(Message::decode(&bs)?)?;
        micros.push(t0.elapsed().as_micros() as u64);
        acts.push(Message::decode(&act.encode())?);
        pendings.push(pending);
    }
    let (grad_msgs, mut stats) = coordinator.process_acts(acts)?;
    let mut acks = Vec::with_capacity(sites.len());
    for ((site, pending), gm) in sites.iter_mut().zip(pendings).zip(grad_msgs) {
        let ack = site.finish_step(pending, Message::decode(&gm.encode())?)?;
        acks.push(Message::decode(&ack.encode())?);
    }
    coordinator.handle_acks(acks)?;
    stats.site_micros = micros;
    Ok(stats)
}

/// Runs a list of iterations with every site on its own thread, exchanging
/// encoded messages over the in-process mailboxes.
pub fn run_iterations_threaded(
    coordinator: &mut Coordinator,
    sites: &mut [SiteState],
    batches: &[(Vec<u32>, u64)],
) -> Result<Vec<StepStats>, ProtocolError> {
    let num_sites = sites.len();
    let (coord_tr, site_trs) = wire_up(num_sites);
    let n_iters = batches.len();
    let mut stats_out = Vec::with_capacity(n_iters);
    std::thread::scope(|scope| -> Result<(), ProtocolError> {
        let mut handles = Vec::new();
        for (site, tr) in sites.iter_mut().zip(site_trs) {
            handles.push(scope.spawn(move || -> Result<(), ProtocolError> {
                for _ in 0..n_iters {
                    let bs = recv_message(&tr.from_coord, "BatchSelect")?;
                    let (act, pending) = site.start_step(bs)?;
                    send_bytes(&tr.to_coord, act.encode())?;
                    let gs = recv_message(&tr.from_coord, "GradShare")?;
                    let ack = site.finish_step(pending, gs)?;
                    send_bytes(&tr.to_coord, ack.encode())?;
                }
                Ok(())
            }));
        }
        for (indices, aug_seed) in batches {
            let bs = coordinator.batch_select(indices.clone(), *aug_seed).encode();
            for tx in &coord_tr.to_sites {
                send_bytes(tx, bs.clone())?;
            }
            let mut acts = Vec::with_capacity(num_sites);
            for rx in &coord_tr.from_sites {
                acts.push(recv_message(rx, "ActShare")?);
            }
            let (grad_msgs, stats) = coordinator.process_acts(acts)?;
            for (tx, gm) in coord_tr.to_sites.iter().zip(grad_msgs) {
                send_bytes(tx, gm.encode())?;
            }
            let mut acks = Vec::with_capacity(num_sites);
            for rx in &coord_tr.from_sites {
                acks.push(recv_message(rx, "Ack")?);
            }
            coordinator.handle_acks(acks)?;
            stats_out.push(stats);
        }
        for h in handles {
            h.join()
                .map_err(|_| ProtocolError::State("site thread panicked".into()))??;
        }
        Ok(())
    })?;
    Ok(stats_out)
}

/// Honest-but-curious tap: replays the guarded share computation of `site`
/// at `level` with the current parameters on the given samples (no
/// augmentation, no update) and returns the guarded activation together with
/// the input batch it came from.
pub fn intercept(
    site: &SiteState,
    level: usize,
    ids: &[u32],
    tap_iteration: u32,
) -> Result<(TensorData, TensorData), ProtocolError> {
    if !site.variant.shared_levels().contains(&level) {
        return Err(ProtocolError::LevelNotShared {
            level,
            variant: site.variant.name(),
        });
    }
    let batch = assemble_batch(&site.images, ids, 0)?;
    let graph = Graph::new();
    let input = graph.leaf(batch.clone());
    let mut tape = ParamTape::new();
    let act = site.encoder.forward_to_level(&input, level, &mut tape)?;
    let guarded = apply_guard(&site.guard, &act, site.exp_seed, tap_iteration, site.site, level)?;
    Ok((guarded.to_data(), batch))
}

// ---------------------------------------------------------------------------
// Single-graph reference route: the same composite network assembled and
// backpropagated without any message passing. The central baseline trains
// through this path, and the protocol is tested against it.
// ---------------------------------------------------------------------------

/// Forward+backward of the assembled split network in one graph. Gradients
/// come back keyed "enc{k}/<param>" and "dec/<param>".
pub fn monolithic_step_grads(
    encoders: &[SplitEncoder],
    decoder: &Decoder,
    site_batches: &[TensorData],
    labels: &[u8],
) -> Result<(f32, BTreeMap<String, Vec<f32>>), ProtocolError> {
    if encoders.len() != site_batches.len() {
        return Err(ProtocolError::State(format!(
            "{} encoders but {} site batches",
            encoders.len(),
            site_batches.len()
        )));
    }
    let graph = Graph::new();
    let mut bundles = Vec::new();
    let mut tapes = Vec::new();
    for (enc, batch) in encoders.iter().zip(site_batches) {
        let input = graph.leaf(batch.clone());
        let mut tape = ParamTape::new();
        bundles.push(enc.forward(&input, &mut tape)?);
        tapes.push(tape);
    }
    let mut dec_tape = ParamTape::new();
    let logits = decoder.forward(&bundles, &mut dec_tape)?;
    let loss = dice_ce_loss(&logits, labels)?;
    let loss_value = loss.data()[0];
    loss.backward()?;
    let mut grads = BTreeMap::new();
    for (k, tape) in tapes.iter().enumerate() {
        for (name, g) in tape.grads()? {
            grads.insert(format!("enc{k}/{name}"), g);
        }
    }
    for (name, g) in dec_tape.grads()? {
        grads.insert(format!("dec/{name}"), g);
    }
    Ok((loss_value, grads))
}

// ---------------------------------------------------------------------------
// Training drivers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Sequential,
    Threaded,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub split: SplitConfig,
    pub guard: ShareGuard,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: Schedule,
}

/// One metrics row: per-epoch loss and Dice for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f32,
    pub dice_mean: f32,
    pub dice_per_class: [f32; 3],
}

pub struct SplitTrainOutcome {
    pub history: Vec<EpochRow>,
    pub sites: Vec<SiteState>,
    pub coordinator: Coordinator,
}

fn epoch_batches(
    train_ids: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<(Vec<u32>, u64)> {
    use rand::seq::SliceRandom;
    let mut ids: Vec<u32> = train_ids.iter().map(|&i| i as u32).collect();
    let mut rng = seeds::rng(seed, &[seeds::TAG_BATCH, epoch as u64]);
    ids.shuffle(&mut rng);
    ids.chunks(batch_size)
        .enumerate()
        .map(|(it, chunk)| {
            let aug = seeds::derive(seed, &[seeds::TAG_AUG, epoch as u64, it as u64]).max(1);
            (chunk.to_vec(), aug)
        })
        .collect()
}

/// Guard-free forward evaluation of the split model over `ids`.
pub fn evaluate_split(
    sites: &[SiteState],
    coordinator: &Coordinator,
    ids: &[usize],
    batch_size: usize,
) -> Result<(f32, DiceCounts), ProtocolError> {
    let mut counts = DiceCounts::default();
    let mut loss_sum = 0.0f64;
    let mut n = 0usize;
    for chunk in ids.chunks(batch_size) {
        let chunk_u32: Vec<u32> = chunk.iter().map(|&i| i as u32).collect();
        let graph = Graph::new();
        let mut bundles = Vec::new();
        for site in sites {
            let batch = assemble_batch(&site.images, &chunk_u32, 0)?;
            let input = graph.leaf(batch);
            let mut tape = ParamTape::new();
            bundles.push(site.encoder.forward(&input, &mut tape)?);
        }
        let mut tape = ParamTape::new();
        let logits = coordinator.decoder.forward(&bundles, &mut tape)?;
        let label_batch = assemble_batch(&coordinator.labels, &chunk_u32, 0)?;
        let labels_u8: Vec<u8> = label_batch.values.iter().map(|&v| v as u8).collect();
        let loss = dice_ce_loss(&logits, &labels_u8)?;
        loss_sum += loss.data()[0] as f64 * chunk.len() as f64;
        n += chunk.len();
        let pred = crate::model::predict_labels(&logits.to_data());
        counts.merge(
            &DiceCounts::from_labels(&pred, &label_batch)
                .map_err(|e| ProtocolError::State(e.to_string()))?,
        );
    }
    Ok(((loss_sum / n as f64) as f32, counts))
}

/// Trains the split model over the protocol and evaluates the validation
/// split after each epoch.
pub fn train_split(
    phantoms: &PhantomSet,
    dsplit: &crate::data::DatasetSplit,
    cfg: &TrainConfig,
) -> Result<SplitTrainOutcome, ProtocolError> {
    cfg.guard.validate()?;
    let (encoders, decoder) = build_split(&cfg.arch, &cfg.split, cfg.seed)?;
    let mut sites: Vec<SiteState> = encoders
        .into_iter()
        .enumerate()
        .map(|(k, enc)| {
            let images = phantoms
                .samples
                .iter()
                .map(|s| s.modalities[k].clone())
                .collect();
            SiteState::new(
                k,
                enc,
                cfg.guard,
                cfg.split.skip_variant,
                images,
                cfg.seed,
                cfg.lr,
            )
        })
        .collect();
    let labels = phantoms.samples.iter().map(|s| s.label.clone()).collect();
    let mut coordinator = Coordinator::new(
        decoder,
        labels,
        cfg.split.num_sites,
        cfg.seed,
        cfg.lr,
    );
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(&dsplit.train, cfg.batch_size, cfg.seed, epoch);
        let stats = match cfg.schedule {
            Schedule::Sequential => {
                let mut out = Vec::with_capacity(batches.len());
                for (indices, aug) in batches {
                    out.push(run_training_step(&mut coordinator, &mut sites, indices, aug)?);
                }
                out
            }
            Schedule::Threaded => {
                run_iterations_threaded(&mut coordinator, &mut sites, &batches)?
            }
        };
        let mut train_counts = DiceCounts::default();
        let mut loss_sum = 0.0f64;
        for s in &stats {
            loss_sum += s.loss as f64;
            train_counts.merge(&s.dice);
        }
        let train_scores = train_counts.scores();
        history.push(EpochRow {
            epoch,
            split: "train",
            loss: (loss_sum / stats.len() as f64) as f32,
            dice_mean: train_scores.mean,
            dice_per_class: train_scores.per_class,
        });
        let (val_loss, val_counts) =
            evaluate_split(&sites, &coordinator, &dsplit.val, cfg.batch_size)?;
        let val_scores = val_counts.scores();
        history.push(EpochRow {
            epoch,
            split: "val",
            loss: val_loss,
            dice_mean: val_scores.mean,
            dice_per_class: val_scores.per_class,
        });
    }
    Ok(SplitTrainOutcome {
        history,
        sites,
        coordinator,
    })
}

pub struct CentralTrainOutcome {
    pub history: Vec<EpochRow>,
    pub model: UNet,
}

/// Stacks all modalities of the listed samples into (B, K, S, S).
fn central_batch(
    phantoms: &PhantomSet,
    ids: &[u32],
    aug_seed: u64,
) -> Result<TensorData, ProtocolError> {
    let k = phantoms.sites;
    let s = phantoms.size;
    let mut values = Vec::with_capacity(ids.len() * k * s * s);
    for &id in ids {
        let sample = phantoms
            .samples
            .get(id as usize)
            .ok_or_else(|| ProtocolError::State(format!("sample id {id} out of range")))?;
        let flip = flips(aug_seed, id);
        for m in 0..k {
            let mut img = sample.modalities[m].clone();
            if flip {
                flip_horizontal(&mut img);
            }
            values.extend_from_slice(&img.values);
        }
    }
    Ok(TensorData {
        shape: TensorShape::new(ids.len(), k, s, s)?,
        values,
    })
}

/// Trains the centralized baseline (all modalities as input channels) with
/// plain single-graph steps; no protocol involved.
pub fn train_central(
    phantoms: &PhantomSet,
    dsplit: &crate::data::DatasetSplit,
    cfg: &TrainConfig,
) -> Result<CentralTrainOutcome, ProtocolError> {
    let arch = ArchSpec {
        in_channels: phantoms.sites,
        ..cfg.arch
    };
    let mut model = build_default_unet(&arch, cfg.seed);
    let mut optimizer = Adam::new();
    let labels_store: Vec<TensorData> =
        phantoms.samples.iter().map(|s| s.label.clone()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(&dsplit.train, cfg.batch_size, cfg.seed, epoch);
        let mut loss_sum = 0.0f64;
        let mut train_counts = DiceCounts::default();
        for (indices, aug) in &batches {
            let batch = central_batch(phantoms, indices, *aug)?;
            let graph = Graph::new();
            let input = graph.leaf(batch);
            let mut tape = ParamTape::new();
            let logits = model.forward(&input, &mut tape)?;
            let label_batch = assemble_batch(&labels_store, indices, *aug)?;
            let labels_u8: Vec<u8> = label_batch.values.iter().map(|&v| v as u8).collect();
            let loss = dice_ce_loss(&logits, &labels_u8)?;
            loss_sum += loss.data()[0] as f64;
            loss.backward()?;
            let grads = tape.grads()?;
            let mut params = model.encoder.params_mut();
            params.extend(model.decoder.params_mut());
            optimizer.step(params, &grads, cfg.lr)?;
            let pred = crate::model::predict_labels(&logits.to_data());
            train_counts.merge(
                &DiceCounts::from_labels(&pred, &label_batch)
                    .map_err(|e| ProtocolError::State(e.to_string()))?,
            );
        }
        let train_scores = train_counts.scores();
        history.push(EpochRow {
            epoch,
            split: "train",
            loss: (loss_sum / batches.len() as f64) as f32,
            dice_mean: train_scores.mean,
            dice_per_class: train_scores.per_class,
        });
        // validation
        let mut val_counts = DiceCounts::default();
        let mut val_loss = 0.0f64;
        let mut n = 0usize;
        for chunk in dsplit.val.chunks(cfg.batch_size) {
            let ids: Vec<u32> = chunk.iter().map(|&i| i as u32).collect();
            let batch = central_batch(phantoms, &ids, 0)?;
            let graph = Graph::new();
            let input = graph.leaf(batch);
            let mut tape = ParamTape::new();
            let logits = model.forward(&input, &mut tape)?;
            let label_batch = assemble_batch(&labels_store, &ids, 0)?;
            let labels_u8: Vec<u8> = label_batch.values.iter().map(|&v| v as u8).collect();
            let loss = dice_ce_loss(&logits, &labels_u8)?;
            val_loss += loss.data()[0] as f64 * ids.len() as f64;
            n += ids.len();
            let pred = crate::model::predict_labels(&logits.to_data());
            val_counts.merge(
                &DiceCounts::from_labels(&pred, &label_batch)
                    .map_err(|e| ProtocolError::State(e.to_string()))?,
            );
        }
        let val_scores = val_counts.scores();
        history.push(EpochRow {
            epoch,
            split: "val",
            loss: (val_loss / n as f64) as f32,
            dice_mean: val_scores.mean,
            dice_per_class: val_scores.per_class,
        });
    }
    Ok(CentralTrainOutcome { history, model })
}
