//! Federated round orchestration: per-station local phases over FIFO
//! buffers, upload construction, weighted aggregation, broadcast and
//! recovery, the two reference baselines and the overhead ledger.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aoa::{
    covariance_features, draw_thetas, mse_metric, partition_angles, synthesize_batch, ChannelConfig, SignalBatch,
    GLOBAL_SUPPORT,
};
use crate::codec::{
    combine_layers, dequantize, devectorize, payload_bits, quantize_sr, recover_layer, up_project, vectorize,
    ConsolidatedUpdate, QuantizedPayload, BROADCAST_ID,
};
use crate::config::{ExperimentConfig, Mode};
use crate::error::{ensure, invalid, Result};
use crate::lowrank_opt::{
    adam_step, apply_local_update, compress_gradient, optimizer_state_params, AdamParams, CompressedMoments,
    IncrementAccumulator,
};
use crate::model::Network;
use crate::projector::{generate_combiner, generate_projectors, Combiner, ProjectorPair};
use crate::rng::{derive_seed, stream};

/// Bounded ring of the most recent items. Once full, each push overwrites
/// the slot under the cursor and advances it.
#[derive(Debug, Clone)]
pub struct FifoBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    cursor: usize,
}

impl<T> FifoBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self { items: Vec::with_capacity(capacity.min(4096)), capacity, cursor: 0 }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.cursor] = item;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Next slot to be written.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }
}

/// Endless synthetic arrivals for one station.
#[derive(Debug, Clone)]
pub struct DataStream {
    pub channel: ChannelConfig,
    pub support: (f64, f64),
    pub n_ues: usize,
    pub snapshots: usize,
    pub gnb_id: u32,
    rng: ChaCha8Rng,
}

impl DataStream {
    pub fn new(
        channel: ChannelConfig,
        support: (f64, f64),
        n_ues: usize,
        snapshots: usize,
        gnb_id: u32,
        rng: ChaCha8Rng,
    ) -> Self {
        Self { channel, support, n_ues, snapshots, gnb_id, rng }
    }

    pub fn next_batch(&mut self) -> Result<SignalBatch> {
        let thetas = draw_thetas(&mut self.rng, self.n_ues, self.support);
        let mut b = synthesize_batch(&self.channel, &mut self.rng, &thetas, self.snapshots)?;
        b.gnb_id = self.gnb_id;
        Ok(b)
    }
}

/// Everything one base station owns.
#[derive(Debug, Clone)]
pub struct GnbState {
    pub id: u32,
    pub net: Network,
    pub buffer: FifoBuffer<SignalBatch>,
    pub moments: Vec<CompressedMoments>,
    pub accumulators: Vec<IncrementAccumulator>,
    /// Weights at the start of the current round.
    pub round_start: Vec<DMatrix<f64>>,
    sample_rng: ChaCha8Rng,
    quant_rng: ChaCha8Rng,
}

impl GnbState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u32,
        net: Network,
        buffer_capacity: usize,
        rank: usize,
        adam: AdamParams,
        eta: f64,
        sample_rng: ChaCha8Rng,
        quant_rng: ChaCha8Rng,
    ) -> Self {
        let n_w = net.n_layers();
        let round_start = net.layers.iter().map(|l| l.w.clone()).collect();
        Self {
            id,
            net,
            buffer: FifoBuffer::new(buffer_capacity),
            moments: (0..n_w).map(|_| CompressedMoments::new(rank, adam)).collect(),
            accumulators: (0..n_w).map(|_| IncrementAccumulator::new(rank, eta)).collect(),
            round_start,
            sample_rng,
            quant_rng,
        }
    }

    /// Records the current weights as the round-start snapshot.
    pub fn snapshot(&mut self) {
        for (s, l) in self.round_start.iter_mut().zip(&self.net.layers) {
            s.copy_from(&l.w);
        }
    }

    /// Sets every layer to its round-start weight plus `increments[l]`.
    pub fn set_from_round_start(&mut self, increments: &[DMatrix<f64>]) -> Result<()> {
        ensure(increments.len() == self.net.n_layers(), || "one increment per layer required".into())?;
        for ((layer, start), inc) in self.net.layers.iter_mut().zip(&self.round_start).zip(increments) {
            ensure(inc.shape() == start.shape(), || {
                format!("increment shape {:?} != {:?}", inc.shape(), start.shape())
            })?;
            layer.w = start + inc;
        }
        self.snapshot();
        Ok(())
    }

    pub fn reset_accumulators(&mut self) {
        self.accumulators.iter_mut().for_each(IncrementAccumulator::reset);
    }
}

/// Settings shared by every station's local phase.
#[derive(Debug, Clone, Copy)]
pub struct LocalSettings<'a> {
    pub projectors: &'a [ProjectorPair],
    pub gamma: f64,
    pub eta: f64,
    pub minibatch: usize,
    pub arrivals_per_step: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalReport {
    /// Mean minibatch loss over the executed steps.
    pub mean_loss: f64,
    pub steps: usize,
    /// Steps skipped because the buffer was empty.
    pub skipped: usize,
    /// Mean over steps and layers of `||P G Q||_F`.
    pub mean_compressed_grad_norm: f64,
}

/// `n_loc` local steps. Each step ingests `arrivals_per_step` blocks from
/// `arrivals`, samples a minibatch from the buffer with replacement and
/// applies one projected Adam update per layer, accumulating `R~`.
pub fn run_local_phase(
    state: &mut GnbState,
    n_loc: usize,
    arrivals: &mut dyn FnMut() -> Result<Option<SignalBatch>>,
    settings: &LocalSettings<'_>,
) -> Result<LocalReport> {
    ensure(settings.projectors.len() == state.net.n_layers(), || "one projector pair per layer required".into())?;
    let mut report = LocalReport::default();
    let mut loss_sum = 0.0;
    let mut norm_sum = 0.0;
    for _ in 0..n_loc {
        for _ in 0..settings.arrivals_per_step {
            if let Some(b) = arrivals()? {
                state.buffer.push(b);
            }
        }
        if state.buffer.is_empty() {
            report.skipped += 1;
            continue;
        }
        let n = state.buffer.len();
        let batch: Vec<SignalBatch> = (0..settings.minibatch.max(1))
            .map(|_| state.buffer.get(state.sample_rng.random_range(0..n)).cloned().expect("index in range"))
            .collect();
        let grads = state.net.backward(&batch, settings.gamma)?;
        loss_sum += grads.loss;
        for (l, g) in grads.per_layer.iter().enumerate() {
            let proj = &settings.projectors[l];
            // The update adds eta P^T R~ Q^T, so descent compresses -G.
            let r = compress_gradient(&(-g), proj)?;
            norm_sum += r.norm();
            let r_tilde = adam_step(&r, &mut state.moments[l])?;
            let w = &mut state.net.layers[l].w;
            *w = apply_local_update(w, &r_tilde, proj, settings.eta)?;
            state.accumulators[l].accumulate(&r_tilde);
        }
        report.steps += 1;
    }
    if report.steps > 0 {
        report.mean_loss = loss_sum / report.steps as f64;
        report.mean_compressed_grad_norm = norm_sum / (report.steps * state.net.n_layers()) as f64;
    }
    Ok(report)
}

/// Superposes `eta U_l` for every layer, vectorizes, quantizes at `q_u` and
/// clears the accumulators.
pub fn build_upload(state: &mut GnbState, comb: &Combiner, q_u: u8, round: u32) -> Result<QuantizedPayload> {
    let compressed: Vec<DMatrix<f64>> = state.accumulators.iter().map(|a| a.compressed_increment()).collect();
    let cons = combine_layers(&compressed, comb)?;
    let payload = quantize_sr(&vectorize(&cons.data), q_u, &mut state.quant_rng)?.with_header(state.id, round);
    state.reset_accumulators();
    Ok(payload)
}

fn check_weights(weights: &[f64], k: usize) -> Result<()> {
    ensure(weights.len() == k && k > 0, || format!("{} weights for {k} stations", weights.len()))?;
    ensure(weights.iter().all(|w| w.is_finite() && *w >= 0.0), || "weights must be non-negative".into())?;
    let total: f64 = weights.iter().sum();
    ensure((total - 1.0).abs() <= 1e-12, || format!("weights sum to {total}, not 1"))
}

/// `sum_k w_k dequantize(payload_k)`.
pub fn aggregate_global(payloads: &[QuantizedPayload], weights: &[f64]) -> Result<Vec<f64>> {
    check_weights(weights, payloads.len())?;
    let n = payloads[0].len();
    ensure(payloads.iter().all(|p| p.len() == n), || "payload lengths differ".into())?;
    let mut out = vec![0.0; n];
    for (p, &w) in payloads.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(dequantize(p)) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Server-side downlink quantization of the aggregate.
pub fn broadcast_payload<R: Rng + ?Sized>(
    global: &[f64],
    q_d: u8,
    rng: &mut R,
    round: u32,
) -> Result<QuantizedPayload> {
    Ok(quantize_sr(global, q_d, rng)?.with_header(BROADCAST_ID, round))
}

/// Recovers every layer from the broadcast and sets
/// `W_l = W_l(round start) + P_l^T (V_l^T D V_l) Q_l^T`, which discards the
/// station's own local increments in favour of the global one.
pub fn apply_broadcast(
    state: &mut GnbState,
    broadcast: &QuantizedPayload,
    projectors: &[ProjectorPair],
    comb: &Combiner,
) -> Result<()> {
    let cons = ConsolidatedUpdate {
        data: devectorize(&dequantize(broadcast), comb.r_a)?,
        round_index: broadcast.round,
        gnb_id: None,
    };
    let increments = projectors
        .iter()
        .enumerate()
        .map(|(l, p)| up_project(&recover_layer(&cons, comb, l)?, p))
        .collect::<Result<Vec<_>>>()?;
    state.set_from_round_start(&increments)
}

/// Full-precision `sum_k w_k eta P_l^T U_{k,l} Q_l^T` for every layer.
pub fn fedavg_reference_round(
    states: &[GnbState],
    weights: &[f64],
    projectors: &[ProjectorPair],
) -> Result<Vec<DMatrix<f64>>> {
    fedavg_from_refs(&states.iter().collect::<Vec<_>>(), weights, projectors)
}

/// Baseline without superposition: every layer's `eta U_l` is quantized
/// and sent on its own, aggregated per layer, re-quantized for the
/// downlink and up-projected. Returns the full-size increments together
/// with the uplink and downlink bit totals.
pub fn perlayer_reference_round<R: Rng + ?Sized>(
    states: &mut [GnbState],
    weights: &[f64],
    projectors: &[ProjectorPair],
    q_u: u8,
    q_d: u8,
    server_rng: &mut R,
) -> Result<(Vec<DMatrix<f64>>, u64, u64)> {
    check_weights(weights, states.len())?;
    let mut up_bits = 0;
    let mut down_bits = 0;
    let mut out = Vec::with_capacity(projectors.len());
    for (l, p) in projectors.iter().enumerate() {
        let r = p.rank;
        let mut agg = vec![0.0; r * r];
        for (s, &w) in states.iter_mut().zip(weights) {
            let payload = quantize_sr(&vectorize(&s.accumulators[l].compressed_increment()), q_u, &mut s.quant_rng)?;
            up_bits += payload.bit_count();
            for (a, x) in agg.iter_mut().zip(dequantize(&payload)) {
                *a += w * x;
            }
        }
        let down = quantize_sr(&agg, q_d, server_rng)?;
        down_bits += down.bit_count();
        out.push(up_project(&devectorize(&dequantize(&down), r)?, p)?);
    }
    states.iter_mut().for_each(GnbState::reset_accumulators);
    Ok((out, up_bits, down_bits))
}

/// Closed-form per-round traffic and memory footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadLedger {
    pub uplink_bits_per_round: u64,
    pub downlink_bits_per_round: u64,
    pub optimizer_state_params: u64,
    pub weight_params: u64,
}

/// Ledger for the superposed, quantized exchange.
pub fn account_overhead(cfg: &ExperimentConfig) -> OverheadLedger {
    let shapes = cfg.layer_shapes();
    OverheadLedger {
        uplink_bits_per_round: cfg.k as u64 * payload_bits(cfg.q_u, cfg.r_a * cfg.r_a),
        downlink_bits_per_round: payload_bits(cfg.q_d, cfg.r_a * cfg.r_a),
        optimizer_state_params: shapes.iter().map(|&(d, m)| optimizer_state_params(m, d, cfg.r) as u64).sum(),
        weight_params: shapes.iter().map(|&(d, m)| (m * d) as u64).sum(),
    }
}

/// `(uplink, downlink)` bits one round costs in the configured mode.
pub fn round_bits(cfg: &ExperimentConfig) -> (u64, u64) {
    let k = cfg.k as u64;
    match cfg.mode {
        Mode::Cocofed => {
            let l = account_overhead(cfg);
            (l.uplink_bits_per_round, l.downlink_bits_per_round)
        }
        Mode::Fedavg => {
            let w = account_overhead(cfg).weight_params * 32;
            (k * w, w)
        }
        Mode::Perlayer => {
            let n_w = cfg.n_layers() as u64;
            (k * n_w * payload_bits(cfg.q_u, cfg.r * cfg.r), n_w * payload_bits(cfg.q_d, cfg.r * cfg.r))
        }
    }
}

/// One row of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    pub local_losses: Vec<f64>,
    pub test_mse: f64,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    /// Mean `||P G Q||_F` seen during the local phases.
    pub grad_norm: f64,
    /// Seconds spent in the round. Not written to the CSV.
    pub wall_clock_s: f64,
    pub config_hash: String,
}

impl RoundRecord {
    pub const CSV_HEADER: &'static str = "round,test_mse,uplink_bits,downlink_bits,grad_norm,local_losses,config_hash";

    pub fn csv_row(&self) -> String {
        let losses = self.local_losses.iter().map(|l| format!("{l:.9e}")).collect::<Vec<_>>().join(";");
        format!(
            "{},{:.9e},{},{},{:.9e},{},{}",
            self.round_index,
            self.test_mse,
            self.uplink_bits,
            self.downlink_bits,
            self.grad_norm,
            losses,
            self.config_hash
        )
    }
}

/// Seed-path roots under the master seed.
mod path {
    pub const INIT: u64 = 1;
    pub const PROJECTOR: u64 = 2;
    pub const COMBINER: u64 = 3;
    pub const WARMUP: u64 = 4;
    pub const TEST: u64 = 5;
    pub const DATA: u64 = 6;
    pub const SAMPLE: u64 = 7;
    pub const QUANT: u64 = 8;
    pub const PARTITION: u64 = 9;
    pub const SERVER: u64 = 10;
}

/// Centralized full-rank Adam with step-dependent bias correction on
/// blocks from the global angular range.
pub fn warm_up(net: &mut Network, cfg: &ExperimentConfig, rng: ChaCha8Rng) -> Result<()> {
    if cfg.warmup_steps == 0 {
        return Ok(());
    }
    let mut data = DataStream::new(cfg.channel(), GLOBAL_SUPPORT, cfg.u, cfg.t, 0, rng);
    let mut m: Vec<DMatrix<f64>> = net.layers.iter().map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols())).collect();
    let mut v = m.clone();
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for step in 1..=cfg.warmup_steps {
        let batch = (0..cfg.minibatch).map(|_| data.next_batch()).collect::<Result<Vec<_>>>()?;
        let g = net.backward(&batch, cfg.gamma)?;
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        for (l, gl) in g.per_layer.iter().enumerate() {
            m[l] = &m[l] * b1 + gl * (1.0 - b1);
            v[l] = &v[l] + (gl.component_mul(gl) - &v[l]) * (1.0 - b2);
            let step_dir = m[l].zip_map(&v[l], |mi, vi| (mi / c1) / ((vi / c2).sqrt() + 1e-8));
            net.layers[l].w -= step_dir * cfg.warmup_lr;
        }
    }
    Ok(())
}

/// Mean over blocks of the permutation-matched squared angle error (rad^2).
pub fn evaluate_mse(net: &Network, test: &[SignalBatch]) -> Result<f64> {
    ensure(!test.is_empty(), || "empty test set".into())?;
    let errs = test
        .par_iter()
        .map(|b| {
            let f = covariance_features(&b.y, net.input_width());
            mse_metric(&b.theta_true, &net.forward(&f)?.theta)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Arrival process of station `k`: its angular sector and data stream are
/// derived from the master seed.
pub fn client_stream(config: &ExperimentConfig, k: usize) -> DataStream {
    let seed = config.master_seed;
    let support = partition_angles(config.partition, &mut stream(seed, &[path::PARTITION, k as u64]));
    DataStream::new(config.channel(), support, config.u, config.t, k as u32, stream(seed, &[path::DATA, k as u64]))
}

/// One station plus its arrival process.
#[derive(Debug, Clone)]
pub struct Client {
    pub state: GnbState,
    pub data: DataStream,
}

/// A configured federation that can be advanced one round at a time.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub projectors: Vec<ProjectorPair>,
    pub combiner: Combiner,
    pub clients: Vec<Client>,
    pub test_set: Vec<SignalBatch>,
    pub ledger: OverheadLedger,
    pub round: usize,
    server_rng: ChaCha8Rng,
    hash: String,
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Experiment").field("round", &self.round).field("config_hash", &self.hash).finish()
    }
}

/// Worker cap from `COCOFED_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("COCOFED_THREADS").ok()?.trim().parse().ok().filter(|&n: &usize| n > 0)
}

impl Experiment {
    /// Setup: initial model and warm-up, shared projectors and combiner
    /// from derived seeds, station partitions, streams and the test set.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.master_seed;
        let shapes = config.layer_shapes();
        let mut net =
            Network::new(&shapes, config.u, GLOBAL_SUPPORT, derive_seed(seed, &[path::INIT]))?.with_head(config.head);
        warm_up(&mut net, &config, stream(seed, &[path::WARMUP]))?;

        let projectors = shapes
            .iter()
            .enumerate()
            .map(|(l, &(d, m))| {
                Ok(generate_projectors(derive_seed(seed, &[path::PROJECTOR, l as u64]), m, d, config.r)?
                    .with_layer_index(l))
            })
            .collect::<Result<Vec<_>>>()?;
        let combiner = generate_combiner(derive_seed(seed, &[path::COMBINER]), config.r, shapes.len(), config.r_a)?;

        let channel = config.channel();
        let adam = config.adam();
        let clients = (0..config.k)
            .map(|k| {
                let id = k as u32;
                let data = client_stream(&config, k);
                let state = GnbState::new(
                    id,
                    net.clone(),
                    config.buffer_capacity,
                    config.r,
                    adam,
                    config.eta,
                    stream(seed, &[path::SAMPLE, k as u64]),
                    stream(seed, &[path::QUANT, k as u64]),
                );
                Client { state, data }
            })
            .collect();

        let mut test_data =
            DataStream::new(channel, GLOBAL_SUPPORT, config.u, config.t, BROADCAST_ID, stream(seed, &[path::TEST]));
        let test_set = (0..config.test_size).map(|_| test_data.next_batch()).collect::<Result<Vec<_>>>()?;

        let pool = match thread_cap() {
            Some(n) => {
                Some(rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| invalid(e.to_string()))?)
            }
            None => None,
        };
        Ok(Self {
            ledger: account_overhead(&config),
            hash: config.hash(),
            server_rng: stream(seed, &[path::SERVER]),
            projectors,
            combiner,
            clients,
            test_set,
            round: 0,
            pool,
            config,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    /// The shared global model (all stations agree after each round).
    pub fn global_net(&self) -> &Network {
        &self.clients[0].state.net
    }

    pub fn test_mse(&self) -> Result<f64> {
        self.install(|| evaluate_mse(self.global_net(), &self.test_set))
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    /// Record describing the state before any round. Its bit fields carry
    /// the per-round ledger values of the configured mode.
    pub fn setup_record(&self) -> Result<RoundRecord> {
        let (uplink_bits, downlink_bits) = round_bits(&self.config);
        Ok(RoundRecord {
            round_index: 0,
            local_losses: vec![],
            test_mse: self.test_mse()?,
            uplink_bits,
            downlink_bits,
            grad_norm: 0.0,
            wall_clock_s: 0.0,
            config_hash: self.hash.clone(),
        })
    }

    /// Data-volume weights from current buffer fill levels.
    pub fn weights(&self) -> Vec<f64> {
        let fills: Vec<f64> = self.clients.iter().map(|c| c.state.buffer.len() as f64).collect();
        let total: f64 = fills.iter().sum();
        if total == 0.0 {
            vec![1.0 / fills.len() as f64; fills.len()]
        } else {
            fills.iter().map(|f| f / total).collect()
        }
    }

    /// Runs the local phases of every station in parallel.
    pub fn local_phases(&mut self) -> Result<Vec<LocalReport>> {
        let settings = LocalSettings {
            projectors: &self.projectors,
            gamma: self.config.gamma,
            eta: self.config.eta,
            minibatch: self.config.minibatch,
            arrivals_per_step: self.config.arrivals_per_step,
        };
        let n_loc = self.config.n_loc;
        let reset = self.config.reset_moments_each_round;
        let clients = &mut self.clients;
        let mut run = move || {
            clients
                .par_iter_mut()
                .map(|c| {
                    if reset {
                        c.state.moments.iter_mut().for_each(CompressedMoments::reset);
                    }
                    let data = &mut c.data;
                    let mut arrivals = || data.next_batch().map(Some);
                    run_local_phase(&mut c.state, n_loc, &mut arrivals, &settings)
                })
                .collect::<Result<Vec<_>>>()
        };
        match &self.pool {
            Some(p) => p.install(run),
            None => run(),
        }
    }

    /// Exchange step after the local phases; returns `(uplink, downlink)`
    /// bits actually sent.
    pub fn exchange(&mut self) -> Result<(u64, u64)> {
        let weights = self.weights();
        let round = self.round as u32;
        match self.config.mode {
            Mode::Cocofed => {
                let (comb, q_u) = (&self.combiner, self.config.q_u);
                let payloads = self
                    .clients
                    .iter_mut()
                    .map(|c| build_upload(&mut c.state, comb, q_u, round))
                    .collect::<Result<Vec<_>>>()?;
                let up: u64 = payloads.iter().map(QuantizedPayload::bit_count).sum();
                let global = aggregate_global(&payloads, &weights)?;
                let down = broadcast_payload(&global, self.config.q_d, &mut self.server_rng, round)?;
                for c in &mut self.clients {
                    apply_broadcast(&mut c.state, &down, &self.projectors, &self.combiner)?;
                }
                Ok((up, down.bit_count()))
            }
            Mode::Fedavg => {
                let refs: Vec<&GnbState> = self.clients.iter().map(|c| &c.state).collect();
                let inc = fedavg_from_refs(&refs, &weights, &self.projectors)?;
                for c in &mut self.clients {
                    c.state.set_from_round_start(&inc)?;
                    c.state.reset_accumulators();
                }
                Ok(round_bits(&self.config))
            }
            Mode::Perlayer => {
                let mut states: Vec<GnbState> = self.clients.iter().map(|c| c.state.clone()).collect();
                let (inc, up, down) = perlayer_reference_round(
                    &mut states,
                    &weights,
                    &self.projectors,
                    self.config.q_u,
                    self.config.q_d,
                    &mut self.server_rng,
                )?;
                for (c, s) in self.clients.iter_mut().zip(states) {
                    c.state = s;
                    c.state.set_from_round_start(&inc)?;
                }
                Ok((up, down))
            }
        }
    }

    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let start = Instant::now();
        self.round += 1;
        let reports = self.local_phases()?;
        let (uplink_bits, downlink_bits) = self.exchange()?;
        let grad_norm = reports.iter().map(|r| r.mean_compressed_grad_norm).sum::<f64>() / reports.len() as f64;
        Ok(RoundRecord {
            round_index: self.round,
            local_losses: reports.iter().map(|r| r.mean_loss).collect(),
            test_mse: self.test_mse()?,
            uplink_bits,
            downlink_bits,
            grad_norm,
            wall_clock_s: start.elapsed().as_secs_f64(),
            config_hash: self.hash.clone(),
        })
    }
}

fn fedavg_from_refs(states: &[&GnbState], weights: &[f64], projectors: &[ProjectorPair]) -> Result<Vec<DMatrix<f64>>> {
    check_weights(weights, states.len())?;
    Ok(projectors
        .iter()
        .enumerate()
        .map(|(l, p)| {
            states
                .iter()
                .zip(weights)
                .fold(DMatrix::zeros(p.rows(), p.cols()), |acc, (s, &w)| acc + s.accumulators[l].full_increment(p) * w)
        })
        .collect())
}

/// Setup record followed by one record per round.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RoundRecord>> {
    let mut exp = Experiment::new(config.clone())?;
    let mut records = vec![exp.setup_record()?];
    for _ in 0..config.rounds {
        records.push(exp.run_round()?);
    }
    Ok(records)
}
