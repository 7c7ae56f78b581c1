//! Cycle-accurate model of the tree-ensemble accelerator.
//!
//! The modeled machine evaluates a cascade layer with two processing
//! elements (one per forest). Each PE provisions 8 node computing units
//! (NCUs); a 32-tree forest packs into four 8-tree groups, so four NCU slots
//! hold a RAM image each and the rest idle. An NCU performs one node
//! operation — RAM read, feature fetch, compare, update — in a fixed 4-cycle
//! period and drains its group's trees serially: on reaching a leaf it adds
//! the leaf word to `prob_total`, bumps `finish_count` (which selects the
//! next tree) and resets `current_node_idx` to zero. The Average unit sums
//! the NCU accumulators and shifts right by 5 (32 trees); the final
//! prediction averages the last layer's two outputs with a shift.
//!
//! Layers are pipeline stages: a new sample enters a layer as soon as the
//! layer frees, so the steady-state initiation interval of a sample is its
//! slowest layer time and its latency is the sum of its layer times.
//!
//! Everything here is deterministic: identical (config, model, stream)
//! yields identical predictions, reports, and traces.

use crate::codec::{CodecError, PackedLayer, PackedModel, TreeRamImage, TREES_PER_GROUP, VALUE_MAX};
use crate::model::TREES_PER_FOREST;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation fault on NCU {ncu} at address {addr}: {reason}")]
    Fault {
        ncu: usize,
        addr: usize,
        reason: String,
    },
    #[error("accumulator overflow: sum {sum} exceeds {max}")]
    AccumulatorOverflow { sum: u32, max: u32 },
    #[error("layer {layer} expects input width {expected}, got {got}")]
    WidthMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("sample stream is empty")]
    EmptyStream,
    #[error("trace is empty")]
    EmptyTrace,
    #[error("invalid simulator configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Architecture and timing parameters. Defaults match the modeled design:
/// 400 MHz clock, 4-cycle node operation, 8-tree groups, 8 NCU slots per PE,
/// 2 PEs per layer, per-layer pipelining, no per-layer overhead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub clock_hz: f64,
    pub node_op_cycles: u64,
    pub trees_per_ncu: usize,
    pub ncus_per_pe: usize,
    pub pes_per_layer: usize,
    pub pipeline_enabled: bool,
    /// Fixed extra cycles charged to every layer (models per-layer control
    /// overhead; 0 by default).
    pub layer_overhead_cycles: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            clock_hz: 4.0e8,
            node_op_cycles: 4,
            trees_per_ncu: TREES_PER_GROUP,
            ncus_per_pe: 8,
            pes_per_layer: 2,
            pipeline_enabled: true,
            layer_overhead_cycles: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return Err(SimError::Config(format!("clock_hz {} not positive", self.clock_hz)));
        }
        if self.node_op_cycles == 0 {
            return Err(SimError::Config("node_op_cycles must be positive".into()));
        }
        if self.trees_per_ncu != TREES_PER_GROUP {
            return Err(SimError::Config(format!(
                "trees_per_ncu {} unsupported; packed groups hold {TREES_PER_GROUP} trees",
                self.trees_per_ncu
            )));
        }
        if self.pes_per_layer != 2 {
            return Err(SimError::Config(format!(
                "pes_per_layer {} unsupported; a layer holds two forests",
                self.pes_per_layer
            )));
        }
        let groups = TREES_PER_FOREST / TREES_PER_GROUP;
        if self.ncus_per_pe < groups {
            return Err(SimError::Config(format!(
                "ncus_per_pe {} cannot host {groups} tree groups",
                self.ncus_per_pe
            )));
        }
        Ok(())
    }

    /// Upper bound on any layer time: every tree of a group walked to the
    /// image depth budget.
    pub fn worst_case_layer_cycles(&self, max_depth: u8) -> u64 {
        self.node_op_cycles * self.trees_per_ncu as u64 * max_depth as u64
            + self.layer_overhead_cycles
    }
}

/// Registers of one node computing unit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NcuState {
    /// Tree-local address of the node under evaluation.
    pub current_node_idx: u16,
    /// Trees completed in this group; doubles as the active-tree selector.
    pub finish_count: u8,
    /// Running sum of consumed leaf words; needs 17 bits for 8 max leaves.
    pub prob_total: u32,
    pub done: bool,
}

/// Outcome of one NCU draining its group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NcuRunResult {
    pub prob_total: u32,
    pub busy_cycles: u64,
    pub path_lengths: [u32; TREES_PER_GROUP],
}

impl NcuRunResult {
    fn idle() -> Self {
        NcuRunResult {
            prob_total: 0,
            busy_cycles: 0,
            path_lengths: [0; TREES_PER_GROUP],
        }
    }
}

/// Serially traverse the image's 8 trees, charging `node_op_cycles` per node
/// visit. The classification outcome is bit-identical to traversing the same
/// quantized trees in software; only the cycle accounting is added.
pub fn ncu_run(
    image: &TreeRamImage,
    features_q: &[u16],
    node_op_cycles: u64,
    ncu_id: usize,
) -> Result<NcuRunResult, SimError> {
    let mut st = NcuState::default();
    let mut busy_cycles = 0u64;
    let mut path_lengths = [0u32; TREES_PER_GROUP];
    while !st.done {
        let tree = st.finish_count as usize;
        let addr = st.current_node_idx as usize;
        let word = image.word(tree, addr).ok_or_else(|| SimError::Fault {
            ncu: ncu_id,
            addr,
            reason: format!("node address out of range in tree {tree}"),
        })?;
        busy_cycles += node_op_cycles;
        path_lengths[tree] += 1;
        if word.is_leaf() {
            st.prob_total += word.value_q() as u32;
            st.finish_count += 1;
            st.current_node_idx = 0;
            if st.finish_count as usize == TREES_PER_GROUP {
                st.done = true;
            }
        } else {
            let feature = word.feature_idx() as usize;
            let x = features_q.get(feature).copied().ok_or_else(|| SimError::Fault {
                ncu: ncu_id,
                addr,
                reason: format!(
                    "feature index {feature} out of range (width {})",
                    features_q.len()
                ),
            })?;
            st.current_node_idx = if x <= word.value_q() {
                st.current_node_idx + 1
            } else {
                word.right_idx()
            };
        }
    }
    debug_assert!(st.prob_total <= (TREES_PER_GROUP as u32) * VALUE_MAX as u32);
    debug_assert_eq!(
        busy_cycles,
        node_op_cycles * path_lengths.iter().map(|&p| p as u64).sum::<u64>()
    );
    Ok(NcuRunResult {
        prob_total: st.prob_total,
        busy_cycles,
        path_lengths,
    })
}

/// The Average unit: adders accumulate every NCU's result, then a shift
/// register divides by the 32 trees of the forest (floor).
pub fn average_unit(sum: u32) -> Result<u16, SimError> {
    let max = TREES_PER_FOREST as u32 * VALUE_MAX as u32;
    if sum > max {
        return Err(SimError::AccumulatorOverflow { sum, max });
    }
    Ok((sum >> 5) as u16)
}

/// One PE evaluating one forest: NCU slots run in parallel, so the slowest
/// gates the PE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeRunResult {
    pub class_prob_q: u16,
    pub pe_cycles: u64,
    /// One entry per provisioned NCU slot; slots beyond the packed groups
    /// stay idle.
    pub ncus: Vec<NcuRunResult>,
}

pub fn pe_run(
    groups: &[TreeRamImage],
    features_q: &[u16],
    config: &SimConfig,
) -> Result<PeRunResult, SimError> {
    if groups.len() > config.ncus_per_pe {
        return Err(SimError::Config(format!(
            "{} tree groups exceed {} NCU slots",
            groups.len(),
            config.ncus_per_pe
        )));
    }
    let mut ncus = Vec::with_capacity(config.ncus_per_pe);
    let mut sum = 0u32;
    let mut pe_cycles = 0u64;
    for (slot, image) in groups.iter().enumerate() {
        let r = ncu_run(image, features_q, config.node_op_cycles, slot)?;
        sum += r.prob_total;
        pe_cycles = pe_cycles.max(r.busy_cycles);
        ncus.push(r);
    }
    ncus.resize(config.ncus_per_pe, NcuRunResult::idle());
    Ok(PeRunResult {
        class_prob_q: average_unit(sum)?,
        pe_cycles,
        ncus,
    })
}

/// Both PEs of one layer; the layer is gated by its slower PE.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRunResult {
    pub probs_q: [u16; 2],
    pub layer_cycles: u64,
    pub pes: [PeRunResult; 2],
}

pub fn layer_run(
    layer: &PackedLayer,
    features_q: &[u16],
    config: &SimConfig,
) -> Result<LayerRunResult, SimError> {
    let pe_a = pe_run(&layer.forests[0].groups, features_q, config)?;
    let pe_b = pe_run(&layer.forests[1].groups, features_q, config)?;
    Ok(LayerRunResult {
        probs_q: [pe_a.class_prob_q, pe_b.class_prob_q],
        layer_cycles: pe_a.pe_cycles.max(pe_b.pe_cycles),
        pes: [pe_a, pe_b],
    })
}

/// Simulator prediction for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimPrediction {
    /// Final quantized positive-class probability, `(q_a + q_b) >> 1`.
    pub final_q: u16,
    /// 1 iff `final_q >= 8192`.
    pub class: u8,
    pub per_layer_q: Vec<[u16; 2]>,
}

/// Per-tree record inside a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeTrace {
    pub tree: usize,
    pub path_length: u32,
    pub cycles: u64,
}

/// Per-NCU record; `ncu` is the layer-global slot id `pe * ncus_per_pe + slot`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NcuTrace {
    pub ncu: usize,
    pub busy_cycles: u64,
    pub prob_total: u32,
    pub trees: Vec<TreeTrace>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeTrace {
    pub pe: usize,
    pub pe_cycles: u64,
    pub class_prob_q: u16,
    pub ncus: Vec<NcuTrace>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub layer_cycles: u64,
    pub pes: Vec<PeTrace>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub sample: usize,
    pub layers: Vec<LayerTrace>,
}

/// Full simulation trace; one record per (sample, layer, NCU, tree).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SimTrace {
    pub samples: Vec<SampleTrace>,
}

impl SimTrace {
    /// Line-oriented dump: `sample layer ncu tree path_length busy_cycles`.
    pub fn write_lines<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# sample layer ncu tree path_length busy_cycles")?;
        for s in &self.samples {
            for l in &s.layers {
                for pe in &l.pes {
                    for ncu in &pe.ncus {
                        for t in &ncu.trees {
                            writeln!(
                                w,
                                "{} {} {} {} {} {}",
                                s.sample, l.layer, ncu.ncu, t.tree, t.path_length, t.cycles
                            )?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Busy-cycle dispersion of parallel units: `max / mean`.
fn max_mean_ratio(busy: impl Iterator<Item = u64> + Clone) -> f64 {
    let (mut max, mut sum, mut n) = (0u64, 0u64, 0usize);
    for b in busy {
        max = max.max(b);
        sum += b;
        n += 1;
    }
    if n == 0 || sum == 0 {
        return 1.0;
    }
    max as f64 / (sum as f64 / n as f64)
}

/// Mean max/mean busy-cycle ratios of one PE across the simulated samples,
/// under the grouped dataflow (8 trees per NCU) and under a counterfactual
/// schedule with one virtual unit per tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeImbalance {
    pub layer: usize,
    pub pe: usize,
    pub grouped_mean_ratio: f64,
    pub counterfactual_mean_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub per_pe: Vec<PeImbalance>,
    pub grouped_mean_ratio: f64,
    pub counterfactual_mean_ratio: f64,
    pub samples: usize,
}

#[derive(Clone, Default)]
struct ImbalanceAccum {
    grouped_sum: f64,
    counterfactual_sum: f64,
    count: usize,
}

fn pe_ratios(ncus: &[NcuRunResult]) -> (f64, f64) {
    let active: Vec<&NcuRunResult> = ncus.iter().filter(|n| n.busy_cycles > 0).collect();
    let grouped = max_mean_ratio(active.iter().map(|n| n.busy_cycles));
    let counterfactual = max_mean_ratio(
        active
            .iter()
            .flat_map(|n| n.path_lengths.iter().map(|&p| p as u64)),
    );
    (grouped, counterfactual)
}

/// Performance summary of a simulated stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub clock_hz: f64,
    pub num_samples: usize,
    pub num_layers: usize,
    pub pipeline_enabled: bool,
    pub initiation_interval_cycles_mean: f64,
    pub initiation_interval_cycles_min: u64,
    pub initiation_interval_cycles_max: u64,
    pub worst_case_ii_cycles: u64,
    pub latency_cycles_mean: f64,
    pub latency_cycles_min: u64,
    pub latency_cycles_max: u64,
    pub latency_us_mean: f64,
    pub throughput_samples_per_s: f64,
    pub throughput_ksamples_per_s: f64,
    pub per_layer_cycles_mean: Vec<f64>,
    /// Busy cycles summed over samples, `[layer][pe * ncus_per_pe + slot]`.
    pub per_ncu_busy_cycles: Vec<Vec<u64>>,
    pub imbalance: ImbalanceReport,
}

impl PerfReport {
    /// Aligned human-readable rendering; the JSON form is the stable contract.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let mut row = |k: &str, v: String| {
            out.push_str(&format!("{k:<34}{v}\n"));
        };
        row("samples", self.num_samples.to_string());
        row("layers", self.num_layers.to_string());
        row("clock (MHz)", format!("{:.1}", self.clock_hz / 1e6));
        row("pipeline", self.pipeline_enabled.to_string());
        row(
            "initiation interval (cycles)",
            format!(
                "mean {:.2}  min {}  max {}",
                self.initiation_interval_cycles_mean,
                self.initiation_interval_cycles_min,
                self.initiation_interval_cycles_max
            ),
        );
        row("worst-case II (cycles)", self.worst_case_ii_cycles.to_string());
        row(
            "latency (cycles)",
            format!(
                "mean {:.2}  min {}  max {}",
                self.latency_cycles_mean, self.latency_cycles_min, self.latency_cycles_max
            ),
        );
        row("latency (us)", format!("{:.4}", self.latency_us_mean));
        row(
            "throughput (Ksamples/s)",
            format!("{:.2}", self.throughput_ksamples_per_s),
        );
        row(
            "imbalance max/mean (grouped)",
            format!("{:.4}", self.imbalance.grouped_mean_ratio),
        );
        row(
            "imbalance max/mean (1 tree/unit)",
            format!("{:.4}", self.imbalance.counterfactual_mean_ratio),
        );
        let layers = self
            .per_layer_cycles_mean
            .iter()
            .enumerate()
            .map(|(i, c)| format!("L{i} {c:.1}"))
            .collect::<Vec<_>>()
            .join(" | ");
        row("per-layer mean cycles", layers);
        out
    }
}

/// Everything a simulation run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub predictions: Vec<SimPrediction>,
    pub report: PerfReport,
    pub trace: Option<SimTrace>,
}

struct SampleOutcome {
    prediction: SimPrediction,
    layer_cycles: Vec<u64>,
    ncu_busy: Vec<Vec<u64>>,
    ratios: Vec<[(f64, f64); 2]>,
    trace: Option<SampleTrace>,
}

fn simulate_sample(
    model: &PackedModel,
    base_q: &[u16],
    config: &SimConfig,
    sample_idx: usize,
    collect_trace: bool,
) -> Result<SampleOutcome, SimError> {
    let base_width = model.base_feature_width();
    if base_q.len() != base_width {
        return Err(SimError::WidthMismatch {
            layer: 0,
            expected: base_width,
            got: base_q.len(),
        });
    }
    let num_layers = model.layers.len();
    let mut features: Vec<u16> = base_q.to_vec();
    let mut layer_cycles = Vec::with_capacity(num_layers);
    let mut ncu_busy = Vec::with_capacity(num_layers);
    let mut ratios = Vec::with_capacity(num_layers);
    let mut per_layer_q = Vec::with_capacity(num_layers);
    let mut layer_traces = Vec::new();
    for (k, layer) in model.layers.iter().enumerate() {
        let expected = model.maps[k].width();
        if features.len() != expected {
            return Err(SimError::WidthMismatch {
                layer: k,
                expected,
                got: features.len(),
            });
        }
        let lr = layer_run(layer, &features, config)?;
        layer_cycles.push(lr.layer_cycles + config.layer_overhead_cycles);
        ncu_busy.push(
            lr.pes
                .iter()
                .flat_map(|pe| pe.ncus.iter().map(|n| n.busy_cycles))
                .collect::<Vec<u64>>(),
        );
        ratios.push([pe_ratios(&lr.pes[0].ncus), pe_ratios(&lr.pes[1].ncus)]);
        per_layer_q.push(lr.probs_q);
        if collect_trace {
            layer_traces.push(LayerTrace {
                layer: k,
                layer_cycles: lr.layer_cycles + config.layer_overhead_cycles,
                pes: lr
                    .pes
                    .iter()
                    .enumerate()
                    .map(|(pi, pe)| PeTrace {
                        pe: pi,
                        pe_cycles: pe.pe_cycles,
                        class_prob_q: pe.class_prob_q,
                        ncus: pe
                            .ncus
                            .iter()
                            .enumerate()
                            .filter(|(_, n)| n.busy_cycles > 0)
                            .map(|(slot, n)| NcuTrace {
                                ncu: pi * config.ncus_per_pe + slot,
                                busy_cycles: n.busy_cycles,
                                prob_total: n.prob_total,
                                trees: n
                                    .path_lengths
                                    .iter()
                                    .enumerate()
                                    .map(|(t, &p)| TreeTrace {
                                        tree: t,
                                        path_length: p,
                                        cycles: p as u64 * config.node_op_cycles,
                                    })
                                    .collect(),
                            })
                            .collect(),
                    })
                    .collect(),
            });
        }
        if k + 1 < num_layers {
            let [q_a, q_b] = lr.probs_q;
            features.truncate(base_width);
            features.extend_from_slice(&[VALUE_MAX - q_a, q_a, VALUE_MAX - q_b, q_b]);
        }
    }
    let last = per_layer_q.last().copied().unwrap_or([0, 0]);
    let final_q = ((last[0] as u32 + last[1] as u32) >> 1) as u16;
    Ok(SampleOutcome {
        prediction: SimPrediction {
            final_q,
            class: u8::from(final_q >= crate::codec::CLASS_THRESHOLD_Q),
            per_layer_q,
        },
        layer_cycles,
        ncu_busy,
        ratios,
        trace: collect_trace.then_some(SampleTrace {
            sample: sample_idx,
            layers: layer_traces,
        }),
    })
}

/// Simulate a sample stream through the per-layer pipeline.
///
/// Per sample, the initiation interval is its slowest layer time (its total
/// time when pipelining is disabled) and latency is the sum of its layer
/// times; steady-state throughput is `clock_hz / mean II`.
pub fn pipeline_run(
    model: &PackedModel,
    samples: &[Vec<u16>],
    config: &SimConfig,
    collect_trace: bool,
) -> Result<SimRun, SimError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(SimError::EmptyStream);
    }
    if model.layers.is_empty() {
        return Err(SimError::Config("packed model has no layers".into()));
    }

    #[cfg(feature = "parallel")]
    let outcomes: Result<Vec<SampleOutcome>, SimError> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| simulate_sample(model, s, config, i, collect_trace))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let outcomes: Result<Vec<SampleOutcome>, SimError> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| simulate_sample(model, s, config, i, collect_trace))
        .collect();
    let outcomes = outcomes?;

    let num_layers = model.layers.len();
    let slots_per_layer = config.pes_per_layer * config.ncus_per_pe;
    let mut predictions = Vec::with_capacity(outcomes.len());
    let mut traces = collect_trace.then(Vec::new);
    let mut ii_sum = 0f64;
    let (mut ii_min, mut ii_max) = (u64::MAX, 0u64);
    let mut lat_sum = 0f64;
    let (mut lat_min, mut lat_max) = (u64::MAX, 0u64);
    let mut layer_cycle_sums = vec![0f64; num_layers];
    let mut ncu_busy_totals = vec![vec![0u64; slots_per_layer]; num_layers];
    let mut imb = vec![[ImbalanceAccum::default(), ImbalanceAccum::default()]; num_layers];

    for o in outcomes {
        let latency: u64 = o.layer_cycles.iter().sum();
        let ii = if config.pipeline_enabled {
            o.layer_cycles.iter().copied().max().unwrap_or(0)
        } else {
            latency
        };
        ii_sum += ii as f64;
        ii_min = ii_min.min(ii);
        ii_max = ii_max.max(ii);
        lat_sum += latency as f64;
        lat_min = lat_min.min(latency);
        lat_max = lat_max.max(latency);
        for (k, c) in o.layer_cycles.iter().enumerate() {
            layer_cycle_sums[k] += *c as f64;
        }
        for (k, busy) in o.ncu_busy.iter().enumerate() {
            for (j, b) in busy.iter().enumerate() {
                ncu_busy_totals[k][j] += b;
            }
        }
        for (k, pes) in o.ratios.iter().enumerate() {
            for (pi, (g, cf)) in pes.iter().enumerate() {
                imb[k][pi].grouped_sum += g;
                imb[k][pi].counterfactual_sum += cf;
                imb[k][pi].count += 1;
            }
        }
        predictions.push(o.prediction);
        if let (Some(ts), Some(t)) = (traces.as_mut(), o.trace) {
            ts.push(t);
        }
    }

    let n = predictions.len() as f64;
    let mut per_pe = Vec::with_capacity(num_layers * 2);
    let (mut g_sum, mut cf_sum, mut g_n) = (0f64, 0f64, 0usize);
    for (k, pes) in imb.iter().enumerate() {
        for (pi, acc) in pes.iter().enumerate() {
            per_pe.push(PeImbalance {
                layer: k,
                pe: pi,
                grouped_mean_ratio: acc.grouped_sum / acc.count as f64,
                counterfactual_mean_ratio: acc.counterfactual_sum / acc.count as f64,
            });
            g_sum += acc.grouped_sum;
            cf_sum += acc.counterfactual_sum;
            g_n += acc.count;
        }
    }
    let imbalance = ImbalanceReport {
        per_pe,
        grouped_mean_ratio: g_sum / g_n as f64,
        counterfactual_mean_ratio: cf_sum / g_n as f64,
        samples: predictions.len(),
    };
    let ii_mean = ii_sum / n;
    let report = PerfReport {
        clock_hz: config.clock_hz,
        num_samples: predictions.len(),
        num_layers,
        pipeline_enabled: config.pipeline_enabled,
        initiation_interval_cycles_mean: ii_mean,
        initiation_interval_cycles_min: ii_min,
        initiation_interval_cycles_max: ii_max,
        worst_case_ii_cycles: config.worst_case_layer_cycles(model.max_depth),
        latency_cycles_mean: lat_sum / n,
        latency_cycles_min: lat_min,
        latency_cycles_max: lat_max,
        latency_us_mean: lat_sum / n / config.clock_hz * 1e6,
        throughput_samples_per_s: config.clock_hz / ii_mean,
        throughput_ksamples_per_s: config.clock_hz / ii_mean / 1e3,
        per_layer_cycles_mean: layer_cycle_sums.iter().map(|s| s / n).collect(),
        per_ncu_busy_cycles: ncu_busy_totals,
        imbalance,
    };
    Ok(SimRun {
        predictions,
        report,
        trace: traces.map(|samples| SimTrace { samples }),
    })
}

/// Recompute the imbalance statistics from a trace.
pub fn imbalance_report(trace: &SimTrace) -> Result<ImbalanceReport, SimError> {
    if trace.samples.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    let mut acc: Vec<Vec<ImbalanceAccum>> = Vec::new();
    for sample in &trace.samples {
        for layer in &sample.layers {
            if acc.len() <= layer.layer {
                acc.resize(layer.layer + 1, Vec::new());
            }
            for pe in &layer.pes {
                let slot = &mut acc[layer.layer];
                if slot.len() <= pe.pe {
                    slot.resize(pe.pe + 1, ImbalanceAccum::default());
                }
                let grouped = max_mean_ratio(pe.ncus.iter().map(|n| n.busy_cycles));
                let counterfactual = max_mean_ratio(
                    pe.ncus
                        .iter()
                        .flat_map(|n| n.trees.iter().map(|t| t.path_length as u64)),
                );
                let a = &mut slot[pe.pe];
                a.grouped_sum += grouped;
                a.counterfactual_sum += counterfactual;
                a.count += 1;
            }
        }
    }
    let mut per_pe = Vec::new();
    let (mut g_sum, mut cf_sum, mut n) = (0f64, 0f64, 0usize);
    for (k, pes) in acc.iter().enumerate() {
        for (pi, a) in pes.iter().enumerate() {
            if a.count == 0 {
                continue;
            }
            per_pe.push(PeImbalance {
                layer: k,
                pe: pi,
                grouped_mean_ratio: a.grouped_sum / a.count as f64,
                counterfactual_mean_ratio: a.counterfactual_sum / a.count as f64,
            });
            g_sum += a.grouped_sum;
            cf_sum += a.counterfactual_sum;
            n += a.count;
        }
    }
    Ok(ImbalanceReport {
        per_pe,
        grouped_mean_ratio: g_sum / n as f64,
        counterfactual_mean_ratio: cf_sum / n as f64,
        samples: trace.samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{pack_group, pack_model, QuantizedForest, QuantizedModel, QuantizedNode, QuantizedTree};
    use crate::codec::{FeatureMap, QuantizationMap};
    use crate::model::ForestKind;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn leaf_tree(value_q: u16) -> QuantizedTree {
        QuantizedTree::new(QuantizedNode::Leaf { value_q })
    }

    fn complete_qtree(rng: &mut StdRng, depth: usize, width: usize) -> QuantizedNode {
        if depth == 1 {
            return QuantizedNode::Leaf {
                value_q: rng.gen_range(0..=VALUE_MAX),
            };
        }
        QuantizedNode::Split {
            feature: rng.gen_range(0..width),
            threshold_q: rng.gen_range(0..=VALUE_MAX),
            left: Box::new(complete_qtree(rng, depth - 1, width)),
            right: Box::new(complete_qtree(rng, depth - 1, width)),
        }
    }

    fn random_qtree(rng: &mut StdRng, depth_left: usize, width: usize) -> QuantizedNode {
        if depth_left <= 1 || rng.gen_bool(0.3) {
            return QuantizedNode::Leaf {
                value_q: rng.gen_range(0..=VALUE_MAX),
            };
        }
        QuantizedNode::Split {
            feature: rng.gen_range(0..width),
            threshold_q: rng.gen_range(0..=VALUE_MAX),
            left: Box::new(random_qtree(rng, depth_left - 1, width)),
            right: Box::new(random_qtree(rng, depth_left - 1, width)),
        }
    }

    fn unit_maps(layers: usize, base: usize) -> Vec<QuantizationMap> {
        (0..layers)
            .map(|k| QuantizationMap {
                features: (0..if k == 0 { base } else { base + 4 })
                    .map(|_| FeatureMap::unit())
                    .collect(),
            })
            .collect()
    }

    fn model_of_trees(
        make: impl Fn(&mut StdRng, usize) -> QuantizedNode,
        seed: u64,
        layers: usize,
        base: usize,
    ) -> QuantizedModel {
        let mut rng = StdRng::seed_from_u64(seed);
        let built = (0..layers)
            .map(|k| {
                let width = if k == 0 { base } else { base + 4 };
                let forest = |rng: &mut StdRng, kind| QuantizedForest {
                    kind,
                    trees: (0..32).map(|_| QuantizedTree::new(make(rng, width))).collect(),
                };
                [
                    forest(&mut rng, ForestKind::CompletelyRandom),
                    forest(&mut rng, ForestKind::Random),
                ]
            })
            .collect();
        QuantizedModel {
            base_feature_width: base,
            layers: built,
            maps: unit_maps(layers, base),
        }
    }

    #[test]
    fn ncu_single_leaf_group() {
        let trees: Vec<QuantizedTree> = (0..8).map(|_| leaf_tree(100)).collect();
        let image = pack_group(&trees, 8).unwrap();
        let r = ncu_run(&image, &[0; 4], 4, 0).unwrap();
        assert_eq!(r.prob_total, 800);
        assert_eq!(r.busy_cycles, 32);
        assert_eq!(r.path_lengths, [1; 8]);
    }

    #[test]
    fn ncu_complete_depth8_is_input_independent() {
        let mut rng = StdRng::seed_from_u64(2);
        let trees: Vec<QuantizedTree> = (0..8)
            .map(|_| QuantizedTree::new(complete_qtree(&mut rng, 8, 5)))
            .collect();
        let image = pack_group(&trees, 8).unwrap();
        for _ in 0..10 {
            let feats: Vec<u16> = (0..5).map(|_| rng.gen_range(0..=VALUE_MAX)).collect();
            let r = ncu_run(&image, &feats, 4, 0).unwrap();
            assert_eq!(r.busy_cycles, 4 * 8 * 8);
            assert_eq!(r.path_lengths, [8; 8]);
        }
    }

    #[test]
    fn ncu_matches_software_traversal() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let trees: Vec<QuantizedTree> = (0..8)
                .map(|_| QuantizedTree::new(random_qtree(&mut rng, 8, 6)))
                .collect();
            let image = pack_group(&trees, 8).unwrap();
            let feats: Vec<u16> = (0..6).map(|_| rng.gen_range(0..=VALUE_MAX)).collect();
            let r = ncu_run(&image, &feats, 4, 0).unwrap();
            let mut want_sum = 0u32;
            let mut want_cycles = 0u64;
            for (i, tree) in trees.iter().enumerate() {
                let (v, p) = tree.traverse(&feats).unwrap();
                want_sum += v as u32;
                want_cycles += 4 * p as u64;
                assert_eq!(r.path_lengths[i] as usize, p);
            }
            assert_eq!(r.prob_total, want_sum);
            assert_eq!(r.busy_cycles, want_cycles);
        }
    }

    #[test]
    fn average_unit_examples() {
        assert_eq!(average_unit(0).unwrap(), 0);
        assert_eq!(average_unit(32 * 16383).unwrap(), 16383);
        assert_eq!(average_unit(33).unwrap(), 1);
        assert!(matches!(
            average_unit(32 * 16383 + 1),
            Err(SimError::AccumulatorOverflow { .. })
        ));
    }

    #[test]
    fn pe_cycles_is_max_and_average_matches() {
        let mut rng = StdRng::seed_from_u64(4);
        let model = model_of_trees(|r, w| random_qtree(r, 8, w), 5, 1, 6);
        let packed = pack_model(&model).unwrap();
        let config = SimConfig::default();
        let feats: Vec<u16> = (0..6).map(|_| rng.gen_range(0..=VALUE_MAX)).collect();
        let pe = pe_run(&packed.layers[0].forests[0].groups, &feats, &config).unwrap();
        assert_eq!(pe.ncus.len(), 8);
        let max = pe.ncus.iter().map(|n| n.busy_cycles).max().unwrap();
        assert_eq!(pe.pe_cycles, max);
        // Idle provisioned slots exist and cost nothing.
        assert_eq!(pe.ncus[4].busy_cycles, 0);
        assert_eq!(pe.ncus[7].busy_cycles, 0);
        let sum: u32 = pe.ncus.iter().map(|n| n.prob_total).sum();
        assert_eq!(pe.class_prob_q, (sum >> 5) as u16);
        // Reference forest mean under the same shift-floor rounding.
        let mut ref_sum = 0u32;
        for tree in &model.layers[0][0].trees {
            ref_sum += tree.traverse(&feats).unwrap().0 as u32;
        }
        assert_eq!(pe.class_prob_q, (ref_sum >> 5) as u16);
    }

    #[test]
    fn layer_cycles_is_max_of_pes() {
        let model = model_of_trees(|r, w| random_qtree(r, 8, w), 6, 1, 6);
        let packed = pack_model(&model).unwrap();
        let config = SimConfig::default();
        let feats = vec![0u16; 6];
        let lr = layer_run(&packed.layers[0], &feats, &config).unwrap();
        assert_eq!(
            lr.layer_cycles,
            lr.pes[0].pe_cycles.max(lr.pes[1].pe_cycles)
        );
    }

    #[test]
    fn pipeline_trivial_all_leaf_model() {
        let model = model_of_trees(
            |rng, _| QuantizedNode::Leaf {
                value_q: rng.gen_range(0..=VALUE_MAX),
            },
            7,
            1,
            4,
        );
        let packed = pack_model(&model).unwrap();
        let samples: Vec<Vec<u16>> = (0..10).map(|_| vec![0u16; 4]).collect();
        let run = pipeline_run(&packed, &samples, &SimConfig::default(), false).unwrap();
        assert_eq!(run.report.initiation_interval_cycles_mean, 32.0);
        assert_eq!(run.report.latency_cycles_mean, 32.0);
        assert_eq!(run.report.throughput_samples_per_s, 4.0e8 / 32.0);
    }

    #[test]
    fn pipeline_depth8_reference_arithmetic() {
        let model = model_of_trees(|r, w| complete_qtree(r, 8, w), 8, 4, 8);
        let packed = pack_model(&model).unwrap();
        let mut rng = StdRng::seed_from_u64(9);
        let samples: Vec<Vec<u16>> = (0..5)
            .map(|_| (0..8).map(|_| rng.gen_range(0..=VALUE_MAX)).collect())
            .collect();
        let run = pipeline_run(&packed, &samples, &SimConfig::default(), true).unwrap();
        assert_eq!(run.report.latency_cycles_mean, 1024.0);
        assert_eq!(run.report.initiation_interval_cycles_mean, 256.0);
        assert!((run.report.latency_us_mean - 2.56).abs() < 1e-12);
        assert!((run.report.throughput_samples_per_s - 1.5625e6).abs() < 1e-6);
        assert_eq!(run.report.worst_case_ii_cycles, 256);
    }

    #[test]
    fn pipeline_matches_quantized_reference() {
        let model = model_of_trees(|r, w| random_qtree(r, 8, w), 10, 3, 7);
        let packed = pack_model(&model).unwrap();
        let mut rng = StdRng::seed_from_u64(11);
        let samples: Vec<Vec<u16>> = (0..200)
            .map(|_| (0..7).map(|_| rng.gen_range(0..=VALUE_MAX)).collect())
            .collect();
        let run = pipeline_run(&packed, &samples, &SimConfig::default(), false).unwrap();
        for (sample, pred) in samples.iter().zip(&run.predictions) {
            let want = model.infer(sample).unwrap();
            assert_eq!(pred.final_q, want.final_q);
            assert_eq!(pred.class, want.class);
            assert_eq!(pred.per_layer_q, want.per_layer_q);
        }
    }

    #[test]
    fn cycle_law_holds_in_traces() {
        let model = model_of_trees(|r, w| random_qtree(r, 8, w), 12, 2, 5);
        let packed = pack_model(&model).unwrap();
        let mut rng = StdRng::seed_from_u64(13);
        let samples: Vec<Vec<u16>> = (0..50)
            .map(|_| (0..5).map(|_| rng.gen_range(0..=VALUE_MAX)).collect())
            .collect();
        let run = pipeline_run(&packed, &samples, &SimConfig::default(), true).unwrap();
        let trace = run.trace.unwrap();
        assert_eq!(trace.samples.len(), 50);
        for s in &trace.samples {
            for l in &s.layers {
                for pe in &l.pes {
                    let mut pe_max = 0;
                    for ncu in &pe.ncus {
                        let path_sum: u64 = ncu.trees.iter().map(|t| t.path_length as u64).sum();
                        assert_eq!(ncu.busy_cycles, 4 * path_sum);
                        pe_max = pe_max.max(ncu.busy_cycles);
                    }
                    assert_eq!(pe.pe_cycles, pe_max);
                }
            }
        }
    }

    #[test]
    fn determinism_identical_runs() {
        let model = model_of_trees(|r, w| random_qtree(r, 8, w), 14, 2, 5);
        let packed = pack_model(&model).unwrap();
        let mut rng = StdRng::seed_from_u64(15);
        let samples: Vec<Vec<u16>> = (0..64)
            .map(|_| (0..5).map(|_| rng.gen_range(0..=VALUE_MAX)).collect())
            .collect();
        let a = pipeline_run(&packed, &samples, &SimConfig::default(), true).unwrap();
        let b = pipeline_run(&packed, &samples, &SimConfig::default(), true).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.report, b.report);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn imbalance_equal_paths_ratio_one() {
        let model = model_of_trees(|r, w| complete_qtree(r, 4, w), 16, 1, 5);
        let packed = pack_model(&model).unwrap();
        let samples = vec![vec![0u16; 5]; 3];
        let run = pipeline_run(&packed, &samples, &SimConfig::default(), true).unwrap();
        assert_eq!(run.report.imbalance.grouped_mean_ratio, 1.0);
        assert_eq!(run.report.imbalance.counterfactual_mean_ratio, 1.0);
        // Trace-derived statistics agree with the inline ones.
        let from_trace = imbalance_report(run.trace.as_ref().unwrap()).unwrap();
        assert_eq!(from_trace.grouped_mean_ratio, 1.0);
        assert_eq!(from_trace.counterfactual_mean_ratio, 1.0);
    }

    #[test]
    fn imbalance_grouping_dampens_one_deep_tree() {
        // 7 shallow trees + 1 deep tree per group: the grouped schedule hides
        // most of the gap, the one-tree-per-unit schedule does not.
        let deep = {
            let mut rng = StdRng::seed_from_u64(17);
            QuantizedTree::new(complete_qtree(&mut rng, 8, 4))
        };
        let shallow = leaf_tree(5);
        let mut trees = vec![shallow; 7];
        trees.push(deep);
        let forest = QuantizedForest {
            kind: ForestKind::Random,
            trees: std::iter::repeat(trees.clone()).take(4).flatten().collect(),
        };
        let model = QuantizedModel {
            base_feature_width: 4,
            layers: vec![[forest.clone(), forest]],
            maps: unit_maps(1, 4),
        };
        let packed = pack_model(&model).unwrap();
        let run = pipeline_run(&packed, &[vec![0u16; 4]], &SimConfig::default(), true).unwrap();
        let imb = &run.report.imbalance;
        assert!(imb.grouped_mean_ratio < imb.counterfactual_mean_ratio);
        // All groups identical: grouped ratio exactly 1.
        assert_eq!(imb.grouped_mean_ratio, 1.0);
    }

    #[test]
    fn empty_stream_and_trace_error() {
        let model = model_of_trees(|r, w| random_qtree(r, 6, w), 18, 1, 4);
        let packed = pack_model(&model).unwrap();
        assert!(matches!(
            pipeline_run(&packed, &[], &SimConfig::default(), false),
            Err(SimError::EmptyStream)
        ));
        assert!(matches!(
            imbalance_report(&SimTrace::default()),
            Err(SimError::EmptyTrace)
        ));
    }

    #[test]
    fn trace_lines_format() {
        let model = model_of_trees(|r, w| random_qtree(r, 6, w), 19, 1, 4);
        let packed = pack_model(&model).unwrap();
        let run = pipeline_run(&packed, &[vec![0u16; 4]], &SimConfig::default(), true).unwrap();
        let mut buf = Vec::new();
        run.trace.unwrap().write_lines(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# sample layer ncu tree path_length busy_cycles");
        let first = lines.next().unwrap();
        assert_eq!(first.split_whitespace().count(), 6);
    }

    #[test]
    fn config_validation() {
        let mut c = SimConfig::default();
        c.trees_per_ncu = 4;
        assert!(matches!(c.validate(), Err(SimError::Config(_))));
        let mut c = SimConfig::default();
        c.clock_hz = 0.0;
        assert!(c.validate().is_err());
        assert!(SimConfig::default().validate().is_ok());
    }
}
