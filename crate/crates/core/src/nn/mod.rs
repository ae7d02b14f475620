//! Masked feed-forward estimators.
//!
//! A [`MaskedNetwork`] maps one measurement vector to per-unit voltage
//! magnitudes for every (bus, phase) slot. Hidden layer `t` holds
//! `block_width` channels per bus and computes
//! `k_t = leaky_relu(W_t k_{t-1} + b_t)`, where `W_t` is dense storage
//! multiplied by the bus-level pattern of [`MaskPlan`]. Bus `b` is read out
//! by a linear head from its own channels at layer `exit_layer[b]`.
//!
//! Inputs are the raw measurement values routed to the bus they are taken
//! at (branch currents go to the PMU bus), standardized with training
//! statistics. Outputs are de-standardized with per-slot label statistics.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_SCHEMA};
pub use train::{fit, train, Adam, TrainConfig, TrainingCurve};

use nalgebra::{DMatrix, DMatrixView};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{FeederModel, Phase};
use crate::measurements::{Locus, MeasurementKind, MeasurementSet};
use crate::topology::MaskPlan;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("measurements do not match the template the network was built for")]
    TemplateMismatch,
    #[error("plan covers {plan} buses but the feeder has {feeder}")]
    PlanMismatch { plan: usize, feeder: usize },
    #[error("sample {index}: expected {expected} values, got {got}")]
    SampleShape { index: usize, expected: usize, got: usize },
    #[error("no samples to {0}")]
    Empty(&'static str),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One labelled example: measurement values in template order and per-unit
/// magnitudes in state-slot order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub z: Vec<f64>,
    pub v: Vec<f64>,
}

/// Routing of template rows to bus input channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputLayout {
    keys: Vec<(MeasurementKind, Locus, Phase)>,
    /// Input position to template row.
    order: Vec<usize>,
    /// Bus `b` owns input positions `offsets[b]..offsets[b + 1]`.
    offsets: Vec<usize>,
}

impl InputLayout {
    pub fn new(model: &FeederModel, template: &MeasurementSet) -> Self {
        let n = model.bus_count();
        let mut per_bus = vec![Vec::new(); n];
        for (r, m) in template.rows.iter().enumerate() {
            per_bus[m.locus.bus()].push(r);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut order = Vec::with_capacity(template.len());
        offsets.push(0);
        for rows in per_bus {
            order.extend(rows);
            offsets.push(order.len());
        }
        InputLayout {
            keys: template.rows.iter().map(|m| m.key()).collect(),
            order,
            offsets,
        }
    }

    /// Total input width.
    pub fn width(&self) -> usize {
        self.order.len()
    }

    pub fn bus_width(&self, bus: usize) -> usize {
        self.offsets[bus + 1] - self.offsets[bus]
    }

    pub fn bus_range(&self, bus: usize) -> std::ops::Range<usize> {
        self.offsets[bus]..self.offsets[bus + 1]
    }

    pub fn matches(&self, z: &MeasurementSet) -> bool {
        self.keys.len() == z.len() && self.keys.iter().zip(&z.rows).all(|(k, m)| *k == m.key())
    }

    /// Raw values of `z` in input order.
    pub fn embed(&self, z: &MeasurementSet) -> Result<Vec<f64>, NnError> {
        if !self.matches(z) {
            return Err(NnError::TemplateMismatch);
        }
        Ok(self.order.iter().map(|&r| z.rows[r].value).collect())
    }

    /// Same as [`embed`](Self::embed) for a bare value vector in template order.
    pub fn embed_values(&self, values: &[f64]) -> Result<Vec<f64>, NnError> {
        if values.len() != self.keys.len() {
            return Err(NnError::TemplateMismatch);
        }
        Ok(self.order.iter().map(|&r| values[r]).collect())
    }
}

/// Per-bus feature vectors for `z` under `plan`; buses without measurements
/// get an empty vector.
pub fn embed_input(z: &MeasurementSet, model: &FeederModel, plan: &MaskPlan) -> Result<Vec<Vec<f64>>, NnError> {
    if plan.bus_count() != model.bus_count() {
        return Err(NnError::PlanMismatch {
            plan: plan.bus_count(),
            feeder: model.bus_count(),
        });
    }
    let layout = InputLayout::new(model, z);
    let flat = layout.embed(z)?;
    Ok((0..model.bus_count()).map(|b| flat[layout.bus_range(b)].to_vec()).collect())
}

/// Shape of one parameter tensor; weights are column-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedNetwork {
    plan: MaskPlan,
    input: InputLayout,
    /// First output slot of each bus; bus `b` owns `slot_offsets[b]..slot_offsets[b + 1]`.
    slot_offsets: Vec<usize>,
    pub(crate) in_mean: Vec<f64>,
    pub(crate) in_scale: Vec<f64>,
    pub(crate) out_mean: Vec<f64>,
    pub(crate) out_scale: Vec<f64>,
    /// Layer `t` weight at `2t`, bias at `2t + 1`; then per bus a readout
    /// weight and bias.
    pub(crate) tensors: Vec<Vec<f64>>,
    shapes: Vec<Shape>,
    /// 0/1 factor per weight entry; `None` for unmasked tensors.
    masks: Vec<Option<Vec<f64>>>,
}

/// Activations kept for the backward pass.
struct Trace {
    /// `k_0 ..= k_T`, each `rows x batch`.
    k: Vec<DMatrix<f64>>,
    /// Pre-activations `z_1 ..= z_T`.
    z: Vec<DMatrix<f64>>,
    /// Per-unit outputs, `slots x batch`.
    out: DMatrix<f64>,
}

impl MaskedNetwork {
    /// Fresh network with masked He initialization and identity
    /// normalization. Readouts start at zero, so the initial estimate is
    /// `out_mean` (1 p.u.).
    pub fn new(model: &FeederModel, plan: &MaskPlan, template: &MeasurementSet, seed: u64) -> Result<Self, NnError> {
        let n = model.bus_count();
        if plan.bus_count() != n {
            return Err(NnError::PlanMismatch {
                plan: plan.bus_count(),
                feeder: n,
            });
        }
        let input = InputLayout::new(model, template);
        let mut net = Self::skeleton(plan.clone(), input);
        net.initialize(seed);
        Ok(net)
    }

    /// Zero parameters with shapes and masks derived from `plan` and `input`.
    pub(crate) fn skeleton(plan: MaskPlan, input: InputLayout) -> Self {
        let n = plan.bus_count();
        let f = plan.block_width;
        let width = n * f;
        let mut shapes = Vec::new();
        let mut masks = Vec::new();
        for t in 1..=plan.depth {
            let cols = if t == 1 { input.width() } else { width };
            let mut m = vec![0.0; width * cols];
            for (i, j) in plan.allowed(t) {
                let (c0, c1) = if t == 1 {
                    (input.offsets[j], input.offsets[j + 1])
                } else {
                    (j * f, (j + 1) * f)
                };
                for c in c0..c1 {
                    for r in i * f..(i + 1) * f {
                        m[c * width + r] = 1.0;
                    }
                }
            }
            shapes.push(Shape { rows: width, cols });
            masks.push(Some(m));
            shapes.push(Shape { rows: width, cols: 1 });
            masks.push(None);
        }
        let mut slot_offsets = vec![0];
        for &k in &plan.outputs {
            shapes.push(Shape { rows: k, cols: f });
            masks.push(None);
            shapes.push(Shape { rows: k, cols: 1 });
            masks.push(None);
            slot_offsets.push(slot_offsets.last().unwrap() + k);
        }
        let slots = *slot_offsets.last().unwrap();
        MaskedNetwork {
            tensors: shapes.iter().map(|s| vec![0.0; s.rows * s.cols]).collect(),
            in_mean: vec![0.0; input.width()],
            in_scale: vec![1.0; input.width()],
            out_mean: vec![1.0; slots],
            out_scale: vec![1.0; slots],
            plan,
            input,
            slot_offsets,
            shapes,
            masks,
        }
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = self.plan.depth;
        for t in 0..depth {
            let shape = self.shapes[2 * t];
            let mask = self.masks[2 * t].as_ref().expect("hidden weights are masked");
            let w = &mut self.tensors[2 * t];
            for r in 0..shape.rows {
                let fan_in = (0..shape.cols).filter(|&c| mask[c * shape.rows + r] != 0.0).count();
                if fan_in == 0 {
                    continue;
                }
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                for c in 0..shape.cols {
                    let idx = c * shape.rows + r;
                    w[idx] = if mask[idx] != 0.0 { normal.sample(&mut rng) } else { 0.0 };
                }
            }
        }
    }

    pub fn plan(&self) -> &MaskPlan {
        &self.plan
    }

    pub fn input_layout(&self) -> &InputLayout {
        &self.input
    }

    pub fn output_len(&self) -> usize {
        *self.slot_offsets.last().unwrap()
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tensors
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Weight mask of tensor `i`, if any.
    pub fn mask(&self, i: usize) -> Option<&[f64]> {
        self.masks[i].as_deref()
    }

    /// Number of trainable entries not fixed at zero by a mask.
    pub fn parameter_count(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.masks)
            .map(|(t, m)| m.as_ref().map_or(t.len(), |m| m.iter().filter(|&&x| x != 0.0).count()))
            .sum()
    }

    /// Sets input and output standardization from training samples.
    pub fn fit_normalization(&mut self, samples: &[Sample]) -> Result<(), NnError> {
        if samples.is_empty() {
            return Err(NnError::Empty("normalize"));
        }
        let inputs: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| self.input.embed_values(&s.z))
            .collect::<Result<_, _>>()?;
        let (m, s) = column_stats(&inputs, 1e-12);
        self.in_mean = m;
        self.in_scale = s;
        let labels: Vec<Vec<f64>> = samples.iter().map(|s| s.v.clone()).collect();
        let (m, s) = column_stats(&labels, 1e-3);
        self.out_mean = m;
        self.out_scale = s;
        Ok(())
    }

    /// Input matrix (`width x batch`) of standardized features.
    fn input_matrix<'a>(&self, zs: impl ExactSizeIterator<Item = &'a [f64]>) -> Result<DMatrix<f64>, NnError> {
        let batch = zs.len();
        let width = self.input.width();
        let mut x = DMatrix::zeros(width, batch);
        for (c, z) in zs.enumerate() {
            if z.len() != self.input.keys.len() {
                return Err(NnError::SampleShape {
                    index: c,
                    expected: self.input.keys.len(),
                    got: z.len(),
                });
            }
            for (p, &r) in self.input.order.iter().enumerate() {
                x[(p, c)] = (z[r] - self.in_mean[p]) / self.in_scale[p];
            }
        }
        Ok(x)
    }

    fn view(&self, i: usize) -> DMatrixView<'_, f64> {
        let s = self.shapes[i];
        DMatrixView::from_slice(&self.tensors[i], s.rows, s.cols)
    }

    fn run(&self, x: DMatrix<f64>) -> Trace {
        let depth = self.plan.depth;
        let f = self.plan.block_width;
        let batch = x.ncols();
        let mut k = Vec::with_capacity(depth + 1);
        let mut z = Vec::with_capacity(depth);
        k.push(x);
        for t in 0..depth {
            let mut pre = self.view(2 * t) * &k[t];
            let bias = &self.tensors[2 * t + 1];
            for mut col in pre.column_iter_mut() {
                for (v, b) in col.iter_mut().zip(bias) {
                    *v += b;
                }
            }
            let act = pre.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
            z.push(pre);
            k.push(act);
        }
        let mut out = DMatrix::zeros(self.output_len(), batch);
        for b in 0..self.plan.bus_count() {
            let e = self.plan.exit_layer[b];
            let h = 2 * depth + 2 * b;
            let y = self.view(h) * k[e].rows(b * f, f);
            let bias = &self.tensors[h + 1];
            let s0 = self.slot_offsets[b];
            for c in 0..batch {
                for (i, &bi) in bias.iter().enumerate() {
                    let s = s0 + i;
                    out[(s, c)] = self.out_mean[s] + self.out_scale[s] * (y[(i, c)] + bi);
                }
            }
        }
        Trace { k, z, out }
    }

    /// Per-unit magnitudes for one measurement vector in template order.
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>, NnError> {
        let x = self.input_matrix(std::iter::once(z))?;
        Ok(self.run(x).out.column(0).iter().copied().collect())
    }

    /// Per-unit magnitudes for a measurement set built from the training template.
    pub fn estimate(&self, z: &MeasurementSet) -> Result<Vec<f64>, NnError> {
        if !self.input.matches(z) {
            return Err(NnError::TemplateMismatch);
        }
        self.forward(&z.values())
    }

    /// Column per sample.
    pub fn forward_batch(&self, zs: &[&[f64]]) -> Result<DMatrix<f64>, NnError> {
        let x = self.input_matrix(zs.iter().copied())?;
        Ok(self.run(x).out)
    }

    /// Sum over the batch of squared L2 magnitude errors, and its gradient
    /// for every tensor. Masked weight entries get exactly zero gradient.
    pub fn loss_and_gradients(&self, batch: &[&Sample]) -> Result<(f64, Vec<Vec<f64>>), NnError> {
        if batch.is_empty() {
            return Err(NnError::Empty("differentiate"));
        }
        let slots = self.output_len();
        for (i, s) in batch.iter().enumerate() {
            if s.v.len() != slots {
                return Err(NnError::SampleShape {
                    index: i,
                    expected: slots,
                    got: s.v.len(),
                });
            }
        }
        let x = self.input_matrix(batch.iter().map(|s| s.z.as_slice()))?;
        let trace = self.run(x);
        let depth = self.plan.depth;
        let f = self.plan.block_width;
        let cols = batch.len();

        let mut loss = 0.0;
        // d loss / d (readout output before de-standardization)
        let mut dy = DMatrix::zeros(slots, cols);
        for (c, s) in batch.iter().enumerate() {
            for r in 0..slots {
                let e = trace.out[(r, c)] - s.v[r];
                loss += e * e;
                dy[(r, c)] = 2.0 * e * self.out_scale[r];
            }
        }

        let mut grads: Vec<Vec<f64>> = self.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut dk: Vec<DMatrix<f64>> = trace.k.iter().map(|k| DMatrix::zeros(k.nrows(), cols)).collect();
        for b in 0..self.plan.bus_count() {
            let e = self.plan.exit_layer[b];
            let h = 2 * depth + 2 * b;
            let k_out = self.plan.outputs[b];
            let dyb = dy.rows(self.slot_offsets[b], k_out);
            let kb = trace.k[e].rows(b * f, f);
            let dw = dyb * kb.transpose();
            grads[h].copy_from_slice(dw.as_slice());
            for (i, g) in grads[h + 1].iter_mut().enumerate() {
                *g = dyb.row(i).sum();
            }
            let back = self.view(h).transpose() * dyb;
            let mut target = dk[e].rows_mut(b * f, f);
            target += back;
        }
        for t in (0..depth).rev() {
            let layer = t + 1;
            let mut dz = dk[layer].clone();
            dz.zip_apply(&trace.z[t], |g, pre| {
                if pre <= 0.0 {
                    *g *= LEAKY_SLOPE;
                }
            });
            let dw = &dz * trace.k[t].transpose();
            let mask = self.masks[2 * t].as_ref().expect("hidden weights are masked");
            for ((g, &d), &m) in grads[2 * t].iter_mut().zip(dw.as_slice()).zip(mask) {
                *g = if m != 0.0 { d } else { 0.0 };
            }
            for (i, g) in grads[2 * t + 1].iter_mut().enumerate() {
                *g = dz.row(i).sum();
            }
            if t > 0 {
                let back = self.view(2 * t).transpose() * &dz;
                dk[t] += back;
            }
        }
        Ok((loss, grads))
    }

    /// Re-applies every weight mask. Masked entries become exactly zero.
    pub fn apply_masks(&mut self) {
        for (t, m) in self.tensors.iter_mut().zip(&self.masks) {
            if let Some(m) = m {
                for (w, &keep) in t.iter_mut().zip(m) {
                    if keep == 0.0 {
                        *w = 0.0;
                    }
                }
            }
        }
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<EvalReport, NnError> {
        if samples.is_empty() {
            return Err(NnError::Empty("evaluate"));
        }
        let mut estimates = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let zs: Vec<&[f64]> = chunk.iter().map(|s| s.z.as_slice()).collect();
            let out = self.forward_batch(&zs)?;
            estimates.extend(out.column_iter().map(|c| c.iter().copied().collect::<Vec<f64>>()));
        }
        let truths: Vec<&[f64]> = samples.iter().map(|s| s.v.as_slice()).collect();
        let est: Vec<&[f64]> = estimates.iter().map(|e| e.as_slice()).collect();
        EvalReport::from_estimates(&self.slot_offsets, &est, &truths)
    }

    /// First output slot of each bus, plus the total at the end.
    pub fn slot_offsets(&self) -> &[usize] {
        &self.slot_offsets
    }
}

fn column_stats(rows: &[Vec<f64>], floor: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let width = rows[0].len();
    let mut mean = vec![0.0; width];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; width];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let scale = var
        .iter()
        .zip(&mean)
        .map(|(v, m)| {
            let sd = v.sqrt();
            if sd > floor * m.abs().max(1.0) {
                sd
            } else {
                floor * m.abs().max(1.0)
            }
        })
        .collect();
    (mean, scale)
}

/// Accuracy over a test set: `nu = (1/N) sum ||v_hat - v_true||^2` in per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nu: f64,
    /// Mean squared error summed over each bus's phases; sums to `nu`.
    pub per_bus: Vec<f64>,
    pub n: usize,
}

impl EvalReport {
    /// `slot_offsets[b]..slot_offsets[b + 1]` are the slots of bus `b`.
    pub fn from_estimates(slot_offsets: &[usize], estimates: &[&[f64]], truths: &[&[f64]]) -> Result<Self, NnError> {
        if estimates.is_empty() {
            return Err(NnError::Empty("evaluate"));
        }
        let buses = slot_offsets.len() - 1;
        let n = estimates.len();
        let mut per_bus = vec![0.0; buses];
        for (i, (e, t)) in estimates.iter().zip(truths).enumerate() {
            if e.len() != t.len() || e.len() != slot_offsets[buses] {
                return Err(NnError::SampleShape {
                    index: i,
                    expected: slot_offsets[buses],
                    got: e.len(),
                });
            }
            for b in 0..buses {
                for s in slot_offsets[b]..slot_offsets[b + 1] {
                    per_bus[b] += (e[s] - t[s]).powi(2);
                }
            }
        }
        for v in &mut per_bus {
            *v /= n as f64;
        }
        Ok(EvalReport {
            nu: per_bus.iter().sum(),
            per_bus,
            n,
        })
    }
}

/// Slot offsets per bus for a feeder: bus `b` owns its phase count of slots.
pub fn slot_offsets(model: &FeederModel) -> Vec<usize> {
    let mut out = vec![0];
    for bus in model.buses() {
        out.push(out.last().unwrap() + bus.phases.len());
    }
    out
}
