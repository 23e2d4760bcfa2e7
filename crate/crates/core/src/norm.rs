//! Switchable batch-normalization statistics and the calibration pass that
//! produces them.
//!
//! Everything in a batch-norm block is shared between switches except the
//! running statistics, which are kept per `(switch, sub-model, layer)` and
//! computed after training by forwarding a subset of the training data.

use std::collections::BTreeMap;

use crate::autograd::{BatchMoments, Graph};
use crate::error::{Error, Result};
use crate::model::{ElasticModel, NormMode};
use crate::switch::SwitchSpec;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Statistics of one switch, keyed by `(sub-model position, layer id)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SwitchStats {
    pub entries: BTreeMap<(usize, usize), LayerStats>,
    /// Number of calibration samples that produced these statistics.
    pub samples: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SwitchableStats {
    switches: BTreeMap<String, SwitchStats>,
}

impl SwitchableStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_switch(&mut self, switch: impl Into<String>, stats: SwitchStats) {
        self.switches.insert(switch.into(), stats);
    }

    pub fn switch(&self, switch: &str) -> Option<&SwitchStats> {
        self.switches.get(switch)
    }

    pub fn switch_mut(&mut self, switch: &str) -> Option<&mut SwitchStats> {
        self.switches.get_mut(switch)
    }

    pub fn remove_switch(&mut self, switch: &str) -> Option<SwitchStats> {
        self.switches.remove(switch)
    }

    pub fn contains(&self, switch: &str) -> bool {
        self.switches.contains_key(switch)
    }

    pub fn switches(&self) -> impl Iterator<Item = (&str, &SwitchStats)> {
        self.switches.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.switches.is_empty()
    }

    /// Overwrites the sections for every switch present in `other`.
    pub fn merge(&mut self, other: SwitchableStats) {
        self.switches.extend(other.switches);
    }

    pub fn lookup(&self, switch: &str, position: usize, layer: usize) -> Result<&LayerStats> {
        self.switches
            .get(switch)
            .and_then(|s| s.entries.get(&(position, layer)))
            .ok_or_else(|| Error::MissingStats {
                switch: switch.to_string(),
                position,
                layer,
            })
    }

    /// Total number of stored floats (means plus variances).
    pub fn total_floats(&self) -> usize {
        self.switches
            .values()
            .flat_map(|s| s.entries.values())
            .map(|e| e.mean.len() + e.var.len())
            .sum()
    }

    pub fn num_slices(&self) -> usize {
        self.switches.values().map(|s| s.entries.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CalibrationMode {
    /// Sample-weighted mean of batch means; variance by the law of total
    /// variance (mean of batch variances plus variance of batch means).
    ExactMean,
    /// `running = (1 - momentum) * running + momentum * batch`, seeded by the
    /// first batch.
    MovingAverage { momentum: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationOptions {
    pub mode: CalibrationMode,
    pub batch_size: usize,
    pub max_samples: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            mode: CalibrationMode::ExactMean,
            batch_size: 64,
            max_samples: 2048,
        }
    }
}

#[derive(Default)]
struct Accum {
    /// Per batch: (count, mean, var) in f64.
    batches: Vec<(f64, Vec<f64>, Vec<f64>)>,
}

impl Accum {
    fn push(&mut self, m: &BatchMoments<f32>) {
        self.batches.push((
            m.count as f64,
            m.mean.iter().map(|&v| v as f64).collect(),
            m.var.iter().map(|&v| v as f64).collect(),
        ));
    }

    fn finish(&self, mode: CalibrationMode) -> LayerStats {
        let c = self.batches[0].1.len();
        match mode {
            CalibrationMode::ExactMean => {
                let n: f64 = self.batches.iter().map(|b| b.0).sum();
                let mean: Vec<f64> = (0..c)
                    .map(|ch| self.batches.iter().map(|(k, mu, _)| k * mu[ch]).sum::<f64>() / n)
                    .collect();
                let var = (0..c)
                    .map(|ch| {
                        let total: f64 = self
                            .batches
                            .iter()
                            .map(|(k, mu, v)| k * (v[ch] + (mu[ch] - mean[ch]).powi(2)))
                            .sum();
                        (total / n).max(0.0) as f32
                    })
                    .collect();
                LayerStats {
                    mean: mean.into_iter().map(|v| v as f32).collect(),
                    var,
                }
            }
            CalibrationMode::MovingAverage { momentum } => {
                let m = momentum as f64;
                let (_, mu0, v0) = &self.batches[0];
                let (mut mean, mut var) = (mu0.clone(), v0.clone());
                for (_, mu, v) in &self.batches[1..] {
                    for ch in 0..c {
                        mean[ch] = (1.0 - m) * mean[ch] + m * mu[ch];
                        var[ch] = (1.0 - m) * var[ch] + m * v[ch];
                    }
                }
                LayerStats {
                    mean: mean.into_iter().map(|v| v as f32).collect(),
                    var: var.into_iter().map(|v| v.max(0.0) as f32).collect(),
                }
            }
        }
    }
}

/// Computes switchable statistics for every sub-model of every spec by running
/// batch-statistics forwards over `images` (truncated to
/// `options.max_samples`). Weights are not touched.
pub fn calibrate(
    model: &ElasticModel<f32>,
    specs: &[SwitchSpec],
    images: &Tensor<f32>,
    options: CalibrationOptions,
) -> Result<SwitchableStats> {
    let [n, c, h, w] = images.dims4("calibrate")?;
    let n = n.min(options.max_samples);
    if n == 0 {
        return Err(Error::Invalid("calibration needs a non-empty data subset".into()));
    }
    if options.batch_size == 0 {
        return Err(Error::Invalid("calibration batch size must be positive".into()));
    }
    if let CalibrationMode::MovingAverage { momentum } = options.mode {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Invalid(format!("moving-average momentum {momentum} outside (0, 1]")));
        }
    }
    let sample = c * h * w;
    let batches: Vec<Tensor<f32>> = (0..n)
        .step_by(options.batch_size)
        .map(|start| {
            let end = (start + options.batch_size).min(n);
            Tensor::new([end - start, c, h, w], images.data()[start * sample..end * sample].to_vec())
        })
        .collect::<Result<_>>()?;

    let mut out = SwitchableStats::new();
    for spec in specs {
        let slices = model.resolve(spec)?;
        let mut stats = SwitchStats {
            entries: BTreeMap::new(),
            samples: n as u64,
        };
        for slice in &slices {
            let mut acc: BTreeMap<usize, Accum> = BTreeMap::new();
            for batch in &batches {
                let mut g = Graph::<f32>::new();
                let x = g.constant(batch.clone());
                let mut moments = Vec::new();
                model.submodel_graph(&mut g, slice, x, NormMode::Train, Some(&mut moments))?;
                for (layer, m) in &moments {
                    acc.entry(*layer).or_default().push(m);
                }
            }
            for (layer, a) in acc {
                stats.entries.insert((slice.position, layer), a.finish(options.mode));
            }
        }
        out.insert_switch(spec.canonical(), stats);
    }
    Ok(out)
}
