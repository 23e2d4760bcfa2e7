//! Multiply-accumulate and parameter counts per layer, sub-model and switch.
//!
//! Conv MACs are `out * in * k * k * H' * W'` per sample (depthwise:
//! `out * k * k * H' * W'`), FC MACs are `in * out`. Normalization,
//! activations and bias adds count as zero. MFLOPs means millions of MACs.

use serde::Serialize;

use crate::arch::{LayerInfo, LayerKind};
use crate::error::Result;
use crate::model::{ElasticModel, SubModelSlice};
use crate::switch::SwitchSpec;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubModelCost {
    pub position: usize,
    pub layers: Vec<LayerCost>,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub switch: String,
    pub submodels: Vec<SubModelCost>,
    pub total_macs: u64,
    /// Largest single sub-model, i.e. the per-device cost when every
    /// sub-model runs on its own device.
    pub per_device_macs: u64,
    pub total_params: u64,
}

impl CostReport {
    pub fn total_mflops(&self) -> f64 {
        self.total_macs as f64 / 1e6
    }

    pub fn per_device_mflops(&self) -> f64 {
        self.per_device_macs as f64 / 1e6
    }

    pub fn submodel_mflops(&self) -> Vec<f64> {
        self.submodels.iter().map(|s| s.macs as f64 / 1e6).collect()
    }
}

/// Abscissa of the "distributed" accuracy curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerDeviceView {
    pub switch: String,
    pub per_device_mflops: f64,
    pub total_mflops: f64,
    pub submodel_mflops: Vec<f64>,
}

pub fn per_device_view(report: &CostReport) -> PerDeviceView {
    PerDeviceView {
        switch: report.switch.clone(),
        per_device_mflops: report.per_device_mflops(),
        total_mflops: report.total_mflops(),
        submodel_mflops: report.submodel_mflops(),
    }
}

fn layer_cost(info: &LayerInfo, input: usize, output: usize) -> LayerCost {
    let (i, o, k, hw) = (input as u64, output as u64, info.kernel as u64, (info.out_hw * info.out_hw) as u64);
    let (macs, params) = match info.kind {
        LayerKind::Conv | LayerKind::Pointwise => (o * i * k * k * hw, o * i * k * k),
        LayerKind::Depthwise => (o * k * k * hw, o * k * k),
        LayerKind::Head => (i * o, i * o),
    };
    LayerCost {
        layer: info.name.clone(),
        macs,
        params,
    }
}

pub fn submodel_cost<T: Scalar>(model: &ElasticModel<T>, slice: &SubModelSlice) -> SubModelCost {
    let mut layers = Vec::new();
    for (info, ls) in model.layers().iter().zip(&slice.layers) {
        layers.push(layer_cost(info, ls.input.len(), ls.output.len()));
    }
    let head = model.layers().last().expect("head layer");
    layers.push(layer_cost(head, slice.head.len(), model.classes()));
    SubModelCost {
        position: slice.position,
        macs: layers.iter().map(|l| l.macs).sum(),
        params: layers.iter().map(|l| l.params).sum(),
        layers,
    }
}

pub fn count_flops<T: Scalar>(model: &ElasticModel<T>, spec: &SwitchSpec) -> Result<CostReport> {
    let slices = model.resolve(spec)?;
    let submodels: Vec<SubModelCost> = slices.iter().map(|s| submodel_cost(model, s)).collect();
    Ok(CostReport {
        switch: spec.canonical(),
        total_macs: submodels.iter().map(|s| s.macs).sum(),
        per_device_macs: submodels.iter().map(|s| s.macs).max().unwrap_or(0),
        total_params: submodels.iter().map(|s| s.params).sum(),
        submodels,
    })
}

/// CSV rows `switch,submodel_idx,layer,macs` with per-sub-model and switch
/// total rows.
pub fn report_csv_rows(report: &CostReport) -> Vec<String> {
    let mut rows = Vec::new();
    for sub in &report.submodels {
        for l in &sub.layers {
            rows.push(format!("{},{},{},{}", report.switch, sub.position, l.layer, l.macs));
        }
        rows.push(format!("{},{},total,{}", report.switch, sub.position, sub.macs));
    }
    rows.push(format!("{},total,total,{}", report.switch, report.total_macs));
    rows.push(format!("{},per_device,total,{}", report.switch, report.per_device_macs));
    rows
}
