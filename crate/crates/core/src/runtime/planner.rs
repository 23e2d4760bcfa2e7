//! Capacity-aware choice of a switch and its sub-model to device assignment.
//!
//! Modeled latency of a plan is `max_i(compute_i + comm_i)` over assigned
//! devices, where `compute_i = MFLOPs_i / capacity_i` and
//! `comm_i = 2 * link_latency_i + bytes / bandwidth_i` (request and reply).

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::complexity::count_flops;
use crate::error::{Error, Result};
use crate::model::ElasticModel;
use crate::switch::SwitchSpec;
use crate::tensor::Scalar;

use super::wire::HEADER_LEN;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: String,
    pub addr: String,
    /// Modeled compute in MFLOPs per second.
    pub capacity: f64,
    pub latency_ms: f64,
    /// Link bandwidth in MB/s.
    pub bandwidth_mbps: f64,
    pub available: bool,
}

impl DeviceProfile {
    pub fn new(id: &str, addr: &str, capacity: f64, latency_ms: f64, bandwidth_mbps: f64) -> Self {
        Self {
            id: id.into(),
            addr: addr.into(),
            capacity,
            latency_ms,
            bandwidth_mbps,
            available: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.capacity > 0.0 && self.capacity.is_finite()) {
            return Err(Error::Plan(format!("device {}: capacity must be > 0", self.id)));
        }
        if !(self.bandwidth_mbps > 0.0 && self.bandwidth_mbps.is_finite()) {
            return Err(Error::Plan(format!("device {}: bandwidth must be > 0", self.id)));
        }
        if !(self.latency_ms >= 0.0) {
            return Err(Error::Plan(format!("device {}: latency must be >= 0", self.id)));
        }
        Ok(())
    }

    fn comm_ms(&self, traffic: &Traffic) -> f64 {
        2.0 * self.latency_ms + (traffic.request_bytes + traffic.reply_bytes) as f64 / (self.bandwidth_mbps * 1e3)
    }
}

/// Parses a device list: one `id addr capacity latency_ms bandwidth_mbps
/// [up|down]` per line, `#` starts a comment.
pub fn parse_devices(text: &str) -> Result<Vec<DeviceProfile>> {
    let mut out: Vec<DeviceProfile> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |what: &str| Error::Plan(format!("device list line {}: {what}: {line:?}", i + 1));
        if f.len() != 5 && f.len() != 6 {
            return Err(bad("expected `id addr capacity latency_ms bandwidth_mbps [up|down]`"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let mut d = DeviceProfile::new(f[0], f[1], num(f[2])?, num(f[3])?, num(f[4])?);
        d.available = match f.get(5) {
            None | Some(&"up") => true,
            Some(&"down") => false,
            Some(_) => return Err(bad("availability must be up or down")),
        };
        d.validate()?;
        if out.iter().any(|o| o.id == d.id) {
            return Err(bad("duplicate device id"));
        }
        out.push(d);
    }
    Ok(out)
}

/// Bytes moved per inference for one sub-model: the broadcast input frame and
/// the partial-logit reply frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Traffic {
    pub request_bytes: usize,
    pub reply_bytes: usize,
}

impl Traffic {
    /// Frame sizes for a batch of `batch` `[C, H, W]` inputs.
    pub fn for_input(batch: usize, input: [usize; 3], classes: usize) -> Self {
        let tensor = |dims: usize, n: usize| HEADER_LEN + 1 + 4 * dims + 4 * n;
        Self {
            request_bytes: tensor(4, batch * input.iter().product::<usize>()),
            reply_bytes: tensor(2, batch * classes),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub spec: SwitchSpec,
    pub submodel_mflops: Vec<f64>,
}

pub fn candidates<T: Scalar>(model: &ElasticModel<T>, specs: &[SwitchSpec]) -> Result<Vec<Candidate>> {
    specs
        .iter()
        .map(|s| {
            Ok(Candidate {
                spec: s.clone(),
                submodel_mflops: count_flops(model, s)?.submodel_mflops(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeploymentPlan {
    pub switch: SwitchSpec,
    /// Device id per sub-model position.
    pub assignment: Vec<String>,
    pub submodel_mflops: Vec<f64>,
    /// Modeled compute + communication time per position.
    pub device_latency_ms: Vec<f64>,
    pub estimated_latency_ms: f64,
}

impl DeploymentPlan {
    pub fn compute_ms(&self, devices: &[DeviceProfile]) -> Vec<f64> {
        self.assignment
            .iter()
            .zip(&self.submodel_mflops)
            .map(|(id, m)| {
                let d = devices.iter().find(|d| &d.id == id).expect("assigned device");
                m / d.capacity * 1e3
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("paradis-plan 1\n");
        let _ = writeln!(s, "switch {}", self.switch.canonical());
        let _ = writeln!(s, "estimated_latency_ms {}", self.estimated_latency_ms);
        for (i, id) in self.assignment.iter().enumerate() {
            let _ = writeln!(
                s,
                "assign {i} {id} {} {}",
                self.submodel_mflops[i], self.device_latency_ms[i]
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Plan(format!("plan file: {m}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("paradis-plan 1") {
            return Err(bad("missing `paradis-plan 1` header"));
        }
        let mut switch = None;
        let mut est = None;
        let mut rows = Vec::new();
        for l in lines {
            let f: Vec<&str> = l.split_whitespace().collect();
            match f.as_slice() {
                ["switch", s] => switch = Some(s.parse::<SwitchSpec>()?),
                ["estimated_latency_ms", v] => est = Some(v.parse::<f64>().map_err(|_| bad("bad latency"))?),
                ["assign", i, id, m, lat] => rows.push((
                    i.parse::<usize>().map_err(|_| bad("bad position"))?,
                    id.to_string(),
                    m.parse::<f64>().map_err(|_| bad("bad mflops"))?,
                    lat.parse::<f64>().map_err(|_| bad("bad latency"))?,
                )),
                _ => return Err(bad(&format!("unrecognized line {l:?}"))),
            }
        }
        let switch = switch.ok_or_else(|| bad("missing switch"))?;
        rows.sort_by_key(|r| r.0);
        if rows.len() != switch.len() || rows.iter().enumerate().any(|(i, r)| r.0 != i) {
            return Err(bad("assignments do not cover every sub-model exactly once"));
        }
        Ok(Self {
            switch,
            assignment: rows.iter().map(|r| r.1.clone()).collect(),
            submodel_mflops: rows.iter().map(|r| r.2).collect(),
            device_latency_ms: rows.iter().map(|r| r.3).collect(),
            estimated_latency_ms: est.ok_or_else(|| bad("missing estimated_latency_ms"))?,
        })
    }
}

/// Per-position latency of running `mflops[i]` on `devices[i]`.
pub fn assignment_latency(mflops: &[f64], devices: &[&DeviceProfile], traffic: &Traffic) -> Vec<f64> {
    mflops
        .iter()
        .zip(devices)
        .map(|(m, d)| m / d.capacity * 1e3 + d.comm_ms(traffic))
        .collect()
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// Sub-models by MFLOPs descending onto devices by capacity descending.
fn assign(cand: &Candidate, devices: &[&DeviceProfile], traffic: &Traffic) -> DeploymentPlan {
    let mut order: Vec<usize> = (0..cand.submodel_mflops.len()).collect();
    order.sort_by(|&a, &b| cand.submodel_mflops[b].total_cmp(&cand.submodel_mflops[a]));
    let mut assignment = vec![String::new(); order.len()];
    let mut chosen: Vec<&DeviceProfile> = vec![devices[0]; order.len()];
    for (rank, &pos) in order.iter().enumerate() {
        assignment[pos] = devices[rank].id.clone();
        chosen[pos] = devices[rank];
    }
    let lat = assignment_latency(&cand.submodel_mflops, &chosen, traffic);
    DeploymentPlan {
        switch: cand.spec.clone(),
        assignment,
        submodel_mflops: cand.submodel_mflops.clone(),
        estimated_latency_ms: max(&lat),
        device_latency_ms: lat,
    }
}

/// `Less` when `a` is the better plan.
fn compare(a: &DeploymentPlan, b: &DeploymentPlan) -> Ordering {
    let scale = a.estimated_latency_ms.abs().max(b.estimated_latency_ms.abs()).max(1e-300);
    if (a.estimated_latency_ms - b.estimated_latency_ms).abs() > 1e-9 * scale {
        return a.estimated_latency_ms.total_cmp(&b.estimated_latency_ms);
    }
    b.switch
        .total()
        .total_cmp(&a.switch.total())
        .then_with(|| a.switch.canonical().cmp(&b.switch.canonical()))
}

pub fn plan_candidates(cands: &[Candidate], devices: &[DeviceProfile], traffic: &Traffic) -> Result<DeploymentPlan> {
    for d in devices {
        d.validate()?;
    }
    let mut avail: Vec<&DeviceProfile> = devices.iter().filter(|d| d.available).collect();
    if avail.is_empty() {
        return Err(Error::Plan("no available device".into()));
    }
    avail.sort_by(|a, b| {
        b.capacity
            .total_cmp(&a.capacity)
            .then_with(|| a.comm_ms(traffic).total_cmp(&b.comm_ms(traffic)))
    });
    cands
        .iter()
        .filter(|c| c.spec.len() <= avail.len())
        .map(|c| assign(c, &avail, traffic))
        .min_by(compare)
        .ok_or_else(|| {
            Error::Plan(format!(
                "no registered switch fits on {} available device(s)",
                avail.len()
            ))
        })
}

/// Plans for single-sample requests against `model`'s input shape.
pub fn plan<T: Scalar>(model: &ElasticModel<T>, specs: &[SwitchSpec], devices: &[DeviceProfile]) -> Result<DeploymentPlan> {
    let arch = model.arch();
    let traffic = Traffic::for_input(1, [arch.in_channels, arch.input_size, arch.input_size], arch.classes);
    plan_candidates(&candidates(model, specs)?, devices, &traffic)
}
