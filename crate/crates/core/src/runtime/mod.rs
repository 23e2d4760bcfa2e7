//! Distributed execution of a switch: one sub-model per worker process,
//! partial logits fused by the coordinator.

pub mod coordinator;
pub mod planner;
pub mod wire;
pub mod worker;

pub use coordinator::{Coordinator, InferTiming, WireStats, DEFAULT_TIMEOUT};
pub use planner::{parse_devices, plan, DeploymentPlan, DeviceProfile};
pub use worker::{spawn_worker, Worker, WorkerHandle, WorkerOptions};

use crate::error::Result;
use crate::model::ElasticModel;
use crate::switch::SwitchSpec;

/// Re-plans for `devices`, connecting any new ones, and activates the result
/// with SET_SUBMODEL messages only. Nothing is sent when the plan is unchanged.
pub fn reconfigure(
    coordinator: &mut Coordinator,
    model: &ElasticModel<f32>,
    specs: &[SwitchSpec],
    devices: &[DeviceProfile],
) -> Result<DeploymentPlan> {
    let known: Vec<String> = coordinator.devices().into_iter().map(|d| d.id).collect();
    for d in devices.iter().filter(|d| d.available && !known.contains(&d.id)) {
        coordinator.add_device(d.clone())?;
    }
    let next = plan(model, specs, devices)?;
    if coordinator.plan() != Some(&next) {
        coordinator.deploy(&next)?;
    }
    Ok(next)
}
