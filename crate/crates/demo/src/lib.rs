//! Browser demo: inspect how a switch slices the shared network, what it
//! costs, and where the planner would run it.

use paradis::arch::Architecture;
use paradis::complexity::count_flops;
use paradis::model::ElasticModel;
use paradis::runtime::{parse_devices, plan};
use paradis::switch::SwitchSpec;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn model(arch: &str, wide: f64) -> Result<ElasticModel<f32>, String> {
    let size = if arch == "toy" { 8 } else { 32 };
    let a = Architecture::preset(arch, 3, size, 10).map_err(|e| e.to_string())?;
    ElasticModel::new(a, wide, vec![], 0).map_err(|e| e.to_string())
}

fn parse_list(switches: &str) -> Result<Vec<SwitchSpec>, String> {
    switches
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<SwitchSpec>().map_err(|e| e.to_string()))
        .collect()
}

/// Channel ranges each sub-model owns in every layer.
pub fn layout(arch: &str, switch: &str) -> Result<Value, String> {
    let spec: SwitchSpec = switch.parse().map_err(|e: paradis::Error| e.to_string())?;
    let m = model(arch, spec.total().max(1.0))?;
    let slices = m.resolve(&spec).map_err(|e| e.to_string())?;
    let layers: Vec<Value> = m
        .layers()
        .iter()
        .filter(|l| !l.is_head())
        .enumerate()
        .map(|(i, l)| {
            json!({
                "name": l.name,
                "channels": m.physical_channels(l.out_base),
                "base": l.out_base,
                "owners": slices.iter().map(|s| [s.layers[i].output.start, s.layers[i].output.end]).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(json!({ "switch": spec.canonical(), "widths": spec.widths(), "layers": layers }))
}

/// MAC counts per sub-model plus totals, next to the full-width network.
pub fn cost(arch: &str, switch: &str) -> Result<Value, String> {
    let spec: SwitchSpec = switch.parse().map_err(|e: paradis::Error| e.to_string())?;
    let m = model(arch, spec.total().max(1.0))?;
    let r = count_flops(&m, &spec).map_err(|e| e.to_string())?;
    let full = count_flops(&m, &SwitchSpec::full()).map_err(|e| e.to_string())?;
    Ok(json!({
        "switch": r.switch,
        "submodel_macs": r.submodels.iter().map(|s| s.macs).collect::<Vec<_>>(),
        "total_macs": r.total_macs,
        "per_device_macs": r.per_device_macs,
        "total_params": r.total_params,
        "full_macs": full.total_macs,
        "total_ratio": r.total_macs as f64 / full.total_macs as f64,
        "per_device_ratio": r.per_device_macs as f64 / full.total_macs as f64,
    }))
}

/// Lowest modeled latency switch and assignment for a device list.
pub fn planner(arch: &str, switches: &str, devices: &str) -> Result<Value, String> {
    let list = parse_list(switches)?;
    let wide = list.iter().map(SwitchSpec::total).fold(1.0, f64::max);
    let m = model(arch, wide)?;
    let devs = parse_devices(devices).map_err(|e| e.to_string())?;
    let p = plan(&m, &list, &devs).map_err(|e| e.to_string())?;
    Ok(json!({
        "switch": p.switch.canonical(),
        "assignment": p.assignment,
        "submodel_mflops": p.submodel_mflops,
        "device_latency_ms": p.device_latency_ms,
        "compute_ms": p.compute_ms(&devs),
        "estimated_latency_ms": p.estimated_latency_ms,
    }))
}

fn to_js(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = switchLayout)]
pub fn switch_layout(arch: &str, switch: &str) -> Result<String, JsError> {
    to_js(layout(arch, switch))
}

#[wasm_bindgen(js_name = switchCost)]
pub fn switch_cost(arch: &str, switch: &str) -> Result<String, JsError> {
    to_js(cost(arch, switch))
}

#[wasm_bindgen(js_name = planDeployment)]
pub fn plan_deployment(arch: &str, switches: &str, devices: &str) -> Result<String, JsError> {
    to_js(planner(arch, switches, devices))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_covers_the_used_channels() {
        let v = layout("toy", "[0.5,0.25,0.25]x").unwrap();
        assert_eq!(v["switch"], "[0.5,0.25,0.25]x");
        let owners = v["layers"][0]["owners"].as_array().unwrap();
        assert_eq!(owners.len(), 3);
        assert_eq!(owners[0][0], 0);
        assert_eq!(owners[0][1], owners[1][0]);
    }

    #[test]
    fn cost_of_halves() {
        let v = cost("convnet", "[0.5,0.5]x").unwrap();
        let r = v["per_device_ratio"].as_f64().unwrap();
        assert!(r > 0.2 && r < 0.3, "{r}");
    }

    #[test]
    fn plan_two_devices() {
        let devs = "a 127.0.0.1:1 100 0.1 100\nb 127.0.0.1:2 100 0.1 100\n";
        let v = planner("toy", "[1.0]x; [0.5,0.5]x; [4x0.25]x", devs).unwrap();
        assert_eq!(v["switch"], "[0.5,0.5]x");
        assert!(planner("toy", "[0.5", devs).is_err());
    }
}
