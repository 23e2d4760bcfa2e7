//! Coordinator: broadcasts inputs to the planned workers and fuses their
//! partial logits.

use std::collections::BTreeMap;
use std::io::{BufReader, ErrorKind};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::fuse;
use crate::tensor::Tensor;

use super::planner::{DeploymentPlan, DeviceProfile};
use super::wire::{read_frame, write_message, Message, MsgType, VERSION};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

/// Frames and bytes per message type, both directions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WireStats {
    pub sent: BTreeMap<MsgType, (usize, usize)>,
    pub received: BTreeMap<MsgType, (usize, usize)>,
}

impl WireStats {
    fn record(map: &mut BTreeMap<MsgType, (usize, usize)>, kind: MsgType, bytes: usize) {
        let e = map.entry(kind).or_default();
        e.0 += 1;
        e.1 += bytes;
    }

    pub fn sent_bytes(&self) -> usize {
        self.sent.values().map(|v| v.1).sum()
    }

    pub fn received_bytes(&self) -> usize {
        self.received.values().map(|v| v.1).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.sent_bytes() + self.received_bytes()
    }

    /// Message types seen in either direction.
    pub fn kinds(&self) -> Vec<MsgType> {
        let mut k: Vec<MsgType> = self.sent.keys().chain(self.received.keys()).copied().collect();
        k.sort();
        k.dedup();
        k
    }

    pub fn summary(&self) -> String {
        let row = |(k, (n, b)): (&MsgType, &(usize, usize))| format!("{}x{}={}B", k.name(), n, b);
        format!(
            "sent[{}] received[{}]",
            self.sent.iter().map(row).collect::<Vec<_>>().join(" "),
            self.received.iter().map(row).collect::<Vec<_>>().join(" ")
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferTiming {
    /// Round trip per sub-model position, in milliseconds.
    pub round_trip_ms: Vec<f64>,
    /// Wall time from first send to last reply.
    pub critical_path_ms: f64,
}

struct Link {
    device: DeviceProfile,
    stream: Option<(BufReader<TcpStream>, TcpStream)>,
    hello: String,
}

impl Link {
    fn device_err(&self, message: impl Into<String>) -> Error {
        Error::Device {
            device: self.device.id.clone(),
            message: message.into(),
        }
    }

    /// Sends `msg` and waits for one reply. On any transport failure the link
    /// is dropped so a late reply can never be mistaken for a later answer.
    fn call(&mut self, msg: &Message, timeout: Duration, stats: &Mutex<WireStats>) -> Result<Message> {
        let result = self.call_inner(msg, timeout, stats);
        if matches!(result, Err(Error::Device { .. })) {
            self.stream = None;
        }
        result
    }

    fn call_inner(&mut self, msg: &Message, timeout: Duration, stats: &Mutex<WireStats>) -> Result<Message> {
        let id = self.device.id.clone();
        let (reader, writer) = self
            .stream
            .as_mut()
            .ok_or_else(|| Error::Device {
                device: id.clone(),
                message: "not connected".into(),
            })?;
        let sent = write_message(writer, msg).map_err(|e| Error::Device {
            device: id.clone(),
            message: format!("send failed: {e}"),
        })?;
        WireStats::record(&mut stats.lock().unwrap().sent, msg.kind(), sent);
        writer.set_read_timeout(Some(timeout))?;
        let frame = match read_frame(reader) {
            Ok(Some(f)) => f,
            Ok(None) => {
                return Err(Error::Device {
                    device: id,
                    message: "connection closed by worker".into(),
                })
            }
            Err(Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                return Err(Error::Device {
                    device: id,
                    message: format!("timed out after {:.1}s", timeout.as_secs_f64()),
                })
            }
            Err(e) => {
                return Err(Error::Device {
                    device: id,
                    message: e.to_string(),
                })
            }
        };
        WireStats::record(&mut stats.lock().unwrap().received, frame.message.kind(), frame.bytes);
        match frame.message {
            Message::Error { code, message } => Err(Error::Remote {
                device: id,
                code,
                message,
            }),
            m => Ok(m),
        }
    }
}

pub struct Coordinator {
    links: Vec<Link>,
    timeout: Duration,
    head_bias: Tensor<f32>,
    stats: Mutex<WireStats>,
    plan: Option<DeploymentPlan>,
}

impl Coordinator {
    /// Connects to every available device and exchanges HELLO.
    pub fn connect(devices: &[DeviceProfile], head_bias: Tensor<f32>, timeout: Duration) -> Result<Self> {
        let mut c = Self {
            links: Vec::new(),
            timeout,
            head_bias,
            stats: Mutex::new(WireStats::default()),
            plan: None,
        };
        for d in devices.iter().filter(|d| d.available) {
            c.add_device(d.clone())?;
        }
        Ok(c)
    }

    pub fn add_device(&mut self, device: DeviceProfile) -> Result<()> {
        let err = |m: String| Error::Device {
            device: device.id.clone(),
            message: m,
        };
        let addr = device
            .addr
            .to_socket_addrs()
            .map_err(|e| err(format!("bad address {}: {e}", device.addr)))?
            .next()
            .ok_or_else(|| err(format!("address {} did not resolve", device.addr)))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout).map_err(|e| err(format!("connect {addr}: {e}")))?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        let mut link = Link {
            device,
            stream: Some((reader, stream)),
            hello: String::new(),
        };
        match link.call(&Message::Hello(format!("paradis-coordinator v{VERSION}")), self.timeout, &self.stats)? {
            Message::Hello(s) => link.hello = s,
            other => return Err(link.device_err(format!("expected HELLO, got {}", other.kind().name()))),
        }
        self.links.retain(|l| l.device.id != link.device.id);
        self.links.push(link);
        Ok(())
    }

    pub fn devices(&self) -> Vec<DeviceProfile> {
        self.links.iter().map(|l| l.device.clone()).collect()
    }

    /// The HELLO text each worker answered with.
    pub fn hellos(&self) -> Vec<(String, String)> {
        self.links.iter().map(|l| (l.device.id.clone(), l.hello.clone())).collect()
    }

    pub fn plan(&self) -> Option<&DeploymentPlan> {
        self.plan.as_ref()
    }

    pub fn wire_stats(&self) -> WireStats {
        self.stats.lock().unwrap().clone()
    }

    pub fn reset_wire_stats(&self) {
        *self.stats.lock().unwrap() = WireStats::default();
    }

    fn link_index(&self, id: &str) -> Result<usize> {
        self.links
            .iter()
            .position(|l| l.device.id == id)
            .ok_or_else(|| Error::Device {
                device: id.to_string(),
                message: "not connected".into(),
            })
    }

    /// Checks every worker holds the expected weights.
    pub fn verify_checkpoint(&mut self, weights_hash: &str) -> Result<()> {
        let timeout = self.timeout;
        for link in &mut self.links {
            link.call(&Message::LoadCheckpointRef(weights_hash.to_string()), timeout, &self.stats)?;
        }
        Ok(())
    }

    /// Activates `plan` on its devices with SET_SUBMODEL only.
    pub fn deploy(&mut self, plan: &DeploymentPlan) -> Result<()> {
        let switch = plan.switch.canonical();
        let timeout = self.timeout;
        for (pos, id) in plan.assignment.iter().enumerate() {
            let i = self.link_index(id)?;
            let reply = self.links[i].call(
                &Message::SetSubmodel {
                    switch: switch.clone(),
                    position: pos as u32,
                },
                timeout,
                &self.stats,
            )?;
            if reply != Message::Ping {
                return Err(self.links[i].device_err(format!("expected PING ack, got {}", reply.kind().name())));
            }
        }
        self.plan = Some(plan.clone());
        Ok(())
    }

    /// Adopts a plan that is already active on the workers (e.g. set by an
    /// earlier process) without sending anything.
    pub fn assume_deployed(&mut self, plan: &DeploymentPlan) -> Result<()> {
        for id in &plan.assignment {
            self.link_index(id)?;
        }
        self.plan = Some(plan.clone());
        Ok(())
    }

    /// Broadcasts `input` to every planned worker concurrently and fuses the
    /// replies in position order. Fails without fusing if any worker fails.
    pub fn infer(&mut self, input: &Tensor<f32>) -> Result<(Tensor<f32>, InferTiming)> {
        let plan = self
            .plan
            .clone()
            .ok_or_else(|| Error::Plan("no plan deployed".into()))?;
        let indices: Vec<usize> = plan
            .assignment
            .iter()
            .map(|id| self.link_index(id))
            .collect::<Result<_>>()?;
        let request = Message::InferRequest(input.clone());
        let timeout = self.timeout;
        let stats = &self.stats;
        let start = Instant::now();
        let mut by_index: Vec<Option<&mut Link>> = self.links.iter_mut().map(Some).collect();
        let mut ordered: Vec<&mut Link> = indices.iter().map(|&i| by_index[i].take().expect("distinct devices")).collect();
        let results: Vec<Result<(Tensor<f32>, f64)>> = thread::scope(|s| {
            let handles: Vec<_> = ordered
                .iter_mut()
                .map(|link| {
                    let request = &request;
                    s.spawn(move || {
                        let t0 = Instant::now();
                        match link.call(request, timeout, stats)? {
                            Message::PartialLogits(t) => Ok((t, t0.elapsed().as_secs_f64() * 1e3)),
                            other => Err(link.device_err(format!("expected PARTIAL_LOGITS, got {}", other.kind().name()))),
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("request thread panicked")).collect()
        });
        let critical_path_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut partials = Vec::with_capacity(results.len());
        let mut round_trip_ms = Vec::with_capacity(results.len());
        for r in results {
            let (t, ms) = r?;
            partials.push(t);
            round_trip_ms.push(ms);
        }
        let logits = fuse(&partials, &self.head_bias)?;
        Ok((
            logits,
            InferTiming {
                round_trip_ms,
                critical_path_ms,
            },
        ))
    }
}
