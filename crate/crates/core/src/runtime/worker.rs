//! Worker process: holds a full checkpoint and runs one sub-model on request.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::checkpoint::{weights_hash, Checkpoint};
use crate::error::{Error, Result};
use crate::model::{ElasticModel, NormMode, SubModelSlice};
use crate::switch::SwitchSpec;

use super::wire::{read_frame, write_message, Message, VERSION};

#[derive(Clone, Debug, Default)]
pub struct WorkerOptions {
    /// Sleep before every PARTIAL_LOGITS reply. Testing aid for reply ordering.
    pub reply_delay: Duration,
}

pub struct Worker {
    model: ElasticModel<f32>,
    weights_hash: String,
    active: Mutex<Option<SubModelSlice>>,
    options: WorkerOptions,
}

impl Worker {
    pub fn new(checkpoint: Checkpoint, options: WorkerOptions) -> Self {
        let weights_hash = weights_hash(&checkpoint.model);
        Self {
            model: checkpoint.model,
            weights_hash,
            active: Mutex::new(None),
            options,
        }
    }

    pub fn weights_hash(&self) -> &str {
        &self.weights_hash
    }

    /// Currently active `(switch, position)`.
    pub fn active(&self) -> Option<(String, usize)> {
        self.active
            .lock()
            .unwrap()
            .as_ref()
            .map(|s| (s.switch.clone(), s.position))
    }

    fn set_submodel(&self, switch: &str, position: usize) -> std::result::Result<(), Message> {
        let spec: SwitchSpec = switch.parse().map_err(|e: Error| Message::error("bad-switch", e.to_string()))?;
        let mut slices = self
            .model
            .resolve(&spec)
            .map_err(|e| Message::error("bad-switch", e.to_string()))?;
        if position >= slices.len() {
            return Err(Message::error(
                "bad-switch",
                format!("position {position} out of range for {spec}"),
            ));
        }
        if !self.model.stats().contains(&spec.canonical()) {
            return Err(Message::error(
                "missing-stats",
                format!("no calibrated statistics for {spec}"),
            ));
        }
        *self.active.lock().unwrap() = Some(slices.swap_remove(position));
        Ok(())
    }

    /// Reply to one request.
    pub fn handle(&self, msg: Message) -> Message {
        match msg {
            Message::Hello(_) => Message::Hello(format!("paradis-worker weights={}", self.weights_hash)),
            Message::LoadCheckpointRef(hash) => {
                if hash == self.weights_hash {
                    Message::Ping
                } else {
                    Message::error(
                        "checkpoint-mismatch",
                        format!("worker holds {}, coordinator expects {hash}", self.weights_hash),
                    )
                }
            }
            Message::SetSubmodel { switch, position } => match self.set_submodel(&switch, position as usize) {
                Ok(()) => Message::Ping,
                Err(e) => e,
            },
            Message::InferRequest(input) => {
                let slice = match self.active.lock().unwrap().clone() {
                    Some(s) => s,
                    None => return Message::error("no-submodel", "INFER_REQUEST before SET_SUBMODEL"),
                };
                let reply = match self.model.forward_submodel(&slice, &input, NormMode::Eval) {
                    Ok((partial, _)) => Message::PartialLogits(partial),
                    Err(e @ Error::MissingStats { .. }) => Message::error("missing-stats", e.to_string()),
                    Err(e) => Message::error("infer-failed", e.to_string()),
                };
                if !self.options.reply_delay.is_zero() {
                    thread::sleep(self.options.reply_delay);
                }
                reply
            }
            Message::Ping => Message::Ping,
            other => Message::error("unexpected", format!("{} is not a request", other.kind().name())),
        }
    }

    /// Serves one connection until the peer closes it or sends garbage.
    pub fn serve_connection(&self, stream: TcpStream) -> Result<()> {
        stream.set_nodelay(true)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        while let Some(frame) = read_frame(&mut reader)? {
            if frame.version != VERSION {
                write_message(
                    &mut writer,
                    &Message::error("bad-version", format!("protocol version {} unsupported, expected {VERSION}", frame.version)),
                )?;
                return Err(Error::Wire(format!("peer speaks protocol version {}", frame.version)));
            }
            let reply = self.handle(frame.message);
            write_message(&mut writer, &reply)?;
        }
        Ok(())
    }

    /// Accepts connections until `stop` is set, one thread per connection.
    pub fn serve(self: Arc<Self>, listener: TcpListener, stop: Arc<AtomicBool>) -> Result<()> {
        for stream in listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let worker = Arc::clone(&self);
            let peer = stream.peer_addr().ok();
            thread::spawn(move || {
                if let Err(e) = worker.serve_connection(stream) {
                    log::warn!("connection {peer:?} closed: {e}");
                }
            });
        }
        Ok(())
    }
}

/// An in-process worker on a background thread.
pub struct WorkerHandle {
    pub addr: SocketAddr,
    pub worker: Arc<Worker>,
    stop: Arc<AtomicBool>,
    thread: Option<thread::JoinHandle<Result<()>>>,
}

impl WorkerHandle {
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

pub fn spawn_worker(addr: &str, checkpoint: Checkpoint, options: WorkerOptions) -> Result<WorkerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let worker = Arc::new(Worker::new(checkpoint, options));
    let stop = Arc::new(AtomicBool::new(false));
    let thread = {
        let (worker, stop) = (Arc::clone(&worker), Arc::clone(&stop));
        thread::spawn(move || worker.serve(listener, stop))
    };
    Ok(WorkerHandle {
        addr,
        worker,
        stop,
        thread: Some(thread),
    })
}
