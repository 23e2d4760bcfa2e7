use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use paradis::checkpoint::{weights_hash, Checkpoint};
use paradis::complexity::{count_flops, report_csv_rows};
use paradis::config::RunConfig;
use paradis::dataset::Dataset;
use paradis::model::{ElasticModel, NormMode};
use paradis::norm::calibrate;
use paradis::runtime::{self, Coordinator, DeploymentPlan, DeviceProfile, WorkerOptions};
use paradis::switch::SwitchSpec;
use paradis::tensor::Tensor;
use paradis::trainer::{evaluate, metrics_csv, predictions, Trainer};

#[derive(Parser)]
#[command(name = "paradis", version, about = "Switchable, distributable elastic CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Ok(RunConfig::parse_with_overrides(&text, &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured switch jointly and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from a checkpoint saved with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute normalization statistics for switches (trained or not).
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `;`-separated switches, e.g. "[0.5,0.25,0.25]x". Defaults to the
        /// checkpoint's registry; an empty list does nothing.
        #[arg(long)]
        switches: Option<String>,
        /// Output path; defaults to overwriting the input checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy and cost sweep over switches as CSV.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the checkpoint's registry.
        #[arg(long)]
        switches: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer MAC counts as CSV.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Read the architecture from a checkpoint instead of the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        switches: Option<String>,
    },
    /// Drop channels beyond width 1.0 for deployment.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve one sub-model at a time over TCP.
    Worker {
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Delay every reply (testing aid).
        #[arg(long, default_value_t = 0)]
        reply_delay_ms: u64,
    },
    /// Plan a switch for the devices and activate it on the workers.
    Deploy {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        plan_out: Option<PathBuf>,
    },
    /// Run distributed inference with an already deployed plan.
    Infer {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long)]
        plan: PathBuf,
        /// Take inputs from the configured dataset's evaluation split.
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of inputs.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Use random fixture inputs with this seed instead of the dataset.
        #[arg(long)]
        fixture_seed: Option<u64>,
        /// Compare with in-process fusion and fail above this tolerance.
        #[arg(long)]
        check: Option<f32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-plan for a changed device list; sends SET_SUBMODEL only.
    Reconfig {
        #[command(flatten)]
        net: NetArgs,
        /// The plan currently active on the workers.
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        plan_out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct NetArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Device list: `id addr capacity latency_ms bandwidth_mbps [up|down]` per line.
    #[arg(long)]
    devices: PathBuf,
    #[arg(long, default_value_t = 5000)]
    timeout_ms: u64,
}

impl NetArgs {
    fn load(&self) -> Result<(Checkpoint, Vec<DeviceProfile>)> {
        let ck = Checkpoint::load(&self.checkpoint)?;
        let text = fs::read_to_string(&self.devices).with_context(|| format!("reading {}", self.devices.display()))?;
        Ok((ck, runtime::parse_devices(&text)?))
    }

    fn connect(&self, model: &ElasticModel<f32>, devices: &[DeviceProfile]) -> Result<Coordinator> {
        let timeout = Duration::from_millis(self.timeout_ms);
        Ok(Coordinator::connect(devices, model.head_bias().clone(), timeout)?)
    }
}

fn parse_switches(s: &str) -> Result<Vec<SwitchSpec>> {
    let list = s
        .split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<SwitchSpec>())
        .collect::<paradis::Result<Vec<_>>>()?;
    if list.is_empty() {
        bail!("empty switch list");
    }
    Ok(list)
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let data = cfg.dataset.load()?;
    let (train, eval) = data.split(cfg.train_split, cfg.trainer.seed)?;
    if eval.is_empty() {
        return Ok((train.clone(), train));
    }
    Ok((train, eval))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

fn train(cfg: RunConfig, checkpoint: Option<PathBuf>, metrics: Option<PathBuf>, resume: Option<PathBuf>) -> Result<()> {
    let (train, eval) = load_data(&cfg)?;
    let tc = cfg.trainer.clone();
    let (mut model, mut trainer) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(&path)?;
            let state = ck.train_state(&tc)?;
            (ck.model, Trainer::resume(tc.clone(), state)?)
        }
        None => {
            let wide = if tc.mode.uses_wide() {
                tc.wide.total()
            } else {
                tc.switches.iter().map(SwitchSpec::total).fold(1.0, f64::max)
            };
            let arch = cfg.architecture(&train)?;
            let model = ElasticModel::new(arch, wide, tc.switches.clone(), tc.seed)?;
            let trainer = Trainer::new(tc.clone(), &model)?;
            (model, trainer)
        }
    };
    log::info!(
        "training {} switches on {} samples ({} eval), mode {}",
        tc.switches.len(),
        train.len(),
        eval.len(),
        tc.mode
    );
    let rows = trainer.train(&mut model, &train, Some(&eval))?;
    if let Some(path) = metrics.or(cfg.metrics.clone()) {
        fs::write(&path, metrics_csv(&rows))?;
    }
    let ck = Checkpoint::with_training_state(model, &trainer.config, &trainer.state);
    match checkpoint.or(cfg.checkpoint.clone()) {
        Some(path) => {
            ck.save(&path)?;
            println!("checkpoint {}", path.display());
        }
        None => log::warn!("no checkpoint path given; trained model discarded"),
    }
    for r in rows.iter().filter(|r| r.epoch + 1 == tc.epochs) {
        println!(
            "{} train_loss={:.4} eval_acc={}",
            r.switch,
            r.train_loss,
            r.eval_acc.map(|a| format!("{a:.4}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn calibrate_cmd(cfg: RunConfig, checkpoint: PathBuf, switches: Option<String>, out: Option<PathBuf>) -> Result<()> {
    let mut ck = Checkpoint::load(&checkpoint)?;
    let specs = match switches {
        Some(s) if s.trim().is_empty() => return Ok(()),
        Some(s) => parse_switches(&s)?,
        None => ck.model.registry().to_vec(),
    };
    let (train, _) = load_data(&cfg)?;
    let stats = calibrate(&ck.model, &specs, &train.images, cfg.calibration)?;
    ck.model.stats_mut().merge(stats);
    for s in specs {
        println!("calibrated {}", s.canonical());
        ck.model.register(s)?;
    }
    let out = out.unwrap_or(checkpoint);
    ck.save(&out)?;
    println!("checkpoint {}", out.display());
    Ok(())
}

fn eval_cmd(cfg: RunConfig, checkpoint: PathBuf, switches: Option<String>, out: Option<PathBuf>) -> Result<()> {
    let ck = Checkpoint::load(&checkpoint)?;
    let model = &ck.model;
    let specs = match switches {
        Some(s) => parse_switches(&s)?,
        None => model.registry().to_vec(),
    };
    let (_, eval) = load_data(&cfg)?;
    let rows: Vec<(String, bool)> = std::thread::scope(|s| {
        let handles: Vec<_> = specs
            .iter()
            .map(|spec| {
                let eval = &eval;
                s.spawn(move || {
                    let row = count_flops(model, spec).and_then(|cost| {
                        let acc = evaluate(model, spec, eval)?;
                        Ok(format!("{:.6},{:.6},{:.6},ok", cost.total_mflops(), cost.per_device_mflops(), acc))
                    });
                    match row {
                        Ok(r) => (format!("{},{r}", spec.canonical()), true),
                        Err(e) => {
                            let msg = e.to_string().replace([',', '\n'], " ");
                            (format!("{},,,,error: {msg}", spec.canonical()), false)
                        }
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval thread panicked")).collect()
    });
    let mut csv = String::from("switch,total_mflops,per_device_mflops,accuracy,status\n");
    for (r, _) in &rows {
        csv.push_str(r);
        csv.push('\n');
    }
    write_output(out.as_deref(), &csv)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.1).map(|r| r.0.split(",,").next().unwrap()).collect();
    if !failed.is_empty() {
        bail!("{} switch(es) could not be evaluated: {}", failed.len(), failed.join(" "));
    }
    Ok(())
}

fn flops_cmd(cfg: RunConfig, checkpoint: Option<PathBuf>, switches: Option<String>) -> Result<()> {
    let model = match checkpoint {
        Some(p) => Checkpoint::load(p)?.model,
        None => {
            let (train, _) = load_data(&cfg)?;
            let wide = cfg.trainer.switches.iter().map(SwitchSpec::total).fold(1.0, f64::max);
            ElasticModel::new(cfg.architecture(&train)?, wide, vec![], 0)?
        }
    };
    let specs = match switches {
        Some(s) => parse_switches(&s)?,
        None if !model.registry().is_empty() => model.registry().to_vec(),
        None => cfg.trainer.switches.clone(),
    };
    let mut csv = String::from("switch,submodel_idx,layer,macs\n");
    for s in &specs {
        for row in report_csv_rows(&count_flops(&model, s)?) {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    write_output(None, &csv)
}

fn worker_cmd(listen: &str, checkpoint: &Path, reply_delay_ms: u64) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let listener = std::net::TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    let worker = std::sync::Arc::new(runtime::Worker::new(
        ck,
        WorkerOptions {
            reply_delay: Duration::from_millis(reply_delay_ms),
        },
    ));
    println!("listening {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    log::info!("serving weights {}", worker.weights_hash());
    worker.serve(listener, Default::default())?;
    Ok(())
}

fn registered(model: &ElasticModel<f32>) -> Result<Vec<SwitchSpec>> {
    let specs: Vec<SwitchSpec> = model
        .registry()
        .iter()
        .filter(|s| s.is_deployable() && model.stats().contains(&s.canonical()))
        .cloned()
        .collect();
    if specs.is_empty() {
        bail!("checkpoint has no calibrated deployable switch");
    }
    Ok(specs)
}

fn print_plan(plan: &DeploymentPlan, devices: &[DeviceProfile]) {
    println!("switch {}", plan.switch.canonical());
    println!("estimated_latency_ms {:.4}", plan.estimated_latency_ms);
    for (((pos, id), m), c) in plan
        .assignment
        .iter()
        .enumerate()
        .zip(&plan.submodel_mflops)
        .zip(plan.compute_ms(devices))
    {
        println!("submodel {pos} device {id} mflops {m:.4} compute_ms {c:.4}");
    }
}

fn deploy_cmd(net: NetArgs, plan_out: Option<PathBuf>) -> Result<()> {
    let (ck, devices) = net.load()?;
    let plan = runtime::plan(&ck.model, &registered(&ck.model)?, &devices)?;
    let mut c = net.connect(&ck.model, &devices)?;
    c.verify_checkpoint(&weights_hash(&ck.model))?;
    c.deploy(&plan)?;
    print_plan(&plan, &devices);
    println!("wire {}", c.wire_stats().summary());
    if let Some(p) = plan_out {
        fs::write(p, plan.to_text())?;
    }
    Ok(())
}

fn fixture(model: &ElasticModel<f32>, n: usize, seed: u64) -> Tensor<f32> {
    use rand::SeedableRng;
    let a = model.arch();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn([n, a.in_channels, a.input_size, a.input_size], 1.0, &mut rng)
}

#[allow(clippy::too_many_arguments)]
fn infer_cmd(
    net: NetArgs,
    plan: PathBuf,
    cfg: ConfigArgs,
    samples: usize,
    fixture_seed: Option<u64>,
    check: Option<f32>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (ck, devices) = net.load()?;
    let plan = DeploymentPlan::from_text(&fs::read_to_string(&plan)?)?;
    let (input, labels) = match fixture_seed {
        Some(seed) => (fixture(&ck.model, samples, seed), None),
        None => {
            let (_, eval) = load_data(&cfg.load()?)?;
            let (x, y) = eval.gather(&(0..samples.min(eval.len())).collect::<Vec<_>>())?;
            (x, Some(y))
        }
    };
    let used: Vec<DeviceProfile> = devices.iter().filter(|d| plan.assignment.contains(&d.id)).cloned().collect();
    let mut c = net.connect(&ck.model, &used)?;
    c.assume_deployed(&plan)?;
    let (logits, timing) = c.infer(&input)?;
    let preds = predictions(&logits)?;
    let [_, classes] = logits.dims2("logits")?;
    let mut csv = String::from("sample,prediction");
    for k in 0..classes {
        csv.push_str(&format!(",logit{k}"));
    }
    csv.push('\n');
    for (i, row) in logits.data().chunks(classes).enumerate() {
        csv.push_str(&format!("{i},{}", preds[i]));
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write_output(out.as_deref(), &csv)?;
    eprintln!(
        "switch {} critical_path_ms {:.3} round_trip_ms {:?} modeled_latency_ms {:.4}",
        plan.switch.canonical(),
        timing.critical_path_ms,
        timing.round_trip_ms,
        plan.estimated_latency_ms
    );
    if let Some(y) = labels {
        let acc = preds.iter().zip(&y).filter(|(p, l)| p == l).count() as f64 / y.len() as f64;
        eprintln!("accuracy {acc:.4}");
    }
    if let Some(tol) = check {
        let local = ck.model.forward_switch(&plan.switch, &input, NormMode::Eval)?.logits;
        let diff = local.max_abs_diff(&logits)?;
        eprintln!("max_abs_diff {diff:e}");
        let scale = local.max_abs().max(1.0);
        if diff > tol * scale {
            bail!("distributed logits differ from in-process fusion by {diff:e}");
        }
    }
    Ok(())
}

fn reconfig_cmd(net: NetArgs, plan: PathBuf, plan_out: Option<PathBuf>) -> Result<()> {
    let (ck, devices) = net.load()?;
    let old = DeploymentPlan::from_text(&fs::read_to_string(&plan)?)?;
    let mut c = net.connect(&ck.model, &devices)?;
    if old.assignment.iter().all(|id| devices.iter().any(|d| d.available && &d.id == id)) {
        c.assume_deployed(&old)?;
    }
    c.reset_wire_stats();
    let next = runtime::reconfigure(&mut c, &ck.model, &registered(&ck.model)?, &devices)?;
    print_plan(&next, &devices);
    let stats = c.wire_stats();
    println!("changed {}", next != old);
    println!("wire {}", stats.summary());
    println!("wire_bytes {}", stats.total_bytes());
    if let Some(p) = plan_out {
        fs::write(p, next.to_text())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            cfg,
            checkpoint,
            metrics,
            resume,
        } => train(cfg.load()?, checkpoint, metrics, resume),
        Command::Calibrate {
            cfg,
            checkpoint,
            switches,
            out,
        } => calibrate_cmd(cfg.load()?, checkpoint, switches, out),
        Command::Eval {
            cfg,
            checkpoint,
            switches,
            out,
        } => eval_cmd(cfg.load()?, checkpoint, switches, out),
        Command::Flops {
            cfg,
            checkpoint,
            switches,
        } => flops_cmd(cfg.load()?, checkpoint, switches),
        Command::Export { checkpoint, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let before = fs::metadata(&checkpoint)?.len();
            Checkpoint::new(ck.model.export_deployable()?).save(&out)?;
            let after = fs::metadata(&out)?.len();
            println!("exported {} bytes -> {} bytes", before, after);
            Ok(())
        }
        Command::Worker {
            listen,
            checkpoint,
            reply_delay_ms,
        } => worker_cmd(&listen, &checkpoint, reply_delay_ms),
        Command::Deploy { net, plan_out } => deploy_cmd(net, plan_out),
        Command::Infer {
            net,
            plan,
            cfg,
            samples,
            fixture_seed,
            check,
            out,
        } => infer_cmd(net, plan, cfg, samples, fixture_seed, check, out),
        Command::Reconfig { net, plan, plan_out } => reconfig_cmd(net, plan, plan_out),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
