use std::error::Error;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;

use coinfer_core::predictor::{load_checkpoint, save_checkpoint, train_relative, train_throughput, TrainOptions};
use coinfer_core::profiles::fixtures::{adaptivity_scenario, batch_knee_scenario, loopback_scenario, pipeline_scenario};
use coinfer_core::profiles::Lut;
use coinfer_core::runtime::{run_device, DeviceOptions, PlannedSwitch, Server, ServerOptions};
use coinfer_core::scheduler::{assign_idle, optimize, AdaptiveMonitor, EvaluatorSpec, SchedulerConfig};
use coinfer_core::sim::dataset::{generate_training_set, load_dataset, save_dataset};
use coinfer_core::sim::{simulate, simulate_adaptive, Horizon, SimConfig, SimOptions};
use coinfer_core::types::{validate_config, Scheme, Strategy, SystemConfig};

use crate::{Command, FixtureName, Head};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData { samples, seed, out } => gen_data(samples as usize, seed, &out),
        Command::Train {
            head,
            epochs,
            lr,
            hidden,
            seed,
            batch_size,
            data,
            out,
        } => {
            let opts = TrainOptions {
                epochs,
                lr,
                seed,
                hidden: hidden as usize,
                batch_size,
                ..TrainOptions::default()
            };
            train(head, &opts, &data, &out)
        }
        Command::Simulate {
            config,
            lut,
            scheme,
            horizon,
            seed,
            csv,
            predictor,
        } => {
            let mut options = SimOptions::oracle();
            options.seed = seed;
            if let Some(h) = horizon {
                options.horizon = parse_horizon(&h)?;
            }
            simulate_cmd(&config, &lut, &scheme, options, csv.as_deref(), predictor.as_deref())
        }
        Command::Serve {
            listen,
            config,
            lut,
            predictor,
            wait_for,
            sessions,
            switch_after,
            switch_to,
            time_scale,
            report,
        } => {
            let system = load_config(&config)?;
            let lut = Arc::new(Lut::load(&lut)?);
            let mut opts = ServerOptions::new(system.clone(), Arc::clone(&lut), evaluator(predictor.as_deref())?);
            opts.time_scale = time_scale;
            opts.wait_for = wait_for.unwrap_or_else(|| system.clients().count());
            opts.sessions = sessions;
            if let (Some(after), Some(to)) = (switch_after, switch_to) {
                opts.switch = Some(PlannedSwitch {
                    after_results: after,
                    scheme: parse_scheme(&to, &system)?,
                });
            }
            serve(&listen, opts, report.as_deref())
        }
        Command::Device {
            connect,
            config,
            lut,
            device,
            model,
            tasks,
            csv,
            window,
            attempts,
            retry_delay_ms,
            time_scale,
            emulate_link,
            local_dp,
        } => {
            let system = load_config(&config)?;
            let lut = Arc::new(Lut::load(&lut)?);
            let profile = system
                .device(&device)
                .ok_or_else(|| format!("device {device:?} is not in {}", config.display()))?
                .clone();
            let deployed = system
                .model_of(&device)
                .ok_or_else(|| format!("no model configured for {device:?}"))?
                .clone();
            if let Some(m) = model {
                if m != deployed.model_id {
                    return Err(format!("{device} runs {}, not {m}", deployed.model_id).into());
                }
            }
            let mut opts = DeviceOptions::new(connect, profile, deployed, lut);
            opts.tasks = tasks;
            opts.window = window;
            opts.connect_attempts = attempts;
            opts.retry_delay_ms = retry_delay_ms;
            opts.time_scale = time_scale;
            if emulate_link {
                opts.network = Some(system.network.clone());
            }
            if local_dp {
                opts.server_kind = system.server().map(|s| s.kind.clone());
            }
            device_cmd(&opts, csv.as_deref())
        }
        Command::Fixture {
            name,
            config,
            lut,
            drop_at_ms,
            clients,
        } => {
            let fx = match name {
                FixtureName::Adaptivity => adaptivity_scenario(drop_at_ms),
                FixtureName::Loopback => loopback_scenario(clients),
                FixtureName::BatchKnee => batch_knee_scenario(6, 5, clients),
                FixtureName::Pipeline => pipeline_scenario(5.0, 2.0, 3.0),
            };
            fs::write(&config, fx.config.to_json())?;
            fs::write(&lut, fx.lut.to_json())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_config(path: &Path) -> Result<SystemConfig> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let config = SystemConfig::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    validate_config(&config).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(config)
}

fn evaluator(predictor: Option<&Path>) -> Result<EvaluatorSpec> {
    Ok(match predictor {
        Some(p) => {
            let model = load_checkpoint(p)?;
            if !model.meta.relative_trained {
                log::warn!("{}: relative head was never trained", p.display());
            }
            EvaluatorSpec::Learned(Arc::new(model))
        }
        None => EvaluatorSpec::Oracle(SimOptions::oracle()),
    })
}

fn parse_horizon(s: &str) -> Result<Horizon> {
    let bad = || format!("invalid horizon {s:?}: expected <ms>, ms:<ms> or tasks:<n>");
    let h = if let Some(n) = s.strip_prefix("tasks:") {
        Horizon::Tasks {
            count: n.parse().map_err(|_| bad())?,
        }
    } else {
        let ms: f64 = s.strip_prefix("ms:").unwrap_or(s).parse().map_err(|_| bad())?;
        if !(ms > 0.0 && ms.is_finite()) {
            return Err(bad().into());
        }
        Horizon::Duration { ms }
    };
    Ok(h)
}

/// `all-dp`, `pp:<s>` (every client) or a path to a scheme JSON file.
fn parse_scheme(s: &str, config: &SystemConfig) -> Result<Scheme> {
    if s == "all-dp" {
        return Ok(Scheme::uniform(config, Strategy::Dp));
    }
    if s.starts_with("pp:") {
        return Ok(Scheme::uniform(config, s.parse::<Strategy>()?));
    }
    let text = fs::read_to_string(s).map_err(|e| format!("scheme {s:?} is neither all-dp, pp:<s> nor a readable file: {e}"))?;
    Ok(serde_json::from_str(&text)?)
}

fn gen_data(samples: usize, seed: u64, out: &Path) -> Result<ExitCode> {
    let data = generate_training_set(samples, seed)?;
    let manifest = save_dataset(&data, out, Some(seed))?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(ExitCode::SUCCESS)
}

fn train(head: Head, opts: &TrainOptions, data: &Path, out: &Path) -> Result<ExitCode> {
    let samples = load_dataset(data).map_err(|e| format!("{}: {e}", data.display()))?;
    match head {
        Head::Throughput => {
            let (model, report) = train_throughput(&samples, opts)?;
            save_checkpoint(&model, out)?;
            println!("validation MAPE: {:.4}", report.val_mape);
            println!("validation within 20%: {:.4}", report.val_within_20);
            println!("train MAPE: {:.4} ({} train, {} val samples)", report.train_mape, report.n_train, report.n_val);
        }
        Head::Relative => {
            let (model, report) = train_relative(&samples, opts)?;
            save_checkpoint(&model, out)?;
            println!("validation accuracy: {:.4}", report.val_accuracy);
            println!("train accuracy: {:.4} ({} train, {} val pairs)", report.train_accuracy, report.n_train, report.n_val);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn simulate_cmd(
    config_path: &Path,
    lut_path: &Path,
    scheme: &str,
    mut options: SimOptions,
    csv: Option<&Path>,
    predictor: Option<&Path>,
) -> Result<ExitCode> {
    let system = load_config(config_path)?;
    let lut = Arc::new(Lut::load(lut_path)?);
    options.record_tasks = csv.is_some();
    let cfg = SimConfig::new(system.clone(), Arc::clone(&lut), options);
    let spec = evaluator(predictor)?;
    let sched = SchedulerConfig::default();

    let (result, reschedules) = if scheme == "auto" {
        // plan against the link as it is at t = 0
        let start = system.with_network(system.network.snapshot_at(0.0));
        let initial = {
            let mut eval = spec.build(&start, &lut)?;
            let s = optimize(&start, &lut, &sched, eval.as_mut())?;
            assign_idle(&s, &start, &lut, eval.as_mut())?
        };
        if system.network.trace.is_some() {
            let mut monitor = AdaptiveMonitor::new(start, Arc::clone(&lut), sched, spec);
            let r = simulate_adaptive(&cfg, &initial, &mut monitor)?;
            (r, monitor.events)
        } else {
            (simulate(&cfg, &initial)?, Vec::new())
        }
    } else {
        (simulate(&cfg, &parse_scheme(scheme, &system)?)?, Vec::new())
    };

    if let Some(path) = csv {
        result.write_csv(BufWriter::new(File::create(path)?))?;
    }
    let summary = serde_json::json!({
        "result": result,
        "reschedules": reschedules,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn serve(listen: &str, opts: ServerOptions, report_path: Option<&Path>) -> Result<ExitCode> {
    let server = Server::bind(listen, opts)?;
    let addr = server.handle()?.local_addr();
    println!("listening on {addr}");
    std::io::stdout().flush()?;
    let report = server.run()?;
    if let Some(path) = report_path {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    println!(
        "sessions {} tasks {} results {} duplicates {} undelivered {} flushes {} broadcasts {}",
        report.sessions,
        report.tasks_received,
        report.results_sent,
        report.duplicate_ids,
        report.undelivered,
        report.flushes.len(),
        report.broadcasts.len()
    );
    for e in &report.errors {
        eprintln!("server error: {e}");
    }
    Ok(if report.conserved() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn device_cmd(opts: &DeviceOptions, csv: Option<&Path>) -> Result<ExitCode> {
    let stats = run_device(opts)?;
    if let Some(path) = csv {
        stats.write_csv(BufWriter::new(File::create(path)?))?;
    }
    let complete = stats.ids_bijective(opts.tasks);
    println!(
        "{} completed {}/{} tasks, {} via server, mean latency {:.3} ms",
        stats.device_id,
        stats.records.len(),
        opts.tasks,
        stats.results_from_server(),
        stats.mean_latency_ms().unwrap_or(0.0)
    );
    Ok(if complete { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
