use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use unisep::data::{self, Dataset, Split};
use unisep::harness::{self, Mode, TrainConfig, KEYS};
use unisep::model::UnifiedNet;
use unisep::signal;
use unisep::{Error, Result};

fn config_args(cmd: Command) -> Command {
    let cmd = cmd
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value config file; flags override it"),
        )
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("override any config key"),
        )
        .arg(
            Arg::new("cache")
                .long("cache")
                .value_name("DIR")
                .help("read/write the generated dataset here"),
        );
    KEYS.iter().fold(cmd, |c, &k| {
        c.arg(Arg::new(k).long(k).value_name("VALUE").help_heading("Config keys"))
    })
}

fn cli() -> Command {
    Command::new("unisep")
        .about("Unified speech enhancement + separation with gradient modulation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("train")
                .about("Train one mode; writes metrics.csv, conflict.csv, best.ckpt and probe spectrograms")
                .arg(Arg::new("out").long("out").value_name("DIR").default_value("runs/train"))
                .arg(Arg::new("quiet").long("quiet").action(ArgAction::SetTrue)),
        ))
        .subcommand(config_args(
            Command::new("eval")
                .about("Evaluate a checkpoint on a dataset split")
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("FILE").required(true))
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_parser(["train", "valid", "test"])
                        .default_value("test"),
                ),
        ))
        .subcommand(config_args(
            Command::new("ablate")
                .about("Train all four modes from one seed and report SI-SNRi / SDRi")
                .arg(Arg::new("out").long("out").value_name("DIR").default_value("runs/ablate"))
                .arg(
                    Arg::new("modes")
                        .long("modes")
                        .value_name("LIST")
                        .help("comma-separated subset of baseline-ss,unified-nose-loss,unified,unified+gm"),
                )
                .arg(Arg::new("quiet").long("quiet").action(ArgAction::SetTrue)),
        ))
        .subcommand(config_args(
            Command::new("synth-data")
                .about("Generate the synthetic corpus as binary sample files and optionally WAVs")
                .arg(Arg::new("out").long("out").value_name("DIR").default_value("data"))
                .arg(Arg::new("wav").long("wav").action(ArgAction::SetTrue).help("also write WAV files")),
        ))
        .subcommand(
            Command::new("spectrogram")
                .about("Export a WAV file's magnitude spectrogram as PGM (P2) and CSV")
                .arg(Arg::new("input").long("input").value_name("WAV").required(true))
                .arg(Arg::new("out").long("out").value_name("PREFIX").required(true))
                .arg(
                    Arg::new("frame")
                        .long("frame")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("256"),
                )
                .arg(
                    Arg::new("hop")
                        .long("hop")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("64"),
                ),
        )
}

/// Defaults, then the config file (or `fallback` when none is given), then
/// `--set` values, then individual key flags.
fn resolve_config(m: &ArgMatches, fallback: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match (m.get_one::<String>("config"), fallback) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Some(p)) if p.exists() => TrainConfig::load(p)?,
        _ => TrainConfig::default(),
    };
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    for &k in KEYS {
        if let Some(v) = m.get_one::<String>(k) {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(m: &ArgMatches, cfg: &TrainConfig) -> Result<Dataset> {
    match m.get_one::<String>("cache") {
        Some(dir) => Dataset::load_or_generate(&cfg.data, dir),
        None => Dataset::generate(&cfg.data),
    }
}

fn print_epoch(prefix: &str, e: &harness::EpochMetrics) {
    let c = e.conflict_fraction.map(|c| format!(" conflict {c:.3}")).unwrap_or_default();
    println!(
        "{prefix}epoch {:>3}  l_se {:.5}  l_ss {:.4}  valid SI-SNRi {:.3} dB  SDRi {:.3} dB{c}  lr {:.3e}",
        e.epoch, e.l_se, e.l_ss, e.valid_si_snri, e.valid_sdri, e.lr
    );
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(m, None)?;
    let out = PathBuf::from(m.get_one::<String>("out").expect("default"));
    let quiet = m.get_flag("quiet");
    let ds = dataset(m, &cfg)?;
    let r = harness::train(&cfg, &ds, Some(&out), |e| {
        if !quiet {
            print_epoch("", e)
        }
    })?;
    println!("mode {}  params {}  best epoch {}", cfg.mode, r.num_params, r.best_epoch);
    if let Some(t) = r.test {
        println!("test SI-SNRi {:.3} dB  SDRi {:.3} dB", t.si_snri, t.sdri);
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let ckpt = PathBuf::from(m.get_one::<String>("checkpoint").expect("required"));
    let sibling = ckpt.parent().map(|p| p.join("config.txt"));
    let cfg = resolve_config(m, sibling.as_deref())?;
    let net = UnifiedNet::new(cfg.model.clone(), cfg.mode.has_se_net())?;
    let mut store = net.init(cfg.seed);
    store.load_values(&ckpt)?;
    let split = match m.get_one::<String>("split").map(String::as_str) {
        Some("train") => Split::Train,
        Some("valid") => Split::Valid,
        _ => Split::Test,
    };
    let ds = dataset(m, &cfg)?;
    let e = harness::evaluate(&net, &store, ds.split(split))?;
    println!("{} split ({} samples): SI-SNRi {:.3} dB  SDRi {:.3} dB", split.name(), ds.split(split).len(), e.si_snri, e.sdri);
    Ok(())
}

fn cmd_ablate(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(m, None)?;
    let modes = match m.get_one::<String>("modes") {
        Some(list) => list.split(',').map(|s| s.trim().parse()).collect::<Result<Vec<Mode>>>()?,
        None => Mode::ALL.to_vec(),
    };
    let out = PathBuf::from(m.get_one::<String>("out").expect("default"));
    let quiet = m.get_flag("quiet");
    let ds = dataset(m, &cfg)?;
    let r = harness::run_ablation(&cfg, &modes, &ds, Some(&out), |mode, e| {
        if !quiet {
            print_epoch(&format!("[{mode}] "), e)
        }
    });
    print!("{}", r.to_table());
    println!("report in {}", out.join("ablation.csv").display());
    Ok(())
}

fn cmd_synth(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(m, None)?;
    let out = PathBuf::from(m.get_one::<String>("out").expect("default"));
    let ds = Dataset::load_or_generate(&cfg.data, &out)?;
    if m.get_flag("wav") {
        for split in Split::ALL {
            for (i, s) in ds.split(split).iter().enumerate() {
                let stem = out.join(format!("{}_{i:05}", split.name()));
                data::write_wav(stem.with_extension("mix.wav"), &s.x_n, s.sample_rate)?;
                data::write_wav(stem.with_extension("clean.wav"), &s.x_c, s.sample_rate)?;
                for (k, src) in s.sources.iter().enumerate() {
                    data::write_wav(stem.with_extension(format!("s{k}.wav")), src, s.sample_rate)?;
                }
            }
        }
    }
    println!(
        "{} train / {} valid / {} test samples in {}",
        ds.train.len(),
        ds.valid.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_spectrogram(m: &ArgMatches) -> Result<()> {
    let (x, _) = data::load_wav(m.get_one::<String>("input").expect("required"))?;
    let prefix = m.get_one::<String>("out").expect("required");
    let frame = *m.get_one::<usize>("frame").expect("default");
    let hop = *m.get_one::<usize>("hop").expect("default");
    let s = signal::spectrogram(x.data(), frame, hop)?;
    s.write_pgm(format!("{prefix}.pgm"))?;
    s.write_csv(format!("{prefix}.csv"))?;
    println!("{} bins x {} frames -> {prefix}.pgm, {prefix}.csv", s.bins, s.frames);
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("train", m)) => cmd_train(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("ablate", m)) => cmd_ablate(m),
        Some(("synth-data", m)) => cmd_synth(m),
        Some(("spectrogram", m)) => cmd_spectrogram(m),
        _ => unreachable!("subcommand required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
