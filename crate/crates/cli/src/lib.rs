//! Command-line driver for the gridcast pipeline.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches};

use config::{keys_for, Command, Config, KEYS};
use error::{CliError, Result};

fn key_table() -> String {
    let mut s = String::from("Config keys (file lines or --set key=value; each is also a --key flag):\n");
    for k in KEYS {
        let default = if k.default.is_empty() { "\"\"" } else { k.default };
        s.push_str(&format!("  {:<20} {} [default: {default}]\n", k.name, k.help));
    }
    s
}

pub fn cli() -> clap::Command {
    let mut app = clap::Command::new("gridcast")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Evidential occupancy grid prediction with attention-augmented ConvLSTMs")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(key_table());
    for cmd in Command::ALL {
        let mut sub = clap::Command::new(cmd.name())
            .about(cmd.about())
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("Flat key = value config file"),
            )
            .arg(
                Arg::new("set")
                    .long("set")
                    .value_name("KEY=VALUE")
                    .action(ArgAction::Append)
                    .help("Override one key; may repeat"),
            );
        for k in keys_for(cmd) {
            let arg = Arg::new(k.name)
                .long(k.name)
                .value_name("VALUE")
                .help(format!("{} [default: {}]", k.help, k.default));
            sub = sub.arg(match k.name {
                "n" => arg.visible_alias("N"),
                "p" => arg.visible_alias("P"),
                _ => arg,
            });
        }
        app = app.subcommand(sub);
    }
    app
}

/// Defaults, then the config file, then `--set`, then key flags.
pub fn resolve(cmd: Command, m: &ArgMatches) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
        cfg.merge_text(&text)?;
    }
    for pair in m.get_many::<String>("set").into_iter().flatten() {
        cfg.set_pair(pair)?;
    }
    for k in keys_for(cmd) {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    Ok(cfg)
}

/// Runs a parsed command line and writes the manifest.
pub fn execute(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().ok_or_else(|| CliError::config("no command given"))?;
    let cmd = Command::parse(name).ok_or_else(|| CliError::config(format!("unknown command {name}")))?;
    let cfg = resolve(cmd, sub)?;
    cfg.get::<u64>("seed")?;
    let out = Path::new(cfg.str("out"));
    std::fs::create_dir_all(out)?;
    let outputs = commands::run(cmd, &cfg, out)?;
    artifacts::write_manifest(out, cmd, &cfg, &outputs)?;
    log::info!("{} files written to {}", outputs.len() + 2, out.display());
    Ok(())
}
