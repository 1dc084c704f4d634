//! Flat `key = value` run configuration.
//!
//! Every key has a default. A config file and then command-line overrides
//! replace defaults, and any key outside [`KEYS`] is rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    GenData,
    Train,
    Predict,
    Eval,
    Ablate,
    BenchAttn,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::GenData,
        Command::Train,
        Command::Predict,
        Command::Eval,
        Command::Ablate,
        Command::BenchAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::BenchAttn => "bench-attn",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Command::GenData => "Simulate LiDAR episodes and write evidential grid sequences",
            Command::Train => "Train a predictor on episode files with L1 loss and Adam",
            Command::Predict => "Roll a checkpoint forward and dump predicted grids as images",
            Command::Eval => "Score a checkpoint and the persistence baseline per horizon",
            Command::Ablate => "Predict with each attention head dropped and compare the results",
            Command::BenchAttn => "Time temporal attention over several horizons",
        }
    }

    pub fn parse(s: &str) -> Option<Command> {
        Command::ALL.into_iter().find(|c| c.name() == s)
    }
}

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    pub commands: &'static [Command],
}

use Command::*;

const DATA_USERS: &[Command] = &[Train, Predict, Eval, Ablate];
const GEN: &[Command] = &[GenData];
const TRAIN: &[Command] = &[Train];
const BENCH: &[Command] = &[BenchAttn];

pub static KEYS: &[Key] = &[
    Key { name: "seed", default: "0", help: "Seed for every random choice", commands: &Command::ALL },
    Key { name: "out", default: "out", help: "Output directory", commands: &Command::ALL },
    Key {
        name: "scenario",
        default: "all",
        help: "straight-pass, intersection, static-clutter, crossing, overtake, or all to cycle through them",
        commands: GEN,
    },
    Key { name: "episodes", default: "8", help: "Number of episodes", commands: GEN },
    Key { name: "steps", default: "30", help: "Steps per episode", commands: GEN },
    Key { name: "grid", default: "32", help: "Grid cells per side", commands: GEN },
    Key { name: "resolution", default: "0.3333333333333333", help: "Cell edge in meters", commands: GEN },
    Key { name: "alpha", default: "0.98", help: "Evidence aging factor per step", commands: GEN },
    Key { name: "rays", default: "720", help: "LiDAR rays per sweep", commands: GEN },
    Key { name: "max-range", default: "8", help: "LiDAR range in meters", commands: GEN },
    Key { name: "range-noise", default: "0", help: "Standard deviation of range noise in meters", commands: GEN },
    Key { name: "p-occ", default: "0.7", help: "Occupied mass given to a hit cell", commands: GEN },
    Key { name: "p-free", default: "0.6", help: "Free mass given to a traversed cell", commands: GEN },
    Key { name: "dt", default: "0.1", help: "Seconds per step", commands: GEN },
    Key { name: "data", default: "data", help: "Directory of episode files", commands: DATA_USERS },
    Key { name: "n", default: "5", help: "Observed frames per sample", commands: DATA_USERS },
    Key { name: "p", default: "15", help: "Predicted frames per sample", commands: DATA_USERS },
    Key { name: "model", default: "taa", help: "vanilla, taa, saa or predrnn", commands: TRAIN },
    Key {
        name: "channels",
        default: "2,16,32",
        help: "Channels per PredNet layer, the first being the 2 mass planes",
        commands: TRAIN,
    },
    Key {
        name: "heads",
        default: "4",
        help: "Attention heads (train); when set for ablate, must match the checkpoint",
        commands: &[Train, Ablate],
    },
    Key { name: "horizon", default: "4", help: "Temporal attention horizon", commands: TRAIN },
    Key {
        name: "attention-fraction",
        default: "0.25",
        help: "Share of gate channels produced by attention",
        commands: TRAIN,
    },
    Key { name: "hidden", default: "64,64,64,64", help: "PredRNN++ hidden channels per layer", commands: TRAIN },
    Key { name: "patch", default: "4", help: "PredRNN++ space-to-depth patch size", commands: TRAIN },
    Key { name: "epochs", default: "200", help: "Training epochs", commands: TRAIN },
    Key { name: "samples-per-epoch", default: "32", help: "Training windows drawn per epoch", commands: TRAIN },
    Key { name: "batch", default: "4", help: "Windows per Adam step", commands: TRAIN },
    Key { name: "lr", default: "0.001", help: "Adam learning rate", commands: TRAIN },
    Key { name: "clip", default: "1", help: "Global gradient norm bound, 0 disables clipping", commands: TRAIN },
    Key {
        name: "truncation",
        default: "0",
        help: "Steps between gradient cuts through the recurrent state, 0 for none",
        commands: TRAIN,
    },
    Key {
        name: "checkpoint",
        default: "",
        help: "Checkpoint file (eval scores persistence only when empty)",
        commands: &[Predict, Eval, Ablate],
    },
    Key { name: "bench-grid", default: "16", help: "Grid side of the timed attention input", commands: BENCH },
    Key { name: "bench-channels", default: "32", help: "Channels of the timed attention input", commands: BENCH },
    Key { name: "bench-heads", default: "4", help: "Heads of the timed attention layer", commands: BENCH },
    Key { name: "horizons", default: "1,2,4,6", help: "Temporal horizons to time", commands: BENCH },
    Key { name: "runs", default: "20", help: "Timed passes per horizon", commands: BENCH },
];

pub fn key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

pub fn keys_for(cmd: Command) -> impl Iterator<Item = &'static Key> {
    KEYS.iter().filter(move |k| k.commands.contains(&cmd))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
    explicit: BTreeSet<&'static str>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
            explicit: BTreeSet::new(),
        }
    }
}

impl Config {
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let k = key(name).ok_or_else(|| CliError::config(format!("unknown key {name:?}")))?;
        self.values.insert(k.name, value.trim().to_string());
        self.explicit.insert(k.name);
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Applies every line of a config file. Blank lines and `#` comments are skipped.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line).map_err(|e| match e {
                CliError::Config(msg) => CliError::Config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn str(&self, name: &str) -> &str {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("{name} is not a registered key"))
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.str(name);
        raw.parse()
            .map_err(|e| CliError::config(format!("{name} = {raw:?}: {e}")))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, name: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        let raw = self.str(name);
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::config(format!("{name} = {raw:?}: {e}")))
            })
            .collect()
    }

    /// Whether the key was given in a file or on the command line.
    pub fn is_explicit(&self, name: &str) -> bool {
        self.explicit.contains(name)
    }

    /// Sorted `key=value` lines, readable back with [`Config::merge_text`].
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of the canonical form without the output directory, so a
    /// rerun elsewhere hashes the same.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter().filter(|(k, _)| **k != "out") {
            h.update(format!("{k}={v}\n"));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn values(&self) -> impl Iterator<Item = (&'static str, &str)> {
        self.values.iter().map(|(k, v)| (*k, v.as_str()))
    }
}
