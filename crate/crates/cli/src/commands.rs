//! One function per subcommand. Each returns the files it wrote, relative
//! to the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use gridcast::attention::HeadMask;
use gridcast::bench::{bench_temporal_attention, BenchConfig};
use gridcast::checkpoint::Checkpoint;
use gridcast::dst::{generate_episode, Episode, EpisodeConfig, GridSpec, Scenario, SensorConfig};
use gridcast::metrics::{evaluate, EvalReport, ModelPredictor, Persistence, Predictor};
use gridcast::params::ParamStore;
use gridcast::prednet::{Model, ModelConfig, PredRnnConfig, StackConfig, FRAME_CHANNELS};
use gridcast::tensor::Tensor;
use gridcast::training::{train_with, TrainConfig};

use crate::artifacts::{line_chart, pignistic_pgm, Series};
use crate::config::{Command, Config};
use crate::error::{CliError, Result};

pub fn run(cmd: Command, cfg: &Config, out: &Path) -> Result<Vec<String>> {
    match cmd {
        Command::GenData => gen_data(cfg, out),
        Command::Train => train(cfg, out),
        Command::Predict => predict(cfg, out),
        Command::Eval => eval(cfg, out),
        Command::Ablate => ablate(cfg, out),
        Command::BenchAttn => bench_attn(cfg, out),
    }
}

fn write(out: &Path, rel: &str, bytes: impl AsRef<[u8]>, written: &mut Vec<String>) -> Result<()> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    written.push(rel.to_string());
    Ok(())
}

fn episode_bytes(ep: &Episode) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    ep.write_to(&mut buf)?;
    Ok(buf)
}

pub fn gen_data(cfg: &Config, out: &Path) -> Result<Vec<String>> {
    let scenario = cfg.str("scenario");
    let scenarios = if scenario == "all" {
        Scenario::ALL.to_vec()
    } else {
        vec![Scenario::parse(scenario)?]
    };
    let count: usize = cfg.get("episodes")?;
    if count == 0 {
        return Err(CliError::config("episodes must be positive"));
    }
    let seed: u64 = cfg.get("seed")?;
    let side: usize = cfg.get("grid")?;
    let base = EpisodeConfig {
        scenario: scenarios[0],
        steps: cfg.get("steps")?,
        grid: GridSpec::new(side, side, cfg.get("resolution")?)?,
        alpha: cfg.get("alpha")?,
        sensor: SensorConfig {
            rays: cfg.get("rays")?,
            max_range: cfg.get("max-range")?,
            range_noise: cfg.get("range-noise")?,
            p_occ: cfg.get("p-occ")?,
            p_free: cfg.get("p-free")?,
        },
        dt: cfg.get("dt")?,
        seed,
    };
    base.validate()?;
    let mut written = Vec::new();
    for i in 0..count {
        let ep_cfg = EpisodeConfig {
            scenario: scenarios[i % scenarios.len()],
            seed: seed.wrapping_add(i as u64),
            ..base
        };
        let ep = generate_episode(&ep_cfg)?;
        if ep.len() < ep_cfg.steps {
            log::warn!("episode {i} ({}) stopped after {} steps", ep_cfg.scenario.name(), ep.len());
        }
        log::info!("episode {i}: {} with {} steps", ep_cfg.scenario.name(), ep.len());
        write(out, &format!("ep_{i:03}.gcep"), episode_bytes(&ep)?, &mut written)?;
    }
    Ok(written)
}

/// Episode files of `dir` in name order.
pub fn load_episodes(dir: &Path) -> Result<Vec<(String, Episode)>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Missing(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "gcep"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Missing(format!("no .gcep episode files in {}", dir.display())));
    }
    let episodes = paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((stem, Episode::load(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = episodes[0].1.grid;
    if let Some((name, _)) = episodes.iter().find(|(_, e)| e.grid != grid) {
        return Err(CliError::config(format!("episode {name} has a different grid from the rest")));
    }
    Ok(episodes)
}

fn data(cfg: &Config) -> Result<Vec<(String, Episode)>> {
    load_episodes(Path::new(cfg.str("data")))
}

fn load_checkpoint(cfg: &Config) -> Result<Option<(Model, ParamStore<f32>)>> {
    let path = cfg.str("checkpoint");
    if path.is_empty() {
        return Ok(None);
    }
    let path = Path::new(path);
    if !path.is_file() {
        return Err(CliError::Missing(format!("checkpoint {}", path.display())));
    }
    Ok(Some(Checkpoint::<f32>::load(path)?.restore()?))
}

fn require_checkpoint(cfg: &Config) -> Result<(Model, ParamStore<f32>)> {
    load_checkpoint(cfg)?.ok_or_else(|| CliError::config("checkpoint is required"))
}

/// Episodes with at least `n + p` frames on the model's grid.
fn usable<'a>(episodes: &'a [(String, Episode)], model: Option<&Model>, n: usize, p: usize) -> Result<Vec<&'a (String, Episode)>> {
    if n == 0 || p == 0 {
        return Err(CliError::config("n and p must be positive"));
    }
    if let Some(m) = model {
        let g = episodes[0].1.grid;
        if m.grid() != (g.h, g.w) {
            return Err(CliError::config(format!(
                "model expects {:?} grids but the episodes are {}×{}",
                m.grid(),
                g.h,
                g.w
            )));
        }
    }
    let ok: Vec<_> = episodes.iter().filter(|(_, e)| e.len() >= n + p).collect();
    if ok.is_empty() {
        return Err(CliError::config(format!("no episode has the {} frames n + p needs", n + p)));
    }
    if ok.len() < episodes.len() {
        log::warn!("skipping {} episodes shorter than {} frames", episodes.len() - ok.len(), n + p);
    }
    Ok(ok)
}

fn model_config(cfg: &Config, grid: (usize, usize)) -> Result<ModelConfig> {
    let name = cfg.str("model");
    if name == "predrnn" {
        let c = PredRnnConfig {
            hidden: cfg.list("hidden")?,
            patch: cfg.get("patch")?,
            ..PredRnnConfig::standard(grid)
        };
        c.validate()?;
        return Ok(ModelConfig::Predrnn(c));
    }
    let channels: Vec<usize> = cfg.list("channels")?;
    if channels.first() != Some(&FRAME_CHANNELS) {
        return Err(CliError::config(format!("channels must start with {FRAME_CHANNELS}")));
    }
    let mut stack = match name {
        "vanilla" => StackConfig::vanilla(&channels, grid),
        "taa" => StackConfig::taa(&channels, grid),
        "saa" => StackConfig::saa(&channels, grid),
        other => return Err(CliError::config(format!("unknown model {other:?}"))),
    };
    stack.attention.n_heads = cfg.get("heads")?;
    stack.attention.horizon = cfg.get("horizon")?;
    stack.attention.fraction = cfg.get("attention-fraction")?;
    stack.validate()?;
    Ok(ModelConfig::Prednet(stack))
}

pub fn train(cfg: &Config, out: &Path) -> Result<Vec<String>> {
    let episodes = data(cfg)?;
    let grid = episodes[0].1.grid;
    let seed: u64 = cfg.get("seed")?;
    let (model, params) = Model::build::<f32>(&model_config(cfg, (grid.h, grid.w))?, seed)?;
    log::info!("{} parameters", params.num_scalars());
    let clip: f64 = cfg.get("clip")?;
    let truncation: usize = cfg.get("truncation")?;
    let tc = TrainConfig {
        n: cfg.get("n")?,
        p: cfg.get("p")?,
        epochs: cfg.get("epochs")?,
        samples_per_epoch: cfg.get("samples-per-epoch")?,
        batch: cfg.get("batch")?,
        lr: cfg.get("lr")?,
        seed,
        clip: (clip > 0.0).then_some(clip),
        truncation: (truncation > 0).then_some(truncation),
        checkpoint_dir: Some(out.to_path_buf()),
        ..TrainConfig::default()
    };
    let eps: Vec<Episode> = episodes.into_iter().map(|(_, e)| e).collect();
    let outcome = train_with(&model, params, &eps, &tc, |epoch, loss| {
        log::info!("epoch {epoch:4} loss {loss:.6}");
    })?;
    let mut written = vec!["best.ckpt".to_string(), "final.ckpt".to_string()];
    let curve: String = outcome
        .curve
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{} {l}\n", i + 1))
        .collect();
    write(out, "curve.txt", curve, &mut written)?;
    let chart = line_chart(
        "training loss",
        "L1 loss",
        &[Series {
            name: "train",
            values: &outcome.curve,
        }],
    )
    .replace(">prediction horizon<", ">epoch<");
    write(out, "curve.svg", chart, &mut written)?;
    println!("best epoch {} loss {:.6}", outcome.best_epoch, outcome.best_loss);
    Ok(written)
}

/// Episode holding predicted frames with the poses and boxes of their targets.
fn predicted_episode(source: &Episode, frames: Vec<Tensor<f32>>, n: usize) -> Episode {
    let p = frames.len();
    Episode {
        grid: source.grid,
        frames,
        poses: source.poses[n..n + p].to_vec(),
        boxes: source
            .boxes
            .iter()
            .filter(|b| (n..n + p).contains(&(b.step as usize)))
            .map(|b| gridcast::dst::BoxRecord {
                step: b.step - n as u32,
                ..*b
            })
            .collect(),
    }
}

fn predict_all(
    model: &Model,
    params: &ParamStore<f32>,
    episodes: &[&(String, Episode)],
    n: usize,
    p: usize,
    mask: Option<&HeadMask>,
) -> Result<Vec<Vec<Tensor<f32>>>> {
    episodes
        .iter()
        .map(|(_, e)| Ok(model.predict(params, &e.frames[..n], p, mask)?))
        .collect()
}

pub fn predict(cfg: &Config, out: &Path) -> Result<Vec<String>> {
    let episodes = data(cfg)?;
    let (model, params) = require_checkpoint(cfg)?;
    let (n, p) = (cfg.get("n")?, cfg.get("p")?);
    let chosen = usable(&episodes, Some(&model), n, p)?;
    let preds = predict_all(&model, &params, &chosen, n, p, None)?;
    let mut written = Vec::new();
    for ((stem, ep), frames) in chosen.iter().zip(preds) {
        for (t, frame) in frames.iter().enumerate() {
            write(out, &format!("{stem}/pred_{:02}.pgm", t + 1), pignistic_pgm(frame, &ep.grid)?, &mut written)?;
            write(
                out,
                &format!("{stem}/target_{:02}.pgm", t + 1),
                pignistic_pgm(&ep.frames[n + t], &ep.grid)?,
                &mut written,
            )?;
        }
        let pred = predicted_episode(ep, frames, n);
        write(out, &format!("{stem}/pred.gcep"), episode_bytes(&pred)?, &mut written)?;
    }
    Ok(written)
}

fn print_report(report: &EvalReport) {
    println!("{}: {} episodes", report.summary.model, report.summary.episodes);
    println!("{:>7} {:>12} {:>10} {:>8}", "horizon", "mse", "is", "mobbm");
    for s in &report.steps {
        let mobbm = s.mobbm.map_or("-".to_string(), |m| format!("{:.4}", m.mean));
        println!("{:>7} {:>12.6} {:>10.4} {:>8}", s.horizon, s.mse.mean, s.is.mean, mobbm);
    }
}

pub fn eval(cfg: &Config, out: &Path) -> Result<Vec<String>> {
    let episodes = data(cfg)?;
    let loaded = load_checkpoint(cfg)?;
    let (n, p) = (cfg.get("n")?, cfg.get("p")?);
    usable(&episodes, loaded.as_ref().map(|(m, _)| m), n, p)?;
    let eps: Vec<Episode> = episodes.into_iter().map(|(_, e)| e).collect();
    let dataset = cfg.str("data");
    let model_predictor = loaded.as_ref().map(|(model, params)| ModelPredictor {
        name: Path::new(cfg.str("checkpoint"))
            .file_stem()
            .map_or("model".into(), |s| s.to_string_lossy().into_owned()),
        model,
        params,
        mask: None,
    });
    let mut predictors: Vec<(&str, &dyn Predictor)> = Vec::new();
    if let Some(m) = &model_predictor {
        predictors.push(("model", m));
    }
    predictors.push(("persistence", &Persistence));
    let mut written = Vec::new();
    let mut reports = Vec::new();
    for (file, predictor) in predictors {
        let report = evaluate(predictor, &eps, n, p, dataset)?;
        print_report(&report);
        let mut buf = Vec::new();
        report.write_jsonl(&mut buf)?;
        write(out, &format!("{file}.jsonl"), buf, &mut written)?;
        reports.push(report);
    }
    let columns: Vec<(String, Vec<f64>, Vec<f64>, Vec<f64>)> = reports
        .iter()
        .map(|r| (r.summary.model.clone(), r.mse(), r.is(), r.mobbm()))
        .collect();
    for (metric, label, pick) in [
        ("mse", "MSE", 0usize),
        ("is", "image similarity", 1),
        ("mobbm", "MOBBM", 2),
    ] {
        let series: Vec<Series<'_>> = columns
            .iter()
            .map(|(name, a, b, c)| Series {
                name,
                values: [a, b, c][pick],
            })
            .collect();
        write(out, &format!("{metric}.svg"), line_chart(label, label, &series), &mut written)?;
    }
    Ok(written)
}

fn l2(a: &[Vec<Tensor<f32>>], b: &[Vec<Tensor<f32>>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn ablate(cfg: &Config, out: &Path) -> Result<Vec<String>> {
    let episodes = data(cfg)?;
    let (model, params) = require_checkpoint(cfg)?;
    let heads = model
        .attention_heads()
        .ok_or_else(|| CliError::config("checkpoint has no attention heads to ablate"))?;
    if cfg.is_explicit("heads") {
        let want: usize = cfg.get("heads")?;
        if want != heads {
            return Err(CliError::config(format!("heads = {want} but the checkpoint has {heads}")));
        }
    }
    let (n, p) = (cfg.get("n")?, cfg.get("p")?);
    let chosen = usable(&episodes, Some(&model), n, p)?;
    let mut variants = vec![("full".to_string(), HeadMask::keep_all(heads))];
    variants.extend((0..heads).map(|h| (format!("drop-{h}"), HeadMask::drop_one(heads, h))));
    let mut written = Vec::new();
    let mut preds = Vec::new();
    for (name, mask) in &variants {
        let frames = predict_all(&model, &params, &chosen, n, p, Some(mask))?;
        for ((stem, ep), f) in chosen.iter().zip(&frames) {
            let pred = predicted_episode(ep, f.clone(), n);
            write(out, &format!("{name}/{stem}.gcep"), episode_bytes(&pred)?, &mut written)?;
        }
        preds.push(frames);
    }
    let names: Vec<&str> = variants.iter().map(|(n, _)| n.as_str()).collect();
    let norms: Vec<Vec<f64>> = preds.iter().map(|a| preds.iter().map(|b| l2(a, b)).collect()).collect();
    let mut table = format!("{:>8}", "");
    for name in &names {
        table.push_str(&format!(" {name:>12}"));
    }
    table.push('\n');
    for (name, row) in names.iter().zip(&norms) {
        table.push_str(&format!("{name:>8}"));
        for v in row {
            table.push_str(&format!(" {v:>12.6e}"));
        }
        table.push('\n');
    }
    print!("{table}");
    write(out, "norms.txt", &table, &mut written)?;
    let json = serde_json::json!({ "variants": names, "l2": norms });
    write(out, "norms.json", serde_json::to_string_pretty(&json)? + "\n", &mut written)?;
    Ok(written)
}

pub fn bench_attn(cfg: &Config, out: &Path) -> Result<Vec<String>> {
    let bc = BenchConfig {
        grid: cfg.get("bench-grid")?,
        channels: cfg.get("bench-channels")?,
        n_heads: cfg.get("bench-heads")?,
        horizons: cfg.list("horizons")?,
        runs: cfg.get("runs")?,
        seed: cfg.get("seed")?,
    };
    let rows = bench_temporal_attention(&bc)?;
    let base = &rows[0];
    let mut table = format!(
        "{:>7} {:>12} {:>12} {:>12} {:>10} {:>10}\n",
        "horizon", "median_ms", "min_ms", "max_ms", "ratio", "expected"
    );
    for r in &rows {
        table.push_str(&format!(
            "{:>7} {:>12.3} {:>12.3} {:>12.3} {:>10.2} {:>10.2}\n",
            r.horizon,
            r.median_s * 1e3,
            r.min_s * 1e3,
            r.max_s * 1e3,
            r.median_s / base.median_s,
            r.horizon as f64 / base.horizon as f64
        ));
    }
    print!("{table}");
    let mut written = Vec::new();
    write(out, "bench.txt", &table, &mut written)?;
    write(out, "bench.json", serde_json::to_string_pretty(&rows)? + "\n", &mut written)?;
    Ok(written)
}
