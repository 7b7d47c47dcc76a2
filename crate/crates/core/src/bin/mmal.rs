use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use mmal::engine::{run_experiment, world_for_seed, write_metrics, write_outputs, ExperimentConfig, ExperimentResult};
use mmal::eval::{dump_embeddings_2d, evaluate, margin_case_study, write_embed2d, MarginCaseStudy, MetricsSnapshot};
use mmal::model::TwoTowerModel;
use mmal::world::{generate_world, write_world, WorldSpec};
use mmal::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_TRUNCATED: u8 = 3;

#[derive(Parser)]
#[command(name = "mmal", version, about = "Multimodal active learning on synthetic unaligned worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a world from a spec and dump it.
    GenWorld {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate the checkpoints of a finished run.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run the cartesian product of a parameter grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
    },
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn summarize(result: &ExperimentResult) {
    for run in &result.runs {
        let m = run.final_metrics();
        println!(
            "{} seed {}: rounds {} cost {} r1_i2t {:.4} r1_t2i {:.4} match_acc {:.4}{}",
            run.strategy,
            run.seed,
            run.rounds.len(),
            m.cost,
            m.r1_i2t,
            m.r1_t2i,
            m.match_acc,
            if run.any_exhausted() { " (exhausted)" } else { "" }
        );
    }
}

fn cmd_run(config: &Path, out: &Path) -> Result<bool, Error> {
    let cfg: ExperimentConfig = read_json(config)?;
    let result = run_experiment(&cfg)?;
    write_outputs(out, &result)?;
    summarize(&result);
    Ok(result.any_exhausted())
}

fn cmd_gen_world(spec: &Path, out: &Path) -> Result<bool, Error> {
    let spec: WorldSpec = read_json(spec)?;
    let world = generate_world(&spec)?;
    write_world(out, &world)?;
    println!(
        "wrote world: {} pool records per modality, {} test pairs",
        world.pool.len(),
        world.test.len()
    );
    Ok(false)
}

#[derive(Serialize)]
struct SeedEval {
    seed: u64,
    metrics: MetricsSnapshot,
    margins: MarginCaseStudy,
    embed2d: String,
}

fn cmd_eval(run: &Path) -> Result<bool, Error> {
    let result: ExperimentResult = read_json(&run.join("result.json"))?;
    let mut report = Vec::new();
    for seed_run in &result.runs {
        let world = world_for_seed(&result.config, seed_run.seed)?;
        let view = world.oracle.view();
        let model = TwoTowerModel::load(&run.join(format!("model_seed{}.json", seed_run.seed)))?;
        let cost = seed_run.final_metrics().cost;
        let metrics = evaluate(&model, &world.pool, &world.test, &view, seed_run.rounds.len(), cost)?;
        let all: Vec<usize> = (0..world.pool.len()).collect();
        let margins = margin_case_study(&model, &world.pool, &view, &all, &all)?;
        let selected: Vec<usize> = seed_run
            .rounds
            .iter()
            .flat_map(|r| r.selected.iter())
            .map(|p| if p.modality == 0 { p.id } else { view.partner(p.modality, p.id, 0) })
            .collect();
        let rows = dump_embeddings_2d(&model, &world.pool, 0, &[(seed_run.strategy.clone(), selected)])?;
        let name = format!("embed2d_seed{}.csv", seed_run.seed);
        write_embed2d(&run.join(&name), &rows)?;
        println!(
            "seed {}: match_acc {:.4} r1_i2t {:.4} r1_t2i {:.4} margin correct {:?} incorrect {:?}",
            seed_run.seed, metrics.match_acc, metrics.r1_i2t, metrics.r1_t2i, margins.mean_correct, margins.mean_incorrect
        );
        report.push(SeedEval {
            seed: seed_run.seed,
            metrics,
            margins,
            embed2d: name,
        });
    }
    write_json(&run.join("eval.json"), &report)?;
    Ok(false)
}

/// `{"base": <config or path>, "out": <dir>, "axes": {"a.b": [..], ..}}`
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Grid {
    base: Value,
    out: PathBuf,
    axes: serde_json::Map<String, Value>,
}

fn set_path(target: &mut Value, path: &str, value: Value) -> Result<(), Error> {
    let mut cur = target;
    let keys: Vec<&str> = path.split('.').collect();
    for key in &keys[..keys.len() - 1] {
        cur = cur
            .get_mut(*key)
            .ok_or_else(|| Error::InvalidConfig(format!("grid axis {path}: no field {key}")))?;
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::InvalidConfig(format!("grid axis {path} does not name an object field")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn cmd_sweep(grid_path: &Path) -> Result<bool, Error> {
    let grid: Grid = read_json(grid_path)?;
    let base = match grid.base {
        Value::String(p) => {
            let p = grid_path.parent().unwrap_or(Path::new(".")).join(p);
            read_json::<Value>(&p)?
        }
        v => v,
    };
    let mut cells: Vec<(String, Value)> = vec![(String::new(), base)];
    for (axis, values) in &grid.axes {
        let values = values
            .as_array()
            .ok_or_else(|| Error::InvalidConfig(format!("grid axis {axis} must be a list")))?;
        let mut next = Vec::new();
        for (name, cfg) in &cells {
            for v in values {
                let mut c = cfg.clone();
                set_path(&mut c, axis, v.clone())?;
                let tag = format!("{axis}={}", v.to_string().trim_matches('"'));
                next.push((if name.is_empty() { tag } else { format!("{name},{tag}") }, c));
            }
        }
        cells = next;
    }

    fs::create_dir_all(&grid.out).map_err(|e| Error::Io {
        path: grid.out.clone(),
        source: e,
    })?;
    let combined_path = grid.out.join("metrics.csv");
    let mut combined = csv::Writer::from_path(&combined_path)?;
    let mut exhausted = false;
    for (i, (name, value)) in cells.into_iter().enumerate() {
        let mut cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::InvalidConfig(format!("cell {name}: {e}")))?;
        cfg.label = Some(name.clone());
        log::info!("cell {i}: {name}");
        let result = run_experiment(&cfg)?;
        write_outputs(&grid.out.join(format!("cell{i:03}")), &result)?;
        write_metrics(&mut combined, &result.runs)?;
        summarize(&result);
        exhausted |= result.any_exhausted();
    }
    combined.flush().map_err(|e| Error::Io {
        path: combined_path,
        source: e,
    })?;
    Ok(exhausted)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config, out } => cmd_run(config, out),
        Command::GenWorld { spec, out } => cmd_gen_world(spec, out),
        Command::Eval { run } => cmd_eval(run),
        Command::Sweep { grid } => cmd_sweep(grid),
    };
    match outcome {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("warning: a run was truncated by pool exhaustion");
            ExitCode::from(EXIT_TRUNCATED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::InvalidSpec(_) | Error::Json(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_FAILURE),
            }
        }
    }
}
