//! Command-line driver: parse specs, check legality, dump IR, export graphs,
//! simulate, and verify, including the bundled example programs.
//!
//! Exit codes: 0 pass, 1 verification fail, 2 legality error, 3 deadlock,
//! 4 usage error.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use systolic::error::SimError;
use systolic::externs::Registry;
use systolic::ir::check_assumptions;
use systolic::layout::{infer_channel_depths, instantiate_pes, ScheduledProgram};
use systolic::parse::parse_spec;
use systolic::schedule::static_legality_check;
use systolic::sim::RunConfig;
use systolic::value::{Binding, Bound, ElemType, Scalar, Tensor};
use systolic::verify::{differential_check, CheckOptions};

#[derive(Parser)]
#[command(
    name = "systolic",
    version,
    about = "Loop-nest to spatial-dataflow compiler kit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct BindArgs {
    /// Scalar bindings, e.g. --bind I=8 --bind II=4
    #[arg(long = "bind", value_name = "NAME=VALUE")]
    bind: Vec<String>,
    /// JSON tensor inputs: {"A": {"dtype": "float", "shape": [2,2], "data": [..]}}
    #[arg(long, value_name = "FILE")]
    inputs: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Static legality diagnostics and assumption guards for a spec.
    Check {
        spec: PathBuf,
        #[command(flatten)]
        bind: BindArgs,
    },
    /// Lower and print each function's loop nest after its schedule.
    Lower {
        spec: PathBuf,
        /// Print the transformed IR (default behavior; kept for scripts).
        #[arg(long)]
        dump_ir: bool,
        /// Only this function.
        #[arg(long)]
        func: Option<String>,
    },
    /// Export the instantiated PE graph.
    Graph {
        spec: PathBuf,
        #[arg(long, conflicts_with = "json")]
        dot: bool,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        bind: BindArgs,
    },
    /// Simulate the spatial graph and print outputs.
    Sim {
        spec: PathBuf,
        #[command(flatten)]
        bind: BindArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the trace (channel stats, fire counts) as JSON.
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
    },
    /// Differential verification against the reference interpreter.
    Verify {
        spec: PathBuf,
        #[command(flatten)]
        bind: BindArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a bundled example end to end.
    Examples {
        #[command(subcommand)]
        cmd: ExampleCmd,
    },
}

#[derive(Subcommand)]
enum ExampleCmd {
    /// List bundled example names.
    List,
    /// Print the spec of a bundled example.
    Show { name: String },
    /// Verify a bundled example with default bindings and random inputs.
    Run {
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the graph in DOT instead of verifying.
        #[arg(long)]
        dot: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(4)
        }
    }
}

fn parse_binding(args: &BindArgs) -> Result<Binding, String> {
    let mut b = Binding::new();
    for spec in &args.bind {
        let (name, value) = spec
            .split_once('=')
            .ok_or_else(|| format!("bad --bind `{spec}`, expected NAME=VALUE"))?;
        if let Ok(v) = value.parse::<i64>() {
            b.set_scalar(name, v);
        } else if let Ok(v) = value.parse::<f64>() {
            b.set_float(name, v);
        } else {
            return Err(format!("bad --bind value `{value}`"));
        }
    }
    if let Some(path) = &args.inputs {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let parsed: BTreeMap<String, TensorFile> =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        for (name, t) in parsed {
            b.values.insert(name, Bound::Tensor(t.into_tensor()?));
        }
    }
    Ok(b)
}

#[derive(serde::Deserialize)]
struct TensorFile {
    dtype: String,
    shape: Vec<usize>,
    #[serde(default)]
    origin: Option<Vec<i64>>,
    data: Vec<f64>,
}

impl TensorFile {
    fn into_tensor(self) -> Result<Tensor, String> {
        let n: usize = self.shape.iter().product();
        if self.data.len() != n {
            return Err(format!(
                "tensor data has {} values, shape needs {n}",
                self.data.len()
            ));
        }
        let elem = match self.dtype.as_str() {
            "int" => ElemType::Int,
            "float" => ElemType::Float,
            other => return Err(format!("unknown dtype `{other}`")),
        };
        let origin = self.origin.unwrap_or_else(|| vec![0; self.shape.len()]);
        let data = self
            .data
            .into_iter()
            .map(|v| match elem {
                ElemType::Int => Scalar::Int(v as i64),
                ElemType::Float => Scalar::Float(v),
            })
            .collect();
        Ok(Tensor {
            elem,
            origin,
            shape: self.shape,
            data,
        })
    }
}

fn load_spec(
    path: &PathBuf,
) -> Result<(systolic::ir::Program, systolic::schedule::Schedule), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_spec(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    let registry = Registry::with_builtins();
    match cli.command {
        Command::Check { spec, bind } => {
            let (program, schedule) = load_spec(&spec)?;
            let diags = static_legality_check(&program, &schedule);
            for d in &diags {
                println!("diagnostic: {d}");
            }
            let binding = parse_binding(&bind)?;
            if !binding.values.is_empty() {
                let report = check_assumptions(&program, &binding);
                for (name, ok, detail) in &report.entries {
                    println!(
                        "assumption {}: {} ({detail})",
                        name,
                        if *ok { "pass" } else { "FAIL" }
                    );
                }
                if !report.all_pass() {
                    return Ok(ExitCode::from(2));
                }
            } else {
                for g in systolic::verify::emit_runtime_guards(&program) {
                    println!("guard: {}", g.text);
                }
            }
            if diags.is_empty() {
                println!("ok: no diagnostics");
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(2))
            }
        }
        Command::Lower {
            spec,
            dump_ir: _,
            func,
        } => {
            let (program, schedule) = load_spec(&spec)?;
            let sp = ScheduledProgram::build(&program, &schedule).map_err(|e| e.to_string())?;
            for f in &sp.program.funcs {
                if let Some(only) = &func {
                    if *only != f.name {
                        continue;
                    }
                }
                if let Some(st) = sp.funcs.get(&f.name) {
                    if let Some(nest) = &st.nest {
                        println!("== {} ==", f.name);
                        print!("{}", nest.dump());
                        println!();
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Graph {
            spec,
            dot,
            json,
            bind,
        } => {
            let (program, schedule) = load_spec(&spec)?;
            let binding = parse_binding(&bind)?;
            let sp = ScheduledProgram::build(&program, &schedule).map_err(|e| e.to_string())?;
            let graph = instantiate_pes(&sp, &binding, &registry).map_err(|e| e.to_string())?;
            let graph = infer_channel_depths(&graph, &registry).map_err(|e| e.to_string())?;
            if json && !dot {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&systolic::layout::to_json(&graph)).unwrap()
                );
            } else {
                print!("{}", systolic::layout::to_dot(&graph));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sim {
            spec,
            bind,
            seed,
            trace,
        } => {
            let (program, schedule) = load_spec(&spec)?;
            let binding = parse_binding(&bind)?;
            let sp = ScheduledProgram::build(&program, &schedule).map_err(|e| e.to_string())?;
            let graph = instantiate_pes(&sp, &binding, &registry).map_err(|e| e.to_string())?;
            let graph = infer_channel_depths(&graph, &registry).map_err(|e| e.to_string())?;
            let cfg = RunConfig {
                seed,
                record_trace: trace.is_some(),
                ..RunConfig::default()
            };
            match systolic::sim::run(&graph, &registry, &cfg) {
                Ok((outputs, tr)) => {
                    for (name, t) in &outputs.outputs {
                        println!("{name}: origin {:?} shape {:?}", t.origin, t.shape);
                        let vals: Vec<String> = t.data.iter().map(|v| v.to_string()).collect();
                        println!("  [{}]", vals.join(", "));
                    }
                    println!(
                        "steps: {}, fires: {}",
                        tr.steps,
                        tr.pe_fires.iter().sum::<u64>()
                    );
                    if let Some(path) = trace {
                        std::fs::write(&path, serde_json::to_string_pretty(&tr.to_json()).unwrap())
                            .map_err(|e| format!("{}: {e}", path.display()))?;
                        println!("trace written to {}", path.display());
                    }
                    Ok(ExitCode::SUCCESS)
                }
                Err(SimError::Deadlock(rep)) => {
                    eprintln!("deadlock: {rep}");
                    Ok(ExitCode::from(3))
                }
                Err(e) => Err(e.to_string()),
            }
        }
        Command::Verify { spec, bind, seed } => {
            let (program, schedule) = load_spec(&spec)?;
            let binding = parse_binding(&bind)?;
            let opts = CheckOptions {
                seed,
                ..CheckOptions::default()
            };
            let report = differential_check(&program, &schedule, &binding, &registry, &opts);
            print!("{}", report.render());
            Ok(exit_for_report(&report))
        }
        Command::Examples { cmd } => match cmd {
            ExampleCmd::List => {
                for n in systolic::examples::NAMES {
                    println!("{n}");
                }
                Ok(ExitCode::SUCCESS)
            }
            ExampleCmd::Show { name } => match systolic::examples::spec_text(&name) {
                Some(t) => {
                    print!("{t}");
                    Ok(ExitCode::SUCCESS)
                }
                None => Err(format!("unknown example `{name}`")),
            },
            ExampleCmd::Run { name, seed, dot } => {
                let (program, schedule) =
                    systolic::examples::load(&name).map_err(|e| e.to_string())?;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let binding = systolic::examples::default_binding(&name, &mut rng)
                    .ok_or_else(|| format!("unknown example `{name}`"))?;
                if dot {
                    let sp =
                        ScheduledProgram::build(&program, &schedule).map_err(|e| e.to_string())?;
                    let graph =
                        instantiate_pes(&sp, &binding, &registry).map_err(|e| e.to_string())?;
                    let graph =
                        infer_channel_depths(&graph, &registry).map_err(|e| e.to_string())?;
                    print!("{}", systolic::layout::to_dot(&graph));
                    return Ok(ExitCode::SUCCESS);
                }
                let opts = CheckOptions {
                    seed,
                    ..CheckOptions::default()
                };
                let report = differential_check(&program, &schedule, &binding, &registry, &opts);
                print!("{}", report.render());
                Ok(exit_for_report(&report))
            }
        },
    }
}

fn exit_for_report(report: &systolic::verify::VerifyReport) -> ExitCode {
    if report.pass {
        return ExitCode::SUCCESS;
    }
    match &report.failure {
        Some(f) if f.contains("deadlock") => ExitCode::from(3),
        Some(f)
            if f.contains("schedule") || f.contains("instantiate") || f.contains("assumption") =>
        {
            ExitCode::from(2)
        }
        _ => ExitCode::FAILURE,
    }
}
