//! `pfnet`: build, inspect, cost, benchmark, train and sweep networks
//! built from parameter-free spatial operations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pfnet_core::arch::{
    build_pit_like, build_resnet, build_vit, EffLayout, ResnetDepth, ResnetOptions, StagePattern,
    VitConfig,
};
use pfnet_core::harness::bench::run_manifest;
use pfnet_core::harness::sweep::{grid_to_csv, single_bottleneck_grid, sweep_rows_to_csv};
use pfnet_core::harness::{
    bench, load_cifar10, sweep, synth, train, BenchConfig, BenchResult, Dataset, LrSchedule,
    SweepConfig, SweepMode, SynthKind, ThreadMode, TrainConfig,
};
use pfnet_core::{cost, gradcheck, ArchSpec, Error, Network, SpatialOp};

#[derive(Parser)]
#[command(name = "pfnet", version, about = "parameter-free network workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand that needs an architecture.
#[derive(Args, Clone)]
struct SpecArgs {
    /// Architecture file produced by `pfnet build`.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Preset name: r26 | r50 | r101 | wrn50_2 | wrn101_2 | vit_s_like | pit_like.
    #[arg(long)]
    preset: Option<String>,
    /// Stage pattern for ResNet presets: a string over {B,E}, "E/B" or "hybrid".
    #[arg(long)]
    pattern: Option<String>,
    /// Layout for ViT presets: none | alternate | all.
    #[arg(long)]
    layout: Option<String>,
    /// Operator used in substituted (E) blocks.
    #[arg(long, default_value = "maxpool3")]
    spatial: String,
    /// Operator used in regular (B) blocks.
    #[arg(long, default_value = "conv3x3")]
    b_spatial: String,
    /// Attach squeeze-excitation to every bottleneck.
    #[arg(long)]
    se: bool,
    /// Classifier classes (presets only).
    #[arg(long)]
    classes: Option<usize>,
    /// Overrides on declared architecture fields, e.g. --set input=160.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl SpecArgs {
    fn resolve(&self) -> Result<ArchSpec, Error> {
        let mut spec = match (&self.spec, &self.preset) {
            (Some(path), None) => ArchSpec::from_text(&std::fs::read_to_string(path)?)?,
            (None, Some(preset)) => self.build_preset(preset)?,
            (Some(_), Some(_)) => {
                return Err(Error::Usage("--spec and --preset are exclusive".into()))
            }
            (None, None) => {
                return Err(Error::Usage(
                    "an architecture is required: pass --spec FILE or --preset NAME".into(),
                ))
            }
        };
        for kv in &self.sets {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            match key {
                "input" => {
                    let side: usize = value
                        .parse()
                        .map_err(|_| Error::Usage(format!("bad input side '{value}'")))?;
                    spec.input = (spec.input.0, side, side);
                }
                "classes" => {
                    let classes: usize = value
                        .parse()
                        .map_err(|_| Error::Usage(format!("bad class count '{value}'")))?;
                    spec.head = pfnet_core::HeadSpec::GapLinear { classes };
                }
                "name" => spec.name = value.to_string(),
                other => {
                    return Err(Error::Usage(format!(
                        "unknown --set field '{other}' (known: input, classes, name)"
                    )))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    fn build_preset(&self, preset: &str) -> Result<ArchSpec, Error> {
        let classes = self.classes;
        match preset {
            "r26" | "r50" | "r101" | "wrn50_2" | "wrn101_2" => {
                let depth = ResnetDepth::parse(preset)?;
                let pattern = StagePattern::parse(self.pattern.as_deref().unwrap_or("BBBB"))?;
                let opts = ResnetOptions {
                    e_op: SpatialOp::parse(&self.spatial)?,
                    b_op: SpatialOp::parse(&self.b_spatial)?,
                    use_se: self.se,
                    classes: classes.unwrap_or(if preset == "r26" { 10 } else { 1000 }),
                };
                build_resnet(depth, &pattern, &opts)
            }
            "vit_s_like" => {
                let layout = EffLayout::parse(self.layout.as_deref().unwrap_or("none"))?;
                let mut cfg = VitConfig::vit_s_like();
                if let Some(c) = classes {
                    cfg.classes = c;
                }
                build_vit(&cfg, layout)
            }
            "pit_like" => {
                let layout = EffLayout::parse(self.layout.as_deref().unwrap_or("none"))?;
                build_pit_like(layout, classes.unwrap_or(1000))
            }
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (known: r26, r50, r101, wrn50_2, wrn101_2, vit_s_like, pit_like)"
            ))),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalize an architecture into a spec file.
    Build {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the per-layer table.
    Describe {
        #[command(flatten)]
        spec: SpecArgs,
        /// Square input side override.
        #[arg(long)]
        input: Option<usize>,
    },
    /// Parameter and multiply-add counts.
    Count {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        input: Option<usize>,
        /// Write the per-layer breakdown as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the breakdown as a JSON document.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Per-layer cost deltas between two architectures.
    Diff {
        /// First spec file.
        #[arg(long)]
        spec_a: Option<PathBuf>,
        /// Second spec file.
        #[arg(long)]
        spec_b: Option<PathBuf>,
        /// Preset used for both sides (with --pattern-a/--pattern-b).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        pattern_a: Option<String>,
        #[arg(long)]
        pattern_b: Option<String>,
        #[arg(long)]
        input: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latency micro-benchmark of inference forwards.
    Bench {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// Worker threads; 1 = pinned single-thread mode. PFNET_THREADS
        /// overrides.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        input: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on CIFAR-10 or a synthetic dataset.
    Train {
        #[command(flatten)]
        spec: SpecArgs,
        /// Dataset: "synth:blobs:N" | "synth:stripes:N" | "synth:checker:N"
        /// | "cifar:DIR[:SUBSET]".
        #[arg(long)]
        data: String,
        /// Training preset: desk | paper90 | paperlong.
        #[arg(long, default_value = "desk")]
        train_preset: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        label_smoothing: Option<f32>,
        #[arg(long)]
        weight_decay: Option<f32>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Request an augmentation (none are supported; errors clearly).
        #[arg(long)]
        augment: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Save final parameters as a checkpoint.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Exhaustive block-replacement sweep or the single-bottleneck grid.
    Sweep {
        #[command(flatten)]
        spec: SpecArgs,
        /// Candidate operators, comma separated.
        #[arg(long, default_value = "conv3x3,maxpool3")]
        ops: String,
        /// bench | train.
        #[arg(long, default_value = "bench")]
        mode: String,
        /// Maximum number of specs evaluated.
        #[arg(long)]
        budget: Option<usize>,
        /// Run the single-bottleneck expansion grid instead of the
        /// replacement sweep.
        #[arg(long)]
        grid: bool,
        /// Widths for the grid study.
        #[arg(long, default_value = "32,64")]
        widths: String,
        /// Dataset for train mode (same syntax as `train --data`).
        #[arg(long)]
        data: Option<String>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long)]
        input: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full op-level gradient suite and print max errors.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn parse_dataset(arg: &str, seed: u64) -> Result<Dataset, Error> {
    let parts: Vec<&str> = arg.split(':').collect();
    match parts.as_slice() {
        ["synth", kind, n] => {
            let kind = SynthKind::parse(kind)?;
            let n: usize = n
                .parse()
                .map_err(|_| Error::Usage(format!("bad synth size '{n}'")))?;
            Ok(synth(kind, n, seed))
        }
        ["cifar", dir] => Ok(load_cifar10(Path::new(dir))?.0),
        ["cifar", dir, subset] => {
            let n: usize = subset
                .parse()
                .map_err(|_| Error::Usage(format!("bad subset size '{subset}'")))?;
            let (train_set, _) = load_cifar10(Path::new(dir))?;
            let idx: Vec<usize> = (0..n.min(train_set.len())).collect();
            train_set.subset(&idx, "train-subset")
        }
        _ => Err(Error::Usage(format!(
            "bad --data '{arg}'; expected synth:KIND:N or cifar:DIR[:SUBSET]"
        ))),
    }
}

fn thread_mode(requested: usize) -> ThreadMode {
    let n = std::env::var("PFNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(requested);
    if n <= 1 {
        ThreadMode::Single
    } else {
        ThreadMode::Multi(n)
    }
}

fn write_or_print(
    out: &Option<PathBuf>,
    contents: &str,
    manifest: Option<&str>,
) -> Result<(), Error> {
    match out {
        Some(path) => {
            std::fs::write(path, contents)?;
            if let Some(m) = manifest {
                let mut mpath = path.as_os_str().to_owned();
                mpath.push(".manifest");
                std::fs::write(PathBuf::from(mpath), m)?;
            }
        }
        None => {
            print!("{contents}");
            if let Some(m) = manifest {
                print!("--- manifest ---\n{m}");
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Build { spec, out } => {
            let spec = spec.resolve()?;
            std::fs::write(&out, spec.to_text())?;
            println!("wrote {} ({} blocks)", out.display(), spec.block_count());
        }
        Command::Describe { spec, input } => {
            let spec = spec.resolve()?;
            print!("{}", cost::describe(&spec, input)?);
        }
        Command::Count {
            spec,
            input,
            csv,
            json,
        } => {
            let spec = spec.resolve()?;
            let report = cost::count(&spec, input)?;
            println!(
                "{} @ {}x{}: {:.1}M / {:.1}G ({} params, {} macs)",
                report.arch,
                report.input.1,
                report.input.2,
                report.params_m(),
                report.macs_g(),
                report.params,
                report.macs
            );
            if let Some(path) = csv {
                std::fs::write(path, report.to_csv())?;
            }
            if let Some(path) = json {
                std::fs::write(path, report.to_json())?;
            }
        }
        Command::Diff {
            spec_a,
            spec_b,
            preset,
            pattern_a,
            pattern_b,
            input,
            out,
        } => {
            let load = |path: &PathBuf| -> Result<ArchSpec, Error> {
                ArchSpec::from_text(&std::fs::read_to_string(path)?)
            };
            let (a, b) = match (&spec_a, &spec_b, &preset) {
                (Some(a), Some(b), None) => (load(a)?, load(b)?),
                (None, None, Some(p)) => {
                    let mk = |pattern: &Option<String>| -> Result<ArchSpec, Error> {
                        let args = SpecArgs {
                            spec: None,
                            preset: Some(p.clone()),
                            pattern: pattern.clone(),
                            layout: None,
                            spatial: "maxpool3".into(),
                            b_spatial: "conv3x3".into(),
                            se: false,
                            classes: None,
                            sets: vec![],
                        };
                        args.resolve()
                    };
                    (mk(&pattern_a)?, mk(&pattern_b)?)
                }
                _ => {
                    return Err(Error::Usage(
                        "diff needs either --spec-a/--spec-b or --preset with --pattern-a/--pattern-b"
                            .into(),
                    ))
                }
            };
            let diff = cost::count_diff(&a, &b, input)?;
            println!(
                "{} -> {}: params {:.1}M -> {:.1}M ({:+.1}%), macs {:.1}G -> {:.1}G ({:+.1}%)",
                diff.a.arch,
                diff.b.arch,
                diff.a.params_m(),
                diff.b.params_m(),
                -diff.params_reduction_pct(),
                diff.a.macs_g(),
                diff.b.macs_g(),
                -diff.macs_reduction_pct()
            );
            write_or_print(&out, &diff.to_csv(), None)?;
        }
        Command::Bench {
            spec,
            batch,
            reps,
            warmup,
            threads,
            input,
            seed,
            out,
        } => {
            let spec = spec.resolve()?;
            let cfg = BenchConfig {
                batch,
                reps,
                warmup,
                threads: thread_mode(threads),
                seed,
                input_side: input,
                ..BenchConfig::default()
            };
            let result = bench(&spec, &cfg)?;
            println!(
                "{}: median {:.3} ms (p10 {:.3}, p90 {:.3}) batch {} reps {}",
                result.arch, result.median_ms, result.p10_ms, result.p90_ms, batch, reps
            );
            let csv = format!("{}\n{}\n", BenchResult::CSV_HEADER, result.to_csv_row());
            let manifest = run_manifest(
                &spec.name,
                spec.hash(),
                seed,
                &cfg.threads,
                &[
                    ("batch", batch.to_string()),
                    ("reps", reps.to_string()),
                    ("warmup", warmup.to_string()),
                ],
            );
            write_or_print(&out, &csv, Some(&manifest))?;
        }
        Command::Train {
            spec,
            data,
            train_preset,
            epochs,
            batch,
            lr,
            schedule,
            label_smoothing,
            weight_decay,
            steps,
            augment,
            seed,
            out,
            save,
        } => {
            let spec = spec.resolve()?;
            let mut cfg = TrainConfig::preset(&train_preset)?;
            cfg.seed = seed;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(b) = batch {
                cfg.batch_size = b;
            }
            if let Some(l) = lr {
                cfg.lr = l;
            }
            if let Some(s) = &schedule {
                cfg.schedule = match s.as_str() {
                    "step" => LrSchedule::Step,
                    "cosine" => LrSchedule::Cosine,
                    other => return Err(Error::Usage(format!("unknown schedule '{other}'"))),
                };
            }
            if let Some(ls) = label_smoothing {
                cfg.label_smoothing = ls;
            }
            if let Some(wd) = weight_decay {
                cfg.weight_decay = wd;
            }
            cfg.max_steps = steps;
            cfg.augment = augment;
            let dataset = parse_dataset(&data, seed)?;
            let mut net = Network::build(&spec, seed)?;
            let report = train(&mut net, &dataset, &cfg)?;
            println!(
                "trained {} for {} steps: final loss {:.4}, train accuracy {:.2}%",
                spec.name,
                report.steps,
                report.epoch_losses.last().copied().unwrap_or(f32::NAN),
                report.final_accuracy * 100.0
            );
            let manifest = run_manifest(
                &spec.name,
                spec.hash(),
                seed,
                &ThreadMode::Single,
                &[
                    ("dataset", dataset.split.clone()),
                    ("epochs", cfg.epochs.to_string()),
                    ("batch", cfg.batch_size.to_string()),
                    ("lr", cfg.lr.to_string()),
                ],
            );
            write_or_print(&out, &report.to_csv(), Some(&manifest))?;
            if let Some(path) = save {
                net.save(&path)?;
                println!("saved checkpoint to {}", path.display());
            }
        }
        Command::Sweep {
            spec,
            ops,
            mode,
            budget,
            grid,
            widths,
            data,
            threads,
            seed,
            reps,
            input,
            epochs,
            out,
        } => {
            let mut train_cfg = TrainConfig::desk();
            train_cfg.seed = seed;
            train_cfg.epochs = epochs.unwrap_or(3);
            let manifest_extra: Vec<(&str, String)>;
            let csv;
            let name;
            let hash;
            if grid {
                let widths: Vec<usize> = widths
                    .split(',')
                    .map(|w| {
                        w.trim()
                            .parse()
                            .map_err(|_| Error::Usage(format!("bad width '{w}'")))
                    })
                    .collect::<Result<_, _>>()?;
                let dataset =
                    parse_dataset(data.as_deref().unwrap_or("synth:checker:2000"), seed)?;
                let n = dataset.len();
                let (train_set, eval_set) = dataset.split_at(n * 4 / 5)?;
                let rows = single_bottleneck_grid(&widths, &train_set, &eval_set, &train_cfg)?;
                csv = grid_to_csv(&rows);
                name = "single-bottleneck-grid".to_string();
                hash = 0;
                manifest_extra = vec![("widths", format!("{widths:?}")), ("mode", "grid".into())];
            } else {
                let base = spec.resolve()?;
                let ops: Vec<SpatialOp> = ops
                    .split(',')
                    .map(|o| SpatialOp::parse(o.trim()))
                    .collect::<Result<_, _>>()?;
                let mode = match mode.as_str() {
                    "bench" => SweepMode::Bench,
                    "train" => SweepMode::Train,
                    other => return Err(Error::Usage(format!("unknown sweep mode '{other}'"))),
                };
                let dataset = match mode {
                    SweepMode::Train => Some(parse_dataset(
                        data.as_deref().unwrap_or("synth:checker:2000"),
                        seed,
                    )?),
                    SweepMode::Bench => None,
                };
                let cfg = SweepConfig {
                    mode,
                    budget,
                    bench: BenchConfig {
                        reps,
                        threads: thread_mode(threads),
                        seed,
                        input_side: input,
                        ..BenchConfig::default()
                    },
                    train: train_cfg,
                };
                let (rows, complete) = sweep(&base, &ops, dataset.as_ref(), &cfg)?;
                println!(
                    "swept {} assignments{}",
                    rows.len(),
                    if complete { "" } else { " (incomplete)" }
                );
                csv = sweep_rows_to_csv(&rows, complete);
                name = base.name.clone();
                hash = base.hash();
                manifest_extra = vec![
                    ("mode", format!("{mode:?}").to_lowercase()),
                    ("complete", complete.to_string()),
                ];
            }
            let manifest = run_manifest(&name, hash, seed, &thread_mode(threads), &manifest_extra);
            write_or_print(&out, &csv, Some(&manifest))?;
        }
        Command::Gradcheck { seed } => {
            let entries = gradcheck::gradcheck_suite(seed)?;
            let mut failed = 0usize;
            for e in &entries {
                println!(
                    "{:<40} max_error {:>10.3e}  tol {:>7.0e}  {}{}",
                    e.name,
                    e.max_error,
                    e.tolerance,
                    if e.passed() { "ok" } else { "FAIL" },
                    if e.resampled { " (resampled)" } else { "" }
                );
                if !e.passed() {
                    failed += 1;
                }
            }
            println!("{} checks, {} failed", entries.len(), failed);
            if failed > 0 {
                return Err(Error::Numeric(format!(
                    "{failed} gradient checks over tolerance"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
