//! The `ekd` command line.
//!
//! Every [`RunConfig`] key is also a `--key value` flag (underscores or
//! dashes), applied on top of `--config`. Unknown subcommands and flags print
//! usage and exit 2; runtime failures print the error chain and exit 1.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{value_parser, Arg, ArgMatches, Command};

use crate::data::{load_csv, write_labeled_csv, write_unlabeled_csv, CsvSchema};
use crate::error::{Error, Result};
use crate::experiment::{
    ablation_data_sources, ablation_weighting, accuracy, build_workbench, compare, full_ordering_holds,
    prepare_data, student_seed, sweep_lambda, train_method, train_teachers, ExperimentReport, LossRecord,
    MethodId, ReportEntry, TrainSettings, TrainedModel, Workbench,
};
use crate::persistence::{create_run_dir, load_checkpoint, save_checkpoint, RunConfig};

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .value_parser(value_parser!(PathBuf))
            .help("Run configuration (TOML, or JSON by extension)"),
    );
    RunConfig::keys().into_iter().fold(cmd, |cmd, key| {
        let dashed = key.replace('_', "-");
        let mut arg = Arg::new(key.clone())
            .long(key)
            .value_name("VALUE")
            .help_heading("Config overrides");
        if dashed.contains('-') {
            arg = arg.alias(dashed);
        }
        cmd.arg(arg)
    })
}

pub fn command() -> Command {
    Command::new("ekd")
        .about("Ensemble knowledge distillation on labeled and unlabeled data")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(Command::new("gen-data").about("Write the data partitions as CSV")))
        .subcommand(config_args(Command::new("train-teachers").about("Train the teacher ensemble and save checkpoints")))
        .subcommand(config_args(
            Command::new("distill").about("Distill one student").arg(
                Arg::new("method")
                    .long("method")
                    .value_name("METHOD")
                    .default_value("unikd")
                    .help("kd_labeled, kd_unlabeled or unikd"),
            ),
        ))
        .subcommand(config_args(
            Command::new("evaluate")
                .about("Test accuracy of a saved checkpoint")
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("PATH")
                        .required(true)
                        .value_parser(value_parser!(PathBuf)),
                )
                .arg(
                    Arg::new("data")
                        .long("data")
                        .value_name("CSV")
                        .value_parser(value_parser!(PathBuf))
                        .help("Labeled CSV; defaults to the configured test set"),
                ),
        ))
        .subcommand(config_args(Command::new("compare").about("Compare single, ensemble and the distillation methods")))
        .subcommand(config_args(Command::new("ablate").about("Data-source and weighting ablations")))
        .subcommand(config_args(
            Command::new("sweep").about("Accuracy over a λ grid (`--lambda 0,10` sets the grid)"),
        ))
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            1
        }
    }
}

fn resolve_config(name: &str, m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for key in RunConfig::keys() {
        if let Some(raw) = m.get_one::<String>(&key) {
            let target = if name == "sweep" && key == "lambda" { "lambdas" } else { key.as_str() };
            cfg.apply_override(target, raw)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(name: &str, m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(name, m)?;
    if name == "evaluate" {
        return evaluate(&cfg, m);
    }
    let dir = create_run_dir(&cfg.output_dir, cfg.seed)?;
    println!("run directory: {}", dir.display());
    write_json(&dir.join("config.json"), &serde_json::to_value(&cfg)?)?;
    match name {
        "gen-data" => gen_data(&cfg, &dir),
        "train-teachers" => {
            let (split, rows) = prepare_data(&cfg)?;
            let teachers = train_teachers(
                &cfg.architecture(),
                &rows,
                cfg.n_teachers,
                &TrainSettings::teacher(&cfg),
                cfg.seed,
                cfg.eps_log,
            )?;
            save_teachers(&dir, &teachers)?;
            println!("{:>7}  {:>12}  {:>10}", "teacher", "train loss", "test acc");
            for (i, t) in teachers.iter().enumerate() {
                let acc = accuracy(&t.params, &split.test)?;
                println!("{i:>7}  {:>12.6}  {:>9.2}%", t.final_train_loss, 100.0 * acc);
            }
            Ok(())
        }
        "distill" => {
            let method: MethodId = m.get_one::<String>("method").expect("has default").parse()?;
            if !method.is_distillation() {
                return Err(Error::UnknownMethod(format!("{method} does not train a student")));
            }
            let wb = workbench(&cfg, &dir)?;
            distill(&cfg, &wb, method, &dir)
        }
        "compare" => {
            let wb = workbench(&cfg, &dir)?;
            let seeds = wb.student_seeds(cfg.n_seeds);
            let report = compare(&wb, &cfg.distill_config(), &TrainSettings::student(&cfg), &seeds)?;
            print!("{}", report.table());
            println!("full ordering single < kd_labeled < kd_unlabeled < unikd <= ensemble: {}", full_ordering_holds(&report));
            write_report(&dir, "report", &report, &cfg)
        }
        "ablate" => {
            let wb = workbench(&cfg, &dir)?;
            let seeds = wb.student_seeds(cfg.n_seeds);
            let (dc, s) = (cfg.distill_config(), TrainSettings::student(&cfg));
            let sources = ablation_data_sources(&wb, &dc, &s, &seeds)?;
            println!("data sources");
            print!("{}", sources.table());
            write_report(&dir, "ablation_data_sources", &sources, &cfg)?;
            let weighting = ablation_weighting(&wb, &dc, &s, &seeds)?;
            println!("weighting");
            print!("{}", weighting.table());
            write_report(&dir, "ablation_weighting", &weighting, &cfg)
        }
        "sweep" => {
            let wb = workbench(&cfg, &dir)?;
            let seeds = wb.student_seeds(cfg.n_seeds);
            let report = sweep_lambda(&wb, &cfg.distill_config(), &TrainSettings::student(&cfg), &cfg.lambdas, &seeds)?;
            print!("{}", report.table());
            write_report(&dir, "report", &report, &cfg)
        }
        other => Err(Error::Config(format!("unhandled subcommand `{other}`"))),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(format!("cannot write {}", path.display()), e))
}

fn write_report(dir: &Path, stem: &str, report: &ExperimentReport, cfg: &RunConfig) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(format!("cannot write {}", csv.display()), e))?;
    write_json(&dir.join(format!("{stem}.json")), &report.to_json(cfg))?;
    println!("wrote {}", csv.display());
    Ok(())
}

fn save_teachers(dir: &Path, teachers: &[TrainedModel]) -> Result<()> {
    let tdir = dir.join("teachers");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(format!("cannot create {}", tdir.display()), e))?;
    for (i, t) in teachers.iter().enumerate() {
        save_checkpoint(tdir.join(format!("teacher_{i}.json")), &t.checkpoint())?;
    }
    Ok(())
}

fn workbench(cfg: &RunConfig, dir: &Path) -> Result<Workbench> {
    let wb = build_workbench(cfg)?;
    save_teachers(dir, &wb.teachers)?;
    Ok(wb)
}

fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let (split, _) = prepare_data(cfg)?;
    write_labeled_csv(dir.join("labeled_train.csv"), &split.labeled_train)?;
    write_unlabeled_csv(dir.join("unlabeled_train.csv"), &split.unlabeled_train)?;
    write_labeled_csv(dir.join("validation.csv"), &split.validation)?;
    write_labeled_csv(dir.join("test.csv"), &split.test)?;
    println!(
        "labeled {}, unlabeled {}, validation {}, test {}",
        split.labeled_train.len(),
        split.unlabeled_train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(())
}

fn distill(cfg: &RunConfig, wb: &Workbench, method: MethodId, dir: &Path) -> Result<()> {
    let seed = student_seed(cfg.seed, 0);
    let settings = TrainSettings::student(cfg);
    let student = if cfg.verbose_log {
        let path = dir.join("loss_log.jsonl");
        let file = fs::File::create(&path).map_err(|e| Error::io(format!("cannot create {}", path.display()), e))?;
        let mut out = BufWriter::new(file);
        let mut sink = |r: &LossRecord<'_>| -> Result<()> {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io("cannot write loss log", e))
        };
        let student = train_method(method, wb, &cfg.distill_config(), &settings, seed, Some(&mut sink))?;
        out.flush().map_err(|e| Error::io("cannot write loss log", e))?;
        student
    } else {
        train_method(method, wb, &cfg.distill_config(), &settings, seed, None)?
    };
    save_checkpoint(dir.join("student.json"), &student.checkpoint())?;
    let acc = accuracy(&student.params, &wb.data.test)?;
    println!("{method} student: final train loss {:.6}, test accuracy {:.2}%", student.final_train_loss, 100.0 * acc);
    let report = ExperimentReport::new(
        "distill",
        cfg.seed,
        vec![ReportEntry {
            method: method.to_string(),
            seed,
            lambda: None,
            accuracy: acc,
        }],
    );
    write_report(dir, "report", &report, cfg)
}

fn evaluate(cfg: &RunConfig, m: &ArgMatches) -> Result<()> {
    let path = m.get_one::<PathBuf>("checkpoint").expect("required");
    let params = load_checkpoint(path)?.to_parameters()?;
    let rows = match m.get_one::<PathBuf>("data") {
        Some(csv) => load_csv(csv, &CsvSchema::default())?,
        None => prepare_data(cfg)?.0.test,
    };
    let acc = accuracy(&params, &rows)?;
    println!("accuracy {:.4} ({} rows)", acc, rows.len());
    Ok(())
}
