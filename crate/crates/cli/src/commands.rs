use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use polytax_core::data::{self, class_histogram, imbalance_factor, Dataset};
use polytax_core::netzoo::{self, build_network, count_params, millions, ArchSpec};
use polytax_core::trainer::{self, mean_std, RunReport, TrainConfig};
use polytax_core::verify::{run_suite, Suite};

use crate::{Command, CountArgs, EvalArgs, MakeDatasetArgs, ReportArgs, TrainArgs, VerifyArgs};

/// Run index written next to the per-run files.
pub const MANIFEST: &str = "manifest.csv";

pub fn manifest_header() -> &'static str {
    "tag,seed,csv,checkpoint,samples_per_class,imbalance_factor,final_train_acc,final_eval_acc"
}

type CmdResult = Result<i32, String>;

pub(crate) fn dispatch(cmd: Command, out: &mut dyn Write) -> CmdResult {
    match cmd {
        Command::Verify(a) => verify(a, out),
        Command::CountParams(a) => count(a, out),
        Command::MakeDataset(a) => make_dataset(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Report(a) => report(a, out),
    }
}

fn io(e: std::io::Error) -> String {
    e.to_string()
}

fn verify(a: VerifyArgs, out: &mut dyn Write) -> CmdResult {
    let suite: Suite = a.suite.parse().map_err(|e: polytax_core::Error| e.to_string())?;
    let checks = run_suite(suite, a.seed);
    let failed = checks.iter().filter(|c| !c.passed()).count();
    for c in &checks {
        writeln!(out, "{c}").map_err(io)?;
    }
    writeln!(out, "summary: passed={} failed={failed}", checks.len() - failed).map_err(io)?;
    Ok(if failed == 0 { 0 } else { 1 })
}

/// A builtin name or a descriptor file.
fn resolve_arch(arch: &str) -> Result<ArchSpec, String> {
    let path = Path::new(arch);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read {arch}: {e}"))?;
        let mut spec = netzoo::parse_arch(&text).map_err(|e| format!("{arch}: {e}"))?;
        if spec.name == "custom" {
            spec.name = path
                .file_stem()
                .map_or("custom".into(), |s| s.to_string_lossy().into_owned());
        }
        return Ok(spec);
    }
    if netzoo::builtin(arch).is_none() {
        return Err(format!(
            "unknown architecture {arch:?}: not a file and not one of {} or the pdcN-dD-wW / pinetN-dD-wW / affine-dD families",
            netzoo::BUILTINS.join(", ")
        ));
    }
    netzoo::parse_arch(arch).map_err(|e| e.to_string())
}

fn count(a: CountArgs, out: &mut dyn Write) -> CmdResult {
    let spec = resolve_arch(&a.arch)?;
    let n = count_params(&spec);
    writeln!(
        out,
        "arch: {}\nparams: {n}\nparams_millions: {:.1}",
        spec.name,
        millions(n)
    )
    .map_err(io)?;
    Ok(0)
}

fn load(path: &Path) -> Result<Dataset, String> {
    data::load_dataset(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn describe(ds: &Dataset, out: &mut dyn Write) -> std::io::Result<()> {
    let counts = class_histogram(ds);
    writeln!(out, "samples: {}", ds.len())?;
    writeln!(out, "classes: {}", ds.classes())?;
    writeln!(out, "class_counts: {}", join(&counts))?;
    writeln!(out, "imbalance_factor: {}", imbalance_factor(ds))
}

fn make_dataset(a: MakeDatasetArgs, out: &mut dyn Write) -> CmdResult {
    let ds = if let Some(s) = &a.synth {
        if a.input.is_some() {
            return Err("--synth does not read --in".into());
        }
        let (d, n) = (
            usize::try_from(s[0]).map_err(|e| e.to_string())?,
            usize::try_from(s[1]).map_err(|e| e.to_string())?,
        );
        data::synth_quadratic(d, n, s[2]).map_err(|e| e.to_string())?
    } else {
        let input = a.input.as_ref().ok_or("--limit and --longtail need --in")?;
        let src = load(input)?;
        match (a.limit, a.longtail) {
            (Some(m), _) => data::subsample_per_class(&src, m, a.seed),
            (_, Some(f)) => data::longtail_resample(&src, f, a.seed),
            _ => unreachable!("clap requires one mode"),
        }
        .map_err(|e| e.to_string())?
    };
    data::save_dataset(&a.out, &ds).map_err(|e| format!("{}: {e}", a.out.display()))?;
    writeln!(out, "written: {}", a.out.display()).map_err(io)?;
    describe(&ds, out).map_err(io)?;
    Ok(0)
}

fn parse_milestones(a: &TrainArgs) -> Result<Vec<usize>, String> {
    match &a.milestones {
        None => Ok(TrainConfig::default()
            .milestones
            .into_iter()
            .filter(|&m| m < a.epochs)
            .collect()),
        Some(s) if s.trim().is_empty() => Ok(vec![]),
        Some(s) => s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad milestone {p:?}")))
            .collect(),
    }
}

fn check_inputs(spec: &ArchSpec, ds: &Dataset, what: &str) -> Result<(), String> {
    if ds.sample_shape() != spec.input.dims().as_slice() {
        return Err(format!(
            "{what} samples have shape {:?}, architecture expects {:?}",
            ds.sample_shape(),
            spec.input.dims()
        ));
    }
    if spec.classes() != Some(ds.classes()) {
        return Err(format!(
            "{what} has {} classes, architecture head has {:?}",
            ds.classes(),
            spec.classes()
        ));
    }
    Ok(())
}

struct RunOutcome {
    seed: u64,
    report: RunReport,
    csv: PathBuf,
    checkpoint: PathBuf,
}

fn run_one(
    spec: &ArchSpec,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    cfg: TrainConfig,
    dir: &Path,
    tag: &str,
) -> Result<RunOutcome, String> {
    let seed = cfg.seed;
    let mut graph = build_network(spec, seed).map_err(|e| e.to_string())?;
    let report = trainer::train(&mut graph, train_ds, eval_ds, &cfg).map_err(|e| format!("seed {seed}: {e}"))?;
    let csv = dir.join(format!("{tag}_seed{seed}.csv"));
    let checkpoint = dir.join(format!("{tag}_seed{seed}.ckpt"));
    fs::write(&csv, report.to_csv()).map_err(|e| format!("{}: {e}", csv.display()))?;
    trainer::save_checkpoint(&checkpoint, &graph).map_err(|e| format!("{}: {e}", checkpoint.display()))?;
    Ok(RunOutcome {
        seed,
        report,
        csv,
        checkpoint,
    })
}

fn sanitize(tag: &str) -> String {
    tag.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

/// Rewrites the manifest with `rows` replacing any earlier rows of the same tag and seed.
fn update_manifest(dir: &Path, rows: Vec<(String, u64, String)>) -> Result<(), String> {
    let path = dir.join(MANIFEST);
    let mut entries: BTreeMap<(String, u64), String> = BTreeMap::new();
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let mut f = line.splitn(3, ',');
            let (Some(tag), Some(seed)) = (f.next(), f.next()) else {
                return Err(format!("malformed manifest line {line:?}"));
            };
            let seed = seed.parse().map_err(|_| format!("malformed manifest line {line:?}"))?;
            entries.insert((tag.to_string(), seed), line.to_string());
        }
    }
    for (tag, seed, line) in rows {
        entries.insert((tag, seed), line);
    }
    let mut text = format!("{}\n", manifest_header());
    for line in entries.values() {
        text.push_str(line);
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CmdResult {
    if a.repeats == 0 {
        return Err("--repeats must be >= 1".into());
    }
    let spec = resolve_arch(&a.arch)?;
    let train_ds = load(&a.data)?;
    let eval_ds = match &a.eval_data {
        Some(p) => load(p)?,
        None => train_ds.clone(),
    };
    check_inputs(&spec, &train_ds, "training set")?;
    check_inputs(&spec, &eval_ds, "evaluation set")?;
    let base = TrainConfig {
        epochs: a.epochs,
        batch: a.batch,
        lr0: a.lr,
        milestones: parse_milestones(&a)?,
        gamma: a.gamma,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        seed: a.seed,
    };
    base.validate().map_err(|e| e.to_string())?;
    fs::create_dir_all(&a.out_dir).map_err(|e| format!("{}: {e}", a.out_dir.display()))?;
    let tag = sanitize(a.tag.as_deref().unwrap_or(&spec.name));

    let results: Vec<Result<RunOutcome, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..a.repeats as u64)
            .map(|r| {
                let cfg = TrainConfig {
                    seed: a.seed + r,
                    ..base.clone()
                };
                let (spec, train_ds, eval_ds, dir, tag) = (&spec, &train_ds, &eval_ds, &a.out_dir, &tag);
                s.spawn(move || run_one(spec, train_ds, eval_ds, cfg, dir, tag))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err("training thread panicked".into())))
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let counts = class_histogram(&train_ds);
    let per_class = counts.iter().copied().min().unwrap_or(0);
    let factor = imbalance_factor(&train_ds);
    let mut rows = vec![];
    let mut finals = vec![];
    for r in &runs {
        let train_acc = r.report.final_train_acc().unwrap_or(f64::NAN);
        let eval_acc = r.report.final_eval_acc().unwrap_or(f64::NAN);
        finals.push(eval_acc);
        writeln!(
            out,
            "run: seed={} csv={} checkpoint={} final_train_acc={train_acc} final_eval_acc={eval_acc}",
            r.seed,
            r.csv.display(),
            r.checkpoint.display()
        )
        .map_err(io)?;
        rows.push((
            tag.clone(),
            r.seed,
            format!(
                "{tag},{},{},{},{per_class},{factor},{train_acc},{eval_acc}",
                r.seed,
                file_name(&r.csv),
                file_name(&r.checkpoint)
            ),
        ));
    }
    update_manifest(&a.out_dir, rows)?;
    let (mean, std) = mean_std(&finals);
    writeln!(out, "runs: {}\naccuracy_mean: {mean}\naccuracy_std: {std}", runs.len()).map_err(io)?;
    writeln!(out, "accuracy: {:.2} ± {:.2}", 100.0 * mean, 100.0 * std).map_err(io)?;
    Ok(0)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    let spec = resolve_arch(&a.arch)?;
    let ds = load(&a.data)?;
    check_inputs(&spec, &ds, "dataset")?;
    let mut graph = build_network(&spec, 0).map_err(|e| e.to_string())?;
    let entries = trainer::load_checkpoint(&a.checkpoint).map_err(|e| format!("{}: {e}", a.checkpoint.display()))?;
    trainer::apply_checkpoint(&mut graph, entries).map_err(|e| format!("{}: {e}", a.checkpoint.display()))?;
    let acc = trainer::evaluate(&mut graph, &ds).map_err(|e| e.to_string())?;
    writeln!(out, "samples: {}\naccuracy: {acc}", ds.len()).map_err(io)?;
    Ok(0)
}

/// Group key that sorts numerically and prints as the manifest text.
#[derive(Debug, Clone, PartialEq, PartialOrd)]
struct Key(f64, f64);

fn report(a: ReportArgs, out: &mut dyn Write) -> CmdResult {
    let path = a.runs.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(manifest_header()) {
        return Err(format!("{}: missing manifest header", path.display()));
    }
    let mut groups: Vec<(Key, Vec<f64>)> = vec![];
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(format!("malformed manifest line {line:?}"));
        }
        let num = |i: usize| {
            f[i].trim()
                .parse::<f64>()
                .map_err(|_| format!("malformed manifest line {line:?}"))
        };
        let key = Key(num(4)?, num(5)?);
        let csv_path = a.runs.join(f[2]);
        let csv = fs::read_to_string(&csv_path).map_err(|e| format!("{}: {e}", csv_path.display()))?;
        let rep = RunReport::from_csv(&csv).map_err(|e| format!("{}: {e}", csv_path.display()))?;
        let acc = rep
            .final_eval_acc()
            .ok_or_else(|| format!("{}: no rows", csv_path.display()))?;
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(acc),
            None => groups.push((key, vec![acc])),
        }
    }
    if groups.is_empty() {
        return Err(format!("{}: no runs recorded", path.display()));
    }
    groups.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut csv = String::from("samples_per_class,imbalance_factor,runs,mean_acc,std_acc\n");
    for (Key(spc, imb), accs) in &groups {
        let (m, s) = mean_std(accs);
        csv.push_str(&format!("{spc},{imb},{},{m},{s}\n", accs.len()));
    }
    match a.out {
        Some(p) => {
            fs::write(&p, &csv).map_err(|e| format!("{}: {e}", p.display()))?;
            writeln!(out, "written: {}\ngroups: {}", p.display(), groups.len()).map_err(io)?;
        }
        None => write!(out, "{csv}").map_err(io)?,
    }
    Ok(0)
}
