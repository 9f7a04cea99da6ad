use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use nalgebra::{DMatrix, DVector};
use ntkw_core::bounds::{self, confidence_term};
use ntkw_core::checkpoint::{self, KernelFile};
use ntkw_core::dataset::{self, LabeledDataset};
use ntkw_core::network::init_params;
use ntkw_core::ntk::{kernel_stack, min_eigenvalue, psd_solve};
use ntkw_core::ntrf::{min_distance_interpolant, FitOptions};
use ntkw_core::output::{write_csv_rows, write_ndjson};
use ntkw_core::seed::{sub_seed, Stream};
use ntkw_core::sgd::{self, EvalMode};
use ntkw_core::verify::{self, CheckConfig, LEMMAS};
use serde::Serialize;

use crate::run::{read_manifest, Run, MANIFEST_NAME};
use crate::source::{self, bundled_mnist_dir, DATA_DIR_ENV};
use crate::*;

pub fn dispatch(cli: Cli, mut argv: Vec<OsString>) -> anyhow::Result<i32> {
    if let Cmd::Rerun(args) = &cli.cmd {
        return rerun(args, cli.out_dir.as_deref());
    }
    let seed = match cli.seed {
        Some(s) => s,
        None => {
            let s = u64::from(rand::random::<u32>());
            eprintln!("seed: {s}");
            argv.extend(["--seed".into(), s.to_string().into()]);
            s
        }
    };
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let name = command_name(&cli.cmd);
    let mut run = Run::new(out_dir, seed, name, &argv)?;
    let code = match cli.cmd {
        Cmd::Kernel(a) => kernel(&mut run, &a)?,
        Cmd::Bound(BoundCmd::Ntrf(a)) => bound_ntrf(&mut run, &a)?,
        Cmd::Bound(BoundCmd::Kernel(a)) => bound_kernel(&mut run, &a)?,
        Cmd::Bound(BoundCmd::FlipSweep(a)) => flip_sweep(&mut run, &a)?,
        Cmd::Train(a) => train(&mut run, &a)?,
        Cmd::Verify(a) => verify_cmd(&mut run, &a)?,
        Cmd::Data(DataCmd::Fetch(a)) => fetch(&mut run, &a)?,
        Cmd::Data(DataCmd::Inspect(a)) => inspect(&mut run, &a)?,
        Cmd::Rerun(_) => unreachable!(),
    };
    let manifest = run.finish(code)?;
    log::info!("wrote {} artifacts and the manifest", manifest.artifacts.len());
    Ok(code)
}

fn command_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Kernel(_) => "kernel",
        Cmd::Bound(BoundCmd::Ntrf(_)) => "bound ntrf",
        Cmd::Bound(BoundCmd::Kernel(_)) => "bound kernel",
        Cmd::Bound(BoundCmd::FlipSweep(_)) => "bound flip-sweep",
        Cmd::Train(_) => "train",
        Cmd::Verify(_) => "verify",
        Cmd::Data(DataCmd::Fetch(_)) => "data fetch",
        Cmd::Data(DataCmd::Inspect(_)) => "data inspect",
        Cmd::Rerun(_) => "rerun",
    }
}

fn check_depth(depth: usize) -> anyhow::Result<()> {
    if depth < 2 {
        return Err(Exit::usage(format!("--depth {depth}: depth must be at least 2")));
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn print_csv<T: Serialize>(rows: &[T]) -> anyhow::Result<()> {
    write_csv_rows(rows, std::io::stdout().lock())?;
    Ok(())
}

fn warn_parallel(data: &LabeledDataset) {
    let pairs = data.near_parallel_pairs();
    if let Some(&(i, j)) = pairs.first() {
        log::warn!(
            "{} near-parallel input pairs (first: {i}, {j}); the kernel may need jitter",
            pairs.len()
        );
    }
}

fn dataset_path(kernel: &Path) -> PathBuf {
    kernel.with_extension("dataset")
}

fn labels_source(kernel: &Path, labels_from: &str) -> anyhow::Result<LabeledDataset> {
    let path = if labels_from == "data" {
        dataset_path(kernel)
    } else {
        PathBuf::from(labels_from)
    };
    source::read_cache(&path).with_context(|| format!("labels from {}", path.display()))
}

fn read_kernel(path: &Path) -> anyhow::Result<KernelFile> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(KernelFile::from_bytes(&bytes)?)
}

fn max_diag_dev(m: &DMatrix<f64>, target: f64) -> f64 {
    m.diagonal().iter().fold(0.0f64, |a, v| a.max((v - target).abs()))
}

#[derive(Serialize)]
struct DiagCheck {
    theta_max_dev: f64,
    sigma_max_dev: f64,
    theta_tilde_max_dev: f64,
    ok: bool,
}

#[derive(Serialize)]
struct KernelSummary {
    n: usize,
    dim: usize,
    depth: usize,
    source: String,
    theta_diag: f64,
    diag: DiagCheck,
    min_eigenvalue: f64,
    jitter: f64,
    near_parallel_pairs: usize,
    kernel: String,
    dataset: String,
}

fn kernel(run: &mut Run, a: &KernelArgs) -> anyhow::Result<i32> {
    check_depth(a.depth)?;
    let data = source::load(&a.data, a.depth, run.seed)?.train;
    warn_parallel(&data);
    let stack = kernel_stack(data.inputs(), data.dim(), a.depth)?;
    let depth = a.depth as f64;
    let diag = DiagCheck {
        theta_max_dev: max_diag_dev(&stack.theta, (depth + 1.0) / 2.0),
        sigma_max_dev: max_diag_dev(stack.sigma_last(), 1.0),
        theta_tilde_max_dev: max_diag_dev(stack.theta_tilde_last(), depth),
        ok: false,
    };
    let diag = DiagCheck {
        ok: diag.theta_max_dev <= 1e-12 && diag.sigma_max_dev <= 1e-12 && diag.theta_tilde_max_dev <= 1e-12,
        ..diag
    };
    let labels = DVector::from_column_slice(data.labels());
    let solved = psd_solve(&stack.theta, &labels)?;

    let kfile = KernelFile::from_stack(&stack, a.sections);
    run.write(&a.out, &kfile.to_bytes())?;
    let ds = dataset_path(&a.out);
    run.write(&ds, &data.to_cache_bytes())?;
    let summary = KernelSummary {
        n: data.len(),
        dim: data.dim(),
        depth: a.depth,
        source: data.meta.source.clone(),
        theta_diag: (depth + 1.0) / 2.0,
        diag,
        min_eigenvalue: min_eigenvalue(&stack.theta),
        jitter: solved.jitter,
        near_parallel_pairs: data.near_parallel_pairs().len(),
        kernel: a.out.display().to_string(),
        dataset: ds.display().to_string(),
    };
    run.write_json(a.out.with_extension("json"), &summary)?;
    print_json(&summary)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct NtrfRow {
    m: usize,
    #[serde(rename = "R")]
    radius: f64,
    seed: u64,
    n: usize,
    depth: usize,
    first_term: f64,
    radius_term: f64,
    confidence_term: f64,
    lr: f64,
    final_lr: f64,
    epochs: usize,
    history: String,
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    loss: f64,
}

fn bound_ntrf(run: &mut Run, a: &NtrfArgs) -> anyhow::Result<i32> {
    check_depth(a.depth)?;
    if a.widths.is_empty() || a.radii.is_empty() || a.seeds == 0 {
        return Err(Exit::usage("need at least one --m, one --R and one seed"));
    }
    if a.epochs == 0 || a.batch == 0 {
        return Err(Exit::usage("--epochs and --batch must be positive"));
    }
    if !(a.delta > 0.0 && a.delta < 1.0) {
        return Err(Exit::usage("--delta must lie in (0, 1)"));
    }
    let data = source::load(&a.data, a.depth, run.seed)?.train;
    let n = data.len();
    let template = FitOptions {
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        ..FitOptions::new(a.radii[0], sub_seed(run.seed, Stream::Sgd))
    };
    let sweep = bounds::ntrf_sweep(&data, a.depth, &a.widths, &a.radii, a.seeds, run.seed, &template)?;
    let mut rows = Vec::with_capacity(sweep.len());
    for (k, r) in sweep.iter().enumerate() {
        let s = k / a.radii.len() % a.seeds;
        let history = format!("ntrf_history/m{}_R{}_s{s}.csv", r.m, r.radius);
        let hist: Vec<HistoryRow> = r
            .history
            .iter()
            .enumerate()
            .map(|(e, &loss)| HistoryRow { epoch: e + 1, loss })
            .collect();
        run.write_with(&history, |buf| write_csv_rows(&hist, buf))?;
        rows.push(NtrfRow {
            m: r.m,
            radius: r.radius,
            seed: r.seed,
            n,
            depth: a.depth,
            first_term: r.first_term,
            radius_term: a.depth as f64 * r.radius / (n as f64).sqrt(),
            confidence_term: confidence_term(n, a.delta),
            lr: r.lr,
            final_lr: r.final_lr,
            epochs: r.epochs,
            history,
        });
    }
    run.write_with("ntrf.csv", |buf| write_csv_rows(&rows, buf))?;
    print_csv(&rows)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct KernelBoundRow {
    n: usize,
    depth: usize,
    first_term: f64,
    quantity: f64,
    quadratic_form: f64,
    confidence_term: f64,
    jitter: f64,
    notes: String,
}

fn bound_kernel(run: &mut Run, a: &BoundKernelArgs) -> anyhow::Result<i32> {
    let k = read_kernel(&a.kernel)?;
    let data = labels_source(&a.kernel, &a.labels_from)?;
    let report = bounds::kernel_bound(&k.theta, k.depth, data.labels())?;
    for note in report.notes.iter().skip(1) {
        log::warn!("{note}");
    }
    let row = KernelBoundRow {
        n: report.hyper.n,
        depth: report.hyper.depth,
        first_term: report.first_term,
        quantity: report.quantity.unwrap_or(f64::NAN),
        quadratic_form: report.quadratic_form.unwrap_or(f64::NAN),
        confidence_term: report.confidence_term,
        jitter: report.jitter_used,
        notes: report.notes.join("; "),
    };
    run.write_with("bound_kernel.csv", |buf| write_csv_rows(std::slice::from_ref(&row), buf))?;
    print_csv(&[row])?;
    Ok(EXIT_OK)
}

fn flip_sweep(run: &mut Run, a: &FlipSweepArgs) -> anyhow::Result<i32> {
    let (data, theta, depth) = match &a.kernel {
        Some(path) => {
            let k = read_kernel(path)?;
            let data = labels_source(path, &a.labels_from)?;
            (data, k.theta, k.depth)
        }
        None => {
            check_depth(a.depth)?;
            let data = source::load(&a.data, a.depth, run.seed)?.train;
            warn_parallel(&data);
            let stack = kernel_stack(data.inputs(), data.dim(), a.depth)?;
            (data, stack.theta, a.depth)
        }
    };
    let sweep = bounds::flip_sweep(&data, &theta, depth, &a.ratios, a.seeds, run.seed)?;
    run.write_with("flip_sweep.csv", |buf| write_csv_rows(&sweep.rows, buf))?;
    run.write_with("flip_summary.csv", |buf| write_csv_rows(&sweep.summary, buf))?;
    print_csv(&sweep.summary)?;
    if !sweep.medians_strictly_increasing() {
        log::warn!("medians are not strictly increasing in the flip ratio");
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct TrainSummary {
    n: usize,
    m: usize,
    depth: usize,
    #[serde(rename = "R")]
    radius: f64,
    eta: f64,
    selected_index: usize,
    mean_loss: f64,
    mean_zero_one: f64,
    train_error_selected: f64,
    test_n: Option<usize>,
    test_error_selected: Option<f64>,
    test_error_average: Option<f64>,
    cumulative: Option<sgd::CumulativeLossReport>,
    interpolant_radius: Option<f64>,
    run_csv: String,
}

fn train(run: &mut Run, a: &TrainArgs) -> anyhow::Result<i32> {
    check_depth(a.depth)?;
    if a.width == 0 {
        return Err(Exit::usage("--m must be positive"));
    }
    let loaded = source::load(&a.data, a.depth, run.seed)?;
    let data = &loaded.train;
    let n = data.len();
    let eta = a
        .eta
        .unwrap_or_else(|| sgd::theory_step_size(a.kappa, a.radius, a.width, n));
    let init = init_params(a.width, data.dim(), a.depth, sub_seed(run.seed, Stream::Init))?;
    let every = a.snapshot_every.unwrap_or_else(|| sgd::default_snapshot_every(n));
    let result = sgd::run_sgd(&init, data, eta, run.seed, every)?;
    let record = &result.record;

    run.write_with("run.csv", |buf| record.write_csv(buf))?;
    run.write("selected.params", &checkpoint::params_to_bytes(result.selected()))?;
    run.write("final.params", &checkpoint::params_to_bytes(&result.final_params))?;
    if a.save_snapshots {
        for s in &result.snapshots {
            run.write(format!("snapshots/step{:06}.params", s.step), &checkpoint::params_to_bytes(&s.params))?;
        }
    }

    let (test_sel, test_avg) = match &loaded.test {
        Some(test) => (
            Some(sgd::online_to_batch_eval(
                &result.snapshots,
                test,
                EvalMode::Selected(record.selected_index),
            )?),
            Some(sgd::online_to_batch_eval(&result.snapshots, test, EvalMode::Average)?),
        ),
        None => (None, None),
    };
    let (cumulative, interpolant_radius) = if a.check_cumulative {
        let interp = min_distance_interpolant(&init, data, None)?;
        let net = interp.model.to_network()?;
        let reference = sgd::losses_of(&net, data)?;
        let slack = sgd::default_cumulative_slack(a.depth, a.radius, n);
        (
            Some(sgd::cumulative_loss_check(record, &reference, slack)?),
            Some(interp.gram_norm),
        )
    } else {
        (None, None)
    };
    let summary = TrainSummary {
        n,
        m: a.width,
        depth: a.depth,
        radius: a.radius,
        eta,
        selected_index: record.selected_index,
        mean_loss: record.mean_loss(),
        mean_zero_one: record.mean_zero_one(),
        train_error_selected: sgd::zero_one_error(result.selected(), data)?,
        test_n: loaded.test.as_ref().map(|t| t.len()),
        test_error_selected: test_sel,
        test_error_average: test_avg,
        cumulative,
        interpolant_radius,
        run_csv: "run.csv".into(),
    };
    run.write_json("train.json", &summary)?;
    print_json(&summary)?;
    Ok(EXIT_OK)
}

fn verify_cmd(run: &mut Run, a: &VerifyArgs) -> anyhow::Result<i32> {
    let mut lemmas: Vec<String> = Vec::new();
    for l in &a.lemma {
        if l == "all" {
            lemmas.extend(LEMMAS.iter().map(|s| s.to_string()));
        } else if LEMMAS.contains(&l.as_str()) {
            lemmas.push(l.clone());
        } else {
            return Err(Exit::usage(format!("unknown lemma {l:?}; expected one of {}", LEMMAS.join(", "))));
        }
    }
    let cfg = CheckConfig {
        width: a.width,
        depth: a.depth,
        n: a.n,
        dim: a.dim,
        seeds: a.seeds,
        base_seed: run.seed,
        grid: a.grid.clone(),
        pairs: a.pairs,
    };
    let mut results = Vec::new();
    let mut code = EXIT_OK;
    for lemma in &lemmas {
        let r = verify::run_check(lemma, &cfg)?;
        write_ndjson(std::slice::from_ref(&r), std::io::stdout().lock())?;
        if r.verdict.is_fail() {
            if let Some(f) = &r.failure {
                eprintln!("{lemma}: FAIL; reproduce with: {}", f.reproduce);
            }
            code = EXIT_VERIFY_FAIL;
        }
        results.push(r);
    }
    run.write_with("verify.ndjson", |buf| write_ndjson(&results, buf))?;
    Ok(code)
}

#[derive(Serialize)]
struct FetchedFile {
    file: String,
    bytes: u64,
    records: usize,
}

fn fetch(run: &mut Run, a: &FetchArgs) -> anyhow::Result<i32> {
    let from = a.from.clone().unwrap_or_else(bundled_mnist_dir);
    let root = match (&a.to, std::env::var_os(DATA_DIR_ENV)) {
        (Some(to), _) => to.clone(),
        (None, Some(env)) if !env.is_empty() => PathBuf::from(env),
        _ => return Err(Exit::usage(format!("no destination: pass --to or set {DATA_DIR_ENV}"))),
    };
    let dest = root.join("mnist");
    std::fs::create_dir_all(&dest).with_context(|| format!("creating {}", dest.display()))?;
    let entries = std::fs::read_dir(&from).with_context(|| format!("reading {}", from.display()))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains("-idx1-ubyte") || n.contains("-idx3-ubyte"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Exit::data(format!("no IDX files in {}", from.display())));
    }
    let mut copied = Vec::new();
    for name in names {
        let src = from.join(&name);
        let bytes = dataset::read_maybe_gz(&src)?;
        let records = if name.contains("-idx3-") {
            dataset::IdxImages::parse(&bytes)?.count
        } else {
            dataset::IdxLabels::parse(&bytes)?.labels.len()
        };
        let target = dest.join(&name);
        if target.exists() && !a.force {
            log::info!("{} exists, keeping it", target.display());
        } else {
            std::fs::copy(&src, &target).with_context(|| format!("copying to {}", target.display()))?;
        }
        let raw = std::fs::read(&target)?;
        run.write(format!("fetched/{name}.sha256"), format!("{}\n", checkpoint::sha256_hex(&raw)).as_bytes())?;
        copied.push(FetchedFile {
            file: target.display().to_string(),
            bytes: raw.len() as u64,
            records,
        });
    }
    print_json(&copied)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct Inspection {
    source: String,
    n: usize,
    dim: usize,
    positives: usize,
    negatives: usize,
    max_norm_deviation: f64,
    near_parallel_pairs: usize,
    test_n: Option<usize>,
    digit_counts: Option<Vec<usize>>,
}

fn inspect(run: &mut Run, a: &InspectArgs) -> anyhow::Result<i32> {
    let loaded = source::load(&a.data, a.depth, run.seed)?;
    let d = &loaded.train;
    let digit_counts = if a.data.synth.is_none() && a.data.dataset.is_none() {
        let raw = source::load_mnist_raw(a.data.split)?;
        let mut counts = vec![0usize; 10];
        for i in 0..raw.len() {
            if let Some(c) = counts.get_mut(raw.label(i) as usize) {
                *c += 1;
            }
        }
        Some(counts)
    } else {
        None
    };
    let max_norm_deviation = (0..d.len())
        .map(|i| (d.x(i).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    let positives = d.labels().iter().filter(|&&y| y > 0.0).count();
    let report = Inspection {
        source: d.meta.source.clone(),
        n: d.len(),
        dim: d.dim(),
        positives,
        negatives: d.len() - positives,
        max_norm_deviation,
        near_parallel_pairs: d.near_parallel_pairs().len(),
        test_n: loaded.test.as_ref().map(|t| t.len()),
        digit_counts,
    };
    run.write_json("inspect.json", &report)?;
    print_json(&report)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct RerunReport {
    manifest: String,
    out_dir: String,
    compared: usize,
    mismatched: Vec<String>,
    missing: Vec<String>,
    identical: bool,
}

fn rerun(a: &RerunArgs, out_dir: Option<&Path>) -> anyhow::Result<i32> {
    let original = read_manifest(&a.manifest)?;
    let out = match out_dir {
        Some(d) => d.to_path_buf(),
        None => a.manifest.parent().unwrap_or(Path::new(".")).join("rerun"),
    };
    let mut argv: Vec<OsString> = original.argv.iter().map(OsString::from).collect();
    argv.extend(["--out-dir".into(), out.clone().into_os_string()]);
    let code = run_argv(argv);
    if code != original.exit_code {
        eprintln!("exit code {code}, the manifest recorded {}", original.exit_code);
    }
    let fresh = read_manifest(&out.join(MANIFEST_NAME))?;
    let mut mismatched = Vec::new();
    let mut missing = Vec::new();
    for art in &original.artifacts {
        match fresh.artifacts.iter().find(|f| f.path == art.path) {
            Some(f) if f.sha256 == art.sha256 => {}
            Some(_) => mismatched.push(art.path.clone()),
            None => missing.push(art.path.clone()),
        }
    }
    let report = RerunReport {
        manifest: a.manifest.display().to_string(),
        out_dir: out.display().to_string(),
        compared: original.artifacts.len(),
        identical: mismatched.is_empty() && missing.is_empty() && code == original.exit_code,
        mismatched,
        missing,
    };
    print_json(&report)?;
    Ok(if report.identical { EXIT_OK } else { EXIT_VERIFY_FAIL })
}
