//! One function per subcommand. All artifacts except run.json are
//! byte-reproducible under identical flags, seeds, and inputs.

use crate::args::*;
use crate::config::parse_config;
use crate::manifest::{prepare_run_dir, ManifestBuilder};
use crate::{runtime, usage, CliError};
use rmoe::checkpoint::{load_checkpoint, save_checkpoint, AnyModel, Checkpoint};
use rmoe::data::{
    generate_synthetic, load_dataset, oracle_predict, save_dataset, split_train_test, Dataset,
    EventVocabulary, SyntheticWorld, WindowedSequence,
};
use rmoe::eval::{
    build_report, gain_report, gain_vs_occurrence_csv, gains_to_csv, metrics_to_csv,
    parse_metrics_csv, score_dataset, MetricsReport,
};
use rmoe::models::Combine;
use rmoe::tensor::{derive_seed, Rng};
use rmoe::training::{train_base, train_moe, train_rmoe, TrainConfig, TrainHistory};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(usage(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_dataset_arg(path: &Path) -> Result<Dataset, CliError> {
    require_file(path, "dataset")?;
    load_dataset(path).map_err(runtime)
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    if args.k_subpops == 0 {
        return Err(usage("--k-subpops must be at least 1"));
    }
    if args.n_events == 0 {
        return Err(usage("--n-events must be at least 1"));
    }
    if args.n_seqs < 2 {
        return Err(usage("--n-seqs must be at least 2 (train/test split needs both sides)"));
    }
    if args.len_min < 2 {
        return Err(usage(format!(
            "--len-min must be at least 2 (got {}): one window leaves nothing to predict",
            args.len_min
        )));
    }
    if args.len_max < args.len_min {
        return Err(usage(format!(
            "--len-max {} is smaller than --len-min {}",
            args.len_max, args.len_min
        )));
    }
    if !(args.test_fraction > 0.0 && args.test_fraction < 1.0) {
        return Err(usage("--test-fraction must be in (0,1)"));
    }
    if !(args.window > 0.0) {
        return Err(usage("--window must be positive"));
    }
    prepare_run_dir(&args.out)?;

    let vocab = EventVocabulary::synthetic(args.n_events);
    let world = SyntheticWorld::sample(
        args.k_subpops,
        args.n_events,
        &mut Rng::new(derive_seed(args.seed, 0x6E0D)),
    );
    let (seqs, labels) = generate_synthetic(
        &world,
        args.n_seqs,
        (args.len_min, args.len_max),
        derive_seed(args.seed, 0xDA7A),
    );
    let label_map: BTreeMap<String, usize> = seqs
        .iter()
        .map(|s| s.id.clone())
        .zip(labels.iter().copied())
        .collect();
    let split = split_train_test(seqs, args.test_fraction, args.seed);
    let ds = Dataset {
        vocab: vocab.clone(),
        window_hours: args.window,
        seed: args.seed,
        split,
    };

    let dataset_path = args.out.join("dataset.jsonl");
    let vocab_path = args.out.join("vocab.json");
    let world_path = args.out.join("world.json");
    let labels_path = args.out.join("labels.json");
    save_dataset(&dataset_path, &ds).map_err(runtime)?;
    vocab.save(&vocab_path).map_err(runtime)?;
    world.save(&world_path).map_err(runtime)?;
    write_file(
        &labels_path,
        &serde_json::to_string_pretty(&label_map).expect("labels serialize"),
    )?;

    let all: Vec<WindowedSequence> = ds
        .split
        .train
        .iter()
        .chain(&ds.split.test)
        .cloned()
        .collect();
    let occ = rmoe::eval::occurrence_ratio(&all, &vocab);
    let mean_occ = occ.iter().sum::<f64>() / occ.len() as f64;
    let total_windows: usize = all.iter().map(|s| s.windows.len()).sum();

    ManifestBuilder::new("gen-data", args.seed)
        .config("k_subpops", args.k_subpops)
        .config("n_events", args.n_events)
        .config("n_seqs", args.n_seqs)
        .config("len_min", args.len_min)
        .config("len_max", args.len_max)
        .config("window", args.window)
        .config("test_fraction", args.test_fraction)
        .artifact(&dataset_path)
        .artifact(&vocab_path)
        .artifact(&world_path)
        .artifact(&labels_path)
        .write(&args.out)?;

    println!(
        "generated {} sequences ({} train / {} test), {} windows, |E| = {}, K = {}",
        args.n_seqs,
        ds.split.train.len(),
        ds.split.test.len(),
        total_windows,
        args.n_events,
        args.k_subpops
    );
    println!("mean occurrence ratio: {mean_occ:.6}");
    Ok(())
}

fn resolve_train_config(common: &TrainCommonArgs, default_lr: f64, default_l2: f64) -> TrainConfig {
    TrainConfig {
        lr: common.lr.unwrap_or(default_lr),
        l2: common.l2.unwrap_or(default_l2),
        max_epochs: common.epochs,
        patience: common.patience,
        batch_size: common.batch_size,
        seed: common.seed,
        val_fraction: common.val_fraction,
        decoupled_decay: common.decoupled_decay,
    }
}

fn write_training_outputs(
    out: &Path,
    ck: &Checkpoint,
    history: &TrainHistory,
) -> Result<(PathBuf, PathBuf), CliError> {
    let ck_path = out.join("checkpoint.json");
    let hist_path = out.join("history.csv");
    save_checkpoint(&ck_path, ck).map_err(runtime)?;
    write_file(&hist_path, &history.to_csv())?;
    Ok((ck_path, hist_path))
}

fn print_training_summary(history: &TrainHistory) {
    match history.epochs.last() {
        Some(_) => {
            let best = &history.epochs[history.best_epoch - 1];
            println!(
                "trained {} epochs; best epoch {} with val loss {:.6}",
                history.epochs_run(),
                history.best_epoch,
                best.val_loss
            );
        }
        None => println!("zero-epoch budget: wrote the initialized model"),
    }
}

pub fn train_base_cmd(args: &TrainBaseArgs) -> Result<(), CliError> {
    let ds = load_dataset_arg(&args.common.data)?;
    prepare_run_dir(&args.common.out)?;
    let cfg = resolve_train_config(&args.common, 0.005, 1e-5);
    let (model, history) = train_base(&ds.split.train, &ds.vocab, &cfg, args.emb_dim, args.hidden_dim)
        .map_err(runtime)?;
    let ck = Checkpoint {
        vocab_hash: ds.vocab.hash(),
        model: AnyModel::Base(model),
    };
    let (ck_path, hist_path) = write_training_outputs(&args.common.out, &ck, &history)?;
    ManifestBuilder::new("train-base", cfg.seed)
        .config("lr", cfg.lr)
        .config("l2", cfg.l2)
        .config("epochs", cfg.max_epochs)
        .config("patience", cfg.patience)
        .config("batch_size", cfg.batch_size)
        .config("val_fraction", cfg.val_fraction)
        .config("decoupled_decay", cfg.decoupled_decay)
        .config("emb_dim", args.emb_dim)
        .config("hidden_dim", args.hidden_dim)
        .input(&args.common.data)
        .artifact(&ck_path)
        .artifact(&hist_path)
        .write(&args.common.out)?;
    print_training_summary(&history);
    Ok(())
}

fn load_base_checkpoint(path: &Path, ds: &Dataset) -> Result<rmoe::models::BaseModel, CliError> {
    require_file(path, "base checkpoint")?;
    let ck = load_checkpoint(path).map_err(runtime)?;
    ds.check_vocab_hash(ck.vocab_hash).map_err(runtime)?;
    match ck.model {
        AnyModel::Base(m) => Ok(m),
        other => Err(runtime(format!(
            "--base-checkpoint must be a base-model checkpoint, found kind {:?}",
            other.kind()
        ))),
    }
}

pub fn train_rmoe_cmd(args: &TrainRmoeArgs) -> Result<(), CliError> {
    let combine: Combine = args.combine.parse().map_err(usage)?;
    let ds = load_dataset_arg(&args.common.data)?;
    let base = load_base_checkpoint(&args.base_checkpoint, &ds)?;
    prepare_run_dir(&args.common.out)?;
    let cfg = resolve_train_config(&args.common, 0.0005, 1.0);
    let (model, history) = train_rmoe(
        base,
        &ds.split.train,
        &ds.vocab,
        &cfg,
        args.experts,
        args.hidden_dim,
        combine,
    )
    .map_err(runtime)?;
    let ck = Checkpoint {
        vocab_hash: ds.vocab.hash(),
        model: AnyModel::Rmoe(model),
    };
    let (ck_path, hist_path) = write_training_outputs(&args.common.out, &ck, &history)?;
    ManifestBuilder::new("train-rmoe", cfg.seed)
        .config("lr", cfg.lr)
        .config("l2", cfg.l2)
        .config("epochs", cfg.max_epochs)
        .config("patience", cfg.patience)
        .config("batch_size", cfg.batch_size)
        .config("val_fraction", cfg.val_fraction)
        .config("decoupled_decay", cfg.decoupled_decay)
        .config("experts", args.experts)
        .config("hidden_dim", args.hidden_dim)
        .config("combine", &args.combine)
        .input(&args.common.data)
        .input(&args.base_checkpoint)
        .artifact(&ck_path)
        .artifact(&hist_path)
        .write(&args.common.out)?;
    print_training_summary(&history);
    Ok(())
}

pub fn train_moe_cmd(args: &TrainMoeArgs) -> Result<(), CliError> {
    let ds = load_dataset_arg(&args.common.data)?;
    prepare_run_dir(&args.common.out)?;
    let cfg = resolve_train_config(&args.common, 0.005, 1e-5);
    let (model, history) = train_moe(
        &ds.split.train,
        &ds.vocab,
        &cfg,
        args.emb_dim,
        args.experts,
        args.hidden_dim,
    )
    .map_err(runtime)?;
    let ck = Checkpoint {
        vocab_hash: ds.vocab.hash(),
        model: AnyModel::Moe(model),
    };
    let (ck_path, hist_path) = write_training_outputs(&args.common.out, &ck, &history)?;
    ManifestBuilder::new("train-moe", cfg.seed)
        .config("lr", cfg.lr)
        .config("l2", cfg.l2)
        .config("epochs", cfg.max_epochs)
        .config("patience", cfg.patience)
        .config("batch_size", cfg.batch_size)
        .config("val_fraction", cfg.val_fraction)
        .config("decoupled_decay", cfg.decoupled_decay)
        .config("experts", args.experts)
        .config("hidden_dim", args.hidden_dim)
        .config("emb_dim", args.emb_dim)
        .input(&args.common.data)
        .artifact(&ck_path)
        .artifact(&hist_path)
        .write(&args.common.out)?;
    print_training_summary(&history);
    Ok(())
}

fn model_report(model: &AnyModel, ds: &Dataset) -> Result<MetricsReport, CliError> {
    let pairs = score_dataset(|seq| model.predict(seq), &ds.split.test, &ds.vocab);
    build_report(&pairs, &ds.split.test, &ds.vocab).map_err(runtime)
}

fn oracle_report(
    world: &SyntheticWorld,
    labels: &BTreeMap<String, usize>,
    ds: &Dataset,
) -> Result<MetricsReport, CliError> {
    if world.n_events != ds.vocab.n_events() {
        return Err(runtime(format!(
            "world has {} events but dataset vocabulary has {}",
            world.n_events,
            ds.vocab.n_events()
        )));
    }
    for seq in &ds.split.test {
        let k = labels
            .get(&seq.id)
            .ok_or_else(|| runtime(format!("labels file has no entry for sequence {}", seq.id)))?;
        if *k >= world.n_subpops() {
            return Err(runtime(format!(
                "label {k} for sequence {} out of range (K = {})",
                seq.id,
                world.n_subpops()
            )));
        }
    }
    let predict = |seq: &WindowedSequence| -> Vec<Vec<f64>> {
        let k = labels[&seq.id];
        (0..seq.windows.len() - 1)
            .map(|t| {
                let full = oracle_predict(world, k, &seq.windows[t]);
                ds.vocab.target_indices.iter().map(|&j| full[j]).collect()
            })
            .collect()
    };
    let pairs = score_dataset(predict, &ds.split.test, &ds.vocab);
    build_report(&pairs, &ds.split.test, &ds.vocab).map_err(runtime)
}

pub fn eval_cmd(args: &EvalArgs) -> Result<(), CliError> {
    if args.oracle && (args.world.is_none() || args.labels.is_none()) {
        return Err(usage("--oracle requires both --world and --labels"));
    }
    require_file(&args.checkpoint, "checkpoint")?;
    let ds = load_dataset_arg(&args.data)?;
    let ck = load_checkpoint(&args.checkpoint).map_err(runtime)?;
    ds.check_vocab_hash(ck.vocab_hash).map_err(runtime)?;
    if ds.split.test.is_empty() {
        return Err(runtime("dataset has no test split to evaluate"));
    }
    prepare_run_dir(&args.out)?;

    let report = model_report(&ck.model, &ds)?;
    let metrics_path = args.out.join("metrics.csv");
    write_file(&metrics_path, &metrics_to_csv(&report))?;
    println!(
        "{} macro AUPRC: {:.6} over {} event types ({} excluded)",
        ck.model.kind(),
        report.macro_auprc,
        report.evaluated_types,
        report.excluded_types.len()
    );

    let mut manifest = ManifestBuilder::new("eval", 0)
        .config("oracle", args.oracle)
        .input(&args.checkpoint)
        .input(&args.data)
        .artifact(&metrics_path);

    if args.oracle {
        let world_path = args.world.as_ref().unwrap();
        let labels_path = args.labels.as_ref().unwrap();
        require_file(world_path, "world file")?;
        require_file(labels_path, "labels file")?;
        let world = SyntheticWorld::load(world_path).map_err(runtime)?;
        let labels_text = std::fs::read_to_string(labels_path)
            .map_err(|e| runtime(format!("cannot read {}: {e}", labels_path.display())))?;
        let labels: BTreeMap<String, usize> =
            serde_json::from_str(&labels_text).map_err(|e| runtime(format!("bad labels file: {e}")))?;
        let oreport = oracle_report(&world, &labels, &ds)?;
        let oracle_path = args.out.join("oracle_metrics.csv");
        write_file(&oracle_path, &metrics_to_csv(&oreport))?;
        println!("oracle macro AUPRC: {:.6}", oreport.macro_auprc);
        manifest = manifest
            .input(world_path)
            .input(labels_path)
            .artifact(&oracle_path);
    }
    manifest.write(&args.out)?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(text: &str, flag: &str) -> Result<Vec<T>, CliError> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<T>()
                .map_err(|_| usage(format!("bad value {part:?} in {flag}")))?,
        );
    }
    if out.is_empty() {
        return Err(usage(format!("{flag} must list at least one value")));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum CellKind {
    Rmoe,
    Moe,
}

impl CellKind {
    fn name(self) -> &'static str {
        match self {
            CellKind::Rmoe => "rmoe",
            CellKind::Moe => "moe",
        }
    }
}

#[derive(Debug, Clone)]
struct CellSpec {
    kind: CellKind,
    n_experts: usize,
    hidden: usize,
    seed: u64,
}

struct SweepSettings {
    experts: Vec<usize>,
    hidden_dims: Vec<usize>,
    seeds: Vec<u64>,
    jobs: usize,
    lr: f64,
    l2: f64,
    epochs: usize,
    patience: usize,
}

/// Flag > config-file > default, per key.
fn resolve_sweep_settings(args: &SweepArgs) -> Result<SweepSettings, CliError> {
    let overrides = match &args.config {
        Some(path) => {
            require_file(path, "config file")?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
            parse_config(&text).map_err(usage)?
        }
        None => BTreeMap::new(),
    };
    let known = [
        "experts",
        "hidden-dims",
        "seeds",
        "jobs",
        "lr",
        "l2",
        "epochs",
        "patience",
    ];
    if let Some(bad) = overrides.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(usage(format!("unknown config key {bad:?}")));
    }
    let pick = |flag: &Option<String>, key: &str, default: &str| -> String {
        flag.clone()
            .or_else(|| overrides.get(key).cloned())
            .unwrap_or_else(|| default.to_string())
    };
    let pick_num = |flag: Option<String>, key: &str, default: &str| -> String {
        flag.or_else(|| overrides.get(key).cloned())
            .unwrap_or_else(|| default.to_string())
    };
    let experts = parse_list::<usize>(&pick(&args.experts, "experts", "1,5,10,20,50,100"), "--experts")?;
    let hidden_dims = parse_list::<usize>(
        &pick(&args.hidden_dims, "hidden-dims", "32,64,128,256,512"),
        "--hidden-dims",
    )?;
    let seeds = parse_list::<u64>(&pick(&args.seeds, "seeds", "1"), "--seeds")?;
    if experts.iter().any(|&n| n == 0) || hidden_dims.iter().any(|&d| d == 0) {
        return Err(usage("expert counts and hidden dims must be at least 1"));
    }
    let parse_one = |text: String, key: &str| -> Result<f64, CliError> {
        text.parse::<f64>()
            .map_err(|_| usage(format!("bad value {text:?} for {key}")))
    };
    let jobs = pick_num(args.jobs.map(|v| v.to_string()), "jobs", "1")
        .parse::<usize>()
        .map_err(|_| usage("bad value for jobs"))?;
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    Ok(SweepSettings {
        experts,
        hidden_dims,
        seeds,
        jobs,
        lr: parse_one(pick_num(args.lr.map(|v| v.to_string()), "lr", "0.0005"), "lr")?,
        l2: parse_one(pick_num(args.l2.map(|v| v.to_string()), "l2", "1.0"), "l2")?,
        epochs: pick_num(args.epochs.map(|v| v.to_string()), "epochs", "100")
            .parse::<usize>()
            .map_err(|_| usage("bad value for epochs"))?,
        patience: pick_num(args.patience.map(|v| v.to_string()), "patience", "5")
            .parse::<usize>()
            .map_err(|_| usage("bad value for patience"))?,
    })
}

fn run_cell(
    spec: &CellSpec,
    ds: &Dataset,
    base: &rmoe::models::BaseModel,
    settings: &SweepSettings,
    cell_dir: &Path,
) -> Result<f64, CliError> {
    std::fs::create_dir_all(cell_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", cell_dir.display())))?;
    let cfg = TrainConfig {
        lr: settings.lr,
        l2: settings.l2,
        max_epochs: settings.epochs,
        patience: settings.patience,
        batch_size: 1,
        seed: spec.seed,
        val_fraction: 0.1,
        decoupled_decay: false,
    };
    let (model, history) = match spec.kind {
        CellKind::Rmoe => {
            let (m, h) = train_rmoe(
                base.clone(),
                &ds.split.train,
                &ds.vocab,
                &cfg,
                spec.n_experts,
                spec.hidden,
                Combine::ProbSum,
            )
            .map_err(runtime)?;
            (AnyModel::Rmoe(m), h)
        }
        CellKind::Moe => {
            let (m, h) = train_moe(
                &ds.split.train,
                &ds.vocab,
                &cfg,
                base.emb.dim(),
                spec.n_experts,
                spec.hidden,
            )
            .map_err(runtime)?;
            (AnyModel::Moe(m), h)
        }
    };
    let ck = Checkpoint {
        vocab_hash: ds.vocab.hash(),
        model,
    };
    save_checkpoint(&cell_dir.join("checkpoint.json"), &ck).map_err(runtime)?;
    write_file(&cell_dir.join("history.csv"), &history.to_csv())?;
    let report = model_report(&ck.model, ds)?;
    write_file(&cell_dir.join("metrics.csv"), &metrics_to_csv(&report))?;
    Ok(report.macro_auprc)
}

pub fn sweep_cmd(args: &SweepArgs) -> Result<(), CliError> {
    let settings = resolve_sweep_settings(args)?;
    let ds = load_dataset_arg(&args.data)?;
    let base = load_base_checkpoint(&args.base_checkpoint, &ds)?;
    prepare_run_dir(&args.out)?;
    if ds.split.test.is_empty() {
        return Err(runtime("dataset has no test split to evaluate"));
    }

    let mut cells = Vec::new();
    for &seed in &settings.seeds {
        for &n in &settings.experts {
            for &d in &settings.hidden_dims {
                cells.push(CellSpec {
                    kind: CellKind::Rmoe,
                    n_experts: n,
                    hidden: d,
                    seed,
                });
                if args.ablation {
                    cells.push(CellSpec {
                        kind: CellKind::Moe,
                        n_experts: n,
                        hidden: d,
                        seed,
                    });
                }
            }
        }
    }

    // share-nothing cells; results gathered then sorted for a stable csv
    let results: Mutex<Vec<(usize, Result<f64, String>)>> = Mutex::new(Vec::new());
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..settings.jobs.min(cells.len()) {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if idx >= cells.len() {
                    break;
                }
                let spec = &cells[idx];
                let cell_dir = args.out.join(format!(
                    "cell-{}-n{}-d{}-s{}",
                    spec.kind.name(),
                    spec.n_experts,
                    spec.hidden,
                    spec.seed
                ));
                let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    run_cell(spec, &ds, &base, &settings, &cell_dir)
                }));
                let flat = match outcome {
                    Ok(Ok(macro_auprc)) => {
                        println!(
                            "cell {} n={} d'={} seed={}: macro AUPRC {:.6}",
                            spec.kind.name(),
                            spec.n_experts,
                            spec.hidden,
                            spec.seed,
                            macro_auprc
                        );
                        Ok(macro_auprc)
                    }
                    Ok(Err(e)) => Err(e.message().to_string()),
                    Err(panic) => Err(match panic.downcast_ref::<String>() {
                        Some(s) => format!("panic: {s}"),
                        None => match panic.downcast_ref::<&str>() {
                            Some(s) => format!("panic: {s}"),
                            None => "panic".to_string(),
                        },
                    }),
                };
                results.lock().unwrap().push((idx, flat));
            });
        }
    });

    let mut rows: Vec<(CellSpec, Result<f64, String>)> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|(idx, r)| (cells[idx].clone(), r))
        .collect();
    rows.sort_by_key(|(c, _)| (c.kind, c.n_experts, c.hidden, c.seed));

    let mut csv = String::from("model,n,d_prime,seed,macro_auprc\n");
    let mut failures = String::from("model,n,d_prime,seed,error\n");
    let mut n_failed = 0usize;
    for (c, r) in &rows {
        match r {
            Ok(v) => {
                csv.push_str(&format!(
                    "{},{},{},{},{v:.6}\n",
                    c.kind.name(),
                    c.n_experts,
                    c.hidden,
                    c.seed
                ));
            }
            Err(e) => {
                n_failed += 1;
                failures.push_str(&format!(
                    "{},{},{},{},{}\n",
                    c.kind.name(),
                    c.n_experts,
                    c.hidden,
                    c.seed,
                    e.replace(',', ";").replace('\n', " ")
                ));
            }
        }
    }
    let sweep_path = args.out.join("sweep.csv");
    write_file(&sweep_path, &csv)?;
    let mut manifest = ManifestBuilder::new("sweep", 0)
        .config("experts", settings.experts.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .config("hidden_dims", settings.hidden_dims.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .config("seeds", settings.seeds.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .config("ablation", args.ablation)
        .config("jobs", settings.jobs)
        .config("lr", settings.lr)
        .config("l2", settings.l2)
        .config("epochs", settings.epochs)
        .config("patience", settings.patience)
        .input(&args.data)
        .input(&args.base_checkpoint)
        .artifact(&sweep_path);
    if n_failed > 0 {
        let fail_path = args.out.join("failed_cells.csv");
        write_file(&fail_path, &failures)?;
        manifest = manifest.artifact(&fail_path);
    }
    manifest.write(&args.out)?;
    println!(
        "sweep finished: {} cells, {} failed; results in {}",
        rows.len(),
        n_failed,
        sweep_path.display()
    );
    if n_failed > 0 {
        return Err(runtime(format!("{n_failed} sweep cells failed")));
    }
    Ok(())
}

pub fn report_cmd(args: &ReportArgs) -> Result<(), CliError> {
    require_file(&args.base, "base metrics file")?;
    require_file(&args.challenger, "challenger metrics file")?;
    let read = |path: &Path| -> Result<MetricsReport, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
        parse_metrics_csv(&text).map_err(runtime)
    };
    let base = read(&args.base)?;
    let challenger = read(&args.challenger)?;
    let report = gain_report(&base, &challenger).map_err(runtime)?;
    prepare_run_dir(&args.out)?;
    let gains_path = args.out.join("gains.csv");
    let plot_path = args.out.join("gain_vs_occurrence.csv");
    write_file(&gains_path, &gains_to_csv(&report))?;
    write_file(&plot_path, &gain_vs_occurrence_csv(&report))?;
    ManifestBuilder::new("report", 0)
        .input(&args.base)
        .input(&args.challenger)
        .artifact(&gains_path)
        .artifact(&plot_path)
        .write(&args.out)?;
    match report.macro_gain_pct {
        Some(g) => println!(
            "macro AUPRC {:.6} -> {:.6} ({:+.2}%)",
            report.macro_base, report.macro_challenger, g
        ),
        None => println!(
            "macro AUPRC {:.6} -> {:.6} (gain n/a)",
            report.macro_base, report.macro_challenger
        ),
    }
    Ok(())
}
