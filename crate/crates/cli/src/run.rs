//! Turns a validated config into an engine plus instance pumps and drives
//! training epochs with early stopping, file metrics, and weight dumps.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use driftnet::data::{
    gen_list_reduction, gen_trees, gen_two_hop_deduction, load_mnist_idx, parse_sst,
    GRAPH_CLASSES, GRAPH_EDGE_TYPES, GRAPH_VOCAB, LIST_CLASSES, LIST_VOCAB, TREE_CLASSES,
};
use driftnet::gradcheck::{check_gradients, DEFAULT_EPSILON, DEFAULT_TOLERANCE};
use driftnet::models::{
    build_model, pump_ggsnn, pump_mlp, pump_rnn, pump_tree, ModelSpec,
};
use driftnet::runtime::{build_replicated, Engine, EngineConfig, InstancePump, Placement};

use crate::config::{DatasetSpec, RunConfig};
use crate::metrics::{median, read_metrics, EpochRow, EventLog, MetricsCsv};

// Every random artifact of a run derives from the single config seed; the
// two corpora get distinct salted streams so neither aliases parameter init.
const TRAIN_SALT: u64 = 0x74_72_61_69_6e;
const VALID_SALT: u64 = 0x76_61_6c_69_64;

pub struct Corpus {
    pub train: Vec<InstancePump>,
    pub valid: Vec<InstancePump>,
}

/// Generates or loads both corpora as ready-to-pump instances.
pub fn build_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let seed = cfg.train.seed;
    match (&cfg.model, &cfg.dataset) {
        (
            ModelSpec::Rnn {
                vocab,
                hidden,
                classes,
                ..
            },
            DatasetSpec::ListReduction { train, valid },
        ) => {
            if *vocab < LIST_VOCAB {
                bail!("rnn vocab {vocab} is below the task vocabulary {LIST_VOCAB}");
            }
            if *classes != LIST_CLASSES {
                bail!("rnn classes {classes} must equal the task's {LIST_CLASSES}");
            }
            let make = |n: usize, salt: u64| -> Vec<InstancePump> {
                gen_list_reduction(n, seed ^ salt)
                    .iter()
                    .enumerate()
                    .map(|(i, inst)| {
                        pump_rnn(i as i64, &inst.tokens(), *hidden, inst.label as usize)
                    })
                    .collect()
            };
            Ok(Corpus {
                train: make(*train, TRAIN_SALT),
                valid: make(*valid, VALID_SALT),
            })
        }
        (
            ModelSpec::Ggsnn {
                vocab,
                edge_types,
                classes,
                ..
            },
            DatasetSpec::TwoHop {
                train,
                valid,
                nodes,
            },
        ) => {
            if *vocab != GRAPH_VOCAB {
                bail!("ggsnn vocab {vocab} must equal the task's {GRAPH_VOCAB}");
            }
            if *edge_types != GRAPH_EDGE_TYPES as usize {
                bail!("ggsnn edge_types {edge_types} must equal the task's {GRAPH_EDGE_TYPES}");
            }
            if *classes != GRAPH_CLASSES {
                bail!("ggsnn classes {classes} must equal the task's {GRAPH_CLASSES}");
            }
            let make = |n: usize, salt: u64| -> Vec<InstancePump> {
                gen_two_hop_deduction(n, *nodes, seed ^ salt)
                    .iter()
                    .enumerate()
                    .map(|(i, g)| pump_ggsnn(i as i64, g))
                    .collect()
            };
            Ok(Corpus {
                train: make(*train, TRAIN_SALT),
                valid: make(*valid, VALID_SALT),
            })
        }
        (
            ModelSpec::TreeRnn {
                vocab: model_vocab,
                classes,
                ..
            },
            DatasetSpec::Trees {
                train,
                valid,
                depth,
                vocab,
            },
        ) => {
            if model_vocab < vocab {
                bail!("tree_rnn vocab {model_vocab} is below the dataset vocabulary {vocab}");
            }
            if *classes != TREE_CLASSES {
                bail!("tree_rnn classes {classes} must equal the task's {TREE_CLASSES}");
            }
            let make = |n: usize, salt: u64| -> Vec<InstancePump> {
                gen_trees(n, *depth, *vocab, seed ^ salt)
                    .iter()
                    .enumerate()
                    .map(|(i, t)| pump_tree(i as i64, t))
                    .collect()
            };
            Ok(Corpus {
                train: make(*train, TRAIN_SALT),
                valid: make(*valid, VALID_SALT),
            })
        }
        (
            ModelSpec::TreeRnn {
                vocab: model_vocab,
                classes,
                ..
            },
            DatasetSpec::Sst {
                train_path,
                valid_path,
            },
        ) => {
            // Parse both files as one text so token ids share a vocabulary.
            let train_text = std::fs::read_to_string(train_path)
                .with_context(|| format!("reading {}", train_path.display()))?;
            let valid_text = std::fs::read_to_string(valid_path)
                .with_context(|| format!("reading {}", valid_path.display()))?;
            let n_train = train_text.lines().filter(|l| !l.trim().is_empty()).count();
            let (trees, vocab) = parse_sst(&format!("{train_text}\n{valid_text}"))
                .with_context(|| format!("parsing {}", train_path.display()))?;
            if trees.len() < n_train {
                bail!("{}: no trees parsed", valid_path.display());
            }
            if *model_vocab < vocab.len() {
                bail!(
                    "tree_rnn vocab {model_vocab} is below the file vocabulary {}",
                    vocab.len()
                );
            }
            if let Some(bad) = trees
                .iter()
                .flat_map(|t| t.labels.iter())
                .find(|&&l| l as usize >= *classes)
            {
                bail!("label {bad} outside the model's {classes} classes");
            }
            let pumps = |slice: &[driftnet::data::TreeInstance]| -> Vec<InstancePump> {
                slice
                    .iter()
                    .enumerate()
                    .map(|(i, t)| pump_tree(i as i64, t))
                    .collect()
            };
            Ok(Corpus {
                train: pumps(&trees[..n_train]),
                valid: pumps(&trees[n_train..]),
            })
        }
        (
            ModelSpec::Mlp { input, classes, .. },
            DatasetSpec::Mnist {
                train_images,
                train_labels,
                valid_images,
                valid_labels,
            },
        ) => {
            let load = |images: &Path, labels: &Path| -> Result<Vec<InstancePump>> {
                let set = load_mnist_idx(images, labels)
                    .with_context(|| format!("loading {}", images.display()))?;
                if let Some(img) = set.images.first() {
                    if img.cols() != *input {
                        bail!(
                            "mlp input {input} does not match {}-pixel images in {}",
                            img.cols(),
                            images.display()
                        );
                    }
                }
                if let Some(bad) = set.labels.iter().find(|&&l| l as usize >= *classes) {
                    bail!("label {bad} outside the model's {classes} classes");
                }
                Ok(set
                    .images
                    .iter()
                    .zip(&set.labels)
                    .enumerate()
                    .map(|(i, (img, &l))| pump_mlp(i as i64, img, l as usize))
                    .collect())
            };
            Ok(Corpus {
                train: load(train_images, train_labels)?,
                valid: load(valid_images, valid_labels)?,
            })
        }
        _ => bail!(
            "dataset kind does not fit model family `{}`",
            cfg.model.family_name()
        ),
    }
}

fn build_graph(cfg: &RunConfig) -> Result<driftnet::ir::IrGraph> {
    let mut graph = build_model(&cfg.model).map_err(|errs| {
        anyhow!(
            "invalid model graph: {}",
            errs.iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        )
    })?;
    if cfg.train.replicas > 1 {
        let names: Vec<String> = if cfg.train.replicate.is_empty() {
            graph
                .node_ids()
                .filter(|&id| graph.node(id).kind.is_parameterized())
                .map(|id| graph.name(id).to_string())
                .collect()
        } else {
            cfg.train.replicate.clone()
        };
        for name in names {
            graph = build_replicated(&graph, &name, cfg.train.replicas)?;
        }
    }
    Ok(graph)
}

pub fn prepare(cfg: &RunConfig) -> Result<(Engine, Corpus)> {
    let corpus = build_corpus(cfg)?;
    let graph = build_graph(cfg)?;
    let workers = cfg.train.threads;
    let placement = if cfg.train.placement.is_empty() {
        None
    } else {
        let mut of = Placement::default_for(&graph, workers)?
            .assignments()
            .to_vec();
        for (name, &worker) in &cfg.train.placement {
            let id = graph
                .node_id(name)
                .with_context(|| format!("placement pin for unknown node `{name}`"))?;
            of[id.0 as usize] = worker;
        }
        Some(Placement::new(&graph, workers, of)?)
    };
    let engine = Engine::new(
        graph,
        placement,
        EngineConfig {
            workers,
            max_active_keys: cfg.train.max_active_keys,
            optimizer: cfg.train.optimizer,
            min_update_frequency: cfg.train.min_update_frequency,
            muf_overrides: cfg.train.muf_overrides.clone(),
            seed: cfg.train.seed,
            ..EngineConfig::default()
        },
    )?;
    Ok((engine, corpus))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub epochs_run: usize,
    pub final_valid_acc: f64,
    pub epochs_to_target: Option<usize>,
    pub wall_s_to_target: Option<f64>,
    /// Training instances per second over all epochs.
    pub inst_per_s: f64,
}

/// One full training run into `out_dir`: per-epoch CSV metrics, a JSONL
/// event log, the resolved config, final weights, and a summary. Totals are
/// recomputed from the CSV on disk so the written schema is exercised.
pub fn train_once(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;

    let (mut engine, corpus) = prepare(cfg)?;
    let csv_path = out_dir.join("metrics.csv");
    let mut csv = MetricsCsv::create(&csv_path)?;
    let mut events = EventLog::create(&out_dir.join("events.jsonl"))?;
    events.emit(
        "run_start",
        json!({
            "seed": cfg.train.seed,
            "model": cfg.model.family_name(),
            "train_instances": corpus.train.len(),
            "valid_instances": corpus.valid.len(),
            "threads": cfg.train.threads,
            "max_active_keys": cfg.train.max_active_keys,
            "min_update_frequency": cfg.train.min_update_frequency,
            "replicas": cfg.train.replicas,
        }),
    )?;

    let target = cfg.train.target_accuracy;
    let mut reached: Option<usize> = None;
    let mut epochs_run = 0;
    let mut final_acc = 0.0;
    for epoch in 1..=cfg.train.epochs {
        let tr = engine.run_train_epoch(&corpus.train)?;
        let ev = engine.run_eval(&corpus.valid)?;
        epochs_run = epoch;
        final_acc = ev.loss.accuracy();
        let row = EpochRow {
            epoch,
            wall_s: tr.wall.as_secs_f64(),
            train_loss: tr.loss.mean_loss(),
            valid_acc: final_acc,
            inst_per_s: tr.instances_per_sec(),
            mean_staleness: tr.staleness.mean(),
        };
        csv.write(&row)?;
        events.emit(
            "epoch",
            json!({
                "epoch": epoch,
                "wall_s": row.wall_s,
                "train_loss": row.train_loss,
                "valid_acc": row.valid_acc,
                "inst_per_s": row.inst_per_s,
                "mean_staleness": row.mean_staleness,
                "max_staleness": tr.staleness.max,
                "updates": tr.updates,
                "messages_processed": tr.messages_processed,
                "skipped_non_finite": tr.skipped_non_finite,
                "max_active_observed": tr.max_active_observed,
            }),
        )?;
        println!(
            "epoch {epoch:>3}  loss {:.4}  acc {:.4}  {:>8.1} inst/s  staleness {:.2}",
            row.train_loss, row.valid_acc, row.inst_per_s, row.mean_staleness
        );
        if target.is_some_and(|t| final_acc >= t) {
            reached = Some(epoch);
            events.emit("target_reached", json!({"epoch": epoch, "valid_acc": final_acc}))?;
            break;
        }
    }

    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("weights.json"))?),
        &engine.params_snapshot(),
    )?;

    let rows = read_metrics(&csv_path)?;
    let total_wall: f64 = rows.iter().map(|r| r.wall_s).sum();
    let total_inst = corpus.train.len() * rows.len();
    let wall_to_target = reached.map(|e| {
        rows.iter()
            .take_while(|r| r.epoch <= e)
            .map(|r| r.wall_s)
            .sum()
    });
    let summary = TrainSummary {
        out_dir: out_dir.to_path_buf(),
        seed: cfg.train.seed,
        epochs_run,
        final_valid_acc: final_acc,
        epochs_to_target: reached,
        wall_s_to_target: wall_to_target,
        inst_per_s: if total_wall > 0.0 {
            total_inst as f64 / total_wall
        } else {
            0.0
        },
    };
    events.emit("run_end", serde_json::to_value(&summary)?)?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Runs `repeat` seeds side by side and summarizes the runs' medians, the
/// robust way to quote time-to-target.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, repeat: usize) -> Result<()> {
    if repeat <= 1 {
        let s = train_once(cfg, out_dir)?;
        print_outcome(&s);
        return Ok(());
    }
    let mut runs = Vec::with_capacity(repeat);
    for k in 0..repeat {
        let mut c = cfg.clone();
        c.train.seed = cfg.train.seed.wrapping_add(k as u64);
        let dir = out_dir.join(format!("run-{k}"));
        println!("--- run {k} (seed {}) ---", c.train.seed);
        runs.push(train_once(&c, &dir)?);
    }
    let mut epochs: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.epochs_to_target.map(|e| e as f64))
        .collect();
    let mut walls: Vec<f64> = runs.iter().filter_map(|r| r.wall_s_to_target).collect();
    let summary = json!({
        "runs": runs,
        "reached_target": epochs.len(),
        "median_epochs_to_target": median(&mut epochs),
        "median_wall_s_to_target": median(&mut walls),
    });
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!(
        "{} of {repeat} runs reached target; median epochs {:?}, median wall {:?} s",
        epochs.len(),
        median(&mut epochs),
        median(&mut walls),
    );
    Ok(())
}

fn print_outcome(s: &TrainSummary) {
    match s.epochs_to_target {
        Some(e) => println!(
            "reached target in {e} epochs ({:.1} s wall, {:.1} inst/s)",
            s.wall_s_to_target.unwrap_or(0.0),
            s.inst_per_s
        ),
        None => println!(
            "finished {} epochs at accuracy {:.4} ({:.1} inst/s)",
            s.epochs_run, s.final_valid_acc, s.inst_per_s
        ),
    }
}

/// One small instance of the configured task, for gradient checking.
fn probe_instance(cfg: &RunConfig) -> Result<InstancePump> {
    let mut corpus = build_corpus(&probe_config(cfg))?;
    if corpus.train.is_empty() {
        bail!("dataset produced no instances to check");
    }
    Ok(corpus.train.swap_remove(0))
}

/// Shrinks synthetic corpora to a single instance; file-backed datasets are
/// loaded as-is and the first instance used.
fn probe_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.dataset = match c.dataset {
        DatasetSpec::ListReduction { .. } => DatasetSpec::ListReduction { train: 1, valid: 1 },
        DatasetSpec::TwoHop { nodes, .. } => DatasetSpec::TwoHop {
            train: 1,
            valid: 1,
            nodes,
        },
        DatasetSpec::Trees { depth, vocab, .. } => DatasetSpec::Trees {
            train: 1,
            valid: 1,
            depth,
            vocab,
        },
        other => other,
    };
    c
}

pub fn cmd_gradcheck(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<()> {
    let pump = probe_instance(cfg)?;
    let graph = build_graph(cfg)?;
    let report = check_gradients(
        graph,
        &pump,
        cfg.train.seed,
        DEFAULT_EPSILON,
        DEFAULT_TOLERANCE,
    )?;
    println!("{report}");
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let doc = json!({
            "tolerance": report.tolerance,
            "epsilon": report.epsilon,
            "passed": report.passed(),
            "max_rel_err": report.max_rel_err(),
            "blocks": report.blocks.iter().map(|b| {
                json!({"name": b.name, "elements": b.elements, "max_rel_err": b.max_rel_err})
            }).collect::<Vec<_>>(),
        });
        std::fs::write(
            dir.join("gradcheck.json"),
            serde_json::to_string_pretty(&doc)?,
        )?;
    }
    if !report.passed() {
        bail!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_err(),
            report.tolerance
        );
    }
    Ok(())
}
