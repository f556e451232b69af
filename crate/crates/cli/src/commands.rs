use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use gemfm::data::{load_libfm, split_dataset};
use gemfm::eval::{clip_unit, count_params};
use gemfm::graph::{build_graph, low_cardinality_fields, FeatureGraph, GraphMode};
use gemfm::model::predict_batch;
use gemfm::train::{self, RunReport};
use gemfm::{seed, FeatureSpace, MetricReport, ModelParams, SparseInstance};

use crate::config::{DataSource, GraphSpec, RunConfig};

struct Splits {
    train: Vec<SparseInstance>,
    validation: Vec<SparseInstance>,
    test: Vec<SparseInstance>,
}

fn read_data(path: &Path) -> Result<Vec<SparseInstance>> {
    load_libfm(path).with_context(|| format!("loading {}", path.display()))
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    match cfg
        .data
        .as_ref()
        .context("no data given: use --data or --train")?
    {
        DataSource::Single { path, ratios } => {
            let all = read_data(path)?;
            let s = split_dataset(all, *ratios, seed::sub_seed(cfg.train.seed, seed::SPLIT))
                .with_context(|| format!("splitting {}", path.display()))?;
            Ok(Splits {
                train: s.train,
                validation: s.validation,
                test: s.test,
            })
        }
        DataSource::Presplit {
            train,
            validation,
            test,
        } => Ok(Splits {
            train: read_data(train)?,
            validation: validation
                .as_deref()
                .map(read_data)
                .transpose()?
                .unwrap_or_default(),
            test: test
                .as_deref()
                .map(read_data)
                .transpose()?
                .unwrap_or_default(),
        }),
    }
}

/// The field map if one is configured, otherwise a single field covering
/// every index seen in `instances`.
fn feature_space(cfg: &RunConfig, instances: &[&[SparseInstance]]) -> Result<FeatureSpace> {
    let space = match &cfg.field_map {
        Some(path) => FeatureSpace::load_field_map(path)
            .with_context(|| format!("loading field map {}", path.display()))?,
        None => {
            let m = instances
                .iter()
                .flat_map(|set| set.iter())
                .filter_map(SparseInstance::max_index)
                .max()
                .map_or(0, |i| i + 1);
            log::warn!("no field map given; treating all {m} features as one field");
            FeatureSpace::single_field("all", m)?
        }
    };
    for set in instances {
        space.validate(set)?;
    }
    Ok(space)
}

fn field_ids(space: &FeatureSpace, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            space.field_id(n).ok_or_else(|| {
                anyhow!(
                    "unknown field `{n}` (known: {})",
                    space.field_names().join(", ")
                )
            })
        })
        .collect()
}

fn construct_graph(
    cfg: &RunConfig,
    spec: &GraphSpec,
    train: &[SparseInstance],
    space: &FeatureSpace,
) -> Result<FeatureGraph> {
    let included = match &cfg.graph_fields {
        Some(names) => field_ids(space, names)?,
        None => (0..space.num_fields()).collect(),
    };
    for f in low_cardinality_fields(space, &included, cfg.low_cardinality) {
        eprintln!(
            "warning: field `{}` has only {} feature(s); its nodes will link to nearly everything",
            space.field_names()[f],
            space.cardinality(f)
        );
    }
    let mode = match spec {
        GraphSpec::AllPairs => GraphMode::AllPairs,
        GraphSpec::Pairs(pairs) => GraphMode::PairList(
            pairs
                .iter()
                .map(|(a, b)| {
                    let ids = field_ids(space, &[a.clone(), b.clone()])?;
                    Ok((ids[0], ids[1]))
                })
                .collect::<Result<_>>()?,
        ),
    };
    Ok(build_graph(train, space, &mode, &included)?)
}

fn read_graph(path: &Path) -> Result<FeatureGraph> {
    let file = File::open(path).with_context(|| format!("opening graph {}", path.display()))?;
    FeatureGraph::read_edge_list(file).with_context(|| format!("reading graph {}", path.display()))
}

fn write_graph(graph: &FeatureGraph, path: &Path) -> Result<()> {
    let mut out =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    graph.write_edge_list(&mut out)?;
    out.flush()?;
    Ok(())
}

fn print_graph_stats(graph: &FeatureGraph) {
    println!("nodes {}", graph.num_nodes());
    println!("edges {}", graph.num_edges());
    println!("degree histogram:");
    for (bucket, count) in graph.degree_histogram().iter().enumerate() {
        let label = match bucket {
            0 => "0".to_string(),
            1 => "1".to_string(),
            k => format!("{}-{}", 1usize << (k - 1), (1usize << k) - 1),
        };
        println!("  {label:>11} {count}");
    }
}

pub fn build_graph_cmd(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out.as_ref().context("build-graph needs --out")?;
    let spec = cfg.graph_spec.clone().unwrap_or(GraphSpec::AllPairs);
    let splits = load_splits(cfg)?;
    if splits.train.is_empty() {
        bail!("no training instances to build a graph from");
    }
    let space = feature_space(cfg, &[&splits.train, &splits.validation, &splits.test])?;
    let graph = construct_graph(cfg, &spec, &splits.train, &space)?;
    write_graph(&graph, out)?;
    print_graph_stats(&graph);
    Ok(())
}

fn write_report(report: &RunReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_string())
        .with_context(|| format!("writing report {}", path.display()))
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    if splits.validation.is_empty() {
        bail!("training needs a non-empty validation set (--validation or --data with --split)");
    }
    let space = feature_space(cfg, &[&splits.train, &splits.validation, &splits.test])?;

    let graph = if cfg.train.layers == 0 {
        if cfg.has_graph_settings() {
            log::warn!("layers = 0 trains a plain FM; ignoring the graph settings");
        }
        None
    } else if let Some(path) = &cfg.graph {
        Some(read_graph(path)?)
    } else if let Some(spec) = &cfg.graph_spec {
        let g = construct_graph(cfg, spec, &splits.train, &space)?;
        if let Some(path) = &cfg.save_graph {
            write_graph(&g, path)?;
        }
        Some(g)
    } else {
        bail!(
            "layers = {} needs a graph: pass --graph FILE or --graph-mode",
            cfg.train.layers
        );
    };

    let (params, mut report) = train::train(
        &splits.train,
        &splits.validation,
        &space,
        graph.as_ref(),
        &cfg.train,
    )?;
    for (k, v) in cfg.extra_entries() {
        report.push_config(k, v);
    }
    if !splits.test.is_empty() {
        let norm = graph.as_ref().map(FeatureGraph::normalize);
        report.set_final(
            "test",
            train::evaluate(&splits.test, &params, norm.as_ref())?,
        );
    }

    match &cfg.model {
        Some(path) => params
            .save(path)
            .with_context(|| format!("writing model {}", path.display()))?,
        None => log::warn!("no --model given; the checkpoint is not saved"),
    }
    if let Some(path) = &cfg.report {
        write_report(&report, path)?;
    }
    if let Some(best) = report.best_epoch {
        println!("best_epoch {best} of {}", report.epochs.len());
    }
    for (split, metrics) in &report.finals {
        println!("{split} {metrics}");
    }
    Ok(())
}

/// Loads the checkpoint, the file to score, and the graph the model needs.
fn load_for_scoring(
    cfg: &RunConfig,
) -> Result<(ModelParams, Vec<SparseInstance>, Option<FeatureGraph>)> {
    let model_path = cfg.model.as_ref().context("--model is required")?;
    let params = ModelParams::load(model_path)
        .with_context(|| format!("loading model {}", model_path.display()))?;
    let data = match &cfg.data {
        Some(DataSource::Single { path, .. }) => read_data(path)?,
        Some(DataSource::Presplit { .. }) => bail!("pass the file to score with --data"),
        None => bail!("--data is required"),
    };
    let graph = match (params.num_layers(), &cfg.graph) {
        (0, Some(_)) => {
            log::warn!("the model is a plain FM; ignoring --graph");
            None
        }
        (0, None) => None,
        (l, None) => {
            bail!("the model has {l} graph layer(s); pass the training graph with --graph")
        }
        (_, Some(path)) => Some(read_graph(path)?),
    };
    Ok((params, data, graph))
}

fn score(
    cfg: &RunConfig,
    params: &ModelParams,
    data: &[SparseInstance],
    graph: Option<&FeatureGraph>,
) -> Result<Vec<f64>> {
    let norm = graph.map(FeatureGraph::normalize);
    let mut predictions = predict_batch(data, norm.as_ref(), params)?;
    if cfg.clip {
        clip_unit(&mut predictions);
    }
    Ok(predictions)
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Result<MetricReport> {
    let (params, data, graph) = load_for_scoring(cfg)?;
    let predictions = score(cfg, &params, &data, graph.as_ref())?;
    let labels: Vec<f64> = data.iter().map(|x| x.label).collect();
    let report = MetricReport::compute(&predictions, &labels, count_params(&params))?;
    println!("{report}");
    Ok(report)
}

pub fn predict_cmd(cfg: &RunConfig) -> Result<()> {
    let out_path = cfg.out.as_ref().context("predict needs --out")?;
    let (params, data, graph) = load_for_scoring(cfg)?;
    let predictions = score(cfg, &params, &data, graph.as_ref())?;
    let mut out = BufWriter::new(
        File::create(out_path).with_context(|| format!("creating {}", out_path.display()))?,
    );
    for p in &predictions {
        writeln!(out, "{p}")?;
    }
    out.flush()?;
    log::info!(
        "wrote {} predictions to {}",
        predictions.len(),
        out_path.display()
    );
    Ok(())
}
