//! Run configuration: a flat `key = value` file overlaid by command-line
//! flags.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, then
//! flags (`--set key=value` and the dedicated flags, in that order).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use gemfm::graph::DEFAULT_LOW_CARDINALITY;
use gemfm::train::{DecayScope, TrainConfig};

/// Every key the file format understands.
pub const KEYS: &[&str] = &[
    "data",
    "split",
    "train",
    "validation",
    "test",
    "field_map",
    "graph",
    "graph_mode",
    "graph_fields",
    "graph_pairs",
    "low_cardinality",
    "save_graph",
    "model",
    "report",
    "out",
    "clip",
    "threads",
    "dim",
    "layers",
    "activation",
    "optimizer",
    "learning_rate",
    "l2_lambda",
    "regularize_bias",
    "decay_scope",
    "dropout",
    "batch_size",
    "max_epochs",
    "patience",
    "sampling_ratio",
    "stop_metric",
    "seed",
];

/// Raw string settings, keyed by config name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings(BTreeMap<String, String>);

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            out.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", n + 1))?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            bail!("unknown config key `{key}`");
        }
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Parses `key=value` as given to `--set`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("`{pair}` is not of the form key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| anyhow!("bad value `{v}` for `{key}`: {e}"))
            })
            .transpose()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }
}

/// Where the instances come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Presplit {
        train: PathBuf,
        validation: Option<PathBuf>,
        test: Option<PathBuf>,
    },
    Single {
        path: PathBuf,
        ratios: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphSpec {
    AllPairs,
    /// Field-name pairs.
    Pairs(Vec<(String, String)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<DataSource>,
    pub field_map: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub graph_spec: Option<GraphSpec>,
    /// Field names to include; `None` means all fields.
    pub graph_fields: Option<Vec<String>>,
    pub low_cardinality: usize,
    pub save_graph: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Clamp predictions into `[0, 1]` before scoring or writing them.
    pub clip: bool,
    pub threads: usize,
}

fn parse_ratios(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| anyhow!("bad split `{text}`: {e}"))?;
    <[f64; 3]>::try_from(parts).map_err(|_| anyhow!("split needs three ratios, got `{text}`"))
}

fn parse_list(text: &str) -> Vec<String> {
    text.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    parse_list(text)
        .into_iter()
        .map(|p| {
            p.split_once(':')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .ok_or_else(|| anyhow!("field pair `{p}` should look like a:b"))
        })
        .collect()
}

fn parse_decay_scope(text: &str) -> Result<DecayScope> {
    match text {
        "touched" => Ok(DecayScope::Touched),
        "full" => Ok(DecayScope::Full),
        other => bail!("unknown decay_scope `{other}` (touched or full)"),
    }
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let mut t = TrainConfig::default();
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = s.parsed(stringify!($field))? {
                    t.$field = v;
                }
            };
        }
        take!(dim);
        take!(layers);
        take!(activation);
        take!(optimizer);
        take!(learning_rate);
        take!(l2_lambda);
        take!(regularize_bias);
        take!(dropout);
        take!(batch_size);
        take!(max_epochs);
        take!(patience);
        take!(sampling_ratio);
        take!(stop_metric);
        take!(seed);
        if let Some(v) = s.get("decay_scope") {
            t.decay_scope = parse_decay_scope(v)?;
        }

        let presplit = ["train", "validation", "test"]
            .iter()
            .any(|k| s.get(k).is_some());
        let data = match (s.path("data"), presplit) {
            (Some(_), true) => {
                bail!("give either `data` (with `split`) or `train`/`validation`/`test`, not both")
            }
            (Some(path), false) => Some(DataSource::Single {
                path,
                ratios: parse_ratios(s.get("split").unwrap_or("0.8,0.1,0.1"))?,
            }),
            (None, true) => Some(DataSource::Presplit {
                train: s
                    .path("train")
                    .context("`validation` or `test` given without `train`")?,
                validation: s.path("validation"),
                test: s.path("test"),
            }),
            (None, false) => None,
        };
        if s.get("split").is_some() && !matches!(data, Some(DataSource::Single { .. })) {
            bail!("`split` only applies together with `data`");
        }

        let pairs = s.get("graph_pairs").map(parse_pairs).transpose()?;
        let graph_spec = match (s.get("graph_mode"), pairs) {
            (Some("all_pairs"), None) => Some(GraphSpec::AllPairs),
            (Some("all_pairs"), Some(_)) => bail!("`graph_pairs` requires graph_mode = pairs"),
            (Some("pairs") | None, Some(p)) => Some(GraphSpec::Pairs(p)),
            (Some("pairs"), None) => bail!("graph_mode = pairs needs `graph_pairs`"),
            (Some(other), _) => bail!("unknown graph_mode `{other}` (all_pairs or pairs)"),
            (None, None) => None,
        };

        let threads = s.parsed("threads")?.unwrap_or(1);
        if threads == 0 {
            bail!("threads must be at least 1");
        }
        Ok(RunConfig {
            train: t,
            data,
            field_map: s.path("field_map"),
            graph: s.path("graph"),
            graph_spec,
            graph_fields: s.get("graph_fields").map(parse_list),
            low_cardinality: s
                .parsed("low_cardinality")?
                .unwrap_or(DEFAULT_LOW_CARDINALITY),
            save_graph: s.path("save_graph"),
            model: s.path("model"),
            report: s.path("report"),
            out: s.path("out"),
            clip: s.parsed("clip")?.unwrap_or(false),
            threads,
        })
    }

    /// Whether a graph file or construction rule is configured.
    pub fn has_graph_settings(&self) -> bool {
        self.graph.is_some() || self.graph_spec.is_some()
    }

    /// Effective values of the keys not covered by [`TrainConfig::entries`].
    pub fn extra_entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string())
        };
        let mut out = Vec::new();
        match &self.data {
            Some(DataSource::Single { path: p, ratios }) => {
                out.push(("data", p.display().to_string()));
                out.push((
                    "split",
                    format!("{},{},{}", ratios[0], ratios[1], ratios[2]),
                ));
            }
            Some(DataSource::Presplit {
                train,
                validation,
                test,
            }) => {
                out.push(("train", train.display().to_string()));
                out.push(("validation", path(validation)));
                out.push(("test", path(test)));
            }
            None => out.push(("data", "none".into())),
        }
        out.push(("field_map", path(&self.field_map)));
        out.push(("graph", path(&self.graph)));
        out.push((
            "graph_mode",
            match &self.graph_spec {
                None => "none".into(),
                Some(GraphSpec::AllPairs) => "all_pairs".into(),
                Some(GraphSpec::Pairs(_)) => "pairs".into(),
            },
        ));
        if let Some(GraphSpec::Pairs(p)) = &self.graph_spec {
            let joined: Vec<String> = p.iter().map(|(a, b)| format!("{a}:{b}")).collect();
            out.push(("graph_pairs", joined.join(",")));
        }
        out.push((
            "graph_fields",
            self.graph_fields
                .as_ref()
                .map_or_else(|| "all".to_string(), |f| f.join(",")),
        ));
        out.push(("low_cardinality", self.low_cardinality.to_string()));
        out.push(("save_graph", path(&self.save_graph)));
        out.push(("model", path(&self.model)));
        out.push(("report", path(&self.report)));
        out.push(("clip", self.clip.to_string()));
        out.push(("threads", self.threads.to_string()));
        out
    }
}
