//! Sparse transaction datasets in libFM text form.
//!
//! An instance is a label plus `(feature index, value)` pairs kept in
//! strictly increasing index order. A [`FeatureSpace`] binds indices to the
//! fields they describe (user, item, city, ...), which graph construction and
//! negative sampling both rely on.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read};
use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Problems found in a single libFM line.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LineError {
    #[error("line is empty")]
    Empty,
    #[error("invalid label `{0}`")]
    BadLabel(String),
    #[error("malformed token `{0}` (expected index:value)")]
    MalformedToken(String),
    #[error("invalid feature index in `{0}`")]
    BadIndex(String),
    #[error("non-numeric value in `{0}`")]
    BadValue(String),
    #[error("duplicate index {0}")]
    DuplicateIndex(usize),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: LineError,
    },
    #[error("field map line {line}: {msg}")]
    FieldMap { line: usize, msg: String },
    #[error("feature index {index} out of range for {num_features} features")]
    IndexOutOfRange { index: usize, num_features: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty dataset")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// One transaction: a real-valued target and its active features.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseInstance {
    pub label: f64,
    entries: Vec<(usize, f64)>,
}

impl SparseInstance {
    /// Builds an instance, sorting the entries. Repeated indices are rejected.
    pub fn new(label: f64, mut entries: Vec<(usize, f64)>) -> Result<Self, LineError> {
        entries.sort_by_key(|&(i, _)| i);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(LineError::DuplicateIndex(w[0].0));
        }
        Ok(SparseInstance { label, entries })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest feature index referenced, if any.
    pub fn max_index(&self) -> Option<usize> {
        self.entries.last().map(|&(i, _)| i)
    }
}

impl fmt::Display for SparseInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label)?;
        for (i, v) in &self.entries {
            write!(f, " {i}:{v}")?;
        }
        Ok(())
    }
}

fn strip_comment(text: &str) -> &str {
    match text.find('#') {
        Some(pos) => &text[..pos],
        None => text,
    }
}

/// Parses `label idx:value idx:value ...`. Anything after `#` is ignored.
pub fn parse_libfm_line(text: &str) -> Result<SparseInstance, LineError> {
    let mut tokens = strip_comment(text).split_whitespace();
    let label_tok = tokens.next().ok_or(LineError::Empty)?;
    let label: f64 = label_tok
        .parse()
        .map_err(|_| LineError::BadLabel(label_tok.to_string()))?;

    let mut entries = Vec::new();
    for tok in tokens {
        let (idx, val) = tok
            .split_once(':')
            .ok_or_else(|| LineError::MalformedToken(tok.to_string()))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| LineError::BadIndex(tok.to_string()))?;
        let val: f64 = val
            .parse()
            .map_err(|_| LineError::BadValue(tok.to_string()))?;
        entries.push((idx, val));
    }
    SparseInstance::new(label, entries)
}

/// Reads a whole libFM file. Blank and comment-only lines are skipped; errors
/// carry the 1-based line number.
pub fn read_libfm<R: Read>(reader: R) -> Result<Vec<SparseInstance>> {
    let mut lines = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if strip_comment(&line).trim().is_empty() {
            continue;
        }
        lines.push((n + 1, line));
    }
    lines
        .par_iter()
        .map(|(n, line)| {
            parse_libfm_line(line).map_err(|source| DataError::Parse { line: *n, source })
        })
        .collect()
}

pub fn load_libfm(path: impl AsRef<Path>) -> Result<Vec<SparseInstance>> {
    read_libfm(std::fs::File::open(path)?)
}

/// Global feature-index to field mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpace {
    num_features: usize,
    field_of: Vec<usize>,
    field_names: Vec<String>,
    field_ranges: Vec<Range<usize>>,
}

impl FeatureSpace {
    /// Builds a space from contiguous `[start, end)` ranges given in order.
    pub fn from_ranges(fields: Vec<(String, Range<usize>)>) -> Result<Self> {
        let mut expected = 0;
        let mut names = Vec::with_capacity(fields.len());
        let mut ranges: Vec<Range<usize>> = Vec::with_capacity(fields.len());
        for (pos, (name, range)) in fields.into_iter().enumerate() {
            let line = pos + 1;
            let err = |msg: String| DataError::FieldMap { line, msg };
            if range.start >= range.end {
                return Err(err(format!("field `{name}` has an empty range")));
            }
            if names.contains(&name) {
                return Err(err(format!("field `{name}` listed twice")));
            }
            if let Some(prev) = ranges.last().cloned() {
                if range.start < prev.start {
                    return Err(err(format!("field `{name}` is out of order")));
                }
                if range.start < prev.end {
                    return Err(err(format!(
                        "field `{name}` overlaps the previous field at {}",
                        range.start
                    )));
                }
            }
            if range.start > expected {
                return Err(err(format!(
                    "gap before field `{name}`: indices {expected}..{} are unassigned",
                    range.start
                )));
            }
            expected = range.end;
            names.push(name);
            ranges.push(range);
        }
        if ranges.is_empty() {
            return Err(DataError::FieldMap {
                line: 0,
                msg: "no fields".into(),
            });
        }
        let mut field_of = vec![0; expected];
        for (f, r) in ranges.iter().enumerate() {
            field_of[r.clone()].fill(f);
        }
        Ok(FeatureSpace {
            num_features: expected,
            field_of,
            field_names: names,
            field_ranges: ranges,
        })
    }

    /// A space with one field covering `[0, m)`.
    pub fn single_field(name: &str, m: usize) -> Result<Self> {
        Self::from_ranges(vec![(name.to_string(), 0..m)])
    }

    /// Parses `field_name<TAB>start<TAB>end` lines (end exclusive).
    pub fn parse_field_map(text: &str) -> Result<Self> {
        let mut fields = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| DataError::FieldMap {
                line: n + 1,
                msg: format!("{msg}: `{raw}`"),
            };
            let cols: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
            if cols.len() != 3 {
                return Err(err("expected three tab-separated columns"));
            }
            let start: usize = cols[1].trim().parse().map_err(|_| err("bad start index"))?;
            let end: usize = cols[2].trim().parse().map_err(|_| err("bad end index"))?;
            fields.push((cols[0].trim().to_string(), start..end));
        }
        Self::from_ranges(fields)
    }

    pub fn load_field_map(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_field_map(&std::fs::read_to_string(path)?)
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_fields(&self) -> usize {
        self.field_names.len()
    }

    pub fn field_of(&self, index: usize) -> Option<usize> {
        self.field_of.get(index).copied()
    }

    pub fn field_names(&self) -> &[String] {
        &self.field_names
    }

    pub fn field_id(&self, name: &str) -> Option<usize> {
        self.field_names.iter().position(|n| n == name)
    }

    pub fn field_range(&self, field: usize) -> Range<usize> {
        self.field_ranges[field].clone()
    }

    pub fn cardinality(&self, field: usize) -> usize {
        self.field_ranges[field].len()
    }

    /// Checks that every index of every instance lies inside the space.
    pub fn validate(&self, instances: &[SparseInstance]) -> Result<()> {
        for inst in instances {
            if let Some(index) = inst.max_index().filter(|&i| i >= self.num_features) {
                return Err(DataError::IndexOutOfRange {
                    index,
                    num_features: self.num_features,
                });
            }
        }
        Ok(())
    }
}

/// Train / validation / test partition of a dataset.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<SparseInstance>,
    pub validation: Vec<SparseInstance>,
    pub test: Vec<SparseInstance>,
}

/// Apportions `n` items by largest remainder. Ties in the fractional part go
/// to the earlier slot, so train wins over validation over test.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let raw = ratios.map(|r| r * n as f64);
    let mut sizes = raw.map(|r| r.floor() as usize);
    let assigned: usize = sizes.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &slot in order.iter().cycle().take(n.saturating_sub(assigned)) {
        sizes[slot] += 1;
    }
    sizes
}

/// Shuffles with `seed` then cuts into train / validation / test.
pub fn split_dataset(
    instances: Vec<SparseInstance>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit> {
    if instances.is_empty() {
        return Err(DataError::Empty);
    }
    if ratios.iter().any(|&r| r.is_nan() || r <= 0.0)
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DataError::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let [n_train, n_val, _] = split_sizes(instances.len(), ratios);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = instances;
    rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
    let test = shuffled.split_off(n_train + n_val);
    let validation = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train: shuffled,
        validation,
        test,
    })
}

/// Output of [`negative_sample`].
#[derive(Debug, Clone, Default)]
pub struct NegativeSamples {
    pub instances: Vec<SparseInstance>,
    /// Positives that received fewer than `k` negatives.
    pub short: usize,
}

type ContextKey = Vec<(usize, u64)>;

/// Bit-exact context key, the context entries, and the item index.
type ContextSplit = (ContextKey, Vec<(usize, f64)>, usize);

fn split_context(inst: &SparseInstance, items: &Range<usize>) -> Result<ContextSplit> {
    let mut item = None;
    let mut context = Vec::with_capacity(inst.len());
    for &(i, v) in inst.entries() {
        if items.contains(&i) {
            if item.replace(i).is_some() {
                return Err(DataError::InvalidArgument(format!(
                    "instance `{inst}` has more than one item feature"
                )));
            }
        } else {
            context.push((i, v));
        }
    }
    let item = item.ok_or_else(|| {
        DataError::InvalidArgument(format!("instance `{inst}` has no item feature"))
    })?;
    let key = context.iter().map(|&(i, v)| (i, v.to_bits())).collect();
    Ok((key, context, item))
}

/// For each positive, draws `k` label-0 copies whose item is replaced by one
/// never observed with the exact same context. Contexts with fewer than `k`
/// unseen items yield as many as exist and are counted in `short`.
pub fn negative_sample(
    positives: &[SparseInstance],
    space: &FeatureSpace,
    item_field: usize,
    k: usize,
    seed: u64,
) -> Result<NegativeSamples> {
    if k == 0 {
        return Err(DataError::InvalidArgument("k must be at least 1".into()));
    }
    if item_field >= space.num_fields() {
        return Err(DataError::InvalidArgument(format!(
            "unknown item field {item_field}"
        )));
    }
    space.validate(positives)?;
    let items = space.field_range(item_field);

    let mut parsed = Vec::with_capacity(positives.len());
    let mut clicked: HashMap<ContextKey, HashSet<usize>> = HashMap::new();
    for inst in positives {
        let (key, context, item) = split_context(inst, &items)?;
        clicked.entry(key.clone()).or_default().insert(item);
        parsed.push((key, context));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = NegativeSamples::default();
    for (key, context) in &parsed {
        let seen = &clicked[key];
        let eligible: Vec<usize> = items.clone().filter(|i| !seen.contains(i)).collect();
        let take = k.min(eligible.len());
        if take < k {
            out.short += 1;
        }
        for pick in index::sample(&mut rng, eligible.len(), take) {
            let mut entries = context.clone();
            entries.push((eligible[pick], 1.0));
            out.instances
                .push(SparseInstance::new(0.0, entries).expect("item index is not in context"));
        }
    }
    if out.short > 0 {
        log::warn!(
            "{} of {} positives had fewer than {k} unseen items for their context",
            out.short,
            positives.len()
        );
    }
    Ok(out)
}
