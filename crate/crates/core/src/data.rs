//! Categorical datasets: schema, vocabularies, splits, the planted-signal
//! generator and frequency grouping.
//!
//! Every field reserves index 0 for out-of-vocabulary values, so a field with
//! `c` known values has a vocabulary of size `c + 1`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::sigmoid;
use crate::{Error, Result};

pub const OOV_INDEX: usize = 0;

/// Default rare-value threshold for real datasets.
pub const DEFAULT_MIN_FREQ: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    vocab_sizes: Vec<usize>,
}

impl FieldSchema {
    pub fn new(vocab_sizes: Vec<usize>) -> Result<Self> {
        if vocab_sizes.is_empty() {
            return Err(Error::Schema("a schema needs at least one field".into()));
        }
        if let Some(n) = vocab_sizes.iter().position(|&v| v < 2) {
            return Err(Error::Schema(alloc::format!(
                "field {n} has vocabulary size {} (< 2)",
                vocab_sizes[n]
            )));
        }
        Ok(Self { vocab_sizes })
    }

    pub fn field_count(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn vocab_size(&self, field: usize) -> usize {
        self.vocab_sizes[field]
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab_sizes
    }

    pub fn check(&self, inst: &Instance) -> Result<()> {
        if inst.values.len() != self.field_count() {
            return Err(Error::Schema(alloc::format!(
                "instance has {} fields, schema has {}",
                inst.values.len(),
                self.field_count()
            )));
        }
        for (n, (&v, &size)) in inst.values.iter().zip(&self.vocab_sizes).enumerate() {
            if v >= size {
                return Err(Error::Schema(alloc::format!(
                    "field {n}: index {v} out of range for vocabulary of size {size}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub values: Vec<usize>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    schema: FieldSchema,
    instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(schema: FieldSchema, instances: Vec<Instance>) -> Result<Self> {
        for inst in &instances {
            schema.check(inst)?;
            if inst.label > 1 {
                return Err(Error::InvalidInput(alloc::format!(
                    "label {} is not binary",
                    inst.label
                )));
            }
        }
        Ok(Self { schema, instances })
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn field_count(&self) -> usize {
        self.schema.field_count()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.instances.iter().map(|i| f64::from(i.label)).collect()
    }

    /// Flat `B×N` index block for the given instance positions.
    pub fn batch_indices(&self, rows: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(rows.len() * self.field_count());
        for &r in rows {
            out.extend_from_slice(&self.instances[r].values);
        }
        out
    }

    pub fn batch_labels(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&r| f64::from(self.instances[r].label)).collect()
    }

    /// Sub-dataset of the given positions, same schema.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            instances: rows.iter().map(|&r| self.instances[r].clone()).collect(),
        }
    }
}

/// Token vocabularies, one per field. Index `i + 1` of field `n` encodes
/// `tokens[n][i]`; everything else encodes to [`OOV_INDEX`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<Vec<String>>,
    #[serde(skip)]
    lookup: Vec<BTreeMap<String, usize>>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<Vec<String>>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Schema("a vocabulary needs at least one field".into()));
        }
        let mut v = Self {
            tokens,
            lookup: Vec::new(),
        };
        v.rebuild_lookup();
        Ok(v)
    }

    /// Vocabulary whose tokens are the decimal value indices `1..=c`.
    pub fn numeric(cardinalities: &[usize]) -> Result<Self> {
        Self::from_tokens(
            cardinalities
                .iter()
                .map(|&c| (1..=c).map(|v| v.to_string()).collect())
                .collect(),
        )
    }

    /// Restores the token index after deserialization.
    pub fn rebuild_lookup(&mut self) {
        self.lookup = self
            .tokens
            .iter()
            .map(|field| field.iter().enumerate().map(|(i, t)| (t.clone(), i + 1)).collect())
            .collect();
    }

    pub fn field_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn schema(&self) -> FieldSchema {
        FieldSchema {
            vocab_sizes: self.tokens.iter().map(|t| t.len() + 1).collect(),
        }
    }

    pub fn encode(&self, field: usize, token: &str) -> usize {
        self.lookup[field].get(token).copied().unwrap_or(OOV_INDEX)
    }

    /// Token of an index; `None` for the OOV slot.
    pub fn token(&self, field: usize, index: usize) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.tokens[field].get(i))
            .map(String::as_str)
    }

    /// Encodes `label, tok_1, …, tok_N`.
    pub fn encode_row<S: AsRef<str>>(&self, row: &[S]) -> Result<Instance> {
        if row.len() != self.field_count() + 1 {
            return Err(Error::InvalidInput(alloc::format!(
                "expected {} columns, found {}",
                self.field_count() + 1,
                row.len()
            )));
        }
        let label = parse_label(row[0].as_ref())?;
        let values = row[1..]
            .iter()
            .enumerate()
            .map(|(n, t)| self.encode(n, t.as_ref()))
            .collect();
        Ok(Instance { values, label })
    }
}

pub fn parse_label(token: &str) -> Result<u8> {
    match token.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::InvalidInput(alloc::format!("label `{other}` is not 0 or 1"))),
    }
}

/// Builds per-field vocabularies from label-first rows. Values seen at least
/// `min_freq` times get indices from 1, most frequent first (ties by token).
pub fn build_vocab<R, S>(rows: &[R], min_freq: usize) -> Result<Vocabulary>
where
    R: AsRef<[S]>,
    S: AsRef<str>,
{
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot build a vocabulary from no rows".into()))?;
    let columns = first.as_ref().len();
    if columns < 2 {
        return Err(Error::InvalidInput("rows need a label and at least one field".into()));
    }
    let mut counts: Vec<BTreeMap<&str, usize>> = vec![BTreeMap::new(); columns - 1];
    for (line, row) in rows.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != columns {
            return Err(Error::InvalidInput(alloc::format!(
                "row {}: expected {columns} columns, found {}",
                line + 1,
                row.len()
            )));
        }
        parse_label(row[0].as_ref())?;
        for (field, tok) in row[1..].iter().enumerate() {
            *counts[field].entry(tok.as_ref()).or_insert(0) += 1;
        }
    }
    let tokens = counts
        .into_iter()
        .map(|field| {
            let mut kept: Vec<(&str, usize)> = field.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
            kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            kept.into_iter().map(|(t, _)| t.to_string()).collect()
        })
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// Encodes label-first rows with a fixed vocabulary.
pub fn encode_rows<R, S>(rows: &[R], vocab: &Vocabulary) -> Result<Dataset>
where
    R: AsRef<[S]>,
    S: AsRef<str>,
{
    let instances = rows
        .iter()
        .map(|r| vocab.encode_row(r.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(vocab.schema(), instances)
}

/// Default train/valid/test ratios.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Split sizes by largest-remainder rounding, so each size is within one
/// instance of its exact share.
pub fn split_sizes(m: usize, ratios: (f64, f64, f64)) -> Result<[usize; 3]> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| x.is_nan() || x <= 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(alloc::format!(
            "split ratios {r:?} must be positive and sum to 1"
        )));
    }
    if m < 10 {
        return Err(Error::InvalidInput(alloc::format!(
            "dataset of {m} instances is too small to split (need at least 10)"
        )));
    }
    let exact: Vec<f64> = r.iter().map(|x| x * m as f64).collect();
    // Shares within 1e-9 of an integer count as that integer.
    let mut sizes: Vec<usize> = exact.iter().map(|&e| libm::floor(e + 1e-9) as usize).collect();
    let mut left = m - sizes.iter().sum::<usize>().min(m);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.partial_cmp(&fa)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidInput(alloc::format!("split of {m} leaves an empty part")));
    }
    Ok([sizes[0], sizes[1], sizes[2]])
}

/// Seeded random permutation followed by contiguous slicing.
pub fn split(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [a, b, _] = split_sizes(ds.len(), ratios)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        ds.subset(&order[..a]),
        ds.subset(&order[a..a + b]),
        ds.subset(&order[a + b..]),
    ))
}

/// Label logits contributed by one field: `logits[v - 1]` for value `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InformativeField {
    pub field: usize,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticMode {
    /// Values of the mode field (1-based) that select this mode.
    pub selector_values: Vec<usize>,
    pub informative: Vec<InformativeField>,
}

/// Generator description with planted ground truth. Values of every field
/// are `1..=cardinality`; index 0 stays the OOV slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub cardinalities: Vec<usize>,
    pub mode_field: usize,
    pub modes: Vec<SyntheticMode>,
    /// Sampling weights of the mode field's values; uniform when absent.
    #[serde(default)]
    pub mode_field_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMode {
    pub selector_values: Vec<usize>,
    pub informative_fields: Vec<usize>,
}

/// Serialized as `{"mode_field": int, "modes": [{"selector_values": [...], "informative_fields": [...]}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mode_field: usize,
    pub modes: Vec<GroundTruthMode>,
}

impl GroundTruth {
    /// Mode of an instance, from its mode-field value.
    pub fn mode_of(&self, inst: &Instance) -> Option<usize> {
        let v = inst.values[self.mode_field];
        self.modes.iter().position(|m| m.selector_values.contains(&v))
    }
}

impl SyntheticSpec {
    pub fn field_count(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.field_count();
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if n == 0 {
            return bad("synthetic spec has no fields".into());
        }
        if let Some(f) = self.cardinalities.iter().position(|&c| c == 0) {
            return bad(alloc::format!("field {f} has cardinality 0"));
        }
        if self.mode_field >= n {
            return bad(alloc::format!("mode_field {} out of range", self.mode_field));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(alloc::format!("label noise {} outside [0, 0.5)", self.label_noise));
        }
        if self.modes.is_empty() {
            return bad("synthetic spec needs at least one mode".into());
        }
        let card = self.cardinalities[self.mode_field];
        let mut owner = vec![None; card + 1];
        for (k, mode) in self.modes.iter().enumerate() {
            for &v in &mode.selector_values {
                if v == 0 || v > card {
                    return bad(alloc::format!("mode {k}: selector value {v} outside 1..={card}"));
                }
                if owner[v].replace(k).is_some() {
                    return bad(alloc::format!("selector value {v} assigned to two modes"));
                }
            }
            for inf in &mode.informative {
                if inf.field >= n || inf.field == self.mode_field {
                    return bad(alloc::format!(
                        "mode {k}: informative field {} must be a non-mode field",
                        inf.field
                    ));
                }
                if inf.logits.len() != self.cardinalities[inf.field] {
                    return bad(alloc::format!(
                        "mode {k}: field {} needs {} logits, found {}",
                        inf.field,
                        self.cardinalities[inf.field],
                        inf.logits.len()
                    ));
                }
            }
        }
        if owner[1..].iter().any(Option::is_none) {
            return bad("every mode-field value must select a mode".into());
        }
        if let Some(w) = &self.mode_field_weights {
            if w.len() != card || w.iter().any(|&x| x.is_nan() || x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return bad("mode_field_weights must be non-negative, one per value, not all zero".into());
            }
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            mode_field: self.mode_field,
            modes: self
                .modes
                .iter()
                .map(|m| {
                    let mut fields: Vec<usize> = m.informative.iter().map(|i| i.field).collect();
                    fields.sort_unstable();
                    fields.dedup();
                    GroundTruthMode {
                        selector_values: m.selector_values.clone(),
                        informative_fields: fields,
                    }
                })
                .collect(),
        }
    }

    /// Tokens are the decimal value indices.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::numeric(&self.cardinalities).expect("validated spec has fields")
    }

    /// Draws `m` instances. Field values are uniform (the mode field follows
    /// its weights when given); the label is Bernoulli of the sigmoid of the
    /// active mode's summed logits, then flipped with the label-noise rate.
    pub fn generate(&self, m: usize) -> Result<(Dataset, GroundTruth)> {
        self.validate()?;
        let truth = self.ground_truth();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let cumulative: Option<Vec<f64>> = self.mode_field_weights.as_ref().map(|w| {
            let total: f64 = w.iter().sum();
            let mut acc = 0.0;
            w.iter()
                .map(|x| {
                    acc += x / total;
                    acc
                })
                .collect()
        });
        let mode_of_value: Vec<usize> = {
            let card = self.cardinalities[self.mode_field];
            let mut table = vec![0; card + 1];
            for (k, mode) in self.modes.iter().enumerate() {
                for &v in &mode.selector_values {
                    table[v] = k;
                }
            }
            table
        };
        let mut instances = Vec::with_capacity(m);
        for _ in 0..m {
            let mut values: Vec<usize> = self.cardinalities.iter().map(|&c| rng.gen_range(1..=c)).collect();
            if let Some(cum) = &cumulative {
                let u: f64 = rng.gen();
                let pos = cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1);
                values[self.mode_field] = pos + 1;
            }
            let mode = &self.modes[mode_of_value[values[self.mode_field]]];
            let logit: f64 = mode
                .informative
                .iter()
                .map(|inf| inf.logits[values[inf.field] - 1])
                .sum();
            let mut label = u8::from(rng.gen::<f64>() < sigmoid(logit));
            if self.label_noise > 0.0 && rng.gen::<f64>() < self.label_noise {
                label = 1 - label;
            }
            instances.push(Instance { values, label });
        }
        let schema = FieldSchema::new(self.cardinalities.iter().map(|c| c + 1).collect())?;
        Ok((Dataset::new(schema, instances)?, truth))
    }
}

/// Logit table with independent uniform entries in `[-strength, strength]`.
pub fn random_logits(cardinality: usize, strength: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..cardinality).map(|_| rng.gen_range(-strength..=strength)).collect()
}

/// Instance partition for one field by value frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGroups {
    pub target_field: usize,
    /// Smallest frequency-ordered prefix of values holding ≥ 95% of instances.
    pub g1_values: Vec<usize>,
    pub g2_values: Vec<usize>,
    pub g1_instances: Vec<usize>,
    pub g2_instances: Vec<usize>,
}

/// Values sorted by descending frequency (ties by ascending index); G1 is the
/// shortest prefix whose cumulative count reaches 95% of the dataset.
pub fn frequency_groups(ds: &Dataset, field: usize) -> Result<FrequencyGroups> {
    if field >= ds.field_count() {
        return Err(Error::InvalidInput(alloc::format!(
            "field {field} out of range for {} fields",
            ds.field_count()
        )));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for inst in ds.instances() {
        *counts.entry(inst.values[field]).or_insert(0) += 1;
    }
    let mut order: Vec<(usize, usize)> = counts.into_iter().collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let m = ds.len();
    let mut cum = 0usize;
    let mut cut = order.len();
    for (i, &(_, c)) in order.iter().enumerate() {
        cum += c;
        // cum / m ≥ 0.95, in integers
        if cum * 20 >= m * 19 {
            cut = i + 1;
            break;
        }
    }
    let g1_values: Vec<usize> = order[..cut].iter().map(|&(v, _)| v).collect();
    let g2_values: Vec<usize> = order[cut..].iter().map(|&(v, _)| v).collect();
    let mut in_g1 = BTreeMap::new();
    for &v in &g1_values {
        in_g1.insert(v, ());
    }
    let (mut g1_instances, mut g2_instances) = (Vec::new(), Vec::new());
    for (i, inst) in ds.instances().iter().enumerate() {
        if in_g1.contains_key(&inst.values[field]) {
            g1_instances.push(i);
        } else {
            g2_instances.push(i);
        }
    }
    Ok(FrequencyGroups {
        target_field: field,
        g1_values,
        g2_values,
        g1_instances,
        g2_instances,
    })
}
