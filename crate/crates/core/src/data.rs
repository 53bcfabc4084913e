//! Event-log ingestion, time-based splitting and sparse tensor construction.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use crate::context::ContextSource;
use crate::error::{Error, Result};

/// Dense 0-based index assignment for string keys, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    keys: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&mut self, key: &str) -> u32 {
        if let Some(&idx) = self.index.get(key) {
            return idx;
        }
        let idx = self.keys.len() as u32;
        self.keys.push(key.to_owned());
        self.index.insert(key.to_owned(), idx);
        idx
    }

    pub fn get(&self, key: &str) -> Option<u32> {
        self.index.get(key).copied()
    }

    pub fn key(&self, idx: u32) -> Option<&str> {
        self.keys.get(idx as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabularies {
    pub users: Vocab,
    pub items: Vocab,
    pub categories: Vocab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub user: u32,
    pub item: u32,
    /// Unix seconds.
    pub timestamp: u64,
    pub category: Option<u32>,
}

/// Column positions of the event fields in a tab-separated line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schema {
    pub user: usize,
    pub item: usize,
    pub timestamp: usize,
    pub category: Option<usize>,
}

impl Default for Schema {
    /// `user<TAB>item<TAB>timestamp[<TAB>category]`
    fn default() -> Self {
        Schema {
            user: 0,
            item: 1,
            timestamp: 2,
            category: Some(3),
        }
    }
}

/// Timestamp-ordered events plus the vocabularies their indices refer to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    events: Vec<Event>,
    vocab: Vocabularies,
}

impl EventLog {
    /// Builds a log from already-indexed events. Events are stably sorted by
    /// timestamp and every index is checked against `vocab`.
    pub fn from_events(mut events: Vec<Event>, vocab: Vocabularies) -> Result<Self> {
        for e in &events {
            check_index(0, e.user, vocab.users.len())?;
            check_index(1, e.item, vocab.items.len())?;
            if let Some(c) = e.category {
                check_index(2, c, vocab.categories.len())?;
            }
        }
        events.sort_by_key(|e| e.timestamp);
        Ok(EventLog { events, vocab })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn vocab(&self) -> &Vocabularies {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.vocab.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.vocab.items.len()
    }

    pub fn num_categories(&self) -> usize {
        self.vocab.categories.len()
    }

    /// Parses more events from `reader`, extending this log's vocabularies.
    /// Used to read a separate test file against a training vocabulary.
    pub fn extend_from_reader<R: BufRead>(&mut self, reader: R, schema: &Schema) -> Result<()> {
        let mut parsed = parse_into(reader, schema, std::mem::take(&mut self.vocab))?;
        self.vocab = parsed.vocab;
        self.events.append(&mut parsed.events);
        self.events.sort_by_key(|e| e.timestamp);
        Ok(())
    }
}

fn check_index(dim: usize, idx: u32, size: usize) -> Result<()> {
    if (idx as usize) < size {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange {
            dim,
            index: idx as usize,
            size,
        })
    }
}

/// Reads a tab-separated event stream. Blank lines and lines starting with
/// `#` are skipped. Vocabularies are assigned in first-seen order and the
/// resulting events are stably sorted by timestamp.
pub fn parse_event_log<R: BufRead>(reader: R, schema: &Schema) -> Result<EventLog> {
    parse_into(reader, schema, Vocabularies::default())
}

/// Like [`parse_event_log`] but starts from existing vocabularies, so keys
/// already known keep their indices.
pub fn parse_event_log_with_vocab<R: BufRead>(
    reader: R,
    schema: &Schema,
    vocab: Vocabularies,
) -> Result<EventLog> {
    parse_into(reader, schema, vocab)
}

fn parse_into<R: BufRead>(reader: R, schema: &Schema, mut vocab: Vocabularies) -> Result<EventLog> {
    let required = schema.user.max(schema.item).max(schema.timestamp) + 1;
    let mut events = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < required {
            return Err(Error::Parse {
                line: lineno,
                message: format!(
                    "expected at least {required} tab-separated fields, got {}",
                    fields.len()
                ),
            });
        }
        let ts_field = fields[schema.timestamp].trim();
        let timestamp: u64 = ts_field.parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("invalid timestamp '{ts_field}'"),
        })?;
        let user_key = fields[schema.user].trim();
        let item_key = fields[schema.item].trim();
        if user_key.is_empty() || item_key.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty user or item key".into(),
            });
        }
        let category = schema
            .category
            .and_then(|c| fields.get(c))
            .map(|c| c.trim())
            .filter(|c| !c.is_empty())
            .map(|c| vocab.categories.get_or_insert(c));
        events.push(Event {
            user: vocab.users.get_or_insert(user_key),
            item: vocab.items.get_or_insert(item_key),
            timestamp,
            category,
        });
    }
    events.sort_by_key(|e| e.timestamp);
    Ok(EventLog { events, vocab })
}

/// Splits a log at `split_time`: events strictly before it go to training,
/// the rest to test. Both halves share the full vocabularies.
pub fn time_split(log: &EventLog, split_time: u64) -> (EventLog, EventLog) {
    let cut = log.events.partition_point(|e| e.timestamp < split_time);
    let train = EventLog {
        events: log.events[..cut].to_vec(),
        vocab: log.vocab.clone(),
    };
    let test = EventLog {
        events: log.events[cut..].to_vec(),
        vocab: log.vocab.clone(),
    };
    (train, test)
}

/// How observed cells are weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightScheme {
    /// Weight of every unobserved cell.
    pub w0: f64,
    /// Weight of an observed cell when count scaling is off.
    pub wt: f64,
    /// When set, a cell seen `n` times gets `w0 + alpha * n`.
    pub count_scaling: bool,
    pub alpha: f64,
}

impl Default for WeightScheme {
    fn default() -> Self {
        WeightScheme {
            w0: 1.0,
            wt: 100.0,
            count_scaling: false,
            alpha: 99.0,
        }
    }
}

impl WeightScheme {
    pub fn validate(&self) -> Result<()> {
        if !(self.w0 > 0.0 && self.w0.is_finite()) {
            return Err(Error::invalid(format!(
                "w0 must be positive, got {}",
                self.w0
            )));
        }
        if !(self.wt > self.w0) {
            return Err(Error::invalid(format!(
                "wt ({}) must exceed w0 ({})",
                self.wt, self.w0
            )));
        }
        if self.count_scaling && !(self.alpha > 0.0) {
            return Err(Error::invalid(
                "alpha must be positive when count scaling is on",
            ));
        }
        Ok(())
    }
}

/// Per-dimension inverted index: for entity `j` of dimension `d`, the ids of
/// the stored cells whose `d`-th index is `j`.
#[derive(Debug, Clone, PartialEq)]
struct Slices {
    offsets: Vec<usize>,
    cells: Vec<u32>,
}

/// The nonzero cells of a D-dimensional binary tensor together with their
/// confidence weights. Every cell not stored has value 0 and weight `w0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    sizes: Vec<usize>,
    w0: f64,
    /// Flattened `nnz × D` index tuples, lexicographically sorted.
    indices: Vec<u32>,
    weights: Vec<f64>,
    slices: Vec<Slices>,
}

impl SparseTensor {
    /// Validates and stores `cells`. Each weight must exceed `w0`, indices
    /// must lie inside `sizes`, and tuples must be unique.
    pub fn new(sizes: Vec<usize>, w0: f64, cells: Vec<(Vec<u32>, f64)>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid("a tensor needs at least two dimensions"));
        }
        if !(w0 >= 0.0 && w0.is_finite()) {
            return Err(Error::invalid(format!(
                "w0 must be finite and non-negative, got {w0}"
            )));
        }
        let d = sizes.len();
        let mut sorted = BTreeMap::new();
        for (idx, w) in cells {
            if idx.len() != d {
                return Err(Error::invalid(format!(
                    "cell has {} indices, tensor has {d} dimensions",
                    idx.len()
                )));
            }
            for (dim, (&i, &s)) in idx.iter().zip(&sizes).enumerate() {
                check_index(dim, i, s)?;
            }
            if !(w > w0) || !w.is_finite() {
                return Err(Error::invalid(format!(
                    "cell weight {w} must be finite and exceed w0 = {w0}"
                )));
            }
            if sorted.insert(idx.clone(), w).is_some() {
                return Err(Error::invalid(format!("duplicate cell {idx:?}")));
            }
        }
        let mut indices = Vec::with_capacity(sorted.len() * d);
        let mut weights = Vec::with_capacity(sorted.len());
        for (idx, w) in sorted {
            indices.extend_from_slice(&idx);
            weights.push(w);
        }
        let slices = (0..d)
            .map(|dim| build_slices(&indices, d, dim, sizes[dim]))
            .collect();
        Ok(SparseTensor {
            sizes,
            w0,
            indices,
            weights,
            slices,
        })
    }

    pub fn ndim(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn w0(&self) -> f64 {
        self.w0
    }

    /// N⁺, the number of stored cells.
    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    pub fn cell(&self, id: usize) -> &[u32] {
        let d = self.ndim();
        &self.indices[id * d..(id + 1) * d]
    }

    pub fn weight(&self, id: usize) -> f64 {
        self.weights[id]
    }

    pub fn cells(&self) -> impl Iterator<Item = (&[u32], f64)> + '_ {
        self.indices
            .chunks_exact(self.ndim())
            .zip(self.weights.iter().copied())
    }

    /// Ids of the cells whose index in `dim` equals `entity`.
    pub fn slice(&self, dim: usize, entity: usize) -> &[u32] {
        let s = &self.slices[dim];
        &s.cells[s.offsets[entity]..s.offsets[entity + 1]]
    }

    /// N⁺ restricted to one entity of one dimension.
    pub fn support(&self, dim: usize, entity: usize) -> usize {
        let s = &self.slices[dim];
        s.offsets[entity + 1] - s.offsets[entity]
    }

    /// Weight of the cell at `idx`: the stored weight, or `w0` if absent.
    pub fn weight_at(&self, idx: &[u32]) -> f64 {
        self.lookup(idx).map_or(self.w0, |id| self.weights[id])
    }

    pub fn lookup(&self, idx: &[u32]) -> Option<usize> {
        if idx.len() != self.ndim() || (idx[0] as usize) >= self.sizes[0] {
            return None;
        }
        self.slice(0, idx[0] as usize)
            .iter()
            .map(|&id| id as usize)
            .find(|&id| self.cell(id) == idx)
    }
}

fn build_slices(indices: &[u32], d: usize, dim: usize, size: usize) -> Slices {
    let mut counts = vec![0usize; size + 1];
    for cell in indices.chunks_exact(d) {
        counts[cell[dim] as usize + 1] += 1;
    }
    for i in 0..size {
        counts[i + 1] += counts[i];
    }
    let mut fill = counts.clone();
    let mut cells = vec![0u32; indices.len() / d];
    for (id, cell) in indices.chunks_exact(d).enumerate() {
        let e = cell[dim] as usize;
        cells[fill[e]] = id as u32;
        fill[e] += 1;
    }
    Slices {
        offsets: counts,
        cells,
    }
}

/// Materializes the preference tensor of `log`.
///
/// Without context the tensor is user × item; otherwise a third dimension
/// holds the context states returned by `assigner`. Repeated occurrences of
/// the same cell collapse into one. A state's multiplier scales the weight
/// above `w0`: without count scaling the cell gets
/// `w0 + (wt - w0) * max multiplier`, with it `w0 + alpha * Σ multipliers`.
pub fn build_tensor(
    log: &EventLog,
    assigner: &dyn ContextSource,
    scheme: &WeightScheme,
) -> Result<SparseTensor> {
    scheme.validate()?;
    let n_users = log.num_users().max(1);
    let n_items = log.num_items().max(1);
    let context_size = assigner.context_size(log.vocab());

    let mut sizes = vec![n_users, n_items];
    // (max multiplier, summed multiplier)
    let mut acc: BTreeMap<Vec<u32>, (f64, f64)> = BTreeMap::new();
    match context_size {
        None => {
            for e in log.events() {
                let entry = acc.entry(vec![e.user, e.item]).or_insert((0.0, 0.0));
                entry.0 = entry.0.max(1.0);
                entry.1 += 1.0;
            }
        }
        Some(size) => {
            if size == 0 {
                return Err(Error::invalid("context must have at least one state"));
            }
            sizes.push(size);
            let states = assigner.assign(log);
            for (e, st) in log.events().iter().zip(&states) {
                for &(state, mult) in st {
                    check_index(2, state, size)?;
                    if !(mult > 0.0) {
                        continue;
                    }
                    let entry = acc.entry(vec![e.user, e.item, state]).or_insert((0.0, 0.0));
                    entry.0 = entry.0.max(mult);
                    entry.1 += mult;
                }
            }
        }
    }

    let cells = acc
        .into_iter()
        .map(|(idx, (max_mult, sum_mult))| {
            let w = if scheme.count_scaling {
                scheme.w0 + scheme.alpha * sum_mult
            } else {
                scheme.w0 + (scheme.wt - scheme.w0) * max_mult
            };
            (idx, w)
        })
        .collect();
    SparseTensor::new(sizes, scheme.w0, cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ContextAssigner;

    fn parse(s: &str) -> Result<EventLog> {
        parse_event_log(s.as_bytes(), &Schema::default())
    }

    #[test]
    fn parse_sorts_and_indexes_first_seen() {
        let log = parse("u1\ti1\t100\nu2\ti1\t50").unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log.vocab().users.get("u1"), Some(0));
        assert_eq!(log.vocab().users.get("u2"), Some(1));
        assert_eq!(log.vocab().items.get("i1"), Some(0));
        let got: Vec<_> = log
            .events()
            .iter()
            .map(|e| (e.user, e.item, e.timestamp))
            .collect();
        assert_eq!(got, vec![(1, 0, 50), (0, 0, 100)]);
    }

    #[test]
    fn parse_empty_and_comments() {
        assert_eq!(parse("").unwrap().len(), 0);
        let log = parse("# header\n\nu\ti\t3\tcat\n").unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.events()[0].category, Some(0));
    }

    #[test]
    fn parse_rejects_bad_timestamp_with_line_number() {
        match parse("u1\ti1\tabc") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse("u\ti\t1\nu\ti\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse("u\ti\t-5").is_err());
    }

    #[test]
    fn parse_is_stable_on_equal_timestamps() {
        let log = parse("a\tx\t5\nb\ty\t5\nc\tz\t1").unwrap();
        let users: Vec<_> = log.events().iter().map(|e| e.user).collect();
        assert_eq!(users, vec![2, 0, 1]);
    }

    #[test]
    fn custom_schema_column_order() {
        let schema = Schema {
            user: 2,
            item: 0,
            timestamp: 1,
            category: None,
        };
        let log = parse_event_log("i1\t7\tu1".as_bytes(), &schema).unwrap();
        assert_eq!(log.vocab().users.key(0), Some("u1"));
        assert_eq!(log.events()[0].timestamp, 7);
    }

    #[test]
    fn split_boundaries() {
        let log = parse("a\tx\t10\na\ty\t20\nb\tx\t30").unwrap();
        let (train, test) = time_split(&log, 25);
        assert_eq!(train.len(), 2);
        assert_eq!(test.len(), 1);
        assert_eq!(test.events()[0].timestamp, 30);
        let (train, test) = time_split(&log, 5);
        assert_eq!((train.len(), test.len()), (0, 3));
        let (train, test) = time_split(&log, 31);
        assert_eq!((train.len(), test.len()), (3, 0));
        assert_eq!(train.vocab(), test.vocab());
    }

    #[test]
    fn single_event_gets_wt() {
        let log = parse("u\ti\t1").unwrap();
        let t = build_tensor(&log, &ContextAssigner::none(), &WeightScheme::default()).unwrap();
        assert_eq!(t.nnz(), 1);
        assert_eq!(t.weight(0), 100.0);
        assert_eq!(t.sizes(), &[1, 1]);
    }

    #[test]
    fn repeated_cell_count_scaling() {
        let log = parse("u\ti\t1\nu\ti\t2\nu\ti\t3").unwrap();
        let scheme = WeightScheme {
            count_scaling: true,
            ..WeightScheme::default()
        };
        let t = build_tensor(&log, &ContextAssigner::none(), &scheme).unwrap();
        assert_eq!(t.nnz(), 1);
        assert_eq!(t.weight(0), 298.0);

        let t = build_tensor(&log, &ContextAssigner::none(), &WeightScheme::default()).unwrap();
        assert_eq!(t.weight(0), 100.0);
    }

    #[test]
    fn two_distinct_events() {
        let log = parse("u\ti\t1\nu\tj\t2").unwrap();
        let t = build_tensor(&log, &ContextAssigner::none(), &WeightScheme::default()).unwrap();
        assert_eq!(t.nnz(), 2);
    }

    #[test]
    fn weight_scheme_validation() {
        let log = parse("u\ti\t1").unwrap();
        let bad = WeightScheme {
            wt: 0.5,
            ..WeightScheme::default()
        };
        assert!(build_tensor(&log, &ContextAssigner::none(), &bad).is_err());
        let bad = WeightScheme {
            w0: 0.0,
            ..WeightScheme::default()
        };
        assert!(build_tensor(&log, &ContextAssigner::none(), &bad).is_err());
    }

    struct OutOfRange;
    impl ContextSource for OutOfRange {
        fn context_size(&self, _: &Vocabularies) -> Option<usize> {
            Some(2)
        }
        fn assign(&self, log: &EventLog) -> Vec<crate::ContextStates> {
            log.events().iter().map(|_| vec![(2, 1.0)]).collect()
        }
    }

    #[test]
    fn assigner_state_out_of_range() {
        let log = parse("u\ti\t1").unwrap();
        let err = build_tensor(&log, &OutOfRange, &WeightScheme::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::IndexOutOfRange {
                dim: 2,
                index: 2,
                size: 2
            }
        ));
    }

    #[test]
    fn sparse_tensor_validation() {
        assert!(SparseTensor::new(vec![2, 2], 1.0, vec![(vec![0, 0], 1.0)]).is_err());
        assert!(SparseTensor::new(vec![2, 2], 1.0, vec![(vec![0, 2], 5.0)]).is_err());
        assert!(
            SparseTensor::new(vec![2, 2], 1.0, vec![(vec![0, 1], 5.0), (vec![0, 1], 6.0)]).is_err()
        );
        let t = SparseTensor::new(
            vec![2, 3],
            1.0,
            vec![(vec![1, 2], 5.0), (vec![0, 1], 6.0), (vec![1, 0], 7.0)],
        )
        .unwrap();
        assert_eq!(t.cell(0), &[0, 1]);
        assert_eq!(t.slice(0, 1).len(), 2);
        assert_eq!(t.support(1, 2), 1);
        assert_eq!(t.weight_at(&[1, 2]), 5.0);
        assert_eq!(t.weight_at(&[0, 0]), 1.0);
    }
}
