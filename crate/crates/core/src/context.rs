//! Context-state assignment: seasonal time bands and sequential
//! (previous-purchase) context.

use std::collections::{HashMap, VecDeque};

use crate::data::{Event, EventLog, Vocabularies};
use crate::error::{Error, Result};

/// Context states of one event with their weight multipliers.
pub type ContextStates = Vec<(u32, f64)>;

/// Anything that can place events into context states.
pub trait ContextSource {
    /// Number of context states, or `None` for a context-free (user × item)
    /// model.
    fn context_size(&self, vocab: &Vocabularies) -> Option<usize>;

    /// States of every event of a training log, in event order.
    fn assign(&self, log: &EventLog) -> Vec<ContextStates>;

    /// States of every test event, given the training history. Defaults to
    /// assigning the test log on its own.
    fn assign_queries(&self, _train: &EventLog, test: &EventLog) -> Vec<ContextStates> {
        self.assign(test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BandLayout {
    /// Equal-length bands of the given length in seconds.
    Uniform(u64),
    /// Band start offsets within the season; the first must be 0.
    Boundaries(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeasonBands {
    pub season_length: u64,
    pub layout: BandLayout,
}

impl SeasonBands {
    pub fn num_bands(&self) -> usize {
        match &self.layout {
            BandLayout::Uniform(len) => (self.season_length / len) as usize,
            BandLayout::Boundaries(b) => b.len(),
        }
    }

    pub fn band(&self, timestamp: u64) -> usize {
        let offset = timestamp % self.season_length;
        match &self.layout {
            BandLayout::Uniform(len) => (offset / len) as usize,
            BandLayout::Boundaries(b) => b.partition_point(|&start| start <= offset) - 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SequenceLevel {
    Item,
    Category,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceContext {
    pub level: SequenceLevel,
    /// How many previous events contribute states.
    pub history: usize,
    /// Multiplier applied per step back in the history.
    pub decay: f64,
    /// Let test events extend the history of later test events.
    pub in_test_chaining: bool,
}

/// State 0 of a sequential context: the user has no earlier event.
pub const NO_PREVIOUS: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub enum ContextAssigner {
    None,
    Season(SeasonBands),
    Sequence(SequenceContext),
}

impl ContextAssigner {
    pub fn none() -> Self {
        ContextAssigner::None
    }

    /// Uniform bands; `season_length` must be a multiple of `band_length`.
    pub fn season(season_length: u64, band_length: u64) -> Result<Self> {
        if band_length == 0 || season_length == 0 {
            return Err(Error::invalid("season and band lengths must be positive"));
        }
        if !season_length.is_multiple_of(band_length) {
            return Err(Error::invalid(format!(
                "season length {season_length} is not divisible by band length {band_length}"
            )));
        }
        Ok(ContextAssigner::Season(SeasonBands {
            season_length,
            layout: BandLayout::Uniform(band_length),
        }))
    }

    /// Bands of varying length given by their start offsets.
    pub fn season_with_boundaries(season_length: u64, starts: Vec<u64>) -> Result<Self> {
        if season_length == 0 {
            return Err(Error::invalid("season length must be positive"));
        }
        if starts.first() != Some(&0) {
            return Err(Error::invalid("band boundaries must start at 0"));
        }
        if starts.windows(2).any(|w| w[0] >= w[1]) || *starts.last().unwrap() >= season_length {
            return Err(Error::invalid(
                "band boundaries must be strictly increasing and inside the season",
            ));
        }
        Ok(ContextAssigner::Season(SeasonBands {
            season_length,
            layout: BandLayout::Boundaries(starts),
        }))
    }

    /// Six 4-hour bands over a day.
    pub fn day_bands() -> Self {
        Self::season(86_400, 14_400).expect("valid constants")
    }

    /// Seven daily bands over a week.
    pub fn week_days() -> Self {
        Self::season(604_800, 86_400).expect("valid constants")
    }

    pub fn sequence(level: SequenceLevel, history: usize, decay: f64) -> Result<Self> {
        if history == 0 {
            return Err(Error::invalid("sequence history must be at least 1"));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::invalid(format!(
                "decay must lie in (0, 1], got {decay}"
            )));
        }
        Ok(ContextAssigner::Sequence(SequenceContext {
            level,
            history,
            decay,
            in_test_chaining: false,
        }))
    }

    pub fn with_test_chaining(mut self, on: bool) -> Self {
        if let ContextAssigner::Sequence(s) = &mut self {
            s.in_test_chaining = on;
        }
        self
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ContextAssigner::None => "none",
            ContextAssigner::Season(_) => "season",
            ContextAssigner::Sequence(_) => "sequence",
        }
    }

    /// Time band of `timestamp`; only meaningful for seasonal assigners.
    pub fn assign_season_band(&self, timestamp: u64) -> Result<usize> {
        match self {
            ContextAssigner::Season(s) => Ok(s.band(timestamp)),
            _ => Err(Error::invalid(format!(
                "time bands need a season context, not '{}'",
                self.kind()
            ))),
        }
    }

    /// Contexts of one user's events, which must be in time order.
    pub fn assign_sequential_context(&self, events: &[Event]) -> Result<Vec<ContextStates>> {
        let seq = match self {
            ContextAssigner::Sequence(s) => s,
            _ => {
                return Err(Error::invalid(format!(
                    "sequential context needs a sequence assigner, not '{}'",
                    self.kind()
                )))
            }
        };
        let mut history = History::new(seq.history);
        Ok(events
            .iter()
            .map(|e| {
                let states = history.states(seq.decay);
                history.push(seq.state_of(e));
                states
            })
            .collect())
    }
}

impl SequenceContext {
    fn state_of(&self, e: &Event) -> u32 {
        match self.level {
            SequenceLevel::Item => e.item + 1,
            SequenceLevel::Category => e.category.map_or(NO_PREVIOUS, |c| c + 1),
        }
    }

    fn size(&self, vocab: &Vocabularies) -> usize {
        1 + match self.level {
            SequenceLevel::Item => vocab.items.len(),
            SequenceLevel::Category => vocab.categories.len(),
        }
    }
}

/// The last `capacity` states of one user, most recent first.
#[derive(Debug, Clone)]
struct History {
    recent: VecDeque<u32>,
    capacity: usize,
}

impl History {
    fn new(capacity: usize) -> Self {
        History {
            recent: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    fn push(&mut self, state: u32) {
        if self.recent.len() == self.capacity {
            self.recent.pop_back();
        }
        self.recent.push_front(state);
    }

    fn states(&self, decay: f64) -> ContextStates {
        if self.recent.is_empty() {
            return vec![(NO_PREVIOUS, 1.0)];
        }
        let mut out: ContextStates = Vec::with_capacity(self.recent.len());
        let mut mult = 1.0;
        for &s in &self.recent {
            // a state seen twice keeps its most recent (largest) multiplier
            if !out.iter().any(|&(o, _)| o == s) {
                out.push((s, mult));
            }
            mult *= decay;
        }
        out
    }
}

impl ContextSource for ContextAssigner {
    fn context_size(&self, vocab: &Vocabularies) -> Option<usize> {
        match self {
            ContextAssigner::None => None,
            ContextAssigner::Season(s) => Some(s.num_bands()),
            ContextAssigner::Sequence(s) => Some(s.size(vocab)),
        }
    }

    fn assign(&self, log: &EventLog) -> Vec<ContextStates> {
        match self {
            ContextAssigner::None => log.events().iter().map(|_| Vec::new()).collect(),
            ContextAssigner::Season(s) => log
                .events()
                .iter()
                .map(|e| vec![(s.band(e.timestamp) as u32, 1.0)])
                .collect(),
            ContextAssigner::Sequence(seq) => {
                let mut histories: HashMap<u32, History> = HashMap::new();
                log.events()
                    .iter()
                    .map(|e| {
                        let h = histories
                            .entry(e.user)
                            .or_insert_with(|| History::new(seq.history));
                        let states = h.states(seq.decay);
                        h.push(seq.state_of(e));
                        states
                    })
                    .collect()
            }
        }
    }

    fn assign_queries(&self, train: &EventLog, test: &EventLog) -> Vec<ContextStates> {
        let seq = match self {
            ContextAssigner::Sequence(seq) => seq,
            _ => return self.assign(test),
        };
        let mut histories: HashMap<u32, History> = HashMap::new();
        for e in train.events() {
            histories
                .entry(e.user)
                .or_insert_with(|| History::new(seq.history))
                .push(seq.state_of(e));
        }
        test.events()
            .iter()
            .map(|e| {
                let h = histories
                    .entry(e.user)
                    .or_insert_with(|| History::new(seq.history));
                let states = h.states(seq.decay);
                if seq.in_test_chaining {
                    h.push(seq.state_of(e));
                }
                states
            })
            .collect()
    }
}

/// Normalizes state multipliers to sum to one, for averaging context
/// feature vectors at scoring time.
pub fn blend_weights(states: &[(u32, f64)]) -> Result<ContextStates> {
    if states.is_empty() {
        return Err(Error::invalid("cannot blend an empty state list"));
    }
    let total: f64 = states.iter().map(|&(_, m)| m).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::invalid("state multipliers must have a positive sum"));
    }
    Ok(states.iter().map(|&(s, m)| (s, m / total)).collect())
}
