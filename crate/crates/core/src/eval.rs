//! Time-based evaluation: recall@N and MAP@N over recommendation lists.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::context::{blend_weights, ContextSource, ContextStates};
use crate::data::EventLog;
use crate::error::{Error, Result};
use crate::model::{FactorModel, Fixed};
use crate::solvers::IcaModel;

/// Something that scores every item for a user in a context.
pub trait Recommender: Sync {
    fn num_users(&self) -> usize;
    fn num_items(&self) -> usize;
    /// Number of context states the model was trained with; `None` for a
    /// context-free model, which ignores the context when scoring.
    fn context_size(&self) -> Option<usize>;
    fn score(&self, user: u32, context: &[(u32, f64)]) -> Result<Vec<f64>>;
}

impl Recommender for FactorModel {
    fn num_users(&self) -> usize {
        self.sizes()[0]
    }

    fn num_items(&self) -> usize {
        self.sizes()[1]
    }

    fn context_size(&self) -> Option<usize> {
        (self.ndim() >= 3).then(|| self.sizes()[2])
    }

    fn score(&self, user: u32, context: &[(u32, f64)]) -> Result<Vec<f64>> {
        match self.ndim() {
            2 => self.score_items(1, &[Some(Fixed::Index(user as usize)), None]),
            3 => {
                let blend = blend_weights(context)?;
                self.score_items(
                    1,
                    &[
                        Some(Fixed::Index(user as usize)),
                        None,
                        Some(Fixed::Blend(&blend)),
                    ],
                )
            }
            d => Err(Error::invalid(format!(
                "evaluation supports 2- or 3-dimensional models, got {d}"
            ))),
        }
    }
}

impl Recommender for IcaModel {
    fn num_users(&self) -> usize {
        (0..self.num_states())
            .find_map(|s| self.model_for(s))
            .map_or(0, |m| m.sizes()[0])
    }

    fn num_items(&self) -> usize {
        IcaModel::num_items(self)
    }

    fn context_size(&self) -> Option<usize> {
        Some(self.num_states())
    }

    /// Dispatches to the model of the highest-weighted state; states with
    /// no model score every item 0.
    fn score(&self, user: u32, context: &[(u32, f64)]) -> Result<Vec<f64>> {
        let state = primary_state(context)
            .ok_or_else(|| Error::invalid("composite baseline needs a context state"))?;
        match self.model_for(state as usize) {
            Some(m) => m.score_items(1, &[Some(Fixed::Index(user as usize)), None]),
            None => Ok(vec![0.0; self.num_items()]),
        }
    }
}

fn primary_state(context: &[(u32, f64)]) -> Option<u32> {
    context
        .iter()
        .fold(None, |best: Option<(u32, f64)>, &(s, w)| match best {
            Some((_, bw)) if bw >= w => best,
            _ => Some((s, w)),
        })
        .map(|(s, _)| s)
}

/// Indices of the `n` largest scores, best first; ties go to the lower
/// index and NaN ranks last. Excluded items are skipped.
pub fn top_n(scores: &[f64], n: usize, exclusions: Option<&HashSet<u32>>) -> Vec<u32> {
    let key = |i: u32| {
        let s = scores[i as usize];
        if s.is_nan() {
            f64::NEG_INFINITY
        } else {
            s
        }
    };
    let cmp = |a: &u32, b: &u32| key(*b).total_cmp(&key(*a)).then(a.cmp(b));
    let mut idx: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| exclusions.is_none_or(|ex| !ex.contains(i)))
        .collect();
    if n == 0 {
        return Vec::new();
    }
    if idx.len() > n {
        idx.select_nth_unstable_by(n - 1, cmp);
        idx.truncate(n);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Fraction of events whose item appears in the first `n` entries of its
/// list.
pub fn recall_at_n(lists: &[Vec<u32>], items: &[u32], n: usize) -> f64 {
    assert_eq!(lists.len(), items.len(), "one list per test event");
    if items.is_empty() {
        return 0.0;
    }
    let hits = lists
        .iter()
        .zip(items)
        .filter(|(l, it)| l.iter().take(n).any(|x| x == *it))
        .count();
    hits as f64 / items.len() as f64
}

/// Average precision of the first `n` entries of `list` against
/// `relevant`, normalized by the number of relevant items.
pub fn average_precision(list: &[u32], relevant: &HashSet<u32>, n: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, item) in list.iter().take(n).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / relevant.len() as f64
}

/// Mean of [`average_precision`] over requests.
pub fn map_at_n(lists: &[Vec<u32>], relevant: &[HashSet<u32>], n: usize) -> f64 {
    assert_eq!(lists.len(), relevant.len(), "one relevant set per request");
    if lists.is_empty() {
        return 0.0;
    }
    lists
        .iter()
        .zip(relevant)
        .map(|(l, r)| average_precision(l, r, n))
        .sum::<f64>()
        / lists.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapGrouping {
    /// One request per (user, context) with all its test items relevant.
    PerRequest,
    /// Every test event is its own request with one relevant item.
    PerEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecallUnit {
    Events,
    /// Distinct (user, item) pairs; a pair hits if any of its events hits.
    DistinctPairs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub cutoff: usize,
    /// Drop items the user already has in training from their lists.
    pub exclude_train_items: bool,
    pub map_grouping: MapGrouping,
    pub recall_unit: RecallUnit,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            cutoff: 20,
            exclude_train_items: false,
            map_grouping: MapGrouping::PerRequest,
            recall_unit: RecallUnit::Events,
        }
    }
}

/// Outcome of one test event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventHit {
    pub user: u32,
    pub item: u32,
    pub context: ContextStates,
    /// 1-based rank in the list, if present.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub recall_at_n: f64,
    pub map_at_n: f64,
    pub n: usize,
    pub events: usize,
    /// Test events whose user or item never occurs in training; they count
    /// as misses.
    pub skipped: usize,
    #[serde(skip)]
    pub hits: Vec<EventHit>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Per-event CSV `user,item,context,rank_or_-1` with vocabulary keys.
    pub fn write_hits_csv<W: Write>(&self, log: &EventLog, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["user", "item", "context", "rank_or_-1"])
            .map_err(csv_err)?;
        let vocab = log.vocab();
        for h in &self.hits {
            let context = h
                .context
                .iter()
                .map(|(s, _)| s.to_string())
                .collect::<Vec<_>>()
                .join("|");
            let rank = h.rank.map_or("-1".to_string(), |r| r.to_string());
            w.write_record([
                vocab.users.key(h.user).unwrap_or("?"),
                vocab.items.key(h.item).unwrap_or("?"),
                &context,
                &rank,
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Checks that a model's context dimension agrees with the assigner.
pub fn check_context(model: &dyn Recommender, context_size: Option<usize>) -> Result<()> {
    let describe =
        |size: Option<usize>| size.map_or("no context".into(), |s| format!("{s} states"));
    if model.context_size() == context_size {
        Ok(())
    } else {
        Err(Error::ContextMismatch {
            expected: describe(model.context_size()),
            found: describe(context_size),
        })
    }
}

/// Scores every test request, ranks items and aggregates recall@N and
/// MAP@N. Context states of test events come from
/// [`ContextSource::assign_queries`], so sequential contexts only see the
/// training history unless chaining is enabled on the assigner.
pub fn evaluate(
    model: &dyn Recommender,
    train: &EventLog,
    test: &EventLog,
    assigner: &dyn ContextSource,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.cutoff == 0 {
        return Err(Error::invalid("cutoff must be at least 1"));
    }
    check_context(model, assigner.context_size(train.vocab()))?;
    let n = opts.cutoff;

    let mut train_items: HashMap<u32, HashSet<u32>> = HashMap::new();
    let mut seen_items = HashSet::new();
    for e in train.events() {
        train_items.entry(e.user).or_default().insert(e.item);
        seen_items.insert(e.item);
    }
    let contexts = assigner.assign_queries(train, test);

    // group events into requests in first-appearance order
    let mut request_of: HashMap<(u32, Vec<(u32, u64)>), usize> = HashMap::new();
    let mut requests: Vec<(u32, ContextStates)> = Vec::new();
    let mut event_request = Vec::with_capacity(test.len());
    for (e, ctx) in test.events().iter().zip(&contexts) {
        let key = (e.user, ctx.iter().map(|&(s, w)| (s, w.to_bits())).collect());
        let id = *request_of.entry(key).or_insert_with(|| {
            requests.push((e.user, ctx.clone()));
            requests.len() - 1
        });
        event_request.push(id);
    }

    let lists: Vec<Vec<u32>> = requests
        .par_iter()
        .map(|(user, ctx)| -> Result<Vec<u32>> {
            let known = train_items.contains_key(user) && (*user as usize) < model.num_users();
            if !known {
                return Ok(Vec::new());
            }
            let scores = model.score(*user, ctx)?;
            let excl = opts.exclude_train_items.then(|| &train_items[user]);
            Ok(top_n(&scores, n, excl))
        })
        .collect::<Result<_>>()?;

    let mut skipped = 0;
    let mut hits = Vec::with_capacity(test.len());
    for ((e, ctx), &req) in test.events().iter().zip(contexts).zip(&event_request) {
        let known = train_items.contains_key(&e.user) && seen_items.contains(&e.item);
        if !known {
            skipped += 1;
        }
        let rank = known
            .then(|| lists[req].iter().position(|&x| x == e.item).map(|p| p + 1))
            .flatten();
        hits.push(EventHit {
            user: e.user,
            item: e.item,
            context: ctx,
            rank,
        });
    }

    let recall = match opts.recall_unit {
        RecallUnit::Events if hits.is_empty() => 0.0,
        RecallUnit::Events => {
            hits.iter().filter(|h| h.rank.is_some()).count() as f64 / hits.len() as f64
        }
        RecallUnit::DistinctPairs => {
            let mut pairs: HashMap<(u32, u32), bool> = HashMap::new();
            for h in &hits {
                *pairs.entry((h.user, h.item)).or_default() |= h.rank.is_some();
            }
            if pairs.is_empty() {
                0.0
            } else {
                pairs.values().filter(|&&hit| hit).count() as f64 / pairs.len() as f64
            }
        }
    };

    let map = match opts.map_grouping {
        MapGrouping::PerRequest => {
            let mut relevant = vec![HashSet::new(); requests.len()];
            for (e, &req) in test.events().iter().zip(&event_request) {
                relevant[req].insert(e.item);
            }
            map_at_n(&lists, &relevant, n)
        }
        MapGrouping::PerEvent => {
            let per_event: Vec<Vec<u32>> =
                event_request.iter().map(|&r| lists[r].clone()).collect();
            let relevant: Vec<HashSet<u32>> = test
                .events()
                .iter()
                .map(|e| HashSet::from([e.item]))
                .collect();
            map_at_n(&per_event, &relevant, n)
        }
    };

    Ok(EvalReport {
        recall_at_n: recall,
        map_at_n: map,
        n,
        events: test.len(),
        skipped,
        hits,
    })
}
