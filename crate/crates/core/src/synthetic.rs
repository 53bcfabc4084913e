//! Seeded generator of event logs whose item preferences depend on the time
//! of day, for benchmarks and end-to-end checks.
//!
//! Items are split into two disjoint regimes. Events in the first half of
//! the day's bands draw from regime 0, the rest from regime 1. Users belong
//! to taste clusters; within a regime each cluster has its own items, drawn
//! with a power-law popularity.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Event, EventLog, Vocabularies};

pub const DAY: u64 = 86_400;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    /// Time bands per day; must divide 86 400.
    pub bands: usize,
    pub clusters: usize,
    /// Training days; one more day of events forms the test period.
    pub days: u64,
    pub train_events_per_user: usize,
    pub test_events_per_user: usize,
    /// Probability that an event picks a uniformly random item.
    pub noise: f64,
    /// Exponent of the within-cluster popularity law.
    pub skew: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 1000,
            items: 500,
            bands: 6,
            clusters: 10,
            days: 28,
            train_events_per_user: 20,
            test_events_per_user: 2,
            noise: 0.05,
            skew: 0.8,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn band_length(&self) -> u64 {
        DAY / self.bands as u64
    }

    /// First timestamp of the test period.
    pub fn split_time(&self) -> u64 {
        self.days * DAY
    }

    /// Regime (0 or 1) of a time band.
    pub fn regime_of_band(&self, band: usize) -> usize {
        usize::from(band >= self.bands / 2)
    }
}

/// Generates the log; users are `u0..`, items `i0..`, and each item's
/// category is `c<regime>_<cluster>`.
pub fn generate(spec: &SyntheticSpec) -> EventLog {
    assert!(spec.users > 0 && spec.items >= 2 * spec.clusters && spec.clusters > 0);
    assert!(spec.bands >= 2 && DAY.is_multiple_of(spec.bands as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let half = spec.items / 2;
    // pools[regime][cluster] = items, most popular first
    let mut pools: Vec<Vec<Vec<u32>>> = vec![vec![Vec::new(); spec.clusters]; 2];
    let mut category = vec![0u32; spec.items];
    for (item, cat) in category.iter_mut().enumerate() {
        let regime = usize::from(item >= half);
        let cluster = item % spec.clusters;
        pools[regime][cluster].push(item as u32);
        *cat = (regime * spec.clusters + cluster) as u32;
    }
    for pool in pools.iter_mut().flatten() {
        pool.shuffle(&mut rng);
    }
    let popularity = |n: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..n)
            .map(|r| 1.0 / ((r + 1) as f64).powf(spec.skew))
            .collect();
        let total: f64 = raw.iter().sum();
        let mut acc = 0.0;
        raw.iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect()
    };
    let cdfs: Vec<Vec<Vec<f64>>> = pools
        .iter()
        .map(|r| r.iter().map(|p| popularity(p.len())).collect())
        .collect();

    let band_len = spec.band_length();
    let mut events =
        Vec::with_capacity(spec.users * (spec.train_events_per_user + spec.test_events_per_user));
    for user in 0..spec.users {
        let cluster = rng.random_range(0..spec.clusters);
        let mut emit = |rng: &mut ChaCha8Rng, day: u64| {
            let band = rng.random_range(0..spec.bands);
            let ts = day * DAY + band as u64 * band_len + rng.random_range(0..band_len);
            let item = if rng.random::<f64>() < spec.noise {
                rng.random_range(0..spec.items) as u32
            } else {
                let regime = spec.regime_of_band(band);
                let u: f64 = rng.random();
                let cdf = &cdfs[regime][cluster];
                let pos = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
                pools[regime][cluster][pos]
            };
            events.push(Event {
                user: user as u32,
                item,
                timestamp: ts,
                category: Some(category[item as usize]),
            });
        };
        for _ in 0..spec.train_events_per_user {
            let day = rng.random_range(0..spec.days);
            emit(&mut rng, day);
        }
        for _ in 0..spec.test_events_per_user {
            emit(&mut rng, spec.days);
        }
    }

    let mut vocab = Vocabularies::default();
    for u in 0..spec.users {
        vocab.users.get_or_insert(&format!("u{u}"));
    }
    for i in 0..spec.items {
        vocab.items.get_or_insert(&format!("i{i}"));
    }
    for regime in 0..2 {
        for c in 0..spec.clusters {
            vocab.categories.get_or_insert(&format!("c{regime}_{c}"));
        }
    }
    EventLog::from_events(events, vocab).expect("generated indices are in range")
}

/// Renders a log as the TSV event format.
pub fn to_tsv(log: &EventLog) -> String {
    let v = log.vocab();
    let mut out = String::new();
    for e in log.events() {
        out.push_str(v.users.key(e.user).unwrap_or("?"));
        out.push('\t');
        out.push_str(v.items.key(e.item).unwrap_or("?"));
        out.push('\t');
        out.push_str(&e.timestamp.to_string());
        if let Some(c) = e.category.and_then(|c| v.categories.key(c)) {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
    }
    out
}
