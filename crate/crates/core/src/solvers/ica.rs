use crate::context::ContextSource;
use crate::data::{build_tensor, EventLog, SparseTensor, WeightScheme};
use crate::error::{Error, Result};
use crate::model::FactorModel;

use super::{train, TrainConfig};

/// Composite baseline: one independent user × item model per context state.
#[derive(Debug, Clone)]
pub struct IcaModel {
    models: Vec<Option<FactorModel>>,
    num_items: usize,
}

impl IcaModel {
    pub fn num_states(&self) -> usize {
        self.models.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Model of `state`, or `None` when that state had no training events.
    pub fn model_for(&self, state: usize) -> Option<&FactorModel> {
        self.models.get(state).and_then(Option::as_ref)
    }
}

/// Trains one user × item model per context state on the events assigned
/// to that state. State `s` uses seed `config.seed + s`.
pub fn train_ica_baseline(
    train_log: &EventLog,
    assigner: &dyn ContextSource,
    factors: usize,
    scheme: &WeightScheme,
    config: &TrainConfig,
) -> Result<IcaModel> {
    let n_states = assigner
        .context_size(train_log.vocab())
        .ok_or_else(|| Error::invalid("the composite baseline needs a context"))?;
    let full = build_tensor(train_log, assigner, scheme)?;
    let (n_users, n_items) = (full.sizes()[0], full.sizes()[1]);

    let mut per_state: Vec<Vec<(Vec<u32>, f64)>> = vec![Vec::new(); n_states];
    for (idx, w) in full.cells() {
        per_state[idx[2] as usize].push((vec![idx[0], idx[1]], w));
    }
    let mut models = Vec::with_capacity(n_states);
    for (state, cells) in per_state.into_iter().enumerate() {
        if cells.is_empty() {
            models.push(None);
            continue;
        }
        let tensor = SparseTensor::new(vec![n_users, n_items], full.w0(), cells)?;
        let seed = config.seed.wrapping_add(state as u64);
        let mut model = FactorModel::init(&[n_users, n_items], factors, seed)?;
        train(&mut model, &tensor, config, &mut ())?;
        models.push(Some(model));
    }
    Ok(IcaModel {
        models,
        num_items: n_items,
    })
}
