//! Named registry of trainable tensors and non-trainable buffers.

use crate::error::{Error, Result};
use crate::tensor::{ParamId, Real, Tensor};

#[derive(Clone, Debug)]
struct Slot<S> {
    name: String,
    value: Tensor<S>,
    trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    slots: Vec<Slot<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    fn push(&mut self, name: String, value: Tensor<S>, trainable: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.slots.push(Slot {
            name,
            value,
            trainable,
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.push(name.into(), value, true)
    }

    /// Running statistics and other state saved with the model but not trained.
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.push(name.into(), value, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.slots[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.slots[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.slots[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.value.numel())
            .sum()
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            slots: self
                .slots
                .iter()
                .map(|s| Slot {
                    name: s.name.clone(),
                    value: s.value.cast(),
                    trainable: s.trainable,
                })
                .collect(),
        }
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor<f32>)> {
        self.slots
            .iter()
            .map(|s| (s.name.clone(), s.value.cast()))
            .collect()
    }

    /// Overwrites every slot from `entries`; extra entries are ignored.
    pub fn load_entries(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        for slot in &mut self.slots {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == slot.name)
                .ok_or_else(|| Error::Checkpoint {
                    entry: slot.name.clone(),
                    reason: "missing".into(),
                })?;
            if t.shape() != slot.value.shape() {
                return Err(Error::Checkpoint {
                    entry: slot.name.clone(),
                    reason: format!("shape {:?}, expected {:?}", t.shape(), slot.value.shape()),
                });
            }
            if !t.all_finite() {
                return Err(Error::Checkpoint {
                    entry: slot.name.clone(),
                    reason: "contains non-finite values".into(),
                });
            }
            slot.value = t.cast();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_are_not_counted() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("w", Tensor::zeros(&[3, 2, 5]));
        s.add_buffer("running_mean", Tensor::zeros(&[3]));
        assert_eq!(s.param_count(), 30);
        assert_eq!(s.trainable_ids().count(), 1);
    }

    #[test]
    fn load_reports_missing_entry() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("a", Tensor::zeros(&[2]));
        s.add_param("b", Tensor::zeros(&[2]));
        let err = s
            .load_entries(&[("a".into(), Tensor::ones(&[2]))])
            .unwrap_err();
        assert!(matches!(err, Error::Checkpoint { ref entry, .. } if entry == "b"));
    }
}
