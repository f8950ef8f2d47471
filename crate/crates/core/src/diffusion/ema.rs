use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

/// Exponential moving average of trainable parameters. Non-trainable
/// buffers (running statistics) are copied rather than averaged.
#[derive(Clone, Debug)]
pub struct EmaState {
    rate: f64,
    shadow: Vec<Tensor>,
}

pub const DEFAULT_EMA_RATE: f64 = 0.995;

impl EmaState {
    pub fn new(store: &ParamStore, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::Config(format!("EMA rate must lie in (0, 1), got {rate}")));
        }
        Ok(EmaState {
            rate,
            shadow: store.ids().map(|id| store.get(id).clone()).collect(),
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    /// `shadow ← rate·shadow + (1 − rate)·param`.
    pub fn update(&mut self, store: &ParamStore) -> Result<()> {
        if store.len() != self.shadow.len() {
            return Err(Error::contract(
                "ema_update",
                format!("{} shadows for {} parameters", self.shadow.len(), store.len()),
            ));
        }
        for (id, shadow) in store.ids().zip(self.shadow.iter_mut()) {
            let p = store.get(id);
            if p.shape() != shadow.shape() {
                return Err(Error::contract(
                    "ema_update",
                    format!("{}: shadow {:?} vs param {:?}", store.name(id), shadow.shape(), p.shape()),
                ));
            }
            if store.is_trainable(id) {
                let r = self.rate;
                shadow
                    .data_mut()
                    .iter_mut()
                    .zip(p.data())
                    .for_each(|(s, &v)| *s = r * *s + (1.0 - r) * v);
            } else {
                shadow.data_mut().copy_from_slice(p.data());
            }
        }
        Ok(())
    }

    /// Overwrite `store` with the averaged values.
    pub fn copy_to(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        if ids.len() != self.shadow.len() {
            return Err(Error::contract("ema_copy", "parameter count changed"));
        }
        for (id, s) in ids.into_iter().zip(&self.shadow) {
            store.set(id, s.clone())?;
        }
        Ok(())
    }
}
