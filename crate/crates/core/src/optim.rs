//! AdamW with per-group learning rates and a linear decay schedule.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Mat};
use crate::error::{RecapError, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};

/// `lr(s) = lr0 · (1 - s / total)`, reaching zero after the last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub total_steps: u64,
}

impl LinearSchedule {
    pub fn new(total_steps: u64) -> Self {
        LinearSchedule { total_steps }
    }

    pub fn factor(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        (1.0 - step as f64 / self.total_steps as f64).max(0.0)
    }

    pub fn lr(&self, base: f64, step: u64) -> f64 {
        base * self.factor(step)
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Mat,
    v: Mat,
    steps: u64,
}

/// Decoupled weight decay Adam.
///
/// Parameters absent from the gradient set are left untouched: no decay,
/// no moment update. This keeps detached sub-graphs bit-identical.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<ParamId, Moments>,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct AdamIndex {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    entries: Vec<(String, u64, [usize; 2])>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
            step: 0,
        }
    }

    /// Applies one update. `lr_for` maps a parameter group to its current rate.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr_for: impl Fn(ParamGroup) -> f64,
    ) {
        for (id, g) in grads.iter() {
            let lr = lr_for(store.group(id));
            let moments = self.state.entry(id).or_insert_with(|| Moments {
                m: Mat::zeros(g.dim()),
                v: Mat::zeros(g.dim()),
                steps: 0,
            });
            moments.steps += 1;
            let t = moments.steps as i32;
            let (b1, b2) = (self.beta1, self.beta2);
            moments.m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            moments.v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let decay = 1.0 - lr * self.weight_decay;
            let eps = self.eps;
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&moments.m)
                .and(&moments.v)
                .for_each(|p, &m, &v| {
                    let mhat = m / c1;
                    let vhat = v / c2;
                    *p = *p * decay - lr * mhat / (vhat.sqrt() + eps);
                });
        }
        self.step += 1;
    }

    pub fn save(&self, store: &ParamStore, dir: &Path) -> Result<()> {
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (id, mo) in &self.state {
            entries.push((
                store.name(*id).to_string(),
                mo.steps,
                [mo.m.nrows(), mo.m.ncols()],
            ));
            for v in mo.m.iter().chain(mo.v.iter()) {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let index = AdamIndex {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            step: self.step,
            entries,
        };
        let jp = dir.join("optimizer.json");
        let bp = dir.join("optimizer.bin");
        fs::write(&jp, serde_json::to_vec_pretty(&index)?).map_err(|e| RecapError::io(&jp, e))?;
        fs::write(&bp, blob).map_err(|e| RecapError::io(&bp, e))?;
        Ok(())
    }

    pub fn load(store: &ParamStore, dir: &Path) -> Result<Self> {
        let jp = dir.join("optimizer.json");
        let bp = dir.join("optimizer.bin");
        let raw = fs::read(&jp).map_err(|e| RecapError::io(&jp, e))?;
        let index: AdamIndex = serde_json::from_slice(&raw)?;
        let blob = fs::read(&bp).map_err(|e| RecapError::io(&bp, e))?;
        let mut state = BTreeMap::new();
        let mut offset = 0usize;
        let mut read = |n: usize| -> Result<Vec<f64>> {
            if offset + n * 8 > blob.len() {
                return Err(RecapError::Checkpoint("optimizer.bin truncated".into()));
            }
            let out = blob[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += n * 8;
            Ok(out)
        };
        for (name, steps, shape) in &index.entries {
            let id = store.id(name).ok_or_else(|| {
                RecapError::Checkpoint(format!("optimizer state for unknown parameter {name}"))
            })?;
            let n = shape[0] * shape[1];
            let dim = (shape[0], shape[1]);
            let m = Mat::from_shape_vec(dim, read(n)?)
                .map_err(|e| RecapError::Checkpoint(e.to_string()))?;
            let v = Mat::from_shape_vec(dim, read(n)?)
                .map_err(|e| RecapError::Checkpoint(e.to_string()))?;
            state.insert(
                id,
                Moments {
                    m,
                    v,
                    steps: *steps,
                },
            );
        }
        Ok(AdamW {
            beta1: index.beta1,
            beta2: index.beta2,
            eps: index.eps,
            weight_decay: index.weight_decay,
            state,
            step: index.step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use ndarray::array;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn linear_schedule_matches_closed_form(total in 1u64..10_000, frac in 0.0f64..1.0, lr0 in 1e-6f64..1.0) {
            let s = ((total as f64) * frac) as u64;
            let sched = LinearSchedule::new(total);
            let expected = lr0 * (1.0 - s as f64 / total as f64);
            prop_assert!((sched.lr(lr0, s) - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn schedule_ends_at_zero() {
        let s = LinearSchedule::new(10);
        assert_eq!(s.lr(1e-4, 0), 1e-4);
        assert_eq!(s.lr(1e-4, 10), 0.0);
    }

    #[test]
    fn untouched_parameters_stay_bit_identical() {
        let mut store = ParamStore::new();
        let a = store.register("a", array![[0.3, -0.2]], ParamGroup::Encoder);
        let b = store.register("b", array![[1.0], [2.0]], ParamGroup::Rest);
        let before_a = store.get(a).clone();
        let before_b = store.get(b).clone();
        let grads = {
            let mut t = Tape::new(&store);
            let av = t.param(a);
            let bv = t.param(b);
            let d = t.detach(av);
            let y = t.matmul(d, bv);
            let l = t.sum_all(y);
            t.backward(l)
        };
        let mut opt = AdamW::new(0.01);
        opt.step(&mut store, &grads, |_| 1e-3);
        assert_eq!(store.get(a), &before_a);
        assert_ne!(store.get(b), &before_b);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first Adam step is lr·sign(g) (up to eps).
        let mut store = ParamStore::new();
        let a = store.register("a", array![[1.0, -1.0]], ParamGroup::Rest);
        let grads = {
            let mut t = Tape::new(&store);
            let av = t.param(a);
            let l = t.sum_all(av);
            t.backward(l)
        };
        let mut opt = AdamW::new(0.0);
        opt.step(&mut store, &grads, |_| 0.1);
        let p = store.get(a);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.1).abs() < 1e-6);
    }

    #[test]
    fn state_round_trips() {
        let mut store = ParamStore::new();
        let a = store.register("a", array![[1.0, -1.0]], ParamGroup::Rest);
        let grads = {
            let mut t = Tape::new(&store);
            let av = t.param(a);
            let sq = t.mul(av, av);
            let l = t.sum_all(sq);
            t.backward(l)
        };
        let mut opt = AdamW::new(0.01);
        opt.step(&mut store, &grads, |_| 0.1);
        let dir = tempfile::tempdir().unwrap();
        opt.save(&store, dir.path()).unwrap();
        let mut loaded = AdamW::load(&store, dir.path()).unwrap();
        let mut s1 = store.clone();
        let mut s2 = store.clone();
        opt.step(&mut s1, &grads, |_| 0.1);
        loaded.step(&mut s2, &grads, |_| 0.1);
        assert_eq!(s1.get(a), s2.get(a));
    }
}
