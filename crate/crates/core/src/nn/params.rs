//! Named parameter storage, seeded initialisation, and the Adam optimizer.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::tape::{cast, Scalar, Tape, Tid};

/// Named parameter arrays. Creation order is fixed by the model builder and
/// initial values depend only on (store seed, parameter name), so checkpoints
/// are stable across runs.
pub struct ParamStore<F: Scalar> {
    pub seed: u64,
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with std sqrt(2 / fan_in).
    KaimingNormal { fan_in: usize },
    /// Gaussian with the given std.
    Normal { std: f64 },
}

impl<F: Scalar> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, idx: usize) -> &ArrayD<F> {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut ArrayD<F> {
        &mut self.values[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Returns the parameter index, creating the array on first use.
    pub fn entry(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        if let Some(&i) = self.index.get(name) {
            assert_eq!(
                self.values[i].shape(),
                shape,
                "parameter `{name}` reused with a different shape"
            );
            return i;
        }
        let mut rng = crate::util::rng_for(self.seed, name, 0);
        let value = match init {
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::Ones => ArrayD::from_elem(IxDyn(shape), F::one()),
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                ArrayD::from_shape_fn(IxDyn(shape), |_| cast::<F>(std * gauss(&mut rng)))
            }
            Init::Normal { std } => {
                ArrayD::from_shape_fn(IxDyn(shape), |_| cast::<F>(std * gauss(&mut rng)))
            }
        };
        self.names.push(name.to_string());
        self.values.push(value);
        let idx = self.values.len() - 1;
        self.index.insert(name.to_string(), idx);
        idx
    }

    /// Replaces a parameter value (checkpoint load); the shape must match.
    pub fn set(&mut self, name: &str, value: ArrayD<F>) -> Result<(), String> {
        let Some(&i) = self.index.get(name) else {
            return Err(format!("unknown parameter `{name}`"));
        };
        if self.values[i].shape() != value.shape() {
            return Err(format!(
                "parameter `{name}` shape mismatch: stored {:?}, loaded {:?}",
                self.values[i].shape(),
                value.shape()
            ));
        }
        self.values[i] = value;
        Ok(())
    }
}

fn gauss(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Parameters bound into a tape for one forward pass.
#[derive(Default)]
pub struct Bound {
    pairs: Vec<(usize, Tid)>,
}

impl Bound {
    /// Binds a parameter as a tape leaf and records the mapping.
    pub fn bind<F: Scalar>(
        &mut self,
        tape: &mut Tape<F>,
        store: &mut ParamStore<F>,
        name: &str,
        shape: &[usize],
        init: Init,
    ) -> Tid {
        let idx = store.entry(name, shape, init);
        let id = tape.leaf(store.value(idx).clone());
        self.pairs.push((idx, id));
        id
    }

    /// Gradient per store parameter (None when a parameter was unused or
    /// disconnected from the loss).
    pub fn grads<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        node_grads: &[Option<ArrayD<F>>],
    ) -> Vec<Option<ArrayD<F>>> {
        let mut out: Vec<Option<ArrayD<F>>> = vec![None; store.len()];
        for &(idx, tid) in &self.pairs {
            if let Some(g) = &node_grads[tid.0] {
                match &mut out[idx] {
                    Some(acc) => *acc += g,
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

/// Adam with bias correction; moment tensors are part of the training
/// checkpoint so runs resume exactly.
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, store: &ParamStore<F>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: (0..store.len())
                .map(|i| ArrayD::zeros(store.value(i).raw_dim()))
                .collect(),
            v: (0..store.len())
                .map(|i| ArrayD::zeros(store.value(i).raw_dim()))
                .collect(),
        }
    }

    /// Grows moment storage when parameters were created after the optimizer
    /// (first forward pass happens before the first update).
    fn sync(&mut self, store: &ParamStore<F>) {
        for i in self.m.len()..store.len() {
            self.m.push(ArrayD::zeros(store.value(i).raw_dim()));
            self.v.push(ArrayD::zeros(store.value(i).raw_dim()));
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &[Option<ArrayD<F>>]) {
        self.sync(store);
        self.step += 1;
        let b1: F = cast(self.beta1);
        let b2: F = cast(self.beta2);
        let one = F::one();
        let bc1: F = cast(1.0 - self.beta1.powi(self.step as i32));
        let bc2: F = cast(1.0 - self.beta2.powi(self.step as i32));
        let lr: F = cast(self.lr);
        let eps: F = cast(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            let value = store.value_mut(i);
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}
