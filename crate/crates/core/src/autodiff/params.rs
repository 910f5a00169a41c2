use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{AsrError, Result};

/// Index of an entry in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (batch norm running statistics) are stored alongside the
    /// weights but never receive gradients.
    pub trainable: bool,
}

/// Named, ordered collection of model tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Records every entry as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Binding {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|e| g.leaf(e.value.clone(), e.trainable))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn assign(&mut self, other: &ParamSet<T>) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(AsrError::dim("assign", "parameter count", self.entries.len(), other.entries.len()));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(AsrError::shape(
                    "assign",
                    format!("{} {:?} vs {} {:?}", dst.name, dst.value.shape(), src.name, src.value.shape()),
                ));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Graph variables for one bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients of every trainable entry, in entry order; `None` for buffers.
    pub fn grads<T: Real>(&self, g: &Graph<T>, params: &ParamSet<T>) -> Vec<Option<Tensor<T>>> {
        params
            .entries()
            .iter()
            .zip(&self.vars)
            .map(|(e, &v)| if e.trainable { g.grad(v).cloned() } else { None })
            .collect()
    }
}

/// Glorot/Xavier uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn xavier_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let b = xavier_bound(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-b, b);
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

pub fn standard_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = xavier_uniform(&[9, 9], 9, 9, &mut rng);
        let bound = (6.0f64 / 18.0).sqrt();
        assert!((bound - 0.5773502691896257).abs() < 1e-15);
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn bind_marks_buffers_constant() {
        let mut ps = ParamSet::<f32>::new();
        let w = ps.add("w", Tensor::ones(&[2]), true);
        let m = ps.add("running_mean", Tensor::zeros(&[2]), false);
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        assert!(g.requires_grad(b.var(w)));
        assert!(!g.requires_grad(b.var(m)));
        assert_eq!(ps.trainable_count(), 2);
    }
}
