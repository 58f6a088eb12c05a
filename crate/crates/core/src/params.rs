//! Named parameter collections.
//!
//! Every model component allocates its arrays in a [`ParamStore`] and keeps
//! only [`ParamId`] handles. Two stores built by the same constructor calls
//! have identical layouts, which is what makes the teacher/student EMA a
//! plain element-wise pass over two stores.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviation of the normal initializer used for every weight.
pub const INIT_STD: f64 = 0.02;

/// Which collection a parameter lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StoreId {
    Student,
    Teacher,
    Text,
    Fem,
    Decoder,
    Probe,
    Scratch,
}

impl StoreId {
    pub fn name(self) -> &'static str {
        match self {
            StoreId::Student => "student",
            StoreId::Teacher => "teacher",
            StoreId::Text => "text",
            StoreId::Fem => "fem",
            StoreId::Decoder => "decoder",
            StoreId::Probe => "probe",
            StoreId::Scratch => "scratch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array2<f64>,
    /// Whether decoupled weight decay applies (false for norms and biases).
    pub decay: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>, decay: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, decay });
        ParamId(self.entries.len() - 1)
    }

    /// Weight matrix drawn from N(0, 0.02²).
    pub fn normal<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let value = normal_array(rows, cols, INIT_STD, rng);
        self.add(name, value, true)
    }

    /// Bias row drawn from N(0, 0.02²); excluded from weight decay.
    pub fn bias<R: Rng>(&mut self, name: impl Into<String>, cols: usize, rng: &mut R) -> ParamId {
        let value = normal_array(1, cols, INIT_STD, rng);
        self.add(name, value, false)
    }

    pub fn constant(&mut self, name: impl Into<String>, rows: usize, cols: usize, fill: f64) -> ParamId {
        self.add(name, Array2::from_elem((rows, cols), fill), false)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_all(&mut self) {
        for e in &mut self.entries {
            e.value.fill(0.0);
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Contract(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.value.dim() != b.value.dim() {
                return Err(Error::Contract(format!(
                    "parameter layout mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.value.dim(),
                    b.name,
                    b.value.dim()
                )));
            }
        }
        Ok(())
    }

    /// Euclidean distance between two stores viewed as flat vectors.
    pub fn distance(&self, other: &ParamStore) -> Result<f64> {
        self.check_same_layout(other)?;
        let mut acc = 0.0;
        for (a, b) in self.entries.iter().zip(&other.entries) {
            acc += a.value.iter().zip(b.value.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        Ok(acc.sqrt())
    }
}

pub fn normal_array<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std is positive");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_gives_same_layout_and_values() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut s = ParamStore::new();
            s.normal("w", 3, 4, &mut rng);
            s.bias("b", 4, &mut rng);
            s.constant("g", 1, 4, 1.0);
            s
        };
        let a = build();
        let b = build();
        assert_eq!(a, b);
        assert_eq!(a.distance(&b).unwrap(), 0.0);
        assert_eq!(a.num_scalars(), 12 + 4 + 4);
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let mut a = ParamStore::new();
        a.constant("x", 1, 2, 0.0);
        let mut b = ParamStore::new();
        b.constant("x", 2, 2, 0.0);
        assert!(matches!(a.check_same_layout(&b), Err(Error::Contract(_))));
    }
}
