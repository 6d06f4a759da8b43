//! Named parameter registry shared by the denoiser, prediction heads, the
//! optimizer, and the checkpoint format. Registration order is the canonical
//! serialization order.

use crate::mat::Mat;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct ParamSet {
    set_id: u64,
    names: Vec<String>,
    values: Vec<Arc<Mat>>,
    index: HashMap<String, usize>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            set_id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Stable identity used to key gradients when several parameter sets
    /// share one graph. Clones keep the id; only the same object (or its
    /// clone) may be stepped against gradients computed from it.
    pub fn set_id(&self) -> u64 {
        self.set_id
    }

    pub fn add(&mut self, name: &str, value: Mat) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let idx = self.values.len();
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.index.insert(name.to_string(), idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value(&self, idx: usize) -> &Mat {
        &self.values[idx]
    }

    /// Shared handle for zero-copy graph leaves.
    pub fn value_arc(&self, idx: usize) -> Arc<Mat> {
        Arc::clone(&self.values[idx])
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Mat {
        Arc::make_mut(&mut self.values[idx])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter().map(|a| a.as_ref()))
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }
}
