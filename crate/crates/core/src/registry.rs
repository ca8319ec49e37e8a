//! Name-keyed registries for interchangeable strategies.
//!
//! Objectives and weight generators are both selected at runtime from a
//! string (CLI flag or model file). Each family registers a constructor per
//! name; lookups of unknown names fail with the list of known ones.

use std::collections::BTreeMap;

use crate::error::{GbunError, Result};

pub struct Registry<F> {
    kind: &'static str,
    entries: BTreeMap<&'static str, F>,
}

impl<F> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `factory` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: &'static str, factory: F) -> &mut Self {
        self.entries.insert(name, factory);
        self
    }

    pub fn get(&self, name: &str) -> Result<&F> {
        self.entries
            .get(name)
            .ok_or_else(|| GbunError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }
}
