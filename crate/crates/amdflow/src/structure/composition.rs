use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Element;

/// Integer atom counts per element. Iteration order is sorted by symbol.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Composition {
    counts: BTreeMap<Element, u64>,
}

impl Composition {
    pub fn from_counts(counts: BTreeMap<Element, u64>) -> Option<Composition> {
        if counts.is_empty() || counts.values().any(|&c| c == 0) {
            return None;
        }
        Some(Composition { counts })
    }

    pub fn from_sites(elements: impl IntoIterator<Item = Element>) -> Composition {
        let mut counts = BTreeMap::new();
        for e in elements {
            *counts.entry(e).or_insert(0u64) += 1;
        }
        Composition { counts }
    }

    pub fn counts(&self) -> &BTreeMap<Element, u64> {
        &self.counts
    }

    pub fn count(&self, e: Element) -> u64 {
        self.counts.get(&e).copied().unwrap_or(0)
    }

    pub fn natoms(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn elements(&self) -> impl Iterator<Item = Element> + '_ {
        self.counts.keys().copied()
    }

    /// Divides all counts by their gcd.
    pub fn reduced(&self) -> Composition {
        let g = self.counts.values().fold(0u64, |acc, &c| gcd(acc, c));
        let counts = self
            .counts
            .iter()
            .map(|(&e, &c)| (e, c / g))
            .collect();
        Composition { counts }
    }

    /// Atomic fraction of `e` in this composition.
    pub fn fraction(&self, e: Element) -> f64 {
        self.count(e) as f64 / self.natoms() as f64
    }

    /// Reduced formula like `CeFe2In`; counts of 1 are omitted.
    pub fn reduced_formula(&self) -> String {
        let mut s = String::new();
        for (e, c) in self.reduced().counts {
            s.push_str(e.symbol());
            if c != 1 {
                s.push_str(&c.to_string());
            }
        }
        s
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.reduced_formula())
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
