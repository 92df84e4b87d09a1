use serde::{Deserialize, Serialize};

use super::lattice::{norm3, Lattice};
use super::{Composition, Element, StructureError};

/// One atom: an element plus fractional coordinates in [0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub element: Element,
    pub frac: [f64; 3],
}

/// A periodic crystal structure in canonical form.
///
/// Canonical means every fractional coordinate is wrapped to [0, 1) and the
/// sites are sorted by element symbol, then by coordinates. Construction via
/// [`Crystal::new`] always canonicalizes, and canonicalization is idempotent,
/// so two structures with the same geometry compare equal field-for-field.
/// The `label` carries free-form provenance and does not affect geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crystal {
    lattice: Lattice,
    sites: Vec<Site>,
    pub label: String,
}

/// Wraps a fractional coordinate into [0, 1); exactly 1.0 wraps to 0.0.
pub fn wrap_frac(x: f64) -> f64 {
    let w = x - x.floor();
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

impl Crystal {
    pub fn new(
        lattice: Lattice,
        sites: Vec<Site>,
        label: impl Into<String>,
    ) -> Result<Crystal, StructureError> {
        if sites.is_empty() {
            return Err(StructureError::NoSites);
        }
        let mut sites = sites;
        for s in &mut sites {
            for x in &mut s.frac {
                if !x.is_finite() {
                    return Err(StructureError::NonFiniteCoordinate);
                }
                *x = wrap_frac(*x);
            }
        }
        // Exact total order on the wrapped coordinates keeps the sort
        // deterministic and the canonical form stable under re-canonicalization.
        sites.sort_by(|a, b| {
            a.element.cmp(&b.element).then_with(|| {
                a.frac[0]
                    .total_cmp(&b.frac[0])
                    .then(a.frac[1].total_cmp(&b.frac[1]))
                    .then(a.frac[2].total_cmp(&b.frac[2]))
            })
        });
        Ok(Crystal {
            lattice,
            sites,
            label: label.into(),
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn natoms(&self) -> usize {
        self.sites.len()
    }

    pub fn composition(&self) -> Composition {
        Composition::from_sites(self.sites.iter().map(|s| s.element))
    }

    /// Distinct elements present, in sorted order.
    pub fn species(&self) -> Vec<Element> {
        let mut v: Vec<Element> = self.sites.iter().map(|s| s.element).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Replaces every site's element via `map`, keeping geometry, and
    /// re-canonicalizes (site order can change with the new labels).
    pub fn relabeled(&self, map: impl Fn(Element) -> Element, label: impl Into<String>) -> Crystal {
        let sites = self
            .sites
            .iter()
            .map(|s| Site {
                element: map(s.element),
                frac: s.frac,
            })
            .collect();
        Crystal::new(self.lattice, sites, label).expect("relabeling preserves validity")
    }

    /// Bytes identifying the geometry (lattice + sites, label excluded).
    /// Equal geometry yields equal bytes; used for dedup and task hashing.
    pub fn geometry_key(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(72 + self.sites.len() * 27);
        for row in self.lattice.rows() {
            for x in row {
                out.extend_from_slice(&x.to_bits().to_be_bytes());
            }
        }
        for s in &self.sites {
            out.extend_from_slice(s.element.symbol().as_bytes());
            out.push(b';');
            for x in s.frac {
                out.extend_from_slice(&x.to_bits().to_be_bytes());
            }
        }
        out
    }

    /// Minimum distance between site `i` and any periodic image of site `j`.
    ///
    /// For `i == j` the zero translation is excluded, giving the nearest
    /// self-image distance. The search enumerates lattice translations with
    /// integer coefficients bounded through the cell's perpendicular widths,
    /// which makes it exact for arbitrarily skewed cells.
    pub fn min_image_distance(&self, i: usize, j: usize) -> Result<f64, StructureError> {
        let n = self.sites.len();
        if i >= n || j >= n {
            return Err(StructureError::SiteIndexOutOfRange { index: i.max(j), len: n });
        }
        let mut delta = [0.0; 3];
        for k in 0..3 {
            // nearest-image heuristic gives the initial search radius
            let d = self.sites[j].frac[k] - self.sites[i].frac[k];
            delta[k] = d - d.round();
        }
        let exclude_zero = i == j;
        let mut best = if exclude_zero {
            f64::INFINITY
        } else {
            norm3(self.lattice.to_cartesian(delta))
        };
        if exclude_zero {
            // start from the shortest lattice vector as a radius bound
            for row in self.lattice.rows() {
                best = best.min(norm3(*row));
            }
        }
        let mut bound = [0i64; 3];
        for k in 0..3 {
            bound[k] = (best / self.lattice.perpendicular_width(k)).ceil() as i64 + 1;
        }
        for a in -bound[0]..=bound[0] {
            for b in -bound[1]..=bound[1] {
                for c in -bound[2]..=bound[2] {
                    let v = [
                        delta[0] + a as f64,
                        delta[1] + b as f64,
                        delta[2] + c as f64,
                    ];
                    if exclude_zero && v == [0.0, 0.0, 0.0] {
                        continue;
                    }
                    let d = norm3(self.lattice.to_cartesian(v));
                    if exclude_zero && d == 0.0 {
                        continue;
                    }
                    best = best.min(d);
                }
            }
        }
        Ok(best)
    }
}
