//! Multinary convex-hull thermodynamics.
//!
//! Phases live in composition–energy space: an `n`-element chemical system
//! embeds each phase at the point `(x_2, …, x_n, E_f)`, where `x_i` is the
//! atomic fraction of the `i`-th element (sorted alphabetically; `x_1` is
//! implied) and `E_f` is the formation energy per atom relative to a set of
//! elemental reference energies. The lower convex hull of those points is
//! the T=0 phase diagram: phases on the hull are predicted stable, and the
//! vertical distance to the hull (`energy_above_hull`) ranks everything
//! else.
//!
//! [`build_hull`] always synthesizes a zero-formation-energy corner for
//! every element of the system, so the hull spans the full composition
//! simplex even when no elemental phase was supplied. Binary and ternary
//! systems use exact small-dimension geometry; larger systems answer hull
//! queries through linear programming.

mod diagram;
mod geometry;
mod lp;

pub use diagram::{export_diagram, write_hull_tsv, write_phase_diagram_svg};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::structure::{write_poscar, Composition, Crystal, Element};
use crate::util::{read_tsv_pairs, TsvError};

/// Geometric tolerance used when classifying points against the hull.
pub const HULL_TOLERANCE: f64 = 1e-8;

/// Distances below the hull smaller than this snap to exactly zero, so
/// hull members report `energy_above_hull == 0.0` rather than float dust.
const SNAP_EPS: f64 = 1e-9;

/// Facet enumeration for systems of four or more elements is capped at
/// this many candidate vertex subsets; beyond it only vertices are
/// reported.
const FACET_ENUMERATION_CAP: u128 = 200_000;

#[derive(Debug, thiserror::Error)]
pub enum HullError {
    #[error("no phase entries to build a hull from")]
    NoEntries,
    #[error("no elemental reference energy for {element}")]
    MissingReference { element: Element },
    #[error("duplicate phase entry id `{id}`")]
    DuplicateId { id: String },
    #[error("entry `{id}` has a non-finite energy")]
    NonFiniteEnergy { id: String },
    #[error("query energy is not finite")]
    NonFiniteQuery,
    #[error("promotion cutoff is not finite")]
    NonFiniteCutoff,
    #[error("element {element} is not part of this hull's chemical system")]
    ForeignElement { element: Element },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}:{line}: {reason}", path.display())]
    BadReferenceLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// One phase: an identifier, where it sits in composition space, and its
/// energy per atom on whatever absolute scale the caller uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub id: String,
    pub composition: Composition,
    /// Raw energy per atom (same scale as the reference energies), not a
    /// formation energy.
    pub energy_per_atom: f64,
    /// Marks entries produced as elemental reference calculations.
    #[serde(default)]
    pub is_reference: bool,
}

impl PhaseEntry {
    pub fn new(
        id: impl Into<String>,
        composition: Composition,
        energy_per_atom: f64,
        is_reference: bool,
    ) -> PhaseEntry {
        PhaseEntry {
            id: id.into(),
            composition: composition.reduced(),
            energy_per_atom,
            is_reference,
        }
    }
}

/// Lowest known elemental energy per atom for each element.
///
/// The zero of formation energy. Inserts keep the minimum, so results from
/// a run and values loaded from a reference table can be merged freely.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    energies: BTreeMap<Element, f64>,
}

impl ReferenceSet {
    pub fn new() -> ReferenceSet {
        ReferenceSet::default()
    }

    /// Records `energy_per_atom` for `element` if it is lower than what is
    /// already stored. Non-finite energies are ignored.
    pub fn insert_min(&mut self, element: Element, energy_per_atom: f64) {
        if !energy_per_atom.is_finite() {
            log::debug!(
                "ignoring non-finite reference energy for {}",
                element.symbol()
            );
            return;
        }
        self.energies
            .entry(element)
            .and_modify(|e| *e = e.min(energy_per_atom))
            .or_insert(energy_per_atom);
    }

    pub fn get(&self, element: Element) -> Option<f64> {
        self.energies.get(&element).copied()
    }

    pub fn elements(&self) -> impl Iterator<Item = Element> + '_ {
        self.energies.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    /// Folds every entry of `other` in via [`ReferenceSet::insert_min`].
    pub fn merge_min(&mut self, other: &ReferenceSet) {
        for (&e, &v) in &other.energies {
            self.insert_min(e, v);
        }
    }

    /// Loads a tab-separated `element<TAB>energy_per_atom` table. Repeated
    /// elements keep the lowest energy.
    pub fn load_tsv(path: &Path) -> Result<ReferenceSet, HullError> {
        let rows = read_tsv_pairs(path).map_err(|e| match e {
            TsvError::Io(source) => HullError::Io {
                path: path.to_path_buf(),
                source,
            },
            TsvError::BadLine { line, reason } => HullError::BadReferenceLine {
                path: path.to_path_buf(),
                line,
                reason,
            },
        })?;
        let mut refs = ReferenceSet::new();
        for (line, symbol, value) in rows {
            let element = Element::from_symbol(&symbol).ok_or_else(|| {
                HullError::BadReferenceLine {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("unknown element symbol `{symbol}`"),
                }
            })?;
            let energy: f64 = value.trim().parse().map_err(|_| HullError::BadReferenceLine {
                path: path.to_path_buf(),
                line,
                reason: format!("`{value}` is not a number"),
            })?;
            if !energy.is_finite() {
                return Err(HullError::BadReferenceLine {
                    path: path.to_path_buf(),
                    line,
                    reason: "energy must be finite".to_string(),
                });
            }
            refs.insert_min(element, energy);
        }
        Ok(refs)
    }
}

/// Formation energy per atom of a phase: its energy per atom minus the
/// composition-weighted mix of elemental reference energies.
pub fn formation_energy_per_atom(
    composition: &Composition,
    energy_per_atom: f64,
    refs: &ReferenceSet,
) -> Result<f64, HullError> {
    let mut mix = 0.0;
    for element in composition.elements() {
        let r = refs
            .get(element)
            .ok_or(HullError::MissingReference { element })?;
        mix += composition.fraction(element) * r;
    }
    Ok(energy_per_atom - mix)
}

/// A phase's share of a decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `(phase id, atomic fraction)` pairs, id-sorted; weights are
    /// non-negative and sum to one.
    pub parts: Vec<(String, f64)>,
    /// Formation energy per atom of that mixture — the hull energy at the
    /// queried composition.
    pub hull_energy: f64,
}

/// One collapsed point of the hull: the lowest-energy phase at its reduced
/// composition.
#[derive(Debug, Clone)]
pub(crate) struct HullMember {
    pub(crate) id: String,
    pub(crate) ef: f64,
    /// Fractions of elements `2..n` of the system (the embedding, without
    /// the energy axis).
    pub(crate) coords: Vec<f64>,
}

/// The lower convex hull of a chemical system.
#[derive(Debug, Clone)]
pub struct ConvexHullResult {
    elements: Vec<Element>,
    vertices: Vec<String>,
    facets: Vec<Vec<String>>,
    tolerance: f64,
    refs: ReferenceSet,
    members: Vec<HullMember>,
    /// Indices into `members`, one set per facet, aligned with `facets`.
    facet_members: Vec<Vec<usize>>,
}

impl ConvexHullResult {
    /// Elements of the system, sorted alphabetically.
    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    /// Ids of the stable phases (hull vertices), sorted.
    pub fn vertices(&self) -> &[String] {
        &self.vertices
    }

    /// Hull facets as sorted id sets, sorted lexicographically.
    pub fn facets(&self) -> &[Vec<String>] {
        &self.facets
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    /// The reference energies the hull was built against.
    pub fn references(&self) -> &ReferenceSet {
        &self.refs
    }

    pub(crate) fn members(&self) -> &[HullMember] {
        &self.members
    }

    pub(crate) fn facet_member_sets(&self) -> &[Vec<usize>] {
        &self.facet_members
    }

    /// Formation energy per atom against this hull's references.
    pub fn formation_energy(
        &self,
        composition: &Composition,
        energy_per_atom: f64,
    ) -> Result<f64, HullError> {
        self.check_system(composition)?;
        formation_energy_per_atom(composition, energy_per_atom, &self.refs)
    }

    /// Height of a phase above the hull, in energy per atom. Exactly `0.0`
    /// for phases on the hull; never meaningfully negative.
    pub fn energy_above_hull(
        &self,
        composition: &Composition,
        energy_per_atom: f64,
    ) -> Result<f64, HullError> {
        if !energy_per_atom.is_finite() {
            return Err(HullError::NonFiniteQuery);
        }
        let ef = self.formation_energy(composition, energy_per_atom)?;
        let hull = self.hull_energy_at(&composition.reduced())?;
        let above = ef - hull;
        Ok(if above.abs() < SNAP_EPS { 0.0 } else { above })
    }

    /// The stable phase mixture at a composition, and its energy.
    pub fn decompose(&self, composition: &Composition) -> Result<Decomposition, HullError> {
        self.check_system(composition)?;
        let query = composition.reduced();
        let (indices, weights) = self.supporting_mixture(&query)?;
        let hull_energy: f64 = indices
            .iter()
            .zip(&weights)
            .map(|(&i, w)| w * self.members[i].ef)
            .sum();
        let mut parts: Vec<(String, f64)> = indices
            .iter()
            .zip(&weights)
            .filter(|(_, w)| **w > 1e-12)
            .map(|(&i, &w)| (self.members[i].id.clone(), w))
            .collect();
        parts.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Decomposition { parts, hull_energy })
    }

    fn check_system(&self, composition: &Composition) -> Result<(), HullError> {
        for element in composition.elements() {
            if !self.elements.contains(&element) {
                return Err(HullError::ForeignElement { element });
            }
        }
        Ok(())
    }

    fn embed(&self, composition: &Composition) -> Vec<f64> {
        self.elements[1..]
            .iter()
            .map(|&e| composition.fraction(e))
            .collect()
    }

    /// Hull formation energy at a (reduced, system-checked) composition.
    fn hull_energy_at(&self, query: &Composition) -> Result<f64, HullError> {
        let (indices, weights) = self.supporting_mixture(query)?;
        Ok(indices
            .iter()
            .zip(&weights)
            .map(|(&i, w)| w * self.members[i].ef)
            .sum())
    }

    /// Members and convex weights realizing the hull at `query`.
    fn supporting_mixture(&self, query: &Composition) -> Result<(Vec<usize>, Vec<f64>), HullError> {
        self.check_system(query)?;
        let q = self.embed(query);
        let n = self.elements.len();
        if n == 1 {
            return Ok((vec![0], vec![1.0]));
        }
        if n <= 3 {
            let fi = self.containing_facet(&q);
            let idxs = self.facet_members[fi].clone();
            // weights solve: composition balance for elements 2..n plus
            // total mass one
            let rows = q.len() + 1;
            let mut a = vec![vec![0.0; idxs.len()]; rows];
            let mut b = vec![0.0; rows];
            for (d, qd) in q.iter().enumerate() {
                for (j, &m) in idxs.iter().enumerate() {
                    a[d][j] = self.members[m].coords[d];
                }
                b[d] = *qd;
            }
            for j in 0..idxs.len() {
                a[q.len()][j] = 1.0;
            }
            b[q.len()] = 1.0;
            let mut w = solve_consistent(&a, &b)
                .expect("facet members are affinely independent by construction");
            for wj in &mut w {
                if *wj < 0.0 {
                    *wj = 0.0;
                }
            }
            return Ok((idxs, w));
        }
        // n >= 4: linear program over all members
        let m = self.members.len();
        let mut a = vec![vec![0.0; m]; q.len() + 1];
        let mut b = vec![0.0; q.len() + 1];
        for (d, qd) in q.iter().enumerate() {
            for (j, member) in self.members.iter().enumerate() {
                a[d][j] = member.coords[d];
            }
            b[d] = *qd;
        }
        for j in 0..m {
            a[q.len()][j] = 1.0;
        }
        b[q.len()] = 1.0;
        let c: Vec<f64> = self.members.iter().map(|p| p.ef).collect();
        let sol = lp::solve_min(&c, &a, &b)
            .expect("corner members make every in-simplex composition feasible");
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for (j, &w) in sol.x.iter().enumerate() {
            if w > 1e-12 {
                indices.push(j);
                weights.push(w);
            }
        }
        Ok((indices, weights))
    }

    /// Facet whose composition-space projection best contains `q`.
    fn containing_facet(&self, q: &[f64]) -> usize {
        let mut best = 0;
        let mut best_margin = f64::NEG_INFINITY;
        for (fi, idxs) in self.facet_members.iter().enumerate() {
            let margin = self.containment_margin(idxs, q);
            if margin > best_margin {
                best_margin = margin;
                best = fi;
            }
        }
        best
    }

    /// Smallest barycentric coordinate of `q` in the facet's projection;
    /// non-negative means inside.
    fn containment_margin(&self, idxs: &[usize], q: &[f64]) -> f64 {
        let rows = q.len() + 1;
        let mut a = vec![vec![0.0; idxs.len()]; rows];
        let mut b = vec![0.0; rows];
        for (d, qd) in q.iter().enumerate() {
            for (j, &m) in idxs.iter().enumerate() {
                a[d][j] = self.members[m].coords[d];
            }
            b[d] = *qd;
        }
        for j in 0..idxs.len() {
            a[q.len()][j] = 1.0;
        }
        b[q.len()] = 1.0;
        match solve_consistent(&a, &b) {
            Some(w) => w.iter().fold(f64::INFINITY, |acc, &x| acc.min(x)),
            None => f64::NEG_INFINITY,
        }
    }
}

/// Builds the lower convex hull of `entries` against `refs`.
///
/// Every element appearing in any entry gets a synthetic zero-formation-
/// energy corner (id `ref:<symbol>`) so the hull always spans the full
/// composition simplex; a real entry at the same composition with the same
/// or lower formation energy takes precedence. When several entries share
/// a reduced composition only the lowest-energy one (ties: smaller id)
/// becomes a hull point.
pub fn build_hull(entries: &[PhaseEntry], refs: &ReferenceSet) -> Result<ConvexHullResult, HullError> {
    if entries.is_empty() {
        return Err(HullError::NoEntries);
    }
    let mut seen: HashSet<&str> = HashSet::new();
    for e in entries {
        if !seen.insert(e.id.as_str()) {
            return Err(HullError::DuplicateId { id: e.id.clone() });
        }
        if !e.energy_per_atom.is_finite() {
            return Err(HullError::NonFiniteEnergy { id: e.id.clone() });
        }
    }

    // chemical system: sorted union of entry elements
    let mut element_set: HashSet<Element> = HashSet::new();
    for e in entries {
        element_set.extend(e.composition.elements());
    }
    let mut elements: Vec<Element> = element_set.into_iter().collect();
    elements.sort();

    // an entry id that collides with a synthetic corner id at a different
    // composition would make the result's id sets ambiguous
    for element in &elements {
        let reserved = format!("ref:{}", element.symbol());
        for e in entries {
            let pure = e.composition.reduced() == pure_composition(*element);
            if e.id == reserved && !pure {
                return Err(HullError::DuplicateId { id: reserved });
            }
        }
    }

    // formation energies, plus synthetic corners
    let mut candidates: Vec<(String, Composition, f64)> = Vec::with_capacity(entries.len() + elements.len());
    for e in entries {
        let comp = e.composition.reduced();
        let ef = formation_energy_per_atom(&comp, e.energy_per_atom, refs)?;
        candidates.push((e.id.clone(), comp, ef));
    }
    for element in &elements {
        refs.get(*element)
            .ok_or(HullError::MissingReference { element: *element })?;
        candidates.push((
            format!("ref:{}", element.symbol()),
            pure_composition(*element),
            0.0,
        ));
    }

    // collapse to the lowest-energy phase per reduced composition
    let mut best: HashMap<Composition, (String, f64)> = HashMap::new();
    for (id, comp, ef) in candidates {
        match best.get_mut(&comp) {
            None => {
                best.insert(comp, (id, ef));
            }
            Some(cur) => {
                if ef < cur.1 || (ef == cur.1 && id < cur.0) {
                    *cur = (id, ef);
                }
            }
        }
    }
    let mut members: Vec<HullMember> = best
        .into_iter()
        .map(|(composition, (id, ef))| {
            let coords = elements[1..]
                .iter()
                .map(|&e| composition.fraction(e))
                .collect();
            HullMember { id, ef, coords }
        })
        .collect();
    members.sort_by(|a, b| a.id.cmp(&b.id));

    let n = elements.len();
    let (vertex_idx, facet_idx) = match n {
        1 => (vec![0], vec![vec![0]]),
        2 => binary_hull(&members),
        3 => ternary_hull(&members),
        _ => multinary_hull(&members, n),
    };

    let mut vertices: Vec<String> = vertex_idx.iter().map(|&i| members[i].id.clone()).collect();
    vertices.sort();
    let mut facet_pairs: Vec<(Vec<String>, Vec<usize>)> = facet_idx
        .into_iter()
        .map(|idxs| {
            let mut ids: Vec<String> = idxs.iter().map(|&i| members[i].id.clone()).collect();
            ids.sort();
            (ids, idxs)
        })
        .collect();
    facet_pairs.sort_by(|a, b| a.0.cmp(&b.0));
    let (facets, facet_members) = facet_pairs.into_iter().unzip();

    Ok(ConvexHullResult {
        elements,
        vertices,
        facets,
        tolerance: HULL_TOLERANCE,
        refs: refs.clone(),
        members,
        facet_members,
    })
}

fn pure_composition(element: Element) -> Composition {
    Composition::from_sites([element])
}

/// Lower chain of a two-element system: vertices plus consecutive segments.
fn binary_hull(members: &[HullMember]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let pts: Vec<(f64, f64)> = members.iter().map(|p| (p.coords[0], p.ef)).collect();
    let chain = geometry::lower_chain_2d(&pts);
    let facets = chain.windows(2).map(|w| w.to_vec()).collect();
    (chain, facets)
}

/// Lower hull of a three-element system via the 3-D embedding.
fn ternary_hull(members: &[HullMember]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let pts: Vec<[f64; 3]> = members
        .iter()
        .map(|p| [p.coords[0], p.coords[1], p.ef])
        .collect();
    match geometry::lower_hull_3d(&pts) {
        geometry::Hull3::Facets(facets) => {
            let mut verts: Vec<usize> = facets.iter().flatten().copied().collect();
            verts.sort_unstable();
            verts.dedup();
            (verts, facets.into_iter().map(|f| f.to_vec()).collect())
        }
        geometry::Hull3::Planar { facets, corners } => {
            let mut verts = corners;
            verts.sort_unstable();
            verts.dedup();
            (verts, facets.into_iter().map(|f| f.to_vec()).collect())
        }
    }
}

/// Hull of a system with four or more elements, via linear programming.
///
/// A member is a vertex exactly when the other members cannot tie its
/// energy at its own composition. Facets are found by checking every
/// n-vertex subset for a supporting hyperplane, unless there are too many
/// subsets to enumerate.
fn multinary_hull(members: &[HullMember], n: usize) -> (Vec<usize>, Vec<Vec<usize>>) {
    let dim = n - 1;
    let mut vertices: Vec<usize> = Vec::new();
    for (i, p) in members.iter().enumerate() {
        match hull_value_excluding(members, dim, &p.coords, Some(i)) {
            None => vertices.push(i), // composition unreachable without p
            Some(v) => {
                if v > p.ef + HULL_TOLERANCE {
                    vertices.push(i);
                }
            }
        }
    }

    let v = vertices.len() as u128;
    let mut subsets = 1u128;
    for k in 0..n as u128 {
        subsets = subsets.saturating_mul(v - k) / (k + 1);
    }
    if subsets > FACET_ENUMERATION_CAP {
        log::warn!(
            "{} candidate facet subsets exceed the enumeration cap; reporting vertices only",
            subsets
        );
        return (vertices, Vec::new());
    }

    let mut facets: Vec<Vec<usize>> = Vec::new();
    let mut choice: Vec<usize> = Vec::new();
    enumerate_subsets(&vertices, n, 0, &mut choice, &mut |subset| {
        if is_supporting_facet(members, dim, subset) {
            facets.push(subset.to_vec());
        }
    });
    facets.sort();
    (vertices, facets)
}

/// Minimum mixture energy at `coords` using every member except `skip`.
/// `None` when that composition cannot be mixed without the skipped member.
fn hull_value_excluding(
    members: &[HullMember],
    dim: usize,
    coords: &[f64],
    skip: Option<usize>,
) -> Option<f64> {
    let keep: Vec<usize> = (0..members.len()).filter(|&j| Some(j) != skip).collect();
    let mut a = vec![vec![0.0; keep.len()]; dim + 1];
    let mut b = vec![0.0; dim + 1];
    for d in 0..dim {
        for (col, &j) in keep.iter().enumerate() {
            a[d][col] = members[j].coords[d];
        }
        b[d] = coords[d];
    }
    for col in 0..keep.len() {
        a[dim][col] = 1.0;
    }
    b[dim] = 1.0;
    let c: Vec<f64> = keep.iter().map(|&j| members[j].ef).collect();
    match lp::solve_min(&c, &a, &b) {
        Ok(sol) => Some(sol.value),
        Err(lp::LpError::Infeasible) => None,
        Err(e) => {
            // numerically stuck programs are treated as "cannot exclude"
            log::warn!("hull exclusion LP failed: {e:?}");
            None
        }
    }
}

fn enumerate_subsets(
    items: &[usize],
    size: usize,
    start: usize,
    choice: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    if choice.len() == size {
        visit(choice);
        return;
    }
    let needed = size - choice.len();
    for i in start..items.len() {
        if items.len() - i < needed {
            break;
        }
        choice.push(items[i]);
        enumerate_subsets(items, size, i + 1, choice, visit);
        choice.pop();
    }
}

/// Does the hyperplane through these `n` lifted members support the whole
/// point set from below?
fn is_supporting_facet(members: &[HullMember], dim: usize, subset: &[usize]) -> bool {
    // plane ef(x) = sum(a_d * x_d) + a_dim, solved from the subset
    let mut m = vec![vec![0.0; dim + 1]; dim + 1];
    let mut rhs = vec![0.0; dim + 1];
    for (row, &i) in subset.iter().enumerate() {
        for d in 0..dim {
            m[row][d] = members[i].coords[d];
        }
        m[row][dim] = 1.0;
        rhs[row] = members[i].ef;
    }
    let coeffs = match solve_square(&m, &rhs) {
        Some(c) => c,
        None => return false, // affinely dependent subset spans no facet
    };
    members.iter().all(|p| {
        let plane: f64 = p
            .coords
            .iter()
            .enumerate()
            .map(|(d, x)| coeffs[d] * x)
            .sum::<f64>()
            + coeffs[dim];
        p.ef + SNAP_EPS >= plane
    })
}

/// Solves the square system `m · w = rhs` by Gaussian elimination with
/// partial pivoting; `None` for singular systems.
pub(crate) fn solve_square(m: &[Vec<f64>], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .map(|row| {
            let mut r = row.clone();
            r.truncate(n);
            r
        })
        .collect();
    let mut b = rhs.to_vec();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

/// Solves a possibly rectangular but consistent system `a · w = b`;
/// `None` if the system is inconsistent or underdetermined.
fn solve_consistent(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let rows = a.len();
    let cols = a.first()?.len();
    let mut m: Vec<Vec<f64>> = (0..rows)
        .map(|r| {
            let mut row = a[r].clone();
            row.push(b[r]);
            row
        })
        .collect();
    let mut pivot_row = 0;
    let mut pivots: Vec<(usize, usize)> = Vec::new();
    for col in 0..cols {
        let best = (pivot_row..rows).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[best][col].abs() < 1e-12 {
            continue;
        }
        m.swap(pivot_row, best);
        for r in 0..rows {
            if r != pivot_row {
                let f = m[r][col] / m[pivot_row][col];
                for k in col..=cols {
                    m[r][k] -= f * m[pivot_row][k];
                }
            }
        }
        pivots.push((pivot_row, col));
        pivot_row += 1;
        if pivot_row == rows {
            break;
        }
    }
    // inconsistent rows mean the query lies outside the facet's span
    for r in pivot_row..rows {
        if m[r][cols].abs() > 1e-7 {
            return None;
        }
    }
    if pivots.len() < cols {
        return None; // underdetermined
    }
    let mut w = vec![0.0; cols];
    for &(r, c) in &pivots {
        w[c] = m[r][cols] / m[r][c];
    }
    Some(w)
}

/// Copies candidate structures within `e_cut` of the hull into `dest` as
/// `<id>.vasp` files, best (lowest `energy_above_hull`, then id) first.
/// Returns the promoted ids in that order.
pub fn promote_candidates(
    items: &[(PhaseEntry, Crystal)],
    hull: &ConvexHullResult,
    e_cut: f64,
    dest: &Path,
) -> Result<Vec<String>, HullError> {
    if !e_cut.is_finite() {
        return Err(HullError::NonFiniteCutoff);
    }
    let mut ranked: Vec<(f64, &str, &Crystal)> = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    for (entry, crystal) in items {
        if !seen.insert(entry.id.as_str()) {
            continue;
        }
        let above = hull.energy_above_hull(&entry.composition, entry.energy_per_atom)?;
        if above <= e_cut {
            ranked.push((above, entry.id.as_str(), crystal));
        }
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));

    std::fs::create_dir_all(dest).map_err(|source| HullError::Io {
        path: dest.to_path_buf(),
        source,
    })?;
    let mut promoted = Vec::with_capacity(ranked.len());
    for (_, id, crystal) in ranked {
        let path = dest.join(format!("{id}.vasp"));
        std::fs::write(&path, write_poscar(crystal)).map_err(|source| HullError::Io {
            path: path.clone(),
            source,
        })?;
        promoted.push(id.to_string());
    }
    Ok(promoted)
}
