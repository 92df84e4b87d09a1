//! Stage 3 — near-duplicate filtering.
//!
//! Structures are summarized as smeared pairwise-distance histograms, one
//! channel per element pair; similarity is the cosine over all channels.
//! The metric is invariant under rigid translation, site reordering, and
//! rotation (it sees only distances and element pairs). Deduplication is a
//! greedy lowest-energy-first sweep that never merges structures with
//! different reduced compositions.

use std::collections::{BTreeMap, HashMap};

use crate::structure::{Composition, Crystal, Element};

#[derive(Debug, thiserror::Error)]
pub enum SimilarityError {
    #[error("fingerprint parameters invalid: {reason}")]
    BadParams { reason: &'static str },
    #[error("fingerprints were built with different parameters")]
    ParamsMismatch,
    #[error("dedup threshold must be in (0, 1], got {got}")]
    BadThreshold { got: f64 },
}

/// Histogram geometry and smearing width, in angstroms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FingerprintParams {
    pub cutoff: f64,
    pub bin_width: f64,
    pub smearing_sigma: f64,
}

impl Default for FingerprintParams {
    fn default() -> Self {
        FingerprintParams {
            cutoff: 10.0,
            bin_width: 0.1,
            smearing_sigma: 0.05,
        }
    }
}

impl FingerprintParams {
    pub fn validate(&self) -> Result<(), SimilarityError> {
        let bad = |reason| Err(SimilarityError::BadParams { reason });
        if !(self.cutoff.is_finite() && self.bin_width.is_finite() && self.smearing_sigma.is_finite())
        {
            return bad("parameters must be finite");
        }
        if self.bin_width <= 0.0 {
            return bad("bin_width must be positive");
        }
        if self.cutoff <= 2.0 * self.bin_width {
            return bad("cutoff must exceed twice the bin width");
        }
        if self.smearing_sigma <= 0.0 {
            return bad("smearing_sigma must be positive");
        }
        Ok(())
    }

    pub fn nbins(&self) -> usize {
        (self.cutoff / self.bin_width).round() as usize
    }
}

/// Per-element-pair distance histograms for one structure.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureFingerprint {
    params: FingerprintParams,
    channels: BTreeMap<(Element, Element), Vec<f64>>,
    natoms: usize,
}

impl StructureFingerprint {
    pub fn natoms(&self) -> usize {
        self.natoms
    }

    pub fn channels(&self) -> &BTreeMap<(Element, Element), Vec<f64>> {
        &self.channels
    }
}

/// Builds the fingerprint: for every ordered site pair (periodic images
/// included) with separation in `(0, cutoff]`, a Gaussian of weight
/// `1/natoms` and width `smearing_sigma` is integrated into the bins of the
/// pair's element channel.
pub fn fingerprint(
    c: &Crystal,
    params: &FingerprintParams,
) -> Result<StructureFingerprint, SimilarityError> {
    params.validate()?;
    let lat = c.lattice();
    let sites = c.sites();
    let nbins = params.nbins();
    let weight = 1.0 / sites.len() as f64;
    let sigma = params.smearing_sigma;
    let dx = params.bin_width;
    let denom = sigma * std::f64::consts::SQRT_2;

    let mut bound = [0i64; 3];
    for (k, b) in bound.iter_mut().enumerate() {
        *b = (params.cutoff / lat.perpendicular_width(k)).ceil() as i64 + 1;
    }

    let mut channels: BTreeMap<(Element, Element), Vec<f64>> = BTreeMap::new();
    for si in sites {
        for sj in sites {
            let key = if si.element <= sj.element {
                (si.element, sj.element)
            } else {
                (sj.element, si.element)
            };
            let df = [
                sj.frac[0] - si.frac[0],
                sj.frac[1] - si.frac[1],
                sj.frac[2] - si.frac[2],
            ];
            for a in -bound[0]..=bound[0] {
                for b in -bound[1]..=bound[1] {
                    for t in -bound[2]..=bound[2] {
                        let v = lat.to_cartesian([
                            df[0] + a as f64,
                            df[1] + b as f64,
                            df[2] + t as f64,
                        ]);
                        let d = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                        if d <= 0.0 || d > params.cutoff {
                            continue;
                        }
                        let hist = channels.entry(key).or_insert_with(|| vec![0.0; nbins]);
                        // bins overlapping d ± 5 sigma carry all visible mass
                        let lo_bin = (((d - 5.0 * sigma) / dx).floor().max(0.0)) as usize;
                        let hi_bin = ((((d + 5.0 * sigma) / dx).floor()) as usize).min(nbins - 1);
                        for (bin, slot) in hist[lo_bin..=hi_bin].iter_mut().enumerate() {
                            let lo_x = (lo_bin + bin) as f64 * dx;
                            let hi_x = lo_x + dx;
                            *slot += 0.5
                                * weight
                                * (libm::erf((hi_x - d) / denom) - libm::erf((lo_x - d) / denom));
                        }
                    }
                }
            }
        }
    }

    Ok(StructureFingerprint {
        params: *params,
        channels,
        natoms: sites.len(),
    })
}

/// Cosine similarity in `[0, 1]` over the union of channels; a channel
/// missing on one side counts as a zero vector. Two all-zero fingerprints
/// are defined equal (similarity 1).
pub fn similarity(
    f1: &StructureFingerprint,
    f2: &StructureFingerprint,
) -> Result<f64, SimilarityError> {
    if f1.params != f2.params {
        return Err(SimilarityError::ParamsMismatch);
    }
    let mut dot = 0.0;
    let mut n1 = 0.0;
    let mut n2 = 0.0;
    for v in f1.channels.values() {
        n1 += v.iter().map(|x| x * x).sum::<f64>();
    }
    for v in f2.channels.values() {
        n2 += v.iter().map(|x| x * x).sum::<f64>();
    }
    for (key, v1) in &f1.channels {
        if let Some(v2) = f2.channels.get(key) {
            dot += v1.iter().zip(v2).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    if n1 == 0.0 && n2 == 0.0 {
        return Ok(1.0);
    }
    if n1 == 0.0 || n2 == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (n1.sqrt() * n2.sqrt())).clamp(0.0, 1.0))
}

/// One candidate entering deduplication.
#[derive(Debug, Clone)]
pub struct DedupItem {
    pub id: String,
    pub structure: Crystal,
    pub predicted_ef: f64,
}

/// Default similarity threshold above which two structures are duplicates.
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.98;

/// Greedy near-duplicate removal; returns surviving ids in processing order.
///
/// Items are processed by ascending predicted energy (ties by id, so the kept
/// representative of a duplicate group is its most promising member). An item
/// survives iff its similarity to every already-kept item of identical
/// reduced composition stays below `threshold`; items with different reduced
/// compositions are never merged.
pub fn dedup(
    items: &[DedupItem],
    params: &FingerprintParams,
    threshold: f64,
) -> Result<Vec<String>, SimilarityError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(SimilarityError::BadThreshold { got: threshold });
    }
    params.validate()?;

    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[a]
            .predicted_ef
            .total_cmp(&items[b].predicted_ef)
            .then_with(|| items[a].id.cmp(&items[b].id))
    });

    let mut kept_ids = Vec::new();
    let mut kept_by_comp: HashMap<Composition, Vec<StructureFingerprint>> = HashMap::new();
    for idx in order {
        let item = &items[idx];
        let fp = fingerprint(&item.structure, params)?;
        let comp = item.structure.composition().reduced();
        let peers = kept_by_comp.entry(comp).or_default();
        let mut duplicate = false;
        for peer in peers.iter() {
            if similarity(peer, &fp)? >= threshold {
                duplicate = true;
                break;
            }
        }
        if !duplicate {
            kept_ids.push(item.id.clone());
            peers.push(fp);
        }
    }
    Ok(kept_ids)
}
