//! Candidate generation by element substitution.
//!
//! Template structures are decorated label-wise: every injective assignment of
//! target elements onto a template's distinct species yields one hypothetical
//! candidate with the template's exact geometry. Output order is deterministic
//! (template order, then lexicographic assignment order over the target list)
//! and the merged list is deduplicated by structural identity.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use crate::structure::{parse_poscar, Crystal, Element};

#[derive(Debug, thiserror::Error)]
pub enum SubstituteError {
    #[error("substitution requires between 1 and 6 distinct target elements, got {n}")]
    BadTargetCount { n: usize },
    #[error("duplicate target element {symbol}")]
    DuplicateTarget { symbol: String },
    #[error("max_candidates must be positive")]
    ZeroCap,
    #[error("failed to read template directory {path}: {source}")]
    TemplateDir {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no parsable template structures in {path}")]
    NoTemplates { path: PathBuf },
    #[error("a template set must contain at least one structure")]
    EmptyTemplateSet,
    #[error("substitution produced no candidates")]
    NoCandidates,
}

/// Template structures plus per-template provenance (source file names).
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: Vec<Crystal>,
    source_labels: Vec<String>,
}

impl TemplateSet {
    pub fn new(
        templates: Vec<Crystal>,
        source_labels: Vec<String>,
    ) -> Result<TemplateSet, SubstituteError> {
        if templates.is_empty() {
            return Err(SubstituteError::EmptyTemplateSet);
        }
        assert_eq!(templates.len(), source_labels.len());
        Ok(TemplateSet {
            templates,
            source_labels,
        })
    }

    pub fn templates(&self) -> &[Crystal] {
        &self.templates
    }

    pub fn source_labels(&self) -> &[String] {
        &self.source_labels
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// What to substitute: an ordered list of distinct target elements.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutionSpec {
    target_elements: Vec<Element>,
    max_candidates: usize,
    allow_fewer: bool,
}

impl SubstitutionSpec {
    /// `allow_fewer` permits assignments that use only a subset of the
    /// targets (templates with fewer distinct species than targets).
    pub fn new(
        target_elements: Vec<Element>,
        max_candidates: usize,
        allow_fewer: bool,
    ) -> Result<SubstitutionSpec, SubstituteError> {
        let n = target_elements.len();
        if n == 0 || n > 6 {
            return Err(SubstituteError::BadTargetCount { n });
        }
        let mut seen = HashSet::new();
        for e in &target_elements {
            if !seen.insert(*e) {
                return Err(SubstituteError::DuplicateTarget {
                    symbol: e.symbol().to_string(),
                });
            }
        }
        if max_candidates == 0 {
            return Err(SubstituteError::ZeroCap);
        }
        Ok(SubstitutionSpec {
            target_elements,
            max_candidates,
            allow_fewer,
        })
    }

    pub fn target_elements(&self) -> &[Element] {
        &self.target_elements
    }

    pub fn max_candidates(&self) -> usize {
        self.max_candidates
    }

    pub fn allow_fewer(&self) -> bool {
        self.allow_fewer
    }
}

/// Result of enumeration: candidates in deterministic order, plus whether the
/// cap cut the list short and which templates were skipped as inapplicable.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub structures: Vec<Crystal>,
    pub truncated: bool,
    pub skipped_templates: Vec<String>,
}

/// Ingested templates plus warnings for files that could not be parsed.
#[derive(Debug)]
pub struct IngestReport {
    pub set: TemplateSet,
    pub warnings: Vec<String>,
}

/// Loads every `*.vasp`, `*.poscar`, or `POSCAR*` file from `dir`, in
/// lexicographic file-name order. Unparsable files become warnings; an empty
/// or fully unparsable directory is fatal.
pub fn ingest_templates(dir: &Path) -> Result<IngestReport, SubstituteError> {
    let rd = std::fs::read_dir(dir).map_err(|source| SubstituteError::TemplateDir {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut names: Vec<String> = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|source| SubstituteError::TemplateDir {
            path: dir.to_path_buf(),
            source,
        })?;
        if !entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if is_template_name(&name) {
            names.push(name);
        }
    }
    names.sort();

    let mut templates = Vec::new();
    let mut labels = Vec::new();
    let mut warnings = Vec::new();
    for name in names {
        let path = dir.join(&name);
        let parsed = std::fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|text| parse_poscar(&text).map_err(|e| e.to_string()));
        match parsed {
            Ok(c) => {
                templates.push(c);
                labels.push(name);
            }
            Err(e) => warnings.push(format!("{name}: {e}")),
        }
    }
    if templates.is_empty() {
        return Err(SubstituteError::NoTemplates {
            path: dir.to_path_buf(),
        });
    }
    for w in &warnings {
        log::warn!("skipping template {w}");
    }
    Ok(IngestReport {
        set: TemplateSet {
            templates,
            source_labels: labels,
        },
        warnings,
    })
}

fn is_template_name(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    lower.ends_with(".vasp") || lower.ends_with(".poscar") || name.starts_with("POSCAR")
}

/// Enumerates every substitution candidate for the template set.
///
/// For each template with `k` distinct species and `n = |targets|`: all
/// injective assignments of targets onto species when `allow_fewer` (that is
/// n!/(n−k)! of them), only the full `k == n` assignments otherwise.
/// Templates with `k > n` are skipped with a warning. The merged output keeps
/// the first occurrence of each distinct geometry and is truncated at
/// `max_candidates`.
pub fn enumerate_substitutions(
    set: &TemplateSet,
    spec: &SubstitutionSpec,
) -> Result<CandidateSet, SubstituteError> {
    let n = spec.target_elements.len();
    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    let mut structures = Vec::new();
    let mut truncated = false;
    let mut skipped_templates = Vec::new();

    'templates: for (tmpl, src) in set.templates.iter().zip(&set.source_labels) {
        let species = tmpl.species();
        let k = species.len();
        if k > n {
            log::warn!("template {src} has {k} species but only {n} targets; skipped");
            skipped_templates.push(src.clone());
            continue;
        }
        if !spec.allow_fewer && k != n {
            continue;
        }
        for tuple in injective_assignments(n, k) {
            let map: BTreeMap<Element, Element> = species
                .iter()
                .zip(&tuple)
                .map(|(&s, &ti)| (s, spec.target_elements[ti]))
                .collect();
            let desc: Vec<String> = species
                .iter()
                .map(|s| format!("{}->{}", s.symbol(), map[s].symbol()))
                .collect();
            let cand = tmpl.relabeled(|e| map[&e], format!("{src} :: {}", desc.join(" ")));
            if seen.insert(cand.geometry_key()) {
                if structures.len() == spec.max_candidates {
                    truncated = true;
                    break 'templates;
                }
                structures.push(cand);
            }
        }
    }

    if structures.is_empty() {
        return Err(SubstituteError::NoCandidates);
    }
    Ok(CandidateSet {
        structures,
        truncated,
        skipped_templates,
    })
}

/// All ordered injective k-tuples of indices drawn from `0..n`, in
/// lexicographic order.
fn injective_assignments(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn step(n: usize, k: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                step(n, k, cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    step(n, k, &mut Vec::with_capacity(k), &mut vec![false; n], &mut out);
    out
}
