//! Phase-diagram export: a machine-readable hull table for every system,
//! plus an SVG picture for binary and ternary systems.
//!
//! All output is byte-deterministic: identical inputs produce identical
//! files, so downstream diffing and resume verification can compare bytes.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::structure::Composition;

use super::{ConvexHullResult, HullError, HullMember, PhaseEntry};

/// Writes `hull.tsv` and, for binary/ternary systems, `phase_diagram.svg` into
/// `dir`. Returns the paths written.
pub fn export_diagram(
    hull: &ConvexHullResult,
    entries: &[PhaseEntry],
    dir: &Path,
) -> Result<Vec<PathBuf>, HullError> {
    std::fs::create_dir_all(dir).map_err(|source| HullError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let tsv = dir.join("hull.tsv");
    write_hull_tsv(hull, entries, &tsv)?;
    let mut written = vec![tsv];
    let svg = dir.join("phase_diagram.svg");
    if write_phase_diagram_svg(hull, entries, &svg)? {
        written.push(svg);
    }
    Ok(written)
}

/// Writes the hull table: one row per entry with its reduced formula,
/// atomic fraction of each system element, formation energy, height above
/// the hull, and whether it is a hull vertex. Rows are sorted by height
/// then id.
pub fn write_hull_tsv(
    hull: &ConvexHullResult,
    entries: &[PhaseEntry],
    path: &Path,
) -> Result<(), HullError> {
    let mut rows: Vec<(f64, String)> = Vec::with_capacity(entries.len());
    for entry in entries {
        let comp = entry.composition.reduced();
        let ef = hull.formation_energy(&comp, entry.energy_per_atom)?;
        let above = hull.energy_above_hull(&comp, entry.energy_per_atom)?;
        let on_hull = hull.vertices().binary_search(&entry.id).is_ok();
        let mut row = format!("{}\t{}", entry.id, comp.reduced_formula());
        for &element in hull.elements() {
            row.push('\t');
            row.push_str(&sig(comp.fraction(element)));
        }
        row.push('\t');
        row.push_str(&sig(ef));
        row.push('\t');
        row.push_str(&sig(above));
        row.push('\t');
        row.push_str(if on_hull { "true" } else { "false" });
        rows.push((above, row));
    }
    rows.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| a.1.cmp(&b.1))
    });

    let mut out = String::from("id\tformula");
    for element in hull.elements() {
        out.push_str("\tx_");
        out.push_str(element.symbol());
    }
    out.push_str("\tformation_energy\te_above_hull\ton_hull\n");
    for (_, row) in rows {
        out.push_str(&row);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| HullError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Draws the phase diagram as SVG: energy-vs-composition for binary
/// systems, a Gibbs triangle for ternary ones. Returns `false` (writing
/// nothing) for systems the picture cannot represent.
pub fn write_phase_diagram_svg(
    hull: &ConvexHullResult,
    entries: &[PhaseEntry],
    path: &Path,
) -> Result<bool, HullError> {
    let svg = match hull.elements().len() {
        2 => binary_svg(hull, entries)?,
        3 => ternary_svg(hull, entries)?,
        n => {
            log::info!("phase diagrams are drawn for 2 or 3 elements; this system has {n}, so only the hull table is written");
            return Ok(false);
        }
    };
    std::fs::write(path, svg).map_err(|source| HullError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(true)
}

/// Ten-significant-digit scientific notation; stable across platforms.
fn sig(x: f64) -> String {
    format!("{x:.9e}")
}

/// Two-decimal SVG coordinate.
fn pix(x: f64) -> String {
    format!("{x:.2}")
}

struct EntryPoint {
    id: String,
    comp: Composition,
    ef: f64,
    on_hull: bool,
}

fn entry_points(
    hull: &ConvexHullResult,
    entries: &[PhaseEntry],
) -> Result<Vec<EntryPoint>, HullError> {
    let mut pts = Vec::with_capacity(entries.len());
    for entry in entries {
        let comp = entry.composition.reduced();
        let ef = hull.formation_energy(&comp, entry.energy_per_atom)?;
        pts.push(EntryPoint {
            id: entry.id.clone(),
            comp,
            ef,
            on_hull: hull.vertices().binary_search(&entry.id).is_ok(),
        });
    }
    // deterministic paint order
    pts.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(pts)
}

fn svg_header(width: u32, height: u32) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    )
}

fn binary_svg(hull: &ConvexHullResult, entries: &[PhaseEntry]) -> Result<String, HullError> {
    const W: u32 = 800;
    const H: u32 = 600;
    const LEFT: f64 = 80.0;
    const RIGHT: f64 = 720.0;
    const TOP: f64 = 60.0;
    const BOTTOM: f64 = 540.0;

    let pts = entry_points(hull, entries)?;
    let second = hull.elements()[1];

    // energy scale covers every point, the hull, and the zero line
    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for p in pts.iter().map(|p| p.ef).chain(hull.members().iter().map(|m| m.ef)) {
        lo = lo.min(p);
        hi = hi.max(p);
    }
    let span = (hi - lo).max(0.1);
    let (lo, hi) = (lo - 0.1 * span, hi + 0.1 * span);

    let x_of = |frac: f64| LEFT + frac * (RIGHT - LEFT);
    let y_of = |e: f64| BOTTOM - (e - lo) / (hi - lo) * (BOTTOM - TOP);

    let mut svg = svg_header(W, H);
    // frame and zero-energy guide
    svg.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n",
        pix(LEFT),
        pix(TOP),
        pix(RIGHT - LEFT),
        pix(BOTTOM - TOP)
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#bbb\" stroke-dasharray=\"4 3\"/>\n",
        pix(LEFT),
        pix(y_of(0.0)),
        pix(RIGHT),
        pix(y_of(0.0))
    ));

    // hull polyline through the stable phases, in composition order
    let mut chain: Vec<&HullMember> = hull
        .members()
        .iter()
        .filter(|m| hull.vertices().binary_search(&m.id).is_ok())
        .collect();
    chain.sort_by(|a, b| a.coords[0].total_cmp(&b.coords[0]));
    let path: Vec<String> = chain
        .iter()
        .map(|m| format!("{},{}", pix(x_of(m.coords[0])), pix(y_of(m.ef))))
        .collect();
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1a6faf\" stroke-width=\"2\"/>\n",
        path.join(" ")
    ));

    for p in &pts {
        let x = x_of(p.comp.fraction(second));
        let y = y_of(p.ef);
        if p.on_hull {
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"5\" fill=\"#1a6faf\"/>\n",
                pix(x),
                pix(y)
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
                pix(x),
                pix(y + 20.0),
                p.id
            ));
        } else {
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"none\" stroke=\"#c0392b\"/>\n",
                pix(x),
                pix(y)
            ));
        }
    }

    // axis labels: element symbols at the ends, energy axis on the left
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        pix(LEFT),
        pix(BOTTOM + 30.0),
        hull.elements()[0].symbol()
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        pix(RIGHT),
        pix(BOTTOM + 30.0),
        second.symbol()
    ));
    svg.push_str(&format!(
        "<text x=\"20\" y=\"{}\" font-size=\"13\" transform=\"rotate(-90 20 {})\" text-anchor=\"middle\">formation energy per atom</text>\n",
        pix((TOP + BOTTOM) / 2.0),
        pix((TOP + BOTTOM) / 2.0)
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn ternary_svg(hull: &ConvexHullResult, entries: &[PhaseEntry]) -> Result<String, HullError> {
    const W: u32 = 800;
    const H: u32 = 620;
    // Gibbs triangle: first element on top, the others at the base
    const C0: (f64, f64) = (400.0, 40.0);
    const C1: (f64, f64) = (80.0, 560.0);
    const C2: (f64, f64) = (720.0, 560.0);

    let pts = entry_points(hull, entries)?;
    let place = |x1: f64, x2: f64| -> (f64, f64) {
        let x0 = 1.0 - x1 - x2;
        (
            x0 * C0.0 + x1 * C1.0 + x2 * C2.0,
            x0 * C0.1 + x1 * C1.1 + x2 * C2.1,
        )
    };

    let mut svg = svg_header(W, H);
    svg.push_str(&format!(
        "<polygon points=\"{},{} {},{} {},{}\" fill=\"none\" stroke=\"#444\"/>\n",
        pix(C0.0),
        pix(C0.1),
        pix(C1.0),
        pix(C1.1),
        pix(C2.0),
        pix(C2.1)
    ));

    // tie-lines: every edge of every hull facet, drawn once
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    for facet in hull.facet_member_sets() {
        for i in 0..facet.len() {
            for j in i + 1..facet.len() {
                let (a, b) = (facet[i].min(facet[j]), facet[i].max(facet[j]));
                edges.insert((a, b));
            }
        }
    }
    for (a, b) in edges {
        let ma = &hull.members()[a];
        let mb = &hull.members()[b];
        let (x1, y1) = place(ma.coords[0], ma.coords[1]);
        let (x2, y2) = place(mb.coords[0], mb.coords[1]);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#9fc2dd\"/>\n",
            pix(x1),
            pix(y1),
            pix(x2),
            pix(y2)
        ));
    }

    for p in &pts {
        let x1 = p.comp.fraction(hull.elements()[1]);
        let x2 = p.comp.fraction(hull.elements()[2]);
        let (x, y) = place(x1, x2);
        if p.on_hull {
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"5\" fill=\"#1a6faf\"/>\n",
                pix(x),
                pix(y)
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
                pix(x),
                pix(y - 10.0),
                p.id
            ));
        } else {
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"none\" stroke=\"#c0392b\"/>\n",
                pix(x),
                pix(y)
            ));
        }
    }

    let corners = [
        (C0, hull.elements()[0], -10.0),
        (C1, hull.elements()[1], 25.0),
        (C2, hull.elements()[2], 25.0),
    ];
    for ((cx, cy), element, dy) in corners {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
            pix(cx),
            pix(cy + dy),
            element.symbol()
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
