//! VASP 5+ POSCAR reading and writing.
//!
//! Reading accepts Direct and Cartesian coordinates, CRLF line endings, the
//! negative-scale volume convention, and a selective-dynamics block (whose
//! flags are ignored). Writing always emits the canonical form: scale 1.0,
//! `Direct` mode, sites in canonical order, with number formatting chosen so
//! that parsing the output reproduces the input structure bit for bit.

use super::lattice::det3;
use super::{Crystal, Element, Lattice, PoscarError, Site};

/// Parses a VASP 5+ POSCAR document.
pub fn parse_poscar(text: &str) -> Result<Crystal, PoscarError> {
    let lines: Vec<&str> = text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)).collect();
    let need = |idx: usize| -> Result<&str, PoscarError> {
        lines
            .get(idx)
            .copied()
            .ok_or(PoscarError::Truncated { line: idx + 1 })
    };

    let label = need(0)?.to_string();
    let scale_line = need(1)?;
    let scale: f64 = parse_float(scale_line.split_whitespace().next().unwrap_or(""), 2)?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(PoscarError::NonPositiveVolume { line: 2 });
    }

    let mut rows = [[0.0f64; 3]; 3];
    for (i, row) in rows.iter_mut().enumerate() {
        let line_no = 3 + i;
        let nums = parse_floats(need(line_no - 1)?, line_no)?;
        if nums.len() < 3 {
            return Err(PoscarError::MalformedLine {
                line: line_no,
                expected: "3 lattice vector components",
            });
        }
        row.copy_from_slice(&nums[..3]);
    }

    // Negative universal scale factor is a target cell volume.
    let factor = if scale > 0.0 {
        scale
    } else {
        let det = det3(&rows);
        if det <= 0.0 {
            return Err(PoscarError::NonPositiveVolume { line: 3 });
        }
        (-scale / det).cbrt()
    };
    for row in &mut rows {
        for x in row {
            *x *= factor;
        }
    }
    let lattice = Lattice::new(rows).map_err(|_| PoscarError::NonPositiveVolume { line: 3 })?;

    let symbol_line = need(5)?;
    let mut elements = Vec::new();
    for tok in symbol_line.split_whitespace() {
        match Element::from_symbol(tok) {
            Some(e) => elements.push(e),
            None => {
                return Err(PoscarError::UnknownElement {
                    line: 6,
                    symbol: tok.to_string(),
                })
            }
        }
    }
    if elements.is_empty() {
        return Err(PoscarError::MalformedLine {
            line: 6,
            expected: "element symbols",
        });
    }

    let counts_line = need(6)?;
    let mut counts = Vec::new();
    for tok in counts_line.split_whitespace() {
        let c: u64 = tok.parse().map_err(|_| PoscarError::MalformedLine {
            line: 7,
            expected: "positive integer atom counts",
        })?;
        if c == 0 {
            return Err(PoscarError::MalformedLine {
                line: 7,
                expected: "positive integer atom counts",
            });
        }
        counts.push(c);
    }
    if counts.len() != elements.len() {
        return Err(PoscarError::CountMismatch {
            line: 7,
            symbols: elements.len(),
            counts: counts.len(),
        });
    }

    // Optional selective-dynamics marker, then the coordinate mode line.
    let mut idx = 7;
    let mode_line = need(idx)?;
    let first = mode_line.trim_start().chars().next().unwrap_or(' ');
    if matches!(first, 'S' | 's') {
        idx += 1;
    }
    let mode_line = need(idx)?;
    let cartesian = match mode_line.trim_start().chars().next().unwrap_or(' ') {
        'D' | 'd' => false,
        'C' | 'c' | 'K' | 'k' => true,
        _ => {
            return Err(PoscarError::MalformedLine {
                line: idx + 1,
                expected: "coordinate mode (Direct or Cartesian)",
            })
        }
    };
    idx += 1;

    let natoms: u64 = counts.iter().sum();
    let mut sites = Vec::with_capacity(natoms as usize);
    let mut site_elements = elements
        .iter()
        .zip(&counts)
        .flat_map(|(&e, &c)| std::iter::repeat(e).take(c as usize));
    for k in 0..natoms as usize {
        let line_no = idx + k + 1;
        let line = lines.get(idx + k).copied().unwrap_or("");
        let nums = parse_floats(line, line_no);
        let nums = match nums {
            Ok(v) if v.len() >= 3 => v,
            _ => {
                return Err(PoscarError::CoordinateMismatch {
                    line: line_no,
                    expected: natoms as usize,
                    found: k,
                })
            }
        };
        let raw = [nums[0], nums[1], nums[2]];
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(PoscarError::MalformedLine {
                line: line_no,
                expected: "finite coordinates",
            });
        }
        let frac = if cartesian {
            // Cartesian positions are also subject to the universal scale.
            lattice.to_fractional([raw[0] * factor, raw[1] * factor, raw[2] * factor])
        } else {
            raw
        };
        sites.push(Site {
            element: site_elements.next().expect("count sum matches"),
            frac,
        });
    }

    Crystal::new(lattice, sites, label).map_err(|_| PoscarError::NonPositiveVolume { line: 3 })
}

/// Writes the canonical POSCAR form of a structure.
pub fn write_poscar(c: &Crystal) -> String {
    let mut out = String::new();
    out.push_str(&c.label);
    out.push('\n');
    out.push_str("1.0\n");
    for row in c.lattice().rows() {
        out.push_str(&format!(
            "  {} {} {}\n",
            fmt_exact(row[0]),
            fmt_exact(row[1]),
            fmt_exact(row[2])
        ));
    }
    let comp_order: Vec<Element> = c.species();
    let symbols: Vec<&str> = comp_order.iter().map(|e| e.symbol()).collect();
    out.push_str(&symbols.join(" "));
    out.push('\n');
    let comp = c.composition();
    let counts: Vec<String> = comp_order.iter().map(|e| comp.count(*e).to_string()).collect();
    out.push_str(&counts.join(" "));
    out.push('\n');
    out.push_str("Direct\n");
    for s in c.sites() {
        out.push_str(&format!(
            "  {} {} {}\n",
            fmt_exact(s.frac[0]),
            fmt_exact(s.frac[1]),
            fmt_exact(s.frac[2])
        ));
    }
    out
}

/// Formats a float with 16 digits after the decimal point, falling back to
/// 17-significant-digit scientific notation for the rare values where fixed
/// notation does not parse back to the identical bits.
fn fmt_exact(x: f64) -> String {
    let fixed = format!("{x:.16}");
    if fixed.parse::<f64>().map(f64::to_bits) == Ok(x.to_bits()) {
        fixed
    } else {
        format!("{x:.16e}")
    }
}

fn parse_float(tok: &str, line: usize) -> Result<f64, PoscarError> {
    tok.parse().map_err(|_| PoscarError::MalformedLine {
        line,
        expected: "a number",
    })
}

fn parse_floats(line: &str, line_no: usize) -> Result<Vec<f64>, PoscarError> {
    let mut out = Vec::new();
    for tok in line.split_whitespace() {
        match tok.parse::<f64>() {
            Ok(v) => out.push(v),
            // selective-dynamics flags (T/F) after the coordinates are ignored
            Err(_) if out.len() >= 3 => break,
            Err(_) => {
                return Err(PoscarError::MalformedLine {
                    line: line_no,
                    expected: "numeric fields",
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CU_CUBIC: &str = "\
cubic Cu
1.0
  3.6 0.0 0.0
  0.0 3.6 0.0
  0.0 0.0 3.6
Cu
1
Direct
  0.0 0.0 0.0
";

    #[test]
    fn parses_cubic_cu() {
        let c = parse_poscar(CU_CUBIC).unwrap();
        assert_eq!(c.natoms(), 1);
        assert_eq!(c.sites()[0].element.symbol(), "Cu");
        assert!((c.lattice().volume() - 46.656).abs() < 1e-9);
        assert_eq!(c.label, "cubic Cu");
    }

    #[test]
    fn cartesian_converts_to_fractional() {
        let text = "\
cart
1.0
3.6 0.0 0.0
0.0 3.6 0.0
0.0 0.0 3.6
Cu
1
Cartesian
1.8 1.8 1.8
";
        let c = parse_poscar(text).unwrap();
        for k in 0..3 {
            assert!((c.sites()[0].frac[k] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn count_coordinate_mismatch_reports_block() {
        let text = "\
two species
1.0
3.0 0.0 0.0
0.0 3.0 0.0
0.0 0.0 3.0
Cu Fe
1 2
Direct
0.0 0.0 0.0
0.5 0.5 0.5
";
        let err = parse_poscar(text).unwrap_err();
        match err {
            PoscarError::CoordinateMismatch { expected, found, .. } => {
                assert_eq!(expected, 3);
                assert_eq!(found, 2);
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn unknown_element_is_reported_with_line() {
        let text = "\
bad
1.0
3.0 0.0 0.0
0.0 3.0 0.0
0.0 0.0 3.0
Qq
1
Direct
0.0 0.0 0.0
";
        match parse_poscar(text).unwrap_err() {
            PoscarError::UnknownElement { line, symbol } => {
                assert_eq!(line, 6);
                assert_eq!(symbol, "Qq");
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn symbol_count_arity_mismatch() {
        let text = "\
bad
1.0
3.0 0.0 0.0
0.0 3.0 0.0
0.0 0.0 3.0
Cu Fe
1
Direct
0.0 0.0 0.0
";
        assert!(matches!(
            parse_poscar(text).unwrap_err(),
            PoscarError::CountMismatch { .. }
        ));
    }

    #[test]
    fn negative_scale_sets_volume() {
        let text = "\
volume mode
-100.0
1.0 0.0 0.0
0.0 1.0 0.0
0.0 0.0 1.0
Cu
1
Direct
0.0 0.0 0.0
";
        let c = parse_poscar(text).unwrap();
        assert!((c.lattice().volume() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn zero_scale_rejected() {
        let text = "x\n0.0\n1 0 0\n0 1 0\n0 0 1\nCu\n1\nDirect\n0 0 0\n";
        assert!(matches!(
            parse_poscar(text).unwrap_err(),
            PoscarError::NonPositiveVolume { line: 2 }
        ));
    }

    #[test]
    fn left_handed_cell_rejected() {
        let text = "x\n1.0\n0 1 0\n1 0 0\n0 0 1\nCu\n1\nDirect\n0 0 0\n";
        assert!(matches!(
            parse_poscar(text).unwrap_err(),
            PoscarError::NonPositiveVolume { .. }
        ));
    }

    #[test]
    fn crlf_and_selective_dynamics_tolerated() {
        let text = "sd\r\n1.0\r\n3.0 0.0 0.0\r\n0.0 3.0 0.0\r\n0.0 0.0 3.0\r\nCu\r\n1\r\nSelective dynamics\r\nDirect\r\n0.25 0.25 0.25 T T F\r\n";
        let c = parse_poscar(text).unwrap();
        assert_eq!(c.natoms(), 1);
        assert!((c.sites()[0].frac[0] - 0.25).abs() < 1e-15);
        assert_eq!(c.label, "sd");
    }

    #[test]
    fn truncated_input() {
        assert!(matches!(
            parse_poscar("only a comment\n1.0\n"),
            Err(PoscarError::Truncated { .. })
        ));
        assert!(matches!(parse_poscar(""), Err(PoscarError::Truncated { line: 1 })));
    }

    #[test]
    fn write_emits_canonical_single_site() {
        let c = parse_poscar(CU_CUBIC).unwrap();
        let text = write_poscar(&c);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "1.0");
        assert_eq!(lines[5], "Cu");
        assert_eq!(lines[6], "1");
        assert_eq!(lines[7], "Direct");
    }

    #[test]
    fn write_sorts_sites_canonically() {
        let text = "\
unsorted
1.0
4.0 0.0 0.0
0.0 4.0 0.0
0.0 0.0 4.0
Fe Ce
1 1
Direct
0.5 0.5 0.5
0.0 0.0 0.0
";
        let c = parse_poscar(text).unwrap();
        let out = write_poscar(&c);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[5], "Ce Fe");
        assert_eq!(lines[6], "1 1");
    }

    #[test]
    fn round_trip_is_exact() {
        for text in [CU_CUBIC] {
            let c = parse_poscar(text).unwrap();
            let c2 = parse_poscar(&write_poscar(&c)).unwrap();
            assert_eq!(c, c2);
        }
    }

    #[test]
    fn fmt_exact_round_trips_awkward_values() {
        for x in [
            0.1,
            1.0 / 3.0,
            0.25f64.next_up(),
            0.9999999999999999,
            3.6,
            -2.75,
            1e-17,
            123456.789012345678,
        ] {
            assert_eq!(fmt_exact(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    proptest! {
        #[test]
        fn round_trip_random_structures(
            lat_diag in prop::array::uniform3(2.0..8.0f64),
            shear in prop::array::uniform3(-1.0..1.0f64),
            coords in prop::collection::vec(prop::array::uniform3(0.0..1.0f64), 1..8),
        ) {
            let lat = Lattice::new([
                [lat_diag[0], 0.0, 0.0],
                [shear[0], lat_diag[1], 0.0],
                [shear[1], shear[2], lat_diag[2]],
            ]).unwrap();
            let els = ["Ce", "Fe", "In", "Cu"];
            let sites: Vec<Site> = coords.iter().enumerate().map(|(i, &f)| Site {
                element: Element::from_symbol(els[i % 4]).unwrap(),
                frac: f,
            }).collect();
            let c = Crystal::new(lat, sites, "prop test").unwrap();
            let c2 = parse_poscar(&write_poscar(&c)).unwrap();
            prop_assert_eq!(c, c2);
        }
    }
}
