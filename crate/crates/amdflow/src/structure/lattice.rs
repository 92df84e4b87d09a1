use serde::{Deserialize, Serialize};

use super::StructureError;

/// Minimum acceptable cell volume in cubic angstroms.
pub const MIN_VOLUME: f64 = 1e-6;

/// A periodic cell: three lattice vectors in angstroms, one per row.
///
/// The row convention means a fractional coordinate vector `f` maps to
/// cartesian space as `f · M` (i.e. `f[0]*row0 + f[1]*row1 + f[2]*row2`).
/// Cells must be right-handed with volume above [`MIN_VOLUME`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    rows: [[f64; 3]; 3],
}

impl Lattice {
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Lattice, StructureError> {
        let det = det3(&rows);
        if !det.is_finite() || det <= MIN_VOLUME {
            return Err(StructureError::NonPositiveVolume { det });
        }
        Ok(Lattice { rows })
    }

    /// Convenience constructor for a cubic cell of edge `a`.
    pub fn cubic(a: f64) -> Result<Lattice, StructureError> {
        Lattice::new([[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]])
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }

    pub fn volume(&self) -> f64 {
        det3(&self.rows)
    }

    /// Fractional -> cartesian, row-vector convention.
    pub fn to_cartesian(&self, frac: [f64; 3]) -> [f64; 3] {
        let m = &self.rows;
        [
            frac[0] * m[0][0] + frac[1] * m[1][0] + frac[2] * m[2][0],
            frac[0] * m[0][1] + frac[1] * m[1][1] + frac[2] * m[2][1],
            frac[0] * m[0][2] + frac[1] * m[1][2] + frac[2] * m[2][2],
        ]
    }

    /// Cartesian -> fractional via the inverse matrix.
    pub fn to_fractional(&self, cart: [f64; 3]) -> [f64; 3] {
        let inv = self.inverse();
        [
            cart[0] * inv[0][0] + cart[1] * inv[1][0] + cart[2] * inv[2][0],
            cart[0] * inv[0][1] + cart[1] * inv[1][1] + cart[2] * inv[2][1],
            cart[0] * inv[0][2] + cart[1] * inv[1][2] + cart[2] * inv[2][2],
        ]
    }

    fn inverse(&self) -> [[f64; 3]; 3] {
        let m = &self.rows;
        let det = det3(m);
        let c = |r: usize, c: usize| -> f64 {
            let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
            let (c1, c2) = ((c + 1) % 3, (c + 2) % 3);
            m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]
        };
        // adjugate transpose / det
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = c(j, i) / det;
            }
        }
        inv
    }

    /// Perpendicular width of the cell along lattice direction `i`: the
    /// distance between the two cell faces spanned by the other two vectors.
    /// Bounds how many periodic images can lie within a given cutoff.
    pub fn perpendicular_width(&self, i: usize) -> f64 {
        let j = (i + 1) % 3;
        let k = (i + 2) % 3;
        let cross = cross3(self.rows[j], self.rows[k]);
        self.volume() / norm3(cross)
    }
}

pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_volume() {
        let l = Lattice::cubic(3.6).unwrap();
        assert!((l.volume() - 46.656).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_and_left_handed() {
        assert!(Lattice::new([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        // swapping two rows flips the determinant sign
        assert!(Lattice::new([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        assert!(Lattice::new([[f64::NAN, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn frac_cart_round_trip() {
        let l = Lattice::new([[3.1, 0.0, 0.1], [-1.2, 2.9, 0.0], [0.3, 0.4, 4.1]]).unwrap();
        let f = [0.21, 0.73, 0.55];
        let back = l.to_fractional(l.to_cartesian(f));
        for i in 0..3 {
            assert!((back[i] - f[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn perpendicular_width_cubic() {
        let l = Lattice::cubic(2.0).unwrap();
        for i in 0..3 {
            assert!((l.perpendicular_width(i) - 2.0).abs() < 1e-12);
        }
    }
}
