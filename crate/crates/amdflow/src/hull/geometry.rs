//! Exact small-dimension lower-hull geometry.
//!
//! The binary case is a sort-and-scan monotone chain over `(x, E)` points.
//! The ternary case lifts compositions to `(x, y, E)` and runs a standard
//! incremental (beneath-beyond) 3-D convex hull, keeping the facets whose
//! outward normal points downward. Point sets that are entirely coplanar
//! (for example reference-only systems, where every energy is zero) have no
//! 3-D hull; they fall back to a deterministic triangulation of the planar
//! point set.

/// Lower convex chain over `points` (distinct x), as indices in x order.
pub fn lower_chain_2d(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[a].1.total_cmp(&points[b].1))
    });
    let mut chain: Vec<usize> = Vec::new();
    for &idx in &order {
        while chain.len() >= 2 {
            let o = points[chain[chain.len() - 2]];
            let a = points[chain[chain.len() - 1]];
            let b = points[idx];
            let cross = (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
            // `a` on or above the chord o–b contributes nothing to the
            // lower envelope
            if cross <= 1e-12 {
                chain.pop();
            } else {
                break;
            }
        }
        chain.push(idx);
    }
    chain
}

/// Outcome of 3-D lower hull construction.
pub enum Hull3 {
    /// Lower facets as index triples.
    Facets(Vec<[usize; 3]>),
    /// All points coplanar: triangulated fan over the planar hull, plus the
    /// planar hull's corner indices.
    Planar {
        facets: Vec<[usize; 3]>,
        corners: Vec<usize>,
    },
}

/// Builds the lower hull of 3-D points (typically `(x, y, energy)`).
///
/// Points must be distinct in their `(x, y)` projection. Near-degenerate
/// volumes under `1e-12` are treated as flat.
pub fn lower_hull_3d(points: &[[f64; 3]]) -> Hull3 {
    assert!(points.len() >= 3, "a hull needs at least three points");
    match full_hull(points) {
        Some(facets) => {
            let inner = interior_point(points);
            let mut lower: Vec<[usize; 3]> = facets
                .into_iter()
                .filter(|f| {
                    let n = outward_normal(points, *f, inner);
                    n[2] < -1e-9
                })
                .collect();
            lower.sort();
            Hull3::Facets(lower)
        }
        None => planar_fallback(points),
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Signed distance of `p` from the plane of facet `f`, along the normal
/// oriented away from `inner`. Positive means `p` sees the facet.
fn signed_distance(points: &[[f64; 3]], f: [usize; 3], inner: [f64; 3], p: [f64; 3]) -> f64 {
    let n = outward_normal(points, f, inner);
    dot(n, sub(p, points[f[0]]))
}

/// Unit normal of facet `f` pointing away from `inner`.
fn outward_normal(points: &[[f64; 3]], f: [usize; 3], inner: [f64; 3]) -> [f64; 3] {
    let a = points[f[0]];
    let n = cross(sub(points[f[1]], a), sub(points[f[2]], a));
    let len = norm(n);
    let n = [n[0] / len, n[1] / len, n[2] / len];
    if dot(n, sub(inner, a)) > 0.0 {
        [-n[0], -n[1], -n[2]]
    } else {
        n
    }
}

fn interior_point(points: &[[f64; 3]]) -> [f64; 3] {
    // centroid of the initial tetrahedron is strictly inside the hull
    let t = initial_tetrahedron(points).expect("caller checked non-degeneracy");
    let mut c = [0.0; 3];
    for i in t {
        for k in 0..3 {
            c[k] += points[i][k] / 4.0;
        }
    }
    c
}

/// Four affinely independent points, or None if the set is flat.
fn initial_tetrahedron(points: &[[f64; 3]]) -> Option<[usize; 4]> {
    let i0 = 0;
    let i1 = (1..points.len()).max_by(|&a, &b| {
        norm(sub(points[a], points[i0])).total_cmp(&norm(sub(points[b], points[i0])))
    })?;
    if norm(sub(points[i1], points[i0])) < 1e-12 {
        return None;
    }
    let area = |i: usize| norm(cross(sub(points[i1], points[i0]), sub(points[i], points[i0])));
    let i2 = (0..points.len())
        .filter(|&i| i != i0 && i != i1)
        .max_by(|&a, &b| area(a).total_cmp(&area(b)))?;
    if area(i2) < 1e-12 {
        return None;
    }
    let vol = |i: usize| {
        dot(
            cross(sub(points[i1], points[i0]), sub(points[i2], points[i0])),
            sub(points[i], points[i0]),
        )
        .abs()
    };
    let i3 = (0..points.len())
        .filter(|&i| i != i0 && i != i1 && i != i2)
        .max_by(|&a, &b| vol(a).total_cmp(&vol(b)))?;
    if vol(i3) < 1e-12 {
        return None;
    }
    Some([i0, i1, i2, i3])
}

/// Incremental full convex hull; None when the points are coplanar.
fn full_hull(points: &[[f64; 3]]) -> Option<Vec<[usize; 3]>> {
    let tetra = initial_tetrahedron(points)?;
    let mut inner = [0.0; 3];
    for i in tetra {
        for k in 0..3 {
            inner[k] += points[i][k] / 4.0;
        }
    }

    // orient each starting facet so its normal faces away from the centroid
    let orient = |f: [usize; 3]| -> [usize; 3] {
        let a = points[f[0]];
        let n = cross(sub(points[f[1]], a), sub(points[f[2]], a));
        if dot(n, sub(inner, a)) > 0.0 {
            [f[0], f[2], f[1]]
        } else {
            f
        }
    };
    let [t0, t1, t2, t3] = tetra;
    let mut facets: Vec<[usize; 3]> = vec![
        orient([t0, t1, t2]),
        orient([t0, t1, t3]),
        orient([t0, t2, t3]),
        orient([t1, t2, t3]),
    ];

    let in_tetra = |i: usize| tetra.contains(&i);
    for p_idx in (0..points.len()).filter(|&i| !in_tetra(i)) {
        // Slightly loosening the visibility threshold on retry rescues the
        // rare insertion whose horizon is numerically inconsistent.
        let mut inserted = false;
        for eps in [1e-12, 1e-9, 1e-6] {
            match try_insert(points, &facets, inner, p_idx, eps) {
                InsertOutcome::Inside => {
                    inserted = true;
                    break;
                }
                InsertOutcome::Replaced(new_facets) => {
                    facets = new_facets;
                    inserted = true;
                    break;
                }
                InsertOutcome::BrokenHorizon => continue,
            }
        }
        if !inserted {
            // flat against the hull within the loosest threshold
            log::debug!("hull insertion for point {p_idx} degenerate at all thresholds; skipped");
        }
    }
    Some(facets)
}

enum InsertOutcome {
    Inside,
    Replaced(Vec<[usize; 3]>),
    BrokenHorizon,
}

fn try_insert(
    points: &[[f64; 3]],
    facets: &[[usize; 3]],
    inner: [f64; 3],
    p_idx: usize,
    eps: f64,
) -> InsertOutcome {
    let p = points[p_idx];
    let visible: Vec<bool> = facets
        .iter()
        .map(|&f| signed_distance(points, f, inner, p) > eps)
        .collect();
    if !visible.iter().any(|&v| v) {
        return InsertOutcome::Inside;
    }

    // Horizon: directed edges of visible facets whose reverse edge is not
    // itself part of a visible facet.
    let mut visible_edges: std::collections::HashSet<(usize, usize)> = std::collections::HashSet::new();
    for (f, vis) in facets.iter().zip(&visible) {
        if *vis {
            for (u, v) in facet_edges(*f) {
                visible_edges.insert((u, v));
            }
        }
    }
    let mut horizon: Vec<(usize, usize)> = visible_edges
        .iter()
        .filter(|&&(u, v)| !visible_edges.contains(&(v, u)))
        .copied()
        .collect();
    horizon.sort();
    if horizon.is_empty() {
        return InsertOutcome::BrokenHorizon;
    }
    // a sound horizon is a closed loop: every vertex appears once as a
    // source and once as a target
    {
        use std::collections::HashMap;
        let mut out_deg: HashMap<usize, i64> = HashMap::new();
        for &(u, v) in &horizon {
            *out_deg.entry(u).or_default() += 1;
            *out_deg.entry(v).or_default() -= 1;
        }
        if out_deg.values().any(|&d| d != 0) {
            return InsertOutcome::BrokenHorizon;
        }
    }

    let mut next: Vec<[usize; 3]> = facets
        .iter()
        .zip(&visible)
        .filter(|(_, vis)| !**vis)
        .map(|(f, _)| *f)
        .collect();
    for (u, v) in horizon {
        // the directed horizon edge keeps the outward winding for the cone
        next.push([u, v, p_idx]);
    }
    InsertOutcome::Replaced(next)
}

fn facet_edges(f: [usize; 3]) -> [(usize, usize); 3] {
    [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]
}

/// All points coplanar: triangulate by fanning the 2-D hull of the `(x, y)`
/// projection from its first corner. Interior points lie on the shared
/// plane, so leaving them out of the triangulation loses nothing.
fn planar_fallback(points: &[[f64; 3]]) -> Hull3 {
    let flat: Vec<(f64, f64)> = points.iter().map(|p| (p[0], p[1])).collect();
    let corners = convex_polygon_2d(&flat);
    let mut facets = Vec::new();
    for w in 1..corners.len() - 1 {
        let mut f = [corners[0], corners[w], corners[w + 1]];
        f.sort();
        facets.push(f);
    }
    facets.sort();
    Hull3::Planar { facets, corners }
}

/// Counterclockwise convex polygon over 2-D points (full monotone chain).
fn convex_polygon_2d(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[a].1.total_cmp(&points[b].1))
    });
    let turn = |o: usize, a: usize, b: usize| -> f64 {
        let (ox, oy) = points[o];
        let (ax, ay) = points[a];
        let (bx, by) = points[b];
        (ax - ox) * (by - oy) - (ay - oy) * (bx - ox)
    };
    let mut lower: Vec<usize> = Vec::new();
    for &i in &order {
        while lower.len() >= 2 && turn(lower[lower.len() - 2], lower[lower.len() - 1], i) <= 1e-12 {
            lower.pop();
        }
        lower.push(i);
    }
    let mut upper: Vec<usize> = Vec::new();
    for &i in order.iter().rev() {
        while upper.len() >= 2 && turn(upper[upper.len() - 2], upper[upper.len() - 1], i) <= 1e-12 {
            upper.pop();
        }
        upper.push(i);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}
