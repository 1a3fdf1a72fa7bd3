//! Discretizations of `S₊^{d-1}` with linear interpolation stencils.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;

use crate::semigroup::ProjPoint;

use super::{Result, SpectralError};

pub const MIN_RESOLUTION: usize = 8;
/// Lattice coordinates this close to an integer are treated as lying on a node.
const NODE_SNAP: f64 = 1e-9;

#[derive(Debug, Clone)]
enum Layout {
    /// `θ_i = i·(π/2)/resolution`, `i = 0..=resolution`.
    Arc,
    /// Simplex lattice in cumulative coordinates `0 ≤ Z_1 ≤ … ≤ Z_{d-1} ≤ resolution`.
    Simplex { index: HashMap<Vec<u32>, usize> },
}

/// Grid points on `S₊^{d-1}` plus quadrature weights summing to one.
#[derive(Debug, Clone)]
pub struct ProjGrid {
    dim: usize,
    resolution: usize,
    points: Vec<ProjPoint>,
    quad_weights: Vec<f64>,
    layout: Layout,
}

/// Interpolation stencil: grid indices with non-negative weights summing to one.
pub type Stencil = Vec<(usize, f64)>;

/// Builds the grid. For `d = 2`, `resolution` is the number of angle intervals
/// (so `resolution + 1` points, trapezoid weights); for `d > 2` it is the
/// lattice denominator of the simplex.
pub fn build_grid(dim: usize, resolution: usize) -> Result<ProjGrid> {
    if dim < 2 {
        return Err(SpectralError::Grid(format!("dimension {dim} < 2")));
    }
    if resolution < MIN_RESOLUTION {
        return Err(SpectralError::Grid(format!(
            "resolution {resolution} < {MIN_RESOLUTION}"
        )));
    }
    if dim == 2 {
        Ok(arc_grid(resolution))
    } else {
        simplex_grid(dim, resolution)
    }
}

fn arc_grid(res: usize) -> ProjGrid {
    let h = FRAC_PI_2 / res as f64;
    let points = (0..=res)
        .map(|i| {
            let t = i as f64 * h;
            // Exact endpoints keep e₁ and e₂ on the grid.
            let (c, s) = match i {
                0 => (1.0, 0.0),
                _ if i == res => (0.0, 1.0),
                _ => (t.cos(), t.sin()),
            };
            ProjPoint::normalized_unchecked(vec![c, s], 1.0)
        })
        .collect();
    let mut quad_weights = vec![1.0 / res as f64; res + 1];
    quad_weights[0] *= 0.5;
    quad_weights[res] *= 0.5;
    ProjGrid {
        dim: 2,
        resolution: res,
        points,
        quad_weights,
        layout: Layout::Arc,
    }
}

fn simplex_grid(dim: usize, res: usize) -> Result<ProjGrid> {
    let k = dim - 1;
    let mut lattice: Vec<Vec<u32>> = Vec::new();
    let mut cur = vec![0u32; k];
    enumerate_monotone(&mut cur, 0, 0, res as u32, &mut lattice);
    let index: HashMap<Vec<u32>, usize> =
        lattice.iter().enumerate().map(|(i, z)| (z.clone(), i)).collect();
    let points = lattice
        .iter()
        .map(|z| {
            let p = simplex_coords(z, res);
            ProjPoint::from_direction(p).map_err(SpectralError::from)
        })
        .collect::<Result<Vec<_>>>()?;

    // Each small simplex of the Freudenthal triangulation has equal volume;
    // the weight of a vertex is its share of the simplices containing it.
    let mut counts = vec![0u64; lattice.len()];
    let perms = permutations(k);
    let mut base = vec![0u32; k];
    loop {
        for perm in &perms {
            let mut v = base.clone();
            let mut verts = Vec::with_capacity(k + 1);
            let mut ok = is_monotone(&v, res as u32);
            if ok {
                verts.push(index[&v]);
            }
            for &axis in perm {
                if !ok {
                    break;
                }
                v[axis] += 1;
                ok = is_monotone(&v, res as u32);
                if ok {
                    verts.push(index[&v]);
                }
            }
            if ok {
                for i in verts {
                    counts[i] += 1;
                }
            }
        }
        if !next_base(&mut base, res as u32 - 1) {
            break;
        }
    }
    let total: u64 = counts.iter().sum();
    let quad_weights = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(ProjGrid {
        dim,
        resolution: res,
        points,
        quad_weights,
        layout: Layout::Simplex { index },
    })
}

fn enumerate_monotone(cur: &mut Vec<u32>, pos: usize, lo: u32, hi: u32, out: &mut Vec<Vec<u32>>) {
    if pos == cur.len() {
        out.push(cur.clone());
        return;
    }
    for v in lo..=hi {
        cur[pos] = v;
        enumerate_monotone(cur, pos + 1, v, hi, out);
    }
}

fn is_monotone(z: &[u32], res: u32) -> bool {
    z.windows(2).all(|w| w[0] <= w[1]) && z.last().is_none_or(|&v| v <= res)
}

fn next_base(base: &mut [u32], max: u32) -> bool {
    for b in base.iter_mut() {
        if *b < max {
            *b += 1;
            return true;
        }
        *b = 0;
    }
    false
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Simplex coordinates `p` of a cumulative lattice vector.
fn simplex_coords(z: &[u32], res: usize) -> Vec<f64> {
    let r = res as f64;
    let mut p = Vec::with_capacity(z.len() + 1);
    let mut prev = 0u32;
    for &v in z {
        p.push((v - prev) as f64 / r);
        prev = v;
    }
    p.push((res as u32 - prev) as f64 / r);
    p
}

impl ProjGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[ProjPoint] {
        &self.points
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.quad_weights
    }

    /// Quadrature of grid values against the grid weights.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.quad_weights).map(|(v, w)| v * w).sum()
    }

    /// Linear-in-angle (`d = 2`) or barycentric (`d > 2`) stencil at `x`.
    pub fn stencil(&self, x: &[f64]) -> Stencil {
        match &self.layout {
            Layout::Arc => {
                let res = self.resolution;
                let theta = x[1].atan2(x[0]).clamp(0.0, FRAC_PI_2);
                let mut t = theta / (FRAC_PI_2 / res as f64);
                if (t - t.round()).abs() < NODE_SNAP {
                    t = t.round();
                }
                let i = (t.floor() as usize).min(res - 1);
                let w = (t - i as f64).clamp(0.0, 1.0);
                let mut st = Vec::with_capacity(2);
                if w < 1.0 {
                    st.push((i, 1.0 - w));
                }
                if w > 0.0 {
                    st.push((i + 1, w));
                }
                st
            }
            Layout::Simplex { index } => self.simplex_stencil(index, x),
        }
    }

    fn simplex_stencil(&self, index: &HashMap<Vec<u32>, usize>, x: &[f64]) -> Stencil {
        let k = self.dim - 1;
        let res = self.resolution as f64;
        let total: f64 = x.iter().sum();
        let mut z = Vec::with_capacity(k);
        let mut acc = 0.0;
        for &xi in &x[..k] {
            acc += xi / total;
            let mut v = (acc * res).clamp(0.0, res);
            if (v - v.round()).abs() < NODE_SNAP {
                v = v.round();
            }
            z.push(v);
        }
        // Enforce monotonicity lost to rounding.
        for j in 1..k {
            if z[j] < z[j - 1] {
                z[j] = z[j - 1];
            }
        }
        let max_base = self.resolution as u32 - 1;
        let mut base = Vec::with_capacity(k);
        let mut frac = Vec::with_capacity(k);
        for &v in &z {
            let b = (v.floor() as u32).min(max_base);
            base.push(b);
            frac.push(v - b as f64);
        }
        let mut order: Vec<usize> = (0..k).collect();
        // Descending fractional parts; ties broken so that the larger cumulative
        // coordinate steps first, which keeps every vertex monotone.
        order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(b.cmp(&a)));
        let mut st = Vec::with_capacity(k + 1);
        let mut v = base.clone();
        let mut prev = 1.0;
        for &axis in &order {
            let w = prev - frac[axis];
            if w > 0.0 {
                st.push((index[&v], w));
            }
            v[axis] += 1;
            prev = frac[axis];
        }
        if prev > 0.0 {
            st.push((index[&v], prev));
        }
        st
    }

    /// Interpolates grid values at `x`.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        self.stencil(x).iter().map(|&(i, w)| w * values[i]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arc_grid_construction() {
        let g = build_grid(2, 12).unwrap();
        assert_eq!(g.len(), 13);
        let s: f64 = g.quad_weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!((g.integrate(&[1.0; 13]) - 1.0).abs() < 1e-12);
        // Third point of a 12-interval grid sits at 2·(π/24) = π/12.
        let p = &g.points()[2];
        assert!((p.coords()[1].atan2(p.coords()[0]) - std::f64::consts::PI / 12.0).abs() < 1e-15);
        assert!(build_grid(2, 7).is_err());
        assert!(build_grid(1, 64).is_err());
    }

    #[test]
    fn arc_stencil_is_exact_on_nodes_and_linear_between() {
        let g = build_grid(2, 16).unwrap();
        for (i, p) in g.points().iter().enumerate() {
            let st = g.stencil(p.coords());
            let hit: f64 = st.iter().filter(|(j, _)| *j == i).map(|(_, w)| w).sum();
            assert!((hit - 1.0).abs() < 1e-9, "node {i}: {st:?}");
        }
        let theta: f64 = 0.3;
        let vals: Vec<f64> = g
            .points()
            .iter()
            .map(|p| p.coords()[1].atan2(p.coords()[0]))
            .collect();
        let v = g.interpolate(&vals, &[theta.cos(), theta.sin()]);
        assert!((v - theta).abs() < 1e-12);
    }

    #[test]
    fn simplex_grid_weights_and_stencils() {
        let g = build_grid(3, 10).unwrap();
        assert_eq!(g.len(), 66);
        let s: f64 = g.quad_weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        // Linear functions of the simplex coordinates are reproduced exactly.
        let lin = |p: &[f64]| {
            let t: f64 = p.iter().sum();
            0.3 * p[0] / t + 1.7 * p[1] / t - 0.2 * p[2] / t
        };
        let vals: Vec<f64> = g.points().iter().map(|p| lin(p.coords())).collect();
        for x in [[0.2, 0.5, 0.7], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.01, 0.9, 0.05]] {
            let st = g.stencil(&x);
            let wsum: f64 = st.iter().map(|(_, w)| w).sum();
            assert!((wsum - 1.0).abs() < 1e-12);
            assert!(st.iter().all(|(_, w)| *w >= 0.0));
            assert!((g.interpolate(&vals, &x) - lin(&x)).abs() < 1e-12);
        }
    }
}
