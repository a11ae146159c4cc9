//! Hierarchical random fields on cascade leaves.
//!
//! A field copy draws one uniform per tree vertex; the value at leaf `α` is
//! `h` evaluated on the uniforms along the path to `α`, so two leaves with
//! `α∧β = p` share exactly their first `p` coordinates. The order parameter
//! `h` is piecewise constant on a uniform grid.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid-discretized order parameter `h: [0,1]^k → [-1,1]`.
///
/// Without the `ω_*` flag `k = r` and the coordinates are the uniforms of
/// the path vertices below the root. With the flag `k = r + 2`: a global
/// `ω_*`, the per-copy root uniform, then the path uniforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderParamH {
    pub r: usize,
    #[serde(rename = "G")]
    pub g: usize,
    /// Row-major tensor of `G^k` entries; the first coordinate is slowest.
    pub values: Vec<f64>,
    #[serde(default)]
    pub omega_star_coordinate: bool,
}

impl OrderParamH {
    pub fn new(r: usize, g: usize, values: Vec<f64>) -> Result<Self> {
        let h = OrderParamH {
            r,
            g,
            values,
            omega_star_coordinate: false,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn constant(r: usize, c: f64) -> Result<Self> {
        Self::new(r, 1, vec![c])
    }

    /// The variant with the leading `ω_*` and root coordinates.
    pub fn with_omega_star(r: usize, g: usize, values: Vec<f64>) -> Result<Self> {
        let h = OrderParamH {
            r,
            g,
            values,
            omega_star_coordinate: true,
        };
        h.validate()?;
        Ok(h)
    }

    /// Builds the tensor from a function of the cell midpoints.
    pub fn from_fn<F: Fn(&[f64]) -> f64>(r: usize, g: usize, f: F) -> Result<Self> {
        let n = g.pow(r as u32);
        let mut mids = vec![0.0; r];
        let values = (0..n)
            .map(|mut idx| {
                for slot in mids.iter_mut().rev() {
                    *slot = ((idx % g) as f64 + 0.5) / g as f64;
                    idx /= g;
                }
                f(&mids)
            })
            .collect();
        Self::new(r, g, values)
    }

    pub fn arity(&self) -> usize {
        if self.omega_star_coordinate {
            self.r + 2
        } else {
            self.r
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.g == 0 {
            return Err(Error::param("G", "grid resolution must be at least 1"));
        }
        let expected = self.g.checked_pow(self.arity() as u32).unwrap_or(usize::MAX);
        if self.values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: self.values.len(),
            });
        }
        if let Some(v) = self.values.iter().find(|v| !(v.abs() <= 1.0)) {
            return Err(Error::param("values", format!("entry {v} outside [-1,1]")));
        }
        Ok(())
    }

    /// 0-based grid cell of a uniform: `⌈Gω⌉ - 1`, with `ω = 0` in cell 0.
    pub fn cell(&self, omega: f64) -> usize {
        ((omega * self.g as f64).ceil() as usize).clamp(1, self.g) - 1
    }

    /// Piecewise-constant lookup; rejects coordinates outside `[0,1]`.
    pub fn eval(&self, omegas: &[f64]) -> Result<f64> {
        if omegas.len() != self.arity() {
            return Err(Error::DimensionMismatch {
                expected: self.arity(),
                got: omegas.len(),
            });
        }
        if let Some(w) = omegas.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::param("omega", format!("{w} outside [0,1]")));
        }
        let idx = omegas.iter().fold(0, |acc, &w| acc * self.g + self.cell(w));
        Ok(self.values[idx])
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Evaluates independent field copies of one order parameter on the leaves
/// of an `M`-ary tree of depth `r`.
#[derive(Clone, Debug)]
pub struct FieldSampler<'a> {
    h: &'a OrderParamH,
    m: usize,
    /// Flat tensor offset contributed by the frozen `ω_*`.
    star_offset: usize,
}

impl<'a> FieldSampler<'a> {
    /// `omega_star` is required exactly when `h` carries the `ω_*` coordinate.
    pub fn new(h: &'a OrderParamH, m: usize, omega_star: Option<f64>) -> Result<Self> {
        let star_offset = match (h.omega_star_coordinate, omega_star) {
            (false, _) => 0,
            (true, Some(w)) if (0.0..=1.0).contains(&w) => h.cell(w),
            (true, _) => {
                return Err(Error::param(
                    "omega_star",
                    "a frozen ω_* in [0,1] is required for this order parameter",
                ))
            }
        };
        Ok(FieldSampler { h, m, star_offset })
    }

    pub fn n_leaves(&self) -> usize {
        self.m.pow(self.h.r as u32)
    }

    /// Fills `out` (one entry per leaf, flat original labels) with a fresh
    /// copy of the field.
    pub fn fill<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let h = self.h;
        let g = h.g;
        if g == 1 && !h.omega_star_coordinate {
            out.fill(h.values[0]);
            return;
        }
        let mut offsets = vec![self.star_offset];
        if h.omega_star_coordinate {
            offsets[0] = offsets[0] * g + h.cell(rng.random());
        }
        for _ in 0..h.r {
            let mut next = Vec::with_capacity(offsets.len() * self.m);
            for &o in &offsets {
                for _ in 0..self.m {
                    next.push(o * g + h.cell(rng.random()));
                }
            }
            offsets = next;
        }
        for (slot, &o) in out.iter_mut().zip(&offsets) {
            *slot = h.values[o];
        }
    }

    /// A copy with its uniforms retained.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FieldSample {
        let h = self.h;
        let root = if h.omega_star_coordinate {
            Some(rng.random::<f64>())
        } else {
            None
        };
        let mut uniforms: Vec<Vec<f64>> = Vec::with_capacity(h.r);
        for p in 1..=h.r {
            uniforms.push((0..self.m.pow(p as u32)).map(|_| rng.random()).collect());
        }
        let n = self.n_leaves();
        let leaf_values = (0..n)
            .map(|leaf| {
                let mut idx = self.star_offset;
                if let Some(w) = root {
                    idx = idx * h.g + h.cell(w);
                }
                for (p, level) in uniforms.iter().enumerate() {
                    let v = leaf / self.m.pow((h.r - p - 1) as u32);
                    idx = idx * h.g + h.cell(level[v]);
                }
                h.values[idx]
            })
            .collect();
        FieldSample {
            root_uniform: root,
            uniforms,
            leaf_values,
        }
    }
}

/// One field copy: per-vertex uniforms (`uniforms[p-1]` holds the `M^p`
/// uniforms of level `p`) and the evaluated leaf values.
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub root_uniform: Option<f64>,
    pub uniforms: Vec<Vec<f64>>,
    pub leaf_values: Vec<f64>,
}

impl FieldSample {
    /// Uniforms along the path to leaf `leaf` (flat index), root excluded.
    pub fn path_uniforms(&self, leaf: usize, m: usize) -> Vec<f64> {
        let r = self.uniforms.len();
        self.uniforms
            .iter()
            .enumerate()
            .map(|(p, level)| level[leaf / m.pow((r - p - 1) as u32)])
            .collect()
    }
}

/// Independent field copies for an index set of size `n_copies`.
pub fn sample_field_array<R: Rng + ?Sized>(
    h: &OrderParamH,
    m: usize,
    n_copies: usize,
    omega_star: Option<f64>,
    rng: &mut R,
) -> Result<Vec<FieldSample>> {
    let sampler = FieldSampler::new(h, m, omega_star)?;
    Ok((0..n_copies).map(|_| sampler.sample(rng)).collect())
}

/// A ±1 spin with mean `sbar`.
pub fn spins_from_field<R: Rng + ?Sized>(sbar: f64, rng: &mut R) -> Result<i8> {
    if !(sbar.abs() <= 1.0) {
        return Err(Error::param("sbar", format!("{sbar} outside [-1,1]")));
    }
    let x: f64 = rng.random();
    Ok(if x <= (1.0 + sbar) / 2.0 { 1 } else { -1 })
}

/// Gaussian field on the leaves of an `M`-ary tree whose covariance between
/// leaves `γ, γ'` is `c_{γ∧γ'}`.
#[derive(Clone, Debug)]
pub struct UltrametricGaussian {
    pub levels: Vec<f64>,
    pub m: usize,
    pub values: Vec<f64>,
}

impl UltrametricGaussian {
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }
}

/// Telescoping construction `g^γ = Σ_p sqrt(c_p - c_{p-1}) η_{β_p(γ)}` with
/// one standard normal per vertex; the tree depth is `levels.len() - 1`.
pub fn sample_ultrametric_gaussian<R: Rng + ?Sized>(
    levels: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<UltrametricGaussian> {
    if levels.is_empty() {
        return Err(Error::param("levels", "need at least c_0"));
    }
    if levels[0] < 0.0 || levels.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::param(
            "levels",
            format!("need 0 ≤ c_0 ≤ … ≤ c_r, got {levels:?}"),
        ));
    }
    let mut values = vec![0.0];
    let mut prev = 0.0;
    for (p, &c) in levels.iter().enumerate() {
        let scale = (c - prev).sqrt();
        prev = c;
        if p > 0 {
            values = values.iter().flat_map(|&v| std::iter::repeat_n(v, m)).collect();
        }
        for v in values.iter_mut() {
            let eta: f64 = StandardNormal.sample(rng);
            *v += scale * eta;
        }
    }
    Ok(UltrametricGaussian {
        levels: levels.to_vec(),
        m,
        values,
    })
}

/// Levels `c_p^{d-1}` of the power-law covariance carried by a `d`-spin
/// perturbation clause.
pub fn power_levels(c: &[f64], d: u32) -> Vec<f64> {
    c.iter().map(|x| x.powi(d as i32 - 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn constant_h_ignores_input() {
        let h = OrderParamH::constant(3, 0.4).unwrap();
        assert_eq!(h.eval(&[0.1, 0.7, 1.0]).unwrap(), 0.4);
        let g1 = OrderParamH::new(2, 1, vec![-0.3]).unwrap();
        assert_eq!(g1.eval(&[0.0, 0.99]).unwrap(), -0.3);
    }

    #[test]
    fn indexing_contract() {
        // values[i][j] with 1-based cells; row-major.
        let h = OrderParamH::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(h.eval(&[0.3, 0.9]).unwrap(), 0.2);
        assert_eq!(h.eval(&[0.5, 0.5]).unwrap(), 0.1);
        assert_eq!(h.eval(&[0.51, 0.0]).unwrap(), 0.3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let h = OrderParamH::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(h.eval(&[1.2]).is_err());
        assert!(h.eval(&[0.2, 0.3]).is_err());
        assert!(OrderParamH::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(OrderParamH::new(2, 2, vec![0.0; 3]).is_err());
        assert!(spins_from_field(1.01, &mut stream(1, 0, 0)).is_err());
        assert!(sample_ultrametric_gaussian(&[0.5, 0.2], 2, &mut stream(1, 0, 0)).is_err());
    }

    #[test]
    fn omega_star_variant_needs_frozen_value() {
        let h = OrderParamH::with_omega_star(1, 2, vec![0.0; 8]).unwrap();
        assert_eq!(h.arity(), 3);
        assert!(FieldSampler::new(&h, 2, None).is_err());
        assert!(FieldSampler::new(&h, 2, Some(0.3)).is_ok());
    }

    #[test]
    fn sampled_leaf_values_match_eval_on_path() {
        let h = OrderParamH::from_fn(2, 3, |w| w[0] - w[1]).unwrap();
        let sampler = FieldSampler::new(&h, 4, None).unwrap();
        let s = sampler.sample(&mut stream(2, 0, 0));
        for leaf in 0..16 {
            let w = s.path_uniforms(leaf, 4);
            assert_eq!(h.eval(&w).unwrap(), s.leaf_values[leaf]);
        }
        // Leaves with wedge p share their first p uniforms.
        let (a, b) = (s.path_uniforms(5, 4), s.path_uniforms(6, 4));
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1], b[1]);
    }

    #[test]
    fn fill_and_sample_consume_identical_draws() {
        let h = OrderParamH::from_fn(2, 4, |w| w[0] * w[1]).unwrap();
        let sampler = FieldSampler::new(&h, 3, None).unwrap();
        let s = sampler.sample(&mut stream(3, 0, 0));
        let mut out = vec![0.0; 9];
        sampler.fill(&mut stream(3, 0, 0), &mut out);
        assert_eq!(out, s.leaf_values);
    }

    #[test]
    fn deterministic_spins_at_extremes() {
        let mut rng = stream(4, 0, 0);
        for _ in 0..100 {
            assert_eq!(spins_from_field(1.0, &mut rng).unwrap(), 1);
            assert_eq!(spins_from_field(-1.0, &mut rng).unwrap(), -1);
        }
    }

    #[test]
    fn gaussian_with_single_jump_has_shared_zero_part() {
        let g = sample_ultrametric_gaussian(&[0.0, 0.0, 1.0], 3, &mut stream(5, 0, 0)).unwrap();
        assert_eq!(g.values.len(), 9);
        assert_eq!(g.depth(), 2);
    }
}
