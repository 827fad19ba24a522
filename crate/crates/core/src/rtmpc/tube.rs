//! Monte-Carlo approximation of the disturbance-invariant tube and the
//! resulting constraint tightening.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linmodel::{BoxSet, STATE_NAMES};

/// How disturbance sequences are drawn during the tube rollouts.
///
/// Both schemes draw every sample uniformly from `W`. `Iid` draws a fresh
/// sample each step. `Mixed` does that on even rollouts and, on odd
/// rollouts, holds each sample for a random 1..=100 steps, which visits the
/// slowly-built extremes of the invariant set far more often than iid noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TubeSampling {
    Iid,
    Mixed,
}

impl std::str::FromStr for TubeSampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Self::Iid),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Config(format!("unknown tube sampling {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TubeConfig {
    pub n_rollouts: usize,
    pub horizon_steps: usize,
    pub seed: u64,
    pub sampling: TubeSampling,
}

impl Default for TubeConfig {
    fn default() -> Self {
        Self { n_rollouts: 1000, horizon_steps: 500, seed: 42, sampling: TubeSampling::Mixed }
    }
}

const MAX_HOLD: usize = 100;
const DIVERGENCE_BOUND: f64 = 1e6;

/// Rollout `index` of the tube sampler. Each rollout owns a ChaCha stream
/// selected by its index, so results do not depend on thread scheduling.
fn rollout(a_k: &DMatrix<f64>, w: &BoxSet, cfg: &TubeConfig, index: usize) -> Result<DVector<f64>> {
    let n = a_k.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let hold = cfg.sampling == TubeSampling::Mixed && index % 2 == 1;
    let mut x = DVector::zeros(n);
    let mut max_abs = DVector::zeros(n);
    let mut wk = DVector::zeros(n);
    let mut remaining = 0usize;
    for _ in 0..cfg.horizon_steps {
        if remaining == 0 {
            for i in 0..n {
                wk[i] = sample(&mut rng, w.lo[i], w.hi[i]);
            }
            remaining = if hold { rng.random_range(1..=MAX_HOLD) } else { 1 };
        }
        remaining -= 1;
        x = a_k * &x + &wk;
        let norm = x.norm();
        if !(norm <= DIVERGENCE_BOUND) {
            return Err(Error::Divergence(norm));
        }
        max_abs.zip_apply(&x, |m: &mut f64, v: f64| *m = m.max(v.abs()));
    }
    Ok(max_abs)
}

fn sample(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + (hi - lo) * rng.random::<f64>()
    } else {
        lo
    }
}

/// Componentwise max `|x|` of `x+ = A_K x + w` over all rollouts and steps,
/// started at the origin, returned as an origin-symmetric box.
pub fn compute_tube(a_k: &DMatrix<f64>, w: &BoxSet, cfg: &TubeConfig) -> Result<BoxSet> {
    let n = a_k.nrows();
    if w.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: w.dim() });
    }
    let per_rollout: Vec<DVector<f64>> =
        (0..cfg.n_rollouts).into_par_iter().map(|i| rollout(a_k, w, cfg, i)).collect::<Result<_>>()?;
    let mut z = DVector::zeros(n);
    for m in &per_rollout {
        z.zip_apply(m, |a: &mut f64, b: f64| *a = a.max(b));
    }
    Ok(BoxSet { lo: -&z, hi: z, empty: false })
}

/// Half-widths of an origin-symmetric box.
pub fn half_widths(z: &BoxSet) -> DVector<f64> {
    z.lo.zip_map(&z.hi, |l, h| l.abs().max(h.abs()))
}

/// Box hull of `{K v : v in Z}` as half-widths, by enumerating the vertices
/// of `Z`.
pub fn gain_image_hull(k: &DMatrix<f64>, z: &BoxSet) -> DVector<f64> {
    let n = z.dim();
    let zh = half_widths(z);
    let mut hull = DVector::zeros(k.nrows());
    let mut v = DVector::zeros(n);
    for mask in 0u64..(1u64 << n) {
        for j in 0..n {
            v[j] = if mask >> j & 1 == 1 { zh[j] } else { -zh[j] };
        }
        let kv = k * &v;
        hull.zip_apply(&kv, |h: &mut f64, x: f64| *h = h.max(x.abs()));
    }
    hull
}

/// `X (-) Z` and `U (-) K Z` for boxes.
pub fn tighten(x: &BoxSet, u: &BoxSet, z: &BoxSet, k: &DMatrix<f64>) -> Result<(BoxSet, BoxSet)> {
    if x.dim() != z.dim() {
        return Err(Error::DimensionMismatch { expected: x.dim(), got: z.dim() });
    }
    if k.shape() != (u.dim(), z.dim()) {
        return Err(Error::DimensionMismatch { expected: u.dim() * z.dim(), got: k.len() });
    }
    let zh = half_widths(z);
    let kz = gain_image_hull(k, z);
    let xt = BoxSet::new(&x.lo + &zh, &x.hi - &zh)?;
    let ut = BoxSet::new(&u.lo + &kz, &u.hi - &kz)?;
    for b in [&xt, &ut] {
        if let Some((dim, lo, hi)) = b.first_empty_dim() {
            return Err(Error::EmptyTightenedSet { dim, lo, hi });
        }
    }
    Ok((xt, ut))
}

/// Tube dump: one `name lo hi` line per state.
pub fn tube_to_text(z: &BoxSet) -> String {
    (0..z.dim())
        .map(|i| {
            let name = STATE_NAMES.get(i).copied().unwrap_or("x");
            format!("{} {} {}\n", name, z.lo[i], z.hi[i])
        })
        .collect()
}

pub fn tube_from_text(text: &str) -> Result<BoxSet> {
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 3 {
            return Err(Error::Config(format!("tube line {line:?}")));
        }
        let p = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("tube value {s:?}")));
        lo.push(p(t[1])?);
        hi.push(p(t[2])?);
    }
    BoxSet::new(DVector::from_vec(lo), DVector::from_vec(hi))
}
