//! Demonstrations from the simulated RTMPC cascade, tube-based data
//! augmentation and dataset files.
//!
//! A policy input is the current linear state followed by the desired
//! position and velocity at reference steps `1..=N`, interleaved per step as
//! `px, py, pz, vx, vy, vz`. With `N = 50` that is `10 + 300 = 310` values.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::fnv1a;
use crate::linmodel::{BoxSet, NU, NX};
use crate::mlp::Samples;
use crate::rtmpc::tube::half_widths;

/// Reference entries per window step.
pub const REF_PER_STEP: usize = 6;

pub fn policy_input_len(horizon: usize) -> usize {
    NX + REF_PER_STEP * horizon
}

/// The flattened reference part of a policy input: `p_des, v_des` for
/// window steps `1..=N`.
pub fn reference_features(window: &[DVector<f64>]) -> Result<Vec<f64>> {
    if window.is_empty() {
        return Err(Error::DimensionMismatch { expected: 1, got: 0 });
    }
    let mut out = Vec::with_capacity(REF_PER_STEP * (window.len() - 1));
    for w in &window[1..] {
        if w.len() != NX {
            return Err(Error::DimensionMismatch { expected: NX, got: w.len() });
        }
        out.extend(w.iter().take(REF_PER_STEP));
    }
    Ok(out)
}

/// `[x; p_des(1), v_des(1), ..., p_des(N), v_des(N)]`.
pub fn policy_input(x: &DVector<f64>, window: &[DVector<f64>]) -> Result<Vec<f64>> {
    if x.len() != NX {
        return Err(Error::DimensionMismatch { expected: NX, got: x.len() });
    }
    let mut v: Vec<f64> = x.iter().copied().collect();
    v.extend(reference_features(window)?);
    Ok(v)
}

/// One controller-rate sample of an RTMPC rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoStep {
    pub t: f64,
    pub x: DVector<f64>,
    /// Applied (ancillary) input.
    pub u: DVector<f64>,
    pub u_bar: DVector<f64>,
    pub x_bar: DVector<f64>,
    /// `N + 1` desired states.
    pub window: Vec<DVector<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Demonstration {
    pub steps: Vec<DemoStep>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.steps.first().map_or(0, |s| s.window.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.horizon();
        for (i, s) in self.steps.iter().enumerate() {
            if s.window.len() != n + 1 {
                return Err(Error::DimensionMismatch { expected: n + 1, got: s.window.len() });
            }
            let finite = s.x.iter().chain(s.u.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFiniteState(format!("demonstration step {i}")));
            }
        }
        Ok(())
    }

    /// Text file: a `#demo=1` line, then one CSV row per step with
    /// `t, x(10), u(3), u_bar(3), x_bar(10), window(10 (N+1))`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "#demo=1 horizon={}", self.horizon())?;
        for s in &self.steps {
            let mut vals = vec![s.t];
            for v in [&s.x, &s.u, &s.u_bar, &s.x_bar] {
                vals.extend(v.iter());
            }
            for v in &s.window {
                vals.extend(v.iter());
            }
            writeln!(w, "{}", join(&vals))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        let horizon: usize = header
            .strip_prefix("#demo=1 horizon=")
            .and_then(|h| h.trim().parse().ok())
            .ok_or_else(|| Error::FormatVersionMismatch(format!("demonstration header {header:?}")))?;
        let width = 1 + 2 * NX + 2 * NU + NX * (horizon + 1);
        let mut steps = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v = parse_row(&line, width)?;
            let take = |a: usize, n: usize| DVector::from_row_slice(&v[a..a + n]);
            let mut at = 1;
            let x = take(at, NX);
            at += NX;
            let u = take(at, NU);
            at += NU;
            let u_bar = take(at, NU);
            at += NU;
            let x_bar = take(at, NX);
            at += NX;
            let window = (0..=horizon).map(|i| take(at + i * NX, NX)).collect();
            steps.push(DemoStep { t: v[0], x, u, u_bar, x_bar, window });
        }
        Ok(Self { steps })
    }
}

fn join(vals: &[f64]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_row(line: &str, width: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = line
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::FormatVersionMismatch(format!("bad number: {e}")))?;
    if v.len() != width {
        return Err(Error::FormatVersionMismatch(format!("expected {width} columns, found {}", v.len())));
    }
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowTag {
    Demo,
    Augmented,
}

impl RowTag {
    fn as_str(self) -> &'static str {
        match self {
            RowTag::Demo => "demo",
            RowTag::Augmented => "augmented",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRow {
    pub tag: RowTag,
    pub t: f64,
    /// Index into `AugmentedDataset::windows`.
    pub window: usize,
    pub x: [f64; NX],
    pub u: [f64; NU],
}

/// Supervised rows sharing one flattened reference window per timestep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentedDataset {
    pub windows: Vec<Vec<f64>>,
    pub rows: Vec<DatasetRow>,
}

impl AugmentedDataset {
    pub fn input_len(&self) -> usize {
        NX + self.windows.first().map_or(0, Vec::len)
    }

    pub fn input(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.input_len()];
        self.write_input(i, &mut v);
        v
    }

    /// FNV-1a over the tag, time, inputs and targets of every row.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        let mut input = vec![0.0; self.input_len()];
        for (i, r) in self.rows.iter().enumerate() {
            bytes.push(r.tag as u8);
            bytes.extend(r.t.to_bits().to_le_bytes());
            self.write_input(i, &mut input);
            for v in input.iter().chain(r.u.iter()) {
                bytes.extend(v.to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    /// Rows whose index modulo `every` is `every - 1` go to the second set.
    pub fn split_every(&self, every: usize) -> (AugmentedDataset, AugmentedDataset) {
        let mut train = AugmentedDataset { windows: self.windows.clone(), rows: Vec::new() };
        let mut held = AugmentedDataset { windows: self.windows.clone(), rows: Vec::new() };
        for (i, r) in self.rows.iter().enumerate() {
            if every > 0 && i % every == every - 1 {
                held.rows.push(r.clone());
            } else {
                train.rows.push(r.clone());
            }
        }
        (train, held)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "#fmt=1")?;
        let n_in = if self.rows.is_empty() { 0 } else { self.input_len() };
        let mut header = vec!["tag".to_string(), "t".to_string()];
        header.extend((0..n_in).map(|i| format!("in_{i}")));
        header.extend((0..NU).map(|i| format!("out_{i}")));
        writeln!(w, "{}", header.join(","))?;
        let mut input = vec![0.0; n_in];
        for (i, r) in self.rows.iter().enumerate() {
            self.write_input(i, &mut input);
            let mut vals = vec![r.t];
            vals.extend(&input);
            vals.extend(r.u);
            writeln!(w, "{},{}", r.tag.as_str(), join(&vals))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
        let version = lines.next().transpose()?.unwrap_or_default();
        if version.trim() != "#fmt=1" {
            return Err(Error::FormatVersionMismatch(format!("dataset version line {version:?}")));
        }
        let header = lines.next().transpose()?.unwrap_or_default();
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 + NU || cols[0] != "tag" || cols[1] != "t" {
            return Err(Error::FormatVersionMismatch(format!("dataset header {header:?}")));
        }
        let n_in = cols.len() - 2 - NU;
        let mut ds = AugmentedDataset::default();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (tag, rest) = line.split_once(',').unwrap_or((line.as_str(), ""));
            let tag = match tag {
                "demo" => RowTag::Demo,
                "augmented" => RowTag::Augmented,
                other => return Err(Error::FormatVersionMismatch(format!("unknown row tag {other:?}"))),
            };
            let v = parse_row(rest, 1 + n_in + NU)?;
            if n_in < NX {
                return Err(Error::FormatVersionMismatch(format!("{n_in} inputs is fewer than the state size")));
            }
            let reference = &v[1 + NX..1 + n_in];
            let same_step = ds.rows.last().is_some_and(|r| r.t.to_bits() == v[0].to_bits())
                && ds.windows.last().map(|w| w.as_slice()) == Some(reference);
            if !same_step {
                ds.windows.push(reference.to_vec());
            }
            let mut x = [0.0; NX];
            x.copy_from_slice(&v[1..1 + NX]);
            let mut u = [0.0; NU];
            u.copy_from_slice(&v[1 + n_in..]);
            ds.rows.push(DatasetRow { tag, t: v[0], window: ds.windows.len() - 1, x, u });
        }
        Ok(ds)
    }
}

impl Samples for AugmentedDataset {
    fn len(&self) -> usize {
        self.rows.len()
    }
    fn n_in(&self) -> usize {
        self.input_len()
    }
    fn n_out(&self) -> usize {
        NU
    }
    fn write_input(&self, i: usize, out: &mut [f64]) {
        let r = &self.rows[i];
        out[..NX].copy_from_slice(&r.x);
        out[NX..].copy_from_slice(&self.windows[r.window]);
    }
    fn write_target(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.rows[i].u);
    }
}

/// Each demonstration step plus `n_extra` states drawn uniformly from
/// `x_bar_t (+) Z`, labelled with the ancillary law `u_bar_t + K (x - x_bar_t)`.
/// Timestep `t` draws from its own ChaCha stream, so the result does not
/// depend on how the work is scheduled.
pub fn augment(demo: &Demonstration, z: &BoxSet, k: &DMatrix<f64>, n_extra: usize, seed: u64) -> Result<AugmentedDataset> {
    demo.validate()?;
    if z.dim() != NX || k.shape() != (NU, NX) {
        return Err(Error::DimensionMismatch { expected: NX, got: z.dim() });
    }
    let zh = half_widths(z);
    let windows: Vec<Vec<f64>> = demo.steps.iter().map(|s| reference_features(&s.window)).collect::<Result<_>>()?;
    let per_step: Vec<Vec<DatasetRow>> = demo
        .steps
        .par_iter()
        .enumerate()
        .map(|(t, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut rows = Vec::with_capacity(1 + n_extra);
            let mut x = [0.0; NX];
            let mut u = [0.0; NU];
            x.copy_from_slice(s.x.as_slice());
            u.copy_from_slice(s.u.as_slice());
            rows.push(DatasetRow { tag: RowTag::Demo, t: s.t, window: t, x, u });
            let mut d = DVector::zeros(NX);
            for _ in 0..n_extra {
                for i in 0..NX {
                    d[i] = if zh[i] > 0.0 { rng.random_range(-zh[i]..=zh[i]) } else { 0.0 };
                }
                let xa = &s.x_bar + &d;
                let ua = &s.u_bar + k * &d;
                x.copy_from_slice(xa.as_slice());
                u.copy_from_slice(ua.as_slice());
                rows.push(DatasetRow { tag: RowTag::Augmented, t: s.t, window: t, x, u });
            }
            rows
        })
        .collect();
    Ok(AugmentedDataset { windows, rows: per_step.into_iter().flatten().collect() })
}
