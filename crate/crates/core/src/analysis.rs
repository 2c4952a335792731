//! Local and partial maximal functions on uniform grids, and checks of the
//! weighted maximal inequalities.
//!
//! Discrete balls `B(x, r)` collect the cells whose centers lie within `r` of
//! `x`; cells beyond the stored grid count as zeros, so a grid that carries a
//! margin of `delta` around the support gives the untruncated maximal function.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::ReferenceMeasure;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Axis {
    /// Center of the first cell.
    pub start: f64,
    pub step: f64,
    pub len: usize,
}

impl Axis {
    pub fn new(start: f64, step: f64, len: usize) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) || !start.is_finite() || len == 0 {
            return Err(Error::InvalidParameter(format!("bad axis start={start} step={step} len={len}")));
        }
        Ok(Self { start, step, len })
    }

    /// Cells of width `step` covering `[lo, hi]`.
    pub fn covering(lo: f64, hi: f64, step: f64) -> Result<Self> {
        let len = ((hi - lo) / step).ceil().max(1.0) as usize;
        Self::new(lo + 0.5 * step, step, len)
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }
}

/// Row-major samples on a 1-D or 2-D grid. For two axes, axis 0 is the
/// `x_1` block and axis 1 the `x_2` block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridFunction {
    pub axes: Vec<Axis>,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(axes: Vec<Axis>, values: Vec<f64>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::Dimension(format!("grids have 1 or 2 axes, got {}", axes.len())));
        }
        let size: usize = axes.iter().map(|a| a.len).product();
        if size != values.len() {
            return Err(Error::Dimension(format!("{} values for {size} cells", values.len())));
        }
        if axes.iter().any(|a| !(a.step > 0.0)) {
            return Err(Error::InvalidParameter("grid steps must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("grid values must be finite".into()));
        }
        Ok(Self { axes, values })
    }

    pub fn from_fn(axes: Vec<Axis>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut values = Vec::new();
        let mut x = vec![0.0; axes.len()];
        for idx in 0..axes.iter().map(|a| a.len).product() {
            Self::fill_point(&axes, idx, &mut x);
            values.push(f(&x));
        }
        Self::new(axes, values)
    }

    fn fill_point(axes: &[Axis], idx: usize, x: &mut [f64]) {
        match axes.len() {
            1 => x[0] = axes[0].coord(idx),
            _ => {
                x[0] = axes[0].coord(idx / axes[1].len);
                x[1] = axes[1].coord(idx % axes[1].len);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        Self::fill_point(&self.axes, idx, &mut x);
        x
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.step).product()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction { axes: self.axes.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// `(int_grid g dmu, mu(grid cells))` by the midpoint rule.
    pub fn integrate(&self, m: &ReferenceMeasure) -> Result<(f64, f64)> {
        if m.dim() != self.dim() {
            return Err(Error::Dimension(format!("grid dim {} vs measure dim {}", self.dim(), m.dim())));
        }
        let vol = self.cell_volume();
        let mut x = vec![0.0; self.dim()];
        let (mut total, mut mass) = (0.0, 0.0);
        for (idx, v) in self.values.iter().enumerate() {
            Self::fill_point(&self.axes, idx, &mut x);
            let w = m.weight_unchecked(&x) * vol;
            total += v * w;
            mass += w;
        }
        Ok((total, mass))
    }

    /// CSV with header `x0[,x1],value`, one row per cell in row-major order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        writeln!(w, "{},value", header.join(","))?;
        for (idx, v) in self.values.iter().enumerate() {
            let x: Vec<String> = self.point(idx).iter().map(|c| format!("{c:e}")).collect();
            writeln!(w, "{},{v:e}", x.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("grid csv: {msg}"));
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty input"))??;
        let dim = header.split(',').count().checked_sub(1).filter(|d| (1..=2).contains(d)).ok_or_else(|| bad("header"))?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| bad(&e.to_string()))?;
            if row.len() != dim + 1 {
                return Err(bad("row width"));
            }
            rows.push(row);
        }
        let axis = |k: usize| -> Result<Axis> {
            let mut c: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            c.sort_by(f64::total_cmp);
            c.dedup();
            let step = if c.len() > 1 { (c[c.len() - 1] - c[0]) / (c.len() - 1) as f64 } else { 1.0 };
            Axis::new(c[0], step, c.len())
        };
        if rows.is_empty() {
            return Err(bad("no rows"));
        }
        let axes: Result<Vec<Axis>> = (0..dim).map(axis).collect();
        Self::new(axes?, rows.iter().map(|r| r[dim]).collect())
    }
}

/// Lattice offsets sorted by distance, with the number of offsets inside each
/// radius `j h`, `j = 0..=levels`.
struct Stencil {
    offsets: Vec<(isize, isize)>,
    counts: Vec<usize>,
}

impl Stencil {
    fn new(steps: &[f64], radius: f64, h: f64) -> Stencil {
        let levels = (radius / h + 1e-9).floor() as usize;
        let reach: Vec<isize> = steps.iter().map(|s| (radius / s + 1e-9).floor() as isize).collect();
        let mut all = Vec::new();
        let (r0, r1) = (reach[0], *reach.get(1).unwrap_or(&0));
        for i in -r0..=r0 {
            for j in -r1..=r1 {
                let d2 = (i as f64 * steps[0]).powi(2) + steps.get(1).map_or(0.0, |s| (j as f64 * s).powi(2));
                all.push((d2.sqrt(), (i, j)));
            }
        }
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let counts = (0..=levels)
            .map(|l| {
                let r = l as f64 * h * (1.0 + 1e-12);
                all.partition_point(|e| e.0 <= r)
            })
            .collect();
        Stencil { offsets: all.into_iter().map(|e| e.1).collect(), counts }
    }
}

fn maximal_on(values: &[f64], axes: &[Axis], radius: f64) -> Vec<f64> {
    let steps: Vec<f64> = axes.iter().map(|a| a.step).collect();
    let h = steps.iter().copied().fold(f64::INFINITY, f64::min);
    let st = Stencil::new(&steps, radius, h);
    let (n0, n1) = (axes[0].len as isize, axes.get(1).map_or(1, |a| a.len) as isize);
    let mut out = vec![0.0; values.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let (i0, i1) = ((idx as isize) / n1, (idx as isize) % n1);
        let mut sum = 0.0;
        let mut next = 0;
        let mut best: f64 = 0.0;
        for &count in &st.counts {
            while next < count {
                let (di, dj) = st.offsets[next];
                let (a, b) = (i0 + di, i1 + dj);
                if (0..n0).contains(&a) && (0..n1).contains(&b) {
                    sum += values[(a * n1 + b) as usize].abs();
                }
                next += 1;
            }
            best = best.max(sum / count as f64);
        }
        *o = best;
    }
    out
}

/// `M_delta f(x) = max_{r in {0, h, 2h, .., delta}}` of the average of `|f|`
/// over the discrete ball `B(x, r)`, with `h` the smallest grid step.
pub fn local_maximal(g: &GridFunction, delta: f64) -> Result<GridFunction> {
    let h = g.axes.iter().map(|a| a.step).fold(f64::INFINITY, f64::min);
    if !(delta >= h * (1.0 - 1e-12)) {
        return Err(Error::InvalidParameter(format!("delta = {delta} is below the grid step {h}")));
    }
    Ok(GridFunction { axes: g.axes.clone(), values: maximal_on(&g.values, &g.axes, delta) })
}

/// `M_{2,R} f(x_1, x_2)`: maximal averages over the `x_2` axis only, slice by
/// slice in `x_1`.
pub fn partial_maximal(g: &GridFunction, radius: f64) -> Result<GridFunction> {
    if g.dim() != 2 {
        return Err(Error::Dimension("partial maximal functions need a two-block grid".into()));
    }
    let ax2 = g.axes[1];
    if !(radius >= ax2.step * (1.0 - 1e-12)) {
        return Err(Error::InvalidParameter(format!("R = {radius} is below the x2 step {}", ax2.step)));
    }
    let mut values = Vec::with_capacity(g.len());
    for slice in g.values.chunks(ax2.len) {
        values.extend(maximal_on(slice, &[ax2], radius));
    }
    Ok(GridFunction { axes: g.axes.clone(), values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lambda0 {
    pub value: f64,
    /// Ring index attaining the maximum.
    pub argmax: usize,
    pub rings: usize,
    /// The ratio was still increasing at the end of the scan.
    pub growing: bool,
}

/// `sup_k (sup_{R_k} phi) / (inf_{(R_k)_delta} phi)` over rings
/// `R_k = {(k-1) delta <= |x| <= k delta}` for a radial weight profile `phi`.
pub fn lambda0_profile(phi: impl Fn(f64) -> f64, delta: f64, rings: usize) -> Result<Lambda0> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    const SAMPLES: usize = 64;
    let extreme = |a: f64, b: f64, sup: bool| {
        (0..=SAMPLES)
            .map(|i| phi(a + (b - a) * i as f64 / SAMPLES as f64))
            .fold(if sup { f64::NEG_INFINITY } else { f64::INFINITY }, |acc, v| if sup { acc.max(v) } else { acc.min(v) })
    };
    let mut ratios = Vec::with_capacity(rings);
    for k in 1..=rings {
        let kf = k as f64;
        let top = extreme((kf - 1.0) * delta, kf * delta, true);
        let bottom = extreme(((kf - 2.0) * delta).max(0.0), (kf + 1.0) * delta, false);
        ratios.push(if bottom > 0.0 { top / bottom } else { f64::INFINITY });
    }
    let (argmax, value) = ratios
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &r)| if r > b.1 { (i, r) } else { b });
    let tail = &ratios[rings - rings.min(4)..];
    let growing = !value.is_finite() || tail.windows(2).all(|w| w[1] > w[0] * (1.0 + 1e-9)) && argmax + 1 == rings;
    Ok(Lambda0 { value, argmax: argmax + 1, rings, growing })
}

/// Ring scan for the weight of `m`.
pub fn lambda0(m: &ReferenceMeasure, delta: f64) -> Result<Lambda0> {
    let alpha = m.alpha();
    lambda0_profile(|s| (1.0 + s * s).powf(-alpha), delta, 200)
}

/// `(1 + 4 delta^2)^alpha`, the value of the scan when `delta >= 1`.
pub fn lambda0_closed_form(alpha: f64, delta: f64) -> Result<f64> {
    if delta < 1.0 {
        return Err(Error::InvalidParameter(format!("closed form holds for delta >= 1, got {delta}")));
    }
    Ok((1.0 + 4.0 * delta * delta).powf(alpha))
}

/// `C_p = 5^n 2^p p / (p - 1)`.
pub fn maximal_constant(n: usize, p: f64) -> f64 {
    5f64.powi(n as i32) * 2f64.powf(p) * p / (p - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaximalReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / (factor * rhs)` for the power form and `lhs / rhs` for the
    /// exponential form; at most 1 when the inequality holds.
    pub ratio: f64,
    /// Multiplier in front of the right-hand integral.
    pub factor: f64,
    pub lambda0: f64,
    pub pass: bool,
}

fn check_grid(g: &GridFunction, m: &ReferenceMeasure) -> Result<()> {
    if g.dim() != m.dim() {
        return Err(Error::Dimension(format!("grid dim {} vs measure dim {}", g.dim(), m.dim())));
    }
    Ok(())
}

/// `int (M_delta f)^p dmu <= 3 C_p Lambda_0 int |f|^p dmu`, both sides by
/// grid quadrature.
pub fn maximal_lp_check(g: &GridFunction, m: &ReferenceMeasure, delta: f64, p: f64) -> Result<MaximalReport> {
    check_grid(g, m)?;
    if !(p > 1.0) {
        return Err(Error::InvalidParameter(format!("p must exceed 1, got {p}")));
    }
    let mf = local_maximal(g, delta)?;
    let l0 = lambda0(m, delta)?.value;
    let lhs = mf.map(|v| v.powf(p)).integrate(m)?.0;
    let rhs = g.map(|v| v.abs().powf(p)).integrate(m)?.0;
    let factor = 3.0 * maximal_constant(g.dim(), p) * l0;
    Ok(MaximalReport {
        lhs,
        rhs,
        ratio: if rhs > 0.0 { lhs / (factor * rhs) } else { 0.0 },
        factor,
        lambda0: l0,
        pass: lhs <= factor * rhs,
    })
}

/// `int e^{theta M_delta f} dmu <= int (1 + theta M_delta f) dmu
/// + 6 5^n Lambda_0 int e^{2 theta |f|} dmu`. Outside the grid `f` and
/// `M_delta f` vanish, so that region adds `mu(R^n) - mu(grid)` to each
/// integral of an exponential and to the integral of 1.
pub fn maximal_exp_check(g: &GridFunction, m: &ReferenceMeasure, delta: f64, theta: f64) -> Result<MaximalReport> {
    check_grid(g, m)?;
    if !(theta >= 0.0) {
        return Err(Error::InvalidParameter(format!("theta must be nonnegative, got {theta}")));
    }
    let mf = local_maximal(g, delta)?;
    let l0 = lambda0(m, delta)?.value;
    let (e_m, grid_mass) = mf.map(|v| (theta * v).exp()).integrate(m)?;
    let outside = (m.total_mass()? - grid_mass).max(0.0);
    let lhs = e_m + outside;
    let linear = mf.map(|v| 1.0 + theta * v).integrate(m)?.0 + outside;
    let exp2 = g.map(|v| (2.0 * theta * v.abs()).exp()).integrate(m)?.0 + outside;
    let factor = 6.0 * 5f64.powi(g.dim() as i32) * l0;
    let rhs = linear + factor * exp2;
    Ok(MaximalReport { lhs, rhs, ratio: lhs / rhs, factor, lambda0: l0, pass: lhs <= rhs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SobolevFit {
    pub radius: f64,
    /// Smallest `C` with `|f(x1,x2) - f(x1,y2)| <= C |x2 - y2| (M|grad f|(x1,x2) + M|grad f|(x1,y2))`.
    pub constant: f64,
    pub pairs: usize,
}

/// Fits the constant of the partial pointwise inequality on random grid pairs
/// with `|x2 - y2| <= R`, given `|grad_{x2} f|` on the same grid.
pub fn pointwise_sobolev_check<R: Rng + ?Sized>(
    f: &GridFunction,
    grad: &GridFunction,
    radius: f64,
    pairs: usize,
    rng: &mut R,
) -> Result<SobolevFit> {
    if f.dim() != 2 || grad.axes != f.axes {
        return Err(Error::Dimension("need two-block grids for f and its x2 gradient on the same axes".into()));
    }
    let mg = partial_maximal(grad, radius)?;
    let ax2 = f.axes[1];
    let reach = (radius / ax2.step + 1e-9).floor() as usize;
    let mut constant: f64 = 0.0;
    let mut used = 0;
    for _ in 0..pairs {
        let i1 = rng.random_range(0..f.axes[0].len);
        let a = rng.random_range(0..ax2.len);
        let lo = a.saturating_sub(reach);
        let hi = (a + reach).min(ax2.len - 1);
        let b = rng.random_range(lo..=hi);
        if a == b {
            continue;
        }
        used += 1;
        let (ia, ib) = (i1 * ax2.len + a, i1 * ax2.len + b);
        let diff = (f.values[ia] - f.values[ib]).abs();
        let dist = (a as f64 - b as f64).abs() * ax2.step;
        let m = mg.values[ia] + mg.values[ib];
        if diff > 0.0 {
            constant = constant.max(if m > 0.0 { diff / (dist * m) } else { f64::INFINITY });
        }
    }
    Ok(SobolevFit { radius, constant, pairs: used })
}

/// Random piecewise-constant function on `[-half_width, half_width]^n`,
/// on a grid of step `h` carrying a margin of `margin` on every side. The
/// support is split into `pieces` blocks per axis with values in `[-1, 1]`.
pub fn random_piecewise<R: Rng + ?Sized>(
    n: usize,
    half_width: f64,
    margin: f64,
    h: f64,
    pieces: usize,
    rng: &mut R,
) -> Result<GridFunction> {
    if !(1..=2).contains(&n) || pieces == 0 {
        return Err(Error::InvalidParameter("random grids need n in {1, 2} and at least one piece".into()));
    }
    let reach = half_width + margin;
    let axes: Result<Vec<Axis>> = (0..n).map(|_| Axis::covering(-reach, reach, h)).collect();
    let table: Vec<f64> = (0..pieces.pow(n as u32)).map(|_| rng.random_range(-1.0..=1.0)).collect();
    GridFunction::from_fn(axes?, |x| {
        if x.iter().any(|c| c.abs() > half_width) {
            return 0.0;
        }
        let mut idx = 0;
        for c in x {
            let b = (((c + half_width) / (2.0 * half_width)) * pieces as f64).floor().min(pieces as f64 - 1.0) as usize;
            idx = idx * pieces + b;
        }
        table[idx]
    })
}
