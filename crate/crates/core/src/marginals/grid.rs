use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Default width of a single-cell (Dirac) density.
pub const DIRAC_WIDTH: f64 = 1e-6;

/// A regular, cell-centered axis: `n` cells of equal width on [lo, hi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) || n == 0 {
            return Err(Error::InvalidParameter(format!("bad axis [{lo}, {hi}] with {n} cells")));
        }
        Ok(Self { lo, hi, n })
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.spacing()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.center(i)).collect()
    }

    /// Index of the cell containing `x`, if any. The upper edge belongs to
    /// the last cell.
    pub fn cell_of(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        let i = ((x - self.lo) / self.spacing()).floor() as usize;
        Some(i.min(self.n - 1))
    }

    /// The axis widened by `pad` on both sides, keeping `n` cells.
    pub fn padded(&self, pad: f64) -> Result<Self> {
        Self::new(self.lo - pad, self.hi + pad, self.n)
    }
}

/// A nonnegative function tabulated at the cell centers of a 1D or 2D grid.
///
/// Used for marginal densities (unit mass) and for potentials, where the
/// mass is irrelevant. Values are stored with the first axis varying
/// slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    axes: Vec<Axis>,
    values: Vec<f64>,
    normalization: f64,
}

impl GridDensity {
    pub fn new(axes: Vec<Axis>, values: Vec<f64>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::InvalidParameter(format!("grids must be 1D or 2D, got {}D", axes.len())));
        }
        let len: usize = axes.iter().map(|a| a.n).product();
        if values.len() != len {
            return Err(Error::InvalidParameter(format!("{} values for {} grid cells", values.len(), len)));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter("density values must be finite and nonnegative".into()));
        }
        Ok(Self { axes, values, normalization: 1.0 })
    }

    /// Tabulates `f` at the cell centers.
    pub fn from_fn<F: Fn(&[f64]) -> f64>(axes: Vec<Axis>, f: F) -> Result<Self> {
        let len: usize = axes.iter().map(|a| a.n).product();
        let mut values = Vec::with_capacity(len);
        let mut p = vec![0.0; axes.len()];
        for idx in 0..len {
            Self::fill_point(&axes, idx, &mut p);
            values.push(f(&p));
        }
        Self::new(axes, values)
    }

    /// Unit-mass single cell of width `width` centered at `point`.
    pub fn dirac(point: &[f64], width: f64) -> Result<Self> {
        if !(width.is_finite() && width > 0.0) {
            return Err(Error::InvalidParameter(format!("Dirac width must be positive, got {width}")));
        }
        let axes = point
            .iter()
            .map(|&x| Axis::new(x - 0.5 * width, x + 0.5 * width, 1))
            .collect::<Result<Vec<_>>>()?;
        // Volume from the axes, not width^d: the edges are rounded.
        let vol: f64 = axes.iter().map(Axis::spacing).product();
        Self::new(axes, vec![1.0 / vol])
    }

    fn fill_point(axes: &[Axis], idx: usize, p: &mut [f64]) {
        match axes.len() {
            1 => p[0] = axes[0].center(idx),
            _ => {
                let n1 = axes[1].n;
                p[0] = axes[0].center(idx / n1);
                p[1] = axes[1].center(idx % n1);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).product()
    }

    /// Center of cell `idx`.
    pub fn point(&self, idx: usize) -> DVector<f64> {
        let mut p = vec![0.0; self.dim()];
        Self::fill_point(&self.axes, idx, &mut p);
        DVector::from_vec(p)
    }

    pub fn points(&self) -> Vec<DVector<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Flat index of the cell containing `x`.
    pub fn cell_of(&self, x: &DVector<f64>) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        match self.dim() {
            1 => self.axes[0].cell_of(x[0]),
            _ => {
                let i = self.axes[0].cell_of(x[0])?;
                let j = self.axes[1].cell_of(x[1])?;
                Some(i * self.axes[1].n + j)
            }
        }
    }

    /// True for a single-cell grid.
    pub fn is_dirac(&self) -> bool {
        self.values.len() == 1
    }

    /// Σ values · cell volume.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    /// Scales to unit mass; the factor divided out is kept in
    /// [`GridDensity::normalization`].
    pub fn normalized(mut self) -> Result<Self> {
        let mass = self.mass();
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::InvalidParameter(format!("density has mass {mass}, cannot normalize")));
        }
        for v in &mut self.values {
            *v /= mass;
        }
        self.normalization *= mass;
        Ok(self)
    }

    /// Total factor divided out by normalization (1 if never normalized).
    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    /// Piecewise-linear resampling onto other axes (bilinear in 2D).
    /// Outside the hull of this grid's cells the result is zero; between
    /// the outermost center and the cell edge the edge value is held.
    pub fn resample(&self, axes: Vec<Axis>) -> Result<Self> {
        if axes.len() != self.dim() {
            return Err(Error::InvalidParameter("resampling across dimensions".into()));
        }
        let src = self.clone();
        Self::from_fn(axes, |p| src.interpolate(p))
    }

    fn interpolate(&self, p: &[f64]) -> f64 {
        // (index, weight) pairs along one axis
        let along = |a: &Axis, x: f64| -> Option<[(usize, f64); 2]> {
            if !(x >= a.lo && x <= a.hi) {
                return None;
            }
            let s = (x - a.lo) / a.spacing() - 0.5;
            if s <= 0.0 {
                return Some([(0, 1.0), (0, 0.0)]);
            }
            let i = s.floor() as usize;
            if i + 1 >= a.n {
                return Some([(a.n - 1, 1.0), (a.n - 1, 0.0)]);
            }
            let f = s - i as f64;
            Some([(i, 1.0 - f), (i + 1, f)])
        };
        match self.dim() {
            1 => match along(&self.axes[0], p[0]) {
                Some(w) => w.iter().map(|&(i, c)| c * self.values[i]).sum(),
                None => 0.0,
            },
            _ => {
                let (Some(wx), Some(wy)) = (along(&self.axes[0], p[0]), along(&self.axes[1], p[1])) else {
                    return 0.0;
                };
                let n1 = self.axes[1].n;
                let mut s = 0.0;
                for &(i, ci) in &wx {
                    for &(j, cj) in &wy {
                        s += ci * cj * self.values[i * n1 + j];
                    }
                }
                s
            }
        }
    }

    /// Writes `(x…, value)` rows with a header line.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_columns(w, &self.points(), &self.values)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads `(x…, value)` rows on a regular grid of cell centers.
    ///
    /// A single-row file is read as a Dirac cell of width [`DIRAC_WIDTH`].
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Data(format!("bad number {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let ncol = rows.first().map(|r| r.len()).ok_or_else(|| Error::Data("empty density file".into()))?;
        if !(ncol == 2 || ncol == 3) || rows.iter().any(|r| r.len() != ncol) {
            return Err(Error::Data("density rows must all have 2 (1D) or 3 (2D) columns".into()));
        }
        let dim = ncol - 1;
        if rows.len() == 1 {
            let d = Self::dirac(&rows[0][..dim], DIRAC_WIDTH)?;
            return Ok(d);
        }
        let mut axes = Vec::with_capacity(dim);
        for c in 0..dim {
            let mut xs: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            xs.sort_by(|a, b| a.total_cmp(b));
            xs.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
            axes.push(axis_from_centers(&xs)?);
        }
        let len: usize = axes.iter().map(|a| a.n).product();
        if len != rows.len() {
            return Err(Error::Data(format!("{} rows do not form a full {len}-cell grid", rows.len())));
        }
        let mut values = vec![f64::NAN; len];
        let probe = Self { axes: axes.clone(), values: vec![0.0; len], normalization: 1.0 };
        for r in &rows {
            let idx = probe
                .cell_of(&DVector::from_column_slice(&r[..dim]))
                .ok_or_else(|| Error::Data("grid point outside inferred axes".into()))?;
            values[idx] = r[dim];
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Data("duplicate grid points in density file".into()));
        }
        Self::new(axes, values)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn axis_from_centers(xs: &[f64]) -> Result<Axis> {
    if xs.len() == 1 {
        return Axis::new(xs[0] - 0.5 * DIRAC_WIDTH, xs[0] + 0.5 * DIRAC_WIDTH, 1);
    }
    let h = (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64;
    for (i, &x) in xs.iter().enumerate() {
        if (x - (xs[0] + i as f64 * h)).abs() > 1e-6 * h {
            return Err(Error::Data("grid points are not regularly spaced".into()));
        }
    }
    Axis::new(xs[0] - 0.5 * h, xs[xs.len() - 1] + 0.5 * h, xs.len())
}

/// Writes points with one value column each.
pub(crate) fn write_columns<W: Write>(w: W, points: &[DVector<f64>], values: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let dim = points.first().map_or(1, |p| p.len());
    let mut header: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
    header.push("value".into());
    wtr.write_record(&header)?;
    for (p, v) in points.iter().zip(values) {
        let mut rec: Vec<String> = p.iter().map(|x| format!("{x:.17e}")).collect();
        rec.push(format!("{v:.17e}"));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// The piecewise-cosine density on [0, 1] before normalization (mass 2).
pub fn cosine_density_raw(x: f64) -> f64 {
    use std::f64::consts::PI;
    if !(0.0..=1.0).contains(&x) {
        0.0
    } else if x < 2.0 / 3.0 {
        0.4 - 0.2 * (3.0 * PI * x).cos()
    } else {
        5.2 - 5.0 * (6.0 * PI * x - 4.0 * PI).cos()
    }
}

/// Cosine marginal ρ₀ on `n` cells of [0, 1] and its mirror ρ_f(x) = ρ₀(1 − x),
/// both normalized to unit mass.
pub fn build_cosine_marginals(n: usize) -> Result<(GridDensity, GridDensity)> {
    if n < 16 {
        return Err(Error::InvalidParameter(format!("cosine marginals need n >= 16, got {n}")));
    }
    let axis = Axis::new(0.0, 1.0, n)?;
    let rho0 = GridDensity::from_fn(vec![axis], |p| cosine_density_raw(p[0]))?.normalized()?;
    // Cell centers are symmetric about 1/2, so the mirror is a reversal.
    let mut mirrored = rho0.values.clone();
    mirrored.reverse();
    let mut rhof = GridDensity::new(vec![axis], mirrored)?;
    rhof.normalization = rho0.normalization;
    Ok((rho0, rhof))
}
