//! Cubic spline curves in 3D: evaluation, arc length, tortuosity and
//! point-to-curve distance.
//!
//! Curves are natural cubic splines interpolating their control points, with
//! the control points placed at uniformly spaced parameters over `[0, 1]`.
//! Each curve carries a companion 1D radius spline over the same parameter.

use thiserror::Error;

pub type Point3 = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("a spline needs at least 2 knots, got {0}")]
    TooFewKnots(usize),
    #[error("parameter {0} is outside [0, 1]")]
    OutOfDomain(f64),
    #[error("radius must stay positive along the curve (min {0})")]
    NonPositiveRadius(f64),
    #[error("curve endpoints coincide; tortuosity is undefined")]
    DegenerateChord,
    #[error("non-finite control value")]
    NonFinite,
}

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// Second derivatives of the natural cubic spline through `values` at unit
/// knot spacing (zero at both ends).
fn natural_second_derivatives(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // Thomas algorithm on M[i-1] + 4 M[i] + M[i+1] = 6 (y[i-1] - 2 y[i] + y[i+1]).
    let interior = n - 2;
    let mut c_prime = vec![0.0; interior];
    let mut d_prime = vec![0.0; interior];
    for k in 0..interior {
        let i = k + 1;
        let rhs = 6.0 * (values[i - 1] - 2.0 * values[i] + values[i + 1]);
        if k == 0 {
            c_prime[k] = 1.0 / 4.0;
            d_prime[k] = rhs / 4.0;
        } else {
            let denom = 4.0 - c_prime[k - 1];
            c_prime[k] = 1.0 / denom;
            d_prime[k] = (rhs - d_prime[k - 1]) / denom;
        }
    }
    for k in (0..interior).rev() {
        let next = if k + 1 < interior { m[k + 2] } else { 0.0 };
        m[k + 1] = d_prime[k] - c_prime[k] * next;
    }
    m
}

/// Natural cubic spline through uniformly spaced samples, parameterized
/// over `[0, 1]`. Stored as per-segment power-basis coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline1D {
    knots: Vec<f64>,
    coeffs: Vec<[f64; 4]>,
}

impl CubicSpline1D {
    pub fn new(values: &[f64]) -> Result<Self, GeometryError> {
        if values.len() < 2 {
            return Err(GeometryError::TooFewKnots(values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let m = natural_second_derivatives(values);
        let coeffs = values
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (y0, y1, m0, m1) = (w[0], w[1], m[i], m[i + 1]);
                [y0, (y1 - y0) - (2.0 * m0 + m1) / 6.0, m0 / 2.0, (m1 - m0) / 6.0]
            })
            .collect();
        Ok(Self { knots: values.to_vec(), coeffs })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn segments(&self) -> usize {
        self.coeffs.len()
    }

    /// Segment index and local coordinate in `[0, 1]` for a clamped `t`.
    #[inline]
    fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.coeffs.len();
        let u = t.clamp(0.0, 1.0) * n as f64;
        let i = (u.floor() as usize).min(n - 1);
        (i, u - i as f64)
    }

    /// Value at `t`, clamped into `[0, 1]`.
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        let (i, s) = self.locate(t);
        let c = &self.coeffs[i];
        c[0] + s * (c[1] + s * (c[2] + s * c[3]))
    }

    /// Derivative with respect to `t`.
    #[inline]
    pub fn derivative(&self, t: f64) -> f64 {
        let (i, s) = self.locate(t);
        let c = &self.coeffs[i];
        (c[1] + s * (2.0 * c[2] + 3.0 * s * c[3])) * self.coeffs.len() as f64
    }

    /// Exact minimum and maximum over `[0, 1]`.
    pub fn range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.coeffs {
            for v in segment_extreme_values(c) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }
}

/// Polynomial values at the segment ends and at interior critical points.
fn segment_extreme_values(c: &[f64; 4]) -> impl Iterator<Item = f64> + '_ {
    let poly = move |s: f64| c[0] + s * (c[1] + s * (c[2] + s * c[3]));
    // p'(s) = c1 + 2 c2 s + 3 c3 s^2
    let (qa, qb, qc) = (3.0 * c[3], 2.0 * c[2], c[1]);
    let mut roots = [f64::NAN; 2];
    if qa.abs() > 1e-14 {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            roots = [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)];
        }
    } else if qb.abs() > 1e-14 {
        roots[0] = -qc / qb;
    }
    [0.0, 1.0]
        .into_iter()
        .chain(roots.into_iter().filter(|s| s.is_finite() && *s > 0.0 && *s < 1.0))
        .map(poly)
}

/// Result of a point-to-curve projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestPointResult {
    pub t_star: f64,
    pub distance: f64,
}

/// A vessel centerline with its radius profile.
#[derive(Debug, Clone, PartialEq)]
pub struct Spline3D {
    axes: [CubicSpline1D; 3],
    /// Per-segment coefficients of all three axes, for single-lookup evaluation.
    segs: Vec<[[f64; 4]; 3]>,
    /// Centerline at the discrete-scan parameters of [`Spline3D::nearest_point`].
    scan: Vec<Point3>,
    /// Upper bound on the distance from `scan[k]` to any curve point in the
    /// two neighboring scan cells (their larger arc length).
    scan_reach: Vec<f64>,
    radius: CubicSpline1D,
    branch_id: u32,
}

/// Gauss-Legendre 5-point nodes and weights on `[-1, 1]`.
const GL5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_08),
    (0.906_179_845_938_664, 0.236_926_885_056_189_08),
];

const ARC_RTOL: f64 = 1e-5;

pub const GN_TOL: f64 = 1e-4;
pub const GN_MAX_ITER: usize = 16;
/// Number of discrete local minima refined by the continuous stages.
const MAX_REFINED_MINIMA: usize = 6;

impl Spline3D {
    /// Curve through `control_points` with a radius spline through `radii`
    /// (uniformly spaced over the same parameter range).
    pub fn new(control_points: &[Point3], radii: &[f64], branch_id: u32) -> Result<Self, GeometryError> {
        if control_points.len() < 2 {
            return Err(GeometryError::TooFewKnots(control_points.len()));
        }
        let axis = |k: usize| CubicSpline1D::new(&control_points.iter().map(|p| p[k]).collect::<Vec<_>>());
        let radius = CubicSpline1D::new(radii)?;
        let (r_min, _) = radius.range();
        if !(r_min > 0.0) {
            return Err(GeometryError::NonPositiveRadius(r_min));
        }
        let axes = [axis(0)?, axis(1)?, axis(2)?];
        let segs = (0..axes[0].segments()).map(|i| [axes[0].coeffs[i], axes[1].coeffs[i], axes[2].coeffs[i]]).collect();
        let mut spline = Self { axes, segs, scan: Vec::new(), scan_reach: Vec::new(), radius, branch_id };
        spline.build_scan();
        Ok(spline)
    }

    fn build_scan(&mut self) {
        let n = (4 * self.n_control_points()).max(16);
        let step = 1.0 / (n - 1) as f64;
        self.scan = (0..n).map(|k| self.point_at(k as f64 * step)).collect();
        let speed = |t: f64| norm(self.tangent_at(t));
        let cells: Vec<f64> = (0..n - 1)
            .map(|k| {
                let (a, b) = (k as f64 * step, (k + 1) as f64 * step);
                adaptive_gl(&speed, a, b, gauss_legendre(&speed, a, b), 0)
            })
            .collect();
        self.scan_reach = (0..n)
            .map(|k| {
                let left = if k > 0 { cells[k - 1] } else { 0.0 };
                let right = cells.get(k).copied().unwrap_or(0.0);
                left.max(right) * (1.0 + 1e-6)
            })
            .collect();
    }

    pub fn with_constant_radius(control_points: &[Point3], radius: f64, branch_id: u32) -> Result<Self, GeometryError> {
        Self::new(control_points, &[radius, radius], branch_id)
    }

    pub fn branch_id(&self) -> u32 {
        self.branch_id
    }

    pub fn set_branch_id(&mut self, id: u32) {
        self.branch_id = id;
    }

    pub fn control_points(&self) -> Vec<Point3> {
        let n = self.axes[0].knots().len();
        (0..n).map(|i| [self.axes[0].knots()[i], self.axes[1].knots()[i], self.axes[2].knots()[i]]).collect()
    }

    pub fn radius_knots(&self) -> &[f64] {
        self.radius.knots()
    }

    pub fn n_control_points(&self) -> usize {
        self.axes[0].knots().len()
    }

    pub fn radius_spline(&self) -> &CubicSpline1D {
        &self.radius
    }

    /// Point at `t`; errors outside `[0, 1]`.
    pub fn eval(&self, t: f64) -> Result<Point3, GeometryError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(GeometryError::OutOfDomain(t));
        }
        Ok(self.point_at(t))
    }

    /// Point at `t` clamped into `[0, 1]`.
    #[inline]
    fn locate(&self, t: f64) -> (&[[f64; 4]; 3], f64) {
        let n = self.segs.len();
        let u = t.clamp(0.0, 1.0) * n as f64;
        let i = (u.floor() as usize).min(n - 1);
        (&self.segs[i], u - i as f64)
    }

    #[inline]
    pub fn point_at(&self, t: f64) -> Point3 {
        let (c, s) = self.locate(t);
        let p = |c: &[f64; 4]| c[0] + s * (c[1] + s * (c[2] + s * c[3]));
        [p(&c[0]), p(&c[1]), p(&c[2])]
    }

    #[inline]
    pub fn tangent_at(&self, t: f64) -> Point3 {
        let (c, s) = self.locate(t);
        let n = self.segs.len() as f64;
        let d = |c: &[f64; 4]| (c[1] + s * (2.0 * c[2] + 3.0 * s * c[3])) * n;
        [d(&c[0]), d(&c[1]), d(&c[2])]
    }

    #[inline]
    pub fn radius_at(&self, t: f64) -> f64 {
        self.radius.value(t)
    }

    pub fn max_radius(&self) -> f64 {
        self.radius.range().1
    }

    pub fn min_radius(&self) -> f64 {
        self.radius.range().0
    }

    /// Axis-aligned bounding box of the centerline (exact per segment).
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for k in 0..3 {
            let (a, b) = self.axes[k].range();
            lo[k] = a;
            hi[k] = b;
        }
        (lo, hi)
    }

    /// Bounding box of one polynomial segment of the centerline.
    pub fn segment_bounds(&self, segment: usize) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for k in 0..3 {
            for v in segment_extreme_values(&self.axes[k].coeffs[segment]) {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        (lo, hi)
    }

    pub fn segments(&self) -> usize {
        self.axes[0].segments()
    }

    /// Arc length by adaptive Gauss-Legendre quadrature, per segment.
    pub fn arc_length(&self) -> f64 {
        let n = self.segments() as f64;
        let speed = |t: f64| norm(self.tangent_at(t));
        (0..self.segments())
            .map(|i| {
                let (a, b) = (i as f64 / n, (i + 1) as f64 / n);
                let whole = gauss_legendre(&speed, a, b);
                adaptive_gl(&speed, a, b, whole, 0)
            })
            .sum()
    }

    pub fn chord_length(&self) -> f64 {
        norm(sub(self.point_at(1.0), self.point_at(0.0)))
    }

    /// Arc length over chord length; at least 1.
    pub fn tortuosity(&self) -> Result<f64, GeometryError> {
        let chord = self.chord_length();
        if chord < 1e-12 {
            return Err(GeometryError::DegenerateChord);
        }
        Ok((self.arc_length() / chord).max(1.0))
    }

    /// Closest point on the centerline to `query`.
    ///
    /// A discrete scan over `max(16, 4 n)` uniform parameters finds candidate
    /// basins; each discrete local minimum (best few) is refined by one
    /// parabolic vertex step and then Gauss-Newton on `|C(t) - q|^2` with
    /// step halving. The result is never worse than the best scan sample.
    pub fn nearest_point(&self, query: Point3) -> NearestPointResult {
        let n_coarse = self.scan.len();
        let step = 1.0 / (n_coarse - 1) as f64;
        let mut samples = [0.0f64; 256];
        let mut heap_samples;
        let f: &mut [f64] = if n_coarse <= samples.len() {
            &mut samples[..n_coarse]
        } else {
            heap_samples = vec![0.0; n_coarse];
            &mut heap_samples
        };
        for (fk, p) in f.iter_mut().zip(&self.scan) {
            *fk = dist2(*p, query);
        }

        let mut minima: [(f64, usize); MAX_REFINED_MINIMA] = [(f64::INFINITY, 0); MAX_REFINED_MINIMA];
        for k in 0..n_coarse {
            let left = if k > 0 { f[k - 1] } else { f64::INFINITY };
            let right = if k + 1 < n_coarse { f[k + 1] } else { f64::INFINITY };
            if f[k] <= left && f[k] <= right {
                // Keep the smallest few, sorted ascending.
                if f[k] < minima[MAX_REFINED_MINIMA - 1].0 {
                    let mut j = MAX_REFINED_MINIMA - 1;
                    while j > 0 && minima[j - 1].0 > f[k] {
                        minima[j] = minima[j - 1];
                        j -= 1;
                    }
                    minima[j] = (f[k], k);
                }
            }
        }

        let mut best_t = minima[0].1 as f64 * step;
        let mut best_f = minima[0].0;
        for &(fk, k) in minima.iter().filter(|m| m.0.is_finite()) {
            // Skip basins that cannot contain anything closer than the best so far.
            let bound = fk.sqrt() - self.scan_reach[k];
            if bound > 0.0 && bound * bound > best_f {
                continue;
            }
            let (t, ft) = self.refine(query, f, k, step, fk);
            if ft < best_f {
                best_f = ft;
                best_t = t;
            }
        }
        NearestPointResult { t_star: best_t, distance: best_f.sqrt() }
    }

    fn refine(&self, query: Point3, f: &[f64], k: usize, step: f64, fk: f64) -> (f64, f64) {
        let n = f.len();
        let objective = |t: f64| dist2(self.point_at(t), query);

        // Parabolic vertex through the bracketing triple.
        let mut t = k as f64 * step;
        let mut ft = fk;
        let c = k.clamp(1, n - 2);
        let (ta, tb, tc) = ((c - 1) as f64 * step, c as f64 * step, (c + 1) as f64 * step);
        let (fa, fb, fc) = (f[c - 1], f[c], f[c + 1]);
        let denom = (tb - ta) * (fb - fc) - (tb - tc) * (fb - fa);
        if denom.abs() > f64::MIN_POSITIVE {
            let num = (tb - ta).powi(2) * (fb - fc) - (tb - tc).powi(2) * (fb - fa);
            let tv = (tb - 0.5 * num / denom).clamp(ta, tc);
            let fv = objective(tv);
            if fv < ft {
                t = tv;
                ft = fv;
            }
        }

        // Gauss-Newton with step halving.
        for _ in 0..GN_MAX_ITER {
            let r = sub(self.point_at(t), query);
            let j = self.tangent_at(t);
            let jj = dot(j, j);
            if jj <= f64::MIN_POSITIVE {
                break;
            }
            let mut delta = -dot(j, r) / jj;
            let mut accepted = false;
            for _ in 0..12 {
                let tn = (t + delta).clamp(0.0, 1.0);
                let fnew = objective(tn);
                if fnew <= ft {
                    delta = tn - t;
                    t = tn;
                    ft = fnew;
                    accepted = true;
                    break;
                }
                delta *= 0.5;
            }
            if !accepted || delta.abs() < GN_TOL {
                break;
            }
        }
        (t, ft)
    }
}

fn gauss_legendre<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    GL5.iter().map(|&(x, w)| w * f(mid + half * x)).sum::<f64>() * half
}

fn adaptive_gl<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, depth: u32) -> f64 {
    let mid = 0.5 * (a + b);
    let left = gauss_legendre(f, a, mid);
    let right = gauss_legendre(f, mid, b);
    let refined = left + right;
    if depth >= 24 || (refined - whole).abs() <= ARC_RTOL * refined.abs() {
        return refined;
    }
    adaptive_gl(f, a, mid, left, depth + 1) + adaptive_gl(f, mid, b, right, depth + 1)
}

/// Dense matrix mapping `n_ctrl` uniformly spaced control values to
/// `n_out` uniformly spaced samples of their natural cubic interpolant.
/// Row `i` holds the weights for output sample `i`.
pub fn interpolation_matrix(n_ctrl: usize, n_out: usize) -> Result<Vec<Vec<f64>>, GeometryError> {
    let mut rows = vec![vec![0.0; n_ctrl]; n_out];
    let mut unit = vec![0.0; n_ctrl];
    for j in 0..n_ctrl {
        unit.fill(0.0);
        unit[j] = 1.0;
        let s = CubicSpline1D::new(&unit)?;
        for (i, row) in rows.iter_mut().enumerate() {
            let t = if n_out > 1 { i as f64 / (n_out - 1) as f64 } else { 0.5 };
            row[j] = s.value(t);
        }
    }
    Ok(rows)
}
