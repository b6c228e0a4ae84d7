//! Uniform B-splines: evaluation, derivative identities, recursive-filter
//! prefiltering (direct transform) and local evaluation (indirect transform).

use rayon::prelude::*;

use crate::error::{Result, TbsError};
use crate::real::Real;
use crate::tensor::CoeffTensor;

pub const MAX_DEGREE: usize = 5;

/// Relative truncation tolerance of the causal filter initialization.
const INIT_TOLERANCE: f64 = 1e-12;

/// Slack when deciding whether a point lies inside the node span.
const DOMAIN_SLACK: f64 = 1e-9;

pub(crate) fn check_degree(n: usize) -> Result<()> {
    if n > MAX_DEGREE {
        return Err(TbsError::DegreeRange {
            degree: n,
            max: MAX_DEGREE,
        });
    }
    Ok(())
}

/// Centered B-spline of degree `n` without range checks.
///
/// Uses the uniform recurrence
/// `n·β^n(x) = ((n+1)/2 + x)·β^{n-1}(x+1/2) + ((n+1)/2 - x)·β^{n-1}(x-1/2)`.
pub(crate) fn bspline(n: usize, x: f64) -> f64 {
    let half = 0.5 * (n as f64 + 1.0);
    let ax = x.abs();
    if n == 0 {
        return if ax < 0.5 {
            1.0
        } else if ax == 0.5 {
            0.5
        } else {
            0.0
        };
    }
    if ax >= half {
        return 0.0;
    }
    ((half + x) * bspline(n - 1, x + 0.5) + (half - x) * bspline(n - 1, x - 0.5)) / n as f64
}

/// r-th derivative through `D^r β^n(x) = Σ_j (-1)^j C(r,j) β^{n-r}(x + r/2 - j)`.
pub(crate) fn bspline_derivative(n: usize, x: f64, r: usize) -> f64 {
    if r == 0 {
        return bspline(n, x);
    }
    let shift = 0.5 * r as f64;
    let mut binom = 1.0;
    let mut acc = 0.0;
    for j in 0..=r {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        acc += sign * binom * bspline(n - r, x + shift - j as f64);
        binom = binom * (r - j) as f64 / (j + 1) as f64;
    }
    acc
}

/// β^n(x).
pub fn eval_bspline(n: usize, x: f64) -> Result<f64> {
    check_degree(n)?;
    Ok(bspline(n, x))
}

/// r-th derivative of β^n at x.
pub fn eval_bspline_derivative(n: usize, x: f64, order: usize) -> Result<f64> {
    check_degree(n)?;
    if order > n {
        return Err(TbsError::Smoothness { degree: n, order });
    }
    Ok(bspline_derivative(n, x, order))
}

/// Integer samples `b^n_k = β^n(k)` over the support, centered.
pub fn sampled_bspline(n: usize) -> Result<Vec<f64>> {
    check_degree(n)?;
    let m = (n / 2) as isize;
    Ok((-m..=m).map(|k| bspline(n, k as f64)).collect())
}

/// Poles of the inverse sampled-B-spline filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPoles {
    pub degree: usize,
    /// Poles in (-1, 0), one per symmetric root pair.
    pub poles: Vec<f64>,
    /// Normalizes the DC response of the filter cascade to one.
    pub gain: f64,
}

/// Roots inside the unit circle of `Σ_k b^n_k z^k`.
///
/// The Laurent polynomial is symmetric, so substituting `w = z + 1/z` leaves a
/// polynomial of degree `floor(n/2) <= 2` in `w`.
pub fn compute_poles(n: usize) -> Result<FilterPoles> {
    let b = sampled_bspline(n)?;
    let m = n / 2;
    let ws: Vec<f64> = match m {
        0 => Vec::new(),
        1 => vec![-b[1] / b[2]],
        2 => {
            // b0 + b1 w + b2 (w^2 - 2) = 0
            let (b0, b1, b2) = (b[2], b[3], b[4]);
            let qa = b2;
            let qb = b1;
            let qc = b0 - 2.0 * b2;
            let disc = (qb * qb - 4.0 * qa * qc).sqrt();
            vec![(-qb - disc) / (2.0 * qa), (-qb + disc) / (2.0 * qa)]
        }
        _ => unreachable!("degree checked above"),
    };
    let mut poles: Vec<f64> = ws
        .into_iter()
        .map(|w| 0.5 * (w + (w * w - 4.0).sqrt()))
        .collect();
    poles.sort_by(|a, b| a.partial_cmp(b).expect("finite poles"));
    let gain = poles
        .iter()
        .map(|&z| (1.0 - z) * (1.0 - 1.0 / z))
        .product();
    Ok(FilterPoles {
        degree: n,
        poles,
        gain,
    })
}

/// How a finite sample sequence is continued past its ends during prefiltering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extension {
    /// Whole-sample symmetric: `s[-k] = s[k]`, `s[N-1+k] = s[N-1-k]`.
    #[default]
    Mirror,
    Zero,
    Replicate,
}

impl std::str::FromStr for Extension {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mirror" => Ok(Extension::Mirror),
            "zero" => Ok(Extension::Zero),
            "replicate" => Ok(Extension::Replicate),
            other => Err(format!("unknown extension '{other}'")),
        }
    }
}

/// Discretization basis: degree, dimensionality and grid step per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    degree: usize,
    step: Vec<f64>,
}

impl BSplineBasis {
    pub fn new(degree: usize, step: Vec<f64>) -> Result<Self> {
        check_degree(degree)?;
        if step.is_empty() || step.len() > 3 {
            return Err(TbsError::InputValidation(format!(
                "basis dimension must be 1..=3, got {}",
                step.len()
            )));
        }
        if step.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(TbsError::InputValidation(format!(
                "grid steps must be positive, got {step:?}"
            )));
        }
        Ok(Self { degree, step })
    }

    /// Unit steps in `dim` dimensions.
    pub fn unit(degree: usize, dim: usize) -> Result<Self> {
        Self::new(degree, vec![1.0; dim])
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.step.len()
    }

    pub fn step(&self) -> &[f64] {
        &self.step
    }

    /// Coefficients kept beyond each end of the node span.
    pub fn pad(&self) -> usize {
        self.degree / 2
    }
}

/// Causal and anticausal recursive filtering of one line, in place.
fn prefilter_line(line: &mut [f64], poles: &FilterPoles, ext: Extension) {
    let len = line.len();
    if poles.poles.is_empty() || len < 2 {
        return;
    }
    for v in line.iter_mut() {
        *v *= poles.gain;
    }
    for &z in &poles.poles {
        line[0] = causal_init(line, z, ext);
        for k in 1..len {
            line[k] += z * line[k - 1];
        }
        let last = anticausal_init(line, z, ext);
        line[len - 1] = last;
        for k in (0..len - 1).rev() {
            line[k] = z * (line[k + 1] - line[k]);
        }
    }
}

fn causal_init(s: &[f64], z: f64, ext: Extension) -> f64 {
    let len = s.len();
    match ext {
        Extension::Zero => s[0],
        Extension::Replicate => s[0] / (1.0 - z),
        Extension::Mirror => {
            let horizon = (INIT_TOLERANCE.ln() / z.abs().ln()).ceil() as usize;
            if horizon < len {
                let mut zn = z;
                let mut sum = s[0];
                for &v in &s[1..horizon] {
                    sum += zn * v;
                    zn *= z;
                }
                sum
            } else {
                // Exact sum over the periodized mirror extension (period 2N-2).
                let iz = 1.0 / z;
                let mut zn = z;
                let mut z2n = z.powi(len as i32 - 1);
                let mut sum = s[0] + z2n * s[len - 1];
                z2n = z2n * z2n * iz;
                for &v in &s[1..len - 1] {
                    sum += (zn + z2n) * v;
                    zn *= z;
                    z2n *= iz;
                }
                sum / (1.0 - zn * zn)
            }
        }
    }
}

/// Initial value of the anticausal pass, given the causal output `c`.
fn anticausal_init(c: &[f64], z: f64, ext: Extension) -> f64 {
    let len = c.len();
    let last = c[len - 1];
    match ext {
        Extension::Mirror => (z / (z * z - 1.0)) * (last + z * c[len - 2]),
        Extension::Zero => (z / (z * z - 1.0)) * last,
        Extension::Replicate => {
            // The causal output keeps growing geometrically towards s_end/(1-z)
            // past the end; sum the anticausal tail in closed form.
            let s_end = last - z * c[len - 2];
            let z2 = 1.0 - z * z;
            -z * (s_end * z / ((1.0 - z) * z2) + last / z2)
        }
    }
}

/// Direct B-spline transform: node samples to interpolation coefficients on the same extents.
pub fn direct_transform(
    samples: &CoeffTensor,
    basis: &BSplineBasis,
    ext: Extension,
) -> Result<CoeffTensor> {
    let padded = interpolation_coefficients(samples, basis, ext)?;
    if basis.pad() == 0 {
        return Ok(padded);
    }
    let pad = basis.pad();
    let n = samples.extents().to_vec();
    let pe = padded.extents().to_vec();
    let out = CoeffTensor::from_fn(n, |idx| {
        let src: Vec<usize> = idx.iter().map(|&i| i + pad).collect();
        padded.data()[flat(&pe, &src)]
    });
    Ok(out)
}

fn flat(extents: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(extents).fold(0, |acc, (&i, &n)| acc * n + i)
}

/// Interpolation coefficients including `pad = floor(n/2)` extra coefficients
/// past each end of every axis, consistent with the chosen extension.
pub(crate) fn interpolation_coefficients(
    samples: &CoeffTensor,
    basis: &BSplineBasis,
    ext: Extension,
) -> Result<CoeffTensor> {
    if samples.dim() != basis.dim() {
        return Err(TbsError::InputValidation(format!(
            "samples have {} axes but basis has {}",
            samples.dim(),
            basis.dim()
        )));
    }
    samples.ensure_finite()?;
    let n = basis.degree();
    if n >= 2 && samples.extents().iter().any(|&e| e < 2) {
        return Err(TbsError::InputValidation(format!(
            "degree-{n} prefilter needs at least 2 samples per axis, got {:?}",
            samples.extents()
        )));
    }
    let poles = compute_poles(n)?;
    let pad = basis.pad();
    let mut extents = samples.extents().to_vec();
    let mut data = samples.data().to_vec();
    for axis in 0..extents.len() {
        let (new_extents, new_data) = filter_axis(&data, &extents, axis, pad, &poles, ext);
        extents = new_extents;
        data = new_data;
    }
    Ok(CoeffTensor::from_raw(extents, data))
}

/// Filters along one axis and grows it by `pad` at both ends.
fn filter_axis(
    data: &[f64],
    extents: &[usize],
    axis: usize,
    pad: usize,
    poles: &FilterPoles,
    ext: Extension,
) -> (Vec<usize>, Vec<f64>) {
    let len = extents[axis];
    let out_len = len + 2 * pad;
    let outer: usize = extents[..axis].iter().product();
    let inner: usize = extents[axis + 1..].iter().product();
    let mut out_extents = extents.to_vec();
    out_extents[axis] = out_len;
    let mut out = vec![0.0; outer * out_len * inner];
    out.par_chunks_mut(out_len * inner)
        .enumerate()
        .for_each(|(o, chunk)| {
            let src = &data[o * len * inner..(o + 1) * len * inner];
            let mut line = vec![0.0; len];
            let mut ext_line = vec![0.0; out_len];
            for i in 0..inner {
                for k in 0..len {
                    line[k] = src[k * inner + i];
                }
                let result = filter_padded(&mut line, &mut ext_line, pad, poles, ext);
                for k in 0..out_len {
                    chunk[k * inner + i] = result[k];
                }
            }
        });
    (out_extents, out)
}

fn filter_padded<'a>(
    line: &'a mut [f64],
    ext_line: &'a mut [f64],
    pad: usize,
    poles: &FilterPoles,
    ext: Extension,
) -> &'a [f64] {
    let len = line.len();
    match ext {
        Extension::Mirror => {
            prefilter_line(line, poles, ext);
            for k in 0..ext_line.len() {
                ext_line[k] = line[mirror_index(k as isize - pad as isize, len)];
            }
        }
        Extension::Zero | Extension::Replicate => {
            // With one pole the closed-form initializations are exact for the
            // infinite extension. With two, the first stage leaves decaying
            // tails past the ends, so a margin wide enough for them to fall
            // below the init tolerance is filtered and then cropped.
            let margin = if poles.poles.len() > 1 {
                let zmax = poles.poles.iter().fold(0.0f64, |m, z| m.max(z.abs()));
                (INIT_TOLERANCE.ln() / zmax.ln()).ceil() as usize
            } else {
                0
            };
            let lead = pad + margin;
            let mut work = vec![0.0; len + 2 * lead];
            for (k, w) in work.iter_mut().enumerate() {
                let j = k as isize - lead as isize;
                *w = if (0..len as isize).contains(&j) {
                    line[j as usize]
                } else if ext == Extension::Zero {
                    0.0
                } else {
                    line[j.clamp(0, len as isize - 1) as usize]
                };
            }
            prefilter_line(&mut work, poles, ext);
            ext_line.copy_from_slice(&work[margin..margin + ext_line.len()]);
        }
    }
    ext_line
}

/// Whole-sample symmetric reflection of `k` into `0..len`.
pub(crate) fn mirror_index(k: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = k.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

/// Values (or derivatives) of the B-splines that are nonzero at grid coordinate `u`.
///
/// Returns the first index `k0`; `out[i]` holds `D^r β^n(u - k0 - i)` for `i in 0..=n`.
pub(crate) fn basis_weights(n: usize, u: f64, order: usize, out: &mut [f64]) -> isize {
    let half = 0.5 * (n as f64 + 1.0);
    let k0 = (u - half).floor() as isize + 1;
    for (i, w) in out.iter_mut().enumerate().take(n + 1) {
        *w = bspline_derivative(n, u - (k0 + i as isize) as f64, order);
    }
    k0
}

/// A spline field `Σ_k c_k β^n(x/h - k)` on a uniform grid.
///
/// Coefficients cover the node span plus `pad = floor(n/2)` indices on each
/// side: exactly the B-splines whose support meets the node span.
#[derive(Debug, Clone)]
pub struct SplineField<T = f64> {
    degree: usize,
    step: Vec<f64>,
    origin: Vec<f64>,
    nodes: Vec<usize>,
    coeffs: CoeffTensor<T>,
}

impl<T: Real> SplineField<T> {
    /// Wraps padded coefficients (extents = nodes + 2·pad per axis).
    pub fn from_coefficients(
        coeffs: CoeffTensor<T>,
        basis: &BSplineBasis,
        origin: Vec<f64>,
    ) -> Result<Self> {
        let pad = basis.pad();
        if coeffs.dim() != basis.dim() || origin.len() != basis.dim() {
            return Err(TbsError::InputValidation(
                "coefficient, basis and origin dimensions differ".into(),
            ));
        }
        let nodes: Vec<usize> = coeffs
            .extents()
            .iter()
            .map(|&e| e.checked_sub(2 * pad).filter(|&v| v >= 1))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| {
                TbsError::InputValidation(format!(
                    "padded extents {:?} too small for degree {}",
                    coeffs.extents(),
                    basis.degree()
                ))
            })?;
        Ok(Self {
            degree: basis.degree(),
            step: basis.step().to_vec(),
            origin,
            nodes,
            coeffs,
        })
    }

    /// The field that is `value` everywhere (partition of unity).
    pub fn constant(value: T, basis: &BSplineBasis, nodes: &[usize], origin: Vec<f64>) -> Self {
        let pad = basis.pad();
        let extents = nodes.iter().map(|&n| n + 2 * pad).collect();
        Self {
            degree: basis.degree(),
            step: basis.step().to_vec(),
            origin,
            nodes: nodes.to_vec(),
            coeffs: CoeffTensor::filled(extents, value),
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn step(&self) -> &[f64] {
        &self.step
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn pad(&self) -> usize {
        self.degree / 2
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn coefficients(&self) -> &CoeffTensor<T> {
        &self.coeffs
    }

    pub fn coefficients_mut(&mut self) -> &mut CoeffTensor<T> {
        &mut self.coeffs
    }

    pub fn into_coefficients(self) -> CoeffTensor<T> {
        self.coeffs
    }

    pub fn basis(&self) -> BSplineBasis {
        BSplineBasis {
            degree: self.degree,
            step: self.step.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> SplineField<U> {
        SplineField {
            degree: self.degree,
            step: self.step.clone(),
            origin: self.origin.clone(),
            nodes: self.nodes.clone(),
            coeffs: self.coeffs.cast(),
        }
    }

    /// Grid coordinates of a physical point, or an out-of-domain error.
    pub(crate) fn grid_coords(&self, point: &[f64]) -> Result<[f64; 3]> {
        if point.len() != self.dim() {
            return Err(TbsError::InputValidation(format!(
                "point has {} coordinates, field is {}-D",
                point.len(),
                self.dim()
            )));
        }
        let mut u = [0.0; 3];
        for a in 0..self.dim() {
            let v = (point[a] - self.origin[a]) / self.step[a];
            let hi = (self.nodes[a] - 1) as f64;
            if !(v >= -DOMAIN_SLACK && v <= hi + DOMAIN_SLACK) {
                return Err(TbsError::OutOfDomain {
                    point: point.to_vec(),
                });
            }
            u[a] = v.clamp(0.0, hi);
        }
        Ok(u)
    }

    /// Evaluates the field or one partial derivative at grid coordinates `u`.
    /// `orders[a]` is the derivative order along axis a.
    pub(crate) fn eval_grid(&self, u: &[f64], orders: &[usize]) -> f64 {
        let d = self.dim();
        let n = self.degree;
        let pad = self.pad() as isize;
        let ext = self.coeffs.extents();
        let mut w = [[0.0f64; MAX_DEGREE + 1]; 3];
        let mut k0 = [0isize; 3];
        for a in 0..d {
            k0[a] = basis_weights(n, u[a], orders[a], &mut w[a]) + pad;
        }
        let data = self.coeffs.data();
        let range = |a: usize| -> (usize, usize) {
            let lo = (-k0[a]).max(0) as usize;
            let hi = ((ext[a] as isize - k0[a]).min(n as isize + 1)).max(0) as usize;
            (lo, hi)
        };
        match d {
            1 => {
                let (lo, hi) = range(0);
                (lo..hi)
                    .map(|i| w[0][i] * data[(k0[0] + i as isize) as usize].as_f64())
                    .sum()
            }
            2 => {
                let (lo0, hi0) = range(0);
                let (lo1, hi1) = range(1);
                let mut acc = 0.0;
                for i in lo0..hi0 {
                    let row = (k0[0] + i as isize) as usize * ext[1];
                    let mut s = 0.0;
                    for j in lo1..hi1 {
                        s += w[1][j] * data[row + (k0[1] + j as isize) as usize].as_f64();
                    }
                    acc += w[0][i] * s;
                }
                acc
            }
            _ => {
                let (lo0, hi0) = range(0);
                let (lo1, hi1) = range(1);
                let (lo2, hi2) = range(2);
                let mut acc = 0.0;
                for i in lo0..hi0 {
                    let mut s1 = 0.0;
                    for j in lo1..hi1 {
                        let row = ((k0[0] + i as isize) as usize * ext[1]
                            + (k0[1] + j as isize) as usize)
                            * ext[2];
                        let mut s2 = 0.0;
                        for l in lo2..hi2 {
                            s2 += w[2][l] * data[row + (k0[2] + l as isize) as usize].as_f64();
                        }
                        s1 += w[1][j] * s2;
                    }
                    acc += w[0][i] * s1;
                }
                acc
            }
        }
    }

    /// Field value at a physical point.
    pub fn eval(&self, point: &[f64]) -> Result<f64> {
        let u = self.grid_coords(point)?;
        Ok(self.eval_grid(&u[..self.dim()], &[0; 3][..self.dim()]))
    }

    /// Physical gradient at a point.
    pub fn gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        if self.degree == 0 {
            return Err(TbsError::Smoothness {
                degree: 0,
                order: 1,
            });
        }
        let u = self.grid_coords(point)?;
        let d = self.dim();
        Ok((0..d)
            .map(|a| {
                let mut orders = [0usize; 3];
                orders[a] = 1;
                self.eval_grid(&u[..d], &orders[..d]) / self.step[a]
            })
            .collect())
    }

    /// Values at every grid node: separable convolution with the sampled B-spline.
    pub fn sample_nodes(&self) -> CoeffTensor<f64> {
        let b = sampled_bspline(self.degree).expect("degree validated at construction");
        let m = self.degree / 2;
        let pad = self.pad();
        let mut extents: Vec<usize> = self.coeffs.extents().to_vec();
        let mut data: Vec<f64> = self.coeffs.data().iter().map(|v| v.as_f64()).collect();
        for axis in 0..extents.len() {
            let len = extents[axis];
            let out_len = self.nodes[axis];
            let outer: usize = extents[..axis].iter().product();
            let inner: usize = extents[axis + 1..].iter().product();
            let mut out = vec![0.0; outer * out_len * inner];
            out.par_chunks_mut(out_len * inner)
                .enumerate()
                .for_each(|(o, chunk)| {
                    let src = &data[o * len * inner..(o + 1) * len * inner];
                    for i in 0..out_len {
                        // Node i sits at padded index i + pad.
                        let c = i + pad;
                        for inn in 0..inner {
                            let mut s = 0.0;
                            for (t, &bt) in b.iter().enumerate() {
                                let k = c + t - m;
                                s += bt * src[k * inner + inn];
                            }
                            chunk[i * inner + inn] = s;
                        }
                    }
                });
            extents[axis] = out_len;
            data = out;
        }
        CoeffTensor::from_raw(extents, data)
    }

    /// Physical coordinates of node `idx`.
    pub fn node_position(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(a, &i)| self.origin[a] + i as f64 * self.step[a])
            .collect()
    }
}

impl SplineField<f64> {
    /// Interpolating spline of node samples (direct transform plus padding).
    pub fn interpolate(
        samples: &CoeffTensor,
        basis: &BSplineBasis,
        origin: Vec<f64>,
        ext: Extension,
    ) -> Result<Self> {
        let coeffs = interpolation_coefficients(samples, basis, ext)?;
        Self::from_coefficients(coeffs, basis, origin)
    }
}

/// Indirect B-spline transform: evaluates the spline at arbitrary points.
pub fn indirect_transform<T: Real>(field: &SplineField<T>, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    points.iter().map(|p| field.eval(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn trivial_values() {
        assert_eq!(eval_bspline(1, 0.0).unwrap(), 1.0);
        assert_eq!(eval_bspline(0, 0.2).unwrap(), 1.0);
        assert!(close(eval_bspline(3, 0.0).unwrap(), 2.0 / 3.0, 1e-15));
        assert!(close(eval_bspline(3, 1.0).unwrap(), 1.0 / 6.0, 1e-15));
        assert_eq!(eval_bspline(3, 2.0).unwrap(), 0.0);
        assert!(matches!(
            eval_bspline(6, 0.0),
            Err(TbsError::DegreeRange { degree: 6, .. })
        ));
    }

    #[test]
    fn derivative_examples() {
        assert!(close(eval_bspline_derivative(1, 0.5, 1).unwrap(), -1.0, 1e-15));
        assert!(close(eval_bspline_derivative(3, 0.0, 1).unwrap(), 0.0, 1e-15));
        assert!(close(
            eval_bspline_derivative(3, 0.5, 1).unwrap(),
            1.0 / 8.0 - 3.0 / 4.0,
            1e-15
        ));
        assert!(matches!(
            eval_bspline_derivative(2, 0.1, 3),
            Err(TbsError::Smoothness { degree: 2, order: 3 })
        ));
    }

    #[test]
    fn sampled_values() {
        assert_eq!(sampled_bspline(1).unwrap(), vec![1.0]);
        let b2 = sampled_bspline(2).unwrap();
        for (x, y) in b2.iter().zip([0.125, 0.75, 0.125]) {
            assert!(close(*x, y, 1e-15));
        }
        let b3 = sampled_bspline(3).unwrap();
        for (x, y) in b3.iter().zip([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]) {
            assert!(close(*x, y, 1e-15));
        }
        for n in 0..=5 {
            let s: f64 = sampled_bspline(n).unwrap().iter().sum();
            assert!(close(s, 1.0, 1e-14), "n={n} sum={s}");
        }
    }

    #[test]
    fn pole_values() {
        let p3 = compute_poles(3).unwrap();
        assert_eq!(p3.poles.len(), 1);
        assert!(close(p3.poles[0], 3f64.sqrt() - 2.0, 1e-14));
        let p2 = compute_poles(2).unwrap();
        assert!(close(p2.poles[0], 2.0 * 2f64.sqrt() - 3.0, 1e-14));
        let p1 = compute_poles(1).unwrap();
        assert!(p1.poles.is_empty());
        assert_eq!(p1.gain, 1.0);
        for n in 2..=5 {
            let p = compute_poles(n).unwrap();
            assert_eq!(p.poles.len(), n / 2);
            let b = sampled_bspline(n).unwrap();
            let m = (n / 2) as i32;
            for &z in &p.poles {
                assert!(z > -1.0 && z < 0.0);
                let v: f64 = b
                    .iter()
                    .enumerate()
                    .map(|(i, bk)| bk * z.powi(i as i32 - m))
                    .sum();
                assert!(v.abs() < 1e-12, "n={n} residual {v}");
            }
        }
    }

    #[test]
    fn constants_and_linear_are_identity_filters() {
        for n in 0..=5 {
            let basis = BSplineBasis::unit(n, 1).unwrap();
            let s = CoeffTensor::filled(vec![12], 5.0);
            for ext in [Extension::Mirror, Extension::Replicate] {
                let c = direct_transform(&s, &basis, ext).unwrap();
                // Truncated initialization (1e-12 relative) bounds the edge error.
                assert!(c.data().iter().all(|v| close(*v, 5.0, 1e-10)), "n={n} {ext:?}");
            }
        }
        let basis = BSplineBasis::unit(1, 1).unwrap();
        let s = CoeffTensor::from_vec(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(direct_transform(&s, &basis, Extension::Mirror).unwrap(), s);
    }

    #[test]
    fn mirror_index_reflects() {
        let v: Vec<usize> = (-3..8).map(|k| mirror_index(k, 4)).collect();
        assert_eq!(v, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
    }

    #[test]
    fn out_of_domain_points_rejected() {
        let basis = BSplineBasis::unit(3, 1).unwrap();
        let f = SplineField::<f64>::constant(3.0, &basis, &[10], vec![0.0]);
        assert!(close(f.eval(&[4.3]).unwrap(), 3.0, 1e-14));
        assert!(matches!(f.eval(&[9.5]), Err(TbsError::OutOfDomain { .. })));
        assert!(f.eval(&[-0.01]).is_err());
    }
}
