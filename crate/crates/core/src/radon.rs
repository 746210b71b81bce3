//! Parallel-beam geometry: image grids, sinograms, the forward projector and
//! the filtered-backprojection baseline.
//!
//! Coordinates: pixel `(row, col)` of an `n x n` grid has its center at
//! `x = (col - c) * pitch`, `y = (c - row) * pitch` with `c = (n - 1) / 2`.
//! Detector bin `k` sits at offset `(k - c) * pitch` along `(cos t, sin t)`
//! and its ray runs along `(-sin t, cos t)`, so at 0 degrees each bin
//! integrates one image column and at 90 degrees one image row (bottom row
//! first).

use std::f64::consts::PI;
use std::fmt;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel pitch used throughout the experiments.
pub const DEFAULT_PITCH_MM: f64 = 5.0;

/// Intensity domain of an [`ImageGrid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Values in `[0, 1]`.
    Normalized,
    /// Hounsfield units.
    Hounsfield,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Normalized => "normalized",
            Domain::Hounsfield => "hounsfield",
        }
    }
}

/// Square image with pixel pitch and intensity-domain tag.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    n: usize,
    pitch_mm: f64,
    values: Vec<f64>,
    domain: Domain,
}

impl ImageGrid {
    pub fn new(n: usize, pitch_mm: f64, values: Vec<f64>, domain: Domain) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("image side must be at least 2, got {n}")));
        }
        if !(pitch_mm > 0.0 && pitch_mm.is_finite()) {
            return Err(Error::invalid(format!("pixel pitch must be positive, got {pitch_mm}")));
        }
        if values.len() != n * n {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![n, n],
                rhs: vec![values.len()],
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image value {v}")));
        }
        if domain == Domain::Normalized {
            if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!("normalized image value {v} outside [0, 1]")));
            }
        }
        Ok(ImageGrid {
            n,
            pitch_mm,
            values,
            domain,
        })
    }

    /// Builds a normalized image, clamping every value into `[0, 1]`.
    pub fn normalized_clamped(n: usize, pitch_mm: f64, mut values: Vec<f64>) -> Result<Self> {
        for v in values.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(n, pitch_mm, values, Domain::Normalized)
    }

    pub fn filled(n: usize, pitch_mm: f64, value: f64, domain: Domain) -> Result<Self> {
        Self::new(n, pitch_mm, vec![value; n * n], domain)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pitch_mm(&self) -> f64 {
        self.pitch_mm
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Bilinear interpolant at continuous `(row, col)` pixel coordinates,
    /// zero outside the grid.
    pub(crate) fn bilinear(&self, row: f64, col: f64) -> f64 {
        let n = self.n as isize;
        let (r0, c0) = (row.floor(), col.floor());
        let (fr, fc) = (row - r0, col - c0);
        let (r0, c0) = (r0 as isize, c0 as isize);
        let at = |r: isize, c: isize| -> f64 {
            if r < 0 || c < 0 || r >= n || c >= n {
                0.0
            } else {
                self.values[(r * n + c) as usize]
            }
        };
        let top = (1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1);
        let bottom = (1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1);
        (1.0 - fr) * top + fr * bottom
    }
}

/// Projection angle preset or explicit list, in degrees.
#[derive(Clone, Debug, PartialEq)]
pub enum AngleSet {
    /// 0, 45, 90 and 135 degrees.
    FourView,
    /// 0 and 90 degrees.
    TwoView,
    Explicit(Vec<f64>),
}

impl AngleSet {
    pub fn explicit(degrees: Vec<f64>) -> Result<Self> {
        if degrees.is_empty() {
            return Err(Error::invalid("angle list is empty"));
        }
        if let Some(a) = degrees.iter().find(|a| !(0.0..180.0).contains(*a)) {
            return Err(Error::invalid(format!("angle {a} outside [0, 180)")));
        }
        if degrees.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("angles must be strictly increasing"));
        }
        Ok(AngleSet::Explicit(degrees))
    }

    /// `count` angles evenly spaced over `[0, 180)`.
    pub fn uniform(count: usize) -> Result<Self> {
        Self::explicit((0..count).map(|i| 180.0 * i as f64 / count as f64).collect())
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "four_view" => Ok(AngleSet::FourView),
            "two_view" => Ok(AngleSet::TwoView),
            other => other
                .split(',')
                .map(|a| a.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| {
                    Error::invalid(format!(
                        "unknown angle set `{other}` (expected four_view, two_view or degrees like 0,60,120)"
                    ))
                })
                .and_then(Self::explicit),
        }
    }

    pub fn degrees(&self) -> Vec<f64> {
        match self {
            AngleSet::FourView => vec![0.0, 45.0, 90.0, 135.0],
            AngleSet::TwoView => vec![0.0, 90.0],
            AngleSet::Explicit(d) => d.clone(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AngleSet::FourView => 4,
            AngleSet::TwoView => 2,
            AngleSet::Explicit(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for AngleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AngleSet::FourView => f.write_str("four_view"),
            AngleSet::TwoView => f.write_str("two_view"),
            AngleSet::Explicit(d) => {
                let parts: Vec<String> = d.iter().map(|a| a.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

/// Projections-by-detector matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    angles_deg: Vec<f64>,
    bins: usize,
    pitch_mm: f64,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn new(angles_deg: Vec<f64>, bins: usize, pitch_mm: f64, values: Vec<f64>) -> Result<Self> {
        if angles_deg.is_empty() {
            return Err(Error::invalid("sinogram has no angles"));
        }
        if bins == 0 {
            return Err(Error::invalid("sinogram has no detector bins"));
        }
        if !(pitch_mm > 0.0 && pitch_mm.is_finite()) {
            return Err(Error::invalid(format!("detector pitch must be positive, got {pitch_mm}")));
        }
        if values.len() != angles_deg.len() * bins {
            return Err(Error::Shape {
                op: "sinogram",
                lhs: vec![angles_deg.len(), bins],
                rhs: vec![values.len()],
            });
        }
        if values.iter().chain(&angles_deg).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sinogram".into()));
        }
        Ok(Sinogram {
            angles_deg,
            bins,
            pitch_mm,
            values,
        })
    }

    pub fn angles_deg(&self) -> &[f64] {
        &self.angles_deg
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn pitch_mm(&self) -> f64 {
        self.pitch_mm
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, angle_index: usize) -> &[f64] {
        &self.values[angle_index * self.bins..(angle_index + 1) * self.bins]
    }
}

/// Cosine and sine of an angle in degrees, exact at multiples of 90.
pub(crate) fn cos_sin_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    match r {
        x if x == 0.0 => (1.0, 0.0),
        x if x == 90.0 => (0.0, 1.0),
        x if x == 180.0 => (-1.0, 0.0),
        x if x == 270.0 => (0.0, -1.0),
        _ => {
            let t = deg.to_radians();
            (t.cos(), t.sin())
        }
    }
}

/// Ray parameters where `coord(tau) = offset + slope * tau` crosses an
/// integer in `[lo, hi]`, restricted to `[t0, t1]`.
fn crossings(offset: f64, slope: f64, lo: f64, hi: f64, t0: f64, t1: f64, out: &mut Vec<f64>) {
    if slope == 0.0 {
        return;
    }
    let (a, b) = (offset + slope * t0, offset + slope * t1);
    let (cmin, cmax) = (a.min(b).max(lo), a.max(b).min(hi));
    let mut m = cmin.ceil();
    while m <= cmax {
        out.push((m - offset) / slope);
        m += 1.0;
    }
}

/// Parameter interval on which `offset + slope * tau` lies in `[lo, hi]`.
fn support(offset: f64, slope: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    if slope == 0.0 {
        return (offset > lo && offset < hi).then_some((f64::NEG_INFINITY, f64::INFINITY));
    }
    let (a, b) = ((lo - offset) / slope, (hi - offset) / slope);
    Some((a.min(b), a.max(b)))
}

/// Line integral, in pixel units, of the bilinear interpolant of `img` along
/// `col(tau) = u0 - sin * tau`, `row(tau) = r0 - cos * tau`.
///
/// The ray is stepped from grid line to grid line along the dominant axis and
/// split wherever it crosses a grid line of the other axis. On every piece the
/// interpolant is a quadratic in `tau`, which Simpson's rule integrates
/// exactly.
fn ray_integral(img: &ImageGrid, u0: f64, r0: f64, cos: f64, sin: f64, knots: &mut Vec<f64>) -> f64 {
    let hi = img.n as f64;
    let Some((ua, ub)) = support(u0, -sin, -1.0, hi) else {
        return 0.0;
    };
    let Some((ra, rb)) = support(r0, -cos, -1.0, hi) else {
        return 0.0;
    };
    let (t0, t1) = (ua.max(ra), ub.min(rb));
    if !(t0 < t1) || !t0.is_finite() || !t1.is_finite() {
        return 0.0;
    }
    knots.clear();
    knots.push(t0);
    crossings(r0, -cos, -1.0, hi, t0, t1, knots);
    crossings(u0, -sin, -1.0, hi, t0, t1, knots);
    knots.push(t1);
    knots.sort_by(f64::total_cmp);

    let eval = |t: f64| img.bilinear(r0 - cos * t, u0 - sin * t);
    let mut total = 0.0;
    let mut left = eval(knots[0]);
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        let right = eval(b);
        if b > a {
            let mid = eval(0.5 * (a + b));
            total += (b - a) / 6.0 * (left + 4.0 * mid + right);
        }
        left = right;
    }
    total
}

/// Parallel-beam forward projection with one detector bin per image pixel.
pub fn forward_project(img: &ImageGrid, angles: &AngleSet) -> Result<Sinogram> {
    let degrees = angles.degrees();
    if degrees.is_empty() {
        return Err(Error::invalid("forward_project: empty angle list"));
    }
    let n = img.n;
    let center = (n as f64 - 1.0) / 2.0;
    let mut values = Vec::with_capacity(degrees.len() * n);
    let mut knots = Vec::with_capacity(4 * n + 4);
    for &deg in &degrees {
        let (cos, sin) = cos_sin_deg(deg);
        for k in 0..n {
            let sigma = k as f64 - center;
            let u0 = sigma * cos + center;
            let r0 = center - sigma * sin;
            values.push(ray_integral(img, u0, r0, cos, sin, &mut knots) * img.pitch_mm);
        }
    }
    Sinogram::new(degrees, n, img.pitch_mm, values)
}

/// Discrete Ram-Lak kernel for detector spacing `pitch`, laid out circularly
/// over `len` taps.
fn ramp_kernel(len: usize, pitch: f64) -> Vec<f64> {
    let mut h = vec![0.0; len];
    h[0] = 1.0 / (4.0 * pitch * pitch);
    for k in 1..len / 2 {
        if k % 2 == 1 {
            let v = -1.0 / (PI * PI * (k * k) as f64 * pitch * pitch);
            h[k] = v;
            h[len - k] = v;
        }
    }
    h
}

/// Ramp-filters every projection row, zero padded to the next power of two
/// that is at least twice the detector count.
pub fn ramp_filter(sino: &Sinogram) -> Vec<f64> {
    let bins = sino.bins;
    let len = (2 * bins).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);

    let mut kernel: Vec<Complex<f64>> = ramp_kernel(len, sino.pitch_mm)
        .into_iter()
        .map(|v| Complex::new(v, 0.0))
        .collect();
    fwd.process(&mut kernel);

    let scale = sino.pitch_mm / len as f64;
    let mut out = Vec::with_capacity(sino.values.len());
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for a in 0..sino.angles_deg.len() {
        buf.fill(Complex::new(0.0, 0.0));
        for (b, &v) in buf.iter_mut().zip(sino.row(a)) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&kernel) {
            *b *= k;
        }
        inv.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.re * scale));
    }
    out
}

/// Filtered backprojection onto an `bins x bins` grid at the detector pitch.
///
/// Normalized-domain output is clamped into `[0, 1]`.
pub fn fbp_reconstruct(sino: &Sinogram, domain: Domain) -> Result<ImageGrid> {
    if sino.angles_deg.is_empty() || sino.values.is_empty() {
        return Err(Error::invalid("fbp_reconstruct: empty sinogram"));
    }
    let n = sino.bins;
    let filtered = ramp_filter(sino);
    let center = (n as f64 - 1.0) / 2.0;
    let trig: Vec<(f64, f64)> = sino.angles_deg.iter().map(|&d| cos_sin_deg(d)).collect();
    let scale = PI / sino.angles_deg.len() as f64;
    let mut values = vec![0.0; n * n];
    for row in 0..n {
        let y = center - row as f64;
        for col in 0..n {
            let x = col as f64 - center;
            let mut acc = 0.0;
            for (a, &(cos, sin)) in trig.iter().enumerate() {
                let pos = x * cos + y * sin + center;
                let k0 = pos.floor();
                let frac = pos - k0;
                let k0 = k0 as isize;
                let q = &filtered[a * n..(a + 1) * n];
                let at = |k: isize| if k < 0 || k >= n as isize { 0.0 } else { q[k as usize] };
                acc += (1.0 - frac) * at(k0) + frac * at(k0 + 1);
            }
            values[row * n + col] = acc * scale;
        }
    }
    match domain {
        Domain::Normalized => ImageGrid::normalized_clamped(n, sino.pitch_mm, values),
        Domain::Hounsfield => ImageGrid::new(n, sino.pitch_mm, values, Domain::Hounsfield),
    }
}

/// Scales a sinogram by `1 / (bins * pitch)` and flattens it angle-major into
/// a network input vector.
pub fn normalize_sinogram(sino: &Sinogram) -> Tensor {
    let scale = 1.0 / (sino.bins as f64 * sino.pitch_mm);
    let data: Vec<f64> = sino.values.iter().map(|v| v * scale).collect();
    Tensor::new(vec![data.len()], data).expect("sinogram is never empty")
}

/// Number of network inputs produced by `angles` on an `n`-bin detector.
pub fn input_len(angles: &AngleSet, n: usize) -> usize {
    angles.len() * n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(n: usize, pitch: f64) -> ImageGrid {
        ImageGrid::filled(n, pitch, 1.0, Domain::Normalized).unwrap()
    }

    #[test]
    fn axis_aligned_column_sums() {
        let sino = forward_project(&ones(4, 1.0), &AngleSet::explicit(vec![0.0]).unwrap()).unwrap();
        for v in sino.values() {
            assert!((v - 4.0).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn image_validation() {
        assert!(ImageGrid::new(1, 1.0, vec![0.0], Domain::Normalized).is_err());
        assert!(ImageGrid::new(2, 0.0, vec![0.0; 4], Domain::Normalized).is_err());
        assert!(ImageGrid::new(2, 1.0, vec![1.5; 4], Domain::Normalized).is_err());
        assert!(ImageGrid::new(2, 1.0, vec![1.5; 4], Domain::Hounsfield).is_ok());
    }

    #[test]
    fn angle_sets() {
        assert_eq!(AngleSet::FourView.degrees(), vec![0.0, 45.0, 90.0, 135.0]);
        assert_eq!(AngleSet::parse("two_view").unwrap().degrees(), vec![0.0, 90.0]);
        assert!(AngleSet::parse("three_view").is_err());
        assert_eq!(AngleSet::parse("0, 60,120").unwrap().degrees(), vec![0.0, 60.0, 120.0]);
        assert!(AngleSet::parse("0,200").is_err());
        assert!(AngleSet::explicit(vec![]).is_err());
        assert!(AngleSet::explicit(vec![10.0, 5.0]).is_err());
        assert!(AngleSet::explicit(vec![0.0, 180.0]).is_err());
        assert_eq!(AngleSet::uniform(4).unwrap().degrees(), vec![0.0, 45.0, 90.0, 135.0]);
    }

    #[test]
    fn normalized_input_of_full_width_object() {
        let img = ones(64, DEFAULT_PITCH_MM);
        let sino = forward_project(&img, &AngleSet::explicit(vec![0.0]).unwrap()).unwrap();
        let x = normalize_sinogram(&sino);
        assert!(x.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert_eq!(input_len(&AngleSet::FourView, 64), 256);
        assert_eq!(input_len(&AngleSet::TwoView, 64), 128);
        let four = forward_project(&img, &AngleSet::FourView).unwrap();
        assert_eq!(normalize_sinogram(&four).len(), 256);
    }

    #[test]
    fn zero_sinogram() {
        let sino = Sinogram::new(vec![0.0, 90.0], 8, 1.0, vec![0.0; 16]).unwrap();
        assert!(normalize_sinogram(&sino).data().iter().all(|&v| v == 0.0));
        let img = fbp_reconstruct(&sino, Domain::Normalized).unwrap();
        assert!(img.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sinogram_validation() {
        assert!(Sinogram::new(vec![], 4, 1.0, vec![]).is_err());
        assert!(Sinogram::new(vec![0.0], 4, 1.0, vec![0.0; 3]).is_err());
    }

    #[test]
    fn ramp_kernel_is_symmetric() {
        let h = ramp_kernel(16, 2.0);
        for k in 1..8 {
            assert_eq!(h[k], h[16 - k]);
        }
        assert_eq!(h[2], 0.0);
        assert!((h[0] - 1.0 / 16.0).abs() < 1e-15);
    }
}
