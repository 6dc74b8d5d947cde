//! Sampled transverse fields and angular-spectrum propagation.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// How `propagate` treats light that would leave the computational window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BandLimit {
    /// Plain unitary angular-spectrum step; periodic wrap-around is possible.
    #[default]
    Off,
    /// Drop plane-wave components whose lateral walk-off over the step
    /// exceeds half the window. The removed power is accumulated in
    /// [`FieldGrid::escaped_power`].
    WindowEscape,
}

/// Complex field on a uniform square transverse grid.
///
/// Sample `(i, j)` sits at `x = (j - n/2 + 1/2)·pitch`, `y = (i - n/2 + 1/2)·pitch`,
/// so the optical axis falls on the corner shared by the four central pixels.
/// An optional spherical phase `exp(-i k r² / 2R)` (converging for `R > 0`)
/// is carried analytically in `curvature` rather than in the samples.
#[derive(Debug, Clone)]
pub struct FieldGrid {
    pub size: usize,
    pub pitch: f64,
    pub wavelength: f64,
    /// Distance travelled from the source plane (m).
    pub z: f64,
    pub samples: Vec<Complex64>,
    pub curvature: Option<f64>,
    /// Charge of an on-axis phase singularity in the samples, if any.
    pub vortex_charge: i32,
    /// Power (W) removed by [`BandLimit::WindowEscape`] steps so far.
    pub escaped_power: f64,
}

impl FieldGrid {
    pub fn new(size: usize, pitch: f64, wavelength: f64, samples: Vec<Complex64>) -> Result<Self> {
        if size < 2 || !size.is_multiple_of(2) {
            return Err(Error::config(format!("grid size must be even and >= 2, got {size}")));
        }
        if samples.len() != size * size {
            return Err(Error::config(format!(
                "expected {} samples for a {size}x{size} grid, got {}",
                size * size,
                samples.len()
            )));
        }
        if !(pitch > 0.0 && pitch.is_finite()) || !(wavelength > 0.0 && wavelength.is_finite()) {
            return Err(Error::config("grid pitch and wavelength must be positive"));
        }
        Ok(FieldGrid {
            size,
            pitch,
            wavelength,
            z: 0.0,
            samples,
            curvature: None,
            vortex_charge: 0,
            escaped_power: 0.0,
        })
    }

    /// Builds a grid by evaluating `f(x, y)` at every pixel center.
    pub fn from_fn(
        size: usize,
        pitch: f64,
        wavelength: f64,
        f: impl Fn(f64, f64) -> Complex64 + Sync,
    ) -> Result<Self> {
        let mut samples = vec![Complex64::new(0.0, 0.0); size * size];
        samples.par_chunks_mut(size).enumerate().for_each(|(i, row)| {
            let y = coord(i, size, pitch);
            for (j, v) in row.iter_mut().enumerate() {
                *v = f(coord(j, size, pitch), y);
            }
        });
        FieldGrid::new(size, pitch, wavelength, samples)
    }

    pub fn extent(&self) -> f64 {
        self.size as f64 * self.pitch
    }

    pub fn x(&self, j: usize) -> f64 {
        coord(j, self.size, self.pitch)
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Σ|E|²·pitch² (W when samples are in √(W/m²)).
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|c| c.norm_sqr()).sum::<f64>() * self.pitch * self.pitch
    }

    pub fn intensity(&self) -> Vec<f64> {
        self.samples.iter().map(|c| c.norm_sqr()).collect()
    }

    /// Rescales the samples so that the grid carries `power` watts.
    pub fn normalize_power(&mut self, power: f64) {
        let p = self.power();
        if p > 0.0 {
            let s = (power / p).sqrt();
            self.samples.iter_mut().for_each(|c| *c *= s);
        }
    }

    /// Largest wrapped phase step between adjacent, significantly lit
    /// pixels, ignoring the disk where a declared on-axis vortex is
    /// unresolved by construction.
    pub fn max_phase_step(&self) -> f64 {
        let n = self.size;
        let peak = self.samples.iter().map(|c| c.norm_sqr()).fold(0.0, f64::max);
        if peak == 0.0 {
            return 0.0;
        }
        let gate = 1e-4 * peak;
        let core = if self.vortex_charge != 0 {
            self.vortex_charge.unsigned_abs() as f64 * self.pitch / (0.9 * PI) + 2.0 * self.pitch
        } else {
            0.0
        };
        (0..n)
            .into_par_iter()
            .map(|i| {
                let y = self.x(i);
                let mut worst = 0.0_f64;
                for j in 0..n {
                    let a = self.samples[i * n + j];
                    if a.norm_sqr() < gate {
                        continue;
                    }
                    let x = self.x(j);
                    if (x * x + y * y).sqrt() < core {
                        continue;
                    }
                    let mut check = |b: Complex64| {
                        if b.norm_sqr() >= gate {
                            worst = worst.max((b * a.conj()).arg().abs());
                        }
                    };
                    if j + 1 < n {
                        check(self.samples[i * n + j + 1]);
                    }
                    if i + 1 < n {
                        check(self.samples[(i + 1) * n + j]);
                    }
                }
                worst
            })
            .reduce(|| 0.0, f64::max)
    }
}

pub(crate) fn coord(index: usize, size: usize, pitch: f64) -> f64 {
    (index as f64 - size as f64 / 2.0 + 0.5) * pitch
}

/// Wrapped steps at or beyond this fraction of π mean the samples no longer
/// resolve the phase.
pub const ALIASING_THRESHOLD: f64 = 0.9 * PI;

/// Propagates `input` by `distance` metres with the angular-spectrum method.
///
/// A factored spherical phase of radius `R` is handled with the Fresnel
/// scaling identity: the residual field is propagated over `d/M` on a grid
/// rescaled by `M = 1 - d/R`, and the new curvature is `R - d`.
pub fn propagate(input: &FieldGrid, distance: f64, band_limit: BandLimit) -> Result<FieldGrid> {
    if !distance.is_finite() {
        return Err(Error::domain("propagation distance must be finite"));
    }
    let step = input.max_phase_step();
    if step >= ALIASING_THRESHOLD {
        return Err(Error::Aliasing(format!(
            "max local phase step {:.3} rad per pixel (limit {:.3}); refine the grid pitch",
            step, ALIASING_THRESHOLD
        )));
    }
    let (magnification, equivalent, curvature) = match input.curvature {
        None => (1.0, distance, None),
        Some(r) => {
            let m = 1.0 - distance / r;
            if m.abs() < 1e-9 {
                return Err(Error::numerical(
                    "requested plane is the focus of the factored curvature; Fresnel scaling is singular there",
                ));
            }
            let rest = r - distance;
            (m, distance / m, if rest.abs() > 0.0 { Some(rest) } else { None })
        }
    };

    let n = input.size;
    let mut field = input.samples.clone();
    let fft = Fft2::new(n);
    fft.forward(&mut field);

    let k = input.wavenumber();
    let df = 1.0 / (n as f64 * input.pitch);
    let f_limit = match band_limit {
        BandLimit::Off => f64::INFINITY,
        BandLimit::WindowEscape => {
            let half = input.extent() / 2.0;
            let walk = (input.wavelength * equivalent).abs();
            if walk > 0.0 { half / walk } else { f64::INFINITY }
        }
    };
    let spectral_norm = input.pitch * input.pitch / (n * n) as f64;
    // per-row partial sums, reduced in order so the total is bitwise stable
    let removed_rows: Vec<f64> = field
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| {
            let fy = freq(i, n) * df;
            let mut lost = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                let fx = freq(j, n) * df;
                if fx.abs() > f_limit || fy.abs() > f_limit {
                    lost += v.norm_sqr();
                    *v = Complex64::new(0.0, 0.0);
                    continue;
                }
                let kt2 = (2.0 * PI) * (2.0 * PI) * (fx * fx + fy * fy);
                let kz2 = k * k - kt2;
                let h = if kz2 >= 0.0 {
                    Complex64::from_polar(1.0, kz2.sqrt() * equivalent)
                } else {
                    Complex64::new((-(-kz2).sqrt() * equivalent.abs()).exp(), 0.0)
                };
                *v *= h;
            }
            lost
        })
        .collect();
    let removed = removed_rows.iter().sum::<f64>() * spectral_norm;
    fft.inverse(&mut field);

    let mut pitch = input.pitch;
    if magnification != 1.0 {
        let amp = 1.0 / magnification.abs();
        field.iter_mut().for_each(|c| *c *= amp);
        if magnification < 0.0 {
            // past the focus the image is inverted
            field.reverse();
        }
        pitch *= magnification.abs();
    }

    Ok(FieldGrid {
        size: n,
        pitch,
        wavelength: input.wavelength,
        z: input.z + distance,
        samples: field,
        curvature,
        vortex_charge: input.vortex_charge,
        escaped_power: input.escaped_power + removed,
    })
}

fn freq(index: usize, n: usize) -> f64 {
    if index < n / 2 {
        index as f64
    } else {
        index as f64 - n as f64
    }
}

/// Square 2-D FFT over row-major data.
pub(crate) struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub(crate) fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub(crate) fn forward(&self, data: &mut [Complex64]) {
        self.pass(data, &self.forward);
    }

    /// Inverse transform including the 1/n² normalization.
    pub(crate) fn inverse(&self, data: &mut [Complex64]) {
        self.pass(data, &self.inverse);
        let s = 1.0 / (self.n * self.n) as f64;
        data.par_iter_mut().for_each(|c| *c *= s);
    }

    fn pass(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        data.par_chunks_mut(n).for_each(|row| plan.process(row));
        transpose(data, n);
        data.par_chunks_mut(n).for_each(|row| plan.process(row));
        transpose(data, n);
    }
}

fn transpose(data: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            data.swap(i * n + j, j * n + i);
        }
    }
}
