//! Dormand–Prince 5(4) stepper with the 4th-order continuous extension, plus
//! root location of scalar event functions on the dense output.

use crate::error::{PwsError, Result};

pub(crate) type Rhs<'a> = dyn Fn(&[f64], &mut [f64]) -> Result<()> + 'a;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

#[derive(Debug, Clone, Copy)]
pub(crate) struct StepSettings {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
}

/// One accepted step together with its interpolant.
#[derive(Debug, Clone)]
pub(crate) struct StepRecord {
    pub t0: f64,
    pub h: f64,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    rcont: [Vec<f64>; 4],
}

impl StepRecord {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    /// Dense output at `t` in `[t0, t0 + h]`.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        if t >= self.t1() {
            return self.y1.clone();
        }
        if t <= self.t0 {
            return self.y0.clone();
        }
        let theta = (t - self.t0) / self.h;
        let theta1 = 1.0 - theta;
        let [r2, r3, r4, r5] = &self.rcont;
        (0..self.y0.len())
            .map(|i| {
                self.y0[i] + theta * (r2[i] + theta1 * (r3[i] + theta * (r4[i] + theta1 * r5[i])))
            })
            .collect()
    }
}

pub(crate) struct Stepper<'a> {
    rhs: &'a Rhs<'a>,
    settings: StepSettings,
    pub t: f64,
    pub y: Vec<f64>,
    k1: Vec<f64>,
    h: f64,
}

impl<'a> Stepper<'a> {
    pub fn new(rhs: &'a Rhs<'a>, t0: f64, y0: Vec<f64>, settings: StepSettings) -> Result<Self> {
        let mut k1 = vec![0.0; y0.len()];
        rhs(&y0, &mut k1)?;
        let mut stepper = Stepper {
            rhs,
            settings,
            t: t0,
            y: y0,
            k1,
            h: 0.0,
        };
        stepper.h = stepper.initial_step()?;
        Ok(stepper)
    }

    fn scale(&self, a: &[f64], b: &[f64], i: usize) -> f64 {
        self.settings.abs_tol + self.settings.rel_tol * a[i].abs().max(b[i].abs())
    }

    fn initial_step(&self) -> Result<f64> {
        let n = self.y.len() as f64;
        let sk: Vec<f64> = (0..self.y.len())
            .map(|i| self.settings.abs_tol + self.settings.rel_tol * self.y[i].abs())
            .collect();
        let wnorm =
            |v: &[f64]| (v.iter().zip(&sk).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n).sqrt();
        let d0 = wnorm(&self.y);
        let d1 = wnorm(&self.k1);
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        // The ratio heuristic collapses for states that are tiny but nonzero.
        h0 = h0.max(1e-8).min(self.settings.max_step);
        let y1: Vec<f64> = self
            .y
            .iter()
            .zip(&self.k1)
            .map(|(y, k)| y + h0 * k)
            .collect();
        let mut f1 = vec![0.0; y1.len()];
        (self.rhs)(&y1, &mut f1)?;
        let diff: Vec<f64> = f1.iter().zip(&self.k1).map(|(a, b)| a - b).collect();
        let d2 = wnorm(&diff) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        Ok((100.0 * h0).min(h1).min(self.settings.max_step))
    }

    /// Replaces the current state (after a projection) and refreshes the
    /// first stage.
    pub fn reset_state(&mut self, y: Vec<f64>) -> Result<()> {
        (self.rhs)(&y, &mut self.k1)?;
        self.y = y;
        Ok(())
    }

    /// Takes one accepted step that does not pass `t_limit`.
    pub fn step(&mut self, t_limit: f64) -> Result<StepRecord> {
        let n = self.y.len();
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut k5 = vec![0.0; n];
        let mut k6 = vec![0.0; n];
        let mut k7 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let mut y1 = vec![0.0; n];
        let y0 = &self.y;
        let k1 = &self.k1;
        let rhs = self.rhs;
        loop {
            let remaining = t_limit - self.t;
            let mut h = self.h.min(self.settings.max_step);
            let last = h >= remaining;
            if last {
                h = remaining;
            }
            if h <= 1e-14 * self.t.abs().max(1.0) && !last {
                return Err(PwsError::StepUnderflow {
                    t: self.t,
                    x: y0.clone(),
                });
            }
            for i in 0..n {
                tmp[i] = y0[i] + h * A21 * k1[i];
            }
            rhs(&tmp, &mut k2)?;
            for i in 0..n {
                tmp[i] = y0[i] + h * (A31 * k1[i] + A32 * k2[i]);
            }
            rhs(&tmp, &mut k3)?;
            for i in 0..n {
                tmp[i] = y0[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            rhs(&tmp, &mut k4)?;
            for i in 0..n {
                tmp[i] = y0[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            rhs(&tmp, &mut k5)?;
            for i in 0..n {
                tmp[i] = y0[i]
                    + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            rhs(&tmp, &mut k6)?;
            for i in 0..n {
                y1[i] = y0[i]
                    + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            rhs(&y1, &mut k7)?;

            let mut err = 0.0;
            for i in 0..n {
                let e = h
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                err += (e / self.scale(y0, &y1, i)).powi(2);
            }
            let err = (err / n as f64).sqrt();
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            if err <= 1.0 || h <= 1e-14 * self.t.abs().max(1.0) {
                if err > 1.0 {
                    return Err(PwsError::StepUnderflow {
                        t: self.t,
                        x: y0.clone(),
                    });
                }
                let mut r2 = vec![0.0; n];
                let mut r3 = vec![0.0; n];
                let mut r4 = vec![0.0; n];
                let mut r5 = vec![0.0; n];
                for i in 0..n {
                    let ydiff = y1[i] - y0[i];
                    let bspl = h * k1[i] - ydiff;
                    r2[i] = ydiff;
                    r3[i] = bspl;
                    r4[i] = ydiff - h * k7[i] - bspl;
                    r5[i] = h
                        * (D1 * k1[i]
                            + D3 * k3[i]
                            + D4 * k4[i]
                            + D5 * k5[i]
                            + D6 * k6[i]
                            + D7 * k7[i]);
                }
                let record = StepRecord {
                    t0: self.t,
                    h,
                    y0: y0.clone(),
                    y1: y1.clone(),
                    rcont: [r2, r3, r4, r5],
                };
                self.t = if last { t_limit } else { self.t + h };
                self.y = y1;
                self.k1 = k7;
                // A clipped final step says nothing about the natural step size.
                if !last || factor < 1.0 {
                    self.h = h * factor;
                }
                return Ok(record);
            }
            self.h = h * factor.min(1.0);
        }
    }
}

/// Locates a zero of `g` along the dense output of `step` between `ta` and
/// `tb` where `g` changes sign. Illinois-modified regula falsi, falling back
/// to bisection, until the bracket is narrower than `time_tol`.
///
/// Returns the bracket end with the smaller `|g|`, its state and `g` value.
pub(crate) fn locate_root(
    step: &StepRecord,
    g: &dyn Fn(&[f64]) -> Result<f64>,
    (mut ta, mut ga): (f64, f64),
    (mut tb, mut gb): (f64, f64),
    time_tol: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    debug_assert!(ga * gb <= 0.0);
    let mut side = 0i8;
    let mut iterations = 0;
    while tb - ta > time_tol && ga != 0.0 && gb != 0.0 {
        iterations += 1;
        let mut tc = (ta * gb - tb * ga) / (gb - ga);
        let width = tb - ta;
        // Keep the trial point away from the bracket ends, and bisect every
        // few iterations so slow one-sided convergence cannot stall.
        if !tc.is_finite()
            || iterations % 4 == 0
            || tc <= ta + 0.01 * width
            || tc >= tb - 0.01 * width
        {
            tc = 0.5 * (ta + tb);
        }
        let yc = step.eval(tc);
        let gc = g(&yc)?;
        if gc == 0.0 {
            return Ok((tc, yc, 0.0));
        }
        if gc.signum() == ga.signum() {
            ta = tc;
            ga = gc;
            if side == -1 {
                gb *= 0.5;
            }
            side = -1;
        } else {
            tb = tc;
            gb = gc;
            if side == 1 {
                ga *= 0.5;
            }
            side = 1;
        }
        if iterations > 200 {
            break;
        }
    }
    let ya = step.eval(ta);
    let yb = step.eval(tb);
    let (ga, gb) = (g(&ya)?, g(&yb)?);
    if ga.abs() <= gb.abs() {
        Ok((ta, ya, ga))
    } else {
        Ok((tb, yb, gb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(rel_tol: f64) -> StepSettings {
        StepSettings {
            rel_tol,
            abs_tol: rel_tol,
            max_step: 1.0,
        }
    }

    #[test]
    fn harmonic_oscillator_full_period() {
        let rhs = |y: &[f64], d: &mut [f64]| {
            d[0] = y[1];
            d[1] = -y[0];
            Ok(())
        };
        let mut s = Stepper::new(&rhs, 0.0, vec![1.0, 0.0], settings(1e-11)).unwrap();
        let t_end = 2.0 * std::f64::consts::PI;
        while s.t < t_end {
            s.step(t_end).unwrap();
        }
        assert!(
            (s.y[0] - 1.0).abs() < 1e-9 && s.y[1].abs() < 1e-9,
            "{:?}",
            s.y
        );
    }

    #[test]
    fn dense_output_tracks_the_exact_solution() {
        let rhs = |y: &[f64], d: &mut [f64]| {
            d[0] = y[1];
            d[1] = -y[0];
            Ok(())
        };
        let mut s = Stepper::new(&rhs, 0.0, vec![1.0, 0.0], settings(1e-10)).unwrap();
        let step = s.step(3.0).unwrap();
        for k in 0..=10 {
            let t = step.t0 + step.h * k as f64 / 10.0;
            let y = step.eval(t);
            assert!((y[0] - t.cos()).abs() < 1e-8, "t={t} {y:?}");
        }
    }

    #[test]
    fn root_of_a_quadratic_is_located() {
        let rhs = |_: &[f64], d: &mut [f64]| {
            d[0] = 1.0;
            d[1] = -2.0;
            Ok(())
        };
        let mut s = Stepper::new(&rhs, 0.0, vec![0.0, 1.0], settings(1e-10)).unwrap();
        let step = loop {
            let step = s.step(2.0).unwrap();
            if step.y1[1] < 0.0 {
                break step;
            }
        };
        let g = |y: &[f64]| Ok(y[1]);
        let (ga, gb) = (step.y0[1], step.y1[1]);
        assert!(ga * gb < 0.0);
        let (t, y, _) = locate_root(&step, &g, (step.t0, ga), (step.t1(), gb), 1e-12).unwrap();
        assert!((t - 0.5).abs() < 1e-12 && y[1].abs() < 1e-11);
    }
}
