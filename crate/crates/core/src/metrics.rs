//! BerHu training loss and the RMSE / threshold-accuracy evaluation metrics.

use num_traits::Float;

use crate::error::{Error, Result};

/// Breakpoint as a fraction of the largest absolute residual in the batch.
pub const BERHU_FRACTION: f64 = 0.2;
/// Lower bound on the breakpoint so an all-zero batch stays well defined.
pub const BERHU_MIN_C: f64 = 1e-6;
/// Threshold base for the δ accuracies.
pub const DELTA_THRESHOLD: f64 = 1.25;

/// Reverse Huber: L1 up to `c`, scaled L2 beyond.
#[inline]
pub fn berhu<T: Float>(x: T, c: T) -> T {
    let a = x.abs();
    if a <= c {
        a
    } else {
        (x * x + c * c) / (c + c)
    }
}

/// d berhu / dx at fixed `c`. Zero at the origin.
#[inline]
pub fn berhu_dx<T: Float>(x: T, c: T) -> T {
    if x.abs() <= c {
        if x > T::zero() {
            T::one()
        } else if x < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    } else {
        x / c
    }
}

/// d berhu / dc at fixed `x`.
#[inline]
pub fn berhu_dc<T: Float>(x: T, c: T) -> T {
    if x.abs() <= c {
        T::zero()
    } else {
        let half = T::from(0.5).unwrap();
        half * (T::one() - (x * x) / (c * c))
    }
}

/// Mean BerHu over the masked residuals, with the breakpoint chosen from the
/// batch itself. Returns the loss and its exact gradient with respect to
/// every residual (zero outside the mask), including the dependence of the
/// breakpoint on the largest residual.
pub fn berhu_loss<T: Float>(residuals: &[T], mask: &[bool]) -> Result<(T, Vec<T>)> {
    if residuals.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} residuals, {} mask entries",
            residuals.len(),
            mask.len()
        )));
    }
    let mut n = 0usize;
    let mut max_abs = T::zero();
    let mut argmax = None;
    for (i, (&x, &m)) in residuals.iter().zip(mask).enumerate() {
        if m {
            n += 1;
            if argmax.is_none() || x.abs() > max_abs {
                max_abs = x.abs();
                argmax = Some(i);
            }
        }
    }
    let Some(argmax) = argmax else {
        return Err(Error::Empty("BerHu loss over an empty mask".into()));
    };
    let frac = T::from(BERHU_FRACTION).unwrap();
    let floor = T::from(BERHU_MIN_C).unwrap();
    let scaled = frac * max_abs;
    let (c, c_active) = if scaled > floor {
        (scaled, true)
    } else {
        (floor, false)
    };
    let inv_n = T::one() / T::from(n).unwrap();
    let mut loss = T::zero();
    let mut dc = T::zero();
    let mut grad = vec![T::zero(); residuals.len()];
    for (i, (&x, &m)) in residuals.iter().zip(mask).enumerate() {
        if m {
            loss = loss + berhu(x, c);
            dc = dc + berhu_dc(x, c);
            grad[i] = berhu_dx(x, c) * inv_n;
        }
    }
    if c_active {
        let x = residuals[argmax];
        let sign = if x < T::zero() { -T::one() } else { T::one() };
        grad[argmax] = grad[argmax] + dc * inv_n * frac * sign;
    }
    Ok((loss * inv_n, grad))
}

fn check_lengths(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "metric inputs have lengths {}, {}, {}",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    Ok(())
}

/// Root-mean-square difference over the masked pixels.
pub fn rmse(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    check_lengths(pred, gt, mask)?;
    let (sum, n) = pred
        .iter()
        .zip(gt)
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), ((p, g), _)| (s + (p - g) * (p - g), n + 1));
    if n == 0 {
        return Err(Error::Empty("RMSE over an empty mask".into()));
    }
    Ok((sum / n as f64).sqrt())
}

/// Fractions of masked pixels with `max(gt/pred, pred/gt) < 1.25^k`, k = 1, 2, 3.
pub fn delta_accuracy(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<[f64; 3]> {
    check_lengths(pred, gt, mask)?;
    let thresholds = [
        DELTA_THRESHOLD,
        DELTA_THRESHOLD * DELTA_THRESHOLD,
        DELTA_THRESHOLD * DELTA_THRESHOLD * DELTA_THRESHOLD,
    ];
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
        if !m {
            continue;
        }
        if !(p > 0.0 && g > 0.0) {
            return Err(Error::Numerical(format!(
                "threshold accuracy needs positive values, got pred={p} gt={g}"
            )));
        }
        n += 1;
        let ratio = (g / p).max(p / g);
        for (hit, thr) in hits.iter_mut().zip(thresholds) {
            if ratio < thr {
                *hit += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("threshold accuracy over an empty mask".into()));
    }
    Ok(hits.map(|h| h as f64 / n as f64))
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    pub rmse: f64,
    pub delta: [f64; 3],
    pub n: usize,
}

impl MetricsReport {
    pub fn compute(label: &str, pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<Self> {
        let report = Self {
            label: label.to_string(),
            rmse: rmse(pred, gt, mask)?,
            delta: delta_accuracy(pred, gt, mask)?,
            n: mask.iter().filter(|&&m| m).count(),
        };
        debug_assert!(report.delta[0] <= report.delta[1] && report.delta[1] <= report.delta[2]);
        Ok(report)
    }

    pub const CSV_HEADER: &'static str = "config,rmse,d1,d2,d3,n";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.label, self.rmse, self.delta[0], self.delta[1], self.delta[2], self.n
        )
    }
}

/// Renders reports as CSV with a header line.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(MetricsReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
