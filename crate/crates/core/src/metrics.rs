//! PSNR, bits per pixel, and the Bjøntegaard delta rate.

use nalgebra::{DMatrix, DVector};

use crate::error::{DcaeError, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(255² / MSE)` over all 8-bit samples, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(DcaeError::dim(format!(
            "psnr: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let se: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = se / a.pixels.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

/// `8 · bytes / (W · H)` with the original image dimensions.
pub fn bpp(bytes: usize, width: usize, height: usize) -> f64 {
    8.0 * bytes as f64 / (width * height) as f64
}

/// Rate–distortion points `(bpp, PSNR)` with strictly increasing rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    points: Vec<(f64, f64)>,
}

impl RdCurve {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 4 {
            return Err(DcaeError::MetricUndefined(format!(
                "{} points, at least 4 needed",
                points.len()
            )));
        }
        if points.iter().any(|&(r, q)| !(r > 0.0 && r.is_finite() && q.is_finite())) {
            return Err(DcaeError::MetricUndefined(
                "rates must be positive and finite".into(),
            ));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(DcaeError::MetricUndefined("duplicate rate".into()));
            }
            if w[1].1 <= w[0].1 {
                return Err(DcaeError::MetricUndefined(
                    "quality does not increase with rate".into(),
                ));
            }
        }
        Ok(RdCurve { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// `bpp,psnr` rows; blank lines, `#` comments, and a non-numeric header
    /// row are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut f = line.split(',').map(str::trim);
            let (a, b) = (f.next().unwrap_or(""), f.next().unwrap_or(""));
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(r), Ok(q)) => points.push((r, q)),
                _ if points.is_empty() && n == 0 => continue,
                _ => {
                    return Err(DcaeError::UnsupportedFormat(format!(
                        "line {}: expected `bpp,psnr`",
                        n + 1
                    )))
                }
            }
        }
        Self::new(points)
    }

    fn psnr_range(&self) -> (f64, f64) {
        (self.points[0].1, self.points[self.points.len() - 1].1)
    }
}

/// Least-squares cubic `ln(rate) = p(t)` with `t = (psnr − c) / s`.
struct LogRateFit {
    coef: [f64; 4],
    c: f64,
    s: f64,
}

impl LogRateFit {
    fn new(curve: &RdCurve) -> Result<Self> {
        let (lo, hi) = curve.psnr_range();
        let c = 0.5 * (lo + hi);
        let s = (0.5 * (hi - lo)).max(1e-12);
        let n = curve.points.len();
        let a = DMatrix::from_fn(n, 4, |i, j| ((curve.points[i].1 - c) / s).powi(j as i32));
        let b = DVector::from_iterator(n, curve.points.iter().map(|p| p.0.ln()));
        let sol = a
            .svd(true, true)
            .solve(&b, 1e-12)
            .map_err(|e| DcaeError::MetricUndefined(format!("cubic fit failed: {e}")))?;
        Ok(LogRateFit {
            coef: [sol[0], sol[1], sol[2], sol[3]],
            c,
            s,
        })
    }

    /// `∫ p((x − c)/s) dx` over `[lo, hi]`.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |x: f64| {
            let t = (x - self.c) / self.s;
            self.coef
                .iter()
                .enumerate()
                .map(|(j, a)| a * t.powi(j as i32 + 1) / (j + 1) as f64)
                .sum::<f64>()
                * self.s
        };
        anti(hi) - anti(lo)
    }
}

/// Average rate difference of `test` against `anchor` in percent over the
/// common quality interval.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let (a_lo, a_hi) = anchor.psnr_range();
    let (t_lo, t_hi) = test.psnr_range();
    let (lo, hi) = (a_lo.max(t_lo), a_hi.min(t_hi));
    if !(hi > lo) {
        return Err(DcaeError::MetricUndefined(format!(
            "quality ranges [{a_lo:.3}, {a_hi:.3}] and [{t_lo:.3}, {t_hi:.3}] do not overlap"
        )));
    }
    let fa = LogRateFit::new(anchor)?;
    let ft = LogRateFit::new(test)?;
    let mean_diff = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok((mean_diff.exp() - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let black = Image::filled(4, 4, [0, 0, 0]).unwrap();
        let white = Image::filled(4, 4, [255, 255, 255]).unwrap();
        assert_eq!(psnr(&black, &black).unwrap(), 99.0);
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
        assert!(psnr(&black, &Image::filled(2, 2, [0, 0, 0]).unwrap()).is_err());
        assert_eq!(bpp(1000, 100, 80), 1.0);
    }

    fn curve(scale: f64) -> RdCurve {
        RdCurve::new(
            [(0.1, 28.0), (0.2, 30.5), (0.4, 33.0), (0.8, 35.6)]
                .iter()
                .map(|&(r, q)| (r * scale, q))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn bd_rate_constant_ratio() {
        assert!(bd_rate(&curve(1.0), &curve(1.0)).unwrap().abs() < 1e-12);
        let d = bd_rate(&curve(1.0), &curve(2.0)).unwrap();
        assert!((d - 100.0).abs() < 1e-9, "{d}");
        let back = bd_rate(&curve(2.0), &curve(1.0)).unwrap();
        assert!((back + 50.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_curves_rejected() {
        assert!(RdCurve::new(vec![(0.1, 30.0), (0.2, 31.0), (0.3, 32.0)]).is_err());
        assert!(RdCurve::new(vec![(0.1, 30.0), (0.2, 31.0), (0.3, 30.5), (0.4, 33.0)]).is_err());
        let far = RdCurve::new(vec![(0.1, 50.0), (0.2, 51.0), (0.3, 52.0), (0.4, 53.0)]).unwrap();
        assert!(matches!(bd_rate(&curve(1.0), &far), Err(DcaeError::MetricUndefined(_))));
    }

    #[test]
    fn csv_with_header() {
        let c = RdCurve::from_csv("bpp,psnr\n0.1,28\n0.2,30.5\n\n0.4,33\n0.8,35.6\n").unwrap();
        assert_eq!(c, curve(1.0));
        assert!(RdCurve::from_csv("0.1,28\nx,y\n").is_err());
    }
}
