//! Thin plate spline image deformation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{bilinear, ImageTensor};

/// Control points (pixel coordinates `(x, y)`) and where each one moves to.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsParams {
    pub points: Vec<(f64, f64)>,
    pub displacements: Vec<(f64, f64)>,
    /// Smoothing weight added to the kernel diagonal; 0 interpolates exactly.
    pub lambda: f64,
}

impl TpsParams {
    /// `k × k` control grid spanning the image with an inset margin.
    pub fn grid(k: usize, height: usize, width: usize) -> TpsParams {
        let mut points = Vec::with_capacity(k * k);
        let span = |n: usize, i: usize| {
            let lo = 0.1 * (n - 1) as f64;
            let hi = 0.9 * (n - 1) as f64;
            if k == 1 { (lo + hi) / 2.0 } else { lo + (hi - lo) * i as f64 / (k - 1) as f64 }
        };
        for j in 0..k {
            for i in 0..k {
                points.push((span(width, i), span(height, j)));
            }
        }
        let displacements = vec![(0.0, 0.0); points.len()];
        TpsParams { points, displacements, lambda: 0.0 }
    }

    /// Grid with seeded uniform displacements in `[-magnitude, magnitude]` pixels.
    pub fn random(k: usize, height: usize, width: usize, magnitude: f64, seed: u64) -> TpsParams {
        let mut p = TpsParams::grid(k, height, width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in &mut p.displacements {
            if magnitude > 0.0 {
                *d = (rng.random_range(-magnitude..=magnitude), rng.random_range(-magnitude..=magnitude));
            }
        }
        p
    }

    pub fn is_identity(&self) -> bool {
        self.displacements.iter().all(|&(dx, dy)| dx == 0.0 && dy == 0.0)
    }

    pub fn inverse_displacements(&self) -> TpsParams {
        TpsParams {
            points: self.points.clone(),
            displacements: self.displacements.iter().map(|&(dx, dy)| (-dx, -dy)).collect(),
            lambda: self.lambda,
        }
    }
}

fn radial(r2: f64) -> f64 {
    // r² log r = ½ r² log r²
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// A fitted 2-D spline mapping `R² → R²`.
struct Spline {
    centers: Vec<(f64, f64)>,
    weights_x: DVector<f64>,
    weights_y: DVector<f64>,
}

impl Spline {
    fn fit(centers: &[(f64, f64)], values: &[(f64, f64)], lambda: f64) -> Result<Spline> {
        let n = centers.len();
        if n < 3 {
            return Err(Error::SingularSystem(format!("{n} control points, need at least 3")));
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (centers[i], centers[j]);
                if (a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9 {
                    return Err(Error::SingularSystem(format!("duplicate control points {j} and {i}")));
                }
            }
        }
        let (x0, y0) = centers[0];
        let spans_plane = centers.iter().skip(1).any(|&(x1, y1)| {
            centers.iter().any(|&(x2, y2)| ((x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)).abs() > 1e-9)
        });
        if !spans_plane {
            return Err(Error::SingularSystem("control points are collinear".into()));
        }

        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let dx = centers[i].0 - centers[j].0;
                let dy = centers[i].1 - centers[j].1;
                a[(i, j)] = radial(dx * dx + dy * dy);
            }
            a[(i, i)] += lambda;
            let row = [1.0, centers[i].0, centers[i].1];
            for (k, v) in row.iter().enumerate() {
                a[(i, n + k)] = *v;
                a[(n + k, i)] = *v;
            }
        }
        let mut bx = DVector::<f64>::zeros(m);
        let mut by = DVector::<f64>::zeros(m);
        for i in 0..n {
            bx[i] = values[i].0;
            by[i] = values[i].1;
        }
        let lu = a.lu();
        let (wx, wy) = match (lu.solve(&bx), lu.solve(&by)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::SingularSystem("kernel system is not invertible".into())),
        };
        if wx.iter().chain(wy.iter()).any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem("solution is not finite".into()));
        }
        Ok(Spline { centers: centers.to_vec(), weights_x: wx, weights_y: wy })
    }

    fn eval(&self, x: f64, y: f64) -> (f64, f64) {
        let n = self.centers.len();
        let (mut fx, mut fy) = (0.0, 0.0);
        for (i, &(cx, cy)) in self.centers.iter().enumerate() {
            let u = radial((x - cx).powi(2) + (y - cy).powi(2));
            fx += self.weights_x[i] * u;
            fy += self.weights_y[i] * u;
        }
        fx += self.weights_x[n] + self.weights_x[n + 1] * x + self.weights_x[n + 2] * y;
        fy += self.weights_y[n] + self.weights_y[n + 1] * x + self.weights_y[n + 2] * y;
        (fx, fy)
    }
}

/// Moves the content at each control point by its displacement, interpolating
/// a thin plate spline in between. Implemented as a backward map: a spline is
/// fitted from displaced positions back to their sources and every output pixel
/// is bilinearly sampled (edge-clamped) at its mapped source location.
pub fn tps_warp(img: &ImageTensor, params: &TpsParams) -> Result<ImageTensor> {
    if params.points.len() != params.displacements.len() {
        return Err(Error::invalid("tps: points and displacements differ in length"));
    }
    if params.lambda < 0.0 {
        return Err(Error::invalid("tps: lambda must be non-negative"));
    }
    let (h, w) = (img.height() as f64, img.width() as f64);
    if params.points.iter().any(|&(x, y)| x < 0.0 || y < 0.0 || x > w - 1.0 || y > h - 1.0) {
        return Err(Error::invalid("tps: control points must lie inside the image"));
    }
    if params.is_identity() {
        return Ok(img.clone());
    }
    let targets: Vec<(f64, f64)> = params
        .points
        .iter()
        .zip(&params.displacements)
        .map(|(&(x, y), &(dx, dy))| (x + dx, y + dy))
        .collect();
    let spline = Spline::fit(&targets, &params.points, params.lambda)?;

    let (hh, ww) = (img.height(), img.width());
    let mut coords = Vec::with_capacity(hh * ww);
    for y in 0..hh {
        for x in 0..ww {
            coords.push(spline.eval(x as f64, y as f64));
        }
    }
    Ok(ImageTensor::from_fn(img.channels(), hh, ww, |c, y, x| {
        let (sx, sy) = coords[y * ww + x];
        bilinear(img, c, sy as f32, sx as f32)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    #[test]
    fn zero_displacement_is_bitwise_identity() {
        let img = ImageTensor::from_fn(3, 20, 24, |c, y, x| ((c * 7 + y * 3 + x) % 11) as f32 / 10.0);
        let out = tps_warp(&img, &TpsParams::grid(4, 20, 24)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn uniform_displacement_translates_marker() {
        let (h, w) = (32, 32);
        let mut img = ImageTensor::filled(1, h, w, 0.0);
        img.set(0, 12, 10, 1.0);
        let mut p = TpsParams::grid(4, h, w);
        for d in &mut p.displacements {
            *d = (3.0, 2.0);
        }
        let out = tps_warp(&img, &p).unwrap();
        assert!((out.get(0, 14, 13) - 1.0).abs() < 1e-4, "marker moved to {}", out.get(0, 14, 13));
        let total: f32 = out.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-3);
    }

    #[test]
    fn warp_round_trip_on_smooth_image() {
        let (h, w) = (48, 48);
        let img = ImageTensor::from_fn(3, h, w, |c, y, x| {
            0.2 + 0.6 * ((x as f32 / w as f32) * (1.0 - c as f32 * 0.3) + (y as f32 / h as f32) * 0.2 * c as f32)
        });
        let p = TpsParams::random(4, h, w, 2.0, 5);
        let back = tps_warp(&tps_warp(&img, &p).unwrap(), &p.inverse_displacements()).unwrap();
        let crop = |im: &ImageTensor| im.crop(8, 8, h - 16, w - 16).unwrap();
        let score = psnr(&crop(&back), &crop(&img)).unwrap();
        assert!(score > 30.0, "round trip psnr {score}");
    }

    #[test]
    fn duplicate_or_collinear_points_are_singular() {
        let img = ImageTensor::filled(1, 16, 16, 0.5);
        let dup = TpsParams {
            points: vec![(2.0, 2.0), (2.0, 2.0), (8.0, 3.0), (4.0, 9.0)],
            displacements: vec![(1.0, 0.0); 4],
            lambda: 0.0,
        };
        assert!(matches!(tps_warp(&img, &dup), Err(Error::SingularSystem(_))));
        let line = TpsParams {
            points: vec![(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (5.0, 5.0)],
            displacements: vec![(1.0, 0.0); 4],
            lambda: 0.0,
        };
        assert!(matches!(tps_warp(&img, &line), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn spline_interpolates_control_values() {
        let p = TpsParams::random(3, 30, 30, 3.0, 1);
        let targets: Vec<_> =
            p.points.iter().zip(&p.displacements).map(|(a, d)| (a.0 + d.0, a.1 + d.1)).collect();
        let s = Spline::fit(&targets, &p.points, 0.0).unwrap();
        for (t, src) in targets.iter().zip(&p.points) {
            let (x, y) = s.eval(t.0, t.1);
            assert!((x - src.0).abs() < 1e-8 && (y - src.1).abs() < 1e-8);
        }
    }
}
