//! Differentiable silhouette rendering of point clouds.
//!
//! Points splat to soft disks in screen space and composite per pixel as
//! `1 - prod(1 - a_i)` over the strongest `k_splat` covering splats. The
//! whole render is one fused op on the tape with an analytic backward
//! through compositing and pinhole projection.

mod image;
mod raster;

pub use image::{read_pgm, write_pgm, GrayImage, RgbImage};
pub use raster::{render_silhouette, RenderStats};

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Pinhole camera: intrinsics in pixels plus an object-to-camera rigid
/// transform. The camera looks along +z.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 3x3 rotation.
    #[serde(rename = "R")]
    pub rot: [f64; 9],
    #[serde(rename = "t")]
    pub trans: [f64; 3],
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
}

impl Camera {
    /// Camera at `position` looking at `target`, y-ish `up`.
    pub fn look_at(
        position: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fx: f64,
        fy: f64,
        height: usize,
        width: usize,
    ) -> Camera {
        let fwd = normalize(sub3(target, position));
        let right = normalize(cross(fwd, up));
        let down = cross(fwd, right);
        // Rows: camera x (right), y (down in image), z (forward).
        let rot = [
            right[0], right[1], right[2], down[0], down[1], down[2], fwd[0], fwd[1], fwd[2],
        ];
        let trans = [
            -dot(right, position),
            -dot(down, position),
            -dot(fwd, position),
        ];
        Camera {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rot,
            trans,
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Config(format!(
                "focal lengths must be positive: fx={}, fy={}",
                self.fx, self.fy
            )));
        }
        // || R^T R - I || over all entries.
        let r = &self.rot;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += r[k * 3 + i] * r[k * 3 + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((acc - target).abs());
            }
        }
        if err > 1e-9 {
            return Err(Error::Config(format!(
                "rotation is not orthonormal (deviation {err:.2e})"
            )));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rot;
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + self.trans[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + self.trans[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + self.trans[2],
        ]
    }

    /// Rotate a camera-frame vector back into object space (R^T v).
    pub fn rotate_back(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rot;
        [
            r[0] * v[0] + r[3] * v[1] + r[6] * v[2],
            r[1] * v[0] + r[4] * v[1] + r[7] * v[2],
            r[2] * v[0] + r[5] * v[1] + r[8] * v[2],
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("camera serializes")
    }

    pub fn from_json(s: &str) -> Result<Camera> {
        let cam: Camera =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("camera json: {e}")))?;
        cam.validate()?;
        Ok(cam)
    }
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Renderer and rendering-loss settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderConfig {
    /// World-space splat radius.
    pub rho: f64,
    /// Splats composited per pixel.
    pub ksplat: usize,
    /// Points with camera-space depth at or below this are dropped.
    pub znear: f64,
    /// Gaussian sigma of the edge detector, in pixels.
    pub log_sigma: f64,
    /// Response threshold marking a pixel as edge.
    pub edge_thresh: f64,
    /// Loss discount on edge pixels.
    pub epsilon_mask: f64,
    /// Binarization threshold as a fraction of the value range.
    pub bin_threshold: f64,
    /// Background color of synthetic views.
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            rho: 0.025,
            ksplat: 8,
            znear: 1e-4,
            log_sigma: 1.5,
            edge_thresh: 0.1,
            epsilon_mask: 0.4,
            bin_threshold: 0.1,
            background: [0.0, 0.0, 0.0],
        }
    }
}

/// Screen-space projection of a point cloud.
#[derive(Debug, Clone)]
pub struct Projection {
    /// (u, v) per point; meaningless where `valid` is false.
    pub uv: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    /// Count of points dropped for sitting at or behind the near plane.
    pub dropped: usize,
}

/// Pinhole projection `u = fx*x/z + cx`, `v = fy*y/z + cy`. Points with
/// `z <= znear` are dropped and counted rather than failing the batch.
pub fn project(pc: &PointCloud, cam: &Camera, znear: f64) -> Projection {
    let n = pc.len();
    let mut uv = vec![[0.0; 2]; n];
    let mut depth = vec![0.0; n];
    let mut valid = vec![false; n];
    let mut dropped = 0;
    for (i, p) in pc.points().iter().enumerate() {
        let c = cam.to_camera(*p);
        depth[i] = c[2];
        if c[2] <= znear {
            dropped += 1;
            continue;
        }
        uv[i] = [
            cam.fx * c[0] / c[2] + cam.cx,
            cam.fy * c[1] / c[2] + cam.cy,
        ];
        valid[i] = true;
    }
    Projection {
        uv,
        depth,
        valid,
        dropped,
    }
}

/// Threshold an RGB image against a known background color: pixels whose
/// largest channel deviation exceeds `threshold` become 1.
pub fn binarize(img: &RgbImage, background: [f64; 3], threshold: f64) -> GrayImage {
    let (h, w) = (img.height, img.width);
    let mut out = GrayImage::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut dev = 0.0f64;
            for c in 0..3 {
                dev = dev.max((img.data[(c * h + y) * w + x] - background[c]).abs());
            }
            out.data[y * w + x] = if dev > threshold { 1.0 } else { 0.0 };
        }
    }
    out
}

/// Laplacian-of-Gaussian edge mask: pixels whose absolute filter response
/// exceeds `edge_thresh` get value `epsilon`, everything else 1. The kernel
/// is zero-sum and the image border is clamp-padded, so constant inputs
/// produce an all-ones mask.
pub fn edge_mask(s: &GrayImage, sigma: f64, edge_thresh: f64, epsilon: f64) -> GrayImage {
    assert!(sigma > 0.0, "sigma must be positive");
    let half = (3.0 * sigma).ceil() as isize;
    let size = (2 * half + 1) as usize;
    let mut kernel = vec![0.0f64; size * size];
    for dy in -half..=half {
        for dx in -half..=half {
            let r2 = (dx * dx + dy * dy) as f64;
            let s2 = sigma * sigma;
            kernel[((dy + half) as usize) * size + (dx + half) as usize] =
                (r2 - 2.0 * s2) / (s2 * s2) * (-r2 / (2.0 * s2)).exp();
        }
    }
    let mean = kernel.iter().sum::<f64>() / kernel.len() as f64;
    kernel.iter_mut().for_each(|k| *k -= mean);

    let (h, w) = (s.height, s.width);
    let mut out = GrayImage::zeros(h, w);
    crate::parallel::for_each_chunk(&mut out.data, w, |y, row| {
        for (x, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for dy in -half..=half {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -half..=half {
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc += s.data[sy * w + sx]
                        * kernel[((dy + half) as usize) * size + (dx + half) as usize];
                }
            }
            *slot = if acc.abs() > edge_thresh { epsilon } else { 1.0 };
        }
    });
    out
}

/// Rendering loss: mean over pixels of the edge-masked absolute difference
/// between the soft rendering of `yhat` and the binarized input image.
pub fn render_loss(
    yhat: &Var,
    img: &RgbImage,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<(Var, RenderStats)> {
    if img.height != cam.height || img.width != cam.width {
        return Err(Error::dimension(
            "render_loss",
            format!(
                "image {}x{} does not match camera {}x{}",
                img.height, img.width, cam.height, cam.width
            ),
        ));
    }
    let silhouette = binarize(img, cfg.background, cfg.bin_threshold);
    let mask = edge_mask(&silhouette, cfg.log_sigma, cfg.edge_thresh, cfg.epsilon_mask);
    let (soft, stats) = render_silhouette(yhat, cam, cfg)?;
    let tape = yhat.tape().clone();
    let shape = vec![cam.height, cam.width];
    let s_const = tape.constant(shape.clone(), silhouette.data)?;
    let m_const = tape.constant(shape, mask.data)?;
    let diff = soft.sub(&s_const)?.abs().mul(&m_const)?;
    let loss = diff
        .sum(None)?
        .scale(1.0 / (cam.height * cam.width) as f64);
    Ok((loss, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn project_hand_cases() {
        let cam = Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 112.0,
            cy: 112.0,
            rot: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            trans: [0.0; 3],
            height: 224,
            width: 224,
        };
        // Point on the optical axis lands at the principal point.
        let p = project(&PointCloud::new(vec![[0.0, 0.0, 2.0]]), &cam, 1e-4);
        assert_eq!(p.uv[0], [112.0, 112.0]);

        // fx=fy=100, point (0.1, 0, 1) -> u = 122.
        let p = project(&PointCloud::new(vec![[0.1, 0.0, 1.0]]), &cam, 1e-4);
        assert_eq!(p.uv[0], [122.0, 112.0]);

        // Doubling depth halves the offset from the principal point.
        let p = project(&PointCloud::new(vec![[0.1, 0.0, 2.0]]), &cam, 1e-4);
        assert!((p.uv[0][0] - 117.0).abs() < 1e-12);

        // Behind-camera point is dropped and counted.
        let p = project(&PointCloud::new(vec![[0.0, 0.0, -1.0]]), &cam, 1e-4);
        assert_eq!(p.dropped, 1);
        assert!(!p.valid[0]);
    }

    #[test]
    fn look_at_rotation_is_orthonormal() {
        let cam = Camera::look_at(
            [2.0, 1.5, -1.0],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            180.0,
            180.0,
            224,
            224,
        );
        cam.validate().unwrap();
        // The target projects to the principal point.
        let c = cam.to_camera([0.0, 0.0, 0.0]);
        assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12);
        assert!(c[2] > 0.0);
    }

    #[test]
    fn camera_json_roundtrip() {
        let cam = Camera::look_at(
            [0.0, 1.0, -2.5],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            179.2,
            179.2,
            64,
            64,
        );
        let s = cam.to_json();
        assert!(s.contains("\"R\""));
        assert!(s.contains("\"t\""));
        assert!(s.contains("\"H\""));
        let back = Camera::from_json(&s).unwrap();
        assert_eq!(back.rot, cam.rot);
        assert_eq!(back.height, 64);
    }

    #[test]
    fn binarize_cases() {
        let bg = [0.0, 0.0, 0.0];
        let empty = RgbImage::constant(4, 4, bg);
        let b = binarize(&empty, bg, 0.1);
        assert!(b.data.iter().all(|&v| v == 0.0));

        let mut half = RgbImage::constant(4, 4, bg);
        for y in 0..4 {
            for x in 2..4 {
                for c in 0..3 {
                    half.data[(c * 4 + y) * 4 + x] = 1.0;
                }
            }
        }
        let b = binarize(&half, bg, 0.1);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(b.data[y * 4 + x], if x >= 2 { 1.0 } else { 0.0 });
            }
        }
        // Idempotent on already-binary input.
        let again = binarize(&RgbImage::from_gray(&b), bg, 0.1);
        assert_eq!(again.data, b.data);
    }

    #[test]
    fn edge_mask_constant_and_step() {
        let flat = GrayImage::zeros(16, 16);
        let m = edge_mask(&flat, 1.5, 0.1, 0.4);
        assert!(m.data.iter().all(|&v| v == 1.0));

        let mut ones = GrayImage::zeros(16, 16);
        ones.data.iter_mut().for_each(|v| *v = 1.0);
        let m = edge_mask(&ones, 1.5, 0.1, 0.4);
        assert!(m.data.iter().all(|&v| v == 1.0));

        let mut step = GrayImage::zeros(16, 16);
        for y in 0..16 {
            for x in 8..16 {
                step.data[y * 16 + x] = 1.0;
            }
        }
        let m = edge_mask(&step, 1.5, 0.1, 0.4);
        // A band along the vertical boundary is discounted...
        for y in 2..14 {
            assert_eq!(m.data[y * 16 + 7], 0.4, "pixel ({y},7)");
            assert_eq!(m.data[y * 16 + 8], 0.4, "pixel ({y},8)");
        }
        // ...while pixels far from it are not.
        for y in 0..16 {
            assert_eq!(m.data[y * 16 + 0], 1.0);
            assert_eq!(m.data[y * 16 + 15], 1.0);
        }

        // epsilon = 1 degenerates to an unmasked loss.
        let m = edge_mask(&step, 1.5, 0.1, 1.0);
        assert!(m.data.iter().all(|&v| v == 1.0));
    }
}
