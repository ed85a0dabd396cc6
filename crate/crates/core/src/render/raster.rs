//! Point-splat rasterization with alpha compositing.

use super::{Camera, RenderConfig};
use crate::autodiff::{CustomGrad, Var};
use crate::error::{Error, Result};
use crate::parallel;

const TILE: usize = 16;

#[derive(Debug, Clone, Copy, Default)]
struct Splat {
    // camera-space position
    xc: f64,
    yc: f64,
    zc: f64,
    // screen center and squared pixel radius
    u: f64,
    v: f64,
    r2: f64,
    valid: bool,
}

/// Renderer diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct RenderStats {
    /// Points at or behind the near plane, dropped from this render.
    pub dropped_points: usize,
}

struct RasterizeOp {
    cam: Camera,
    ksplat: usize,
    splats: Vec<Splat>,
    // Per-pixel selected splats, flattened: ksplat slots per pixel.
    sel_idx: Vec<u32>,
    sel_alpha: Vec<f64>,
    sel_count: Vec<u8>,
}

/// Render a soft silhouette of `points` (a `[n,3]` var) as an `[H,W]` var.
///
/// Each point splats a disk of screen radius `rho * fx / z` with opacity
/// `max(0, 1 - d^2/r^2)`; per pixel the `ksplat` largest opacities among the
/// covering splats composite as `1 - prod(1 - a_i)`. Selecting by opacity
/// keeps the output monotone in the point set. Ties break to the lower point
/// index, and candidate enumeration order is fixed, so the render is
/// deterministic in both parallel modes.
pub fn render_silhouette(
    points: &Var,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<(Var, RenderStats)> {
    let shape = points.shape();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::dimension(
            "render_silhouette",
            format!("points must be [n,3], got {shape:?}"),
        ));
    }
    if cfg.rho <= 0.0 {
        return Err(Error::Config(format!("splat radius must be positive, got {}", cfg.rho)));
    }
    cam.validate()?;
    let n = shape[0];
    let (h, w) = (cam.height, cam.width);
    let vals = points.values();

    let mut splats = vec![Splat::default(); n];
    let mut dropped = 0usize;
    for (i, p) in vals.chunks(3).enumerate() {
        let c = cam.to_camera([p[0], p[1], p[2]]);
        if c[2] <= cfg.znear {
            dropped += 1;
            continue;
        }
        let r_px = cfg.rho * cam.fx / c[2];
        splats[i] = Splat {
            xc: c[0],
            yc: c[1],
            zc: c[2],
            u: cam.fx * c[0] / c[2] + cam.cx,
            v: cam.fy * c[1] / c[2] + cam.cy,
            r2: r_px * r_px,
            valid: true,
        };
    }

    // Bin splats into coarse tiles by their bounding box. Splat order inside
    // each tile list is ascending by construction.
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in splats.iter().enumerate() {
        if !s.valid {
            continue;
        }
        let r = s.r2.sqrt();
        let x0 = ((s.u - r).floor().max(0.0) as usize).min(w.saturating_sub(1)) / TILE;
        let x1 = ((s.u + r).ceil().max(0.0) as usize).min(w.saturating_sub(1)) / TILE;
        let y0 = ((s.v - r).floor().max(0.0) as usize).min(h.saturating_sub(1)) / TILE;
        let y1 = ((s.v + r).ceil().max(0.0) as usize).min(h.saturating_sub(1)) / TILE;
        if s.u + r < 0.0 || s.v + r < 0.0 || s.u - r > w as f64 || s.v - r > h as f64 {
            continue;
        }
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tile_lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }

    let k = cfg.ksplat.max(1);
    let mut pixels = vec![0.0f64; h * w];
    let mut sel_idx = vec![0u32; h * w * k];
    let mut sel_alpha = vec![0.0f64; h * w * k];
    let mut sel_count = vec![0u8; h * w];

    // Rasterize one row of pixels per task; every buffer slice is disjoint.
    struct RowOut<'a> {
        px: &'a mut [f64],
        idx: &'a mut [u32],
        alpha: &'a mut [f64],
        count: &'a mut [u8],
    }
    let mut rows: Vec<RowOut> = {
        let mut out = Vec::with_capacity(h);
        let mut px = pixels.as_mut_slice();
        let mut si = sel_idx.as_mut_slice();
        let mut sa = sel_alpha.as_mut_slice();
        let mut sc = sel_count.as_mut_slice();
        for _ in 0..h {
            let (p, prest) = px.split_at_mut(w);
            let (i, irest) = si.split_at_mut(w * k);
            let (a, arest) = sa.split_at_mut(w * k);
            let (c, crest) = sc.split_at_mut(w);
            out.push(RowOut {
                px: p,
                idx: i,
                alpha: a,
                count: c,
            });
            px = prest;
            si = irest;
            sa = arest;
            sc = crest;
        }
        out
    };

    parallel::for_each_item(&mut rows, |y, row| {
        let ty = y / TILE;
        let py = y as f64 + 0.5;
        for x in 0..w {
            let tx = x / TILE;
            let px = x as f64 + 0.5;
            // Keep the k strongest alphas, ties to the lower splat index.
            let mut top: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
            for &si in &tile_lists[ty * tiles_x + tx] {
                let s = &splats[si as usize];
                let du = px - s.u;
                let dv = py - s.v;
                let d2 = du * du + dv * dv;
                if d2 >= s.r2 {
                    continue;
                }
                let a = 1.0 - d2 / s.r2;
                if top.len() == k && a <= top.last().unwrap().0 {
                    continue;
                }
                let pos = top.partition_point(|&(ta, _)| ta > a);
                top.insert(pos, (a, si));
                if top.len() > k {
                    top.pop();
                }
            }
            let mut transparency = 1.0;
            for (slot, &(a, si)) in top.iter().enumerate() {
                transparency *= 1.0 - a;
                row.idx[x * k + slot] = si;
                row.alpha[x * k + slot] = a;
            }
            row.count[x] = top.len() as u8;
            row.px[x] = 1.0 - transparency;
        }
    });
    drop(rows);

    let op = RasterizeOp {
        cam: cam.clone(),
        ksplat: k,
        splats,
        sel_idx,
        sel_alpha,
        sel_count,
    };
    let out = points
        .tape()
        .custom(&[points], vec![h, w], pixels, Box::new(op))?;
    Ok((
        out,
        RenderStats {
            dropped_points: dropped,
        },
    ))
}

impl CustomGrad for RasterizeOp {
    fn name(&self) -> &'static str {
        "render_silhouette"
    }

    fn backward(&self, inputs: &[&[f64]], _out: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>> {
        let n = inputs[0].len() / 3;
        let mut dpoints = vec![0.0f64; n * 3];
        let k = self.ksplat;
        let (h, w) = (self.cam.height, self.cam.width);
        let mut pre = vec![0.0f64; k];
        let mut post = vec![0.0f64; k];
        for y in 0..h {
            let py = y as f64 + 0.5;
            for x in 0..w {
                let pix = y * w + x;
                let g = grad_out[pix];
                if g == 0.0 {
                    continue;
                }
                let cnt = self.sel_count[pix] as usize;
                if cnt == 0 {
                    continue;
                }
                let alphas = &self.sel_alpha[pix * k..pix * k + cnt];
                // prefix/suffix products of (1 - a) to get d(pixel)/d(a_i)
                // without dividing by possibly-zero terms.
                pre[0] = 1.0;
                for i in 1..cnt {
                    pre[i] = pre[i - 1] * (1.0 - alphas[i - 1]);
                }
                post[cnt - 1] = 1.0;
                for i in (0..cnt - 1).rev() {
                    post[i] = post[i + 1] * (1.0 - alphas[i + 1]);
                }
                let px = x as f64 + 0.5;
                for i in 0..cnt {
                    let si = self.sel_idx[pix * k + i] as usize;
                    let s = &self.splats[si];
                    let da = g * pre[i] * post[i];
                    let du_a = 2.0 * (px - s.u) / s.r2;
                    let dv_a = 2.0 * (py - s.v) / s.r2;
                    let d2 = (px - s.u) * (px - s.u) + (py - s.v) * (py - s.v);
                    let dr2_a = d2 / (s.r2 * s.r2);
                    // Chain through u = fx*xc/zc + cx, v = fy*yc/zc + cy,
                    // r2 = (rho*fx/zc)^2.
                    let gxc = da * du_a * self.cam.fx / s.zc;
                    let gyc = da * dv_a * self.cam.fy / s.zc;
                    let gzc = da
                        * (-du_a * self.cam.fx * s.xc / (s.zc * s.zc)
                            - dv_a * self.cam.fy * s.yc / (s.zc * s.zc)
                            + dr2_a * (-2.0 * s.r2 / s.zc));
                    let gobj = self.cam.rotate_back([gxc, gyc, gzc]);
                    dpoints[si * 3] += gobj[0];
                    dpoints[si * 3 + 1] += gobj[1];
                    dpoints[si * 3 + 2] += gobj[2];
                }
            }
        }
        vec![dpoints]
    }
}
