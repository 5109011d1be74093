//! Front-to-back compositing of screen-space isotropic footprints and its
//! reverse-mode derivative.

use nalgebra::Vector2;

use super::{Camera, RenderedImage, NEAR_DEPTH};
use crate::gaussian::{IsotropicCloud, Vec3};

/// Footprints are cut off at this many screen-space standard deviations.
pub const CUTOFF_SIGMAS: f64 = 3.0;

const CUTOFF_Q: f64 = CUTOFF_SIGMAS * CUTOFF_SIGMAS;

/// Footprint profile as a function of `q = d² / r²`.
///
/// `exp(-q/2)` minus its first-order Taylor expansion at the cutoff, so the
/// profile and its slope both reach zero at `q = 9`, rescaled to peak at 1.
#[inline]
fn profile(q: f64) -> f64 {
    if q >= CUTOFF_Q {
        return 0.0;
    }
    let e = (-0.5 * CUTOFF_Q).exp();
    ((-0.5 * q).exp() - e + 0.5 * e * (q - CUTOFF_Q)) / (1.0 - e - 0.5 * e * CUTOFF_Q)
}

#[inline]
fn profile_slope(q: f64) -> f64 {
    if q >= CUTOFF_Q {
        return 0.0;
    }
    let e = (-0.5 * CUTOFF_Q).exp();
    (-0.5 * (-0.5 * q).exp() + 0.5 * e) / (1.0 - e - 0.5 * e * CUTOFF_Q)
}

/// A kernel after projection into the image.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    /// Index of the kernel in the source cloud.
    pub index: usize,
    pub center: Vector2<f64>,
    pub radius_px: f64,
    pub cam_pos: Vec3,
    pub world_radius: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Projects every kernel in front of the camera and sorts by ascending
/// depth, ties broken by kernel index.
pub(crate) fn project_splats(cloud: &IsotropicCloud, cam: &Camera) -> Vec<Splat> {
    let mut splats: Vec<Splat> = cloud
        .kernels
        .iter()
        .enumerate()
        .filter_map(|(index, k)| {
            let pc = cam.world_to_camera(&k.position);
            if pc.z <= NEAR_DEPTH {
                return None;
            }
            let center = Vector2::new(pc.x / pc.z, pc.y / pc.z) * cam.focal + cam.principal_point;
            Some(Splat {
                index,
                center,
                radius_px: cam.focal * k.radius / pc.z,
                cam_pos: pc,
                world_radius: k.radius,
                opacity: k.opacity,
                color: [k.color.x, k.color.y, k.color.z],
            })
        })
        .collect();
    splats.sort_by(|a, b| a.cam_pos.z.total_cmp(&b.cam_pos.z).then(a.index.cmp(&b.index)));
    splats
}

/// One pixel touched by one footprint.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Touch {
    pub pixel: u32,
    /// Transmittance before this footprint was composited.
    pub transmittance: f64,
    pub weight: f64,
}

/// Pixel window `[x0, x1] × [y0, y1]` covered by a footprint, if any.
fn footprint_window(s: &Splat, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let reach = CUTOFF_SIGMAS * s.radius_px;
    let x0 = (s.center.x - reach).ceil().max(0.0);
    let y0 = (s.center.y - reach).ceil().max(0.0);
    let x1 = (s.center.x + reach).floor().min(width as f64 - 1.0);
    let y1 = (s.center.y + reach).floor().min(height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

/// Composites the splats; when `record` is set, also returns the per-splat
/// footprint lists needed by [`backward`].
pub(crate) fn rasterize(splats: &[Splat], width: usize, height: usize, record: bool) -> (RenderedImage, Vec<Vec<Touch>>) {
    let mut image = RenderedImage::blank(width, height);
    let mut transmittance = vec![1.0; width * height];
    let mut touches = Vec::with_capacity(if record { splats.len() } else { 0 });

    for s in splats {
        let mut list = Vec::new();
        if let Some((x0, x1, y0, y1)) = footprint_window(s, width, height) {
            let inv_r2 = 1.0 / (s.radius_px * s.radius_px);
            for y in y0..=y1 {
                let dy = y as f64 - s.center.y;
                for x in x0..=x1 {
                    let dx = x as f64 - s.center.x;
                    let q = (dx * dx + dy * dy) * inv_r2;
                    if q >= CUTOFF_Q {
                        continue;
                    }
                    let w = s.opacity * profile(q);
                    let p = y * width + x;
                    let t = transmittance[p];
                    for c in 0..3 {
                        image.rgb[c][p] += t * w * s.color[c];
                    }
                    transmittance[p] = t * (1.0 - w);
                    if record {
                        list.push(Touch {
                            pixel: p as u32,
                            transmittance: t,
                            weight: w,
                        });
                    }
                }
            }
        }
        if record {
            touches.push(list);
        }
    }
    for (a, t) in image.alpha.iter_mut().zip(&transmittance) {
        *a = 1.0 - t;
    }
    (image, touches)
}

/// Loss gradient with respect to a splat's screen-space centre and radius.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct SplatGrad {
    pub center: Vector2<f64>,
    pub radius_px: f64,
}

/// Propagates `dL/dC` (per channel, per pixel) back to each splat's
/// screen-space parameters. Walks splats back to front, carrying the colour
/// composited behind the current splat.
pub(crate) fn backward(
    splats: &[Splat],
    touches: &[Vec<Touch>],
    width: usize,
    grad_rgb: &[Vec<f64>; 3],
) -> Vec<SplatGrad> {
    let n = grad_rgb[0].len();
    let mut behind = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut grads = vec![SplatGrad::default(); splats.len()];

    for (si, s) in splats.iter().enumerate().rev() {
        let inv_r2 = 1.0 / (s.radius_px * s.radius_px);
        let mut g = SplatGrad::default();
        for t in &touches[si] {
            let p = t.pixel as usize;
            let mut dl_dw = 0.0;
            for c in 0..3 {
                dl_dw += grad_rgb[c][p] * t.transmittance * (s.color[c] - behind[c][p]);
                behind[c][p] = t.weight * s.color[c] + (1.0 - t.weight) * behind[c][p];
            }
            if dl_dw == 0.0 {
                continue;
            }
            let dx = (p % width) as f64 - s.center.x;
            let dy = (p / width) as f64 - s.center.y;
            let q = (dx * dx + dy * dy) * inv_r2;
            let dl_dq = dl_dw * s.opacity * profile_slope(q);
            g.center.x += dl_dq * (-2.0 * dx * inv_r2);
            g.center.y += dl_dq * (-2.0 * dy * inv_r2);
            g.radius_px += dl_dq * (-2.0 * q / s.radius_px);
        }
        grads[si] = g;
    }
    grads
}

/// Renders an isotropic cloud. Kernels behind the camera are skipped.
pub fn splat_render(cloud: &IsotropicCloud, cam: &Camera) -> RenderedImage {
    let splats = project_splats(cloud, cam);
    rasterize(&splats, cam.width, cam.height, false).0
}
