//! Structural similarity over an 11x11 Gaussian window (σ = 1.5) with an
//! analytic gradient with respect to the first image.
//!
//! Near the border the window is truncated to the image and renormalized,
//! so constant images have exactly zero local variance everywhere.

use super::RenderedImage;

pub const WINDOW_RADIUS: usize = 5;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

const TAPS: usize = 2 * WINDOW_RADIUS + 1;

fn window_taps() -> [f64; TAPS] {
    let mut taps = [0.0; TAPS];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - WINDOW_RADIUS as f64;
        *t = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

impl Rect {
    fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            x1: width - 1,
            y0: 0,
            y1: height - 1,
        }
    }

    fn dilate(&self, r: usize, width: usize, height: usize) -> Self {
        Self {
            x0: self.x0.saturating_sub(r),
            x1: (self.x1 + r).min(width - 1),
            y0: self.y0.saturating_sub(r),
            y1: (self.y1 + r).min(height - 1),
        }
    }

    fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    fn pixels(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.y0..=self.y1).flat_map(move |y| (self.x0..=self.x1).map(move |x| y * width + x))
    }
}

/// Separable windowed averaging over a fixed image size.
#[derive(Debug, Clone)]
pub struct GaussianWindow {
    width: usize,
    height: usize,
    taps: [f64; TAPS],
    norm_x: Vec<f64>,
    norm_y: Vec<f64>,
}

fn partial_sums(taps: &[f64; TAPS], len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            (0..TAPS)
                .filter(|&k| {
                    let j = i as isize + k as isize - WINDOW_RADIUS as isize;
                    j >= 0 && (j as usize) < len
                })
                .map(|k| taps[k])
                .sum()
        })
        .collect()
}

impl GaussianWindow {
    pub fn new(width: usize, height: usize) -> Self {
        let taps = window_taps();
        Self {
            width,
            height,
            taps,
            norm_x: partial_sums(&taps, width),
            norm_y: partial_sums(&taps, height),
        }
    }

    /// Correlates `input` with the window, writing only the pixels of
    /// `out_rect`. With `normalize`, each output is divided by the in-image
    /// window mass.
    fn apply(&self, input: &[f64], output: &mut [f64], scratch: &mut [f64], out_rect: Rect, normalize: bool) {
        let (w, h) = (self.width, self.height);
        let r = WINDOW_RADIUS as isize;
        let rows = out_rect.dilate(WINDOW_RADIUS, w, h);
        for y in rows.y0..=rows.y1 {
            let row = &input[y * w..(y + 1) * w];
            let out = &mut scratch[y * w..(y + 1) * w];
            for x in out_rect.x0..=out_rect.x1 {
                let acc = if x >= WINDOW_RADIUS && x + WINDOW_RADIUS < w {
                    let src = &row[x - WINDOW_RADIUS..=x + WINDOW_RADIUS];
                    self.taps.iter().zip(src).map(|(t, v)| t * v).sum()
                } else {
                    let lo = (x as isize - r).max(0) as usize;
                    let hi = (x as isize + r).min(w as isize - 1) as usize;
                    (lo..=hi).map(|j| self.taps[(j as isize - x as isize + r) as usize] * row[j]).sum()
                };
                out[x] = if normalize { acc / self.norm_x[x] } else { acc };
            }
        }
        let (x0, x1) = (out_rect.x0, out_rect.x1);
        for y in out_rect.y0..=out_rect.y1 {
            let lo = (y as isize - r).max(0) as usize;
            let hi = (y as isize + r).min(h as isize - 1) as usize;
            let out = &mut output[y * w + x0..=y * w + x1];
            out.iter_mut().for_each(|v| *v = 0.0);
            for j in lo..=hi {
                let tap = self.taps[(j as isize - y as isize + r) as usize];
                let src = &scratch[j * w + x0..=j * w + x1];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += tap * s;
                }
            }
            if normalize {
                let n = self.norm_y[y];
                out.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    fn mean(&self, input: &[f64], output: &mut [f64], scratch: &mut [f64], rect: Rect) {
        self.apply(input, output, scratch, rect, true);
    }

    /// Adjoint of [`Self::mean`] for inputs supported inside `support`;
    /// written on `support` dilated by the window radius.
    /// `input` is scaled in place; it must be zero outside `support`.
    fn mean_adjoint(&self, input: &mut [f64], output: &mut [f64], scratch: &mut [f64], support: Rect) {
        let w = self.width;
        for i in support.pixels(w) {
            input[i] /= self.norm_x[i % w] * self.norm_y[i / w];
        }
        let out_rect = support.dilate(WINDOW_RADIUS, self.width, self.height);
        self.apply(input, output, scratch, out_rect, false);
    }
}

/// Windowed first and second moments of one image channel.
#[derive(Debug, Clone)]
struct ChannelMoments {
    mean: Vec<f64>,
    mean_sq: Vec<f64>,
}

/// Precomputed statistics of a fixed reference image.
#[derive(Debug, Clone)]
pub struct SsimReference {
    window: GaussianWindow,
    image: [Vec<f64>; 3],
    moments: [ChannelMoments; 3],
}

impl SsimReference {
    pub fn new(reference: &RenderedImage) -> Self {
        let window = GaussianWindow::new(reference.width, reference.height);
        let n = reference.pixel_count();
        let full = Rect::full(reference.width, reference.height);
        let mut scratch = vec![0.0; n];
        let moments = std::array::from_fn(|c| {
            let ch = &reference.rgb[c];
            let mut mean = vec![0.0; n];
            let mut mean_sq = vec![0.0; n];
            window.mean(ch, &mut mean, &mut scratch, full);
            let sq: Vec<f64> = ch.iter().map(|v| v * v).collect();
            window.mean(&sq, &mut mean_sq, &mut scratch, full);
            ChannelMoments { mean, mean_sq }
        });
        Self {
            window,
            image: reference.rgb.clone(),
            moments,
        }
    }

    pub fn width(&self) -> usize {
        self.window.width
    }

    pub fn height(&self) -> usize {
        self.window.height
    }

    /// Bounding box of the pixels where `x` differs from the reference.
    fn difference_box(&self, x: &RenderedImage) -> Option<Rect> {
        let w = self.window.width;
        let mut rect: Option<Rect> = None;
        for i in 0..x.pixel_count() {
            if (0..3).any(|c| x.rgb[c][i] != self.image[c][i]) {
                let (px, py) = (i % w, i / w);
                rect = Some(match rect {
                    None => Rect {
                        x0: px,
                        x1: px,
                        y0: py,
                        y1: py,
                    },
                    Some(r) => Rect {
                        x0: r.x0.min(px),
                        x1: r.x1.max(px),
                        y0: r.y0.min(py),
                        y1: r.y1.max(py),
                    },
                });
            }
        }
        rect
    }

    /// Mean SSIM over all pixels and channels between `x` and the reference,
    /// plus `d SSIM / d x` when requested.
    ///
    /// A window in which both images agree scores exactly 1 with zero
    /// derivative, so only windows touching a differing pixel are evaluated.
    pub fn evaluate(&self, x: &RenderedImage, want_grad: bool) -> (f64, Option<[Vec<f64>; 3]>) {
        let n = x.pixel_count();
        let count = (3 * n) as f64;
        let (w, h) = (self.window.width, self.window.height);
        let Some(diff) = self.difference_box(x) else {
            let grads = want_grad.then(|| std::array::from_fn(|_| vec![0.0; n]));
            return (1.0, grads);
        };
        // pixels whose window sees a difference, and the pixels those windows read
        let eval = diff.dilate(WINDOW_RADIUS, w, h);
        let reads = eval.dilate(WINDOW_RADIUS, w, h);
        let untouched = (n - eval.area()) as f64;

        let mut scratch = vec![0.0; n];
        let mut mu_x = vec![0.0; n];
        let mut exx = vec![0.0; n];
        let mut exy = vec![0.0; n];
        let mut sq = vec![0.0; n];
        let mut cross = vec![0.0; n];
        let mut total = 0.0;
        let mut grads: [Vec<f64>; 3] = Default::default();
        let buffer = |on: bool| if on { vec![0.0; n] } else { Vec::new() };
        let (mut da, mut db, mut dc) = (buffer(want_grad), buffer(want_grad), buffer(want_grad));
        let (mut ga, mut gb, mut gc) = (buffer(want_grad), buffer(want_grad), buffer(want_grad));

        #[allow(clippy::needless_range_loop)] // channel index shared by several arrays
        for c in 0..3 {
            let xs = &x.rgb[c];
            let ys = &self.image[c];
            let ref_m = &self.moments[c];
            for i in reads.pixels(w) {
                sq[i] = xs[i] * xs[i];
                cross[i] = xs[i] * ys[i];
            }
            self.window.mean(xs, &mut mu_x, &mut scratch, eval);
            self.window.mean(&sq, &mut exx, &mut scratch, eval);
            self.window.mean(&cross, &mut exy, &mut scratch, eval);

            let mut channel_total = 0.0;
            for p in eval.pixels(w) {
                let mx = mu_x[p];
                let my = ref_m.mean[p];
                let sx = exx[p] - mx * mx;
                let sy = ref_m.mean_sq[p] - my * my;
                let sxy = exy[p] - mx * my;
                let n1 = 2.0 * mx * my + C1;
                let n2 = 2.0 * sxy + C2;
                let d1 = mx * mx + my * my + C1;
                let d2 = sx + sy + C2;
                let s = n1 * n2 / (d1 * d2);
                channel_total += s;
                if want_grad {
                    let dd = d1 * d2;
                    da[p] = (2.0 * my * n2 - 2.0 * my * n1) / dd - s * (2.0 * mx / d1 - 2.0 * mx / d2);
                    db[p] = -s / d2;
                    dc[p] = 2.0 * n1 / dd;
                }
            }
            total += channel_total + untouched;
            if want_grad {
                self.window.mean_adjoint(&mut da, &mut ga, &mut scratch, eval);
                self.window.mean_adjoint(&mut db, &mut gb, &mut scratch, eval);
                self.window.mean_adjoint(&mut dc, &mut gc, &mut scratch, eval);
                let mut g = vec![0.0; n];
                for q in reads.pixels(w) {
                    g[q] = (ga[q] + 2.0 * xs[q] * gb[q] + ys[q] * gc[q]) / count;
                }
                grads[c] = g;
            }
        }
        (total / count, want_grad.then_some(grads))
    }
}

/// Mean SSIM between two equally sized images.
pub fn ssim(x: &RenderedImage, y: &RenderedImage) -> f64 {
    SsimReference::new(y).evaluate(x, false).0
}
