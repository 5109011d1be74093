//! Photometric loss `(1 − λ)·L1 + λ·D-SSIM` with `D-SSIM = (1 − SSIM) / 2`.

use serde::{Deserialize, Serialize};

use super::ssim::SsimReference;
use super::RenderedImage;
use crate::error::{invalid, Result};

/// Weights of the per-frame objective and of the D-SSIM share inside L_GS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_dssim: f64,
    pub gs: f64,
    pub acc: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dssim: 0.2,
            gs: 0.7,
            acc: 0.2,
            smooth: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(invalid("lambda_dssim must lie in [0, 1]"));
        }
        if self.gs < 0.0 || self.acc < 0.0 || self.smooth < 0.0 {
            return Err(invalid("loss weights must be nonnegative"));
        }
        if (self.gs + self.acc + self.smooth - 1.0).abs() > 1e-9 {
            return Err(invalid("loss weights must sum to 1"));
        }
        Ok(())
    }
}

/// A target frame with its SSIM statistics cached for repeated evaluation.
#[derive(Debug, Clone)]
pub struct PhotometricTarget {
    image: RenderedImage,
    ssim: Option<SsimReference>,
    lambda_dssim: f64,
}

impl PhotometricTarget {
    pub fn new(image: RenderedImage, lambda_dssim: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_dssim) {
            return Err(invalid("lambda_dssim must lie in [0, 1]"));
        }
        let ssim = (lambda_dssim > 0.0).then(|| SsimReference::new(&image));
        Ok(Self {
            image,
            ssim,
            lambda_dssim,
        })
    }

    pub fn image(&self) -> &RenderedImage {
        &self.image
    }

    pub fn lambda_dssim(&self) -> f64 {
        self.lambda_dssim
    }

    /// Loss value and, when requested, `dL/dI` for every channel and pixel.
    pub fn evaluate(&self, rendered: &RenderedImage, want_grad: bool) -> Result<(f64, Option<[Vec<f64>; 3]>)> {
        if rendered.width != self.image.width || rendered.height != self.image.height {
            return Err(invalid(format!(
                "image size {}x{} does not match target {}x{}",
                rendered.width, rendered.height, self.image.width, self.image.height
            )));
        }
        let n = rendered.pixel_count();
        let count = (3 * n) as f64;
        let l1_weight = 1.0 - self.lambda_dssim;

        let mut l1 = 0.0;
        let mut grad: [Vec<f64>; 3] = if want_grad {
            std::array::from_fn(|_| vec![0.0; n])
        } else {
            Default::default()
        };
        #[allow(clippy::needless_range_loop)] // channel index shared by several arrays
        for c in 0..3 {
            for (i, (r, t)) in rendered.rgb[c].iter().zip(&self.image.rgb[c]).enumerate() {
                let d = r - t;
                l1 += d.abs();
                if want_grad && d != 0.0 {
                    grad[c][i] = l1_weight * d.signum() / count;
                }
            }
        }
        let mut loss = l1_weight * l1 / count;

        if let Some(reference) = &self.ssim {
            let (s, ssim_grad) = reference.evaluate(rendered, want_grad);
            loss += self.lambda_dssim * (1.0 - s) / 2.0;
            if let Some(sg) = ssim_grad {
                for c in 0..3 {
                    for (g, d) in grad[c].iter_mut().zip(&sg[c]) {
                        *g -= 0.5 * self.lambda_dssim * d;
                    }
                }
            }
        }
        Ok((loss, want_grad.then_some(grad)))
    }
}

/// `(1 − λ)·mean|I − Î| + λ·(1 − SSIM(I, Î)) / 2`.
pub fn loss_gs(rendered: &RenderedImage, target: &RenderedImage, lambda_dssim: f64) -> Result<f64> {
    Ok(PhotometricTarget::new(target.clone(), lambda_dssim)?
        .evaluate(rendered, false)?
        .0)
}
