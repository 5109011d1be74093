//! Surrogate differentiable renderer.
//!
//! Isotropic kernels are projected through a pinhole camera and composited
//! front to back as screen-space Gaussian footprints. The photometric loss
//! and its analytic gradient with respect to the object pose live in
//! [`loss`] and [`grad`].

pub mod grad;
pub mod loss;
pub mod splat;
pub mod ssim;

use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::Vec3;
use crate::pose::{Pose, Quaternion};

pub use grad::{pose_photometric_gradient, registration_photometric_gradient};
pub use loss::{loss_gs, LossWeights, PhotometricTarget};
pub use splat::splat_render;

/// Minimum camera-space depth for a point to count as in front of the camera.
pub const NEAR_DEPTH: f64 = 1e-6;

/// Fixed pinhole camera. `extrinsic` maps world to camera coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub principal_point: Vector2<f64>,
    pub width: usize,
    pub height: usize,
    pub extrinsic: Pose,
}

impl Camera {
    pub fn new(focal: f64, principal_point: Vector2<f64>, width: usize, height: usize, extrinsic: Pose) -> Result<Self> {
        let cam = Self {
            focal,
            principal_point,
            width,
            height,
            extrinsic,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at the origin looking down +z with the principal point centred.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            Vector2::new(width as f64 / 2.0, height as f64 / 2.0),
            width,
            height,
            Pose::identity(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(invalid("focal length must be positive"));
        }
        if self.width < 16 || self.height < 16 {
            return Err(invalid("resolution must be at least 16x16"));
        }
        self.extrinsic.validate()
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.extrinsic.transform_point(p)
    }

    pub fn diagonal(&self) -> f64 {
        ((self.width * self.width + self.height * self.height) as f64).sqrt()
    }
}

/// Pinhole projection of a world point; returns the pixel and camera depth.
pub fn project(point: &Vec3, cam: &Camera) -> Result<(Vector2<f64>, f64)> {
    if !point.iter().all(|v| v.is_finite()) {
        return Err(invalid("non-finite point"));
    }
    let pc = cam.world_to_camera(point);
    if pc.z <= NEAR_DEPTH {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    let pixel = Vector2::new(pc.x / pc.z, pc.y / pc.z) * cam.focal + cam.principal_point;
    Ok((pixel, pc.z))
}

#[derive(Debug, Serialize, Deserialize)]
struct ExtrinsicRecord {
    rotation: [f64; 4],
    translation: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraRecord {
    focal: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    extrinsic: ExtrinsicRecord,
}

impl Serialize for Camera {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CameraRecord {
            focal: self.focal,
            cx: self.principal_point.x,
            cy: self.principal_point.y,
            width: self.width,
            height: self.height,
            extrinsic: ExtrinsicRecord {
                rotation: self.extrinsic.rotation.to_array(),
                translation: self.extrinsic.translation.into(),
            },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Camera {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = CameraRecord::deserialize(d)?;
        Camera::new(
            r.focal,
            Vector2::new(r.cx, r.cy),
            r.width,
            r.height,
            Pose::new(
                Quaternion::from_array(r.extrinsic.rotation),
                Vec3::from(r.extrinsic.translation),
            ),
        )
        .map_err(serde::de::Error::custom)
    }
}

/// Planar RGB image with accumulated opacity, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub rgb: [Vec<f64>; 3],
    pub alpha: Vec<f64>,
}

impl RenderedImage {
    pub fn blank(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            rgb: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            alpha: vec![0.0; n],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            rgb: [vec![value; n], vec![value; n], vec![value; n]],
            alpha: vec![1.0; n],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn rgb_at(&self, x: usize, y: usize) -> [f64; 3] {
        let i = y * self.width + x;
        [self.rgb[0][i], self.rgb[1][i], self.rgb[2][i]]
    }

    /// Foreground mask: pixels whose accumulated opacity exceeds 0.5.
    pub fn silhouette(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.alpha.iter().map(|&a| a > 0.5).collect(),
        }
    }

    /// Writes an 8-bit RGBA PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut data = Vec::with_capacity(self.pixel_count() * 4);
        for i in 0..self.pixel_count() {
            data.extend_from_slice(&[
                to_u8(self.rgb[0][i]),
                to_u8(self.rgb[1][i]),
                to_u8(self.rgb[2][i]),
                to_u8(self.alpha[i]),
            ]);
        }
        write_png(path.as_ref(), self.width, self.height, png::ColorType::Rgba, &data)
    }

    /// Reads an 8-bit RGB or RGBA PNG. Images without alpha are opaque.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path)?));
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| invalid("png too large"))?];
        let info = reader.next_frame(&mut buf)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(invalid("image png must be 8-bit"));
        }
        let channels = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(invalid(format!("unsupported png color type {other:?}"))),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let mut img = Self::blank(w, h);
        for i in 0..w * h {
            let px = &buf[i * channels..(i + 1) * channels];
            for (channel, &v) in img.rgb.iter_mut().zip(px) {
                channel[i] = f64::from(v) / 255.0;
            }
            img.alpha[i] = if channels == 4 { f64::from(px[3]) / 255.0 } else { 1.0 };
        }
        Ok(img)
    }
}

/// Binary silhouette mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let data: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        write_png(path.as_ref(), self.width, self.height, png::ColorType::Grayscale, &data)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path)?));
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| invalid("png too large"))?];
        let info = reader.next_frame(&mut buf)?;
        let channels = info.color_type.samples();
        if info.bit_depth != png::BitDepth::Eight {
            return Err(invalid("mask png must be 8-bit"));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let data = (0..w * h).map(|i| buf[i * channels] > 127).collect();
        Ok(Self { width: w, height: h, data })
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut encoder = png::Encoder::new(file, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(data)?;
    Ok(())
}
