//! PNG slice rendering with window/level and mask/guidance overlays.

use std::io::Cursor;
use std::str::FromStr;

use image::{ImageFormat, Rgb, RgbImage};
use ndarray::{Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CaseData;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    /// Fixed z; rows y, columns x.
    Axial,
    /// Fixed y; rows z, columns x.
    Coronal,
    /// Fixed x; rows z, columns y.
    Sagittal,
}

impl Plane {
    pub fn axis(self) -> usize {
        match self {
            Plane::Axial => 0,
            Plane::Coronal => 1,
            Plane::Sagittal => 2,
        }
    }
}

impl FromStr for Plane {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(Error::UnknownName(format!("plane {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceChannel {
    Ct,
    Pet,
    Fused,
}

impl FromStr for SliceChannel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ct" => Ok(SliceChannel::Ct),
            "pet" => Ok(SliceChannel::Pet),
            "fused" => Ok(SliceChannel::Fused),
            other => Err(Error::UnknownName(format!("channel {other:?}"))),
        }
    }
}

/// Display range `[low, high]` mapped to black..white.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub low: f32,
    pub high: f32,
}

impl Window {
    pub const CT: Window = Window { low: -200.0, high: 400.0 };
    pub const PET: Window = Window { low: 0.0, high: 8.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.high > self.low) {
            return Err(Error::InvalidArgument(format!(
                "window [{}, {}] must satisfy low < high",
                self.low, self.high
            )));
        }
        Ok(())
    }

    fn unit(&self, v: f32) -> f32 {
        ((v - self.low) / (self.high - self.low)).clamp(0.0, 1.0)
    }
}

/// Overlays drawn on top of the base image.
#[derive(Clone, Debug, Default)]
pub struct Overlays<'a> {
    pub mask: Option<&'a Array3<bool>>,
    pub fg_guidance: Option<&'a Array3<f32>>,
    pub bg_guidance: Option<&'a Array3<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceRequest {
    pub plane: Plane,
    pub index: usize,
    pub channel: SliceChannel,
    pub ct_window: Window,
    pub pet_window: Window,
}

impl SliceRequest {
    pub fn new(plane: Plane, index: usize, channel: SliceChannel) -> Self {
        SliceRequest {
            plane,
            index,
            channel,
            ct_window: Window::CT,
            pet_window: Window::PET,
        }
    }
}

const MASK_COLOR: [f32; 3] = [255.0, 40.0, 40.0];
const FG_COLOR: [f32; 3] = [40.0, 255.0, 40.0];
const BG_COLOR: [f32; 3] = [60.0, 140.0, 255.0];
const MASK_ALPHA: f32 = 0.45;

/// Black-red-yellow-white ramp for PET.
fn hot(t: f32) -> [f32; 3] {
    let r = (3.0 * t).min(1.0);
    let g = (3.0 * t - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * t - 2.0).clamp(0.0, 1.0);
    [r * 255.0, g * 255.0, b * 255.0]
}

fn blend(px: [f32; 3], color: [f32; 3], alpha: f32) -> [f32; 3] {
    [0, 1, 2].map(|c| px[c] * (1.0 - alpha) + color[c] * alpha)
}

fn slice<'a, T>(vol: &'a Array3<T>, plane: Plane, index: usize) -> ArrayView2<'a, T> {
    vol.index_axis(Axis(plane.axis()), index)
}

/// Renders one slice as RGB. Rows run along the first remaining axis.
pub fn render_slice(case: &CaseData, req: &SliceRequest, overlays: &Overlays<'_>) -> Result<RgbImage> {
    req.ct_window.validate()?;
    req.pet_window.validate()?;
    let shape = case.grid().shape;
    let axis = req.plane.axis();
    if req.index >= shape[axis] {
        return Err(Error::OutOfBounds(format!(
            "{:?} slice {} outside 0..{}",
            req.plane, req.index, shape[axis]
        )));
    }
    for (name, s) in [
        ("mask", overlays.mask.map(|m| m.dim())),
        ("fg guidance", overlays.fg_guidance.map(|m| m.dim())),
        ("bg guidance", overlays.bg_guidance.map(|m| m.dim())),
    ] {
        if let Some(s) = s {
            if [s.0, s.1, s.2] != shape {
                return Err(Error::GridMismatch(format!("{name} overlay shape {s:?} vs grid {shape:?}")));
            }
        }
    }
    let ct = slice(case.ct.values(), req.plane, req.index);
    let pet = slice(case.pet.values(), req.plane, req.index);
    let mask = overlays.mask.map(|m| slice(m, req.plane, req.index));
    let fg = overlays.fg_guidance.map(|m| slice(m, req.plane, req.index));
    let bg = overlays.bg_guidance.map(|m| slice(m, req.plane, req.index));
    let (rows, cols) = ct.dim();
    let mut img = RgbImage::new(cols as u32, rows as u32);
    for r in 0..rows {
        for c in 0..cols {
            let g = req.ct_window.unit(ct[[r, c]]) * 255.0;
            let p = req.pet_window.unit(pet[[r, c]]);
            let mut px = match req.channel {
                SliceChannel::Ct => [g; 3],
                SliceChannel::Pet => {
                    let v = (1.0 - p) * 255.0;
                    [v; 3]
                }
                SliceChannel::Fused => blend([g; 3], hot(p), 0.5 * p.sqrt()),
            };
            if let Some(m) = &mask {
                if m[[r, c]] {
                    px = blend(px, MASK_COLOR, MASK_ALPHA);
                }
            }
            if let Some(f) = &fg {
                px = blend(px, FG_COLOR, 0.6 * f[[r, c]].clamp(0.0, 1.0));
            }
            if let Some(b) = &bg {
                px = blend(px, BG_COLOR, 0.6 * b[[r, c]].clamp(0.0, 1.0));
            }
            img.put_pixel(c as u32, r as u32, Rgb(px.map(|v| v.round().clamp(0.0, 255.0) as u8)));
        }
    }
    Ok(img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::InvalidArgument(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}
