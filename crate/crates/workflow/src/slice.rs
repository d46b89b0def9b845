//! Server-side slice rendering: windowed base slice with an optional
//! colour overlay from another volume, encoded as PNG.

use std::io::Cursor;

use serde::Deserialize;

use petnav_core::volume::{blend_overlay, Colormap, Plane, SliceAxis, Volume, WindowLevel};
use petnav_core::Vec3;

use crate::navigator::{LoadedVolumes, NavError};
use crate::session::RegistrationRecord;

/// Query parameters of `GET /slice`.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct SliceQuery {
    pub volume: String,
    pub axis: Option<String>,
    pub index: Option<usize>,
    pub window: Option<f64>,
    pub level: Option<f64>,
    pub overlay: Option<String>,
    pub opacity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Frame {
    Compensated,
    Interventional,
}

fn pick<'a>(v: &'a LoadedVolumes, name: &str) -> Result<(&'a Volume, Frame), NavError> {
    match name {
        "ct" | "comp_ct" => Ok((&v.comp_ct, Frame::Compensated)),
        "pet" | "comp_pet" => Ok((&v.comp_pet, Frame::Compensated)),
        "interventional" | "interventional_ct" | "ict" => Ok((&v.interventional, Frame::Interventional)),
        other => Err(NavError::Invalid(format!("unknown volume '{other}'"))),
    }
}

/// Full-range window for volumes without a conventional preset.
fn auto_window(v: &Volume) -> WindowLevel {
    let (lo, hi) = v.min_max();
    let w = if hi > lo { hi - lo } else { 1.0 };
    WindowLevel::new(w, lo + w / 2.0).expect("positive window")
}

fn default_window(v: &Volume) -> WindowLevel {
    match v.modality() {
        petnav_core::Modality::Pet => auto_window(v),
        _ => WindowLevel::new(400.0, 40.0).expect("positive window"),
    }
}

/// Renders the requested slice to RGB pixels.
pub fn render_slice(
    vols: &LoadedVolumes,
    registration: Option<&RegistrationRecord>,
    q: &SliceQuery,
) -> Result<Plane<[f64; 3]>, NavError> {
    let (base, base_frame) = pick(vols, &q.volume)?;
    let axis = match q.axis.as_deref() {
        None => SliceAxis::Axial,
        Some(a) => SliceAxis::parse(a).ok_or_else(|| NavError::Invalid(format!("unknown axis '{a}'")))?,
    };
    let index = q.index.unwrap_or(base.dims()[axis.normal_axis()] / 2);
    let wl = match (q.window, q.level) {
        (None, None) => default_window(base),
        (w, l) => {
            let d = default_window(base);
            WindowLevel::new(w.unwrap_or(d.window()), l.unwrap_or(d.level)).map_err(|e| NavError::Invalid(e.to_string()))?
        }
    };
    let plane = base.extract_slice(axis, index, wl).map_err(|e| NavError::Invalid(e.to_string()))?;
    let Some(name) = q.overlay.as_deref().filter(|s| !s.is_empty() && *s != "none") else {
        return Ok(Plane { width: plane.width, height: plane.height, data: plane.data.iter().map(|&g| [g, g, g]).collect() });
    };
    let (over, over_frame) = pick(vols, name)?;
    let opacity = q.opacity.unwrap_or(0.5);
    let colormap = if over.modality() == petnav_core::Modality::Pet { Colormap::Hot } else { Colormap::Gray };
    let over_wl = if over.modality() == petnav_core::Modality::Pet { auto_window(over) } else { default_window(over) };
    let overlay = match (base_frame, over_frame) {
        (a, b) if a == b => base.resample_slice(axis, index, over, |p| Some(*p), over_wl),
        (Frame::Interventional, Frame::Compensated) => {
            let reg = registration.ok_or_else(|| NavError::Invalid("overlay across frames needs registration".into()))?;
            base.resample_slice(axis, index, over, |p| Some(reg.map_to_comp(p)), over_wl)
        }
        _ => {
            let reg = registration.ok_or_else(|| NavError::Invalid("overlay across frames needs registration".into()))?;
            base.resample_slice(axis, index, over, |p: &Vec3<f64>| Some(reg.map_to_interventional(p)), over_wl)
        }
    }
    .map_err(|e| NavError::Invalid(e.to_string()))?;
    blend_overlay(&plane, &overlay, opacity, colormap).map_err(|e| NavError::Invalid(e.to_string()))
}

pub fn encode_png(plane: &Plane<[f64; 3]>) -> Vec<u8> {
    let bytes: Vec<u8> =
        plane.data.iter().flat_map(|px| px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)).collect();
    let img = image::RgbImage::from_raw(plane.width as u32, plane.height as u32, bytes).expect("buffer matches shape");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}
