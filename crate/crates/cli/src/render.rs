//! Rendering stored tensors to viewable images: grayscale PGM with fixed
//! v → round(255·v) quantization, or a diverging blue-white-red PPM for
//! signed raw maps (zero anchored to white).

use std::path::Path;

use anyhow::{Context, Result};
use cfbase_core::attribution::normalize_attribution;
use cfbase_core::io::{read_tensor, write_pgm, write_ppm_diverging};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Colormap {
    Gray,
    Diverging,
}

impl Colormap {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gray" => Ok(Colormap::Gray),
            "diverging" => Ok(Colormap::Diverging),
            other => anyhow::bail!("unknown colormap {other:?} (gray or diverging)"),
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            Colormap::Gray => "pgm",
            Colormap::Diverging => "ppm",
        }
    }
}

/// Renders one stored tensor. Gray writes the values as-is (clamped to
/// [0,1]); diverging maps signed values onto blue-white-red around zero.
pub fn render_map(src: &Path, colormap: Colormap, dst: &Path) -> Result<()> {
    let map = read_tensor(src).with_context(|| format!("reading map {}", src.display()))?;
    match colormap {
        Colormap::Gray => write_pgm(dst, &map)?,
        Colormap::Diverging => write_ppm_diverging(dst, &map)?,
    }
    Ok(())
}

/// Renders a raw attribution map twice: the diverging view of the signed
/// values, and a grayscale view of its normalized (abs, capped, min-max)
/// form. Output names start with `stem` so callers can avoid collisions
/// with other rendered files. Returns the files written, relative to
/// `render_dir`.
pub fn render_attribution(src: &Path, render_dir: &Path, stem: &str) -> Result<Vec<String>> {
    let raw = read_tensor(src).with_context(|| format!("reading map {}", src.display()))?;
    let ppm_name = format!("{stem}_raw.ppm");
    let pgm_name = format!("{stem}.pgm");
    write_ppm_diverging(&render_dir.join(&ppm_name), &raw)?;
    let normalized = normalize_attribution(&raw);
    write_pgm(&render_dir.join(&pgm_name), &normalized)?;
    Ok(vec![ppm_name, pgm_name])
}
