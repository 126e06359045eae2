//! Side-by-side comparison panels rendered straight to grayscale pixels.

use crate::error::{Error, Result};
use crate::metrics::metric_triple;
use ndarray::Array2;
use std::path::Path;

/// 3x5 bitmap glyphs, row-major bits, for the caption strings we emit.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'N' => [0b101, 0b111, 0b111, 0b111, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'R' => [0b110, 0b101, 0b110, 0b101, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '=' => [0b000, 0b111, 0b000, 0b111, 0b000],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => [0; 5],
    }
}

fn draw_text(canvas: &mut Array2<f64>, row: usize, col: usize, text: &str, scale: usize) {
    let (h, w) = canvas.dim();
    for (k, c) in text.chars().enumerate() {
        let g = glyph(c.to_ascii_uppercase());
        for (gr, bits) in g.iter().enumerate() {
            for gc in 0..3 {
                if bits & (0b100 >> gc) == 0 {
                    continue;
                }
                for sr in 0..scale {
                    for sc in 0..scale {
                        let r = row + gr * scale + sr;
                        let cc = col + k * 4 * scale + gc * scale + sc;
                        if r < h && cc < w {
                            canvas[[r, cc]] = 1.0;
                        }
                    }
                }
            }
        }
    }
}

pub struct FigurePanel {
    pub label: String,
    pub pixels: Array2<f64>,
    /// PSNR against the clean reference; None for the reference itself.
    pub psnr: Option<f64>,
}

/// Lay panels out left to right over a caption strip; output width is
/// exactly `panels.len() * side`.
pub fn compose_figure(panels: &[FigurePanel]) -> Result<Array2<f64>> {
    if panels.is_empty() {
        return Err(Error::Config("figure needs at least one panel".into()));
    }
    let side = panels[0].pixels.dim().0;
    for p in panels {
        if p.pixels.dim() != (side, side) {
            return Err(Error::Shape(format!(
                "panel {} is {:?}, expected {side}x{side}",
                p.label,
                p.pixels.dim()
            )));
        }
    }
    let scale = (side / 64).max(1);
    let caption_h = 8 * scale;
    let mut canvas = Array2::<f64>::zeros((side + caption_h, panels.len() * side));
    for (i, p) in panels.iter().enumerate() {
        let col0 = i * side;
        for r in 0..side {
            for c in 0..side {
                canvas[[r, col0 + c]] = p.pixels[[r, c]].clamp(0.0, 1.0);
            }
        }
        let caption = match p.psnr {
            Some(v) if v.is_finite() => format!("{} PSNR={:.2}", p.label, v),
            Some(_) => format!("{} PSNR=INF", p.label),
            None => p.label.clone(),
        };
        draw_text(&mut canvas, side + scale, col0 + scale, &caption, scale);
    }
    Ok(canvas)
}

/// Clean / noisy / denoised triptych; caption PSNRs come from the same
/// metric code as the evaluation reports.
pub fn comparison_figure(
    clean: &Array2<f64>,
    noisy: &Array2<f64>,
    denoised: &Array2<f64>,
) -> Result<Array2<f64>> {
    let noisy_m = metric_triple(noisy, clean)?;
    let den_m = metric_triple(denoised, clean)?;
    compose_figure(&[
        FigurePanel {
            label: "CLEAN".into(),
            pixels: clean.clone(),
            psnr: None,
        },
        FigurePanel {
            label: "NOISY".into(),
            pixels: noisy.clone(),
            psnr: Some(noisy_m.psnr),
        },
        FigurePanel {
            label: "DENOISED".into(),
            pixels: denoised.clone(),
            psnr: Some(den_m.psnr),
        },
    ])
}

pub fn save_png(path: &Path, pixels: &Array2<f64>) -> Result<()> {
    let (h, w) = pixels.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let v = (pixels[[r, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(c as u32, r as u32, image::Luma([v]));
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    img.save(path).map_err(|e| Error::BadImage {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom_image;

    #[test]
    fn figure_width_is_three_panels() {
        let clean = phantom_image(64, 5);
        let fig = comparison_figure(&clean, &clean, &clean).unwrap();
        assert_eq!(fig.dim().1, 3 * 64);
        assert!(fig.dim().0 >= 64);
        assert!(fig.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn caption_psnr_matches_metric_code() {
        let clean = phantom_image(64, 5);
        let mut noisy = clean.clone();
        noisy[[10, 10]] += 0.5;
        // distinct noisy panel changes pixels relative to an all-clean figure
        let a = comparison_figure(&clean, &clean, &clean).unwrap();
        let b = comparison_figure(&clean, &noisy, &clean).unwrap();
        assert!(a.iter().zip(b.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn mismatched_panel_rejected() {
        let clean = phantom_image(64, 5);
        let small = phantom_image(32, 5);
        assert!(comparison_figure(&clean, &small, &clean).is_err());
    }

    #[test]
    fn png_roundtrip() {
        let clean = phantom_image(32, 9);
        let fig = comparison_figure(&clean, &clean, &clean).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fig.png");
        save_png(&path, &fig).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.width() as usize, fig.dim().1);
        assert_eq!(img.height() as usize, fig.dim().0);
    }
}
