//! F1 heatmap and fitted-surface maps as SVG and PNG.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::stress::safe::SafeRegion;
use crate::stress::surface::{evaluate_surface, SurfaceFit};

const VIRIDIS: [(f64, [u8; 3]); 5] = [
    (0.0, [68, 1, 84]),
    (0.25, [59, 82, 139]),
    (0.5, [33, 145, 140]),
    (0.75, [94, 201, 98]),
    (1.0, [253, 231, 37]),
];
const MISSING: [u8; 3] = [200, 200, 200];

fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    for w in VIRIDIS.windows(2) {
        let ((a, ca), (b, cb)) = (w[0], w[1]);
        if t <= b {
            let s = (t - a) / (b - a);
            return [0, 1, 2].map(|k| (ca[k] as f64 + s * (cb[k] as f64 - ca[k] as f64)).round() as u8);
        }
    }
    VIRIDIS[4].1
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn unique_sorted(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut u: Vec<f64> = v.collect();
    u.sort_by(f64::total_cmp);
    u.dedup();
    u
}

const LEFT: f64 = 80.0;
const TOP: f64 = 40.0;
const SIZE: f64 = 420.0;
const WIDTH: f64 = LEFT + SIZE + 110.0;
const HEIGHT: f64 = TOP + SIZE + 60.0;

fn svg_frame(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{title}</text>"#,
        LEFT + SIZE / 2.0
    );
}

fn svg_axes(out: &mut String, te_ticks: &[(f64, f64)], ti_ticks: &[(f64, f64)]) {
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    for &(x, v) in te_ticks {
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            TOP + SIZE + 16.0,
            fmt_tick(v)
        );
    }
    for &(y, v) in ti_ticks {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">TE (ms)</text>"#,
        LEFT + SIZE / 2.0,
        TOP + SIZE + 40.0
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">TI (ms)</text>"#,
        TOP + SIZE / 2.0,
        TOP + SIZE / 2.0
    );
}

fn svg_colorbar(out: &mut String, lo: f64, hi: f64, label: &str) {
    let x = LEFT + SIZE + 25.0;
    let steps = 50;
    let h = SIZE / steps as f64;
    for k in 0..steps {
        let t = 1.0 - (k as f64 + 0.5) / steps as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{:.2}" width="18" height="{:.2}" fill="{}"/>"#,
            TOP + k as f64 * h,
            h + 0.3,
            hex(colormap(t))
        );
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 22.0, TOP + 10.0, fmt_val(hi));
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 22.0, TOP + SIZE, fmt_val(lo));
    let _ = writeln!(out, r#"<text x="{x}" y="{:.1}">{label}</text>"#, TOP - 6.0);
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

fn fmt_val(v: f64) -> String {
    format!("{v:.3}")
}

/// Mean F1 per design point; `samples` holds `(te, ti, f1)`.
pub fn heatmap_svg(samples: &[(f64, f64, f64)]) -> String {
    let tes = unique_sorted(samples.iter().map(|s| s.0));
    let tis = unique_sorted(samples.iter().map(|s| s.1));
    let (cw, ch) = (SIZE / tes.len().max(1) as f64, SIZE / tis.len().max(1) as f64);
    let mut out = String::new();
    svg_frame(&mut out, "Mean F1 per design point");
    for (i, &te) in tes.iter().enumerate() {
        for (j, &ti) in tis.iter().enumerate() {
            let x = LEFT + i as f64 * cw;
            let y = TOP + SIZE - (j + 1) as f64 * ch;
            let value = samples.iter().find(|s| s.0 == te && s.1 == ti).map(|s| s.2);
            let fill = value.map_or(MISSING, colormap);
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{cw:.2}" height="{ch:.2}" fill="{}" stroke="white"/>"#,
                hex(fill)
            );
            if let Some(v) = value {
                let ink = if v > 0.6 { "black" } else { "white" };
                let _ = writeln!(
                    out,
                    r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10" fill="{ink}">{v:.2}</text>"#,
                    x + cw / 2.0,
                    y + ch / 2.0 + 4.0
                );
            }
        }
    }
    let te_ticks: Vec<(f64, f64)> = tes.iter().enumerate().map(|(i, &v)| (LEFT + (i as f64 + 0.5) * cw, v)).collect();
    let ti_ticks: Vec<(f64, f64)> = tis
        .iter()
        .enumerate()
        .map(|(j, &v)| (TOP + SIZE - (j as f64 + 0.5) * ch, v))
        .collect();
    svg_axes(&mut out, &te_ticks, &ti_ticks);
    svg_colorbar(&mut out, 0.0, 1.0, "F1");
    out.push_str("</svg>\n");
    out
}

fn surface_grid(fit: &SurfaceFit, safe: &SafeRegion) -> (Vec<f64>, f64, f64) {
    let vals: Vec<f64> = safe
        .te
        .iter()
        .flat_map(|&a| safe.ti.iter().map(move |&b| (a, b)))
        .map(|(a, b)| evaluate_surface(fit, a, b))
        .collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (vals, lo, hi)
}

const LEVELS: f64 = 10.0;

fn band(v: f64, lo: f64, hi: f64) -> f64 {
    if hi - lo <= 1e-12 {
        return 0.5;
    }
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((t * LEVELS).floor().min(LEVELS - 1.0) + 0.5) / LEVELS
}

/// Banded map of the fitted surface with the safe-region outline and the
/// baseline point.
pub fn contour_svg(fit: &SurfaceFit, safe: &SafeRegion) -> String {
    let (vals, lo, hi) = surface_grid(fit, safe);
    let (nt, ni) = (safe.te.len(), safe.ti.len());
    let (cw, ch) = (SIZE / nt as f64, SIZE / ni as f64);
    let mut out = String::new();
    svg_frame(
        &mut out,
        &format!("Fitted F1 surface (R² = {:.3}), safe region for drop {}", fit.r_squared, safe.drop),
    );
    // one rect per run of equal bands along TE
    for j in 0..ni {
        let mut i = 0;
        while i < nt {
            let b = band(vals[i * ni + j], lo, hi);
            let mut k = i + 1;
            while k < nt && band(vals[k * ni + j], lo, hi) == b {
                k += 1;
            }
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                LEFT + i as f64 * cw,
                TOP + SIZE - (j + 1) as f64 * ch,
                (k - i) as f64 * cw + 0.3,
                ch + 0.3,
                hex(colormap(b))
            );
            i = k;
        }
    }
    let mut path = String::new();
    for i in 0..nt {
        for j in 0..ni {
            let s = safe.is_safe(i, j);
            let x = LEFT + i as f64 * cw;
            let y = TOP + SIZE - j as f64 * ch;
            if i + 1 < nt && safe.is_safe(i + 1, j) != s {
                let _ = write!(path, "M{:.2} {:.2}V{:.2}", x + cw, y, y - ch);
            }
            if j + 1 < ni && safe.is_safe(i, j + 1) != s {
                let _ = write!(path, "M{:.2} {:.2}H{:.2}", x, y - ch, x + cw);
            }
        }
    }
    if !path.is_empty() {
        let _ = writeln!(out, r#"<path d="{path}" fill="none" stroke="black" stroke-width="2"/>"#);
    }
    let to_x = |te: f64| LEFT + SIZE * (te - safe.te[0]) / (safe.te[nt - 1] - safe.te[0]);
    let to_y = |ti: f64| TOP + SIZE - SIZE * (ti - safe.ti[0]) / (safe.ti[ni - 1] - safe.ti[0]);
    let _ = writeln!(
        out,
        r#"<circle cx="{:.2}" cy="{:.2}" r="5" fill="white" stroke="black"/>"#,
        to_x(safe.baseline_te),
        to_y(safe.baseline_ti)
    );
    let ticks = |v: &[f64], f: &dyn Fn(f64) -> f64| -> Vec<(f64, f64)> {
        (0..5).map(|k| {
            let val = v[0] + (v[v.len() - 1] - v[0]) * k as f64 / 4.0;
            (f(val), val)
        })
        .collect()
    };
    svg_axes(&mut out, &ticks(&safe.te, &to_x), &ticks(&safe.ti, &to_y));
    svg_colorbar(&mut out, lo, hi, "F1 fit");
    out.push_str("</svg>\n");
    out
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

pub fn heatmap_png(samples: &[(f64, f64, f64)], path: &Path) -> Result<()> {
    let tes = unique_sorted(samples.iter().map(|s| s.0));
    let tis = unique_sorted(samples.iter().map(|s| s.1));
    let cell = 48u32;
    let (w, h) = (tes.len() as u32 * cell, tis.len() as u32 * cell);
    let img = RgbImage::from_fn(w.max(1), h.max(1), |x, y| {
        let i = (x / cell) as usize;
        let j = tis.len().saturating_sub(1 + (y / cell) as usize);
        let on_edge = x % cell == 0 || y % cell == 0;
        if on_edge {
            return Rgb([255, 255, 255]);
        }
        let v = samples
            .iter()
            .find(|s| Some(&s.0) == tes.get(i) && Some(&s.1) == tis.get(j))
            .map(|s| s.2);
        Rgb(v.map_or(MISSING, colormap))
    });
    save_png(&img, path)
}

pub fn contour_png(fit: &SurfaceFit, safe: &SafeRegion, path: &Path) -> Result<()> {
    let (vals, lo, hi) = surface_grid(fit, safe);
    let (nt, ni) = (safe.te.len(), safe.ti.len());
    let px = 4u32;
    let img = RgbImage::from_fn(nt as u32 * px, ni as u32 * px, |x, y| {
        let i = (x / px) as usize;
        let j = ni - 1 - (y / px) as usize;
        let s = safe.is_safe(i, j);
        let boundary = (i + 1 < nt && safe.is_safe(i + 1, j) != s && x % px == px - 1)
            || (j + 1 < ni && safe.is_safe(i, j + 1) != s && y % px == 0);
        if boundary {
            Rgb([0, 0, 0])
        } else {
            Rgb(colormap(band(vals[i * ni + j], lo, hi)))
        }
    });
    save_png(&img, path)
}

/// Writes `f1_heatmap.{svg,png}` and `surface_contour.{svg,png}` into `dir`.
pub fn write_plots(dir: &Path, samples: &[(f64, f64, f64)], fit: &SurfaceFit, safe: &SafeRegion) -> Result<()> {
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("f1_heatmap.svg", heatmap_svg(samples))?;
    write("surface_contour.svg", contour_svg(fit, safe))?;
    heatmap_png(samples, &dir.join("f1_heatmap.png"))?;
    contour_png(fit, safe, &dir.join("surface_contour.png"))
}
