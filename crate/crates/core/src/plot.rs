//! Minimal static charts rendered straight to PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::annotations::write_png;
use crate::error::Result;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([20, 20, 20]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
pub const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

/// 5x7 glyphs, one byte per row, high five bits used.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        '0' => [0x70, 0x88, 0x98, 0xA8, 0xC8, 0x88, 0x70],
        '1' => [0x20, 0x60, 0x20, 0x20, 0x20, 0x20, 0x70],
        '2' => [0x70, 0x88, 0x08, 0x10, 0x20, 0x40, 0xF8],
        '3' => [0xF8, 0x10, 0x20, 0x10, 0x08, 0x88, 0x70],
        '4' => [0x10, 0x30, 0x50, 0x90, 0xF8, 0x10, 0x10],
        '5' => [0xF8, 0x80, 0xF0, 0x08, 0x08, 0x88, 0x70],
        '6' => [0x30, 0x40, 0x80, 0xF0, 0x88, 0x88, 0x70],
        '7' => [0xF8, 0x08, 0x10, 0x20, 0x40, 0x40, 0x40],
        '8' => [0x70, 0x88, 0x88, 0x70, 0x88, 0x88, 0x70],
        '9' => [0x70, 0x88, 0x88, 0x78, 0x08, 0x10, 0x60],
        'A' => [0x70, 0x88, 0x88, 0xF8, 0x88, 0x88, 0x88],
        'B' => [0xF0, 0x88, 0x88, 0xF0, 0x88, 0x88, 0xF0],
        'C' => [0x70, 0x88, 0x80, 0x80, 0x80, 0x88, 0x70],
        'D' => [0xE0, 0x90, 0x88, 0x88, 0x88, 0x90, 0xE0],
        'E' => [0xF8, 0x80, 0x80, 0xF0, 0x80, 0x80, 0xF8],
        'F' => [0xF8, 0x80, 0x80, 0xF0, 0x80, 0x80, 0x80],
        'G' => [0x70, 0x88, 0x80, 0xB8, 0x88, 0x88, 0x78],
        'H' => [0x88, 0x88, 0x88, 0xF8, 0x88, 0x88, 0x88],
        'I' => [0x70, 0x20, 0x20, 0x20, 0x20, 0x20, 0x70],
        'J' => [0x38, 0x10, 0x10, 0x10, 0x10, 0x90, 0x60],
        'K' => [0x88, 0x90, 0xA0, 0xC0, 0xA0, 0x90, 0x88],
        'L' => [0x80, 0x80, 0x80, 0x80, 0x80, 0x80, 0xF8],
        'M' => [0x88, 0xD8, 0xA8, 0xA8, 0x88, 0x88, 0x88],
        'N' => [0x88, 0x88, 0xC8, 0xA8, 0x98, 0x88, 0x88],
        'O' => [0x70, 0x88, 0x88, 0x88, 0x88, 0x88, 0x70],
        'P' => [0xF0, 0x88, 0x88, 0xF0, 0x80, 0x80, 0x80],
        'Q' => [0x70, 0x88, 0x88, 0x88, 0xA8, 0x90, 0x68],
        'R' => [0xF0, 0x88, 0x88, 0xF0, 0xA0, 0x90, 0x88],
        'S' => [0x78, 0x80, 0x80, 0x70, 0x08, 0x08, 0xF0],
        'T' => [0xF8, 0x20, 0x20, 0x20, 0x20, 0x20, 0x20],
        'U' => [0x88, 0x88, 0x88, 0x88, 0x88, 0x88, 0x70],
        'V' => [0x88, 0x88, 0x88, 0x88, 0x88, 0x50, 0x20],
        'W' => [0x88, 0x88, 0x88, 0xA8, 0xA8, 0xA8, 0x50],
        'X' => [0x88, 0x88, 0x50, 0x20, 0x50, 0x88, 0x88],
        'Y' => [0x88, 0x88, 0x88, 0x50, 0x20, 0x20, 0x20],
        'Z' => [0xF8, 0x08, 0x10, 0x20, 0x40, 0x80, 0xF8],
        '.' => [0, 0, 0, 0, 0, 0x60, 0x60],
        ',' => [0, 0, 0, 0, 0x60, 0x20, 0x40],
        ':' => [0, 0x60, 0x60, 0, 0x60, 0x60, 0],
        '-' => [0, 0, 0, 0xF8, 0, 0, 0],
        '+' => [0, 0x20, 0x20, 0xF8, 0x20, 0x20, 0],
        '_' => [0, 0, 0, 0, 0, 0, 0xF8],
        '/' => [0, 0x08, 0x10, 0x20, 0x40, 0x80, 0],
        '%' => [0xC0, 0xC8, 0x10, 0x20, 0x40, 0x98, 0x18],
        '(' => [0x10, 0x20, 0x40, 0x40, 0x40, 0x20, 0x10],
        ')' => [0x40, 0x20, 0x10, 0x10, 0x10, 0x20, 0x40],
        '=' => [0, 0, 0xF8, 0, 0xF8, 0, 0],
        _ => [0; 7],
    }
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Canvas { img: RgbImage::from_pixel(w, h, WHITE) }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>, thick: i64) {
        let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let (x, y) = ((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64);
            self.rect(x - thick / 2, y - thick / 2, x + (thick - 1) / 2, y + (thick - 1) / 2, c);
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb<u8>) {
        for (i, ch) in s.chars().enumerate() {
            for (row, bits) in glyph(ch).iter().enumerate() {
                for col in 0..5 {
                    if bits & (0x80 >> col) != 0 {
                        self.put(x + 6 * i as i64 + col, y + row as i64, c);
                    }
                }
            }
        }
    }

    fn text_width(s: &str) -> i64 {
        6 * s.chars().count() as i64
    }
}

const W: u32 = 640;
const H: u32 = 480;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn frame(c: &mut Canvas, title: &str, x_label: &str, y_label: &str, y_max: f64) -> (f64, f64, f64, f64) {
    let (x0, x1, y0, y1) = (LEFT, W as f64 - RIGHT, H as f64 - BOTTOM, TOP);
    for k in 0..=5 {
        let f = k as f64 / 5.0;
        let y = y0 + f * (y1 - y0);
        c.line((x0, y), (x1, y), GRID, 1);
        let label = format_tick(f * y_max);
        c.text(x0 as i64 - 8 - Canvas::text_width(&label), y as i64 - 3, &label, BLACK);
    }
    c.line((x0, y0), (x1, y0), BLACK, 1);
    c.line((x0, y0), (x0, y1), BLACK, 1);
    c.text(((x0 + x1) / 2.0) as i64 - Canvas::text_width(title) / 2, 14, title, BLACK);
    c.text(((x0 + x1) / 2.0) as i64 - Canvas::text_width(x_label) / 2, H as i64 - 18, x_label, BLACK);
    c.text(6, TOP as i64 - 20, y_label, BLACK);
    (x0, x1, y0, y1)
}

fn format_tick(v: f64) -> String {
    if v.fract().abs() < 1e-9 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

/// Precision-recall style chart: one polyline per series, axes in [0, 1].
pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let mut c = Canvas::new(W, H);
    let (x0, x1, y0, y1) = frame(&mut c, title, x_label, y_label, 1.0);
    for k in 0..=5 {
        let f = k as f64 / 5.0;
        let x = x0 + f * (x1 - x0);
        let label = format_tick(f);
        c.text(x as i64 - Canvas::text_width(&label) / 2, y0 as i64 + 8, &label, BLACK);
    }
    let map = |(x, y): (f64, f64)| (x0 + x.clamp(0.0, 1.0) * (x1 - x0), y0 + y.clamp(0.0, 1.0) * (y1 - y0));
    for (i, (name, pts)) in series.iter().enumerate() {
        let col = Rgb(PALETTE[i % PALETTE.len()]);
        for w in pts.windows(2) {
            c.line(map(w[0]), map(w[1]), col, 2);
        }
        let ly = TOP as i64 + 16 * i as i64;
        c.rect(x1 as i64 + 12, ly, x1 as i64 + 24, ly + 6, col);
        c.text(x1 as i64 + 30, ly, name, BLACK);
    }
    write_png(path, &c.img)
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn bar_chart(path: &Path, title: &str, y_label: &str, groups: &[String], series: &[(String, Vec<f64>)], y_max: f64) -> Result<()> {
    let mut c = Canvas::new(W, H);
    let (x0, x1, y0, y1) = frame(&mut c, title, "", y_label, y_max);
    let ng = groups.len().max(1) as f64;
    let ns = series.len().max(1) as f64;
    let gw = (x1 - x0) / ng;
    let bw = (gw * 0.8 / ns).max(1.0);
    for (g, name) in groups.iter().enumerate() {
        let gx = x0 + g as f64 * gw + gw * 0.1;
        for (s, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(g).copied().unwrap_or(0.0).clamp(0.0, y_max);
            let top = y0 + (v / y_max) * (y1 - y0);
            let bx = gx + s as f64 * bw;
            c.rect(bx as i64, top as i64, (bx + bw) as i64 - 1, y0 as i64 - 1, Rgb(PALETTE[s % PALETTE.len()]));
        }
        let label: String = name.chars().take((gw / 6.0) as usize).collect();
        c.text((gx + gw * 0.4) as i64 - Canvas::text_width(&label) / 2, y0 as i64 + 8, &label, BLACK);
    }
    for (i, (name, _)) in series.iter().enumerate() {
        let ly = TOP as i64 + 16 * i as i64;
        c.rect(x1 as i64 + 12, ly, x1 as i64 + 24, ly + 6, Rgb(PALETTE[i % PALETTE.len()]));
        c.text(x1 as i64 + 30, ly, name, BLACK);
    }
    write_png(path, &c.img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_render() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pr.png");
        line_chart(&p, "PR", "RECALL", "PRECISION", &[("a".into(), vec![(0.0, 1.0), (0.5, 0.8), (1.0, 0.4)])]).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (W, H));
        assert!(img.pixels().any(|px| px.0 == PALETTE[0]));
        let b = dir.path().join("bars.png");
        bar_chart(&b, "AP", "AP", &["hand".into(), "side".into()], &[("x".into(), vec![90.0, 50.0])], 100.0).unwrap();
        assert!(b.exists());
    }
}
