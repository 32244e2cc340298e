//! File-based plot emission: AUC bar charts and sweep curves rendered
//! directly into PNGs with a small built-in bitmap font.

use std::path::Path;

use crate::error::{arg_err, LabError, Result};
use crate::eval::SweepRow;

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

/// 5x7 glyphs for the label alphabet (lowercase, digits, a few symbols);
/// each byte is one row, low bit = rightmost column.
fn glyph(ch: char) -> [u8; GLYPH_H] {
    match ch {
        'a' => [0x00, 0x00, 0x0e, 0x01, 0x0f, 0x11, 0x0f],
        'b' => [0x10, 0x10, 0x1e, 0x11, 0x11, 0x11, 0x1e],
        'c' => [0x00, 0x00, 0x0e, 0x11, 0x10, 0x11, 0x0e],
        'd' => [0x01, 0x01, 0x0f, 0x11, 0x11, 0x11, 0x0f],
        'e' => [0x00, 0x00, 0x0e, 0x11, 0x1f, 0x10, 0x0e],
        'f' => [0x06, 0x09, 0x08, 0x1c, 0x08, 0x08, 0x08],
        'g' => [0x00, 0x0f, 0x11, 0x11, 0x0f, 0x01, 0x0e],
        'h' => [0x10, 0x10, 0x1e, 0x11, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0c, 0x04, 0x04, 0x04, 0x0e],
        'j' => [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0c],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0c, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e],
        'm' => [0x00, 0x00, 0x1a, 0x15, 0x15, 0x15, 0x15],
        'n' => [0x00, 0x00, 0x1e, 0x11, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0e, 0x11, 0x11, 0x11, 0x0e],
        'p' => [0x00, 0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10],
        'q' => [0x00, 0x0f, 0x11, 0x11, 0x0f, 0x01, 0x01],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0f, 0x10, 0x0e, 0x01, 0x1e],
        't' => [0x08, 0x08, 0x1c, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0d],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0a, 0x04],
        'w' => [0x00, 0x00, 0x15, 0x15, 0x15, 0x15, 0x0a],
        'x' => [0x00, 0x00, 0x11, 0x0a, 0x04, 0x0a, 0x11],
        'y' => [0x00, 0x11, 0x11, 0x11, 0x0f, 0x01, 0x0e],
        'z' => [0x00, 0x00, 0x1f, 0x02, 0x04, 0x08, 0x1f],
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        '-' => [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        ' ' => [0x00; GLYPH_H],
        _ => [0x1f, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1f], // unknown box
    }
}

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[255, 255, 255]; width * height],
        }
    }

    fn put(&mut self, x: isize, y: isize, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = color;
        }
    }

    fn fill_rect(&mut self, x0: isize, y0: isize, w: usize, h: usize, color: [u8; 3]) {
        for dy in 0..h as isize {
            for dx in 0..w as isize {
                self.put(x0 + dx, y0 + dy, color);
            }
        }
    }

    fn hline(&mut self, x0: isize, x1: isize, y: isize, color: [u8; 3]) {
        for x in x0.min(x1)..=x0.max(x1) {
            self.put(x, y, color);
        }
    }

    fn vline(&mut self, x: isize, y0: isize, y1: isize, color: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            self.put(x, y, color);
        }
    }

    fn line(&mut self, x0: isize, y0: isize, x1: isize, y1: isize, color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn text(&mut self, x: isize, y: isize, text: &str, color: [u8; 3]) {
        let mut cx = x;
        for ch in text.chars() {
            let rows = glyph(ch.to_ascii_lowercase());
            for (ry, row) in rows.iter().enumerate() {
                for rx in 0..GLYPH_W {
                    if row >> (GLYPH_W - 1 - rx) & 1 == 1 {
                        self.put(cx + rx as isize, y + ry as isize, color);
                    }
                }
            }
            cx += GLYPH_W as isize + 1;
        }
    }

    /// Vertical text running upward (for bar labels).
    fn text_up(&mut self, x: isize, y: isize, text: &str, color: [u8; 3]) {
        let mut cy = y;
        for ch in text.chars() {
            let rows = glyph(ch.to_ascii_lowercase());
            for (ry, row) in rows.iter().enumerate() {
                for rx in 0..GLYPH_W {
                    if row >> (GLYPH_W - 1 - rx) & 1 == 1 {
                        // Rotate the glyph 90 degrees counterclockwise.
                        self.put(x + ry as isize, cy - rx as isize, color);
                    }
                }
            }
            cy -= GLYPH_W as isize + 1;
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                img.put_pixel(x as u32, y as u32, image::Rgb(self.pixels[y * self.width + x]));
            }
        }
        img.save(path)
            .map_err(|e| LabError::Format(format!("{path:?}: {e}")))
    }
}

const AXIS: [u8; 3] = [40, 40, 40];
const GRID: [u8; 3] = [225, 225, 225];
const BAR: [u8; 3] = [70, 110, 180];
const CURVE_COLORS: [[u8; 3]; 3] = [[70, 110, 180], [190, 80, 60], [60, 150, 90]];

/// Render labeled AUC bars in `[0, 1]` to a PNG.
pub fn auc_bars(path: &Path, bars: &[(String, f64)]) -> Result<()> {
    if bars.is_empty() {
        return Err(arg_err("no bars to plot"));
    }
    let bar_w = 18usize;
    let gap = 10usize;
    let label_h = bars.iter().map(|(l, _)| l.len()).max().unwrap_or(0) * (GLYPH_W + 1) + 12;
    let plot_h = 220usize;
    let left = 48usize;
    let width = left + bars.len() * (bar_w + gap) + 24;
    let height = plot_h + label_h + 24;
    let mut canvas = Canvas::new(width, height);
    let y0 = 12isize;
    let y1 = y0 + plot_h as isize;
    // Gridlines and axis labels at 0, 0.25, .., 1.0.
    for k in 0..=4 {
        let frac = k as f64 / 4.0;
        let y = y1 - (frac * plot_h as f64) as isize;
        canvas.hline(left as isize, (width - 12) as isize, y, GRID);
        canvas.text(4, y - 3, &format!("{frac:.2}"), AXIS);
    }
    canvas.vline(left as isize - 1, y0, y1, AXIS);
    canvas.hline(left as isize - 1, (width - 12) as isize, y1, AXIS);
    for (i, (label, value)) in bars.iter().enumerate() {
        let v = value.clamp(0.0, 1.0);
        let h = (v * plot_h as f64).round() as usize;
        let x = (left + i * (bar_w + gap)) as isize;
        canvas.fill_rect(x, y1 - h as isize, bar_w, h, BAR);
        canvas.text_up(
            x + (bar_w as isize - GLYPH_H as isize) / 2,
            y1 + label_h as isize,
            label,
            AXIS,
        );
    }
    canvas.save(path)
}

/// Render the step-sweep AUC curves (original, removal, forgery) to a PNG.
pub fn sweep_curves(path: &Path, rows: &[SweepRow]) -> Result<()> {
    if rows.len() < 2 {
        return Err(arg_err("sweep needs at least two rows to plot"));
    }
    let plot_w = 360usize;
    let plot_h = 220usize;
    let left = 48usize;
    let bottom = 40usize;
    let width = left + plot_w + 120;
    let height = plot_h + bottom + 24;
    let mut canvas = Canvas::new(width, height);
    let y0 = 12isize;
    let y1 = y0 + plot_h as isize;
    for k in 0..=4 {
        let frac = k as f64 / 4.0;
        let y = y1 - (frac * plot_h as f64) as isize;
        canvas.hline(left as isize, (left + plot_w) as isize, y, GRID);
        canvas.text(4, y - 3, &format!("{frac:.2}"), AXIS);
    }
    canvas.vline(left as isize - 1, y0, y1, AXIS);
    canvas.hline(left as isize - 1, (left + plot_w) as isize, y1, AXIS);
    let x_at = |i: usize| left as isize + (i * plot_w / (rows.len() - 1)) as isize;
    let y_at = |v: f64| y1 - (v.clamp(0.0, 1.0) * plot_h as f64) as isize;
    let series: [(&str, Box<dyn Fn(&SweepRow) -> f64>); 3] = [
        ("original", Box::new(|r: &SweepRow| r.original_auc)),
        ("imp-removal", Box::new(|r: &SweepRow| r.imp_removal_auc)),
        ("imp-forgery", Box::new(|r: &SweepRow| r.imp_forgery_auc)),
    ];
    for (s, (name, get)) in series.iter().enumerate() {
        let color = CURVE_COLORS[s];
        for i in 1..rows.len() {
            canvas.line(
                x_at(i - 1),
                y_at(get(&rows[i - 1])),
                x_at(i),
                y_at(get(&rows[i])),
                color,
            );
        }
        for (i, row) in rows.iter().enumerate() {
            canvas.fill_rect(x_at(i) - 1, y_at(get(row)) - 1, 3, 3, color);
        }
        let ly = y0 + 12 * s as isize;
        canvas.fill_rect((left + plot_w + 10) as isize, ly, 8, 8, color);
        canvas.text((left + plot_w + 22) as isize, ly, name, AXIS);
    }
    for (i, row) in rows.iter().enumerate() {
        canvas.text(
            x_at(i) - 10,
            y1 + 6,
            &format!("{}-{}", row.t_lo, row.t_hi),
            AXIS,
        );
    }
    canvas.save(path)
}
