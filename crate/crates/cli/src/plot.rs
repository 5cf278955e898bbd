//! Fan charts rendered straight into PNG buffers.

use std::path::Path;

use image::{Rgb, RgbImage};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 24;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([160, 160, 160]);
const ENVELOPE: Rgb<u8> = Rgb([198, 219, 239]);
const MEDIAN: Rgb<u8> = Rgb([33, 102, 172]);
const TRUTH: Rgb<u8> = Rgb([20, 20, 20]);

/// One node's series over consecutive steps.
pub struct FanSeries {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub median: Vec<f64>,
    pub truth: Vec<f64>,
}

struct Frame {
    lo: f64,
    hi: f64,
    steps: usize,
}

impl Frame {
    fn x(&self, i: usize) -> i64 {
        let span = (WIDTH - 2 * MARGIN) as f64;
        (MARGIN as f64 + span * i as f64 / (self.steps.max(2) - 1) as f64).round() as i64
    }

    fn y(&self, v: f64) -> i64 {
        let span = (HEIGHT - 2 * MARGIN) as f64;
        (HEIGHT as f64 - MARGIN as f64 - span * (v - self.lo) / (self.hi - self.lo)).round() as i64
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    // Bresenham, drawn two pixels thick
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        put(img, x, y + 1, c);
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

fn polyline(img: &mut RgbImage, f: &Frame, values: &[f64], c: Rgb<u8>) {
    for i in 1..values.len() {
        line(img, (f.x(i - 1), f.y(values[i - 1])), (f.x(i), f.y(values[i])), c);
    }
}

/// Shaded min-max envelope, median line and ground truth.
pub fn render(series: &FanSeries) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let all = series.lower.iter().chain(&series.upper).chain(&series.truth);
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let f = Frame {
        lo: lo - pad,
        hi: hi + pad,
        steps: series.truth.len(),
    };
    for i in 1..f.steps {
        let (xa, xb) = (f.x(i - 1), f.x(i));
        for x in xa..=xb {
            let w = if xb > xa { (x - xa) as f64 / (xb - xa) as f64 } else { 0.0 };
            let lerp = |v: &[f64]| v[i - 1] + w * (v[i] - v[i - 1]);
            let (top, bottom) = (f.y(lerp(&series.upper)), f.y(lerp(&series.lower)));
            for y in top..=bottom {
                put(&mut img, x, y, ENVELOPE);
            }
        }
    }
    let base = (HEIGHT - MARGIN) as i64;
    line(&mut img, (MARGIN as i64, base), ((WIDTH - MARGIN) as i64, base), AXIS);
    line(&mut img, (MARGIN as i64, MARGIN as i64), (MARGIN as i64, base), AXIS);
    polyline(&mut img, &f, &series.truth, TRUTH);
    polyline(&mut img, &f, &series.median, MEDIAN);
    img
}

pub fn save(series: &FanSeries, path: &Path) -> ustd::Result<()> {
    render(series)
        .save(path)
        .map_err(|e| ustd::UstdError::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}
