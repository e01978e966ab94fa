//! Binary PPM images: lattice sample grids and decoded-sample densities.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Result;

pub struct Image {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self { width, height, rgb: fill.repeat(width * height) }
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, c: [u8; 3]) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.set(x, y, c);
            }
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.rgb)?;
        w.flush()?;
        Ok(())
    }
}

const PALETTE: [[u8; 3]; 8] = [
    [20, 20, 20],
    [240, 240, 240],
    [214, 39, 40],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

fn symbol_colour(s: u8, q: usize) -> [u8; 3] {
    if q <= PALETTE.len() {
        PALETTE[s as usize]
    } else {
        let v = (255 * s as usize / (q - 1)) as u8;
        [v, v, v]
    }
}

/// Up to 64 lattice samples tiled eight to a row.
pub fn lattice_grid(samples: &[Vec<u8>], side: usize, q: usize) -> Image {
    const CELL: usize = 4;
    const GAP: usize = 2;
    let n = samples.len().min(64);
    let cols = n.clamp(1, 8);
    let rows = n.div_ceil(cols).max(1);
    let tile = side * CELL + GAP;
    let mut img = Image::new(cols * tile + GAP, rows * tile + GAP, [128, 128, 128]);
    for (k, x) in samples.iter().take(n).enumerate() {
        let (ox, oy) = (GAP + (k % cols) * tile, GAP + (k / cols) * tile);
        for r in 0..side {
            for c in 0..side {
                img.fill_rect(ox + c * CELL, oy + r * CELL, CELL, CELL, symbol_colour(x[r * side + c], q));
            }
        }
    }
    img
}

fn heat(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [(255.0 * t.sqrt()) as u8, (255.0 * t) as u8, (255.0 * t * t) as u8]
}

/// Log-scaled 2-D histogram of the first two coordinates over `[-half_width, half_width]²`.
pub fn density_2d(points: &[Vec<f64>], half_width: f64, bins: usize) -> Image {
    let mut counts = vec![0.0f64; bins * bins];
    let cell = |v: f64| (((v + half_width) / (2.0 * half_width) * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
    for p in points {
        let (x, y) = (cell(p[0]), cell(p[1]));
        counts[(bins - 1 - y) * bins + x] += 1.0;
    }
    let max = counts.iter().cloned().fold(0.0, f64::max);
    let scale = (1.0 + max).ln().max(f64::MIN_POSITIVE);
    const PX: usize = 4;
    let mut img = Image::new(bins * PX, bins * PX, [0, 0, 0]);
    for (i, &c) in counts.iter().enumerate() {
        img.fill_rect((i % bins) * PX, (i / bins) * PX, PX, PX, heat((1.0 + c).ln() / scale));
    }
    img
}

/// Histogram bars of the first coordinate over `[-half_width, half_width]`.
pub fn histogram_1d(points: &[Vec<f64>], half_width: f64, bins: usize) -> Image {
    let mut counts = vec![0usize; bins];
    for p in points {
        let k = (((p[0] + half_width) / (2.0 * half_width) * bins as f64).floor() as isize).clamp(0, bins as isize - 1);
        counts[k as usize] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    const PX: usize = 4;
    const HEIGHT: usize = 128;
    let mut img = Image::new(bins * PX, HEIGHT, [255, 255, 255]);
    for (k, &c) in counts.iter().enumerate() {
        let h = c * HEIGHT / max;
        img.fill_rect(k * PX, HEIGHT - h, PX, h, [31, 119, 180]);
    }
    img
}

/// The density image suited to the dimension of `points`.
pub fn density(points: &[Vec<f64>], half_width: f64) -> Image {
    if points.first().map_or(0, Vec::len) >= 2 {
        density_2d(points, half_width, 64)
    } else {
        histogram_1d(points, half_width, 64)
    }
}
