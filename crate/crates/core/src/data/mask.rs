use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Value written into missing pixels.
pub const FILL_VALUE: f64 = 0.5;

/// Axis-aligned pixel box, half-open: `x0 <= x < x1`, `y0 <= y < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BoundingBox { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= w && self.y1 <= h
    }
}

/// Binary `H×W` grid where 1 marks a missing pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    grid: Vec<u8>,
}

impl Mask {
    pub fn from_grid(h: usize, w: usize, grid: Vec<u8>) -> Result<Self> {
        if grid.len() != h * w || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "mask grid of {} cells does not match {h}×{w}",
                grid.len()
            )));
        }
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::shape("mask values must be 0 or 1"));
        }
        Ok(Mask { h, w, grid })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            grid: vec![0; h * w],
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            grid: vec![1; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn is_missing(&self, y: usize, x: usize) -> bool {
        self.grid[y * self.w + x] == 1
    }

    pub fn count(&self) -> usize {
        self.grid.iter().map(|&v| v as usize).sum()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / (self.h * self.w) as f64
    }

    /// Tight bounding box of the missing pixels.
    pub fn bounds(&self) -> Option<BoundingBox> {
        let mut b: Option<BoundingBox> = None;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.is_missing(y, x) {
                    let nb = b.get_or_insert(BoundingBox::new(x, y, x + 1, y + 1));
                    nb.x0 = nb.x0.min(x);
                    nb.y0 = nb.y0.min(y);
                    nb.x1 = nb.x1.max(x + 1);
                    nb.y1 = nb.y1.max(y + 1);
                }
            }
        }
        b
    }

    /// Per-patch flags: a patch counts as missing when more than half of
    /// its pixels are.
    pub fn patch_mask(&self, p: usize) -> Result<Vec<bool>> {
        if p == 0 || !self.h.is_multiple_of(p) || !self.w.is_multiple_of(p) {
            return Err(Error::shape(format!(
                "patch size {p} does not divide mask {}×{}",
                self.h, self.w
            )));
        }
        let (gh, gw) = (self.h / p, self.w / p);
        let mut flags = Vec::with_capacity(gh * gw);
        for py in 0..gh {
            for px in 0..gw {
                let mut n = 0;
                for y in py * p..(py + 1) * p {
                    for x in px * p..(px + 1) * p {
                        n += self.grid[y * self.w + x] as usize;
                    }
                }
                flags.push(2 * n > p * p);
            }
        }
        Ok(flags)
    }

    /// The mask broadcast over `c` channels as a `c×H×W` tensor of 0/1.
    pub fn to_tensor<T: Scalar>(&self, c: usize) -> Tensor<T> {
        let plane = self.h * self.w;
        Tensor::from_fn(&[c, self.h, self.w], |i| {
            if self.grid[i % plane] == 1 {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Centered square covering `area_fraction` of the image. Side
/// `s = round(√(f·H·W))`; when `H−s` (or `W−s`) is odd the extra row
/// (column) falls below (right of) the square.
pub fn center_mask(h: usize, w: usize, area_fraction: f64) -> Result<Mask> {
    if !(area_fraction > 0.0 && area_fraction <= 1.0) {
        return Err(Error::config(format!(
            "mask area fraction must be in (0, 1], got {area_fraction}"
        )));
    }
    let s = (area_fraction * (h * w) as f64).sqrt().round() as usize;
    if s == 0 {
        return Err(Error::config(format!(
            "center mask for {h}×{w} at {area_fraction} has zero side"
        )));
    }
    if s > h || s > w {
        return Err(Error::config(format!(
            "center mask side {s} exceeds image {h}×{w}"
        )));
    }
    let (top, left) = ((h - s) / 2, (w - s) / 2);
    let mut mask = Mask::empty(h, w);
    for y in top..top + s {
        mask.grid[y * w + left..y * w + left + s].fill(1);
    }
    Ok(mask)
}

/// Union of the object boxes.
pub fn object_mask(h: usize, w: usize, boxes: &[BoundingBox]) -> Result<Mask> {
    if boxes.is_empty() {
        return Err(Error::config("object mask needs at least one box"));
    }
    let mut mask = Mask::empty(h, w);
    for b in boxes {
        if !b.fits(h, w) {
            return Err(Error::shape(format!("box {b:?} outside {h}×{w} image")));
        }
        for y in b.y0..b.y1 {
            mask.grid[y * w + b.x0..y * w + b.x1].fill(1);
        }
    }
    Ok(mask)
}

/// Writes [`FILL_VALUE`] into every missing pixel of a `C×H×W` image.
pub fn apply_mask<T: Scalar>(image: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    let [c, h, w] = image.dims3()?;
    if (h, w) != (mask.h, mask.w) {
        return Err(Error::shape(format!(
            "image {c}×{h}×{w} does not match mask {}×{}",
            mask.h, mask.w
        )));
    }
    let fill = T::lit(FILL_VALUE);
    let plane = h * w;
    let mut out = image.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask.grid[i % plane] == 1 {
            *v = fill;
        }
    }
    Ok(out)
}
