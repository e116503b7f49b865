//! Dense binary masks, COCO-compatible RLE codecs, polygon rasterization and
//! the geometric primitives (IoU, error region, bbox transforms) used by the
//! samplers, the simulation harness and the evaluator.
//!
//! The RLE string codec and the polygon rasterizer are bit-exact ports of the
//! C `maskApi.c` from the COCO toolkit, so compressed strings and rasterized
//! masks interoperate with every COCO-format dataset.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimsMismatch(u32, u32, u32, u32),
    #[error("RLE counts sum to {got}, expected {expected}")]
    CountSumMismatch { expected: u64, got: u64 },
    #[error("malformed RLE string: {0}")]
    MalformedRleString(String),
    #[error("polygon has {0} vertices, need at least 3")]
    DegeneratePolygon(usize),
    #[error("mask dimensions must be at least 1x1")]
    InvalidDims,
    #[error("bounding box must have positive width and height")]
    InvalidBBox,
    #[error("operation requires a non-empty mask")]
    EmptyMask,
    #[error("box is empty after clamping to image bounds")]
    EmptyAfterClamp,
}

/// Image dimensions in pixels. Both sides are at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskDims {
    pub height: u32,
    pub width: u32,
}

impl MaskDims {
    pub fn new(height: u32, width: u32) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::InvalidDims);
        }
        Ok(Self { height, width })
    }

    pub fn pixel_count(&self) -> usize {
        self.height as usize * self.width as usize
    }
}

/// Dense per-pixel instance mask. Row 0 is the top of the image; pixels are
/// addressed `(row, col)` and stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: MaskDims,
    pixels: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(dims: MaskDims) -> Self {
        Self {
            dims,
            pixels: vec![false; dims.pixel_count()],
        }
    }

    pub fn from_fn(dims: MaskDims, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Self::zeros(dims);
        for r in 0..dims.height {
            for c in 0..dims.width {
                m.set(r, c, f(r, c));
            }
        }
        m
    }

    /// Build from explicit pixels in row-major order.
    pub fn from_pixels(dims: MaskDims, pixels: Vec<bool>) -> Result<Self, MaskError> {
        if pixels.len() != dims.pixel_count() {
            return Err(MaskError::CountSumMismatch {
                expected: dims.pixel_count() as u64,
                got: pixels.len() as u64,
            });
        }
        Ok(Self { dims, pixels })
    }

    pub fn dims(&self) -> MaskDims {
        self.dims
    }

    #[inline]
    pub fn get(&self, row: u32, col: u32) -> bool {
        self.pixels[row as usize * self.dims.width as usize + col as usize]
    }

    #[inline]
    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        self.pixels[row as usize * self.dims.width as usize + col as usize] = value;
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.pixels.iter().any(|&p| p)
    }

    /// Set pixels as `(row, col)` in column-major order. This is the canonical
    /// order used for deterministic uniform sampling over a mask.
    pub fn set_pixels_column_major(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for c in 0..self.dims.width {
            for r in 0..self.dims.height {
                if self.get(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Pixelwise OR with another mask of the same dims.
    pub fn union_with(&mut self, other: &BinaryMask) -> Result<(), MaskError> {
        check_dims(self.dims, other.dims)?;
        for (a, b) in self.pixels.iter_mut().zip(&other.pixels) {
            *a |= b;
        }
        Ok(())
    }
}

/// Run-length encoding of a mask in COLUMN-MAJOR pixel order (COCO
/// convention). The first count is the number of leading zeros and may be 0;
/// no interior count is zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rle {
    pub dims: MaskDims,
    pub counts: Vec<u32>,
}

impl Rle {
    /// Sum of foreground runs.
    pub fn area(&self) -> u64 {
        self.counts
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == 1)
            .map(|(_, &c)| c as u64)
            .sum()
    }
}

/// Axis-aligned bounding box with real-valued coordinates; `x` is the left
/// edge, `y` the top edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, MaskError> {
        if !(w > 0.0 && h > 0.0) {
            return Err(MaskError::InvalidBBox);
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Implicitly closed polygon with at least 3 real-valued vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<(f64, f64)>,
}

impl Polygon {
    pub fn new(vertices: Vec<(f64, f64)>) -> Result<Self, MaskError> {
        if vertices.len() < 3 {
            return Err(MaskError::DegeneratePolygon(vertices.len()));
        }
        Ok(Self { vertices })
    }

    /// Parse the COCO flat `[x0, y0, x1, y1, ...]` form.
    pub fn from_flat(xy: &[f64]) -> Result<Self, MaskError> {
        if xy.len() < 6 || xy.len() % 2 != 0 {
            return Err(MaskError::DegeneratePolygon(xy.len() / 2));
        }
        Ok(Self {
            vertices: xy.chunks(2).map(|p| (p[0], p[1])).collect(),
        })
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }
}

fn check_dims(a: MaskDims, b: MaskDims) -> Result<(), MaskError> {
    if a != b {
        return Err(MaskError::DimsMismatch(a.height, a.width, b.height, b.width));
    }
    Ok(())
}

/// Encode a mask into column-major run lengths.
pub fn rle_encode(mask: &BinaryMask) -> Rle {
    let dims = mask.dims();
    let mut counts = Vec::new();
    let mut prev = false;
    let mut run: u32 = 0;
    for c in 0..dims.width {
        for r in 0..dims.height {
            let v = mask.get(r, c);
            if v != prev {
                counts.push(run);
                run = 0;
                prev = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle { dims, counts }
}

/// Decode column-major run lengths back to a dense mask. Exact inverse of
/// [`rle_encode`].
pub fn rle_decode(rle: &Rle) -> Result<BinaryMask, MaskError> {
    let n = rle.dims.pixel_count() as u64;
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if total != n {
        return Err(MaskError::CountSumMismatch {
            expected: n,
            got: total,
        });
    }
    let mut mask = BinaryMask::zeros(rle.dims);
    let h = rle.dims.height as usize;
    let mut idx: usize = 0;
    let mut v = false;
    for &c in &rle.counts {
        if v {
            for i in idx..idx + c as usize {
                let col = (i / h) as u32;
                let row = (i % h) as u32;
                mask.set(row, col, true);
            }
        }
        idx += c as usize;
        v = !v;
    }
    Ok(mask)
}

/// Compress run lengths into the COCO string form: 5-bit groups offset from
/// ASCII 48 with a continuation bit, counts after the first two stored as
/// deltas against the count two places back.
pub fn rle_compress(rle: &Rle) -> String {
    let mut s = String::new();
    for (i, &cnt) in rle.counts.iter().enumerate() {
        let mut x = if i > 2 {
            (cnt as i64).wrapping_sub(rle.counts[i - 2] as i64)
        } else {
            cnt as i64
        };
        loop {
            let mut c = (x & 0x1f) as u8;
            x >>= 5;
            let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                c |= 0x20;
            }
            s.push((c + 48) as char);
            if !more {
                break;
            }
        }
    }
    s
}

/// Decompress a COCO RLE string. Rejects characters outside the 64-character
/// alphabet and strings that end mid-varint.
pub fn rle_decompress(s: &str, dims: MaskDims) -> Result<Rle, MaskError> {
    let bytes = s.as_bytes();
    let mut counts: Vec<u32> = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let mut x: i64 = 0;
        let mut shift = 0u32;
        loop {
            if i >= bytes.len() {
                return Err(MaskError::MalformedRleString(
                    "truncated varint".to_string(),
                ));
            }
            let b = bytes[i];
            if !(48..112).contains(&b) {
                return Err(MaskError::MalformedRleString(format!(
                    "byte {b} outside alphabet at offset {i}"
                )));
            }
            let c = (b - 48) as i64;
            i += 1;
            x |= (c & 0x1f) << shift;
            shift += 5;
            if c & 0x20 == 0 {
                break;
            }
        }
        // Sign-extend from the top bit of the last 5-bit group.
        if x & (1i64 << (shift - 1)) != 0 {
            x |= !0i64 << shift;
        }
        if counts.len() > 2 {
            x = x.wrapping_add(counts[counts.len() - 2] as i64);
        }
        if x < 0 {
            return Err(MaskError::MalformedRleString(format!(
                "negative run length {x}"
            )));
        }
        counts.push(x as u32);
    }
    Ok(Rle { dims, counts })
}

/// Rasterize a single polygon into column-major run lengths, matching the
/// COCO toolkit's `rleFrPoly`: vertices are upsampled 5x, edges walked with a
/// Bresenham-like stepper, column-boundary crossings collected, and the sorted
/// crossing positions differenced into runs.
fn rasterize_polygon(poly: &Polygon, dims: MaskDims) -> Rle {
    let h = dims.height;
    let w = dims.width;
    let k = poly.vertices.len();
    let scale = 5.0;

    let mut xs_up: Vec<i64> = Vec::with_capacity(k + 1);
    let mut ys_up: Vec<i64> = Vec::with_capacity(k + 1);
    for &(x, y) in &poly.vertices {
        xs_up.push((scale * x + 0.5) as i64);
        ys_up.push((scale * y + 0.5) as i64);
    }
    xs_up.push(xs_up[0]);
    ys_up.push(ys_up[0]);

    // Dense boundary points along every edge.
    let mut u: Vec<i64> = Vec::new();
    let mut v: Vec<i64> = Vec::new();
    for j in 0..k {
        let (mut xs, mut xe, mut ys, mut ye) = (xs_up[j], xs_up[j + 1], ys_up[j], ys_up[j + 1]);
        let dx = (xe - xs).abs();
        let dy = (ys - ye).abs();
        let flip = (dx >= dy && xs > xe) || (dx < dy && ys > ye);
        if flip {
            std::mem::swap(&mut xs, &mut xe);
            std::mem::swap(&mut ys, &mut ye);
        }
        let s = if dx >= dy {
            if dx == 0 {
                0.0
            } else {
                (ye - ys) as f64 / dx as f64
            }
        } else if dy == 0 {
            0.0
        } else {
            (xe - xs) as f64 / dy as f64
        };
        if dx >= dy {
            for d in 0..=dx {
                let t = if flip { dx - d } else { d };
                u.push(t + xs);
                v.push((ys as f64 + s * t as f64 + 0.5) as i64);
            }
        } else {
            for d in 0..=dy {
                let t = if flip { dy - d } else { d };
                v.push(t + ys);
                u.push((xs as f64 + s * t as f64 + 0.5) as i64);
            }
        }
    }

    // Column-boundary crossings, downsampled to pixel resolution.
    let mut crossings: Vec<u64> = Vec::new();
    for j in 1..u.len() {
        if u[j] == u[j - 1] {
            continue;
        }
        let xd_raw = if u[j] < u[j - 1] { u[j] } else { u[j] - 1 };
        let xd = (xd_raw as f64 + 0.5) / scale - 0.5;
        if xd != xd.floor() || xd < 0.0 || xd > (w as i64 - 1) as f64 {
            continue;
        }
        let yd_raw = if v[j] < v[j - 1] { v[j] } else { v[j - 1] };
        let mut yd = (yd_raw as f64 + 0.5) / scale - 0.5;
        if yd < 0.0 {
            yd = 0.0;
        } else if yd > h as f64 {
            yd = h as f64;
        }
        yd = yd.ceil();
        crossings.push(xd as u64 * h as u64 + yd as u64);
    }

    // Sorted crossings differenced into run lengths; zero-length interior
    // runs merge their neighbors.
    crossings.push(h as u64 * w as u64);
    crossings.sort_unstable();
    let mut prev: u64 = 0;
    let mut diffs: Vec<u64> = Vec::with_capacity(crossings.len());
    for &p in &crossings {
        diffs.push(p - prev);
        prev = p;
    }
    let mut counts: Vec<u32> = Vec::with_capacity(diffs.len());
    let mut i = 0;
    if !diffs.is_empty() {
        counts.push(diffs[0] as u32);
        i = 1;
    }
    while i < diffs.len() {
        if diffs[i] > 0 {
            counts.push(diffs[i] as u32);
            i += 1;
        } else {
            i += 1;
            if i < diffs.len() {
                if let Some(last) = counts.last_mut() {
                    *last += diffs[i] as u32;
                }
                i += 1;
            }
        }
    }
    Rle { dims, counts }
}

/// Fill a set of polygons into a dense mask: even-odd fill within each
/// polygon, union across polygons (the COCO convention for multi-part
/// segmentations). An empty sequence yields an all-zero mask.
pub fn rasterize(polygons: &[Polygon], dims: MaskDims) -> Result<BinaryMask, MaskError> {
    let mut out = BinaryMask::zeros(dims);
    for poly in polygons {
        if poly.vertices.len() < 3 {
            return Err(MaskError::DegeneratePolygon(poly.vertices.len()));
        }
        let rle = rasterize_polygon(poly, dims);
        out.union_with(&rle_decode(&rle)?)?;
    }
    Ok(out)
}

/// Intersection-over-union of two same-sized masks. Both empty counts as 1.0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    check_dims(a.dims(), b.dims())?;
    let mut inter = 0u64;
    let mut uni = 0u64;
    for (&pa, &pb) in a.pixels.iter().zip(&b.pixels) {
        if pa && pb {
            inter += 1;
        }
        if pa || pb {
            uni += 1;
        }
    }
    if uni == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / uni as f64)
}

/// Symmetric difference `gt XOR pred`: the union of false-negative and
/// false-positive pixels. This is the pool correction points are drawn from.
pub fn error_region(gt: &BinaryMask, pred: &BinaryMask) -> Result<BinaryMask, MaskError> {
    check_dims(gt.dims(), pred.dims())?;
    let pixels = gt
        .pixels
        .iter()
        .zip(&pred.pixels)
        .map(|(&a, &b)| a != b)
        .collect();
    Ok(BinaryMask {
        dims: gt.dims(),
        pixels,
    })
}

/// Extend each side of a box outward by `factor_per_side` times the
/// corresponding dimension (center preserved), then intersect with the image
/// bounds. Factor 0.5 doubles both dimensions, quadrupling the unclamped area.
pub fn inflate_bbox(b: &BBox, factor_per_side: f64, dims: MaskDims) -> Result<BBox, MaskError> {
    assert!(factor_per_side >= 0.0, "inflation factor must be >= 0");
    // Grown extents are computed as a single scale of w/h so that, absent
    // clamping, the area scales by exactly (1 + 2f)^2 in floating point.
    let new_w = b.w * (1.0 + 2.0 * factor_per_side);
    let new_h = b.h * (1.0 + 2.0 * factor_per_side);
    let x0 = b.x - factor_per_side * b.w;
    let y0 = b.y - factor_per_side * b.h;
    let x1 = x0 + new_w;
    let y1 = y0 + new_h;
    let cx0 = x0.max(0.0);
    let cy0 = y0.max(0.0);
    let cx1 = x1.min(dims.width as f64);
    let cy1 = y1.min(dims.height as f64);
    if cx1 <= cx0 || cy1 <= cy0 {
        return Err(MaskError::EmptyAfterClamp);
    }
    Ok(BBox {
        x: cx0,
        y: cy0,
        w: if cx0 == x0 && cx1 == x1 { new_w } else { cx1 - cx0 },
        h: if cy0 == y0 && cy1 == y1 { new_h } else { cy1 - cy0 },
    })
}

/// Tight axis-aligned box over the set pixels of a non-empty mask.
pub fn bbox_of_mask(m: &BinaryMask) -> Result<BBox, MaskError> {
    let mut min_r = u32::MAX;
    let mut max_r = 0u32;
    let mut min_c = u32::MAX;
    let mut max_c = 0u32;
    let mut any = false;
    for r in 0..m.dims.height {
        for c in 0..m.dims.width {
            if m.get(r, c) {
                any = true;
                min_r = min_r.min(r);
                max_r = max_r.max(r);
                min_c = min_c.min(c);
                max_c = max_c.max(c);
            }
        }
    }
    if !any {
        return Err(MaskError::EmptyMask);
    }
    Ok(BBox {
        x: min_c as f64,
        y: min_r as f64,
        w: (max_c - min_c + 1) as f64,
        h: (max_r - min_r + 1) as f64,
    })
}

/// Round half-up to an integer. Box coordinates stay real-valued everywhere
/// else; they hit the pixel grid only here and in rasterization.
fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Restrict a mask to the integer-rounded box region. The result's dims equal
/// the clamped box extent.
pub fn crop_to_bbox(m: &BinaryMask, b: &BBox) -> Result<BinaryMask, MaskError> {
    let dims = m.dims();
    let c0 = round_half_up(b.x).max(0);
    let r0 = round_half_up(b.y).max(0);
    let c1 = round_half_up(b.x + b.w).min(dims.width as i64);
    let r1 = round_half_up(b.y + b.h).min(dims.height as i64);
    if c1 <= c0 || r1 <= r0 {
        return Err(MaskError::EmptyAfterClamp);
    }
    let out_dims = MaskDims::new((r1 - r0) as u32, (c1 - c0) as u32)?;
    Ok(BinaryMask::from_fn(out_dims, |r, c| {
        m.get(r + r0 as u32, c + c0 as u32)
    }))
}
