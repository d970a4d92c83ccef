//! Boxes, binary masks and polygons.
//!
//! Coordinates follow the pixel-corner convention: pixel `(x, y)` covers the
//! unit square `[x, x+1) × [y, y+1)`, so the tight box of a single pixel at
//! the origin is `(0, 0, 1, 1)` and contours run along pixel edges.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in `x1, y1, x2, y2` form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::Geometry(format!("invalid box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(b)
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 <= x2 && y1 <= y2).then_some(BBox { x1, y1, x2, y2 })
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou_box(self, other)
    }

    /// Coordinate-wise min/max envelope of a set of boxes.
    pub fn envelope<'a>(boxes: impl IntoIterator<Item = &'a BBox>) -> Option<BBox> {
        boxes.into_iter().fold(None, |acc, b| {
            Some(match acc {
                None => *b,
                Some(e) => BBox {
                    x1: e.x1.min(b.x1),
                    y1: e.y1.min(b.y1),
                    x2: e.x2.max(b.x2),
                    y2: e.y2.max(b.y2),
                },
            })
        })
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn contains_point(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Intersection over union of two boxes; 0 when the union has no area.
pub fn iou_box(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b).map_or(0.0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, o: &Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point { x: v[0], y: v[1] }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
struct Window {
    x: u32,
    y: u32,
    w: u32,
    h: u32,
}

impl Window {
    fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    fn intersect(&self, o: &Window) -> Option<Window> {
        let x = self.x.max(o.x);
        let y = self.y.max(o.y);
        let x2 = (self.x + self.w).min(o.x + o.w);
        let y2 = (self.y + self.h).min(o.y + o.h);
        (x < x2 && y < y2).then(|| Window { x, y, w: x2 - x, h: y2 - y })
    }

    fn union(&self, o: &Window) -> Window {
        if self.is_empty() {
            return *o;
        }
        if o.is_empty() {
            return *self;
        }
        let x = self.x.min(o.x);
        let y = self.y.min(o.y);
        let x2 = (self.x + self.w).max(o.x + o.w);
        let y2 = (self.y + self.h).max(o.y + o.h);
        Window { x, y, w: x2 - x, h: y2 - y }
    }
}

/// Frame-sized binary mask.
///
/// Only the tight window around the foreground is stored, packed one bit per
/// pixel; the representation is canonical so derived equality is semantic.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "MaskRepr", into = "MaskRepr")]
pub struct BinaryMask {
    width: u32,
    height: u32,
    win: Window,
    bits: Vec<u64>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BinaryMask")
            .field("size", &(self.width, self.height))
            .field("window", &(self.win.x, self.win.y, self.win.w, self.win.h))
            .field("count", &self.count())
            .finish()
    }
}

fn check_dims(width: u32, height: u32) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Geometry(format!("mask dimensions must be >= 1, got {width}x{height}")));
    }
    Ok(())
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Result<Self> {
        check_dims(width, height)?;
        Ok(BinaryMask { width, height, win: Window::default(), bits: Vec::new() })
    }

    /// Builds a mask by evaluating `f` on every pixel of the frame.
    pub fn from_fn(width: u32, height: u32, f: impl FnMut(u32, u32) -> bool) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self::from_region(width, height, 0, 0, width, height, f))
    }

    pub fn from_pixels(
        width: u32,
        height: u32,
        pixels: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        check_dims(width, height)?;
        let pts: Vec<(u32, u32)> =
            pixels.into_iter().filter(|&(x, y)| x < width && y < height).collect();
        if pts.is_empty() {
            return Self::empty(width, height);
        }
        let x0 = pts.iter().map(|p| p.0).min().unwrap();
        let y0 = pts.iter().map(|p| p.1).min().unwrap();
        let x1 = pts.iter().map(|p| p.0).max().unwrap() + 1;
        let y1 = pts.iter().map(|p| p.1).max().unwrap() + 1;
        let (w, h) = (x1 - x0, y1 - y0);
        let mut grid = vec![false; (w * h) as usize];
        for (x, y) in pts {
            grid[((y - y0) * w + (x - x0)) as usize] = true;
        }
        Ok(Self::pack(width, height, Window { x: x0, y: y0, w, h }, &grid))
    }

    /// Evaluates `f` over a sub-region of the frame (clipped to the frame);
    /// pixels outside the region are background.
    pub(crate) fn from_region(
        width: u32,
        height: u32,
        x0: u32,
        y0: u32,
        w: u32,
        h: u32,
        mut f: impl FnMut(u32, u32) -> bool,
    ) -> Self {
        let x0 = x0.min(width);
        let y0 = y0.min(height);
        let w = w.min(width - x0);
        let h = h.min(height - y0);
        let mut grid = vec![false; (w as usize) * (h as usize)];
        for yy in 0..h {
            for xx in 0..w {
                grid[(yy * w + xx) as usize] = f(x0 + xx, y0 + yy);
            }
        }
        Self::pack(width, height, Window { x: x0, y: y0, w, h }, &grid)
    }

    /// Packs a boolean grid covering `win`, shrinking to the tight window.
    fn pack(width: u32, height: u32, win: Window, grid: &[bool]) -> Self {
        let (w, h) = (win.w as usize, win.h as usize);
        let (mut minx, mut miny, mut maxx, mut maxy) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for yy in 0..h {
            for xx in 0..w {
                if grid[yy * w + xx] {
                    minx = minx.min(xx);
                    maxx = maxx.max(xx);
                    miny = miny.min(yy);
                    maxy = maxy.max(yy);
                }
            }
        }
        if minx == usize::MAX {
            return BinaryMask { width, height, win: Window::default(), bits: Vec::new() };
        }
        let tw = maxx - minx + 1;
        let th = maxy - miny + 1;
        let mut bits = vec![0u64; (tw * th).div_ceil(64)];
        for yy in 0..th {
            for xx in 0..tw {
                if grid[(yy + miny) * w + xx + minx] {
                    let i = yy * tw + xx;
                    bits[i / 64] |= 1u64 << (i % 64);
                }
            }
        }
        BinaryMask {
            width,
            height,
            win: Window {
                x: win.x + minx as u32,
                y: win.y + miny as u32,
                w: tw as u32,
                h: th as u32,
            },
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        let w = &self.win;
        if x < w.x || y < w.y || x >= w.x + w.w || y >= w.y + w.h {
            return false;
        }
        let i = ((y - w.y) * w.w + (x - w.x)) as usize;
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> u64 {
        self.bits.iter().map(|b| b.count_ones() as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Tight box of the foreground in pixel-corner coordinates.
    pub fn tight_bbox(&self) -> Option<BBox> {
        if self.is_empty() {
            return None;
        }
        let w = &self.win;
        Some(BBox {
            x1: w.x as f64,
            y1: w.y as f64,
            x2: (w.x + w.w) as f64,
            y2: (w.y + w.h) as f64,
        })
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.win;
        (0..w.h).flat_map(move |yy| {
            (0..w.w).filter_map(move |xx| {
                let (x, y) = (w.x + xx, w.y + yy);
                self.get(x, y).then_some((x, y))
            })
        })
    }

    fn same_dims(&self, o: &BinaryMask) -> Result<()> {
        if self.dims() != o.dims() {
            return Err(Error::DimensionMismatch { a: self.dims(), b: o.dims() });
        }
        Ok(())
    }

    pub fn intersection_count(&self, o: &BinaryMask) -> Result<u64> {
        self.same_dims(o)?;
        let Some(iw) = self.win.intersect(&o.win) else { return Ok(0) };
        let mut n = 0;
        for y in iw.y..iw.y + iw.h {
            for x in iw.x..iw.x + iw.w {
                if self.get(x, y) && o.get(x, y) {
                    n += 1;
                }
            }
        }
        Ok(n)
    }

    pub fn iou(&self, o: &BinaryMask) -> Result<f64> {
        iou_mask(self, o)
    }

    fn combine(&self, o: &BinaryMask, op: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        self.same_dims(o)?;
        let win = self.win.union(&o.win);
        Ok(Self::from_region(self.width, self.height, win.x, win.y, win.w, win.h, |x, y| {
            op(self.get(x, y), o.get(x, y))
        }))
    }

    pub fn union(&self, o: &BinaryMask) -> Result<BinaryMask> {
        self.combine(o, |a, b| a || b)
    }

    /// Pixels of `self` not covered by `o`.
    pub fn difference(&self, o: &BinaryMask) -> Result<BinaryMask> {
        self.combine(o, |a, b| a && !b)
    }

    /// Shifts the foreground by whole pixels; pixels leaving the frame are dropped.
    pub fn translate(&self, dx: i64, dy: i64) -> BinaryMask {
        if self.is_empty() {
            return self.clone();
        }
        let w = self.win;
        let nx0 = w.x as i64 + dx;
        let ny0 = w.y as i64 + dy;
        let cx0 = nx0.clamp(0, self.width as i64) as u32;
        let cy0 = ny0.clamp(0, self.height as i64) as u32;
        let cx1 = (nx0 + w.w as i64).clamp(0, self.width as i64) as u32;
        let cy1 = (ny0 + w.h as i64).clamp(0, self.height as i64) as u32;
        if cx0 >= cx1 || cy0 >= cy1 {
            return BinaryMask { width: self.width, height: self.height, win: Window::default(), bits: Vec::new() };
        }
        Self::from_region(self.width, self.height, cx0, cy0, cx1 - cx0, cy1 - cy0, |x, y| {
            self.get((x as i64 - dx) as u32, (y as i64 - dy) as u32)
        })
    }

    fn to_rle(&self) -> Vec<u32> {
        let n = (self.win.w * self.win.h) as usize;
        let mut runs = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for i in 0..n {
            let v = self.bits[i / 64] >> (i % 64) & 1 == 1;
            if v != current {
                runs.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        runs.push(run);
        runs
    }
}

/// Serialized mask form: window plus run lengths (background first).
#[derive(Serialize, Deserialize)]
struct MaskRepr {
    width: u32,
    height: u32,
    window: [u32; 4],
    rle: Vec<u32>,
}

impl From<BinaryMask> for MaskRepr {
    fn from(m: BinaryMask) -> Self {
        let rle = if m.is_empty() { Vec::new() } else { m.to_rle() };
        MaskRepr {
            width: m.width,
            height: m.height,
            window: [m.win.x, m.win.y, m.win.w, m.win.h],
            rle,
        }
    }
}

impl TryFrom<MaskRepr> for BinaryMask {
    type Error = Error;

    fn try_from(r: MaskRepr) -> Result<Self> {
        check_dims(r.width, r.height)?;
        let [x, y, w, h] = r.window;
        let win = Window { x, y, w, h };
        if win.is_empty() {
            return BinaryMask::empty(r.width, r.height);
        }
        if x.checked_add(w).is_none_or(|v| v > r.width) || y.checked_add(h).is_none_or(|v| v > r.height) {
            return Err(Error::Geometry("mask window exceeds frame".into()));
        }
        let n = (w as usize) * (h as usize);
        let total: u64 = r.rle.iter().map(|&v| v as u64).sum();
        if total != n as u64 {
            return Err(Error::Geometry(format!("mask run lengths sum to {total}, expected {n}")));
        }
        let mut grid = vec![false; n];
        let mut pos = 0usize;
        for (k, &run) in r.rle.iter().enumerate() {
            let v = k % 2 == 1;
            for g in &mut grid[pos..pos + run as usize] {
                *g = v;
            }
            pos += run as usize;
        }
        Ok(BinaryMask::pack(r.width, r.height, win, &grid))
    }
}

/// Set-bit intersection over union; 0 when both masks are empty.
pub fn iou_mask(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.count() + b.count() - inter;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Closed polygon with at least three finite vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl TryFrom<Vec<Point>> for Polygon {
    type Error = Error;

    fn try_from(v: Vec<Point>) -> Result<Self> {
        Polygon::new(v)
    }
}

impl From<Polygon> for Vec<Point> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::Geometry(format!("polygon needs >= 3 vertices, got {}", vertices.len())));
        }
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Geometry("polygon vertex is not finite".into()));
        }
        Ok(Polygon { vertices })
    }

    pub fn from_coords(coords: &[(f64, f64)]) -> Result<Self> {
        Self::new(coords.iter().map(|&(x, y)| Point::new(x, y)).collect())
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| a.dist(&b)).sum()
    }

    /// Signed shoelace area.
    pub fn signed_area(&self) -> f64 {
        0.5 * self.edges().map(|(a, b)| a.x * b.y - b.x * a.y).sum::<f64>()
    }

    pub fn centroid(&self) -> Point {
        let n = self.vertices.len() as f64;
        let (sx, sy) = self.vertices.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point::new(sx / n, sy / n)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Polygon {
        Polygon { vertices: self.vertices.iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect() }
    }

    /// Rotates the vertex list so that index `k` becomes the first vertex.
    pub fn rotate_start(&self, k: usize) -> Polygon {
        let mut v = self.vertices.clone();
        v.rotate_left(k % self.vertices.len());
        Polygon { vertices: v }
    }

    pub fn bbox(&self) -> BBox {
        polygon_to_bbox(self)
    }

    /// Scanline fill: a pixel is set when its center lies inside the polygon
    /// (even-odd rule). Pixels outside the frame are dropped.
    pub fn rasterize(&self, width: u32, height: u32) -> Result<BinaryMask> {
        check_dims(width, height)?;
        let b = self.bbox();
        let x0 = b.x1.floor().max(0.0).min(width as f64) as u32;
        let y0 = b.y1.floor().max(0.0).min(height as f64) as u32;
        let x1 = b.x2.ceil().max(0.0).min(width as f64) as u32;
        let y1 = b.y2.ceil().max(0.0).min(height as f64) as u32;
        if x0 >= x1 || y0 >= y1 {
            return BinaryMask::empty(width, height);
        }
        let (w, h) = (x1 - x0, y1 - y0);
        let mut grid = vec![false; (w * h) as usize];
        let mut xs: Vec<f64> = Vec::new();
        for row in 0..h {
            let yc = (y0 + row) as f64 + 0.5;
            xs.clear();
            for (p, q) in self.edges() {
                if (p.y <= yc && yc < q.y) || (q.y <= yc && yc < p.y) {
                    xs.push(p.x + (yc - p.y) * (q.x - p.x) / (q.y - p.y));
                }
            }
            xs.sort_by(|a, b| a.total_cmp(b));
            for pair in xs.chunks_exact(2) {
                let start = (pair[0] - 0.5).ceil().max(x0 as f64) as i64;
                let end = ((pair[1] - 0.5).ceil() as i64).min(x1 as i64);
                for x in start..end {
                    grid[(row * w + (x as u32 - x0)) as usize] = true;
                }
            }
        }
        Ok(BinaryMask::pack(width, height, Window { x: x0, y: y0, w, h }, &grid))
    }
}

/// Axis-aligned min/max envelope of the polygon's vertices.
pub fn polygon_to_bbox(p: &Polygon) -> BBox {
    let mut b = BBox { x1: f64::INFINITY, y1: f64::INFINITY, x2: f64::NEG_INFINITY, y2: f64::NEG_INFINITY };
    for v in &p.vertices {
        b.x1 = b.x1.min(v.x);
        b.y1 = b.y1.min(v.y);
        b.x2 = b.x2.max(v.x);
        b.y2 = b.y2.max(v.y);
    }
    b
}

/// Polygon IoU, defined as the mask IoU of both polygons rasterized onto the
/// `width × height` frame grid.
pub fn iou_polygon(a: &Polygon, b: &Polygon, width: u32, height: u32) -> Result<f64> {
    if a.bbox().intersection(&b.bbox()).is_none_or(|i| i.area() <= 0.0) {
        return Ok(0.0);
    }
    iou_mask(&a.rasterize(width, height)?, &b.rasterize(width, height)?)
}

/// Places `n` vertices at equal arc-length spacing along the perimeter,
/// starting at the polygon's first vertex.
pub fn resample_polygon(p: &Polygon, n: usize) -> Result<Polygon> {
    if n < 3 {
        return Err(Error::Geometry(format!("resample count must be >= 3, got {n}")));
    }
    let total = p.perimeter();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Geometry("cannot resample a zero-perimeter polygon".into()));
    }
    let step = total / n as f64;
    let edges: Vec<(Point, Point, f64)> = p.edges().map(|(a, b)| (a, b, a.dist(&b))).collect();
    let mut out = Vec::with_capacity(n);
    let mut edge = 0usize;
    let mut walked = 0.0; // arc length at the start of `edge`
    for k in 0..n {
        let target = k as f64 * step;
        while edge + 1 < edges.len() && walked + edges[edge].2 <= target {
            walked += edges[edge].2;
            edge += 1;
        }
        let (a, b, len) = edges[edge];
        let t = if len > 0.0 { ((target - walked) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
    }
    Polygon::new(out)
}

/// Outer contour of the largest 4-connected foreground component.
///
/// Returns `None` when the mask has fewer than `min_pixels` foreground pixels.
/// The contour follows pixel edges clockwise (in image coordinates) starting
/// at the top-left corner of the component's first pixel in raster order;
/// only direction changes are emitted as vertices. Holes are ignored.
pub fn mask_to_polygon(m: &BinaryMask, min_pixels: u64) -> Option<Polygon> {
    if m.is_empty() || m.count() < min_pixels.max(1) {
        return None;
    }
    let win = m.win;
    let (w, h) = (win.w as usize, win.h as usize);
    let fg = |xx: usize, yy: usize| m.get(win.x + xx as u32, win.y + yy as u32);

    // label components within the window
    let mut labels = vec![0u32; w * h];
    let mut best: Option<(u32, usize, usize)> = None; // (label, size, first index)
    let mut next = 1u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if labels[start] != 0 || !fg(start % w, start / w) {
            continue;
        }
        let label = next;
        next += 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |nx: usize, ny: usize| {
                let j = ny * w + nx;
                if labels[j] == 0 && fg(nx, ny) {
                    labels[j] = label;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < w {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < h {
                visit(x, y + 1);
            }
        }
        if best.is_none_or(|(_, s, _)| size > s) {
            best = Some((label, size, start));
        }
    }
    let (label, _, first) = best?;
    let inside = |x: i64, y: i64| -> bool {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && labels[y as usize * w + x as usize] == label
    };

    // directions: 0=E, 1=S, 2=W, 3=N (image coordinates, y down)
    const STEP: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
    let ahead = |cx: i64, cy: i64, d: usize| -> (bool, bool) {
        // (ahead-left, ahead-right) pixels relative to corner (cx, cy)
        match d {
            0 => (inside(cx, cy - 1), inside(cx, cy)),
            1 => (inside(cx, cy), inside(cx - 1, cy)),
            2 => (inside(cx - 1, cy), inside(cx - 1, cy - 1)),
            _ => (inside(cx - 1, cy - 1), inside(cx, cy - 1)),
        }
    };

    let start = ((first % w) as i64, (first / w) as i64);
    let (mut cx, mut cy) = start;
    let mut dir = 0usize;
    let mut vertices = vec![start];
    loop {
        cx += STEP[dir].0;
        cy += STEP[dir].1;
        if (cx, cy) == start {
            break;
        }
        let nd = dir_after(ahead(cx, cy, dir), dir);
        if nd != dir {
            vertices.push((cx, cy));
            dir = nd;
        }
    }
    let ox = win.x as f64;
    let oy = win.y as f64;
    Polygon::new(vertices.into_iter().map(|(x, y)| Point::new(x as f64 + ox, y as f64 + oy)).collect()).ok()
}

/// Next heading when walking with the component on the right-hand side.
fn dir_after((left, right): (bool, bool), dir: usize) -> usize {
    if !right {
        (dir + 1) % 4
    } else if left {
        (dir + 3) % 4
    } else {
        dir
    }
}
