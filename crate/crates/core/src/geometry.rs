//! Dual-perspective cropping: grid arithmetic, local (contiguous tile) and
//! global (stride-interleaved) crops, their exact inverse recombinations, and
//! the pixel-level index map.
//!
//! Every operation here is a pure rearrangement: no value is ever created,
//! dropped, or touched by floating-point arithmetic, so crop followed by
//! recombine is bit-exact. The same operations serve pixel grids and feature
//! grids; only the cell size changes.

use crate::error::{Error, Result};

/// Which cropping rule a sub-image set was produced by.
///
/// * `Local`: contiguous `enc_w x enc_h` tiles, preserving detail per region.
/// * `Global`: stride-`(n_w, n_h)` interleaved samplings, so every sub-image
///   spans the whole source coarsely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perspective {
    Local,
    Global,
}

/// Crop geometry: source extents, tile extents, and the tile counts derived
/// from them. Both extents must be exact multiples of the tile size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    img_w: usize,
    img_h: usize,
    enc_w: usize,
    enc_h: usize,
    n_w: usize,
    n_h: usize,
}

impl GridSpec {
    /// Compute the grid for a source of `img_w x img_h` cells split into
    /// `enc_w x enc_h` tiles.
    pub fn new(img_w: usize, img_h: usize, enc_w: usize, enc_h: usize) -> Result<Self> {
        if img_w == 0 || img_h == 0 || enc_w == 0 || enc_h == 0 {
            return Err(Error::shape(
                "GridSpec::new",
                format!("all extents must be >= 1, got {}x{} / {}x{}", img_w, img_h, enc_w, enc_h),
            ));
        }
        if img_w < enc_w || img_h < enc_h {
            return Err(Error::TooSmall {
                img_w,
                img_h,
                enc_w,
                enc_h,
            });
        }
        let n_w = img_w / enc_w;
        let n_h = img_h / enc_h;
        if n_w * enc_w != img_w || n_h * enc_h != img_h {
            return Err(Error::NotMultiple {
                img_w,
                img_h,
                enc_w,
                enc_h,
                valid_w_lo: n_w * enc_w,
                valid_w_hi: n_w * enc_w + if img_w % enc_w == 0 { 0 } else { enc_w },
                valid_h_lo: n_h * enc_h,
                valid_h_hi: n_h * enc_h + if img_h % enc_h == 0 { 0 } else { enc_h },
            });
        }
        Ok(GridSpec {
            img_w,
            img_h,
            enc_w,
            enc_h,
            n_w,
            n_h,
        })
    }

    pub fn img_w(&self) -> usize {
        self.img_w
    }

    pub fn img_h(&self) -> usize {
        self.img_h
    }

    pub fn enc_w(&self) -> usize {
        self.enc_w
    }

    pub fn enc_h(&self) -> usize {
        self.enc_h
    }

    /// Tile count along the width.
    pub fn n_w(&self) -> usize {
        self.n_w
    }

    /// Tile count along the height.
    pub fn n_h(&self) -> usize {
        self.n_h
    }

    /// Total sub-images per perspective.
    pub fn sub_count(&self) -> usize {
        self.n_w * self.n_h
    }

    /// The same tile layout expressed at a different cell granularity, e.g.
    /// the feature-level grid matching an image-level one.
    pub fn with_tile_size(&self, tile_w: usize, tile_h: usize) -> Result<GridSpec> {
        GridSpec::new(self.n_w * tile_w, self.n_h * tile_h, tile_w, tile_h)
    }
}

/// A grid of cells with some number of channels per cell, stored row-major as
/// `(row, col, channel)`. Implemented by pixel images and feature grids so the
/// cropping operations apply to both.
pub trait CellGrid: Clone {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn channels(&self) -> usize;
    fn data(&self) -> &[f64];
    fn from_parts(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self>
    where
        Self: Sized;
}

/// Dense image: `height x width x channels` of finite values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "ImageTensor::new",
                format!(
                    "{}x{}x{} wants {} values, got {}",
                    height,
                    width,
                    channels,
                    height * width * channels,
                    data.len()
                ),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("ImageTensor::new"));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageTensor {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value at pixel `(x, y)` channel `c`.
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

impl CellGrid for ImageTensor {
    fn rows(&self) -> usize {
        self.height
    }

    fn cols(&self) -> usize {
        self.width
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn data(&self) -> &[f64] {
        &self.data
    }

    fn from_parts(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ImageTensor::new(rows, cols, channels, data)
    }
}

/// The ordered sub-images (or sub-feature grids) produced by one perspective
/// of the cropping module, together with the grid that produced them.
///
/// Ordering is row-major: item `i` is tile `(row = i / n_w, col = i % n_w)`
/// for the local perspective and offset `(i = idx / n_w, j = idx % n_w)` for
/// the global perspective.
#[derive(Debug, Clone, PartialEq)]
pub struct SubImageSet<G> {
    grid: GridSpec,
    perspective: Perspective,
    items: Vec<G>,
}

impl<G: CellGrid> SubImageSet<G> {
    pub fn new(grid: GridSpec, perspective: Perspective, items: Vec<G>) -> Result<Self> {
        if items.len() != grid.sub_count() {
            return Err(Error::shape(
                "SubImageSet::new",
                format!("grid wants {} items, got {}", grid.sub_count(), items.len()),
            ));
        }
        for (i, item) in items.iter().enumerate() {
            if item.rows() != grid.enc_h() || item.cols() != grid.enc_w() {
                return Err(Error::shape(
                    "SubImageSet::new",
                    format!(
                        "item {} is {}x{}, grid tile is {}x{}",
                        i,
                        item.cols(),
                        item.rows(),
                        grid.enc_w(),
                        grid.enc_h()
                    ),
                ));
            }
        }
        Ok(SubImageSet {
            grid,
            perspective,
            items,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn perspective(&self) -> Perspective {
        self.perspective
    }

    pub fn items(&self) -> &[G] {
        &self.items
    }

    pub fn into_items(self) -> Vec<G> {
        self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn check_source<G: CellGrid>(src: &G, grid: &GridSpec, op: &'static str) -> Result<()> {
    if src.rows() != grid.img_h() || src.cols() != grid.img_w() {
        return Err(Error::shape(
            op,
            format!(
                "source is {}x{}, grid wants {}x{}",
                src.cols(),
                src.rows(),
                grid.img_w(),
                grid.img_h()
            ),
        ));
    }
    Ok(())
}

/// Cut the source into contiguous `enc_w x enc_h` tiles, row-major.
pub fn local_crop<G: CellGrid>(src: &G, grid: &GridSpec) -> Result<SubImageSet<G>> {
    check_source(src, grid, "local_crop")?;
    let c = src.channels();
    let (ew, eh) = (grid.enc_w(), grid.enc_h());
    let row_len = ew * c;
    let src_stride = grid.img_w() * c;
    let data = src.data();
    let mut items = Vec::with_capacity(grid.sub_count());
    for i in 0..grid.sub_count() {
        let row = i / grid.n_w();
        let col = i % grid.n_w();
        let mut out = Vec::with_capacity(eh * row_len);
        for v in 0..eh {
            let y = row * eh + v;
            let start = y * src_stride + col * row_len;
            out.extend_from_slice(&data[start..start + row_len]);
        }
        items.push(G::from_parts(eh, ew, c, out)?);
    }
    SubImageSet::new(*grid, Perspective::Local, items)
}

/// Sample the source with stride `(n_w, n_h)`: sub-image `(i, j)` collects
/// every cell at `(x = j + u * n_w, y = i + v * n_h)`.
pub fn global_crop<G: CellGrid>(src: &G, grid: &GridSpec) -> Result<SubImageSet<G>> {
    check_source(src, grid, "global_crop")?;
    let c = src.channels();
    let (ew, eh) = (grid.enc_w(), grid.enc_h());
    let (nw, nh) = (grid.n_w(), grid.n_h());
    let width = grid.img_w();
    let data = src.data();
    let mut items = Vec::with_capacity(grid.sub_count());
    for idx in 0..grid.sub_count() {
        let i = idx / nw;
        let j = idx % nw;
        let mut out = Vec::with_capacity(eh * ew * c);
        for v in 0..eh {
            let y = i + v * nh;
            for u in 0..ew {
                let x = j + u * nw;
                let start = (y * width + x) * c;
                out.extend_from_slice(&data[start..start + c]);
            }
        }
        items.push(G::from_parts(eh, ew, c, out)?);
    }
    SubImageSet::new(*grid, Perspective::Global, items)
}

/// Exact inverse of [`local_crop`]: place each tile back at its block.
pub fn local_recombine<G: CellGrid>(subs: &SubImageSet<G>) -> Result<G> {
    if subs.perspective() != Perspective::Local {
        return Err(Error::WrongPerspective {
            expected: Perspective::Local,
            actual: subs.perspective(),
        });
    }
    let grid = subs.grid();
    let c = subs.items()[0].channels();
    let (ew, eh) = (grid.enc_w(), grid.enc_h());
    let row_len = ew * c;
    let dst_stride = grid.img_w() * c;
    let mut out = vec![0.0; grid.img_h() * dst_stride];
    for (i, item) in subs.items().iter().enumerate() {
        if item.channels() != c {
            return Err(Error::shape(
                "local_recombine",
                format!("item {} has {} channels, expected {}", i, item.channels(), c),
            ));
        }
        let row = i / grid.n_w();
        let col = i % grid.n_w();
        let data = item.data();
        for v in 0..eh {
            let y = row * eh + v;
            let dst = y * dst_stride + col * row_len;
            out[dst..dst + row_len].copy_from_slice(&data[v * row_len..(v + 1) * row_len]);
        }
    }
    G::from_parts(grid.img_h(), grid.img_w(), c, out)
}

/// Exact inverse of [`global_crop`]: `out(x, y)` comes from sub-image
/// `(i = y mod n_h, j = x mod n_w)` at `(u = x / n_w, v = y / n_h)`.
pub fn global_recombine<G: CellGrid>(subs: &SubImageSet<G>) -> Result<G> {
    if subs.perspective() != Perspective::Global {
        return Err(Error::WrongPerspective {
            expected: Perspective::Global,
            actual: subs.perspective(),
        });
    }
    let grid = subs.grid();
    let c = subs.items()[0].channels();
    let (ew, eh) = (grid.enc_w(), grid.enc_h());
    let (nw, nh) = (grid.n_w(), grid.n_h());
    let width = grid.img_w();
    let mut out = vec![0.0; grid.img_h() * width * c];
    for (idx, item) in subs.items().iter().enumerate() {
        if item.channels() != c {
            return Err(Error::shape(
                "global_recombine",
                format!("item {} has {} channels, expected {}", idx, item.channels(), c),
            ));
        }
        let i = idx / nw;
        let j = idx % nw;
        let data = item.data();
        for v in 0..eh {
            let y = i + v * nh;
            for u in 0..ew {
                let x = j + u * nw;
                let dst = (y * width + x) * c;
                let src = (v * ew + u) * c;
                out[dst..dst + c].copy_from_slice(&data[src..src + c]);
            }
        }
    }
    G::from_parts(grid.img_h(), grid.img_w(), c, out)
}

/// Map sub-image pixel `(u, v)` of `sub_index` back to source coordinates
/// `(x, y)`. Over all `(sub_index, u, v)` this is a bijection onto the source
/// domain for either perspective.
pub fn map_pixel(
    grid: &GridSpec,
    perspective: Perspective,
    sub_index: usize,
    u: usize,
    v: usize,
) -> Result<(usize, usize)> {
    if sub_index >= grid.sub_count() {
        return Err(Error::range(
            "map_pixel",
            format!("sub_index {} out of {}", sub_index, grid.sub_count()),
        ));
    }
    if u >= grid.enc_w() || v >= grid.enc_h() {
        return Err(Error::range(
            "map_pixel",
            format!(
                "(u, v) = ({}, {}) outside tile {}x{}",
                u,
                v,
                grid.enc_w(),
                grid.enc_h()
            ),
        ));
    }
    match perspective {
        Perspective::Local => {
            let row = sub_index / grid.n_w();
            let col = sub_index % grid.n_w();
            Ok((col * grid.enc_w() + u, row * grid.enc_h() + v))
        }
        Perspective::Global => {
            let i = sub_index / grid.n_w();
            let j = sub_index % grid.n_w();
            Ok((j + u * grid.n_w(), i + v * grid.n_h()))
        }
    }
}

/// Flattened source-cell index (`y * img_w + x`) for every token of one
/// sub-grid, in the row-major `(v, u)` order used when flattening features.
pub(crate) fn sub_cell_indices(
    grid: &GridSpec,
    perspective: Perspective,
    sub_index: usize,
) -> Vec<usize> {
    let mut idx = Vec::with_capacity(grid.enc_w() * grid.enc_h());
    for v in 0..grid.enc_h() {
        for u in 0..grid.enc_w() {
            let (x, y) = map_pixel(grid, perspective, sub_index, u, v).expect("index in range");
            idx.push(y * grid.img_w() + x);
        }
    }
    idx
}
