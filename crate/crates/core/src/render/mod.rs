//! Image artifacts for hypersurfaces.
//!
//! Every tile is normalized on its own: divided by its largest magnitude and
//! then replaced by its absolute value, so pixels lie in `[0, 1]`. Values are
//! quantized to 8 bits with round-half-away-from-zero. One-channel surfaces
//! are rendered as gray.

mod encode;

use crate::backmap::{Axis, Hypersurface};
use crate::error::{Error, Result};
use crate::network::{Architecture, LayerId};
use crate::tensor::{Scalar, Tensor};

pub use encode::{decode_png, decode_ppm, encode, encode_png, encode_ppm, save_image, ImageFormat};

pub const SEPARATOR: [u8; 3] = [255, 255, 255];

/// 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Encoding(format!(
                "{width}×{height} RGB needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn is_black(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }

    fn blit(&mut self, tile: &Image, x0: usize, y0: usize) {
        for y in 0..tile.height {
            let src = &tile.data[y * tile.width * 3..(y + 1) * tile.width * 3];
            let o = ((y0 + y) * self.width + x0) * 3;
            self.data[o..o + src.len()].copy_from_slice(src);
        }
    }
}

/// Max-abs normalization followed by absolute value. The denominator never
/// drops below the smallest positive normal number of `T`, so an all-zero
/// surface stays all-zero.
pub fn normalize<T: Scalar>(t: &Tensor<T>) -> Tensor<f64> {
    let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    let denom = max.max(T::min_positive_value().as_f64());
    Tensor::from_vec(
        t.shape(),
        t.data().iter().map(|v| (v.as_f64() / denom).abs()).collect(),
    )
    .expect("same length")
}

/// `[0, 1]` → `0..=255`, rounding half away from zero.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One normalized `H×W×C` surface as an image (C must be 1 or 3).
pub fn render_surface<T: Scalar>(t: &Tensor<T>) -> Result<Image> {
    let (h, w, c) = t.dims3()?;
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!(
            "only 1- or 3-channel surfaces can be rendered, got {c}"
        )));
    }
    let norm = normalize(t);
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c;
            let px = if c == 1 {
                [quantize(norm.data()[base]); 3]
            } else {
                [
                    quantize(norm.data()[base]),
                    quantize(norm.data()[base + 1]),
                    quantize(norm.data()[base + 2]),
                ]
            };
            img.set_pixel(x, y, px);
        }
    }
    Ok(img)
}

/// Lays out `cells` (row-major, `rows × cols`) with an optional 1-pixel
/// separator between neighbouring tiles.
fn tile_grid<T: Scalar>(
    cells: &[Option<&Tensor<T>>],
    rows: usize,
    cols: usize,
    separator: bool,
    describe: impl Fn(usize) -> String,
) -> Result<Image> {
    debug_assert_eq!(cells.len(), rows * cols);
    let first = cells
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::invalid("no surfaces to tile"))?;
    let (h, w, _) = first.dims3()?;
    let gap = usize::from(separator);
    let mut img = Image::new(cols * w + (cols - 1) * gap, rows * h + (rows - 1) * gap);
    if separator {
        for y in 0..img.height {
            for x in 0..img.width {
                let on_col_gap = (x + 1) % (w + 1) == 0;
                let on_row_gap = (y + 1) % (h + 1) == 0;
                if on_col_gap || on_row_gap {
                    img.set_pixel(x, y, SEPARATOR);
                }
            }
        }
    }
    for (c, cell) in cells.iter().enumerate() {
        let t = cell.ok_or_else(|| Error::invalid(format!("missing surface for {}", describe(c))))?;
        if t.shape() != first.shape() {
            return Err(Error::shape("tile", t.shape(), first.shape()));
        }
        let tile = render_surface(t)?;
        img.blit(&tile, (c % cols) * (w + gap), (c / cols) * (h + gap));
    }
    Ok(img)
}

fn place<'a, T: Scalar>(
    surfaces: &'a [Hypersurface<T>],
    count: usize,
    cell_of: impl Fn(&Hypersurface<T>) -> Option<usize>,
) -> Result<Vec<Option<&'a Tensor<T>>>> {
    let mut cells = vec![None; count];
    for h in surfaces {
        let c = cell_of(h)
            .filter(|&c| c < count)
            .ok_or_else(|| Error::invalid(format!("surface {} does not fit the layout", h.index)))?;
        if cells[c].replace(&h.tensor).is_some() {
            return Err(Error::invalid(format!("duplicate surface {}", h.index)));
        }
    }
    Ok(cells)
}

/// Surfaces indexed by stride offset `s` on a `rows × cols` output grid;
/// cell `(r, c)` holds `s = r·cols + c`. No separators.
pub fn tile_strides<T: Scalar>(surfaces: &[Hypersurface<T>], grid: (usize, usize)) -> Result<Image> {
    let (rows, cols) = grid;
    let cells = place(surfaces, rows * cols, |h| h.index.s)?;
    tile_grid(&cells, rows, cols, false, |c| format!("s={c}"))
}

/// Surfaces indexed by `(j, i)`: row `j`, column `i`. No separators.
pub fn tile_channels<T: Scalar>(
    surfaces: &[Hypersurface<T>],
    in_channels: usize,
    out_channels: usize,
) -> Result<Image> {
    let cells = place(surfaces, in_channels * out_channels, |h| {
        Some(h.index.j? * out_channels + h.index.i.filter(|&i| i < out_channels)?)
    })?;
    tile_grid(&cells, in_channels, out_channels, false, |c| {
        format!("j={},i={}", c / out_channels, c % out_channels)
    })
}

/// Rows and columns of the near-square sheet for `n` tiles: rows is the
/// largest divisor of `n` not above `√n`.
pub fn grid_dims(n: usize) -> (usize, usize) {
    let rows = (1..=n)
        .take_while(|r| r * r <= n)
        .filter(|r| n % r == 0)
        .last()
        .unwrap_or(1);
    (rows, n / rows.max(1))
}

/// Surfaces indexed by class `k` (or out-channel `i` when no class is set)
/// on a near-square sheet with 1-pixel white separators.
pub fn class_grid<T: Scalar>(surfaces: &[Hypersurface<T>], count: usize) -> Result<Image> {
    if count == 0 {
        return Err(Error::invalid("class grid needs at least one tile"));
    }
    let (rows, cols) = grid_dims(count);
    let cells = place(surfaces, count, |h| h.index.k.or(h.index.i))?;
    tile_grid(&cells, rows, cols, true, |c| format!("index {c}"))
}

/// `|a − b|`, normalized by its largest magnitude.
pub fn difference_image<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Image> {
    render_surface(&a.sub(b)?)
}

/// `{arch}_{mode}_{layer}[_{s}][_{j}][_{i}][_{k}].{ext}`; absent indices are
/// omitted.
pub fn surface_file_name<T: Scalar>(arch: Architecture, h: &Hypersurface<T>, format: ImageFormat) -> String {
    sheet_file_name(arch, h.mode, h.layer, &h.index, format)
}

pub fn sheet_file_name(
    arch: Architecture,
    mode: crate::backmap::Mode,
    layer: LayerId,
    index: &crate::backmap::SurfaceIndex,
    format: ImageFormat,
) -> String {
    let mut name = format!("{arch}_{mode}_{layer}");
    for axis in [Axis::S, Axis::J, Axis::I, Axis::K] {
        if let Some(v) = index.get(axis) {
            name.push_str(&format!("_{v}"));
        }
    }
    name.push('.');
    name.push_str(format.extension());
    name
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backmap::{Mode, SurfaceIndex};

    fn surface(index: SurfaceIndex, t: Tensor<f32>) -> Hypersurface<f32> {
        Hypersurface {
            tensor: t,
            mode: Mode::Rm4,
            layer: LayerId::Conv(1),
            index,
            eval_k: 0.125,
        }
    }

    #[test]
    fn normalization_maps_peak_to_one() {
        let t = Tensor::from_vec(&[1, 2, 2], vec![0.5f32, -2.0, 0.0, 1.0]).unwrap();
        let n = normalize(&t);
        assert_eq!(n.data(), &[0.25, 1.0, 0.0, 0.5]);
        assert!(normalize(&Tensor::<f32>::zeros(&[2, 2, 1])).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quantization_rounds_half_away() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128); // 127.5 → 128
        assert_eq!(quantize(-3.0), 0);
    }

    #[test]
    fn single_stride_is_the_surface() {
        let t = Tensor::from_fn(&[4, 3, 3], |i| i as f32 - 10.0);
        let img = tile_strides(&[surface(SurfaceIndex::rm4(0, 0, 0), t.clone())], (1, 1)).unwrap();
        assert_eq!(img, render_surface(&t).unwrap());
    }

    #[test]
    fn equal_surfaces_tile_periodically() {
        let t = Tensor::from_fn(&[3, 2, 3], |i| (i % 5) as f32);
        let all: Vec<_> = (0..6).map(|s| surface(SurfaceIndex::rm4(s, 0, 0), t.clone())).collect();
        let img = tile_strides(&all, (2, 3)).unwrap();
        assert_eq!((img.width(), img.height()), (6, 6));
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(img.pixel(x, y), img.pixel(x % 2, y % 3));
            }
        }
        assert!(tile_strides(&all[..5], (2, 3)).is_err());
    }

    #[test]
    fn channel_sheet_layout() {
        let all: Vec<_> = (0..2)
            .flat_map(|j| {
                (0..3).map(move |i| {
                    let v = (j * 3 + i + 1) as f32;
                    surface(SurfaceIndex::rm3(j, i), Tensor::from_fn(&[2, 2, 1], move |p| if p == 0 { v } else { 0.0 }))
                })
            })
            .collect();
        let img = tile_channels(&all, 2, 3).unwrap();
        assert_eq!((img.width(), img.height()), (6, 4));
        assert_eq!(img.pixel(2, 2), [255; 3]);
        assert_eq!(img.pixel(3, 3), [0; 3]);
    }

    #[test]
    fn class_grid_dims() {
        assert_eq!(grid_dims(10), (2, 5));
        assert_eq!(grid_dims(96), (8, 12));
        assert_eq!(grid_dims(1), (1, 1));
        assert_eq!(grid_dims(7), (1, 7));
        let t = Tensor::from_fn(&[32, 32, 3], |i| i as f32);
        let all: Vec<_> = (0..10).map(|k| surface(SurfaceIndex::rm0(k), t.clone())).collect();
        let img = class_grid(&all, 10).unwrap();
        assert_eq!((img.width(), img.height()), (5 * 32 + 4, 2 * 32 + 1));
        assert_eq!(img.pixel(32, 0), SEPARATOR);
        assert_eq!(img.pixel(0, 32), SEPARATOR);
    }

    #[test]
    fn difference_of_equal_surfaces_is_black() {
        let t = Tensor::from_fn(&[4, 4, 3], |i| i as f32 * 0.1 - 2.0);
        assert!(difference_image(&t, &t).unwrap().is_black());
        assert_eq!(
            difference_image(&t, &Tensor::zeros(&[4, 4, 3])).unwrap(),
            render_surface(&t).unwrap()
        );
    }

    #[test]
    fn png_and_ppm_decode_identically() {
        let t = Tensor::from_fn(&[5, 7, 3], |i| ((i * 37) % 11) as f32 - 5.0);
        let img = render_surface(&t).unwrap();
        let png = decode_png(&encode_png(&img).unwrap()).unwrap();
        let ppm = decode_ppm(&encode_ppm(&img)).unwrap();
        assert_eq!(png, img);
        assert_eq!(ppm, img);
        assert_eq!(encode_png(&img).unwrap(), encode_png(&img).unwrap());
    }

    #[test]
    fn file_names() {
        let h = surface(SurfaceIndex::rm4(12, 0, 3), Tensor::zeros(&[1, 1, 1]));
        assert_eq!(
            surface_file_name(Architecture::Vgg7, &h, ImageFormat::Png),
            "vgg7_rm4_conv1_12_0_3.png"
        );
    }
}
