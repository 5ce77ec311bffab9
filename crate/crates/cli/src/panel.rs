//! Figure panels: inputs and segmentation on top, inpaintings and the
//! probability map in the middle, translations at the bottom.

use image::{GrayImage, ImageEncoder, Luma};
use ndarray::{Array2, Array3, ArrayView2, Axis};

/// Gap between cells, in pixels.
const GAP: u32 = 2;
const GAP_VALUE: u8 = 255;

/// Map `[lo, hi]` linearly onto `0..=255` (clamped).
pub fn to_gray(v: f32, lo: f32, hi: f32) -> u8 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub cols: usize,
    pub cell: (usize, usize),
    /// Row-major cells already mapped to gray levels; `None` is left blank.
    pub rows: Vec<Vec<Option<Array2<u8>>>>,
}

fn image_cell(a: ArrayView2<f32>) -> Array2<u8> {
    a.mapv(|v| to_gray(v, -1.0, 1.0))
}

fn prob_cell(a: ArrayView2<f32>) -> Array2<u8> {
    a.mapv(|v| to_gray(v, 0.0, 1.0))
}

impl Panel {
    /// `input`, `inpaint` and `translated` are `(C, H, W)`; `mask` and
    /// `prob` are `(H, W)`.
    pub fn compose(
        input: &Array3<f32>,
        mask: Option<&Array2<u8>>,
        inpaint: &Array3<f32>,
        prob: &Array2<f32>,
        translated: &Array3<f32>,
    ) -> Panel {
        let (n, h, w) = input.dim();
        assert_eq!(inpaint.dim(), (n, h, w), "inpaint shape");
        assert_eq!(translated.dim(), (n, h, w), "translation shape");
        assert_eq!(prob.dim(), (h, w), "probability map shape");

        let channels = |a: &Array3<f32>| a.axis_iter(Axis(0)).map(|c| Some(image_cell(c))).collect::<Vec<_>>();
        let mut top = channels(input);
        top.push(mask.map(|m| {
            assert_eq!(m.dim(), (h, w), "mask shape");
            m.mapv(|v| if v != 0 { 255 } else { 0 })
        }));
        let mut middle = channels(inpaint);
        middle.push(Some(prob_cell(prob.view())));
        let mut bottom = channels(translated);
        bottom.push(None);
        Panel {
            cols: n + 1,
            cell: (h, w),
            rows: vec![top, middle, bottom],
        }
    }

    pub fn populated(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.iter().filter(|c| c.is_some()).count()).collect()
    }

    pub fn to_image(&self) -> GrayImage {
        let (h, w) = (self.cell.0 as u32, self.cell.1 as u32);
        let cols = self.cols as u32;
        let rows = self.rows.len() as u32;
        let width = cols * w + (cols - 1) * GAP;
        let height = rows * h + (rows - 1) * GAP;
        let mut img = GrayImage::from_pixel(width, height, Luma([GAP_VALUE]));
        for (r, row) in self.rows.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                let (x0, y0) = (c as u32 * (w + GAP), r as u32 * (h + GAP));
                for y in 0..h {
                    for x in 0..w {
                        let v = cell.as_ref().map_or(0, |a| a[[y as usize, x as usize]]);
                        img.put_pixel(x0 + x, y0 + y, Luma([v]));
                    }
                }
            }
        }
        img
    }

    pub fn png_bytes(&self) -> Vec<u8> {
        encode_png(&self.to_image())
    }
}

pub fn encode_png(img: &GrayImage) -> Vec<u8> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::L8)
        .expect("in-memory PNG encoding");
    out
}

/// A single `(H, W)` map as a PNG, scaled from `[lo, hi]`.
pub fn map_png(a: ArrayView2<f32>, lo: f32, hi: f32) -> Vec<u8> {
    let (h, w) = a.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_gray(a[[y as usize, x as usize]], lo, hi)]));
    encode_png(&img)
}
