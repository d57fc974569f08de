//! Fixed-window cropping of full-HD frames.

use ndarray::{s, Array, ArrayBase, Axis, Data, Dimension, RemoveAxis, Slice};

use crate::error::{Error, Result};

pub const FULL_WIDTH: usize = 1920;
pub const FULL_HEIGHT: usize = 1080;
pub const CROP_WIDTH: usize = 1280;
pub const CROP_HEIGHT: usize = 1024;
/// Top-left corner `(x, y)` of the crop window inside the full frame.
pub const CROP_ORIGIN: (usize, usize) = (320, 28);

/// Crops a `[1080, 1920, ..]` array to its centered `[1024, 1280, ..]`
/// window. Already-cropped inputs are returned unchanged.
pub fn crop_canvas<A, S, D>(a: &ArrayBase<S, D>) -> Result<Array<A, D>>
where
    A: Clone,
    S: Data<Elem = A>,
    D: Dimension + RemoveAxis,
{
    let sh = a.shape();
    if sh.len() < 2 {
        return Err(Error::ShapeMismatch(format!("crop_canvas needs at least 2 axes, got {}", sh.len())));
    }
    let (h, w) = (sh[0], sh[1]);
    match (w, h) {
        (FULL_WIDTH, FULL_HEIGHT) => {
            let (x0, y0) = CROP_ORIGIN;
            let mut v = a.view();
            v.slice_axis_inplace(Axis(0), Slice::from(y0..y0 + CROP_HEIGHT));
            v.slice_axis_inplace(Axis(1), Slice::from(x0..x0 + CROP_WIDTH));
            Ok(v.to_owned())
        }
        (CROP_WIDTH, CROP_HEIGHT) => Ok(a.to_owned()),
        _ => Err(Error::CanvasSize { width: w, height: h }),
    }
}

/// Places a cropped `[1024, 1280]` mask back into a full frame filled with
/// `fill` outside the window.
pub fn embed_canvas(mask: &ndarray::Array2<u8>, fill: u8) -> Result<ndarray::Array2<u8>> {
    if mask.dim() != (CROP_HEIGHT, CROP_WIDTH) {
        return Err(Error::CanvasSize { width: mask.ncols(), height: mask.nrows() });
    }
    let (x0, y0) = CROP_ORIGIN;
    let mut full = ndarray::Array2::from_elem((FULL_HEIGHT, FULL_WIDTH), fill);
    full.slice_mut(s![y0..y0 + CROP_HEIGHT, x0..x0 + CROP_WIDTH]).assign(mask);
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    #[test]
    fn window_origin_and_size() {
        let full = Array2::from_shape_fn((FULL_HEIGHT, FULL_WIDTH), |(y, x)| (y * 7 + x * 13) as u32);
        let c = crop_canvas(&full).unwrap();
        assert_eq!(c.dim(), (1024, 1280));
        assert_eq!(c[[0, 0]], full[[28, 320]]);
        assert_eq!(c[[1023, 1279]], full[[1051, 1599]]);
        assert_eq!(crop_canvas(&c).unwrap(), c);
    }

    #[test]
    fn image_and_mask_share_the_window() {
        let img = Array3::from_shape_fn((FULL_HEIGHT, FULL_WIDTH, 3), |(y, x, c)| ((y + x + c) % 251) as u8);
        let mask = Array2::from_shape_fn((FULL_HEIGHT, FULL_WIDTH), |(y, x)| ((y + x) % 251) as u8);
        let (ci, cm) = (crop_canvas(&img).unwrap(), crop_canvas(&mask).unwrap());
        assert_eq!(ci.index_axis(Axis(2), 0), cm);
    }

    #[test]
    fn other_sizes_rejected() {
        let a = Array2::<u8>::zeros((480, 640));
        assert!(matches!(crop_canvas(&a), Err(Error::CanvasSize { width: 640, height: 480 })));
    }

    #[test]
    fn embed_inverts_crop() {
        let m = Array2::from_shape_fn((CROP_HEIGHT, CROP_WIDTH), |(y, x)| ((x ^ y) & 3) as u8);
        let full = embed_canvas(&m, 0).unwrap();
        assert_eq!(crop_canvas(&full).unwrap(), m);
        assert_eq!(full[[0, 0]], 0);
    }
}
