use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

/// Row-major `H×W×C` image with `f32` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 || data.len() != h * w * c {
            return Err(Error::shape(
                "image",
                format!("{h}x{w}x{c} with {} values", data.len()),
            ));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f32) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }
}

/// An image cut into `L` non-overlapping `P×P×C` patches.
///
/// Patches are ordered row-major over the grid (top-left first); each patch
/// vector is row-major over `(y, x, channel)` inside the patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch: usize,
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub source: usize,
    patches: Vec<f32>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn patch_vec(&self, i: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.patches[i * d..(i + 1) * d]
    }

    /// All patches as one flat `L·P·P·C` buffer.
    pub fn flat(&self) -> &[f32] {
        &self.patches
    }

    pub fn with_source(mut self, id: usize) -> Self {
        self.source = id;
        self
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.len(), self.patch_dim()],
            self.patches.iter().map(|&x| T::lit(x as f64)).collect(),
        )
        .expect("patch grid shape")
    }

    pub fn reassemble(&self) -> Image {
        let (p, c) = (self.patch, self.channels);
        let mut img = Image::filled(self.grid_h * p, self.grid_w * p, c, 0.0);
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                let v = self.patch_vec(gy * self.grid_w + gx);
                for y in 0..p {
                    for x in 0..p {
                        for ch in 0..c {
                            img.set(gy * p + y, gx * p + x, ch, v[(y * p + x) * c + ch]);
                        }
                    }
                }
            }
        }
        img
    }
}

/// Cuts `image` into `P×P` patches; dimensions must divide evenly.
pub fn partition_patches(image: &Image, p: usize) -> Result<PatchGrid> {
    if p == 0 || image.h % p != 0 || image.w % p != 0 {
        return Err(Error::shape(
            "partition_patches",
            format!("{}x{} image is not divisible by patch size {p}", image.h, image.w),
        ));
    }
    let (gh, gw, c) = (image.h / p, image.w / p, image.c);
    let mut patches = Vec::with_capacity(image.data.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for y in 0..p {
                let start = ((gy * p + y) * image.w + gx * p) * c;
                patches.extend_from_slice(&image.data[start..start + p * c]);
            }
        }
    }
    Ok(PatchGrid {
        patch: p,
        channels: c,
        grid_h: gh,
        grid_w: gw,
        source: 0,
        patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_geometry() {
        let img = Image::filled(64, 64, 1, 0.5);
        let grid = partition_patches(&img, 8).unwrap();
        assert_eq!(grid.len(), 64);
        assert_eq!(grid.patch_dim(), 64);
        for i in 0..64 {
            assert!(grid.patch_vec(i).iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn patch_order_is_row_major() {
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let img = Image::new(4, 4, 1, data).unwrap();
        let grid = partition_patches(&img, 2).unwrap();
        assert_eq!(grid.patch_vec(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(grid.patch_vec(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(grid.patch_vec(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn indivisible_is_an_error() {
        let img = Image::filled(10, 8, 1, 0.0);
        assert!(partition_patches(&img, 4).is_err());
    }

    proptest! {
        #[test]
        fn reassemble_is_lossless(gh in 1usize..5, gw in 1usize..5, p in 1usize..5, c in 1usize..3,
                                  pixels in proptest::collection::vec(any::<f32>(), 400)) {
            let (h, w) = (gh * p, gw * p);
            let data: Vec<f32> = pixels.iter().cycle().take(h * w * c).copied().collect();
            let img = Image::new(h, w, c, data).unwrap();
            let back = partition_patches(&img, p).unwrap().reassemble();
            prop_assert_eq!(back.data.len(), img.data.len());
            for (a, b) in back.data.iter().zip(&img.data) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
