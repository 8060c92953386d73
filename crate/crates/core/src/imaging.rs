use std::path::Path;

use crate::engine::{Float, Tensor};
use crate::error::{Error, Result};

/// Square RGB image, row-major HWC, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    resolution: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(resolution: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(resolution * resolution * 3);
        for _ in 0..resolution * resolution {
            data.extend_from_slice(&rgb);
        }
        Image { resolution, data }
    }

    pub fn from_hwc(resolution: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != resolution * resolution * 3 {
            return Err(Error::ShapeMismatch {
                context: "image",
                expected: vec![resolution, resolution, 3],
                actual: vec![data.len()],
            });
        }
        Ok(Image { resolution, data })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.resolution + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.resolution + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Linear map of `[-1, 1]` onto `0..=255`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(resolution: usize, bytes: &[u8]) -> Result<Self> {
        Image::from_hwc(resolution, bytes.iter().map(|&b| from_u8(b)).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let side = self.resolution as u32;
        image::save_buffer(path, &self.to_rgb8(), side, side, image::ColorType::Rgb8).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        if img.width() != img.height() {
            return Err(Error::Dataset(format!("{} is not square", path.display())));
        }
        Image::from_rgb8(img.width() as usize, img.as_raw())
    }

    /// 2x2 average pooling.
    pub fn downsample2x(&self) -> Image {
        let r = self.resolution / 2;
        let mut out = Image::filled(r, [0.0; 3]);
        for y in 0..r {
            for x in 0..r {
                let mut acc = [0.0f32; 3];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let p = self.pixel(2 * x + dx, 2 * y + dy);
                    for c in 0..3 {
                        acc[c] += p[c] / 4.0;
                    }
                }
                out.set_pixel(x, y, acc);
            }
        }
        out
    }
}

pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Packs images into an NCHW batch tensor.
pub fn batch_tensor<T: Float>(images: &[&Image]) -> Tensor<T> {
    let r = images.first().map_or(0, |i| i.resolution);
    let mut data = Vec::with_capacity(images.len() * 3 * r * r);
    for img in images {
        assert_eq!(img.resolution, r, "mixed resolutions in one batch");
        for c in 0..3 {
            for p in 0..r * r {
                data.push(T::lit(img.data[p * 3 + c] as f64));
            }
        }
    }
    Tensor::from_vec(&[images.len(), 3, r, r], data)
}

/// Unpacks an NCHW batch tensor into images.
pub fn images_from_tensor<T: Float>(t: &Tensor<T>) -> Vec<Image> {
    let s = t.shape();
    assert!(s.len() == 4 && s[1] == 3 && s[2] == s[3], "expected (N, 3, R, R)");
    let r = s[2];
    (0..s[0])
        .map(|n| {
            let src = t.row(n);
            let mut data = vec![0f32; r * r * 3];
            for c in 0..3 {
                for p in 0..r * r {
                    data[p * 3 + c] = src[c * r * r + p].to_f32().unwrap_or(f32::NAN);
                }
            }
            Image { resolution: r, data }
        })
        .collect()
}
