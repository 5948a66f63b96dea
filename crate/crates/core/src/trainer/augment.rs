//! Photometric and geometric augmentation on `[0, 1]` HWC images, applied
//! before normalization.
//!
//! Saturation interpolates each pixel toward its grey value (the channel
//! mean); contrast interpolates the whole image toward its mean grey level;
//! brightness adds a constant. The image is then bilinearly resized and
//! cropped back to its original size and finally clipped to `[0, 1]`.

use rand::Rng;

use crate::tensor::Tensor;

pub const SATURATION_RANGE: (f32, f32) = (0.0, 2.0);
pub const CONTRAST_RANGE: (f32, f32) = (0.4, 1.6);
pub const BRIGHTNESS_RANGE: (f32, f32) = (-0.5, 0.5);
pub const RESIZE_TO: usize = 36;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub saturation: f32,
    pub contrast: f32,
    pub brightness: f32,
    /// Side of the square the image is resized to before cropping.
    pub resize: usize,
    /// Top-left corner of the crop in the resized image.
    pub crop: (usize, usize),
}

impl AugmentParams {
    /// Parameters that leave an image of side `side` unchanged.
    pub fn identity(side: usize) -> Self {
        AugmentParams {
            flip: false,
            saturation: 1.0,
            contrast: 1.0,
            brightness: 0.0,
            resize: side,
            crop: (0, 0),
        }
    }

    /// Uniform draws over the documented ranges; the crop offset is uniform
    /// over all positions of a `side`-sized window in the resized image.
    pub fn sample(side: usize, rng: &mut impl Rng) -> Self {
        let resize = RESIZE_TO.max(side);
        let slack = resize - side;
        AugmentParams {
            flip: rng.random_bool(0.5),
            saturation: rng.random_range(SATURATION_RANGE.0..=SATURATION_RANGE.1),
            contrast: rng.random_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1),
            brightness: rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1),
            resize,
            crop: (rng.random_range(0..=slack), rng.random_range(0..=slack)),
        }
    }
}

pub fn augment(image: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
    let side = image.shape()[0];
    augment_with(image, &AugmentParams::sample(side, rng))
}

/// Applies `params` to a square `[0, 1]` HWC image.
pub fn augment_with(image: &Tensor<f32>, params: &AugmentParams) -> Tensor<f32> {
    let (h, w, c) = image.dims3().expect("augment expects an HWC image");
    assert_eq!(h, w, "augment expects a square image");
    let mut img = if params.flip { flip_horizontal(image) } else { image.clone() };
    if c == 3 {
        adjust_saturation(&mut img, params.saturation);
    }
    adjust_contrast(&mut img, params.contrast);
    if params.brightness != 0.0 {
        img.data_mut().iter_mut().for_each(|v| *v += params.brightness);
    }
    let resized = if params.resize == h { img } else { resize_bilinear(&img, params.resize) };
    let mut out = crop(&resized, params.crop, h);
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

pub fn flip_horizontal(image: &Tensor<f32>) -> Tensor<f32> {
    let (_, w, c) = image.dims3().expect("HWC image");
    Tensor::from_fn(image.shape(), |n| {
        let ch = n % c;
        let x = (n / c) % w;
        let y = n / (c * w);
        image.at3(y, w - 1 - x, ch)
    })
}

fn adjust_saturation(image: &mut Tensor<f32>, factor: f32) {
    if factor == 1.0 {
        return;
    }
    for px in image.data_mut().chunks_exact_mut(3) {
        let grey = (px[0] + px[1] + px[2]) / 3.0;
        px.iter_mut().for_each(|v| *v = grey + factor * (*v - grey));
    }
}

fn adjust_contrast(image: &mut Tensor<f32>, factor: f32) {
    if factor == 1.0 {
        return;
    }
    let mean = image.data().iter().map(|&v| f64::from(v)).sum::<f64>() / image.len() as f64;
    let mean = mean as f32;
    image
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = mean + factor * (*v - mean));
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &Tensor<f32>, side: usize) -> Tensor<f32> {
    let (h, w, c) = image.dims3().expect("HWC image");
    let sy = h as f32 / side as f32;
    let sx = w as f32 / side as f32;
    let sample = |pos: f32, limit: usize| {
        let p = (pos.max(0.0)).min((limit - 1) as f32);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(limit - 1);
        (lo, hi, p - lo as f32)
    };
    let mut out = Tensor::zeros(&[side, side, c]);
    for y in 0..side {
        let (y0, y1, fy) = sample((y as f32 + 0.5) * sy - 0.5, h);
        for x in 0..side {
            let (x0, x1, fx) = sample((x as f32 + 0.5) * sx - 0.5, w);
            for ch in 0..c {
                let top = image.at3(y0, x0, ch) * (1.0 - fx) + image.at3(y0, x1, ch) * fx;
                let bottom = image.at3(y1, x0, ch) * (1.0 - fx) + image.at3(y1, x1, ch) * fx;
                out.data_mut()[(y * side + x) * c + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

fn crop(image: &Tensor<f32>, (top, left): (usize, usize), side: usize) -> Tensor<f32> {
    let (_, _, c) = image.dims3().expect("HWC image");
    Tensor::from_fn(&[side, side, c], |n| {
        let ch = n % c;
        let x = (n / c) % side;
        let y = n / (c * side);
        image.at3(top + y, left + x, ch)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[32, 32, 3], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn identity_params_leave_image_unchanged() {
        let img = random_image(1);
        assert_eq!(augment_with(&img, &AugmentParams::identity(32)), img);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = random_image(2);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_ne!(flip_horizontal(&img), img);
    }

    #[test]
    fn brightness_clips() {
        let img = Tensor::full(&[4, 4, 3], 0.5f32);
        let params = AugmentParams {
            brightness: 0.5,
            ..AugmentParams::identity(4)
        };
        let out = augment_with(&img, &params);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_saturation_is_grey() {
        let img = random_image(3);
        let params = AugmentParams {
            saturation: 0.0,
            ..AugmentParams::identity(32)
        };
        let out = augment_with(&img, &params);
        for px in out.data().chunks_exact(3) {
            assert!((px[0] - px[1]).abs() < 1e-6 && (px[1] - px[2]).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_preserves_constant() {
        let img = Tensor::full(&[32, 32, 3], 0.25f32);
        let out = resize_bilinear(&img, 36);
        assert_eq!(out.shape(), &[36, 36, 3]);
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn sampled_output_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(4);
        for _ in 0..20 {
            let p = AugmentParams::sample(32, &mut rng);
            assert!(p.crop.0 <= 4 && p.crop.1 <= 4);
            let out = augment_with(&img, &p);
            assert_eq!(out.shape(), &[32, 32, 3]);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
