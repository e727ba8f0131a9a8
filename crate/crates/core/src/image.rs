//! Dense image, mask and latent grids plus the exact mask algebra used to
//! split an image into its editing-region foreground and the untouched
//! background.
//!
//! All grids are row-major. Multi-channel grids are channel-last, so the
//! value of channel `c` at `(row, col)` lives at `(row * width + col) * channels + c`.

use crate::error::{Error, Result};

/// An RGB (or any channel count) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels, data.len())?;
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!(
                "image value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from arbitrary reals by clamping into `[0, 1]`.
    /// Non-finite inputs are rejected.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        check_dims(height, width, channels, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pixel value".into()));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
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

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Overwrites one pixel. Values are clamped into `[0, 1]`.
    pub fn set_pixel(&mut self, row: usize, col: usize, value: &[f64]) {
        let start = (row * self.width + col) * self.channels;
        for (dst, v) in self.data[start..start + self.channels]
            .iter_mut()
            .zip(value)
        {
            *dst = v.clamp(0.0, 1.0);
        }
    }

    pub fn same_size(&self, mask: &Mask) -> bool {
        self.height == mask.height && self.width == mask.width
    }

    fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Mean of each channel over the pixels where `mask` is set, or over the
    /// whole image when no mask is given. Returns `None` for an empty region.
    pub fn region_mean(&self, mask: Option<&Mask>) -> Option<Vec<f64>> {
        let mut sum = vec![0.0; self.channels];
        let mut count = 0usize;
        for p in 0..self.height * self.width {
            if mask.is_some_and(|m| m.data[p] == 0) {
                continue;
            }
            count += 1;
            for (s, v) in sum
                .iter_mut()
                .zip(&self.data[p * self.channels..(p + 1) * self.channels])
            {
                *s += v;
            }
        }
        (count > 0).then(|| sum.into_iter().map(|s| s / count as f64).collect())
    }
}

/// A binary mask; every value is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(height, width, 1, data.len())?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::validation("mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![1; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn invert(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }

    fn same_size(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Pre-threshold reasoner output: per-pixel probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, 1, data.len())?;
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("soft mask values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// The diffusion working space. Unbounded, but always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Latent {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("latent contains NaN or Inf".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Latent) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &Latent, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    /// Elementwise map that rechecks finiteness.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Latent> {
        Latent::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Elementwise combination of two equal-shaped latents.
    pub fn zip_with(&self, other: &Latent, f: impl Fn(f64, f64) -> f64) -> Result<Latent> {
        self.ensure_same_shape(other, "zip_with")?;
        Latent::new(
            self.height,
            self.width,
            self.channels,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_dims(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::shape(format!(
            "dimensions must be positive, got {height}x{width}x{channels}"
        )));
    }
    if height * width * channels != len {
        return Err(Error::shape(format!(
            "{height}x{width}x{channels} grid needs {} values, got {len}",
            height * width * channels
        )));
    }
    Ok(())
}

fn ensure_mask_fits(image: &Image, mask: &Mask) -> Result<()> {
    if image.same_size(mask) {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "image is {}x{}, mask is {}x{}",
            image.height, image.width, mask.height, mask.width
        )))
    }
}

/// Splits `image` into the masked foreground `image ⊙ m` and the background
/// `image ⊙ (1 − m)`. The mask plane multiplies every channel.
pub fn split_foreground(image: &Image, mask: &Mask) -> Result<(Image, Image)> {
    ensure_mask_fits(image, mask)?;
    let ch = image.channels;
    let mut fg = Vec::with_capacity(image.data.len());
    let mut bg = Vec::with_capacity(image.data.len());
    for (i, &v) in image.data.iter().enumerate() {
        let m = f64::from(mask.data[i / ch]);
        fg.push(v * m);
        bg.push(v * (1.0 - m));
    }
    Ok((
        Image::new(image.height, image.width, ch, fg)?,
        Image::new(image.height, image.width, ch, bg)?,
    ))
}

/// Inverse of [`split_foreground`]: `fg ⊙ m + bg ⊙ (1 − m)`.
pub fn composite(fg: &Image, bg: &Image, mask: &Mask) -> Result<Image> {
    if !fg.same_shape(bg) {
        return Err(Error::shape("foreground and background differ in shape"));
    }
    ensure_mask_fits(fg, mask)?;
    let ch = fg.channels;
    let data = fg
        .data
        .iter()
        .zip(&bg.data)
        .enumerate()
        .map(|(i, (&f, &b))| {
            let m = f64::from(mask.data[i / ch]);
            f * m + b * (1.0 - m)
        })
        .collect();
    Image::new(fg.height, fg.width, ch, data)
}

/// Intersection over union. Two empty masks agree perfectly and score 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::shape(format!(
            "masks are {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += usize::from(x & y);
        union += usize::from(x | y);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Thresholds a soft mask; a pixel is set iff its value is `>= threshold`.
pub fn binarize(soft: &SoftMask, threshold: f64) -> Mask {
    Mask {
        height: soft.height,
        width: soft.width,
        data: soft
            .data
            .iter()
            .map(|&v| u8::from(v >= threshold))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img2x2(vals: [f64; 4]) -> Image {
        Image::new(2, 2, 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn split_with_diagonal_mask() {
        let x = img2x2([0.2, 0.4, 0.6, 0.8]);
        let m = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let (fg, bg) = split_foreground(&x, &m).unwrap();
        assert_eq!(fg.data(), &[0.2, 0.0, 0.0, 0.8]);
        assert_eq!(bg.data(), &[0.0, 0.4, 0.6, 0.0]);
    }

    #[test]
    fn split_with_trivial_masks() {
        let x = Image::new(2, 3, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let zero = Image::zeros(2, 3, 3).unwrap();
        let (fg, bg) = split_foreground(&x, &Mask::full(2, 3).unwrap()).unwrap();
        assert_eq!((fg, bg), (x.clone(), zero.clone()));
        let (fg, bg) = split_foreground(&x, &Mask::empty(2, 3).unwrap()).unwrap();
        assert_eq!((fg, bg), (zero, x));
    }

    #[test]
    fn split_rejects_mismatched_mask() {
        let x = Image::zeros(4, 4, 3).unwrap();
        let m = Mask::empty(4, 5).unwrap();
        assert!(matches!(split_foreground(&x, &m), Err(Error::Shape(_))));
        assert!(matches!(composite(&x, &x, &m), Err(Error::Shape(_))));
    }

    #[test]
    fn composite_checkerboard_interleaves() {
        let a = Image::filled(3, 3, 1, 0.25).unwrap();
        let b = Image::filled(3, 3, 1, 0.75).unwrap();
        let m = Mask::from_fn(3, 3, |r, c| (r + c) % 2 == 0).unwrap();
        let out = composite(&a, &b, &m).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let want = if (r + c) % 2 == 0 { 0.25 } else { 0.75 };
                assert_eq!(out.pixel(r, c)[0], want);
            }
        }
        let x = Image::filled(3, 3, 1, 0.4).unwrap();
        let zeros = Image::zeros(3, 3, 1).unwrap();
        assert_eq!(
            composite(&zeros, &x, &Mask::empty(3, 3).unwrap()).unwrap(),
            x
        );
    }

    #[test]
    fn iou_cases() {
        let left = Mask::from_fn(4, 4, |_, c| c < 2).unwrap();
        let right = left.invert();
        let full = Mask::full(4, 4).unwrap();
        assert_eq!(mask_iou(&left, &left).unwrap(), 1.0);
        assert_eq!(mask_iou(&left, &right).unwrap(), 0.0);
        assert_eq!(mask_iou(&left, &full).unwrap(), 0.5);
        let empty = Mask::empty(4, 4).unwrap();
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
        assert!(mask_iou(&left, &Mask::empty(4, 3).unwrap()).is_err());
    }

    #[test]
    fn binarize_is_inclusive() {
        let soft = SoftMask::new(1, 3, vec![0.4, 0.5, 0.6]).unwrap();
        assert_eq!(binarize(&soft, 0.5).data(), &[0, 1, 1]);
        let high = SoftMask::new(2, 2, vec![0.9; 4]).unwrap();
        let low = SoftMask::new(2, 2, vec![0.1; 4]).unwrap();
        assert_eq!(binarize(&high, 0.5), Mask::full(2, 2).unwrap());
        assert_eq!(binarize(&low, 0.5), Mask::empty(2, 2).unwrap());
    }

    #[test]
    fn constructors_validate() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(0, 1, 1, vec![]).is_err());
        assert!(Mask::new(1, 2, vec![0, 2]).is_err());
        assert!(Latent::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(SoftMask::new(1, 1, vec![-0.1]).is_err());
    }

    fn image_and_mask() -> impl Strategy<Value = (Image, Mask)> {
        (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(h, w, c)| {
            (
                proptest::collection::vec(0.0f64..=1.0, h * w * c),
                proptest::collection::vec(0u8..=1, h * w),
            )
                .prop_map(move |(d, m)| {
                    (Image::new(h, w, c, d).unwrap(), Mask::new(h, w, m).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn split_composite_round_trip((x, m) in image_and_mask()) {
            let (fg, bg) = split_foreground(&x, &m).unwrap();
            prop_assert_eq!(composite(&fg, &bg, &m).unwrap(), x.clone());
            let ch = x.channels();
            for i in 0..x.data().len() {
                let on = m.data()[i / ch] == 1;
                let zeroed = if on { bg.data()[i] } else { fg.data()[i] };
                prop_assert_eq!(zeroed, 0.0);
                prop_assert_eq!(fg.data()[i] + bg.data()[i], x.data()[i]);
            }
        }

        #[test]
        fn iou_symmetric(a in proptest::collection::vec(0u8..=1, 16), b in proptest::collection::vec(0u8..=1, 16)) {
            let a = Mask::new(4, 4, a).unwrap();
            let b = Mask::new(4, 4, b).unwrap();
            let ab = mask_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
