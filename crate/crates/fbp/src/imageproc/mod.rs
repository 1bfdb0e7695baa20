//! Facial-channel extraction.
//!
//! An input portrait is resized to the network resolution, converted to
//! CIELAB, and its lightness plane is split by the WLS filter into a
//! piecewise-smooth base layer and a residual detail layer. The resulting
//! channel bundle (RGB, a, b, base, detail) is what the networks consume.
//!
//! Everything here is a pure function of its inputs; decomposing several
//! images in parallel is safe.

pub mod color;
pub mod pnm;
pub mod wls;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use std::path::Path;

pub use wls::{total_variation, wls_base, WlsParams};

/// Decoded image with linear-light pixels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    /// Row-major (R,G,B) triples.
    pub pixels: Vec<[f64; 3]>,
}

/// CIELAB image, D65 white point: L in [0,100], a/b roughly in [-110,110].
#[derive(Debug, Clone)]
pub struct ImageLab {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

/// Divisors bringing every channel into a comparable numeric range before
/// per-channel mean subtraction: a,b are divided by 110, L-derived planes
/// by 100, RGB stays in [0,1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelScales {
    pub ab: f64,
    pub lightness: f64,
}

pub const CHANNEL_SCALES: ChannelScales = ChannelScales { ab: 110.0, lightness: 100.0 };

/// Per-image bundle of derived planes at network resolution. All planes
/// share the same H = W extent.
#[derive(Debug, Clone)]
pub struct FaceChannels<T> {
    /// Linear RGB in [0,1], shape [3, H, W].
    pub rgb: Tensor<T>,
    /// a* / 110, shape [1, H, W].
    pub a: Tensor<T>,
    /// b* / 110, shape [1, H, W].
    pub b: Tensor<T>,
    /// WLS base layer / 100, shape [1, H, W].
    pub base: Tensor<T>,
    /// (L - base) / 100, defined as the scaled-domain difference so that
    /// base + detail reproduces L/100 to within one rounding.
    pub detail: Tensor<T>,
    pub scales: ChannelScales,
}

impl<T: Real> FaceChannels<T> {
    pub fn size(&self) -> usize {
        self.rgb.shape()[1]
    }

    /// Planes of the given channel set in their documented stacking order.
    pub fn planes(&self, set: ChannelSet) -> Vec<&Tensor<T>> {
        match set {
            ChannelSet::A => vec![&self.a],
            ChannelSet::B => vec![&self.b],
            ChannelSet::Rgb => vec![&self.rgb],
            ChannelSet::Base => vec![&self.base],
            ChannelSet::Detail => vec![&self.detail],
            ChannelSet::Combined => vec![&self.rgb, &self.base, &self.detail],
        }
    }

    /// Stack the channel set into a [C, H, W] tensor (C per `channel_count`).
    pub fn stack(&self, set: ChannelSet) -> Tensor<T> {
        let size = self.size();
        let mut data = Vec::with_capacity(set.channel_count() * size * size);
        for plane in self.planes(set) {
            data.extend_from_slice(plane.data());
        }
        Tensor::from_vec(&[set.channel_count(), size, size], data).expect("plane sizes agree")
    }
}

/// Which facial planes feed the network input. `Combined` stacks
/// R, G, B, base, detail in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSet {
    A,
    B,
    Rgb,
    Base,
    Detail,
    Combined,
}

impl ChannelSet {
    pub fn channel_count(self) -> usize {
        match self {
            ChannelSet::A | ChannelSet::B | ChannelSet::Base | ChannelSet::Detail => 1,
            ChannelSet::Rgb => 3,
            ChannelSet::Combined => 5,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            ChannelSet::A => 0,
            ChannelSet::B => 1,
            ChannelSet::Rgb => 2,
            ChannelSet::Base => 3,
            ChannelSet::Detail => 4,
            ChannelSet::Combined => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ChannelSet::A,
            1 => ChannelSet::B,
            2 => ChannelSet::Rgb,
            3 => ChannelSet::Base,
            4 => ChannelSet::Detail,
            5 => ChannelSet::Combined,
            _ => return None,
        })
    }

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "a" => ChannelSet::A,
            "b" => ChannelSet::B,
            "rgb" => ChannelSet::Rgb,
            "base" => ChannelSet::Base,
            "detail" => ChannelSet::Detail,
            "combined" => ChannelSet::Combined,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelSet::A => "a",
            ChannelSet::B => "b",
            ChannelSet::Rgb => "rgb",
            ChannelSet::Base => "base",
            ChannelSet::Detail => "detail",
            ChannelSet::Combined => "combined",
        }
    }
}

/// Read a binary 8-bit PPM (P6) and gamma-expand it to linear light.
pub fn read_image(path: &Path) -> Result<ImageRgb> {
    let raw = pnm::read(path)?;
    if raw.channels != 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: "expected a color P6 image".into(),
        });
    }
    let pixels = raw
        .samples
        .chunks_exact(3)
        .map(|px| [color::srgb_decode(px[0]), color::srgb_decode(px[1]), color::srgb_decode(px[2])])
        .collect();
    Ok(ImageRgb { width: raw.width, height: raw.height, pixels })
}

/// Gamma-encode linear pixels and write a binary P6 file.
pub fn write_ppm(img: &ImageRgb, path: &Path) -> Result<()> {
    let mut samples = Vec::with_capacity(img.pixels.len() * 3);
    for px in &img.pixels {
        samples.push(color::srgb_encode(px[0]));
        samples.push(color::srgb_encode(px[1]));
        samples.push(color::srgb_encode(px[2]));
    }
    pnm::write(path, img.width, img.height, 3, &samples)
}

/// Map a [1,H,W] plane linearly from [lo,hi] to 8-bit gray and write a P5
/// file. Values outside the range clamp.
pub fn write_pgm<T: Real>(plane: &Tensor<T>, path: &Path, lo: f64, hi: f64) -> Result<()> {
    if lo >= hi {
        return Err(Error::Arg(format!("write_pgm needs lo < hi, got [{lo}, {hi}]")));
    }
    if plane.rank() != 3 || plane.shape()[0] != 1 {
        return Err(Error::Shape(format!("write_pgm needs [1,H,W], got {:?}", plane.shape())));
    }
    let (h, w) = (plane.shape()[1], plane.shape()[2]);
    let samples: Vec<u8> = plane
        .iter()
        .map(|&v| {
            let t = ((v.to_f64() - lo) / (hi - lo)).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        })
        .collect();
    pnm::write(path, w, h, 1, &samples)
}

/// Bilinear resize with edge clamping. Destination pixel (x,y) samples the
/// source at x·(W−1)/(w−1) (endpoints map to endpoints); a single-pixel
/// destination axis samples the source center. Same size in and out is an
/// exact copy.
pub fn resize_bilinear(img: &ImageRgb, w: usize, h: usize) -> Result<ImageRgb> {
    if w == 0 || h == 0 {
        return Err(Error::Arg("resize extents must be >= 1".into()));
    }
    if w == img.width && h == img.height {
        return Ok(img.clone());
    }
    let src_pos = |dst: usize, dst_n: usize, src_n: usize| -> f64 {
        if dst_n == 1 {
            (src_n - 1) as f64 / 2.0
        } else {
            dst as f64 * (src_n - 1) as f64 / (dst_n - 1) as f64
        }
    };
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        let sy = src_pos(y, h, img.height);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = sy - y0 as f64;
        for x in 0..w {
            let sx = src_pos(x, w, img.width);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = sx - x0 as f64;
            let mut px = [0.0; 3];
            for c in 0..3 {
                let p00 = img.pixels[y0 * img.width + x0][c];
                let p01 = img.pixels[y0 * img.width + x1][c];
                let p10 = img.pixels[y1 * img.width + x0][c];
                let p11 = img.pixels[y1 * img.width + x1][c];
                let top = p00 + (p01 - p00) * fx;
                let bot = p10 + (p11 - p10) * fx;
                px[c] = top + (bot - top) * fy;
            }
            pixels.push(px);
        }
    }
    Ok(ImageRgb { width: w, height: h, pixels })
}

/// Per-pixel CIELAB conversion of a linear-light image.
pub fn srgb_to_lab(img: &ImageRgb) -> ImageLab {
    let pixels = img
        .pixels
        .iter()
        .map(|px| {
            let (l, a, b) = color::linear_rgb_to_lab(px[0], px[1], px[2]);
            [l, a, b]
        })
        .collect();
    ImageLab { width: img.width, height: img.height, pixels }
}

/// Full channel extraction: resize to `out_size`, convert to CIELAB, split
/// L with the WLS filter, and pack the scaled planes.
///
/// The WLS solve always runs in double precision (the result is cached and
/// reused across epochs, so the fast-mode speed win would be negligible);
/// the packed planes take the caller's numeric type.
pub fn decompose<T: Real>(img: &ImageRgb, params: &WlsParams, out_size: usize) -> Result<FaceChannels<T>> {
    params.validate()?;
    let resized = resize_bilinear(img, out_size, out_size)?;
    let lab = srgb_to_lab(&resized);
    let n = out_size * out_size;

    let mut rgb = Vec::with_capacity(3 * n);
    for c in 0..3 {
        rgb.extend(resized.pixels.iter().map(|px| T::from_f64(px[c])));
    }
    let a: Vec<T> = lab.pixels.iter().map(|px| T::from_f64(px[1] / CHANNEL_SCALES.ab)).collect();
    let b: Vec<T> = lab.pixels.iter().map(|px| T::from_f64(px[2] / CHANNEL_SCALES.ab)).collect();

    let l_plane = Tensor::<f64>::from_vec(&[1, out_size, out_size], lab.pixels.iter().map(|px| px[0]).collect())?;
    let base64 = wls_base(&l_plane, params)?;

    let base: Vec<T> =
        base64.iter().map(|&v| T::from_f64(v / CHANNEL_SCALES.lightness)).collect();
    // Detail is defined in the scaled domain so base + detail == L/100
    // to within the one rounding of this subtraction.
    let detail: Vec<T> = l_plane
        .iter()
        .zip(&base)
        .map(|(&l, &bs)| T::from_f64(l / CHANNEL_SCALES.lightness) - bs)
        .collect();

    Ok(FaceChannels {
        rgb: Tensor::from_vec(&[3, out_size, out_size], rgb)?,
        a: Tensor::from_vec(&[1, out_size, out_size], a)?,
        b: Tensor::from_vec(&[1, out_size, out_size], b)?,
        base: Tensor::from_vec(&[1, out_size, out_size], base)?,
        detail: Tensor::from_vec(&[1, out_size, out_size], detail)?,
        scales: CHANNEL_SCALES,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("fbp-improc-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn write_raw_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) {
        pnm::write(path, w, h, 3, rgb).unwrap();
    }

    #[test]
    fn read_image_gamma_expansion() {
        let p = tmp("gamma.ppm");
        write_raw_ppm(&p, 3, 1, &[255, 255, 255, 0, 0, 0, 128, 128, 128]);
        let img = read_image(&p).unwrap();
        assert_eq!(img.pixels[0], [1.0, 1.0, 1.0]);
        assert_eq!(img.pixels[1], [0.0, 0.0, 0.0]);
        for c in img.pixels[2] {
            assert!((c - 0.2159).abs() < 1e-3, "{c}");
        }
    }

    #[test]
    fn resize_identity_constant_and_ramp() {
        let img = ImageRgb {
            width: 2,
            height: 2,
            pixels: vec![[0.1; 3], [0.4; 3], [0.7; 3], [0.9; 3]],
        };
        assert_eq!(resize_bilinear(&img, 2, 2).unwrap(), img);

        let flat = ImageRgb { width: 3, height: 2, pixels: vec![[0.25; 3]; 6] };
        let up = resize_bilinear(&flat, 7, 5).unwrap();
        assert!(up.pixels.iter().all(|px| (px[0] - 0.25).abs() < 1e-12));

        let ramp = ImageRgb { width: 2, height: 1, pixels: vec![[0.0; 3], [1.0; 3]] };
        let wide = resize_bilinear(&ramp, 4, 1).unwrap();
        let vals: Vec<f64> = wide.pixels.iter().map(|px| px[0]).collect();
        assert_eq!(vals[0], 0.0);
        assert_eq!(vals[3], 1.0);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]), "{vals:?}");
    }

    #[test]
    fn decompose_constant_gray() {
        let img = ImageRgb { width: 8, height: 8, pixels: vec![[0.3; 3]; 64] };
        let ch = decompose::<f64>(&img, &WlsParams::default(), 8).unwrap();
        for &d in ch.detail.iter() {
            assert!(d.abs() < 1e-9, "detail {d}");
        }
        let b0 = ch.base.data()[0];
        assert!(ch.base.iter().all(|&b| (b - b0).abs() < 1e-9));
    }

    #[test]
    fn decompose_reconstructs_lightness() {
        let mut rng = Rng::new(77);
        let pixels: Vec<[f64; 3]> = (0..12 * 12)
            .map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()])
            .collect();
        let img = ImageRgb { width: 12, height: 12, pixels };
        let ch = decompose::<f64>(&img, &WlsParams::default(), 12).unwrap();

        // Independent recomputation of the scaled L plane.
        let lab = srgb_to_lab(&resize_bilinear(&img, 12, 12).unwrap());
        for ((&b, &d), px) in ch.base.iter().zip(ch.detail.iter()).zip(&lab.pixels) {
            let l_scaled = px[0] / 100.0;
            let err = (b + d - l_scaled).abs();
            assert!(err <= 2.0 * f64::EPSILON * l_scaled.abs().max(1.0), "err {err}");
        }
    }

    #[test]
    fn pgm_range_mapping() {
        let lo_plane = Tensor::<f64>::filled(&[1, 2, 2], -1.0).unwrap();
        let hi_plane = Tensor::<f64>::filled(&[1, 2, 2], 1.0).unwrap();
        let p1 = tmp("lo.pgm");
        let p2 = tmp("hi.pgm");
        write_pgm(&lo_plane, &p1, -1.0, 1.0).unwrap();
        write_pgm(&hi_plane, &p2, -1.0, 1.0).unwrap();
        assert_eq!(pnm::read(&p1).unwrap().samples, vec![0; 4]);
        assert_eq!(pnm::read(&p2).unwrap().samples, vec![255; 4]);
        assert!(write_pgm(&lo_plane, &p1, 1.0, 1.0).is_err());
    }

    #[test]
    fn ppm_write_read_quantization_bound() {
        let mut rng = Rng::new(5);
        let pixels: Vec<[f64; 3]> =
            (0..16).map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()]).collect();
        let img = ImageRgb { width: 4, height: 4, pixels };
        let p = tmp("quant.ppm");
        write_ppm(&img, &p).unwrap();
        let back = read_image(&p).unwrap();
        // The worst linear-light error of round-to-nearest 8-bit coding is
        // half the widest adjacent-code gap (it sits next to white, where
        // the transfer curve is steepest: ~1.14/255).
        let max_half_gap = (0..255u8)
            .map(|c| color::srgb_decode(c + 1) - color::srgb_decode(c))
            .fold(0.0f64, f64::max)
            / 2.0;
        assert!(max_half_gap < 1.2 / 255.0);
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= max_half_gap + 1e-12);
            }
        }
    }
}
