//! sRGB and CIELAB conversions (D65 white point, 2° observer).

/// sRGB electro-optical transfer function: 8-bit code value to linear light.
pub fn srgb_decode(code: u8) -> f64 {
    let c = code as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse transfer function: linear light to an 8-bit code value, clamped.
pub fn srgb_encode(linear: f64) -> u8 {
    let l = linear.clamp(0.0, 1.0);
    let c = if l <= 0.003_130_8 { 12.92 * l } else { 1.055 * l.powf(1.0 / 2.4) - 0.055 };
    (c * 255.0).round().clamp(0.0, 255.0) as u8
}

const XN: f64 = 0.950_47;
const YN: f64 = 1.0;
const ZN: f64 = 1.088_83;

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D {
        t * t * t
    } else {
        3.0 * D * D * (t - 4.0 / 29.0)
    }
}

/// Linear sRGB in [0,1] to CIELAB (L in [0,100]).
pub fn linear_rgb_to_lab(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;

    let fx = lab_f(x / XN);
    let fy = lab_f(y / YN);
    let fz = lab_f(z / ZN);

    // The truncated matrix rows sum to slightly above one, so white would
    // land a few 1e-6 above L = 100; clamp to keep L in [0, 100].
    let l = (116.0 * fy - 16.0).clamp(0.0, 100.0);
    (l, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// CIELAB back to linear sRGB, clamped to [0,1].
pub fn lab_to_linear_rgb(l: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;

    let x = XN * lab_f_inv(fx);
    let y = YN * lab_f_inv(fy);
    let z = ZN * lab_f_inv(fz);

    let r = 3.240_454_2 * x - 1.537_138_5 * y - 0.498_531_4 * z;
    let g = -0.969_266_0 * x + 1.876_010_8 * y + 0.041_556_0 * z;
    let bb = 0.055_643_4 * x - 0.204_025_9 * y + 1.057_225_2 * z;

    (r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), bb.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_black_and_mid_gray() {
        let (l, a, b) = linear_rgb_to_lab(1.0, 1.0, 1.0);
        assert!((l - 100.0).abs() < 1e-3 && a.abs() < 1e-3 && b.abs() < 1e-3);

        let (l, a, b) = linear_rgb_to_lab(0.0, 0.0, 0.0);
        assert!(l.abs() < 1e-12 && a.abs() < 1e-12 && b.abs() < 1e-12);

        // 8-bit 128 decodes to ~0.2159 linear; L* = 116·f(Y) − 16 ≈ 53.59.
        let y = srgb_decode(128);
        assert!((y - 0.2159).abs() < 1e-3, "linear {y}");
        let (l, a, b) = linear_rgb_to_lab(y, y, y);
        assert!((l - 53.59).abs() < 5e-3, "L {l}");
        assert!(a.abs() < 1e-3 && b.abs() < 1e-3);
    }

    #[test]
    fn gray_ramp_roundtrip_and_monotone() {
        let mut last_l = -1.0;
        for code in 0..=255u8 {
            let lin = srgb_decode(code);
            let (l, a, b) = linear_rgb_to_lab(lin, lin, lin);
            assert!(l > last_l, "L monotone at code {code}");
            last_l = l;
            let (r, g, bb) = lab_to_linear_rgb(l, a, b);
            for (ch, v) in [("r", r), ("g", g), ("b", bb)] {
                let back = srgb_encode(v);
                assert!(
                    (back as i32 - code as i32).abs() <= 1,
                    "{ch} code {code} -> {back}"
                );
            }
        }
        assert!((0.0..=100.0).contains(&last_l));
    }

    #[test]
    fn random_color_roundtrip() {
        let mut rng = crate::rng::Rng::new(99);
        for _ in 0..1000 {
            let codes = [rng.randint(256) as u8, rng.randint(256) as u8, rng.randint(256) as u8];
            let lin: Vec<f64> = codes.iter().map(|&c| srgb_decode(c)).collect();
            let (l, a, b) = linear_rgb_to_lab(lin[0], lin[1], lin[2]);
            assert!((0.0..=100.0 + 1e-9).contains(&l));
            let (r, g, bb) = lab_to_linear_rgb(l, a, b);
            for (orig, v) in codes.iter().zip([r, g, bb]) {
                let back = srgb_encode(v);
                assert!((back as i32 - *orig as i32).abs() <= 1, "{orig} -> {back}");
            }
        }
    }
}
