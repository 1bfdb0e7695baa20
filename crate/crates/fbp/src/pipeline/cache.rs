//! On-disk cache of channel decompositions.
//!
//! Repeated epochs and cascade stages reuse the same decomposition, so the
//! result is cached keyed by image content and parameters:
//!
//! ```text
//! <cache_dir>/<image-hash>/<params-fingerprint>.<plane>.bin
//! ```
//!
//! with one file per plane (rgb, a, b, base, detail). The image hash is
//! FNV-1a over the file bytes; the fingerprint covers the WLS parameters,
//! output size and element type. Plane files carry a small header and a
//! trailing checksum; unreadable or stale entries are recomputed and
//! rewritten rather than reported.

use crate::error::{Error, Result};
use crate::imageproc::{self, ChannelScales, FaceChannels, WlsParams, CHANNEL_SCALES};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::util::{fnv1a, hex64};
use std::path::{Path, PathBuf};

const PLANE_MAGIC: &[u8; 4] = b"FBPC";
const PLANES: [&str; 5] = ["rgb", "a", "b", "base", "detail"];

fn plane_path(dir: &Path, image_hash: u64, fp: u64, plane: &str) -> PathBuf {
    dir.join(hex64(image_hash)).join(format!("{}.{plane}.bin", hex64(fp)))
}

fn write_plane<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + t.len() * T::BYTES);
    buf.extend_from_slice(PLANE_MAGIC);
    buf.push(T::DTYPE_TAG);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_plane<T: Real>(path: &Path, channels: usize, size: usize) -> Option<Tensor<T>> {
    let bytes = std::fs::read(path).ok()?;
    if bytes.len() < 4 + 1 + 12 + 8 {
        return None;
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    if u64::from_le_bytes(trailer.try_into().ok()?) != fnv1a(body) {
        return None;
    }
    if &body[..4] != PLANE_MAGIC || body[4] != T::DTYPE_TAG {
        return None;
    }
    let dim = |i: usize| -> usize {
        u32::from_le_bytes(body[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize
    };
    if [dim(0), dim(1), dim(2)] != [channels, size, size] {
        return None;
    }
    let payload = &body[17..];
    if payload.len() != channels * size * size * T::BYTES {
        return None;
    }
    let data: Vec<T> = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::from_vec(&[channels, size, size], data).ok()
}

fn load_cached<T: Real>(dir: &Path, image_hash: u64, fp: u64, size: usize) -> Option<FaceChannels<T>> {
    let get = |plane: &str, c: usize| read_plane::<T>(&plane_path(dir, image_hash, fp, plane), c, size);
    Some(FaceChannels {
        rgb: get(PLANES[0], 3)?,
        a: get(PLANES[1], 1)?,
        b: get(PLANES[2], 1)?,
        base: get(PLANES[3], 1)?,
        detail: get(PLANES[4], 1)?,
        scales: ChannelScales { ab: CHANNEL_SCALES.ab, lightness: CHANNEL_SCALES.lightness },
    })
}

fn store<T: Real>(dir: &Path, image_hash: u64, fp: u64, ch: &FaceChannels<T>) -> Result<()> {
    write_plane(&plane_path(dir, image_hash, fp, PLANES[0]), &ch.rgb)?;
    write_plane(&plane_path(dir, image_hash, fp, PLANES[1]), &ch.a)?;
    write_plane(&plane_path(dir, image_hash, fp, PLANES[2]), &ch.b)?;
    write_plane(&plane_path(dir, image_hash, fp, PLANES[3]), &ch.base)?;
    write_plane(&plane_path(dir, image_hash, fp, PLANES[4]), &ch.detail)?;
    Ok(())
}

/// Decompose `path`, going through the cache directory when one is given.
pub fn decompose_cached<T: Real>(
    path: &Path,
    wls: &WlsParams,
    out_size: usize,
    cache_dir: Option<&Path>,
) -> Result<FaceChannels<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let image_hash = fnv1a(&bytes);
    let fp = wls.fingerprint(out_size, T::DTYPE_TAG);
    if let Some(dir) = cache_dir {
        if let Some(ch) = load_cached::<T>(dir, image_hash, fp, out_size) {
            return Ok(ch);
        }
    }
    let img = imageproc::read_image(path)?;
    let ch = imageproc::decompose::<T>(&img, wls, out_size)?;
    if let Some(dir) = cache_dir {
        store(dir, image_hash, fp, &ch)?;
    }
    Ok(ch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageproc::write_ppm;
    use crate::imageproc::ImageRgb;
    use crate::rng::Rng;

    #[test]
    fn cache_hit_matches_fresh_decomposition() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("face.ppm");
        let mut rng = Rng::new(3);
        let pixels: Vec<[f64; 3]> =
            (0..64).map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()]).collect();
        write_ppm(&ImageRgb { width: 8, height: 8, pixels }, &img_path).unwrap();

        let cache = dir.path().join("cache");
        let wls = WlsParams::default();
        let fresh = decompose_cached::<f64>(&img_path, &wls, 8, Some(&cache)).unwrap();
        assert!(cache.exists());
        let cached = decompose_cached::<f64>(&img_path, &wls, 8, Some(&cache)).unwrap();
        assert_eq!(fresh.rgb, cached.rgb);
        assert_eq!(fresh.detail, cached.detail);

        // A different fingerprint misses and recomputes.
        let other = WlsParams { lambda: 0.5, ..WlsParams::default() };
        let recomputed = decompose_cached::<f64>(&img_path, &other, 8, Some(&cache)).unwrap();
        assert_ne!(fresh.base, recomputed.base);
    }

    #[test]
    fn corrupt_cache_entry_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("face.ppm");
        write_ppm(
            &ImageRgb { width: 4, height: 4, pixels: vec![[0.5; 3]; 16] },
            &img_path,
        )
        .unwrap();
        let cache = dir.path().join("cache");
        let wls = WlsParams::default();
        let fresh = decompose_cached::<f64>(&img_path, &wls, 4, Some(&cache)).unwrap();

        // Truncate one plane file.
        let hash = fnv1a(&std::fs::read(&img_path).unwrap());
        let fp = wls.fingerprint(4, 8);
        let victim = plane_path(&cache, hash, fp, "detail");
        std::fs::write(&victim, b"junk").unwrap();

        let again = decompose_cached::<f64>(&img_path, &wls, 4, Some(&cache)).unwrap();
        assert_eq!(fresh.detail, again.detail);
    }
}
