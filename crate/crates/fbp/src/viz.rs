//! Qualitative outputs: tiled feature-map grids of the convolution layers
//! and prediction-vs-truth scatter rasters.

use crate::error::{Error, Result};
use crate::imageproc::pnm;
use crate::net::{LayerSpec, ModelFile};
use crate::pipeline::{center_crop, decompose_cached, EvalReport};
use crate::real::Real;
use std::fmt::Write as _;
use std::path::Path;

/// Geometry of a written feature-map grid.
///
/// The canvas is `cols` × `rows` tiles of `tile_extent` pixels with 1-px
/// separators between tiles (none at the outer border), so
/// `width = cols·tile_extent + cols − 1` and likewise for `height`.
/// Unused trailing cells are black.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMapGrid {
    pub layer: usize,
    pub map_count: usize,
    /// Side length of one rendered map (after any legibility upsampling).
    pub tile_extent: usize,
    pub rows: usize,
    pub cols: usize,
    pub width: usize,
    pub height: usize,
}

/// Which stage of the conv layer the grid shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapStage {
    /// Post-activation, before the following pool (default).
    PrePool,
    /// After the following pool layer.
    PostPool,
}

/// Min-max normalize one map into [0,1]; constant maps render mid-gray.
fn normalize<T: Real>(map: &[T]) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in map {
        lo = lo.min(v.to_f64());
        hi = hi.max(v.to_f64());
    }
    if hi - lo <= 0.0 {
        return vec![0.5; map.len()];
    }
    map.iter().map(|v| (v.to_f64() - lo) / (hi - lo)).collect()
}

fn upsample_nearest(map: &[f64], extent: usize, factor: usize) -> Vec<f64> {
    let out_e = extent * factor;
    let mut out = vec![0.0; out_e * out_e];
    for y in 0..out_e {
        for x in 0..out_e {
            out[y * out_e + x] = map[(y / factor) * extent + (x / factor)];
        }
    }
    out
}

/// Render the feature maps of the `layer`-th convolution (1-based) for one
/// image and write the tiled grid as an 8-bit PGM. Maps with spatial extent
/// below 4 are upsampled ×8 nearest-neighbor for legibility.
pub fn feature_maps<T: Real>(
    model: &ModelFile<T>,
    image_path: &Path,
    layer: usize,
    stage: MapStage,
    cache_dir: Option<&Path>,
    out_path: &Path,
) -> Result<FeatureMapGrid> {
    let spec = model.network.spec();
    let conv_indices: Vec<usize> = spec
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| matches!(l, LayerSpec::Conv { .. }).then_some(i))
        .collect();
    if layer == 0 || layer > conv_indices.len() {
        return Err(Error::Arg(format!(
            "conv layer {layer} out of range 1..={}",
            conv_indices.len()
        )));
    }
    let conv_li = conv_indices[layer - 1];
    let read_li = match stage {
        MapStage::PrePool => conv_li,
        MapStage::PostPool => {
            match spec.layers.get(conv_li + 1) {
                Some(LayerSpec::Pool) => conv_li + 1,
                _ => conv_li,
            }
        }
    };

    let desc = &model.descriptor;
    let ch = decompose_cached::<T>(image_path, &desc.wls, spec.stored_size, cache_dir)?;
    let mut input = center_crop(&ch, desc.channel_set, spec.crop_size)?;
    let plane = spec.crop_size * spec.crop_size;
    for (c, &m) in desc.means.iter().enumerate() {
        let m = T::from_f64(m);
        for v in &mut input.data_mut()[c * plane..(c + 1) * plane] {
            *v -= m;
        }
    }

    let acts = model.network.forward_activations(&input, read_li)?;
    let maps_t = acts.last().expect("activations");
    let (m, e) = (maps_t.shape()[0], maps_t.shape()[1]);

    let factor = if e < 4 { 8 } else { 1 };
    let tile = e * factor;
    let cols = (m as f64).sqrt().ceil() as usize;
    let rows = m.div_ceil(cols);
    let width = cols * tile + cols - 1;
    let height = rows * tile + rows - 1;

    let mut canvas = vec![0.0f64; width * height];
    for mi in 0..m {
        let src = &maps_t.data()[mi * e * e..(mi + 1) * e * e];
        let mut norm = normalize(src);
        if factor > 1 {
            norm = upsample_nearest(&norm, e, factor);
        }
        let (tr, tc) = (mi / cols, mi % cols);
        let y0 = tr * (tile + 1);
        let x0 = tc * (tile + 1);
        for y in 0..tile {
            for x in 0..tile {
                canvas[(y0 + y) * width + x0 + x] = norm[y * tile + x];
            }
        }
    }
    let samples: Vec<u8> = canvas.iter().map(|v| (v * 255.0).round() as u8).collect();
    pnm::write(out_path, width, height, 1, &samples)?;
    Ok(FeatureMapGrid { layer, map_count: m, tile_extent: tile, rows, cols, width, height })
}

const SCATTER_SIZE: usize = 256;

/// Map a score in [1,5] to a canvas column (clamping out-of-range values).
fn score_to_px(v: f64) -> usize {
    let t = ((v - 1.0) / 4.0).clamp(0.0, 1.0);
    (t * (SCATTER_SIZE - 1) as f64).round() as usize
}

/// Raster scatter of (truth, prediction) over [1,5]² with the identity
/// line, written as a P6 PPM, plus a companion `truth,prediction` CSV at
/// the same path with extension `.csv`.
///
/// Rasterization: column = round((truth−1)/4·255), row = 255 −
/// round((prediction−1)/4·255); markers are red plus-shapes centered on the
/// point, so a perfect prediction's center pixel lies exactly on the gray
/// identity diagonal.
pub fn scatter_report(report: &EvalReport, out_path: &Path) -> Result<()> {
    if report.samples.is_empty() {
        return Err(Error::Arg("empty report".into()));
    }
    let w = SCATTER_SIZE;
    let mut pixels = vec![[255u8, 255, 255]; w * w];
    for c in 0..w {
        let r = w - 1 - c;
        pixels[r * w + c] = [160, 160, 160];
    }
    for (_, truth, pred) in &report.samples {
        let col = score_to_px(*truth);
        let row = w - 1 - score_to_px(*pred);
        let mut put = |r: isize, c: isize| {
            if (0..w as isize).contains(&r) && (0..w as isize).contains(&c) {
                pixels[r as usize * w + c as usize] = [220, 30, 30];
            }
        };
        put(row as isize, col as isize);
        put(row as isize - 1, col as isize);
        put(row as isize + 1, col as isize);
        put(row as isize, col as isize - 1);
        put(row as isize, col as isize + 1);
    }
    let mut samples = Vec::with_capacity(w * w * 3);
    for px in &pixels {
        samples.extend_from_slice(px);
    }
    pnm::write(out_path, w, w, 3, &samples)?;

    let mut csv = String::from("truth,prediction\n");
    for (_, truth, pred) in &report.samples {
        let _ = writeln!(csv, "{truth},{pred}");
    }
    let csv_path = out_path.with_extension("csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageproc::{write_ppm, ChannelSet, ImageRgb, WlsParams};
    use crate::net::{ChannelDescriptor, LayerSpec, Network, NetworkSpec};
    use crate::rng::Rng;

    fn toy_model(seed: u64) -> ModelFile<f64> {
        let spec = NetworkSpec::custom(
            1,
            16,
            12,
            vec![
                LayerSpec::Conv { out_maps: 5, kernel: 3 },
                LayerSpec::Pool,
                LayerSpec::Conv { out_maps: 3, kernel: 2 },
                LayerSpec::Pool,
                LayerSpec::FullyConnected { out_neurons: 1, relu: false },
            ],
        );
        ModelFile {
            network: Network::build(&spec, 1, seed).unwrap(),
            descriptor: ChannelDescriptor::new(ChannelSet::Detail, vec![0.0], WlsParams::default()),
        }
    }

    fn test_image(dir: &Path, seed: u64) -> std::path::PathBuf {
        let mut rng = Rng::new(seed);
        let pixels: Vec<[f64; 3]> =
            (0..256).map(|_| [rng.next_f64(), rng.next_f64(), rng.next_f64()]).collect();
        let p = dir.join("in.ppm");
        write_ppm(&ImageRgb { width: 16, height: 16, pixels }, &p).unwrap();
        p
    }

    #[test]
    fn grid_geometry_matches_shape_chain() {
        let dir = tempfile::tempdir().unwrap();
        let model = toy_model(3);
        let img = test_image(dir.path(), 4);
        let out = dir.path().join("maps.pgm");
        let grid = feature_maps(&model, &img, 1, MapStage::PrePool, None, &out).unwrap();
        // conv1: 5 maps of extent 10; 3x2 tile grid.
        assert_eq!(grid.map_count, 5);
        assert_eq!(grid.tile_extent, 10);
        assert_eq!((grid.cols, grid.rows), (3, 2));
        assert_eq!(grid.width, 3 * 10 + 2);
        assert_eq!(grid.height, 2 * 10 + 1);
        let img = pnm::read(&out).unwrap();
        assert_eq!((img.width, img.height), (grid.width, grid.height));

        // conv2 pre-pool extent is 4; post-pool extent 2 upsamples by 8.
        let g2 = feature_maps(&model, &img_path_back(&dir), 2, MapStage::PostPool, None, &out).unwrap();
        assert_eq!(g2.tile_extent, 16);
        assert!(feature_maps(&model, &img_path_back(&dir), 3, MapStage::PrePool, None, &out).is_err());
    }

    fn img_path_back(dir: &tempfile::TempDir) -> std::path::PathBuf {
        dir.path().join("in.ppm")
    }

    #[test]
    fn constant_maps_render_mid_gray_tiles() {
        let dir = tempfile::tempdir().unwrap();
        // Constant image -> every detail-channel input is 0 after mean
        // subtraction -> conv outputs are per-map constants (the biases).
        let p = dir.path().join("flat.ppm");
        write_ppm(&ImageRgb { width: 16, height: 16, pixels: vec![[0.5; 3]; 256] }, &p).unwrap();
        let model = toy_model(5);
        let out = dir.path().join("flat.conv1.pgm");
        let grid = feature_maps(&model, &p, 1, MapStage::PrePool, None, &out).unwrap();
        let img = pnm::read(&out).unwrap();
        for tr in 0..grid.rows {
            for tc in 0..grid.cols {
                if tr * grid.cols + tc >= grid.map_count {
                    continue;
                }
                let y0 = tr * (grid.tile_extent + 1);
                let x0 = tc * (grid.tile_extent + 1);
                for y in 0..grid.tile_extent {
                    for x in 0..grid.tile_extent {
                        let v = img.samples[(y0 + y) * grid.width + x0 + x];
                        assert_eq!(v, 128, "constant map renders mid-gray");
                    }
                }
            }
        }
    }

    #[test]
    fn feature_maps_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let model = toy_model(7);
        let img = test_image(dir.path(), 8);
        let o1 = dir.path().join("a.pgm");
        let o2 = dir.path().join("b.pgm");
        feature_maps(&model, &img, 2, MapStage::PrePool, None, &o1).unwrap();
        feature_maps(&model, &img, 2, MapStage::PrePool, None, &o2).unwrap();
        assert_eq!(std::fs::read(o1).unwrap(), std::fs::read(o2).unwrap());
    }

    #[test]
    fn scatter_markers_on_identity() {
        let report = EvalReport {
            config_fingerprint: String::new(),
            samples: vec![
                ("a".into(), 3.0, 3.0),
                ("b".into(), 1.0, 1.0),
                ("c".into(), 5.0, 5.0),
            ],
            pearson_r: Some(1.0),
            pearson_error: None,
            mae: 0.0,
            rmse: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("scatter.ppm");
        scatter_report(&report, &out).unwrap();
        let img = pnm::read(&out).unwrap();
        for (_, truth, pred) in &report.samples {
            let col = score_to_px(*truth);
            let row = SCATTER_SIZE - 1 - score_to_px(*pred);
            assert_eq!(row, SCATTER_SIZE - 1 - col, "perfect prediction sits on the diagonal");
            let px = &img.samples[(row * SCATTER_SIZE + col) * 3..(row * SCATTER_SIZE + col) * 3 + 3];
            assert_eq!(px, &[220, 30, 30]);
        }
        let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + report.samples.len());
    }
}
