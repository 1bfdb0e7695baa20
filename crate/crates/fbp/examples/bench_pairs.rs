use fbp::imageproc::{decompose, read_image, WlsParams};
use fbp::pipeline::synth_dataset;

fn main() {
    let dir = std::env::temp_dir().join("fbp-pairs-bench");
    let _ = std::fs::remove_dir_all(&dir);
    let idx = synth_dataset(32, 56, 11, &dir).unwrap();
    let s = 56usize;
    let mut rows = Vec::new();
    for r in &idx.records {
        let img = read_image(&idx.base_dir.join(&r.path)).unwrap();
        let ch = decompose::<f64>(&img, &WlsParams::default(), s).unwrap();
        let d = ch.detail.data();
        let mut be = 0.0;
        let mut bn = 0.0;
        for y in 0..s {
            for x in 0..s {
                if x < 6 || x >= s - 6 || y < 6 || y >= s - 6 {
                    be += d[y * s + x].abs();
                    bn += 1.0;
                }
            }
        }
        // raw image border luminance std as an independent grain probe
        let mut lsum = 0.0;
        let mut lsq = 0.0;
        let mut ln = 0.0;
        for y in 0..6 {
            for x in 0..s {
                let l = img.pixels[y * s + x][1];
                lsum += l;
                lsq += l * l;
                ln += 1.0;
            }
        }
        let lstd = (lsq / ln - (lsum / ln) * (lsum / ln)).max(0.0).sqrt();
        rows.push((r.score, be / bn, lstd));
    }
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for (score, be, lstd) in rows {
        println!("score {score:.3}  border_detail {be:.6}  border_lum_std {lstd:.5}");
    }
}
