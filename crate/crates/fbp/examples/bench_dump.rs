use fbp::imageproc::{decompose, read_image, WlsParams};
use fbp::pipeline::synth_dataset;

fn main() {
    let dir = std::env::temp_dir().join("fbp-dump-bench");
    let _ = std::fs::remove_dir_all(&dir);
    let idx = synth_dataset(32, 56, 11, &dir).unwrap();
    let s = 56usize;
    // lowest and highest score images
    let mut order: Vec<usize> = (0..idx.records.len()).collect();
    order.sort_by(|&a, &b| idx.records[a].score.partial_cmp(&idx.records[b].score).unwrap());
    for &i in [order[0], order[15], order[31]].iter() {
        let r = &idx.records[i];
        let img = read_image(&idx.base_dir.join(&r.path)).unwrap();
        let ch = decompose::<f64>(&img, &WlsParams::default(), s).unwrap();
        let d = ch.detail.data();
        // top 4 rows: pure speckle region
        let top: Vec<f64> = (0..4 * s).map(|j| d[j]).collect();
        let nonzero = top.iter().filter(|v| v.abs() > 0.005).count();
        let mean_abs = top.iter().map(|v| v.abs()).sum::<f64>() / top.len() as f64;
        let max_abs = top.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        println!("score {:.3}: top4rows mean|d| {:.5}  max|d| {:.5}  #|d|>0.005: {} / {}",
            r.score, mean_abs, max_abs, nonzero, top.len());
        // print first 28 values of row 1
        let row: Vec<String> = (0..28).map(|x| format!("{:+.3}", d[s + x])).collect();
        println!("  row1: {}", row.join(" "));
    }
}
