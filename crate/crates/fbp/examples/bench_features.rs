use fbp::imageproc::{decompose, read_image, WlsParams};
use fbp::pipeline::{pearson, synth_dataset};

fn main() {
    let dir = std::env::temp_dir().join("fbp-feat-bench");
    let _ = std::fs::remove_dir_all(&dir);
    let idx = synth_dataset(32, 56, 11, &dir).unwrap();
    let mut energy = Vec::new();
    let mut border_energy = Vec::new();
    let mut base_mean = Vec::new();
    let mut scores = Vec::new();
    let s = 56usize;
    for r in &idx.records {
        let img = read_image(&idx.base_dir.join(&r.path)).unwrap();
        let ch = decompose::<f64>(&img, &WlsParams::default(), s).unwrap();
        let d = ch.detail.data();
        let e: f64 = d.iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64;
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
        energy.push(e);
        border_energy.push(be / bn);
        base_mean.push(ch.base.mean());
        scores.push(r.score);
    }
    println!("corr(score, detail energy)        = {:+.4}", pearson(&scores, &energy).unwrap());
    println!("corr(score, border detail energy) = {:+.4}", pearson(&scores, &border_energy).unwrap());
    println!("corr(score, base mean)            = {:+.4}", pearson(&scores, &base_mean).unwrap());
    let r2 = |f1: &[f64], f2: &[f64], y: &[f64]| {
        let n = y.len();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (m1, m2, my) = (mean(f1), mean(f2), mean(y));
        let mut xtx = [[0.0; 2]; 2];
        let mut xty = [0.0; 2];
        for i in 0..n {
            let x = [f1[i] - m1, f2[i] - m2];
            let yy = y[i] - my;
            for a in 0..2 {
                for b in 0..2 {
                    xtx[a][b] += x[a] * x[b];
                }
                xty[a] += x[a] * yy;
            }
        }
        let det = xtx[0][0] * xtx[1][1] - xtx[0][1] * xtx[1][0];
        let w0 = (xty[0] * xtx[1][1] - xty[1] * xtx[0][1]) / det;
        let w1 = (xtx[0][0] * xty[1] - xtx[1][0] * xty[0]) / det;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for i in 0..n {
            let p = w0 * (f1[i] - m1) + w1 * (f2[i] - m2);
            let yy = y[i] - my;
            ss_res += (yy - p) * (yy - p);
            ss_tot += yy * yy;
        }
        1.0 - ss_res / ss_tot
    };
    println!("R^2 (full energy + base mean)     = {:.4}", r2(&energy, &base_mean, &scores));
    println!("R^2 (border energy + base mean)   = {:.4}", r2(&border_energy, &base_mean, &scores));
}
