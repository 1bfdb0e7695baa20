use fbp::imageproc::ChannelSet;
use fbp::net::NetworkSpec;
use fbp::pipeline::{synth_dataset, train, Split, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let ch = match args.get(2).map(|s| s.as_str()).unwrap_or("detail") {
        "rgb" => ChannelSet::Rgb,
        "base" => ChannelSet::Base,
        _ => ChannelSet::Detail,
    };
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(15);
    let keep: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.5);

    let dir = std::env::temp_dir().join("fbp-overfit-bench");
    let _ = std::fs::remove_dir_all(&dir);
    let idx = synth_dataset(32, 56, 11, &dir).unwrap();
    let split = Split::train_only(idx.len());

    let mut cfg = TrainConfig::new(NetworkSpec::cnn1(1), ch);
    cfg.epochs = epochs;
    cfg.batch_size = 16;
    cfg.lr = lr;
    cfg.crops_per_image = 4;
    cfg.seed = 7;
    cfg.dropout_keep = keep;

    let t0 = Instant::now();
    let out = train::<f64>(&cfg, &idx, &split, None).unwrap();
    println!("elapsed {:?}", t0.elapsed());
    for e in &out.history.epochs {
        println!("epoch {:3}  loss {:10.6}  pearson {:+.4}", e.epoch, e.train_loss, e.eval_pearson);
    }
}
