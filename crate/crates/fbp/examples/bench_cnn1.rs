use fbp::net::{Mode, Network, NetworkSpec};
use fbp::rng::Rng;
use fbp::tensor::Tensor;
use std::time::Instant;

fn main() {
    let spec = NetworkSpec::cnn1(1);
    let net = Network::<f64>::build(&spec, 1, 1).unwrap();
    let mut rng = Rng::new(2);
    let batch: Vec<Tensor<f64>> = (0..16)
        .map(|_| Tensor::uniform(&mut rng, &[1, 48, 48], -0.1, 0.1).unwrap())
        .collect();
    let seeds: Vec<u64> = (0..16).map(|_| rng.next_u64()).collect();

    let t0 = Instant::now();
    let (preds, caches) = net.forward_batch(&batch, Mode::Train, Some(&seeds), 1).unwrap();
    let fwd = t0.elapsed();
    let dpreds: Vec<f64> = preds.iter().map(|p| p * 0.01).collect();
    let t1 = Instant::now();
    let _g = net.backward_batch(&caches, &dpreds, 1).unwrap();
    let bwd = t1.elapsed();
    println!("batch16 forward: {fwd:?}  backward: {bwd:?}");
    println!("per-sample fwd+bwd: {:?}", (fwd + bwd) / 16);

    // Eval-mode forward (center-crop evaluation path)
    let t2 = Instant::now();
    let _ = net.forward_batch(&batch, Mode::Eval, None, 1).unwrap();
    println!("batch16 eval forward: {:?}", t2.elapsed());
}
