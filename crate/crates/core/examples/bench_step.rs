use std::time::Instant;
use tnet_core::{Adam, AdamConfig, Encoder, Graph, ModelConfig, Tensor};

fn main() {
    let cfg = ModelConfig { bottleneck_channels: 1, ..ModelConfig::default() };
    let mut enc = Encoder::<f32>::new(cfg, 1).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    let img = Tensor::from_fn(&[8, 1, 64, 64], |i| ((i * 7919) % 101) as f32 / 101.0);
    let tgt = Tensor::from_fn(&[8, 1, 16, 16], |i| ((i / 16) % 2) as f32);
    for it in 0..5 {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let bound = enc.params.bind(&mut g);
        let x = g.constant(img.clone());
        let out = enc.forward(&mut g, &bound, x).unwrap();
        let t1 = t0.elapsed();
        let y = g.constant(tgt.clone());
        let loss = g.dice_loss(out.supervision, y, 1e-6).unwrap();
        g.backward(loss).unwrap();
        enc.params.zero_grad();
        enc.params.pull_grads(&g, &bound).unwrap();
        adam.step(&mut enc.params).unwrap();
        println!("step {it}: fwd {:?} total {:?} loss {}", t1, t0.elapsed(), g.value(loss).data()[0]);
    }
}
