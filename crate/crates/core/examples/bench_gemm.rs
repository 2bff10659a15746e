use std::time::Instant;
use tnet_core::Scalar;

fn bench(m: usize, k: usize, n: usize) {
    let a: Vec<f32> = (0..m * k).map(|i| (i % 13) as f32).collect();
    let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32).collect();
    let mut c = vec![0f32; m * n];
    let reps = 20;
    let t = Instant::now();
    for _ in 0..reps {
        f32::gemm(m, k, n, 1.0, &a, (k, 1), &b, (n, 1), 0.0, &mut c, (n, 1));
    }
    let s = t.elapsed().as_secs_f64() / reps as f64;
    println!("{m}x{k}x{n}: {:.2} ms, {:.1} GFLOP/s", s * 1e3, 2.0 * (m * k * n) as f64 / s / 1e9);
}

fn main() {
    bench(8, 360, 4096);
    bench(4096, 360, 8);
    bench(8, 144, 4096);
    bench(64, 64, 4096);
    bench(256, 256, 256);
}
