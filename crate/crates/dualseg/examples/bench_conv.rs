// Rough conv3d throughput probe at candidate desk shapes.
use dualseg::nn::{Conv3d, Tensor};
use std::time::Instant;

fn bench(ci: usize, co: usize, side: usize, batch: usize, iters: usize) {
    let mut conv = Conv3d::<f32>::new(ci, co, 3, 1);
    for (i, v) in conv.w.data_mut().iter_mut().enumerate() {
        *v = ((i % 17) as f32 - 8.0) * 0.01;
    }
    let n = batch * ci * side * side * side;
    let x = Tensor::from_vec(&[batch, ci, side, side, side],
        (0..n).map(|i| ((i % 13) as f32) * 0.07).collect());
    let macs = (batch * co * ci * 27 * side * side * side) as f64;
    // forward
    let t0 = Instant::now();
    for _ in 0..iters { let _ = conv.forward(&x); }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    // forward+backward
    let t1 = Instant::now();
    for _ in 0..iters {
        let (y, cache) = conv.forward_cached(&x);
        let _ = conv.backward(&y, &cache);
    }
    let dt2 = t1.elapsed().as_secs_f64() / iters as f64;
    println!("conv {ci}->{co} side {side} batch {batch}: fwd {:.1} ms ({:.1} GFLOP/s), fwd+bwd {:.1} ms ({:.1} GFLOP/s)",
        dt*1e3, 2.0*macs/dt/1e9, dt2*1e3, 6.0*macs/dt2/1e9);
}

fn main() {
    // desk candidates at patch 16
    bench(8, 16, 16, 4, 10);
    bench(16, 32, 8, 4, 10);
    bench(32, 64, 4, 4, 10);
    // patch 24 variants
    bench(8, 16, 24, 4, 5);
    // paper-scale single conv (one iteration feel)
    bench(32, 64, 48, 1, 2);
}
