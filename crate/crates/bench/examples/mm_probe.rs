use ndarray::Array2;
use std::time::Instant;

fn bench_f32(m: usize, k: usize, n: usize, iters: usize) {
    let a = Array2::<f32>::from_elem((m, k), 1.000001f32);
    let b = Array2::<f32>::from_elem((k, n), 0.999999f32);
    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..iters {
        let c = a.dot(&b);
        acc += c[[0, 0]];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * iters) as f64;
    println!("f32 {m}x{k}x{n}: {:.2} GFLOPS ({acc})", flops / dt / 1e9);
}

fn bench_f64(m: usize, k: usize, n: usize, iters: usize) {
    let a = Array2::<f64>::from_elem((m, k), 1.000001f64);
    let b = Array2::<f64>::from_elem((k, n), 0.999999f64);
    let t0 = Instant::now();
    let mut acc = 0.0f64;
    for _ in 0..iters {
        let c = a.dot(&b);
        acc += c[[0, 0]];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * iters) as f64;
    println!("f64 {m}x{k}x{n}: {:.2} GFLOPS ({acc})", flops / dt / 1e9);
}

fn main() {
    bench_f32(392, 1152, 256, 50);
    bench_f32(392, 2304, 256, 50);
    bench_f32(392, 864, 128, 100);
    bench_f32(392, 144, 64, 200);
    bench_f32(49, 2304, 256, 200);
    bench_f64(392, 1152, 256, 30);
    bench_f32(1024, 1024, 1024, 10);
}
