//! Matmul throughput micro-probe.
use rrgen_core::tensor::{random_tensor, Tape};
use rand_chacha::rand_core::SeedableRng;
use std::time::Instant;

fn main() {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(vec![512, 512], &mut r, 0.0);
    let b = random_tensor(vec![512, 512], &mut r, 0.0);
    let t0 = Instant::now();
    let reps = 40;
    let mut sink = 0.0;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let (ai, bi) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let c = tape.matmul(ai, bi).unwrap();
        sink += tape.value(c).data()[0];
    }
    let secs = t0.elapsed().as_secs_f64();
    let flops = 2.0 * 512f64.powi(3) * reps as f64;
    println!("matmul fwd: {:.2} GFLOP/s (sink {sink:.3})", flops / secs / 1e9);
}
