//! Rough component timings (not a benchmark harness).

use nalgebra::{DMatrix, DVector};
use qrbdo::doe::lhs;
use qrbdo::kriging::{Doe, KrigingModel};
use qrbdo::rng::{stream_rng, Stream};
use std::time::Instant;

fn main() {
    let mut rng = stream_rng(1, Stream::Scratch, &[0]);
    for (n, s, nq) in [(15usize, 2usize, 100_000usize), (30, 2, 100_000), (60, 8, 10_000), (125, 8, 10_000)] {
        let plan = lhs(n, s, &mut rng);
        let ys: Vec<f64> = (0..n).map(|i| (0..s).map(|k| (3.0 * plan.points[(i, k)]).sin()).sum()).collect();
        let doe = Doe::new(plan.points.clone(), DVector::from_row_slice(&ys)).unwrap();
        let t0 = Instant::now();
        let model = KrigingModel::fit(doe, (1e-3, 10.0), 10, None, &mut rng).unwrap();
        let fit_t = t0.elapsed().as_secs_f64();
        let q = DMatrix::from_fn(nq, s, |_, _| rand::Rng::random::<f64>(&mut rng));
        let t0 = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            let b = model.predict_batch(&q);
            std::hint::black_box(b.mu[0]);
        }
        let pred_t = t0.elapsed().as_secs_f64() / reps as f64;
        println!("n={n:4} s={s} fit={fit_t:.3}s predict({nq})={:.1}ms -> {:.0}ns/pt", pred_t*1e3, pred_t / nq as f64 * 1e9);
    }
}
