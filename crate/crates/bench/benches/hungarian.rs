use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dndetr_core::matching::{hungarian_assign, CostMatrix};

fn random_matrix(rows: usize, cols: usize, seed: u64) -> CostMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..rows * cols).map(|_| rng.gen_range(0.0..10.0)).collect();
    CostMatrix::new(rows, cols, values).unwrap()
}

fn bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for (n, m) in [(16, 5), (100, 10), (300, 50)] {
        let matrix = random_matrix(n, m, 1);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{n}x{m}")), &matrix, |b, c| {
            b.iter(|| hungarian_assign(black_box(c)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
