use connectome_graphon::inference::tune_basis_size;
use connectome_graphon::simulate::{generate_dataset, CovariateLaw, TruthSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let n: usize = std::env::args().nth(1).unwrap().parse().unwrap();
    let grid: Vec<usize> = (7..=20).collect();
    let mut hits = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let truth = TruthSpec::sample(20, 0.5, &mut rng);
        let data = generate_dataset(&truth, n, &CovariateLaw::default(), &mut rng);
        let report = tune_basis_size(&data, &grid, 10, &mut rng).unwrap();
        println!("n={n} seed {seed}: chose {}", report.chosen);
        if report.chosen == 7 { hits += 1; }
    }
    println!("n={n}: {hits}/10");
}
