use connectome_graphon::data::{ConnectomeDataset, COVARIATE_NAMES};
use connectome_graphon::model::{Hyperparams, ModelState, NUM_LAYERS};
use connectome_graphon::samplers::{Sampler, SamplerOptions};
use connectome_graphon::simulate::simulate_observations;
use connectome_graphon::splines::BasisConfig;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

fn main() {
    let edges = ConnectomeDataset::edge_list(4, false);
    let ne = edges.len();
    let data = ConnectomeDataset {
        region_names: (0..4).map(|j| format!("r{j}")).collect(),
        subject_ids: (0..4).map(|i| format!("s{i}")).collect(),
        covariates: vec![
            vec![0.0, 0.0, 0.0, 0.1],
            vec![1.0, 0.0, 1.0, -0.2],
            vec![0.0, 1.0, 0.0, 0.3],
            vec![0.0, 0.0, 1.0, -0.2],
        ],
        covariate_names: COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
        edges,
        counts: vec![vec![1; ne]; 4],
        lengths: vec![vec![Some(1.0); ne]; 4],
        self_edges: false,
    };
    let hyper = Hyperparams { a: 0.5, b1: 5.0, b2: 5.0, d1: 3.0, d2: 3.0, ..Hyperparams::default() };
    let cfg = BasisConfig::cubic(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // one fixed state with mildly positive count predictors
    let mut st = ModelState::neutral(&data, 4);
    for t in 0..NUM_LAYERS {
        for v in st.theta[t].upper_mut() { *v = 0.5 * rng.sample::<f64,_>(StandardNormal); }
    }
    let opts = SamplerOptions { seed: 6, ..SamplerOptions::default() };
    let mut s = Sampler::new(data, cfg.clone(), hyper, opts).with_state(st);
    let g = Gamma::new(3.0, 1.0 / 3.0).unwrap();
    s.state.sigma2 = 1.0 / g.sample(&mut rng);
    let iters = 200_000usize;
    let mut sum = 0.0;
    for _ in 0..iters {
        simulate_observations(&mut s.state, &mut s.data, &cfg, &mut rng).unwrap();
        let preds = connectome_graphon::model::Predictors::compute(&s.state, &s.data, &cfg).unwrap();
        let ne = s.data.num_edges();
        let mu: Vec<f64> = (0..s.data.num_subjects())
            .flat_map(|i| (0..ne).map(move |e| (i, e)))
            .map(|(i, e)| preds.at(i, e).0)
            .collect();
        s.draw_sigma2(&mu);
        sum += s.state.sigma2.ln();
    }
    println!("mean ln sigma2 = {:.4} (target 0.1758)", sum / iters as f64);
}
