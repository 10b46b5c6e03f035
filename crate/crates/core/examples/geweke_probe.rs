use connectome_graphon::data::{ConnectomeDataset, COVARIATE_NAMES};
use connectome_graphon::model::{Hyperparams, ModelState, NUM_LAYERS};
use connectome_graphon::samplers::{Sampler, SamplerOptions};
use connectome_graphon::simulate::simulate_observations;
use connectome_graphon::splines::BasisConfig;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

fn dataset() -> ConnectomeDataset {
    let edges = ConnectomeDataset::edge_list(4, false);
    let ne = edges.len();
    ConnectomeDataset {
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
    }
}

fn hyper() -> Hyperparams {
    Hyperparams { a: 0.5, b1: 5.0, b2: 5.0, d1: 3.0, d2: 3.0, ..Hyperparams::default() }
}

/// prior draw with eta pinned to zero (random effects off)
fn prior_draw(data: &ConnectomeDataset, h: &Hyperparams, rng: &mut ChaCha8Rng) -> ModelState {
    use rand_distr::Beta as BetaSampler;
    let mut st = ModelState::neutral(data, 4);
    for t in 0..NUM_LAYERS {
        for v in st.theta[t].upper_mut() { *v = h.a * rng.sample::<f64,_>(StandardNormal); }
        for g in st.gamma[t].iter_mut() {
            for v in g.upper_mut() { *v = h.a * rng.sample::<f64,_>(StandardNormal); }
        }
    }
    for x in st.xi.iter_mut() {
        let z = h.a * rng.sample::<f64,_>(StandardNormal);
        *x = 1.0 / (1.0 + (-z).exp());
    }
    let beta = BetaSampler::new(h.m_shape, h.m_shape).unwrap();
    for j in 0..st.delta.len() {
        st.ind[j] = rng.gen::<f64>() < h.q;
        st.delta[j] = if st.ind[j] { rng.gen::<f64>() } else { beta.sample(rng) };
    }
    st.sigma2 = 1.0 / Gamma::new(h.d1, 1.0 / h.d2).unwrap().sample(rng);
    st
}

fn main() {
    let iters: usize = std::env::args().nth(1).unwrap_or("20000".into()).parse().unwrap();
    let h = hyper();
    let cfg = BasisConfig::cubic(4).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(171);
    let mut d = dataset();
    let mut mc = 0.0f64;
    let mut mc2 = 0.0f64;
    for _ in 0..iters {
        let mut st = prior_draw(&d, &h, &mut rng);
        simulate_observations(&mut st, &mut d, &cfg, &mut rng).unwrap();
        let l = st.sigma2.ln();
        mc += l; mc2 += l * l;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(172);
    let mut d2 = dataset();
    let mut st0 = prior_draw(&d2, &h, &mut rng);
    simulate_observations(&mut st0, &mut d2, &cfg, &mut rng).unwrap();
    let opts = SamplerOptions { seed: 173, random_effects: false, ..SamplerOptions::default() };
    let mut s = Sampler::new(d2, cfg.clone(), h, opts).with_state(st0);
    let mut sc = 0.0f64;
    for _ in 0..iters {
        s.sweep();
        simulate_observations(&mut s.state, &mut s.data, &cfg, &mut rng).unwrap();
        sc += s.state.sigma2.ln();
    }
    let m_mc = mc / iters as f64;
    let sd_mc = (mc2 / iters as f64 - m_mc * m_mc).sqrt();
    println!("mc ln sigma2 = {:.4} (sd {:.3}), sc ln sigma2 = {:.4}", m_mc, sd_mc, sc / iters as f64);
}
