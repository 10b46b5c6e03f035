use connectome_graphon::inference::posterior_mean_matrices;
use connectome_graphon::model::{effect_families, Hyperparams};
use connectome_graphon::samplers::{Sampler, SamplerOptions};
use connectome_graphon::simulate::{ancova_fit, ancova_matrices, family_mean, generate_dataset, CovariateLaw, TruthSpec};
use connectome_graphon::splines::BasisConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let burn: usize = std::env::args().nth(1).unwrap_or("1000".into()).parse().unwrap();
    let samples: usize = std::env::args().nth(2).unwrap_or("1000".into()).parse().unwrap();
    let re: bool = std::env::args().nth(3).unwrap_or("false".into()).parse().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let truth = TruthSpec::sample(20, 0.5, &mut rng);
    let data = generate_dataset(&truth, 500, &CovariateLaw::default(), &mut rng);
    let cfg = BasisConfig::cubic(7).unwrap();
    let opts = SamplerOptions { burn_in: burn, samples, seed: 7, random_effects: re, ..SamplerOptions::default() };
    let oracle: bool = std::env::args().nth(4).unwrap_or("false".into()).parse().unwrap();
    let t0 = std::time::Instant::now();
    let mut s = Sampler::new(data.clone(), cfg.clone(), Hyperparams::default(), opts);
    if oracle {
        s.state.xi = truth.xi.clone();
        s.state.delta = truth.delta.clone();
    }
    let run = s.run();
    eprintln!("fit took {:.0}s, steps {:?}, accept {:?}", t0.elapsed().as_secs_f64(), s.steps, run.accept_rates);
    for row in run.trace.iter().rev().take(3) {
        eprintln!("trace iter {} ll {:.1} sigma2 {:.4}", row.iter, row.log_likelihood, row.sigma2);
    }
    let est = posterior_mean_matrices(&run.draws, &cfg, 20).unwrap();
    let anc = ancova_matrices(&ancova_fit(&data), 20, &data.edges);
    let fams = effect_families(&data.covariate_names);
    let jn = 20usize;
    // posterior mean latents and their rank correlation with the truth
    let mean_lat = |pick: fn(&connectome_graphon::model::ModelState) -> &Vec<f64>| {
        let mut m = vec![0.0; jn];
        for d in &run.draws {
            for (mi, v) in m.iter_mut().zip(pick(d)) { *mi += v; }
        }
        for mi in m.iter_mut() { *mi /= run.draws.len() as f64; }
        m
    };
    let corr = |a: &[f64], b: &[f64]| {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) { sab += (x - ma) * (y - mb); saa += (x - ma) * (x - ma); sbb += (y - mb) * (y - mb); }
        sab / (saa * sbb).sqrt()
    };
    let xi_hat = mean_lat(|d| &d.xi);
    let de_hat = mean_lat(|d| &d.delta);
    eprintln!("corr(xi_hat, xi_true) {:+.3}  corr(delta_hat, delta_true) {:+.3}",
        corr(&xi_hat, &truth.xi), corr(&de_hat, &truth.delta));
    for (f, fam) in fams.iter().enumerate() {
        let t = &truth.matrices[f];
        let lat = if f < 3 { &truth.xi } else { &truth.delta };
        let smooth: Vec<f64> = (0..jn * jn)
            .map(|idx| family_mean(f, lat[idx / jn], lat[idx % jn]))
            .collect();
        let e = &est[f];
        let a = &anc[f];
        let ms = |v: &Vec<f64>| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let mse = |v: &Vec<f64>, t: &Vec<f64>| {
            let mut s = 0.0; let mut c = 0;
            for (x, y) in v.iter().zip(t) { if x.is_finite() { s += (x - y) * (x - y); c += 1; } }
            s / c.max(1) as f64
        };
        println!(
            "{:<10} rms(truth) {:.3} rms(bayes) {:.3} mse(bayes) {:.4} mse(ancova) {:.4} | vs-smooth bayes {:.4} ancova {:.4}",
            fam.label, ms(t), ms(e), mse(e, t), mse(a, t), mse(e, &smooth), mse(a, &smooth)
        );
    }
}
