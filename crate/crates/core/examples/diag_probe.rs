use connectome_graphon::inference::posterior_mean_matrices;
use connectome_graphon::model::{effect_families, Hyperparams};
use connectome_graphon::samplers::{Sampler, SamplerOptions};
use connectome_graphon::simulate::{
    ancova_fit, ancova_matrices, generate_dataset, CovariateLaw, TruthSpec,
};
use connectome_graphon::splines::BasisConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_seed(seed: u64, n: usize, rep: usize) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(n as u64)) ^ rep as u64)
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn main() {
    let burn: usize = std::env::args().nth(1).unwrap_or("1000".into()).parse().unwrap();
    let samples: usize = std::env::args().nth(2).unwrap_or("1000".into()).parse().unwrap();
    let reps: usize = std::env::args().nth(3).unwrap_or("5".into()).parse().unwrap();
    let only: Option<usize> = std::env::args().nth(4).and_then(|s| s.parse().ok());
    let seed: u64 = 20_260_826;
    let n = 500usize;
    let jn = 20usize;
    let mut truth_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, n, 0));
    let truth = TruthSpec::sample(jn, 0.5, &mut truth_rng);
    let smooth = truth.smooth_matrices();
    let cfg = BasisConfig::cubic(7).unwrap();
    let nfam = smooth.len();
    let mut bayes_all: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut anc_all: Vec<Vec<Vec<f64>>> = Vec::new();
    for rep in 0..reps {
        let base_seed = stream_seed(seed, n, rep + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        let rep_truth = truth.resample_noise(&mut rng);
        let data = generate_dataset(&rep_truth, n, &CovariateLaw::default(), &mut rng);
        let opts = SamplerOptions {
            burn_in: burn,
            samples,
            seed: splitmix64(base_seed),
            random_effects: false,
            ..SamplerOptions::default()
        };
        let t0 = std::time::Instant::now();
        let mut s = Sampler::new(data.clone(), cfg.clone(), Hyperparams::default(), opts);
        let init_cx = corr(&s.state.xi, &truth.xi);
        let init_cd = corr(&s.state.delta, &truth.delta);
        let run = s.run();
        let mut xi_hat = vec![0.0; jn];
        let mut de_hat = vec![0.0; jn];
        for d in &run.draws {
            for j in 0..jn {
                xi_hat[j] += d.xi[j] / run.draws.len() as f64;
                de_hat[j] += d.delta[j] / run.draws.len() as f64;
            }
        }
        // within-chain drift: latent corr, chi_age / nu_age vs-smooth error,
        // and delta mixture-indicator fraction along the kept draws
        let stride = (run.draws.len() / 8).max(1);
        for (qi, d) in run.draws.iter().enumerate().step_by(stride) {
            let mats = connectome_graphon::model::reconstruct_effect_matrices(d, &cfg, jn).unwrap();
            let mse1 = |f: usize| {
                mats[f]
                    .iter()
                    .zip(&smooth[f])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    / (jn * jn) as f64
            };
            let indf = d.ind.iter().filter(|&&b| b).count() as f64 / jn as f64;
            eprintln!(
                "    draw {qi:4}: corr_d {:+.2} chi_age {:.3} nu_age {:.3} chi_male {:.3} ind {:.2} sigma2 {:.3}",
                corr(&d.delta, &truth.delta), mse1(6), mse1(14), mse1(5), indf, d.sigma2
            );
        }
        let est = posterior_mean_matrices(&run.draws, &cfg, jn).unwrap();
        let anc = ancova_matrices(&ancova_fit(&data), jn, &data.edges);
        eprintln!(
            "rep {rep}: {:.0}s init corr xi {:+.2} delta {:+.2} -> post corr xi {:+.2} delta {:+.2} accept {:?}",
            t0.elapsed().as_secs_f64(), init_cx, init_cd,
            corr(&xi_hat, &truth.xi), corr(&de_hat, &truth.delta), run.accept_rates
        );
        let fams = effect_families(&data.covariate_names);
        let mut line = String::new();
        for f in 3..nfam {
            let mse = |v: &Vec<f64>| {
                let mut s = 0.0;
                let mut c = 0;
                for (x, y) in v.iter().zip(&smooth[f]) {
                    if x.is_finite() {
                        s += (x - y) * (x - y);
                        c += 1;
                    }
                }
                s / c.max(1) as f64
            };
            line.push_str(&format!("{}: {:.3}/{:.3}  ", fams[f].label, mse(&est[f]), mse(&anc[f])));
        }
        eprintln!("  vs-smooth b/a {line}");
        bayes_all.push(est);
        anc_all.push(anc);
    }
    // study-style MSE: entrywise bias^2 + sample variance over replications
    let study_mse = |set: &Vec<Vec<Vec<f64>>>, f: usize| {
        let mut total = 0.0;
        let mut cnt = 0usize;
        for idx in 0..jn * jn {
            let vals: Vec<f64> = set.iter().map(|m| m[f][idx]).filter(|v| v.is_finite()).collect();
            if vals.len() < 2 {
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64;
            let bias = m - smooth[f][idx];
            total += bias * bias + var;
            cnt += 1;
        }
        total / cnt.max(1) as f64
    };
    let fams = effect_families(&["mci".into(), "ad".into(), "male".into(), "age".into()]);
    let mut wins = 0;
    for f in 3..nfam {
        let b = study_mse(&bayes_all, f);
        let a = study_mse(&anc_all, f);
        let win = b < 0.5 * a;
        wins += win as usize;
        println!(
            "{:<10} study-mse bayes {:.4} ancova {:.4} ratio {:.2} {}",
            fams[f].label, b, a, b / a, if win { "WIN" } else { "-" }
        );
    }
    println!("wins {wins}/12");
}
