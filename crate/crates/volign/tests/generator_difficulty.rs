//! The synthetic generator must expose a usable difficulty dial: plain
//! prototype accuracy should fall (up to sampling noise) as support noise
//! rises, with at most one adjacent inversion per ten grid points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use volign::fewshot::{accuracy_against, prototypes, Episode};
use volign::synthdata::{gen_class_centers, gen_episode, GeneratorConfig};

fn plain_accuracy(gen: &GeneratorConfig, episodes: usize) -> f64 {
    let centers = gen_class_centers(gen).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut total = 0.0;
    for _ in 0..episodes {
        let ep = gen_episode(gen, &centers, 5, 1, 3, &mut rng).unwrap();
        let feats: Vec<Vec<_>> = ep
            .support
            .iter()
            .map(|class| {
                class
                    .iter()
                    .map(|ts| Episode::support_feature(ts).unwrap())
                    .collect()
            })
            .collect();
        let protos = prototypes(&feats).unwrap();
        total += accuracy_against(&ep, &protos.per_class, 0.2).unwrap();
    }
    total / episodes as f64
}

#[test]
fn accuracy_is_monotone_in_support_noise() {
    let grid = [0.1, 0.3, 0.6, 1.0, 1.5, 2.2, 3.0, 4.0, 6.0, 9.0];
    let accs: Vec<f64> = grid
        .iter()
        .map(|&noise| {
            let gen = GeneratorConfig {
                token_count: 3,
                support_noise: noise,
                query_noise: 0.6,
                seed: 5,
                ..GeneratorConfig::default()
            };
            plain_accuracy(&gen, 500)
        })
        .collect();
    let inversions = accs
        .windows(2)
        .filter(|w| w[1] > w[0] + 1e-12)
        .count();
    assert!(
        inversions <= 1,
        "expected accuracy non-increasing in support noise (≤1 inversion per 10 \
         grid points), got {inversions} inversions: {accs:?}"
    );
    assert!(
        accs[0] > accs[accs.len() - 1] + 0.1,
        "difficulty dial has no range: {accs:?}"
    );
}
