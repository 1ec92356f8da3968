use protoview::config::RunConfig;
use protoview::eval::evaluate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = RunConfig::default();
    let p = cfg.pipeline().unwrap();
    let (_train, test) = cfg.datasets().unwrap();
    for seed in [1u64, 2, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = p.encoder.init(&mut rng);
        let r = evaluate(&p.encoder, &theta, &test, 5, 1, 16, 200,
                         &protoview::protohead::SimilarityMetric::default(), 7).unwrap();
        println!("seed {seed}: untrained acc = {:.2} +- {:.2}", r.mean_accuracy, r.ci95);
    }
}
