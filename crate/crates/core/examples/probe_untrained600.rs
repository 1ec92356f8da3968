use protoview::config::RunConfig;
use protoview::eval::evaluate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
fn main() {
    let cfg = RunConfig::default();
    let p = cfg.pipeline().unwrap();
    let (_train, test) = cfg.datasets().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let theta = p.encoder.init(&mut rng);
    let r = evaluate(&p.encoder, &theta, &test, 5, 1, 16, 600, &cfg.similarity, 7).unwrap();
    println!("exact acceptance untrained: {:.2} +- {:.2}", r.mean_accuracy, r.ci95);
}
