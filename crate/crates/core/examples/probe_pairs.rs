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
    println!("holdout classes: {:?}", test.class_names);
    for i in 0..test.num_classes() {
        for j in (i + 1)..test.num_classes() {
            let pair = test.select_classes(&[i, j]).unwrap();
            let r = evaluate(&p.encoder, &theta, &pair, 2, 1, 16, 300, &cfg.similarity, 7)
                .unwrap();
            println!("pair ({}, {}): 2-way untrained acc = {:.2}",
                     test.class_names[i], test.class_names[j], r.mean_accuracy);
        }
    }
}
