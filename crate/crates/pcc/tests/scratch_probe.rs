use pcc::dataset::{load_csv, sample_labeled_subset, LabelColumn};
use pcc::engine::{run, Variant, VariantConfig};
use pcc::graph::{build_graph, GraphPolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[test]
fn probe_iris_misclassified() {
    let d = load_csv(Path::new("../../data/iris.csv"), &LabelColumn::Index(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = sample_labeled_subset(&d, 40, &mut rng).unwrap();
    let g = build_graph(&d, &cfg, &GraphPolicy::KnnOr { k: 7 }).unwrap();
    let vc = VariantConfig::new(Variant::Pcc1);
    for seed in 0..5u64 {
        let out = run(&g, &d, &cfg, &vc, seed).unwrap();
        let wrong: Vec<usize> = (0..d.n())
            .filter(|&i| !cfg.is_labeled(i) && out.labels[i] != d.true_label(i))
            .collect();
        println!("seed {seed}: iters={} wrong({})={:?}", out.iterations, wrong.len(), wrong);
        for &i in &wrong {
            println!("   node {i} true={} pred={} omega={:?}", d.true_label(i), out.labels[i],
                out.decision[i].iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
        }
    }
}
