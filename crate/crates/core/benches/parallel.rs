//! Parallel vs sequential execution of the data-parallel hot loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ltcascade::cascade::CascadeEnsemble;
use ltcascade::clustering::{features_by_class, visual_similarity, HierarchyTree};
use ltcascade::config::PipelineConfig;
use ltcascade::datagen::generate_synthetic;
use ltcascade::dataset::{Dataset, Split};
use ltcascade::exec;
use ltcascade::hier_train::{pretrain_base, train_hierarchy, HierConfig, StrategyPath};
use ltcascade::models::{extract_features, train_ovr_svm, MlpModel, SvmConfig};

struct Fixture {
    dataset: Dataset,
    base: MlpModel,
    ensemble: CascadeEnsemble,
}

fn fixture() -> Fixture {
    let mut cfg = PipelineConfig::default().with_seed(3);
    cfg.pretrain.epochs = 3;
    cfg.finetune.epochs = 2;
    cfg.min_node_epochs = 1;
    cfg.svm.iterations = 100;
    let (dataset, truth) = generate_synthetic(&cfg.gen).expect("generate");
    let base = pretrain_base(&dataset, &cfg).expect("pretrain");
    let tree = HierarchyTree::from_levels(vec![vec![dataset.classes()], truth.groups()]).expect("tree");
    let strategy = StrategyPath::full(tree.depth());
    let ensemble = train_hierarchy(&tree, &dataset, &base, &strategy, &HierConfig::from_pipeline(&cfg))
        .expect("train")
        .ensemble;
    Fixture { dataset, base, ensemble }
}

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn bench_all(c: &mut Criterion) {
    let fx = fixture();
    let test = fx.dataset.split_indices(Split::Test);
    let train = fx.dataset.split_indices(Split::Train);
    let features = extract_features(&fx.base, &fx.dataset, &train, true).expect("features");
    let labels: Vec<usize> = train.iter().map(|&i| fx.dataset.sample(i).label).collect();
    let svm_cfg = SvmConfig {
        iterations: 200,
        ..SvmConfig::default()
    };
    let by_class = features_by_class(&fx.base, &fx.dataset, &train, true).expect("by class");

    let mut group = c.benchmark_group("hot_loops");
    group.sample_size(10);
    for (name, sequential) in modes() {
        exec::set_sequential(sequential);
        group.bench_function(BenchmarkId::new("cascade_score", name), |b| {
            b.iter(|| fx.ensemble.score_batch(&fx.dataset, &test).expect("score"))
        });
        group.bench_function(BenchmarkId::new("extract_features", name), |b| {
            b.iter(|| extract_features(&fx.base, &fx.dataset, &train, true).expect("features"))
        });
        group.bench_function(BenchmarkId::new("svm_bank", name), |b| {
            b.iter(|| train_ovr_svm(&features, &labels, &fx.dataset.classes(), &svm_cfg).expect("svm"))
        });
        group.bench_function(BenchmarkId::new("visual_similarity", name), |b| {
            b.iter(|| visual_similarity(&by_class).expect("similarity"))
        });
    }
    exec::set_sequential(false);
    group.finish();
}

criterion_group!(benches, bench_all);
criterion_main!(benches);
