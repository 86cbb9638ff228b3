use cadrl::checkpoint::ModelCheckpoint;
use cadrl::pipeline::{pretrain, recommend, train_model};
use cadrl_bench::{desk_config, fixture};
use criterion::{criterion_group, criterion_main, Criterion};

fn stages(c: &mut Criterion) {
    let cfg = desk_config();
    let (prepared, table) = fixture(&cfg);
    let mut group = c.benchmark_group("planted");
    group.sample_size(10);

    let one_epoch = cadrl::config::RunConfig { transe_epochs: 1, ..cfg.clone() };
    group.bench_function("transe_epoch", |b| b.iter(|| pretrain(&prepared, &one_epoch).unwrap()));

    let nbr = prepared.neighborhood(&cfg).unwrap();
    let (store, _) = train_model(&prepared, &table, &cadrl::config::RunConfig { epochs: 0, ..cfg.clone() }, |_| {}).unwrap();
    let model = cadrl::darl::DarlModel::bind(&store, &cfg.cggnn()).unwrap();
    group.bench_function("cggnn_forward", |b| {
        b.iter(|| model.cggnn.representations(&store, &nbr, &table).unwrap())
    });

    group.bench_function("train_epoch", |b| b.iter(|| train_model(&prepared, &table, &cfg, |_| {}).unwrap()));

    let ck = ModelCheckpoint::new(&cfg, prepared.fingerprint.clone(), table.clone(), &store);
    group.bench_function("recommend_all_users", |b| b.iter(|| recommend(&prepared, &ck, &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
