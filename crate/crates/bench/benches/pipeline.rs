use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng as _, SeedableRng};
use stg_core::env::{generate_expert_dataset, Action, EnvConfig, GridEnv};
use stg_core::models::ModelBundle;
use stg_core::numerics::DType;
use stg_core::pretrain::{PretrainConfig, Pretrainer};
use stg_core::rl::{gae, score_transitions, PolicyNet};
use stg_core::Rng;

fn env_step(c: &mut Criterion) {
    let cfg = EnvConfig::default();
    let mut env = GridEnv::new(cfg).unwrap();
    let mut rng = Rng::seed_from_u64(0);
    let mut episode = 0;
    env.reset(episode);
    c.bench_function("env_step_render", |b| {
        b.iter(|| {
            if env.is_done() {
                episode += 1;
                env.reset(episode);
            }
            let a = Action::from_index(rng.gen_range(0..5)).unwrap();
            black_box(env.step(a).unwrap());
        })
    });
}

fn pretrain_epoch(c: &mut Criterion) {
    let env = EnvConfig::default();
    let (ds, _) = generate_expert_dataset(&env, 20).unwrap();
    let mut trainer = Pretrainer::new(PretrainConfig::default(), vec![ds]).unwrap();
    let mut g = c.benchmark_group("pretrain");
    g.sample_size(10);
    g.bench_function("epoch_default_config", |b| b.iter(|| black_box(trainer.epoch().unwrap())));
    g.finish();
}

fn rewards_and_policy(c: &mut Criterion) {
    let env = EnvConfig::default();
    let geo = env.geometry();
    let (ds, _) = generate_expert_dataset(&env, 4).unwrap();
    let model = PretrainConfig::default().model_config(geo);
    let bundle = ModelBundle::init(model, 0, DType::F32).unwrap();
    let n = 256;
    let (mut cur, mut next) = (Vec::new(), Vec::new());
    let t = &ds.trajectories[0];
    for i in 0..n {
        let k = i % (t.len() - 1);
        t.write_state(k, &mut cur);
        t.write_state(k + 1, &mut next);
    }
    c.bench_function("score_256_transitions", |b| {
        b.iter(|| black_box(score_transitions(&bundle, &cur, &next, n, false).unwrap()))
    });
    let net = PolicyNet::init(geo, 0, DType::F32).unwrap();
    c.bench_function("policy_forward_256", |b| b.iter(|| black_box(net.evaluate(&cur, n).unwrap())));
}

fn advantages(c: &mut Criterion) {
    let mut rng = Rng::seed_from_u64(1);
    let n = 4096;
    c.bench_function("gae_4096", |b| {
        b.iter_batched(
            || {
                let r: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
                let v: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
                let nv: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
                let end: Vec<bool> = (0..n).map(|i| i % 64 == 63).collect();
                (r, v, nv, end)
            },
            |(r, v, nv, end)| black_box(gae(&r, &v, &nv, &end, &end, 0.99, 0.95).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, env_step, pretrain_epoch, rewards_and_policy, advantages);
criterion_main!(benches);
