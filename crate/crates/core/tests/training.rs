use voxgraph::encoder::{GraphInput, Model, ModelConfig, Task};
use voxgraph::{generate_phantom, preprocess_volume, train, PatchParams, PhantomSpec, PreprocessParams, TrainConfig};

fn phantom_graphs(n: u64) -> Vec<GraphInput> {
    (0..n)
        .map(|seed| {
            let vol = generate_phantom(&PhantomSpec { seed: 500 + seed, ..PhantomSpec::default() }).unwrap();
            let mut p = PreprocessParams::default();
            p.slic.n_sv = 64;
            p.patch = PatchParams { n_patch: 8, patch_size: 8 };
            GraphInput::from_graph(&preprocess_volume(&vol, &p, "phantom").unwrap().graph)
        })
        .collect()
}

#[test]
fn toy_training_halves_the_loss_within_fifty_epochs() {
    let graphs = phantom_graphs(8);
    for task in [Task::Regression, Task::Classification] {
        let model = Model::new(ModelConfig::toy(task, 4, 8, 8), 7).unwrap();
        let mut cfg = TrainConfig::phantom(task);
        cfg.max_epochs = 50;
        let out = train(model, &graphs, None, &cfg, &mut ()).unwrap();
        let first = out.log.first().unwrap().train_loss;
        let last = out.log.last().unwrap().train_loss;
        eprintln!("{task:?}: loss {first:.5} -> {last:.5}");
        assert!(last <= 0.5 * first, "{task:?}: loss {first} -> {last}");
    }
}
