use fluidctl_core::environment::{make_environment, EnvironmentId, Simulator};
use fluidctl_core::losses::LossWeights;
use fluidctl_core::policy::{
    default_dims, load_checkpoint, save_checkpoint, ObservationLayout, OutputKind, PolicyParams,
};
use fluidctl_core::rigid_body::Dof;
use fluidctl_core::training::{
    generate_supervised_dataset, read_dataset, train_diffphys, train_supervised, write_dataset, DatasetConfig,
    SupervisedConfig, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk(id: EnvironmentId, cells: usize) -> Simulator {
    let patch: toml::Table = toml::from_str(&format!("grid_cells = {cells}")).unwrap();
    Simulator::new(make_environment(id, Some(&patch)).unwrap()).unwrap()
}

fn quick(sim: &Simulator, n_i: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        n_i,
        seed,
        episode_length: 40,
        norm_episodes: 1,
        norm_steps: 20,
        val_every: 0,
        val_episodes: 1,
        val_steps: 12,
        weights: LossWeights {
            l: 4,
            ..LossWeights::default_for(sim.cfg.dof)
        },
        ..TrainConfig::for_environment(&sim.cfg)
    }
}

#[test]
fn checkpoints_survive_the_file_system() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (dof, output) in [(Dof::Two, OutputKind::Bounded), (Dof::Three, OutputKind::Linear)] {
        let p = PolicyParams::init(&default_dims(dof), ObservationLayout::default_for(dof), output, 50.0, 2000.0, &mut rng)
            .unwrap();
        let path = dir.path().join(format!("{dof:?}.pol"));
        save_checkpoint(&path, &p).unwrap();
        assert_eq!(load_checkpoint(&path, output).unwrap(), p);
    }
    assert!(load_checkpoint(&dir.path().join("missing.pol"), OutputKind::Bounded).is_err());
}

#[test]
fn training_three_dof_is_reproducible() {
    let sim = desk(EnvironmentId::Base, 24);
    let cfg = quick(&sim, 3, 5);
    let a = train_diffphys(&sim, &cfg, &mut |_| {}).unwrap();
    let b = train_diffphys(&sim, &cfg, &mut |_| {}).unwrap();
    let bytes = |p: &PolicyParams| {
        let mut v = Vec::new();
        fluidctl_core::policy::write_checkpoint(&mut v, p).unwrap();
        v
    };
    assert_eq!(bytes(&a.final_params), bytes(&b.final_params));
    assert_eq!(a.final_params.output_dim(), 3);
    let losses: Vec<f64> = a.log.iter().map(|r| r.loss).collect();
    assert_eq!(losses, b.log.iter().map(|r| r.loss).collect::<Vec<_>>());
}

#[test]
fn ablation_shows_in_the_log() {
    let sim = desk(EnvironmentId::BaseNR, 24);
    let mut cfg = quick(&sim, 2, 1);
    cfg.weights = cfg.weights.ablated(fluidctl_core::losses::Ablation::Ov);
    let out = train_diffphys(&sim, &cfg, &mut |_| {}).unwrap();
    assert!(out.log.iter().all(|r| r.e == 0.0 && r.o > 0.0));
}

#[test]
fn supervised_pipeline_end_to_end() {
    let sim = desk(EnvironmentId::BuoyNR, 24);
    let layout = ObservationLayout::default_for(Dof::Two);
    let cfg = DatasetConfig {
        n_sims: 5,
        steps: 30,
        seed: 2,
        ..DatasetConfig::default()
    };
    let data = generate_supervised_dataset(&sim, &cfg, layout).unwrap();
    assert_eq!(data.samples.len(), 150);
    assert!(data.samples.iter().all(|s| s.z.len() == 16 && s.target[2] == 0.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    write_dataset(&mut std::fs::File::create(&path).unwrap(), &data).unwrap();
    let back = read_dataset(&mut std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, data);

    let (train, val) = back.split().unwrap();
    assert_eq!((train.len(), val.len()), (120, 30));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let template =
        PolicyParams::init(&default_dims(Dof::Two), layout, OutputKind::Linear, 50.0, 2000.0, &mut rng).unwrap();
    let sup = SupervisedConfig {
        n_i: 300,
        val_every: 50,
        batch: 32,
        ..SupervisedConfig::default()
    };
    let out = train_supervised(train, val, &template, &sup, &mut |_| {}).unwrap();
    assert!(out.best_val_loss <= out.initial_val_loss);
    assert!(out.log.last().unwrap().loss < out.log[0].loss);
}
