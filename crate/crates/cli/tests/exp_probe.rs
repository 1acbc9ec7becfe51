use pointkey_core::data::{make_pair, RotationBank};
use pointkey_core::loss::loss_consistency;
use pointkey_core::model::{forward_eval, init_params, NetworkConfig};
use pointkey_core::optim::AdamState;
use pointkey_core::rng::SeedStream;
use pointkey_core::synth::synth_dataset;
use pointkey_core::train::{train_step, TrainConfig};

#[test]
#[ignore]
fn probe_eval_mode_consistency_of_b4_checkpoint() {
    let ckpt = pointkey_cli::checkpoint::Checkpoint::load(std::path::Path::new(
        "/tmp/exp/run_b4/best.ckpt",
    ))
    .unwrap();
    let dataset =
        pointkey_cli::manifest::LoadedDataset::load(std::path::Path::new("/tmp/exp/data")).unwrap();
    let bank = dataset.bank().unwrap();
    let mut s = SeedStream::new(77);
    let mut total = 0.0;
    let n_trials = 20;
    for t in 0..n_trials {
        let obj = s.index(dataset.clouds.len());
        let pair = make_pair(&dataset.clouds[obj], obj, &bank, &mut s).unwrap();
        let kp_a = forward_eval(&ckpt.params, &pair.cloud_a).unwrap().keypoints;
        let kp_b = forward_eval(&ckpt.params, &pair.cloud_b).unwrap().keypoints;
        let con = loss_consistency(&kp_a, &kp_b, &pair.r_a, &pair.r_b).unwrap();
        total += con;
        if t < 5 {
            println!("pair {t}: eval consistency {con:.5}");
        }
    }
    println!("mean eval consistency: {:.5}", total / n_trials as f64);
}

#[test]
#[ignore]
fn probe_full_objective_many_steps() {
    let n = 256;
    let shapes = synth_dataset(120, n, 0);
    let bank = RotationBank::generate(0, shapes.len(), 24).unwrap();
    let net_cfg = NetworkConfig {
        n_points: n,
        n_keypoints: 8,
        feat_dim: 96,
        hidden_dims: vec![32, 64],
        res_dim: 48,
        input_transform: true,
    };
    let mut params = init_params(&net_cfg, 0).unwrap();
    let mut adam = AdamState::new(&params.params);
    let cfg = TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut s = SeedStream::new(1);
    for step in 0..2500 {
        let batch: Vec<_> = (0..8)
            .map(|_| {
                let obj = s.index(shapes.len());
                make_pair(&shapes[obj].cloud, obj, &bank, &mut s).unwrap()
            })
            .collect();
        let stats = train_step(&mut params, &mut adam, &batch, &cfg).unwrap();
        if step % 250 == 0 {
            println!(
                "step {step:4}: total {:8.5} sep {:7.4} shape {:7.4} con {:8.5} pose {:8.5}",
                stats.terms.total,
                stats.terms.separation,
                stats.terms.shape,
                stats.terms.consistency,
                stats.terms.pose
            );
        }
    }
}
