use capsnet_core::checkpoint::{Checkpoint, Precision};
use capsnet_core::dataset::synthesize_toy_dataset;
use capsnet_core::training::TrainEvent;
use capsnet_core::{CapsNetConfig, InitScheme, Network, TrainConfig, Trainer};

fn net() -> Network {
    let config = CapsNetConfig {
        conv1_filters: 8,
        conv2_filters: 16,
        num_classes: 3,
        class_dim: 8,
        ..CapsNetConfig::default()
    };
    Network::new(config, vec![32, 64], InitScheme::default(), 8).unwrap()
}

fn losses(trainer: &mut Trainer, data: &capsnet_core::Dataset) -> Vec<f64> {
    let mut out = Vec::new();
    trainer
        .run(data, |e| {
            if let TrainEvent::Step(m) = e {
                out.push(m.final_loss);
            }
            Ok(())
        })
        .unwrap();
    out
}

// Includes stops on epoch boundaries, where each epoch must draw its own order.
#[test]
fn resume_from_any_step_matches_uninterrupted_run() {
    let data = synthesize_toy_dataset(3, 10, 8).unwrap();
    let cfg = TrainConfig {
        batch_size: 10,
        epochs: 3,
        seed: 8,
        ..TrainConfig::default()
    };
    let mut full = Trainer::new(net(), cfg.clone()).unwrap();
    let reference = losses(&mut full, &data);
    assert_eq!(reference.len(), 9);

    for stop in 1..9u64 {
        let mut head = Trainer::new(
            net(),
            TrainConfig {
                max_steps: Some(stop),
                ..cfg.clone()
            },
        )
        .unwrap();
        let mut seen = losses(&mut head, &data);
        let mut bytes = Vec::new();
        Checkpoint::from_trainer(&head).write_to(&mut bytes, Precision::F64).unwrap();
        let ck = Checkpoint::read_from(bytes.as_slice()).unwrap();
        let mut tail = Trainer::resume(ck.network, ck.optimizer.unwrap(), ck.train.unwrap().state, cfg.clone()).unwrap();
        seen.extend(losses(&mut tail, &data));
        assert_eq!(seen, reference, "resume after step {stop}");
        assert_eq!(tail.network, full.network, "parameters after resume at step {stop}");
    }
}

#[test]
fn f32_checkpoint_is_close_but_not_exact() {
    let network = net();
    let mut bytes = Vec::new();
    Checkpoint::from_network(network.clone())
        .write_to(&mut bytes, Precision::F32)
        .unwrap();
    let back = Checkpoint::read_from(bytes.as_slice()).unwrap().network;
    for (a, b) in network.params().iter().zip(back.params()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }
}
