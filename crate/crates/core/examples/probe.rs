use spatl_core::experiment::*;
use spatl_core::fl::run_round;

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.method = "spatl".into();
    cfg.clients = 10;
    cfg.sample_ratio = 1.0;
    cfg.rounds = 100;
    cfg.local_epochs = 5;
    cfg.batch_size = 32;
    cfg.lr = 0.05;
    cfg.dirichlet_alpha = 0.1;
    cfg.dataset = DatasetSpec::Synthetic { n: 1200, shape: vec![1, 8, 8], classes: 4, margin: 6.0 };
    cfg.model = ModelSpec::Cnn { channels: vec![6, 12], embedding: 16 };
    cfg.agent.episodes = 6;
    cfg.agent.pretrain_episodes = 24;
    cfg.agent.finetune_rounds = 100;
    cfg.agent.flops_constraint = 0.4;
    cfg.seed = 2024;

    let mut setup = build_setup(&cfg, None).unwrap();
    for r in 0..60 {
        match run_round(&mut setup.server, &mut setup.clients, &setup.fed, &setup.fl_data) {
            Ok(rep) => {
                let maxw = setup.server.encoder.params().iter()
                    .flat_map(|(_, t)| t.data().iter().copied())
                    .fold(0.0f64, |a, b| a.max(b.abs()));
                let maxc = setup.server.global_variate.iter()
                    .flat_map(|(_, t)| t.data().iter().copied())
                    .fold(0.0f64, |a, b| a.max(b.abs()));
                println!("round {r}: acc {:.3} max|w| {maxw:.3e} max|c| {maxc:.3e}", rep.mean_accuracy());
            }
            Err(e) => { println!("round {r}: ERROR {e}"); break; }
        }
    }
}
