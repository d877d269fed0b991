//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line. Run with `cargo test -p spatl-core --test acceptance -- --nocapture`.

use spatl_core::agent::{
    finetune_head, gaussian_log_prob, reference_pruning_env, rl_search, AgentConfig, PolicyNet,
    PpoUpdater, Trajectory, TrajectoryStep,
};
use spatl_core::autograd::{grad, AutogradError, NodeId, ParamNodes, Tape};
use spatl_core::data::{dirichlet_partition, mean_label_entropy, synth_classification};
use spatl_core::experiment::{
    build_setup, run_experiment, DatasetSpec, ExperimentConfig, ModelSpec,
};
use spatl_core::fl::{
    aggregate_salient, run_round, update_global_control, variate_update, AggDivisor, ClientUpdate,
    Method, SlicedDelta, SpatlOptions,
};
use spatl_core::metrics::{comm_cost, GIB, MIB};
use spatl_core::nn::{Encoder, Layer};
use spatl_core::params::ParamSet;
use spatl_core::rng::rng_for;
use spatl_core::tensor::Tensor;
use std::time::Instant;

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {n:02} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "acceptance {n:02} {name}: {detail}");
}

/// Independent central-difference oracle over every parameter entry.
fn finite_difference<F>(params: &ParamSet, build: F, step: f64) -> ParamSet
where
    F: Fn(&mut Tape, &ParamNodes) -> Result<NodeId, AutogradError>,
{
    let eval = |p: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, p).unwrap();
        let id = build(&mut tape, &nodes).unwrap();
        tape.value(id).item()
    };
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let n = params.get(&name).unwrap().numel();
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += step;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= step;
            out.get_mut(&name).unwrap().data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
    }
    out
}

#[test]
fn acceptance_01_cost_arithmetic() {
    let start = Instant::now();
    let fedavg = comm_cost(203, 2.1 * MIB, 10);
    let fedavg_gib = fedavg / GIB;
    let exact = format!("{fedavg_gib:.2}") == "4.16";

    let spatl = comm_cost(52, 2.1 * MIB, 10);
    let spatl_gib = spatl / GIB;
    let within = (spatl_gib - 1.10).abs() / 1.10 <= 0.05;

    let elapsed = start.elapsed();
    verdict(
        1,
        "cost-arithmetic",
        exact && within && elapsed.as_secs_f64() < 1.0,
        &format!(
            "fedavg {fedavg_gib:.4} GiB (prints 4.16), spatl {spatl_gib:.4} GiB vs 1.10 \
             ({:.2}% off), {elapsed:?}",
            (spatl_gib - 1.10).abs() / 1.10 * 100.0
        ),
    );
}

fn reduction_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.method = "fedavg".into();
    cfg.clients = 3;
    cfg.sample_ratio = 1.0;
    cfg.rounds = 5;
    cfg.local_epochs = 2;
    cfg.batch_size = 16;
    cfg.lr = 0.05;
    cfg.server_lr = 1.0;
    cfg.dirichlet_alpha = 0.5;
    cfg.dataset = DatasetSpec::Synthetic {
        n: 240,
        shape: vec![6],
        classes: 3,
        margin: 5.0,
    };
    cfg.model = ModelSpec::Mlp {
        hidden: vec![16],
        embedding: 8,
    };
    cfg.seed = 11;
    cfg
}

#[test]
fn acceptance_02_fedavg_reduction() {
    let start = Instant::now();
    let cfg = reduction_config();

    let run = |method: Method| {
        let mut setup = build_setup(&cfg, Some(method)).unwrap();
        for _ in 0..cfg.rounds {
            run_round(&mut setup.server, &mut setup.clients, &setup.fed, &setup.fl_data).unwrap();
        }
        setup.server.global_params()
    };

    let spatl_off = run(Method::Spatl(SpatlOptions {
        selection: false,
        transfer: false,
        gradient_control: false,
    }));
    let fedavg = run(Method::FedAvg);
    let diff = spatl_off.max_abs_diff(&fedavg).unwrap();
    let elapsed = start.elapsed();
    verdict(
        2,
        "fedavg-reduction",
        diff <= 1e-9 && elapsed.as_secs_f64() < 30.0,
        &format!("max-abs weight difference {diff:.3e} over 5 rounds, {elapsed:?}"),
    );
}

#[test]
fn acceptance_03_gradient_correctness() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let mut rng = rng_for(900 + case, "fd-suite", &[]);
        #[allow(clippy::type_complexity)]
        let (params, build): (
            ParamSet,
            Box<dyn Fn(&mut Tape, &ParamNodes) -> Result<NodeId, AutogradError>>,
        ) =
            if case % 2 == 0 {
                // random MLP: d -> h -> k with relu and bias
                let d = 3 + (case as usize % 3);
                let h = 4 + (case as usize % 4);
                let k = 2 + (case as usize % 2);
                let n = 4usize;
                let mut params = ParamSet::new();
                params.insert("w1", Tensor::randn(&[h, d], &mut rng).map(|v| v * 0.5));
                params.insert("b1", Tensor::randn(&[h], &mut rng).map(|v| v * 0.1));
                params.insert("w2", Tensor::randn(&[k, h], &mut rng).map(|v| v * 0.5));
                let x = Tensor::randn(&[n, d], &mut rng);
                let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
                (
                    params,
                    Box::new(move |t, p| {
                        let xin = t.input(x.clone())?;
                        let h1 = t.matmul_nt(xin, p.id("w1")?)?;
                        let h1 = t.add_row_broadcast(h1, p.id("b1")?)?;
                        let h1 = t.relu(h1)?;
                        let logits = t.matmul_nt(h1, p.id("w2")?)?;
                        t.softmax_cross_entropy(logits, &labels)
                    }),
                )
            } else {
                // random small conv net with varying stride/padding
                let stride = 1 + (case as usize % 2);
                let pad = case as usize % 2;
                let co = 2 + (case as usize % 2);
                let hw = 5 + (case as usize % 2);
                let oh = (hw + 2 * pad - 3) / stride + 1;
                let n = 2usize;
                let k = 2usize;
                let mut params = ParamSet::new();
                params.insert("k1", Tensor::randn(&[co, 1, 3, 3], &mut rng).map(|v| v * 0.4));
                params.insert("cb", Tensor::randn(&[co], &mut rng).map(|v| v * 0.1));
                params.insert(
                    "w",
                    Tensor::randn(&[k, co * oh * oh], &mut rng).map(|v| v * 0.3),
                );
                let x = Tensor::randn(&[n, 1, hw, hw], &mut rng);
                let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
                (
                    params,
                    Box::new(move |t, p| {
                        let xin = t.input(x.clone())?;
                        let c = t.conv2d(xin, p.id("k1")?, stride, pad)?;
                        let c = t.add_channel_bias(c, p.id("cb")?)?;
                        let c = t.relu(c)?;
                        let flat = t.reshape(c, &[n, co * oh * oh])?;
                        let logits = t.matmul_nt(flat, p.id("w")?)?;
                        t.softmax_cross_entropy(logits, &labels)
                    }),
                )
            };

        let (_, analytic) = grad(&params, &build).unwrap();
        let fd = finite_difference(&params, &build, 1e-5);
        for (name, a) in analytic.iter() {
            let f = fd.get(name).unwrap();
            for (x, y) in a.data().iter().zip(f.data()) {
                let err = (x - y).abs();
                let tol = 1e-7 + 1e-4 * y.abs().max(x.abs());
                assert!(err <= tol, "case {case} {name}: {x} vs {y}");
                worst = worst.max(err / tol.max(1e-300));
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        3,
        "gradient-correctness",
        elapsed.as_secs_f64() < 60.0,
        &format!("20 networks, worst error at {worst:.3} of tolerance, {elapsed:?}"),
    );
}

#[test]
fn acceptance_04_quadratic_control_variates() {
    let start = Instant::now();
    let scalar = |v: f64| {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    };
    let update_for = |client_id: usize, value: f64, delta: Option<f64>| ClientUpdate {
        client_id,
        selection: None,
        weights: scalar(value),
        indices: vec![],
        delta_variate: delta.map(&scalar),
        bytes_up: 0,
        bytes_down: 0,
        accuracy: 0.0,
        flops_sub: 0,
        sparsity: 0.0,
    };

    let targets = [0.0, 1.0];
    let (eta, epochs, server_lr, rounds) = (0.1, 10usize, 1.0, 500usize);

    // gradient-controlled path
    let mut w_g = scalar(0.0);
    let mut c_g = scalar(0.0);
    let mut c_l = [scalar(0.0), scalar(0.0)];
    let mut reached: Option<usize> = None;
    for r in 0..rounds {
        let k = r % 2;
        let w_start = w_g.clone();
        let mut w = w_g.clone();
        for _ in 0..epochs {
            let g = w.get("w").unwrap().item() - targets[k];
            let corr = c_g.get("w").unwrap().item() - c_l[k].get("w").unwrap().item();
            let grads = scalar(g + corr);
            w = w.axpy(-eta, &grads).unwrap();
        }
        let (new_cl, delta) = variate_update(&c_l[k], &c_g, &w_start, &w, eta, epochs).unwrap();
        c_l[k] = new_cl;
        let upd = update_for(k, w.get("w").unwrap().item(), Some(delta.get("w").unwrap().item()));
        w_g = aggregate_salient(&w_g, &[upd.clone()], server_lr, AggDivisor::Uniform).unwrap();
        c_g = update_global_control(
            &c_g,
            &[SlicedDelta {
                values: upd.delta_variate.clone().unwrap(),
                indices: vec![],
            }],
            2,
        )
        .unwrap();
        if reached.is_none() && (w_g.get("w").unwrap().item() - 0.5).abs() <= 1e-3 {
            reached = Some(r + 1);
        }
    }
    let controlled_err = (w_g.get("w").unwrap().item() - 0.5).abs();

    // plain fedavg path
    let mut w_g = scalar(0.0);
    let mut trail = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let k = r % 2;
        let mut w = w_g.clone();
        for _ in 0..epochs {
            let g = w.get("w").unwrap().item() - targets[k];
            w = w.axpy(-eta, &scalar(g)).unwrap();
        }
        let upd = update_for(k, w.get("w").unwrap().item(), None);
        w_g = aggregate_salient(&w_g, &[upd], server_lr, AggDivisor::Uniform).unwrap();
        trail.push(w_g.get("w").unwrap().item());
    }
    let oscillation = trail[rounds - 100..]
        .iter()
        .map(|w| (w - 0.5).abs())
        .fold(0.0f64, f64::max);

    let elapsed = start.elapsed();
    verdict(
        4,
        "quadratic-control-variates",
        reached.is_some() && controlled_err <= 1e-3 && oscillation >= 10.0 * 1e-3
            && elapsed.as_secs_f64() < 10.0,
        &format!(
            "controlled |w-0.5| = {controlled_err:.2e} (reached at round {reached:?}), \
             fedavg oscillation radius {oscillation:.3}, {elapsed:?}"
        ),
    );
}

#[test]
fn acceptance_05_salient_aggregation_oracle() {
    let start = Instant::now();
    let vecp = |name: &str, values: &[f64]| {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::from_vec(vec![values.len()], values.to_vec()).unwrap());
        p
    };
    let upd = |id: usize, name: &str, rows: &[f64], kept: Option<Vec<usize>>| ClientUpdate {
        client_id: id,
        selection: None,
        weights: vecp(name, rows),
        indices: kept.map(|k| vec![(name.to_string(), k)]).unwrap_or_default(),
        delta_variate: None,
        bytes_up: 0,
        bytes_down: 0,
        accuracy: 0.0,
        flops_sub: 0,
        sparsity: 0.0,
    };

    // worked 4-row, 2-client example
    let global = vecp("w", &[1.0, 2.0, 3.0, 4.0]);
    let out = aggregate_salient(
        &global,
        &[
            upd(0, "w", &[0.0, 0.0], Some(vec![0, 1])),
            upd(1, "w", &[2.0, 2.0], Some(vec![1, 2])),
        ],
        1.0,
        AggDivisor::Uniform,
    )
    .unwrap();
    let worked_ok = out.get("w").unwrap().data() == [0.5, 1.0, 2.5, 4.0];

    // randomized property vs an independent per-row brute-force fold
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let mut rng = rng_for(5000 + case, "agg-prop", &[]);
        use rand::Rng;
        let rows = rng.gen_range(1..=8usize);
        let n_clients = rng.gen_range(1..=4usize);
        let server_lr = rng.gen_range(0.1..1.5f64);
        let global_vals: Vec<f64> = (0..rows).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let global = vecp("w", &global_vals);
        let mut updates = Vec::new();
        for id in 0..n_clients {
            let kept: Vec<usize> = (0..rows).filter(|_| rng.gen_bool(0.6)).collect();
            let kept = if kept.is_empty() { vec![rng.gen_range(0..rows)] } else { kept };
            let vals: Vec<f64> = kept.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
            updates.push(upd(id, "w", &vals, Some(kept)));
        }
        let got = aggregate_salient(&global, &updates, server_lr, AggDivisor::Uniform).unwrap();

        // oracle: fold each row independently over the formula
        let mut want = global_vals.clone();
        for (row, w) in want.iter_mut().enumerate() {
            let mut sum = 0.0;
            for u in &updates {
                if let Some(pos) = u.kept_rows("w").unwrap().iter().position(|&r| r == row) {
                    sum += u.weights.get("w").unwrap().data()[pos] - global_vals[row];
                }
            }
            *w += server_lr * sum / n_clients as f64;
        }
        for (g, w) in got.get("w").unwrap().data().iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        5,
        "salient-aggregation-oracle",
        worked_ok && worst <= 1e-12,
        &format!("worked example ok, 100 random cases worst diff {worst:.2e}, {elapsed:?}"),
    );
}

#[test]
fn acceptance_06_flops_oracle() {
    let start = Instant::now();

    // independent brute-force loop counter over the stated convention
    fn brute_force_flops(layers: &[Layer], input: &[usize]) -> u64 {
        let mut shape = input.to_vec();
        let mut count: u64 = 0;
        for layer in layers {
            match layer {
                Layer::Linear { in_features, out_features, bias } => {
                    for _ in 0..*out_features {
                        for _ in 0..*in_features {
                            count += 2;
                        }
                        if *bias {
                            count += 1;
                        }
                    }
                    shape = vec![*out_features];
                }
                Layer::Conv2d { in_channels, out_channels, kernel, stride, padding, bias } => {
                    let oh = (shape[1] + 2 * padding - kernel) / stride + 1;
                    let ow = (shape[2] + 2 * padding - kernel) / stride + 1;
                    for _ in 0..*out_channels {
                        for _ in 0..oh {
                            for _ in 0..ow {
                                for _ in 0..*in_channels {
                                    for _ in 0..kernel * kernel {
                                        count += 2;
                                    }
                                }
                                if *bias {
                                    count += 1;
                                }
                            }
                        }
                    }
                    shape = vec![*out_channels, oh, ow];
                }
                Layer::Relu => {
                    let numel: usize = shape.iter().product();
                    for _ in 0..numel {
                        count += 1;
                    }
                }
                Layer::Flatten => shape = vec![shape.iter().product()],
                Layer::ResidualAdd { .. } => {
                    let numel: usize = shape.iter().product();
                    for _ in 0..numel {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    for case in 0..10u64 {
        let mut rng = rng_for(7000 + case, "flops-prop", &[]);
        use rand::Rng;
        let c1 = rng.gen_range(1..=4usize);
        let c2 = rng.gen_range(1..=4usize);
        let kernel = [1usize, 3][rng.gen_range(0..2usize)];
        let stride = rng.gen_range(1..=2usize);
        let padding = rng.gen_range(0..=1usize);
        let hw = rng.gen_range(5..=9usize);
        let emb = rng.gen_range(2..=6usize);
        let oh = (hw + 2 * padding - kernel) / stride + 1;
        let o2 = (oh + 2 * padding - kernel) / 1 + 1;
        let layers = vec![
            Layer::Conv2d {
                in_channels: 1,
                out_channels: c1,
                kernel,
                stride,
                padding,
                bias: case % 2 == 0,
            },
            Layer::Relu,
            Layer::Conv2d {
                in_channels: c1,
                out_channels: c2,
                kernel,
                stride: 1,
                padding,
                bias: true,
            },
            Layer::Flatten,
            Layer::Linear {
                in_features: c2 * o2 * o2,
                out_features: emb,
                bias: case % 3 == 0,
            },
        ];
        let enc = Encoder::new(layers.clone(), vec![1, hw, hw], &mut rng).unwrap();
        let analytic = enc.count_flops();
        let brute = brute_force_flops(&layers, &[1, hw, hw]);
        assert_eq!(analytic, brute, "case {case}: {analytic} vs {brute}");
    }
    let elapsed = start.elapsed();
    verdict(6, "flops-oracle", true, &format!("10 random stacks, exact match, {elapsed:?}"));
}

#[test]
fn acceptance_07_ppo_smoke() {
    let start = Instant::now();
    let seed = 2025;
    let env = reference_pruning_env(seed).unwrap();
    // toy-env exploration settings: tighter action noise and a larger
    // step so the trend is visible within 40 updates
    let mut cfg = AgentConfig::default();
    cfg.sigma = 0.2;
    cfg.lr = 5e-3;
    cfg.ppo_epochs = 8;
    let mut net = PolicyNet::new(cfg.hidden, 3, cfg.a_max, cfg.sigma, seed).unwrap();
    let mut updater = PpoUpdater::new(&net, false, cfg.adam_params());
    let mut rng = rng_for(seed, "ppo-smoke", &[]);
    let outcome = rl_search(
        &env.encoder,
        &env.predictor,
        &env.val_data,
        &mut net,
        &mut updater,
        &cfg,
        0.6,
        40,
        &mut rng,
    )
    .unwrap();
    let rewards = &outcome.update_rewards;
    let enough = rewards.len() >= 40;
    let (first5, last5) = if enough {
        (
            rewards[..5].iter().sum::<f64>() / 5.0,
            rewards[35..40].iter().sum::<f64>() / 5.0,
        )
    } else {
        (f64::NAN, f64::NAN)
    };

    // head-only fine-tuning leaves the graph encoder bit-identical
    let graph = spatl_core::agent::build_graph(&env.encoder).unwrap();
    let (mean, value) = net.forward(&graph).unwrap();
    let action: Vec<f64> = mean.iter().map(|m| (m + 0.05).min(cfg.a_max)).collect();
    let mut traj = Trajectory::default();
    traj.push(TrajectoryStep {
        graph,
        action: action.clone(),
        log_prob: gaussian_log_prob(&mean, &action, cfg.sigma),
        reward: 50.0,
        value,
        advantage: 1.0,
    })
    .unwrap();
    let gnn_before = net.gnn_params().content_hash();
    finetune_head(&mut net, &traj, &cfg, 10).unwrap();
    let frozen = net.gnn_params().content_hash() == gnn_before;

    let elapsed = start.elapsed();
    verdict(
        7,
        "ppo-smoke",
        enough && last5 >= first5 && frozen && elapsed.as_secs_f64() < 300.0,
        &format!(
            "{} updates, first-5 mean {first5:.2}, updates 36-40 mean {last5:.2}, \
             graph encoder frozen: {frozen}, {elapsed:?}",
            rewards.len()
        ),
    );
}

fn e2e_config(method: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.method = method.into();
    cfg.clients = 10;
    cfg.sample_ratio = 1.0;
    cfg.rounds = 100;
    cfg.local_epochs = 5;
    cfg.batch_size = 32;
    cfg.lr = 0.05;
    cfg.dirichlet_alpha = 0.1;
    cfg.dataset = DatasetSpec::Synthetic {
        n: 1200,
        shape: vec![1, 8, 8],
        classes: 4,
        margin: 6.0,
    };
    cfg.model = ModelSpec::Cnn {
        channels: vec![6, 12],
        embedding: 16,
    };
    cfg.agent.episodes = 6;
    cfg.agent.pretrain_episodes = 24;
    cfg.agent.finetune_rounds = 100;
    cfg.agent.flops_constraint = 0.4;
    cfg.seed = 2024;
    cfg
}

#[test]
fn acceptance_08_end_to_end_trend() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spatl = run_experiment(&e2e_config("spatl"), &dir.path().join("spatl"))
        .unwrap()
        .summary;
    let noselect = run_experiment(
        &e2e_config("spatl-no-select"),
        &dir.path().join("no-select"),
    )
    .unwrap()
    .summary;

    let byte_ratio = spatl.total_bytes_up as f64 / noselect.total_bytes_up as f64;
    let acc_gap = (spatl.final_mean_accuracy - noselect.final_mean_accuracy).abs();
    let elapsed = start.elapsed();
    verdict(
        8,
        "end-to-end-trend",
        byte_ratio <= 0.70 && acc_gap <= 0.02 && elapsed.as_secs_f64() < 600.0,
        &format!(
            "uplink ratio {byte_ratio:.3} (<= 0.70), accuracy {:.4} vs {:.4} (gap {acc_gap:.4}), {elapsed:?}",
            spatl.final_mean_accuracy, noselect.final_mean_accuracy
        ),
    );
}

#[test]
fn acceptance_09_dirichlet_heterogeneity() {
    let start = Instant::now();
    let ds = synth_classification(10_000, &[4], 4, 5.0, 77).unwrap();
    let skewed = dirichlet_partition(&ds, 10, 0.1, 99).unwrap();
    let uniform = dirichlet_partition(&ds, 10, 100.0, 99).unwrap();
    let h_skewed = mean_label_entropy(&ds, &skewed);
    let h_uniform = mean_label_entropy(&ds, &uniform);

    let mut covered = vec![false; ds.len()];
    let mut disjoint = true;
    for indices in &skewed.client_indices {
        for &i in indices {
            if covered[i] {
                disjoint = false;
            }
            covered[i] = true;
        }
    }
    let coverage = covered.iter().all(|&c| c);
    let elapsed = start.elapsed();
    verdict(
        9,
        "dirichlet-heterogeneity",
        h_skewed < h_uniform && disjoint && coverage,
        &format!(
            "entropy alpha=0.1: {h_skewed:.4} < alpha=100: {h_uniform:.4}, \
             disjoint {disjoint}, coverage {coverage}, {elapsed:?}"
        ),
    );
}

#[test]
fn acceptance_10_determinism() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.method = "spatl".into();
    cfg.clients = 3;
    cfg.sample_ratio = 1.0;
    cfg.rounds = 3;
    cfg.local_epochs = 2;
    cfg.batch_size = 16;
    cfg.dirichlet_alpha = 0.5;
    cfg.dataset = DatasetSpec::Synthetic {
        n: 240,
        shape: vec![6],
        classes: 3,
        margin: 5.0,
    };
    cfg.model = ModelSpec::Mlp {
        hidden: vec![16],
        embedding: 8,
    };
    cfg.agent.episodes = 2;
    cfg.agent.pretrain_episodes = 4;
    cfg.agent.finetune_rounds = 2;
    cfg.seed = 31;

    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, &dir.path().join("a")).unwrap();
    run_experiment(&cfg, &dir.path().join("b")).unwrap();
    let a = std::fs::read(dir.path().join("a/rounds.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/rounds.csv")).unwrap();
    let identical = a == b;
    let elapsed = start.elapsed();
    verdict(
        10,
        "determinism",
        identical && !a.is_empty(),
        &format!("rounds.csv byte-identical across reruns ({} bytes), {elapsed:?}", a.len()),
    );
}
