use pae_core::corruption::CorruptionSpec;
use pae_core::datagen::{generate_dataset, Split};
use pae_core::diagnosis::{train_heads, HeadConfig};
use pae_core::experiment::{latents, samples, views};
use pae_core::model::forward::{self, Bound};
use pae_core::model::{self, ModelConfig, PaeModel};
use pae_core::numerics::{Graph, Tensor};
use pae_core::rng;
use pae_core::training::{batch_loss, epoch_order, fit, train, windows, TrainConfig};

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed);
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng::normal(&mut r)).collect()).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Straight-line LSTM over rows last-to-first, gates ordered i, f, g, o.
fn lstm_reference(x: &Tensor, w_ih: &Tensor, w_hh: &Tensor, b_ih: &Tensor, b_hh: &Tensor) -> Vec<f64> {
    let hid = w_hh.rows();
    let mut h = vec![0.0; hid];
    let mut c = vec![0.0; hid];
    for t in (0..x.rows()).rev() {
        let mut pre = vec![0.0; 4 * hid];
        for (j, p) in pre.iter_mut().enumerate() {
            *p = b_ih.data()[j] + b_hh.data()[j];
            for (k, xv) in x.row(t).iter().enumerate() {
                *p += xv * w_ih.get(k, j);
            }
            for (k, hv) in h.iter().enumerate() {
                *p += hv * w_hh.get(k, j);
            }
        }
        for u in 0..hid {
            let i = sigmoid(pre[u]);
            let f = sigmoid(pre[hid + u]);
            let g = pre[2 * hid + u].tanh();
            let o = sigmoid(pre[3 * hid + u]);
            c[u] = f * c[u] + i * g;
            h[u] = o * c[u].tanh();
        }
    }
    c
}

fn perturbed(cfg: ModelConfig, seed: u64) -> PaeModel {
    let mut m = PaeModel::init(cfg, seed).unwrap();
    let mut r = rng::stream(seed + 1);
    for t in m.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.3 * rng::normal(&mut r));
    }
    m
}

#[test]
fn lstm_matches_reference_over_three_steps() {
    let m = perturbed(ModelConfig::toy(), 3);
    let x = random(3, m.config.patch_len(), 4);
    let p = |name: &str| m.params.get(name).unwrap();
    let want = lstm_reference(&x, p("lstm.w_ih"), p("lstm.w_hh"), p("lstm.b_ih"), p("lstm.b_hh"));

    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let xi = g.constant(x);
    let c = forward::lstm_compress(&mut g, &b, &m.layout.lstm, xi).unwrap();
    let got = g.value(c);
    assert_eq!(got.len(), want.len());
    for (a, e) in got.iter().zip(&want) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn block_with_silent_branches_is_identity() {
    let mut m = perturbed(ModelConfig::toy(), 5);
    let ids = m.layout.encoder[0].clone();
    let names = m.params.names().to_vec();
    for idx in [ids.proj, ids.fc2_weight, ids.fc2_bias] {
        m.params.get_mut(&names[idx]).unwrap().data_mut().fill(0.0);
    }
    let x = random(m.config.tokens() + 1, m.config.patch_len(), 6);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let xi = g.constant(x.clone());
    let out = forward::transformer_block(&mut g, &b, &ids, xi, true, &mut rng::stream(1)).unwrap();
    assert_eq!(g.value(out.out), x.data());
    for a in &out.attention {
        for row in g.value(*a).chunks(m.config.tokens() + 1) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let m = perturbed(ModelConfig::toy(), 7);
    let x = random(m.config.channels, m.config.samples, 8);
    let spec = CorruptionSpec::new(30.0, 0.25, 9).unwrap();
    let (_, grads) = m.loss_and_grads(&x, &spec).unwrap();
    for (name, g) in m.params.names().iter().zip(&grads) {
        assert!(g.iter().any(|v| *v != 0.0), "{name} got no gradient");
    }
}

#[test]
fn decoder_ignores_input_when_its_weights_vanish() {
    let mut m = perturbed(ModelConfig::toy(), 10);
    let names = m.params.names().to_vec();
    let mut silence = vec![m.layout.expand_weight];
    for blk in &m.layout.decoder {
        silence.extend([blk.proj, blk.fc2_weight, blk.fc2_bias]);
    }
    for idx in silence {
        m.params.get_mut(&names[idx]).unwrap().data_mut().fill(0.0);
    }
    let cfg = m.config.clone();
    let a = m.encode(&random(cfg.channels, cfg.samples, 11), &[false; 4]).unwrap();
    let b = m.encode(&random(cfg.channels, cfg.samples, 12), &[true, false, false, true]).unwrap();
    assert_ne!(a.latent, b.latent);
    let ra = m.decode(&a).unwrap();
    assert_eq!(ra, m.decode(&b).unwrap());
    // what is left is the expansion bias in patch layout
    let bias = m.params.tensors()[m.layout.expand_bias].clone();
    let want = model::depatchify(&bias.reshaped(&[cfg.tokens(), cfg.patch_len()]).unwrap(), cfg.channels, cfg.samples).unwrap();
    assert_eq!(ra, want);
}

#[test]
fn bound_nodes_follow_the_layout() {
    let m = PaeModel::init(ModelConfig::toy(), 1).unwrap();
    let mut g = Graph::new();
    let b: Bound<'_> = m.bind(&mut g, true);
    assert_eq!(b.nodes.len(), m.params.len());
}

fn toy_config(out: &std::path::Path, steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new("unused", out);
    cfg.model = ModelConfig::toy();
    cfg.max_steps = steps;
    cfg.seed = 21;
    cfg
}

#[test]
fn toy_desk_run_halves_smoothed_loss() {
    let data = generate_dataset(346, 7).unwrap();
    let cfg = toy_config(std::path::Path::new("unused"), 200);
    let session = fit(&cfg, &data, &mut |_| Ok(())).unwrap();
    let losses = session.log.losses();
    assert_eq!(losses.len(), 200);
    let first = losses[..20].iter().sum::<f64>() / 20.0;
    let last = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(last < 0.5 * first, "smoothed loss {first} -> {last}");
}

#[test]
fn logged_loss_recomputes_from_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(60, 2).unwrap();
    let mut cfg = toy_config(dir.path(), 30);
    cfg.batch_size = 8;
    cfg.checkpoint_every = 1;
    let outcome = train(&cfg, &data).unwrap();
    let train_windows = windows(&data, &data.indices(Split::Train), &cfg.model).unwrap();
    let entries = &outcome.session.log.entries;
    for step in [1u64, 9, 27] {
        let e = &entries[step as usize];
        assert_eq!(e.step, step + 1);
        let m = model::load(&pae_core::training::checkpoint_path(dir.path(), step)).unwrap();
        let order = epoch_order(train_windows.len(), cfg.seed, e.epoch);
        let members: Vec<&Tensor> = order
            .chunks(cfg.batch_size)
            .nth(e.batch)
            .unwrap()
            .iter()
            .map(|&i| &train_windows[i])
            .collect();
        let (loss, _) = batch_loss(&m, &members, &cfg.schedule[e.stage], cfg.seed, e.step).unwrap();
        assert_eq!(loss, e.loss, "step {}", e.step);
    }
}

#[test]
fn diagnosis_heads_leave_encoder_untouched() {
    let data = generate_dataset(30, 4).unwrap();
    let m = PaeModel::init(ModelConfig::toy(), 3).unwrap();
    let before = m.params.checksum();
    let idx: Vec<usize> = (0..data.len()).collect();
    let v = views(&m.config, &data, &idx, 35.0, 0.1, 1).unwrap();
    let z = latents(&m, &v).unwrap();
    let s = samples(&data, &idx, z).unwrap();
    let cfg = HeadConfig {
        iterations: 20,
        ..HeadConfig::default()
    };
    train_heads(&s, &cfg).unwrap();
    assert_eq!(m.params.checksum(), before);
}
