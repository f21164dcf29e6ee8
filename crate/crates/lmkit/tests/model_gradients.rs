//! Central finite-difference checks for whole models: every parameter
//! coordinate of tiny GPT / LSTM / qLSTM instances, through the full
//! forward + masked cross-entropy loss.

mod common;

use common::{assert_grads_close, rng};
use lmkit::models::{
    lstm_cell_forward, masked_loss, CellHeadParams, Model, ModelConfig, ModelFamily,
};
use lmkit::{Graph, Tensor};
use rand::Rng;

fn tiny_config(family: ModelFamily) -> ModelConfig {
    ModelConfig {
        family,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_head: 4,
        vocab_size: 11,
        seq_len: 6,
        block_len: (family == ModelFamily::Qlstm).then_some(4),
    }
}

fn model_loss(model: &Model<f64>, inputs: &[u32], targets: &[u32], mask: &[bool]) -> f64 {
    let mut graph = Graph::new();
    let fwd = model
        .forward(&mut graph, inputs, 2, model.config.seq_len, None)
        .unwrap();
    let (loss, _) = masked_loss(&mut graph, fwd.logits, targets, mask).unwrap();
    graph.value(loss).item()
}

fn check_family(family: ModelFamily, seed: u64) {
    let config = tiny_config(family);
    let model = Model::<f64>::init(config.clone(), seed).unwrap();
    let mut r = rng(seed + 100);
    let n = 2 * config.seq_len;
    let inputs: Vec<u32> = (0..n).map(|_| r.gen_range(0..config.vocab_size as u32)).collect();
    let targets: Vec<u32> = (0..n).map(|_| r.gen_range(0..config.vocab_size as u32)).collect();
    let mask: Vec<bool> = (0..n).map(|i| i % 3 != 2).collect();

    // Analytic gradients from one backward pass.
    let mut graph = Graph::new();
    let fwd = model
        .forward(&mut graph, &inputs, 2, config.seq_len, None)
        .unwrap();
    let (loss, _) = masked_loss(&mut graph, fwd.logits, &targets, &mask).unwrap();
    let grads = graph.backward(loss);

    const H: f64 = 1e-5;
    for (entry_idx, (name, tensor)) in model.params.entries().iter().enumerate() {
        let analytic = grads.get_or_zeros(fwd.param_nodes[entry_idx], tensor.shape());
        let mut fd = Tensor::zeros(tensor.shape());
        for coord in 0..tensor.len() {
            let mut plus = model.clone();
            plus.params.entries_mut()[entry_idx].1.data_mut()[coord] += H;
            let mut minus = model.clone();
            minus.params.entries_mut()[entry_idx].1.data_mut()[coord] -= H;
            fd.data_mut()[coord] = (model_loss(&plus, &inputs, &targets, &mask)
                - model_loss(&minus, &inputs, &targets, &mask))
                / (2.0 * H);
        }
        assert_grads_close(&analytic, &fd, 1e-4, &format!("{family} {name}"));
    }
}

#[test]
fn gpt_gradients_match_finite_differences() {
    check_family(ModelFamily::Gpt, 1);
}

#[test]
fn lstm_gradients_match_finite_differences() {
    check_family(ModelFamily::Lstm, 2);
}

#[test]
fn qlstm_block_gradients_match_finite_differences() {
    check_family(ModelFamily::Qlstm, 3);
}

#[test]
fn qlstm_sequential_gradients_match_finite_differences() {
    let config = tiny_config(ModelFamily::Qlstm).with_block_len(None);
    let model = Model::<f64>::init(config.clone(), 4).unwrap();
    // Spot-check one weight tensor end to end through the sequential path.
    let mut r = rng(40);
    let n = 2 * config.seq_len;
    let inputs: Vec<u32> = (0..n).map(|_| r.gen_range(0..11)).collect();
    let targets: Vec<u32> = (0..n).map(|_| r.gen_range(0..11)).collect();
    let mask = vec![true; n];
    let mut graph = Graph::new();
    let fwd = model.forward(&mut graph, &inputs, 2, config.seq_len, None).unwrap();
    let (loss, _) = masked_loss(&mut graph, fwd.logits, &targets, &mask).unwrap();
    let grads = graph.backward(loss);
    let entry_idx = model
        .params
        .entries()
        .iter()
        .position(|(n, _)| n == "layer0.cell.w_f")
        .unwrap();
    let tensor = &model.params.entries()[entry_idx].1;
    let analytic = grads.get_or_zeros(fwd.param_nodes[entry_idx], tensor.shape());
    const H: f64 = 1e-5;
    let mut fd = Tensor::zeros(tensor.shape());
    for coord in 0..tensor.len() {
        let mut plus = model.clone();
        plus.params.entries_mut()[entry_idx].1.data_mut()[coord] += H;
        let mut minus = model.clone();
        minus.params.entries_mut()[entry_idx].1.data_mut()[coord] -= H;
        fd.data_mut()[coord] = (model_loss(&plus, &inputs, &targets, &mask)
            - model_loss(&minus, &inputs, &targets, &mask))
            / (2.0 * H);
    }
    assert_grads_close(&analytic, &fd, 1e-4, "qlstm sequential layer0.cell.w_f");
}

/// The standalone cell op: gradient of a weighted output sum with respect to
/// every cell parameter.
#[test]
fn lstm_cell_parameter_gradients_match_finite_differences() {
    let (b, d, dh) = (2usize, 3usize, 4usize);
    let mut r = rng(50);
    let shapes: Vec<(&str, Vec<usize>)> = vec![
        ("w_f", vec![d, dh]), ("u_f", vec![dh, dh]), ("b_f", vec![dh]),
        ("w_i", vec![d, dh]), ("u_i", vec![dh, dh]), ("b_i", vec![dh]),
        ("w_z", vec![d, dh]), ("u_z", vec![dh, dh]), ("b_z", vec![dh]),
        ("w_o", vec![d, dh]), ("u_o", vec![dh, dh]), ("b_o", vec![dh]),
    ];
    let tensors: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|(_, s)| common::random_tensor(&mut r, s, -0.5, 0.5))
        .collect();
    let x_t = common::random_tensor(&mut r, &[b, d], -1.0, 1.0);
    let h0_t = common::random_tensor(&mut r, &[b, dh], -1.0, 1.0);
    let c0_t = common::random_tensor(&mut r, &[b, dh], -1.0, 1.0);
    let w_h = common::random_tensor(&mut r, &[b, dh], -1.0, 1.0);
    let w_c = common::random_tensor(&mut r, &[b, dh], -1.0, 1.0);

    let run = |ts: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut graph = Graph::<f64>::new();
        let ids: Vec<_> = ts.iter().map(|t| graph.leaf(t.clone())).collect();
        let p = CellHeadParams {
            w_f: ids[0], u_f: ids[1], b_f: ids[2],
            w_i: ids[3], u_i: ids[4], b_i: ids[5],
            w_z: ids[6], u_z: ids[7], b_z: ids[8],
            w_o: ids[9], u_o: ids[10], b_o: ids[11],
        };
        let x = graph.constant(x_t.clone());
        let h0 = graph.constant(h0_t.clone());
        let c0 = graph.constant(c0_t.clone());
        let (h1, c1) = lstm_cell_forward(&mut graph, x, h0, c0, &p).unwrap();
        let wh = graph.constant(w_h.clone());
        let wc = graph.constant(w_c.clone());
        let hw = graph.mul(h1, wh).unwrap();
        let cw = graph.mul(c1, wc).unwrap();
        let sum = graph.add(hw, cw).unwrap();
        let loss = graph.sum_all(sum);
        let grads = graph.backward(loss);
        let gs = ids
            .iter()
            .zip(ts)
            .map(|(&id, t)| grads.get_or_zeros(id, t.shape()))
            .collect();
        (graph.value(loss).item(), gs)
    };

    let (_, analytic) = run(&tensors);
    let eval = |ts: &[Tensor<f64>]| run(ts).0;
    let fd = common::finite_diff_grads(&tensors, &eval);
    for (i, (a, f)) in analytic.iter().zip(&fd).enumerate() {
        assert_grads_close(a, f, 1e-4, &format!("cell param {}", shapes[i].0));
    }
}
