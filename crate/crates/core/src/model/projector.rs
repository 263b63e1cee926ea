//! Sequence projectors: a two-layer bidirectional LSTM for the CNN and a
//! three-layer perceptron for the ViT.

use super::params::{Bound, ParamStore};
use crate::autograd::Tensor;
use crate::rng::RandomStream;

pub const LSTM_LAYERS: usize = 2;
pub const MLP_LAYERS: usize = 3;

pub fn init_lstm(store: &mut ParamStore, in_dim: usize, out_dim: usize, rng: &mut RandomStream) {
    let hidden = out_dim / 2;
    let bound = 1.0 / (hidden as f64).sqrt();
    let mut width = in_dim;
    for layer in 0..LSTM_LAYERS {
        for dir in ["fwd", "bwd"] {
            let pre = format!("projector.lstm{layer}.{dir}");
            store.insert_uniform(&format!("{pre}.w_ih"), &[4 * hidden, width], bound, rng);
            store.insert_uniform(&format!("{pre}.w_hh"), &[4 * hidden, hidden], bound, rng);
            store.insert_uniform(&format!("{pre}.bias"), &[4 * hidden], bound, rng);
        }
        width = 2 * hidden;
    }
}

pub fn init_mlp(store: &mut ParamStore, in_dim: usize, out_dim: usize, rng: &mut RandomStream) {
    let mut width = in_dim;
    for i in 0..MLP_LAYERS {
        let bound = (6.0 / (width + out_dim) as f64).sqrt();
        store.insert_uniform(&format!("projector.fc{i}.weight"), &[out_dim, width], bound, rng);
        store.insert_const(&format!("projector.fc{i}.bias"), &[out_dim], 0.0);
        if i + 1 < MLP_LAYERS {
            store.insert_const(&format!("projector.ln{i}.gamma"), &[out_dim], 1.0);
            store.insert_const(&format!("projector.ln{i}.beta"), &[out_dim], 0.0);
        }
        width = out_dim;
    }
}

/// One LSTM direction over `[b, f, in]`; returns `[b, f, hidden]`.
fn lstm_direction(p: &Bound<'_>, pre: &str, x: &Tensor, reverse: bool) -> Tensor {
    let w_hh = p.get(&format!("{pre}.w_hh"));
    let hidden = w_hh.dim(1);
    let (b, f) = (x.dim(0), x.dim(1));
    // Input contributions for every step at once, time-major for cheap slicing.
    let xg = x
        .linear(&p.get(&format!("{pre}.w_ih")), Some(&p.get(&format!("{pre}.bias"))))
        .permute(&[1, 0, 2]);
    let mut h = Tensor::zeros(&[b, hidden]);
    let mut c = Tensor::zeros(&[b, hidden]);
    let mut outs: Vec<Option<Tensor>> = vec![None; f];
    let order: Vec<usize> = if reverse {
        (0..f).rev().collect()
    } else {
        (0..f).collect()
    };
    for t in order {
        let gates = xg.narrow(0, t, 1).reshape(&[b, 4 * hidden]).add(&h.linear(&w_hh, None));
        let i = gates.narrow(1, 0, hidden).sigmoid();
        let fg = gates.narrow(1, hidden, hidden).sigmoid();
        let g = gates.narrow(1, 2 * hidden, hidden).tanh();
        let o = gates.narrow(1, 3 * hidden, hidden).sigmoid();
        c = fg.mul(&c).add(&i.mul(&g));
        h = o.mul(&c.tanh());
        outs[t] = Some(h.reshape(&[b, 1, hidden]));
    }
    let outs: Vec<Tensor> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
    Tensor::concat(&outs, 1)
}

/// `[b, f, d]` frames to `[b, f, 2 * hidden]` features.
pub fn lstm(p: &Bound<'_>, frames: &Tensor) -> Tensor {
    let mut x = frames.clone();
    for layer in 0..LSTM_LAYERS {
        let fwd = lstm_direction(p, &format!("projector.lstm{layer}.fwd"), &x, false);
        let bwd = lstm_direction(p, &format!("projector.lstm{layer}.bwd"), &x, true);
        x = Tensor::concat(&[fwd, bwd], 2);
    }
    x
}

/// Per-frame Linear + LayerNorm + GELU, twice, then a final Linear.
pub fn mlp(p: &Bound<'_>, frames: &Tensor) -> Tensor {
    let mut x = frames.clone();
    for i in 0..MLP_LAYERS {
        x = x.linear(
            &p.get(&format!("projector.fc{i}.weight")),
            Some(&p.get(&format!("projector.fc{i}.bias"))),
        );
        if i + 1 < MLP_LAYERS {
            x = x
                .layer_norm_last(
                    &p.get(&format!("projector.ln{i}.gamma")),
                    &p.get(&format!("projector.ln{i}.beta")),
                    1e-5,
                )
                .gelu();
        }
    }
    x
}
