//! Differentiable building blocks with hand-derived gradients: input
//! embedding, GRU cell with backpropagation through time, linear heads,
//! binary cross entropy, and a finite-difference gradient checker.
//!
//! GRU convention (fixed here, documented once): with input v and previous
//! state h,
//!
//! ```text
//! r = σ(W_r·v + U_r·h + b_r)
//! z = σ(W_z·v + U_z·h + b_z)
//! c = tanh(W_c·v + U_c·(r⊙h) + b_c)
//! h' = (1−z)⊙h + z⊙c
//! ```
//!
//! i.e. the reset gate multiplies the previous state before the recurrent
//! matrix, and z gates the candidate in. The initial state is the zero
//! vector.

use crate::tensor::{add_outer, add_tmatvec, affine, glorot_init, Matrix, Rng};
use serde::{Deserialize, Serialize};

/// Tensor shape as (rows, cols); vectors are (len, 1).
pub type Shape = (usize, usize);

/// Uniform access to every learnable tensor of a component, in a fixed
/// order. The optimizer, the checkpoint writer, the parameter hash, and the
/// gradient checker all iterate parameters through this trait so they agree
/// on ordering.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, Shape, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Shape, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, _, s| out.extend_from_slice(s));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |_, _, s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }
}

/// FNV-1a over the little-endian bytes of every parameter, visit order.
/// Used for the freeze contract: equal hash ⇔ byte-identical parameters.
pub fn param_hash<P: Parameters + ?Sized>(p: &P) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    p.visit(&mut |_, _, s| {
        for v in s {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
    });
    h
}

/// Input embedding: one row per event type, so a multi-hot input maps to the
/// sum of the rows of its set bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub weight: Matrix, // |E| x ε
}

impl Embedding {
    pub fn new(n_events: usize, dim: usize, rng: &mut Rng) -> Self {
        Embedding {
            weight: glorot_init(n_events, dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Embedding {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
        }
    }

    pub fn n_events(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    /// Sum of the embedding rows selected by set bits. Entries must be 0/1.
    pub fn forward(&self, y: &[u8]) -> Vec<f64> {
        assert_eq!(
            y.len(),
            self.weight.rows(),
            "embedding: input length {} but vocabulary has {} events",
            y.len(),
            self.weight.rows()
        );
        let mut v = vec![0.0; self.weight.cols()];
        for (j, &bit) in y.iter().enumerate() {
            match bit {
                0 => {}
                1 => {
                    for (o, w) in v.iter_mut().zip(self.weight.row(j)) {
                        *o += w;
                    }
                }
                other => panic!("embedding input must be binary, got {other} at index {j}"),
            }
        }
        v
    }

    /// Accumulate dL/dW_emb given dL/dv for one step.
    pub fn backward(&self, y: &[u8], dv: &[f64], grads: &mut Embedding) {
        for (j, &bit) in y.iter().enumerate() {
            if bit == 1 {
                for (g, d) in grads.weight.row_mut(j).iter_mut().zip(dv) {
                    *g += d;
                }
            }
        }
    }
}

impl Parameters for Embedding {
    fn visit(&self, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        let shape = (self.weight.rows(), self.weight.cols());
        f("emb.weight", shape, self.weight.data());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        let shape = (self.weight.rows(), self.weight.cols());
        f("emb.weight", shape, self.weight.data_mut());
    }
}

/// All learnable weights of one GRU cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_r: Matrix,
    pub w_z: Matrix,
    pub w_c: Matrix,
    pub u_r: Matrix,
    pub u_z: Matrix,
    pub u_c: Matrix,
    pub b_r: Vec<f64>,
    pub b_z: Vec<f64>,
    pub b_c: Vec<f64>,
}

impl GruParams {
    pub fn new(hidden: usize, input: usize, rng: &mut Rng) -> Self {
        GruParams {
            w_r: glorot_init(hidden, input, rng),
            w_z: glorot_init(hidden, input, rng),
            w_c: glorot_init(hidden, input, rng),
            u_r: glorot_init(hidden, hidden, rng),
            u_z: glorot_init(hidden, hidden, rng),
            u_c: glorot_init(hidden, hidden, rng),
            b_r: vec![0.0; hidden],
            b_z: vec![0.0; hidden],
            b_c: vec![0.0; hidden],
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        GruParams {
            w_r: Matrix::zeros(hidden, input),
            w_z: Matrix::zeros(hidden, input),
            w_c: Matrix::zeros(hidden, input),
            u_r: Matrix::zeros(hidden, hidden),
            u_z: Matrix::zeros(hidden, hidden),
            u_c: Matrix::zeros(hidden, hidden),
            b_r: vec![0.0; hidden],
            b_z: vec![0.0; hidden],
            b_c: vec![0.0; hidden],
        }
    }

    pub fn zeros_like(&self) -> Self {
        GruParams::zeros(self.hidden_dim(), self.input_dim())
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_r.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_r.cols()
    }
}

impl Parameters for GruParams {
    fn visit(&self, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        let (d, e) = (self.hidden_dim(), self.input_dim());
        f("gru.w_r", (d, e), self.w_r.data());
        f("gru.w_z", (d, e), self.w_z.data());
        f("gru.w_c", (d, e), self.w_c.data());
        f("gru.u_r", (d, d), self.u_r.data());
        f("gru.u_z", (d, d), self.u_z.data());
        f("gru.u_c", (d, d), self.u_c.data());
        f("gru.b_r", (d, 1), &self.b_r);
        f("gru.b_z", (d, 1), &self.b_z);
        f("gru.b_c", (d, 1), &self.b_c);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        let (d, e) = (self.hidden_dim(), self.input_dim());
        f("gru.w_r", (d, e), self.w_r.data_mut());
        f("gru.w_z", (d, e), self.w_z.data_mut());
        f("gru.w_c", (d, e), self.w_c.data_mut());
        f("gru.u_r", (d, d), self.u_r.data_mut());
        f("gru.u_z", (d, d), self.u_z.data_mut());
        f("gru.u_c", (d, d), self.u_c.data_mut());
        f("gru.b_r", (d, 1), &mut self.b_r);
        f("gru.b_z", (d, 1), &mut self.b_z);
        f("gru.b_c", (d, 1), &mut self.b_c);
    }
}

/// One tape entry: everything the backward pass needs about one forward step.
#[derive(Debug, Clone)]
pub struct GruStep {
    pub v: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

/// One GRU step; returns the tape entry (which contains the new state `h`).
pub fn gru_forward_step(p: &GruParams, h_prev: &[f64], v: &[f64]) -> GruStep {
    assert_eq!(
        h_prev.len(),
        p.hidden_dim(),
        "gru: state length {} but hidden dim is {}",
        h_prev.len(),
        p.hidden_dim()
    );
    assert_eq!(
        v.len(),
        p.input_dim(),
        "gru: input length {} but input dim is {}",
        v.len(),
        p.input_dim()
    );
    let d = p.hidden_dim();
    let mut a_r = affine(&p.w_r, v, &p.b_r);
    add_matvec(&p.u_r, h_prev, &mut a_r);
    let mut a_z = affine(&p.w_z, v, &p.b_z);
    add_matvec(&p.u_z, h_prev, &mut a_z);
    let r: Vec<f64> = a_r.iter().map(|&x| crate::tensor::sigmoid(x)).collect();
    let z: Vec<f64> = a_z.iter().map(|&x| crate::tensor::sigmoid(x)).collect();
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(rv, hv)| rv * hv).collect();
    let mut a_c = affine(&p.w_c, v, &p.b_c);
    add_matvec(&p.u_c, &rh, &mut a_c);
    let c: Vec<f64> = a_c.iter().map(|&x| x.tanh()).collect();
    let mut h = vec![0.0; d];
    for i in 0..d {
        h[i] = (1.0 - z[i]) * h_prev[i] + z[i] * c[i];
    }
    GruStep {
        v: v.to_vec(),
        h_prev: h_prev.to_vec(),
        r,
        z,
        c,
        h,
    }
}

// `out += U·x` (plain matvec accumulate; name distinguishes it from the
// transpose accumulate in tensor).
fn add_matvec(u: &Matrix, x: &[f64], out: &mut [f64]) {
    assert_eq!(u.cols(), x.len(), "matvec: U is {}x{} but x has length {}", u.rows(), u.cols(), x.len());
    for (r, o) in out.iter_mut().enumerate() {
        let row = u.row(r);
        let mut acc = 0.0;
        for (uv, xv) in row.iter().zip(x) {
            acc += uv * xv;
        }
        *o += acc;
    }
}

/// Full backpropagation through time over a completed forward tape.
///
/// `dh_out[t]` is dL/dh for the state produced at step t (from the heads);
/// returns parameter gradients and dL/dv per step. Nothing is accumulated
/// across calls.
pub fn gru_backward(
    p: &GruParams,
    steps: &[GruStep],
    dh_out: &[Vec<f64>],
) -> (GruParams, Vec<Vec<f64>>) {
    assert_eq!(
        steps.len(),
        dh_out.len(),
        "bptt: tape has {} steps but {} output gradients given",
        steps.len(),
        dh_out.len()
    );
    let d = p.hidden_dim();
    let mut grads = p.zeros_like();
    let mut dvs = vec![vec![0.0; p.input_dim()]; steps.len()];
    let mut carry = vec![0.0; d]; // dL/dh_t flowing from step t+1

    for (t, step) in steps.iter().enumerate().rev() {
        let dh: Vec<f64> = dh_out[t].iter().zip(&carry).map(|(a, b)| a + b).collect();
        debug_assert_eq!(dh.len(), d);

        // h = (1−z)⊙h_prev + z⊙c
        let mut da_z = vec![0.0; d];
        let mut da_c = vec![0.0; d];
        let mut dh_prev = vec![0.0; d];
        for i in 0..d {
            let dz = dh[i] * (step.c[i] - step.h_prev[i]);
            da_z[i] = dz * step.z[i] * (1.0 - step.z[i]);
            let dc = dh[i] * step.z[i];
            da_c[i] = dc * (1.0 - step.c[i] * step.c[i]);
            dh_prev[i] = dh[i] * (1.0 - step.z[i]);
        }

        // candidate path: a_c = W_c v + U_c (r⊙h_prev) + b_c
        let rh: Vec<f64> = step
            .r
            .iter()
            .zip(&step.h_prev)
            .map(|(rv, hv)| rv * hv)
            .collect();
        add_outer(&mut grads.w_c, &da_c, &step.v);
        add_outer(&mut grads.u_c, &da_c, &rh);
        for (g, d) in grads.b_c.iter_mut().zip(&da_c) {
            *g += d;
        }
        let mut drh = vec![0.0; d];
        add_tmatvec(&p.u_c, &da_c, &mut drh);
        let mut da_r = vec![0.0; d];
        for i in 0..d {
            da_r[i] = drh[i] * step.h_prev[i] * step.r[i] * (1.0 - step.r[i]);
            dh_prev[i] += drh[i] * step.r[i];
        }

        // gate paths: a_r, a_z = W v + U h_prev + b
        add_outer(&mut grads.w_r, &da_r, &step.v);
        add_outer(&mut grads.u_r, &da_r, &step.h_prev);
        for (g, d) in grads.b_r.iter_mut().zip(&da_r) {
            *g += d;
        }
        add_outer(&mut grads.w_z, &da_z, &step.v);
        add_outer(&mut grads.u_z, &da_z, &step.h_prev);
        for (g, d) in grads.b_z.iter_mut().zip(&da_z) {
            *g += d;
        }
        add_tmatvec(&p.u_r, &da_r, &mut dh_prev);
        add_tmatvec(&p.u_z, &da_z, &mut dh_prev);

        // input gradient
        let dv = &mut dvs[t];
        add_tmatvec(&p.w_r, &da_r, dv);
        add_tmatvec(&p.w_z, &da_z, dv);
        add_tmatvec(&p.w_c, &da_c, dv);

        carry = dh_prev;
    }
    (grads, dvs)
}

/// Linear projection head (logits; callers apply sigmoid or softmax).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w: Matrix, // out x d
    pub b: Vec<f64>,
}

impl Head {
    pub fn new(out: usize, hidden: usize, rng: &mut Rng) -> Self {
        Head {
            w: glorot_init(out, hidden, rng),
            b: vec![0.0; out],
        }
    }

    pub fn zeros(out: usize, hidden: usize) -> Self {
        Head {
            w: Matrix::zeros(out, hidden),
            b: vec![0.0; out],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Head::zeros(self.w.rows(), self.w.cols())
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, h: &[f64]) -> Vec<f64> {
        affine(&self.w, h, &self.b)
    }

    /// Accumulate head gradients and the state gradient for one step.
    pub fn backward(&self, h: &[f64], dlogits: &[f64], grads: &mut Head, dh: &mut [f64]) {
        add_outer(&mut grads.w, dlogits, h);
        for (g, d) in grads.b.iter_mut().zip(dlogits) {
            *g += d;
        }
        add_tmatvec(&self.w, dlogits, dh);
    }
}

impl Parameters for Head {
    fn visit(&self, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        f("head.w", (self.w.rows(), self.w.cols()), self.w.data());
        f("head.b", (self.b.len(), 1), &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        let shape = (self.w.rows(), self.w.cols());
        f("head.w", shape, self.w.data_mut());
        f("head.b", (self.b.len(), 1), &mut self.b);
    }
}

/// Mean binary cross entropy over one prediction vector, plus its exact
/// gradient with respect to the predictions.
///
/// loss = −(1/L)·Σ_j [y_j·ln p_j + (1−y_j)·ln(1−p_j)]
///
/// Callers clamp predictions into (0,1) first (see the models module).
pub fn bce_loss(pred: &[f64], target: &[u8]) -> (f64, Vec<f64>) {
    assert_eq!(
        pred.len(),
        target.len(),
        "bce: {} predictions but {} targets",
        pred.len(),
        target.len()
    );
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (i, (&p, &y)) in pred.iter().zip(target).enumerate() {
        if y == 1 {
            loss -= p.ln();
            grad[i] = -1.0 / (p * n);
        } else {
            loss -= (1.0 - p).ln();
            grad[i] = 1.0 / ((1.0 - p) * n);
        }
    }
    (loss / n, grad)
}

/// Central-difference gradient of `loss` with respect to every parameter of
/// `model`, flattened in visit order. h is the half step.
pub fn numeric_grad<M, F>(model: &mut M, mut loss: F, h: f64) -> Vec<f64>
where
    M: Parameters,
    F: FnMut(&M) -> f64,
{
    let n = model.param_count();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let old = perturb(model, i, h);
        let up = loss(model);
        set_at(model, i, old - h);
        let down = loss(model);
        set_at(model, i, old);
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

fn perturb<M: Parameters>(model: &mut M, idx: usize, h: f64) -> f64 {
    let mut old = 0.0;
    let mut off = 0;
    model.visit_mut(&mut |_, _, s| {
        if idx >= off && idx < off + s.len() {
            old = s[idx - off];
            s[idx - off] = old + h;
        }
        off += s.len();
    });
    old
}

fn set_at<M: Parameters>(model: &mut M, idx: usize, value: f64) {
    let mut off = 0;
    model.visit_mut(&mut |_, _, s| {
        if idx >= off && idx < off + s.len() {
            s[idx - off] = value;
        }
        off += s.len();
    });
}

/// Worst relative error between analytic and numeric gradients:
/// max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e−8).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Convenience wrapper: numeric gradient vs the provided analytic gradient
/// (same `Parameters`-shaped container), h = 1e−5 central differences.
pub fn grad_check<M, F>(model: &mut M, analytic: &M, loss: F) -> f64
where
    M: Parameters,
    F: FnMut(&M) -> f64,
{
    let numeric = numeric_grad(model, loss, 1e-5);
    max_rel_error(&analytic.flatten(), &numeric)
}
