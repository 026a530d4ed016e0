//! The predictors: a base GRU next-window model, expert and gating networks,
//! their mixture, the residual combination of base + mixture, and a
//! full-history logistic-regression baseline.
//!
//! All models consume a sequence of binary event windows y_1..y_T and emit
//! one prediction vector over the target events per step t = 1..T−1, each a
//! function of y_1..y_t only.

use crate::data::WindowedSequence;
use crate::layers::{
    bce_loss, gru_backward, gru_forward_step, Embedding, GruParams, GruStep, Head, Parameters,
    Shape,
};
use crate::tensor::{sigmoid, sigmoid_vec, softmax_vec, Matrix, Rng};
use serde::{Deserialize, Serialize};

/// Predictions are clamped into [EPS_CLAMP, 1−EPS_CLAMP] before the loss so
/// BCE stays defined when the residual sum leaves (0,1). The clamp is hard:
/// no gradient flows through a clamped coordinate.
pub const EPS_CLAMP: f64 = 1e-6;

/// How the residual model combines base and mixture outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// Literal probability-space sum o_base + o_moe, clamped.
    #[default]
    ProbSum,
    /// σ(logit(o_base) + logit(o_moe)); stays in (0,1) by construction.
    LogitSum,
}

impl std::str::FromStr for Combine {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "prob-sum" | "prob_sum" => Ok(Combine::ProbSum),
            "logit-sum" | "logit_sum" => Ok(Combine::LogitSum),
            other => Err(format!("unknown combine mode {other:?}")),
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Population-wide GRU predictor: embedding, GRU, sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub emb: Embedding,
    pub gru: GruParams,
    pub head: Head,
}

/// Forward tape for one sequence: everything the backward pass needs.
pub struct BaseTape {
    pub steps: Vec<GruStep>,
    pub logits: Vec<Vec<f64>>,
    pub preds: Vec<Vec<f64>>,
}

impl BaseModel {
    pub fn new(n_events: usize, n_targets: usize, emb_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        BaseModel {
            emb: Embedding::new(n_events, emb_dim, rng),
            gru: GruParams::new(hidden, emb_dim, rng),
            head: Head::new(n_targets, hidden, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        BaseModel {
            emb: self.emb.zeros_like(),
            gru: self.gru.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn n_targets(&self) -> usize {
        self.head.out_dim()
    }

    pub fn embed_sequence(&self, seq: &WindowedSequence) -> Vec<Vec<f64>> {
        // windows[0..T−1] are consumed as inputs; the last window is only a target
        seq.windows[..seq.windows.len() - 1]
            .iter()
            .map(|w| self.emb.forward(w))
            .collect()
    }

    /// Per-step predictions for t = 1..T−1, prediction t a function of
    /// y_1..y_t only. Panics if the sequence has fewer than 2 windows.
    pub fn forward(&self, seq: &WindowedSequence) -> Vec<Vec<f64>> {
        self.forward_cached(seq).preds
    }

    pub fn forward_cached(&self, seq: &WindowedSequence) -> BaseTape {
        assert!(
            seq.windows.len() >= 2,
            "sequence {} has {} windows, need at least 2 to predict",
            seq.id,
            seq.windows.len()
        );
        let vs = self.embed_sequence(seq);
        let mut h = vec![0.0; self.gru.hidden_dim()];
        let mut steps = Vec::with_capacity(vs.len());
        let mut logits = Vec::with_capacity(vs.len());
        let mut preds = Vec::with_capacity(vs.len());
        for v in &vs {
            let step = gru_forward_step(&self.gru, &h, v);
            h = step.h.clone();
            let s = self.head.forward(&h);
            preds.push(sigmoid_vec(&s));
            logits.push(s);
            steps.push(step);
        }
        BaseTape {
            steps,
            logits,
            preds,
        }
    }

    /// Mean-over-steps BCE of the clamped predictions against the targets.
    pub fn seq_loss(&self, seq: &WindowedSequence, targets: &[Vec<u8>]) -> f64 {
        let preds = self.forward(seq);
        mean_bce(&preds, targets)
    }

    /// Loss plus exact gradients for every parameter (embedding, GRU, head).
    pub fn seq_loss_grads(&self, seq: &WindowedSequence, targets: &[Vec<u8>]) -> (f64, BaseModel) {
        let tape = self.forward_cached(seq);
        let n_steps = tape.preds.len();
        assert_eq!(
            n_steps,
            targets.len(),
            "sequence yields {} predictions but {} targets given",
            n_steps,
            targets.len()
        );
        let mut grads = self.zeros_like();
        let scale = 1.0 / n_steps as f64;
        let mut loss = 0.0;
        let mut dh_list = vec![vec![0.0; self.gru.hidden_dim()]; n_steps];
        for t in 0..n_steps {
            let raw = &tape.preds[t];
            let clamped: Vec<f64> = raw.iter().map(|&p| clamp_prob(p)).collect();
            let (l, dpred) = bce_loss(&clamped, &targets[t]);
            loss += l * scale;
            let dlogits: Vec<f64> = dpred
                .iter()
                .zip(raw)
                .map(|(&g, &p)| {
                    if p <= EPS_CLAMP || p >= 1.0 - EPS_CLAMP {
                        0.0
                    } else {
                        scale * g * p * (1.0 - p)
                    }
                })
                .collect();
            self.head
                .backward(&tape.steps[t].h, &dlogits, &mut grads.head, &mut dh_list[t]);
        }
        let (gru_grads, dvs) = gru_backward(&self.gru, &tape.steps, &dh_list);
        grads.gru = gru_grads;
        for (t, dv) in dvs.iter().enumerate() {
            self.emb.backward(&seq.windows[t], dv, &mut grads.emb);
        }
        (loss, grads)
    }
}

impl Parameters for BaseModel {
    fn visit(&self, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        self.emb.visit(f);
        self.gru.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        self.emb.visit_mut(f);
        self.gru.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// One expert: GRU over the shared embedded input plus a sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    pub gru: GruParams,
    pub head: Head,
}

impl ExpertModel {
    /// Expert head biases start at −2.5 (σ ≈ 0.076), not 0: the mixture then
    /// begins close to its useful operating point — a small, nearly silent
    /// residual — while sigmoid derivatives stay far from saturation. With
    /// zero biases the mixture first has to drive every output from 0.5
    /// toward 0, which parks the heads in the saturated regime and starves
    /// the experts of gradient before they can specialize.
    pub const HEAD_BIAS_INIT: f64 = -2.5;

    pub fn new(emb_dim: usize, hidden: usize, n_targets: usize, rng: &mut Rng) -> Self {
        let mut head = Head::new(n_targets, hidden, rng);
        for b in head.b.iter_mut() {
            *b = Self::HEAD_BIAS_INIT;
        }
        ExpertModel {
            gru: GruParams::new(hidden, emb_dim, rng),
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ExpertModel {
            gru: self.gru.zeros_like(),
            head: self.head.zeros_like(),
        }
    }
}

/// Gating network: GRU plus a softmax head over the experts.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingModel {
    pub gru: GruParams,
    pub head: Head,
}

impl GatingModel {
    pub fn new(emb_dim: usize, hidden: usize, n_experts: usize, rng: &mut Rng) -> Self {
        GatingModel {
            gru: GruParams::new(hidden, emb_dim, rng),
            head: Head::new(n_experts, hidden, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        GatingModel {
            gru: self.gru.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Advance the gating state by one input and return the expert weights.
    pub fn step(&self, h: &mut Vec<f64>, v: &[f64]) -> Vec<f64> {
        let step = gru_forward_step(&self.gru, h, v);
        *h = step.h;
        softmax_vec(&self.head.forward(h))
    }
}

/// The mixture: n experts plus the gating network. Input is the embedded
/// sequence; the embedding belongs to whoever owns this mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub experts: Vec<ExpertModel>,
    pub gate: GatingModel,
}

/// Forward tape of the mixture over one sequence.
pub struct MoeTape {
    /// expert_steps[i][t]
    pub expert_steps: Vec<Vec<GruStep>>,
    /// expert_outs[i][t]: σ head outputs of expert i
    pub expert_outs: Vec<Vec<Vec<f64>>>,
    pub gate_steps: Vec<GruStep>,
    /// gates[t]: softmax weights over experts
    pub gates: Vec<Vec<f64>>,
    /// o_moe per step
    pub outputs: Vec<Vec<f64>>,
}

impl MoeParams {
    pub fn new(n_experts: usize, emb_dim: usize, hidden: usize, n_targets: usize, rng: &mut Rng) -> Self {
        assert!(n_experts >= 1, "need at least one expert");
        MoeParams {
            experts: (0..n_experts)
                .map(|_| ExpertModel::new(emb_dim, hidden, n_targets, rng))
                .collect(),
            gate: GatingModel::new(emb_dim, hidden, n_experts, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        MoeParams {
            experts: self.experts.iter().map(|e| e.zeros_like()).collect(),
            gate: self.gate.zeros_like(),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn n_targets(&self) -> usize {
        self.experts[0].head.out_dim()
    }

    /// o_moe,t = Σ_i g_[i],t · σ(expert i head): a per-coordinate convex
    /// combination of the expert outputs.
    pub fn forward(&self, v_seq: &[Vec<f64>]) -> MoeTape {
        let n = self.n_experts();
        let d = self.experts[0].gru.hidden_dim();
        let mut expert_states = vec![vec![0.0; d]; n];
        let mut gate_state = vec![0.0; self.gate.gru.hidden_dim()];
        let mut tape = MoeTape {
            expert_steps: vec![Vec::with_capacity(v_seq.len()); n],
            expert_outs: vec![Vec::with_capacity(v_seq.len()); n],
            gate_steps: Vec::with_capacity(v_seq.len()),
            gates: Vec::with_capacity(v_seq.len()),
            outputs: Vec::with_capacity(v_seq.len()),
        };
        for v in v_seq {
            let gstep = gru_forward_step(&self.gate.gru, &gate_state, v);
            gate_state = gstep.h.clone();
            let g = softmax_vec(&self.gate.head.forward(&gate_state));
            let mut o_moe = vec![0.0; self.n_targets()];
            for i in 0..n {
                let estep = gru_forward_step(&self.experts[i].gru, &expert_states[i], v);
                expert_states[i] = estep.h.clone();
                let o_i = sigmoid_vec(&self.experts[i].head.forward(&expert_states[i]));
                for (acc, &ov) in o_moe.iter_mut().zip(&o_i) {
                    *acc += g[i] * ov;
                }
                tape.expert_steps[i].push(estep);
                tape.expert_outs[i].push(o_i);
            }
            tape.gate_steps.push(gstep);
            tape.gates.push(g);
            tape.outputs.push(o_moe);
        }
        tape
    }

    /// Backpropagate dL/do_moe per step through experts and gate. Returns
    /// the mixture gradients and dL/dv per step (for a trainable embedding).
    pub fn backward(&self, tape: &MoeTape, d_moe: &[Vec<f64>]) -> (MoeParams, Vec<Vec<f64>>) {
        let n = self.n_experts();
        let steps = tape.outputs.len();
        assert_eq!(steps, d_moe.len(), "tape has {} steps, {} gradients given", steps, d_moe.len());
        let mut grads = self.zeros_like();
        let mut expert_dh: Vec<Vec<Vec<f64>>> =
            vec![vec![vec![0.0; self.experts[0].gru.hidden_dim()]; steps]; n];
        let mut gate_dh: Vec<Vec<f64>> = vec![vec![0.0; self.gate.gru.hidden_dim()]; steps];

        for t in 0..steps {
            let g = &tape.gates[t];
            let mut dg = vec![0.0; n];
            for i in 0..n {
                let o_i = &tape.expert_outs[i][t];
                // dL/dg_i = <dL/do_moe, o_i>
                dg[i] = d_moe[t].iter().zip(o_i).map(|(a, b)| a * b).sum();
                // expert head: do_i = g_i · dL/do_moe, then through σ
                let ds: Vec<f64> = d_moe[t]
                    .iter()
                    .zip(o_i)
                    .map(|(&dm, &o)| g[i] * dm * o * (1.0 - o))
                    .collect();
                self.experts[i].head.backward(
                    &tape.expert_steps[i][t].h,
                    &ds,
                    &mut grads.experts[i].head,
                    &mut expert_dh[i][t],
                );
            }
            // softmax backward: dq = g ⊙ (dg − <dg, g>)
            let inner: f64 = dg.iter().zip(g).map(|(a, b)| a * b).sum();
            let dq: Vec<f64> = dg.iter().zip(g).map(|(d, gi)| gi * (d - inner)).collect();
            self.gate.head.backward(
                &tape.gate_steps[t].h,
                &dq,
                &mut grads.gate.head,
                &mut gate_dh[t],
            );
        }

        let mut dv_total = vec![vec![0.0; self.gate.gru.input_dim()]; steps];
        for i in 0..n {
            let (ggrads, dvs) = gru_backward(&self.experts[i].gru, &tape.expert_steps[i], &expert_dh[i]);
            grads.experts[i].gru = ggrads;
            for (tot, dv) in dv_total.iter_mut().zip(&dvs) {
                for (a, b) in tot.iter_mut().zip(dv) {
                    *a += b;
                }
            }
        }
        let (ggrads, dvs) = gru_backward(&self.gate.gru, &tape.gate_steps, &gate_dh);
        grads.gate.gru = ggrads;
        for (tot, dv) in dv_total.iter_mut().zip(&dvs) {
            for (a, b) in tot.iter_mut().zip(dv) {
                *a += b;
            }
        }
        (grads, dv_total)
    }
}

impl Parameters for MoeParams {
    fn visit(&self, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        for (i, e) in self.experts.iter().enumerate() {
            e.gru.visit(&mut |n, sh, s| f(&format!("expert{i}.{n}"), sh, s));
            e.head.visit(&mut |n, sh, s| f(&format!("expert{i}.{n}"), sh, s));
        }
        self.gate.gru.visit(&mut |n, sh, s| f(&format!("gate.{n}"), sh, s));
        self.gate.head.visit(&mut |n, sh, s| f(&format!("gate.{n}"), sh, s));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.gru.visit_mut(&mut |n, sh, s| f(&format!("expert{i}.{n}"), sh, s));
            e.head.visit_mut(&mut |n, sh, s| f(&format!("expert{i}.{n}"), sh, s));
        }
        self.gate.gru.visit_mut(&mut |n, sh, s| f(&format!("gate.{n}"), sh, s));
        self.gate.head.visit_mut(&mut |n, sh, s| f(&format!("gate.{n}"), sh, s));
    }
}

/// Free-standing mixture output over an embedded sequence.
pub fn moe_forward(v_seq: &[Vec<f64>], moe: &MoeParams) -> Vec<Vec<f64>> {
    moe.forward(v_seq).outputs
}

/// The mixture trained standalone (ablation): its own fresh embedding, no
/// base model, predictions are o_moe alone.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub emb: Embedding,
    pub moe: MoeParams,
}

impl MoeModel {
    pub fn new(
        n_events: usize,
        n_targets: usize,
        emb_dim: usize,
        n_experts: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        MoeModel {
            emb: Embedding::new(n_events, emb_dim, rng),
            moe: MoeParams::new(n_experts, emb_dim, hidden, n_targets, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        MoeModel {
            emb: self.emb.zeros_like(),
            moe: self.moe.zeros_like(),
        }
    }

    fn embed_sequence(&self, seq: &WindowedSequence) -> Vec<Vec<f64>> {
        assert!(seq.windows.len() >= 2, "sequence {} too short", seq.id);
        seq.windows[..seq.windows.len() - 1]
            .iter()
            .map(|w| self.emb.forward(w))
            .collect()
    }

    pub fn predict(&self, seq: &WindowedSequence) -> Vec<Vec<f64>> {
        moe_forward(&self.embed_sequence(seq), &self.moe)
    }

    pub fn seq_loss(&self, seq: &WindowedSequence, targets: &[Vec<u8>]) -> f64 {
        mean_bce(&self.predict(seq), targets)
    }

    pub fn seq_loss_grads(&self, seq: &WindowedSequence, targets: &[Vec<u8>]) -> (f64, MoeModel) {
        let v_seq = self.embed_sequence(seq);
        let tape = self.moe.forward(&v_seq);
        let (loss, d_moe) = clamped_bce_grads(&tape.outputs, targets);
        let (moe_grads, dvs) = self.moe.backward(&tape, &d_moe);
        let mut grads = self.zeros_like();
        grads.moe = moe_grads;
        for (t, dv) in dvs.iter().enumerate() {
            self.emb.backward(&seq.windows[t], dv, &mut grads.emb);
        }
        (loss, grads)
    }
}

impl Parameters for MoeModel {
    fn visit(&self, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        self.emb.visit(f);
        self.moe.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        self.emb.visit_mut(f);
        self.moe.visit_mut(f);
    }
}

/// Residual composite: frozen base + mixture, both reading the base model's
/// embedding, combined per `Combine`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmoeModel {
    pub base: BaseModel,
    pub moe: MoeParams,
    pub frozen: bool,
    pub combine: Combine,
}

impl RmoeModel {
    /// Build the residual model around an already-trained base.
    pub fn new(base: BaseModel, n_experts: usize, hidden: usize, rng: &mut Rng) -> Self {
        let emb_dim = base.emb.dim();
        let n_targets = base.n_targets();
        RmoeModel {
            base,
            moe: MoeParams::new(n_experts, emb_dim, hidden, n_targets, rng),
            frozen: false,
            combine: Combine::ProbSum,
        }
    }

    /// Mark the base parameters fixed. Freezing twice is a no-op.
    pub fn freeze_base(&mut self) {
        self.frozen = true;
    }

    fn combine_step(&self, o_base: &[f64], o_moe: &[f64]) -> Vec<f64> {
        match self.combine {
            Combine::ProbSum => o_base
                .iter()
                .zip(o_moe)
                .map(|(&b, &m)| clamp_prob(b + m))
                .collect(),
            Combine::LogitSum => o_base
                .iter()
                .zip(o_moe)
                .map(|(&b, &m)| sigmoid(logit(clamp_prob(b)) + logit(clamp_prob(m))))
                .collect(),
        }
    }

    /// Final predictions ŷ′_{t+1} per step, already clamped into
    /// [EPS_CLAMP, 1−EPS_CLAMP].
    pub fn predict(&self, seq: &WindowedSequence) -> Vec<Vec<f64>> {
        let v_seq = self.base.embed_sequence(seq);
        let base_preds = self.base.forward(seq);
        let moe_out = moe_forward(&v_seq, &self.moe);
        base_preds
            .iter()
            .zip(&moe_out)
            .map(|(b, m)| self.combine_step(b, m))
            .collect()
    }

    pub fn seq_loss(&self, seq: &WindowedSequence, targets: &[Vec<u8>]) -> f64 {
        // predictions are already clamped; mean_bce's clamp is then a no-op
        mean_bce(&self.predict(seq), targets)
    }

    /// Phase-2 loss and gradients: only the mixture receives gradients; the
    /// base model and its embedding are constants here.
    pub fn seq_loss_grads(&self, seq: &WindowedSequence, targets: &[Vec<u8>]) -> (f64, MoeParams) {
        let v_seq = self.base.embed_sequence(seq);
        let base_preds = self.base.forward(seq);
        let tape = self.moe.forward(&v_seq);
        let n_steps = tape.outputs.len();
        assert_eq!(n_steps, targets.len());
        let scale = 1.0 / n_steps as f64;
        let mut loss = 0.0;
        let mut d_moe = vec![vec![0.0; self.moe.n_targets()]; n_steps];
        for t in 0..n_steps {
            let pred = self.combine_step(&base_preds[t], &tape.outputs[t]);
            let clamped: Vec<f64> = pred.iter().map(|&p| clamp_prob(p)).collect();
            let (l, dpred) = bce_loss(&clamped, &targets[t]);
            loss += l * scale;
            match self.combine {
                Combine::ProbSum => {
                    for j in 0..pred.len() {
                        let raw_sum = base_preds[t][j] + tape.outputs[t][j];
                        // hard clamp: no gradient outside the interior
                        if raw_sum > EPS_CLAMP && raw_sum < 1.0 - EPS_CLAMP {
                            d_moe[t][j] = scale * dpred[j];
                        }
                    }
                }
                Combine::LogitSum => {
                    for j in 0..pred.len() {
                        let m = tape.outputs[t][j];
                        let p = pred[j];
                        let interior = m > EPS_CLAMP
                            && m < 1.0 - EPS_CLAMP
                            && p > EPS_CLAMP
                            && p < 1.0 - EPS_CLAMP;
                        if interior {
                            // dpred/dm = σ′(s)·d logit(m)/dm = p(1−p)/(m(1−m))
                            d_moe[t][j] = scale * dpred[j] * p * (1.0 - p) / (m * (1.0 - m));
                        }
                    }
                }
            }
        }
        let (grads, _) = self.moe.backward(&tape, &d_moe);
        (loss, grads)
    }
}

impl Parameters for RmoeModel {
    fn visit(&self, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        self.base.visit(&mut |n, sh, s| f(&format!("base.{n}"), sh, s));
        self.moe.visit(&mut |n, sh, s| f(&format!("moe.{n}"), sh, s));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        self.base.visit_mut(&mut |n, sh, s| f(&format!("base.{n}"), sh, s));
        self.moe.visit_mut(&mut |n, sh, s| f(&format!("moe.{n}"), sh, s));
    }
}

/// Logistic regression over the OR-aggregate of the full history.
#[derive(Debug, Clone, PartialEq)]
pub struct LrModel {
    pub w: Matrix, // |E′| x |E|
    pub b: Vec<f64>,
}

impl LrModel {
    pub fn new(n_events: usize, n_targets: usize, rng: &mut Rng) -> Self {
        LrModel {
            w: crate::tensor::glorot_init(n_targets, n_events, rng),
            b: vec![0.0; n_targets],
        }
    }

    /// Predict from the first `t` windows (t ≥ 1): aggregate event
    /// occurrences with OR, project, sigmoid.
    pub fn forward(&self, seq: &WindowedSequence, t: usize) -> Vec<f64> {
        assert!(t >= 1 && t <= seq.windows.len(), "t = {t} out of range");
        let n = self.w.cols();
        let mut agg = vec![0.0; n];
        for w in &seq.windows[..t] {
            for (a, &bit) in agg.iter_mut().zip(w) {
                if bit == 1 {
                    *a = 1.0;
                }
            }
        }
        sigmoid_vec(&crate::tensor::affine(&self.w, &agg, &self.b))
    }
}

impl Parameters for LrModel {
    fn visit(&self, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        f("lr.w", (self.w.rows(), self.w.cols()), self.w.data());
        f("lr.b", (self.b.len(), 1), &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        let shape = (self.w.rows(), self.w.cols());
        f("lr.w", shape, self.w.data_mut());
        f("lr.b", (self.b.len(), 1), &mut self.b);
    }
}

/// Mean over steps of per-step BCE, with the standard clamp applied.
pub fn mean_bce(preds: &[Vec<f64>], targets: &[Vec<u8>]) -> f64 {
    assert_eq!(
        preds.len(),
        targets.len(),
        "{} predictions vs {} targets",
        preds.len(),
        targets.len()
    );
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        let clamped: Vec<f64> = p.iter().map(|&v| clamp_prob(v)).collect();
        total += bce_loss(&clamped, t).0;
    }
    total / preds.len() as f64
}

/// Clamped per-step BCE over raw probability outputs, returning the loss and
/// dL/dpred with the clamp mask and 1/T scaling already applied.
fn clamped_bce_grads(preds: &[Vec<f64>], targets: &[Vec<u8>]) -> (f64, Vec<Vec<f64>>) {
    assert_eq!(preds.len(), targets.len());
    let scale = 1.0 / preds.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(targets) {
        let clamped: Vec<f64> = p.iter().map(|&v| clamp_prob(v)).collect();
        let (l, dpred) = bce_loss(&clamped, t);
        loss += l * scale;
        grads.push(
            dpred
                .iter()
                .zip(p)
                .map(|(&g, &raw)| {
                    if raw <= EPS_CLAMP || raw >= 1.0 - EPS_CLAMP {
                        0.0
                    } else {
                        scale * g
                    }
                })
                .collect(),
        );
    }
    (loss, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, targets_of, EventVocabulary, SyntheticWorld};
    use crate::layers::param_hash;

    fn seq(windows: Vec<Vec<u8>>) -> WindowedSequence {
        WindowedSequence {
            id: "test".into(),
            windows,
        }
    }

    fn zero_base(n_events: usize, n_targets: usize, emb: usize, d: usize) -> BaseModel {
        let mut m = BaseModel::new(n_events, n_targets, emb, d, &mut Rng::new(1));
        let flat = vec![0.0; m.param_count()];
        m.load_flat(&flat);
        m
    }

    #[test]
    fn base_zero_params_predicts_half() {
        let m = zero_base(4, 4, 3, 5);
        let s = seq(vec![vec![1, 0, 0, 1], vec![0, 1, 0, 0], vec![0, 0, 1, 0]]);
        for pred in m.forward(&s) {
            assert!(pred.iter().all(|&p| p == 0.5));
        }
    }

    #[test]
    fn base_causality_prefix_property() {
        let mut rng = Rng::new(3);
        let m = BaseModel::new(5, 5, 4, 6, &mut rng);
        let world = SyntheticWorld::sample(1, 5, &mut rng);
        let (seqs, _) = generate_synthetic(&world, 1, (8, 8), 11);
        let full = &seqs[0];
        let full_preds = m.forward(full);
        for t in 2..full.windows.len() {
            let prefix = seq(full.windows[..t].to_vec());
            let prefix_preds = m.forward(&prefix);
            for (a, b) in prefix_preds.iter().zip(&full_preds) {
                assert_eq!(a, b, "prediction differs on prefix length {t}");
            }
        }
    }

    // Scalar reference for the whole base model, written with bare loops.
    fn base_forward_reference(m: &BaseModel, s: &WindowedSequence) -> Vec<Vec<f64>> {
        let d = m.gru.hidden_dim();
        let eps = m.emb.dim();
        let mut h = vec![0.0; d];
        let mut out = Vec::new();
        for w in &s.windows[..s.windows.len() - 1] {
            let mut v = vec![0.0; eps];
            for (j, &bit) in w.iter().enumerate() {
                if bit == 1 {
                    for (k, vv) in v.iter_mut().enumerate() {
                        *vv += m.emb.weight.get(j, k);
                    }
                }
            }
            let mut r = vec![0.0; d];
            let mut z = vec![0.0; d];
            for i in 0..d {
                let mut ar = m.gru.b_r[i];
                let mut az = m.gru.b_z[i];
                for (k, &vv) in v.iter().enumerate() {
                    ar += m.gru.w_r.get(i, k) * vv;
                    az += m.gru.w_z.get(i, k) * vv;
                }
                for (k, &hv) in h.iter().enumerate() {
                    ar += m.gru.u_r.get(i, k) * hv;
                    az += m.gru.u_z.get(i, k) * hv;
                }
                r[i] = 1.0 / (1.0 + (-ar).exp());
                z[i] = 1.0 / (1.0 + (-az).exp());
            }
            let mut h_new = vec![0.0; d];
            for i in 0..d {
                let mut ac = m.gru.b_c[i];
                for (k, &vv) in v.iter().enumerate() {
                    ac += m.gru.w_c.get(i, k) * vv;
                }
                for (k, &hv) in h.iter().enumerate() {
                    ac += m.gru.u_c.get(i, k) * (r[k] * hv);
                }
                let c = ac.tanh();
                h_new[i] = (1.0 - z[i]) * h[i] + z[i] * c;
            }
            h = h_new;
            let mut pred = vec![0.0; m.n_targets()];
            for (j, p) in pred.iter_mut().enumerate() {
                let mut s = m.head.b[j];
                for (k, &hv) in h.iter().enumerate() {
                    s += m.head.w.get(j, k) * hv;
                }
                *p = 1.0 / (1.0 + (-s).exp());
            }
            out.push(pred);
        }
        out
    }

    #[test]
    fn base_matches_scalar_reference() {
        let mut rng = Rng::new(8);
        let m = BaseModel::new(6, 4, 3, 4, &mut rng);
        let world = SyntheticWorld::sample(1, 6, &mut rng);
        let (seqs, _) = generate_synthetic(&world, 3, (4, 7), 2);
        for s in &seqs {
            let got = m.forward(s);
            let want = base_forward_reference(&m, s);
            for (a, b) in got.iter().zip(&want) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-12, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "need at least 2")]
    fn base_rejects_single_window() {
        let m = zero_base(3, 3, 2, 2);
        m.forward(&seq(vec![vec![1, 0, 0]]));
    }

    #[test]
    fn moe_single_expert_equals_expert_output() {
        let mut rng = Rng::new(5);
        let moe = MoeParams::new(1, 3, 4, 2, &mut rng);
        let v_seq: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let tape = moe.forward(&v_seq);
        for t in 0..5 {
            assert_eq!(tape.gates[t], vec![1.0]);
            assert_eq!(tape.outputs[t], tape.expert_outs[0][t]);
        }
    }

    #[test]
    fn moe_identical_experts_fixed_point() {
        let mut rng = Rng::new(6);
        let mut moe = MoeParams::new(2, 3, 4, 2, &mut rng);
        moe.experts[1] = moe.experts[0].clone();
        let v_seq: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let tape = moe.forward(&v_seq);
        for t in 0..4 {
            for (o, e) in tape.outputs[t].iter().zip(&tape.expert_outs[0][t]) {
                assert!((o - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn moe_matches_direct_summation() {
        let mut rng = Rng::new(7);
        let moe = MoeParams::new(3, 3, 4, 2, &mut rng);
        let v_seq: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let tape = moe.forward(&v_seq);
        for t in 0..6 {
            for j in 0..2 {
                let direct: f64 = (0..3)
                    .map(|i| tape.gates[t][i] * tape.expert_outs[i][t][j])
                    .sum();
                assert!((tape.outputs[t][j] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moe_output_in_expert_convex_hull() {
        let mut rng = Rng::new(13);
        let moe = MoeParams::new(4, 3, 3, 3, &mut rng);
        let v_seq: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect())
            .collect();
        let tape = moe.forward(&v_seq);
        for t in 0..5 {
            for j in 0..3 {
                let lo = (0..4).map(|i| tape.expert_outs[i][t][j]).fold(f64::MAX, f64::min);
                let hi = (0..4).map(|i| tape.expert_outs[i][t][j]).fold(f64::MIN, f64::max);
                let o = tape.outputs[t][j];
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                assert!(o > 0.0 && o < 1.0);
            }
        }
    }

    #[test]
    fn gating_zero_params_uniform_and_shift_invariant() {
        let mut rng = Rng::new(9);
        let mut gate = GatingModel::new(3, 4, 5, &mut rng);
        let zeros = GatingModel {
            gru: gate.gru.zeros_like(),
            head: gate.head.zeros_like(),
        };
        let mut h = vec![0.0; 4];
        let g = zeros.step(&mut h, &[0.2, -0.1, 0.4]);
        for v in &g {
            assert!((v - 0.2).abs() < 1e-15);
        }

        // adding a constant to every head bias leaves g unchanged
        let mut h1 = vec![0.0; 4];
        let v_t = vec![0.5, -0.3, 0.8];
        let g1 = gate.step(&mut h1, &v_t);
        for b in gate.head.b.iter_mut() {
            *b += 3.7;
        }
        let mut h2 = vec![0.0; 4];
        let g2 = gate.step(&mut h2, &v_t);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gating_matches_softmax_affine_composition() {
        let mut rng = Rng::new(10);
        let gate = GatingModel::new(3, 4, 4, &mut rng);
        let mut h = vec![0.0; 4];
        let v_seq: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let mut h_ref = vec![0.0; 4];
        for v in &v_seq {
            let g = gate.step(&mut h, v);
            let step = gru_forward_step(&gate.gru, &h_ref, v);
            h_ref = step.h.clone();
            let want = softmax_vec(&crate::tensor::affine(&gate.head.w, &h_ref, &gate.head.b));
            let sum: f64 = g.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (a, b) in g.iter().zip(&want) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn moe_permutation_invariance() {
        let mut rng = Rng::new(14);
        let moe = MoeParams::new(3, 3, 3, 2, &mut rng);
        let v_seq: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let out_a = moe_forward(&v_seq, &moe);

        // permute experts [2,0,1] together with gate head rows
        let perm = [2usize, 0, 1];
        let mut permuted = moe.clone();
        permuted.experts = perm.iter().map(|&i| moe.experts[i].clone()).collect();
        let mut w = Matrix::zeros(3, moe.gate.head.w.cols());
        let mut b = vec![0.0; 3];
        for (new_i, &old_i) in perm.iter().enumerate() {
            w.row_mut(new_i).copy_from_slice(moe.gate.head.w.row(old_i));
            b[new_i] = moe.gate.head.b[old_i];
        }
        permuted.gate.head = Head { w, b };
        let out_b = moe_forward(&v_seq, &permuted);
        for (a, b) in out_a.iter().zip(&out_b) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn combine_prob_sum_arithmetic_and_clamp() {
        let mut rng = Rng::new(15);
        let base = BaseModel::new(3, 2, 2, 2, &mut rng);
        let rmoe = RmoeModel::new(base, 2, 2, &mut rng);
        assert_eq!(rmoe.combine_step(&[0.3], &[0.2]), vec![0.5]);
        assert_eq!(rmoe.combine_step(&[0.9], &[0.8]), vec![1.0 - 1e-6]);
        assert_eq!(rmoe.combine_step(&[1e-9], &[1e-9]), vec![1e-6]);
    }

    #[test]
    fn rmoe_saturated_experts_reduce_to_base() {
        let mut rng = Rng::new(16);
        let base = BaseModel::new(4, 3, 3, 4, &mut rng);
        let mut rmoe = RmoeModel::new(base, 2, 3, &mut rng);
        for e in rmoe.moe.experts.iter_mut() {
            for b in e.head.b.iter_mut() {
                *b = -20.0; // σ ≈ 2e−9: the mixture contributes nothing
            }
            // zero the head weights so the bias dominates
            for v in e.head.w.data_mut() {
                *v = 0.0;
            }
        }
        let world = SyntheticWorld::sample(1, 4, &mut Rng::new(4));
        let (seqs, _) = generate_synthetic(&world, 2, (4, 6), 3);
        for s in &seqs {
            let combined = rmoe.predict(s);
            let base_only = rmoe.base.forward(s);
            for (c, b) in combined.iter().zip(&base_only) {
                for (x, y) in c.iter().zip(b) {
                    assert!((x - y).abs() < 1e-3, "{x} vs {y}");
                }
            }
        }
        rmoe.freeze_base();
        assert!(rmoe.frozen);
        rmoe.freeze_base(); // no-op
        assert!(rmoe.frozen);
    }

    #[test]
    fn rmoe_predictions_respect_clamp_range() {
        let mut rng = Rng::new(17);
        let base = BaseModel::new(5, 5, 3, 4, &mut rng);
        let rmoe = RmoeModel::new(base, 3, 3, &mut rng);
        let world = SyntheticWorld::sample(2, 5, &mut Rng::new(6));
        let (seqs, _) = generate_synthetic(&world, 5, (3, 8), 9);
        for s in &seqs {
            for pred in rmoe.predict(s) {
                for p in pred {
                    assert!((EPS_CLAMP..=1.0 - EPS_CLAMP).contains(&p));
                }
            }
        }
    }

    #[test]
    fn rmoe_logit_sum_stays_in_unit_interval() {
        let mut rng = Rng::new(23);
        let base = BaseModel::new(4, 4, 3, 3, &mut rng);
        let mut rmoe = RmoeModel::new(base, 2, 3, &mut rng);
        rmoe.combine = Combine::LogitSum;
        let out = rmoe.combine_step(&[0.9, 0.5, 0.1], &[0.9, 0.5, 0.2]);
        for p in &out {
            assert!(*p > 0.0 && *p < 1.0);
        }
        // logit-space: σ(logit(a)+logit(b)); for a=b=0.5 → 0.5
        assert!((rmoe.combine_step(&[0.5], &[0.5])[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lr_zero_params_and_or_semantics() {
        let mut rng = Rng::new(18);
        let mut lr = LrModel::new(4, 2, &mut rng);
        let zero = LrModel {
            w: Matrix::zeros(2, 4),
            b: vec![0.0; 2],
        };
        let s = seq(vec![vec![1, 0, 0, 0], vec![1, 0, 1, 0], vec![0, 0, 0, 0]]);
        assert_eq!(zero.forward(&s, 2), vec![0.5, 0.5]);

        // event 3 never occurs: output independent of column 3 of W
        let before = lr.forward(&s, 3);
        for r in 0..2 {
            lr.w.set(r, 3, lr.w.get(r, 3) + 100.0);
        }
        let after = lr.forward(&s, 3);
        assert_eq!(before, after);

        // repeated occurrences equal a single occurrence
        let once = seq(vec![vec![1, 0, 0, 0], vec![0, 0, 0, 0]]);
        let thrice = seq(vec![vec![1, 0, 0, 0], vec![1, 0, 0, 0], vec![1, 0, 0, 0]]);
        assert_eq!(lr.forward(&once, 2), lr.forward(&thrice, 3));
    }

    #[test]
    fn rmoe_param_hash_covers_base_and_moe() {
        let mut rng = Rng::new(19);
        let base = BaseModel::new(3, 3, 2, 2, &mut rng);
        let mut rmoe = RmoeModel::new(base, 2, 2, &mut rng);
        let h = param_hash(&rmoe);
        let old = rmoe.base.head.b[0];
        rmoe.base.head.b[0] = old + 1e-12;
        assert_ne!(h, param_hash(&rmoe));
        rmoe.base.head.b[0] = old;
        assert_eq!(h, param_hash(&rmoe));
    }

    #[test]
    fn loss_grads_shapes_align_with_params() {
        let mut rng = Rng::new(20);
        let vocab = EventVocabulary::synthetic(5);
        let world = SyntheticWorld::sample(1, 5, &mut Rng::new(2));
        let (seqs, _) = generate_synthetic(&world, 1, (4, 4), 7);
        let targets = targets_of(&seqs[0], &vocab);

        let base = BaseModel::new(5, 5, 3, 4, &mut rng);
        let (loss, grads) = base.seq_loss_grads(&seqs[0], &targets);
        assert!(loss.is_finite());
        assert_eq!(grads.param_count(), base.param_count());

        let rmoe = RmoeModel::new(base, 2, 3, &mut rng);
        let (loss2, mgrads) = rmoe.seq_loss_grads(&seqs[0], &targets);
        assert!(loss2.is_finite());
        assert_eq!(mgrads.param_count(), rmoe.moe.param_count());

        let moe = MoeModel::new(5, 5, 3, 2, 3, &mut rng);
        let (loss3, grads3) = moe.seq_loss_grads(&seqs[0], &targets);
        assert!(loss3.is_finite());
        assert_eq!(grads3.param_count(), moe.param_count());
    }
}
