//! Feature-importance controllers and the selection step `H = [s_n · e_n]`.
//!
//! The multi-view controller runs `K` linear+softmax sub-networks over the
//! flattened embeddings, gates them with `r = σ(C·W_g + b_g)` where `C` is the
//! concatenation of sub-network outputs, aggregates `I = Σ_k r_k · SN_k(E)`,
//! and turns each `I_n` into a score independently of the other fields:
//! `s_n = ½(1 + tanh(τ(t)·(I_n − l)))` while training, `1[I_n ≥ l]` at
//! evaluation. Batched forwards work on `B×(N·d)` embedding rows.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{sigmoid, Matrix, ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

/// Sharpness of the soft step: `τ(t) = max(5, 1 + 0.001·t)`, uncapped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TauSchedule;

impl TauSchedule {
    pub fn tau(&self, t: u64) -> f64 {
        tau(t)
    }
}

pub fn tau(t: u64) -> f64 {
    f64::max(5.0, 1.0 + 0.001 * t as f64)
}

/// Soft scores `½(1 + tanh(τ(t)·(I_n − l)))`.
pub fn score(importance: &[f64], t: u64, threshold: f64, schedule: &TauSchedule) -> Vec<f64> {
    let tau = schedule.tau(t);
    importance
        .iter()
        .map(|&i| 0.5 * (1.0 + libm::tanh(tau * (i - threshold))))
        .collect()
}

/// `s_n = 1` iff `I_n ≥ l`; a tie selects, like the soft score rounding 0.5 up.
pub fn hard_select(importance: &[f64], threshold: f64) -> Vec<f64> {
    importance
        .iter()
        .map(|&i| if i >= threshold { 1.0 } else { 0.0 })
        .collect()
}

/// `I = Σ_k r_k · row_k`, for a `K×N` matrix of sub-network outputs.
pub fn aggregate(gates: &[f64], per_subnet: &Matrix) -> Result<Vec<f64>> {
    if gates.len() != per_subnet.rows() {
        return Err(Error::Shape {
            op: "aggregate",
            left: (1, gates.len()),
            right: per_subnet.shape(),
        });
    }
    let mut out = alloc::vec![0.0; per_subnet.cols()];
    for (k, &r) in gates.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(per_subnet.row(k)) {
            *o += r * v;
        }
    }
    Ok(out)
}

/// Row `n` of `H` is `s_n · e_n`.
pub fn apply_selection(scores: &[f64], embeddings: &Matrix) -> Result<Matrix> {
    if scores.len() != embeddings.rows() {
        return Err(Error::Shape {
            op: "apply_selection",
            left: (1, scores.len()),
            right: embeddings.shape(),
        });
    }
    let mut h = embeddings.clone();
    for (n, &s) in scores.iter().enumerate() {
        h.row_mut(n).iter_mut().for_each(|v| *v *= s);
    }
    Ok(h)
}

/// Flattens an `N×d` matrix into one `1×(N·d)` row.
fn flatten(e: &Matrix) -> Matrix {
    Matrix::row_vector(e.as_slice())
}

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Matrix::new(rows, cols, data).expect("sized buffer")
}

/// Linear layer over the flattened embeddings followed by a row softmax.
/// The weight is stored `(N·d)×N` so batches multiply from the left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubNetwork {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl SubNetwork {
    pub fn forward(&self, tape: &mut Tape<'_>, e: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let z = tape.matmul(e, w)?;
        let z = tape.add_bias(z, b)?;
        Ok(tape.softmax_rows(z))
    }
}

/// `softmax(flatten(E)·W + b)` for one instance.
pub fn subnet_forward(store: &ParamStore, sn: &SubNetwork, e: &Matrix) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let x = tape.constant(flatten(e));
    let out = sn.forward(&mut tape, x)?;
    Ok(tape.value(out).as_slice().to_vec())
}

/// `r = σ(C·W_g + b_g)`, with `W_g` stored `(K·N)×K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatingModule {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl GatingModule {
    pub fn forward(&self, tape: &mut Tape<'_>, concat: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let z = tape.matmul(concat, w)?;
        let z = tape.add_bias(z, b)?;
        Ok(tape.sigmoid(z))
    }
}

/// Gate values for one concatenated vector `C` of length `K·N`.
pub fn gate(store: &ParamStore, gm: &GatingModule, concat: &[f64]) -> Result<Vec<f64>> {
    let w = store.value(gm.weight);
    let b = store.value(gm.bias);
    let z = Matrix::row_vector(concat).matmul(w)?;
    Ok(z.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(z, b)| sigmoid(z + b))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    Learned,
    /// `r_k = 1/K`, not trained.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// Annealed tanh step while training, hard step at evaluation.
    Annealed,
    /// `s = I` in both phases.
    Raw,
}

/// Tape handles of one batched controller pass.
#[derive(Debug, Clone)]
pub struct SelectionVars {
    /// `B×N` output of each sub-network.
    pub per_subnet: Vec<Var>,
    /// `B×K` gate values.
    pub gates: Var,
    /// `B×N` aggregated importance.
    pub importance: Var,
    /// `B×N` scores applied to the embeddings.
    pub scores: Var,
}

/// Values of one single-instance controller pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutput {
    pub importance: Vec<f64>,
    pub gates: Vec<f64>,
    pub scores: Vec<f64>,
    /// `K×N`, row `k` is `SN_k(E)`.
    pub per_subnet: Matrix,
}

impl SelectionOutput {
    fn from_tape(tape: &Tape<'_>, vars: &SelectionVars, row: usize) -> Self {
        let fields = tape.value(vars.importance).cols();
        let mut per_subnet = Matrix::zeros(vars.per_subnet.len(), fields);
        for (k, &v) in vars.per_subnet.iter().enumerate() {
            per_subnet.row_mut(k).copy_from_slice(tape.value(v).row(row));
        }
        Self {
            importance: tape.value(vars.importance).row(row).to_vec(),
            gates: tape.value(vars.gates).row(row).to_vec(),
            scores: tape.value(vars.scores).row(row).to_vec(),
            per_subnet,
        }
    }

    /// Split a batched pass into per-instance outputs.
    pub fn rows(tape: &Tape<'_>, vars: &SelectionVars) -> Vec<Self> {
        (0..tape.value(vars.importance).rows())
            .map(|r| Self::from_tape(tape, vars, r))
            .collect()
    }
}

/// Multi-view controller and its two ablations.
#[derive(Debug, Clone, PartialEq)]
pub struct MvfsController {
    pub subnets: Vec<SubNetwork>,
    /// `None` for uniform gating.
    pub gate: Option<GatingModule>,
    pub threshold: f64,
    pub schedule: TauSchedule,
    pub scoring: Scoring,
    pub fields: usize,
}

fn check_controller_args(k: usize, threshold: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidInput(
            "the controller needs at least one sub-network".into(),
        ));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidInput(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(())
}

impl MvfsController {
    /// Registers parameters `ctrl.sn{k}.{w,b}` and `ctrl.gate.{w,b}`.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        fields: usize,
        dim: usize,
        k: usize,
        threshold: f64,
        gating: Gating,
        scoring: Scoring,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_controller_args(k, threshold)?;
        let input = fields * dim;
        let bound = 1.0 / libm::sqrt(input as f64);
        let mut subnets = Vec::with_capacity(k);
        for i in 0..k {
            let w = uniform_matrix(input, fields, bound, rng);
            subnets.push(SubNetwork {
                weight: store.add(format!("ctrl.sn{i}.w"), ParamGroup::Controller, w)?,
                bias: store.add(
                    format!("ctrl.sn{i}.b"),
                    ParamGroup::Controller,
                    Matrix::zeros(1, fields),
                )?,
            });
        }
        let gate = match gating {
            Gating::Uniform => None,
            Gating::Learned => {
                let bound = 1.0 / libm::sqrt((k * fields) as f64);
                let w = uniform_matrix(k * fields, k, bound, rng);
                Some(GatingModule {
                    weight: store.add("ctrl.gate.w", ParamGroup::Controller, w)?,
                    bias: store.add("ctrl.gate.b", ParamGroup::Controller, Matrix::zeros(1, k))?,
                })
            }
        };
        Ok(Self {
            subnets,
            gate,
            threshold,
            schedule: TauSchedule,
            scoring,
            fields,
        })
    }

    /// Binds to controller parameters already in `store`.
    pub fn attach(
        store: &ParamStore,
        fields: usize,
        dim: usize,
        k: usize,
        threshold: f64,
        gating: Gating,
        scoring: Scoring,
    ) -> Result<Self> {
        check_controller_args(k, threshold)?;
        let expect = |name: &str, shape: (usize, usize)| -> Result<ParamId> {
            let id = store.require(name)?;
            if store.value(id).shape() != shape {
                return Err(Error::Schema(format!(
                    "parameter `{name}` is {:?}, expected {shape:?}",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        };
        let subnets = (0..k)
            .map(|i| {
                Ok(SubNetwork {
                    weight: expect(&format!("ctrl.sn{i}.w"), (fields * dim, fields))?,
                    bias: expect(&format!("ctrl.sn{i}.b"), (1, fields))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gate = match gating {
            Gating::Uniform => None,
            Gating::Learned => Some(GatingModule {
                weight: expect("ctrl.gate.w", (k * fields, k))?,
                bias: expect("ctrl.gate.b", (1, k))?,
            }),
        };
        Ok(Self {
            subnets,
            gate,
            threshold,
            schedule: TauSchedule,
            scoring,
            fields,
        })
    }

    pub fn k(&self) -> usize {
        self.subnets.len()
    }

    /// Batched pass over `B×(N·d)` embeddings at training step `t`.
    pub fn forward(&self, tape: &mut Tape<'_>, e: Var, t: u64, phase: Phase) -> Result<SelectionVars> {
        let per_subnet = self
            .subnets
            .iter()
            .map(|sn| sn.forward(tape, e))
            .collect::<Result<Vec<_>>>()?;
        let batch = tape.value(e).rows();
        let k = self.subnets.len();
        let gates = match &self.gate {
            Some(gm) => {
                let concat = tape.concat_cols(&per_subnet)?;
                gm.forward(tape, concat)?
            }
            None => tape.constant(Matrix::filled(batch, k, 1.0 / k as f64)),
        };
        let mut importance = None;
        for (i, &out) in per_subnet.iter().enumerate() {
            let r = tape.slice_cols(gates, i, 1)?;
            let term = tape.block_scale(r, out)?;
            importance = Some(match importance {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let importance = importance.expect("k >= 1");
        let scores = match (self.scoring, phase) {
            (Scoring::Raw, _) => importance,
            (Scoring::Annealed, Phase::Train) => {
                let tau = self.schedule.tau(t);
                let z = tape.affine(importance, tau, -tau * self.threshold);
                let th = tape.tanh(z);
                tape.affine(th, 0.5, 0.5)
            }
            (Scoring::Annealed, Phase::Eval) => {
                let hard = tape
                    .value(importance)
                    .map(|i| if i >= self.threshold { 1.0 } else { 0.0 });
                tape.constant(hard)
            }
        };
        Ok(SelectionVars {
            per_subnet,
            gates,
            importance,
            scores,
        })
    }
}

/// Single-instance controller pass on an `N×d` embedding matrix.
pub fn mvfs_forward(
    store: &ParamStore,
    ctrl: &MvfsController,
    e: &Matrix,
    t: u64,
    phase: Phase,
) -> Result<SelectionOutput> {
    let mut tape = Tape::new(store);
    let x = tape.constant(flatten(e));
    let vars = ctrl.forward(&mut tape, x, t, phase)?;
    Ok(SelectionOutput::from_tape(&tape, &vars, 0))
}

/// Hidden width of the AdaFS-style controller.
pub const ADAFS_HIDDEN: usize = 16;

/// Single MLP `[N·d → 16 → N]` whose softmax over fields is used as soft
/// scores. The scores always sum to 1, so they depend on every field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaFsController {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl AdaFsController {
    pub fn init(store: &mut ParamStore, fields: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let input = fields * dim;
        let b1 = 1.0 / libm::sqrt(input as f64);
        let b2 = 1.0 / libm::sqrt(ADAFS_HIDDEN as f64);
        Ok(Self {
            w1: store.add(
                "ctrl.ada.w1",
                ParamGroup::Controller,
                uniform_matrix(input, ADAFS_HIDDEN, b1, rng),
            )?,
            b1: store.add("ctrl.ada.b1", ParamGroup::Controller, Matrix::zeros(1, ADAFS_HIDDEN))?,
            w2: store.add(
                "ctrl.ada.w2",
                ParamGroup::Controller,
                uniform_matrix(ADAFS_HIDDEN, fields, b2, rng),
            )?,
            b2: store.add("ctrl.ada.b2", ParamGroup::Controller, Matrix::zeros(1, fields))?,
        })
    }

    pub fn attach(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            w1: store.require("ctrl.ada.w1")?,
            b1: store.require("ctrl.ada.b1")?,
            w2: store.require("ctrl.ada.w2")?,
            b2: store.require("ctrl.ada.b2")?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, e: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            tape.param(self.w1),
            tape.param(self.b1),
            tape.param(self.w2),
            tape.param(self.b2),
        );
        let h = tape.matmul(e, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h);
        let z = tape.matmul(h, w2)?;
        let z = tape.add_bias(z, b2)?;
        Ok(tape.softmax_rows(z))
    }
}

/// AdaFS-style scores of one instance.
pub fn adafs_baseline_forward(store: &ParamStore, ctrl: &AdaFsController, e: &Matrix) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let x = tape.constant(flatten(e));
    let s = ctrl.forward(&mut tape, x)?;
    Ok(tape.value(s).as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_e(rng: &mut impl Rng, n: usize, d: usize) -> Matrix {
        uniform_matrix(n, d, 1.0, rng)
    }

    fn controller(
        n: usize,
        d: usize,
        k: usize,
        gating: Gating,
        scoring: Scoring,
        seed: u64,
    ) -> (ParamStore, MvfsController) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = MvfsController::init(&mut store, n, d, k, 0.2, gating, scoring, &mut rng).unwrap();
        (store, c)
    }

    #[test]
    fn tau_schedule_values() {
        assert_eq!(tau(0), 5.0);
        assert_eq!(tau(4000), 5.0);
        assert_eq!(tau(10_000), 11.0);
        assert_eq!(tau(1_000_000), 1001.0);
        let mut prev = tau(0);
        for t in (0..20_000).step_by(37) {
            let v = tau(t);
            assert!(v >= 5.0 && v >= prev);
            prev = v;
        }
    }

    #[test]
    fn score_examples() {
        let s = score(&[0.3], 0, 0.3, &TauSchedule);
        assert_eq!(s, vec![0.5]);
        let s = score(&[0.4], 0, 0.2, &TauSchedule)[0];
        let oracle = 0.5 * (1.0 + 1.0f64.tanh());
        assert!((s - oracle).abs() < 1e-15);
        assert!((s - 0.88080).abs() < 1e-5);
        let s = score(&[0.21], 1_000_000, 0.2, &TauSchedule)[0];
        assert!(s > 0.9999, "{s}");
    }

    #[test]
    fn hard_select_boundaries() {
        let l = 0.25;
        assert_eq!(hard_select(&[l, l - 1e-9, l + 1e-9], l), vec![1.0, 0.0, 1.0]);
        assert_eq!(hard_select(&[0.9, 2.0, 5.0], l), vec![1.0; 3]);
    }

    #[test]
    fn soft_score_converges_to_hard_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let importance: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let l = 0.3;
            if importance.iter().any(|&i| (i - l).abs() < 1e-3) {
                continue;
            }
            let soft = score(&importance, 100_000_000, l, &TauSchedule);
            let rounded: Vec<f64> = soft.iter().map(|&s| libm::round(s)).collect();
            assert_eq!(rounded, hard_select(&importance, l));
        }
    }

    #[test]
    fn annealing_is_monotone() {
        let l = 0.2;
        let importance = [0.05, 0.19, 0.21, 0.6];
        let hard = hard_select(&importance, l);
        let mut prev: Option<Vec<f64>> = None;
        for t in (0..50_000).step_by(250) {
            let gap: Vec<f64> = score(&importance, t, l, &TauSchedule)
                .iter()
                .zip(&hard)
                .map(|(s, h)| (s - h).abs())
                .collect();
            if let Some(p) = &prev {
                for (a, b) in gap.iter().zip(p) {
                    assert!(a <= b);
                }
            }
            prev = Some(gap);
        }
    }

    #[test]
    fn aggregate_examples() {
        let rows = Matrix::from_rows(&[&[0.6, 0.4], &[0.2, 0.8]]).unwrap();
        let i = aggregate(&[0.5, 0.25], &rows).unwrap();
        assert!((i[0] - 0.35).abs() < 1e-15 && (i[1] - 0.40).abs() < 1e-15);

        let single = Matrix::from_rows(&[&[0.1, 0.9]]).unwrap();
        assert_eq!(aggregate(&[1.0], &single).unwrap(), vec![0.1, 0.9]);

        let same = Matrix::from_rows(&[&[0.3, 0.7], &[0.3, 0.7], &[0.3, 0.7]]).unwrap();
        let i = aggregate(&[0.2, 0.5, 0.9], &same).unwrap();
        assert!((i[0] - 1.6 * 0.3).abs() < 1e-15 && (i[1] - 1.6 * 0.7).abs() < 1e-15);
        assert!(aggregate(&[1.0, 1.0], &single).is_err());
    }

    #[test]
    fn apply_selection_examples() {
        let e = Matrix::from_rows(&[&[1.0, 2.0], &[-3.0, 4.0]]).unwrap();
        assert_eq!(apply_selection(&[1.0, 1.0], &e).unwrap(), e);
        assert_eq!(apply_selection(&[0.0, 0.0], &e).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn grad_of_selection_sum_is_embedding_row_sum() {
        let mut store = ParamStore::new();
        let s = store
            .add("s", ParamGroup::Controller, Matrix::row_vector(&[0.3, 0.9]))
            .unwrap();
        let e = Matrix::from_rows(&[&[1.0, 2.0, -0.5, 0.1]]).unwrap();
        let f = |t: &mut Tape<'_>| {
            let sv = t.param(s);
            let ev = t.constant(e.clone());
            let h = t.block_scale(sv, ev)?;
            t.total(h)
        };
        let grads = {
            let mut tape = Tape::new(&store);
            let y = f(&mut tape).unwrap();
            tape.backward(y).unwrap()
        };
        let mut st = store.clone();
        st.accumulate(&grads);
        // Finite differences of sum(H) in s_n.
        for (n, want) in [(0usize, 3.0), (1, -0.4)] {
            let h = 1e-6;
            let eval = |delta: f64| {
                let mut sc = vec![0.3, 0.9];
                sc[n] += delta;
                let em = Matrix::from_rows(&[&[1.0, 2.0], &[-0.5, 0.1]]).unwrap();
                apply_selection(&sc, &em).unwrap().sum()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let g = st.get(s).grad().as_slice()[n];
            assert!((g - fd).abs() < 1e-8);
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_subnet_gives_uniform_output() {
        let (mut store, c) = controller(4, 2, 1, Gating::Learned, Scoring::Annealed, 1);
        store.value_mut(c.subnets[0].weight).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = subnet_forward(&store, &c.subnets[0], &random_e(&mut rng, 4, 2)).unwrap();
        for v in out {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_set_subnet_matches_softmax_oracle() {
        // N = 3, d = 1: W = I, E = [1, 2, 3].
        let (mut store, c) = controller(3, 1, 1, Gating::Learned, Scoring::Annealed, 1);
        *store.value_mut(c.subnets[0].weight) = Matrix::identity(3);
        let e = Matrix::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let out = subnet_forward(&store, &c.subnets[0], &e).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, (&o, want)) in out.iter().zip([0.09003, 0.24473, 0.66524]).enumerate() {
            assert!((o - ((i + 1) as f64).exp() / z).abs() < 1e-15);
            assert!((o - want).abs() < 1e-5);
        }
    }

    #[test]
    fn gate_examples() {
        let (mut store, c) = controller(2, 1, 2, Gating::Learned, Scoring::Annealed, 3);
        let gm = c.gate.unwrap();
        store.value_mut(gm.weight).fill(0.0);
        assert_eq!(gate(&store, &gm, &[0.3, 0.7, 0.5, 0.5]).unwrap(), vec![0.5, 0.5]);

        store.value_mut(gm.bias).as_mut_slice()[1] = 10.0;
        assert!(gate(&store, &gm, &[0.3, 0.7, 0.5, 0.5]).unwrap()[1] > 0.9999);

        // Hand-set K = 2, N = 2.
        let w = Matrix::from_rows(&[&[0.5, -1.0], &[1.5, 0.25], &[-0.75, 2.0], &[0.1, 0.0]]).unwrap();
        *store.value_mut(gm.weight) = w;
        *store.value_mut(gm.bias) = Matrix::row_vector(&[0.2, -0.3]);
        let cvec = [0.6, 0.4, 0.1, 0.9];
        let got = gate(&store, &gm, &cvec).unwrap();
        let z0: f64 = 0.6 * 0.5 + 0.4 * 1.5 + 0.1 * -0.75 + 0.9 * 0.1 + 0.2;
        let z1: f64 = -0.6 + 0.4 * 0.25 + 0.1 * 2.0 + 0.9 * 0.0 - 0.3;
        assert!((got[0] - 1.0 / (1.0 + (-z0).exp())).abs() < 1e-12);
        assert!((got[1] - 1.0 / (1.0 + (-z1).exp())).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_transcript() {
        // N = 2, d = 1, K = 2, t = 0, l = 0.2.
        let (mut store, c) = controller(2, 1, 2, Gating::Learned, Scoring::Annealed, 9);
        *store.value_mut(c.subnets[0].weight) = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        *store.value_mut(c.subnets[1].weight) = Matrix::from_rows(&[&[0.0, 0.0], &[0.0, 2.0]]).unwrap();
        let gm = c.gate.unwrap();
        *store.value_mut(gm.weight) =
            Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0], &[-1.0, 1.0]]).unwrap();
        let e = Matrix::new(2, 1, vec![1.0, 0.5]).unwrap();

        // SN_1: logits [1, 0]; SN_2: logits [0, 1].
        let a = 1.0 / (1.0 + (-1.0f64).exp());
        let sn1 = [a, 1.0 - a];
        let sn2 = [1.0 - a, a];
        // Gate: z = [sn1_0 - sn2_1, sn1_1 + sn2_1].
        let r = [
            1.0 / (1.0 + (-(sn1[0] - sn2[1])).exp()),
            1.0 / (1.0 + (-(sn1[1] + sn2[1])).exp()),
        ];
        let imp = [r[0] * sn1[0] + r[1] * sn2[0], r[0] * sn1[1] + r[1] * sn2[1]];
        let s: Vec<f64> = imp.iter().map(|i| 0.5 * (1.0 + (5.0 * (i - 0.2)).tanh())).collect();

        let out = mvfs_forward(&store, &c, &e, 0, Phase::Train).unwrap();
        for (x, y) in out.per_subnet.row(0).iter().zip(&sn1) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in out.per_subnet.row(1).iter().zip(&sn2) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in out.gates.iter().zip(&r) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in out.importance.iter().zip(&imp) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in out.scores.iter().zip(&s) {
            assert!((x - y).abs() < 1e-14);
        }
        let eval = mvfs_forward(&store, &c, &e, 0, Phase::Eval).unwrap();
        assert_eq!(eval.scores, hard_select(&imp, 0.2));
    }

    #[test]
    fn saturated_single_view_reduces_to_its_subnet() {
        let (mut store, c) = controller(5, 2, 1, Gating::Learned, Scoring::Annealed, 4);
        store.value_mut(c.gate.unwrap().bias).fill(10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = random_e(&mut rng, 5, 2);
        let out = mvfs_forward(&store, &c, &e, 0, Phase::Train).unwrap();
        let single = subnet_forward(&store, &c.subnets[0], &e).unwrap();
        assert!(out.gates[0] > 0.9999);
        for (a, b) in out.importance.iter().zip(&single) {
            assert!((a - b).abs() < 1e-4);
        }
        // Rescaling by r_1 recovers the single network to within 1e-6 once
        // the gate is fully saturated.
        store.value_mut(c.gate.unwrap().bias).fill(40.0);
        let out = mvfs_forward(&store, &c, &e, 0, Phase::Train).unwrap();
        for (a, b) in out.importance.iter().zip(&single) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn no_ism_scores_are_raw_importance() {
        let (store, c) = controller(4, 3, 3, Gating::Learned, Scoring::Raw, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = random_e(&mut rng, 4, 3);
        for phase in [Phase::Train, Phase::Eval] {
            let out = mvfs_forward(&store, &c, &e, 0, phase).unwrap();
            assert_eq!(out.scores, out.importance);
            let agg = aggregate(&out.gates, &out.per_subnet).unwrap();
            for (a, b) in out.importance.iter().zip(&agg) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        // With saturated gates Σr > 1 and scores may exceed 1.
        let mut store = store;
        store.value_mut(c.gate.unwrap().bias).fill(20.0);
        store.value_mut(c.subnets[0].bias).as_mut_slice()[0] = 30.0;
        store.value_mut(c.subnets[1].bias).as_mut_slice()[0] = 30.0;
        let out = mvfs_forward(&store, &c, &e, 0, Phase::Eval).unwrap();
        assert!(out.scores[0] > 1.0);
    }

    #[test]
    fn uniform_gate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let e = random_e(&mut rng, 6, 2);
        let (store, one) = controller(6, 2, 1, Gating::Uniform, Scoring::Annealed, 2);
        let out = mvfs_forward(&store, &one, &e, 0, Phase::Train).unwrap();
        assert_eq!(out.gates, vec![1.0]);
        assert_eq!(out.importance, subnet_forward(&store, &one.subnets[0], &e).unwrap());

        let (mut store, four) = controller(6, 2, 4, Gating::Uniform, Scoring::Annealed, 2);
        let sum: f64 = mvfs_forward(&store, &four, &e, 0, Phase::Train)
            .unwrap()
            .importance
            .iter()
            .sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // Identical sub-networks: the convex mix is any one of them.
        let w0 = store.value(four.subnets[0].weight).clone();
        for sn in &four.subnets[1..] {
            *store.value_mut(sn.weight) = w0.clone();
        }
        let out = mvfs_forward(&store, &four, &e, 0, Phase::Train).unwrap();
        let single = subnet_forward(&store, &four.subnets[0], &e).unwrap();
        for (a, b) in out.importance.iter().zip(&single) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adafs_examples() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctrl = AdaFsController::init(&mut store, 5, 2, &mut rng).unwrap();
        let e = random_e(&mut rng, 5, 2);
        let s = adafs_baseline_forward(&store, &ctrl, &e).unwrap();
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        store.value_mut(ctrl.w2).fill(0.0);
        let s = adafs_baseline_forward(&store, &ctrl, &e).unwrap();
        assert!(s.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn adafs_scale_shrinks_as_one_over_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for n in [2usize, 4, 8, 16, 32] {
            let mut store = ParamStore::new();
            let ctrl = AdaFsController::init(&mut store, n, 2, &mut rng).unwrap();
            store.value_mut(ctrl.w2).fill(0.0);
            let s = adafs_baseline_forward(&store, &ctrl, &random_e(&mut rng, n, 2)).unwrap();
            let mean = s.iter().sum::<f64>() / n as f64;
            assert!((mean - 1.0 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn field_independence_of_scores() {
        let importance = [0.1, 0.25, 0.4, 0.05];
        let base = score(&importance, 123, 0.2, &TauSchedule);
        let mut bumped = importance;
        bumped[2] += 0.3;
        let after = score(&bumped, 123, 0.2, &TauSchedule);
        for n in [0, 1, 3] {
            assert_eq!(base[n].to_bits(), after[n].to_bits());
        }
        // A softmax reweighting couples the fields.
        let soft = |x: &[f64]| {
            let z: f64 = x.iter().map(|v| v.exp()).sum();
            x.iter().map(|v| v.exp() / z).collect::<Vec<_>>()
        };
        assert_ne!(soft(&importance)[0], soft(&bumped)[0]);
    }

    proptest! {
        #[test]
        fn controller_identities(seed in 0u64..1000, k in 1usize..5, n in 1usize..7, d in 1usize..4) {
            let (store, c) = controller(n, d, k, Gating::Learned, Scoring::Annealed, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let e = random_e(&mut rng, n, d);
            let out = mvfs_forward(&store, &c, &e, seed * 7, Phase::Train).unwrap();
            for k in 0..out.per_subnet.rows() {
                let row = out.per_subnet.row(k);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
            let si: f64 = out.importance.iter().sum();
            let sr: f64 = out.gates.iter().sum();
            prop_assert!((si - sr).abs() <= 1e-9);
            prop_assert!(out.gates.iter().all(|&r| r > 0.0 && r < 1.0));
            prop_assert!(out.scores.iter().all(|&s| s > 0.0 && s < 1.0));
            let hard = mvfs_forward(&store, &c, &e, 0, Phase::Eval).unwrap();
            prop_assert!(hard.scores.iter().all(|&s| s == 0.0 || s == 1.0));
        }
    }
}
