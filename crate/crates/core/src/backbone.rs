//! Prediction networks fed with the selection-weighted embeddings `H`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FieldSchema;
use crate::embedding::EmbeddingTable;
use crate::numeric::{sigmoid, Matrix, ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::{Error, Result};

/// Hidden layer widths of the deep stack.
pub const HIDDEN: [usize; 2] = [16, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Mlp,
    #[serde(rename = "deepfm")]
    DeepFm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
        Ok(Self {
            weight: store.add(format!("{name}.w"), ParamGroup::Rs, Matrix::new(fan_in, fan_out, data)?)?,
            bias: store.add(format!("{name}.b"), ParamGroup::Rs, Matrix::zeros(1, fan_out))?,
        })
    }

    fn attach(store: &ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.require(&format!("{name}.w"))?;
        let bias = store.require(&format!("{name}.b"))?;
        if store.value(weight).shape() != (fan_in, fan_out) || store.value(bias).shape() != (1, fan_out) {
            return Err(Error::Schema(format!(
                "layer `{name}` does not match {fan_in}x{fan_out}"
            )));
        }
        Ok(Self { weight, bias })
    }

    fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let z = tape.matmul(x, w)?;
        tape.add_bias(z, b)
    }
}

/// ReLU layers of [`HIDDEN`] widths and a one-unit linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBackbone {
    pub hidden: Vec<Dense>,
    pub output: Dense,
}

impl MlpBackbone {
    fn widths(input: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(HIDDEN.len() + 1);
        let mut prev = input;
        for &h in &HIDDEN {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, 1));
        dims
    }

    pub fn init(store: &mut ParamStore, input: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Self::widths(input)
            .into_iter()
            .enumerate()
            .map(|(i, (a, b))| Dense::init(store, &format!("rs.mlp.{i}"), a, b, rng))
            .collect::<Result<Vec<_>>>()?;
        let output = layers.pop().expect("output layer");
        Ok(Self { hidden: layers, output })
    }

    pub fn attach(store: &ParamStore, input: usize) -> Result<Self> {
        let mut layers = Self::widths(input)
            .into_iter()
            .enumerate()
            .map(|(i, (a, b))| Dense::attach(store, &format!("rs.mlp.{i}"), a, b))
            .collect::<Result<Vec<_>>>()?;
        let output = layers.pop().expect("output layer");
        Ok(Self { hidden: layers, output })
    }

    /// `B×1` logits for `B×(N·d)` inputs.
    pub fn logit(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let mut x = h;
        for layer in &self.hidden {
            let z = layer.forward(tape, x)?;
            x = tape.relu(z);
        }
        self.output.forward(tape, x)
    }
}

/// First-order scalar table, factorization-machine pairs over the rows of
/// `H`, and the same deep stack as [`MlpBackbone`], summed into one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepFmBackbone {
    pub first_order: EmbeddingTable,
    pub deep: MlpBackbone,
    pub fields: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    Mlp(MlpBackbone),
    DeepFm(DeepFmBackbone),
}

impl Backbone {
    pub fn init(
        store: &mut ParamStore,
        kind: BackboneKind,
        schema: &FieldSchema,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let input = schema.field_count() * dim;
        Ok(match kind {
            BackboneKind::Mlp => Backbone::Mlp(MlpBackbone::init(store, input, rng)?),
            BackboneKind::DeepFm => {
                let first_order = EmbeddingTable::init(store, schema, 1, "rs.fo", ParamGroup::Rs, rng)?;
                for &id in first_order.tables() {
                    store.value_mut(id).fill(0.0);
                }
                let deep = MlpBackbone::init(store, input, rng)?;
                Backbone::DeepFm(DeepFmBackbone {
                    first_order,
                    deep,
                    fields: schema.field_count(),
                })
            }
        })
    }

    pub fn attach(store: &ParamStore, kind: BackboneKind, schema: &FieldSchema, dim: usize) -> Result<Self> {
        let input = schema.field_count() * dim;
        Ok(match kind {
            BackboneKind::Mlp => Backbone::Mlp(MlpBackbone::attach(store, input)?),
            BackboneKind::DeepFm => Backbone::DeepFm(DeepFmBackbone {
                first_order: EmbeddingTable::attach(store, schema, 1, "rs.fo")?,
                deep: MlpBackbone::attach(store, input)?,
                fields: schema.field_count(),
            }),
        })
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Backbone::Mlp(_) => BackboneKind::Mlp,
            Backbone::DeepFm(_) => BackboneKind::DeepFm,
        }
    }

    /// `B×1` logits. `h` is `B×(N·d)`; `scores` (`B×N`, absent means all
    /// ones) scales the first-order terms; `indices` is the flat `B×N` block
    /// of value indices.
    pub fn logit(&self, tape: &mut Tape<'_>, h: Var, scores: Option<Var>, indices: &[usize]) -> Result<Var> {
        match self {
            Backbone::Mlp(mlp) => mlp.logit(tape, h),
            Backbone::DeepFm(fm) => {
                let w = fm.first_order.lookup_batch(tape, indices)?;
                let w = match scores {
                    Some(s) => tape.mul(w, s)?,
                    None => w,
                };
                let first = tape.sum_cols(w);
                let second = fm_second_order_var(tape, h, fm.fields)?;
                let deep = fm.deep.logit(tape, h)?;
                let z = tape.add(first, second)?;
                tape.add(z, deep)
            }
        }
    }
}

/// Batched `½ Σ_j [(Σ_n H_nj)² − Σ_n H_nj²]` as a `B×1` column.
pub fn fm_second_order_var(tape: &mut Tape<'_>, h: Var, fields: usize) -> Result<Var> {
    let s = tape.field_sum(h, fields)?;
    let s2 = tape.mul(s, s)?;
    let square_of_sum = tape.sum_cols(s2);
    let h2 = tape.mul(h, h)?;
    let sum_of_squares = tape.sum_cols(h2);
    let neg = tape.affine(sum_of_squares, -1.0, 0.0);
    let diff = tape.add(square_of_sum, neg)?;
    Ok(tape.affine(diff, 0.5, 0.0))
}

/// Factorization-machine pair term of one `N×d` matrix.
pub fn fm_second_order(h: &Matrix) -> f64 {
    let mut total = 0.0;
    for j in 0..h.cols() {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for n in 0..h.rows() {
            let v = h.get(n, j);
            sum += v;
            sq += v * v;
        }
        total += sum * sum - sq;
    }
    0.5 * total
}

/// `ŷ` for one instance: `h` is `N×d`, `scores` the per-field scores used
/// to build it, `values` the instance's value indices.
pub fn backbone_forward(
    store: &ParamStore,
    backbone: &Backbone,
    h: &Matrix,
    scores: &[f64],
    values: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new(store);
    let hv = tape.constant(Matrix::row_vector(h.as_slice()));
    let sv = tape.constant(Matrix::row_vector(scores));
    let z = backbone.logit(&mut tape, hv, Some(sv), values)?;
    Ok(sigmoid(tape.scalar(z)))
}
