//! Per-field embedding tables: `e_n` is row `x_n` of field `n`'s table.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{FieldSchema, Instance};
use crate::numeric::{Matrix, ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::{Error, Result};

/// Handles to the `vocab_size(n) × dim` tables of every field.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    tables: Vec<ParamId>,
    dim: usize,
}

impl EmbeddingTable {
    /// Registers tables named `{prefix}.{n}` with entries uniform in `±1/√dim`.
    pub fn init(
        store: &mut ParamStore,
        schema: &FieldSchema,
        dim: usize,
        prefix: &str,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("embedding dimension must be at least 1".into()));
        }
        let bound = 1.0 / libm::sqrt(dim as f64);
        let mut tables = Vec::with_capacity(schema.field_count());
        for (n, &rows) in schema.vocab_sizes().iter().enumerate() {
            let data = (0..rows * dim).map(|_| rng.gen_range(-bound..=bound)).collect();
            tables.push(store.add(format!("{prefix}.{n}"), group, Matrix::new(rows, dim, data)?)?);
        }
        Ok(Self { tables, dim })
    }

    /// Binds to tables already present in `store`, checking their shapes.
    pub fn attach(store: &ParamStore, schema: &FieldSchema, dim: usize, prefix: &str) -> Result<Self> {
        let mut tables = Vec::with_capacity(schema.field_count());
        for (n, &rows) in schema.vocab_sizes().iter().enumerate() {
            let id = store.require(&format!("{prefix}.{n}"))?;
            if store.value(id).shape() != (rows, dim) {
                return Err(Error::Schema(format!(
                    "table `{prefix}.{n}` is {:?}, schema expects {:?}",
                    store.value(id).shape(),
                    (rows, dim)
                )));
            }
            tables.push(id);
        }
        Ok(Self { tables, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn field_count(&self) -> usize {
        self.tables.len()
    }

    pub fn tables(&self) -> &[ParamId] {
        &self.tables
    }

    /// Batched lookup of a flat `B×N` index block into `B×(N·dim)`.
    pub fn lookup_batch(&self, tape: &mut Tape<'_>, indices: &[usize]) -> Result<Var> {
        tape.gather(&self.tables, indices)
    }

    /// `N×dim` matrix `E` of one instance.
    pub fn lookup(&self, store: &ParamStore, inst: &Instance) -> Result<Matrix> {
        if inst.values.len() != self.tables.len() {
            return Err(Error::Schema(format!(
                "instance has {} fields, tables cover {}",
                inst.values.len(),
                self.tables.len()
            )));
        }
        let mut out = Matrix::zeros(self.tables.len(), self.dim);
        for (n, (&id, &v)) in self.tables.iter().zip(&inst.values).enumerate() {
            let table = store.value(id);
            if v >= table.rows() {
                return Err(Error::Schema(format!(
                    "field {n}: index {v} out of range for vocabulary of size {}",
                    table.rows()
                )));
            }
            out.row_mut(n).copy_from_slice(table.row(v));
        }
        Ok(out)
    }
}

/// Standalone tables for a schema, seeded.
pub fn init_tables(schema: &FieldSchema, dim: usize, seed: u64) -> Result<(ParamStore, EmbeddingTable)> {
    use rand::SeedableRng;
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let table = EmbeddingTable::init(&mut store, schema, dim, "emb", ParamGroup::Rs, &mut rng)?;
    Ok((store, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, ParamGroup};
    use alloc::vec;

    fn schema() -> FieldSchema {
        FieldSchema::new(vec![3, 4, 2]).unwrap()
    }

    #[test]
    fn one_hot_rows_are_reproduced() {
        let (mut store, table) = init_tables(&schema(), 3, 1).unwrap();
        for (n, &id) in table.tables().iter().enumerate() {
            let m = store.value_mut(id);
            for r in 0..m.rows() {
                for c in 0..3 {
                    m.set(r, c, if c == (r + n) % 3 { 1.0 } else { 0.0 });
                }
            }
        }
        let inst = Instance {
            values: vec![2, 1, 0],
            label: 1,
        };
        let e = table.lookup(&store, &inst).unwrap();
        assert_eq!(e.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(e.row(1), &[0.0, 0.0, 1.0]);
        assert_eq!(e.row(2), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new(&store);
        let batched = table.lookup_batch(&mut tape, &inst.values).unwrap();
        assert_eq!(tape.value(batched).as_slice(), e.as_slice());
    }

    #[test]
    fn gradient_of_sum_marks_looked_up_rows() {
        let (store, table) = init_tables(&schema(), 2, 4).unwrap();
        let grads = {
            let mut tape = Tape::new(&store);
            let e = table.lookup_batch(&mut tape, &[1, 3, 0]).unwrap();
            let s = tape.total(e).unwrap();
            tape.backward(s).unwrap()
        };
        let mut s = store.clone();
        s.accumulate(&grads);
        let expect = |id: ParamId, row: usize| {
            let g = s.get(id).grad();
            for r in 0..g.rows() {
                let want = if r == row { 1.0 } else { 0.0 };
                assert!(g.row(r).iter().all(|&v| v == want));
            }
        };
        expect(table.tables()[0], 1);
        expect(table.tables()[1], 3);
        expect(table.tables()[2], 0);
    }

    #[test]
    fn out_of_range_index_is_a_schema_error() {
        let (store, table) = init_tables(&schema(), 2, 4).unwrap();
        let bad = Instance {
            values: vec![0, 4, 0],
            label: 0,
        };
        assert!(matches!(table.lookup(&store, &bad), Err(Error::Schema(_))));
        let mut tape = Tape::new(&store);
        assert!(table.lookup_batch(&mut tape, &bad.values).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let big = FieldSchema::new(vec![2500, 2500]).unwrap();
        let (a, ta) = init_tables(&big, 2, 8).unwrap();
        let (b, _) = init_tables(&big, 2, 8).unwrap();
        assert_eq!(a, b);
        let bound = 1.0 / libm::sqrt(2.0);
        let mut sum = 0.0;
        let mut n = 0.0;
        for &id in ta.tables() {
            for &v in a.value(id).as_slice() {
                assert!(v.abs() <= bound);
                sum += v;
                n += 1.0;
            }
        }
        assert_eq!(n, 10_000.0);
        assert!((sum / n).abs() < 0.01, "mean {}", sum / n);
    }

    #[test]
    fn lookup_is_linear_in_the_tables() {
        let (mut store, table) = init_tables(&schema(), 3, 2).unwrap();
        let inst = Instance {
            values: vec![1, 2, 1],
            label: 0,
        };
        let before = table.lookup(&store, &inst).unwrap();
        let id = table.tables()[1];
        let scaled = store.value(id).map(|v| 2.5 * v);
        *store.value_mut(id) = scaled;
        let after = table.lookup(&store, &inst).unwrap();
        for c in 0..3 {
            assert_eq!(after.get(1, c), 2.5 * before.get(1, c));
            assert_eq!(after.get(0, c), before.get(0, c));
        }
    }

    #[test]
    fn gradient_through_lookup_matches_finite_differences() {
        let (mut store, table) = init_tables(&schema(), 2, 6).unwrap();
        let w = store
            .add(
                "w",
                ParamGroup::Rs,
                Matrix::new(6, 1, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7]).unwrap(),
            )
            .unwrap();
        let f = |t: &mut Tape<'_>| {
            let e = table.lookup_batch(t, &[1, 2, 1, 0, 3, 0])?;
            let wv = t.param(w);
            let z = t.matmul(e, wv)?;
            let p = t.sigmoid(z);
            t.bce_mean(p, &[1.0, 0.0])
        };
        let r = grad_check(f, &store, 1e-5, |_| true).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
