//! Condition vectors: one randomly chosen discrete column carries a random
//! one-hot category, every other block is zero.

use crate::numkit::{Matrix, RngStream};
use crate::preprocess::TableSchema;

/// Block layout of the condition vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CondLayout {
    /// `(offset, categories)` per discrete column.
    pub blocks: Vec<(usize, usize)>,
    pub width: usize,
}

impl CondLayout {
    pub fn new(schema: &TableSchema) -> Self {
        let mut blocks = Vec::new();
        let mut width = 0;
        for cats in schema.discrete_categories() {
            blocks.push((width, cats.len()));
            width += cats.len();
        }
        Self { blocks, width }
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// A batch of conditions with the chosen column and category per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBatch {
    pub c: Matrix,
    /// `(s, category)` per row; empty when there are no discrete columns.
    pub choices: Vec<(usize, usize)>,
}

impl ConditionBatch {
    pub fn fixed(layout: &CondLayout, n: usize, column: usize, category: usize) -> Self {
        let mut c = Matrix::zeros(n, layout.width);
        let (off, _) = layout.blocks[column];
        for r in 0..n {
            c.set(r, off + category, 1.0);
        }
        Self { c, choices: vec![(column, category); n] }
    }
}

/// Samples `n` conditions: `s` uniform over discrete columns, then the
/// category uniform within column `s`.
pub fn sample_condvec(layout: &CondLayout, n: usize, rng: &mut RngStream) -> ConditionBatch {
    let mut c = Matrix::zeros(n, layout.width);
    if layout.is_empty() {
        return ConditionBatch { c, choices: Vec::new() };
    }
    let mut choices = Vec::with_capacity(n);
    for r in 0..n {
        let s = rng.below(layout.blocks.len());
        let (off, k) = layout.blocks[s];
        let cat = rng.below(k);
        c.set(r, off + cat, 1.0);
        choices.push((s, cat));
    }
    ConditionBatch { c, choices }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Stream;
    use crate::preprocess::ColumnSpec;

    #[test]
    fn one_nonzero_entry_per_row() {
        let schema = TableSchema::new(vec![
            ColumnSpec::discrete("a", ["x", "y"]),
            ColumnSpec::continuous("v"),
            ColumnSpec::discrete("b", ["p", "q", "r"]),
        ])
        .unwrap();
        let layout = CondLayout::new(&schema);
        assert_eq!(layout.width, 5);
        let batch = sample_condvec(&layout, 200, &mut RngStream::new(3, Stream::Condition));
        for r in 0..200 {
            assert_eq!(batch.c.row(r).iter().sum::<f64>(), 1.0);
            let (s, cat) = batch.choices[r];
            assert_eq!(batch.c.get(r, layout.blocks[s].0 + cat), 1.0);
        }
    }

    #[test]
    fn single_option_is_always_chosen() {
        let schema = TableSchema::new(vec![ColumnSpec::discrete("a", ["only"])]).unwrap();
        let batch = sample_condvec(&CondLayout::new(&schema), 10, &mut RngStream::new(0, Stream::Condition));
        assert!(batch.c.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn no_discrete_columns_gives_empty_condition() {
        let schema = TableSchema::new(vec![ColumnSpec::continuous("v")]).unwrap();
        let batch = sample_condvec(&CondLayout::new(&schema), 4, &mut RngStream::new(0, Stream::Condition));
        assert_eq!(batch.c.shape(), (4, 0));
        assert!(batch.choices.is_empty());
    }
}
