//! Mode-specific normalization of continuous columns and one-hot encoding
//! of discrete columns, with the inverse transform.
//!
//! An encoded row is `α_1 ⊕ β_1 ⊕ ... ⊕ d_1 ⊕ ...` in schema order: each
//! continuous column contributes a scalar `α = (c - μ_k) / (4σ_k)` followed
//! by the one-hot `β` of the sampled mode `k`; each discrete column
//! contributes the one-hot of its category.

mod gmm;

pub use gmm::{fit_column, fit_em, Gmm1, EM_MAX_ITER, EM_REL_TOL, PRUNE_WEIGHT, SIGMA_FLOOR};

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::layers::argmax;
use crate::numkit::{Matrix, RngStream};
use crate::table::{format_number, parse_number, Table};

/// Column kind as stored in schema files:
/// `{"name": "age", "kind": "continuous"}` or
/// `{"name": "sex", "kind": "discrete", "categories": ["F", "M"]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Discrete { categories: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: ColumnKind::Continuous }
    }

    pub fn discrete<S: Into<String>>(name: impl Into<String>, categories: impl IntoIterator<Item = S>) -> Self {
        Self { name: name.into(), kind: ColumnKind::Discrete { categories: categories.into_iter().map(Into::into).collect() } }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub columns: Vec<ColumnSpec>,
}

impl TableSchema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let s = Self { columns };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::Schema("schema has no columns".into()));
        }
        let mut names = std::collections::HashSet::new();
        for c in &self.columns {
            if !names.insert(&c.name) {
                return Err(Error::Schema(format!("duplicate column name {:?}", c.name)));
            }
            if let ColumnKind::Discrete { categories } = &c.kind {
                if categories.is_empty() {
                    return Err(Error::Schema(format!("discrete column {:?} has no categories", c.name)));
                }
                let mut seen = std::collections::HashSet::new();
                if let Some(dup) = categories.iter().find(|v| !seen.insert(*v)) {
                    return Err(Error::Schema(format!("column {:?} repeats category {dup:?}", c.name)));
                }
            }
        }
        Ok(())
    }

    pub fn n_continuous(&self) -> usize {
        self.columns.iter().filter(|c| c.kind == ColumnKind::Continuous).count()
    }

    pub fn n_discrete(&self) -> usize {
        self.columns.len() - self.n_continuous()
    }

    /// Category lists of the discrete columns, in schema order.
    pub fn discrete_categories(&self) -> Vec<&[String]> {
        self.columns
            .iter()
            .filter_map(|c| match &c.kind {
                ColumnKind::Discrete { categories } => Some(categories.as_slice()),
                ColumnKind::Continuous => None,
            })
            .collect()
    }

    /// Continuous where every cell parses as a number, otherwise discrete
    /// with categories in order of first appearance.
    pub fn infer(table: &Table) -> Result<Self> {
        let mut columns = Vec::with_capacity(table.width());
        for (j, name) in table.header.iter().enumerate() {
            let numeric = !table.is_empty() && table.rows.iter().all(|r| parse_number(name, &r[j]).is_ok());
            if numeric {
                columns.push(ColumnSpec::continuous(name.clone()));
            } else {
                let mut cats: Vec<String> = Vec::new();
                for r in &table.rows {
                    if !cats.contains(&r[j]) {
                        cats.push(r[j].clone());
                    }
                }
                columns.push(ColumnSpec::discrete(name.clone(), cats));
            }
        }
        Self::new(columns)
    }

    /// Checks that `table`'s header matches the schema's column names.
    pub fn check_header(&self, table: &Table) -> Result<()> {
        let names: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        if table.header.iter().map(String::as_str).ne(names.iter().copied()) {
            return Err(Error::Schema(format!("CSV header {:?} does not match schema columns {:?}", table.header, names)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let s: Self = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Where one column lives inside an encoded row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Span {
    Continuous { alpha: usize, beta: usize, modes: usize },
    Discrete { start: usize, len: usize },
}

/// Fitted encoder/decoder for one schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub schema: TableSchema,
    /// One mixture per continuous column, in schema order.
    pub mixtures: Vec<Gmm1>,
}

/// An encoded table.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub data: Matrix,
    /// Number of α values clipped to [-1, 1].
    pub clipped: usize,
}

impl Transformer {
    pub fn fit(table: &Table, schema: &TableSchema, max_modes: usize, rng: &mut RngStream) -> Result<Self> {
        schema.validate()?;
        schema.check_header(table)?;
        if table.is_empty() {
            return Err(Error::InvalidArgument("cannot fit a transformer on an empty table".into()));
        }
        let mut mixtures = Vec::new();
        for (j, col) in schema.columns.iter().enumerate() {
            match &col.kind {
                ColumnKind::Continuous => {
                    let xs = table.numeric_column(j)?;
                    mixtures.push(fit_column(&xs, max_modes, rng)?);
                }
                ColumnKind::Discrete { categories } => {
                    if let Some(r) = table.rows.iter().find(|r| !categories.contains(&r[j])) {
                        return Err(Error::UnknownCategory { column: col.name.clone(), value: r[j].clone() });
                    }
                }
            }
        }
        Ok(Self { schema: schema.clone(), mixtures })
    }

    pub fn from_parts(schema: TableSchema, mixtures: Vec<Gmm1>) -> Result<Self> {
        schema.validate()?;
        if mixtures.len() != schema.n_continuous() {
            return Err(Error::Schema(format!("{} mixtures for {} continuous columns", mixtures.len(), schema.n_continuous())));
        }
        for m in &mixtures {
            m.validate()?;
        }
        Ok(Self { schema, mixtures })
    }

    pub fn spans(&self) -> Vec<Span> {
        let mut out = Vec::with_capacity(self.schema.columns.len());
        let mut pos = 0;
        let mut cont = 0;
        for col in &self.schema.columns {
            match &col.kind {
                ColumnKind::Continuous => {
                    let modes = self.mixtures[cont].n_modes();
                    out.push(Span::Continuous { alpha: pos, beta: pos + 1, modes });
                    pos += 1 + modes;
                    cont += 1;
                }
                ColumnKind::Discrete { categories } => {
                    out.push(Span::Discrete { start: pos, len: categories.len() });
                    pos += categories.len();
                }
            }
        }
        out
    }

    /// `Σ (1 + n_j) + Σ |D_j|`.
    pub fn width(&self) -> usize {
        self.mixtures.iter().map(|m| 1 + m.n_modes()).sum::<usize>()
            + self.schema.discrete_categories().iter().map(|c| c.len()).sum::<usize>()
    }

    fn category_maps(&self) -> Vec<Option<HashMap<&str, usize>>> {
        self.schema
            .columns
            .iter()
            .map(|c| match &c.kind {
                ColumnKind::Discrete { categories } => {
                    Some(categories.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect())
                }
                ColumnKind::Continuous => None,
            })
            .collect()
    }

    /// Encodes one continuous value given its mixture: samples the mode from
    /// the posterior and returns `(α, k, clipped)`.
    pub fn encode_value(gmm: &Gmm1, c: f64, rng: &mut RngStream) -> (f64, usize, bool) {
        let k = rng.categorical(&gmm.posterior(c));
        let alpha = (c - gmm.means[k]) / (4.0 * gmm.stds[k]);
        if alpha.abs() > 1.0 {
            (alpha.clamp(-1.0, 1.0), k, true)
        } else {
            (alpha, k, false)
        }
    }

    fn encode_into(
        &self,
        row: &[String],
        maps: &[Option<HashMap<&str, usize>>],
        out: &mut [f64],
        rng: &mut RngStream,
    ) -> Result<usize> {
        if row.len() != self.schema.columns.len() {
            return Err(Error::Schema(format!("row has {} cells, schema has {} columns", row.len(), self.schema.columns.len())));
        }
        let mut clipped = 0;
        let mut cont = 0;
        for (j, span) in self.spans().into_iter().enumerate() {
            let name = &self.schema.columns[j].name;
            match span {
                Span::Continuous { alpha, beta, .. } => {
                    let c = parse_number(name, &row[j])?;
                    let (a, k, clip) = Self::encode_value(&self.mixtures[cont], c, rng);
                    out[alpha] = a;
                    out[beta + k] = 1.0;
                    clipped += usize::from(clip);
                    cont += 1;
                }
                Span::Discrete { start, .. } => {
                    let map = maps[j].as_ref().expect("discrete column");
                    let idx = *map
                        .get(row[j].as_str())
                        .ok_or_else(|| Error::UnknownCategory { column: name.clone(), value: row[j].clone() })?;
                    out[start + idx] = 1.0;
                }
            }
        }
        Ok(clipped)
    }

    /// Encodes one raw row. Returns the encoded values and the clip count.
    pub fn encode_row(&self, row: &[String], rng: &mut RngStream) -> Result<(Vec<f64>, usize)> {
        let maps = self.category_maps();
        let mut out = vec![0.0; self.width()];
        let clipped = self.encode_into(row, &maps, &mut out, rng)?;
        Ok((out, clipped))
    }

    pub fn encode(&self, table: &Table, rng: &mut RngStream) -> Result<Encoded> {
        self.schema.check_header(table)?;
        let maps = self.category_maps();
        let w = self.width();
        let mut data = Matrix::zeros(table.len(), w);
        let mut clipped = 0;
        for (i, row) in table.rows.iter().enumerate() {
            clipped += self.encode_into(row, &maps, data.row_mut(i), rng)?;
        }
        if clipped > 0 {
            log::debug!("clipped {clipped} alpha values while encoding {} rows", table.len());
        }
        Ok(Encoded { data, clipped })
    }

    /// Decodes one encoded row into raw cell strings. Modes and categories are
    /// taken at the argmax, so soft outputs decode as well as one-hots.
    pub fn decode_row(&self, x: &[f64]) -> Result<Vec<String>> {
        if x.len() != self.width() {
            return Err(Error::Shape(format!("encoded row has width {}, transformer expects {}", x.len(), self.width())));
        }
        let mut out = Vec::with_capacity(self.schema.columns.len());
        let mut cont = 0;
        for (j, span) in self.spans().into_iter().enumerate() {
            match span {
                Span::Continuous { alpha, beta, modes } => {
                    let g = &self.mixtures[cont];
                    let k = argmax(&x[beta..beta + modes]).expect("at least one mode");
                    out.push(format_number(x[alpha] * 4.0 * g.stds[k] + g.means[k]));
                    cont += 1;
                }
                Span::Discrete { start, len } => {
                    let ColumnKind::Discrete { categories } = &self.schema.columns[j].kind else { unreachable!() };
                    out.push(categories[argmax(&x[start..start + len]).expect("non-empty")].clone());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, data: &Matrix) -> Result<Table> {
        let mut t = Table::new(self.schema.columns.iter().map(|c| c.name.clone()).collect());
        for i in 0..data.rows() {
            t.push(self.decode_row(data.row(i))?)?;
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Stream;

    fn unit() -> Transformer {
        Transformer::from_parts(
            TableSchema::new(vec![ColumnSpec::continuous("x"), ColumnSpec::discrete("y", ["a", "b"])]).unwrap(),
            vec![Gmm1 { weights: vec![1.0], means: vec![0.0], stds: vec![1.0] }],
        )
        .unwrap()
    }

    #[test]
    fn single_mode_formula() {
        let t = unit();
        let mut rng = RngStream::new(0, Stream::Encode);
        let (x, clipped) = t.encode_row(&["2".into(), "b".into()], &mut rng).unwrap();
        assert_eq!(x, vec![0.5, 1.0, 0.0, 1.0]);
        assert_eq!(clipped, 0);
        assert_eq!(t.decode_row(&x).unwrap(), vec!["2".to_string(), "b".to_string()]);
    }

    #[test]
    fn centered_value_and_clipping() {
        let g = Gmm1 { weights: vec![1.0], means: vec![5.0], stds: vec![0.01] };
        let mut rng = RngStream::new(0, Stream::Encode);
        assert_eq!(Transformer::encode_value(&g, 5.0, &mut rng), (0.0, 0, false));
        assert_eq!(Transformer::encode_value(&g, 9.0, &mut rng), (1.0, 0, true));
    }

    #[test]
    fn beta_is_one_hot_of_the_sampled_mode() {
        let g = Gmm1 { weights: vec![0.25; 4], means: vec![-30.0, -10.0, 10.0, 30.0], stds: vec![1.0; 4] };
        let t = Transformer::from_parts(TableSchema::new(vec![ColumnSpec::continuous("x")]).unwrap(), vec![g]).unwrap();
        let (x, _) = t.encode_row(&["10.5".into()], &mut RngStream::new(0, Stream::Encode)).unwrap();
        assert_eq!(&x[1..], &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn schema_json_shape() {
        let s: TableSchema = serde_json::from_str(
            r#"{"columns":[{"name":"v","kind":"continuous"},{"name":"c","kind":"discrete","categories":["p","q"]}]}"#,
        )
        .unwrap();
        assert_eq!(s.n_continuous(), 1);
        assert_eq!(s.discrete_categories(), vec![&["p".to_string(), "q".to_string()][..]]);
        assert!(TableSchema::new(vec![ColumnSpec::discrete("c", ["a", "a"])]).is_err());
        assert!(TableSchema::new(vec![]).is_err());
    }

    #[test]
    fn unknown_category_is_an_error() {
        let t = unit();
        let r = t.encode_row(&["0".into(), "zzz".into()], &mut RngStream::new(0, Stream::Encode));
        assert!(matches!(r, Err(Error::UnknownCategory { .. })));
    }
}
