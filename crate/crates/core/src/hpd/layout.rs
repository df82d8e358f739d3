//! Column layout of the probability tables and the blockwise softmax.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{DomainSchema, RelationshipConfig};
use crate::privacy::NoiseSource;
use crate::scalar::Scalar;

use super::HpdError;

/// How individuals map to tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Slot `j` (0-based) draws from table `slot_map[j]`; sizes `1..M`.
    Standard { slot_map: Vec<usize> },
    /// Head, spouse and child tables; spouse presence and child count.
    Relational,
}

/// Default sharing: slots 1-3 own tables, 4-5 share one, the rest share
/// another.
pub fn default_slot_map(max_group_size: usize) -> Vec<usize> {
    (0..max_group_size)
        .map(|j| match j {
            0..=2 => j,
            3 | 4 => 3,
            _ => 4,
        })
        .collect()
}

pub const HEAD: usize = 0;
pub const SPOUSE: usize = 1;
pub const CHILD: usize = 2;

/// Column offsets of one mixture row. Every row has `width` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub(crate) k: usize,
    pub(crate) schema: DomainSchema,
    pub(crate) structure: Structure,
    pub(crate) group_off: Vec<usize>,
    /// Offset of each individual attribute inside a table; `None` for the
    /// relate attribute, which is implied by the table.
    pub(crate) indiv_off: Vec<Option<usize>>,
    pub(crate) table_width: usize,
    pub(crate) n_tables: usize,
    pub(crate) table_start: usize,
    /// Standard: `P_#` over sizes `1..M`. Relational: spouse block
    /// `[absent, present]` followed by child counts `0..M_c`.
    pub(crate) size_start: usize,
    pub(crate) width: usize,
    pub(crate) blocks: Vec<(usize, usize)>,
}

impl Layout {
    pub fn new(schema: &DomainSchema, k: usize, slot_map: Option<Vec<usize>>) -> Result<Arc<Self>, HpdError> {
        if k == 0 {
            return Err(HpdError::Config("K must be at least 1".into()));
        }
        let m = schema.max_group_size();
        let rel = schema.relationship();
        let structure = match (rel, slot_map) {
            (Some(_), Some(_)) => {
                return Err(HpdError::Config("slot maps do not apply to relationship schemas".into()));
            }
            (Some(_), None) => Structure::Relational,
            (None, map) => {
                let map = map.unwrap_or_else(|| default_slot_map(m));
                let n = map.iter().max().map_or(0, |x| x + 1);
                if map.len() != m || (0..n).any(|t| !map.contains(&t)) {
                    return Err(HpdError::Config(format!(
                        "slot map must have {m} entries using every table index 0..s"
                    )));
                }
                Structure::Standard { slot_map: map }
            }
        };

        let mut blocks = Vec::new();
        let mut col = 0;
        let mut group_off = Vec::new();
        for a in schema.group_attrs() {
            group_off.push(col);
            blocks.push((col, a.cardinality()));
            col += a.cardinality();
        }
        let table_start = col;
        let mut indiv_off = Vec::new();
        let mut table_width = 0;
        for (i, a) in schema.individual_attrs().iter().enumerate() {
            if rel.is_some_and(|r| r.relate_attr == i) {
                indiv_off.push(None);
            } else {
                indiv_off.push(Some(table_width));
                table_width += a.cardinality();
            }
        }
        let n_tables = match &structure {
            Structure::Standard { slot_map } => slot_map.iter().max().map_or(0, |x| x + 1),
            Structure::Relational => 3,
        };
        for t in 0..n_tables {
            let base = table_start + t * table_width;
            for (i, a) in schema.individual_attrs().iter().enumerate() {
                if let Some(off) = indiv_off[i] {
                    blocks.push((base + off, a.cardinality()));
                }
            }
        }
        let size_start = table_start + n_tables * table_width;
        let width = match rel {
            None => {
                blocks.push((size_start, m));
                size_start + m
            }
            Some(r) => {
                blocks.push((size_start, 2));
                blocks.push((size_start + 2, r.max_children + 1));
                size_start + 3 + r.max_children
            }
        };
        Ok(Arc::new(Self {
            k,
            schema: schema.clone(),
            structure,
            group_off,
            indiv_off,
            table_width,
            n_tables,
            table_start,
            size_start,
            width,
            blocks,
        }))
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn schema(&self) -> &DomainSchema {
        &self.schema
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_tables(&self) -> usize {
        self.n_tables
    }

    /// `K * width`.
    pub fn n_params(&self) -> usize {
        self.k * self.width
    }

    pub fn relationship(&self) -> Option<&RelationshipConfig> {
        self.schema.relationship()
    }

    /// Column of `attr = value` within a row.
    pub fn group_col(&self, attr: usize, value: u32) -> usize {
        self.group_off[attr] + value as usize
    }

    /// Column of `attr = value` in individual table `table`; `None` for the
    /// relate attribute.
    pub fn indiv_col(&self, table: usize, attr: usize, value: u32) -> Option<usize> {
        self.indiv_off[attr].map(|off| self.table_start + table * self.table_width + off + value as usize)
    }

    /// Column `i` of the size block (see [`ProbTables::size_block`]).
    pub fn size_col(&self, i: usize) -> usize {
        assert!(self.size_start + i < self.width, "size column out of range");
        self.size_start + i
    }

    /// Standard structure only: the table that member slot `slot` draws from.
    pub fn table_of_slot(&self, slot: usize) -> usize {
        match &self.structure {
            Structure::Standard { slot_map } => slot_map[slot],
            Structure::Relational => unreachable!("relational tables are per person type"),
        }
    }
}

/// Softmax over every block of every row.
pub fn softmax_blocks<T: Scalar>(layout: &Layout, logits: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for k in 0..layout.k {
        let row = k * layout.width;
        for &(start, len) in &layout.blocks {
            let src = &logits[row + start..row + start + len];
            let dst = &mut out[row + start..row + start + len];
            let max = src.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut total = T::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                total = total + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
    }
    out
}

/// Pulls a gradient with respect to probabilities back to the logits:
/// `dθ = p ⊙ (g − ⟨p, g⟩)` per block.
pub fn softmax_backward<T: Scalar>(layout: &Layout, probs: &[T], dprobs: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); probs.len()];
    for k in 0..layout.k {
        let row = k * layout.width;
        for &(start, len) in &layout.blocks {
            let r = row + start..row + start + len;
            let p = &probs[r.clone()];
            let g = &dprobs[r.clone()];
            let inner = p.iter().zip(g).fold(T::zero(), |a, (&p, &g)| a + p * g);
            for ((o, &p), &g) in out[r].iter_mut().zip(p).zip(g) {
                *o = p * (g - inner);
            }
        }
    }
    out
}

/// Softmax-parameterized mixture tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTables<T> {
    layout: Arc<Layout>,
    logits: Vec<T>,
    probs: Vec<T>,
}

impl<T: Scalar> ProbTables<T> {
    pub fn from_logits(layout: Arc<Layout>, logits: Vec<T>) -> Self {
        assert_eq!(logits.len(), layout.n_params(), "logit count does not match layout");
        let probs = softmax_blocks(&layout, &logits);
        Self { layout, logits, probs }
    }

    /// All-zero logits: uniform blocks.
    pub fn uniform(layout: Arc<Layout>) -> Self {
        let n = layout.n_params();
        Self::from_logits(layout, vec![T::zero(); n])
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    fn row(&self, k: usize) -> &[T] {
        &self.probs[k * self.layout.width..(k + 1) * self.layout.width]
    }

    /// `P^G` block for attribute `attr` of component `k`.
    pub fn group_block(&self, k: usize, attr: usize) -> &[T] {
        let start = self.layout.group_off[attr];
        &self.row(k)[start..start + self.layout.schema.group_attrs()[attr].cardinality()]
    }

    /// Individual block of `table`; `None` for the relate attribute.
    pub fn indiv_block(&self, k: usize, table: usize, attr: usize) -> Option<&[T]> {
        let start = self.layout.indiv_col(table, attr, 0)?;
        let len = self.layout.schema.individual_attrs()[attr].cardinality();
        Some(&self.probs[k * self.layout.width + start..k * self.layout.width + start + len])
    }

    /// Standard: `P_#` over sizes `1..M`. Relational: `[absent, present]`
    /// spouse probabilities followed by child counts `0..M_c`.
    pub fn size_block(&self, k: usize) -> &[T] {
        &self.row(k)[self.layout.size_start..]
    }
}

/// Near-uniform initial logits, `N(0, 0.01²)`.
pub fn init_logits<T: Scalar>(layout: &Layout, rng: &mut NoiseSource) -> Vec<T> {
    let normal = Normal::new(0.0, 0.01).expect("valid normal");
    (0..layout.n_params()).map(|_| T::of(normal.sample(rng))).collect()
}

pub fn init_tables<T: Scalar>(layout: Arc<Layout>, seed: u64) -> ProbTables<T> {
    let logits = init_logits(&layout, &mut NoiseSource::seeded(seed));
    ProbTables::from_logits(layout, logits)
}
