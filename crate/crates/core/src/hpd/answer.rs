//! Closed-form query answers on mixture tables and their gradients.
//!
//! Each formula is written once against [`Expr`]; [`Eval`] computes values
//! and [`Tape`] records the graph for reverse accumulation.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::workload::{PersonType, Query, QueryKind, Relation};

use super::layout::{Layout, ProbTables, Structure, CHILD, HEAD, SPOUSE};
use super::HpdError;

pub(crate) trait Expr<T: Scalar> {
    type V: Copy;
    /// Entry `idx` of the flat probability vector.
    fn prob(&mut self, idx: usize) -> Self::V;
    fn lit(&mut self, x: T) -> Self::V;
    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V;

    fn one_minus(&mut self, a: Self::V) -> Self::V {
        let one = self.lit(T::one());
        self.sub(one, a)
    }

    fn product(&mut self, idxs: impl IntoIterator<Item = usize>) -> Self::V {
        let mut acc: Option<Self::V> = None;
        for i in idxs {
            let p = self.prob(i);
            acc = Some(match acc {
                Some(a) => self.mul(a, p),
                None => p,
            });
        }
        acc.unwrap_or_else(|| self.lit(T::one()))
    }
}

pub(crate) struct Eval<'a, T> {
    pub probs: &'a [T],
}

impl<T: Scalar> Expr<T> for Eval<'_, T> {
    type V = T;

    fn prob(&mut self, idx: usize) -> T {
        self.probs[idx]
    }

    fn lit(&mut self, x: T) -> T {
        x
    }

    fn add(&mut self, a: T, b: T) -> T {
        a + b
    }

    fn sub(&mut self, a: T, b: T) -> T {
        a - b
    }

    fn mul(&mut self, a: T, b: T) -> T {
        a * b
    }

    fn div(&mut self, a: T, b: T) -> T {
        a / b
    }
}

#[derive(Debug, Clone, Copy)]
enum Node<T> {
    Leaf(usize),
    Const,
    Binary(usize, T, usize, T),
}

/// Reverse-mode tape over probability leaves.
pub(crate) struct Tape<'a, T> {
    probs: &'a [T],
    nodes: Vec<Node<T>>,
    values: Vec<T>,
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new(probs: &'a [T]) -> Self {
        Self {
            probs,
            nodes: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.values.clear();
    }

    pub fn value(&self, v: usize) -> T {
        self.values[v]
    }

    fn push(&mut self, node: Node<T>, value: T) -> usize {
        self.nodes.push(node);
        self.values.push(value);
        self.nodes.len() - 1
    }

    /// Adds `seed * ∂root/∂p` into `dprobs`.
    pub fn backward(&self, root: usize, seed: T, dprobs: &mut [T], adj: &mut Vec<T>) {
        adj.clear();
        adj.resize(self.nodes.len(), T::zero());
        adj[root] = seed;
        for i in (0..=root).rev() {
            let a = adj[i];
            if a == T::zero() {
                continue;
            }
            match self.nodes[i] {
                Node::Leaf(idx) => dprobs[idx] = dprobs[idx] + a,
                Node::Const => {}
                Node::Binary(x, dx, y, dy) => {
                    adj[x] = adj[x] + a * dx;
                    adj[y] = adj[y] + a * dy;
                }
            }
        }
    }
}

impl<T: Scalar> Expr<T> for Tape<'_, T> {
    type V = usize;

    fn prob(&mut self, idx: usize) -> usize {
        let v = self.probs[idx];
        self.push(Node::Leaf(idx), v)
    }

    fn lit(&mut self, x: T) -> usize {
        self.push(Node::Const, x)
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        let v = self.values[a] + self.values[b];
        self.push(Node::Binary(a, T::one(), b, T::one()), v)
    }

    fn sub(&mut self, a: usize, b: usize) -> usize {
        let v = self.values[a] - self.values[b];
        self.push(Node::Binary(a, T::one(), b, -T::one()), v)
    }

    fn mul(&mut self, a: usize, b: usize) -> usize {
        let (x, y) = (self.values[a], self.values[b]);
        self.push(Node::Binary(a, y, b, x), x * y)
    }

    fn div(&mut self, a: usize, b: usize) -> usize {
        let (x, y) = (self.values[a], self.values[b]);
        let q = x / y;
        self.push(Node::Binary(a, T::one() / y, b, -q / y), q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Form {
    Group,
    Individual,
    Relation(Relation),
}

/// A query resolved to row-relative columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledQuery {
    form: Form,
    group_cols: Vec<usize>,
    /// Per table: columns of the individual predicates, or `None` when the
    /// table's person type contradicts a relate-attribute predicate.
    indiv: Vec<Option<Vec<usize>>>,
    rel: Vec<Option<Vec<usize>>>,
}

fn table_cols(layout: &Layout, preds: &[crate::workload::SingletonPredicate]) -> Vec<Option<Vec<usize>>> {
    let rel = layout.relationship();
    (0..layout.n_tables())
        .map(|t| {
            let mut cols = Vec::with_capacity(preds.len());
            for p in preds {
                match layout.indiv_col(t, p.attr, p.value) {
                    Some(c) => cols.push(c),
                    None => {
                        let r = rel.expect("relate attribute implies a relationship config");
                        let ty = [PersonType::Head, PersonType::Spouse, PersonType::Child][t];
                        if ty.value(r) != p.value {
                            return None;
                        }
                    }
                }
            }
            Some(cols)
        })
        .collect()
}

pub fn compile(layout: &Layout, q: &Query) -> Result<CompiledQuery, HpdError> {
    q.validate(layout.schema()).map_err(|e| HpdError::Query(e.to_string()))?;
    let form = match q.kind {
        QueryKind::GroupLevel => Form::Group,
        QueryKind::IndividualLevel => Form::Individual,
        QueryKind::Relationship(r) => {
            if !matches!(layout.structure(), Structure::Relational) {
                return Err(HpdError::Query("relationship query needs a relationship schema".into()));
            }
            Form::Relation(r)
        }
    };
    Ok(CompiledQuery {
        form,
        group_cols: q.group_preds.iter().map(|p| layout.group_col(p.attr, p.value)).collect(),
        indiv: table_cols(layout, &q.indiv_preds),
        rel: table_cols(layout, &q.rel_preds),
    })
}

pub fn compile_all(layout: &Layout, queries: &[Query]) -> Result<Vec<CompiledQuery>, HpdError> {
    queries.iter().map(|q| compile(layout, q)).collect()
}

/// Probability that a draw from table `t` of row `base` satisfies `cols`.
fn satisfy<T: Scalar, E: Expr<T>>(e: &mut E, base: usize, cols: &Option<Vec<usize>>) -> E::V {
    match cols {
        None => e.lit(T::zero()),
        Some(cols) => e.product(cols.iter().map(|c| base + c)),
    }
}

/// `Σ_c P(#children = c) · x^c`, the child-count generating function.
fn count_pgf<T: Scalar, E: Expr<T>>(e: &mut E, counts: usize, n: usize, x: E::V) -> E::V {
    let mut acc = e.prob(counts);
    let mut power = e.lit(T::one());
    for c in 1..n {
        power = e.mul(power, x);
        let p = e.prob(counts + c);
        let term = e.mul(p, power);
        acc = e.add(acc, term);
    }
    acc
}

fn expected_children<T: Scalar, E: Expr<T>>(e: &mut E, counts: usize, n: usize) -> E::V {
    let mut acc = e.lit(T::zero());
    for c in 1..n {
        let p = e.prob(counts + c);
        let w = e.lit(T::of(c as f64));
        let term = e.mul(p, w);
        acc = e.add(acc, term);
    }
    acc
}

fn standard<T: Scalar, E: Expr<T>>(e: &mut E, layout: &Layout, q: &CompiledQuery) -> E::V {
    let m = layout.schema().max_group_size();
    let mut num = e.lit(T::zero());
    let mut den = e.lit(T::zero());
    for k in 0..layout.k() {
        let base = k * layout.width();
        let g = e.product(q.group_cols.iter().map(|c| base + c));
        let sizes = base + layout.size_start;
        let indiv_empty = q.indiv[0].as_ref().is_some_and(|c| c.is_empty());
        let u: Vec<E::V> = q.indiv.iter().map(|cols| satisfy(e, base, cols)).collect();
        match q.form {
            Form::Group => {
                if indiv_empty {
                    num = e.add(num, g);
                    continue;
                }
                // Σ_m π_m (1 − ∏_{j≤m} (1 − u_j))
                let mut none = e.lit(T::one());
                let mut a = e.lit(T::zero());
                for slot in 0..m {
                    let miss = e.one_minus(u[layout.table_of_slot(slot)]);
                    none = e.mul(none, miss);
                    let hit = e.one_minus(none);
                    let pi = e.prob(sizes + slot);
                    let term = e.mul(pi, hit);
                    a = e.add(a, term);
                }
                let term = e.mul(g, a);
                num = e.add(num, term);
            }
            Form::Individual => {
                // Σ_m π_m Σ_{j≤m} u_j over Σ_m m π_m
                let mut expected = e.lit(T::zero());
                let mut a = e.lit(T::zero());
                let mut running = e.lit(T::zero());
                for slot in 0..m {
                    running = e.add(running, u[layout.table_of_slot(slot)]);
                    let pi = e.prob(sizes + slot);
                    let term = e.mul(pi, running);
                    a = e.add(a, term);
                    let size = e.lit(T::of((slot + 1) as f64));
                    let term = e.mul(pi, size);
                    expected = e.add(expected, term);
                }
                let term = e.mul(g, a);
                num = e.add(num, term);
                den = e.add(den, expected);
            }
            Form::Relation(_) => unreachable!("rejected by compile"),
        }
    }
    finish(e, layout, q.form, num, den)
}

fn relational<T: Scalar, E: Expr<T>>(e: &mut E, layout: &Layout, q: &CompiledQuery) -> E::V {
    let n_counts = layout.relationship().expect("relational layout").max_children + 1;
    let mut num = e.lit(T::zero());
    let mut den = e.lit(T::zero());
    for k in 0..layout.k() {
        let base = k * layout.width();
        let g = e.product(q.group_cols.iter().map(|c| base + c));
        let sigma = e.prob(base + layout.size_start + 1);
        let counts = base + layout.size_start + 2;
        let u_h = satisfy(e, base, &q.indiv[HEAD]);
        let u_s = satisfy(e, base, &q.indiv[SPOUSE]);
        let u_c = satisfy(e, base, &q.indiv[CHILD]);
        let su_s = e.mul(sigma, u_s);
        let a = match q.form {
            Form::Group => {
                // 1 − (1 − u_h)(1 − σ u_s) Σ_c γ_c (1 − u_c)^c
                let miss_h = e.one_minus(u_h);
                let miss_s = e.one_minus(su_s);
                let miss_c = e.one_minus(u_c);
                let none_c = count_pgf(e, counts, n_counts, miss_c);
                let none = e.mul(miss_h, miss_s);
                let none = e.mul(none, none_c);
                e.one_minus(none)
            }
            Form::Individual => {
                let ec = expected_children(e, counts, n_counts);
                let kids = e.mul(ec, u_c);
                let adults = e.add(u_h, su_s);
                e.add(adults, kids)
            }
            Form::Relation(Relation::MarriedTo) => {
                let w_h = satisfy(e, base, &q.rel[HEAD]);
                let w_s = satisfy(e, base, &q.rel[SPOUSE]);
                let hs = e.mul(u_h, sigma);
                let hs = e.mul(hs, w_s);
                let sh = e.mul(su_s, w_h);
                e.add(hs, sh)
            }
            Form::Relation(Relation::HasChild) => {
                let w_c = satisfy(e, base, &q.rel[CHILD]);
                let miss = e.one_minus(w_c);
                let none = count_pgf(e, counts, n_counts, miss);
                let any = e.one_minus(none);
                let parents = e.add(u_h, su_s);
                e.mul(parents, any)
            }
            Form::Relation(Relation::HasParent) => {
                // A child counts once if either parent satisfies the
                // related predicates.
                let w_h = satisfy(e, base, &q.rel[HEAD]);
                let w_s = satisfy(e, base, &q.rel[SPOUSE]);
                let miss_h = e.one_minus(w_h);
                let sw_s = e.mul(sigma, w_s);
                let miss_s = e.one_minus(sw_s);
                let none = e.mul(miss_h, miss_s);
                let any = e.one_minus(none);
                let ec = expected_children(e, counts, n_counts);
                let kids = e.mul(ec, u_c);
                e.mul(kids, any)
            }
        };
        let term = e.mul(g, a);
        num = e.add(num, term);
        if q.form != Form::Group {
            let one = e.lit(T::one());
            let ec = expected_children(e, counts, n_counts);
            let size = e.add(one, sigma);
            let size = e.add(size, ec);
            den = e.add(den, size);
        }
    }
    finish(e, layout, q.form, num, den)
}

fn finish<T: Scalar, E: Expr<T>>(e: &mut E, layout: &Layout, form: Form, num: E::V, den: E::V) -> E::V {
    match form {
        Form::Group => {
            let inv_k = e.lit(T::one() / T::of(layout.k() as f64));
            e.mul(num, inv_k)
        }
        _ => e.div(num, den),
    }
}

pub(crate) fn formula<T: Scalar, E: Expr<T>>(e: &mut E, layout: &Layout, q: &CompiledQuery) -> E::V {
    match layout.structure() {
        Structure::Standard { .. } => standard(e, layout, q),
        Structure::Relational => relational(e, layout, q),
    }
}

/// `f_q(P)`.
pub fn answer_compiled<T: Scalar>(tables: &ProbTables<T>, q: &CompiledQuery) -> T {
    formula(&mut Eval { probs: tables.probs() }, tables.layout(), q)
}

pub fn answer<T: Scalar>(tables: &ProbTables<T>, q: &Query) -> Result<T, HpdError> {
    Ok(answer_compiled(tables, &compile(tables.layout(), q)?))
}

pub fn answer_all<T: Scalar>(tables: &ProbTables<T>, queries: &[CompiledQuery]) -> Vec<T> {
    queries.par_iter().map(|q| answer_compiled(tables, q)).collect()
}

/// `Σ_i |m_i − f_{q_i}(P)|`.
pub fn loss<T: Scalar>(tables: &ProbTables<T>, queries: &[&CompiledQuery], measured: &[T]) -> T {
    queries
        .iter()
        .zip(measured)
        .fold(T::zero(), |acc, (q, &m)| acc + (m - answer_compiled(tables, q)).abs())
}

/// Loss value and its gradient with respect to the probabilities. Zero
/// residuals contribute nothing.
pub fn loss_grad_probs<T: Scalar>(tables: &ProbTables<T>, queries: &[&CompiledQuery], measured: &[T]) -> (T, Vec<T>) {
    let mut dprobs = vec![T::zero(); tables.probs().len()];
    let mut tape = Tape::new(tables.probs());
    let mut adj = Vec::new();
    let mut total = T::zero();
    for (q, &m) in queries.iter().zip(measured) {
        tape.clear();
        let root = formula(&mut tape, tables.layout(), q);
        let r = m - tape.value(root);
        total = total + r.abs();
        if r != T::zero() {
            // d|m − f|/df = −sign(m − f)
            tape.backward(root, -r.signum(), &mut dprobs, &mut adj);
        }
    }
    (total, dprobs)
}

/// Loss value and its gradient with respect to the logits.
pub fn loss_grad_logits<T: Scalar>(tables: &ProbTables<T>, queries: &[&CompiledQuery], measured: &[T]) -> (T, Vec<T>) {
    let (total, dprobs) = loss_grad_probs(tables, queries, measured);
    (total, super::layout::softmax_backward(tables.layout(), tables.probs(), &dprobs))
}

/// Gradient of a single answer with respect to the logits.
pub fn answer_grad_logits<T: Scalar>(tables: &ProbTables<T>, q: &CompiledQuery) -> Vec<T> {
    let mut dprobs = vec![T::zero(); tables.probs().len()];
    let mut tape = Tape::new(tables.probs());
    let root = formula(&mut tape, tables.layout(), q);
    tape.backward(root, T::one(), &mut dprobs, &mut Vec::new());
    super::layout::softmax_backward(tables.layout(), tables.probs(), &dprobs)
}
