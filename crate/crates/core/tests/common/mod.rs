//! Random schemas, datasets and queries plus the independent oracles the
//! integration tests compare against.

#![allow(dead_code)]

use hiersynth::domain::{AttributeSpec, DomainSchema, GroupRecord, HierarchicalDataset, Level, RelationshipConfig};
use hiersynth::workload::{Query, QueryKind, Relation, SingletonPredicate};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn attrs(prefix: &str, level: Level, cards: &[usize]) -> Vec<AttributeSpec> {
    cards
        .iter()
        .enumerate()
        .map(|(i, &c)| AttributeSpec::with_cardinality(format!("{prefix}{i}"), level, c))
        .collect()
}

/// 1–2 group and 1–2 individual attributes of cardinality 2–3, `M ≤ max_m`.
/// Relational schemas add a relate attribute at a random position with
/// permuted head/spouse/child codes, keep the others binary and use `M = 3`
/// (one child).
pub fn random_schema(rng: &mut impl Rng, relational: bool, max_m: usize) -> DomainSchema {
    let group: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=3)).collect();
    let top = if relational { 2 } else { 3 };
    let mut indiv: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=top)).collect();
    if !relational {
        let m = rng.random_range(2..=max_m.max(2));
        return DomainSchema::new(attrs("g", Level::Group, &group), attrs("i", Level::Individual, &indiv), m, None)
            .expect("valid random schema");
    }
    let at = rng.random_range(0..=indiv.len());
    indiv.insert(at, 3);
    let mut codes = [0u32, 1, 2];
    codes.shuffle(rng);
    let rel = RelationshipConfig {
        relate_attr: at,
        head_value: codes[0],
        spouse_value: codes[1],
        child_value: codes[2],
        max_children: 1,
    };
    DomainSchema::new(attrs("g", Level::Group, &group), attrs("i", Level::Individual, &indiv), 3, Some(rel))
        .expect("valid relational schema")
}

fn random_values(rng: &mut impl Rng, specs: &[AttributeSpec]) -> Vec<u32> {
    specs.iter().map(|a| rng.random_range(0..a.cardinality() as u32)).collect()
}

pub fn random_group(rng: &mut impl Rng, schema: &DomainSchema) -> GroupRecord {
    let group_values = random_values(rng, schema.group_attrs());
    let indiv = schema.individual_attrs();
    let members = match schema.relationship() {
        None => {
            let m = rng.random_range(1..=schema.max_group_size());
            (0..m).map(|_| random_values(rng, indiv)).collect()
        }
        Some(rel) => {
            let person = |code: u32, rng: &mut _| {
                let mut v = random_values(rng, indiv);
                v[rel.relate_attr] = code;
                v
            };
            let mut members = vec![person(rel.head_value, rng)];
            if rng.random_bool(0.5) {
                members.push(person(rel.spouse_value, rng));
            }
            for _ in 0..rng.random_range(0..=rel.max_children) {
                members.push(person(rel.child_value, rng));
            }
            members.shuffle(rng);
            members
        }
    };
    GroupRecord::new(group_values, members)
}

pub fn random_dataset(rng: &mut impl Rng, schema: &DomainSchema, n_groups: usize) -> HierarchicalDataset {
    let groups = (0..n_groups).map(|_| random_group(rng, schema)).collect();
    HierarchicalDataset::new(schema.clone(), groups).expect("random groups are valid")
}

fn random_preds(rng: &mut impl Rng, specs: &[AttributeSpec], level: Level, p: f64) -> Vec<SingletonPredicate> {
    let mut out = Vec::new();
    for (a, spec) in specs.iter().enumerate() {
        if rng.random_bool(p) {
            let v = rng.random_range(0..spec.cardinality() as u32);
            out.push(match level {
                Level::Group => SingletonPredicate::group(a, v),
                Level::Individual => SingletonPredicate::individual(a, v),
            });
        }
    }
    out
}

/// Random query of the given kind; every attribute (the relate attribute
/// included) is constrained with probability one half.
pub fn random_query(rng: &mut impl Rng, schema: &DomainSchema, kind: QueryKind) -> Query {
    let g = random_preds(rng, schema.group_attrs(), Level::Group, 0.5);
    let i = random_preds(rng, schema.individual_attrs(), Level::Individual, 0.5);
    match kind {
        QueryKind::GroupLevel => Query::group_level(g, i),
        QueryKind::IndividualLevel => Query::individual_level(g, i),
        QueryKind::Relationship(r) => {
            let mut rel = Vec::new();
            while rel.is_empty() {
                rel = random_preds(rng, schema.individual_attrs(), Level::Individual, 0.5);
            }
            Query::relationship(r, g, i, rel)
        }
    }
}

pub fn random_relation(rng: &mut impl Rng) -> Relation {
    Relation::ALL[rng.random_range(0..3)]
}

// ---------------------------------------------------------------------------
// Oracles

fn holds(values: &[u32], preds: &[SingletonPredicate]) -> bool {
    preds.iter().all(|p| values[p.attr] == p.value)
}

/// Person-type pairs `(reference, related)` counted by each relation, as
/// listed in the relationship table: `h`, `s`, `c` are head, spouse, child.
fn pairs(relation: Relation) -> &'static [(char, char)] {
    match relation {
        Relation::MarriedTo => &[('h', 's'), ('s', 'h')],
        Relation::HasChild => &[('h', 'c'), ('s', 'c')],
        Relation::HasParent => &[('c', 'h'), ('c', 's')],
    }
}

/// Numerator and denominator contribution of one group, written directly
/// from the query definitions.
pub fn naive_count(q: &Query, schema: &DomainSchema, group: &GroupRecord) -> (u64, u64) {
    let denom = match q.kind {
        QueryKind::GroupLevel => 1,
        _ => group.members.len() as u64,
    };
    if !holds(&group.group_values, &q.group_preds) {
        return (0, denom);
    }
    let num = match q.kind {
        QueryKind::GroupLevel => u64::from(group.members.iter().any(|m| holds(m, &q.indiv_preds))),
        QueryKind::IndividualLevel => group.members.iter().filter(|m| holds(m, &q.indiv_preds)).count() as u64,
        QueryKind::Relationship(relation) => {
            let rel = schema.relationship().expect("relationship schema");
            let ty = |m: &Vec<u32>| {
                let v = m[rel.relate_attr];
                if v == rel.head_value {
                    'h'
                } else if v == rel.spouse_value {
                    's'
                } else {
                    'c'
                }
            };
            let mut n = 0;
            for (a, x) in group.members.iter().enumerate() {
                if !holds(x, &q.indiv_preds) {
                    continue;
                }
                let related = group.members.iter().enumerate().any(|(b, y)| {
                    a != b && pairs(relation).contains(&(ty(x), ty(y))) && holds(y, &q.rel_preds)
                });
                n += u64::from(related);
            }
            n
        }
    };
    (num, denom)
}

/// `(numerator, denominator)` of `q` on a whole dataset.
pub fn naive_answer(q: &Query, data: &HierarchicalDataset) -> (u64, u64) {
    data.groups()
        .iter()
        .map(|g| naive_count(q, data.schema(), g))
        .fold((0, 0), |(a, b), (x, y)| (a + x, b + y))
}

/// Ratio estimate `Σx / Σy` over sampled groups and its delta-method
/// standard error.
pub fn ratio_estimate(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let r = sx / sy;
    let ss: f64 = xs.iter().zip(ys).map(|(x, y)| (x - r * y).powi(2)).sum();
    let se = (ss / (n - 1.0) * n).sqrt() / sy;
    (r, se)
}

/// Central finite differences of `f` at `x`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i − b_i| / max(‖b‖∞, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = b.iter().fold(floor, |m, x| m.max(x.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
