//! Hierarchical counting queries: construction, exact answers, sensitivity.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainSchema, GroupRecord, HierarchicalDataset, Level, RelationshipConfig};
use crate::scalar::Rational;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("k must be between 1 and {max} (got {k})")]
    BadWay { k: usize, max: usize },
    #[error("relationship queries need a schema with a relationship config")]
    NoRelationship,
    #[error("workload schema does not match the dataset schema")]
    SchemaMismatch,
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, WorkloadError>;

/// Fixes one attribute to one category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SingletonPredicate {
    pub level: Level,
    pub attr: usize,
    pub value: u32,
}

impl SingletonPredicate {
    pub fn group(attr: usize, value: u32) -> Self {
        Self {
            level: Level::Group,
            attr,
            value,
        }
    }

    pub fn individual(attr: usize, value: u32) -> Self {
        Self {
            level: Level::Individual,
            attr,
            value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    MarriedTo,
    HasChild,
    HasParent,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::MarriedTo, Relation::HasChild, Relation::HasParent];
}

/// Household role of a member under a [`RelationshipConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PersonType {
    Head,
    Spouse,
    Child,
}

impl PersonType {
    pub fn of(member: &[u32], rel: &RelationshipConfig) -> Option<Self> {
        let t = member[rel.relate_attr];
        if t == rel.head_value {
            Some(Self::Head)
        } else if t == rel.spouse_value {
            Some(Self::Spouse)
        } else if t == rel.child_value {
            Some(Self::Child)
        } else {
            None
        }
    }

    pub fn value(self, rel: &RelationshipConfig) -> u32 {
        match self {
            Self::Head => rel.head_value,
            Self::Spouse => rel.spouse_value,
            Self::Child => rel.child_value,
        }
    }
}

impl Relation {
    /// Person types related to a reference person of type `reference`;
    /// empty when `reference` is not counted by this relation.
    pub fn related_to(self, reference: PersonType) -> &'static [PersonType] {
        use PersonType::*;
        match (self, reference) {
            (Relation::MarriedTo, Head) => &[Spouse],
            (Relation::MarriedTo, Spouse) => &[Head],
            (Relation::HasChild, Head | Spouse) => &[Child],
            (Relation::HasParent, Child) => &[Head, Spouse],
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    GroupLevel,
    IndividualLevel,
    Relationship(Relation),
}

/// Query classes requested from [`build_workload`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryClass {
    Group,
    Individual,
    Relationship,
}

impl std::str::FromStr for QueryClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "g" | "group" => Ok(Self::Group),
            "i" | "individual" => Ok(Self::Individual),
            "r" | "relationship" => Ok(Self::Relationship),
            other => Err(format!("unknown query class `{other}` (expected g, i or r)")),
        }
    }
}

/// A conjunction of singleton predicates tagged with its counting level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub kind: QueryKind,
    #[serde(default)]
    pub group_preds: Vec<SingletonPredicate>,
    #[serde(default)]
    pub indiv_preds: Vec<SingletonPredicate>,
    /// Predicates on the related person; relationship queries only.
    #[serde(default)]
    pub rel_preds: Vec<SingletonPredicate>,
}

impl Query {
    pub fn group_level(group_preds: Vec<SingletonPredicate>, indiv_preds: Vec<SingletonPredicate>) -> Self {
        Self {
            kind: QueryKind::GroupLevel,
            group_preds,
            indiv_preds,
            rel_preds: Vec::new(),
        }
    }

    pub fn individual_level(group_preds: Vec<SingletonPredicate>, indiv_preds: Vec<SingletonPredicate>) -> Self {
        Self {
            kind: QueryKind::IndividualLevel,
            group_preds,
            indiv_preds,
            rel_preds: Vec::new(),
        }
    }

    pub fn relationship(
        relation: Relation,
        group_preds: Vec<SingletonPredicate>,
        indiv_preds: Vec<SingletonPredicate>,
        rel_preds: Vec<SingletonPredicate>,
    ) -> Self {
        Self {
            kind: QueryKind::Relationship(relation),
            group_preds,
            indiv_preds,
            rel_preds,
        }
    }

    /// Total number of singleton predicates.
    pub fn way(&self) -> usize {
        self.group_preds.len() + self.indiv_preds.len() + self.rel_preds.len()
    }

    pub fn normalizer(&self) -> Normalizer {
        match self.kind {
            QueryKind::GroupLevel => Normalizer::Groups,
            _ => Normalizer::Individuals,
        }
    }

    pub fn validate(&self, schema: &DomainSchema) -> Result<()> {
        let check = |preds: &[SingletonPredicate], level: Level, what: &str| -> Result<()> {
            let attrs = schema.attrs(level);
            let mut seen = Vec::new();
            for p in preds {
                if p.level != level {
                    return Err(WorkloadError::InvalidQuery(format!("{what} predicate has the wrong level")));
                }
                let attr = attrs
                    .get(p.attr)
                    .ok_or_else(|| WorkloadError::InvalidQuery(format!("{what} attribute {} out of range", p.attr)))?;
                if p.value as usize >= attr.cardinality() {
                    return Err(WorkloadError::InvalidQuery(format!(
                        "value {} out of range for `{}`",
                        p.value, attr.name
                    )));
                }
                if seen.contains(&p.attr) {
                    return Err(WorkloadError::InvalidQuery(format!("`{}` repeated", attr.name)));
                }
                seen.push(p.attr);
            }
            Ok(())
        };
        check(&self.group_preds, Level::Group, "group")?;
        check(&self.indiv_preds, Level::Individual, "individual")?;
        check(&self.rel_preds, Level::Individual, "related-person")?;
        match self.kind {
            QueryKind::Relationship(_) => {
                if schema.relationship().is_none() {
                    return Err(WorkloadError::NoRelationship);
                }
                if self.rel_preds.is_empty() {
                    return Err(WorkloadError::InvalidQuery(
                        "relationship query needs a related-person predicate".into(),
                    ));
                }
            }
            _ if !self.rel_preds.is_empty() => {
                return Err(WorkloadError::InvalidQuery(
                    "related-person predicates on a non-relationship query".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalizer {
    /// `N_G`
    Groups,
    /// `N_I`
    Individuals,
}

/// Public counts that fix query sensitivities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataCounts {
    pub n_groups: u64,
    pub n_individuals: u64,
    pub max_children: u64,
}

impl DataCounts {
    pub fn of(data: &HierarchicalDataset) -> Self {
        Self {
            n_groups: data.n_groups() as u64,
            n_individuals: data.n_individuals() as u64,
            max_children: data.schema().relationship().map_or(0, |r| r.max_children as u64),
        }
    }
}

/// ℓ1-sensitivity of a single query under fixed `N_G`, `N_I` and `M`.
pub fn sensitivity(q: &Query, counts: DataCounts) -> Rational {
    match q.kind {
        QueryKind::GroupLevel => Rational::new(1, counts.n_groups),
        QueryKind::IndividualLevel => Rational::new(1, counts.n_individuals),
        QueryKind::Relationship(Relation::MarriedTo | Relation::HasChild) => Rational::new(2, counts.n_individuals),
        QueryKind::Relationship(Relation::HasParent) => Rational::new(counts.max_children, counts.n_individuals),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub schema: DomainSchema,
    pub k: usize,
    pub queries: Vec<Query>,
}

impl Workload {
    pub fn new(schema: DomainSchema, k: usize, queries: Vec<Query>) -> Result<Self> {
        for q in &queries {
            q.validate(&schema)?;
        }
        Ok(Self { schema, k, queries })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn normalizers(&self) -> Vec<Normalizer> {
        self.queries.iter().map(Query::normalizer).collect()
    }

    /// `Δ = max_q Δ_1(q)`
    pub fn max_sensitivity(&self, counts: DataCounts) -> Rational {
        self.queries
            .iter()
            .map(|q| sensitivity(q, counts))
            .max()
            .unwrap_or_else(|| Rational::new(0, 1))
    }

    pub fn has_relationship_queries(&self) -> bool {
        self.queries
            .iter()
            .any(|q| matches!(q.kind, QueryKind::Relationship(_)))
    }

    /// Concatenates workloads over the same schema.
    pub fn union(mut self, other: Workload) -> Result<Self> {
        if self.schema != other.schema {
            return Err(WorkloadError::SchemaMismatch);
        }
        self.k = self.k.max(other.k);
        self.queries.extend(other.queries);
        Ok(self)
    }

    pub fn write_json(&self, writer: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    pub fn read_json(reader: impl Read) -> Result<Self> {
        let w: Workload = serde_json::from_reader(reader)?;
        Self::new(w.schema, w.k, w.queries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_json(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_json(BufReader::new(File::open(path)?))
    }
}

/// Every `k`-way conjunction over the schema's attributes, once per
/// requested class.
///
/// Group and individual queries range over all attribute subsets `S` with
/// `|S| = k`. Relationship queries exclude the relate attribute and emit one
/// query per relation per split of the individual attributes in `S` into a
/// reference part and a nonempty related-person part.
pub fn build_workload(schema: &DomainSchema, k: usize, classes: &[QueryClass]) -> Result<Workload> {
    let n_attrs = schema.group_attrs().len() + schema.individual_attrs().len();
    if k == 0 || k > n_attrs {
        return Err(WorkloadError::BadWay { k, max: n_attrs });
    }
    let all: Vec<(Level, usize)> = (0..schema.group_attrs().len())
        .map(|a| (Level::Group, a))
        .chain((0..schema.individual_attrs().len()).map(|a| (Level::Individual, a)))
        .collect();
    let card = |&(level, attr): &(Level, usize)| schema.attrs(level)[attr].cardinality() as u32;

    let mut queries = Vec::new();
    for class in classes.iter().copied().unique() {
        match class {
            QueryClass::Group | QueryClass::Individual => {
                for subset in all.iter().combinations(k) {
                    for values in subset.iter().map(|a| 0..card(a)).multi_cartesian_product() {
                        let (g, i) = split_preds(&subset, &values);
                        queries.push(if class == QueryClass::Group {
                            Query::group_level(g, i)
                        } else {
                            Query::individual_level(g, i)
                        });
                    }
                }
            }
            QueryClass::Relationship => {
                let rel = schema.relationship().ok_or(WorkloadError::NoRelationship)?;
                let selectable: Vec<_> = all
                    .iter()
                    .copied()
                    .filter(|&(level, attr)| !(level == Level::Individual && attr == rel.relate_attr))
                    .collect();
                if k > selectable.len() {
                    return Err(WorkloadError::BadWay {
                        k,
                        max: selectable.len(),
                    });
                }
                for subset in selectable.iter().combinations(k) {
                    let indiv: Vec<usize> = (0..subset.len())
                        .filter(|&p| subset[p].0 == Level::Individual)
                        .collect();
                    if indiv.is_empty() {
                        continue;
                    }
                    for values in subset.iter().map(|a| 0..card(a)).multi_cartesian_product() {
                        // bit set => predicate applies to the related person
                        for mask in 1u32..(1 << indiv.len()) {
                            let mut group_preds = Vec::new();
                            let mut indiv_preds = Vec::new();
                            let mut rel_preds = Vec::new();
                            for (p, &&(level, attr)) in subset.iter().enumerate() {
                                let value = values[p];
                                match level {
                                    Level::Group => group_preds.push(SingletonPredicate::group(attr, value)),
                                    Level::Individual => {
                                        let bit = indiv.iter().position(|&x| x == p).unwrap();
                                        let pred = SingletonPredicate::individual(attr, value);
                                        if mask & (1 << bit) != 0 {
                                            rel_preds.push(pred);
                                        } else {
                                            indiv_preds.push(pred);
                                        }
                                    }
                                }
                            }
                            for relation in Relation::ALL {
                                queries.push(Query::relationship(
                                    relation,
                                    group_preds.clone(),
                                    indiv_preds.clone(),
                                    rel_preds.clone(),
                                ));
                            }
                        }
                    }
                }
            }
        }
    }
    Workload::new(schema.clone(), k, queries)
}

fn split_preds(subset: &[&(Level, usize)], values: &[u32]) -> (Vec<SingletonPredicate>, Vec<SingletonPredicate>) {
    let mut g = Vec::new();
    let mut i = Vec::new();
    for (&&(level, attr), &value) in subset.iter().zip(values) {
        match level {
            Level::Group => g.push(SingletonPredicate::group(attr, value)),
            Level::Individual => i.push(SingletonPredicate::individual(attr, value)),
        }
    }
    (g, i)
}

// ---------------------------------------------------------------------------
// Exact evaluation

pub(crate) fn matches(values: &[u32], preds: &[SingletonPredicate]) -> bool {
    preds.iter().all(|p| values[p.attr] == p.value)
}

/// Contribution of one group to the query's (unnormalized) count.
pub fn count_in_group(q: &Query, group: &GroupRecord, rel: Option<&RelationshipConfig>) -> u64 {
    if !matches(&group.group_values, &q.group_preds) {
        return 0;
    }
    match q.kind {
        QueryKind::GroupLevel => group.members.iter().any(|m| matches(m, &q.indiv_preds)) as u64,
        QueryKind::IndividualLevel => group.members.iter().filter(|m| matches(m, &q.indiv_preds)).count() as u64,
        QueryKind::Relationship(relation) => {
            let Some(rel) = rel else { return 0 };
            group
                .members
                .iter()
                .filter(|reference| {
                    let Some(ty) = PersonType::of(reference, rel) else {
                        return false;
                    };
                    let related = relation.related_to(ty);
                    !related.is_empty()
                        && matches(reference, &q.indiv_preds)
                        && group.members.iter().any(|other| {
                            PersonType::of(other, rel).is_some_and(|t| related.contains(&t))
                                && matches(other, &q.rel_preds)
                        })
                })
                .count() as u64
        }
    }
}

pub fn ground_truth(q: &Query, data: &HierarchicalDataset) -> Rational {
    let rel = data.schema().relationship();
    let count: u64 = data.groups().iter().map(|g| count_in_group(q, g, rel)).sum();
    let denom = match q.normalizer() {
        Normalizer::Groups => data.n_groups(),
        Normalizer::Individuals => data.n_individuals(),
    } as u64;
    Rational::new(count, denom)
}

/// Exact answers to every workload query on `data`.
pub fn evaluate_ground_truth(workload: &Workload, data: &HierarchicalDataset) -> Result<Vec<Rational>> {
    if &workload.schema != data.schema() {
        return Err(WorkloadError::SchemaMismatch);
    }
    Ok(workload.queries.par_iter().map(|q| ground_truth(q, data)).collect())
}

/// Writes `query_id,answer` rows.
pub fn write_answers(answers: &[f64], writer: impl Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["query_id", "answer"])?;
    for (i, a) in answers.iter().enumerate() {
        csv.write_record([i.to_string(), a.to_string()])?;
    }
    csv.flush()?;
    Ok(())
}
