//! Hierarchical schemas, datasets and domain arithmetic.
//!
//! A group is a tuple of group-level attribute values plus between 1 and `M`
//! members, each a tuple of individual-level attribute values. Category
//! values are dense `u32` indices; labels only exist at the file boundary.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Largest group-type space [`enumerate_domain`] accepts by default.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema parse error: {0}")]
    SchemaParse(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("M must exceed 1 (got {0})")]
    MaxGroupSize(usize),
    #[error("duplicate attribute name `{0}`")]
    DuplicateAttribute(String),
    #[error("attribute `{0}` has no categories")]
    EmptyAttribute(String),
    #[error("attribute `{attr}` repeats category `{label}`")]
    DuplicateCategory { attr: String, label: String },
    #[error("invalid relationship config: {0}")]
    Relationship(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unknown category `{label}` for attribute `{attr}`")]
    UnknownCategory { attr: String, label: String },
    #[error("group `{group}`: group-level column `{attr}` varies within the group")]
    GroupValueVaries { group: String, attr: String },
    #[error("group `{group}`: group size {size} exceeds M = {max}")]
    GroupTooLarge { group: String, size: usize, max: usize },
    #[error("group `{0}` has no members")]
    EmptyGroup(String),
    #[error("group `{group}`: {reason}")]
    InvalidHousehold { group: String, reason: String },
    #[error("group `{group}`: value {value} out of range for attribute `{attr}`")]
    ValueOutOfRange { group: String, attr: String, value: u32 },
    #[error("domain too large for enumeration: {size} group types exceeds cap {cap}")]
    TooLarge { size: BigUint, cap: u64 },
}

pub type Result<T> = std::result::Result<T, DomainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Group,
    Individual,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSpec {
    pub name: String,
    pub level: Level,
    pub labels: Vec<String>,
}

impl AttributeSpec {
    pub fn new(name: impl Into<String>, level: Level, labels: Vec<String>) -> Self {
        Self {
            name: name.into(),
            level,
            labels,
        }
    }

    /// Attribute with categories labelled `"0"`, `"1"`, ...
    pub fn with_cardinality(name: impl Into<String>, level: Level, cardinality: usize) -> Self {
        Self::new(name, level, (0..cardinality).map(|c| c.to_string()).collect())
    }

    pub fn cardinality(&self) -> usize {
        self.labels.len()
    }

    pub fn index_of(&self, label: &str) -> Option<u32> {
        self.labels.iter().position(|l| l == label).map(|i| i as u32)
    }
}

/// Head/spouse/child household structure. At most one head and one spouse
/// per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationshipConfig {
    pub relate_attr: usize,
    pub head_value: u32,
    pub spouse_value: u32,
    pub child_value: u32,
    pub max_children: usize,
}

impl RelationshipConfig {
    pub const MAX_HEADS: usize = 1;
    pub const MAX_SPOUSES: usize = 1;

    pub fn implied_max_group_size(&self) -> usize {
        Self::MAX_HEADS + Self::MAX_SPOUSES + self.max_children
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct DomainSchema {
    group_attrs: Vec<AttributeSpec>,
    individual_attrs: Vec<AttributeSpec>,
    max_group_size: usize,
    relationship: Option<RelationshipConfig>,
}

impl DomainSchema {
    pub fn new(
        group_attrs: Vec<AttributeSpec>,
        individual_attrs: Vec<AttributeSpec>,
        max_group_size: usize,
        relationship: Option<RelationshipConfig>,
    ) -> Result<Self> {
        let schema = Self::new_unchecked(group_attrs, individual_attrs, max_group_size, relationship);
        schema.validate()?;
        Ok(schema)
    }

    /// Builds a schema without validation. Only the domain arithmetic is
    /// meaningful on such a value.
    pub fn new_unchecked(
        mut group_attrs: Vec<AttributeSpec>,
        mut individual_attrs: Vec<AttributeSpec>,
        max_group_size: usize,
        relationship: Option<RelationshipConfig>,
    ) -> Self {
        for a in &mut group_attrs {
            a.level = Level::Group;
        }
        for a in &mut individual_attrs {
            a.level = Level::Individual;
        }
        Self {
            group_attrs,
            individual_attrs,
            max_group_size,
            relationship,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_group_size <= 1 {
            return Err(DomainError::MaxGroupSize(self.max_group_size));
        }
        let mut names = HashSet::new();
        for attr in self.group_attrs.iter().chain(&self.individual_attrs) {
            if !names.insert(attr.name.as_str()) {
                return Err(DomainError::DuplicateAttribute(attr.name.clone()));
            }
            if attr.labels.is_empty() {
                return Err(DomainError::EmptyAttribute(attr.name.clone()));
            }
            let mut seen = HashSet::new();
            for label in &attr.labels {
                if !seen.insert(label.as_str()) {
                    return Err(DomainError::DuplicateCategory {
                        attr: attr.name.clone(),
                        label: label.clone(),
                    });
                }
            }
        }
        if let Some(rel) = &self.relationship {
            let attr = self.individual_attrs.get(rel.relate_attr).ok_or_else(|| {
                DomainError::Relationship(format!("relate attribute index {} out of range", rel.relate_attr))
            })?;
            let card = attr.cardinality() as u32;
            let values = [rel.head_value, rel.spouse_value, rel.child_value];
            if values.iter().any(|&v| v >= card) {
                return Err(DomainError::Relationship("person type outside relate attribute".into()));
            }
            if values[0] == values[1] || values[0] == values[2] || values[1] == values[2] {
                return Err(DomainError::Relationship(
                    "head, spouse and child values must be distinct".into(),
                ));
            }
            if rel.max_children == 0 {
                return Err(DomainError::Relationship("max_children must be positive".into()));
            }
            if rel.implied_max_group_size() != self.max_group_size {
                return Err(DomainError::Relationship(format!(
                    "max_group_size {} must equal 2 + max_children = {}",
                    self.max_group_size,
                    rel.implied_max_group_size()
                )));
            }
        }
        Ok(())
    }

    pub fn group_attrs(&self) -> &[AttributeSpec] {
        &self.group_attrs
    }

    pub fn individual_attrs(&self) -> &[AttributeSpec] {
        &self.individual_attrs
    }

    pub fn max_group_size(&self) -> usize {
        self.max_group_size
    }

    pub fn relationship(&self) -> Option<&RelationshipConfig> {
        self.relationship.as_ref()
    }

    pub fn attrs(&self, level: Level) -> &[AttributeSpec] {
        match level {
            Level::Group => &self.group_attrs,
            Level::Individual => &self.individual_attrs,
        }
    }

    pub fn group_cardinalities(&self) -> Vec<usize> {
        self.group_attrs.iter().map(AttributeSpec::cardinality).collect()
    }

    pub fn individual_cardinalities(&self) -> Vec<usize> {
        self.individual_attrs.iter().map(AttributeSpec::cardinality).collect()
    }

    /// `d_G`, the number of distinct group-attribute tuples.
    pub fn group_domain(&self) -> BigUint {
        self.group_attrs.iter().map(|a| BigUint::from(a.cardinality())).product()
    }

    /// `d_I`, the number of distinct individual-attribute tuples.
    pub fn individual_domain(&self) -> BigUint {
        self.individual_attrs.iter().map(|a| BigUint::from(a.cardinality())).product()
    }

    /// Stable digest of the schema's JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// `d = d_G (d_I + 1)^M`, the size of the padded universe.
pub fn domain_size(schema: &DomainSchema) -> BigUint {
    let base = schema.individual_domain() + BigUint::one();
    schema.group_domain() * num_traits::pow(base, schema.max_group_size)
}

/// `d_G · Σ_{m=1}^{M} d_I^m`, the number of distinct group types once
/// trailing empty slots are canonicalized.
pub fn group_type_count(schema: &DomainSchema) -> BigUint {
    let d_i = schema.individual_domain();
    let mut total = BigUint::zero();
    let mut power = BigUint::one();
    for _ in 0..schema.max_group_size {
        power *= &d_i;
        total += &power;
    }
    schema.group_domain() * total
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AttributeFile {
    name: String,
    categories: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RelationshipFile {
    attr: String,
    head: String,
    spouse: String,
    child: String,
    max_children: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SchemaFile {
    group_attrs: Vec<AttributeFile>,
    individual_attrs: Vec<AttributeFile>,
    max_group_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relationship: Option<RelationshipFile>,
}

impl TryFrom<SchemaFile> for DomainSchema {
    type Error = DomainError;

    fn try_from(file: SchemaFile) -> Result<Self> {
        let convert = |attrs: Vec<AttributeFile>, level| {
            attrs
                .into_iter()
                .map(|a| AttributeSpec::new(a.name, level, a.categories))
                .collect::<Vec<_>>()
        };
        let group_attrs = convert(file.group_attrs, Level::Group);
        let individual_attrs = convert(file.individual_attrs, Level::Individual);
        let relationship = match file.relationship {
            None => None,
            Some(rel) => {
                let relate_attr = individual_attrs
                    .iter()
                    .position(|a| a.name == rel.attr)
                    .ok_or_else(|| DomainError::Relationship(format!("unknown attribute `{}`", rel.attr)))?;
                let attr = &individual_attrs[relate_attr];
                let lookup = |label: &str| {
                    attr.index_of(label).ok_or_else(|| DomainError::UnknownCategory {
                        attr: attr.name.clone(),
                        label: label.to_string(),
                    })
                };
                Some(RelationshipConfig {
                    relate_attr,
                    head_value: lookup(&rel.head)?,
                    spouse_value: lookup(&rel.spouse)?,
                    child_value: lookup(&rel.child)?,
                    max_children: rel.max_children,
                })
            }
        };
        DomainSchema::new(group_attrs, individual_attrs, file.max_group_size, relationship)
    }
}

impl From<DomainSchema> for SchemaFile {
    fn from(schema: DomainSchema) -> Self {
        let convert = |attrs: &[AttributeSpec]| {
            attrs
                .iter()
                .map(|a| AttributeFile {
                    name: a.name.clone(),
                    categories: a.labels.clone(),
                })
                .collect()
        };
        let relationship = schema.relationship.map(|rel| {
            let attr = &schema.individual_attrs[rel.relate_attr];
            RelationshipFile {
                attr: attr.name.clone(),
                head: attr.labels[rel.head_value as usize].clone(),
                spouse: attr.labels[rel.spouse_value as usize].clone(),
                child: attr.labels[rel.child_value as usize].clone(),
                max_children: rel.max_children,
            }
        });
        SchemaFile {
            group_attrs: convert(&schema.group_attrs),
            individual_attrs: convert(&schema.individual_attrs),
            max_group_size: schema.max_group_size,
            relationship,
        }
    }
}

pub fn parse_schema(reader: impl Read) -> Result<DomainSchema> {
    let file: SchemaFile = serde_json::from_reader(reader)?;
    DomainSchema::try_from(file)
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<DomainSchema> {
    parse_schema(BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupRecord {
    pub group_values: Vec<u32>,
    pub members: Vec<Vec<u32>>,
}

impl GroupRecord {
    pub fn new(group_values: Vec<u32>, members: Vec<Vec<u32>>) -> Self {
        Self { group_values, members }
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalDataset {
    schema: DomainSchema,
    groups: Vec<GroupRecord>,
    group_ids: Vec<String>,
    n_individuals: usize,
}

impl HierarchicalDataset {
    /// Validates every group against the schema. Groups get ids `0, 1, ...`.
    pub fn new(schema: DomainSchema, groups: Vec<GroupRecord>) -> Result<Self> {
        let ids = (0..groups.len()).map(|i| i.to_string()).collect();
        Self::with_ids(schema, groups, ids)
    }

    pub fn with_ids(schema: DomainSchema, groups: Vec<GroupRecord>, group_ids: Vec<String>) -> Result<Self> {
        assert_eq!(groups.len(), group_ids.len(), "one id per group");
        for (group, id) in groups.iter().zip(&group_ids) {
            validate_group(&schema, group, id)?;
        }
        let n_individuals = groups.iter().map(GroupRecord::size).sum();
        debug_assert!(n_individuals >= groups.len());
        Ok(Self {
            schema,
            groups,
            group_ids,
            n_individuals,
        })
    }

    pub fn schema(&self) -> &DomainSchema {
        &self.schema
    }

    pub fn groups(&self) -> &[GroupRecord] {
        &self.groups
    }

    pub fn group_ids(&self) -> &[String] {
        &self.group_ids
    }

    /// `N_G`
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// `N_I`
    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }
}

/// Whether `group` is a legal group of `schema`, including the household
/// rules when a relationship config is present.
pub fn is_valid_group(schema: &DomainSchema, group: &GroupRecord) -> bool {
    validate_group(schema, group, "").is_ok()
}

fn validate_group(schema: &DomainSchema, group: &GroupRecord, id: &str) -> Result<()> {
    let check = |attrs: &[AttributeSpec], values: &[u32]| -> Result<()> {
        if values.len() != attrs.len() {
            return Err(DomainError::InvalidHousehold {
                group: id.to_string(),
                reason: format!("expected {} values, found {}", attrs.len(), values.len()),
            });
        }
        for (attr, &v) in attrs.iter().zip(values) {
            if v as usize >= attr.cardinality() {
                return Err(DomainError::ValueOutOfRange {
                    group: id.to_string(),
                    attr: attr.name.clone(),
                    value: v,
                });
            }
        }
        Ok(())
    };
    check(&schema.group_attrs, &group.group_values)?;
    if group.members.is_empty() {
        return Err(DomainError::EmptyGroup(id.to_string()));
    }
    if group.members.len() > schema.max_group_size {
        return Err(DomainError::GroupTooLarge {
            group: id.to_string(),
            size: group.members.len(),
            max: schema.max_group_size,
        });
    }
    for member in &group.members {
        check(&schema.individual_attrs, member)?;
    }
    if let Some(rel) = &schema.relationship {
        let (mut heads, mut spouses, mut children) = (0, 0, 0);
        for member in &group.members {
            let t = member[rel.relate_attr];
            if t == rel.head_value {
                heads += 1;
            } else if t == rel.spouse_value {
                spouses += 1;
            } else if t == rel.child_value {
                children += 1;
            } else {
                return Err(DomainError::InvalidHousehold {
                    group: id.to_string(),
                    reason: "member is not a head, spouse or child".into(),
                });
            }
        }
        let reason = if heads != 1 {
            Some(format!("expected exactly one head, found {heads}"))
        } else if spouses > RelationshipConfig::MAX_SPOUSES {
            Some(format!("found {spouses} spouses"))
        } else if children > rel.max_children {
            Some(format!("found {children} children, at most {} allowed", rel.max_children))
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(DomainError::InvalidHousehold {
                group: id.to_string(),
                reason,
            });
        }
    }
    Ok(())
}

/// Reads the long CSV format: `group_id`, the group attributes, then the
/// individual attributes; one row per individual. Groups keep the order of
/// their first row, members keep row order.
pub fn read_dataset(schema: &DomainSchema, reader: impl Read) -> Result<HierarchicalDataset> {
    let mut csv = csv::Reader::from_reader(reader);
    let headers = csv.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DomainError::MissingColumn(name.to_string()))
    };
    let id_col = column("group_id")?;
    let group_cols = schema.group_attrs.iter().map(|a| column(&a.name)).collect::<Result<Vec<_>>>()?;
    let indiv_cols = schema
        .individual_attrs
        .iter()
        .map(|a| column(&a.name))
        .collect::<Result<Vec<_>>>()?;

    let resolve = |attr: &AttributeSpec, label: &str| {
        attr.index_of(label).ok_or_else(|| DomainError::UnknownCategory {
            attr: attr.name.clone(),
            label: label.to_string(),
        })
    };

    let mut index: HashMap<String, usize> = HashMap::new();
    let mut ids = Vec::new();
    let mut groups: Vec<GroupRecord> = Vec::new();
    for row in csv.records() {
        let row = row?;
        let id = row.get(id_col).unwrap_or_default().to_string();
        let group_values = schema
            .group_attrs
            .iter()
            .zip(&group_cols)
            .map(|(a, &c)| resolve(a, row.get(c).unwrap_or_default()))
            .collect::<Result<Vec<_>>>()?;
        let member = schema
            .individual_attrs
            .iter()
            .zip(&indiv_cols)
            .map(|(a, &c)| resolve(a, row.get(c).unwrap_or_default()))
            .collect::<Result<Vec<_>>>()?;
        match index.get(&id) {
            Some(&g) => {
                let group = &mut groups[g];
                if let Some(k) = (0..group_values.len()).find(|&k| group.group_values[k] != group_values[k]) {
                    return Err(DomainError::GroupValueVaries {
                        group: id,
                        attr: schema.group_attrs[k].name.clone(),
                    });
                }
                group.members.push(member);
                if group.members.len() > schema.max_group_size {
                    return Err(DomainError::GroupTooLarge {
                        group: id,
                        size: group.members.len(),
                        max: schema.max_group_size,
                    });
                }
            }
            None => {
                index.insert(id.clone(), groups.len());
                ids.push(id);
                groups.push(GroupRecord::new(group_values, vec![member]));
            }
        }
    }
    HierarchicalDataset::with_ids(schema.clone(), groups, ids)
}

pub fn load_dataset(schema: &DomainSchema, path: impl AsRef<Path>) -> Result<HierarchicalDataset> {
    read_dataset(schema, BufReader::new(File::open(path)?))
}

/// Writes `data` in the format accepted by [`read_dataset`].
pub fn write_dataset(data: &HierarchicalDataset, writer: impl Write) -> Result<()> {
    let schema = &data.schema;
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec!["group_id".to_string()];
    header.extend(schema.group_attrs.iter().map(|a| a.name.clone()));
    header.extend(schema.individual_attrs.iter().map(|a| a.name.clone()));
    csv.write_record(&header)?;
    for (group, id) in data.groups.iter().zip(&data.group_ids) {
        for member in &group.members {
            let mut row: Vec<&str> = Vec::with_capacity(header.len());
            row.push(id);
            for (a, &v) in schema.group_attrs.iter().zip(&group.group_values) {
                row.push(&a.labels[v as usize]);
            }
            for (a, &v) in schema.individual_attrs.iter().zip(member) {
                row.push(&a.labels[v as usize]);
            }
            csv.write_record(&row)?;
        }
    }
    csv.flush()?;
    Ok(())
}

pub fn save_dataset(data: &HierarchicalDataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(data, std::io::BufWriter::new(File::create(path)?))
}

// ---------------------------------------------------------------------------
// Enumeration

/// Indexes the canonical group types of a schema.
///
/// Order: group-attribute tuple in mixed radix (first attribute most
/// significant), then group size `m = 1..M`, then the member tuples with
/// slot 1 most significant. Empty slots are always trailing, so each group
/// type has exactly one index.
#[derive(Debug, Clone)]
pub struct GroupTypeSpace {
    group_cards: Vec<usize>,
    indiv_cards: Vec<usize>,
    d_i: usize,
    max_group_size: usize,
    /// `size_offsets[m - 1] = Σ_{m' < m} d_I^{m'}`; last entry is the
    /// per-group-tuple total.
    size_offsets: Vec<usize>,
    len: usize,
}

/// Builds the canonical enumeration, refusing spaces larger than `cap`.
pub fn enumerate_domain(schema: &DomainSchema, cap: u64) -> Result<GroupTypeSpace> {
    let size = group_type_count(schema);
    if size > BigUint::from(cap) {
        return Err(DomainError::TooLarge { size, cap });
    }
    let group_cards = schema.group_cardinalities();
    let indiv_cards = schema.individual_cardinalities();
    let d_g: usize = group_cards.iter().product();
    let d_i: usize = indiv_cards.iter().product();
    let mut size_offsets = Vec::with_capacity(schema.max_group_size + 1);
    let mut acc = 0usize;
    let mut power = 1usize;
    size_offsets.push(0);
    for _ in 0..schema.max_group_size {
        power *= d_i;
        acc += power;
        size_offsets.push(acc);
    }
    Ok(GroupTypeSpace {
        group_cards,
        indiv_cards,
        d_i,
        max_group_size: schema.max_group_size,
        len: d_g * acc,
        size_offsets,
    })
}

fn encode_radix(values: &[u32], cards: &[usize]) -> usize {
    values.iter().zip(cards).fold(0, |acc, (&v, &c)| acc * c + v as usize)
}

fn decode_radix(mut code: usize, cards: &[usize]) -> Vec<u32> {
    let mut out = vec![0u32; cards.len()];
    for (slot, &c) in out.iter_mut().zip(cards).rev() {
        *slot = (code % c) as u32;
        code /= c;
    }
    out
}

impl GroupTypeSpace {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_group_size(&self) -> usize {
        self.max_group_size
    }

    fn per_group_tuple(&self) -> usize {
        self.size_offsets[self.max_group_size]
    }

    pub fn encode(&self, group: &GroupRecord) -> usize {
        let m = group.size();
        debug_assert!((1..=self.max_group_size).contains(&m));
        let g = encode_radix(&group.group_values, &self.group_cards);
        let members = group
            .members
            .iter()
            .fold(0, |acc, member| acc * self.d_i + encode_radix(member, &self.indiv_cards));
        g * self.per_group_tuple() + self.size_offsets[m - 1] + members
    }

    pub fn decode(&self, index: usize) -> GroupRecord {
        assert!(index < self.len, "group type index out of range");
        let per = self.per_group_tuple();
        let group_values = decode_radix(index / per, &self.group_cards);
        let rest = index % per;
        let m = (1..=self.max_group_size)
            .find(|&m| rest < self.size_offsets[m])
            .expect("offset table covers every size");
        let mut code = rest - self.size_offsets[m - 1];
        let mut members = vec![Vec::new(); m];
        for slot in members.iter_mut().rev() {
            *slot = decode_radix(code % self.d_i, &self.indiv_cards);
            code /= self.d_i;
        }
        GroupRecord::new(group_values, members)
    }

    pub fn iter(&self) -> impl Iterator<Item = GroupRecord> + '_ {
        (0..self.len).map(move |i| self.decode(i))
    }
}
