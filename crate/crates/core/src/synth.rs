//! Seeded generators for structured toy datasets.
//!
//! Groups come from a few latent classes, each with its own skewed
//! attribute and size distributions, so marginals are far from uniform and
//! attributes are correlated within a group.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::domain::{AttributeSpec, DomainSchema, GroupRecord, HierarchicalDataset, Level, RelationshipConfig};
use crate::privacy::NoiseSource;

fn skewed(card: usize, rng: &mut NoiseSource) -> Vec<f64> {
    // Dirichlet(0.5, …): mostly mass on one or two categories
    let gamma = Gamma::new(0.5, 1.0).expect("valid gamma");
    let raw: Vec<f64> = (0..card).map(|_| gamma.sample(rng) + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn pick(p: &[f64], rng: &mut NoiseSource) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i as u32;
        }
    }
    (p.len() - 1) as u32
}

struct Class {
    group: Vec<Vec<f64>>,
    size: Vec<f64>,
    /// Per slot, per individual attribute.
    members: Vec<Vec<Vec<f64>>>,
}

fn classes(schema: &DomainSchema, size_card: usize, n_classes: usize, rng: &mut NoiseSource) -> Vec<Class> {
    (0..n_classes)
        .map(|_| Class {
            group: schema.group_attrs().iter().map(|a| skewed(a.cardinality(), rng)).collect(),
            size: skewed(size_card, rng),
            members: (0..schema.max_group_size())
                .map(|_| schema.individual_attrs().iter().map(|a| skewed(a.cardinality(), rng)).collect())
                .collect(),
        })
        .collect()
}

/// Binary-attribute schema with `n_group` group and `n_indiv` individual
/// attributes.
pub fn binary_schema(n_group: usize, n_indiv: usize, max_group_size: usize) -> DomainSchema {
    DomainSchema::new(
        (0..n_group)
            .map(|i| AttributeSpec::new(format!("g{i}"), Level::Group, vec!["a".into(), "b".into()]))
            .collect(),
        (0..n_indiv)
            .map(|i| AttributeSpec::new(format!("i{i}"), Level::Individual, vec!["a".into(), "b".into()]))
            .collect(),
        max_group_size,
        None,
    )
    .expect("valid binary schema")
}

/// `n_groups` groups over a schema without relationship structure.
pub fn latent_class_dataset(schema: &DomainSchema, n_groups: usize, seed: u64) -> HierarchicalDataset {
    assert!(schema.relationship().is_none(), "use household_dataset for relationship schemas");
    let mut rng = NoiseSource::derived(seed, 0x5eed);
    let cls = classes(schema, schema.max_group_size(), 3, &mut rng);
    let groups = (0..n_groups)
        .map(|_| {
            let c = &cls[rng.random_range(0..cls.len())];
            let group_values = c.group.iter().map(|p| pick(p, &mut rng)).collect();
            let m = pick(&c.size, &mut rng) as usize + 1;
            let members = (0..m)
                .map(|j| c.members[j].iter().map(|p| pick(p, &mut rng)).collect())
                .collect();
            GroupRecord::new(group_values, members)
        })
        .collect();
    HierarchicalDataset::new(schema.clone(), groups).expect("generated groups are valid")
}

/// Household schema: relate attribute (head/spouse/child) first, then
/// `n_indiv` binary attributes.
pub fn household_schema(n_group: usize, n_indiv: usize, max_children: usize) -> DomainSchema {
    let mut indiv = vec![AttributeSpec::new(
        "relate",
        Level::Individual,
        vec!["head".into(), "spouse".into(), "child".into()],
    )];
    indiv.extend(
        (0..n_indiv).map(|i| AttributeSpec::new(format!("i{i}"), Level::Individual, vec!["a".into(), "b".into()])),
    );
    DomainSchema::new(
        (0..n_group)
            .map(|i| AttributeSpec::new(format!("g{i}"), Level::Group, vec!["a".into(), "b".into()]))
            .collect(),
        indiv,
        2 + max_children,
        Some(RelationshipConfig {
            relate_attr: 0,
            head_value: 0,
            spouse_value: 1,
            child_value: 2,
            max_children,
        }),
    )
    .expect("valid household schema")
}

/// `n_groups` households: one head, optional spouse, up to `M_c` children.
pub fn household_dataset(schema: &DomainSchema, n_groups: usize, seed: u64) -> HierarchicalDataset {
    let rel = schema.relationship().expect("household schema").clone();
    let mut rng = NoiseSource::derived(seed, 0x5eed);
    // slots 0, 1, 2 hold head, spouse and child attribute distributions
    let cls = classes(schema, rel.max_children + 1, 3, &mut rng);
    let spouse: Vec<f64> = (0..cls.len()).map(|_| rng.random_range(0.2..0.9)).collect();
    let groups = (0..n_groups)
        .map(|_| {
            let ci = rng.random_range(0..cls.len());
            let c = &cls[ci];
            let group_values = c.group.iter().map(|p| pick(p, &mut rng)).collect();
            let person = |slot: usize, value: u32, rng: &mut NoiseSource| {
                let mut m: Vec<u32> = c.members[slot].iter().map(|p| pick(p, rng)).collect();
                m[rel.relate_attr] = value;
                m
            };
            let mut members = vec![person(0, rel.head_value, &mut rng)];
            if rng.random::<f64>() < spouse[ci] {
                members.push(person(1, rel.spouse_value, &mut rng));
            }
            for _ in 0..pick(&c.size, &mut rng) {
                members.push(person(2, rel.child_value, &mut rng));
            }
            GroupRecord::new(group_values, members)
        })
        .collect();
    HierarchicalDataset::new(schema.clone(), groups).expect("generated households are valid")
}
