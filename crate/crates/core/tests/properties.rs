mod common;

use num_rational::{BigRational, Ratio};
use proptest::prelude::*;
use rand::Rng;

use hiersynth::domain::{read_dataset, write_dataset, GroupRecord, HierarchicalDataset};
use hiersynth::harness::{read_sweep, write_sweep, Method, SweepRow};
use hiersynth::hpd::layout::{CHILD, HEAD, SPOUSE};
use hiersynth::hpd::{answer, Layout, ProbTables, Structure};
use hiersynth::mwem::{answer_on_histogram, histogram_of, Histogram, HistogramDomain};
use hiersynth::privacy::NoiseSource;
use hiersynth::scalar::to_big;
use hiersynth::workload::{ground_truth, Query, QueryKind, SingletonPredicate, Workload};

use common::*;

fn any_kind(rng: &mut NoiseSource, relational: bool) -> QueryKind {
    match rng.random_range(0..if relational { 3 } else { 2 }) {
        0 => QueryKind::GroupLevel,
        1 => QueryKind::IndividualLevel,
        _ => QueryKind::Relationship(random_relation(rng)),
    }
}

/// Logits (K = 1) that put all mass on `group`. Children of a household
/// share one table, so they must be identical.
fn point_mass(layout: &Layout, group: &GroupRecord) -> Vec<f64> {
    const HIGH: f64 = 40.0;
    let schema = layout.schema();
    let mut logits = vec![0.0; layout.width()];
    for (a, &v) in group.group_values.iter().enumerate() {
        logits[layout.group_col(a, v)] = HIGH;
    }
    let mut set_member = |table: usize, member: &[u32]| {
        for (a, &v) in member.iter().enumerate() {
            if let Some(c) = layout.indiv_col(table, a, v) {
                logits[c] = HIGH;
            }
        }
    };
    match layout.structure() {
        Structure::Standard { .. } => {
            for (slot, m) in group.members.iter().enumerate() {
                set_member(layout.table_of_slot(slot), m);
            }
            logits[layout.size_col(group.size() - 1)] = HIGH;
        }
        Structure::Relational => {
            let rel = schema.relationship().unwrap();
            let of = |code| group.members.iter().filter(move |m| m[rel.relate_attr] == code);
            let children = of(rel.child_value).count();
            for (table, code) in [(HEAD, rel.head_value), (SPOUSE, rel.spouse_value), (CHILD, rel.child_value)] {
                if let Some(m) = of(code).next() {
                    set_member(table, m);
                }
            }
            let spouse = of(rel.spouse_value).count();
            logits[layout.size_col(spouse)] = HIGH;
            logits[layout.size_col(2 + children)] = HIGH;
        }
    }
    logits
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ground_truth_matches_naive_count(seed in any::<u64>(), relational in any::<bool>()) {
        let mut rng = NoiseSource::seeded(seed);
        let schema = random_schema(&mut rng, relational, 4);
        let n = rng.random_range(1..60);
        let data = random_dataset(&mut rng, &schema, n);
        for _ in 0..20 {
            let kind = any_kind(&mut rng, relational);
            let q = random_query(&mut rng, &schema, kind);
            let (num, den) = naive_answer(&q, &data);
            let den = if kind == QueryKind::GroupLevel { data.n_groups() as u64 } else { den };
            prop_assert_eq!(ground_truth(&q, &data), Ratio::new(num, den));
        }
    }

    #[test]
    fn extra_predicates_never_raise_answers(seed in any::<u64>(), relational in any::<bool>()) {
        let mut rng = NoiseSource::seeded(seed);
        let schema = random_schema(&mut rng, relational, 4);
        let data = random_dataset(&mut rng, &schema, 40);
        for _ in 0..20 {
            let kind = any_kind(&mut rng, relational);
            let q = random_query(&mut rng, &schema, kind);
            let mut tighter = q.clone();
            let free: Vec<usize> = (0..schema.individual_attrs().len())
                .filter(|a| !q.indiv_preds.iter().any(|p| p.attr == *a))
                .collect();
            if free.is_empty() {
                continue;
            }
            let a = free[rng.random_range(0..free.len())];
            let card = schema.individual_attrs()[a].cardinality() as u32;
            tighter.indiv_preds.push(SingletonPredicate::individual(a, rng.random_range(0..card)));
            prop_assert!(ground_truth(&tighter, &data) <= ground_truth(&q, &data));
        }
    }

    #[test]
    fn singleton_groups_make_levels_coincide(seed in any::<u64>()) {
        let mut rng = NoiseSource::seeded(seed);
        let schema = random_schema(&mut rng, false, 3);
        let groups = (0..30)
            .map(|_| {
                let g = random_group(&mut rng, &schema);
                GroupRecord::new(g.group_values, vec![g.members[0].clone()])
            })
            .collect();
        let data = HierarchicalDataset::new(schema.clone(), groups).unwrap();
        for _ in 0..20 {
            let q = random_query(&mut rng, &schema, QueryKind::GroupLevel);
            let qi = Query::individual_level(q.group_preds.clone(), q.indiv_preds.clone());
            prop_assert_eq!(ground_truth(&q, &data), ground_truth(&qi, &data));
        }
    }

    #[test]
    fn exact_histogram_reproduces_data(seed in any::<u64>(), relational in any::<bool>()) {
        let mut rng = NoiseSource::seeded(seed);
        let schema = random_schema(&mut rng, relational, 3);
        let n = rng.random_range(1..80);
        let data = random_dataset(&mut rng, &schema, n);
        let domain = HistogramDomain::new(&schema, 1_000_000).unwrap();
        let hist: Histogram<BigRational> = histogram_of(&data, &domain);
        prop_assert_eq!(hist.sum(), BigRational::from_integer(1.into()));
        for _ in 0..20 {
            let kind = any_kind(&mut rng, false);
            let q = random_query(&mut rng, &schema, kind);
            prop_assert_eq!(answer_on_histogram(&q, &hist, &domain).unwrap(), to_big(&ground_truth(&q, &data)));
        }
    }

    #[test]
    fn point_mass_tables_answer_like_their_group(seed in any::<u64>(), relational in any::<bool>()) {
        let mut rng = NoiseSource::seeded(seed);
        let schema = random_schema(&mut rng, relational, 3);
        let group = random_group(&mut rng, &schema);
        let data = HierarchicalDataset::new(schema.clone(), vec![group.clone()]).unwrap();
        let layout = Layout::new(&schema, 1, None).unwrap();
        let tables = ProbTables::from_logits(layout.clone(), point_mass(&layout, &group));
        for _ in 0..30 {
            let kind = any_kind(&mut rng, relational);
            let q = random_query(&mut rng, &schema, kind);
            let (num, den) = naive_answer(&q, &data);
            let expected = num as f64 / den as f64;
            let got = answer(&tables, &q).unwrap();
            prop_assert!((got - expected).abs() < 1e-9, "{q:?}: {got} vs {expected}");
        }
    }

    #[test]
    fn answers_are_probabilities_in_both_precisions(seed in any::<u64>(), relational in any::<bool>()) {
        let mut rng = NoiseSource::seeded(seed);
        let schema = random_schema(&mut rng, relational, 3);
        let layout = Layout::new(&schema, rng.random_range(1..=4), None).unwrap();
        let logits: Vec<f64> = (0..layout.n_params()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t64 = ProbTables::from_logits(layout.clone(), logits.clone());
        let t32 = ProbTables::from_logits(layout, logits.iter().map(|&x| x as f32).collect());
        for _ in 0..30 {
            let kind = any_kind(&mut rng, relational);
            let q = random_query(&mut rng, &schema, kind);
            let a = answer(&t64, &q).unwrap();
            let b = answer(&t32, &q).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a), "{q:?}: {a}");
            prop_assert!((a - b as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn files_round_trip(seed in any::<u64>(), relational in any::<bool>()) {
        let mut rng = NoiseSource::seeded(seed);
        let schema = random_schema(&mut rng, relational, 3);
        let data = random_dataset(&mut rng, &schema, 25);
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let back = read_dataset(&schema, buf.as_slice()).unwrap();
        prop_assert_eq!(back.groups(), data.groups());

        let queries = (0..10).map(|_| {
            let kind = any_kind(&mut rng, relational);
            random_query(&mut rng, &schema, kind)
        }).collect();
        let w = Workload::new(schema.clone(), 2, queries).unwrap();
        let mut buf = Vec::new();
        w.write_json(&mut buf).unwrap();
        prop_assert_eq!(Workload::read_json(buf.as_slice()).unwrap(), w);

        let rows: Vec<SweepRow> = (0..6).map(|i| SweepRow {
            method: Method::ALL[i % 3],
            epsilon: rng.random_range(0.01..2.0),
            seed: i as u64,
            max_error: rng.random(),
            mean_error: rng.random(),
        }).collect();
        let mut buf = Vec::new();
        write_sweep(&rows, &mut buf).unwrap();
        prop_assert_eq!(read_sweep(buf.as_slice()).unwrap(), rows);
    }
}
