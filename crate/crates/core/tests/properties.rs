use std::collections::BTreeSet;

use amr_core::corpus::{load_records, split_by_query, write_records, AspectSchema, Record, RecordKind};
use amr_core::eval::{search, EmbeddingMatrix};
use proptest::prelude::*;

fn matrix(prefix: &str, rows: &[Vec<f32>]) -> EmbeddingMatrix {
    let dim = rows.first().map_or(0, Vec::len);
    EmbeddingMatrix::new(
        (0..rows.len()).map(|i| format!("{prefix}{i:03}")).collect(),
        dim,
        rows.concat(),
    )
    .unwrap()
}

fn embeddings(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-4i8..=4, dim).prop_map(|v| v.into_iter().map(f32::from).collect()), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn search_ignores_item_order_and_positive_scaling(
        items in embeddings(12, 3),
        queries in embeddings(3, 3),
        perm_seed in any::<u64>(),
    ) {
        let base = search(&matrix("q", &queries), &matrix("d", &items), 5, "a").unwrap();

        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut s = perm_seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let shuffled = EmbeddingMatrix::new(
            order.iter().map(|&i| format!("d{i:03}")).collect(),
            3,
            order.iter().flat_map(|&i| items[i].clone()).collect(),
        ).unwrap();
        let scaled: Vec<Vec<f32>> = queries.iter().map(|q| q.iter().map(|x| x * 4.0).collect()).collect();
        let other = search(&matrix("q", &scaled), &shuffled, 5, "a").unwrap();

        for ((qa, ra), (qb, rb)) in base.rankings.iter().zip(&other.rankings) {
            prop_assert_eq!(qa, qb);
            let ids_a: Vec<&str> = ra.iter().map(|s| s.item_id.as_str()).collect();
            let ids_b: Vec<&str> = rb.iter().map(|s| s.item_id.as_str()).collect();
            prop_assert_eq!(ids_a, ids_b);
        }
    }

    #[test]
    fn splits_partition_the_queries(n in 3usize..200, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("q{i}")).collect();
        let split = split_by_query(&ids, [0.8, 0.1, 0.1], seed).unwrap();
        let (train, val, test) = (split.train_set(), split.val_set(), split.test_set());
        prop_assert_eq!(train.len() + val.len() + test.len(), n);
        prop_assert!(!train.is_empty() && !val.is_empty() && !test.is_empty());
        prop_assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
        let all: BTreeSet<String> = train.union(&val).chain(test.iter()).cloned().collect();
        prop_assert_eq!(all, ids.into_iter().collect::<BTreeSet<_>>());
    }

    #[test]
    fn records_survive_a_file_round_trip(
        rows in prop::collection::vec(("[a-z ]{0,20}", "[a-z]{0,6}", "[a-z]{0,6}"), 1..20),
    ) {
        let schema = AspectSchema::new(["brand", "color"]).unwrap();
        let records: Vec<Record> = rows
            .iter()
            .enumerate()
            .map(|(i, (content, brand, color))| {
                Record::new(format!("r{i}"), RecordKind::Query, content.clone())
                    .with_aspect("brand", brand.clone())
                    .with_aspect("color", color.clone())
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        write_records(&path, &records).unwrap();
        let back = load_records(&path, RecordKind::Query, &schema).unwrap();
        prop_assert_eq!(back, records);
    }
}
