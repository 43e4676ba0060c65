mod common;

use common::*;
use octgan::eval::{f1_binary, macro_f1, r2, silhouette};
use octgan::model::{sample_condvec, CondLayout};
use octgan::numkit::{layers::one_hot_argmax, Graph, Matrix, RngStream, Stream};
use octgan::odeint::TimePoints;
use octgan::preprocess::{ColumnSpec, TableSchema, Transformer};
use octgan::table::{format_number, Table};
use proptest::prelude::*;

fn mixed_schema() -> TableSchema {
    TableSchema::new(vec![
        ColumnSpec::continuous("u"),
        ColumnSpec::discrete("k", ["a", "b", "c"]),
        ColumnSpec::continuous("v"),
        ColumnSpec::discrete("flag", ["no", "yes"]),
    ])
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn encode_decode_round_trip(
        rows in prop::collection::vec((-50.0f64..50.0, 0usize..3, -1e3f64..1e3, any::<bool>()), 5..40),
        seed in any::<u64>(),
    ) {
        let mut t = Table::new(vec!["u".into(), "k".into(), "v".into(), "flag".into()]);
        for (u, k, v, f) in &rows {
            t.rows.push(vec![format_number(*u), ["a", "b", "c"][*k].into(), format_number(*v), if *f { "yes" } else { "no" }.into()]);
        }
        let mut rng = RngStream::new(seed, Stream::Test);
        let tr = Transformer::fit(&t, &mixed_schema(), 4, &mut rng).unwrap();
        for row in &t.rows {
            let (enc, clipped) = tr.encode_row(row, &mut rng).unwrap();
            let dec = tr.decode_row(&enc).unwrap();
            prop_assert_eq!(&dec[1], &row[1]);
            prop_assert_eq!(&dec[3], &row[3]);
            if clipped == 0 {
                for j in [0, 2] {
                    let a: f64 = dec[j].parse().unwrap();
                    let b: f64 = row[j].parse().unwrap();
                    prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn condition_vectors_are_single_one_hots(n in 1usize..50, seed in any::<u64>()) {
        let layout = CondLayout::new(&mixed_schema());
        let batch = sample_condvec(&layout, n, &mut RngStream::new(seed, Stream::Test));
        for (r, &(s, cat)) in batch.choices.iter().enumerate() {
            let row = batch.c.row(r);
            prop_assert_eq!(row.iter().sum::<f64>(), 1.0);
            let (off, k) = layout.blocks[s];
            prop_assert!(cat < k);
            prop_assert_eq!(row[off + cat], 1.0);
        }
    }

    #[test]
    fn time_points_stay_ordered(
        m in 1usize..6,
        learn_last in any::<bool>(),
        steps in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 6), 0..20),
    ) {
        let mut tp = TimePoints::uniform(m, learn_last).unwrap();
        for g in &steps {
            tp.sgd_step(&g[..m], 0.05).unwrap();
            let t = tp.times();
            prop_assert!(t[0] > 0.0);
            prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(*t.last().unwrap() <= 1.0);
            if !learn_last {
                prop_assert!((t[m - 1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-30.0f64..30.0, 1..24), cols in 1usize..5) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let m = Matrix::from_vec(rows, cols, values[..rows * cols].to_vec()).unwrap();
        let mut g = Graph::new();
        let v = g.constant(m.clone());
        let s = g.softmax(v).unwrap();
        let hot = one_hot_argmax(&m);
        for r in 0..rows {
            prop_assert!((g.value(s).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert_eq!(hot.row(r).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn classification_metrics_match_brute_force(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..20),
    ) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        prop_assert!((f1_binary(&truth, &pred, 1).unwrap() - brute_f1(&truth, &pred, 1)).abs() < 1e-12);
        prop_assert!((macro_f1(&truth, &pred).unwrap() - brute_macro_f1(&truth, &pred)).abs() < 1e-12);
    }

    #[test]
    fn r2_matches_brute_force(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..20)) {
        let truth: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        prop_assert!((r2(&truth, &pred).unwrap() - brute_r2(&truth, &pred)).abs() < 1e-9);
    }

    #[test]
    fn silhouette_matches_brute_force(
        pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0usize..3), 2..20),
    ) {
        let points: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0, p.1]).collect();
        let labels: Vec<usize> = pts.iter().map(|p| p.2).collect();
        let ours = silhouette(&points, &labels).unwrap();
        let brute = brute_silhouette(&points, &labels);
        prop_assert_eq!(ours.is_some(), brute.is_some());
        if let (Some(a), Some(b)) = (ours, brute) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn number_formatting_round_trips(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(format_number(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
    }

    #[test]
    fn csv_round_trips(cells in prop::collection::vec("[a-z ,\"\n]{0,6}", 2..12)) {
        let mut t = Table::new(vec!["p".into(), "q".into()]);
        for pair in cells.chunks_exact(2) {
            t.rows.push(pair.to_vec());
        }
        let text = t.to_csv_string(b',').unwrap();
        let back = Table::from_reader(text.as_bytes(), b',').unwrap();
        prop_assert_eq!(back, t);
    }
}
