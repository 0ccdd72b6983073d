use std::path::Path;

use chrono::NaiveDate;
use proptest::prelude::*;

use demandnet::baseline::{knn_predict, weekday_trend, ForestConfig, LabeledStation, RandomForest};
use demandnet::config::RunConfig;
use demandnet::data::DateWindow;
use demandnet::eval::{error_rate, rmse};
use demandnet::graph::{graph_function, soft_cosine};
use demandnet::Tensor;

/// Symmetric non-negative matrix with unit diagonal, from upper-triangle draws.
fn adjacency(n: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(0.0f64..1.0, n * (n - 1) / 2).prop_map(move |upper| {
        let mut a = Tensor::identity(n);
        let mut it = upper.into_iter();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = it.next().unwrap();
                a.set(i, j, v);
                a.set(j, i, v);
            }
        }
        a
    })
}

fn sized_adjacency() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..9).prop_flat_map(adjacency)
}

fn pairs(len: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..20.0, n),
            prop::collection::vec(0.01f64..20.0, n),
        )
    })
}

fn labeled(features: usize) -> impl Strategy<Value = Vec<LabeledStation>> {
    prop::collection::vec(
        (
            prop::collection::vec(-3.0f64..3.0, features),
            prop::array::uniform7(0.0f64..10.0),
        )
            .prop_map(|(features, expected)| LabeledStation { features, expected }),
        2..20,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_graph_is_symmetric_and_bounded(a in sized_adjacency()) {
        let f = graph_function(&a).unwrap();
        let n = a.rows();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(f.get(i, j).to_bits(), f.get(j, i).to_bits());
                prop_assert!((0.0..=1.0 + 1e-12).contains(&f.get(i, j)));
            }
        }
        // Rayleigh quotient along the all-ones vector stays within the spectral bound
        let ones = Tensor::matrix(n, 1, vec![1.0; n]).unwrap();
        let q: f64 = f.matmul(&ones).unwrap().data().iter().sum::<f64>() / n as f64;
        prop_assert!(q <= 1.0 + 1e-12);
    }

    #[test]
    fn normalization_commutes_with_relabeling(a in sized_adjacency(), seed in any::<u64>()) {
        let n = a.rows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let direct = graph_function(&a).unwrap().permute_symmetric(&perm);
        let moved = graph_function(&a.permute_symmetric(&perm)).unwrap();
        prop_assert!(direct.max_abs_diff(&moved) < 1e-12);
    }

    #[test]
    fn soft_cosine_is_a_bounded_symmetric_similarity(
        (u, v) in (1usize..8).prop_flat_map(|p| (prop::collection::vec(0.0f64..5.0, p), prop::collection::vec(0.0f64..5.0, p))),
    ) {
        let s = Tensor::identity(u.len());
        let uv = soft_cosine(&u, &v, &s).unwrap();
        prop_assert!((0.0..=1.0).contains(&uv));
        prop_assert_eq!(uv, soft_cosine(&v, &u, &s).unwrap());
        if u.iter().any(|&x| x > 1e-9) {
            prop_assert!((soft_cosine(&u, &u, &s).unwrap() - 1.0).abs() < 1e-12);
            let scaled: Vec<f64> = u.iter().map(|x| 3.5 * x).collect();
            prop_assert!((soft_cosine(&u, &scaled, &s).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_are_non_negative_and_zero_on_exact_predictions((pred, truth) in pairs(1..40)) {
        let r = rmse(&pred, &truth).unwrap();
        let e = error_rate(&pred, &truth).unwrap();
        prop_assert!(r >= 0.0 && e >= 0.0);
        prop_assert_eq!(rmse(&truth, &truth).unwrap(), 0.0);
        prop_assert_eq!(error_rate(&truth, &truth).unwrap(), 0.0);
        // RMSE bounds the mean absolute error from above
        let mae = pred.iter().zip(&truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64;
        prop_assert!(mae <= r + 1e-12);
    }

    #[test]
    fn error_rate_ignores_common_scale((pred, truth) in pairs(1..40), k in 0.1f64..50.0) {
        let sp: Vec<f64> = pred.iter().map(|x| x * k).collect();
        let st: Vec<f64> = truth.iter().map(|x| x * k).collect();
        let (a, b) = (error_rate(&pred, &truth).unwrap(), error_rate(&sp, &st).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        let (a, b) = (rmse(&pred, &truth).unwrap() * k, rmse(&sp, &st).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn knn_stays_within_the_label_range(train in labeled(3), query in prop::collection::vec(-3.0f64..3.0, 3), k in 1usize..20) {
        let k = k.min(train.len());
        let pred = knn_predict(&train, &[query], k).unwrap()[0];
        for w in 0..7 {
            let lo = train.iter().map(|t| t.expected[w]).fold(f64::INFINITY, f64::min);
            let hi = train.iter().map(|t| t.expected[w]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pred[w] >= lo - 1e-12 && pred[w] <= hi + 1e-12);
        }
        let all = knn_predict(&train, &[vec![0.0; 3]], train.len()).unwrap()[0];
        let mean = train.iter().map(|t| t.expected[0]).sum::<f64>() / train.len() as f64;
        prop_assert!((all[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn forest_stays_within_the_label_range(train in labeled(4), query in prop::collection::vec(-5.0f64..5.0, 4), seed in any::<u64>()) {
        let x: Vec<Vec<f64>> = train.iter().map(|t| t.features.clone()).collect();
        let y: Vec<f64> = train.iter().map(|t| t.expected[2]).collect();
        let cfg = ForestConfig { trees: 8, seed, ..ForestConfig::default() };
        let forest = RandomForest::fit(&x, &y, &cfg).unwrap();
        let p = forest.predict(&query);
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        prop_assert_eq!(p.to_bits(), RandomForest::fit(&x, &y, &cfg).unwrap().predict(&query).to_bits());
    }

    #[test]
    fn weekday_trend_is_non_negative_and_exact_on_flat_series(
        counts in prop::collection::vec(0u32..30, 14..70),
        level in 0u32..20,
    ) {
        let start = NaiveDate::from_ymd_opt(2017, 1, 2).unwrap();
        let history: Vec<(NaiveDate, u32)> = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (start + chrono::Days::new(i as u64), c))
            .collect();
        let end = history.last().unwrap().0;
        let target = DateWindow::following(end, 28);
        prop_assert!(weekday_trend(&history, target).iter().all(|&v| v >= 0.0));

        let flat: Vec<(NaiveDate, u32)> = history.iter().map(|&(d, _)| (d, level)).collect();
        for v in weekday_trend(&flat, target) {
            prop_assert!((v - level as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn config_accepts_any_seed_and_comment_layout(seed in any::<u64>(), pad in "[ \t]{0,3}", note in "[a-z ]{0,12}") {
        let text = format!("#{note}\n{pad}seed{pad}={pad}{seed}{pad}# {note}\n\n");
        let cfg = RunConfig::parse(&text, Path::new("p.conf")).unwrap();
        prop_assert_eq!(cfg.scenario.seed, seed);
        prop_assert_eq!(cfg.training.seed, seed);
        prop_assert_eq!(cfg.eval.forest.seed, seed);
    }
}
