use medconv_core::metrics::{
    basic_rates, build_report, confusion_matrix, evaluate, f1_scores, read_reports_csv, roc_auc_ovr, write_reports_csv,
};
use medconv_core::scores::ScoreMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive positive/negative pair count, ties worth half.
fn pairwise_auc(scores: &ScoreMatrix, labels: &[usize], c: usize) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == c && lj != c {
                pairs += 1;
                let (a, b) = (scores.row(i)[c], scores.row(j)[c]);
                wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

fn random_case(rng: &mut ChaCha8Rng, n: usize, classes: usize, levels: Option<u32>) -> (ScoreMatrix, Vec<usize>) {
    let data = (0..n * classes)
        .map(|_| match levels {
            Some(k) => rng.random_range(0..k) as f64 / k as f64,
            None => rng.random_range(0.0..1.0),
        })
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (ScoreMatrix::new(n, classes, data).unwrap(), labels)
}

#[test]
fn confusion_counts_match_a_tally() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let preds: Vec<usize> = (0..20).map(|_| rng.random_range(0..3)).collect();
    let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..3)).collect();
    let cm = confusion_matrix(&preds, &labels, 3).unwrap();
    let mut tally = [[0u64; 3]; 3];
    for (&p, &l) in preds.iter().zip(&labels) {
        tally[l][p] += 1;
    }
    for (t, row) in tally.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            assert_eq!(cm.get(t, p), count);
        }
    }
    assert_eq!(cm.total(), 20);
    assert!(confusion_matrix(&preds[..19], &labels, 3).is_err());
}

#[test]
fn perfect_predictions() {
    let labels = [0, 1, 1, 2, 2, 2];
    let cm = confusion_matrix(&labels, &labels, 3).unwrap();
    for c in 0..3 {
        assert_eq!(cm.get(c, c), cm.support(c));
    }
    let r = basic_rates(&cm).unwrap();
    assert_eq!((r.accuracy, r.micro_sensitivity, r.micro_specificity), (1.0, 1.0, 1.0));
    assert!(f1_scores(&cm).unwrap().per_class.iter().all(|&f| f == 1.0));
}

#[test]
fn specificity_for_a_table_row() {
    // 17 of 26 correct is the 65.38% row.
    let labels: Vec<usize> = (0..26).map(|i| i % 3).collect();
    let preds: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| if i < 17 { l } else { (l + 1) % 3 }).collect();
    let r = basic_rates(&confusion_matrix(&preds, &labels, 3).unwrap()).unwrap();
    assert!((100.0 * r.accuracy - 65.38).abs() < 0.005);
    assert!((100.0 * r.micro_specificity - 82.69).abs() < 0.005);
}

#[test]
fn empty_matrix_is_an_error() {
    let cm = confusion_matrix(&[], &[], 3).unwrap();
    assert!(basic_rates(&cm).is_err());
    assert!(f1_scores(&cm).is_err());
}

#[test]
fn f1_by_hand() {
    // class 0: P 1/2 R 1/2; class 1: P 2/3 R 1; class 2: P 1 R 1/2
    let labels = [0, 0, 1, 1, 2, 2];
    let preds = [0, 1, 1, 1, 2, 0];
    let f = f1_scores(&confusion_matrix(&preds, &labels, 3).unwrap()).unwrap();
    let want = [0.5, 0.8, 2.0 / 3.0];
    for (got, w) in f.per_class.iter().zip(want) {
        assert!((got - w).abs() < 1e-12);
    }
    let mean = want.iter().sum::<f64>() / 3.0;
    assert!((f.macro_avg - mean).abs() < 1e-12);
    assert!((f.weighted - mean).abs() < 1e-12);
}

#[test]
fn absent_class_gets_zero_f1_and_no_weight() {
    let labels = [0, 1, 2, 0];
    let preds = [0, 1, 2, 1];
    let four = f1_scores(&confusion_matrix(&preds, &labels, 4).unwrap()).unwrap();
    let three = f1_scores(&confusion_matrix(&preds, &labels, 3).unwrap()).unwrap();
    assert_eq!(four.per_class[3], 0.0);
    assert_eq!(four.weighted, three.weighted);
}

#[test]
fn auc_examples() {
    let scores = ScoreMatrix::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4], vec![0.65, 0.35], vec![0.2, 0.8]]).unwrap();
    let auc = roc_auc_ovr(&scores, &[0, 0, 1, 1]).unwrap();
    assert_eq!(auc.per_class[1], Some(0.75));
    let sep = ScoreMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
    assert_eq!(roc_auc_ovr(&sep, &[0, 1]).unwrap().macro_auc, 1.0);
    let flat = ScoreMatrix::new(5, 3, vec![0.3; 15]).unwrap();
    assert_eq!(roc_auc_ovr(&flat, &[0, 1, 2, 0, 1]).unwrap().macro_auc, 0.5);
}

#[test]
fn auc_skips_degenerate_classes() {
    let scores = ScoreMatrix::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.4, 0.5, 0.1]]).unwrap();
    let auc = roc_auc_ovr(&scores, &[0, 1]).unwrap();
    assert_eq!(auc.per_class[2], None);
    assert_eq!(auc.macro_auc, 1.0);
    assert!(roc_auc_ovr(&scores, &[0, 0]).is_err());
}

#[test]
fn rank_auc_equals_pairwise_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let classes = [2, 3, 5][case % 3];
        let n = rng.random_range(2..=200);
        let levels = (case % 2 == 0).then_some(4);
        let (scores, labels) = random_case(&mut rng, n, classes, levels);
        let Ok(auc) = roc_auc_ovr(&scores, &labels) else {
            continue;
        };
        for c in 0..classes {
            assert_eq!(auc.per_class[c], pairwise_auc(&scores, &labels, c), "case {case} class {c}");
        }
    }
}

#[test]
fn report_matches_scalar_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (scores, labels) = random_case(&mut rng, 90, 3, None);
    let preds = scores.argmax();
    let report = evaluate(&scores, &labels).unwrap();
    let n = labels.len() as f64;
    let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64;
    assert_eq!(report.accuracy, correct / n);
    let (mut tn, mut fp) = (0.0, 0.0);
    let mut weighted = 0.0;
    for c in 0..3 {
        let tp = preds.iter().zip(&labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
        let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
        let support = labels.iter().filter(|&&l| l == c).count() as f64;
        fp += predicted - tp;
        tn += n - predicted - support + tp;
        let (p, r) = (tp / predicted, tp / support);
        weighted += support * 2.0 * p * r / (p + r);
        assert_eq!(report.per_class[c].auc, pairwise_auc(&scores, &labels, c));
    }
    assert!((report.micro_specificity - tn / (tn + fp)).abs() < 1e-12);
    assert!((report.f1_weighted - weighted / n).abs() < 1e-12);
    let cm = confusion_matrix(&preds, &labels, 3).unwrap();
    assert_eq!(build_report(&cm, &scores, &labels).unwrap(), report);
}

#[test]
fn report_csv_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (scores, labels) = random_case(&mut rng, 40, 3, None);
    let rows = vec![("run-a".to_string(), evaluate(&scores, &labels).unwrap())];
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, &rows).unwrap();
    assert_eq!(read_reports_csv(buf.as_slice()).unwrap(), rows);
}

proptest! {
    #[test]
    fn micro_rates_follow_accuracy(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..150),
        classes in 2usize..6,
    ) {
        let preds: Vec<usize> = pairs.iter().map(|p| p.0 % classes).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.1 % classes).collect();
        let r = basic_rates(&confusion_matrix(&preds, &labels, classes).unwrap()).unwrap();
        prop_assert_eq!(r.micro_sensitivity, r.accuracy);
        let expected = 1.0 - (1.0 - r.accuracy) / (classes - 1) as f64;
        prop_assert!((r.micro_specificity - expected).abs() <= 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_column_transforms(seed in any::<u64>(), col in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scores, labels) = random_case(&mut rng, 60, 3, Some(6));
        let Ok(before) = roc_auc_ovr(&scores, &labels) else { return Ok(()) };
        let moved = scores.map_columns(|c, v| if c == col { (3.0 * v).exp() - 7.0 } else { v });
        prop_assert_eq!(roc_auc_ovr(&moved, &labels).unwrap(), before);
    }
}
