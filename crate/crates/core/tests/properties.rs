use lmmpqs::diffcore::{DiffTensor, Graph};
use lmmpqs::fewshot::{classify_cosine, prototypes_of};
use lmmpqs::imageaug::RngStream;
use lmmpqs::losses::{compute_prototypes, cosface_loss, ptloss};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn cosface(emb: &DiffTensor, labels: &[usize], w: &DiffTensor, s: f64, m: f64) -> f64 {
    let mut g = Graph::new();
    let e = g.constant(emb.clone());
    let w = g.constant(w.clone());
    let l = cosface_loss(&mut g, e, labels, w, s, m).unwrap();
    g.value(l).item()
}

fn pt(emb: &DiffTensor, labels: &[usize], n: usize, margin: f64) -> f64 {
    let mut g = Graph::new();
    let e = g.constant(emb.clone());
    let p = compute_prototypes(&mut g, e, labels, n).unwrap();
    let l = ptloss(&mut g, e, labels, p, margin).unwrap();
    g.value(l).item()
}

fn scale_rows(t: &DiffTensor, factors: &[f64]) -> DiffTensor {
    let rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r).iter().map(|v| v * factors[r]).collect()).collect();
    DiffTensor::from_rows(&rows).unwrap()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DiffTensor> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_filter("rows need non-zero norm", move |v| v.chunks(cols).all(|r| r.iter().any(|x| x.abs() > 0.05)))
        .prop_map(move |v| DiffTensor::matrix(rows, cols, v).unwrap())
}

fn cosface_case() -> impl Strategy<Value = (DiffTensor, Vec<usize>, DiffTensor, Vec<f64>, Vec<f64>)> {
    (1usize..6, 2usize..5, 2usize..6).prop_flat_map(|(b, n, d)| {
        (
            matrix(b, d),
            prop::collection::vec(0..n, b),
            matrix(n, d),
            prop::collection::vec(0.01f64..100.0, b),
            prop::collection::vec(0.01f64..100.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cosface_ignores_row_norms((emb, labels, w, fe, fw) in cosface_case(), m in 0.0f64..0.9) {
        let a = cosface(&emb, &labels, &w, 30.0, m);
        let b = cosface(&scale_rows(&emb, &fe), &labels, &scale_rows(&w, &fw), 30.0, m);
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn ptloss_is_non_negative(n in 2usize..5, k in 1usize..4, d in 1usize..6, seed in any::<u64>(), margin in 0.0f64..3.0) {
        let mut rng = RngStream::new(seed, 0);
        let labels: Vec<usize> = (0..n * k).map(|i| i % n).collect();
        let values: Vec<f64> = (0..n * k * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let emb = DiffTensor::matrix(n * k, d, values).unwrap();
        prop_assert!(pt(&emb, &labels, n, margin) >= 0.0);
    }

    #[test]
    fn ptloss_vanishes_for_separated_classes(n in 2usize..5, k in 1usize..4, seed in any::<u64>(), margin in 0.0f64..3.0) {
        // class c sits at 10 * e_c, every sample within 0.1 per coordinate
        let d = n;
        let mut rng = RngStream::new(seed, 0);
        let labels: Vec<usize> = (0..n * k).map(|i| i % n).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&c| (0..d).map(|j| if j == c { 10.0 } else { 0.0 } + rng.gen_range(-0.1..0.1)).collect())
            .collect();
        let emb = DiffTensor::from_rows(&rows).unwrap();
        prop_assert_eq!(pt(&emb, &labels, n, margin), 0.0);
    }
}

fn gaussian_rows(rng: &mut RngStream, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect()
}

/// Random orthogonal matrix from Gram-Schmidt on Gaussian rows.
fn orthogonal(rng: &mut RngStream, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut v in gaussian_rows(rng, d, d) {
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
}

fn apply(rows: &[Vec<f64>], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| q.iter().map(|col| r.iter().zip(col).map(|(a, b)| a * b).sum()).collect()).collect()
}

fn predict(q: &[Vec<f64>], p: &[Vec<f64>]) -> Vec<usize> {
    classify_cosine(&DiffTensor::from_rows(q).unwrap(), &DiffTensor::from_rows(p).unwrap()).unwrap().0
}

/// Rows whose best and second-best cosine differ by at least `gap`.
fn clear_winner(q: &[f64], protos: &[Vec<f64>], gap: f64) -> bool {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut cos: Vec<f64> = protos.iter().map(|p| q.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / (norm(q) * norm(p))).collect();
    cos.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cos[0] - cos[1] > gap
}

#[test]
fn cosine_classifier_invariances() {
    let mut rng = RngStream::new(11, 0);
    for _ in 0..200 {
        let (n, d) = (rng.gen_range(2..=6), rng.gen_range(2..=8));
        let protos = gaussian_rows(&mut rng, n, d);
        let queries: Vec<Vec<f64>> = gaussian_rows(&mut rng, 12, d).into_iter().filter(|q| clear_winner(q, &protos, 1e-6)).collect();
        if queries.is_empty() {
            continue;
        }
        let base = predict(&queries, &protos);

        let mut rescale = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    let f = rng.gen_range(0.1..10.0);
                    r.iter().map(|v| v * f).collect()
                })
                .collect()
        };
        let (scaled_q, scaled_p) = (rescale(&queries), rescale(&protos));
        assert_eq!(predict(&scaled_q, &scaled_p), base);

        let rot = orthogonal(&mut rng, d);
        assert_eq!(predict(&apply(&queries, &rot), &apply(&protos, &rot)), base);

        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        let permuted: Vec<Vec<f64>> = order.iter().map(|&i| protos[i].clone()).collect();
        let mapped: Vec<usize> = predict(&queries, &permuted).iter().map(|&j| order[j]).collect();
        assert_eq!(mapped, base);
    }
}

#[test]
fn support_as_query_is_perfect_when_separable() {
    let mut rng = RngStream::new(12, 0);
    for _ in 0..50 {
        let n = rng.gen_range(2..=6);
        let k = rng.gen_range(1..=5);
        let d = n + rng.gen_range(0..4);
        let labels: Vec<usize> = (0..n * k).map(|i| i % n).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&c| (0..d).map(|j| if j == c { 1.0 } else { 0.0 } + 0.2 * rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let emb = DiffTensor::from_rows(&rows).unwrap();
        let protos = prototypes_of(&emb, &labels, n).unwrap();
        let (pred, _) = classify_cosine(&emb, &protos).unwrap();
        assert_eq!(pred, labels);
    }
}

#[test]
fn uninformative_embeddings_score_chance() {
    // a constant embedding plus tiny noise carries no class information
    let mut rng = RngStream::new(13, 0);
    let (n, k, m, d) = (5, 5, 15, 16);
    let constant: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut noisy = |rows: usize| -> DiffTensor {
        let r: Vec<Vec<f64>> = (0..rows).map(|_| constant.iter().map(|c| c + 1e-3 * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        DiffTensor::from_rows(&r).unwrap()
    };
    let mut accs = Vec::new();
    for _ in 0..200 {
        let support_labels: Vec<usize> = (0..n * k).map(|i| i % n).collect();
        let query_labels: Vec<usize> = (0..n * m).map(|i| i % n).collect();
        let protos = prototypes_of(&noisy(n * k), &support_labels, n).unwrap();
        let (pred, _) = classify_cosine(&noisy(n * m), &protos).unwrap();
        let correct = pred.iter().zip(&query_labels).filter(|(p, l)| p == l).count();
        accs.push(correct as f64 / query_labels.len() as f64);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.2).abs() < 0.05, "mean accuracy {mean}");
}
