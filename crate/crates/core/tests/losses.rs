use ctdn::losses::*;
use ctdn::tensor::Mat64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-10)
}

fn numeric(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let o = x[i];
            x[i] = o + H;
            let up = f(&x);
            x[i] = o - H;
            let dn = f(&x);
            x[i] = o;
            (up - dn) / (2.0 * H)
        })
        .collect()
}

fn randv(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat64 {
    Mat64::from_vec(r, c, randv(rng, r * c, 1.0)).unwrap()
}

/// Direct pair enumeration of the decoupling loss.
fn fbd_oracle(t: &Mat64, p: &TokenPartition) -> f64 {
    let cos = |i: usize, j: usize| {
        let (a, b) = (t.row(i), t.row(j));
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    };
    let pos = |set: &[usize]| {
        let mut s = 0.0;
        let mut n = 0usize;
        for a in 0..set.len() {
            for b in a + 1..set.len() {
                s += 1.0 - cos(set[a], set[b]).abs();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            0.25 * s / n as f64
        }
    };
    let mut neg = 0.0;
    for &i in &p.fg_indices {
        for &j in &p.bg_indices {
            neg += cos(i, j).abs();
        }
    }
    let nn = p.fg_indices.len() * p.bg_indices.len();
    let neg = if nn == 0 { 0.0 } else { 0.5 * neg / nn as f64 };
    pos(&p.fg_indices) + pos(&p.bg_indices) + neg
}

#[test]
fn fbd_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..100 {
        let n = rng.gen_range(2..20);
        let t = randm(&mut rng, n, 8);
        let mut p = TokenPartition::default();
        for i in 0..n {
            match rng.gen_range(0..3) {
                0 => p.fg_indices.push(i),
                1 => p.bg_indices.push(i),
                _ => p.uncertain_indices.push(i),
            }
        }
        let v = fbd_loss(&t, &p).unwrap();
        let o = fbd_oracle(&t, &p);
        assert!((v - o).abs() <= 1e-9, "trial {trial}: {v} vs {o}");
    }
}

#[test]
fn relation_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let z = randv(&mut rng, 6, 3.0);
        let y = ClassLabelVector::new((0..6).map(|_| rng.gen_range(0..2)).collect()).unwrap();
        let (_, g) = relation_loss_grad(&z, &y).unwrap();
        let n = numeric(&z, |z| relation_loss(z, &y).unwrap());
        assert!(rel_err(&g, &n) < TOL, "{g:?} vs {n:?}");
    }
}

#[test]
fn cognition_gradcheck_both_orders() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for order in [KlOrder::StudentFirst, KlOrder::TeacherFirst] {
        for _ in 0..10 {
            let z = randv(&mut rng, 9, 2.0);
            let q = softmax64(&randv(&mut rng, 9, 2.0)).unwrap();
            let (_, g) = cognition_transfer_grad_logits(&z, &q, order).unwrap();
            let n = numeric(&z, |z| {
                cognition_transfer_grad_logits(z, &q, order).unwrap().0
            });
            assert!(rel_err(&g, &n) < TOL, "{order}: {g:?} vs {n:?}");
        }
    }
}

#[test]
fn cognition_student_first_closed_form() {
    // ∂KL(P‖Q)/∂z_j = P_j(log(P_j/Q_j) − KL)
    let z = [0.3, -1.2, 0.8, 0.1];
    let q = softmax64(&[1.0, 0.0, -0.5, 0.2]).unwrap();
    let p = softmax64(&z).unwrap();
    let (kl, g) = cognition_transfer_grad_logits(&z, &q, KlOrder::StudentFirst).unwrap();
    for j in 0..4 {
        let want = p[j] * ((p[j] / q[j]).ln() - kl);
        assert!((g[j] - want).abs() < 1e-12);
    }
    let (_, g) = cognition_transfer_grad_logits(&z, &q, KlOrder::TeacherFirst).unwrap();
    for j in 0..4 {
        assert!((g[j] - (p[j] - q[j])).abs() < 1e-12);
    }
}

#[test]
fn vrd_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, c, e) = (5, 6, 4);
    let s = randm(&mut rng, n, c);
    let t = randm(&mut rng, n, c);
    let psi = Head64 {
        weight: randm(&mut rng, c, e),
        bias: randv(&mut rng, e, 1.0),
    };
    let psi_t = Head64 {
        weight: randm(&mut rng, c, e),
        bias: randv(&mut rng, e, 1.0),
    };
    let g = vrd_loss_grad(&s, &t, &psi, &psi_t).unwrap();

    let n_tok = numeric(&s.data, |x| {
        vrd_loss(
            &Mat64::from_vec(n, c, x.to_vec()).unwrap(),
            &t,
            &psi,
            &psi_t,
        )
        .unwrap()
    });
    assert!(rel_err(&g.tokens.data, &n_tok) < TOL);
    // class token receives no gradient
    assert!(g.tokens.row(0).iter().all(|&v| v == 0.0));

    let n_w = numeric(&psi.weight.data, |x| {
        let h = Head64 {
            weight: Mat64::from_vec(c, e, x.to_vec()).unwrap(),
            bias: psi.bias.clone(),
        };
        vrd_loss(&s, &t, &h, &psi_t).unwrap()
    });
    assert!(rel_err(&g.weight.data, &n_w) < TOL);

    let n_b = numeric(&psi.bias, |x| {
        let h = Head64 {
            weight: psi.weight.clone(),
            bias: x.to_vec(),
        };
        vrd_loss(&s, &t, &h, &psi_t).unwrap()
    });
    assert!(rel_err(&g.bias, &n_b) < TOL);
}

#[test]
fn fbd_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let (n, c) = (9, 5);
        let t = randm(&mut rng, n, c);
        let p = TokenPartition {
            fg_indices: vec![0, 2, 3, 7],
            bg_indices: vec![1, 5, 8],
            uncertain_indices: vec![4, 6],
            ..Default::default()
        };
        let (_, g) = fbd_loss_grad(&t, &p).unwrap();
        let num = numeric(&t.data, |x| {
            fbd_loss(&Mat64::from_vec(n, c, x.to_vec()).unwrap(), &p).unwrap()
        });
        assert!(rel_err(&g.data, &num) < TOL);
        for &u in &p.uncertain_indices {
            assert!(g.row(u).iter().all(|&v| v == 0.0));
        }
    }
}

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n)
}

proptest! {
    #[test]
    fn relation_nonnegative(z in finite_vec(6), bits in prop::collection::vec(0u8..2, 6)) {
        let y = ClassLabelVector::new(bits).unwrap();
        prop_assert!(relation_loss(&z, &y).unwrap() >= 0.0);
    }

    #[test]
    fn softmax_is_distribution(z in finite_vec(8)) {
        let p = softmax64(&z).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn kl_nonnegative_and_zero_on_self(a in finite_vec(7), b in finite_vec(7)) {
        let (p, q) = cognition_distributions(&a, &b).unwrap();
        prop_assert!(cognition_transfer_loss(&p, &q).unwrap() >= 0.0);
        prop_assert!(cognition_transfer_loss(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn similarity_bounded(q in finite_vec(4), t in finite_vec(12), mu in 1.0f64..200.0) {
        prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
        prop_assume!(t.chunks(4).all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let m = Mat64::from_vec(3, 4, t).unwrap();
        for l in similarity_logits(&q, &m, mu).unwrap() {
            prop_assert!(l.abs() <= mu * (1.0 + 1e-9));
        }
    }

    #[test]
    fn fbd_in_unit_interval_and_scale_invariant(
        data in finite_vec(40),
        assign in prop::collection::vec(0u8..3, 8),
        scale in 0.1f64..10.0,
    ) {
        let t = Mat64::from_vec(8, 5, data).unwrap();
        prop_assume!((0..8).all(|r| t.row(r).iter().any(|v| v.abs() > 1e-3)));
        let mut p = TokenPartition::default();
        for (i, a) in assign.iter().enumerate() {
            match a { 0 => p.fg_indices.push(i), 1 => p.bg_indices.push(i), _ => p.uncertain_indices.push(i) }
        }
        let v = fbd_loss(&t, &p).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        let mut s = t.clone();
        s.data.iter_mut().for_each(|x| *x *= scale);
        prop_assert!((fbd_loss(&s, &p).unwrap() - v).abs() < 1e-9);
        // identical inputs give identical outputs
        prop_assert_eq!(fbd_loss(&t, &p).unwrap(), v);
    }

    #[test]
    fn partition_is_disjoint_cover(data in finite_vec(30), delta in 0.0f64..0.5) {
        let t = Mat64::from_vec(10, 3, data).unwrap();
        let protos = Prototypes { fg: vec![1.0, 0.2, 0.0], bg: vec![0.0, 1.0, -0.3] };
        let p = categorize_tokens(&t, &protos, delta).unwrap();
        let mut all: Vec<usize> = p.fg_indices.iter().chain(&p.bg_indices).chain(&p.uncertain_indices).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..10).collect::<Vec<_>>());
        for &i in &p.fg_indices { prop_assert!(p.fg_scores[i] - p.bg_scores[i] > delta); }
        for &i in &p.bg_indices { prop_assert!(p.bg_scores[i] - p.fg_scores[i] > delta); }
    }

    #[test]
    fn vrd_nonnegative_and_zero_on_self(data in finite_vec(24)) {
        let s = Mat64::from_vec(4, 6, data).unwrap();
        let mut w = Mat64::zeros(6, 3);
        for i in 0..3 { w.data[i * 3 + i] = 1.0; }
        let h = Head64 { weight: w, bias: vec![0.1, 0.0, -0.1] };
        prop_assert_eq!(vrd_loss(&s, &s, &h, &h).unwrap(), 0.0);
        let mut t = s.clone();
        t.data[7] += 1.0;
        prop_assert!(vrd_loss(&s, &t, &h, &h).unwrap() >= 0.0);
    }
}
