//! Finite-difference checks of the analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    cognition_transfer_grad_logits, fbd_loss, fbd_loss_grad, relation_loss, relation_loss_grad,
    softmax64, vrd_loss, vrd_loss_grad, ClassLabelVector, Head64, KlOrder, TokenPartition,
};
use crate::tensor::Mat64;

/// Central-difference step.
pub const STEP: f64 = 1e-4;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    /// Worst `‖a − n‖ / max(‖a‖, ‖n‖)` over all instances.
    pub max_rel_err: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
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

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let o = x[i];
            x[i] = o + STEP;
            let up = f(&x);
            x[i] = o - STEP;
            let dn = f(&x);
            x[i] = o;
            (up - dn) / (2.0 * STEP)
        })
        .collect()
}

fn randv(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Result<Mat64> {
    Mat64::from_vec(r, c, randv(rng, r * c, 1.0))
}

fn relation(rng: &mut ChaCha8Rng) -> Result<f64> {
    let k = rng.gen_range(1..=16);
    let z = randv(rng, k, 3.0);
    let y = ClassLabelVector::new((0..k).map(|_| rng.gen_range(0..2)).collect())?;
    let (_, g) = relation_loss_grad(&z, &y)?;
    let n = numeric_grad(&z, |z| relation_loss(z, &y).unwrap_or(f64::NAN));
    Ok(rel_err(&g, &n))
}

fn cognition(rng: &mut ChaCha8Rng, order: KlOrder) -> Result<f64> {
    let m = rng.gen_range(2..=16);
    let z = randv(rng, m, 2.0);
    let q = softmax64(&randv(rng, m, 2.0))?;
    let (_, g) = cognition_transfer_grad_logits(&z, &q, order)?;
    let n = numeric_grad(&z, |z| {
        cognition_transfer_grad_logits(z, &q, order).map_or(f64::NAN, |r| r.0)
    });
    Ok(rel_err(&g, &n))
}

fn vrd(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.gen_range(2..=16);
    let c = rng.gen_range(1..=32);
    let e = rng.gen_range(1..=32);
    let s = randm(rng, n, c)?;
    let t = randm(rng, n, c)?;
    let psi = Head64 {
        weight: randm(rng, c, e)?,
        bias: randv(rng, e, 1.0),
    };
    let psi_t = Head64 {
        weight: randm(rng, c, e)?,
        bias: randv(rng, e, 1.0),
    };
    let g = vrd_loss_grad(&s, &t, &psi, &psi_t)?;
    let n_tok = numeric_grad(&s.data, |x| {
        vrd_loss(
            &Mat64 {
                rows: n,
                cols: c,
                data: x.to_vec(),
            },
            &t,
            &psi,
            &psi_t,
        )
        .unwrap_or(f64::NAN)
    });
    let n_w = numeric_grad(&psi.weight.data, |x| {
        let h = Head64 {
            weight: Mat64 {
                rows: c,
                cols: e,
                data: x.to_vec(),
            },
            bias: psi.bias.clone(),
        };
        vrd_loss(&s, &t, &h, &psi_t).unwrap_or(f64::NAN)
    });
    let n_b = numeric_grad(&psi.bias, |x| {
        let h = Head64 {
            weight: psi.weight.clone(),
            bias: x.to_vec(),
        };
        vrd_loss(&s, &t, &h, &psi_t).unwrap_or(f64::NAN)
    });
    Ok(rel_err(&g.tokens.data, &n_tok)
        .max(rel_err(&g.weight.data, &n_w))
        .max(rel_err(&g.bias, &n_b)))
}

fn fbd(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.gen_range(2..=16);
    let c = rng.gen_range(2..=32);
    let t = randm(rng, n, c)?;
    let mut p = TokenPartition::default();
    for i in 0..n {
        match rng.gen_range(0..3) {
            0 => p.fg_indices.push(i),
            1 => p.bg_indices.push(i),
            _ => p.uncertain_indices.push(i),
        }
    }
    let (_, g) = fbd_loss_grad(&t, &p)?;
    let num = numeric_grad(&t.data, |x| {
        fbd_loss(
            &Mat64 {
                rows: n,
                cols: c,
                data: x.to_vec(),
            },
            &p,
        )
        .unwrap_or(f64::NAN)
    });
    Ok(rel_err(&g.data, &num))
}

fn suite(
    name: &'static str,
    instances: usize,
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let e = f(rng)?;
        worst = if e.is_nan() {
            f64::INFINITY
        } else {
            worst.max(e)
        };
    }
    Ok(SuiteResult {
        name,
        instances,
        max_rel_err: worst,
    })
}

/// Runs every loss suite on `instances` random cases each.
pub fn run_all(seed: u64, instances: usize) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        suite("l_rel", instances, &mut rng, relation)?,
        suite("l_ct (student first)", instances, &mut rng, |r| {
            cognition(r, KlOrder::StudentFirst)
        })?,
        suite("l_ct (teacher first)", instances, &mut rng, |r| {
            cognition(r, KlOrder::TeacherFirst)
        })?,
        suite("l_vrd", instances, &mut rng, vrd)?,
        suite("l_fbd", instances, &mut rng, fbd)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_all(11, 20).unwrap() {
            assert!(r.passed(), "{}: {:e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let x = [0.5, -1.0];
        let n = numeric_grad(&x, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!(rel_err(&[1.0, 3.0], &n) < 1e-8);
        assert!(rel_err(&[1.0, 2.0], &n) > 0.1);
    }
}
