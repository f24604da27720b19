use care::rng::{stream, Domain};
use care::trainer::{cosine_loss_grad, la_loss};
use care::types::{l2_norm, Matrix};
use rand::Rng;
use rand_distr::StandardNormal;

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let h = 1e-4;
    let mut worst = 0.0f64;
    for inst in 0..100u64 {
        let mut rng = stream(2024, Domain::Oracle, inst);
        let c = 5;
        let d = rng.random_range(2..=16);
        let b = rng.random_range(1..=8);
        let scale = rng.random_range(1.0..=25.0);
        // rows off unit norm, so the normalization path is exercised
        let mut w = Vec::with_capacity(c * d);
        for _ in 0..c {
            let r: f64 = rng.random_range(0.8..1.25);
            w.extend(unit(&mut rng, d).into_iter().map(|x| x * r));
        }
        let w = Matrix::from_vec(c, d, w).unwrap();
        let feats: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, d)).collect();
        let refs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let prior: Option<Vec<f64>> = if inst % 2 == 0 {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            Some(raw.iter().map(|p| (p / s).ln()).collect())
        } else {
            None
        };
        let (_, grad) = cosine_loss_grad(&w, scale, &refs, &labels, prior.as_deref()).unwrap();
        let mut fd = vec![0.0; c * d];
        for (k, slot) in fd.iter_mut().enumerate() {
            let mut plus = w.clone();
            plus.as_mut_slice()[k] += h;
            let mut minus = w.clone();
            minus.as_mut_slice()[k] -= h;
            let lp = cosine_loss_grad(&plus, scale, &refs, &labels, prior.as_deref()).unwrap().0;
            let lm = cosine_loss_grad(&minus, scale, &refs, &labels, prior.as_deref()).unwrap().0;
            *slot = (lp - lm) / (2.0 * h);
        }
        let diff: Vec<f64> = grad.as_slice().iter().zip(&fd).map(|(a, b)| a - b).collect();
        let denom = l2_norm(grad.as_slice()).max(l2_norm(&fd)).max(1e-8);
        let rel = l2_norm(&diff) / denom;
        worst = worst.max(rel);
        assert!(rel <= 1e-5, "instance {inst}: relative error {rel:e} (C={c}, D={d}, s={scale})");
    }
    println!("worst relative gradient error {worst:e}");
}

#[test]
fn la_loss_is_ce_under_uniform_prior() {
    for inst in 0..200u64 {
        let mut rng = stream(7, Domain::Oracle, inst);
        let c = rng.random_range(1..=12);
        let z: Vec<f64> = (0..c).map(|_| rng.random_range(-30.0..30.0)).collect();
        let y = rng.random_range(0..c);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ce = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln() - z[y];
        let la = la_loss(&z, y, &vec![1.0 / c as f64; c]).unwrap();
        assert!((la - ce).abs() <= 1e-10, "{la} vs {ce}");
        assert!(la >= 0.0);
    }
}
