//! Brute-force reference implementations in plain f64 arithmetic.
#![allow(dead_code)]

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    let (r, c) = (m.len(), m[0].len());
    Tensor::from_vec(m.concat(), (r, c), &Device::Cpu).unwrap()
}

pub fn value(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Supervised symmetric contrastive loss, one anchor at a time.
pub fn clip_pair(images: &Mat, texts: &Mat, ids: &[usize], tau: f64) -> f64 {
    let v: Mat = images.iter().map(|r| unit(r)).collect();
    let t: Mat = texts.iter().map(|r| unit(r)).collect();
    let b = ids.len();
    let dir = |a: &Mat, c: &Mat| {
        let mut total = 0.0;
        for i in 0..b {
            let logits: Vec<f64> = (0..b).map(|j| dot(&a[i], &c[j]) / tau).collect();
            let lse = log_sum_exp(&logits);
            let pos: Vec<usize> = (0..b).filter(|&j| ids[j] == ids[i]).collect();
            total += pos.iter().map(|&j| lse - logits[j]).sum::<f64>() / pos.len() as f64;
        }
        total / b as f64
    };
    dir(&v, &t) + dir(&t, &v)
}

pub fn smoothed_ce(logits: &Mat, labels: &[usize], eps: f64) -> f64 {
    let n = logits[0].len() as f64;
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let lse = log_sum_exp(row);
        for (c, &z) in row.iter().enumerate() {
            let q = if c == y { 1.0 - eps + eps / n } else { eps / n };
            total -= q * (z - lse);
        }
    }
    total / labels.len() as f64
}

pub fn i2tce(globals: &Mat, texts: &Mat, labels: &[usize], eps: f64, scale: f64) -> f64 {
    let t: Mat = texts.iter().map(|r| unit(r)).collect();
    let logits: Mat = globals
        .iter()
        .map(|g| {
            let g = unit(g);
            t.iter().map(|r| scale * dot(&g, r)).collect()
        })
        .collect();
    smoothed_ce(&logits, labels, eps)
}

/// Dense InfoNCE, enumerating every positive pair and its negatives.
pub fn dense(visual: &Mat, text: &Mat, keys: &[(usize, u8)], tau: f64) -> f64 {
    let v: Mat = visual.iter().map(|r| unit(r)).collect();
    let t: Mat = text.iter().map(|r| unit(r)).collect();
    let n = keys.len();
    let dir = |a: &Mat, c: &Mat| {
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&j| j != i && keys[j] == keys[i]).collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let negs: Vec<f64> = (0..n)
                .filter(|&j| keys[j] != keys[i])
                .map(|j| (dot(&a[i], &c[j]) / tau).exp())
                .collect();
            let neg_sum: f64 = negs.iter().sum();
            let mut acc = 0.0;
            for &j in &pos {
                let e = (dot(&a[i], &c[j]) / tau).exp();
                acc -= (e / (e + neg_sum)).ln();
            }
            total += acc / pos.len() as f64;
        }
        total / anchors as f64
    };
    dir(&v, &t) + dir(&t, &v)
}

/// Weighted MSE of per-cell unit vectors; maps are indexed [b][c][y][x].
pub fn mse_align(fused: &[f64], target: &[f64], dims: [usize; 4], weights: &[f64]) -> f64 {
    let [b, d, h, w] = dims;
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let at = |m: &[f64]| -> Vec<f64> { (0..d).map(|c| m[((bi * d + c) * h + y) * w + x]).collect() };
                let (f, t) = (unit(&at(fused)), unit(&at(target)));
                let mse = f.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d as f64;
                acc += weights[(bi * h + y) * w + x] * mse;
            }
        }
    }
    acc / total
}

/// CMC and AP by listing the filtered gallery in rank order, one query at a time.
pub fn cmc_map(q: &Mat, qid: &[usize], qcam: &[usize], g: &Mat, gid: &[usize], gcam: &[usize]) -> (Vec<f64>, f64, Vec<f64>) {
    let mut cmc = vec![0.0; g.len()];
    let mut aps = Vec::new();
    for i in 0..q.len() {
        let qu = unit(&q[i]);
        let mut cand: Vec<(f64, usize)> = (0..g.len())
            .filter(|&j| !(gid[j] == qid[i] && gcam[j] == qcam[i]))
            .map(|j| (dot(&qu, &unit(&g[j])), j))
            .collect();
        cand.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let rel: Vec<bool> = cand.iter().map(|&(_, j)| gid[j] == qid[i]).collect();
        let first = rel.iter().position(|&r| r).expect("evaluable query");
        for k in first..cmc.len() {
            cmc[k] += 1.0;
        }
        let npos = rel.iter().filter(|&&r| r).count() as f64;
        let mut ap = 0.0;
        for (r, _) in rel.iter().enumerate().filter(|(_, &x)| x) {
            let hits_so_far = rel[..=r].iter().filter(|&&x| x).count() as f64;
            ap += hits_so_far / (r + 1) as f64;
        }
        aps.push(ap / npos);
    }
    let nq = q.len() as f64;
    let cmc = cmc.iter().map(|c| c / nq).collect();
    let map = aps.iter().sum::<f64>() / nq;
    (cmc, map, aps)
}

/// Largest relative error between autodiff and central differences of a scalar function.
pub fn gradcheck(x0: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let var = candle_core::Var::from_tensor(&Tensor::from_vec(x0.to_vec(), shape, &Device::Cpu).unwrap()).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic: Vec<f64> = grads
        .get(var.as_tensor())
        .map(|g| g.flatten_all().unwrap().to_vec1().unwrap())
        .unwrap_or_else(|| vec![0.0; x0.len()]);
    let h = 1e-6;
    let eval = |x: Vec<f64>| value(&f(&Tensor::from_vec(x, shape, &Device::Cpu).unwrap()));
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        let mut minus = x0.to_vec();
        plus[i] += h;
        minus[i] -= h;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}

/// Same check for a parameter that the closure reads from its own storage.
pub fn gradcheck_var(var: &candle_core::Var, f: impl Fn() -> Tensor) -> f64 {
    let x0: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    let shape = var.as_tensor().dims().to_vec();
    let grads = f().backward().unwrap();
    let analytic: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let h = 1e-6;
    let eval = |x: Vec<f64>| {
        var.set(&Tensor::from_vec(x, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
        value(&f())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let mut plus = x0.clone();
        let mut minus = x0.clone();
        plus[i] += h;
        minus[i] -= h;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(err);
    }
    eval(x0);
    worst
}

pub type Instance = (Mat, Vec<usize>, Vec<usize>, Mat, Vec<usize>, Vec<usize>);

/// Random instance where every query has a cross-camera positive.
pub fn retrieval_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let ids = r.gen_range(2..5);
    let d = r.gen_range(2..5);
    let nq = r.gen_range(1..6);
    let ng = r.gen_range(ids..=20);
    let mut gid: Vec<usize> = (0..ng).map(|i| if i < ids { i } else { r.gen_range(0..ids) }).collect();
    gid.shuffle(&mut r);
    let gcam: Vec<usize> = (0..ng).map(|_| r.gen_range(1..3)).collect();
    let qid: Vec<usize> = (0..nq).map(|_| r.gen_range(0..ids)).collect();
    let qcam = vec![0; nq];
    // rows drawn from a small pool repeat exactly, producing score ties
    let pool = random_mat(3, d, &mut r);
    let draw = |r: &mut ChaCha8Rng, n: usize| -> Mat {
        (0..n)
            .map(|_| {
                if r.gen_bool(0.4) {
                    pool[r.gen_range(0..pool.len())].clone()
                } else {
                    (0..d).map(|_| r.gen_range(-1.0..1.0)).collect()
                }
            })
            .collect()
    };
    let q = draw(&mut r, nq);
    let g = draw(&mut r, ng);
    (q, qid, qcam, g, gid, gcam)
}

