//! Definition-level oracles evaluated in double-double precision, plus seeded
//! micro-instance generators shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use textssl::{seeded_rng, RandomStream};
use twofloat::TwoFloat;

pub fn tf(x: f64) -> TwoFloat {
    TwoFloat::from(x)
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        return 0.0;
    }
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn dot(a: &[f64], b: &[f64]) -> TwoFloat {
    a.iter().zip(b).fold(tf(0.0), |acc, (x, y)| acc + tf(*x) * tf(*y))
}

/// `-log(e^{q.p/t} / (sum_k e^{q.n_k/t} + e^{q.p/t}))`.
pub fn info_nce(q: &[f64], p: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let pos = (dot(q, p) / tf(tau)).exp();
    let mut denom = pos;
    for n in negs {
        denom += (dot(q, n) / tf(tau)).exp();
    }
    f64::from(-(pos / denom).ln())
}

/// Softmax of `x.n_k / t` over the negatives, kept in double-double.
pub fn distribution(x: &[f64], negs: &[Vec<f64>], tau: f64) -> Vec<TwoFloat> {
    let e: Vec<TwoFloat> = negs.iter().map(|n| (dot(x, n) / tf(tau)).exp()).collect();
    let z = e.iter().fold(tf(0.0), |a, b| a + *b);
    e.into_iter().map(|v| v / z).collect()
}

pub fn kl_symmetric(q: &[f64], p: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let qd = distribution(q, negs, tau);
    let pd = distribution(p, negs, tau);
    let mut pq = tf(0.0);
    let mut qp = tf(0.0);
    for (a, b) in pd.iter().zip(&qd) {
        pq += *a * (*a / *b).ln();
        qp += *b * (*b / *a).ln();
    }
    f64::from(tf(0.5) * pq + tf(0.5) * qp)
}

pub fn relational(q: &[f64], p: &[f64], negs: &[Vec<f64>], alpha: f64, tau_info: f64, tau_kl: f64) -> f64 {
    f64::from(tf(info_nce(q, p, negs, tau_info)) + tf(alpha) * tf(kl_symmetric(q, p, negs, tau_kl)))
}

pub fn enriched(q: &[f64], qe: &[f64], p: &[f64], negs: &[Vec<f64>], alpha: f64, ti: f64, tk: f64) -> f64 {
    0.5 * relational(q, p, negs, alpha, ti, tk) + 0.5 * relational(qe, p, negs, alpha, ti, tk)
}

/// `1/(3N) * sum over masked pixels and channels of (x - y)^2`.
pub fn mim(pred: &[f64], target: &[f64], mask: &[bool], plane: usize) -> f64 {
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return 0.0;
    }
    let mut sum = tf(0.0);
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let (b, px) = (i / plane, i % plane);
        for c in 0..3 {
            let j = (b * 3 + c) * plane + px;
            let d = tf(pred[j]) - tf(target[j]);
            sum += d * d;
        }
    }
    f64::from(sum / tf(3.0 * n as f64))
}

pub fn unit(rng: &mut RandomStream, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn rows(rng: &mut RandomStream, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| unit(rng, d)).collect()
}

pub fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), d), rows.concat()).unwrap()
}

pub fn to_vec(v: &[f64]) -> Array1<f64> {
    Array1::from(v.to_vec())
}

/// One seeded relational instance: query, enriched query, positive, negatives, temperatures.
pub struct Micro {
    pub q: Vec<f64>,
    pub qe: Vec<f64>,
    pub p: Vec<f64>,
    pub negs: Vec<Vec<f64>>,
    pub alpha: f64,
    pub tau_info: f64,
    pub tau_kl: f64,
}

pub fn micro(label: &str, i: u64) -> Micro {
    let mut rng = seeded_rng(i, label);
    let d = 3 + rng.below(6);
    let k = 2 + rng.below(7);
    Micro {
        q: unit(&mut rng, d),
        qe: unit(&mut rng, d),
        p: unit(&mut rng, d),
        negs: rows(&mut rng, k, d),
        alpha: rng.uniform(0.0, 1.0),
        tau_info: rng.uniform(0.07, 1.0),
        tau_kl: rng.uniform(0.1, 1.0),
    }
}

pub mod suites {
    use super::*;
    use textssl::config::InterLoss;
    use textssl::losses::{self, LevelBatch, RelationalParams};

    pub const INSTANCES: u64 = 100;

    fn params(m: &Micro) -> RelationalParams {
        RelationalParams {
            alpha: m.alpha,
            tau_info: m.tau_info,
            tau_kl: m.tau_kl,
        }
    }

    fn worst(label: &str, f: impl Fn(&Micro) -> (f64, f64)) -> f64 {
        (0..INSTANCES)
            .map(|i| {
                let (got, want) = f(&micro(label, i));
                rel_err(got, want)
            })
            .fold(0.0, f64::max)
    }

    pub fn info_nce() -> f64 {
        worst("oracle-info", |m| {
            let negs = to_array(&m.negs);
            let got = losses::info_nce(to_vec(&m.q).view(), to_vec(&m.p).view(), negs.view(), m.tau_info).unwrap();
            (got, super::info_nce(&m.q, &m.p, &m.negs, m.tau_info))
        })
    }

    pub fn similarity_distribution() -> f64 {
        (0..INSTANCES)
            .map(|i| {
                let m = micro("oracle-dist", i);
                let negs = to_array(&m.negs);
                let got = losses::similarity_distribution(to_vec(&m.q).view(), negs.view(), m.tau_kl).unwrap();
                let want = distribution(&m.q, &m.negs, m.tau_kl);
                got.probs
                    .iter()
                    .zip(&want)
                    .map(|(g, w)| rel_err(*g, f64::from(*w)))
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    pub fn kl_symmetric() -> f64 {
        worst("oracle-kl", |m| {
            let negs = to_array(&m.negs);
            let got = losses::kl_symmetric(to_vec(&m.q).view(), to_vec(&m.p).view(), negs.view(), m.tau_kl).unwrap();
            (got, super::kl_symmetric(&m.q, &m.p, &m.negs, m.tau_kl))
        })
    }

    pub fn relational_loss() -> f64 {
        worst("oracle-re", |m| {
            let negs = to_array(&m.negs);
            let got =
                losses::relational_loss(to_vec(&m.q).view(), to_vec(&m.p).view(), negs.view(), &params(m)).unwrap();
            (got, relational(&m.q, &m.p, &m.negs, m.alpha, m.tau_info, m.tau_kl))
        })
    }

    pub fn enriched_relational_loss() -> f64 {
        worst("oracle-ere", |m| {
            let negs = to_array(&m.negs);
            let got = losses::enriched_relational_loss(
                to_vec(&m.q).view(),
                to_vec(&m.qe).view(),
                to_vec(&m.p).view(),
                negs.view(),
                &params(m),
            )
            .unwrap();
            (got, enriched(&m.q, &m.qe, &m.p, &m.negs, m.alpha, m.tau_info, m.tau_kl))
        })
    }

    /// Batch of `B=2` images with `F=4` frames, `T=2` subwords and `K=4` negatives per level.
    pub struct Hier {
        pub q: [Vec<Vec<f64>>; 3],
        pub qe: [Vec<Vec<f64>>; 3],
        pub p: [Vec<Vec<f64>>; 3],
        pub negs: [Vec<Vec<f64>>; 3],
        pub m: Micro,
    }

    pub const B: usize = 2;
    pub const F: usize = 4;
    pub const T: usize = 2;

    pub fn hier(i: u64) -> Hier {
        let m = micro("oracle-hier", i);
        let d = m.q.len();
        let mut rng = seeded_rng(i, "oracle-hier-rows");
        let slots = [B * F, B * T, B];
        let mut gen = || slots.map(|n| rows(&mut rng, n, d));
        let (q, qe, p) = (gen(), gen(), gen());
        let negs = [4, 4, 4].map(|k| rows(&mut rng, k, d));
        Hier { q, qe, p, negs, m }
    }

    fn hier_oracle(h: &Hier) -> f64 {
        let m = &h.m;
        (0..3)
            .map(|l| {
                let n = h.q[l].len();
                let sum: f64 = (0..n)
                    .map(|r| {
                        enriched(
                            &h.q[l][r],
                            &h.qe[l][r],
                            &h.p[l][r],
                            &h.negs[l],
                            m.alpha,
                            m.tau_info,
                            m.tau_kl,
                        )
                    })
                    .sum();
                sum / n as f64
            })
            .sum()
    }

    /// Frame `f` of image `b` maps to subword `floor(f T / F)` of image `b`; every subword to its word.
    fn inter_oracle(h: &Hier) -> (f64, f64) {
        let tk = h.m.tau_kl;
        let f2s: f64 = (0..B * F)
            .map(|r| {
                let (b, f) = (r / F, r % F);
                super::kl_symmetric(&h.q[0][r], &h.p[1][b * T + f * T / F], &h.negs[1], tk)
            })
            .sum::<f64>()
            / (B * F) as f64;
        let s2w: f64 = (0..B * T)
            .map(|r| super::kl_symmetric(&h.q[1][r], &h.p[2][r / T], &h.negs[2], tk))
            .sum::<f64>()
            / (B * T) as f64;
        (f2s, s2w)
    }

    fn arrays(h: &Hier) -> [[Array2<f64>; 3]; 4] {
        [&h.q, &h.qe, &h.p, &h.negs].map(|set| [0, 1, 2].map(|l| to_array(&set[l])))
    }

    fn lib_hier(h: &Hier) -> f64 {
        let [q, qe, p, n] = arrays(h);
        let batch = |l: usize| {
            Some(LevelBatch {
                q: q[l].view(),
                q_enriched: Some(qe[l].view()),
                p: p[l].view(),
                negs: n[l].view(),
            })
        };
        losses::hierarchical_loss([batch(0), batch(1), batch(2)], &params(&h.m))
            .unwrap()
            .total
    }

    fn lib_inter(h: &Hier) -> (f64, f64) {
        let [q, _, p, n] = arrays(h);
        let out = losses::inter_hierarchy_loss(
            q[0].view(),
            q[1].view(),
            p[1].view(),
            p[2].view(),
            n[1].view(),
            n[2].view(),
            F,
            T,
            InterLoss::Kl,
            &params(&h.m),
        )
        .unwrap();
        (out.f2s.value, out.s2w.value)
    }

    pub fn hierarchical_loss() -> f64 {
        (0..INSTANCES)
            .map(|i| {
                let h = hier(i);
                rel_err(lib_hier(&h), hier_oracle(&h))
            })
            .fold(0.0, f64::max)
    }

    pub fn inter_hierarchy_loss() -> f64 {
        (0..INSTANCES)
            .map(|i| {
                let h = hier(i);
                let (f2s, s2w) = lib_inter(&h);
                let (of2s, os2w) = inter_oracle(&h);
                rel_err(f2s, of2s).max(rel_err(s2w, os2w))
            })
            .fold(0.0, f64::max)
    }

    pub fn rcl_total() -> f64 {
        (0..INSTANCES)
            .map(|i| {
                let h = hier(i);
                let (f2s, s2w) = lib_inter(&h);
                let (of2s, os2w) = inter_oracle(&h);
                let want = f64::from(tf(hier_oracle(&h)) + tf(of2s) + tf(os2w));
                rel_err(losses::rcl_total(lib_hier(&h), f2s, s2w), want)
            })
            .fold(0.0, f64::max)
    }

    /// Random `[b, 3, h, w]` prediction and target with a random pixel mask.
    pub fn mim_instance(i: u64) -> (Vec<f64>, Vec<f64>, Vec<bool>, usize) {
        let mut rng = seeded_rng(i, "oracle-mim");
        let (b, h, w) = (1 + rng.below(3), 2 + rng.below(4), 2 + rng.below(6));
        let n = b * 3 * h * w;
        let pred = (0..n).map(|_| rng.uniform(-0.5, 1.5)).collect();
        let target = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
        let mut mask: Vec<bool> = (0..b * h * w).map(|_| rng.bernoulli(0.5)).collect();
        mask[0] = true;
        (pred, target, mask, h * w)
    }

    pub fn mim_loss() -> f64 {
        (0..INSTANCES)
            .map(|i| {
                let (pred, target, mask, plane) = mim_instance(i);
                let got = losses::mim_loss(&pred, &target, &mask, plane).unwrap().value;
                rel_err(got, mim(&pred, &target, &mask, plane))
            })
            .fold(0.0, f64::max)
    }

    pub fn total_loss() -> f64 {
        (0..INSTANCES)
            .map(|i| {
                let h = hier(i);
                let (pred, target, mask, plane) = mim_instance(i);
                let beta = micro("oracle-beta", i).alpha;
                let (f2s, s2w) = lib_inter(&h);
                let rcl = losses::rcl_total(lib_hier(&h), f2s, s2w);
                let l_mim = losses::mim_loss(&pred, &target, &mask, plane).unwrap().value;
                let (of2s, os2w) = inter_oracle(&h);
                let want_rcl = tf(hier_oracle(&h)) + tf(of2s) + tf(os2w);
                let want = f64::from(tf(mim(&pred, &target, &mask, plane)) + tf(beta) * want_rcl);
                rel_err(losses::total_loss(l_mim, rcl, beta), want)
            })
            .fold(0.0, f64::max)
    }

    /// Worst relative error of each of the ten loss operations.
    pub fn all() -> Vec<(&'static str, f64)> {
        vec![
            ("info_nce", info_nce()),
            ("similarity_distribution", similarity_distribution()),
            ("kl_symmetric", kl_symmetric()),
            ("relational_loss", relational_loss()),
            ("enriched_relational_loss", enriched_relational_loss()),
            ("hierarchical_loss", hierarchical_loss()),
            ("inter_hierarchy_loss", inter_hierarchy_loss()),
            ("rcl_total", rcl_total()),
            ("mim_loss", mim_loss()),
            ("total_loss", total_loss()),
        ]
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + h;
                let up = f(&x);
                x[i] = orig - h;
                let down = f(&x);
                x[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    pub const GRAD_INSTANCES: u64 = 10;
    pub const FD_STEP: f64 = 1e-4;

    type GradFn = fn(
        ndarray::ArrayView1<'_, f64>,
        ndarray::ArrayView1<'_, f64>,
        ndarray::ArrayView2<'_, f64>,
        f64,
    ) -> textssl::Result<(f64, losses::RelationalGrad)>;

    /// Worst relative error of the analytic `(dq, dp, dnegs)` against finite differences.
    fn relational_grad(label: &str, f: GradFn, tau: impl Fn(&Micro) -> f64) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..GRAD_INSTANCES {
            let m = micro(label, i);
            let t = tau(&m);
            let (d, k) = (m.q.len(), m.negs.len());
            let negs_flat = m.negs.concat();
            let eval = |q: &[f64], p: &[f64], n: &[f64]| {
                let negs = Array2::from_shape_vec((k, d), n.to_vec()).unwrap();
                f(to_vec(q).view(), to_vec(p).view(), negs.view(), t).unwrap().0
            };
            let negs = to_array(&m.negs);
            let (_, g) = f(to_vec(&m.q).view(), to_vec(&m.p).view(), negs.view(), t).unwrap();
            let nq = numeric(&m.q, FD_STEP, |x| eval(x, &m.p, &negs_flat));
            let np = numeric(&m.p, FD_STEP, |x| eval(&m.q, x, &negs_flat));
            let nn = numeric(&negs_flat, FD_STEP, |x| eval(&m.q, &m.p, x));
            worst = worst
                .max(vec_rel_err(g.dq.as_slice().unwrap(), &nq))
                .max(vec_rel_err(g.dp.as_slice().unwrap(), &np))
                .max(vec_rel_err(g.dnegs.as_slice().unwrap(), &nn));
        }
        worst
    }

    pub fn info_nce_grad() -> f64 {
        relational_grad("grad-info", losses::info_nce_with_grad, |m| m.tau_info)
    }

    pub fn kl_grad() -> f64 {
        relational_grad("grad-kl", losses::kl_symmetric_with_grad, |m| m.tau_kl)
    }

    pub fn mim_grad() -> f64 {
        let mut worst = 0.0f64;
        for i in 0..GRAD_INSTANCES {
            let (pred, target, mask, plane) = mim_instance(1000 + i);
            let out = losses::mim_loss(&pred, &target, &mask, plane).unwrap();
            let val = |p: &[f64], t: &[f64]| losses::mim_loss(p, t, &mask, plane).unwrap().value;
            let np = numeric(&pred, FD_STEP, |x| val(x, &target));
            let nt = numeric(&target, FD_STEP, |x| val(&pred, x));
            worst = worst
                .max(vec_rel_err(&out.dpred, &np))
                .max(vec_rel_err(&out.dtarget, &nt));
        }
        worst
    }
}
