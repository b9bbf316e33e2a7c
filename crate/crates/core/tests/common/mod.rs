//! Naive reference implementations used as independent oracles. Written with
//! plain loops over nested vectors and sharing no code with the library.

#![allow(dead_code)]

pub mod primitives;

use mome::arch::ModelState;
use mome::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let s = t.shape();
    let (r, c) = match s.len() {
        1 => (1, s[0]),
        2 => (s[0], s[1]),
        _ => panic!("to_mat on rank {}", s.len()),
    };
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn vector(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    matmul(x, w)
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(v, c)| v + c).collect())
        .collect()
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / sd * g[i] + b[i])
                .collect()
        })
        .collect()
}

/// Standard normal CDF by composite Simpson integration of the density
/// from 0 to |x|.
pub fn normal_cdf(x: f64) -> f64 {
    let n = 4000;
    let a = x.abs();
    let h = a / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(a);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * pdf(i as f64 * h);
    }
    let half = s * h / 3.0;
    if x >= 0.0 {
        0.5 + half
    } else {
        0.5 - half
    }
}

pub fn gelu(x: &Mat) -> Mat {
    x.iter()
        .map(|r| r.iter().map(|&v| v * normal_cdf(v)).collect())
        .collect()
}

pub fn softmax_rows(x: &Mat) -> Mat {
    x.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn softmax_cols(x: &Mat) -> Mat {
    transpose(&softmax_rows(&transpose(x)))
}

pub fn attention(
    x: &Mat,
    q: (&Mat, &[f64]),
    k: (&Mat, &[f64]),
    v: (&Mat, &[f64]),
    o: (&Mat, &[f64]),
    heads: usize,
) -> Mat {
    let qm = linear(x, q.0, q.1);
    let km = linear(x, k.0, k.1);
    let vm = linear(x, v.0, v.1);
    let m = x.len();
    let d = qm[0].len();
    let dh = d / heads;
    let mut ctx = vec![vec![0.0; d]; m];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let scores: Mat = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| cols.clone().map(|c| qm[i][c] * km[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect()
            })
            .collect();
        let p = softmax_rows(&scores);
        for i in 0..m {
            for c in cols.clone() {
                ctx[i][c] = (0..m).map(|j| p[i][j] * vm[j][c]).sum();
            }
        }
    }
    linear(&ctx, o.0, o.1)
}

/// Reads named parameters out of a model state.
pub struct P<'a>(pub &'a ModelState);

impl P<'_> {
    pub fn m(&self, name: &str) -> Mat {
        to_mat(&self.0.get(name).unwrap().tensor)
    }
    pub fn v(&self, name: &str) -> Vec<f64> {
        vector(&self.0.get(name).unwrap().tensor)
    }
    pub fn lin(&self, x: &Mat, prefix: &str) -> Mat {
        linear(x, &self.m(&format!("{prefix}.w")), &self.v(&format!("{prefix}.b")))
    }
    pub fn ln(&self, x: &Mat, prefix: &str) -> Mat {
        layer_norm(x, &self.v(&format!("{prefix}.g")), &self.v(&format!("{prefix}.b")))
    }

    /// Frozen path of block `l`: returns `(Z, LN2(Z), Z + FFN(LN2(Z)))`.
    pub fn backbone(&self, l: usize, x: &Mat) -> (Mat, Mat, Mat) {
        let pre = |s: &str| format!("blk{l}.{s}");
        let h = self.ln(x, &pre("ln1"));
        let get = |s: &str| {
            (
                self.m(&pre(&format!("attn.{s}.w"))),
                self.v(&pre(&format!("attn.{s}.b"))),
            )
        };
        let (q, k, v, o) = (get("q"), get("k"), get("v"), get("o"));
        let a = attention(
            &h,
            (&q.0, &q.1),
            (&k.0, &k.1),
            (&v.0, &v.1),
            (&o.0, &o.1),
            self.0.config.heads,
        );
        let z = add(x, &a);
        let hz = self.ln(&z, &pre("ln2"));
        let f = self.lin(&gelu(&self.lin(&hz, &pre("ffn.up"))), &pre("ffn.down"));
        let out = add(&z, &f);
        (z, hz, out)
    }

    pub fn sparse_block(&self, l: usize, modality: &str, x: &Mat) -> Mat {
        let (_, hz, out) = self.backbone(l, x);
        let pre = |s: &str| format!("blk{l}.adapter.{modality}.{s}");
        let a = self.ln(&self.lin(&gelu(&self.lin(&hz, &pre("down"))), &pre("up")), &pre("ln"));
        add(&out, &a)
    }

    pub fn soft_block(&self, l: usize, x: &Mat) -> Mat {
        let (_, hz, out) = self.backbone(l, x);
        let pre = |s: &str| format!("blk{l}.soft.{s}");
        let h = gelu(&self.lin(&hz, &pre("down")));
        let ew = &self.0.get(&pre("experts.w")).unwrap().tensor;
        let eb = &self.0.get(&pre("experts.b")).unwrap().tensor;
        let y = soft_moe(&h, &self.m(&pre("phi")), ew, eb, self.0.config.slots_per_expert);
        let a = self.ln(&self.lin(&y, &pre("up")), &pre("ln"));
        add(&out, &a)
    }
}

/// Soft MoE with experts given as `[n × d × d]` weights and `[n × d]` biases.
pub fn soft_moe(x: &Mat, phi: &Mat, ew: &Tensor, eb: &Tensor, p: usize) -> Mat {
    let logits = matmul(x, phi);
    let d_disp = softmax_cols(&logits);
    let slots = matmul(&transpose(&d_disp), x);
    let (din, dout) = (ew.shape()[1], ew.shape()[2]);
    let y_tilde: Mat = slots
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let e = j / p;
            (0..dout)
                .map(|c| {
                    eb.data()[e * dout + c]
                        + (0..din)
                            .map(|r| s[r] * ew.data()[e * din * dout + r * dout + c])
                            .sum::<f64>()
                })
                .collect()
        })
        .collect();
    let comb = softmax_rows(&logits);
    matmul(&comb, &y_tilde)
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Deterministic pseudo-random fill for test inputs.
pub fn filled(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_volumes(state: &ModelState, seed: u64) -> Vec<Tensor> {
    state
        .config
        .modalities
        .iter()
        .enumerate()
        .map(|(i, m)| filled(&m.volume_shape(), seed * 31 + i as u64))
        .collect()
}

/// Give every trainable tensor random values so adapters are active.
pub fn randomize_trainable(state: &mut ModelState, seed: u64, scale: f64) {
    let names: Vec<String> = state.trainable().map(|(n, _)| n.clone()).collect();
    for (k, n) in names.iter().enumerate() {
        let p = state.get_mut(n).unwrap();
        let t = filled(p.tensor.shape(), seed * 1000 + k as u64);
        for (dst, src) in p.tensor.data_mut().iter_mut().zip(t.data()) {
            *dst = scale * src;
        }
    }
}

/// AUROC as the fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn concordance_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// AUROC by sweeping every distinct threshold from high to low and
/// integrating the resulting ROC polyline with trapezoids.
pub fn sweep_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thr: Vec<f64> = scores.to_vec();
    thr.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thr.dedup();
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n = labels.len() as f64 - p;
    let mut pts = vec![(0.0, 0.0)];
    for t in thr {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 1).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 0).count() as f64;
        pts.push((fp / n, tp / p));
    }
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Small generated studies that fit the tiny model's canvases.
pub fn tiny_data(n: usize, seed: u64) -> Vec<mome::data::StudyRecord> {
    use mome::data::{generate, GenConfig, GenModality};
    let m = |name: &str, dims, channels, amplitude| GenModality {
        name: name.into(),
        dims,
        channels,
        amplitude,
    };
    let cfg = GenConfig {
        n_studies: n,
        n_val: n / 4,
        n_test: 0,
        seed,
        lesion_radius_range: [1.0, 1.5],
        modalities: vec![
            m("dce", [6, 3, 3], 2, 1.5),
            m("dwi", [3, 3, 3], 1, 0.8),
            m("t2", [3, 6, 3], 1, 0.4),
        ],
        ..GenConfig::default()
    };
    generate(&cfg).unwrap()
}

/// Partial area from an independently swept ROC, with the region's ends
/// inserted as explicit vertices.
pub fn pauroc_oracle(scores: &[f64], labels: &[u8], region: mome::eval::PartialRegion) -> f64 {
    let mut thr = scores.to_vec();
    thr.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thr.dedup();
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n = labels.len() as f64 - p;
    let mut roc = vec![(0.0, 0.0)];
    for t in thr {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 1).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 0).count() as f64;
        roc.push((fp / n, tp / p));
    }
    let (pts, lo, hi): (Vec<(f64, f64)>, f64, f64) = match region {
        mome::eval::PartialRegion::MinSpecificity(s) => (roc, 0.0, 1.0 - s),
        mome::eval::PartialRegion::MinSensitivity(s) => (roc.iter().map(|&(f, t)| (t, 1.0 - f)).collect(), s, 1.0),
    };
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x1 == x0 {
            continue;
        }
        let mut xs = vec![x0, x1];
        xs.extend([lo, hi].into_iter().filter(|&c| c > x0 && c < x1));
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a >= lo && b <= hi {
                let y = |x: f64| y0 + (y1 - y0) * (x - x0) / (x1 - x0);
                area += (b - a) * (y(a) + y(b)) / 2.0;
            }
        }
    }
    let width = hi - lo;
    let a_min = match region {
        mome::eval::PartialRegion::MinSpecificity(_) => (hi * hi - lo * lo) / 2.0,
        mome::eval::PartialRegion::MinSensitivity(_) => ((1.0 - lo).powi(2) - (1.0 - hi).powi(2)) / 2.0,
    };
    0.5 * (1.0 + (area - a_min) / (width - a_min))
}

/// Shapley values as the average marginal contribution over every ordering
/// of the players.
pub fn permutation_oracle(n: usize, v: &[f64]) -> Vec<f64> {
    fn perms(items: Vec<usize>) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.clone();
            let head = rest.remove(i);
            for mut p in perms(rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }
    let orders = perms((0..n).collect());
    let mut phi = vec![0.0; n];
    for order in &orders {
        let mut coalition = 0usize;
        for &p in order {
            phi[p] += v[coalition | 1 << p] - v[coalition];
            coalition |= 1 << p;
        }
    }
    phi.iter().map(|x| x / orders.len() as f64).collect()
}
