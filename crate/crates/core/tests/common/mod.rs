//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepdgconv::autodiff::{Graph, Var};
use sepdgconv::data::Samples;
use sepdgconv::tensor::Tensor;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Largest relative error between the analytic gradient of `build`
/// (projected to a scalar by fixed random weights) and central differences
/// over every input entry.
pub fn fd_error<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = rng(99);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let probe = build(&mut g, &vars);
    let proj = Tensor::from_fn(g.value(probe).shape(), |_| rng.gen_range(-1.0..1.0));
    let scalar = |g: &mut Graph, vars: &[Var]| -> Var {
        let out = build(g, vars);
        let pv = g.constant(proj.clone());
        let m = g.mul(out, pv).unwrap();
        g.sum(m)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = scalar(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = scalar(&mut g, &vars);
        g.value(loss).item()
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for idx in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0));
        }
    }
    worst
}

pub fn check<F>(inputs: Vec<Tensor>, build: F, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let e = fd_error(&inputs, build);
    assert!(e <= tol, "finite-difference error {e} above {tol}");
}

/// Direct cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    naive_group_conv(x, w, stride, pad, |_, _| true)
}

/// Convolution where output channel `o` only reads input channel `c` when
/// `connected(o, c)`.
pub fn naive_group_conv(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    connected: impl Fn(usize, usize) -> bool,
) -> Tensor {
    let [n, c, h, wd] = x.dims4().unwrap();
    let [o, _, k, _] = w.dims4().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let xa = |b: usize, ch: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
            0.0
        } else {
            x.data()[((b * c + ch) * h + i as usize) * wd + j as usize]
        }
    };
    Tensor::from_fn(&[n, o, ho, wo], |idx| {
        let j = idx % wo;
        let i = idx / wo % ho;
        let oc = idx / (wo * ho) % o;
        let b = idx / (wo * ho * o);
        let mut s = 0.0;
        for ch in (0..c).filter(|&ch| connected(oc, ch)) {
            for m in 0..k {
                for q in 0..k {
                    let yi = (i * stride + m) as isize - pad as isize;
                    let xj = (j * stride + q) as isize - pad as isize;
                    s += w.data()[((oc * c + ch) * k + m) * k + q] * xa(b, ch, yi, xj);
                }
            }
        }
        s
    })
}

/// Kronecker product of explicit 2x2 factors, first factor outermost.
pub fn kron_oracle(g: &[u8]) -> Vec<Vec<u8>> {
    let mut acc = vec![vec![1u8]];
    for &gi in g {
        let f = [[1, gi], [gi, 1]];
        let n = acc.len();
        let mut next = vec![vec![0u8; 2 * n]; 2 * n];
        for (a, row) in acc.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                for p in 0..2 {
                    for q in 0..2 {
                        next[a * 2 + p][b * 2 + q] = v * f[p][q];
                    }
                }
            }
        }
        acc = next;
    }
    acc
}

/// Connected components of the bipartite graph, by breadth-first search.
pub fn components_bfs(m: &[Vec<u8>]) -> usize {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    let mut seen = vec![false; rows + cols];
    let mut count = 0;
    for start in 0..rows + cols {
        if seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            let neighbours: Vec<usize> = if v < rows {
                (0..cols).filter(|&c| m[v][c] == 1).map(|c| rows + c).collect()
            } else {
                (0..rows).filter(|&r| m[r][v - rows] == 1).collect()
            };
            for u in neighbours {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
    count
}

/// Product of the gates on every bit where `a` and `b` differ, most
/// significant bit first.
pub fn gated_entry(g: &[f64], a: usize, b: usize) -> f64 {
    let k = g.len();
    (0..k).filter(|&t| (a >> (k - 1 - t)) & 1 != (b >> (k - 1 - t)) & 1).map(|t| g[t]).product()
}

fn center_values(s: &Samples, i: usize, channels: std::ops::Range<usize>) -> Vec<f64> {
    let [_, c, h, w] = s.x.dims4().unwrap();
    channels.map(|ch| s.x.data()[((i * c + ch) * h + h / 2) * w + w / 2]).collect()
}

fn majority(counts: &BTreeMap<i64, usize>) -> i64 {
    counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map_or(0, |(&k, _)| k)
}

/// Test OA of the majority-class lookup keyed on the exact centre-pixel
/// values of `channels`; unseen keys fall back to the overall majority.
pub fn lookup_oa(train: &Samples, test: &Samples, channels: std::ops::Range<usize>) -> f64 {
    let key = |s: &Samples, i: usize| -> Vec<u64> {
        center_values(s, i, channels.clone()).iter().map(|v| v.to_bits()).collect()
    };
    let mut table: BTreeMap<Vec<u64>, BTreeMap<i64, usize>> = BTreeMap::new();
    let mut all = BTreeMap::new();
    for i in 0..train.len() {
        *table.entry(key(train, i)).or_default().entry(train.y[i]).or_default() += 1;
        *all.entry(train.y[i]).or_default() += 1;
    }
    let fallback = majority(&all);
    let correct = (0..test.len()).filter(|&i| table.get(&key(test, i)).map_or(fallback, majority) == test.y[i]).count();
    correct as f64 / test.len() as f64
}

/// Exhaustive two-class decision stump over every pixel of `channels`;
/// the stump with the best training OA is scored on `test`.
pub fn stump_oa(train: &Samples, test: &Samples, channels: std::ops::Range<usize>) -> f64 {
    let [_, c, h, w] = train.x.dims4().unwrap();
    let feature = |s: &Samples, i: usize, f: usize| s.x.data()[i * c * h * w + f];
    let mut best = (-1.0, 0usize, 0.0, 0i64, 0i64);
    let classes: Vec<i64> = {
        let mut v = train.y.clone();
        v.sort_unstable();
        v.dedup();
        v
    };
    for f in channels.start * h * w..channels.end * h * w {
        let mut vals: Vec<f64> = (0..train.len()).map(|i| feature(train, i, f)).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let thresholds: Vec<f64> =
            std::iter::once(vals[0] - 1.0).chain(vals.windows(2).map(|p| 0.5 * (p[0] + p[1]))).collect();
        for &t in &thresholds {
            for &lo in &classes {
                for &hi in &classes {
                    let acc = (0..train.len())
                        .filter(|&i| (if feature(train, i, f) <= t { lo } else { hi }) == train.y[i])
                        .count() as f64
                        / train.len() as f64;
                    if acc > best.0 {
                        best = (acc, f, t, lo, hi);
                    }
                }
            }
        }
    }
    let (_, f, t, lo, hi) = best;
    (0..test.len()).filter(|&i| (if feature(test, i, f) <= t { lo } else { hi }) == test.y[i]).count() as f64
        / test.len() as f64
}

/// Channel range of each modality, in stacking order.
pub fn modality_ranges(widths: &[usize]) -> Vec<std::ops::Range<usize>> {
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let r = start..start + w;
            start += w;
            r
        })
        .collect()
}
