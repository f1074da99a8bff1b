//! Random graph generation and central-difference gradient checking.

use std::collections::HashSet;

use pruneprobe::autodiff::{Graph, OpKind, Segment, Var};
use pruneprobe::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameter values and structural choices recorded on the first build and
/// replayed when the graph is rebuilt for finite differences.
#[derive(Default)]
struct Tape {
    params: Vec<Tensor>,
    vars: Vec<Var>,
    flags: Vec<bool>,
    replay: bool,
    p: usize,
    f: usize,
}

impl Tape {
    fn param(&mut self, g: &mut Graph, rng: &mut ChaCha8Rng, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        let fresh = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let value = if self.replay {
            self.params[self.p].clone()
        } else {
            self.params.push(fresh);
            self.params[self.p].clone()
        };
        self.p += 1;
        let v = g.param(value);
        self.vars.push(v);
        v
    }

    fn flag(&mut self, value: impl FnOnce() -> bool) -> bool {
        let v = if self.replay {
            self.flags[self.f]
        } else {
            let v = value();
            self.flags.push(v);
            v
        };
        self.f += 1;
        v
    }
}

fn dims(g: &Graph, v: Var) -> (usize, usize) {
    g.value(v).dims2().unwrap()
}

fn near_kink(g: &Graph, v: Var) -> bool {
    g.value(v).data().iter().any(|x| x.abs() < 1e-2)
}

fn build(seed: u64, tape: &mut Tape) -> (Graph, Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut g = Graph::new();
    tape.p = 0;
    tape.f = 0;
    tape.vars.clear();
    let (r, c) = (rng.random_range(2..5), rng.random_range(2..5));
    let mut x = tape.param(&mut g, &mut rng, &[r, c]);
    // Every graph gets one op drawn in order so small seed ranges cover them all.
    let forced = (seed % 17) as usize;
    let steps = rng.random_range(2..5);
    for step in 0..steps {
        let op = if step == 0 { forced } else { rng.random_range(0..17) };
        let (r, c) = dims(&g, x);
        x = match op {
            0 => {
                let m = rng.random_range(2..5);
                let w = tape.param(&mut g, &mut rng, &[c, m]);
                g.matmul(x, w).unwrap()
            }
            1 => {
                let m = rng.random_range(2..5);
                let w = tape.param(&mut g, &mut rng, &[m, c]);
                g.matmul_bt(x, w).unwrap()
            }
            2 => {
                let y = tape.param(&mut g, &mut rng, &[r, c]);
                g.add(x, y).unwrap()
            }
            3 => {
                let y = tape.param(&mut g, &mut rng, &[r, c]);
                g.sub(y, x).unwrap()
            }
            4 => {
                // Squaring exercises gradient accumulation on a shared input.
                if rng.random_bool(0.5) {
                    g.mul(x, x).unwrap()
                } else {
                    let y = tape.param(&mut g, &mut rng, &[r, c]);
                    g.mul(x, y).unwrap()
                }
            }
            5 => g.scale(x, rng.random_range(-2.0..2.0)).unwrap(),
            6 => {
                let b = tape.param(&mut g, &mut rng, &[c]);
                g.add_row(x, b).unwrap()
            }
            7 => {
                let b = tape.param(&mut g, &mut rng, &[c]);
                let y = g.add_row(x, b).unwrap();
                let ok = tape.flag(|| !near_kink(&g, y));
                if ok {
                    g.relu(y).unwrap()
                } else {
                    y
                }
            }
            8 => {
                let causal = rng.random_bool(0.5);
                g.softmax_rows(x, causal).unwrap()
            }
            9 => {
                let gain = tape.param(&mut g, &mut rng, &[c]);
                let bias = tape.param(&mut g, &mut rng, &[c]);
                g.layer_norm(x, gain, bias, 1e-5).unwrap()
            }
            10 => {
                let vocab = rng.random_range(2..5);
                let table = tape.param(&mut g, &mut rng, &[vocab, c]);
                let ids: Vec<usize> = (0..r).map(|_| rng.random_range(0..vocab)).collect();
                let e = g.gather(table, &ids).unwrap();
                g.add(x, e).unwrap()
            }
            11 => {
                if c < 2 {
                    x
                } else {
                    let len = rng.random_range(1..c);
                    let start = rng.random_range(0..=c - len);
                    g.slice_cols(x, start, len).unwrap()
                }
            }
            12 => {
                let m = rng.random_range(1..3);
                let y = tape.param(&mut g, &mut rng, &[r, m]);
                if rng.random_bool(0.5) {
                    g.concat_cols(&[x, y]).unwrap()
                } else {
                    g.concat_cols(&[y, x, y]).unwrap()
                }
            }
            13 => {
                if r < 2 {
                    x
                } else {
                    let len = rng.random_range(1..r);
                    let start = rng.random_range(0..=r - len);
                    g.slice_rows(x, start, len).unwrap()
                }
            }
            14 => {
                let m = rng.random_range(1..3);
                let y = tape.param(&mut g, &mut rng, &[m, c]);
                g.concat_rows(&[y, x]).unwrap()
            }
            15 => g.dropout(x, 0.3, &mut drop_rng).unwrap(),
            _ => attention(&mut g, &mut rng, tape, x),
        };
    }
    let root = if rng.random_bool(0.5) {
        let (r, c) = dims(&g, x);
        let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        // Ignore one row's label half the time.
        let ignore = if rng.random_bool(0.5) { targets[0] } else { c };
        let ignore = if targets.iter().all(|&t| t == ignore) { c } else { ignore };
        g.cross_entropy(x, &targets, ignore).unwrap()
    } else {
        let (r, c) = dims(&g, x);
        let w = Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = g.constant(w);
        let y = g.mul(x, w).unwrap();
        g.sum(y).unwrap()
    };
    (g, root)
}

fn attention(g: &mut Graph, rng: &mut ChaCha8Rng, tape: &mut Tape, x: Var) -> Var {
    let (r, c) = dims(g, x);
    let heads = (1..=c).filter(|h| c % h == 0).nth(rng.random_range(0..2)).unwrap_or(1);
    let wq = tape.param(g, rng, &[c, c]);
    let wk = tape.param(g, rng, &[c, c]);
    let wv = tape.param(g, rng, &[c, c]);
    let q = g.matmul(x, wq).unwrap();
    let self_attn = rng.random_bool(0.5);
    let (src, nk) = if self_attn {
        (x, r)
    } else {
        let nk = rng.random_range(2..5);
        (tape.param(g, rng, &[nk, c]), nk)
    };
    let k = g.matmul(src, wk).unwrap();
    let v = g.matmul(src, wv).unwrap();
    // One or two packed segments.
    let segments = if r >= 2 && nk >= 2 && rng.random_bool(0.5) {
        let (q1, k1) = if self_attn { (r / 2, r / 2) } else { (r / 2, nk / 2) };
        vec![
            Segment { q_start: 0, q_len: q1, k_start: 0, k_len: k1 },
            Segment { q_start: q1, q_len: r - q1, k_start: k1, k_len: nk - k1 },
        ]
    } else {
        vec![Segment { q_start: 0, q_len: r, k_start: 0, k_len: nk }]
    };
    let causal = self_attn && rng.random_bool(0.5);
    g.attention(q, k, v, heads, &segments, causal).unwrap()
}

pub struct CheckResult {
    pub max_rel_error: f64,
    pub kinds: HashSet<OpKind>,
    pub checked: usize,
}

/// Relative error with a floor so that vanishing gradients compare absolutely.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Builds random graph `seed`, backpropagates, and compares every parameter
/// gradient against central differences.
pub fn check_random_graph(seed: u64) -> CheckResult {
    let mut tape = Tape::default();
    let (g, root) = build(seed, &mut tape);
    let grads = g.backward(root).unwrap();
    let kinds = g.kinds().collect();
    tape.replay = true;
    let analytic: Vec<Tensor> = (0..tape.params.len())
        .map(|i| {
            grads
                .get(tape.vars[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.params[i].shape()))
        })
        .collect();
    // Five-point central stencil: truncation error O(h⁴), roundoff ~ε/h.
    let h = 1e-4;
    let eval = |tape: &mut Tape| {
        let (g, root) = build(seed, tape);
        g.value(root).item()
    };
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    for i in 0..tape.params.len() {
        for j in 0..tape.params[i].len() {
            let orig = tape.params[i].data()[j];
            let mut at = |delta: f64| {
                tape.params[i].data_mut()[j] = orig + delta;
                eval(&mut tape)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            tape.params[i].data_mut()[j] = orig;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
            max_rel_error = max_rel_error.max(rel_error(analytic[i].data()[j], numeric));
            checked += 1;
        }
    }
    CheckResult {
        max_rel_error,
        kinds,
        checked,
    }
}
