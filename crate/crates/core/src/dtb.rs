//! Dilated Transformer block: channel attention over dilated depthwise
//! projections, followed by a gated dilated feed-forward layer.

use crate::autodiff::{Graph, TapSet, Var};
use crate::error::Result;
use crate::params::{Bound, Init, ParamSpec};
use crate::scalar::Scalar;

/// Block geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DtbShape {
    pub channels: usize,
    pub expansion: usize,
    pub dilation: usize,
}

/// Attention diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionOptions {
    /// Treat the attention map as a constant in the backward pass.
    pub detach_stats: bool,
    /// Replace the attention map by the identity.
    pub identity: bool,
}

/// 1x1 convolution plus dilated 3x3 depthwise convolution.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub pw: Var,
    pub pb: Var,
    pub dw: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DtbParams {
    pub shape: DtbShape,
    pub ln1: (Var, Var),
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub ln2: (Var, Var),
    pub g1: Projection,
    pub g2: Projection,
    pub out_w: Var,
}

fn projection_specs(name: String, c_in: usize, c_out: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{name}.pw"), [c_out, c_in, 1, 1], Init::FanIn(c_in)),
        ParamSpec::new(format!("{name}.pb"), [1, c_out, 1, 1], Init::FanIn(c_in)),
        ParamSpec::new(format!("{name}.dw"), [c_out, 1, 3, 3], Init::FanIn(9)),
    ]
}

/// Parameter inventory of one block named `prefix`.
pub fn dtb_param_specs(prefix: &str, shape: &DtbShape) -> Vec<ParamSpec> {
    let c = shape.channels;
    let e = shape.expansion * c;
    let mut v = vec![
        ParamSpec::new(format!("{prefix}.ln1.g"), [1, c, 1, 1], Init::Const(1.0)),
        ParamSpec::new(format!("{prefix}.ln1.b"), [1, c, 1, 1], Init::Const(0.0)),
        ParamSpec::new(format!("{prefix}.ln2.g"), [1, c, 1, 1], Init::Const(1.0)),
        ParamSpec::new(format!("{prefix}.ln2.b"), [1, c, 1, 1], Init::Const(0.0)),
        ParamSpec::new(format!("{prefix}.out.w"), [c, e, 1, 1], Init::FanIn(e)),
    ];
    for p in ["q", "k", "v"] {
        v.extend(projection_specs(format!("{prefix}.{p}"), c, c));
    }
    for p in ["g1", "g2"] {
        v.extend(projection_specs(format!("{prefix}.{p}"), c, e));
    }
    v
}

impl DtbParams {
    pub fn from_bound(b: &Bound, prefix: &str, shape: DtbShape) -> Result<Self> {
        let proj = |n: &str| -> Result<Projection> {
            Ok(Projection {
                pw: b.get(&format!("{prefix}.{n}.pw"))?,
                pb: b.get(&format!("{prefix}.{n}.pb"))?,
                dw: b.get(&format!("{prefix}.{n}.dw"))?,
            })
        };
        Ok(DtbParams {
            shape,
            ln1: (b.get(&format!("{prefix}.ln1.g"))?, b.get(&format!("{prefix}.ln1.b"))?),
            q: proj("q")?,
            k: proj("k")?,
            v: proj("v")?,
            ln2: (b.get(&format!("{prefix}.ln2.g"))?, b.get(&format!("{prefix}.ln2.b"))?),
            g1: proj("g1")?,
            g2: proj("g2")?,
            out_w: b.get(&format!("{prefix}.out.w"))?,
        })
    }
}

fn project<T: Scalar>(g: &mut Graph<T>, p: &Projection, x: Var, dilation: usize) -> Result<Var> {
    let y = g.conv2d(x, p.pw, Some(p.pb), &TapSet::pointwise(), 1)?;
    g.depthwise_conv2d(y, p.dw, None, 3, dilation)
}

/// `V * softmax(K Q^T / sqrt(hw)) + residual` on (B, C, h, w) maps, the
/// softmax normalizing each row of the C x C map.
pub fn attention_core<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, residual: Var, opts: AttentionOptions) -> Result<Var> {
    let [b, c, h, w] = g.dims(q);
    let flat = [b, 1, c, h * w];
    let mixed = if opts.identity {
        v
    } else {
        let qf = g.reshape(q, flat)?;
        let kf = g.reshape(k, flat)?;
        let vf = g.reshape(v, flat)?;
        let logits = g.matmul(kf, qf, false, true)?;
        let logits = g.scale(logits, T::lit(1.0 / ((h * w) as f64).sqrt()))?;
        let mut a = g.softmax(logits, 3)?;
        if opts.detach_stats {
            a = g.detach(a);
        }
        let av = g.matmul(a, vf, false, false)?;
        g.reshape(av, [b, c, h, w])?
    };
    g.add(mixed, residual)
}

/// Attention sub-layer without the residual: `V * A` computed from `x`.
fn attention_mix<T: Scalar>(g: &mut Graph<T>, p: &DtbParams, x: Var, opts: AttentionOptions) -> Result<Var> {
    let d = p.shape.dilation;
    let q = project(g, &p.q, x, d)?;
    let k = project(g, &p.k, x, d)?;
    let v = project(g, &p.v, x, d)?;
    let zero = g.constant(crate::tensor::Tensor::zeros(g.dims(v)));
    attention_core(g, q, k, v, zero, opts)
}

/// `V * A + X` with Q, K, V projected from X.
pub fn channel_attention<T: Scalar>(g: &mut Graph<T>, p: &DtbParams, x: Var, opts: AttentionOptions) -> Result<Var> {
    let m = attention_mix(g, p, x, opts)?;
    g.add(m, x)
}

/// `W_out (GELU(G1) * G2) + X`, `G_i = g_i(LN(X))`. The output projection
/// has no bias, so a zero gate returns X exactly.
pub fn gated_ffn<T: Scalar>(g: &mut Graph<T>, p: &DtbParams, x: Var) -> Result<Var> {
    let d = p.shape.dilation;
    let n = g.layer_norm(x, p.ln2.0, p.ln2.1)?;
    let g1 = project(g, &p.g1, n, d)?;
    let g2 = project(g, &p.g2, n, d)?;
    let act = g.gelu(g1)?;
    let gated = g.mul(act, g2)?;
    let out = g.conv2d(gated, p.out_w, None, &TapSet::pointwise(), 1)?;
    g.add(out, x)
}

/// Pre-norm attention followed by the gated feed-forward layer.
pub fn dtb_forward<T: Scalar>(g: &mut Graph<T>, p: &DtbParams, x: Var, opts: AttentionOptions) -> Result<Var> {
    let n = g.layer_norm(x, p.ln1.0, p.ln1.1)?;
    let m = attention_mix(g, p, n, opts)?;
    let y = g.add(m, x)?;
    gated_ffn(g, p, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, random_projection};
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    const SHAPE: DtbShape = DtbShape { channels: 3, expansion: 2, dilation: 2 };

    fn store(seed: u64) -> ParamStore {
        ParamStore::init(&dtb_param_specs("b", &SHAPE), seed).unwrap()
    }

    fn input(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(2862933555777941757) | 1;
        Tensor::from_fn(dims, |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 2000) as f64 / 1000.0 - 1.0
        })
    }

    fn zero_matching(p: &mut ParamStore, pred: impl Fn(&str) -> bool) {
        for (k, t) in p.iter_mut() {
            if pred(k) {
                t.data_mut().fill(0.0);
            }
        }
    }

    fn run(p: &ParamStore, x: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, &DtbParams, Var) -> Result<Var>) -> Tensor<f64> {
        let mut g = Graph::<f64>::new();
        let b = p.bind(&mut g, false);
        let dp = DtbParams::from_bound(&b, "b", SHAPE).unwrap();
        let xv = g.constant(x.clone());
        let y = f(&mut g, &dp, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_value_projection_is_residual() {
        let mut p = store(1);
        zero_matching(&mut p, |k| k.starts_with("b.v."));
        let x = input([2, 3, 5, 6], 2);
        assert_eq!(run(&p, &x, |g, d, v| channel_attention(g, d, v, AttentionOptions::default())), x);
    }

    #[test]
    fn identity_attention_adds_values() {
        let p = store(3);
        let x = input([1, 3, 4, 4], 4);
        let opts = AttentionOptions { identity: true, ..Default::default() };
        let out = run(&p, &x, |g, d, v| channel_attention(g, d, v, opts));
        let v = run(&p, &x, |g, d, v| project(g, &d.v, v, 2));
        for ((o, vv), xx) in out.data().iter().zip(v.data()).zip(x.data()) {
            assert!((o - (vv + xx)).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_core_permutation_equivariant() {
        let (q, k, v, r) = (input([1, 3, 2, 2], 5), input([1, 3, 2, 2], 6), input([1, 3, 2, 2], 7), input([1, 3, 2, 2], 8));
        let core = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, r: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let ids: Vec<Var> = [q, k, v, r].iter().map(|t| g.constant((*t).clone())).collect();
            let o = attention_core(&mut g, ids[0], ids[1], ids[2], ids[3], AttentionOptions::default()).unwrap();
            g.value(o).clone()
        };
        let base = core(&q, &k, &v, &r);
        let perms = [[0usize, 1, 2, 3], [3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]];
        for perm in perms {
            let pm = |t: &Tensor<f64>| Tensor::from_fn([1, 3, 2, 2], |[_, c, y, x]| {
                let src = perm[y * 2 + x];
                t.at([0, c, src / 2, src % 2])
            });
            let out = core(&pm(&q), &pm(&k), &pm(&v), &pm(&r));
            assert!(out.data().iter().zip(pm(&base).data()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let p = store(9);
        let mut g = Graph::<f32>::new();
        let b = p.bind(&mut g, false);
        let dp = DtbParams::from_bound(&b, "b", SHAPE).unwrap();
        let x = g.constant(input([1, 3, 6, 6], 10).cast());
        let q = project(&mut g, &dp.q, x, 2).unwrap();
        let k = project(&mut g, &dp.k, x, 2).unwrap();
        let qf = g.reshape(q, [1, 1, 3, 36]).unwrap();
        let kf = g.reshape(k, [1, 1, 3, 36]).unwrap();
        let l = g.matmul(kf, qf, false, true).unwrap();
        let a = g.softmax(l, 3).unwrap();
        for r in 0..3 {
            let s: f32 = (0..3).map(|c| g.value(a).at([0, 0, r, c])).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gate_is_residual() {
        let mut p = store(11);
        zero_matching(&mut p, |k| k.starts_with("b.g1."));
        let x = input([1, 3, 5, 5], 12);
        assert_eq!(run(&p, &x, gated_ffn), x);
    }

    #[test]
    fn delta_depthwise_ffn_keeps_impulse_local() {
        let mut p = store(13);
        for (k, t) in p.iter_mut() {
            if k.ends_with(".dw") {
                let [c, _, _, _] = t.dims();
                *t = Tensor::from_fn([c, 1, 3, 3], |[_, _, y, x]| if (y, x) == (1, 1) { 1.0 } else { 0.0 });
            }
        }
        let x = Tensor::from_fn([1, 3, 7, 7], |[_, c, y, x]| if (y, x) == (3, 3) { 0.5 + c as f64 } else { 0.0 });
        let out = run(&p, &x, gated_ffn);
        let far = run(&p, &Tensor::zeros([1, 3, 7, 7]), gated_ffn);
        for y in 0..7 {
            for xx in 0..7 {
                for c in 0..3 {
                    if (y, xx) != (3, 3) {
                        assert_eq!(out.at([0, c, y, xx]), far.at([0, c, y, xx]));
                    }
                }
            }
        }
    }

    #[test]
    fn zero_non_residual_weights_is_identity() {
        let mut p = store(14);
        zero_matching(&mut p, |k| !k.contains(".ln"));
        let x = input([2, 3, 4, 5], 15);
        let out = run(&p, &x, |g, d, v| dtb_forward(g, d, v, AttentionOptions::default()));
        assert_eq!(out, x);
        let odd = input([1, 3, 7, 3], 16);
        assert_eq!(run(&store(1), &odd, |g, d, v| dtb_forward(g, d, v, AttentionOptions::default())).dims(), [1, 3, 7, 3]);
    }

    #[test]
    fn shift_equivariance_on_padded_canvas() {
        let p = store(17);
        let content = input([1, 3, 4, 4], 18);
        let place = |oy: usize, ox: usize| {
            Tensor::from_fn([1, 3, 20, 20], |[_, c, y, x]| {
                if (oy..oy + 4).contains(&y) && (ox..ox + 4).contains(&x) {
                    content.at([0, c, y - oy, x - ox])
                } else {
                    0.0
                }
            })
        };
        let f = |g: &mut Graph<f64>, d: &DtbParams, v: Var| dtb_forward(g, d, v, AttentionOptions::default());
        let a = run(&p, &place(7, 7), f);
        let b = run(&p, &place(9, 9), f);
        for c in 0..3 {
            for y in 5..13 {
                for x in 5..13 {
                    assert!((a.at([0, c, y, x]) - b.at([0, c, y + 2, x + 2])).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn full_block_gradcheck() {
        let p = store(19);
        let x = input([1, 3, 4, 4], 20);
        let names: Vec<String> = p.iter().map(|(k, _)| k.clone()).collect();
        let mut point = vec![x];
        point.extend(p.iter().map(|(_, t)| t.cast::<f64>()));
        let r = grad_check(
            |g, v| {
                let mut b = Bound::default();
                for (n, &var) in names.iter().zip(&v[1..]) {
                    b.set(n, var);
                }
                let dp = DtbParams::from_bound(&b, "b", SHAPE)?;
                let y = dtb_forward(g, &dp, v[0], AttentionOptions::default())?;
                random_projection(g, y, 3)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
