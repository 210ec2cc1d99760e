//! Fused forward pass and query gradient of the field on flat row-major
//! buffers. Computes the same function as the tape graph; the tape stays the
//! reference and the source of parameter gradients.

use super::{DescriptorFieldParams, FieldConfig, LN_EPS};
use crate::geometry::Vec3;
use crate::numeric::{gelu_grad_with_tanh, gelu_with_tanh};
use crate::scene::SemanticLabel;

struct LayerWeights<'a> {
    ln1_g: &'a [f64],
    ln1_b: &'a [f64],
    wqkv: &'a [f64],
    bqkv: &'a [f64],
    wo: &'a [f64],
    bo: &'a [f64],
    ln2_g: &'a [f64],
    ln2_b: &'a [f64],
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

/// Borrowed weights, looked up once per batch of queries.
pub(crate) struct Kernel<'a> {
    cfg: &'a FieldConfig,
    table: &'a [f64],
    dist_w1: &'a [f64],
    dist_b1: &'a [f64],
    dist_w2: &'a [f64],
    dist_b2: &'a [f64],
    cls: &'a [f64],
    layers: Vec<LayerWeights<'a>>,
    final_g: &'a [f64],
    final_b: &'a [f64],
    out_w: &'a [f64],
    out_b: &'a [f64],
}

struct LayerCache {
    /// Rows carried out of the layer: all tokens, or only CLS in the last.
    rows_out: usize,
    xhat1: Vec<f64>,
    inv1: Vec<f64>,
    qkv: Vec<f64>,
    /// Attention weights per head, `rows_out x tokens`.
    attn: Vec<Vec<f64>>,
    xhat2: Vec<f64>,
    inv2: Vec<f64>,
    pre_ff: Vec<f64>,
    tanh_ff: Vec<f64>,
}

/// Intermediates of one evaluation, enough to pull back to `q`.
pub(crate) struct QueryCache {
    /// Per neighbor: `p - q`, its norm, and the distance MLP pre-activation.
    diffs: Vec<Vec3>,
    dists: Vec<f64>,
    dist_pre: Vec<f64>,
    dist_tanh: Vec<f64>,
    tokens: usize,
    layers: Vec<LayerCache>,
    final_xhat: Vec<f64>,
    final_inv: f64,
    z_norm: f64,
    pub(crate) out: Vec<f64>,
}

fn slice<'a>(p: &'a DescriptorFieldParams, name: &str) -> &'a [f64] {
    p.get(name).expect("params validated against config").data()
}

/// `a (n x k) * b (k x m)`.
fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for (t, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (ov, bv) in o.iter_mut().zip(&b[t * m..(t + 1) * m]) {
                *ov += av * bv;
            }
        }
    }
    out
}

/// `a (n x m) * b^T` where `b` is `k x m`.
fn matmul_bt(a: &[f64], n: usize, m: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let ar = &a[i * m..(i + 1) * m];
        for j in 0..k {
            out[i * k + j] = dot(ar, &b[j * m..(j + 1) * m]);
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_row(x: &mut [f64], row: &[f64]) {
    for r in x.chunks_mut(row.len()) {
        for (v, b) in r.iter_mut().zip(row) {
            *v += b;
        }
    }
}

/// Row-wise layer norm; returns `(xhat, inverse std)`.
fn layer_norm(x: &[f64], m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / m);
    for row in x.chunks(m) {
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        xhat.extend(row.iter().map(|v| (v - mean) * s));
        inv.push(s);
    }
    (xhat, inv)
}

fn affine_rows(xhat: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(xhat.len());
    for row in xhat.chunks(g.len()) {
        out.extend(row.iter().zip(g).zip(b).map(|((x, g), b)| x * g + b));
    }
    out
}

/// Gradient through `xhat * g + b` and the normalization.
fn layer_norm_back(xhat: &[f64], inv: &[f64], g: &[f64], dy: &[f64]) -> Vec<f64> {
    let m = g.len();
    let mut out = Vec::with_capacity(dy.len());
    for ((xr, dr), s) in xhat.chunks(m).zip(dy.chunks(m)).zip(inv) {
        let dh: Vec<f64> = dr.iter().zip(g).map(|(d, g)| d * g).collect();
        let mean = dh.iter().sum::<f64>() / m as f64;
        let xmean = dot(xr, &dh) / m as f64;
        out.extend(xr.iter().zip(&dh).map(|(x, d)| s * (d - mean - x * xmean)));
    }
    out
}

impl<'a> Kernel<'a> {
    pub(crate) fn new(cfg: &'a FieldConfig, p: &'a DescriptorFieldParams) -> Self {
        let layers = (0..cfg.layers)
            .map(|l| {
                let s = |n: &str| slice(p, &format!("enc{l}.{n}"));
                LayerWeights {
                    ln1_g: s("ln1.g"),
                    ln1_b: s("ln1.b"),
                    wqkv: s("wqkv"),
                    bqkv: s("bqkv"),
                    wo: s("wo"),
                    bo: s("bo"),
                    ln2_g: s("ln2.g"),
                    ln2_b: s("ln2.b"),
                    w1: s("w1"),
                    b1: s("b1"),
                    w2: s("w2"),
                    b2: s("b2"),
                }
            })
            .collect();
        Kernel {
            cfg,
            table: slice(p, "semantic_table"),
            dist_w1: slice(p, "dist.w1"),
            dist_b1: slice(p, "dist.b1"),
            dist_w2: slice(p, "dist.w2"),
            dist_b2: slice(p, "dist.b2"),
            cls: slice(p, "cls"),
            layers,
            final_g: slice(p, "final_ln.g"),
            final_b: slice(p, "final_ln.b"),
            out_w: slice(p, "out.w"),
            out_b: slice(p, "out.b"),
        }
    }

    pub(crate) fn forward(&self, q: &Vec3, neighbors: &[(Vec3, SemanticLabel)]) -> QueryCache {
        let cfg = self.cfg;
        let (m, e, hd) = (cfg.model_dim, cfg.emb_dim, cfg.dist_hidden);
        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let n = neighbors.len();
        let t = n + 1;

        let mut x = Vec::with_capacity(t * m);
        x.extend_from_slice(self.cls);
        let mut diffs = Vec::with_capacity(n);
        let mut dists = Vec::with_capacity(n);
        let mut dist_pre = Vec::with_capacity(n * hd);
        let mut dist_tanh = Vec::with_capacity(n * hd);
        for (p, label) in neighbors {
            if cfg.use_distance {
                let diff = p - q;
                let dist = diff.norm();
                let u = dist / cfg.r;
                let pre: Vec<f64> = self.dist_w1.iter().zip(self.dist_b1).map(|(w, b)| u * w + b).collect();
                let mut emb = self.dist_b2.to_vec();
                for (j, a) in pre.iter().enumerate() {
                    let (g, th) = gelu_with_tanh(*a);
                    dist_tanh.push(th);
                    for (ev, w) in emb.iter_mut().zip(&self.dist_w2[j * e..(j + 1) * e]) {
                        *ev += g * w;
                    }
                }
                x.extend_from_slice(&emb);
                diffs.push(diff);
                dists.push(dist);
                dist_pre.extend(pre);
            } else {
                x.extend(std::iter::repeat(0.0).take(e));
            }
            if cfg.use_semantic {
                let id = label.id() as usize;
                x.extend_from_slice(&self.table[id * e..(id + 1) * e]);
            } else {
                x.extend(std::iter::repeat(0.0).take(e));
            }
        }

        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut rows = t;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, w) in self.layers.iter().enumerate() {
            let rows_out = if l + 1 == self.layers.len() { 1 } else { rows };
            let (xhat1, inv1) = layer_norm(&x, m);
            let h = affine_rows(&xhat1, w.ln1_g, w.ln1_b);
            let mut qkv = matmul(&h, rows, m, w.wqkv, 3 * m);
            add_row(&mut qkv, w.bqkv);
            let mut concat = vec![0.0; rows_out * m];
            let mut attn = Vec::with_capacity(heads);
            for head in 0..heads {
                let (qo, ko, vo) = (head * dh, m + head * dh, 2 * m + head * dh);
                let mut a = vec![0.0; rows_out * rows];
                for i in 0..rows_out {
                    let qi = &qkv[i * 3 * m + qo..i * 3 * m + qo + dh];
                    let ar = &mut a[i * rows..(i + 1) * rows];
                    for (j, s) in ar.iter_mut().enumerate() {
                        *s = dot(qi, &qkv[j * 3 * m + ko..j * 3 * m + ko + dh]) * inv_sqrt;
                    }
                    let max = ar.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in ar.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    for s in ar.iter_mut() {
                        *s /= z;
                    }
                    let o = &mut concat[i * m + qo..i * m + qo + dh];
                    for (j, av) in ar.iter().enumerate() {
                        for (ov, vv) in o.iter_mut().zip(&qkv[j * 3 * m + vo..j * 3 * m + vo + dh]) {
                            *ov += av * vv;
                        }
                    }
                }
                attn.push(a);
            }
            let mut x1 = matmul(&concat, rows_out, m, w.wo, m);
            add_row(&mut x1, w.bo);
            for (v, r) in x1.iter_mut().zip(&x[..rows_out * m]) {
                *v += r;
            }
            let (xhat2, inv2) = layer_norm(&x1, m);
            let h2 = affine_rows(&xhat2, w.ln2_g, w.ln2_b);
            let ff = cfg.ff_dim;
            let mut pre_ff = matmul(&h2, rows_out, m, w.w1, ff);
            add_row(&mut pre_ff, w.b1);
            let (act, tanh_ff): (Vec<f64>, Vec<f64>) = pre_ff.iter().map(|v| gelu_with_tanh(*v)).unzip();
            let mut f = matmul(&act, rows_out, ff, w.w2, m);
            add_row(&mut f, w.b2);
            for (v, r) in f.iter_mut().zip(&x1) {
                *v += r;
            }
            x = f;
            layers.push(LayerCache {
                rows_out,
                xhat1,
                inv1,
                qkv,
                attn,
                xhat2,
                inv2,
                pre_ff,
                tanh_ff,
            });
            rows = rows_out;
        }
        x.truncate(m);

        let (final_xhat, final_inv) = layer_norm(&x, m);
        let y = affine_rows(&final_xhat, self.final_g, self.final_b);
        let mut z = matmul(&y, 1, m, self.out_w, cfg.d);
        add_row(&mut z, self.out_b);
        let z_norm = dot(&z, &z).sqrt();
        let out = z.iter().map(|v| v / z_norm).collect();
        QueryCache {
            diffs,
            dists,
            dist_pre,
            dist_tanh,
            tokens: t,
            layers,
            final_xhat,
            final_inv: final_inv[0],
            z_norm,
            out,
        }
    }

    /// `J^T c` for the Jacobian of the output in `q`.
    pub(crate) fn query_vjp(&self, c: &QueryCache, cot: &[f64]) -> Vec3 {
        let cfg = self.cfg;
        if !cfg.use_distance || c.diffs.is_empty() {
            return Vec3::zeros();
        }
        let (m, e, hd) = (cfg.model_dim, cfg.emb_dim, cfg.dist_hidden);
        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let oc = dot(&c.out, cot);
        let dz: Vec<f64> = cot.iter().zip(&c.out).map(|(g, o)| (g - o * oc) / c.z_norm).collect();
        let dy = matmul_bt(&dz, 1, cfg.d, self.out_w, m);
        let mut dx = layer_norm_back(&c.final_xhat, &[c.final_inv], self.final_g, &dy);

        let mut rows_in = c.tokens;
        for (l, (w, lc)) in self.layers.iter().zip(&c.layers).enumerate().rev() {
            rows_in = if l == 0 { c.tokens } else { c.layers[l - 1].rows_out };
            let ro = lc.rows_out;
            let ff = cfg.ff_dim;
            // Feed-forward block.
            let mut da = matmul_bt(&dx, ro, m, w.w2, ff);
            for ((g, p), th) in da.iter_mut().zip(&lc.pre_ff).zip(&lc.tanh_ff) {
                *g *= gelu_grad_with_tanh(*p, *th);
            }
            let dh2 = matmul_bt(&da, ro, ff, w.w1, m);
            let mut dx1 = layer_norm_back(&lc.xhat2, &lc.inv2, w.ln2_g, &dh2);
            for (g, d) in dx1.iter_mut().zip(&dx) {
                *g += d;
            }
            // Attention block.
            let dcat = matmul_bt(&dx1, ro, m, w.wo, m);
            let mut dqkv = vec![0.0; rows_in * 3 * m];
            for head in 0..heads {
                let (qo, ko, vo) = (head * dh, m + head * dh, 2 * m + head * dh);
                let a = &lc.attn[head];
                for i in 0..ro {
                    let dout = &dcat[i * m + qo..i * m + qo + dh];
                    let ar = &a[i * rows_in..(i + 1) * rows_in];
                    let da: Vec<f64> = (0..rows_in)
                        .map(|j| dot(dout, &lc.qkv[j * 3 * m + vo..j * 3 * m + vo + dh]))
                        .collect();
                    let mix = dot(&da, ar);
                    for j in 0..rows_in {
                        let av = ar[j];
                        let ds = av * (da[j] - mix) * inv_sqrt;
                        for k in 0..dh {
                            dqkv[j * 3 * m + vo + k] += av * dout[k];
                            dqkv[i * 3 * m + qo + k] += ds * lc.qkv[j * 3 * m + ko + k];
                            dqkv[j * 3 * m + ko + k] += ds * lc.qkv[i * 3 * m + qo + k];
                        }
                    }
                }
            }
            let dh1 = matmul_bt(&dqkv, rows_in, 3 * m, w.wqkv, m);
            let mut dxin = layer_norm_back(&lc.xhat1, &lc.inv1, w.ln1_g, &dh1);
            for (g, d) in dxin.iter_mut().zip(&dx1) {
                *g += d;
            }
            dx = dxin;
        }
        if self.layers.is_empty() {
            let mut full = vec![0.0; c.tokens * m];
            full[..m].copy_from_slice(&dx);
            dx = full;
            rows_in = c.tokens;
        }
        debug_assert_eq!(dx.len(), rows_in * m);

        let mut gq = Vec3::zeros();
        for (i, (diff, &dist)) in c.diffs.iter().zip(&c.dists).enumerate() {
            if dist == 0.0 {
                continue;
            }
            let demb = &dx[(i + 1) * m..(i + 1) * m + e];
            let pre = &c.dist_pre[i * hd..(i + 1) * hd];
            let th = &c.dist_tanh[i * hd..(i + 1) * hd];
            let mut du = 0.0;
            for j in 0..hd {
                let dg = dot(demb, &self.dist_w2[j * e..(j + 1) * e]);
                du += dg * gelu_grad_with_tanh(pre[j], th[j]) * self.dist_w1[j];
            }
            // d|p - q| / dq = -(p - q) / |p - q|, and u = dist / r.
            gq -= diff * (du / (cfg.r * dist));
        }
        gq
    }
}
