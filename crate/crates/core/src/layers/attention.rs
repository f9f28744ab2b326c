//! Multi-head self-attention with optional T5-style relative position bias.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::params::{truncated_normal, ParamId, ParamStore, INIT_STD};
use crate::numerics::kernels::{gemm, softmax_backward_in_place, softmax_in_place, MatMut, MatRef};
use crate::numerics::{CustomOp, Scalar, Tape, Tensor, Var};

/// Additive logit for padded key positions.
pub const MASK_PENALTY: f64 = -1e9;

/// T5 bidirectional bucketing of `relative_distance = key - query`.
///
/// Half of the buckets hold non-positive distances and half positive ones.
/// Inside each half the first `num_buckets / 4` buckets are exact offsets and
/// the rest grow logarithmically up to `max_distance`, beyond which
/// everything shares the last bucket.
pub fn relative_position_bucket(relative_distance: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let offset = if relative_distance > 0 { half } else { 0 };
    let n = relative_distance.unsigned_abs() as usize;
    let max_exact = half / 2;
    if n < max_exact {
        return offset + n;
    }
    let log_ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (log_ratio * (half - max_exact) as f64) as usize;
    offset + large.min(half - 1)
}

/// Learned per-(bucket, head) logit table shared by every attention layer.
#[derive(Clone, Debug)]
pub struct RelativeBias {
    pub table: ParamId,
    pub num_buckets: usize,
    pub max_distance: usize,
    pub heads: usize,
}

impl RelativeBias {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        num_buckets: usize,
        max_distance: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_buckets < 4 || !num_buckets.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "num_buckets must be even and >= 4, got {num_buckets}"
            )));
        }
        if max_distance <= num_buckets / 4 {
            return Err(Error::Config(format!(
                "max_distance {max_distance} must exceed num_buckets/4 = {}",
                num_buckets / 4
            )));
        }
        let table = store.add(name, truncated_normal(&[num_buckets, heads], INIT_STD, rng), false)?;
        Ok(Self {
            table,
            num_buckets,
            max_distance,
            heads,
        })
    }

    /// Bucket of every (query, key) pair, row-major `seq_len × seq_len`.
    pub fn buckets(&self, seq_len: usize) -> Vec<usize> {
        bucket_matrix(seq_len, self.num_buckets, self.max_distance)
    }
}

pub fn bucket_matrix(seq_len: usize, num_buckets: usize, max_distance: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq_len * seq_len);
    for q in 0..seq_len as i64 {
        for k in 0..seq_len as i64 {
            out.push(relative_position_bucket(k - q, num_buckets, max_distance));
        }
    }
    out
}

/// Shape and masking information for [`scaled_dot_attention`].
pub struct AttentionLayout<'a> {
    pub heads: usize,
    pub seq_len: usize,
    /// `true` marks a padded position, one entry per row of the inputs.
    pub pad_mask: &'a [bool],
}

struct AttentionOp<T> {
    batch: usize,
    seq_len: usize,
    heads: usize,
    head_dim: usize,
    buckets: Option<Vec<usize>>,
    probs: Vec<T>,
    keep: Option<Vec<T>>,
}

impl<T: Scalar> AttentionOp<T> {
    fn scale(&self) -> T {
        T::one() / T::from_usize(self.head_dim).unwrap().sqrt()
    }
}

impl<T: Scalar> CustomOp<T> for AttentionOp<T> {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<T>>>> {
        let (l, h, dh) = (self.seq_len, self.heads, self.head_dim);
        let d = h * dh;
        let scale = self.scale();
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let mut gq = vec![T::zero(); q.len()];
        let mut gk = vec![T::zero(); k.len()];
        let mut gv = vec![T::zero(); v.len()];
        let mut gtable = inputs.get(3).map(|t| vec![T::zero(); t.len()]);
        let mut gp = vec![T::zero(); l * l];
        let mut pd = vec![T::zero(); l * l];
        for b in 0..self.batch {
            for head in 0..h {
                let off = b * l * d + head * dh;
                let slab = (b * h + head) * l * l;
                let p = &self.probs[slab..slab + l * l];
                match &self.keep {
                    Some(keep) => pd
                        .iter_mut()
                        .zip(p.iter().zip(&keep[slab..slab + l * l]))
                        .for_each(|(o, (&a, &m))| *o = a * m),
                    None => pd.copy_from_slice(p),
                }
                let gctx = MatRef::strided(&grad_out[off..], l, dh, d);
                // gv_h = pdᵀ · gctx_h
                gemm(
                    T::one(),
                    MatRef::row_major(&pd, l, l).t(),
                    gctx,
                    T::zero(),
                    MatMut::strided(&mut gv[off..], l, dh, d),
                );
                // gp = gctx_h · v_hᵀ, then through the dropout mask
                gemm(
                    T::one(),
                    gctx,
                    MatRef::strided(&v[off..], l, dh, d).t(),
                    T::zero(),
                    MatMut::row_major(&mut gp, l, l),
                );
                if let Some(keep) = &self.keep {
                    gp.iter_mut().zip(&keep[slab..slab + l * l]).for_each(|(g, &m)| *g *= m);
                }
                for (pr, gr) in p.chunks_exact(l).zip(gp.chunks_exact_mut(l)) {
                    softmax_backward_in_place(pr, gr);
                }
                if let (Some(gt), Some(buckets)) = (gtable.as_mut(), &self.buckets) {
                    for (&bk, &g) in buckets.iter().zip(&gp) {
                        gt[bk * h + head] += g;
                    }
                }
                let gs = MatRef::row_major(&gp, l, l);
                if needs[0] {
                    gemm(
                        scale,
                        gs,
                        MatRef::strided(&k[off..], l, dh, d),
                        T::zero(),
                        MatMut::strided(&mut gq[off..], l, dh, d),
                    );
                }
                if needs[1] {
                    gemm(
                        scale,
                        gs.t(),
                        MatRef::strided(&q[off..], l, dh, d),
                        T::zero(),
                        MatMut::strided(&mut gk[off..], l, dh, d),
                    );
                }
            }
        }
        let mut out = vec![Some(gq), Some(gk), Some(gv)];
        if inputs.len() == 4 {
            out.push(gtable);
        }
        Ok(out)
    }
}

/// `softmax(Q_m K_mᵀ / sqrt(d_h) + bias + mask) V_m` for every head, heads
/// concatenated along columns.
///
/// `q`, `k`, `v` are `(batch·seq_len) × d`. `bias`, when given, is the
/// `num_buckets × heads` table and the bucket of each (query, key) pair.
/// `keep` holds attention-dropout multipliers, `batch × heads × l × l`.
pub fn scaled_dot_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    layout: &AttentionLayout<'_>,
    bias: Option<(Var, Vec<usize>)>,
    keep: Option<Vec<T>>,
) -> Result<Var> {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rank() != 2 {
        return Err(Error::dims("attention", qv.shape(), kv.shape()));
    }
    let (rows, d) = qv.matrix_dims();
    let (h, l) = (layout.heads, layout.seq_len);
    if h == 0 || d % h != 0 || l == 0 || rows % l != 0 {
        return Err(Error::dims("attention", qv.shape(), &[l, h]));
    }
    if layout.pad_mask.len() != rows {
        return Err(Error::dims("attention", qv.shape(), &[layout.pad_mask.len()]));
    }
    let batch = rows / l;
    let dh = d / h;
    if let Some(keep) = &keep {
        if keep.len() != batch * h * l * l {
            return Err(Error::dims("attention", &[batch, h, l, l], &[keep.len()]));
        }
    }
    if let Some((table, buckets)) = &bias {
        let tv = tape.value(*table);
        if tv.rank() != 2 || tv.shape()[1] != h || buckets.len() != l * l {
            return Err(Error::dims("attention", tv.shape(), &[buckets.len(), h]));
        }
        if buckets.iter().any(|&b| b >= tv.shape()[0]) {
            return Err(Error::Input("relative bucket out of table range".into()));
        }
    }
    let mut op = AttentionOp {
        batch,
        seq_len: l,
        heads: h,
        head_dim: dh,
        buckets: bias.as_ref().map(|(_, b)| b.clone()),
        probs: Vec::new(),
        keep,
    };
    let scale = op.scale();
    let penalty = T::lit(MASK_PENALTY);
    let table = bias.as_ref().map(|(t, _)| tape.value(*t).data());
    let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
    let mut probs = vec![T::zero(); batch * h * l * l];
    let mut out = vec![T::zero(); rows * d];
    let mut pd = vec![T::zero(); l * l];
    for b in 0..batch {
        let pad = &layout.pad_mask[b * l..(b + 1) * l];
        for head in 0..h {
            let off = b * l * d + head * dh;
            let slab = (b * h + head) * l * l;
            let p = &mut probs[slab..slab + l * l];
            gemm(
                scale,
                MatRef::strided(&qd[off..], l, dh, d),
                MatRef::strided(&kd[off..], l, dh, d).t(),
                T::zero(),
                MatMut::row_major(p, l, l),
            );
            for (i, row) in p.chunks_exact_mut(l).enumerate() {
                for (j, s) in row.iter_mut().enumerate() {
                    if let (Some(t), Some(buckets)) = (table, &op.buckets) {
                        *s += t[buckets[i * l + j] * h + head];
                    }
                    if pad[j] {
                        *s += penalty;
                    }
                }
                softmax_in_place(row);
            }
            let weights: &[T] = match &op.keep {
                Some(keep) => {
                    pd.iter_mut()
                        .zip(p.iter().zip(&keep[slab..slab + l * l]))
                        .for_each(|(o, (&a, &m))| *o = a * m);
                    &pd
                }
                None => p,
            };
            gemm(
                T::one(),
                MatRef::row_major(weights, l, l),
                MatRef::strided(&vd[off..], l, dh, d),
                T::zero(),
                MatMut::strided(&mut out[off..], l, dh, d),
            );
        }
    }
    let output = Tensor::new(&[rows, d], out)?;
    let mut inputs = vec![q, k, v];
    if let Some((table, _)) = &bias {
        inputs.push(*table);
    }
    op.probs = probs;
    Ok(tape.custom(inputs, output, Box::new(op)))
}

/// Parameter handles of one attention block. Projections are packed `d × d`
/// matrices, head `m` owning columns `m·d_h..(m+1)·d_h`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub params: AttentionParams,
    pub d: usize,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("d={d} is not divisible by heads={heads}")));
        }
        let mut mat = |name: &str, rng: &mut R| {
            store.add(
                format!("{prefix}.{name}"),
                truncated_normal(&[d, d], INIT_STD, rng),
                true,
            )
        };
        let (wq, wk, wv, wo) = (mat("wq", rng)?, mat("wk", rng)?, mat("wv", rng)?, mat("wo", rng)?);
        let mut vec0 = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::zeros(&[d]), false);
        let params = AttentionParams {
            wq,
            bq: vec0("bq")?,
            wk,
            bk: vec0("bk")?,
            wv,
            bv: vec0("bv")?,
            wo,
            bo: vec0("bo")?,
        };
        Ok(Self { params, d, heads })
    }

    pub fn num_params(d: usize) -> usize {
        4 * d * d + 4 * d
    }

    /// Self-attention over `x` (`(batch·seq_len) × d`). `rel` adds the shared
    /// relative bias; `dropout` applies attention-probability dropout.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        seq_len: usize,
        pad_mask: &[bool],
        rel: Option<(&RelativeBias, &[usize])>,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        let p = &self.params;
        let project = |tape: &mut Tape<T>, w: ParamId, b: ParamId| -> Result<Var> {
            let (w, b) = (store.bind(tape, w), store.bind(tape, b));
            let y = tape.matmul(x, w)?;
            tape.add_row(y, b)
        };
        let q = project(tape, p.wq, p.bq)?;
        let k = project(tape, p.wk, p.bk)?;
        let v = project(tape, p.wv, p.bv)?;
        let rows = tape.value(x).matrix_dims().0;
        let keep = match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                let batch = rows / seq_len.max(1);
                Some(dropout_mask(batch * self.heads * seq_len * seq_len, rate, rng))
            }
            _ => None,
        };
        let bias = rel.map(|(r, buckets)| (store.bind(tape, r.table), buckets.to_vec()));
        let layout = AttentionLayout {
            heads: self.heads,
            seq_len,
            pad_mask,
        };
        let ctx = scaled_dot_attention(tape, q, k, v, &layout, bias, keep)?;
        let (wo, bo) = (store.bind(tape, p.wo), store.bind(tape, p.bo));
        let out = tape.matmul(ctx, wo)?;
        tape.add_row(out, bo)
    }
}

/// Inverted-dropout multipliers: `0` with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

/// Applies inverted dropout on the tape; identity when `rate == 0`.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(tape: &mut Tape<T>, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.value(x).len(), rate, rng);
    tape.mul_const(x, mask)
}
