use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Axis, Zip};

use super::{LoraAdapters, Mat, ModelConfig, Params, Real};
use crate::error::{Error, Result};
use crate::prompt::TokenSequence;

const LN_EPS: f64 = 1e-5;

/// A network instance: base weights plus optional adapters.
#[derive(Clone, Copy)]
pub struct Net<'a, T> {
    pub cfg: &'a ModelConfig,
    pub params: &'a Params<T>,
    pub lora: Option<&'a LoraAdapters<T>>,
}

struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Vec<T>,
}

struct BlockCache<T> {
    w: Vec<Array2<T>>,
    ln1: LnCache<T>,
    u1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    p_self: Vec<Array2<T>>,
    o_self: Array2<T>,
    ln2: LnCache<T>,
    u2: Array2<T>,
    cq: Array2<T>,
    ck: Array2<T>,
    cv: Array2<T>,
    p_cross: Vec<Array2<T>>,
    o_cross: Array2<T>,
    ln3: LnCache<T>,
    u3: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

/// Activations retained by [`Net::forward_cached`] for the backward pass.
pub struct Cache<T> {
    x_patch: Array2<T>,
    text: Array2<T>,
    text_ids: Vec<usize>,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    uf: Array2<T>,
}

/// Gradients from one backward pass.
pub struct Grads<T> {
    pub base: Params<T>,
    pub lora: Option<LoraAdapters<T>>,
}

/// Runs the network on a latent video and returns the velocity video.
pub fn forward<T: Real>(
    cfg: &ModelConfig,
    params: &Params<T>,
    lora: Option<&LoraAdapters<T>>,
    z: ArrayView4<T>,
    t_vec: &[T],
    tokens: &TokenSequence,
) -> Result<Array4<T>> {
    let net = Net { cfg, params, lora };
    let x = net.patchify(z)?;
    let y = forward_patches(&net, x.view(), t_vec, tokens)?;
    Ok(net.unpatchify(y.view()))
}

pub fn forward_patches<T: Real>(
    net: &Net<'_, T>,
    x: ArrayView2<T>,
    t_vec: &[T],
    tokens: &TokenSequence,
) -> Result<Array2<T>> {
    Ok(net.forward_cached(x, t_vec, tokens)?.0)
}

impl<'a, T: Real> Net<'a, T> {
    pub fn new(cfg: &'a ModelConfig, params: &'a Params<T>, lora: Option<&'a LoraAdapters<T>>) -> Self {
        Self { cfg, params, lora }
    }

    fn n_tokens(&self) -> usize {
        self.cfg.frames * self.cfg.tokens_per_frame()
    }

    /// `F×S×S×C` video → `(F·P²) × (patch²·C)` token matrix, row-major over
    /// frame, patch row, patch column.
    pub fn patchify(&self, z: ArrayView4<T>) -> Result<Array2<T>> {
        let c = self.cfg;
        let want = (c.frames, c.image_size, c.image_size, c.channels);
        if z.dim() != want {
            return Err(Error::Shape(format!("video {:?}, expected {:?}", z.dim(), want)));
        }
        let (p, side) = (c.patch, c.patches_per_side());
        let mut out = Array2::zeros((self.n_tokens(), c.patch_dim()));
        for f in 0..c.frames {
            for py in 0..side {
                for px in 0..side {
                    let row = (f * side + py) * side + px;
                    let mut col = 0;
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c.channels {
                                out[[row, col]] = z[[f, py * p + dy, px * p + dx, ch]];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn unpatchify(&self, x: ArrayView2<T>) -> Array4<T> {
        let c = self.cfg;
        let (p, side) = (c.patch, c.patches_per_side());
        let mut out = Array4::zeros((c.frames, c.image_size, c.image_size, c.channels));
        for f in 0..c.frames {
            for py in 0..side {
                for px in 0..side {
                    let row = (f * side + py) * side + px;
                    let mut col = 0;
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c.channels {
                                out[[f, py * p + dy, px * p + dx, ch]] = x[[row, col]];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn block_weights(&self, i: usize) -> Vec<Array2<T>> {
        Mat::ALL
            .iter()
            .map(|&m| match self.lora {
                Some(l) => l.merged(self.params, i, m).into_owned(),
                None => self.params.blocks[i].mat(m).clone(),
            })
            .collect()
    }

    fn embed_text(&self, tokens: &TokenSequence) -> Result<(Array2<T>, Vec<usize>)> {
        let d = self.cfg.embed_dim;
        if tokens.ids.len() != self.cfg.text_len || tokens.mask.len() != self.cfg.text_len {
            return Err(Error::Shape(format!(
                "token sequence length {}, expected {}",
                tokens.ids.len(),
                self.cfg.text_len
            )));
        }
        let valid: Vec<usize> = (0..tokens.ids.len()).filter(|&i| tokens.mask[i]).collect();
        let mut text = Array2::zeros((valid.len(), d));
        let mut ids = Vec::with_capacity(valid.len());
        for (r, &pos) in valid.iter().enumerate() {
            let id = tokens.ids[pos] as usize;
            if id >= self.cfg.vocab_size {
                return Err(Error::Shape(format!("token id {id} outside vocabulary")));
            }
            ids.push(id);
            let pe = sinusoid(pos as f64, d, 1.0);
            for j in 0..d {
                text[[r, j]] = self.params.tok_emb[[id, j]] + T::lit(pe[j]);
            }
        }
        Ok((text, ids))
    }

    /// Fixed (frame, row, column) sinusoidal positions plus per-frame noise level.
    fn frame_embeddings(&self, t_vec: &[T]) -> Array2<T> {
        let c = self.cfg;
        let d = c.embed_dim;
        let (df, dr) = (d / 4, 3 * d / 8);
        let side = c.patches_per_side();
        let mut e = Array2::zeros((self.n_tokens(), d));
        for f in 0..c.frames {
            let temb = sinusoid(t_vec[f].as_f64(), d, 1000.0);
            let fe = sinusoid(f as f64, df, 1.0);
            for py in 0..side {
                let re = sinusoid(py as f64, dr, 1.0);
                for px in 0..side {
                    let ce = sinusoid(px as f64, dr, 1.0);
                    let row = (f * side + py) * side + px;
                    for j in 0..d {
                        let pos = if j < df {
                            fe[j]
                        } else if j < df + dr {
                            re[j - df]
                        } else {
                            ce[j - df - dr]
                        };
                        e[[row, j]] = T::lit(pos + temb[j]);
                    }
                }
            }
        }
        e
    }

    /// Forward pass over patch tokens, keeping what backward needs.
    pub fn forward_cached(&self, x: ArrayView2<T>, t_vec: &[T], tokens: &TokenSequence) -> Result<(Array2<T>, Cache<T>)> {
        let c = self.cfg;
        if x.dim() != (self.n_tokens(), c.patch_dim()) {
            return Err(Error::Shape(format!(
                "patch matrix {:?}, expected {:?}",
                x.dim(),
                (self.n_tokens(), c.patch_dim())
            )));
        }
        if t_vec.len() != c.frames {
            return Err(Error::Shape(format!("t_vec length {}, expected {}", t_vec.len(), c.frames)));
        }
        let p = self.params;
        let heads = c.heads;
        let (text, text_ids) = self.embed_text(tokens)?;

        let mut h = x.dot(&p.patch_w.t()) + &p.patch_b + self.frame_embeddings(t_vec);
        let mut blocks = Vec::with_capacity(c.blocks);
        for (i, blk) in p.blocks.iter().enumerate() {
            let w = self.block_weights(i);
            // self-attention
            let (u1, ln1) = layer_norm(&h, &blk.ln1_g, &blk.ln1_b);
            let q = u1.dot(&w[0].t());
            let k = u1.dot(&w[1].t());
            let v = u1.dot(&w[2].t());
            let (o_self, p_self) = attend(&q, &k, &v, heads);
            h += &o_self.dot(&w[3].t());
            // cross-attention into the prompt
            let (u2, ln2) = layer_norm(&h, &blk.ln2_g, &blk.ln2_b);
            let cq = u2.dot(&w[4].t());
            let ck = text.dot(&w[5].t());
            let cv = text.dot(&w[6].t());
            let (o_cross, p_cross) = attend(&cq, &ck, &cv, heads);
            if !text_ids.is_empty() {
                h += &o_cross.dot(&w[7].t());
            }
            // MLP
            let (u3, ln3) = layer_norm(&h, &blk.ln3_g, &blk.ln3_b);
            let pre = u3.dot(&w[8].t()) + &blk.mlp_b1;
            let act = pre.mapv(gelu);
            h += &(act.dot(&w[9].t()) + &blk.mlp_b2);
            blocks.push(BlockCache {
                w,
                ln1,
                u1,
                q,
                k,
                v,
                p_self,
                o_self,
                ln2,
                u2,
                cq,
                ck,
                cv,
                p_cross,
                o_cross,
                ln3,
                u3,
                pre,
                act,
            });
        }
        let (uf, lnf) = layer_norm(&h, &p.lnf_g, &p.lnf_b);
        let y = uf.dot(&p.out_w.t()) + &p.out_b;
        Ok((
            y,
            Cache {
                x_patch: x.to_owned(),
                text,
                text_ids,
                blocks,
                lnf,
                uf,
            },
        ))
    }

    /// Backpropagates `d_y` (gradient w.r.t. the patch-space output).
    pub fn backward(&self, cache: &Cache<T>, d_y: &Array2<T>) -> Grads<T> {
        let p = self.params;
        let heads = self.cfg.heads;
        let mut g = p.zeros_like();
        let mut gl = self.lora.map(|l| l.zeros_like());

        g.out_w = d_y.t().dot(&cache.uf);
        g.out_b = d_y.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_uf = d_y.dot(&p.out_w);
        let mut dh = layer_norm_back(&d_uf, &cache.lnf, &p.lnf_g, &mut g.lnf_g, &mut g.lnf_b);

        let mut d_text = Array2::<T>::zeros(cache.text.dim());
        for (i, bc) in cache.blocks.iter().enumerate().rev() {
            let blk = &p.blocks[i];
            let gb = &mut g.blocks[i];
            let mut dw: Vec<Array2<T>> = bc.w.iter().map(|w| Array2::zeros(w.dim())).collect();

            // MLP
            dw[9] = dh.t().dot(&bc.act);
            gb.mlp_b2 = dh.sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut d_pre = dh.dot(&bc.w[9]);
            Zip::from(&mut d_pre).and(&bc.pre).for_each(|d, &x| *d *= gelu_grad(x));
            dw[8] = d_pre.t().dot(&bc.u3);
            gb.mlp_b1 = d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
            let d_u3 = d_pre.dot(&bc.w[8]);
            dh += &layer_norm_back(&d_u3, &bc.ln3, &blk.ln3_g, &mut gb.ln3_g, &mut gb.ln3_b);

            // cross-attention
            if !cache.text_ids.is_empty() {
                dw[7] = dh.t().dot(&bc.o_cross);
                let d_oc = dh.dot(&bc.w[7]);
                let (d_cq, d_ck, d_cv) = attend_back(&bc.cq, &bc.ck, &bc.cv, &bc.p_cross, &d_oc, heads);
                dw[4] = d_cq.t().dot(&bc.u2);
                dw[5] = d_ck.t().dot(&cache.text);
                dw[6] = d_cv.t().dot(&cache.text);
                d_text += &d_ck.dot(&bc.w[5]);
                d_text += &d_cv.dot(&bc.w[6]);
                let d_u2 = d_cq.dot(&bc.w[4]);
                dh += &layer_norm_back(&d_u2, &bc.ln2, &blk.ln2_g, &mut gb.ln2_g, &mut gb.ln2_b);
            }

            // self-attention
            dw[3] = dh.t().dot(&bc.o_self);
            let d_os = dh.dot(&bc.w[3]);
            let (d_q, d_k, d_v) = attend_back(&bc.q, &bc.k, &bc.v, &bc.p_self, &d_os, heads);
            dw[0] = d_q.t().dot(&bc.u1);
            dw[1] = d_k.t().dot(&bc.u1);
            dw[2] = d_v.t().dot(&bc.u1);
            let mut d_u1 = d_q.dot(&bc.w[0]);
            d_u1 += &d_k.dot(&bc.w[1]);
            d_u1 += &d_v.dot(&bc.w[2]);
            dh += &layer_norm_back(&d_u1, &bc.ln1, &blk.ln1_g, &mut gb.ln1_g, &mut gb.ln1_b);

            for (j, &m) in Mat::ALL.iter().enumerate() {
                if let (Some(l), Some(gl)) = (self.lora, gl.as_mut()) {
                    l.grads_from_merged(i, m, &dw[j], gl);
                }
            }
            let [sq, sk, sv, so, cq, ck, cv, co, w1, w2]: [Array2<T>; 10] =
                dw.try_into().unwrap_or_else(|_| unreachable!("ten adapted matrices"));
            gb.self_q = sq;
            gb.self_k = sk;
            gb.self_v = sv;
            gb.self_o = so;
            gb.cross_q = cq;
            gb.cross_k = ck;
            gb.cross_v = cv;
            gb.cross_o = co;
            gb.mlp_w1 = w1;
            gb.mlp_w2 = w2;
        }

        g.patch_w = dh.t().dot(&cache.x_patch);
        g.patch_b = dh.sum_axis(Axis(0)).insert_axis(Axis(0));
        for (r, &id) in cache.text_ids.iter().enumerate() {
            let mut row = g.tok_emb.row_mut(id);
            row += &d_text.row(r);
        }
        Grads { base: g, lora: gl }
    }
}

/// `[sin(v·s·ω_i) …, cos(v·s·ω_i) …]` with `ω_i = 10000^(−i/(dim/2))`.
pub(crate) fn sinusoid(value: f64, dim: usize, scale: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * 10000f64.ln()).exp();
        let a = value * scale * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

fn layer_norm<T: Real>(x: &Array2<T>, g: &Array2<T>, b: &Array2<T>) -> (Array2<T>, LnCache<T>) {
    let (n, d) = x.dim();
    let dn = T::lit(d as f64);
    let eps = T::lit(LN_EPS);
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Vec::with_capacity(n);
    for (r, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for (o, &v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
            *o = (v - mean) * is;
        }
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_back<T: Real>(
    dy: &Array2<T>,
    c: &LnCache<T>,
    g: &Array2<T>,
    dg: &mut Array2<T>,
    db: &mut Array2<T>,
) -> Array2<T> {
    let (n, d) = dy.dim();
    let dn = T::lit(d as f64);
    *dg = (dy * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut dx = Array2::zeros((n, d));
    for r in 0..n {
        let dxh: Vec<T> = (0..d).map(|j| dy[[r, j]] * g[[0, j]]).collect();
        let m1 = dxh.iter().copied().sum::<T>() / dn;
        let m2 = dxh.iter().zip(c.xhat.row(r)).map(|(&a, &x)| a * x).sum::<T>() / dn;
        for j in 0..d {
            dx[[r, j]] = c.inv_std[r] * (dxh[j] - m1 - c.xhat[[r, j]] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let th = inner.tanh();
    let d_inner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * d_inner
}

/// Multi-head scaled dot-product attention. An empty key set yields zeros.
fn attend<T: Real>(q: &Array2<T>, k: &Array2<T>, v: &Array2<T>, heads: usize) -> (Array2<T>, Vec<Array2<T>>) {
    let (n, d) = q.dim();
    let m = k.nrows();
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut out = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    if m == 0 {
        return (out, probs);
    }
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = Array2::zeros((n, m));
        ndarray::linalg::general_mat_mul(scale, &q.slice(cols), &k.slice(cols).t(), T::zero(), &mut sc);
        softmax_rows(&mut sc);
        ndarray::linalg::general_mat_mul(T::one(), &sc, &v.slice(cols), T::zero(), &mut out.slice_mut(cols));
        probs.push(sc);
    }
    (out, probs)
}

fn attend_back<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    probs: &[Array2<T>],
    d_out: &Array2<T>,
    heads: usize,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let (n, d) = q.dim();
    let m = k.nrows();
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((m, d));
    let mut dv = Array2::zeros((m, d));
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_oh = d_out.slice(cols);
        ndarray::linalg::general_mat_mul(T::one(), &p.t(), &d_oh, T::zero(), &mut dv.slice_mut(cols));
        let mut ds = d_oh.dot(&v.slice(cols).t());
        for (mut drow, prow) in ds.outer_iter_mut().zip(p.outer_iter()) {
            let dot: T = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum();
            Zip::from(&mut drow).and(&prow).for_each(|dv, &pv| *dv = pv * (*dv - dot));
        }
        ndarray::linalg::general_mat_mul(scale, &ds, &k.slice(cols), T::zero(), &mut dq.slice_mut(cols));
        ndarray::linalg::general_mat_mul(scale, &ds.t(), &q.slice(cols), T::zero(), &mut dk.slice_mut(cols));
    }
    (dq, dk, dv)
}

fn softmax_rows<T: Real>(x: &mut Array2<T>) {
    for mut row in x.outer_iter_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| v - max);
        T::exp_nonpositive(row.as_slice_mut().expect("contiguous rows"));
        let inv = T::one() / row.sum();
        row.mapv_inplace(|v| v * inv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{self, TokenSequence};
    use ndarray::Array4;
    use rand::Rng as _;

    fn small_cfg() -> ModelConfig {
        ModelConfig { embed_dim: 16, heads: 2, patch: 8, frames: 3, ..Default::default() }
    }

    fn random_video(cfg: &ModelConfig, seed: u64) -> Array4<f64> {
        let mut r = crate::rng::stream(seed, &[]);
        Array4::from_shape_fn((cfg.frames, cfg.image_size, cfg.image_size, 3), |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn patchify_round_trips() {
        let cfg = small_cfg();
        let p = Params::<f64>::zeros(&cfg);
        let net = Net::new(&cfg, &p, None);
        let z = random_video(&cfg, 1);
        let x = net.patchify(z.view()).unwrap();
        assert_eq!(x.dim(), (3 * 16, 8 * 8 * 3));
        assert_eq!(net.unpatchify(x.view()), z);
    }

    #[test]
    fn shape_errors() {
        let cfg = small_cfg();
        let p = Params::<f64>::init(&cfg, 0);
        let z = Array4::<f64>::zeros((2, 32, 32, 3));
        let toks = TokenSequence::empty();
        assert!(matches!(forward(&cfg, &p, None, z.view(), &[0.5; 3], &toks), Err(Error::Shape(_))));
        let z = random_video(&cfg, 0);
        assert!(matches!(forward(&cfg, &p, None, z.view(), &[0.5; 2], &toks), Err(Error::Shape(_))));
    }

    #[test]
    fn empty_prompt_gives_finite_output() {
        let cfg = small_cfg();
        let p = Params::<f64>::init(&cfg, 0);
        let z = random_video(&cfg, 2);
        let y = forward(&cfg, &p, None, z.view(), &[0.3; 3], &TokenSequence::empty()).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pad_positions_are_inert() {
        let cfg = small_cfg();
        let p = Params::<f64>::init(&cfg, 0);
        let z = random_video(&cfg, 3);
        let toks = prompt::tokenize("red square at top-left").unwrap();
        let mut swapped = toks.clone();
        swapped.ids.swap(10, 20);
        swapped.mask.swap(10, 20);
        let a = forward(&cfg, &p, None, z.view(), &[0.3; 3], &toks).unwrap();
        let b = forward(&cfg, &p, None, z.view(), &[0.3; 3], &swapped).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn timestep_of_one_frame_changes_that_frame() {
        let cfg = small_cfg();
        let p = Params::<f64>::init(&cfg, 5);
        let z = random_video(&cfg, 4);
        let toks = prompt::tokenize("blue circle at center").unwrap();
        let a = forward(&cfg, &p, None, z.view(), &[0.5, 0.5, 0.5], &toks).unwrap();
        let b = forward(&cfg, &p, None, z.view(), &[0.5, 0.0, 0.5], &toks).unwrap();
        let diff = (&a.index_axis(Axis(0), 1) - &b.index_axis(Axis(0), 1)).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "frame 1 unaffected by its timestep: {diff}");
    }

    #[test]
    fn sinusoid_layout() {
        let e = sinusoid(0.0, 8, 1.0);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
