//! Decoder-only transformer: causal self-attention with rotary positions,
//! pre-norm residual blocks, gated feed-forward, plus hand-derived backward
//! passes for training and masked-NLL loss utilities.
//!
//! Condition frames and token embeddings share the input space: the caller
//! assembles an input matrix from a [`SequenceLayout`], one row per position.

use ndarray::{s, Array1, Array2};

use super::config::ModelConfig;
use super::layout::{Item, SequenceLayout};
use crate::error::{Error, Result};
use crate::nn;
use crate::rng;

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub norm_attn: Array1<f32>,
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
    pub norm_ffn: Array1<f32>,
    pub w_gate: Array2<f32>,
    pub w_up: Array2<f32>,
    pub w_down: Array2<f32>,
}

/// Full parameter set plus derived rotary tables.
#[derive(Debug, Clone)]
pub struct LmModel {
    pub config: ModelConfig,
    pub embed: Array2<f32>,
    pub layers: Vec<LayerParams>,
    pub norm_final: Array1<f32>,
    pub head: Array2<f32>,
    rope: nn::RopeTable,
}

impl LmModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let f = config.ffn_dim;
        let v = config.vocab_size();
        let mut r = rng::stream(config.init_seed, "lm_init", 0);
        // Residual-branch outputs scale down with depth for a stable stream.
        let depth_scale = 1.0 / (2.0 * config.layers.max(1) as f32).sqrt();
        let layers = (0..config.layers)
            .map(|_| {
                let mut wo = nn::init_matrix(&mut r, h, h, h);
                wo.mapv_inplace(|x| x * depth_scale);
                let mut w_down = nn::init_matrix(&mut r, f, h, f);
                w_down.mapv_inplace(|x| x * depth_scale);
                LayerParams {
                    norm_attn: Array1::ones(h),
                    wq: nn::init_matrix(&mut r, h, h, h),
                    wk: nn::init_matrix(&mut r, h, h, h),
                    wv: nn::init_matrix(&mut r, h, h, h),
                    wo,
                    norm_ffn: Array1::ones(h),
                    w_gate: nn::init_matrix(&mut r, h, f, h),
                    w_up: nn::init_matrix(&mut r, h, f, h),
                    w_down,
                }
            })
            .collect();
        Ok(LmModel {
            embed: nn::init_matrix(&mut r, v, h, h),
            layers,
            norm_final: Array1::ones(h),
            head: nn::init_matrix(&mut r, h, v, h),
            rope: nn::RopeTable::new(config.max_seq_len, config.head_dim(), 10_000.0),
            config,
        })
    }

    pub fn rope(&self) -> &nn::RopeTable {
        &self.rope
    }

    /// Assemble the input matrix for a layout: embedding rows for tokens,
    /// adapter outputs for condition frames.
    pub fn embed_layout(&self, layout: &SequenceLayout) -> Result<Array2<f32>> {
        let h = self.config.hidden;
        if layout.len() > self.config.max_seq_len {
            return Err(Error::Lm(format!(
                "layout length {} exceeds max_seq_len {}",
                layout.len(),
                self.config.max_seq_len
            )));
        }
        if layout.cond_d.frames.ncols() != h {
            return Err(Error::Lm(format!(
                "condition dim {} does not match hidden {h}",
                layout.cond_d.frames.ncols()
            )));
        }
        let mut x = Array2::zeros((layout.len(), h));
        for (pos, item) in layout.items.iter().enumerate() {
            match *item {
                Item::Token(id) => x.row_mut(pos).assign(&self.embed.row(id as usize)),
                Item::CondD(i) => x.row_mut(pos).assign(&layout.cond_d.frames.row(i)),
                Item::CondR(i) => {
                    let r = layout
                        .cond_r
                        .as_ref()
                        .ok_or_else(|| Error::Lm("layout references missing cond_r".into()))?;
                    x.row_mut(pos).assign(&r.frames.row(i));
                }
            }
        }
        Ok(x)
    }

    /// Causal forward pass caching everything backward needs.
    pub fn forward(&self, x0: Array2<f32>) -> Result<ForwardPass> {
        let (t, h) = x0.dim();
        if t > self.config.max_seq_len {
            return Err(Error::Lm(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        debug_assert_eq!(h, self.config.hidden);
        let n_heads = self.config.heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();

        let mut x = x0.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for lp in &self.layers {
            let x_in = x;
            let (a, inv_rms_a) = nn::rms_norm(&x_in, &lp.norm_attn);
            let mut q = a.dot(&lp.wq);
            let mut k = a.dot(&lp.wk);
            let v = a.dot(&lp.wv);
            nn::rope_all(&self.rope, &mut q, n_heads, 0);
            nn::rope_all(&self.rope, &mut k, n_heads, 0);

            let mut probs = Vec::with_capacity(n_heads);
            let mut ctx = Array2::<f32>::zeros((t, h));
            for hh in 0..n_heads {
                let cols = s![.., hh * hd..(hh + 1) * hd];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut sc = qh.dot(&kh.t());
                sc.mapv_inplace(|z| z * scale);
                for i in 0..t {
                    let mut row = sc.row_mut(i);
                    nn::softmax_row(row.as_slice_mut().expect("contiguous"), i + 1);
                }
                let ctx_h = sc.dot(&vh);
                ctx.slice_mut(cols).assign(&ctx_h);
                probs.push(sc);
            }
            let x_mid = &x_in + &ctx.dot(&lp.wo);

            let (b, inv_rms_b) = nn::rms_norm(&x_mid, &lp.norm_ffn);
            let gate_pre = b.dot(&lp.w_gate);
            let up = b.dot(&lp.w_up);
            let mut hbuf = gate_pre.clone();
            for (g, u) in hbuf.iter_mut().zip(up.iter()) {
                *g = nn::silu(*g) * u;
            }
            let x_out = &x_mid + &hbuf.dot(&lp.w_down);

            layers.push(LayerCache {
                x_in,
                inv_rms_a,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                x_mid,
                inv_rms_b,
                b,
                gate_pre,
                up,
                h: hbuf,
            });
            x = x_out;
        }
        let x_last = x;
        let (y, inv_rms_final) = nn::rms_norm(&x_last, &self.norm_final);
        let logits = y.dot(&self.head);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Lm("non-finite logits".into()));
        }
        Ok(ForwardPass {
            x0,
            layers,
            x_last,
            inv_rms_final,
            y,
            logits,
        })
    }

    /// Backward pass. Accumulates parameter gradients into `grads` and
    /// returns the gradient with respect to the input embeddings.
    pub fn backward(
        &self,
        fwd: &ForwardPass,
        dlogits: &Array2<f32>,
        grads: &mut LmGrads,
    ) -> Array2<f32> {
        let (t, h) = fwd.x0.dim();
        let n_heads = self.config.heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();

        grads.head += &fwd.y.t().dot(dlogits);
        let dy = dlogits.dot(&self.head.t());
        let (mut dx, dg_final) =
            rms_norm_backward(&fwd.x_last, &self.norm_final, &fwd.inv_rms_final, &dy);
        grads.norm_final += &dg_final;

        for (li, lp) in self.layers.iter().enumerate().rev() {
            let cache = &fwd.layers[li];
            let lg = &mut grads.layers[li];

            // FFN half.
            let dh = {
                grads_add(&mut lg.w_down, &cache.h.t().dot(&dx));
                dx.dot(&lp.w_down.t())
            };
            let mut dgate = Array2::<f32>::zeros((t, self.config.ffn_dim));
            let mut dup = Array2::<f32>::zeros((t, self.config.ffn_dim));
            for ((dg, du), ((dh_v, g), u)) in dgate
                .iter_mut()
                .zip(dup.iter_mut())
                .zip(dh.iter().zip(cache.gate_pre.iter()).zip(cache.up.iter()))
            {
                *dg = dh_v * u * nn::silu_grad(*g);
                *du = dh_v * nn::silu(*g);
            }
            grads_add(&mut lg.w_gate, &cache.b.t().dot(&dgate));
            grads_add(&mut lg.w_up, &cache.b.t().dot(&dup));
            let db = dgate.dot(&lp.w_gate.t()) + dup.dot(&lp.w_up.t());
            let (dx_norm, dg_ffn) =
                rms_norm_backward(&cache.x_mid, &lp.norm_ffn, &cache.inv_rms_b, &db);
            lg.norm_ffn += &dg_ffn;
            let dx_mid = &dx + &dx_norm;

            // Attention half.
            grads_add(&mut lg.wo, &cache.ctx.t().dot(&dx_mid));
            let dctx = dx_mid.dot(&lp.wo.t());
            let mut dq = Array2::<f32>::zeros((t, h));
            let mut dk = Array2::<f32>::zeros((t, h));
            let mut dv = Array2::<f32>::zeros((t, h));
            for hh in 0..n_heads {
                let cols = s![.., hh * hd..(hh + 1) * hd];
                let p = &cache.probs[hh];
                let dctx_h = dctx.slice(cols);
                let vh = cache.v.slice(cols);
                dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
                let dp = dctx_h.dot(&vh.t());
                // Softmax backward, causal rows.
                let mut dsc = Array2::<f32>::zeros((t, t));
                for i in 0..t {
                    let valid = i + 1;
                    let mut dot = 0.0f32;
                    for j in 0..valid {
                        dot += p[(i, j)] * dp[(i, j)];
                    }
                    for j in 0..valid {
                        dsc[(i, j)] = p[(i, j)] * (dp[(i, j)] - dot);
                    }
                }
                let qh = cache.q.slice(cols);
                let kh = cache.k.slice(cols);
                let mut dq_h = dsc.dot(&kh);
                dq_h.mapv_inplace(|z| z * scale);
                let mut dk_h = dsc.t().dot(&qh);
                dk_h.mapv_inplace(|z| z * scale);
                dq.slice_mut(cols).assign(&dq_h);
                dk.slice_mut(cols).assign(&dk_h);
            }
            // Undo the rotary rotation (its transpose).
            for i in 0..t {
                for hh in 0..n_heads {
                    let range = hh * hd..(hh + 1) * hd;
                    let mut row = dq.row_mut(i);
                    self.rope
                        .rotate_back(&mut row.as_slice_mut().expect("contiguous")[range.clone()], i);
                    let mut row = dk.row_mut(i);
                    self.rope
                        .rotate_back(&mut row.as_slice_mut().expect("contiguous")[range], i);
                }
            }
            grads_add(&mut lg.wq, &cache.a.t().dot(&dq));
            grads_add(&mut lg.wk, &cache.a.t().dot(&dk));
            grads_add(&mut lg.wv, &cache.a.t().dot(&dv));
            let da = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
            let (dx_norm_a, dg_attn) =
                rms_norm_backward(&cache.x_in, &lp.norm_attn, &cache.inv_rms_a, &da);
            lg.norm_attn += &dg_attn;
            dx = &dx_mid + &dx_norm_a;
        }
        dx
    }

    /// Route input-embedding gradients back to the embedding table and the
    /// condition matrices.
    pub fn scatter_input_grads(
        &self,
        layout: &SequenceLayout,
        dx: &Array2<f32>,
        grads: &mut LmGrads,
    ) -> (Array2<f32>, Option<Array2<f32>>) {
        let mut d_cond_d = Array2::<f32>::zeros(layout.cond_d.frames.dim());
        let mut d_cond_r = layout
            .cond_r
            .as_ref()
            .map(|r| Array2::<f32>::zeros(r.frames.dim()));
        for (pos, item) in layout.items.iter().enumerate() {
            let row = dx.row(pos);
            match *item {
                Item::Token(id) => {
                    let mut g = grads.embed.row_mut(id as usize);
                    g += &row;
                }
                Item::CondD(i) => {
                    let mut g = d_cond_d.row_mut(i);
                    g += &row;
                }
                Item::CondR(i) => {
                    let g = d_cond_r.as_mut().expect("cond_r grads");
                    let mut g = g.row_mut(i);
                    g += &row;
                }
            }
        }
        (d_cond_d, d_cond_r)
    }

    /// Named tensors for checkpointing (all trainable).
    pub fn export_tensors(&self) -> Vec<(String, bool, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        let push2 = |out: &mut Vec<_>, name: String, m: &Array2<f32>| {
            out.push((name, false, vec![m.nrows(), m.ncols()], m.iter().copied().collect()));
        };
        let push1 = |out: &mut Vec<_>, name: String, v: &Array1<f32>| {
            out.push((name, false, vec![v.len()], v.to_vec()));
        };
        push2(&mut out, "lm.embed".into(), &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            push1(&mut out, format!("lm.layer{i}.norm_attn"), &l.norm_attn);
            push2(&mut out, format!("lm.layer{i}.wq"), &l.wq);
            push2(&mut out, format!("lm.layer{i}.wk"), &l.wk);
            push2(&mut out, format!("lm.layer{i}.wv"), &l.wv);
            push2(&mut out, format!("lm.layer{i}.wo"), &l.wo);
            push1(&mut out, format!("lm.layer{i}.norm_ffn"), &l.norm_ffn);
            push2(&mut out, format!("lm.layer{i}.w_gate"), &l.w_gate);
            push2(&mut out, format!("lm.layer{i}.w_up"), &l.w_up);
            push2(&mut out, format!("lm.layer{i}.w_down"), &l.w_down);
        }
        push1(&mut out, "lm.norm_final".into(), &self.norm_final);
        push2(&mut out, "lm.head".into(), &self.head);
        out
    }

    pub fn import_tensor(&mut self, name: &str, data: &[f32]) -> Result<()> {
        let fail = || Error::Lm(format!("unknown or mismatched tensor {name}"));
        let tensor: &mut [f32] = match name {
            "lm.embed" => self.embed.as_slice_mut().unwrap(),
            "lm.norm_final" => self.norm_final.as_slice_mut().unwrap(),
            "lm.head" => self.head.as_slice_mut().unwrap(),
            _ => {
                let rest = name.strip_prefix("lm.layer").ok_or_else(fail)?;
                let (idx, field) = rest.split_once('.').ok_or_else(fail)?;
                let i: usize = idx.parse().map_err(|_| fail())?;
                let l = self.layers.get_mut(i).ok_or_else(fail)?;
                match field {
                    "norm_attn" => l.norm_attn.as_slice_mut().unwrap(),
                    "wq" => l.wq.as_slice_mut().unwrap(),
                    "wk" => l.wk.as_slice_mut().unwrap(),
                    "wv" => l.wv.as_slice_mut().unwrap(),
                    "wo" => l.wo.as_slice_mut().unwrap(),
                    "norm_ffn" => l.norm_ffn.as_slice_mut().unwrap(),
                    "w_gate" => l.w_gate.as_slice_mut().unwrap(),
                    "w_up" => l.w_up.as_slice_mut().unwrap(),
                    "w_down" => l.w_down.as_slice_mut().unwrap(),
                    _ => return Err(fail()),
                }
            }
        };
        if tensor.len() != data.len() {
            return Err(Error::Lm(format!(
                "tensor {name} size mismatch: {} vs {}",
                tensor.len(),
                data.len()
            )));
        }
        tensor.copy_from_slice(data);
        Ok(())
    }

    /// Visit every trainable tensor in a fixed canonical order.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut [f32])) {
        f("lm.embed", self.embed.as_slice_mut().unwrap());
        for (i, l) in self.layers.iter_mut().enumerate() {
            let name = format!("lm.layer{i}");
            f(&format!("{name}.norm_attn"), l.norm_attn.as_slice_mut().unwrap());
            f(&format!("{name}.wq"), l.wq.as_slice_mut().unwrap());
            f(&format!("{name}.wk"), l.wk.as_slice_mut().unwrap());
            f(&format!("{name}.wv"), l.wv.as_slice_mut().unwrap());
            f(&format!("{name}.wo"), l.wo.as_slice_mut().unwrap());
            f(&format!("{name}.norm_ffn"), l.norm_ffn.as_slice_mut().unwrap());
            f(&format!("{name}.w_gate"), l.w_gate.as_slice_mut().unwrap());
            f(&format!("{name}.w_up"), l.w_up.as_slice_mut().unwrap());
            f(&format!("{name}.w_down"), l.w_down.as_slice_mut().unwrap());
        }
        f("lm.norm_final", self.norm_final.as_slice_mut().unwrap());
        f("lm.head", self.head.as_slice_mut().unwrap());
    }

    /// Total trainable scalar count (must agree with the config formula).
    pub fn actual_param_count(&self) -> u64 {
        let mut n = self.embed.len() + self.norm_final.len() + self.head.len();
        for l in &self.layers {
            n += l.norm_attn.len()
                + l.wq.len()
                + l.wk.len()
                + l.wv.len()
                + l.wo.len()
                + l.norm_ffn.len()
                + l.w_gate.len()
                + l.w_up.len()
                + l.w_down.len();
        }
        n as u64
    }
}

fn grads_add(dst: &mut Array2<f32>, src: &Array2<f32>) {
    *dst += src;
}

fn rms_norm_backward(
    x: &Array2<f32>,
    gain: &Array1<f32>,
    inv_rms: &[f32],
    dy: &Array2<f32>,
) -> (Array2<f32>, Array1<f32>) {
    let (t, d) = x.dim();
    let mut dx = Array2::<f32>::zeros((t, d));
    let mut dgain = Array1::<f32>::zeros(d);
    for i in 0..t {
        let inv = inv_rms[i];
        let xr = x.row(i);
        let dyr = dy.row(i);
        let mut s = 0.0f32;
        for j in 0..d {
            s += dyr[j] * gain[j] * xr[j];
            dgain[j] += dyr[j] * xr[j] * inv;
        }
        let c = inv * inv * inv * s / d as f32;
        for j in 0..d {
            dx[(i, j)] = dyr[j] * gain[j] * inv - xr[j] * c;
        }
    }
    (dx, dgain)
}

pub struct LayerCache {
    x_in: Array2<f32>,
    inv_rms_a: Vec<f32>,
    a: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    probs: Vec<Array2<f32>>,
    ctx: Array2<f32>,
    x_mid: Array2<f32>,
    inv_rms_b: Vec<f32>,
    b: Array2<f32>,
    gate_pre: Array2<f32>,
    up: Array2<f32>,
    h: Array2<f32>,
}

pub struct ForwardPass {
    pub x0: Array2<f32>,
    layers: Vec<LayerCache>,
    x_last: Array2<f32>,
    inv_rms_final: Vec<f32>,
    y: Array2<f32>,
    pub logits: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub norm_attn: Array1<f32>,
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
    pub norm_ffn: Array1<f32>,
    pub w_gate: Array2<f32>,
    pub w_up: Array2<f32>,
    pub w_down: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct LmGrads {
    pub embed: Array2<f32>,
    pub layers: Vec<LayerGrads>,
    pub norm_final: Array1<f32>,
    pub head: Array2<f32>,
}

impl LmGrads {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        let f = cfg.ffn_dim;
        let v = cfg.vocab_size();
        LmGrads {
            embed: Array2::zeros((v, h)),
            layers: (0..cfg.layers)
                .map(|_| LayerGrads {
                    norm_attn: Array1::zeros(h),
                    wq: Array2::zeros((h, h)),
                    wk: Array2::zeros((h, h)),
                    wv: Array2::zeros((h, h)),
                    wo: Array2::zeros((h, h)),
                    norm_ffn: Array1::zeros(h),
                    w_gate: Array2::zeros((h, f)),
                    w_up: Array2::zeros((h, f)),
                    w_down: Array2::zeros((f, h)),
                })
                .collect(),
            norm_final: Array1::zeros(h),
            head: Array2::zeros((h, v)),
        }
    }

    /// Merge another gradient accumulator (fixed order, deterministic).
    pub fn merge(&mut self, other: &LmGrads) {
        self.embed += &other.embed;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.norm_attn += &b.norm_attn;
            a.wq += &b.wq;
            a.wk += &b.wk;
            a.wv += &b.wv;
            a.wo += &b.wo;
            a.norm_ffn += &b.norm_ffn;
            a.w_gate += &b.w_gate;
            a.w_up += &b.w_up;
            a.w_down += &b.w_down;
        }
        self.norm_final += &other.norm_final;
        self.head += &other.head;
    }

    /// Visit every gradient tensor in the same order as `LmModel::visit_mut`.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut [f32])) {
        f("lm.embed", self.embed.as_slice_mut().unwrap());
        for (i, l) in self.layers.iter_mut().enumerate() {
            let name = format!("lm.layer{i}");
            f(&format!("{name}.norm_attn"), l.norm_attn.as_slice_mut().unwrap());
            f(&format!("{name}.wq"), l.wq.as_slice_mut().unwrap());
            f(&format!("{name}.wk"), l.wk.as_slice_mut().unwrap());
            f(&format!("{name}.wv"), l.wv.as_slice_mut().unwrap());
            f(&format!("{name}.wo"), l.wo.as_slice_mut().unwrap());
            f(&format!("{name}.norm_ffn"), l.norm_ffn.as_slice_mut().unwrap());
            f(&format!("{name}.w_gate"), l.w_gate.as_slice_mut().unwrap());
            f(&format!("{name}.w_up"), l.w_up.as_slice_mut().unwrap());
            f(&format!("{name}.w_down"), l.w_down.as_slice_mut().unwrap());
        }
        f("lm.norm_final", self.norm_final.as_slice_mut().unwrap());
        f("lm.head", self.head.as_slice_mut().unwrap());
    }
}

/// Sum of masked-position NLLs (f64) and the masked count. Labels at
/// unmasked positions are ignored entirely.
pub fn nll_sum(logits: &Array2<f32>, labels: &[Option<u32>], mask: &[bool]) -> Result<(f64, usize)> {
    let t = logits.nrows();
    if labels.len() != t || mask.len() != t {
        return Err(Error::Lm("label/mask length mismatch with logits".into()));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for i in 0..t {
        if !mask[i] {
            continue;
        }
        let label = labels[i].ok_or_else(|| Error::Lm(format!("masked position {i} lacks a label")))?;
        let row = logits.row(i);
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for &v in row.iter() {
            sum += f64::from(v - m).exp();
        }
        total += sum.ln() + f64::from(m) - f64::from(row[label as usize]);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Lm("no masked position in layout".into()));
    }
    Ok((total, count))
}

/// Mean NLL over masked positions of one layout.
pub fn nll_mean(logits: &Array2<f32>, labels: &[Option<u32>], mask: &[bool]) -> Result<f64> {
    let (total, count) = nll_sum(logits, labels, mask)?;
    Ok(total / count as f64)
}

/// Loss gradient w.r.t. logits: `(softmax - onehot) * inv_total` at masked
/// rows, exactly zero elsewhere.
pub fn dlogits(
    logits: &Array2<f32>,
    labels: &[Option<u32>],
    mask: &[bool],
    inv_total: f32,
) -> Array2<f32> {
    let (t, v) = logits.dim();
    let mut out = Array2::<f32>::zeros((t, v));
    for i in 0..t {
        if !mask[i] {
            continue;
        }
        let label = labels[i].expect("masked position has a label") as usize;
        let row = logits.row(i);
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for &x in row.iter() {
            sum += (x - m).exp();
        }
        let inv_sum = 1.0 / sum;
        for j in 0..v {
            let p = (row[j] - m).exp() * inv_sum;
            out[(i, j)] = (p - if j == label { 1.0 } else { 0.0 }) * inv_total;
        }
    }
    out
}

/// Teacher-forced next-token accuracy over masked positions.
pub fn masked_accuracy(logits: &Array2<f32>, labels: &[Option<u32>], mask: &[bool]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for i in 0..logits.nrows() {
        if !mask[i] {
            continue;
        }
        let row = logits.row(i);
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        total += 1;
        if best as u32 == labels[i].expect("label") {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{GlobalTokens, SemanticTokens};
    use crate::cond::CondFeatures;
    use crate::lm::layout;
    use crate::Mode;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 16,
            ffn_dim: 32,
            max_seq_len: 128,
            k_s: 8,
            k_g: 4,
            init_seed: 11,
        }
    }

    fn random_layout(seed: u64, sem_len: usize, mode: Mode) -> SequenceLayout {
        let mut r = rng::stream(seed, "test_layout", 0);
        let cfg = tiny_config();
        let v = cfg.vocab();
        let frames = 4;
        let cond = |r: &mut rand_chacha::ChaCha8Rng| CondFeatures {
            frames: Array2::from_shape_fn((frames, cfg.hidden), |_| r.gen_range(-0.5..0.5)),
        };
        let g = GlobalTokens::new((0..32).map(|_| r.gen_range(0..4u32)).collect()).unwrap();
        let s = SemanticTokens {
            ids: (0..sem_len).map(|_| r.gen_range(0..8u32)).collect(),
        };
        let cond_d = cond(&mut r);
        let cond_r = mode.needs_reference().then(|| cond(&mut r));
        layout::training_layout(&v, mode, cond_d, cond_r, &g, &s).unwrap()
    }

    #[test]
    fn logits_shape_matches_layout_and_vocab() {
        let model = LmModel::new(tiny_config()).unwrap();
        let layout = random_layout(0, 5, Mode::Sr);
        let x = model.embed_layout(&layout).unwrap();
        let fwd = model.forward(x).unwrap();
        assert_eq!(fwd.logits.dim(), (layout.len(), 20));
    }

    #[test]
    fn forward_is_deterministic_and_row_independent() {
        let model = LmModel::new(tiny_config()).unwrap();
        let layout = random_layout(1, 6, Mode::Tse);
        let x = model.embed_layout(&layout).unwrap();
        let a = model.forward(x.clone()).unwrap();
        let b = model.forward(x).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn causality_is_exact() {
        let model = LmModel::new(tiny_config()).unwrap();
        for seed in 0..5 {
            let layout = random_layout(seed, 4, Mode::Sr);
            let x = model.embed_layout(&layout).unwrap();
            let base = model.forward(x.clone()).unwrap();
            let t = layout.len();
            let perturb_at = (seed as usize * 7 + 3) % t;
            let mut x2 = x;
            x2[(perturb_at, 0)] += 1.0;
            x2[(perturb_at, 5)] -= 0.5;
            let changed = model.forward(x2).unwrap();
            for i in 0..perturb_at {
                for j in 0..20 {
                    assert_eq!(
                        base.logits[(i, j)],
                        changed.logits[(i, j)],
                        "leak at pos {i} (perturbed {perturb_at})"
                    );
                }
            }
            // And the perturbed position itself must change.
            let diff: f32 = (0..20)
                .map(|j| (base.logits[(perturb_at, j)] - changed.logits[(perturb_at, j)]).abs())
                .sum();
            assert!(diff > 0.0);
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let v = 20usize;
        let logits = Array2::<f32>::zeros((3, v));
        let labels = vec![Some(3u32), Some(7), Some(0)];
        let mask = vec![true, true, true];
        let loss = nll_mean(&logits, &labels, &mask).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut logits = Array2::<f32>::zeros((2, 10));
        logits[(0, 4)] = 50.0;
        logits[(1, 9)] = 50.0;
        let labels = vec![Some(4u32), Some(9)];
        let mask = vec![true, true];
        let loss = nll_mean(&logits, &labels, &mask).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn no_masked_position_is_rejected() {
        let logits = Array2::<f32>::zeros((2, 10));
        let labels = vec![None, None];
        let mask = vec![false, false];
        assert!(nll_mean(&logits, &labels, &mask).is_err());
    }

    #[test]
    fn loss_ignores_labels_at_unmasked_positions() {
        let model = LmModel::new(tiny_config()).unwrap();
        let layout = random_layout(3, 5, Mode::Sr);
        let x = model.embed_layout(&layout).unwrap();
        let fwd = model.forward(x).unwrap();
        let base = nll_mean(&fwd.logits, &layout.labels, &layout.mask).unwrap();
        // Scribble junk labels over every unmasked position.
        let mut labels = layout.labels.clone();
        for (l, &m) in labels.iter_mut().zip(&layout.mask) {
            if !m {
                *l = Some(1);
            }
        }
        let scrambled = nll_mean(&fwd.logits, &labels, &layout.mask).unwrap();
        assert_eq!(base, scrambled);
        // Gradients too.
        let d1 = dlogits(&fwd.logits, &layout.labels, &layout.mask, 1.0);
        let d2 = dlogits(&fwd.logits, &labels, &layout.mask, 1.0);
        assert_eq!(d1, d2);
        // Gradient rows at unmasked positions are identically zero.
        for (i, &m) in layout.mask.iter().enumerate() {
            if !m {
                assert!(d1.row(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn swapping_task_token_changes_one_input_row() {
        let model = LmModel::new(tiny_config()).unwrap();
        let tse = random_layout(5, 4, Mode::Tse);
        let mut rtse = tse.clone();
        rtse.items[0] = Item::Token(tiny_config().vocab().task_token(Mode::Rtse));
        let a = model.embed_layout(&tse).unwrap();
        let b = model.embed_layout(&rtse).unwrap();
        let mut diff_rows = Vec::new();
        for i in 0..a.nrows() {
            if a.row(i) != b.row(i) {
                diff_rows.push(i);
            }
        }
        assert_eq!(diff_rows, vec![0]);
    }

    /// Finite-difference check over a sample of every parameter family.
    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let mut model = LmModel::new(cfg).unwrap();
        let layout = random_layout(7, 4, Mode::Tse);

        let loss_of = |m: &LmModel| -> f64 {
            let x = m.embed_layout(&layout).unwrap();
            let fwd = m.forward(x).unwrap();
            nll_mean(&fwd.logits, &layout.labels, &layout.mask).unwrap()
        };

        let x = model.embed_layout(&layout).unwrap();
        let fwd = model.forward(x).unwrap();
        let (_, count) = nll_sum(&fwd.logits, &layout.labels, &layout.mask).unwrap();
        let dl = dlogits(&fwd.logits, &layout.labels, &layout.mask, 1.0 / count as f32);
        let mut grads = LmGrads::zeros(&model.config);
        let dx = model.backward(&fwd, &dl, &mut grads);
        model.scatter_input_grads(&layout, &dx, &mut grads);

        // One representative coordinate per tensor family.
        let spots: Vec<(&str, usize)> = vec![
            ("lm.embed", 3),
            ("lm.layer0.norm_attn", 2),
            ("lm.layer0.wq", 17),
            ("lm.layer0.wk", 33),
            ("lm.layer0.wv", 5),
            ("lm.layer0.wo", 40),
            ("lm.layer0.norm_ffn", 7),
            ("lm.layer0.w_gate", 100),
            ("lm.layer0.w_up", 200),
            ("lm.layer0.w_down", 150),
            ("lm.layer1.wq", 60),
            ("lm.norm_final", 1),
            ("lm.head", 77),
        ];
        for (name, flat_idx) in spots {
            let mut analytic = None;
            grads.visit_mut(&mut |n, g| {
                if n == name {
                    analytic = Some(f64::from(g[flat_idx]));
                }
            });
            let analytic = analytic.unwrap();
            let eps = 2e-3f32;
            let probe = |delta: f32, m: &mut LmModel| -> f64 {
                let mut applied = false;
                m.visit_mut(&mut |n, p| {
                    if n == name && !applied {
                        p[flat_idx] += delta;
                        applied = true;
                    }
                });
                loss_of(m)
            };
            let up = probe(eps, &mut model);
            let down = probe(-2.0 * eps, &mut model);
            probe(eps, &mut model); // restore
            let fd = (up - down) / (2.0 * f64::from(eps));
            let denom = analytic.abs().max(fd.abs()).max(1e-4);
            let rel = (fd - analytic).abs() / denom;
            assert!(
                rel < 3e-2,
                "{name}[{flat_idx}]: fd {fd:.6e} vs analytic {analytic:.6e} (rel {rel:.3e})"
            );
        }

        // Condition-frame gradient: perturb one cond_d entry.
        let (d_cond_d, _) = model.scatter_input_grads(&layout, &dx, &mut LmGrads::zeros(&model.config));
        let (ci, cj) = (1usize, 3usize);
        let analytic = f64::from(d_cond_d[(ci, cj)]);
        let eps = 2e-3f32;
        let mut layout2 = layout.clone();
        layout2.cond_d.frames[(ci, cj)] += eps;
        let up = {
            let x = model.embed_layout(&layout2).unwrap();
            let fwd = model.forward(x).unwrap();
            nll_mean(&fwd.logits, &layout2.labels, &layout2.mask).unwrap()
        };
        layout2.cond_d.frames[(ci, cj)] -= 2.0 * eps;
        let downv = {
            let x = model.embed_layout(&layout2).unwrap();
            let fwd = model.forward(x).unwrap();
            nll_mean(&fwd.logits, &layout2.labels, &layout2.mask).unwrap()
        };
        let fd = (up - downv) / (2.0 * f64::from(eps));
        let rel = (fd - analytic).abs() / analytic.abs().max(fd.abs()).max(1e-4);
        assert!(rel < 3e-2, "cond grad: fd {fd:.5e} vs {analytic:.5e}");
    }

    #[test]
    fn actual_parameter_count_matches_formula() {
        let cfg = tiny_config();
        let model = LmModel::new(cfg).unwrap();
        assert_eq!(
            model.actual_param_count(),
            super::super::config::param_count(&cfg).total
        );
    }

    #[test]
    fn overlength_input_rejected_with_lengths() {
        let cfg = ModelConfig {
            max_seq_len: 16,
            ..tiny_config()
        };
        let model = LmModel::new(cfg).unwrap();
        let x = Array2::<f32>::zeros((20, 16));
        let msg = match model.forward(x) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("overlength input accepted"),
        };
        assert!(msg.contains("20") && msg.contains("16"), "{msg}");
    }
}
