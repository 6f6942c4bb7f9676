//! Forward pass, loss, and hand-written reverse-mode gradients.
//!
//! The forward pass records a trace of intermediate activations; `backward`
//! replays it in reverse. Gradients are produced for every tensor (base and
//! adapters) so the same machinery serves full fine-tuning, adapter training,
//! and finite-difference verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{AdaptedModel, LoraAdapter, LoraTarget, LoraTargetKind, NetGrads, SoftPrompt};
use crate::error::{Error, Result};
use crate::math::{Matrix, Real};
use crate::model::{LayerNormParams, ModelState};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

struct NetRef<'a, T> {
    base: &'a ModelState<T>,
    lora: Option<&'a LoraAdapter<T>>,
    soft: Option<&'a SoftPrompt<T>>,
}

impl<'a, T: Real> NetRef<'a, T> {
    fn lora_site(&self, layer: usize, kind: LoraTargetKind) -> Option<(&'a LoraTarget<T>, T, f64)> {
        let l = self.lora?;
        let t = l.target(layer, kind)?;
        Some((t, T::from_f64(l.config.scale()), l.config.dropout))
    }

    fn virtual_len(&self) -> usize {
        self.soft.map_or(0, SoftPrompt::len)
    }
}

struct LnTrace<T> {
    xhat: Matrix<T>,
    rstd: Vec<T>,
    out: Matrix<T>,
}

struct LoraFwd<T> {
    /// Adapter input after dropout (the base path sees the raw input).
    dropped: Matrix<T>,
    /// rows x rank product with A.
    hidden: Matrix<T>,
    /// Inverted-dropout multipliers, absent in eval mode or when p = 0.
    mask: Option<Matrix<T>>,
}

struct LayerTrace<T> {
    ln1: LnTrace<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    lq: Option<LoraFwd<T>>,
    lk: Option<LoraFwd<T>>,
    lv: Option<LoraFwd<T>>,
    /// Per-head causal attention probabilities (rows x rows, zero above diagonal).
    probs: Vec<Matrix<T>>,
    /// Concatenated head outputs before the output projection.
    z: Matrix<T>,
    lo: Option<LoraFwd<T>>,
    ln2: LnTrace<T>,
    mlp_pre: Matrix<T>,
    mlp_act: Matrix<T>,
    lmi: Option<LoraFwd<T>>,
    lmo: Option<LoraFwd<T>>,
}

struct Trace<T> {
    tokens: Vec<u32>,
    virt: usize,
    layers: Vec<LayerTrace<T>>,
    ln_f: LnTrace<T>,
    /// Row t: log-distribution over the token following position t.
    logprobs: Matrix<T>,
}

fn layer_norm_fwd<T: Real>(x: &Matrix<T>, p: &LayerNormParams<T>) -> LnTrace<T> {
    let (n, d) = (x.rows(), x.cols());
    let eps = T::from_f64(LN_EPS);
    let dim = T::from_f64(d as f64);
    let mut xhat = Matrix::zeros(n, d);
    let mut out = Matrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    let g = p.gain.row(0);
    let b = p.offset.row(0);
    for i in 0..n {
        let row = x.row(i);
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / dim;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var / dim;
        let r = (var + eps).sqrt().recip();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            xh[j] = (v - mean) * r;
        }
        let o = out.row_mut(i);
        for j in 0..d {
            o[j] = xhat.get(i, j) * g[j] + b[j];
        }
    }
    LnTrace { xhat, rstd, out }
}

fn layer_norm_bwd<T: Real>(
    t: &LnTrace<T>,
    p: &LayerNormParams<T>,
    dy: &Matrix<T>,
    dgain: &mut Matrix<T>,
    doffset: &mut Matrix<T>,
) -> Matrix<T> {
    let (n, d) = (dy.rows(), dy.cols());
    let dim = T::from_f64(d as f64);
    let mut dx = Matrix::zeros(n, d);
    let g = p.gain.row(0);
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = t.xhat.row(i);
        {
            let dg = dgain.row_mut(0);
            let db = doffset.row_mut(0);
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
                db[j] += dyr[j];
            }
        }
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
        }
        let m1 = sum_dxhat / dim;
        let m2 = sum_dxhat_xhat / dim;
        let r = t.rstd[i];
        let dxr = dx.row_mut(i);
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dxr[j] = r * (dxh - m1 - xh[j] * m2);
        }
    }
    dx
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// y = x W^T (+ bias), plus the scaled low-rank path when present.
fn linear_fwd<T: Real>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    bias: Option<&Matrix<T>>,
    lora: Option<(&LoraTarget<T>, T, f64)>,
    rng: Option<&mut ChaCha8Rng>,
) -> (Matrix<T>, Option<LoraFwd<T>>) {
    let mut y = Matrix::matmul_nt(x, w);
    if let Some(b) = bias {
        let br = b.row(0);
        for i in 0..y.rows() {
            let yr = y.row_mut(i);
            for j in 0..yr.len() {
                yr[j] += br[j];
            }
        }
    }
    let fwd = lora.map(|(t, scale, p)| {
        let (dropped, mask) = match rng {
            Some(r) if p > 0.0 => {
                let keep = T::from_f64(1.0 / (1.0 - p));
                let mut mask = Matrix::zeros(x.rows(), x.cols());
                let mut dropped = x.clone();
                for (m, d) in mask
                    .as_mut_slice()
                    .iter_mut()
                    .zip(dropped.as_mut_slice().iter_mut())
                {
                    if r.gen::<f64>() < p {
                        *m = T::zero();
                        *d = T::zero();
                    } else {
                        *m = keep;
                        *d *= keep;
                    }
                }
                (dropped, Some(mask))
            }
            _ => (x.clone(), None),
        };
        let hidden = Matrix::matmul_nt(&dropped, &t.a);
        let delta = Matrix::matmul_nt(&hidden, &t.b);
        y.add_scaled(&delta, scale);
        LoraFwd {
            dropped,
            hidden,
            mask,
        }
    });
    (y, fwd)
}

/// Backward through `linear_fwd`; returns dx. Gradient tensors accumulate.
#[allow(clippy::too_many_arguments)]
fn linear_bwd<T: Real>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    dy: &Matrix<T>,
    lora: Option<(&LoraTarget<T>, T, f64)>,
    fwd: Option<&LoraFwd<T>>,
    dw: &mut Matrix<T>,
    dbias: Option<&mut Matrix<T>>,
    dlora: Option<(&mut Matrix<T>, &mut Matrix<T>)>,
) -> Matrix<T> {
    dy.matmul_tn_into(x, dw);
    if let Some(db) = dbias {
        let dbr = db.row_mut(0);
        for i in 0..dy.rows() {
            let dyr = dy.row(i);
            for j in 0..dyr.len() {
                dbr[j] += dyr[j];
            }
        }
    }
    let mut dx = Matrix::matmul_nn(dy, w);
    if let Some((t, scale, _)) = lora {
        let f = fwd.expect("lora forward trace missing");
        let (da, db) = dlora.expect("lora gradient slot missing");
        let mut dh = Matrix::matmul_nn(dy, &t.b);
        dh.scale(scale);
        let mut db_delta = Matrix::zeros(db.rows(), db.cols());
        dy.matmul_tn_into(&f.hidden, &mut db_delta);
        db.add_scaled(&db_delta, scale);
        dh.matmul_tn_into(&f.dropped, da);
        let dxa = Matrix::matmul_nn(&dh, &t.a);
        match &f.mask {
            Some(mask) => {
                for ((o, &d), &m) in dx
                    .as_mut_slice()
                    .iter_mut()
                    .zip(dxa.as_slice())
                    .zip(mask.as_slice())
                {
                    *o += d * m;
                }
            }
            None => dx.add_assign(&dxa),
        }
    }
    dx
}

fn head_slice<T: Real>(x: &Matrix<T>, head: usize, dh: usize) -> Matrix<T> {
    let n = x.rows();
    let mut out = Matrix::zeros(n, dh);
    for i in 0..n {
        out.row_mut(i).copy_from_slice(&x.row(i)[head * dh..(head + 1) * dh]);
    }
    out
}

fn head_slice_add<T: Real>(dst: &mut Matrix<T>, src: &Matrix<T>, head: usize, dh: usize) {
    for i in 0..src.rows() {
        let d = &mut dst.row_mut(i)[head * dh..(head + 1) * dh];
        for (o, &s) in d.iter_mut().zip(src.row(i)) {
            *o += s;
        }
    }
}

fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(a.cols(), b.cols());
    a.matmul_tn_into(b, &mut out);
    out
}

fn validate_tokens<T: Real>(net: &NetRef<T>, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Shape("empty token sequence".into()));
    }
    let vocab = net.base.config.vocab_size;
    for &id in tokens {
        if id as usize >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
    }
    let max = net.base.config.context_len - net.virtual_len();
    if tokens.len() > max {
        return Err(Error::ContextOverflow {
            len: tokens.len(),
            context: max,
        });
    }
    Ok(())
}

fn forward<T: Real>(
    net: &NetRef<T>,
    tokens: &[u32],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Trace<T>> {
    validate_tokens(net, tokens)?;
    let cfg = &net.base.config;
    let d = cfg.embed_dim;
    let k = net.virtual_len();
    let rows = k + tokens.len();

    let mut x0 = Matrix::zeros(rows, d);
    for i in 0..rows {
        let src = if i < k {
            net.soft.unwrap().embeddings.row(i)
        } else {
            net.base.tok_emb.row(tokens[i - k] as usize)
        };
        let pos = net.base.pos_emb.row(i);
        let dst = x0.row_mut(i);
        for j in 0..d {
            dst[j] = src[j] + pos[j];
        }
    }

    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());

    let mut x = x0.clone();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (li, layer) in net.base.layers.iter().enumerate() {
        let ln1 = layer_norm_fwd(&x, &layer.ln1);
        let (q, lq) = linear_fwd(
            &ln1.out,
            &layer.wq,
            None,
            net.lora_site(li, LoraTargetKind::Wq),
            rng.as_deref_mut(),
        );
        let (kk, lk) = linear_fwd(
            &ln1.out,
            &layer.wk,
            None,
            net.lora_site(li, LoraTargetKind::Wk),
            rng.as_deref_mut(),
        );
        let (v, lv) = linear_fwd(
            &ln1.out,
            &layer.wv,
            None,
            net.lora_site(li, LoraTargetKind::Wv),
            rng.as_deref_mut(),
        );

        let mut probs = Vec::with_capacity(heads);
        let mut z = Matrix::zeros(rows, d);
        for h in 0..heads {
            let qh = head_slice(&q, h, dh);
            let kh = head_slice(&kk, h, dh);
            let vh = head_slice(&v, h, dh);
            let mut scores = Matrix::matmul_nt(&qh, &kh);
            scores.scale(inv_sqrt);
            let mut p = Matrix::zeros(rows, rows);
            for i in 0..rows {
                let s = scores.row(i);
                let mut mx = s[0];
                for &val in &s[1..=i] {
                    if val > mx {
                        mx = val;
                    }
                }
                let mut denom = T::zero();
                for &val in &s[..=i] {
                    denom += (val - mx).exp();
                }
                let pr = p.row_mut(i);
                for j in 0..=i {
                    pr[j] = (s[j] - mx).exp() / denom;
                }
            }
            let zh = Matrix::matmul_nn(&p, &vh);
            head_slice_add(&mut z, &zh, h, dh);
            probs.push(p);
        }

        let (att, lo) = linear_fwd(
            &z,
            &layer.wo,
            None,
            net.lora_site(li, LoraTargetKind::Wo),
            rng.as_deref_mut(),
        );
        let mut x_mid = x.clone();
        x_mid.add_assign(&att);

        let ln2 = layer_norm_fwd(&x_mid, &layer.ln2);
        let (mlp_pre, lmi) = linear_fwd(
            &ln2.out,
            &layer.mlp_in,
            Some(&layer.mlp_in_bias),
            net.lora_site(li, LoraTargetKind::MlpIn),
            rng.as_deref_mut(),
        );
        let mut mlp_act = mlp_pre.clone();
        for v in mlp_act.as_mut_slice() {
            *v = gelu(*v);
        }
        let (mlp_out, lmo) = linear_fwd(
            &mlp_act,
            &layer.mlp_out,
            Some(&layer.mlp_out_bias),
            net.lora_site(li, LoraTargetKind::MlpOut),
            rng.as_deref_mut(),
        );
        let mut x_out = x_mid.clone();
        x_out.add_assign(&mlp_out);

        layers.push(LayerTrace {
            ln1,
            q,
            k: kk,
            v,
            lq,
            lk,
            lv,
            probs,
            z,
            lo,
            ln2,
            mlp_pre,
            mlp_act,
            lmi,
            lmo,
        });
        x = x_out;
    }

    let ln_f = layer_norm_fwd(&x, &net.base.ln_f);
    let mut logprobs = Matrix::matmul_nt(&ln_f.out, net.base.head_matrix());
    for i in 0..rows {
        let row = logprobs.row_mut(i);
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut lse = T::zero();
        for &v in row.iter() {
            lse += (v - mx).exp();
        }
        let lse = mx + lse.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }

    Ok(Trace {
        tokens: tokens.to_vec(),
        virt: k,
        layers,
        ln_f,
        logprobs,
    })
}

/// (logprob row, target id) pairs that enter the loss: every real token
/// predicting its successor, minus pad targets.
fn loss_positions(virt: usize, tokens: &[u32], pad: Option<u32>) -> Result<Vec<(usize, usize)>> {
    if tokens.len() < 2 {
        return Err(Error::Shape(
            "loss needs at least two tokens (one transition)".into(),
        ));
    }
    let out: Vec<(usize, usize)> = (0..tokens.len() - 1)
        .filter(|&t| Some(tokens[t + 1]) != pad)
        .map(|t| (virt + t, tokens[t + 1] as usize))
        .collect();
    if out.is_empty() {
        return Err(Error::Train("every loss target is padding".into()));
    }
    Ok(out)
}

fn mean_nll<T: Real>(trace: &Trace<T>, positions: &[(usize, usize)]) -> T {
    let mut total = T::zero();
    for &(row, tgt) in positions {
        total -= trace.logprobs.get(row, tgt);
    }
    total / T::from_f64(positions.len() as f64)
}

fn backward<T: Real>(
    net: &NetRef<T>,
    trace: &Trace<T>,
    positions: &[(usize, usize)],
    grads: &mut NetGrads<T>,
) {
    let cfg = &net.base.config;
    let rows = trace.virt + trace.tokens.len();
    let vocab = cfg.vocab_size;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
    let inv_n = T::from_f64(1.0 / positions.len() as f64);

    // d loss / d logits, sparse in rows.
    let mut dlogits = Matrix::zeros(rows, vocab);
    for &(row, tgt) in positions {
        let lp = trace.logprobs.row(row);
        let dr = dlogits.row_mut(row);
        for j in 0..vocab {
            dr[j] += lp[j].exp() * inv_n;
        }
        dr[tgt] -= inv_n;
    }

    // Output head (tied head accumulates into the embedding gradient).
    let dyf = Matrix::matmul_nn(&dlogits, net.base.head_matrix());
    {
        let dhead = match &mut grads.base.head {
            Some(h) => h,
            None => &mut grads.base.tok_emb,
        };
        dlogits.matmul_tn_into(&trace.ln_f.out, dhead);
    }

    let mut dx = layer_norm_bwd(
        &trace.ln_f,
        &net.base.ln_f,
        &dyf,
        &mut grads.base.ln_f.gain,
        &mut grads.base.ln_f.offset,
    );

    for li in (0..cfg.num_layers).rev() {
        let layer = &net.base.layers[li];
        let tr = &trace.layers[li];
        let gb = &mut grads.base.layers[li];
        let mut gl: Option<&mut Vec<LoraTarget<T>>> =
            grads.lora.as_mut().map(|l| &mut l.layers[li]);

        // MLP branch: x_out = x_mid + mlp_out(gelu(mlp_in(ln2(x_mid)))).
        let dact = linear_bwd(
            &tr.mlp_act,
            &layer.mlp_out,
            &dx,
            net.lora_site(li, LoraTargetKind::MlpOut),
            tr.lmo.as_ref(),
            &mut gb.mlp_out,
            Some(&mut gb.mlp_out_bias),
            lora_slot(gl.as_deref_mut(), LoraTargetKind::MlpOut),
        );
        let mut dpre = dact;
        for (g, &x) in dpre.as_mut_slice().iter_mut().zip(tr.mlp_pre.as_slice()) {
            *g *= gelu_grad(x);
        }
        let dy2 = linear_bwd(
            &tr.ln2.out,
            &layer.mlp_in,
            &dpre,
            net.lora_site(li, LoraTargetKind::MlpIn),
            tr.lmi.as_ref(),
            &mut gb.mlp_in,
            Some(&mut gb.mlp_in_bias),
            lora_slot(gl.as_deref_mut(), LoraTargetKind::MlpIn),
        );
        let mut dx_mid = layer_norm_bwd(&tr.ln2, &layer.ln2, &dy2, &mut gb.ln2.gain, &mut gb.ln2.offset);
        dx_mid.add_assign(&dx); // residual

        // Attention branch: x_mid = x_in + wo(attend(q, k, v)).
        let dz = linear_bwd(
            &tr.z,
            &layer.wo,
            &dx_mid,
            net.lora_site(li, LoraTargetKind::Wo),
            tr.lo.as_ref(),
            &mut gb.wo,
            None,
            lora_slot(gl.as_deref_mut(), LoraTargetKind::Wo),
        );

        let mut dq = Matrix::zeros(rows, cfg.embed_dim);
        let mut dk = Matrix::zeros(rows, cfg.embed_dim);
        let mut dv = Matrix::zeros(rows, cfg.embed_dim);
        for h in 0..heads {
            let qh = head_slice(&tr.q, h, dh);
            let kh = head_slice(&tr.k, h, dh);
            let vh = head_slice(&tr.v, h, dh);
            let dzh = head_slice(&dz, h, dh);
            let p = &tr.probs[h];

            let dvh = matmul_tn(p, &dzh);
            let dp = Matrix::matmul_nt(&dzh, &vh);
            // Softmax backward per causal row.
            let mut ds = Matrix::zeros(rows, rows);
            for i in 0..rows {
                let pr = p.row(i);
                let dpr = dp.row(i);
                let mut inner = T::zero();
                for j in 0..=i {
                    inner += dpr[j] * pr[j];
                }
                let dsr = ds.row_mut(i);
                for j in 0..=i {
                    dsr[j] = pr[j] * (dpr[j] - inner) * inv_sqrt;
                }
            }
            let dqh = Matrix::matmul_nn(&ds, &kh);
            let dkh = matmul_tn(&ds, &qh);
            head_slice_add(&mut dq, &dqh, h, dh);
            head_slice_add(&mut dk, &dkh, h, dh);
            head_slice_add(&mut dv, &dvh, h, dh);
        }

        let mut dy1 = linear_bwd(
            &tr.ln1.out,
            &layer.wq,
            &dq,
            net.lora_site(li, LoraTargetKind::Wq),
            tr.lq.as_ref(),
            &mut gb.wq,
            None,
            lora_slot(gl.as_deref_mut(), LoraTargetKind::Wq),
        );
        dy1.add_assign(&linear_bwd(
            &tr.ln1.out,
            &layer.wk,
            &dk,
            net.lora_site(li, LoraTargetKind::Wk),
            tr.lk.as_ref(),
            &mut gb.wk,
            None,
            lora_slot(gl.as_deref_mut(), LoraTargetKind::Wk),
        ));
        dy1.add_assign(&linear_bwd(
            &tr.ln1.out,
            &layer.wv,
            &dv,
            net.lora_site(li, LoraTargetKind::Wv),
            tr.lv.as_ref(),
            &mut gb.wv,
            None,
            lora_slot(gl.as_deref_mut(), LoraTargetKind::Wv),
        ));

        let x_in_ln = &tr.ln1;
        let mut dx_in = layer_norm_bwd(x_in_ln, &layer.ln1, &dy1, &mut gb.ln1.gain, &mut gb.ln1.offset);
        dx_in.add_assign(&dx_mid); // residual
        dx = dx_in;
    }

    // Embedding rows.
    for i in 0..rows {
        let src = dx.row(i);
        {
            let pos = grads.base.pos_emb.row_mut(i);
            for (o, &s) in pos.iter_mut().zip(src) {
                *o += s;
            }
        }
        if i < trace.virt {
            let sp = grads
                .soft_prompt
                .as_mut()
                .expect("soft prompt gradient slot missing");
            let row = sp.row_mut(i);
            for (o, &s) in row.iter_mut().zip(src) {
                *o += s;
            }
        } else {
            let tok = trace.tokens[i - trace.virt] as usize;
            let row = grads.base.tok_emb.row_mut(tok);
            for (o, &s) in row.iter_mut().zip(src) {
                *o += s;
            }
        }
    }
}

fn lora_slot<'g, T>(
    gl: Option<&'g mut Vec<LoraTarget<T>>>,
    kind: LoraTargetKind,
) -> Option<(&'g mut Matrix<T>, &'g mut Matrix<T>)> {
    let ts = gl?;
    let t = ts.iter_mut().find(|t| t.kind == kind)?;
    let LoraTarget { a, b, .. } = t;
    Some((a, b))
}

impl<T: Real> ModelState<T> {
    /// Log-probability rows for the next token after each input position.
    pub fn logprob_rows(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        let net = NetRef {
            base: self,
            lora: None,
            soft: None,
        };
        Ok(forward(&net, tokens, None)?.logprobs)
    }

    /// Mean next-token NLL over the sequence, skipping pad targets.
    pub fn sequence_nll(&self, tokens: &[u32], pad: Option<u32>) -> Result<T> {
        let net = NetRef {
            base: self,
            lora: None,
            soft: None,
        };
        let trace = forward(&net, tokens, None)?;
        let positions = loss_positions(0, tokens, pad)?;
        Ok(mean_nll(&trace, &positions))
    }
}

impl<T: Real> AdaptedModel<T> {
    fn net(&self) -> NetRef<'_, T> {
        NetRef {
            base: self.base(),
            lora: self.lora(),
            soft: self.soft_prompt(),
        }
    }

    /// Log-probability rows aligned to the real input tokens (virtual prompt
    /// rows are dropped): row t is the distribution over the token following
    /// `tokens[t]`.
    pub fn logprob_rows(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        let net = self.net();
        let trace = forward(&net, tokens, None)?;
        let k = trace.virt;
        if k == 0 {
            return Ok(trace.logprobs);
        }
        let vocab = self.config().vocab_size;
        let mut out = Matrix::zeros(tokens.len(), vocab);
        for t in 0..tokens.len() {
            out.row_mut(t).copy_from_slice(trace.logprobs.row(k + t));
        }
        Ok(out)
    }

    /// Mean next-token NLL over real-token transitions, skipping pad targets.
    /// Virtual prompt positions never contribute loss terms.
    pub fn sequence_nll(&self, tokens: &[u32], pad: Option<u32>) -> Result<T> {
        let net = self.net();
        let trace = forward(&net, tokens, None)?;
        let positions = loss_positions(trace.virt, tokens, pad)?;
        Ok(mean_nll(&trace, &positions))
    }

    /// Loss plus gradients for every tensor, base and adapters alike. Passing
    /// an rng enables train-mode dropout on adapter inputs; `None` is the
    /// deterministic eval path.
    pub fn loss_and_grads(
        &self,
        tokens: &[u32],
        pad: Option<u32>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(T, NetGrads<T>)> {
        let net = self.net();
        let trace = forward(&net, tokens, rng)?;
        let positions = loss_positions(trace.virt, tokens, pad)?;
        let loss = mean_nll(&trace, &positions);
        let mut grads = NetGrads::zeros_for(self);
        backward(&net, &trace, &positions, &mut grads);
        Ok((loss, grads))
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference half-step.
    pub step: f64,
    /// Coordinates sampled from each parameter class.
    pub per_class: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            per_class: 50,
            seed: 0,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassCheck {
    pub class: String,
    pub coords: usize,
    pub max_rel_err: f64,
    /// "tensor[index]" of the worst coordinate.
    pub worst: String,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub classes: Vec<ClassCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Parameter class for reporting: every tensor falls into exactly one.
pub fn tensor_class(name: &str) -> &'static str {
    if name.starts_with("lora.") || name == "soft_prompt.emb" {
        "adapters"
    } else if name.contains("ln1") || name.contains("ln2") || name.starts_with("ln_f") {
        "layer_norms"
    } else if name.contains("mlp") {
        "mlp"
    } else if name.contains(".w") {
        "attention"
    } else {
        "embeddings" // tok_emb, pos_emb, head
    }
}

/// Compare analytic gradients against central finite differences on randomly
/// sampled coordinates of every parameter class. f64 only; truncation error
/// at f32 would drown the signal.
pub fn grad_check(
    model: &mut AdaptedModel<f64>,
    tokens: &[u32],
    pad: Option<u32>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    grad_check_inner(model, tokens, pad, opts, None)
}

/// `corrupt` doubles one tensor's analytic gradient before comparing; the
/// check must then fail, which guards the checker itself against silently
/// passing everything.
pub(crate) fn grad_check_inner(
    model: &mut AdaptedModel<f64>,
    tokens: &[u32],
    pad: Option<u32>,
    opts: &GradCheckOptions,
    corrupt: Option<&str>,
) -> Result<GradCheckReport> {
    if !(opts.step > 0.0 && opts.step <= 1e-2) {
        return Err(Error::Config(format!(
            "finite-difference step must be in (0, 1e-2], got {}",
            opts.step
        )));
    }
    if opts.per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    if !(opts.tolerance > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()));
    }

    let (_, mut grads) = model.loss_and_grads(tokens, pad, None)?;
    if let Some(name) = corrupt {
        let mut found = false;
        for (n, m) in grads_named_mut(&mut grads) {
            if n == name {
                found = true;
                for v in m.as_mut_slice() {
                    *v *= 2.0;
                }
            }
        }
        if !found {
            return Err(Error::Config(format!("no tensor named {name}")));
        }
    }

    // Group coordinates by class.
    let mut class_names: Vec<&'static str> = Vec::new();
    let mut class_tensors: Vec<Vec<(usize, usize)>> = Vec::new(); // (tensor idx, len)
    let analytic: Vec<(String, Vec<f64>)> = grads
        .named_tensors()
        .iter()
        .map(|(n, m)| (n.clone(), m.as_slice().to_vec()))
        .collect();
    for (i, (name, g)) in analytic.iter().enumerate() {
        let class = tensor_class(name);
        let ci = match class_names.iter().position(|&c| c == class) {
            Some(ci) => ci,
            None => {
                class_names.push(class);
                class_tensors.push(Vec::new());
                class_names.len() - 1
            }
        };
        class_tensors[ci].push((i, g.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;
    let mut classes = Vec::new();
    let mut overall: f64 = 0.0;
    for (ci, class) in class_names.iter().enumerate() {
        let total: usize = class_tensors[ci].iter().map(|&(_, l)| l).sum();
        let mut max_rel: f64 = 0.0;
        let mut worst = String::new();
        let coords = opts.per_class.min(total);
        for _ in 0..coords {
            let mut pick = rng.gen_range(0..total);
            let (ti, elem) = {
                let mut found = (0, 0);
                for &(ti, len) in &class_tensors[ci] {
                    if pick < len {
                        found = (ti, pick);
                        break;
                    }
                    pick -= len;
                }
                found
            };
            let name = analytic[ti].0.clone();
            let g = analytic[ti].1[elem];

            let orig = read_param(model, &name, elem);
            write_param(model, &name, elem, orig + h);
            let up = model.sequence_nll(tokens, pad)?;
            write_param(model, &name, elem, orig - h);
            let down = model.sequence_nll(tokens, pad)?;
            write_param(model, &name, elem, orig);
            let fd = (up - down) / (2.0 * h);

            let rel = (fd - g).abs() / fd.abs().max(1e-3);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{elem}]");
            }
        }
        if max_rel > overall {
            overall = max_rel;
        }
        classes.push(ClassCheck {
            class: (*class).to_string(),
            coords,
            max_rel_err: max_rel,
            worst,
        });
    }

    Ok(GradCheckReport {
        classes,
        max_rel_err: overall,
        tolerance: opts.tolerance,
    })
}

fn grads_named_mut<T: Real>(grads: &mut NetGrads<T>) -> Vec<(String, &mut Matrix<T>)> {
    let mut out = grads.base.named_tensors_mut();
    if let Some(l) = &mut grads.lora {
        out.extend(l.named_tensors_mut());
    }
    if let Some(sp) = &mut grads.soft_prompt {
        out.push(("soft_prompt.emb".into(), sp));
    }
    out
}

fn read_param(model: &AdaptedModel<f64>, name: &str, elem: usize) -> f64 {
    for (n, m) in model.named_tensors() {
        if n == name {
            return m.as_slice()[elem];
        }
    }
    panic!("unknown tensor {name}");
}

fn write_param(model: &mut AdaptedModel<f64>, name: &str, elem: usize, value: f64) {
    for (n, m) in model.named_tensors_mut() {
        if n == name {
            m.as_mut_slice()[elem] = value;
            return;
        }
    }
    panic!("unknown tensor {name}");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{LoraConfig, SoftPromptConfig, SoftPromptInit};
    use crate::model::{LmConfig, Precision};

    fn config(seed: u64) -> LmConfig {
        LmConfig {
            vocab_size: 17,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            context_len: 12,
            seed,
            precision: Precision::F64,
            tie_embeddings: true,
        }
    }

    fn model(seed: u64) -> ModelState<f64> {
        ModelState::init(config(seed)).unwrap()
    }

    const TOKENS: &[u32] = &[3, 1, 4, 1, 5, 9, 2, 6];

    #[test]
    fn logprob_rows_are_normalized_distributions() {
        let m = model(1);
        let lp = m.logprob_rows(TOKENS).unwrap();
        assert_eq!(lp.rows(), TOKENS.len());
        assert_eq!(lp.cols(), 17);
        for i in 0..lp.rows() {
            let sum: f64 = lp.row(i).iter().map(|&x| x.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            assert!(lp.row(i).iter().all(|&x| x < 0.0));
        }
    }

    #[test]
    fn causality_later_token_changes_nothing_before_it() {
        let m = model(2);
        let a = m.logprob_rows(TOKENS).unwrap();
        let mut other = TOKENS.to_vec();
        other[5] = 13;
        let b = m.logprob_rows(&other).unwrap();
        for i in 0..5 {
            for j in 0..17 {
                assert_eq!(a.get(i, j).to_bits(), b.get(i, j).to_bits());
            }
        }
        assert!((0..17).any(|j| a.get(5, j) != b.get(5, j)));
    }

    #[test]
    fn input_validation() {
        let m = model(3);
        assert!(matches!(
            m.logprob_rows(&[]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            m.logprob_rows(&[1, 99]),
            Err(Error::TokenOutOfRange { id: 99, vocab: 17 })
        ));
        let long = vec![1u32; 13];
        assert!(matches!(
            m.logprob_rows(&long),
            Err(Error::ContextOverflow { len: 13, context: 12 })
        ));
        assert!(m.sequence_nll(&[1], None).is_err());
    }

    #[test]
    fn pad_targets_are_masked() {
        let m = model(4);
        // Targets are [1, 4, 0, 0]; with pad=0 only the first two count.
        let masked = m.sequence_nll(&[3, 1, 4, 0, 0], Some(0)).unwrap();
        let unmasked = m.sequence_nll(&[3, 1, 4, 0, 0], None).unwrap();
        assert!((masked - unmasked).abs() > 1e-9);
        let first_two = m.logprob_rows(&[3, 1, 4, 0, 0]).unwrap();
        let expect = -(first_two.get(0, 1) + first_two.get(1, 4)) / 2.0;
        assert!((masked - expect).abs() < 1e-12);
    }

    #[test]
    fn all_pad_targets_error() {
        let m = model(4);
        assert!(matches!(
            m.sequence_nll(&[3, 0], Some(0)),
            Err(Error::Train(_))
        ));
    }

    #[test]
    fn grad_check_base_model_tied_and_untied() {
        for tie in [true, false] {
            let mut c = config(5);
            c.tie_embeddings = tie;
            let mut am = AdaptedModel::new(ModelState::init(c).unwrap());
            let report = grad_check(&mut am, TOKENS, None, &GradCheckOptions::default()).unwrap();
            assert!(
                report.passed(),
                "tie={tie} max rel err {}",
                report.max_rel_err
            );
            let classes: Vec<&str> = report.classes.iter().map(|c| c.class.as_str()).collect();
            assert!(classes.contains(&"embeddings"));
            assert!(classes.contains(&"attention"));
            assert!(classes.contains(&"mlp"));
            assert!(classes.contains(&"layer_norms"));
        }
    }

    #[test]
    fn grad_check_covers_adapters() {
        let mut am = AdaptedModel::new(model(6));
        am.attach_lora(LoraConfig {
            rank: 2,
            alpha: 4.0,
            dropout: 0.3, // eval path ignores dropout; gradients must still match
            targets: vec![
                LoraTargetKind::Wq,
                LoraTargetKind::Wv,
                LoraTargetKind::MlpIn,
            ],
            seed: 7,
        })
        .unwrap();
        am.attach_soft_prompt(SoftPromptConfig {
            virtual_tokens: 3,
            init: SoftPromptInit::Normal,
            seed: 8,
        })
        .unwrap();
        // Give B non-zero values so its gradient path is exercised.
        let mut adapter = am.detach_lora().unwrap();
        for ts in &mut adapter.layers {
            for t in ts.iter_mut() {
                for v in t.b.as_mut_slice() {
                    *v = 0.01;
                }
            }
        }
        am.attach_lora_state(adapter).unwrap();

        let report = grad_check(&mut am, TOKENS, None, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(report.classes.iter().any(|c| c.class == "adapters"));
    }

    #[test]
    fn corrupted_gradient_fails_the_check() {
        let mut am = AdaptedModel::new(model(10));
        let report = grad_check_inner(
            &mut am,
            TOKENS,
            None,
            &GradCheckOptions {
                per_class: 400, // dense enough to hit the corrupted tensor
                ..GradCheckOptions::default()
            },
            Some("tok_emb"),
        )
        .unwrap();
        assert!(!report.passed(), "corruption went unnoticed");
        assert!(report.max_rel_err > 0.5);
    }

    #[test]
    fn merged_lora_matches_adapter_forward() {
        let base = model(11);
        let mut am = AdaptedModel::new(base.clone());
        am.attach_lora(LoraConfig {
            rank: 3,
            alpha: 6.0,
            dropout: 0.0,
            targets: vec![LoraTargetKind::Wq, LoraTargetKind::Wv, LoraTargetKind::MlpOut],
            seed: 12,
        })
        .unwrap();
        let mut adapter = am.detach_lora().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for ts in &mut adapter.layers {
            for t in ts.iter_mut() {
                for v in t.b.as_mut_slice() {
                    *v = f64::sample_normal(&mut rng, 0.05);
                }
            }
        }
        am.attach_lora_state(adapter).unwrap();

        let with_adapter = am.logprob_rows(TOKENS).unwrap();
        let mut merged = am.clone();
        merged.merge_lora().unwrap();
        assert!(!merged.has_adapter());
        let after = merged.logprob_rows(TOKENS).unwrap();
        for i in 0..with_adapter.rows() {
            for j in 0..with_adapter.cols() {
                let d = (with_adapter.get(i, j) - after.get(i, j)).abs();
                assert!(d < 1e-10, "({i},{j}) differs by {d}");
            }
        }
    }

    #[test]
    fn soft_prompt_shifts_positions_and_changes_loss() {
        let base = model(14);
        let plain = AdaptedModel::new(base.clone());
        let plain_rows = plain.logprob_rows(TOKENS).unwrap();
        let plain_loss: f64 = plain.sequence_nll(TOKENS, None).unwrap();

        let mut am = AdaptedModel::new(base);
        am.attach_soft_prompt(SoftPromptConfig {
            virtual_tokens: 4,
            init: SoftPromptInit::Normal,
            seed: 15,
        })
        .unwrap();
        let rows = am.logprob_rows(TOKENS).unwrap();
        assert_eq!(rows.rows(), TOKENS.len());
        let loss: f64 = am.sequence_nll(TOKENS, None).unwrap();
        assert!((loss - plain_loss).abs() > 1e-9);
        assert!((rows.get(0, 0) - plain_rows.get(0, 0)).abs() > 1e-12);
        // Context shrinks by the prompt length.
        assert!(matches!(
            am.logprob_rows(&[1u32; 9]),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn dropout_only_active_in_train_mode() {
        let mut am = AdaptedModel::new(model(16));
        am.attach_lora(LoraConfig {
            rank: 2,
            alpha: 4.0,
            dropout: 0.5,
            targets: vec![LoraTargetKind::Wq, LoraTargetKind::Wv],
            seed: 17,
        })
        .unwrap();
        let mut adapter = am.detach_lora().unwrap();
        for ts in &mut adapter.layers {
            for t in ts.iter_mut() {
                t.b.fill(0.05);
            }
        }
        am.attach_lora_state(adapter).unwrap();

        let eval1: f64 = am.sequence_nll(TOKENS, None).unwrap();
        let eval2: f64 = am.sequence_nll(TOKENS, None).unwrap();
        assert_eq!(eval1.to_bits(), eval2.to_bits());

        let mut r1 = ChaCha8Rng::seed_from_u64(100);
        let mut r2 = ChaCha8Rng::seed_from_u64(100);
        let mut r3 = ChaCha8Rng::seed_from_u64(101);
        let (l1, _) = am.loss_and_grads(TOKENS, None, Some(&mut r1)).unwrap();
        let (l2, _) = am.loss_and_grads(TOKENS, None, Some(&mut r2)).unwrap();
        let (l3, _) = am.loss_and_grads(TOKENS, None, Some(&mut r3)).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits(), "same rng stream must agree");
        assert!((l1 - l3).abs() > 0.0, "different masks should move the loss");
        assert!((l1 - eval1).abs() > 0.0);
    }

    #[test]
    fn zero_init_adapter_is_bitwise_transparent() {
        let base = model(18);
        let plain = AdaptedModel::new(base.clone());
        let before = plain.logprob_rows(TOKENS).unwrap();
        let mut am = AdaptedModel::new(base);
        am.attach_lora(LoraConfig {
            rank: 4,
            alpha: 8.0,
            dropout: 0.1,
            targets: LoraTargetKind::ALL.to_vec(),
            seed: 19,
        })
        .unwrap();
        let after = am.logprob_rows(TOKENS).unwrap();
        for i in 0..before.rows() {
            for j in 0..before.cols() {
                assert_eq!(before.get(i, j).to_bits(), after.get(i, j).to_bits());
            }
        }
    }

    #[test]
    fn f32_and_f64_forward_agree_loosely() {
        let mut c64 = config(20);
        c64.precision = Precision::F64;
        let mut c32 = config(20);
        c32.precision = Precision::F32;
        let m64: ModelState<f64> = ModelState::init(c64).unwrap();
        let m32: ModelState<f32> = ModelState::init(c32).unwrap();
        let l64 = m64.logprob_rows(TOKENS).unwrap();
        let l32 = m32.logprob_rows(TOKENS).unwrap();
        for i in 0..l64.rows() {
            for j in 0..l64.cols() {
                let d = (l64.get(i, j) - l32.get(i, j) as f64).abs();
                assert!(d < 1e-3, "({i},{j}) differs by {d}");
            }
        }
    }
}
