//! Plain-loop f64 reference implementations, deliberately independent of the
//! tape operations. Verification suites compare graph execution against
//! these; nothing here is used on any training path.

use crate::blocks::{BlockP, FfnP, LinearP, LN_EPS};
use crate::model::{sincos_pos_embed, time_embedding, ModelConfig, ModelLayout, MAX_PERIOD};
use crate::numerics::SeededRng;
use crate::params::ParamSet;
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, IxDyn};

pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: Option<&Array1<f64>>) -> Array2<f64> {
    let mut y = x.dot(w);
    if let Some(b) = b {
        y += b;
    }
    y
}

pub fn layer_norm_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Independent 2D rotary rotation: first half of the head dim turns by the
/// row angle, second half by the column angle, pairs split at Dh/4.
pub fn rope_rows(x: &mut Array2<f64>, grid_w: usize) {
    let dh = x.ncols();
    let (half, quarter) = (dh / 2, dh / 4);
    for (tok, mut row) in x.rows_mut().into_iter().enumerate() {
        let (pr, pc) = ((tok / grid_w) as f64, (tok % grid_w) as f64);
        for k in 0..quarter {
            let freq = MAX_PERIOD.powf(-2.0 * k as f64 / half as f64);
            for (base, pos) in [(0, pr), (half, pc)] {
                let (i, j) = (base + k, base + k + quarter);
                let (a, b) = (row[i], row[j]);
                let (s, c) = (pos * freq).sin_cos();
                row[i] = a * c - b * s;
                row[j] = a * s + b * c;
            }
        }
    }
}

pub fn block_forward(
    x: &Array2<f64>,
    cond_row: ArrayView1<f64>,
    set: &ParamSet<f64>,
    bp: &BlockP,
    heads: usize,
    grid_w: usize,
    use_rope: bool,
) -> Array2<f64> {
    let mat = |p: &LinearP| set.value(p.w).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
    let bias = |p: &LinearP| {
        p.b.map(|id| set.value(id).clone().into_dimensionality::<ndarray::Ix1>().unwrap())
    };
    let wm = mat(&bp.modulation);
    let bm = bias(&bp.modulation).unwrap();
    let c = x.ncols();
    let m = cond_row.dot(&wm) + &bm;
    let take = |o: usize| m.slice(ndarray::s![o * c..(o + 1) * c]).to_owned();
    let (sh_a, sc_a, g_a) = (take(0), take(1), take(2));
    let (sh_f, sc_f, g_f) = (take(3), take(4), take(5));

    let modulate = |h: &Array2<f64>, sh: &Array1<f64>, sc: &Array1<f64>| {
        let mut out = h.clone();
        for mut row in out.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v * (1.0 + sc[i]) + sh[i];
            }
        }
        out
    };

    let hm = modulate(&layer_norm_rows(x), &sh_a, &sc_a);
    let q = hm.dot(&mat(&bp.wq));
    let k = hm.dot(&mat(&bp.wk));
    let v = hm.dot(&mat(&bp.wv));
    let dh = c / heads;
    let n = x.nrows();
    let mut ctx = Array2::<f64>::zeros((n, c));
    for h in 0..heads {
        let cols = ndarray::s![.., h * dh..(h + 1) * dh];
        let mut qh = q.slice(cols).to_owned();
        let mut kh = k.slice(cols).to_owned();
        let vh = v.slice(cols).to_owned();
        if use_rope {
            rope_rows(&mut qh, grid_w);
            rope_rows(&mut kh, grid_w);
        }
        let mut scores = qh.dot(&kh.t()) / (dh as f64).sqrt();
        softmax_rows(&mut scores);
        ctx.slice_mut(cols).assign(&scores.dot(&vh));
    }
    let att = ctx.dot(&mat(&bp.wo));
    let mut x1 = x.clone();
    for (mut row, arow) in x1.rows_mut().into_iter().zip(att.rows()) {
        for (i, v) in row.iter_mut().enumerate() {
            *v += g_a[i] * arow[i];
        }
    }

    let h2m = modulate(&layer_norm_rows(&x1), &sh_f, &sc_f);
    let ff = match &bp.ffn {
        FfnP::SwiGlu { gate, up, down } => {
            let g = h2m.dot(&mat(gate));
            let u = h2m.dot(&mat(up));
            let act = ndarray::Zip::from(&g)
                .and(&u)
                .map_collect(|&a, &b| a / (1.0 + (-a).exp()) * b);
            act.dot(&mat(down))
        }
        FfnP::Gelu { fc1, fc2 } => {
            let h = linear(&h2m, &mat(fc1), bias(fc1).as_ref());
            let act = h.mapv(|x| {
                0.5 * x
                    * (1.0
                        + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x))
                            .tanh())
            });
            linear(&act, &mat(fc2), bias(fc2).as_ref())
        }
    };
    let mut out = x1;
    for (mut row, frow) in out.rows_mut().into_iter().zip(ff.rows()) {
        for (i, v) in row.iter_mut().enumerate() {
            *v += g_f[i] * frow[i];
        }
    }
    out
}

/// Forward pass of the no-skip, no-downsampling stack by direct pixel
/// indexing and per-sample loops.
pub fn isotropic_forward(
    set: &ParamSet<f64>,
    layout: &ModelLayout,
    cfg: &ModelConfig,
    z: &Array4<f64>,
    t: &[f64],
    labels: &[Option<usize>],
) -> Array4<f64> {
    assert!(!cfg.use_skips && !cfg.use_downsampling, "reference is isotropic only");
    let mat = |p: &LinearP| set.value(p.w).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
    let bias = |p: &LinearP| {
        p.b.map(|id| set.value(id).clone().into_dimensionality::<ndarray::Ix1>().unwrap())
    };
    let b = z.shape()[0];
    let (g, p, cin, c) = (cfg.grid_size(), cfg.patch_size, cfg.input_channels, cfg.channels);
    let n = g * g;
    let k = p * p * cin;

    // Conditioning.
    let temb = time_embedding::<f64>(t).into_dimensionality::<ndarray::Ix2>().unwrap();
    let h = linear(&temb, &mat(&layout.time_fc1), bias(&layout.time_fc1).as_ref())
        .mapv(|x| x / (1.0 + (-x).exp()));
    let tfeat = linear(&h, &mat(&layout.time_fc2), bias(&layout.time_fc2).as_ref());
    let table = set
        .value(layout.class_table)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let mut cond = tfeat;
    for (bi, l) in labels.iter().enumerate() {
        let row = l.unwrap_or(cfg.num_classes);
        let mut crow = cond.row_mut(bi);
        crow += &table.row(row);
    }

    let mut out = Array4::<f64>::zeros((b, cin, cfg.input_size, cfg.input_size));
    for bi in 0..b {
        // Patchify by direct pixel indexing.
        let mut tokens = Array2::<f64>::zeros((n, k));
        for gr in 0..g {
            for gc in 0..g {
                for ci in 0..cin {
                    for dr in 0..p {
                        for dc in 0..p {
                            tokens[[gr * g + gc, ci * p * p + dr * p + dc]] =
                                z[[bi, ci, gr * p + dr, gc * p + dc]];
                        }
                    }
                }
            }
        }
        let mut x = linear(&tokens, &mat(&layout.patch_embed), bias(&layout.patch_embed).as_ref());
        if !cfg.use_rope {
            let pos = sincos_pos_embed::<f64>(g, g, c)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            x += &pos;
        }
        for bp in layout.enc.iter().chain(&layout.mid).chain(&layout.dec) {
            x = block_forward(&x, cond.row(bi), set, bp, cfg.heads, g, cfg.use_rope);
        }
        let wm = mat(&layout.final_mod);
        let bm = bias(&layout.final_mod).unwrap();
        let m = cond.row(bi).dot(&wm) + &bm;
        let hm = {
            let ln = layer_norm_rows(&x);
            let mut out = ln;
            for mut row in out.rows_mut() {
                for (i, v) in row.iter_mut().enumerate() {
                    *v = *v * (1.0 + m[c + i]) + m[i];
                }
            }
            out
        };
        let toks = linear(&hm, &mat(&layout.final_proj), bias(&layout.final_proj).as_ref());
        for gr in 0..g {
            for gc in 0..g {
                for ci in 0..cin {
                    for dr in 0..p {
                        for dc in 0..p {
                            out[[bi, ci, gr * p + dr, gc * p + dc]] =
                                toks[[gr * g + gc, ci * p * p + dr * p + dc]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Randomize the conditioning-dependent maps that are zero at init so
/// verification exercises the full network, not the identity shortcut.
pub fn randomize_conditioning(set: &mut ParamSet<f64>, rng: &mut SeededRng) {
    let mut targets: Vec<usize> = Vec::new();
    for i in 0..set.len() {
        let n = set.name(i);
        if n.contains(".adaln") || n.starts_with("final.") {
            targets.push(i);
        }
    }
    for i in targets {
        let shape = set.value_at(i).shape().to_vec();
        let mut a = ArrayD::zeros(IxDyn(&shape));
        rng.fill_normal(&mut a, 0.5);
        set.set_value_at(i, a).unwrap();
    }
}
