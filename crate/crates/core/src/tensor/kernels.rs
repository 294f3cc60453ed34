//! Raw slice kernels behind the tape ops. Shapes are validated by the caller.

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Accumulates `g · bᵀ` into `ga` and `aᵀ · g` into `gb`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ga: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    if let Some(ga) = ga {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
    if let Some(gb) = gb {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Splits a shape around `axis` into (outer, axis length, inner) strides.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| o * len * inner + t * inner + i;
            let max = (0..len).map(|t| x[at(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for t in 0..len {
                let e = (x[at(t)] - max).exp();
                out[at(t)] = e;
                sum += e;
            }
            for t in 0..len {
                out[at(t)] /= sum;
            }
        }
    }
    out
}

pub fn softmax_backward(y: &[f64], g: &[f64], shape: &[usize], axis: usize, gx: &mut [f64]) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| o * len * inner + t * inner + i;
            let dot: f64 = (0..len).map(|t| g[at(t)] * y[at(t)]).sum();
            for t in 0..len {
                gx[at(t)] += y[at(t)] * (g[at(t)] - dot);
            }
        }
    }
}

/// Layer norm over the last axis; returns (output, normalized input, reciprocal std per row).
pub fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    n: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / n;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..n {
            let h = (row[j] - mean) * rs;
            xhat[r * n + j] = h;
            out[r * n + j] = h * gain[j] + bias[j];
        }
    }
    (out, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    g: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    n: usize,
    gx: Option<&mut [f64]>,
    ggain: Option<&mut [f64]>,
    gbias: Option<&mut [f64]>,
) {
    let rows = rstd.len();
    if let Some(ggain) = ggain {
        for r in 0..rows {
            for j in 0..n {
                ggain[j] += g[r * n + j] * xhat[r * n + j];
            }
        }
    }
    if let Some(gbias) = gbias {
        for r in 0..rows {
            for j in 0..n {
                gbias[j] += g[r * n + j];
            }
        }
    }
    if let Some(gx) = gx {
        let nf = n as f64;
        for r in 0..rows {
            let gh: Vec<f64> = (0..n).map(|j| g[r * n + j] * gain[j]).collect();
            let sum_gh: f64 = gh.iter().sum();
            let sum_ghx: f64 = (0..n).map(|j| gh[j] * xhat[r * n + j]).sum();
            for j in 0..n {
                gx[r * n + j] +=
                    rstd[r] / nf * (nf * gh[j] - sum_gh - xhat[r * n + j] * sum_ghx);
            }
        }
    }
}

/// Max pooling over axis 0 of a `[len × channels]` array with `-inf` padding.
/// Returns the pooled values and, per output element, the flat input index of its maximum.
pub fn maxpool1d(
    x: &[f64],
    len: usize,
    channels: usize,
    out_len: usize,
    k: usize,
    s: usize,
    p: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![f64::NEG_INFINITY; out_len * channels];
    let mut arg = vec![usize::MAX; out_len * channels];
    for o in 0..out_len {
        for t in 0..k {
            let pos = (o * s + t) as isize - p as isize;
            if pos < 0 || pos as usize >= len {
                continue;
            }
            let pos = pos as usize;
            for c in 0..channels {
                let v = x[pos * channels + c];
                // strict comparison keeps the first maximum on ties
                if v > out[o * channels + c] {
                    out[o * channels + c] = v;
                    arg[o * channels + c] = pos * channels + c;
                }
            }
        }
    }
    (out, arg)
}

pub struct Conv1dGeom {
    pub len: usize,
    pub cin: usize,
    pub cout: usize,
    pub out_len: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl Conv1dGeom {
    fn input_pos(&self, o: usize, t: usize) -> Option<usize> {
        let pos = (o * self.s + t) as isize - self.p as isize;
        (pos >= 0 && (pos as usize) < self.len).then_some(pos as usize)
    }
}

/// `x: [len × cin]`, `w: [cout × cin × k]`, `b: [cout]` → `[out_len × cout]`.
pub fn conv1d(x: &[f64], w: &[f64], b: &[f64], geo: &Conv1dGeom) -> Vec<f64> {
    let Conv1dGeom {
        cin, cout, out_len, k, ..
    } = *geo;
    let mut out = vec![0.0; out_len * cout];
    for o in 0..out_len {
        for co in 0..cout {
            let mut acc = b[co];
            for t in 0..k {
                if let Some(pos) = geo.input_pos(o, t) {
                    for ci in 0..cin {
                        acc += w[(co * cin + ci) * k + t] * x[pos * cin + ci];
                    }
                }
            }
            out[o * cout + co] = acc;
        }
    }
    out
}

pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    geo: &Conv1dGeom,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let Conv1dGeom {
        cin, cout, out_len, k, ..
    } = *geo;
    if let Some(gb) = gb {
        for o in 0..out_len {
            for co in 0..cout {
                gb[co] += g[o * cout + co];
            }
        }
    }
    for o in 0..out_len {
        for co in 0..cout {
            let go = g[o * cout + co];
            if go == 0.0 {
                continue;
            }
            for t in 0..k {
                if let Some(pos) = geo.input_pos(o, t) {
                    for ci in 0..cin {
                        let wi = (co * cin + ci) * k + t;
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[pos * cin + ci] += go * w[wi];
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[wi] += go * x[pos * cin + ci];
                        }
                    }
                }
            }
        }
    }
}

pub struct Conv2dGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl Conv2dGeom {
    fn offset(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let pos = (o * self.s + t) as isize - self.p as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    fn taps(&self, oh: usize, ow: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.k).flat_map(move |kh| {
            (0..self.k).filter_map(move |kw| {
                let ih = self.offset(oh, kh, self.h)?;
                let iw = self.offset(ow, kw, self.w)?;
                Some((kh * self.k + kw, ih, iw))
            })
        })
    }
}

/// `x: [h × w × cin]`, `w: [cout × cin × k × k]`, `b: [cout]` → `[out_h × out_w × cout]`.
pub fn conv2d(x: &[f64], wt: &[f64], b: &[f64], geo: &Conv2dGeom) -> Vec<f64> {
    let (cin, cout, kk) = (geo.cin, geo.cout, geo.k * geo.k);
    let mut out = vec![0.0; geo.out_h * geo.out_w * cout];
    for oh in 0..geo.out_h {
        for ow in 0..geo.out_w {
            let base = (oh * geo.out_w + ow) * cout;
            out[base..base + cout].copy_from_slice(b);
            for (tap, ih, iw) in geo.taps(oh, ow) {
                let xin = &x[(ih * geo.w + iw) * cin..(ih * geo.w + iw + 1) * cin];
                for co in 0..cout {
                    let mut acc = 0.0;
                    for (ci, xv) in xin.iter().enumerate() {
                        acc += wt[(co * cin + ci) * kk + tap] * xv;
                    }
                    out[base + co] += acc;
                }
            }
        }
    }
    out
}

pub fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    g: &[f64],
    geo: &Conv2dGeom,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (cin, cout, kk) = (geo.cin, geo.cout, geo.k * geo.k);
    if let Some(gb) = gb {
        for (i, gv) in g.iter().enumerate() {
            gb[i % cout] += gv;
        }
    }
    for oh in 0..geo.out_h {
        for ow in 0..geo.out_w {
            let base = (oh * geo.out_w + ow) * cout;
            for (tap, ih, iw) in geo.taps(oh, ow) {
                let xbase = (ih * geo.w + iw) * cin;
                for co in 0..cout {
                    let go = g[base + co];
                    if go == 0.0 {
                        continue;
                    }
                    for ci in 0..cin {
                        let wi = (co * cin + ci) * kk + tap;
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[xbase + ci] += go * wt[wi];
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[wi] += go * x[xbase + ci];
                        }
                    }
                }
            }
        }
    }
}

/// For each flat input index, the flat output index after reducing `axes` away.
pub fn reduce_index_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut o = 0;
        for (ax, &i) in idx.iter().enumerate() {
            if !axes.contains(&ax) {
                o = o * shape[ax] + i;
            }
        }
        map.push(o);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (map, out_shape)
}

/// Mean label-smoothed cross entropy over rows of `[batch × classes]` logits.
/// Returns (loss, row-wise probabilities).
pub fn cross_entropy(
    logits: &[f64],
    classes: usize,
    targets: &[usize],
    smoothing: f64,
) -> (f64, Vec<f64>) {
    let batch = targets.len();
    let probs = softmax(logits, &[batch, classes], 1);
    let off = smoothing / classes as f64;
    let on = 1.0 - smoothing + off;
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (c, v) in row.iter().enumerate() {
            let q = if c == t { on } else { off };
            loss -= q * (v - lse);
        }
    }
    (loss / batch as f64, probs)
}

pub fn smoothed_target(class: usize, target: usize, classes: usize, smoothing: f64) -> f64 {
    let off = smoothing / classes as f64;
    if class == target {
        1.0 - smoothing + off
    } else {
        off
    }
}
