//! Backend A: a node-at-a-time interpreter with direct loops.

use std::collections::BTreeMap;

use super::params::key;
use super::{eval_metric, fail, Batch, Crash, Dataset, Engine, ExecutionTrace, Gradients, Meter, ParamStore, Phase, Targets, TensorValue};
use crate::graph::{infer_shapes, input_specs, LayerKind, LayerNode, LossKind, Model, OptimizerKind, TensorSpec};

pub(crate) struct Reference;

struct Plan<'a> {
    order: Vec<&'a LayerNode>,
    preds: BTreeMap<&'a str, Vec<&'a str>>,
    ins: BTreeMap<String, Vec<TensorSpec>>,
    outs: BTreeMap<String, TensorSpec>,
    sink: String,
}

fn plan(model: &Model) -> Result<Plan<'_>, Crash> {
    let outs = infer_shapes(model).map_err(|e| fail(Phase::Forward, e.to_string()))?;
    let ins = input_specs(model, &outs);
    let order = model
        .topo_order()
        .ok_or_else(|| fail(Phase::Forward, "graph is cyclic"))?
        .into_iter()
        .map(|id| &model.nodes[&id])
        .collect::<Vec<_>>();
    let preds = model.nodes.keys().map(|k| (k.as_str(), model.preds(k))).collect();
    let sink = model.sink().ok_or_else(|| fail(Phase::Forward, "model has no unique sink"))?.to_string();
    Ok(Plan {
        order,
        preds,
        ins,
        outs,
        sink,
    })
}

enum Cache {
    None,
    Norm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Argmax(Vec<usize>),
}

struct Pass {
    outputs: BTreeMap<String, Vec<f64>>,
    caches: BTreeMap<String, Cache>,
    /// Batch statistics per BatchNorm node (mean, biased variance).
    stats: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

fn bytes(spec: &TensorSpec, n: usize) -> u64 {
    n as u64 * spec.dtype.size_bytes()
}

/// (batch, channels, elements per channel) of an `[N, C, ...]` tensor.
fn channel_layout(spec: &TensorSpec) -> (usize, usize, usize) {
    let n = spec.shape[0];
    let c = spec.shape[1];
    let inner: usize = spec.shape[2..].iter().product();
    (n, c, inner)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(x: &[f64], xs: &TensorSpec, w: &[f64], b: &[f64], node: &LayerNode, ys: &TensorSpec, m: &mut Meter) -> Vec<f64> {
    let (n, ic, h, wd) = (xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]);
    let (oc, oh, ow) = (ys.shape[1], ys.shape[2], ys.shape[3]);
    let k = node.int("kernel_size");
    let s = node.int("stride");
    let p = node.int("padding") as isize;
    let mut y = vec![0.0; ys.numel()];
    for bi in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ic {
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((bi * ic + c) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w[((o * ic + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    y[((bi * oc + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    m.count((2 * n * oc * oh * ow * ic * k * k) as u64);
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    xs: &TensorSpec,
    w: &[f64],
    node: &LayerNode,
    ys: &TensorSpec,
    g: &[f64],
    m: &mut Meter,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, ic, h, wd) = (xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]);
    let (oc, oh, ow) = (ys.shape[1], ys.shape[2], ys.shape[3]);
    let k = node.int("kernel_size");
    let s = node.int("stride");
    let p = node.int("padding") as isize;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; oc];
    for bi in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[((bi * oc + o) * oh + oy) * ow + ox];
                    db[o] += gv;
                    for c in 0..ic {
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((bi * ic + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * ic + c) * k + ky) * k + kx;
                                dw[wi] += x[xi] * gv;
                                dx[xi] += w[wi] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    m.count((4 * n * oc * oh * ow * ic * k * k) as u64);
    (dx, dw, db)
}

fn dense_forward(x: &[f64], n: usize, fin: usize, w: &[f64], b: &[f64], units: usize, m: &mut Meter) -> Vec<f64> {
    let mut y = vec![0.0; n * units];
    for i in 0..n {
        for u in 0..units {
            let mut acc = b[u];
            for j in 0..fin {
                acc += w[u * fin + j] * x[i * fin + j];
            }
            y[i * units + u] = acc;
        }
    }
    m.count((2 * n * units * fin) as u64);
    y
}

fn pool_window(node: &LayerNode) -> (usize, usize) {
    (node.int("kernel_size"), node.int("stride"))
}

fn pool_forward(x: &[f64], xs: &TensorSpec, ys: &TensorSpec, node: &LayerNode, m: &mut Meter) -> (Vec<f64>, Vec<usize>) {
    let (n, c, h, w) = (xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]);
    let (oh, ow) = (ys.shape[2], ys.shape[3]);
    let (k, s) = pool_window(node);
    let max = node.kind == LayerKind::MaxPool;
    let mut y = vec![0.0; ys.numel()];
    let mut arg = Vec::new();
    for bc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                let mut sum = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let xi = (bc * h + oy * s + ky) * w + ox * s + kx;
                        let v = x[xi];
                        sum += v;
                        if best_i == usize::MAX || v > best || (v.is_nan() && !best.is_nan()) {
                            best = v;
                            best_i = xi;
                        }
                    }
                }
                let yi = (bc * oh + oy) * ow + ox;
                if max {
                    y[yi] = best;
                    arg.push(best_i);
                } else {
                    y[yi] = sum / (k * k) as f64;
                }
            }
        }
    }
    m.count((n * c * oh * ow * k * k) as u64);
    (y, arg)
}

impl Reference {
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        model: &Model,
        plan: &Plan<'_>,
        params: &ParamStore,
        x: &TensorValue,
        train: bool,
        meter: &mut Meter,
    ) -> Result<Pass, Crash> {
        let dt = model.dtype();
        let mut pass = Pass {
            outputs: BTreeMap::new(),
            caches: BTreeMap::new(),
            stats: BTreeMap::new(),
        };
        for node in &plan.order {
            let id = node.id.as_str();
            let preds = &plan.preds[id];
            let inputs: Vec<&[f64]> = if preds.is_empty() {
                vec![&x.data]
            } else {
                preds.iter().map(|p| pass.outputs[*p].as_slice()).collect()
            };
            let xs = &plan.ins[id][0];
            let ys = &plan.outs[id];
            let xv = inputs[0];
            let mut cache = Cache::None;
            let mut y = match node.kind {
                LayerKind::Conv2d => conv_forward(xv, xs, params.get(id, "weight"), params.get(id, "bias"), node, ys, meter),
                LayerKind::Dense => {
                    let n = xs.shape[0];
                    dense_forward(xv, n, xs.sample_numel(), params.get(id, "weight"), params.get(id, "bias"), node.int("units"), meter)
                }
                LayerKind::BatchNorm => {
                    let (n, c, inner) = channel_layout(xs);
                    let gamma = params.get(id, "gamma");
                    let beta = params.get(id, "beta");
                    let eps = node.float("epsilon");
                    let count = (n * inner) as f64;
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    if train {
                        for ch in 0..c {
                            let mut s = 0.0;
                            for b in 0..n {
                                for i in 0..inner {
                                    s += xv[(b * c + ch) * inner + i];
                                }
                            }
                            mean[ch] = s / count;
                            let mut v = 0.0;
                            for b in 0..n {
                                for i in 0..inner {
                                    let d = xv[(b * c + ch) * inner + i] - mean[ch];
                                    v += d * d;
                                }
                            }
                            var[ch] = v / count;
                        }
                        pass.stats.insert(id.to_string(), (mean.clone(), var.clone()));
                    } else {
                        mean.copy_from_slice(params.get(id, "running_mean"));
                        var.copy_from_slice(params.get(id, "running_var"));
                    }
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    let mut xhat = vec![0.0; xv.len()];
                    let mut y = vec![0.0; xv.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            for i in 0..inner {
                                let j = (b * c + ch) * inner + i;
                                xhat[j] = (xv[j] - mean[ch]) * inv_std[ch];
                                y[j] = gamma[ch] * xhat[j] + beta[ch];
                            }
                        }
                    }
                    meter.count(5 * xv.len() as u64);
                    if train {
                        meter.alloc(bytes(xs, xhat.len()));
                        cache = Cache::Norm { xhat, inv_std };
                    }
                    y
                }
                LayerKind::ReLU => {
                    meter.count(xv.len() as u64);
                    xv.iter().map(|v| if *v > 0.0 { *v } else if v.is_nan() { *v } else { 0.0 }).collect()
                }
                LayerKind::Sigmoid => {
                    meter.count(4 * xv.len() as u64);
                    xv.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
                }
                LayerKind::MaxPool | LayerKind::AvgPool => {
                    let (y, arg) = pool_forward(xv, xs, ys, node, meter);
                    if train && node.kind == LayerKind::MaxPool {
                        meter.alloc(8 * arg.len() as u64);
                        cache = Cache::Argmax(arg);
                    }
                    y
                }
                LayerKind::Flatten | LayerKind::Identity => {
                    meter.count(xv.len() as u64);
                    xv.to_vec()
                }
                LayerKind::Add => {
                    let mut y = xv.to_vec();
                    for other in &inputs[1..] {
                        for (a, b) in y.iter_mut().zip(other.iter()) {
                            *a += b;
                        }
                    }
                    meter.count((y.len() * inputs.len()) as u64);
                    y
                }
                LayerKind::Concat => {
                    let n = ys.shape[0];
                    let mut y = Vec::with_capacity(ys.numel());
                    for b in 0..n {
                        for (inp, spec) in inputs.iter().zip(&plan.ins[id]) {
                            let per = spec.sample_numel();
                            y.extend_from_slice(&inp[b * per..(b + 1) * per]);
                        }
                    }
                    meter.count(y.len() as u64);
                    y
                }
            };
            for v in &mut y {
                *v = dt.round(*v);
            }
            meter.alloc(bytes(ys, y.len()));
            pass.outputs.insert(id.to_string(), y);
            pass.caches.insert(id.to_string(), cache);
        }
        Ok(pass)
    }

    fn backward(
        &self,
        plan: &Plan<'_>,
        params: &ParamStore,
        x: &TensorValue,
        pass: &Pass,
        dy: Vec<f64>,
        meter: &mut Meter,
    ) -> Gradients {
        let mut grads = Gradients::new();
        let mut gbuf: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        meter.alloc(8 * dy.len() as u64);
        gbuf.insert(plan.sink.as_str(), dy);
        for node in plan.order.iter().rev() {
            let id = node.id.as_str();
            let Some(g) = gbuf.remove(id) else { continue };
            let preds = &plan.preds[id];
            let xs = &plan.ins[id][0];
            let ys = &plan.outs[id];
            let xv: &[f64] = match preds.first() {
                Some(p) => &pass.outputs[*p],
                None => &x.data,
            };
            let y = &pass.outputs[id];
            let dxs: Vec<Vec<f64>> = match node.kind {
                LayerKind::Conv2d => {
                    let (dx, dw, db) = conv_backward(xv, xs, params.get(id, "weight"), node, ys, &g, meter);
                    grads.insert(key(id, "weight"), dw);
                    grads.insert(key(id, "bias"), db);
                    vec![dx]
                }
                LayerKind::Dense => {
                    let n = xs.shape[0];
                    let fin = xs.sample_numel();
                    let units = node.int("units");
                    let w = params.get(id, "weight");
                    let mut dw = vec![0.0; w.len()];
                    let mut db = vec![0.0; units];
                    let mut dx = vec![0.0; n * fin];
                    for i in 0..n {
                        for u in 0..units {
                            let gv = g[i * units + u];
                            db[u] += gv;
                            for j in 0..fin {
                                dw[u * fin + j] += gv * xv[i * fin + j];
                                dx[i * fin + j] += gv * w[u * fin + j];
                            }
                        }
                    }
                    meter.count((4 * n * units * fin) as u64);
                    grads.insert(key(id, "weight"), dw);
                    grads.insert(key(id, "bias"), db);
                    vec![dx]
                }
                LayerKind::BatchNorm => {
                    let (n, c, inner) = channel_layout(xs);
                    let Cache::Norm { xhat, inv_std } = &pass.caches[id] else {
                        unreachable!("batch norm backward needs training statistics")
                    };
                    let gamma = params.get(id, "gamma");
                    let count = (n * inner) as f64;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            for i in 0..inner {
                                let j = (b * c + ch) * inner + i;
                                dgamma[ch] += g[j] * xhat[j];
                                dbeta[ch] += g[j];
                            }
                        }
                    }
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            for i in 0..inner {
                                let j = (b * c + ch) * inner + i;
                                let dxhat = g[j] * gamma[ch];
                                dx[j] = inv_std[ch] / count
                                    * (count * dxhat - gamma[ch] * dbeta[ch] - xhat[j] * gamma[ch] * dgamma[ch]);
                            }
                        }
                    }
                    meter.count(8 * g.len() as u64);
                    grads.insert(key(id, "gamma"), dgamma);
                    grads.insert(key(id, "beta"), dbeta);
                    vec![dx]
                }
                LayerKind::ReLU => {
                    meter.count(g.len() as u64);
                    vec![g.iter().zip(xv).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect()]
                }
                LayerKind::Sigmoid => {
                    meter.count(3 * g.len() as u64);
                    vec![g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect()]
                }
                LayerKind::MaxPool => {
                    let Cache::Argmax(arg) = &pass.caches[id] else {
                        unreachable!("max pool backward needs argmax")
                    };
                    let mut dx = vec![0.0; xv.len()];
                    for (gv, i) in g.iter().zip(arg) {
                        dx[*i] += gv;
                    }
                    meter.count(g.len() as u64);
                    vec![dx]
                }
                LayerKind::AvgPool => {
                    let (n, c, h, w) = (xs.shape[0], xs.shape[1], xs.shape[2], xs.shape[3]);
                    let (oh, ow) = (ys.shape[2], ys.shape[3]);
                    let (k, s) = pool_window(node);
                    let scale = 1.0 / (k * k) as f64;
                    let mut dx = vec![0.0; xv.len()];
                    for bc in 0..n * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(bc * oh + oy) * ow + ox] * scale;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        dx[(bc * h + oy * s + ky) * w + ox * s + kx] += gv;
                                    }
                                }
                            }
                        }
                    }
                    meter.count((n * c * oh * ow * k * k) as u64);
                    vec![dx]
                }
                LayerKind::Flatten | LayerKind::Identity => vec![g.clone()],
                LayerKind::Add => vec![g.clone(); preds.len().max(1)],
                LayerKind::Concat => {
                    let n = ys.shape[0];
                    let per_out = ys.sample_numel();
                    let mut parts: Vec<Vec<f64>> = plan.ins[id].iter().map(|s| Vec::with_capacity(s.numel())).collect();
                    for b in 0..n {
                        let mut off = b * per_out;
                        for (part, spec) in parts.iter_mut().zip(&plan.ins[id]) {
                            let per = spec.sample_numel();
                            part.extend_from_slice(&g[off..off + per]);
                            off += per;
                        }
                    }
                    parts
                }
            };
            meter.free(8 * g.len() as u64);
            for (p, dx) in preds.iter().zip(dxs) {
                match gbuf.get_mut(p) {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&dx) {
                            *a += d;
                        }
                    }
                    None => {
                        meter.alloc(8 * dx.len() as u64);
                        gbuf.insert(p, dx);
                    }
                }
            }
        }
        grads
    }
}

fn one_hot(classes: &[usize], width: usize) -> Vec<f64> {
    let mut t = vec![0.0; classes.len() * width];
    for (i, k) in classes.iter().enumerate() {
        if *k < width {
            t[i * width + k] = 1.0;
        }
    }
    t
}

/// Loss value and gradient w.r.t. the model output.
fn loss_and_grad(model: &Model, out: &[f64], spec: &TensorSpec, y: &Targets) -> Result<(f64, Vec<f64>), Crash> {
    let n = spec.batch();
    let width = spec.sample_numel();
    let mut grad = vec![0.0; out.len()];
    let mut total = 0.0;
    match model.loss.kind {
        LossKind::CrossEntropy => {
            let Targets::Classes(cls) = y else {
                return Err(fail(Phase::Loss, "cross-entropy needs class targets"));
            };
            let ls = model.loss.float("label_smoothing");
            for (i, &k) in cls.iter().enumerate() {
                if k >= width {
                    return Err(fail(Phase::Loss, format!("label {k} outside {width} logits")));
                }
                let row = &out[i * width..(i + 1) * width];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
                for j in 0..width {
                    let q = ls / width as f64 + if j == k { 1.0 - ls } else { 0.0 };
                    total += q * (lse - row[j]);
                    grad[i * width + j] = ((row[j] - lse).exp() - q) / n as f64;
                }
            }
            total /= n as f64;
        }
        LossKind::BinaryCrossEntropy => {
            let Targets::Classes(cls) = y else {
                return Err(fail(Phase::Loss, "binary cross-entropy needs class targets"));
            };
            let t = one_hot(cls, width);
            let m = out.len() as f64;
            for (j, (z, t)) in out.iter().zip(&t).enumerate() {
                total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                grad[j] = (1.0 / (1.0 + (-z).exp()) - t) / m;
            }
            total /= m;
        }
        LossKind::MeanSquaredError | LossKind::SmoothL1 => {
            let t = match y {
                Targets::Values(v) => v.clone(),
                Targets::Classes(c) => one_hot(c, width),
            };
            if t.len() != out.len() {
                return Err(fail(Phase::Loss, format!("{} targets for {} outputs", t.len(), out.len())));
            }
            let m = out.len() as f64;
            let beta = model.loss.float("beta");
            for (j, (o, t)) in out.iter().zip(&t).enumerate() {
                let d = o - t;
                if model.loss.kind == LossKind::MeanSquaredError {
                    total += d * d;
                    grad[j] = 2.0 * d / m;
                } else if d.abs() < beta {
                    total += 0.5 * d * d / beta;
                    grad[j] = d / beta / m;
                } else {
                    total += d.abs() - 0.5 * beta;
                    grad[j] = d.signum() / m;
                }
            }
            total /= m;
        }
    }
    Ok((total, grad))
}

/// Per-tensor optimizer state.
#[derive(Default)]
struct OptState {
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl OptState {
    fn slots(kind: OptimizerKind) -> usize {
        match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::MomentumSgd | OptimizerKind::RmsProp => 1,
            OptimizerKind::Adam => 2,
        }
    }

    fn new(model: &Model, params: &ParamStore, meter: &mut Meter) -> Self {
        let slots = Self::slots(model.optimizer.kind);
        let mut st = OptState::default();
        for (k, v) in &params.tensors {
            if slots >= 1 {
                st.first.insert(k.clone(), vec![0.0; v.len()]);
            }
            if slots >= 2 {
                st.second.insert(k.clone(), vec![0.0; v.len()]);
            }
            meter.alloc(8 * (slots * v.len()) as u64);
        }
        st
    }

    fn step(&mut self, model: &Model, params: &mut ParamStore, grads: &Gradients, meter: &mut Meter) {
        let o = &model.optimizer;
        let lr = o.learning_rate();
        let dt = model.dtype();
        self.t += 1;
        for (k, p) in params.tensors.iter_mut() {
            let Some(g) = grads.get(k) else { continue };
            match o.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.iter_mut().zip(g) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::MomentumSgd => {
                    let mu = o.float("momentum");
                    let v = self.first.get_mut(k).unwrap();
                    for ((w, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::RmsProp => {
                    let rho = o.float("rho");
                    let eps = o.float("epsilon");
                    let s = self.first.get_mut(k).unwrap();
                    for ((w, g), s) in p.iter_mut().zip(g).zip(s.iter_mut()) {
                        *s = rho * *s + (1.0 - rho) * g * g;
                        *w -= lr * g / (s.sqrt() + eps);
                    }
                }
                OptimizerKind::Adam => {
                    let b1 = o.float("beta1");
                    let b2 = o.float("beta2");
                    let eps = o.float("epsilon");
                    let c1 = 1.0 - b1.powi(self.t);
                    let c2 = 1.0 - b2.powi(self.t);
                    let m = self.first.get_mut(k).unwrap();
                    let v = self.second.get_mut(k).unwrap();
                    for (i, (w, g)) in p.iter_mut().zip(g).enumerate() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
            for w in p.iter_mut() {
                *w = dt.round(*w);
            }
            meter.count(4 * p.len() as u64);
        }
    }
}

fn to_values(plan: &Plan<'_>, pass: Pass) -> BTreeMap<String, TensorValue> {
    pass.outputs
        .into_iter()
        .map(|(id, data)| {
            let spec = plan.outs[&id].clone();
            (id, TensorValue::new(spec, data))
        })
        .collect()
}

fn free_pass(plan: &Plan<'_>, pass: &Pass, meter: &mut Meter) {
    for (id, v) in &pass.outputs {
        meter.free(bytes(&plan.outs[id], v.len()));
    }
    for (id, c) in &pass.caches {
        match c {
            Cache::Norm { xhat, .. } => meter.free(bytes(&plan.outs[id], xhat.len())),
            Cache::Argmax(a) => meter.free(8 * a.len() as u64),
            Cache::None => {}
        }
    }
}

fn update_running(model: &Model, params: &mut ParamStore, stats: &BTreeMap<String, (Vec<f64>, Vec<f64>)>) {
    for (id, (mean, var)) in stats {
        let mom = model.nodes[id].float("momentum");
        let dt = model.dtype();
        for (name, batch) in [("running_mean", mean), ("running_var", var)] {
            if let Some(r) = params.buffers.get_mut(&key(id, name)) {
                for (r, b) in r.iter_mut().zip(batch) {
                    *r = dt.round((1.0 - mom) * *r + mom * b);
                }
            }
        }
    }
}

impl Engine for Reference {
    fn forward(
        &self,
        model: &Model,
        params: &ParamStore,
        x: &TensorValue,
        meter: &mut Meter,
    ) -> Result<BTreeMap<String, TensorValue>, Crash> {
        let plan = plan(model)?;
        let pass = self.run(model, &plan, params, x, false, meter)?;
        Ok(to_values(&plan, pass))
    }

    fn gradients(&self, model: &Model, params: &ParamStore, batch: &Batch) -> Result<(f64, Gradients), Crash> {
        let plan = plan(model)?;
        let mut meter = Meter::default();
        let pass = self.run(model, &plan, params, &batch.x, true, &mut meter)?;
        let (loss, dy) = loss_and_grad(model, &pass.outputs[&plan.sink], &plan.outs[&plan.sink], &batch.y)?;
        let grads = self.backward(&plan, params, &batch.x, &pass, dy, &mut meter);
        Ok((loss, grads))
    }

    fn train(
        &self,
        model: &Model,
        mut params: ParamStore,
        data: &Dataset,
        steps: usize,
        trace: &mut ExecutionTrace,
    ) -> Result<ParamStore, Crash> {
        let plan = plan(model)?;
        let mut meter = Meter::default();
        let dsize = model.dtype().size_bytes();
        meter.alloc(dsize * params.numel() as u64);
        let mut opt = OptState::new(model, &params, &mut meter);
        let mut last = None;
        for step in 0..steps {
            let batch = data.batch(step);
            meter.alloc(dsize * batch.x.numel() as u64);
            let pass = self.run(model, &plan, &params, &batch.x, true, &mut meter)?;
            let (loss, dy) = loss_and_grad(model, &pass.outputs[&plan.sink], &plan.outs[&plan.sink], &batch.y)?;
            let grads = self.backward(&plan, &params, &batch.x, &pass, dy, &mut meter);
            let grad_bytes: u64 = grads.values().map(|g| 8 * g.len() as u64).sum();
            meter.alloc(grad_bytes);
            opt.step(model, &mut params, &grads, &mut meter);
            update_running(model, &mut params, &pass.stats);
            trace.loss_series.push(loss);
            trace.step_times.push(meter.take_ms());
            trace.mem_series.push(meter.take_peak());
            trace.gradient_summary = grads
                .iter()
                .map(|(k, g)| (k.clone(), g.iter().fold(0.0f64, |m, v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) })))
                .collect();
            free_pass(&plan, &pass, &mut meter);
            meter.free(grad_bytes + dsize * batch.x.numel() as u64);
            last = Some(pass);
        }
        if let Some(pass) = last {
            trace.per_layer_outputs = to_values(&plan, pass);
        }
        Ok(params)
    }

    fn infer(&self, model: &Model, params: &ParamStore, data: &Dataset, trace: &mut ExecutionTrace) -> Result<(), Crash> {
        let plan = plan(model)?;
        let mut meter = Meter::default();
        let dsize = model.dtype().size_bytes();
        meter.alloc(dsize * params.numel() as u64);
        let mut finals = Vec::with_capacity(data.eval.len());
        for (i, batch) in data.eval.iter().enumerate() {
            let pass = self
                .run(model, &plan, params, &batch.x, false, &mut meter)
                .map_err(|c| fail(Phase::Inference, c.message))?;
            trace.step_times.push(meter.take_ms());
            trace.mem_series.push(meter.take_peak());
            free_pass(&plan, &pass, &mut meter);
            finals.push(TensorValue::new(plan.outs[&plan.sink].clone(), pass.outputs[&plan.sink].clone()));
            if i == 0 {
                trace.per_layer_outputs = to_values(&plan, pass);
            }
        }
        trace.eval_metric = Some(eval_metric(model.task(), &finals, &data.eval));
        Ok(())
    }
}
