//! Backend B: the graph is lowered to a flat instruction program over numbered
//! buffers. Convolutions run as im2col + GEMM, dense layers multiply against a
//! transposed weight held in a single parameter arena, pooling gathers through
//! precomputed index tables, and inference recycles buffers once their last
//! reader has executed. Armed faults are applied here and nowhere else.

use std::collections::BTreeMap;
use std::ops::Range;

use super::faults::{FaultEffect, EPSILON_FACTOR, NAN_INPUT_THRESHOLD, SLOWDOWN_MIN_DEPTH};
use super::params::key;
use super::{eval_metric, fail, Batch, Crash, Dataset, Engine, ExecutionTrace, FaultSet, Gradients, Meter, ParamStore, Phase, Targets, TensorValue};
use crate::graph::{infer_shapes, input_specs, DType, LayerKind, LossKind, Model, OptimizerKind, TensorSpec};

pub(crate) struct Lowered<'f> {
    pub faults: &'f FaultSet,
}

enum Op {
    Conv {
        ic: usize,
        h: usize,
        w: usize,
        oc: usize,
        oh: usize,
        ow: usize,
        k: usize,
        s: usize,
        p: usize,
        weight: Range<usize>,
        bias: Range<usize>,
    },
    /// `y = x · Wt + b` with `Wt` stored `[fin, units]`.
    Gemm {
        fin: usize,
        units: usize,
        weight_t: Range<usize>,
        bias: Range<usize>,
    },
    Norm {
        c: usize,
        inner: usize,
        gamma: Range<usize>,
        beta: Range<usize>,
        eps: f64,
        momentum: f64,
    },
    Relu,
    Sigmoid,
    Copy,
    /// Per-plane gather table: `kk` input offsets for each output position.
    Pool {
        max: bool,
        planes: usize,
        plane_in: usize,
        table: Vec<usize>,
        kk: usize,
    },
    Sum,
    /// Per-sample extents of the joined inputs.
    Join {
        parts: Vec<usize>,
    },
}

struct Instr {
    node: String,
    op: Op,
    /// Buffer ids read; `INPUT` is the model input.
    srcs: Vec<usize>,
    batch: usize,
    len: usize,
}

const INPUT: usize = usize::MAX;

struct Program {
    instrs: Vec<Instr>,
    /// Element count of every node's output buffer, by node id.
    out_specs: BTreeMap<String, TensorSpec>,
    /// Arena layout: param key -> range, plus (fin, units) for transposed dense weights.
    layout: BTreeMap<String, (Range<usize>, Option<(usize, usize)>)>,
    arena_len: usize,
    sink: usize,
    dtype: DType,
    slowdown: bool,
}

struct ArenaBuilder {
    layout: BTreeMap<String, (Range<usize>, Option<(usize, usize)>)>,
    len: usize,
}

impl ArenaBuilder {
    fn reserve(&mut self, k: String, n: usize, transposed: Option<(usize, usize)>) -> Range<usize> {
        let r = self.len..self.len + n;
        self.len += n;
        self.layout.insert(k, (r.clone(), transposed));
        r
    }
}

impl Lowered<'_> {
    fn armed(&self, e: FaultEffect) -> bool {
        self.faults.is_armed(e)
    }

    fn lower(&self, model: &Model, phase: Phase) -> Result<Program, Crash> {
        let outs = infer_shapes(model).map_err(|e| fail(phase, e.to_string()))?;
        let ins = input_specs(model, &outs);
        let order = model.topo_order().ok_or_else(|| fail(phase, "graph is cyclic"))?;
        let index: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut arena = ArenaBuilder {
            layout: BTreeMap::new(),
            len: 0,
        };
        let mut instrs = Vec::with_capacity(order.len());
        for id in &order {
            let node = &model.nodes[id];
            let x = &ins[id][0];
            let y = &outs[id];
            let srcs: Vec<usize> = {
                let p = model.preds(id);
                if p.is_empty() {
                    vec![INPUT]
                } else {
                    p.iter().map(|p| index[p]).collect()
                }
            };
            let op = match node.kind {
                LayerKind::Conv2d => {
                    let k = node.int("kernel_size");
                    if self.armed(FaultEffect::CrashOnKernelGtInput) && (k > x.shape[2] || k > x.shape[3]) {
                        return Err(fail(
                            phase,
                            format!("conv `{id}`: kernel {k} exceeds input extent {}x{}", x.shape[2], x.shape[3]),
                        ));
                    }
                    let (ic, oc) = (x.shape[1], y.shape[1]);
                    Op::Conv {
                        ic,
                        h: x.shape[2],
                        w: x.shape[3],
                        oc,
                        oh: y.shape[2],
                        ow: y.shape[3],
                        k,
                        s: node.int("stride"),
                        p: node.int("padding"),
                        weight: arena.reserve(key(id, "weight"), oc * ic * k * k, None),
                        bias: arena.reserve(key(id, "bias"), oc, None),
                    }
                }
                LayerKind::Dense => {
                    let fin = x.sample_numel();
                    let units = y.shape[1];
                    Op::Gemm {
                        fin,
                        units,
                        weight_t: arena.reserve(key(id, "weight"), fin * units, Some((fin, units))),
                        bias: arena.reserve(key(id, "bias"), units, None),
                    }
                }
                LayerKind::BatchNorm => {
                    let c = x.shape[1];
                    let mut eps = node.float("epsilon");
                    if self.armed(FaultEffect::WrongEpsilonInNorm) {
                        eps *= EPSILON_FACTOR;
                    }
                    Op::Norm {
                        c,
                        inner: x.shape[2..].iter().product(),
                        gamma: arena.reserve(key(id, "gamma"), c, None),
                        beta: arena.reserve(key(id, "beta"), c, None),
                        eps,
                        momentum: node.float("momentum"),
                    }
                }
                LayerKind::ReLU => Op::Relu,
                LayerKind::Sigmoid => Op::Sigmoid,
                LayerKind::Flatten | LayerKind::Identity => Op::Copy,
                LayerKind::MaxPool | LayerKind::AvgPool => {
                    let (k, s) = (node.int("kernel_size"), node.int("stride"));
                    let (h, w) = (x.shape[2], x.shape[3]);
                    let (oh, ow) = (y.shape[2], y.shape[3]);
                    let mut table = Vec::with_capacity(oh * ow * k * k);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ky in 0..k {
                                for kx in 0..k {
                                    table.push((oy * s + ky) * w + ox * s + kx);
                                }
                            }
                        }
                    }
                    Op::Pool {
                        max: node.kind == LayerKind::MaxPool,
                        planes: x.shape[0] * x.shape[1],
                        plane_in: h * w,
                        table,
                        kk: k * k,
                    }
                }
                LayerKind::Add => Op::Sum,
                LayerKind::Concat => Op::Join {
                    parts: ins[id].iter().map(|s| s.sample_numel()).collect(),
                },
            };
            instrs.push(Instr {
                node: id.clone(),
                op,
                srcs,
                batch: y.shape[0],
                len: y.numel(),
            });
        }
        let sink_id = model.sink().ok_or_else(|| fail(phase, "model has no unique sink"))?;
        Ok(Program {
            sink: index[sink_id],
            instrs,
            out_specs: outs,
            layout: arena.layout,
            arena_len: arena.len,
            dtype: model.dtype(),
            slowdown: self.armed(FaultEffect::QuadraticSlowdown) && model.metadata.depth >= SLOWDOWN_MIN_DEPTH,
        })
    }
}

impl Program {
    fn import(&self, params: &ParamStore) -> Vec<f64> {
        let mut arena = vec![0.0; self.arena_len];
        for (k, (r, t)) in &self.layout {
            let src = params.tensors.get(k).map(Vec::as_slice).unwrap_or(&[]);
            match t {
                None => arena[r.clone()].copy_from_slice(&src[..r.len()]),
                Some((fin, units)) => {
                    for u in 0..*units {
                        for j in 0..*fin {
                            arena[r.start + j * units + u] = src[u * fin + j];
                        }
                    }
                }
            }
        }
        arena
    }

    fn export(&self, arena: &[f64]) -> BTreeMap<String, Vec<f64>> {
        self.layout
            .iter()
            .map(|(k, (r, t))| {
                let v = match t {
                    None => arena[r.clone()].to_vec(),
                    Some((fin, units)) => {
                        let mut out = vec![0.0; r.len()];
                        for j in 0..*fin {
                            for u in 0..*units {
                                out[u * fin + j] = arena[r.start + j * units + u];
                            }
                        }
                        out
                    }
                };
                (k.clone(), v)
            })
            .collect()
    }

    /// Charge `ops` for instruction `i`, inflated under the slowdown fault.
    fn charge(&self, meter: &mut Meter, i: usize, ops: u64) {
        let factor = if self.slowdown { i as u64 + 1 } else { 1 };
        meter.count(ops * factor);
    }
}

/// Training-time saved state per instruction.
enum Saved {
    Nothing,
    Cols(Vec<f64>),
    Norm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Arg(Vec<usize>),
}

struct Run {
    bufs: Vec<Vec<f64>>,
    saved: Vec<Saved>,
    stats: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

fn im2col(x: &[f64], ic: usize, h: usize, w: usize, k: usize, s: usize, p: usize, oh: usize, ow: usize) -> Vec<f64> {
    let plane = oh * ow;
    let mut cols = vec![0.0; ic * k * k * plane];
    for c in 0..ic {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = ox * s + kx;
                        if ix < p || ix - p >= w {
                            continue;
                        }
                        cols[row * plane + oy * ow + ox] = x[(c * h + iy - p) * w + ix - p];
                    }
                }
            }
        }
    }
    cols
}

impl Lowered<'_> {
    /// Executes the program. With `train`, keeps every buffer and saves
    /// backward state; otherwise recycles buffers after their last reader.
    fn execute(
        &self,
        prog: &Program,
        arena: &[f64],
        running: &ParamStore,
        x: &TensorValue,
        train: bool,
        meter: &mut Meter,
        mut record: Option<&mut BTreeMap<String, TensorValue>>,
    ) -> Result<Run, Crash> {
        let n_instr = prog.instrs.len();
        let mut last_use = vec![0usize; n_instr];
        for (i, ins) in prog.instrs.iter().enumerate() {
            for &s in &ins.srcs {
                if s != INPUT {
                    last_use[s] = i;
                }
            }
        }
        last_use[prog.sink] = usize::MAX;
        let dsize = prog.dtype.size_bytes();
        let mut bufs: Vec<Vec<f64>> = vec![Vec::new(); n_instr];
        let mut pool: Vec<Vec<f64>> = Vec::new();
        let mut saved: Vec<Saved> = Vec::with_capacity(n_instr);
        let mut stats = BTreeMap::new();
        let nan_fault = self.armed(FaultEffect::NanOnExtremeInput);
        for (i, ins) in prog.instrs.iter().enumerate() {
            let mut out = match pool.iter().position(|b| b.capacity() >= ins.len) {
                Some(j) if !train => {
                    let mut b = pool.swap_remove(j);
                    b.clear();
                    b.resize(ins.len, 0.0);
                    b
                }
                _ => {
                    meter.alloc(dsize * ins.len as u64);
                    vec![0.0; ins.len]
                }
            };
            let src = |j: usize| -> &[f64] {
                if ins.srcs[j] == INPUT {
                    &x.data
                } else {
                    &bufs[ins.srcs[j]]
                }
            };
            let xv = src(0);
            let n = ins.batch;
            let mut keep = Saved::Nothing;
            match &ins.op {
                Op::Conv {
                    ic,
                    h,
                    w,
                    oc,
                    oh,
                    ow,
                    k,
                    s,
                    p,
                    weight,
                    bias,
                } => {
                    let plane = oh * ow;
                    let rows = ic * k * k;
                    let wt = &arena[weight.clone()];
                    let b = &arena[bias.clone()];
                    let mut all_cols = Vec::new();
                    for bi in 0..n {
                        let cols = im2col(&xv[bi * ic * h * w..(bi + 1) * ic * h * w], *ic, *h, *w, *k, *s, *p, *oh, *ow);
                        let y = &mut out[bi * oc * plane..(bi + 1) * oc * plane];
                        for o in 0..*oc {
                            let yrow = &mut y[o * plane..(o + 1) * plane];
                            for r in 0..rows {
                                let wv = wt[o * rows + r];
                                let crow = &cols[r * plane..(r + 1) * plane];
                                for (yv, cv) in yrow.iter_mut().zip(crow) {
                                    *yv += wv * cv;
                                }
                            }
                            for yv in yrow.iter_mut() {
                                *yv += b[o];
                            }
                        }
                        if train {
                            all_cols.extend_from_slice(&cols);
                        }
                    }
                    prog.charge(meter, i, (n * rows * plane + 2 * n * oc * rows * plane + n * oc * plane) as u64);
                    if train {
                        meter.alloc(8 * all_cols.len() as u64);
                        keep = Saved::Cols(all_cols);
                    }
                }
                Op::Gemm {
                    fin,
                    units,
                    weight_t,
                    bias,
                } => {
                    let wt = &arena[weight_t.clone()];
                    let b = &arena[bias.clone()];
                    for bi in 0..n {
                        let y = &mut out[bi * units..(bi + 1) * units];
                        y.copy_from_slice(b);
                        for j in 0..*fin {
                            let xvj = xv[bi * fin + j];
                            let wrow = &wt[j * units..(j + 1) * units];
                            for (yv, wv) in y.iter_mut().zip(wrow) {
                                *yv += xvj * wv;
                            }
                        }
                    }
                    prog.charge(meter, i, (2 * n * fin * units + n * units) as u64);
                }
                Op::Norm {
                    c,
                    inner,
                    gamma,
                    beta,
                    eps,
                    ..
                } => {
                    let g = &arena[gamma.clone()];
                    let be = &arena[beta.clone()];
                    let (mean, var) = if train {
                        // Welford accumulation per channel.
                        let mut mean = vec![0.0; *c];
                        let mut m2 = vec![0.0; *c];
                        for ch in 0..*c {
                            let mut cnt = 0.0;
                            for bi in 0..n {
                                let base = (bi * c + ch) * inner;
                                for v in &xv[base..base + inner] {
                                    cnt += 1.0;
                                    let d = v - mean[ch];
                                    mean[ch] += d / cnt;
                                    m2[ch] += d * (v - mean[ch]);
                                }
                            }
                            m2[ch] /= cnt;
                        }
                        stats.insert(ins.node.clone(), (mean.clone(), m2.clone()));
                        (mean, m2)
                    } else {
                        (
                            running.get(&ins.node, "running_mean").to_vec(),
                            running.get(&ins.node, "running_var").to_vec(),
                        )
                    };
                    let inv_std: Vec<f64> = var.iter().map(|v| (v + eps).sqrt().recip()).collect();
                    let mut xhat = if train { vec![0.0; xv.len()] } else { Vec::new() };
                    for bi in 0..n {
                        for ch in 0..*c {
                            let base = (bi * c + ch) * inner;
                            let scale = g[ch] * inv_std[ch];
                            let shift = be[ch] - mean[ch] * scale;
                            for j in base..base + inner {
                                out[j] = xv[j] * scale + shift;
                                if train {
                                    xhat[j] = (xv[j] - mean[ch]) * inv_std[ch];
                                }
                            }
                        }
                    }
                    prog.charge(meter, i, 4 * xv.len() as u64);
                    if train {
                        meter.alloc(8 * xhat.len() as u64);
                        keep = Saved::Norm { xhat, inv_std };
                    }
                }
                Op::Relu => {
                    for (o, v) in out.iter_mut().zip(xv) {
                        *o = if *v > 0.0 || v.is_nan() { *v } else { 0.0 };
                    }
                    prog.charge(meter, i, xv.len() as u64);
                }
                Op::Sigmoid => {
                    for (o, v) in out.iter_mut().zip(xv) {
                        *o = if nan_fault && v.abs() >= NAN_INPUT_THRESHOLD {
                            f64::NAN
                        } else {
                            0.5 * (1.0 + (0.5 * v).tanh())
                        };
                    }
                    prog.charge(meter, i, 3 * xv.len() as u64);
                }
                Op::Copy => {
                    out.copy_from_slice(xv);
                    prog.charge(meter, i, xv.len() as u64);
                }
                Op::Pool {
                    max,
                    planes,
                    plane_in,
                    table,
                    kk,
                } => {
                    let per_plane = table.len() / kk;
                    let mut arg = if train && *max { vec![0usize; out.len()] } else { Vec::new() };
                    for pl in 0..*planes {
                        let xin = &xv[pl * plane_in..(pl + 1) * plane_in];
                        for q in 0..per_plane {
                            let idx = &table[q * kk..(q + 1) * kk];
                            let yi = pl * per_plane + q;
                            if *max {
                                let mut bi = idx[0];
                                for &t in &idx[1..] {
                                    let (v, b) = (xin[t], xin[bi]);
                                    if v > b || (v.is_nan() && !b.is_nan()) {
                                        bi = t;
                                    }
                                }
                                out[yi] = xin[bi];
                                if train {
                                    arg[yi] = pl * plane_in + bi;
                                }
                            } else {
                                out[yi] = idx.iter().map(|&t| xin[t]).sum::<f64>() / *kk as f64;
                            }
                        }
                    }
                    prog.charge(meter, i, (planes * per_plane * kk) as u64);
                    if train && *max {
                        meter.alloc(8 * arg.len() as u64);
                        keep = Saved::Arg(arg);
                    }
                }
                Op::Sum => {
                    out.copy_from_slice(xv);
                    for j in 1..ins.srcs.len() {
                        for (o, v) in out.iter_mut().zip(src(j)) {
                            *o += v;
                        }
                    }
                    prog.charge(meter, i, (out.len() * ins.srcs.len()) as u64);
                }
                Op::Join { parts } => {
                    let per_out: usize = parts.iter().sum();
                    let mut off = 0;
                    for (j, per) in parts.iter().enumerate() {
                        let v = src(j);
                        for bi in 0..n {
                            out[bi * per_out + off..bi * per_out + off + per].copy_from_slice(&v[bi * per..(bi + 1) * per]);
                        }
                        off += per;
                    }
                    prog.charge(meter, i, out.len() as u64);
                }
            }
            for v in out.iter_mut() {
                *v = prog.dtype.round(*v);
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.insert(ins.node.clone(), TensorValue::new(prog.out_specs[&ins.node].clone(), out.clone()));
            }
            bufs[i] = out;
            saved.push(keep);
            if !train {
                for &s in &ins.srcs {
                    if s != INPUT && last_use[s] == i {
                        pool.push(std::mem::take(&mut bufs[s]));
                    }
                }
            }
        }
        Ok(Run { bufs, saved, stats })
    }

    /// Reverse sweep; returns gradients in arena layout.
    fn reverse(&self, prog: &Program, arena: &[f64], x: &TensorValue, run: &Run, dy: Vec<f64>, meter: &mut Meter) -> Vec<f64> {
        let mut grad = vec![0.0; prog.arena_len];
        let mut dbuf: Vec<Option<Vec<f64>>> = vec![None; prog.instrs.len()];
        meter.alloc(8 * dy.len() as u64);
        dbuf[prog.sink] = Some(dy);
        let skip_dense = self.armed(FaultEffect::SkippedGradientTerm);
        for (i, ins) in prog.instrs.iter().enumerate().rev() {
            let Some(g) = dbuf[i].take() else { continue };
            let xv: &[f64] = if ins.srcs[0] == INPUT { &x.data } else { &run.bufs[ins.srcs[0]] };
            let n = ins.batch;
            let mut dxs: Vec<Vec<f64>> = Vec::new();
            match &ins.op {
                Op::Conv {
                    ic,
                    h,
                    w,
                    oc,
                    oh,
                    ow,
                    k,
                    s,
                    p,
                    weight,
                    bias,
                } => {
                    let Saved::Cols(cols) = &run.saved[i] else { unreachable!("conv columns saved in training") };
                    let plane = oh * ow;
                    let rows = ic * k * k;
                    let wt = &arena[weight.clone()];
                    let mut dx = vec![0.0; n * ic * h * w];
                    for bi in 0..n {
                        let gs = &g[bi * oc * plane..(bi + 1) * oc * plane];
                        let cs = &cols[bi * rows * plane..(bi + 1) * rows * plane];
                        let mut dcols = vec![0.0; rows * plane];
                        for o in 0..*oc {
                            let grow = &gs[o * plane..(o + 1) * plane];
                            grad[bias.start + o] += grow.iter().sum::<f64>();
                            for r in 0..rows {
                                let crow = &cs[r * plane..(r + 1) * plane];
                                grad[weight.start + o * rows + r] += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                                let wv = wt[o * rows + r];
                                for (d, gv) in dcols[r * plane..(r + 1) * plane].iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        // col2im
                        let dxb = &mut dx[bi * ic * h * w..(bi + 1) * ic * h * w];
                        for c in 0..*ic {
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    let row = (c * k + ky) * k + kx;
                                    for oy in 0..*oh {
                                        let iy = oy * s + ky;
                                        if iy < *p || iy - p >= *h {
                                            continue;
                                        }
                                        for ox in 0..*ow {
                                            let ix = ox * s + kx;
                                            if ix < *p || ix - p >= *w {
                                                continue;
                                            }
                                            dxb[(c * h + iy - p) * w + ix - p] += dcols[row * plane + oy * ow + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    prog.charge(meter, i, (4 * n * oc * rows * plane + n * rows * plane) as u64);
                    dxs.push(dx);
                }
                Op::Gemm {
                    fin,
                    units,
                    weight_t,
                    bias,
                } => {
                    let wt = &arena[weight_t.clone()];
                    let mut dx = vec![0.0; n * fin];
                    for bi in 0..n {
                        let gs = &g[bi * units..(bi + 1) * units];
                        for (u, gv) in gs.iter().enumerate() {
                            grad[bias.start + u] += gv;
                        }
                        for j in 0..*fin {
                            let wrow = &wt[j * units..(j + 1) * units];
                            dx[bi * fin + j] = wrow.iter().zip(gs).map(|(a, b)| a * b).sum();
                            if !skip_dense {
                                let xvj = xv[bi * fin + j];
                                for (d, gv) in grad[weight_t.start + j * units..weight_t.start + (j + 1) * units].iter_mut().zip(gs) {
                                    *d += xvj * gv;
                                }
                            }
                        }
                    }
                    prog.charge(meter, i, (4 * n * fin * units) as u64);
                    dxs.push(dx);
                }
                Op::Norm { c, inner, gamma, beta, .. } => {
                    let Saved::Norm { xhat, inv_std } = &run.saved[i] else { unreachable!("norm state saved in training") };
                    let ga = &arena[gamma.clone()];
                    let m = (n * inner) as f64;
                    let mut dx = vec![0.0; g.len()];
                    for ch in 0..*c {
                        let (mut sg, mut sgx) = (0.0, 0.0);
                        for bi in 0..n {
                            let base = (bi * c + ch) * inner;
                            for j in base..base + inner {
                                sg += g[j];
                                sgx += g[j] * xhat[j];
                            }
                        }
                        grad[gamma.start + ch] += sgx;
                        grad[beta.start + ch] += sg;
                        let (mg, mgx) = (sg / m, sgx / m);
                        for bi in 0..n {
                            let base = (bi * c + ch) * inner;
                            for j in base..base + inner {
                                dx[j] = ga[ch] * inv_std[ch] * (g[j] - mg - xhat[j] * mgx);
                            }
                        }
                    }
                    prog.charge(meter, i, 6 * g.len() as u64);
                    dxs.push(dx);
                }
                Op::Relu => {
                    prog.charge(meter, i, g.len() as u64);
                    dxs.push(g.iter().zip(xv).map(|(a, v)| if *v > 0.0 { *a } else { 0.0 }).collect());
                }
                Op::Sigmoid => {
                    let y = &run.bufs[i];
                    prog.charge(meter, i, 3 * g.len() as u64);
                    dxs.push(g.iter().zip(y).map(|(a, s)| a * (s - s * s)).collect());
                }
                Op::Copy => dxs.push(g.clone()),
                Op::Pool {
                    max,
                    planes,
                    plane_in,
                    table,
                    kk,
                } => {
                    let mut dx = vec![0.0; planes * plane_in];
                    if *max {
                        let Saved::Arg(arg) = &run.saved[i] else { unreachable!("argmax saved in training") };
                        for (gv, a) in g.iter().zip(arg) {
                            dx[*a] += gv;
                        }
                    } else {
                        let per_plane = table.len() / kk;
                        let inv = 1.0 / *kk as f64;
                        for pl in 0..*planes {
                            for q in 0..per_plane {
                                let gv = g[pl * per_plane + q] * inv;
                                for &t in &table[q * kk..(q + 1) * kk] {
                                    dx[pl * plane_in + t] += gv;
                                }
                            }
                        }
                    }
                    prog.charge(meter, i, (g.len() * kk) as u64);
                    dxs.push(dx);
                }
                Op::Sum => {
                    for _ in &ins.srcs {
                        dxs.push(g.clone());
                    }
                }
                Op::Join { parts } => {
                    let per_out: usize = parts.iter().sum();
                    let mut off = 0;
                    for per in parts {
                        let mut d = Vec::with_capacity(n * per);
                        for bi in 0..n {
                            d.extend_from_slice(&g[bi * per_out + off..bi * per_out + off + per]);
                        }
                        off += per;
                        dxs.push(d);
                    }
                }
            }
            meter.free(8 * g.len() as u64);
            for (&s, d) in ins.srcs.iter().zip(dxs) {
                if s == INPUT {
                    continue;
                }
                match &mut dbuf[s] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&d) {
                            *a += v;
                        }
                    }
                    slot @ None => {
                        meter.alloc(8 * d.len() as u64);
                        *slot = Some(d);
                    }
                }
            }
        }
        grad
    }
}

/// Objective and output gradient, written against row views of the output.
fn objective(model: &Model, out: &[f64], spec: &TensorSpec, y: &Targets) -> Result<(f64, Vec<f64>), Crash> {
    let rows = spec.batch();
    let width = spec.sample_numel();
    let total = out.len() as f64;
    let mut d = vec![0.0; out.len()];
    let value = match (model.loss.kind, y) {
        (LossKind::CrossEntropy, Targets::Classes(cls)) => {
            let smooth = model.loss.float("label_smoothing");
            let off = smooth / width as f64;
            let mut acc = 0.0;
            for (r, &label) in cls.iter().enumerate() {
                if label >= width {
                    return Err(fail(Phase::Loss, format!("class {label} has no logit among {width}")));
                }
                let z = &out[r * width..(r + 1) * width];
                let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = z.iter().map(|v| (v - top).exp()).sum();
                let log_denom = denom.ln();
                let dr = &mut d[r * width..(r + 1) * width];
                for (j, zj) in z.iter().enumerate() {
                    let target = if j == label { 1.0 - smooth + off } else { off };
                    let log_p = zj - top - log_denom;
                    acc -= target * log_p;
                    dr[j] = (log_p.exp() - target) / rows as f64;
                }
            }
            acc / rows as f64
        }
        (LossKind::BinaryCrossEntropy, Targets::Classes(cls)) => {
            let mut acc = 0.0;
            for (r, &label) in cls.iter().enumerate() {
                for j in 0..width {
                    let idx = r * width + j;
                    let z = out[idx];
                    let t = if j == label { 1.0 } else { 0.0 };
                    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                    acc += softplus - z * t;
                    let sig = 0.5 * (1.0 + (0.5 * z).tanh());
                    d[idx] = (sig - t) / total;
                }
            }
            acc / total
        }
        (LossKind::CrossEntropy | LossKind::BinaryCrossEntropy, Targets::Values(_)) => {
            return Err(fail(Phase::Loss, "classification loss given regression targets"));
        }
        (kind, y) => {
            let target: Vec<f64> = match y {
                Targets::Values(v) => v.clone(),
                Targets::Classes(cls) => {
                    let mut t = vec![0.0; out.len()];
                    for (r, &c) in cls.iter().enumerate() {
                        if c < width {
                            t[r * width + c] = 1.0;
                        }
                    }
                    t
                }
            };
            if target.len() != out.len() {
                return Err(fail(Phase::Loss, format!("target width {} vs output {}", target.len(), out.len())));
            }
            let beta = model.loss.float("beta");
            let mut acc = 0.0;
            for (idx, (o, t)) in out.iter().zip(&target).enumerate() {
                let e = o - t;
                let (l, dl) = if kind == LossKind::MeanSquaredError {
                    (e * e, 2.0 * e)
                } else if e.abs() < beta {
                    (0.5 * e * e / beta, e / beta)
                } else {
                    (e.abs() - 0.5 * beta, e.signum())
                };
                acc += l;
                d[idx] = dl / total;
            }
            acc / total
        }
    };
    Ok((value, d))
}

/// Flat optimizer over the whole arena.
struct Stepper {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Stepper {
    fn new(kind: OptimizerKind, len: usize, meter: &mut Meter) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::MomentumSgd | OptimizerKind::RmsProp => (vec![0.0; len], Vec::new()),
            OptimizerKind::Adam => (vec![0.0; len], vec![0.0; len]),
        };
        meter.alloc(8 * (m.len() + v.len()) as u64);
        Self { kind, m, v, t: 0 }
    }

    fn state_bytes(&self) -> u64 {
        8 * (self.m.len() + self.v.len()) as u64
    }

    fn apply(&mut self, model: &Model, arena: &mut [f64], g: &[f64]) {
        let o = &model.optimizer;
        let lr = o.learning_rate();
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, d) in arena.iter_mut().zip(g) {
                    *w -= lr * d;
                }
            }
            OptimizerKind::MomentumSgd => {
                let mu = o.float("momentum");
                for i in 0..arena.len() {
                    self.m[i] = mu * self.m[i] + g[i];
                    arena[i] -= lr * self.m[i];
                }
            }
            OptimizerKind::RmsProp => {
                let (rho, eps) = (o.float("rho"), o.float("epsilon"));
                for i in 0..arena.len() {
                    self.m[i] = rho * self.m[i] + (1.0 - rho) * g[i] * g[i];
                    arena[i] -= lr * g[i] / (self.m[i].sqrt() + eps);
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (o.float("beta1"), o.float("beta2"), o.float("epsilon"));
                let step_size = lr / (1.0 - b1.powi(self.t));
                let c2 = 1.0 - b2.powi(self.t);
                for i in 0..arena.len() {
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
                    arena[i] -= step_size * self.m[i] / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
        let dt = model.dtype();
        for w in arena.iter_mut() {
            *w = dt.round(*w);
        }
    }
}

fn fold_running(model: &Model, prog: &Program, running: &mut ParamStore, stats: &BTreeMap<String, (Vec<f64>, Vec<f64>)>) {
    for ins in &prog.instrs {
        let Op::Norm { momentum, .. } = ins.op else { continue };
        let Some((mean, var)) = stats.get(&ins.node) else { continue };
        let dt = model.dtype();
        for (name, batch) in [("running_mean", mean), ("running_var", var)] {
            if let Some(r) = running.buffers.get_mut(&key(&ins.node, name)) {
                for (r, b) in r.iter_mut().zip(batch) {
                    *r = dt.round(*r + momentum * (b - *r));
                }
            }
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    let mut m = 0.0f64;
    for x in v {
        if x.is_nan() {
            return f64::NAN;
        }
        m = m.max(x.abs());
    }
    m
}

fn reraise(phase: Phase) -> impl Fn(Crash) -> Crash {
    move |c| if c.phase == Phase::Forward { fail(phase, c.message) } else { c }
}

impl Engine for Lowered<'_> {
    fn forward(
        &self,
        model: &Model,
        params: &ParamStore,
        x: &TensorValue,
        meter: &mut Meter,
    ) -> Result<BTreeMap<String, TensorValue>, Crash> {
        let prog = self.lower(model, Phase::Forward)?;
        let arena = prog.import(params);
        meter.alloc(prog.dtype.size_bytes() * arena.len() as u64);
        let mut rec = BTreeMap::new();
        self.execute(&prog, &arena, params, x, false, meter, Some(&mut rec))?;
        Ok(rec)
    }

    fn gradients(&self, model: &Model, params: &ParamStore, batch: &Batch) -> Result<(f64, Gradients), Crash> {
        let prog = self.lower(model, Phase::Forward)?;
        let arena = prog.import(params);
        let mut meter = Meter::default();
        let run = self.execute(&prog, &arena, params, &batch.x, true, &mut meter, None)?;
        let sink = &prog.instrs[prog.sink];
        let (loss, dy) = objective(model, &run.bufs[prog.sink], &prog.out_specs[&sink.node], &batch.y)?;
        let g = self.reverse(&prog, &arena, &batch.x, &run, dy, &mut meter);
        Ok((loss, prog.export(&g)))
    }

    fn train(
        &self,
        model: &Model,
        params: ParamStore,
        data: &Dataset,
        steps: usize,
        trace: &mut ExecutionTrace,
    ) -> Result<ParamStore, Crash> {
        let prog = self.lower(model, Phase::Forward)?;
        let mut running = params;
        let mut arena = prog.import(&running);
        let mut meter = Meter::default();
        let dsize = prog.dtype.size_bytes();
        meter.alloc(dsize * arena.len() as u64);
        let mut stepper = Stepper::new(model.optimizer.kind, arena.len(), &mut meter);
        let leak = self.armed(FaultEffect::LeakedAllocationPerStep) && model.optimizer.kind.is_stateful();
        let sink_spec = prog.out_specs[&prog.instrs[prog.sink].node].clone();
        for step in 0..steps {
            let batch = data.batch(step);
            let before = meter.live();
            let last = step + 1 == steps;
            let mut rec = BTreeMap::new();
            let run = self.execute(&prog, &arena, &running, &batch.x, true, &mut meter, last.then_some(&mut rec))?;
            let (loss, dy) = objective(model, &run.bufs[prog.sink], &sink_spec, &batch.y)?;
            let g = self.reverse(&prog, &arena, &batch.x, &run, dy, &mut meter);
            meter.alloc(8 * g.len() as u64);
            stepper.apply(model, &mut arena, &g);
            prog.charge(&mut meter, prog.instrs.len(), 4 * arena.len() as u64);
            fold_running(model, &prog, &mut running, &run.stats);
            if leak {
                meter.alloc(stepper.state_bytes());
            }
            trace.loss_series.push(loss);
            trace.step_times.push(meter.take_ms());
            trace.mem_series.push(meter.take_peak());
            if last {
                trace.gradient_summary = prog.export(&g).into_iter().map(|(k, v)| (k, max_abs(&v))).collect();
                trace.per_layer_outputs = rec;
            }
            let leaked = if leak { stepper.state_bytes() } else { 0 };
            let scratch = meter.live() - before - leaked;
            meter.free(scratch);
        }
        running.tensors = prog.export(&arena);
        Ok(running)
    }

    fn infer(&self, model: &Model, params: &ParamStore, data: &Dataset, trace: &mut ExecutionTrace) -> Result<(), Crash> {
        let prog = self.lower(model, Phase::Inference)?;
        let arena = prog.import(params);
        let mut meter = Meter::default();
        meter.alloc(prog.dtype.size_bytes() * arena.len() as u64);
        let sink_spec = prog.out_specs[&prog.instrs[prog.sink].node].clone();
        let mut finals = Vec::with_capacity(data.eval.len());
        for (b, batch) in data.eval.iter().enumerate() {
            let before = meter.live();
            let mut rec = BTreeMap::new();
            let run = self
                .execute(&prog, &arena, params, &batch.x, false, &mut meter, (b == 0).then_some(&mut rec))
                .map_err(reraise(Phase::Inference))?;
            trace.step_times.push(meter.take_ms());
            trace.mem_series.push(meter.take_peak());
            finals.push(TensorValue::new(sink_spec.clone(), run.bufs[prog.sink].clone()));
            if b == 0 {
                trace.per_layer_outputs = rec;
            }
            meter.free(meter.live() - before);
        }
        trace.eval_metric = Some(eval_metric(model.task(), &finals, &data.eval));
        Ok(())
    }
}
