//! Forward tangent propagation and the (dual) reverse sweep.
//!
//! A reverse sweep run over tangent-carrying values yields, for every
//! requested variable, both the adjoint `∂f/∂x` and its directional
//! derivative along the seeded tangent. With tangents seeded on a set of
//! inner variables along `d`, the latter is `H_{x,inner} · d`
//! (forward-over-reverse).

use alloc::vec;
use alloc::vec::Vec;

use super::graph::{matrix_dims, Graph, Op, Var};
use super::kernels::{add_col_sums, add_row_bias, axpy, gemm};
use super::EngineError;

/// Per-node tangents; `None` marks a structurally zero tangent.
#[derive(Debug, Clone)]
pub struct Tangents {
    pub(crate) t: Vec<Option<Vec<f64>>>,
}

impl Tangents {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.t.get(v.0).and_then(|t| t.as_deref())
    }
}

/// Adjoint of one requested variable and, when tangents were supplied, the
/// adjoint's tangent.
#[derive(Debug, Clone)]
pub struct Adjoint {
    pub grad: Vec<f64>,
    pub tangent: Vec<f64>,
}

fn slot(buf: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    buf.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    /// Propagates tangents forward from `seeds` (leaf or intermediate nodes).
    pub fn tangents(&self, seeds: &[(Var, &[f64])]) -> Result<Tangents, EngineError> {
        let n = self.nodes.len();
        let mut t: Vec<Option<Vec<f64>>> = vec![None; n];
        for (v, d) in seeds {
            if d.len() != self.nodes[v.0].value.len() {
                return Err(EngineError::Shape {
                    op: "tangent seed",
                    node: v.0,
                    detail: alloc::format!("seed has {} values, node has {}", d.len(), self.nodes[v.0].value.len()),
                });
            }
        }
        for i in 0..n {
            if let Some((_, d)) = seeds.iter().find(|(v, _)| v.0 == i) {
                t[i] = Some(d.to_vec());
                continue;
            }
            let node = &self.nodes[i];
            let val = |v: &Var| self.nodes[v.0].value.as_slice();
            let out_len = node.value.len();
            let out: Option<Vec<f64>> = match &node.op {
                Op::Input(_) | Op::Constant => None,
                Op::Affine { x, w, b } => {
                    let (rows, inner) = matrix_dims(&self.nodes[x.0].shape).expect("checked at record");
                    let cols = self.nodes[w.0].shape[1];
                    let (dx, dw, db) = (t[x.0].as_deref(), t[w.0].as_deref(), b.and_then(|b| t[b.0].as_deref()));
                    if dx.is_none() && dw.is_none() && db.is_none() {
                        None
                    } else {
                        let mut y = vec![0.0; out_len];
                        if let Some(dx) = dx {
                            gemm(rows, inner, cols, dx, false, val(w), false, 1.0, &mut y);
                        }
                        if let Some(dw) = dw {
                            gemm(rows, inner, cols, val(x), false, dw, false, 1.0, &mut y);
                        }
                        if let Some(db) = db {
                            add_row_bias(&mut y, db);
                        }
                        Some(y)
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    match (t[a.0].as_deref(), t[b.0].as_deref()) {
                        (None, None) => None,
                        (da, db) => {
                            let mut y = vec![0.0; out_len];
                            if let Some(da) = da {
                                axpy(1.0, da, &mut y);
                            }
                            if let Some(db) = db {
                                axpy(sign, db, &mut y);
                            }
                            Some(y)
                        }
                    }
                }
                Op::Mul(a, b) => match (t[a.0].as_deref(), t[b.0].as_deref()) {
                    (None, None) => None,
                    (da, db) => {
                        let mut y = vec![0.0; out_len];
                        if let Some(da) = da {
                            for ((o, d), q) in y.iter_mut().zip(da).zip(val(b)) {
                                *o += d * q;
                            }
                        }
                        if let Some(db) = db {
                            for ((o, d), p) in y.iter_mut().zip(db).zip(val(a)) {
                                *o += d * p;
                            }
                        }
                        Some(y)
                    }
                },
                Op::ScaleBy { x, s } => match (t[x.0].as_deref(), t[s.0].as_deref()) {
                    (None, None) => None,
                    (dx, ds) => {
                        let mut y = vec![0.0; out_len];
                        if let Some(dx) = dx {
                            axpy(val(s)[0], dx, &mut y);
                        }
                        if let Some(ds) = ds {
                            axpy(ds[0], val(x), &mut y);
                        }
                        Some(y)
                    }
                },
                Op::Scale(x, c) => t[x.0].as_ref().map(|d| d.iter().map(|v| c * v).collect()),
                Op::Offset(x, _) | Op::Reshape(x) => t[x.0].clone(),
                Op::Unary(u, x) => match t[x.0].as_deref() {
                    None => None,
                    Some(dx) => {
                        let mut y = Vec::with_capacity(out_len);
                        for ((&xv, &yv), &d) in val(x).iter().zip(&node.value).zip(dx) {
                            let (d1, _) = u
                                .derivatives(xv, yv)
                                .ok_or(EngineError::NonDifferentiable { op: u.name(), node: i })?;
                            y.push(d1 * d);
                        }
                        Some(y)
                    }
                },
                Op::Sum(x) => t[x.0].as_ref().map(|d| vec![d.iter().sum()]),
                Op::Mean(x) => t[x.0].as_ref().map(|d| vec![d.iter().sum::<f64>() / d.len() as f64]),
                Op::RowSum(x) => {
                    let c = self.nodes[x.0].shape[1];
                    t[x.0]
                        .as_ref()
                        .map(|d| d.chunks_exact(c).map(|r| r.iter().sum()).collect())
                }
                Op::ConcatCols(xs) => {
                    if xs.iter().all(|x| t[x.0].is_none()) {
                        None
                    } else {
                        let rows = node.shape[0];
                        let mut y = Vec::with_capacity(out_len);
                        for r in 0..rows {
                            for x in xs {
                                let c = self.nodes[x.0].shape[1];
                                match t[x.0].as_deref() {
                                    Some(d) => y.extend_from_slice(&d[r * c..(r + 1) * c]),
                                    None => y.extend(core::iter::repeat_n(0.0, c)),
                                }
                            }
                        }
                        Some(y)
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let c = self.nodes[x.0].shape[1];
                    t[x.0].as_ref().map(|d| {
                        d.chunks_exact(c)
                            .flat_map(|row| row[*start..*end].iter().copied())
                            .collect()
                    })
                }
                Op::GatherRows { x, index } => {
                    let c = self.nodes[x.0].shape[1];
                    t[x.0].as_ref().map(|d| {
                        index
                            .iter()
                            .flat_map(|&r| d[r * c..(r + 1) * c].iter().copied())
                            .collect()
                    })
                }
            };
            t[i] = out;
        }
        Ok(Tangents { t })
    }

    /// Reverse sweep from `output` seeded with `seed`, returning adjoints for
    /// every variable in `wrt`.
    ///
    /// With `tangents`, each adjoint also carries its tangent; without, the
    /// returned tangents are zero.
    pub fn reverse(
        &self,
        output: Var,
        seed: &[f64],
        wrt: &[Var],
        tangents: Option<&Tangents>,
    ) -> Result<Vec<Adjoint>, EngineError> {
        let n = output.0 + 1;
        if seed.len() != self.nodes[output.0].value.len() {
            return Err(EngineError::Shape {
                op: "reverse seed",
                node: output.0,
                detail: alloc::format!(
                    "seed has {} values, output has {}",
                    seed.len(),
                    self.nodes[output.0].value.len()
                ),
            });
        }
        // Only nodes downstream of a requested variable need adjoints.
        let mut active = vec![false; n];
        for v in wrt {
            if v.0 < n {
                active[v.0] = true;
            }
        }
        for i in 0..n {
            if !active[i] && self.nodes[i].op.inputs().iter().any(|v| active[v.0]) {
                active[i] = true;
            }
        }
        let tan = |v: Var| tangents.and_then(|t| t.t[v.0].as_deref());
        let with_tangents = tangents.is_some();

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut adt: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut kept: Vec<(usize, Vec<f64>, Option<Vec<f64>>)> = Vec::new();
        adj[output.0] = Some(seed.to_vec());

        for i in (0..n).rev() {
            if !active[i] {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input(_) | Op::Constant) {
                continue;
            }
            let Some(ay) = adj[i].take() else { continue };
            let dy = adt[i].take();
            if wrt.iter().any(|v| v.0 == i) {
                kept.push((i, ay.clone(), dy.clone()));
            }
            let ay = ay.as_slice();
            let dy = dy.as_deref();
            let val = |v: Var| self.nodes[v.0].value.as_slice();
            let len = |v: Var| self.nodes[v.0].value.len();

            match &node.op {
                Op::Input(_) | Op::Constant => unreachable!(),
                Op::Affine { x, w, b } => {
                    let (rows, inner) = matrix_dims(&self.nodes[x.0].shape).expect("matrix");
                    let cols = self.nodes[w.0].shape[1];
                    let (x, w) = (*x, *w);
                    if active[x.0] {
                        let a = slot(&mut adj[x.0], len(x));
                        gemm(rows, cols, inner, ay, false, val(w), true, 1.0, a);
                        if with_tangents {
                            let dw = tan(w);
                            if dy.is_some() || dw.is_some() {
                                let d = slot(&mut adt[x.0], len(x));
                                if let Some(dy) = dy {
                                    gemm(rows, cols, inner, dy, false, val(w), true, 1.0, d);
                                }
                                if let Some(dw) = dw {
                                    gemm(rows, cols, inner, ay, false, dw, true, 1.0, d);
                                }
                            }
                        }
                    }
                    if active[w.0] {
                        let a = slot(&mut adj[w.0], len(w));
                        gemm(inner, rows, cols, val(x), true, ay, false, 1.0, a);
                        if with_tangents {
                            let dx = tan(x);
                            if dy.is_some() || dx.is_some() {
                                let d = slot(&mut adt[w.0], len(w));
                                if let Some(dx) = dx {
                                    gemm(inner, rows, cols, dx, true, ay, false, 1.0, d);
                                }
                                if let Some(dy) = dy {
                                    gemm(inner, rows, cols, val(x), true, dy, false, 1.0, d);
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        if active[b.0] {
                            add_col_sums(ay, cols, slot(&mut adj[b.0], cols));
                            if let Some(dy) = dy {
                                add_col_sums(dy, cols, slot(&mut adt[b.0], cols));
                            }
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    for (v, s) in [(*a, 1.0), (*b, sign)] {
                        if active[v.0] {
                            axpy(s, ay, slot(&mut adj[v.0], len(v)));
                            if let Some(dy) = dy {
                                axpy(s, dy, slot(&mut adt[v.0], len(v)));
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (v, other) in [(*a, *b), (*b, *a)] {
                        if !active[v.0] {
                            continue;
                        }
                        let q = val(other);
                        let g = slot(&mut adj[v.0], len(v));
                        for ((gi, ai), qi) in g.iter_mut().zip(ay).zip(q) {
                            *gi += ai * qi;
                        }
                        let dq = tan(other);
                        if dy.is_some() || dq.is_some() {
                            let d = slot(&mut adt[v.0], len(v));
                            if let Some(dy) = dy {
                                for ((di, yi), qi) in d.iter_mut().zip(dy).zip(q) {
                                    *di += yi * qi;
                                }
                            }
                            if let Some(dq) = dq {
                                for ((di, ai), qi) in d.iter_mut().zip(ay).zip(dq) {
                                    *di += ai * qi;
                                }
                            }
                        }
                    }
                }
                Op::ScaleBy { x, s } => {
                    let (x, s) = (*x, *s);
                    let sv = val(s)[0];
                    if active[x.0] {
                        axpy(sv, ay, slot(&mut adj[x.0], len(x)));
                        let ds = tan(s);
                        if dy.is_some() || ds.is_some() {
                            let d = slot(&mut adt[x.0], len(x));
                            if let Some(dy) = dy {
                                axpy(sv, dy, d);
                            }
                            if let Some(ds) = ds {
                                axpy(ds[0], ay, d);
                            }
                        }
                    }
                    if active[s.0] {
                        let xv = val(x);
                        let g: f64 = ay.iter().zip(xv).map(|(a, b)| a * b).sum();
                        slot(&mut adj[s.0], 1)[0] += g;
                        let dx = tan(x);
                        if dy.is_some() || dx.is_some() {
                            let mut acc = 0.0;
                            if let Some(dy) = dy {
                                acc += dy.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(dx) = dx {
                                acc += ay.iter().zip(dx).map(|(a, b)| a * b).sum::<f64>();
                            }
                            slot(&mut adt[s.0], 1)[0] += acc;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if active[x.0] {
                        axpy(*c, ay, slot(&mut adj[x.0], len(*x)));
                        if let Some(dy) = dy {
                            axpy(*c, dy, slot(&mut adt[x.0], len(*x)));
                        }
                    }
                }
                Op::Offset(x, _) | Op::Reshape(x) => {
                    if active[x.0] {
                        axpy(1.0, ay, slot(&mut adj[x.0], len(*x)));
                        if let Some(dy) = dy {
                            axpy(1.0, dy, slot(&mut adt[x.0], len(*x)));
                        }
                    }
                }
                Op::Unary(u, x) => {
                    let x = *x;
                    if active[x.0] {
                        let xv = val(x);
                        let dx = tan(x);
                        let mut ga = vec![0.0; xv.len()];
                        let mut gd = (with_tangents && (dx.is_some() || dy.is_some())).then(|| vec![0.0; xv.len()]);
                        for k in 0..xv.len() {
                            let (d1, d2) = u
                                .derivatives(xv[k], node.value[k])
                                .ok_or(EngineError::NonDifferentiable { op: u.name(), node: i })?;
                            ga[k] = d1 * ay[k];
                            if let Some(gd) = gd.as_mut() {
                                let mut v = 0.0;
                                if let Some(dx) = dx {
                                    v += d2 * dx[k] * ay[k];
                                }
                                if let Some(dy) = dy {
                                    v += d1 * dy[k];
                                }
                                gd[k] = v;
                            }
                        }
                        axpy(1.0, &ga, slot(&mut adj[x.0], xv.len()));
                        if let Some(gd) = gd {
                            axpy(1.0, &gd, slot(&mut adt[x.0], xv.len()));
                        }
                    }
                }
                Op::Sum(x) | Op::Mean(x) => {
                    let x = *x;
                    if active[x.0] {
                        let c = if matches!(node.op, Op::Mean(_)) {
                            1.0 / len(x) as f64
                        } else {
                            1.0
                        };
                        let a0 = c * ay[0];
                        for g in slot(&mut adj[x.0], len(x)).iter_mut() {
                            *g += a0;
                        }
                        if let Some(dy) = dy {
                            let d0 = c * dy[0];
                            for g in slot(&mut adt[x.0], len(x)).iter_mut() {
                                *g += d0;
                            }
                        }
                    }
                }
                Op::RowSum(x) => {
                    let x = *x;
                    if active[x.0] {
                        let c = self.nodes[x.0].shape[1];
                        let g = slot(&mut adj[x.0], len(x));
                        for (row, a) in g.chunks_exact_mut(c).zip(ay) {
                            row.iter_mut().for_each(|v| *v += a);
                        }
                        if let Some(dy) = dy {
                            let d = slot(&mut adt[x.0], len(x));
                            for (row, a) in d.chunks_exact_mut(c).zip(dy) {
                                row.iter_mut().for_each(|v| *v += a);
                            }
                        }
                    }
                }
                Op::ConcatCols(xs) => {
                    let total = node.shape[1];
                    let mut offset = 0;
                    for x in xs {
                        let c = self.nodes[x.0].shape[1];
                        if active[x.0] {
                            let g = slot(&mut adj[x.0], len(*x));
                            for (r, row) in g.chunks_exact_mut(c).enumerate() {
                                axpy(1.0, &ay[r * total + offset..r * total + offset + c], row);
                            }
                            if let Some(dy) = dy {
                                let d = slot(&mut adt[x.0], len(*x));
                                for (r, row) in d.chunks_exact_mut(c).enumerate() {
                                    axpy(1.0, &dy[r * total + offset..r * total + offset + c], row);
                                }
                            }
                        }
                        offset += c;
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let x = *x;
                    if active[x.0] {
                        let c = self.nodes[x.0].shape[1];
                        let w = end - start;
                        let g = slot(&mut adj[x.0], len(x));
                        for (row, a) in g.chunks_exact_mut(c).zip(ay.chunks_exact(w)) {
                            axpy(1.0, a, &mut row[*start..*end]);
                        }
                        if let Some(dy) = dy {
                            let d = slot(&mut adt[x.0], len(x));
                            for (row, a) in d.chunks_exact_mut(c).zip(dy.chunks_exact(w)) {
                                axpy(1.0, a, &mut row[*start..*end]);
                            }
                        }
                    }
                }
                Op::GatherRows { x, index } => {
                    let x = *x;
                    if active[x.0] {
                        let c = self.nodes[x.0].shape[1];
                        let g = slot(&mut adj[x.0], len(x));
                        for (k, &r) in index.iter().enumerate() {
                            axpy(1.0, &ay[k * c..(k + 1) * c], &mut g[r * c..(r + 1) * c]);
                        }
                        if let Some(dy) = dy {
                            let d = slot(&mut adt[x.0], len(x));
                            for (k, &r) in index.iter().enumerate() {
                                axpy(1.0, &dy[k * c..(k + 1) * c], &mut d[r * c..(r + 1) * c]);
                            }
                        }
                    }
                }
            }
        }

        let out = wrt
            .iter()
            .map(|v| {
                let size = self.nodes[v.0].value.len();
                let (g, d) = if v.0 >= n {
                    (None, None)
                } else if let Some((_, g, d)) = kept.iter().find(|(i, ..)| *i == v.0) {
                    (Some(g.clone()), d.clone())
                } else {
                    (adj[v.0].clone(), adt[v.0].clone())
                };
                Adjoint {
                    grad: g.unwrap_or_else(|| vec![0.0; size]),
                    tangent: d.unwrap_or_else(|| vec![0.0; size]),
                }
            })
            .collect();
        Ok(out)
    }
}
