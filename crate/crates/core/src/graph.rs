//! Reverse-mode automatic differentiation over dynamic-shape f64 tensors.
//!
//! A [`Graph`] is a per-sample Wengert list: forward calls append nodes,
//! `backward` walks the list in reverse and accumulates gradients. All
//! arithmetic is double precision so that analytic gradients can be checked
//! against central finite differences in tests.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C x H x W pixels to P x (C*p*p) patch rows, row-major over the patch grid.
    Im2Patches { src: NodeId, patch: usize },
    MatMul { a: NodeId, b: NodeId },
    /// Broadcast-add a length-n row vector to every row of an m x n matrix.
    AddRow { a: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Gelu { a: NodeId },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    SoftmaxRows { a: NodeId },
    Transpose { a: NodeId },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    MeanRows { a: NodeId },
    /// l2-normalize a vector; vectors shorter than `eps` map to zero.
    L2NormalizeVec { a: NodeId, eps: f64 },
    Reshape { a: NodeId },
    /// rows of `a` (P x d) dotted with a length-d vector, yielding length P.
    DotRowsVec { a: NodeId, v: NodeId },
    /// Corner-aligned bilinear resize of an h x w map to out_h x out_w.
    BilinearResize { a: NodeId, out_h: usize, out_w: usize },
    /// Per-map min-max normalization to [0,1]; constant maps go to all-zeros.
    MinMaxNorm { a: NodeId },
    /// Mean over samples is taken outside the graph; this is one sample's
    /// -log softmax(logits)[label].
    CeLoss { logits: NodeId, label: usize },
    /// max(max_{k != y} z_k - z_y, -kappa).
    CwMargin { logits: NodeId, label: usize, kappa: f64 },
    L2Dist { a: NodeId, b: NodeId },
    L1Dist { a: NodeId, b: NodeId },
    CosDist { a: NodeId, b: NodeId },
    WeightedSum { terms: Vec<(NodeId, f64)> },
    SumAll { a: NodeId },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Tape of forward operations for a single sample.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality().expect("expected rank-2 tensor")
}

fn as1(v: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    v.view().into_dimensionality().expect("expected rank-1 tensor")
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Sampling positions for a corner-aligned 1-D resize from `n` to `out` points.
fn resize_axis(n: usize, out: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|i| {
            if out == 1 || n == 1 {
                (0, 0, 0.0)
            } else {
                let s = i as f64 * (n - 1) as f64 / (out - 1) as f64;
                let lo = (s.floor() as usize).min(n - 1);
                let hi = (lo + 1).min(n - 1);
                (lo, hi, s - lo as f64)
            }
        })
        .collect()
}

/// Corner-aligned bilinear resize, shared by the graph op and the non-tape paths.
pub fn bilinear_resize(a: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    let ys = resize_axis(h, out_h);
    let xs = resize_axis(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        (1.0 - fy) * ((1.0 - fx) * a[[y0, x0]] + fx * a[[y0, x1]])
            + fy * ((1.0 - fx) * a[[y1, x0]] + fx * a[[y1, x1]])
    })
}

const MINMAX_TINY: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn im2patches(&mut self, src: NodeId, patch: usize) -> NodeId {
        let v = self.value(src);
        let shape = v.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert!(h % patch == 0 && w % patch == 0, "image not divisible by patch size");
        let (gh, gw) = (h / patch, w / patch);
        let mut out = Array2::zeros((gh * gw, c * patch * patch));
        for gy in 0..gh {
            for gx in 0..gw {
                let row = gy * gw + gx;
                for ch in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            out[[row, (ch * patch + dy) * patch + dx]] =
                                v[[ch, gy * patch + dy, gx * patch + dx]];
                        }
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Im2Patches { src, patch })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = as2(self.value(a)).dot(&as2(self.value(b)));
        self.push(v.into_dyn(), Op::MatMul { a, b })
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let v = &as2(self.value(a)) + &as1(self.value(bias));
        self.push(v.into_dyn(), Op::AddRow { a, bias })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale { a, c })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu_val);
        self.push(v, Op::Gelu { a })
    }

    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let x = as2(self.value(a)).to_owned();
        let g = as1(self.value(gamma)).to_owned();
        let b = as1(self.value(beta)).to_owned();
        let mut out = Array2::zeros(x.dim());
        for (i, row) in x.outer_iter().enumerate() {
            let n = row.len() as f64;
            let mu = row.sum() / n;
            let var = row.mapv(|v| (v - mu) * (v - mu)).sum() / n;
            let sd = (var + eps).sqrt();
            for j in 0..row.len() {
                out[[i, j]] = (row[j] - mu) / sd * g[j] + b[j];
            }
        }
        self.push(out.into_dyn(), Op::LayerNorm { a, gamma, beta, eps })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = as2(self.value(a));
        let mut out = x.to_owned();
        for mut row in out.outer_iter_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(out.into_dyn(), Op::SoftmaxRows { a })
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = as2(self.value(a)).t().to_owned();
        self.push(v.into_dyn(), Op::Transpose { a })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = as2(self.value(a))
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v.into_dyn(), Op::SliceCols { a, start, len })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v.into_dyn(), Op::ConcatCols { parts })
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = as2(self.value(a)).mean_axis(Axis(0)).unwrap();
        self.push(v.into_dyn(), Op::MeanRows { a })
    }

    pub fn l2_normalize_vec(&mut self, a: NodeId) -> NodeId {
        let eps = 1e-12;
        let x = as1(self.value(a));
        let n = x.dot(&x).sqrt();
        let v = if n < eps { Array1::zeros(x.len()) } else { x.mapv(|v| v / n) };
        self.push(v.into_dyn(), Op::L2NormalizeVec { a, eps })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape element count mismatch");
        self.push(v, Op::Reshape { a })
    }

    pub fn dot_rows_vec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let out = as2(self.value(a)).dot(&as1(self.value(v)));
        self.push(out.into_dyn(), Op::DotRowsVec { a, v })
    }

    pub fn bilinear_resize(&mut self, a: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let v = bilinear_resize(&as2(self.value(a)).to_owned(), out_h, out_w);
        self.push(v.into_dyn(), Op::BilinearResize { a, out_h, out_w })
    }

    pub fn minmax_norm(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let lo = x.fold(f64::INFINITY, |acc, &v| acc.min(v));
        let hi = x.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let v = if hi - lo < MINMAX_TINY {
            ArrayD::zeros(x.raw_dim())
        } else {
            x.mapv(|v| (v - lo) / (hi - lo))
        };
        self.push(v, Op::MinMaxNorm { a })
    }

    pub fn ce_loss(&mut self, logits: NodeId, label: usize) -> NodeId {
        let z = as1(self.value(logits));
        assert!(label < z.len(), "label out of range");
        let m = z.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let lse = m + z.mapv(|v| (v - m).exp()).sum().ln();
        let loss = lse - z[label];
        self.push(ndarray::arr0(loss).into_dyn(), Op::CeLoss { logits, label })
    }

    pub fn cw_margin(&mut self, logits: NodeId, label: usize, kappa: f64) -> NodeId {
        let z = as1(self.value(logits));
        assert!(label < z.len(), "label out of range");
        let mut best = f64::NEG_INFINITY;
        for (k, &v) in z.iter().enumerate() {
            if k != label && v > best {
                best = v;
            }
        }
        let loss = (best - z[label]).max(-kappa);
        self.push(ndarray::arr0(loss).into_dyn(), Op::CwMargin { logits, label, kappa })
    }

    pub fn l2_dist(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.value(a) - self.value(b);
        let v = d.mapv(|x| x * x).sum().sqrt();
        self.push(ndarray::arr0(v).into_dyn(), Op::L2Dist { a, b })
    }

    pub fn l1_dist(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.value(a) - self.value(b);
        let v = d.mapv(f64::abs).sum();
        self.push(ndarray::arr0(v).into_dyn(), Op::L1Dist { a, b })
    }

    /// 1 - cos(vec(a), vec(b)); 0 if both are zero vectors, 1 if exactly one is.
    pub fn cos_dist(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (na, nb, dot) = {
            let x = self.value(a);
            let y = self.value(b);
            let na = x.mapv(|v| v * v).sum().sqrt();
            let nb = y.mapv(|v| v * v).sum().sqrt();
            let dot = (x * y).sum();
            (na, nb, dot)
        };
        let v = if na < MINMAX_TINY && nb < MINMAX_TINY {
            0.0
        } else if na < MINMAX_TINY || nb < MINMAX_TINY {
            1.0
        } else {
            1.0 - dot / (na * nb)
        };
        self.push(ndarray::arr0(v).into_dyn(), Op::CosDist { a, b })
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let v = terms
            .iter()
            .map(|&(id, c)| c * self.value(id).first().copied().unwrap())
            .sum::<f64>();
        self.push(ndarray::arr0(v).into_dyn(), Op::WeightedSum { terms })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum();
        self.push(ndarray::arr0(v).into_dyn(), Op::SumAll { a })
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        *self.value(id).first().expect("scalar node")
    }

    /// Backpropagate from `root` (a scalar node). Returns per-node gradients;
    /// nodes unreachable from the root carry `None`.
    pub fn backward(&self, root: NodeId) -> Vec<Option<ArrayD<f64>>> {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ndarray::arr0(1.0).into_dyn());
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn add_grad(grads: &mut [Option<ArrayD<f64>>], id: NodeId, g: ArrayD<f64>) {
        match &mut grads[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, i: usize, g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Im2Patches { src, patch } => {
                let p = *patch;
                let shape = self.value(*src).shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (gh, gw) = (h / p, w / p);
                let gm = as2(g);
                let mut out = ArrayD::zeros(IxDyn(&shape));
                for gy in 0..gh {
                    for gx in 0..gw {
                        let row = gy * gw + gx;
                        for ch in 0..c {
                            for dy in 0..p {
                                for dx in 0..p {
                                    out[[ch, gy * p + dy, gx * p + dx]] +=
                                        gm[[row, (ch * p + dy) * p + dx]];
                                }
                            }
                        }
                    }
                }
                Self::add_grad(grads, *src, out);
            }
            Op::MatMul { a, b } => {
                let gm = as2(g);
                let av = as2(self.value(*a));
                let bv = as2(self.value(*b));
                Self::add_grad(grads, *a, gm.dot(&bv.t()).into_dyn());
                Self::add_grad(grads, *b, av.t().dot(&gm).into_dyn());
            }
            Op::AddRow { a, bias } => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *bias, as2(g).sum_axis(Axis(0)).into_dyn());
            }
            Op::Add { a, b } => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.clone());
            }
            Op::Scale { a, c } => {
                Self::add_grad(grads, *a, g * *c);
            }
            Op::Gelu { a } => {
                let dg = self.value(*a).mapv(gelu_grad);
                Self::add_grad(grads, *a, g * &dg);
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let x = as2(self.value(*a));
                let gam = as1(self.value(*gamma));
                let gm = as2(g);
                let (rows, n) = x.dim();
                let nf = n as f64;
                let mut gx = Array2::zeros((rows, n));
                let mut ggamma = Array1::zeros(n);
                let mut gbeta = Array1::zeros(n);
                for r in 0..rows {
                    let row = x.row(r);
                    let mu = row.sum() / nf;
                    let var = row.mapv(|v| (v - mu) * (v - mu)).sum() / nf;
                    let sd = (var + eps).sqrt();
                    let xhat = row.mapv(|v| (v - mu) / sd);
                    let grow = gm.row(r);
                    let dxhat: Array1<f64> = (&grow * &gam).to_owned();
                    let m1 = dxhat.sum() / nf;
                    let m2 = (&dxhat * &xhat).sum() / nf;
                    for j in 0..n {
                        gx[[r, j]] = (dxhat[j] - m1 - xhat[j] * m2) / sd;
                        ggamma[j] += grow[j] * xhat[j];
                        gbeta[j] += grow[j];
                    }
                }
                Self::add_grad(grads, *a, gx.into_dyn());
                Self::add_grad(grads, *gamma, ggamma.into_dyn());
                Self::add_grad(grads, *beta, gbeta.into_dyn());
            }
            Op::SoftmaxRows { a } => {
                let y = as2(&self.nodes[i].value);
                let gm = as2(g);
                let mut gx = y.to_owned();
                for (r, mut row) in gx.outer_iter_mut().enumerate() {
                    let dot = gm.row(r).dot(&y.row(r));
                    for j in 0..row.len() {
                        row[j] = y[[r, j]] * (gm[[r, j]] - dot);
                    }
                }
                Self::add_grad(grads, *a, gx.into_dyn());
            }
            Op::Transpose { a } => {
                Self::add_grad(grads, *a, as2(g).t().to_owned().into_dyn());
            }
            Op::SliceCols { a, start, len } => {
                let shape = self.value(*a).shape().to_vec();
                let mut out = Array2::<f64>::zeros((shape[0], shape[1]));
                out.slice_mut(ndarray::s![.., *start..*start + *len])
                    .assign(&as2(g));
                Self::add_grad(grads, *a, out.into_dyn());
            }
            Op::ConcatCols { parts } => {
                let gm = as2(g);
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let piece = gm.slice(ndarray::s![.., start..start + w]).to_owned();
                    Self::add_grad(grads, p, piece.into_dyn());
                    start += w;
                }
            }
            Op::MeanRows { a } => {
                let rows = self.value(*a).shape()[0];
                let gv = as1(g);
                let mut out = Array2::zeros((rows, gv.len()));
                for mut r in out.outer_iter_mut() {
                    r.assign(&(&gv / rows as f64));
                }
                Self::add_grad(grads, *a, out.into_dyn());
            }
            Op::L2NormalizeVec { a, eps } => {
                let x = as1(self.value(*a));
                let n = x.dot(&x).sqrt();
                if n < *eps {
                    return;
                }
                let y = as1(&self.nodes[i].value);
                let gv = as1(g);
                let dot = gv.dot(&y);
                let gx = (&gv - &(&y * dot)) / n;
                Self::add_grad(grads, *a, gx.into_dyn());
            }
            Op::Reshape { a } => {
                let shape = self.value(*a).raw_dim();
                Self::add_grad(grads, *a, g.clone().into_shape(shape).unwrap());
            }
            Op::DotRowsVec { a, v } => {
                let gv = as1(g);
                let av = as2(self.value(*a));
                let vv = as1(self.value(*v));
                let mut ga = Array2::zeros(av.dim());
                for (r, mut row) in ga.outer_iter_mut().enumerate() {
                    row.assign(&(&vv * gv[r]));
                }
                Self::add_grad(grads, *a, ga.into_dyn());
                Self::add_grad(grads, *v, av.t().dot(&gv).into_dyn());
            }
            Op::BilinearResize { a, out_h, out_w } => {
                let shape = self.value(*a).shape().to_vec();
                let (h, w) = (shape[0], shape[1]);
                let ys = resize_axis(h, *out_h);
                let xs = resize_axis(w, *out_w);
                let gm = as2(g);
                let mut out = Array2::zeros((h, w));
                for i2 in 0..*out_h {
                    let (y0, y1, fy) = ys[i2];
                    for j in 0..*out_w {
                        let (x0, x1, fx) = xs[j];
                        let gv = gm[[i2, j]];
                        out[[y0, x0]] += (1.0 - fy) * (1.0 - fx) * gv;
                        out[[y0, x1]] += (1.0 - fy) * fx * gv;
                        out[[y1, x0]] += fy * (1.0 - fx) * gv;
                        out[[y1, x1]] += fy * fx * gv;
                    }
                }
                Self::add_grad(grads, *a, out.into_dyn());
            }
            Op::MinMaxNorm { a } => {
                let x = self.value(*a);
                let flat: Vec<f64> = x.iter().copied().collect();
                let (mut imin, mut imax) = (0usize, 0usize);
                for (k, &v) in flat.iter().enumerate() {
                    if v < flat[imin] {
                        imin = k;
                    }
                    if v > flat[imax] {
                        imax = k;
                    }
                }
                let range = flat[imax] - flat[imin];
                if range < MINMAX_TINY {
                    return;
                }
                let y = &self.nodes[i].value;
                let s: f64 = g.sum();
                let t: f64 = (g * y).sum();
                let mut gx = g / range;
                {
                    let gs = gx.as_slice_mut().unwrap();
                    gs[imax] -= t / range;
                    gs[imin] += (t - s) / range;
                }
                Self::add_grad(grads, *a, gx);
            }
            Op::CeLoss { logits, label } => {
                let z = as1(self.value(*logits));
                let gs = g.first().copied().unwrap();
                let m = z.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
                let e = z.mapv(|v| (v - m).exp());
                let sum = e.sum();
                let mut gz = e.mapv(|v| v / sum * gs);
                gz[*label] -= gs;
                Self::add_grad(grads, *logits, gz.into_dyn());
            }
            Op::CwMargin { logits, label, kappa } => {
                let z = as1(self.value(*logits));
                let gs = g.first().copied().unwrap();
                let mut best = f64::NEG_INFINITY;
                let mut kstar = usize::MAX;
                for (k, &v) in z.iter().enumerate() {
                    if k != *label && v > best {
                        best = v;
                        kstar = k;
                    }
                }
                if best - z[*label] > -*kappa {
                    let mut gz = Array1::zeros(z.len());
                    gz[kstar] += gs;
                    gz[*label] -= gs;
                    Self::add_grad(grads, *logits, gz.into_dyn());
                }
            }
            Op::L2Dist { a, b } => {
                let d = self.value(*a) - self.value(*b);
                let n = self.nodes[i].value.first().copied().unwrap();
                if n > 0.0 {
                    let gs = g.first().copied().unwrap();
                    let ga = d.mapv(|v| v / n * gs);
                    Self::add_grad(grads, *b, -&ga);
                    Self::add_grad(grads, *a, ga);
                }
            }
            Op::L1Dist { a, b } => {
                let d = self.value(*a) - self.value(*b);
                let gs = g.first().copied().unwrap();
                let ga = d.mapv(|v| v.signum() * gs);
                Self::add_grad(grads, *b, -&ga);
                Self::add_grad(grads, *a, ga);
            }
            Op::CosDist { a, b } => {
                let x = self.value(*a);
                let y = self.value(*b);
                let na = x.mapv(|v| v * v).sum().sqrt();
                let nb = y.mapv(|v| v * v).sum().sqrt();
                if na < MINMAX_TINY || nb < MINMAX_TINY {
                    return;
                }
                let dot = (x * y).sum();
                let gs = g.first().copied().unwrap();
                // d(1-cos)/dx = -(y/(na*nb) - x*dot/(na^3*nb))
                let ga = (x * (dot / (na * na * na * nb)) - y / (na * nb)) * gs;
                let gb = (y * (dot / (nb * nb * nb * na)) - x / (na * nb)) * gs;
                Self::add_grad(grads, *a, ga);
                Self::add_grad(grads, *b, gb);
            }
            Op::WeightedSum { terms } => {
                let gs = g.first().copied().unwrap();
                for &(id, c) in terms {
                    Self::add_grad(grads, id, ndarray::arr0(gs * c).into_dyn());
                }
            }
            Op::SumAll { a } => {
                let gs = g.first().copied().unwrap();
                let shape = self.value(*a).raw_dim();
                Self::add_grad(grads, *a, ArrayD::from_elem(shape, gs));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` at `x`, h = 1e-6.
    fn fd_grad(mut f: impl FnMut(&ArrayD<f64>) -> f64, x: &ArrayD<f64>) -> ArrayD<f64> {
        let h = 1e-6;
        let mut g = ArrayD::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi.as_slice_mut().unwrap()[idx] += h;
            lo.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&hi) - f(&lo)) / (2.0 * h);
        }
        g
    }

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
            .fold(0.0, f64::max)
    }

    /// FD-check the pipeline softmax(layernorm) -> matmul -> gelu -> sum wrt the input.
    #[test]
    fn composite_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_arr(&mut rng, &[3, 4]);
        let w0 = rand_arr(&mut rng, &[4, 5]);
        let g0 = rand_arr(&mut rng, &[4]).mapv(|v| 1.0 + 0.1 * v);
        let b0 = rand_arr(&mut rng, &[4]);

        let eval = |x: &ArrayD<f64>, want_grads: bool| {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone());
            let gamma = g.leaf(g0.clone());
            let beta = g.leaf(b0.clone());
            let w = g.leaf(w0.clone());
            let ln = g.layer_norm(xi, gamma, beta, 1e-6);
            let sm = g.softmax_rows(ln);
            let mm = g.matmul(sm, w);
            let ge = g.gelu(mm);
            let s = g.sum_all(ge);
            let grad = if want_grads {
                g.backward(s)[xi.0].clone()
            } else {
                None
            };
            (g.scalar(s), grad)
        };
        let (_, grad) = eval(&x0, true);
        let fd = fd_grad(|x| eval(x, false).0, &x0);
        assert!(max_rel_err(&grad.unwrap(), &fd) < 1e-5);
    }

    #[test]
    fn attention_pipeline_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let patches0 = rand_arr(&mut rng, &[4, 3]);
        let text0 = rand_arr(&mut rng, &[3]);
        let other = rand_arr(&mut rng, &[6, 6]);

        let eval = |p: &ArrayD<f64>, want: bool| {
            let mut g = Graph::new();
            let pi = g.leaf(p.clone());
            let t = g.leaf(text0.clone());
            let o = g.leaf(other.clone());
            let raw = g.dot_rows_vec(pi, t);
            let grid = g.reshape(raw, &[2, 2]);
            let up = g.bilinear_resize(grid, 6, 6);
            let nm = g.minmax_norm(up);
            let d = g.l2_dist(nm, o);
            let grad = if want { g.backward(d)[pi.0].clone() } else { None };
            (g.scalar(d), grad)
        };
        let (_, grad) = eval(&patches0, true);
        let fd = fd_grad(|p| eval(p, false).0, &patches0);
        assert!(max_rel_err(&grad.unwrap(), &fd) < 1e-5);
    }

    #[test]
    fn loss_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z0 = rand_arr(&mut rng, &[5]);
        for (name, build) in [
            ("ce", 0usize),
            ("cw", 1usize),
            ("cos", 2usize),
            ("l1", 3usize),
        ] {
            let a2 = rand_arr(&mut rng, &[5]);
            let eval = |z: &ArrayD<f64>, want: bool| {
                let mut g = Graph::new();
                let zi = g.leaf(z.clone());
                let b = g.leaf(a2.clone());
                let loss = match build {
                    0 => g.ce_loss(zi, 2),
                    1 => g.cw_margin(zi, 2, 0.1),
                    2 => g.cos_dist(zi, b),
                    _ => g.l1_dist(zi, b),
                };
                let grad = if want { g.backward(loss)[zi.0].clone() } else { None };
                (g.scalar(loss), grad)
            };
            let (_, grad) = eval(&z0, true);
            let fd = fd_grad(|z| eval(z, false).0, &z0);
            assert!(
                max_rel_err(&grad.unwrap(), &fd) < 1e-5,
                "op {name} gradient mismatch"
            );
        }
    }

    #[test]
    fn bilinear_resize_matches_hand_case() {
        // 2x2 grid [[0,1],[2,3]] to 3x3, corner-aligned.
        let a = arr2(&[[0.0, 1.0], [2.0, 3.0]]);
        let r = bilinear_resize(&a, 3, 3);
        let expect = arr2(&[[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]]);
        assert!(r.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn minmax_norm_degenerate_map_is_all_zero() {
        let mut g = Graph::new();
        let a = g.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 3.5));
        let n = g.minmax_norm(a);
        assert!(g.value(n).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_arr(&mut rng, &[5, 7]);
        let mut g = Graph::new();
        let ai = g.leaf(a.clone());
        let r = g.bilinear_resize(ai, 5, 7);
        assert!(g.value(r).iter().zip(a.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
