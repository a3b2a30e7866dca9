//! Operation set: forward evaluation and backward (vector–Jacobian) rules.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

/// GELU, tanh approximation (the form used throughout ViT implementations).
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Floor applied to row norms in [`Op::RowNormalize`] so a (practically
/// unreachable) zero-norm feature row degrades to a zero direction instead of
/// a NaN cascade mid-training.
pub(crate) const NORM_FLOOR: f64 = 1e-12;

/// One differentiable operation. Parent arity and shape rules are documented
/// per variant; violations panic because graphs are constructed internally
/// after public validation.
#[derive(Debug, Clone)]
pub enum Op {
    /// Input or parameter tensor; no parents, no backward rule.
    Leaf,
    /// Elementwise `a + b`; shapes must match.
    Add,
    /// Elementwise `a - b`.
    Sub,
    /// Elementwise `a * b` (Hadamard).
    Mul,
    /// `c * a` for a compile-time-known constant `c`.
    Scale(f64),
    /// `a + c` elementwise.
    AddScalar(f64),
    /// `op(a) · op(b)` where each operand is optionally transposed.
    MatMul { ta: bool, tb: bool },
    /// `a + row`, `row` is 1×d broadcast over the rows of `a` (r×d).
    AddRow,
    /// Columns `start..end` of the parent.
    SliceCols { start: usize, end: usize },
    /// Horizontal concatenation of all parents (equal row counts).
    ConcatCols,
    /// Vertical concatenation of all parents (equal column counts).
    ConcatRows,
    /// Rows of the parent at the given indices, in order (duplicates allowed).
    GatherRows(Vec<usize>),
    /// Scatter parent 0 (U×d) to row positions `keep` and parent 1 (a single
    /// 1×d row, broadcast) to positions `fill`. `keep` and `fill` must
    /// partition `0..keep.len()+fill.len()`.
    ComposeRows { keep: Vec<usize>, fill: Vec<usize> },
    /// Row-wise softmax.
    SoftmaxRows,
    /// Row-wise layer normalization with learnable gain/bias: parents are
    /// `[x (r×d), gain (1×d), bias (1×d)]`.
    LayerNorm { eps: f64 },
    /// Elementwise GELU (tanh approximation).
    Gelu,
    /// Column means: r×d → 1×d.
    MeanRows,
    /// Each row scaled to unit Euclidean norm (norms floored at `NORM_FLOOR`).
    RowNormalize,
    /// Row sums: r×d → r×1.
    RowSum,
    /// Main diagonal of a square matrix as a column: n×n → n×1.
    TakeDiag,
    /// Row-wise log-sum-exp, n×c → n×1, optionally excluding the diagonal
    /// entry of row i (requires a square parent and at least one remaining
    /// term per row). Computed with max-shift stabilization.
    RowLogSumExp { exclude_diag: bool },
    /// Elementwise `exp`.
    Exp,
    /// Elementwise natural log.
    Ln,
    /// Mean of all entries: r×c → 1×1.
    MeanAll,
    /// Sum of all entries: r×c → 1×1.
    SumAll,
}

impl Op {
    pub(crate) fn forward(&self, p: &[&Array2<f64>]) -> Array2<f64> {
        match self {
            Op::Leaf => unreachable!("leaf nodes are created via Graph::leaf"),
            Op::Add => {
                assert_eq!(p[0].dim(), p[1].dim(), "Add: shape mismatch");
                p[0] + p[1]
            }
            Op::Sub => {
                assert_eq!(p[0].dim(), p[1].dim(), "Sub: shape mismatch");
                p[0] - p[1]
            }
            Op::Mul => {
                assert_eq!(p[0].dim(), p[1].dim(), "Mul: shape mismatch");
                p[0] * p[1]
            }
            Op::Scale(c) => p[0] * *c,
            Op::AddScalar(c) => p[0] + *c,
            Op::MatMul { ta, tb } => {
                let a = view_t(p[0], *ta);
                let b = view_t(p[1], *tb);
                assert_eq!(a.ncols(), b.nrows(), "MatMul: inner dimension mismatch");
                a.dot(&b)
            }
            Op::AddRow => {
                let (r, c) = p[0].dim();
                assert_eq!(p[1].dim(), (1, c), "AddRow: row shape mismatch");
                p[0] + &p[1].broadcast((r, c)).unwrap()
            }
            Op::SliceCols { start, end } => {
                assert!(start < end && *end <= p[0].ncols(), "SliceCols: bad range");
                p[0].slice(s![.., *start..*end]).to_owned()
            }
            Op::ConcatCols => {
                let views: Vec<ArrayView2<f64>> = p.iter().map(|a| a.view()).collect();
                concatenate(Axis(1), &views).expect("ConcatCols: row count mismatch")
            }
            Op::ConcatRows => {
                let views: Vec<ArrayView2<f64>> = p.iter().map(|a| a.view()).collect();
                concatenate(Axis(0), &views).expect("ConcatRows: column count mismatch")
            }
            Op::GatherRows(rows) => {
                assert!(!rows.is_empty(), "GatherRows: empty index list");
                let d = p[0].ncols();
                let mut out = Array2::zeros((rows.len(), d));
                for (i, &r) in rows.iter().enumerate() {
                    out.row_mut(i).assign(&p[0].row(r));
                }
                out
            }
            Op::ComposeRows { keep, fill } => {
                let d = p[0].ncols();
                let len = keep.len() + fill.len();
                assert_eq!(p[0].nrows(), keep.len(), "ComposeRows: kept row count");
                assert_eq!(p[1].dim(), (1, d), "ComposeRows: filler must be 1xd");
                debug_assert!(partition_ok(keep, fill, len), "ComposeRows: not a partition");
                let mut out = Array2::zeros((len, d));
                for (i, &r) in keep.iter().enumerate() {
                    out.row_mut(r).assign(&p[0].row(i));
                }
                for &r in fill {
                    out.row_mut(r).assign(&p[1].row(0));
                }
                out
            }
            Op::SoftmaxRows => {
                let mut out = p[0].clone();
                for mut row in out.rows_mut() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|v| v / sum);
                }
                out
            }
            Op::LayerNorm { eps } => {
                let x = p[0];
                let d = x.ncols();
                assert_eq!(p[1].dim(), (1, d), "LayerNorm: gain shape");
                assert_eq!(p[2].dim(), (1, d), "LayerNorm: bias shape");
                let mut out = Array2::zeros(x.raw_dim());
                for (mut orow, xrow) in out.rows_mut().into_iter().zip(x.rows()) {
                    let mean = xrow.mean().unwrap();
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        orow[j] = (xrow[j] - mean) * inv * p[1][[0, j]] + p[2][[0, j]];
                    }
                }
                out
            }
            Op::Gelu => p[0].mapv(gelu_scalar),
            Op::MeanRows => {
                let m = p[0].mean_axis(Axis(0)).expect("MeanRows: empty input");
                m.insert_axis(Axis(0))
            }
            Op::RowNormalize => {
                let mut out = p[0].clone();
                for mut row in out.rows_mut() {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
                    row.mapv_inplace(|v| v / n);
                }
                out
            }
            Op::RowSum => {
                let s = p[0].sum_axis(Axis(1));
                s.insert_axis(Axis(1))
            }
            Op::TakeDiag => {
                let n = p[0].nrows();
                assert_eq!(p[0].ncols(), n, "TakeDiag: matrix must be square");
                Array2::from_shape_fn((n, 1), |(i, _)| p[0][[i, i]])
            }
            Op::RowLogSumExp { exclude_diag } => {
                let x = p[0];
                if *exclude_diag {
                    assert_eq!(x.nrows(), x.ncols(), "RowLogSumExp: exclude_diag needs square");
                    assert!(x.nrows() >= 2, "RowLogSumExp: exclude_diag needs >= 2 columns");
                }
                let mut out = Array2::zeros((x.nrows(), 1));
                for (i, row) in x.rows().into_iter().enumerate() {
                    let included = row
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| !(*exclude_diag && *j == i))
                        .map(|(_, v)| *v);
                    let max = included.clone().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = included.map(|v| (v - max).exp()).sum();
                    out[[i, 0]] = max + sum.ln();
                }
                out
            }
            Op::Exp => p[0].mapv(f64::exp),
            Op::Ln => p[0].mapv(f64::ln),
            Op::MeanAll => Array2::from_elem((1, 1), p[0].mean().expect("MeanAll: empty input")),
            Op::SumAll => Array2::from_elem((1, 1), p[0].sum()),
        }
    }

    /// Vector–Jacobian product: given the gradient `g` at this node, its
    /// forward `value`, and parent values, return one gradient per parent.
    pub(crate) fn backward(
        &self,
        g: &Array2<f64>,
        value: &Array2<f64>,
        p: &[&Array2<f64>],
    ) -> Vec<Array2<f64>> {
        match self {
            Op::Leaf => unreachable!("leaves have no backward rule"),
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), -g],
            Op::Mul => vec![g * p[1], g * p[0]],
            Op::Scale(c) => vec![g * *c],
            Op::AddScalar(_) => vec![g.clone()],
            Op::MatMul { ta, tb } => {
                let a = p[0];
                let b = p[1];
                let (da, db) = match (ta, tb) {
                    // y = A·B:      dA = g·Bᵀ,       dB = Aᵀ·g
                    (false, false) => (g.dot(&b.t()), a.t().dot(g)),
                    // y = Aᵀ·B:     dA = B·gᵀ,       dB = A·g
                    (true, false) => (b.dot(&g.t()), a.dot(g)),
                    // y = A·Bᵀ:     dA = g·B,        dB = gᵀ·A
                    (false, true) => (g.dot(b), g.t().dot(a)),
                    // y = Aᵀ·Bᵀ:    dA = Bᵀ·gᵀ,      dB = gᵀ·Aᵀ
                    (true, true) => (b.t().dot(&g.t()), g.t().dot(&a.t())),
                };
                vec![da, db]
            }
            Op::AddRow => {
                let row = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![g.clone(), row]
            }
            Op::SliceCols { start, end } => {
                let mut dp = Array2::zeros(p[0].raw_dim());
                dp.slice_mut(s![.., *start..*end]).assign(g);
                vec![dp]
            }
            Op::ConcatCols => {
                let mut out = Vec::with_capacity(p.len());
                let mut at = 0;
                for a in p {
                    let w = a.ncols();
                    out.push(g.slice(s![.., at..at + w]).to_owned());
                    at += w;
                }
                out
            }
            Op::ConcatRows => {
                let mut out = Vec::with_capacity(p.len());
                let mut at = 0;
                for a in p {
                    let h = a.nrows();
                    out.push(g.slice(s![at..at + h, ..]).to_owned());
                    at += h;
                }
                out
            }
            Op::GatherRows(rows) => {
                let mut dp = Array2::zeros(p[0].raw_dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut drow = dp.row_mut(r);
                    drow += &g.row(i);
                }
                vec![dp]
            }
            Op::ComposeRows { keep, fill } => {
                let d = p[0].ncols();
                let mut dkept = Array2::zeros((keep.len(), d));
                for (i, &r) in keep.iter().enumerate() {
                    dkept.row_mut(i).assign(&g.row(r));
                }
                let mut dfill = Array2::zeros((1, d));
                for &r in fill {
                    let mut row = dfill.row_mut(0);
                    row += &g.row(r);
                }
                vec![dkept, dfill]
            }
            Op::SoftmaxRows => {
                // Per row: dx = s ⊙ g − s · (g·s).
                let mut dx = Array2::zeros(value.raw_dim());
                for ((mut drow, srow), grow) in
                    dx.rows_mut().into_iter().zip(value.rows()).zip(g.rows())
                {
                    let dot: f64 = srow.iter().zip(grow.iter()).map(|(s, g)| s * g).sum();
                    for j in 0..srow.len() {
                        drow[j] = srow[j] * (grow[j] - dot);
                    }
                }
                vec![dx]
            }
            Op::LayerNorm { eps } => {
                let x = p[0];
                let gain = p[1];
                let d = x.ncols();
                let mut dx = Array2::zeros(x.raw_dim());
                let mut dgain = Array2::zeros((1, d));
                let mut dbias = Array2::zeros((1, d));
                for ((mut dxrow, xrow), grow) in
                    dx.rows_mut().into_iter().zip(x.rows()).zip(g.rows())
                {
                    let mean = xrow.mean().unwrap();
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // h = gain ⊙ g; dx = (h − mean(h) − x̂ · mean(h ⊙ x̂)) / σ̂
                    let mut h_mean = 0.0;
                    let mut hx_mean = 0.0;
                    for j in 0..d {
                        let xh = (xrow[j] - mean) * inv;
                        let h = gain[[0, j]] * grow[j];
                        h_mean += h;
                        hx_mean += h * xh;
                        dgain[[0, j]] += grow[j] * xh;
                        dbias[[0, j]] += grow[j];
                    }
                    h_mean /= d as f64;
                    hx_mean /= d as f64;
                    for j in 0..d {
                        let xh = (xrow[j] - mean) * inv;
                        let h = gain[[0, j]] * grow[j];
                        dxrow[j] = (h - h_mean - xh * hx_mean) * inv;
                    }
                }
                vec![dx, dgain, dbias]
            }
            Op::Gelu => {
                let mut dp = p[0].mapv(gelu_grad_scalar);
                dp *= g;
                vec![dp]
            }
            Op::MeanRows => {
                let r = p[0].nrows();
                let scaled = g / r as f64;
                vec![scaled.broadcast(p[0].raw_dim()).unwrap().to_owned()]
            }
            Op::RowNormalize => {
                // Per row with y = x/n: dx = (g − y·(g·y)) / n.
                let mut dx = Array2::zeros(p[0].raw_dim());
                for ((mut drow, xrow), (yrow, grow)) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(p[0].rows())
                    .zip(value.rows().into_iter().zip(g.rows()))
                {
                    let n = xrow.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
                    let dot: f64 = yrow.iter().zip(grow.iter()).map(|(y, g)| y * g).sum();
                    for j in 0..xrow.len() {
                        drow[j] = (grow[j] - yrow[j] * dot) / n;
                    }
                }
                vec![dx]
            }
            Op::RowSum => {
                let (r, c) = p[0].dim();
                let mut dp = Array2::zeros((r, c));
                for (mut drow, grow) in dp.rows_mut().into_iter().zip(g.rows()) {
                    drow.fill(grow[0]);
                }
                vec![dp]
            }
            Op::TakeDiag => {
                let n = p[0].nrows();
                let mut dp = Array2::zeros((n, n));
                for i in 0..n {
                    dp[[i, i]] = g[[i, 0]];
                }
                vec![dp]
            }
            Op::RowLogSumExp { exclude_diag } => {
                // dx_iq = g_i · exp(x_iq − y_i) over included q.
                let x = p[0];
                let mut dp = Array2::zeros(x.raw_dim());
                for (i, xrow) in x.rows().into_iter().enumerate() {
                    let y = value[[i, 0]];
                    let gi = g[[i, 0]];
                    for j in 0..xrow.len() {
                        if *exclude_diag && j == i {
                            continue;
                        }
                        dp[[i, j]] = gi * (xrow[j] - y).exp();
                    }
                }
                vec![dp]
            }
            Op::Exp => vec![g * value],
            Op::Ln => vec![g / p[0]],
            Op::MeanAll => {
                let (r, c) = p[0].dim();
                let v = g[[0, 0]] / (r * c) as f64;
                vec![Array2::from_elem((r, c), v)]
            }
            Op::SumAll => vec![Array2::from_elem(p[0].raw_dim(), g[[0, 0]])],
        }
    }
}

fn view_t(a: &Array2<f64>, t: bool) -> ArrayView2<'_, f64> {
    if t {
        a.t()
    } else {
        a.view()
    }
}

fn partition_ok(keep: &[usize], fill: &[usize], len: usize) -> bool {
    let mut seen = vec![false; len];
    for &i in keep.iter().chain(fill) {
        if i >= len || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    seen.iter().all(|&b| b)
}
