//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates eagerly,
//! stores its value and the indices of its parents, and returns a [`NodeId`].
//! Construction order is therefore already a topological order, and
//! [`Graph::backward`] walks the tape once in reverse, pushing adjoints to
//! parents. Nodes that never received an adjoint are skipped, so a node is
//! visited at most once per backward pass.
//!
//! Values are two-dimensional `(rows, cols)` arrays; scalars are `1x1`.
//! Broadcasting is deliberately limited to the two cases the models need:
//! adding a `1xC` row to every row ([`Graph::add_row`]) and scaling every
//! row elementwise by a `1xC` row ([`Graph::mul_row`]), plus the column
//! variant [`Graph::sub_col`] used by row-wise softmax. Everything else
//! requires exact shape agreement and fails with a configuration error
//! otherwise.
//!
//! The tape is immutable during backward, so several roots can be
//! differentiated from one forward pass, and repeated backward calls return
//! bit-identical gradients.

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    /// Tape position, mainly useful for diagnostics.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Matmul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    SubCol(usize, usize),
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize, usize),
    SumCols(usize),
    Sum(usize),
    Mean(usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Numerically stable logistic function, shared by tape and non-tape code so
/// both routes produce bit-identical values.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`, shared like [`sigmoid_scalar`].
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Reverse-mode tape. See the module docs for the op inventory and the
/// broadcasting rules.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Adjoint of `id`, or `None` when no path reached it (exactly zero).
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Adjoint of `id` as an owned array, zeros when no path reached it.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input node.
    pub fn var(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Fixed input node. Mechanically identical to [`Graph::var`]; the name
    /// records intent at call sites (data, noise, precomputed rows).
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// `1x1` constant.
    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Config(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    /// Elementwise quotient; the caller keeps the denominator away from zero.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "div")?;
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        Ok(self.push(v, Op::Div(a.0, b.0)))
    }

    /// Matrix product `(r, k) x (k, c)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != rb {
            return Err(Error::Config(format!(
                "matmul: ({ra}, {ca}) x ({rb}, {cb}) inner dimensions differ"
            )));
        }
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        Ok(self.push(v, Op::Matmul(a.0, b.0)))
    }

    /// Broadcast-add a `1xC` row to every row of an `(R, C)` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, ca) = self.shape(a);
        let (rr, cr) = self.shape(row);
        if rr != 1 || cr != ca {
            return Err(Error::Config(format!(
                "add_row: row must be (1, {ca}), got ({rr}, {cr})"
            )));
        }
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value.row(0);
        Ok(self.push(v, Op::AddRow(a.0, row.0)))
    }

    /// Broadcast-multiply every row of an `(R, C)` matrix by a `1xC` row
    /// (per-column scaling).
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, ca) = self.shape(a);
        let (rr, cr) = self.shape(row);
        if rr != 1 || cr != ca {
            return Err(Error::Config(format!(
                "mul_row: row must be (1, {ca}), got ({rr}, {cr})"
            )));
        }
        let v = &self.nodes[a.0].value * &self.nodes[row.0].value.row(0);
        Ok(self.push(v, Op::MulRow(a.0, row.0)))
    }

    /// Broadcast-subtract an `(R, 1)` column from every column of an
    /// `(R, C)` matrix.
    pub fn sub_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (ra, _) = self.shape(a);
        let (rc, cc) = self.shape(col);
        if cc != 1 || rc != ra {
            return Err(Error::Config(format!(
                "sub_col: column must be ({ra}, 1), got ({rc}, {cc})"
            )));
        }
        let v = &self.nodes[a.0].value - &self.nodes[col.0].value.column(0).insert_axis(Axis(1));
        Ok(self.push(v, Op::SubCol(a.0, col.0)))
    }

    /// Horizontal concatenation `(R, C1) ++ (R, C2) -> (R, C1 + C2)`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, _) = self.shape(a);
        let (rb, _) = self.shape(b);
        if ra != rb {
            return Err(Error::Config(format!(
                "concat_cols: row counts {ra} and {rb} differ"
            )));
        }
        let v = concatenate(
            Axis(1),
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .expect("checked shapes");
        Ok(self.push(v, Op::ConcatCols(a.0, b.0)))
    }

    /// Vertical concatenation of equal-width blocks.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Config("concat_rows: no parts".into()));
        }
        let c = self.shape(parts[0]).1;
        for &p in parts {
            if self.shape(p).1 != c {
                return Err(Error::Config(format!(
                    "concat_rows: widths differ ({} vs {})",
                    self.shape(p).1,
                    c
                )));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("checked shapes");
        Ok(self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    /// Rows `lo..hi` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (ra, _) = self.shape(a);
        if lo >= hi || hi > ra {
            return Err(Error::Config(format!(
                "slice_rows: range {lo}..{hi} invalid for {ra} rows"
            )));
        }
        let v = self.nodes[a.0].value.slice(s![lo..hi, ..]).to_owned();
        Ok(self.push(v, Op::SliceRows(a.0, lo, hi)))
    }

    /// Row-wise sum: `(R, C) -> (R, 1)`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.push(v, Op::SumCols(a.0))
    }

    /// Sum of all entries as a `1x1` scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(v, Op::Sum(a.0))
    }

    /// Mean of all entries as a `1x1` scalar.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let m = self.nodes[a.0].value.sum() / self.nodes[a.0].value.len() as f64;
        let v = Array2::from_elem((1, 1), m);
        self.push(v, Op::Mean(a.0))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -&self.nodes[a.0].value;
        self.push(v, Op::Neg(a.0))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    /// Natural log; defined for strictly positive inputs.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Log(a.0))
    }

    /// Square root; defined for nonnegative inputs (backward needs > 0).
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a.0))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(softplus_scalar);
        self.push(v, Op::Softplus(a.0))
    }

    /// `max(x, 0)` elementwise, with subgradient 0 at the kink.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::MulScalar(a.0, c))
    }

    /// `max(x, c)` elementwise, assembled as `relu(x - c) + c` so the hard
    /// threshold reuses the relu subgradient (0 below, 1 above, 0 at the
    /// kink).
    pub fn max_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let shifted = self.add_scalar(a, -c);
        let pos = self.relu(shifted);
        self.add_scalar(pos, c)
    }

    /// Reverse sweep from a `1x1` root. The tape itself is not mutated, so
    /// several roots can be differentiated from the same forward pass and
    /// repeated calls are bit-identical.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 root, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            // Parents always precede children on the tape, so grads[p] for
            // p < i is still pending and safe to accumulate into.
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads[*a], &g);
                    acc(&mut grads[*b], &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[*a], &g);
                    acc_neg(&mut grads[*b], &g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[*b].value;
                    let db = &g * &self.nodes[*a].value;
                    acc(&mut grads[*a], &da);
                    acc(&mut grads[*b], &db);
                }
                Op::Div(a, b) => {
                    let vb = &self.nodes[*b].value;
                    let da = &g / vb;
                    let db = -(&g * &self.nodes[*a].value) / (vb * vb);
                    acc(&mut grads[*a], &da);
                    acc(&mut grads[*b], &db);
                }
                Op::Matmul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    acc(&mut grads[*a], &da);
                    acc(&mut grads[*b], &db);
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads[*a], &g);
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads[*r], &dr);
                }
                Op::MulRow(a, r) => {
                    let da = &g * &self.nodes[*r].value.row(0);
                    let dr = (&g * &self.nodes[*a].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    acc(&mut grads[*a], &da);
                    acc(&mut grads[*r], &dr);
                }
                Op::SubCol(a, c) => {
                    acc(&mut grads[*a], &g);
                    let dc = -g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads[*c], &dc);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.shape(NodeId(*a)).1;
                    let da = g.slice(s![.., ..ca]).to_owned();
                    let db = g.slice(s![.., ca..]).to_owned();
                    acc(&mut grads[*a], &da);
                    acc(&mut grads[*b], &db);
                }
                Op::ConcatRows(parts) => {
                    let mut lo = 0;
                    for &p in parts {
                        let rp = self.shape(NodeId(p)).0;
                        let dp = g.slice(s![lo..lo + rp, ..]).to_owned();
                        acc(&mut grads[p], &dp);
                        lo += rp;
                    }
                }
                Op::SliceRows(a, lo, hi) => {
                    let (ra, ca) = self.shape(NodeId(*a));
                    let mut da = Array2::zeros((ra, ca));
                    da.slice_mut(s![*lo..*hi, ..]).assign(&g);
                    acc(&mut grads[*a], &da);
                }
                Op::SumCols(a) => {
                    let (_, ca) = self.shape(NodeId(*a));
                    let da = g
                        .column(0)
                        .insert_axis(Axis(1))
                        .broadcast((g.nrows(), ca))
                        .expect("broadcast (r,1) to (r,c)")
                        .to_owned();
                    acc(&mut grads[*a], &da);
                }
                Op::Sum(a) => {
                    let (ra, ca) = self.shape(NodeId(*a));
                    let da = Array2::from_elem((ra, ca), g[[0, 0]]);
                    acc(&mut grads[*a], &da);
                }
                Op::Mean(a) => {
                    let (ra, ca) = self.shape(NodeId(*a));
                    let da = Array2::from_elem((ra, ca), g[[0, 0]] / (ra * ca) as f64);
                    acc(&mut grads[*a], &da);
                }
                Op::Neg(a) => acc_neg(&mut grads[*a], &g),
                Op::Exp(a) => {
                    let da = &g * &node.value;
                    acc(&mut grads[*a], &da);
                }
                Op::Log(a) => {
                    let da = &g / &self.nodes[*a].value;
                    acc(&mut grads[*a], &da);
                }
                Op::Sqrt(a) => {
                    let da = &g / &node.value.mapv(|y| 2.0 * y);
                    acc(&mut grads[*a], &da);
                }
                Op::Square(a) => {
                    let da = &g * &self.nodes[*a].value.mapv(|x| 2.0 * x);
                    acc(&mut grads[*a], &da);
                }
                Op::Tanh(a) => {
                    let da = &g * &node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads[*a], &da);
                }
                Op::Sigmoid(a) => {
                    let da = &g * &node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads[*a], &da);
                }
                Op::Softplus(a) => {
                    let da = &g * &self.nodes[*a].value.mapv(sigmoid_scalar);
                    acc(&mut grads[*a], &da);
                }
                Op::Relu(a) => {
                    let da = &g * &self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads[*a], &da);
                }
                Op::AddScalar(a) => acc(&mut grads[*a], &g),
                Op::MulScalar(a, c) => {
                    let da = g.mapv(|x| x * c);
                    acc(&mut grads[*a], &da);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc(slot: &mut Option<Array2<f64>>, delta: &Array2<f64>) {
    match slot {
        Some(g) => *g += delta,
        None => *slot = Some(delta.clone()),
    }
}

fn acc_neg(slot: &mut Option<Array2<f64>>, delta: &Array2<f64>) {
    match slot {
        Some(g) => *g -= delta,
        None => *slot = Some(-delta),
    }
}

/// Compare tape gradients of a scalar-valued builder against a five-point
/// central-difference stencil, returning the worst relative error
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)` over every
/// parameter entry.
///
/// `build` must construct the same function of its parameter nodes on every
/// call (fixed data, fixed noise); it is re-run four times per parameter
/// entry with that entry shifted by `+-h` and `+-2h`. The fourth-order
/// stencil keeps truncation error negligible at step sizes large enough
/// that floating-point cancellation stays below the tolerances used by
/// callers.
pub fn grad_check<F>(build: F, params: &[Array2<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("step h must be positive, got {h}")));
    }
    let eval = |p: &[Array2<f64>]| -> Result<(f64, Vec<Array2<f64>>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = p.iter().map(|w| g.var(w.clone())).collect();
        let root = build(&mut g, &ids)?;
        let grads = g.backward(root)?;
        let out = g.value(root)[[0, 0]];
        let gs = ids
            .iter()
            .zip(p)
            .map(|(&id, w)| grads.get_or_zeros(id, w.dim()))
            .collect();
        Ok((out, gs))
    };
    let (_, analytic) = eval(params)?;
    let mut worst = 0.0_f64;
    let mut shifted: Vec<Array2<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for idx in 0..p.len() {
            let (r, c) = (idx / p.ncols(), idx % p.ncols());
            let orig = p[[r, c]];
            let mut at = |x: f64| -> Result<f64> {
                shifted[pi][[r, c]] = x;
                let (f, _) = eval(&shifted)?;
                Ok(f)
            };
            let fp2 = at(orig + 2.0 * h)?;
            let fp1 = at(orig + h)?;
            let fm1 = at(orig - h)?;
            let fm2 = at(orig - 2.0 * h)?;
            shifted[pi][[r, c]] = orig;
            // Differences of near-equal values are taken before any
            // scaling, so a locally flat function yields an exact zero
            // instead of amplified rounding residue.
            let numeric = (8.0 * (fp1 - fm1) + (fm2 - fp2)) / (12.0 * h);
            let a = analytic[pi][[r, c]];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
