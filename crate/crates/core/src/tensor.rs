//! Dense f64 tensors and a tape-based reverse-mode autodiff graph.
//!
//! [`Tensor`] is a plain value type (row-major data plus shape) used for
//! parameters and results. A [`Graph`] records every operation applied to its
//! nodes in creation order, which is already a topological order, so
//! [`Graph::backward`] is a single reverse sweep over the tape.

use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `[.., k] x [k, n]`, leading dims of `a` flattened into `m`.
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `alpha * a[i] x b[i]` (or `b[i]^T`) for each of `batch` matrices.
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        alpha: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddScalar {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    MaskedFill {
        x: Var,
        mask: Rc<Vec<bool>>,
    },
    Dropout {
        x: Var,
        keep: Rc<Vec<f64>>,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    SwapAxes12 {
        x: Var,
        dims: [usize; 4],
    },
    Reshape {
        x: Var,
    },
    Gather {
        table: Var,
        ids: Rc<Vec<usize>>,
        width: usize,
    },
    LayerNorm {
        x: Var,
        w: Var,
        b: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanLast {
        x: Var,
        width: usize,
    },
    StdLast {
        x: Var,
        width: usize,
    },
    Sum {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<usize>>,
        pad_id: usize,
        smoothing: f64,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Rc<Vec<f64>>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Values are computed eagerly as ops are recorded.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with logical shapes `m x k` and `k x n`.
///
/// `a_t` means `a` is stored `k x m` row-major; `b_t` means `b` is stored `n x k`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (it is `&mut`).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        self.push_rc(Rc::new(value), shape, op, needs_grad)
    }

    fn push_rc(&mut self, value: Rc<Vec<f64>>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Copies the node's value out as a detached tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.as_ref().clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Registers a tensor as a leaf. It takes part in backward iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.data, t.shape, Op::Leaf, false))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Matrix product. `a` may carry leading batch dims that are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = sa.iter().product::<usize>() / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, shape, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// Batched product over 3-D tensors: `alpha * a[i] . b[i]` (or `b[i]^T` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool, alpha: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Shape {
            op: "batch_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    alpha,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(
            out,
            vec![batch, m, n],
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                alpha,
            },
            ng,
        ))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.same_shape(op, a, b)?;
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Mul(a, b), ng))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let width = *sx.last().unwrap();
        if sb.iter().product::<usize>() != width || sb.len() != 1 {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let bv = self.value(bias).to_vec();
        let out: Vec<f64> = self
            .value(x)
            .chunks(width)
            .flat_map(|row| row.iter().zip(&bv).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        let ng = self.needs(&[x, bias]);
        Ok(self.push(out, sx, Op::AddBias { x, bias }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let ng = self.needs(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::Scale { x, c }, ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let ng = self.needs(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::AddScalar { x }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let ng = self.needs(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::Relu { x }, ng)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(
            out,
            shape,
            Op::Softmax {
                x,
                outer,
                axis: len,
                inner,
            },
            ng,
        ))
    }

    /// Replaces entries where `mask` is true with `value`; those entries get no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: Rc<Vec<bool>>, value: f64) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = self
            .value(x)
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| if *m { value } else { *v })
            .collect();
        let ng = self.needs(&[x]);
        Ok(self.push(out, self.shape(x).to_vec(), Op::MaskedFill { x, mask }, ng))
    }

    /// Inverted dropout with an explicit keep mask sampled by the caller's RNG.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut crate::rng::Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.open01() < rate { 0.0 } else { scale })
            .collect();
        let out = self.value(x).iter().zip(&keep).map(|(v, k)| v * k).collect();
        let ng = self.needs(&[x]);
        self.push(
            out,
            self.shape(x).to_vec(),
            Op::Dropout {
                x,
                keep: Rc::new(keep),
            },
            ng,
        )
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::contract(format!("transpose expects 2-D, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = xv[r * cols + c];
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(out, vec![cols, rows], Op::Transpose { x, rows, cols }, ng))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`; used to move heads next to the batch axis.
    pub fn swap_axes_12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::contract(format!("swap_axes_12 expects 4-D, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.value(x), dims);
        let ng = self.needs(&[x]);
        Ok(self.push(out, vec![s[0], s[2], s[1], s[3]], Op::SwapAxes12 { x, dims }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let have = self.shape(x);
        if shape.iter().product::<usize>() != have.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: have.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Rc::clone(&self.node(x).value);
        let ng = self.needs(&[x]);
        Ok(self.push_rc(value, shape.to_vec(), Op::Reshape { x }, ng))
    }

    /// Row lookup into a `[rows, width]` table; output shape is `out_shape ++ [width]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: st,
                rhs: out_shape.to_vec(),
            });
        }
        let (rows, width) = (st[0], st[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!("id {bad} out of range for table with {rows} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&tv[i * width..(i + 1) * width]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(width);
        let ng = self.needs(&[table]);
        Ok(self.push(
            out,
            shape,
            Op::Gather {
                table,
                ids: Rc::new(ids.to_vec()),
                width,
            },
            ng,
        ))
    }

    /// Layer normalization over the last axis with population statistics:
    /// `(x - mean) / sqrt(var + eps) * w + b`.
    pub fn layer_norm(&mut self, x: Var, w: Var, b: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let width = *sx.last().unwrap();
        for p in [w, b] {
            if self.shape(p) != [width] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: sx,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let rows = xv.len() / width;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let (mean, var) = mean_var(row);
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..width {
                let h = (row[j] - mean) * is;
                xhat[r * width + j] = h;
                out[r * width + j] = h * wv[j] + bv[j];
            }
        }
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(
            out,
            sx,
            Op::LayerNorm {
                x,
                w,
                b,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Mean over the last axis; the last axis is dropped from the shape.
    pub fn mean_last(&mut self, x: Var) -> Var {
        let (out, shape, width) = self.reduce_last(x, |row| mean_var(row).0);
        let ng = self.needs(&[x]);
        self.push(out, shape, Op::MeanLast { x, width }, ng)
    }

    /// Population standard deviation over the last axis.
    pub fn std_last(&mut self, x: Var) -> Var {
        let (out, shape, width) = self.reduce_last(x, |row| mean_var(row).1.sqrt());
        let ng = self.needs(&[x]);
        self.push(out, shape, Op::StdLast { x, width }, ng)
    }

    fn reduce_last(&self, x: Var, f: impl Fn(&[f64]) -> f64) -> (Vec<f64>, Vec<usize>, usize) {
        let s = self.shape(x);
        let width = *s.last().unwrap();
        let out: Vec<f64> = self.value(x).chunks(width).map(f).collect();
        let mut shape = s[..s.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        (out, shape, width)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let ng = self.needs(&[x]);
        self.push(vec![total], vec![1], Op::Sum { x }, ng)
    }

    /// Mean token cross-entropy with uniform label smoothing, ignoring `pad_id` targets.
    ///
    /// The smoothed target puts `1 - smoothing + smoothing / V` on the gold id and
    /// `smoothing / V` on every other id.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize, smoothing: f64) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let vocab = *s.last().unwrap();
        let rows = s.iter().product::<usize>() / vocab;
        if rows != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::contract(format!("label smoothing {smoothing} not in [0, 1)")));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Data(format!("target id {bad} out of range for vocab {vocab}")));
        }
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        if count == 0 {
            return Err(Error::contract("cross_entropy over an all-pad batch"));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..vocab {
                probs[r * vocab + j] = (row[j] - lse).exp();
            }
            if t == pad_id {
                continue;
            }
            let mean_logp = row.iter().map(|v| v - lse).sum::<f64>() / vocab as f64;
            let gold = row[t] - lse;
            total -= (1.0 - smoothing) * gold + smoothing * mean_logp;
        }
        let loss = total / count as f64;
        let ng = self.needs(&[logits]);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: Rc::new(targets.to_vec()),
                pad_id,
                smoothing,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaves the graph untouched, so repeated
    /// calls give bitwise identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // Only leaves keep their gradient; intermediates are freed as the sweep passes.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.node(v).needs_grad {
                return;
            }
            let len = self.node(v).value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, &|da| gemm(*m, *n, *k, 1.0, g, false, bv, true, 1.0, da));
                send(*b, &|db| gemm(*k, *m, *n, 1.0, av, true, g, false, 1.0, db));
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                alpha,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (*m, *k, *n);
                send(*a, &|da| {
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        // da = alpha * g . op(b)^T
                        gemm(m, n, k, *alpha, gi, false, bi, !*trans_b, 1.0, &mut da[i * m * k..(i + 1) * m * k]);
                    }
                });
                send(*b, &|db| {
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // b is n x k: db = alpha * g^T . a
                            gemm(n, m, k, *alpha, gi, true, ai, false, 1.0, dbi);
                        } else {
                            gemm(k, m, n, *alpha, ai, true, gi, false, 1.0, dbi);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                send(*a, &|d| add_into(d, g));
                send(*b, &|d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                send(*a, &|d| add_into(d, g));
                send(*b, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                send(*b, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias { x, bias } => {
                send(*x, &|d| add_into(d, g));
                send(*bias, &|d| {
                    let w = d.len();
                    for row in g.chunks(w) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale { x, c } => send(*x, &|d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            Op::AddScalar { x } => send(*x, &|d| add_into(d, g)),
            Op::Relu { x } => {
                let xv = self.value(*x);
                send(*x, &|d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax { x, outer, axis, inner } => {
                let y = &node.value;
                send(*x, &|d| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * axis * inner + j * inner + i;
                            let dot: f64 = (0..*axis).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*axis {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedFill { x, mask } => send(*x, &|d| {
                for i in 0..d.len() {
                    if !mask[i] {
                        d[i] += g[i];
                    }
                }
            }),
            Op::Dropout { x, keep } => send(*x, &|d| {
                for i in 0..d.len() {
                    d[i] += g[i] * keep[i];
                }
            }),
            Op::Transpose { x, rows, cols } => send(*x, &|d| {
                for r in 0..*rows {
                    for c in 0..*cols {
                        d[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            Op::SwapAxes12 { x, dims } => {
                let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                send(*x, &|d| add_into(d, &back));
            }
            Op::Reshape { x } => send(*x, &|d| add_into(d, g)),
            Op::Gather { table, ids, width } => send(*table, &|d| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * width..(id + 1) * width], &g[r * width..(r + 1) * width]);
                }
            }),
            Op::LayerNorm {
                x,
                w,
                b,
                xhat,
                inv_std,
            } => {
                let wv = self.value(*w);
                let width = wv.len();
                send(*x, &|d| {
                    let nf = width as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let base = r * width;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..width {
                            let dh = g[base + j] * wv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[base + j];
                        }
                        mean_dh /= nf;
                        mean_dh_h /= nf;
                        for j in 0..width {
                            let dh = g[base + j] * wv[j];
                            d[base + j] += is * (dh - mean_dh - xhat[base + j] * mean_dh_h);
                        }
                    }
                });
                send(*w, &|d| {
                    for (gr, hr) in g.chunks(width).zip(xhat.chunks(width)) {
                        for j in 0..width {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                send(*b, &|d| {
                    for gr in g.chunks(width) {
                        add_into(d, gr);
                    }
                });
            }
            Op::MeanLast { x, width } => send(*x, &|d| {
                for (r, gr) in g.iter().enumerate() {
                    for v in &mut d[r * width..(r + 1) * width] {
                        *v += gr / *width as f64;
                    }
                }
            }),
            Op::StdLast { x, width } => {
                let xv = self.value(*x);
                let sd = &node.value;
                send(*x, &|d| {
                    for (r, gr) in g.iter().enumerate() {
                        let row = &xv[r * width..(r + 1) * width];
                        let mean = mean_var(row).0;
                        if sd[r] == 0.0 {
                            continue;
                        }
                        for j in 0..*width {
                            d[r * width + j] += gr * (row[j] - mean) / (*width as f64 * sd[r]);
                        }
                    }
                });
            }
            Op::Sum { x } => send(*x, &|d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::CrossEntropy {
                logits,
                targets,
                pad_id,
                smoothing,
                probs,
                count,
            } => {
                let vocab = probs.len() / targets.len();
                let scale = g[0] / *count as f64;
                let off = smoothing / vocab as f64;
                send(*logits, &|d| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad_id {
                            continue;
                        }
                        for j in 0..vocab {
                            let q = if j == t { 1.0 - smoothing + off } else { off };
                            d[r * vocab + j] += scale * (probs[r * vocab + j] - q);
                        }
                    }
                });
            }
        }
    }
}

fn swap12(x: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

/// Population mean and variance of a slice.
pub fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}
