use super::{Elem, ParamSet, TensorError};
use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};
use std::cell::RefCell;

pub(crate) type BackFn<E> =
    Box<dyn FnOnce(&ArrayD<E>, &[ArrayD<E>], &mut [Option<ArrayD<E>>]) + Send>;

struct NodeMeta<E: Elem> {
    tracked: bool,
    back: Option<BackFn<E>>,
    /// Index into the bound `ParamSet` for tracked leaves.
    param: Option<usize>,
}

struct Inner<E: Elem> {
    values: Vec<ArrayD<E>>,
    meta: Vec<NodeMeta<E>>,
}

/// One-shot computation tape. Operations push nodes; `backward_into` walks
/// the tape in reverse and then leaves the graph empty.
pub struct Graph<E: Elem> {
    inner: RefCell<Inner<E>>,
}

/// Handle into a [`Graph`]. Copyable; all arithmetic lives on this type.
#[derive(Clone, Copy)]
pub struct Tensor<'g, E: Elem> {
    g: &'g Graph<E>,
    id: usize,
}

impl<E: Elem> std::fmt::Debug for Tensor<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.id, self.shape())
    }
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// ndarray's `dot` may emit Fortran-order outputs; keep every stored
/// gradient in standard layout so reshapes stay cheap and valid.
fn to_standard<E: Elem>(a: ArrayD<E>) -> ArrayD<E> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn acc<E: Elem>(slot: &mut Option<ArrayD<E>>, g: ArrayD<E>) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(to_standard(g)),
    }
}

fn acc_view<E: Elem>(slot: &mut Option<ArrayD<E>>, g: &ArrayD<E>) {
    match slot {
        Some(existing) => *existing += g,
        None => *slot = Some(to_standard(g.clone())),
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                meta: Vec::new(),
            }),
        }
    }

    fn push(&self, value: ArrayD<E>, tracked: bool, back: Option<BackFn<E>>, param: Option<usize>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.meta.push(NodeMeta { tracked, back, param });
        inner.values.len() - 1
    }

    /// Untracked leaf.
    pub fn constant(&self, value: ArrayD<E>) -> Tensor<'_, E> {
        let id = self.push(value, false, None, None);
        Tensor { g: self, id }
    }

    pub fn constant1(&self, value: Array1<E>) -> Tensor<'_, E> {
        self.constant(value.into_dyn())
    }

    pub fn constant2(&self, value: Array2<E>) -> Tensor<'_, E> {
        self.constant(value.into_dyn())
    }

    pub fn scalar(&self, value: f64) -> Tensor<'_, E> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), E::from_f64(value)))
    }

    /// Tracked leaf bound to a named parameter; gradients accumulate into
    /// the parameter on `backward_into`.
    pub fn param<'g>(&'g self, params: &ParamSet<E>, name: &str) -> Result<Tensor<'g, E>, TensorError> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let value = params.value_at(idx).clone();
        let id = self.push(value, true, None, Some(idx));
        Ok(Tensor { g: self, id })
    }

    /// Parameter loaded as a constant (no gradient flows through it).
    pub fn frozen_param<'g>(
        &'g self,
        params: &ParamSet<E>,
        name: &str,
    ) -> Result<Tensor<'g, E>, TensorError> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        Ok(self.constant(params.value_at(idx).clone()))
    }

    pub(crate) fn value_of(&self, id: usize) -> ArrayD<E> {
        self.inner.borrow().values[id].clone()
    }

    pub(crate) fn shape_of(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().values[id].shape().to_vec()
    }

    fn tracked(&self, id: usize) -> bool {
        self.inner.borrow().meta[id].tracked
    }

    /// Reverse pass from a scalar loss. Gradients of bound parameters are
    /// accumulated into `params.grad`; the tape is consumed.
    pub fn backward_into(&self, loss: Tensor<'_, E>, params: &mut ParamSet<E>) -> Result<(), TensorError> {
        let (values, mut meta) = {
            let mut inner = self.inner.borrow_mut();
            if inner.values[loss.id].len() != 1 {
                return Err(TensorError::NonScalarLoss(
                    inner.values[loss.id].shape().to_vec(),
                ));
            }
            (std::mem::take(&mut inner.values), std::mem::take(&mut inner.meta))
        };
        let n = values.len();
        let mut grads: Vec<Option<ArrayD<E>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(ArrayD::ones(values[loss.id].raw_dim()));
        for id in (0..n).rev() {
            if !meta[id].tracked {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = meta[id].back.take() {
                back(&g, &values, &mut grads);
            }
            if let Some(p) = meta[id].param {
                params.accumulate_grad(p, &g)?;
            }
        }
        params.set_grads_live();
        Ok(())
    }
}

macro_rules! unary_op {
    ($name:ident, $opname:literal, $fwd:expr, $bwd:expr) => {
        pub fn $name(self) -> Tensor<'g, E> {
            let x = self.g.value_of(self.id);
            let y = x.mapv($fwd);
            let tracked = self.g.tracked(self.id);
            let pid = self.id;
            let back: Option<BackFn<E>> = if tracked {
                Some(Box::new(move |gout, values, grads| {
                    let x = &values[pid];
                    let mut g = gout.clone();
                    ndarray::Zip::from(&mut g).and(x).for_each(|gi, &xi| {
                        *gi = *gi * ($bwd)(xi);
                    });
                    acc(&mut grads[pid], g);
                }))
            } else {
                None
            };
            let id = self.g.push(y, tracked, back, None);
            Tensor { g: self.g, id }
        }
    };
}

impl<'g, E: Elem> Tensor<'g, E> {
    pub fn value(&self) -> ArrayD<E> {
        self.g.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.shape_of(self.id)
    }

    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.len(), 1);
        v.iter().next().map(|e| e.as_f64()).unwrap_or(0.0)
    }

    /// New untracked leaf with the same value.
    pub fn detach(self) -> Tensor<'g, E> {
        self.g.constant(self.value())
    }

    fn same_graph(&self, other: &Tensor<'g, E>) -> Result<(), TensorError> {
        if std::ptr::eq(self.g, other.g) {
            Ok(())
        } else {
            Err(TensorError::GraphMismatch)
        }
    }

    fn binary_elementwise(
        self,
        other: Tensor<'g, E>,
        op: &'static str,
        fwd: impl Fn(E, E) -> E,
        bwd_a: impl Fn(E, E, E) -> E + Send + 'static,
        bwd_b: impl Fn(E, E, E) -> E + Send + 'static,
    ) -> Result<Tensor<'g, E>, TensorError> {
        self.same_graph(&other)?;
        let a = self.g.value_of(self.id);
        let b = self.g.value_of(other.id);
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut y = a.clone();
        ndarray::Zip::from(&mut y).and(&b).for_each(|yi, &bi| *yi = fwd(*yi, bi));
        let ta = self.g.tracked(self.id);
        let tb = self.g.tracked(other.id);
        let (pa, pb) = (self.id, other.id);
        let back: Option<BackFn<E>> = if ta || tb {
            Some(Box::new(move |gout, values, grads| {
                let a = &values[pa];
                let b = &values[pb];
                if ta {
                    let mut ga = gout.clone();
                    ndarray::Zip::from(&mut ga).and(a).and(b).for_each(|gi, &ai, &bi| {
                        *gi = bwd_a(*gi, ai, bi);
                    });
                    acc(&mut grads[pa], ga);
                }
                if tb {
                    let mut gb = gout.clone();
                    ndarray::Zip::from(&mut gb).and(a).and(b).for_each(|gi, &ai, &bi| {
                        *gi = bwd_b(*gi, ai, bi);
                    });
                    acc(&mut grads[pb], gb);
                }
            }))
        } else {
            None
        };
        let id = self.g.push(y, ta || tb, back, None);
        Ok(Tensor { g: self.g, id })
    }

    pub fn add(self, other: Tensor<'g, E>) -> Result<Tensor<'g, E>, TensorError> {
        self.binary_elementwise(other, "add", |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(self, other: Tensor<'g, E>) -> Result<Tensor<'g, E>, TensorError> {
        self.binary_elementwise(other, "sub", |a, b| a - b, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(self, other: Tensor<'g, E>) -> Result<Tensor<'g, E>, TensorError> {
        self.binary_elementwise(other, "mul", |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    pub fn div(self, other: Tensor<'g, E>) -> Result<Tensor<'g, E>, TensorError> {
        self.binary_elementwise(
            other,
            "div",
            |a, b| a / b,
            |g, _, b| g / b,
            |g, a, b| -g * a / (b * b),
        )
    }

    /// Elementwise minimum; gradient follows the smaller input (ties go to
    /// the first argument).
    pub fn min2(self, other: Tensor<'g, E>) -> Result<Tensor<'g, E>, TensorError> {
        self.binary_elementwise(
            other,
            "min2",
            |a, b| if a <= b { a } else { b },
            |g, a, b| if a <= b { g } else { E::zero() },
            |g, a, b| if a <= b { E::zero() } else { g },
        )
    }

    pub fn add_scalar(self, c: f64) -> Tensor<'g, E> {
        let c = E::from_f64(c);
        let y = self.g.value_of(self.id).mapv(|v| v + c);
        let tracked = self.g.tracked(self.id);
        let pid = self.id;
        let back: Option<BackFn<E>> = if tracked {
            Some(Box::new(move |gout, _values, grads| {
                acc_view(&mut grads[pid], gout);
            }))
        } else {
            None
        };
        let id = self.g.push(y, tracked, back, None);
        Tensor { g: self.g, id }
    }

    pub fn mul_scalar(self, c: f64) -> Tensor<'g, E> {
        let ce = E::from_f64(c);
        let y = self.g.value_of(self.id).mapv(|v| v * ce);
        let tracked = self.g.tracked(self.id);
        let pid = self.id;
        let back: Option<BackFn<E>> = if tracked {
            Some(Box::new(move |gout, _values, grads| {
                acc(&mut grads[pid], gout.mapv(|v| v * ce));
            }))
        } else {
            None
        };
        let id = self.g.push(y, tracked, back, None);
        Tensor { g: self.g, id }
    }

    pub fn neg(self) -> Tensor<'g, E> {
        self.mul_scalar(-1.0)
    }

    /// Clamp into `[lo, hi]`; gradient passes where the input is inside the
    /// closed interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Tensor<'g, E> {
        let (le, he) = (E::from_f64(lo), E::from_f64(hi));
        let y = self
            .g
            .value_of(self.id)
            .mapv(|v| if v < le { le } else if v > he { he } else { v });
        let tracked = self.g.tracked(self.id);
        let pid = self.id;
        let back: Option<BackFn<E>> = if tracked {
            Some(Box::new(move |gout, values, grads| {
                let x = &values[pid];
                let mut g = gout.clone();
                ndarray::Zip::from(&mut g).and(x).for_each(|gi, &xi| {
                    if xi < le || xi > he {
                        *gi = E::zero();
                    }
                });
                acc(&mut grads[pid], g);
            }))
        } else {
            None
        };
        let id = self.g.push(y, tracked, back, None);
        Tensor { g: self.g, id }
    }

    unary_op!(relu, "relu", |v: E| if v > E::zero() { v } else { E::zero() },
        |x: E| if x > E::zero() { E::one() } else { E::zero() });
    unary_op!(exp, "exp", |v: E| v.exp(), |x: E| x.exp());
    unary_op!(ln, "ln", |v: E| v.ln(), |x: E| E::one() / x);
    unary_op!(square, "square", |v: E| v * v, |x: E| E::from_f64(2.0) * x);

    pub fn tanh_act(self) -> Tensor<'g, E> {
        let y = self.g.value_of(self.id).mapv(|v| v.tanh());
        let tracked = self.g.tracked(self.id);
        let pid = self.id;
        let out_id = self.g.inner.borrow().values.len();
        let back: Option<BackFn<E>> = if tracked {
            Some(Box::new(move |gout, values, grads| {
                let y = &values[out_id];
                let mut g = gout.clone();
                ndarray::Zip::from(&mut g).and(y).for_each(|gi, &yi| {
                    *gi = *gi * (E::one() - yi * yi);
                });
                acc(&mut grads[pid], g);
            }))
        } else {
            None
        };
        let id = self.g.push(y, tracked, back, None);
        debug_assert_eq!(id, out_id);
        Tensor { g: self.g, id }
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(self) -> Tensor<'g, E> {
        let y = self.g.value_of(self.id).mapv(softplus_stable);
        let tracked = self.g.tracked(self.id);
        let pid = self.id;
        let back: Option<BackFn<E>> = if tracked {
            Some(Box::new(move |gout, values, grads| {
                let x = &values[pid];
                let mut g = gout.clone();
                ndarray::Zip::from(&mut g).and(x).for_each(|gi, &xi| {
                    // sigmoid(x), stable in both tails
                    let s = if xi >= E::zero() {
                        E::one() / (E::one() + (-xi).exp())
                    } else {
                        let e = xi.exp();
                        e / (E::one() + e)
                    };
                    *gi = *gi * s;
                });
                acc(&mut grads[pid], g);
            }))
        } else {
            None
        };
        let id = self.g.push(y, tracked, back, None);
        Tensor { g: self.g, id }
    }

    fn as2(&self, op: &'static str) -> Result<Array2<E>, TensorError> {
        self.value()
            .into_dimensionality::<Ix2>()
            .map_err(|_| TensorError::BadShape {
                op,
                expected: "2-d tensor".into(),
                got: self.shape(),
            })
    }

    /// `(n, k) x (k, m) -> (n, m)`.
    pub fn matmul(self, other: Tensor<'g, E>) -> Result<Tensor<'g, E>, TensorError> {
        self.same_graph(&other)?;
        let a = self.as2("matmul")?;
        let b = other.as2("matmul")?;
        if a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let y = a.dot(&b).into_dyn();
        let (ta, tb) = (self.g.tracked(self.id), self.g.tracked(other.id));
        let (pa, pb) = (self.id, other.id);
        let back: Option<BackFn<E>> = if ta || tb {
            Some(Box::new(move |gout, values, grads| {
                let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                if ta {
                    let b2 = values[pb].view().into_dimensionality::<Ix2>().unwrap();
                    acc(&mut grads[pa], g2.dot(&b2.t()).into_dyn());
                }
                if tb {
                    let a2 = values[pa].view().into_dimensionality::<Ix2>().unwrap();
                    acc(&mut grads[pb], a2.t().dot(&g2).into_dyn());
                }
            }))
        } else {
            None
        };
        let id = self.g.push(y, ta || tb, back, None);
        Ok(Tensor { g: self.g, id })
    }

    /// `(n, k) x (m, k)^T -> (n, m)`.
    pub fn matmul_nt(self, other: Tensor<'g, E>) -> Result<Tensor<'g, E>, TensorError> {
        self.same_graph(&other)?;
        let a = self.as2("matmul_nt")?;
        let b = other.as2("matmul_nt")?;
        if a.shape()[1] != b.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let y = a.dot(&b.t()).into_dyn();
        let (ta, tb) = (self.g.tracked(self.id), self.g.tracked(other.id));
        let (pa, pb) = (self.id, other.id);
        let back: Option<BackFn<E>> = if ta || tb {
            Some(Box::new(move |gout, values, grads| {
                let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                if ta {
                    let b2 = values[pb].view().into_dimensionality::<Ix2>().unwrap();
                    acc(&mut grads[pa], g2.dot(&b2).into_dyn());
                }
                if tb {
                    let a2 = values[pa].view().into_dimensionality::<Ix2>().unwrap();
                    acc(&mut grads[pb], g2.t().dot(&a2).into_dyn());
                }
            }))
        } else {
            None
        };
        let id = self.g.push(y, ta || tb, back, None);
        Ok(Tensor { g: self.g, id })
    }

    /// `(n, d) + (d,)` broadcast over rows.
    pub fn add_rowvec(self, bias: Tensor<'g, E>) -> Result<Tensor<'g, E>, TensorError> {
        self.same_graph(&bias)?;
        let x = self.as2("add_rowvec")?;
        let b = bias
            .value()
            .into_dimensionality::<Ix1>()
            .map_err(|_| TensorError::BadShape {
                op: "add_rowvec",
                expected: "1-d bias".into(),
                got: bias.shape(),
            })?;
        if x.shape()[1] != b.len() {
            return Err(TensorError::ShapeMismatch {
                op: "add_rowvec",
                lhs: x.shape().to_vec(),
                rhs: vec![b.len()],
            });
        }
        let y = (&x + &b).into_dyn();
        let (ta, tb) = (self.g.tracked(self.id), self.g.tracked(bias.id));
        let (pa, pb) = (self.id, bias.id);
        let back: Option<BackFn<E>> = if ta || tb {
            Some(Box::new(move |gout, _values, grads| {
                let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                if ta {
                    acc_view(&mut grads[pa], gout);
                }
                if tb {
                    acc(&mut grads[pb], g2.sum_axis(Axis(0)).into_dyn());
                }
            }))
        } else {
            None
        };
        let id = self.g.push(y, ta || tb, back, None);
        Ok(Tensor { g: self.g, id })
    }

    /// `(d,) -> (n, d)` copied across rows.
    pub fn broadcast_rows(self, n: usize) -> Result<Tensor<'g, E>, TensorError> {
        let v = self
            .value()
            .into_dimensionality::<Ix1>()
            .map_err(|_| TensorError::BadShape {
                op: "broadcast_rows",
                expected: "1-d tensor".into(),
                got: self.shape(),
            })?;
        let y = v.broadcast((n, v.len())).unwrap().to_owned().into_dyn();
        let tracked = self.g.tracked(self.id);
        let pid = self.id;
        let back: Option<BackFn<E>> = if tracked {
            Some(Box::new(move |gout, _values, grads| {
                let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                acc(&mut grads[pid], g2.sum_axis(Axis(0)).into_dyn());
            }))
        } else {
            None
        };
        let id = self.g.push(y, tracked, back, None);
        Ok(Tensor { g: self.g, id })
    }

    /// `(n, d) -> (n,)` summing along rows.
    pub fn row_sum(self) -> Result<Tensor<'g, E>, TensorError> {
        let x = self.as2("row_sum")?;
        let y = x.sum_axis(Axis(1)).into_dyn();
        let tracked = self.g.tracked(self.id);
        let pid = self.id;
        let d = x.shape()[1];
        let back: Option<BackFn<E>> = if tracked {
            Some(Box::new(move |gout, _values, grads| {
                let g1 = gout.view().into_dimensionality::<Ix1>().unwrap();
                let n = g1.len();
                let mut g = Array2::<E>::zeros((n, d));
                for (i, mut row) in g.outer_iter_mut().enumerate() {
                    row.fill(g1[i]);
                }
                acc(&mut grads[pid], g.into_dyn());
            }))
        } else {
            None
        };
        let id = self.g.push(y, tracked, back, None);
        Ok(Tensor { g: self.g, id })
    }

    pub fn sum_all(self) -> Tensor<'g, E> {
        let x = self.value();
        let s = x.iter().copied().sum::<E>();
        let y = ArrayD::from_elem(IxDyn(&[]), s);
        let tracked = self.g.tracked(self.id);
        let pid = self.id;
        let back: Option<BackFn<E>> = if tracked {
            Some(Box::new(move |gout, values, grads| {
                let gv = *gout.iter().next().unwrap();
                acc(&mut grads[pid], ArrayD::from_elem(values[pid].raw_dim(), gv));
            }))
        } else {
            None
        };
        let id = self.g.push(y, tracked, back, None);
        Tensor { g: self.g, id }
    }

    pub fn mean_all(self) -> Tensor<'g, E> {
        let n = self.value().len().max(1);
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Diagonal of a square matrix: `(n, n) -> (n,)`.
    pub fn take_diag(self) -> Result<Tensor<'g, E>, TensorError> {
        let x = self.as2("take_diag")?;
        let n = x.shape()[0];
        if x.shape()[1] != n {
            return Err(TensorError::BadShape {
                op: "take_diag",
                expected: "square matrix".into(),
                got: x.shape().to_vec(),
            });
        }
        let y = Array1::from_iter((0..n).map(|i| x[(i, i)])).into_dyn();
        let tracked = self.g.tracked(self.id);
        let pid = self.id;
        let back: Option<BackFn<E>> = if tracked {
            Some(Box::new(move |gout, _values, grads| {
                let g1 = gout.view().into_dimensionality::<Ix1>().unwrap();
                let mut g = Array2::<E>::zeros((n, n));
                for i in 0..n {
                    g[(i, i)] = g1[i];
                }
                acc(&mut grads[pid], g.into_dyn());
            }))
        } else {
            None
        };
        let id = self.g.push(y, tracked, back, None);
        Ok(Tensor { g: self.g, id })
    }

    /// Row-wise l2 normalization of `(n, d)`.
    pub fn l2_normalize_rows(self) -> Result<Tensor<'g, E>, TensorError> {
        let x = self.as2("l2_normalize_rows")?;
        let eps = E::from_f64(1e-12);
        let mut y = x.clone();
        for mut row in y.outer_iter_mut() {
            let norm = row.iter().map(|v| *v * *v).sum::<E>().sqrt().max(eps);
            row.mapv_inplace(|v| v / norm);
        }
        let tracked = self.g.tracked(self.id);
        let pid = self.id;
        let out_id = self.g.inner.borrow().values.len();
        let back: Option<BackFn<E>> = if tracked {
            Some(Box::new(move |gout, values, grads| {
                let x2 = values[pid].view().into_dimensionality::<Ix2>().unwrap();
                let y2 = values[out_id].view().into_dimensionality::<Ix2>().unwrap();
                let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array2::<E>::zeros(x2.raw_dim());
                for i in 0..x2.shape()[0] {
                    let norm = x2
                        .row(i)
                        .iter()
                        .map(|v| *v * *v)
                        .sum::<E>()
                        .sqrt()
                        .max(eps);
                    let dot = g2
                        .row(i)
                        .iter()
                        .zip(y2.row(i).iter())
                        .map(|(a, b)| *a * *b)
                        .sum::<E>();
                    for j in 0..x2.shape()[1] {
                        gx[(i, j)] = (g2[(i, j)] - dot * y2[(i, j)]) / norm;
                    }
                }
                acc(&mut grads[pid], gx.into_dyn());
            }))
        } else {
            None
        };
        let id = self.g.push(y.into_dyn(), tracked, back, None);
        debug_assert_eq!(id, out_id);
        Ok(Tensor { g: self.g, id })
    }

    /// Row-wise `log(sum(exp))` of `(n, m) -> (n,)`, stable.
    pub fn logsumexp_rows(self) -> Result<Tensor<'g, E>, TensorError> {
        let x = self.as2("logsumexp_rows")?;
        let mut y = Array1::<E>::zeros(x.shape()[0]);
        for (i, row) in x.outer_iter().enumerate() {
            let m = row.iter().copied().fold(E::neg_infinity(), E::max);
            let s = row.iter().map(|v| (*v - m).exp()).sum::<E>();
            y[i] = m + s.ln();
        }
        let tracked = self.g.tracked(self.id);
        let pid = self.id;
        let out_id = self.g.inner.borrow().values.len();
        let back: Option<BackFn<E>> = if tracked {
            Some(Box::new(move |gout, values, grads| {
                let x2 = values[pid].view().into_dimensionality::<Ix2>().unwrap();
                let lse = values[out_id].view().into_dimensionality::<Ix1>().unwrap();
                let g1 = gout.view().into_dimensionality::<Ix1>().unwrap();
                let mut gx = Array2::<E>::zeros(x2.raw_dim());
                for i in 0..x2.shape()[0] {
                    for j in 0..x2.shape()[1] {
                        gx[(i, j)] = g1[i] * (x2[(i, j)] - lse[i]).exp();
                    }
                }
                acc(&mut grads[pid], gx.into_dyn());
            }))
        } else {
            None
        };
        let id = self.g.push(y.into_dyn(), tracked, back, None);
        debug_assert_eq!(id, out_id);
        Ok(Tensor { g: self.g, id })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor<'g, E>, TensorError> {
        let x = self.value();
        let count: usize = shape.iter().product();
        if count != x.len() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: format!("{} elements", x.len()),
                got: shape.to_vec(),
            });
        }
        let old_shape = x.shape().to_vec();
        let y = to_standard(x)
            .into_shape_with_order(IxDyn(shape))
            .expect("element count checked");
        let tracked = self.g.tracked(self.id);
        let pid = self.id;
        let back: Option<BackFn<E>> = if tracked {
            Some(Box::new(move |gout, _values, grads| {
                let g = to_standard(gout.clone())
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("same element count");
                acc(&mut grads[pid], g);
            }))
        } else {
            None
        };
        let id = self.g.push(y, tracked, back, None);
        Ok(Tensor { g: self.g, id })
    }

    /// `(n, d0), (n, d1), ... -> (n, d0+d1+...)`.
    pub fn concat_cols(parts: &[Tensor<'g, E>]) -> Result<Tensor<'g, E>, TensorError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let g = parts[0].g;
        let mut views = Vec::with_capacity(parts.len());
        let mut widths = Vec::with_capacity(parts.len());
        let mut n_rows = None;
        for p in parts {
            p.same_graph(&parts[0])?;
            let v = p.as2("concat_cols")?;
            match n_rows {
                None => n_rows = Some(v.shape()[0]),
                Some(n) => {
                    if v.shape()[0] != n {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat_cols",
                            lhs: vec![n],
                            rhs: v.shape().to_vec(),
                        });
                    }
                }
            }
            widths.push(v.shape()[1]);
            views.push(v);
        }
        let n = n_rows.unwrap();
        let total: usize = widths.iter().sum();
        let mut y = Array2::<E>::zeros((n, total));
        let mut off = 0;
        for v in &views {
            let w = v.shape()[1];
            y.slice_mut(ndarray::s![.., off..off + w]).assign(v);
            off += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let tracked_flags: Vec<bool> = parts.iter().map(|p| g.tracked(p.id)).collect();
        let any_tracked = tracked_flags.iter().any(|&t| t);
        let widths_cl = widths.clone();
        let back: Option<BackFn<E>> = if any_tracked {
            Some(Box::new(move |gout, _values, grads| {
                let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                let mut off = 0;
                for (k, w) in widths_cl.iter().enumerate() {
                    if tracked_flags[k] {
                        let part = g2.slice(ndarray::s![.., off..off + *w]).to_owned();
                        acc(&mut grads[ids[k]], part.into_dyn());
                    }
                    off += *w;
                }
            }))
        } else {
            None
        };
        let id = g.push(y.into_dyn(), any_tracked, back, None);
        Ok(Tensor { g, id })
    }

    /// Per-row log-density of a diagonal Gaussian with state-independent
    /// log-std: `mean (n, d)`, `log_std (d,)`, observation `x (n, d)` is a
    /// constant. Returns `(n,)`.
    pub fn gaussian_log_prob(
        mean: Tensor<'g, E>,
        log_std: Tensor<'g, E>,
        x: &Array2<E>,
    ) -> Result<Tensor<'g, E>, TensorError> {
        mean.same_graph(&log_std)?;
        let g = mean.g;
        let mu = mean.as2("gaussian_log_prob")?;
        let ls = log_std
            .value()
            .into_dimensionality::<Ix1>()
            .map_err(|_| TensorError::BadShape {
                op: "gaussian_log_prob",
                expected: "1-d log_std".into(),
                got: log_std.shape(),
            })?;
        let (n, d) = (mu.shape()[0], mu.shape()[1]);
        if x.shape() != mu.shape() || ls.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "gaussian_log_prob",
                lhs: mu.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let ln_2pi = E::from_f64((2.0 * std::f64::consts::PI).ln());
        let two = E::from_f64(2.0);
        let mut y = Array1::<E>::zeros(n);
        for i in 0..n {
            let mut lp = E::zero();
            for j in 0..d {
                let sigma = ls[j].exp();
                let u = (x[(i, j)] - mu[(i, j)]) / sigma;
                lp = lp - (u * u + two * ls[j] + ln_2pi) / two;
            }
            y[i] = lp;
        }
        let (tm, tl) = (g.tracked(mean.id), g.tracked(log_std.id));
        let (pm, pl) = (mean.id, log_std.id);
        let x_saved = x.clone();
        let back: Option<BackFn<E>> = if tm || tl {
            Some(Box::new(move |gout, values, grads| {
                let mu = values[pm].view().into_dimensionality::<Ix2>().unwrap();
                let ls = values[pl].view().into_dimensionality::<Ix1>().unwrap();
                let g1 = gout.view().into_dimensionality::<Ix1>().unwrap();
                let (n, d) = (mu.shape()[0], mu.shape()[1]);
                let mut gmu = Array2::<E>::zeros((n, d));
                let mut gls = Array1::<E>::zeros(d);
                for i in 0..n {
                    for j in 0..d {
                        let sigma = ls[j].exp();
                        let u = (x_saved[(i, j)] - mu[(i, j)]) / sigma;
                        if tm {
                            gmu[(i, j)] = g1[i] * u / sigma;
                        }
                        if tl {
                            gls[j] = gls[j] + g1[i] * (u * u - E::one());
                        }
                    }
                }
                if tm {
                    acc(&mut grads[pm], gmu.into_dyn());
                }
                if tl {
                    acc(&mut grads[pl], gls.into_dyn());
                }
            }))
        } else {
            None
        };
        let id = g.push(y.into_dyn(), tm || tl, back, None);
        Ok(Tensor { g, id })
    }

    /// 2-d convolution; see [`super::conv::conv2d`].
    pub fn conv2d(
        self,
        weight: Tensor<'g, E>,
        bias: Tensor<'g, E>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<'g, E>, TensorError> {
        super::conv::conv2d(self, weight, bias, stride, padding)
    }
}

fn softplus_stable<E: Elem>(x: E) -> E {
    let z = if x > E::zero() { x } else { E::zero() };
    z + (E::one() + (-x.abs()).exp()).ln()
}

// Internal accessors for the conv kernels.
impl<'g, E: Elem> Tensor<'g, E> {
    pub(crate) fn graph(&self) -> &'g Graph<E> {
        self.g
    }
    pub(crate) fn id(&self) -> usize {
        self.id
    }
}

impl<E: Elem> Graph<E> {
    pub(crate) fn push_node(
        &self,
        value: ArrayD<E>,
        tracked: bool,
        back: Option<BackFn<E>>,
    ) -> usize {
        self.push(value, tracked, back, None)
    }
    pub(crate) fn is_tracked(&self, id: usize) -> bool {
        self.tracked(id)
    }
    pub(crate) fn make_tensor(&self, id: usize) -> Tensor<'_, E> {
        Tensor { g: self, id }
    }
}
