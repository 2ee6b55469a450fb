//! Elementwise, shape and reduction primitives.

use crate::error::{arg_err, shape_err, Result};
use crate::real::Real;
use crate::tape::{add_into, Op, Tape, Var};

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        self.push(self.shape(a).to_vec(), value, Op::Relu(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * factor).collect();
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, factor))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err("add_broadcast", format!("{sb:?} is not a suffix of {sa:?}"));
        }
        let bv = self.value(b);
        let m = bv.len();
        let mut value = self.value(a).to_vec();
        for chunk in value.chunks_mut(m) {
            add_into(chunk, bv);
        }
        Ok(self.push(sa.to_vec(), value, Op::AddBroadcast(a, b)))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return arg_err("softmax", format!("axis {axis} out of range for rank {}", shape.len()));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let x = self.value(input);
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..len {
                    mx = mx.max(x[base + a * inner]);
                }
                let mut sum = T::zero();
                for a in 0..len {
                    let e = (x[base + a * inner] - mx).exp();
                    y[base + a * inner] = e;
                    sum += e;
                }
                for a in 0..len {
                    y[base + a * inner] = y[base + a * inner] / sum;
                }
            }
        }
        Ok(self.push(shape, y, Op::Softmax { input, axis }))
    }

    /// `out[i] = input[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, input: Var, shape: &[usize], index: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != index.len() {
            return shape_err("gather", format!("index length {} vs shape {shape:?}", index.len()));
        }
        let x = self.value(input);
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return arg_err("gather", format!("index {bad} out of range for {} elements", x.len()));
        }
        let value = index.iter().map(|&i| x[i]).collect();
        Ok(self.push(shape.to_vec(), value, Op::Gather { input, index }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(input).len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(input)));
        }
        let value = self.value(input).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(input)))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return arg_err("concat", "no inputs");
        };
        let ref_shape = self.shape(first).to_vec();
        if axis >= ref_shape.len() {
            return arg_err("concat", format!("axis {axis} out of range"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != ref_shape.len()
                || s.iter().zip(&ref_shape).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return shape_err("concat", format!("{s:?} incompatible with {ref_shape:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = ref_shape.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        Ok(self.push(shape, value, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let mut shape = self.shape(input).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return arg_err("slice", format!("range {start}..{} on axis {axis} of {shape:?}", start + len));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let x = self.value(input);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            value.extend_from_slice(&x[base..base + len * inner]);
        }
        shape[axis] = len;
        Ok(self.push(shape, value, Op::Slice { input, axis, start }))
    }

    /// For rank-3 `base` `[B, R, D]` and `addend` `[B, r, D]`, adds `addend`
    /// into rows `offset..offset + r`; the remaining rows pass through
    /// bit-unchanged.
    pub fn add_to_rows(&mut self, base: Var, addend: Var, offset: usize) -> Result<Var> {
        let (sb, sa) = (self.shape(base).to_vec(), self.shape(addend));
        if sb.len() != 3 || sa.len() != 3 || sb[0] != sa[0] || sb[2] != sa[2] || offset + sa[1] > sb[1] {
            return shape_err("add_to_rows", format!("base {sb:?}, addend {sa:?}, offset {offset}"));
        }
        let (rows, d) = (sa[1], sb[2]);
        let mut value = self.value(base).to_vec();
        let av = self.value(addend);
        for b in 0..sb[0] {
            let dst = (b * sb[1] + offset) * d;
            let src = b * rows * d;
            add_into(&mut value[dst..dst + rows * d], &av[src..src + rows * d]);
        }
        Ok(self.push(sb, value, Op::AddToRows { base, addend, offset }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.iter().copied().sum::<T>() / T::from_usize(x.len()).unwrap();
        self.push(vec![], vec![s], Op::Mean(a))
    }
}

pub(crate) fn softmax_backward<T: Real>(
    tape: &Tape<T>,
    id: usize,
    g: &[T],
    input: Var,
    axis: usize,
    grads: &mut [Option<Vec<T>>],
) {
    let node = &tape.nodes[id];
    let y = &node.value;
    let (outer, len, inner) = axis_extents(&node.shape, axis);
    let Some(dx) = tape.grad_buf(input, grads) else { return };
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for a in 0..len {
                let j = base + a * inner;
                dot += g[j] * y[j];
            }
            for a in 0..len {
                let j = base + a * inner;
                dx[j] += y[j] * (g[j] - dot);
            }
        }
    }
}

pub(crate) fn concat_backward<T: Real>(
    tape: &Tape<T>,
    id: usize,
    g: &[T],
    inputs: &[Var],
    axis: usize,
    grads: &mut [Option<Vec<T>>],
) {
    let shape = &tape.nodes[id].shape;
    let (outer, total, inner) = axis_extents(shape, axis);
    let mut offset = 0;
    for &v in inputs {
        let len = tape.shape(v)[axis] * inner;
        if let Some(dx) = tape.grad_buf(v, grads) {
            for o in 0..outer {
                let src = o * total * inner + offset;
                add_into(&mut dx[o * len..(o + 1) * len], &g[src..src + len]);
            }
        }
        offset += len;
    }
}

pub(crate) fn slice_backward<T: Real>(
    tape: &Tape<T>,
    id: usize,
    g: &[T],
    input: Var,
    axis: usize,
    start: usize,
    grads: &mut [Option<Vec<T>>],
) {
    let len = tape.nodes[id].shape[axis];
    let (outer, full, inner) = axis_extents(tape.shape(input), axis);
    let Some(dx) = tape.grad_buf(input, grads) else { return };
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        let src = o * len * inner;
        add_into(&mut dx[dst..dst + len * inner], &g[src..src + len * inner]);
    }
}

pub(crate) fn add_to_rows_backward<T: Real>(
    tape: &Tape<T>,
    g: &[T],
    base: Var,
    addend: Var,
    offset: usize,
    grads: &mut [Option<Vec<T>>],
) {
    if let Some(db) = tape.grad_buf(base, grads) {
        add_into(db, g);
    }
    let sb = tape.shape(base);
    let sa = tape.shape(addend);
    let (rows, d, total) = (sa[1], sa[2], sb[1]);
    if let Some(da) = tape.grad_buf(addend, grads) {
        for b in 0..sa[0] {
            let src = (b * total + offset) * d;
            let dst = b * rows * d;
            add_into(&mut da[dst..dst + rows * d], &g[src..src + rows * d]);
        }
    }
}
