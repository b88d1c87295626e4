//! Named traversal over parameter tensors.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A structure owning named parameter tensors.
///
/// Visitation order must be stable: checkpoints, checksums and the gradient
/// checker all rely on it.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
}

impl Parameters for Tensor {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("", self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("", self)
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, p) in self.iter().enumerate() {
            visit_scoped(p, &format!("{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            visit_scoped_mut(p, &format!("{i}"), f);
        }
    }
}

/// Affine map `x · Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

impl Affine {
    /// Gaussian weights with standard deviation `scale`, zero bias, trainable.
    pub fn init(out: usize, inp: usize, scale: f64, rng: &mut SeededRng) -> Self {
        Self {
            w: Tensor::randn(&[out, inp], scale, rng).trainable(),
            b: Tensor::zeros(&[out]).trainable(),
        }
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            w: Tensor::zeros(&[out, inp]).trainable(),
            b: Tensor::zeros(&[out]).trainable(),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    /// Untaped evaluation on a single input vector.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("affine", &[x.len()], self.w.shape()));
        }
        let mut out = self.b.data().to_vec();
        kernels::matmul_bt_acc(x, self.w.data(), &mut out, 1, self.in_dim(), self.out_dim());
        Ok(out)
    }

    pub fn record<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        tape.linear(x, w, Some(b))
    }

    pub fn freeze(&mut self) {
        self.w.freeze();
        self.b.freeze();
    }
}

impl Parameters for Affine {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_scoped(&self.w, "w", f);
        visit_scoped(&self.b, "b", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_scoped_mut(&mut self.w, "w", f);
        visit_scoped_mut(&mut self.b, "b", f);
    }
}

fn join(prefix: &str, name: &str) -> String {
    if name.is_empty() {
        String::from(prefix)
    } else {
        format!("{prefix}.{name}")
    }
}

/// Visits `p` with every name prefixed by `prefix.`.
pub fn visit_scoped<P: Parameters + ?Sized>(p: &P, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
    p.visit(&mut |name, t| f(&join(prefix, name), t));
}

pub fn visit_scoped_mut<P: Parameters + ?Sized>(
    p: &mut P,
    prefix: &str,
    f: &mut dyn FnMut(&str, &mut Tensor),
) {
    p.visit_mut(&mut |name, t| f(&join(prefix, name), t));
}

pub fn names<P: Parameters + ?Sized>(p: &P) -> Vec<String> {
    let mut out = Vec::new();
    p.visit(&mut |n, _| out.push(String::from(n)));
    out
}

pub fn count<P: Parameters + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit(&mut |_, t| n += t.len());
    n
}

pub fn zero_grads<P: Parameters + ?Sized>(p: &mut P) {
    p.visit_mut(&mut |_, t| t.zero_grad());
}

/// Plain gradient descent on every trainable, unfrozen tensor; clears the
/// gradient buffers afterwards.
pub fn sgd_step<P: Parameters + ?Sized>(p: &mut P, lr: f64) {
    p.visit_mut(&mut |_, t| {
        if t.is_trainable() {
            if let Some(g) = t.grad().map(|g| g.to_vec()) {
                for (w, d) in t.data_mut().iter_mut().zip(g) {
                    *w -= lr * d;
                }
            }
        }
        t.zero_grad();
    });
}

/// FNV-1a over names, shapes and value bits. Equal checksums mean the
/// parameter sets are bit-identical (up to hash collisions).
pub fn checksum<P: Parameters + ?Sized>(p: &P) -> u64 {
    const PRIME: u64 = 0x100_0000_01B3;
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    p.visit(&mut |name, t| {
        feed(name.as_bytes());
        for &d in t.shape() {
            feed(&(d as u64).to_le_bytes());
        }
        feed(&[t.is_frozen() as u8]);
        for &x in t.data() {
            feed(&x.to_bits().to_le_bytes());
        }
    });
    h
}
