//! Scalar reverse-mode automatic differentiation on a flat tape.
//!
//! The log-posterior is assembled once per evaluation from `Var` scalars;
//! a single reverse sweep then yields the full gradient. The same model
//! code runs on plain `f64` through the [`Real`] trait, which is used for
//! summaries, simulation, and finite-difference checks.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar abstraction the forward model is written against.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn expm1(self) -> Self;
    /// `self + c` for a constant.
    fn addf(self, c: f64) -> Self;
    /// `self * c` for a constant.
    fn mulf(self, c: f64) -> Self;
    /// `c - self` for a constant.
    fn fsub(self, c: f64) -> Self;
    /// `c / self` for a constant.
    fn fdiv(self, c: f64) -> Self;
    /// `self * b + acc`.
    fn fma(self, b: Self, acc: Self) -> Self;
    /// `self * c + acc` for a constant `c`.
    fn fmaf(self, c: f64, acc: Self) -> Self;
    /// A constant in the same evaluation context as `self`.
    fn lift(self, c: f64) -> Self;
    fn subf(self, c: f64) -> Self {
        self.addf(-c)
    }
    fn divf(self, c: f64) -> Self {
        self.mulf(1.0 / c)
    }
    fn sq(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    #[inline]
    fn expm1(self) -> f64 {
        f64::exp_m1(self)
    }
    #[inline]
    fn addf(self, c: f64) -> f64 {
        self + c
    }
    #[inline]
    fn mulf(self, c: f64) -> f64 {
        self * c
    }
    #[inline]
    fn fsub(self, c: f64) -> f64 {
        c - self
    }
    #[inline]
    fn fdiv(self, c: f64) -> f64 {
        c / self
    }
    #[inline]
    fn fma(self, b: f64, acc: f64) -> f64 {
        self * b + acc
    }
    #[inline]
    fn fmaf(self, c: f64, acc: f64) -> f64 {
        self * c + acc
    }
    #[inline]
    fn lift(self, c: f64) -> f64 {
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    ExpM1,
    AddC,
    MulC,
    CSub,
    CDiv,
    Fma,
    FmaC,
}

/// One recorded operation. Kept as a single struct so recording is one
/// contiguous push.
#[derive(Clone, Copy)]
struct Node {
    a: u32,
    b: u32,
    c: u32,
    op: Op,
    cst: f64,
    val: f64,
}

#[derive(Default)]
struct TapeData {
    nodes: Vec<Node>,
    adj: Vec<f64>,
}

/// Recording tape. Cleared and refilled on every log-posterior evaluation;
/// buffers keep their capacity across evaluations.
pub struct Tape {
    data: RefCell<TapeData>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            data: RefCell::new(TapeData::default()),
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        let t = Tape::new();
        t.data.borrow_mut().nodes.reserve(n);
        t
    }

    pub fn clear(&self) {
        self.data.borrow_mut().nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.data.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn push(&self, op: Op, a: u32, b: u32, c: u32, cst: f64, val: f64) -> Var<'_> {
        let mut d = self.data.borrow_mut();
        let id = d.nodes.len() as u32;
        d.nodes.push(Node {
            a,
            b,
            c,
            op,
            cst,
            val,
        });
        Var {
            tape: self,
            id,
            val,
        }
    }

    /// Differentiable input.
    pub fn leaf(&self, v: f64) -> Var<'_> {
        self.push(Op::Leaf, 0, 0, 0, 0.0, v)
    }

    /// Non-differentiable constant node.
    pub fn constant(&self, v: f64) -> Var<'_> {
        self.push(Op::Const, 0, 0, 0, 0.0, v)
    }

    pub fn value_of(&self, var: Var<'_>) -> f64 {
        var.val
    }

    /// Reverse sweep from `output`; writes d output / d wrt[i] into `out`.
    pub fn gradient(&self, output: Var<'_>, wrt: &[Var<'_>], out: &mut [f64]) {
        assert_eq!(wrt.len(), out.len());
        let mut d = self.data.borrow_mut();
        let n = d.nodes.len();
        d.adj.clear();
        d.adj.resize(n, 0.0);
        d.adj[output.id as usize] = 1.0;
        let TapeData { nodes, adj } = &mut *d;
        for i in (0..n).rev() {
            let w = adj[i];
            if w == 0.0 {
                continue;
            }
            let nd = nodes[i];
            let (ia, ib, ic) = (nd.a as usize, nd.b as usize, nd.c as usize);
            match nd.op {
                Op::Leaf | Op::Const => {}
                Op::Add => {
                    adj[ia] += w;
                    adj[ib] += w;
                }
                Op::Sub => {
                    adj[ia] += w;
                    adj[ib] -= w;
                }
                Op::Mul => {
                    adj[ia] += w * nodes[ib].val;
                    adj[ib] += w * nodes[ia].val;
                }
                Op::Div => {
                    let inv = 1.0 / nodes[ib].val;
                    adj[ia] += w * inv;
                    adj[ib] -= w * nd.val * inv;
                }
                Op::Neg => adj[ia] -= w,
                Op::Exp => adj[ia] += w * nd.val,
                Op::Ln => adj[ia] += w / nodes[ia].val,
                Op::ExpM1 => adj[ia] += w * (nd.val + 1.0),
                Op::AddC => adj[ia] += w,
                Op::MulC => adj[ia] += w * nd.cst,
                Op::CSub => adj[ia] -= w,
                Op::CDiv => adj[ia] -= w * nd.val / nodes[ia].val,
                Op::Fma => {
                    adj[ia] += w * nodes[ib].val;
                    adj[ib] += w * nodes[ia].val;
                    adj[ic] += w;
                }
                Op::FmaC => {
                    adj[ia] += w * nd.cst;
                    adj[ib] += w;
                }
            }
        }
        for (g, v) in out.iter_mut().zip(wrt) {
            *g = adj[v.id as usize];
        }
    }
}

/// Handle to one tape node. Copyable; all arithmetic records new nodes.
/// The node's value is carried inline so reads never touch the tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: u32,
    val: f64,
}

impl<'t> Var<'t> {
    #[inline]
    fn v(self) -> f64 {
        self.val
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn add(self, o: Var<'t>) -> Var<'t> {
        let val = self.v() + o.v();
        self.tape.push(Op::Add, self.id, o.id, 0, 0.0, val)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, o: Var<'t>) -> Var<'t> {
        let val = self.v() - o.v();
        self.tape.push(Op::Sub, self.id, o.id, 0, 0.0, val)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, o: Var<'t>) -> Var<'t> {
        let val = self.v() * o.v();
        self.tape.push(Op::Mul, self.id, o.id, 0, 0.0, val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn div(self, o: Var<'t>) -> Var<'t> {
        let val = self.v() / o.v();
        self.tape.push(Op::Div, self.id, o.id, 0, 0.0, val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn neg(self) -> Var<'t> {
        let val = -self.v();
        self.tape.push(Op::Neg, self.id, 0, 0, 0.0, val)
    }
}

impl<'t> Real for Var<'t> {
    #[inline]
    fn value(self) -> f64 {
        self.v()
    }
    #[inline]
    fn exp(self) -> Self {
        let val = self.v().exp();
        self.tape.push(Op::Exp, self.id, 0, 0, 0.0, val)
    }
    #[inline]
    fn ln(self) -> Self {
        let val = self.v().ln();
        self.tape.push(Op::Ln, self.id, 0, 0, 0.0, val)
    }
    #[inline]
    fn expm1(self) -> Self {
        let val = self.v().exp_m1();
        self.tape.push(Op::ExpM1, self.id, 0, 0, 0.0, val)
    }
    #[inline]
    fn addf(self, c: f64) -> Self {
        let val = self.v() + c;
        self.tape.push(Op::AddC, self.id, 0, 0, c, val)
    }
    #[inline]
    fn mulf(self, c: f64) -> Self {
        let val = self.v() * c;
        self.tape.push(Op::MulC, self.id, 0, 0, c, val)
    }
    #[inline]
    fn fsub(self, c: f64) -> Self {
        let val = c - self.v();
        self.tape.push(Op::CSub, self.id, 0, 0, c, val)
    }
    #[inline]
    fn fdiv(self, c: f64) -> Self {
        let val = c / self.v();
        self.tape.push(Op::CDiv, self.id, 0, 0, c, val)
    }
    #[inline]
    fn fma(self, b: Self, acc: Self) -> Self {
        let val = self.v() * b.v() + acc.v();
        self.tape.push(Op::Fma, self.id, b.id, acc.id, 0.0, val)
    }
    #[inline]
    fn fmaf(self, c: f64, acc: Self) -> Self {
        let val = self.v() * c + acc.v();
        self.tape.push(Op::FmaC, self.id, acc.id, 0, c, val)
    }
    #[inline]
    fn lift(self, c: f64) -> Self {
        self.tape.constant(c)
    }
}
