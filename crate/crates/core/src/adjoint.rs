//! Reverse-mode differentiation over lens parameters.
//!
//! A [`Tape`] records scalar operations as nodes with at most two parents and
//! the local partial derivative towards each. Large vectorised operations, the
//! coherent amplitude sum in particular, are recorded as a single custom node
//! implementing [`CustomAdjoint`]: the tape keeps only what that node declares
//! it saves, and its backward recomputes everything else.
//!
//! ```
//! use lensopt::adjoint::Tape;
//! use lensopt::math::Scalar;
//!
//! let tape = Tape::new();
//! let x = tape.var(3.0);
//! let y = tape.var(4.0);
//! let f = x * y + x.sqrt();
//! let g = tape.backward(f).unwrap();
//! assert_eq!(g.wrt(y), 3.0);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::str::FromStr;

use thiserror::Error;

use crate::math::Scalar;

const NONE: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdjointError {
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("primitive {primitive} expects {expected} operands, got {got}")]
    OperandCount {
        primitive: String,
        expected: usize,
        got: usize,
    },
    #[error("custom node `{name}` returned {got} cotangents for {expected} inputs")]
    ArityMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
}

/// Backward rule for an operation recorded as one opaque node.
///
/// `backward` receives the cotangent of every output, in output order, and
/// must return one cotangent per input, in input order.
pub trait CustomAdjoint {
    fn name(&self) -> &str {
        "custom"
    }
    /// Bytes this node keeps alive between forward and backward.
    fn saved_bytes(&self) -> usize;
    fn backward(&self, output_cotangents: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

struct CustomRecord {
    first_output: u32,
    n_outputs: u32,
    inputs: Vec<u32>,
    op: Box<dyn CustomAdjoint>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    customs: RefCell<Vec<CustomRecord>>,
}

/// Byte accounting of everything a tape holds for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeMemory {
    pub nodes: usize,
    pub node_bytes: usize,
    pub custom: Vec<(String, usize)>,
}

impl TapeMemory {
    pub fn custom_saved_bytes(&self) -> usize {
        self.custom.iter().map(|(_, b)| b).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.node_bytes + self.custom_saved_bytes()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable leaf.
    pub fn var(&self, value: f64) -> Var<'_> {
        let index = self.push(Node {
            parents: [NONE, NONE],
            partials: [0.0, 0.0],
        });
        Var {
            tape: Some(self),
            index,
            value,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn memory(&self) -> TapeMemory {
        let nodes = self.len();
        TapeMemory {
            nodes,
            node_bytes: nodes * std::mem::size_of::<Node>(),
            custom: self
                .customs
                .borrow()
                .iter()
                .map(|c| (c.op.name().to_string(), c.op.saved_bytes()))
                .collect(),
        }
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len() as u32;
        assert!(index != NONE, "tape exhausted the node index space");
        nodes.push(node);
        index
    }

    fn unary<'t>(&'t self, parent: u32, partial: f64, value: f64) -> Var<'t> {
        let index = self.push(Node {
            parents: [parent, NONE],
            partials: [partial, 0.0],
        });
        Var {
            tape: Some(self),
            index,
            value,
        }
    }

    fn binary<'t>(&'t self, parents: [u32; 2], partials: [f64; 2], value: f64) -> Var<'t> {
        let index = self.push(Node { parents, partials });
        Var {
            tape: Some(self),
            index,
            value,
        }
    }

    /// Register an operation with a hand-written adjoint. Constant inputs are
    /// allowed; their cotangents are dropped.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        outputs: Vec<f64>,
        op: Box<dyn CustomAdjoint>,
    ) -> Vec<Var<'t>> {
        let first = self.len() as u32;
        let out: Vec<Var<'t>> = outputs
            .into_iter()
            .map(|v| {
                let index = self.push(Node {
                    parents: [NONE, NONE],
                    partials: [0.0, 0.0],
                });
                Var {
                    tape: Some(self),
                    index,
                    value: v,
                }
            })
            .collect();
        self.customs.borrow_mut().push(CustomRecord {
            first_output: first,
            n_outputs: out.len() as u32,
            inputs: inputs.iter().map(|v| v.index).collect(),
            op,
        });
        out
    }

    /// Record a named primitive. Mostly useful for building graphs from data;
    /// ordinary code uses the operator overloads on [`Var`].
    pub fn record<'t>(
        &'t self,
        primitive: Primitive,
        args: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>, AdjointError> {
        let expected = primitive.arity();
        if args.len() != expected {
            return Err(AdjointError::OperandCount {
                primitive: format!("{primitive:?}"),
                expected,
                got: args.len(),
            });
        }
        let a = args;
        Ok(match primitive {
            Primitive::Add => vec![a[0] + a[1]],
            Primitive::Sub => vec![a[0] - a[1]],
            Primitive::Mul => vec![a[0] * a[1]],
            Primitive::Div => vec![a[0] / a[1]],
            Primitive::Neg => vec![-a[0]],
            Primitive::Sqrt => vec![a[0].sqrt()],
            Primitive::Sin => vec![a[0].sin()],
            Primitive::Cos => vec![a[0].cos()],
            Primitive::Powi(n) => vec![a[0].powi(n)],
            Primitive::ExpI => vec![a[0].cos(), a[0].sin()],
            Primitive::Dot => {
                vec![a[0] * a[3] + a[1] * a[4] + a[2] * a[5]]
            }
            Primitive::Cross => vec![
                a[1] * a[5] - a[2] * a[4],
                a[2] * a[3] - a[0] * a[5],
                a[0] * a[4] - a[1] * a[3],
            ],
            Primitive::Norm => vec![(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()],
        })
    }

    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, AdjointError> {
        self.backward_seeded(&[(output, 1.0)])
    }

    /// Reverse sweep with an arbitrary set of output cotangents.
    pub fn backward_seeded(&self, seeds: &[(Var<'_>, f64)]) -> Result<Gradients, AdjointError> {
        let nodes = self.nodes.borrow();
        let customs = self.customs.borrow();
        let mut adj = vec![0.0; nodes.len()];
        let mut connected = false;
        for (v, s) in seeds {
            if !v.is_constant() {
                adj[v.index as usize] += s;
                connected = true;
            }
        }
        if !connected {
            log::warn!("backward seeded only with constants; all gradients are zero");
            return Ok(Gradients { adj });
        }

        // A custom node runs once every node after its last output is done.
        let mut pending = customs.len();
        for i in (0..=nodes.len()).rev() {
            while pending > 0 {
                let rec = &customs[pending - 1];
                let hi = (rec.first_output + rec.n_outputs) as usize;
                if i >= hi {
                    break;
                }
                let lo = rec.first_output as usize;
                let cot = rec.op.backward(&adj[lo..hi]);
                if cot.len() != rec.inputs.len() {
                    return Err(AdjointError::ArityMismatch {
                        name: rec.op.name().to_string(),
                        expected: rec.inputs.len(),
                        got: cot.len(),
                    });
                }
                for (&inp, c) in rec.inputs.iter().zip(cot) {
                    if inp != NONE {
                        adj[inp as usize] += c;
                    }
                }
                pending -= 1;
            }
            if i == 0 {
                break;
            }
            let i = i - 1;
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NONE {
                    adj[p as usize] += a * node.partials[k];
                }
            }
        }
        Ok(Gradients { adj })
    }
}

/// Adjoints of every tape node after a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        if v.is_constant() {
            0.0
        } else {
            self.adj[v.index as usize]
        }
    }
}

/// Names of the operations [`Tape::record`] accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sqrt,
    Sin,
    Cos,
    Powi(i32),
    /// `e^{i x}` as the pair (cos x, sin x).
    ExpI,
    Dot,
    Cross,
    Norm,
}

impl Primitive {
    pub fn arity(self) -> usize {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => 2,
            Primitive::Neg
            | Primitive::Sqrt
            | Primitive::Sin
            | Primitive::Cos
            | Primitive::Powi(_)
            | Primitive::ExpI => 1,
            Primitive::Dot | Primitive::Cross => 6,
            Primitive::Norm => 3,
        }
    }
}

impl FromStr for Primitive {
    type Err = AdjointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "div" => Primitive::Div,
            "neg" => Primitive::Neg,
            "sqrt" => Primitive::Sqrt,
            "sin" => Primitive::Sin,
            "cos" => Primitive::Cos,
            "expi" => Primitive::ExpI,
            "dot" => Primitive::Dot,
            "cross" => Primitive::Cross,
            "norm" => Primitive::Norm,
            other => {
                if let Some(n) = other.strip_prefix("pow") {
                    if let Ok(n) = n.parse() {
                        return Ok(Primitive::Powi(n));
                    }
                }
                return Err(AdjointError::UnsupportedPrimitive(other.to_string()));
            }
        })
    }
}

/// A taped scalar. Constants carry no tape and cost nothing to combine.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    index: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_constant() {
            write!(f, "Const({})", self.value)
        } else {
            write!(f, "Var#{}({})", self.index, self.value)
        }
    }
}

impl<'t> Var<'t> {
    pub fn is_constant(&self) -> bool {
        self.tape.is_none()
    }

    fn map(self, value: f64, partial: f64) -> Self {
        match self.tape {
            None => Var::constant(value),
            Some(t) => t.unary(self.index, partial, value),
        }
    }

    fn combine(a: Self, b: Self, value: f64, da: f64, db: f64) -> Self {
        match (a.tape, b.tape) {
            (None, None) => Var::constant(value),
            (Some(t), None) => t.unary(a.index, da, value),
            (None, Some(t)) => t.unary(b.index, db, value),
            (Some(t), Some(_)) => t.binary([a.index, b.index], [da, db], value),
        }
    }
}

impl Scalar for Var<'_> {
    fn constant(value: f64) -> Self {
        Var {
            tape: None,
            index: NONE,
            value,
        }
    }
    #[inline]
    fn value(self) -> f64 {
        self.value
    }
    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.map(s, 0.5 / s)
    }
    fn sin(self) -> Self {
        self.map(self.value.sin(), self.value.cos())
    }
    fn cos(self) -> Self {
        self.map(self.value.cos(), -self.value.sin())
    }
    fn powi(self, n: i32) -> Self {
        let d = if n == 0 {
            0.0
        } else {
            n as f64 * self.value.powi(n - 1)
        };
        self.map(self.value.powi(n), d)
    }
    fn custom(inputs: &[Self], outputs: Vec<f64>, op: Box<dyn CustomAdjoint>) -> Vec<Self> {
        match inputs.iter().find_map(|v| v.tape) {
            Some(tape) => tape.custom(inputs, outputs, op),
            None => outputs.into_iter().map(Var::constant).collect(),
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Self) -> Self {
        Var::combine(self, o, self.value + o.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Self) -> Self {
        Var::combine(self, o, self.value - o.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Self) -> Self {
        Var::combine(self, o, self.value * o.value, o.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Self) -> Self {
        let q = self.value / o.value;
        Var::combine(self, o, q, 1.0 / o.value, -q / o.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.map(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: f64) -> Self {
        self.map(self.value + o, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: f64) -> Self {
        self.map(self.value - o, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: f64) -> Self {
        self.map(self.value * o, o)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: f64) -> Self {
        self.map(self.value / o, 1.0 / o)
    }
}
