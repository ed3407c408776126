//! A flat op-sequence form of the primitive table, evaluated onto a tape.

use std::sync::Arc;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One primitive. Operands index the value list: program inputs first, then
/// the result of each preceding instruction.
#[derive(Clone, Debug, PartialEq)]
pub enum Instr {
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Softplus(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    Gather(usize, Vec<usize>),
    ScatterAdd(usize, Vec<usize>, usize),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Program {
    pub instrs: Vec<Instr>,
}

impl Program {
    pub fn new(instrs: Vec<Instr>) -> Self {
        Self { instrs }
    }
}

#[derive(Clone, Debug)]
pub struct Input {
    pub value: Tensor,
    pub requires_grad: bool,
}

impl Input {
    pub fn grad(value: Tensor) -> Self {
        Self {
            value,
            requires_grad: true,
        }
    }

    pub fn constant(value: Tensor) -> Self {
        Self {
            value,
            requires_grad: false,
        }
    }
}

/// Result of [`eval_graph`]: the tape holds the full record when any input
/// requires a gradient, and only forward values otherwise.
#[derive(Debug)]
pub struct Evaluation {
    pub tape: Tape,
    pub inputs: Vec<Var>,
    pub output: Var,
}

impl Evaluation {
    pub fn value(&self) -> &Tensor {
        self.tape.value(self.output)
    }
}

pub fn eval_graph(inputs: &[Input], program: &Program) -> Result<Evaluation> {
    if program.instrs.is_empty() {
        return Err(Error::invalid("eval_graph: empty program"));
    }
    let mut tape = if inputs.iter().any(|i| i.requires_grad) {
        Tape::new()
    } else {
        Tape::inference()
    };
    let mut values: Vec<Var> = Vec::with_capacity(inputs.len() + program.instrs.len());
    for input in inputs {
        let v = if input.requires_grad {
            tape.leaf(input.value.clone())?
        } else {
            tape.constant(input.value.clone())?
        };
        values.push(v);
    }
    let input_vars = values.clone();
    for (pc, instr) in program.instrs.iter().enumerate() {
        let get = |i: usize| {
            values
                .get(i)
                .copied()
                .ok_or_else(|| Error::invalid(format!("instruction {pc}: operand {i} not yet defined")))
        };
        let v = match instr {
            Instr::MatMul(a, b) => tape.matmul(get(*a)?, get(*b)?)?,
            Instr::Add(a, b) => tape.add(get(*a)?, get(*b)?)?,
            Instr::Mul(a, b) => tape.mul(get(*a)?, get(*b)?)?,
            Instr::Sin(a) => tape.sin(get(*a)?)?,
            Instr::Cos(a) => tape.cos(get(*a)?)?,
            Instr::Exp(a) => tape.exp(get(*a)?)?,
            Instr::Softplus(a) => tape.softplus(get(*a)?)?,
            Instr::Sigmoid(a) => tape.sigmoid(get(*a)?)?,
            Instr::Relu(a) => tape.relu(get(*a)?)?,
            Instr::Softmax(a) => tape.softmax(get(*a)?)?,
            Instr::Sum(a) => tape.sum(get(*a)?)?,
            Instr::Mean(a) => tape.mean(get(*a)?)?,
            Instr::Gather(a, idx) => tape.gather_rows(get(*a)?, Arc::new(idx.clone()))?,
            Instr::ScatterAdd(a, idx, rows) => tape.scatter_add_rows(get(*a)?, Arc::new(idx.clone()), *rows)?,
        };
        values.push(v);
    }
    Ok(Evaluation {
        tape,
        inputs: input_vars,
        output: *values.last().unwrap(),
    })
}
