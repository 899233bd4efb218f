use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{parse, Expr, Program, TestCase, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("fuel exhausted")]
    FuelExhausted,
    /// Unreachable for programs within the node limit on the `[-5, 5]` grid:
    /// the largest magnitude there is `5^32 < 2^127`.
    #[error("integer overflow")]
    Overflow,
}

/// Evaluates a program. Every node visit costs one unit of fuel.
pub fn evaluate(program: &Program, input: [i64; 3], fuel: u64) -> Result<i128, EvalError> {
    evaluate_expr(program.ast(), input, fuel)
}

/// Same as [`evaluate`] for a bare tree, which is not subject to the node limit.
pub fn evaluate_expr(expr: &Expr, input: [i64; 3], fuel: u64) -> Result<i128, EvalError> {
    let mut remaining = fuel;
    eval_node(expr, &input, &mut remaining)
}

fn eval_node(expr: &Expr, input: &[i64; 3], fuel: &mut u64) -> Result<i128, EvalError> {
    if *fuel == 0 {
        return Err(EvalError::FuelExhausted);
    }
    *fuel -= 1;
    match expr {
        Expr::Var(i) => Ok(input[*i as usize] as i128),
        Expr::Const(c) => Ok(*c as i128),
        Expr::Bin(op, l, r) => {
            let a = eval_node(l, input, fuel)?;
            let b = eval_node(r, input, fuel)?;
            op.apply(a, b).ok_or(EvalError::Overflow)
        }
    }
}

/// Outcome of running a token sequence against test cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub compile: bool,
    pub num_passed: usize,
    pub num_total: usize,
    pub pass_rate: f64,
}

impl PassReport {
    pub fn compile_indicator(&self) -> f64 {
        if self.compile {
            1.0
        } else {
            0.0
        }
    }

    /// Compiled and passed every case.
    pub fn all_passed(&self) -> bool {
        self.compile && self.num_total > 0 && self.num_passed == self.num_total
    }
}

/// Parses `tokens` and counts the cases whose evaluation matches.
///
/// A parse failure yields `compile = false` and no passes; runtime errors
/// fail only the case they occur on.
pub fn run_tests(tokens: &[Token], cases: &[TestCase], fuel: u64) -> PassReport {
    let num_total = cases.len();
    let Ok(program) = parse(tokens) else {
        return PassReport {
            compile: false,
            num_passed: 0,
            num_total,
            pass_rate: 0.0,
        };
    };
    let num_passed = cases
        .iter()
        .filter(|c| evaluate(&program, c.input, fuel) == Ok(c.output))
        .count();
    let pass_rate = if num_total == 0 {
        0.0
    } else {
        num_passed as f64 / num_total as f64
    };
    PassReport {
        compile: true,
        num_passed,
        num_total,
        pass_rate,
    }
}
