//! A closed integer expression language used as the "code" domain.
//!
//! Programs are prefix expressions over five binary operators, three input
//! variables and the constants `-2..=2`. Parsing plays the role of
//! compilation and a fuel-limited evaluator plays the role of execution.

mod corpus;
mod eval;
mod parse;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{
    input_grid, make_corpus, make_problems, CorpusError, CorpusSpec, GRID_MAX, GRID_MIN,
};
pub use eval::{evaluate, evaluate_expr, run_tests, EvalError, PassReport};
pub use parse::{parse, parse_str, tokenize};

/// Hard cap on AST size, in nodes.
pub const MAX_NODES: usize = 64;

/// Default fuel handed to the evaluator by the pipeline.
pub const DEFAULT_FUEL: u64 = 256;

pub const CONST_MIN: i8 = -2;
pub const CONST_MAX: i8 = 2;
pub const NUM_VARS: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Min,
    Max,
}

impl BinOp {
    pub const ALL: [BinOp; 5] = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Min, BinOp::Max];

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Min => "min",
            BinOp::Max => "max",
        }
    }

    /// Checked application; `None` only on `i128` overflow.
    pub fn apply(self, a: i128, b: i128) -> Option<i128> {
        match self {
            BinOp::Add => a.checked_add(b),
            BinOp::Sub => a.checked_sub(b),
            BinOp::Mul => a.checked_mul(b),
            BinOp::Min => Some(a.min(b)),
            BinOp::Max => Some(a.max(b)),
        }
    }
}

/// One symbol of the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Token {
    Op(BinOp),
    Var(u8),
    Const(i8),
}

impl Token {
    /// The full vocabulary in canonical order: operators, variables, constants.
    pub fn vocabulary() -> Vec<Token> {
        let mut v: Vec<Token> = BinOp::ALL.iter().map(|&op| Token::Op(op)).collect();
        v.extend(Token::leaves());
        v
    }

    /// Leaf symbols in canonical order: `x0 x1 x2 -2 -1 0 1 2`.
    pub fn leaves() -> Vec<Token> {
        let mut v: Vec<Token> = (0..NUM_VARS).map(Token::Var).collect();
        v.extend((CONST_MIN..=CONST_MAX).map(Token::Const));
        v
    }

    pub fn is_op(self) -> bool {
        matches!(self, Token::Op(_))
    }

    /// Value of a leaf token on an input triple.
    pub fn leaf_value(self, input: &[i64; 3]) -> Option<i128> {
        match self {
            Token::Var(i) => Some(input[i as usize] as i128),
            Token::Const(c) => Some(c as i128),
            Token::Op(_) => None,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Op(op) => f.write_str(op.symbol()),
            Token::Var(i) => write!(f, "x{i}"),
            Token::Const(c) => write!(f, "{c}"),
        }
    }
}

impl FromStr for Token {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tok = match s {
            "+" => Token::Op(BinOp::Add),
            "-" => Token::Op(BinOp::Sub),
            "*" => Token::Op(BinOp::Mul),
            "min" => Token::Op(BinOp::Min),
            "max" => Token::Op(BinOp::Max),
            "x0" => Token::Var(0),
            "x1" => Token::Var(1),
            "x2" => Token::Var(2),
            "-2" => Token::Const(-2),
            "-1" => Token::Const(-1),
            "0" => Token::Const(0),
            "1" => Token::Const(1),
            "2" => Token::Const(2),
            other => return Err(ParseError::UnknownToken(other.to_string())),
        };
        Ok(tok)
    }
}

impl From<Token> for String {
    fn from(t: Token) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Token {
    type Error = ParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Renders tokens as whitespace-separated text.
pub fn render_tokens(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(Token::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("empty token list")]
    Empty,
    #[error("operator at position {0} is missing operands")]
    Arity(usize),
    #[error("{0} trailing token(s) after a complete expression")]
    TrailingTokens(usize),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("expression has {0} nodes, limit is {MAX_NODES}")]
    SizeLimit(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Var(u8),
    Const(i8),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn bin(op: BinOp, l: Expr, r: Expr) -> Expr {
        Expr::Bin(op, Box::new(l), Box::new(r))
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Bin(_, l, r) => 1 + l.node_count() + r.node_count(),
            _ => 1,
        }
    }

    /// Leaves have depth 0.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Bin(_, l, r) => 1 + l.depth().max(r.depth()),
            _ => 0,
        }
    }

    pub fn write_tokens(&self, out: &mut Vec<Token>) {
        match self {
            Expr::Var(i) => out.push(Token::Var(*i)),
            Expr::Const(c) => out.push(Token::Const(*c)),
            Expr::Bin(op, l, r) => {
                out.push(Token::Op(*op));
                l.write_tokens(out);
                r.write_tokens(out);
            }
        }
    }
}

/// A parsed program. Holds both the tree and the token sequence it came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Program {
    ast: Expr,
    tokens: Vec<Token>,
}

impl Program {
    pub fn from_expr(ast: Expr) -> Result<Self, ParseError> {
        let n = ast.node_count();
        if n > MAX_NODES {
            return Err(ParseError::SizeLimit(n));
        }
        let mut tokens = Vec::with_capacity(n);
        ast.write_tokens(&mut tokens);
        Ok(Program { ast, tokens })
    }

    pub fn ast(&self) -> &Expr {
        &self.ast
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn node_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn depth(&self) -> usize {
        self.ast.depth()
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_tokens(&self.tokens))
    }
}

impl Serialize for Program {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Program {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<Token>::deserialize(d)?;
        parse(&tokens).map_err(serde::de::Error::custom)
    }
}

/// One input/output example. Inputs live on the grid `[-5, 5]^3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestCase {
    pub input: [i64; 3],
    pub output: i128,
}

impl TestCase {
    pub fn input_in_grid(&self) -> bool {
        self.input.iter().all(|v| (GRID_MIN..=GRID_MAX).contains(v))
    }
}

/// A synthesis task.
///
/// `examples` are shown to the models (they are rendered into `question`);
/// `eval_cases` stay hidden and decide correctness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub question: String,
    pub ground_truth: Program,
    pub examples: Vec<TestCase>,
    pub eval_cases: Vec<TestCase>,
}

impl Problem {
    /// Builds a problem from a ground truth and the inputs to label with it.
    pub fn from_ground_truth(
        id: impl Into<String>,
        ground_truth: Program,
        example_inputs: &[[i64; 3]],
        eval_inputs: &[[i64; 3]],
    ) -> Result<Self, EvalError> {
        let label = |inputs: &[[i64; 3]]| -> Result<Vec<TestCase>, EvalError> {
            inputs
                .iter()
                .map(|&input| {
                    Ok(TestCase {
                        input,
                        output: evaluate(&ground_truth, input, DEFAULT_FUEL)?,
                    })
                })
                .collect()
        };
        let examples = label(example_inputs)?;
        let eval_cases = label(eval_inputs)?;
        let question = render_question(&examples);
        Ok(Problem {
            id: id.into(),
            question,
            ground_truth,
            examples,
            eval_cases,
        })
    }

    /// True when every labeled case agrees with the ground truth.
    pub fn is_consistent(&self) -> bool {
        self.examples.iter().chain(&self.eval_cases).all(|c| {
            evaluate(&self.ground_truth, c.input, DEFAULT_FUEL).is_ok_and(|v| v == c.output)
        })
    }
}

fn render_question(examples: &[TestCase]) -> String {
    let mut q = String::from(
        "Write an expression f(x0, x1, x2) using + - * min max and the constants -2..2 \
         that satisfies:\n",
    );
    for c in examples {
        q.push_str(&format!(
            "f({}, {}, {}) = {}\n",
            c.input[0], c.input[1], c.input[2], c.output
        ));
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_text_round_trip() {
        for t in Token::vocabulary() {
            assert_eq!(t.to_string().parse::<Token>().unwrap(), t);
        }
        assert_eq!(Token::vocabulary().len(), 13);
    }

    #[test]
    fn token_serde_is_text() {
        let json = serde_json::to_string(&vec![Token::Op(BinOp::Max), Token::Const(-2)]).unwrap();
        assert_eq!(json, r#"["max","-2"]"#);
    }

    #[test]
    fn problem_consistency() {
        let gt = parse_str("+ x0 1").unwrap();
        let p =
            Problem::from_ground_truth("t", gt, &[[1, 2, 3]], &[[2, 0, 0], [-5, 0, 0]]).unwrap();
        assert!(p.is_consistent());
        assert_eq!(p.eval_cases[0].output, 3);
        assert!(p.question.contains("f(1, 2, 3) = 2"));
    }
}
