use super::{Expr, ParseError, Program, Token, MAX_NODES};

/// Splits whitespace-separated text into vocabulary tokens.
pub fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    text.split_whitespace().map(str::parse).collect()
}

/// Parses exactly one prefix expression with nothing left over.
pub fn parse(tokens: &[Token]) -> Result<Program, ParseError> {
    if tokens.is_empty() {
        return Err(ParseError::Empty);
    }
    if tokens.len() > MAX_NODES {
        return Err(ParseError::SizeLimit(tokens.len()));
    }
    let mut pos = 0;
    let ast = parse_expr(tokens, &mut pos)?;
    if pos < tokens.len() {
        return Err(ParseError::TrailingTokens(tokens.len() - pos));
    }
    Program::from_expr(ast)
}

pub fn parse_str(text: &str) -> Result<Program, ParseError> {
    parse(&tokenize(text)?)
}

fn parse_expr(tokens: &[Token], pos: &mut usize) -> Result<Expr, ParseError> {
    let at = *pos;
    let tok = *tokens.get(at).ok_or(ParseError::Arity(at))?;
    *pos += 1;
    match tok {
        Token::Var(i) => Ok(Expr::Var(i)),
        Token::Const(c) => Ok(Expr::Const(c)),
        Token::Op(op) => {
            // The operator owns the missing-operand error, not the position past the end.
            let l = parse_expr(tokens, pos).map_err(|e| reattribute(e, tokens.len(), at))?;
            let r = parse_expr(tokens, pos).map_err(|e| reattribute(e, tokens.len(), at))?;
            Ok(Expr::bin(op, l, r))
        }
    }
}

fn reattribute(e: ParseError, len: usize, op_pos: usize) -> ParseError {
    match e {
        ParseError::Arity(p) if p >= len => ParseError::Arity(op_pos),
        other => other,
    }
}
