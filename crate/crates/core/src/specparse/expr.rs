//! Arithmetic expressions for feedback components.
//!
//! Grammar, lowest to highest precedence:
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | 't' | 'x' int | func '(' expr ')' | '(' expr ')'
//! func  := sin | cos | exp | abs
//! ```
//!
//! `^` binds tighter than unary minus, so `-x1^2` is `-(x1^2)`, and it is
//! right associative. State variables are read through `|x_j|`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Abs,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Abs => "abs",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        match s {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "abs" => Some(Func::Abs),
            _ => None,
        }
    }
}

/// Expression tree node. `Var(j)` is zero based.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Time,
    Var(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// A parsed feedback component together with the dimension it was checked against.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackExpr {
    pub root: Node,
    pub dim: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("lexical error at column {col}: unexpected character {ch:?}")]
    Lexical { col: usize, ch: char },
    #[error("syntax error at column {col}: {msg}")]
    Syntax { col: usize, msg: String },
    #[error("unbalanced parentheses at column {col}")]
    Unbalanced { col: usize },
    #[error("unknown identifier `{name}` at column {col}")]
    UnknownIdent { col: usize, name: String },
    #[error("variable x{index} out of range for dimension {dim}")]
    VarOutOfRange { index: usize, dim: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("division by zero in `{0}`")]
    DivisionByZero(String),
    #[error("non-finite value in `{0}`")]
    Domain(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part, only if followed by a digit (optionally signed)
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
                col,
                msg: format!("malformed number `{text}`"),
            })?;
            out.push((Tok::Num(v), col));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), col));
        } else if "+-*/^".contains(c) {
            out.push((Tok::Op(c), col));
            i += 1;
        } else if c == '(' {
            out.push((Tok::LParen, col));
            i += 1;
        } else if c == ')' {
            out.push((Tok::RParen, col));
            i += 1;
        } else {
            return Err(ExprError::Lexical { col, ch: c });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    dim: usize,
    end_col: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map(|(_, c)| *c).unwrap_or(self.end_col)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.bump();
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if let Some(Tok::Op('-')) = self.peek() {
            self.bump();
            let inner = self.unary()?;
            return Ok(Node::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.bump();
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn paren_body(&mut self, open_col: usize) -> Result<Node, ExprError> {
        self.depth += 1;
        let inner = self.expr()?;
        match self.bump() {
            Some(Tok::RParen) => {
                self.depth -= 1;
                Ok(inner)
            }
            Some(_) => Err(ExprError::Syntax {
                col: self.toks[self.pos - 1].1,
                msg: "expected `)`".into(),
            }),
            None => Err(ExprError::Unbalanced { col: open_col }),
        }
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let col = self.col();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Node::Num(v)),
            Some(Tok::LParen) => self.paren_body(col),
            Some(Tok::Ident(name)) => {
                if name == "t" {
                    return Ok(Node::Time);
                }
                if let Some(f) = Func::from_name(&name) {
                    let open = self.col();
                    match self.bump() {
                        Some(Tok::LParen) => {}
                        _ => {
                            return Err(ExprError::Syntax {
                                col: open,
                                msg: format!("expected `(` after `{name}`"),
                            })
                        }
                    }
                    let arg = self.paren_body(open)?;
                    return Ok(Node::Call(f, Box::new(arg)));
                }
                if let Some(digits) = name.strip_prefix('x') {
                    if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                        let index: usize = digits.parse().unwrap_or(0);
                        if index == 0 || index > self.dim {
                            return Err(ExprError::VarOutOfRange { index, dim: self.dim });
                        }
                        return Ok(Node::Var(index - 1));
                    }
                }
                Err(ExprError::UnknownIdent { col, name })
            }
            Some(Tok::RParen) => {
                if self.depth == 0 {
                    Err(ExprError::Unbalanced { col })
                } else {
                    Err(ExprError::Syntax { col, msg: "empty parentheses".into() })
                }
            }
            Some(Tok::Op(c)) => Err(ExprError::Syntax {
                col,
                msg: format!("unexpected operator `{c}`"),
            }),
            None => Err(ExprError::Syntax { col, msg: "unexpected end of expression".into() }),
        }
    }
}

/// Parses `text` against state dimension `dim`.
pub fn parse_expr(text: &str, dim: usize) -> Result<FeedbackExpr, ExprError> {
    let toks = lex(text)?;
    let end_col = text.chars().count() + 1;
    let mut p = Parser { toks, pos: 0, dim, end_col, depth: 0 };
    let root = p.expr()?;
    if p.pos < p.toks.len() {
        let col = p.col();
        return Err(match p.peek() {
            Some(Tok::RParen) => ExprError::Unbalanced { col },
            _ => ExprError::Syntax { col, msg: "trailing input".into() },
        });
    }
    Ok(FeedbackExpr { root, dim })
}

impl Node {
    /// True if the subtree mentions neither `t` nor any state variable.
    pub fn is_constant(&self) -> bool {
        match self {
            Node::Num(_) => true,
            Node::Time | Node::Var(_) => false,
            Node::Neg(a) | Node::Call(_, a) => a.is_constant(),
            Node::Bin(_, a, b) => a.is_constant() && b.is_constant(),
        }
    }

    pub fn depends_on_state(&self) -> bool {
        match self {
            Node::Var(_) => true,
            Node::Num(_) | Node::Time => false,
            Node::Neg(a) | Node::Call(_, a) => a.depends_on_state(),
            Node::Bin(_, a, b) => a.depends_on_state() || b.depends_on_state(),
        }
    }

    fn eval(&self, t: f64, x: &[f64]) -> Result<f64, EvalError> {
        let v = match self {
            Node::Num(v) => *v,
            Node::Time => t,
            Node::Var(j) => x[*j].abs(),
            Node::Neg(a) => -a.eval(t, x)?,
            Node::Call(f, a) => {
                let u = a.eval(t, x)?;
                match f {
                    Func::Sin => u.sin(),
                    Func::Cos => u.cos(),
                    Func::Exp => u.exp(),
                    Func::Abs => u.abs(),
                }
            }
            Node::Bin(op, a, b) => {
                let l = a.eval(t, x)?;
                let r = b.eval(t, x)?;
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div => {
                        if r == 0.0 {
                            return Err(EvalError::DivisionByZero(self.to_string()));
                        }
                        l / r
                    }
                    BinOp::Pow => {
                        if r.fract() == 0.0 && r.abs() <= i32::MAX as f64 {
                            l.powi(r as i32)
                        } else {
                            l.powf(r)
                        }
                    }
                }
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::Domain(self.to_string()))
        }
    }
}

impl FeedbackExpr {
    /// Value at `(t, |x|)`.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64, EvalError> {
        self.root.eval(t, x)
    }
}

/// Evaluates `e` at `(t, x)`.
pub fn eval_expr(e: &FeedbackExpr, t: f64, x: &[f64]) -> Result<f64, EvalError> {
    e.eval(t, x)
}

/// Parses and evaluates a closed constant expression such as `1/12` or `2.5e-3`.
pub fn eval_constant(text: &str) -> Result<f64, String> {
    let e = parse_expr(text, 0).map_err(|e| e.to_string())?;
    e.eval(0.0, &[]).map_err(|e| e.to_string())
}

// Printing is fully parenthesised so that reparsing never depends on precedence.
impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Num(v) => {
                if *v < 0.0 {
                    write!(f, "(-{:?})", -v)
                } else {
                    write!(f, "{v:?}")
                }
            }
            Node::Time => write!(f, "t"),
            Node::Var(j) => write!(f, "x{}", j + 1),
            Node::Neg(a) => write!(f, "(-{a})"),
            Node::Call(func, a) => write!(f, "{}({a})", func.name()),
            Node::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
        }
    }
}

impl fmt::Display for FeedbackExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}
