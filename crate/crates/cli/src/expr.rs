//! Arithmetic expressions for config entries.
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | name | name '(' expr ')' | '(' expr ')'
//! ```
//!
//! Names are the variables `t`, `k`, `n`, `f1`…`fN`, the constant `pi`, and
//! the functions `exp`, `sin`, `cos`, `sqrt`, `log`, `abs`.

use std::fmt;

/// Variables an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Allowed {
    pub t: bool,
    pub k: bool,
    pub n: bool,
    /// Highest admissible mark coordinate (`f1`…`f{marks}`).
    pub marks: usize,
}

impl Allowed {
    pub const NONE: Allowed = Allowed { t: false, k: false, n: false, marks: 0 };

    pub fn n() -> Self {
        Allowed { n: true, ..Self::NONE }
    }

    pub fn tn() -> Self {
        Allowed { t: true, n: true, ..Self::NONE }
    }

    pub fn kn() -> Self {
        Allowed { k: true, n: true, ..Self::NONE }
    }
}

/// Values bound to the variables during evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Vars<'a> {
    pub t: f64,
    pub k: f64,
    pub n: f64,
    pub f: &'a [f64],
}

impl Vars<'_> {
    pub fn at_n(n: f64) -> Vars<'static> {
        Vars { t: 0.0, k: 0.0, n, f: &[] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Var {
    T,
    K,
    N,
    F(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Exp,
    Sin,
    Cos,
    Sqrt,
    Log,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(Op, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// A parsed expression together with its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Expr {
    pub fn constant(x: f64) -> Self {
        Self { source: format!("{x}"), root: Node::Num(x) }
    }

    pub fn parse(source: &str, allowed: Allowed) -> Result<Self, String> {
        let tokens = lex(source)?;
        let mut p = Parser { tokens, pos: 0, allowed };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(format!("unexpected {} in {source:?}", p.tokens[p.pos]));
        }
        Ok(Self { source: source.to_string(), root })
    }

    pub fn eval(&self, vars: &Vars) -> f64 {
        eval(&self.root, vars)
    }

    pub fn uses_t(&self) -> bool {
        uses(&self.root, &|v| v == Var::T)
    }

    pub fn uses_n(&self) -> bool {
        uses(&self.root, &|v| v == Var::N)
    }

    pub fn uses_marks(&self) -> bool {
        uses(&self.root, &|v| matches!(v, Var::F(_)))
    }
}

fn uses(node: &Node, pred: &dyn Fn(Var) -> bool) -> bool {
    match node {
        Node::Num(_) => false,
        Node::Var(v) => pred(*v),
        Node::Neg(a) | Node::Call(_, a) => uses(a, pred),
        Node::Bin(_, a, b) => uses(a, pred) || uses(b, pred),
    }
}

fn eval(node: &Node, v: &Vars) -> f64 {
    match node {
        Node::Num(x) => *x,
        Node::Var(Var::T) => v.t,
        Node::Var(Var::K) => v.k,
        Node::Var(Var::N) => v.n,
        Node::Var(Var::F(i)) => v.f.get(*i).copied().unwrap_or(f64::NAN),
        Node::Neg(a) => -eval(a, v),
        Node::Call(f, a) => {
            let x = eval(a, v);
            match f {
                Func::Exp => x.exp(),
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Sqrt => x.sqrt(),
                Func::Log => x.ln(),
                Func::Abs => x.abs(),
            }
        }
        Node::Bin(op, a, b) => {
            let (x, y) = (eval(a, v), eval(b, v));
            match op {
                Op::Add => x + y,
                Op::Sub => x - y,
                Op::Mul => x * y,
                Op::Div => x / y,
                Op::Pow => x.powf(y),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Name(String),
    Sym(char),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Num(x) => write!(f, "number {x}"),
            Token::Name(s) => write!(f, "name `{s}`"),
            Token::Sym(c) => write!(f, "`{c}`"),
        }
    }
}

fn lex(src: &str) -> Result<Vec<Token>, String> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
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
            out.push(Token::Num(text.parse().map_err(|_| format!("malformed number {text:?}"))?));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token::Name(chars[start..i].iter().collect()));
        } else if "+-*/^()".contains(c) {
            out.push(Token::Sym(c));
            i += 1;
        } else {
            return Err(format!("unexpected character {c:?}"));
        }
    }
    if out.is_empty() {
        return Err("empty expression".into());
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    allowed: Allowed,
}

impl Parser {
    fn peek_sym(&self, c: char) -> bool {
        self.tokens.get(self.pos) == Some(&Token::Sym(c))
    }

    fn expect_sym(&mut self, c: char) -> Result<(), String> {
        if self.peek_sym(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(match self.tokens.get(self.pos) {
                Some(t) => format!("expected `{c}`, found {t}"),
                None => format!("expected `{c}` at end of expression"),
            })
        }
    }

    fn expr(&mut self) -> Result<Node, String> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.peek_sym('+') {
                Op::Add
            } else if self.peek_sym('-') {
                Op::Sub
            } else {
                return Ok(lhs);
            };
            self.pos += 1;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Node, String> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.peek_sym('*') {
                Op::Mul
            } else if self.peek_sym('/') {
                Op::Div
            } else {
                return Ok(lhs);
            };
            self.pos += 1;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Node, String> {
        if self.peek_sym('-') {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        let base = self.atom()?;
        if self.peek_sym('^') {
            self.pos += 1;
            return Ok(Node::Bin(Op::Pow, Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, String> {
        let tok = self.tokens.get(self.pos).cloned().ok_or("expression ends early")?;
        self.pos += 1;
        match tok {
            Token::Num(x) => Ok(Node::Num(x)),
            Token::Sym('(') => {
                let inner = self.expr()?;
                self.expect_sym(')')?;
                Ok(inner)
            }
            Token::Name(name) => {
                if let Some(f) = function(&name) {
                    self.expect_sym('(')?;
                    let arg = self.expr()?;
                    self.expect_sym(')')?;
                    return Ok(Node::Call(f, Box::new(arg)));
                }
                self.variable(&name)
            }
            t => Err(format!("unexpected {t}")),
        }
    }

    fn variable(&self, name: &str) -> Result<Node, String> {
        let a = self.allowed;
        let var = match name {
            "pi" => return Ok(Node::Num(std::f64::consts::PI)),
            "t" if a.t => Var::T,
            "k" if a.k => Var::K,
            "n" if a.n => Var::N,
            _ => match name.strip_prefix('f').and_then(|s| s.parse::<usize>().ok()) {
                Some(i) if i >= 1 && i <= a.marks => Var::F(i - 1),
                _ => return Err(format!("unknown or disallowed name `{name}` (allowed: {})", describe(a))),
            },
        };
        Ok(Node::Var(var))
    }
}

fn function(name: &str) -> Option<Func> {
    Some(match name {
        "exp" => Func::Exp,
        "sin" => Func::Sin,
        "cos" => Func::Cos,
        "sqrt" => Func::Sqrt,
        "log" => Func::Log,
        "abs" => Func::Abs,
        _ => return None,
    })
}

fn describe(a: Allowed) -> String {
    let mut names: Vec<String> = Vec::new();
    for (on, name) in [(a.t, "t"), (a.k, "k"), (a.n, "n")] {
        if on {
            names.push(name.into());
        }
    }
    if a.marks > 0 {
        names.push(format!("f1..f{}", a.marks));
    }
    names.push("pi".into());
    names.join(", ")
}
