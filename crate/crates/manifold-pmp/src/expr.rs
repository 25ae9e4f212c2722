//! A small arithmetic language for dynamics, costs and endpoint functions.
//!
//! Expressions are parsed against a [`SymbolTable`] and evaluated on plain
//! slices. Derivatives with respect to the state are numeric.

use std::fmt;

use thiserror::Error;

/// Step for central-difference gradients.
pub const H_FD: f64 = 1e-6;
/// Step for central second differences.
pub const H_FD2: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("empty expression")]
    Empty,
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("function `{name}` expects {expected} argument(s), got {got}")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid symbol table: {0}")]
    Symbols(String),
}

/// Declared names for state, control and time variables.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolTable {
    states: Vec<String>,
    controls: Vec<String>,
    time: Option<String>,
}

impl SymbolTable {
    pub fn new(
        states: Vec<String>,
        controls: Vec<String>,
        time: Option<String>,
    ) -> Result<Self, ExprError> {
        let mut seen = std::collections::HashSet::new();
        for name in states.iter().chain(controls.iter()).chain(time.iter()) {
            if !is_identifier(name) {
                return Err(ExprError::Symbols(format!("`{name}` is not an identifier")));
            }
            if Func::from_name(name).is_some() {
                return Err(ExprError::Symbols(format!("`{name}` shadows a function")));
            }
            if !seen.insert(name.clone()) {
                return Err(ExprError::Symbols(format!("duplicate name `{name}`")));
            }
        }
        Ok(Self {
            states,
            controls,
            time,
        })
    }

    /// `x1..xn`, `u1..um` and `t`.
    pub fn dynamics(n: usize, m: usize) -> Self {
        Self {
            states: (1..=n).map(|i| format!("x{i}")).collect(),
            controls: (1..=m).map(|i| format!("u{i}")).collect(),
            time: Some("t".into()),
        }
    }

    /// Endpoint variables: `x1_0..xn_0` for x(0) followed by `x1_T..xn_T` for x(T).
    pub fn endpoint(n: usize) -> Self {
        let mut states: Vec<String> = (1..=n).map(|i| format!("x{i}_0")).collect();
        states.extend((1..=n).map(|i| format!("x{i}_T")));
        Self {
            states,
            controls: Vec::new(),
            time: None,
        }
    }

    /// State-only table `x1..xn` (metric entries).
    pub fn state_only(n: usize) -> Self {
        Self {
            states: (1..=n).map(|i| format!("x{i}")).collect(),
            controls: Vec::new(),
            time: None,
        }
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_controls(&self) -> usize {
        self.controls.len()
    }

    pub fn state_name(&self, i: usize) -> &str {
        &self.states[i]
    }

    pub fn control_name(&self, i: usize) -> &str {
        &self.controls[i]
    }

    pub fn time_name(&self) -> Option<&str> {
        self.time.as_deref()
    }

    fn lookup(&self, name: &str) -> Option<Expr> {
        if let Some(i) = self.states.iter().position(|s| s == name) {
            return Some(Expr::State(i));
        }
        if let Some(i) = self.controls.iter().position(|s| s == name) {
            return Some(Expr::Control(i));
        }
        if self.time.as_deref() == Some(name) {
            return Some(Expr::Time);
        }
        None
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
    Max,
    Min,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "max" => Func::Max,
            "min" => Func::Min,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Max => "max",
            Func::Min => "min",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Max | Func::Min => 2,
            _ => 1,
        }
    }
}

/// Parsed expression tree. Variables are stored by index into the symbol table.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    State(usize),
    Control(usize),
    Time,
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Result of a checked evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub non_finite: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
                offset: start,
                message: format!("malformed number `{text}`"),
            })?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
            {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), start));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                _ => {
                    return Err(ExprError::Syntax {
                        offset: start,
                        message: format!("unexpected character `{c}`"),
                    })
                }
            };
            i += c.len_utf8();
            out.push((tok, start));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
    symbols: &'a SymbolTable,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(_, o)| *o).unwrap_or(self.end)
    }

    fn syntax<T>(&self, message: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Syntax {
            offset: self.offset(),
            message: message.into(),
        })
    }

    // expr := term (('+'|'-') term)*
    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let op = if *c == '+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    // term := unary (('*'|'/') unary)*
    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek() {
            let op = if *c == '*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    // unary := '-' unary | '+' unary | power
    fn unary(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    // power := primary ('^' unary)?   (right associative, binds tighter than unary minus on the left)
    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let offset = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(&Tok::RParen) {
                    return self.syntax("expected `)`");
                }
                self.pos += 1;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if let Some(func) = Func::from_name(&name) {
                    if self.peek() != Some(&Tok::LParen) {
                        return self.syntax(format!("expected `(` after `{name}`"));
                    }
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.peek() == Some(&Tok::Comma) {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    if self.peek() != Some(&Tok::RParen) {
                        return self.syntax("expected `)` or `,`");
                    }
                    self.pos += 1;
                    if args.len() != func.arity() {
                        return Err(ExprError::Arity {
                            name,
                            expected: func.arity(),
                            got: args.len(),
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                if name == "pi" {
                    return Ok(Expr::Const(std::f64::consts::PI));
                }
                self.symbols
                    .lookup(&name)
                    .ok_or(ExprError::UnknownIdentifier { name, offset })
            }
            Some(_) => self.syntax("expected a number, identifier or `(`"),
            None => self.syntax("unexpected end of input"),
        }
    }
}

/// Parse `src` against the declared symbols.
pub fn parse_expression(src: &str, symbols: &SymbolTable) -> Result<Expr, ExprError> {
    if src.trim().is_empty() {
        return Err(ExprError::Empty);
    }
    let toks = tokenize(src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: src.len(),
        symbols,
    };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return p.syntax("trailing input");
    }
    Ok(e)
}

impl Expr {
    /// Plain IEEE evaluation. Missing controls read as zero so that state-only
    /// expressions can be evaluated with an empty control slice.
    pub fn eval(&self, x: &[f64], u: &[f64], t: f64) -> f64 {
        match self {
            Expr::Const(v) => *v,
            Expr::State(i) => x[*i],
            Expr::Control(i) => u[*i],
            Expr::Time => t,
            Expr::Neg(a) => -a.eval(x, u, t),
            Expr::Bin(op, a, b) => {
                let a = a.eval(x, u, t);
                let b = b.eval(x, u, t);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => pow(a, b),
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(x, u, t);
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Tan => a.tan(),
                    Func::Exp => a.exp(),
                    Func::Log => a.ln(),
                    Func::Sqrt => a.sqrt(),
                    Func::Abs => a.abs(),
                    Func::Max => a.max(args[1].eval(x, u, t)),
                    Func::Min => a.min(args[1].eval(x, u, t)),
                }
            }
        }
    }

    /// Evaluation with a flag for NaN or infinite results.
    pub fn eval_checked(&self, x: &[f64], u: &[f64], t: f64) -> Evaluation {
        let value = self.eval(x, u, t);
        Evaluation {
            value,
            non_finite: !value.is_finite(),
        }
    }

    /// Central-difference gradient in the state with one Richardson step.
    pub fn grad_state(&self, x: &[f64], u: &[f64], t: f64) -> Vec<f64> {
        let mut xs = x.to_vec();
        (0..x.len())
            .map(|i| {
                let mut d = |h: f64| {
                    xs[i] = x[i] + h;
                    let fp = self.eval(&xs, u, t);
                    xs[i] = x[i] - h;
                    let fm = self.eval(&xs, u, t);
                    xs[i] = x[i];
                    (fp - fm) / (2.0 * h)
                };
                let d1 = d(H_FD);
                let d2 = d(H_FD / 2.0);
                (4.0 * d2 - d1) / 3.0
            })
            .collect()
    }

    /// Central second-difference Hessian in the state, symmetric by construction.
    pub fn hessian_state(&self, x: &[f64], u: &[f64], t: f64) -> Vec<Vec<f64>> {
        let n = x.len();
        let h = H_FD2;
        let mut xs = x.to_vec();
        let mut out = vec![vec![0.0; n]; n];
        let f0 = self.eval(x, u, t);
        for i in 0..n {
            xs[i] = x[i] + h;
            let fp = self.eval(&xs, u, t);
            xs[i] = x[i] - h;
            let fm = self.eval(&xs, u, t);
            xs[i] = x[i];
            out[i][i] = (fp - 2.0 * f0 + fm) / (h * h);
            for j in 0..i {
                let mut corner = |si: f64, sj: f64| {
                    xs[i] = x[i] + si * h;
                    xs[j] = x[j] + sj * h;
                    let v = self.eval(&xs, u, t);
                    xs[i] = x[i];
                    xs[j] = x[j];
                    v
                };
                let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0)
                    + corner(-1.0, -1.0))
                    / (4.0 * h * h);
                out[i][j] = v;
                out[j][i] = v;
            }
        }
        out
    }

    /// True if the tree reads state variable `i`.
    pub fn uses_state(&self, i: usize) -> bool {
        match self {
            Expr::State(k) => *k == i,
            Expr::Const(_) | Expr::Control(_) | Expr::Time => false,
            Expr::Neg(a) => a.uses_state(i),
            Expr::Bin(_, a, b) => a.uses_state(i) || b.uses_state(i),
            Expr::Call(_, args) => args.iter().any(|a| a.uses_state(i)),
        }
    }

    /// Rewrites state indices, used for re-embedding into a larger state.
    pub fn map_states(&self, f: &impl Fn(usize) -> usize) -> Expr {
        match self {
            Expr::State(k) => Expr::State(f(*k)),
            Expr::Const(_) | Expr::Control(_) | Expr::Time => self.clone(),
            Expr::Neg(a) => Expr::Neg(Box::new(a.map_states(f))),
            Expr::Bin(op, a, b) => {
                Expr::Bin(*op, Box::new(a.map_states(f)), Box::new(b.map_states(f)))
            }
            Expr::Call(func, args) => Expr::Call(*func, args.iter().map(|a| a.map_states(f)).collect()),
        }
    }

    /// Fully parenthesised source text that reparses to an equivalent tree.
    pub fn unparse(&self, symbols: &SymbolTable) -> String {
        Unparse(self, symbols).to_string()
    }
}

fn pow(a: f64, b: f64) -> f64 {
    if b == b.trunc() && b.abs() <= 16.0 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

struct Unparse<'a>(&'a Expr, &'a SymbolTable);

impl fmt::Display for Unparse<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.1;
        match self.0 {
            Expr::Const(v) => {
                if *v < 0.0 {
                    write!(f, "(-{:e})", -v)
                } else {
                    write!(f, "{v:e}")
                }
            }
            Expr::State(i) => write!(f, "{}", s.states[*i]),
            Expr::Control(i) => write!(f, "{}", s.controls[*i]),
            Expr::Time => write!(f, "{}", s.time.as_deref().unwrap_or("t")),
            Expr::Neg(a) => write!(f, "(-{})", Unparse(a, s)),
            Expr::Bin(op, a, b) => {
                let sym = match op {
                    BinOp::Add => '+',
                    BinOp::Sub => '-',
                    BinOp::Mul => '*',
                    BinOp::Div => '/',
                    BinOp::Pow => '^',
                };
                write!(f, "({}{sym}{})", Unparse(a, s), Unparse(b, s))
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{}", Unparse(a, s))?;
                }
                write!(f, ")")
            }
        }
    }
}
