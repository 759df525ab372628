//! Small expression language for custom drivers and terminal conditions.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' unary)?
//! atom    := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Functions: `min`, `max` (two or more arguments), `exp`, `log`, `abs`,
//! `sqrt`, `sin`, `cos`, `tanh`, and `sum(e)` which adds `e` over the jump
//! atoms with `psi` and `lam` bound to the current atom.
//!
//! Driver variables (component `c` of a `;`-separated list): `t`, `y`
//! (= `y_c`), `yN` (any component, 1-based), `z` (= `z_{c,1}`), `zN`,
//! `psiN`, `lamN`; inside `sum`: `psi`, `lam`.
//!
//! Terminal variables: `t` (the horizon), `w`/`wN` (Brownian state),
//! `n`/`nN` (cumulative jump counts), `a` (running sum of auxiliary signs),
//! `auxN` (the N-th auxiliary sign).

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Var {
    T,
    YSelf,
    Y(usize),
    ZSelf,
    Z(usize),
    Psi(usize),
    Lam(usize),
    PsiBound,
    LamBound,
    W(usize),
    N(usize),
    AuxSum,
    Aux(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Func {
    Exp,
    Log,
    Abs,
    Sqrt,
    Sin,
    Cos,
    Tanh,
    Min,
    Max,
}

#[derive(Clone, Debug)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
    Sum(Box<Node>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExprKind {
    Driver { d: usize, k: usize, n_atoms: usize },
    Terminal { k: usize, n_atoms: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct VarUsage {
    pub aux: bool,
    pub state: bool,
}

/// A parsed vector-valued expression, one component per `;`-separated part.
#[derive(Clone, Debug)]
pub struct Expr {
    components: Vec<Node>,
    pub source: String,
    pub usage: VarUsage,
}

pub struct DriverEnv<'a> {
    pub t: f64,
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub psi: &'a [f64],
    pub lambdas: &'a [f64],
    pub k: usize,
}

pub struct TerminalEnv<'a> {
    pub t: f64,
    pub w: &'a [f64],
    pub counts: &'a [f64],
    pub aux_sum: f64,
    pub aux: &'a [f64],
}

enum Env<'a> {
    Driver(&'a DriverEnv<'a>, usize),
    Terminal(&'a TerminalEnv<'a>),
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
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
                let save = i;
                i += 1;
                if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                    i += 1;
                }
                if i < chars.len() && chars[i].is_ascii_digit() {
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                } else {
                    i = save;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v = s
                .parse::<f64>()
                .map_err(|_| Error::config(format!("expression: bad number '{s}' in '{src}'")))?;
            out.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^(),".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(Error::config(format!("expression: unexpected character '{c}' in '{src}'")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Tok>,
    pos: usize,
    kind: ExprKind,
    in_sum: bool,
    src: &'a str,
    usage: VarUsage,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::config(format!("expression '{}': {msg}", self.src))
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat_op(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Op(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            if self.eat_op('+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat_op('-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat_op('*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat_op('/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat_op('-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op('+') {
            return self.unary();
        }
        let base = self.atom()?;
        if self.eat_op('^') {
            let exp = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.toks.get(self.pos).cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Node::Num(v))
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat_op(')') {
                    return Err(self.err("missing ')'"));
                }
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.eat_op('(') {
                    self.call(&name)
                } else {
                    self.variable(&name).map(Node::Var)
                }
            }
            Some(t) => Err(self.err(format!("unexpected token {t:?}"))),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn call(&mut self, name: &str) -> Result<Node> {
        if name == "sum" {
            if self.in_sum {
                return Err(self.err("nested sum() is not supported"));
            }
            if !matches!(self.kind, ExprKind::Driver { .. }) {
                return Err(self.err("sum() is only available in driver expressions"));
            }
            self.in_sum = true;
            let body = self.expr()?;
            self.in_sum = false;
            if !self.eat_op(')') {
                return Err(self.err("sum() takes one argument"));
            }
            return Ok(Node::Sum(Box::new(body)));
        }
        let func = match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tanh" => Func::Tanh,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return Err(self.err(format!("unknown function '{name}'"))),
        };
        let mut args = vec![self.expr()?];
        while self.eat_op(',') {
            args.push(self.expr()?);
        }
        if !self.eat_op(')') {
            return Err(self.err(format!("missing ')' after arguments of {name}")));
        }
        let ok = match func {
            Func::Min | Func::Max => args.len() >= 2,
            _ => args.len() == 1,
        };
        if !ok {
            return Err(self.err(format!("wrong number of arguments to {name}")));
        }
        Ok(Node::Call(func, args))
    }

    fn index(&self, name: &str, prefix: &str, bound: usize) -> Result<Option<usize>> {
        let Some(rest) = name.strip_prefix(prefix) else { return Ok(None) };
        if rest.is_empty() || !rest.chars().all(|c| c.is_ascii_digit()) {
            return Ok(None);
        }
        let n: usize = rest.parse().map_err(|_| self.err(format!("bad index in '{name}'")))?;
        if n == 0 || n > bound {
            return Err(self.err(format!("'{name}' is out of range (1..={bound})")));
        }
        Ok(Some(n - 1))
    }

    fn variable(&mut self, name: &str) -> Result<Var> {
        match self.kind {
            ExprKind::Driver { d, k, n_atoms } => {
                let v = match name {
                    "t" => Some(Var::T),
                    "y" => Some(Var::YSelf),
                    "z" => Some(Var::ZSelf),
                    "psi" | "lam" if !self.in_sum => {
                        return Err(self.err(format!("'{name}' is only bound inside sum()")))
                    }
                    "psi" => Some(Var::PsiBound),
                    "lam" => Some(Var::LamBound),
                    _ => None,
                };
                if let Some(v) = v {
                    return Ok(v);
                }
                if let Some(i) = self.index(name, "psi", n_atoms)? {
                    return Ok(Var::Psi(i));
                }
                if let Some(i) = self.index(name, "lam", n_atoms)? {
                    return Ok(Var::Lam(i));
                }
                if let Some(i) = self.index(name, "y", d)? {
                    return Ok(Var::Y(i));
                }
                if let Some(i) = self.index(name, "z", k)? {
                    return Ok(Var::Z(i));
                }
                Err(self.err(format!("unknown driver variable '{name}'")))
            }
            ExprKind::Terminal { k, n_atoms } => {
                let v = match name {
                    "t" => Var::T,
                    "w" if k >= 1 => Var::W(0),
                    "n" if n_atoms >= 1 => Var::N(0),
                    "a" => Var::AuxSum,
                    _ => {
                        if let Some(i) = self.index(name, "aux", usize::MAX)? {
                            Var::Aux(i)
                        } else if let Some(i) = self.index(name, "w", k)? {
                            Var::W(i)
                        } else if let Some(i) = self.index(name, "n", n_atoms)? {
                            Var::N(i)
                        } else {
                            return Err(self.err(format!("unknown terminal variable '{name}'")));
                        }
                    }
                };
                match v {
                    Var::AuxSum | Var::Aux(_) => self.usage.aux = true,
                    Var::W(_) | Var::N(_) => self.usage.state = true,
                    _ => {}
                }
                Ok(v)
            }
        }
    }
}

impl Expr {
    pub fn parse(src: &str, kind: ExprKind) -> Result<Self> {
        let parts: Vec<&str> = src.split(';').collect();
        let want = match kind {
            ExprKind::Driver { d, .. } => d,
            ExprKind::Terminal { .. } => parts.len(),
        };
        if parts.len() != want {
            return Err(Error::config(format!(
                "expression '{src}': {} components given, dimension d = {want}",
                parts.len()
            )));
        }
        let mut components = Vec::with_capacity(parts.len());
        let mut usage = VarUsage::default();
        for part in parts {
            let toks = tokenize(part)?;
            let mut p = Parser { toks, pos: 0, kind, in_sum: false, src, usage: VarUsage::default() };
            let node = p.expr()?;
            if p.pos != p.toks.len() {
                return Err(p.err(format!("trailing input at token {:?}", p.toks[p.pos])));
            }
            usage.aux |= p.usage.aux;
            usage.state |= p.usage.state;
            components.push(node);
        }
        Ok(Self { components, source: src.to_string(), usage })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn eval_driver(&self, env: &DriverEnv, out: &mut [f64]) {
        for (c, node) in self.components.iter().enumerate() {
            out[c] = eval(node, &Env::Driver(env, c), None);
        }
    }

    pub fn eval_terminal(&self, env: &TerminalEnv, out: &mut [f64]) {
        for (c, node) in self.components.iter().enumerate() {
            out[c] = eval(node, &Env::Terminal(env), None);
        }
    }
}

fn eval(node: &Node, env: &Env, atom: Option<usize>) -> f64 {
    match node {
        Node::Num(v) => *v,
        Node::Var(v) => lookup(*v, env, atom),
        Node::Neg(a) => -eval(a, env, atom),
        Node::Add(a, b) => eval(a, env, atom) + eval(b, env, atom),
        Node::Sub(a, b) => eval(a, env, atom) - eval(b, env, atom),
        Node::Mul(a, b) => eval(a, env, atom) * eval(b, env, atom),
        Node::Div(a, b) => eval(a, env, atom) / eval(b, env, atom),
        Node::Pow(a, b) => {
            let (x, e) = (eval(a, env, atom), eval(b, env, atom));
            if e.fract() == 0.0 && e.abs() <= 64.0 {
                x.powi(e as i32)
            } else {
                x.powf(e)
            }
        }
        Node::Call(f, args) => {
            let x = eval(&args[0], env, atom);
            match f {
                Func::Exp => x.exp(),
                Func::Log => x.ln(),
                Func::Abs => x.abs(),
                Func::Sqrt => x.sqrt(),
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Tanh => x.tanh(),
                Func::Min => args[1..].iter().fold(x, |m, a| m.min(eval(a, env, atom))),
                Func::Max => args[1..].iter().fold(x, |m, a| m.max(eval(a, env, atom))),
            }
        }
        Node::Sum(body) => match env {
            Env::Driver(e, _) => (0..e.lambdas.len()).map(|j| eval(body, env, Some(j))).sum(),
            Env::Terminal(_) => f64::NAN,
        },
    }
}

fn lookup(v: Var, env: &Env, atom: Option<usize>) -> f64 {
    match env {
        Env::Driver(e, c) => {
            let a = e.lambdas.len();
            match v {
                Var::T => e.t,
                Var::YSelf => e.y[*c],
                Var::Y(i) => e.y[i],
                Var::ZSelf => e.z[c * e.k],
                Var::Z(i) => e.z[c * e.k + i],
                Var::Psi(j) => e.psi[c * a + j],
                Var::Lam(j) => e.lambdas[j],
                Var::PsiBound => e.psi[c * a + atom.unwrap_or(0)],
                Var::LamBound => e.lambdas[atom.unwrap_or(0)],
                _ => f64::NAN,
            }
        }
        Env::Terminal(e) => match v {
            Var::T => e.t,
            Var::W(i) => e.w[i],
            Var::N(j) => e.counts[j],
            Var::AuxSum => e.aux_sum,
            Var::Aux(i) => e.aux.get(i).copied().unwrap_or(f64::NAN),
            _ => f64::NAN,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drv(src: &str, d: usize, k: usize, a: usize) -> Result<Expr> {
        Expr::parse(src, ExprKind::Driver { d, k, n_atoms: a })
    }

    fn eval1(e: &Expr, t: f64, y: &[f64], z: &[f64], psi: &[f64], lam: &[f64]) -> f64 {
        let mut out = vec![0.0; e.dim()];
        let k = if y.is_empty() { 1 } else { z.len() / y.len() };
        e.eval_driver(&DriverEnv { t, y, z, psi, lambdas: lam, k }, &mut out);
        out[0]
    }

    #[test]
    fn precedence_and_associativity() {
        let e = drv("1 + 2 * 3 ^ 2 - -4 / 2", 1, 1, 0).unwrap();
        assert_eq!(eval1(&e, 0.0, &[0.0], &[0.0], &[], &[]), 1.0 + 18.0 + 2.0);
        let e = drv("2 ^ 3 ^ 2", 1, 1, 0).unwrap();
        assert_eq!(eval1(&e, 0.0, &[0.0], &[0.0], &[], &[]), 512.0);
        let e = drv("-y^2", 1, 1, 0).unwrap();
        assert_eq!(eval1(&e, 0.0, &[3.0], &[0.0], &[], &[]), -9.0);
        let e = drv("1.5e-1 * 2", 1, 1, 0).unwrap();
        assert!((eval1(&e, 0.0, &[0.0], &[0.0], &[], &[]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn functions_and_sums() {
        let e = drv("max(0, sum(psi * lam)) + min(y, z, 1) + exp(0) + abs(-2)", 1, 1, 2).unwrap();
        let v = eval1(&e, 0.0, &[5.0], &[-1.0], &[1.0, 2.0], &[0.5, 0.25]);
        assert!((v - (1.0 - 1.0 + 1.0 + 2.0)).abs() < 1e-15);
        let e = drv("psi2 * lam2 + t", 1, 1, 2).unwrap();
        assert_eq!(eval1(&e, 0.5, &[0.0], &[0.0], &[1.0, 4.0], &[0.5, 0.25]), 1.5);
    }

    #[test]
    fn vector_driver_components() {
        let e = drv("-y; y1 - z2", 2, 2, 0).unwrap();
        let mut out = [0.0; 2];
        e.eval_driver(
            &DriverEnv { t: 0.0, y: &[1.0, 2.0], z: &[0.0, 0.0, 3.0, 5.0], psi: &[], lambdas: &[], k: 2 },
            &mut out,
        );
        assert_eq!(out, [-1.0, 1.0 - 5.0]);
    }

    #[test]
    fn terminal_variables_and_usage() {
        let e = Expr::parse("max(w, 0) + aux1 + n", ExprKind::Terminal { k: 1, n_atoms: 1 }).unwrap();
        assert!(e.usage.aux && e.usage.state);
        let mut out = [0.0];
        e.eval_terminal(&TerminalEnv { t: 1.0, w: &[0.5], counts: &[2.0], aux_sum: 0.0, aux: &[-1.0] }, &mut out);
        assert_eq!(out[0], 0.5 - 1.0 + 2.0);
        let e = Expr::parse("exp(w - t/2)", ExprKind::Terminal { k: 1, n_atoms: 0 }).unwrap();
        assert!(!e.usage.aux);
    }

    #[test]
    fn parse_errors() {
        assert!(drv("1 +", 1, 1, 0).is_err());
        assert!(drv("foo(1)", 1, 1, 0).is_err());
        assert!(drv("psi3", 1, 1, 2).is_err());
        assert!(drv("psi", 1, 1, 2).is_err());
        assert!(drv("sum(sum(psi))", 1, 1, 2).is_err());
        assert!(drv("(1 + 2", 1, 1, 0).is_err());
        assert!(drv("y; y", 1, 1, 0).is_err());
        assert!(drv("1 $ 2", 1, 1, 0).is_err());
        assert!(drv("min(1)", 1, 1, 0).is_err());
        assert!(Expr::parse("y", ExprKind::Terminal { k: 1, n_atoms: 0 }).is_err());
    }
}
