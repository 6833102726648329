//! Line-oriented textual front end mirroring the paper-style listings:
//! declarations (`param`, `var`, `func`, `assume`), definitions
//! (`C(i, j) += A(i, k) * B(k, j)`), bounds (`bounds C i 0 I`), store lines,
//! and directive chains (`C.tile(i, j, ii, jj, II, JJ).unroll(ii, jj)`).

use std::fmt;

use crate::error::IrError;
use crate::externs::SigParam;
use crate::ir::expr::{BinOp, Expr};
use crate::ir::{Assumption, Parameter, Placement, Program};
use crate::schedule::{BufferAttr, Directive, Schedule};
use crate::value::ElemType;

#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, col {}: {}", self.line, self.col, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    Sym(&'static str),
}

struct Lexer<'a> {
    src: &'a str,
    chars: Vec<char>,
    pos: usize,
    line: usize,
    col: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str, line: usize) -> Lexer<'a> {
        Lexer {
            src,
            chars: src.chars().collect(),
            pos: 0,
            line,
            col: 1,
        }
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            col: self.col.max(self.pos + 1),
            message: message.into(),
        }
    }

    fn tokens(mut self) -> Result<Vec<(Tok, usize)>, ParseError> {
        let mut out = Vec::new();
        while self.pos < self.chars.len() {
            let c = self.chars[self.pos];
            let col = self.pos + 1;
            if c.is_whitespace() {
                self.pos += 1;
                continue;
            }
            if c == '#' {
                break;
            }
            if c == '/' && self.chars.get(self.pos + 1) == Some(&'/') {
                break;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let start = self.pos;
                while self.pos < self.chars.len()
                    && (self.chars[self.pos].is_ascii_alphanumeric()
                        || self.chars[self.pos] == '_'
                        || self.chars[self.pos] == '\'')
                {
                    self.pos += 1;
                }
                let s: String = self.chars[start..self.pos].iter().collect();
                out.push((Tok::Ident(s), col));
                continue;
            }
            if c.is_ascii_digit() {
                let start = self.pos;
                let mut is_float = false;
                while self.pos < self.chars.len() {
                    let ch = self.chars[self.pos];
                    if ch.is_ascii_digit() {
                        self.pos += 1;
                    } else if ch == '.' && self.chars.get(self.pos + 1) != Some(&'.') && !is_float {
                        is_float = true;
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let s: String = self.chars[start..self.pos].iter().collect();
                if is_float {
                    out.push((
                        Tok::Float(s.parse().map_err(|_| self.err("bad float literal"))?),
                        col,
                    ));
                } else {
                    out.push((
                        Tok::Int(s.parse().map_err(|_| self.err("bad int literal"))?),
                        col,
                    ));
                }
                continue;
            }
            if c == '"' {
                self.pos += 1;
                let start = self.pos;
                while self.pos < self.chars.len() && self.chars[self.pos] != '"' {
                    self.pos += 1;
                }
                if self.pos >= self.chars.len() {
                    return Err(self.err("unterminated string"));
                }
                let s: String = self.chars[start..self.pos].iter().collect();
                self.pos += 1;
                out.push((Tok::Str(s), col));
                continue;
            }
            let two: String = self.chars[self.pos..(self.pos + 2).min(self.chars.len())]
                .iter()
                .collect();
            let sym2 = match two.as_str() {
                "+=" => Some("+="),
                "<=" => Some("<="),
                ">=" => Some(">="),
                "==" => Some("=="),
                "&&" => Some("&&"),
                "||" => Some("||"),
                ".." => Some(".."),
                _ => None,
            };
            if let Some(s) = sym2 {
                self.pos += 2;
                out.push((Tok::Sym(s), col));
                continue;
            }
            let sym1 = match c {
                '(' => "(",
                ')' => ")",
                ',' => ",",
                '.' => ".",
                '<' => "<",
                '>' => ">",
                '=' => "=",
                '+' => "+",
                '-' => "-",
                '*' => "*",
                '/' => "/",
                '%' => "%",
                '{' => "{",
                '}' => "}",
                '[' => "[",
                ']' => "]",
                _ => return Err(self.err(format!("unexpected character `{c}`"))),
            };
            self.pos += 1;
            out.push((Tok::Sym(sym1), col));
        }
        let _ = self.src;
        Ok(out)
    }
}

#[derive(Default, Clone)]
struct NameTable {
    funcs: std::collections::BTreeSet<String>,
    params: std::collections::BTreeSet<String>,
    tensors: std::collections::BTreeSet<String>,
}

impl NameTable {
    fn of(program: &Program) -> NameTable {
        NameTable {
            funcs: program.funcs.iter().map(|f| f.name.clone()).collect(),
            params: program.parameters.iter().map(|p| p.name.clone()).collect(),
            tensors: program
                .parameters
                .iter()
                .filter(|p| p.rank > 0)
                .map(|p| p.name.clone())
                .collect(),
        }
    }
}

struct LineParser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    line: usize,
    names: NameTable,
}

impl LineParser {
    fn err(&self, message: impl Into<String>) -> ParseError {
        let col = self.toks.get(self.pos).map(|(_, c)| *c).unwrap_or(0);
        ParseError {
            line: self.line,
            col,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if let Some(Tok::Sym(x)) = self.peek() {
            if *x == s {
                self.pos += 1;
                return true;
            }
        }
        false
    }

    fn expect_sym(&mut self, s: &str) -> Result<(), ParseError> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{s}`")))
        }
    }

    fn expect_ident(&mut self) -> Result<String, ParseError> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(s),
            other => Err(self.err(format!("expected identifier, got {other:?}"))),
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.expr_bp(0)
    }

    /// Arithmetic only: stops before comparison operators, so `>` can close
    /// a relay direction vector.
    fn arith_expr(&mut self) -> Result<Expr, ParseError> {
        self.expr_bp(4)
    }

    fn expr_bp(&mut self, min_bp: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.primary()?;
        loop {
            let (op, bp, swap) = match self.peek() {
                Some(Tok::Sym("||")) => (BinOp::Or, 1, false),
                Some(Tok::Sym("&&")) => (BinOp::And, 2, false),
                Some(Tok::Sym("<")) => (BinOp::Lt, 3, false),
                Some(Tok::Sym("<=")) => (BinOp::Le, 3, false),
                Some(Tok::Sym(">")) => (BinOp::Lt, 3, true),
                Some(Tok::Sym(">=")) => (BinOp::Le, 3, true),
                Some(Tok::Sym("==")) => (BinOp::Eq, 3, false),
                Some(Tok::Sym("+")) => (BinOp::Add, 4, false),
                Some(Tok::Sym("-")) => (BinOp::Sub, 4, false),
                Some(Tok::Sym("*")) => (BinOp::Mul, 5, false),
                Some(Tok::Sym("/")) => (BinOp::Div, 5, false),
                Some(Tok::Sym("%")) => (BinOp::Mod, 5, false),
                _ => break,
            };
            if bp < min_bp {
                break;
            }
            self.pos += 1;
            let rhs = self.expr_bp(bp + 1)?;
            lhs = if swap {
                Expr::bin(op, rhs, lhs)
            } else {
                Expr::bin(op, lhs, rhs)
            };
        }
        Ok(lhs)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.next() {
            Some(Tok::Int(v)) => Ok(Expr::IntConst(v)),
            Some(Tok::Float(v)) => Ok(Expr::FloatConst(v)),
            Some(Tok::Sym("-")) => {
                let e = self.primary()?;
                Ok(match e {
                    Expr::IntConst(v) => Expr::IntConst(-v),
                    Expr::FloatConst(v) => Expr::FloatConst(-v),
                    other => Expr::sub(Expr::int(0), other),
                })
            }
            Some(Tok::Sym("(")) => {
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                if self.eat_sym("(") {
                    let mut args = Vec::new();
                    if !self.eat_sym(")") {
                        loop {
                            args.push(self.expr()?);
                            if self.eat_sym(")") {
                                break;
                            }
                            self.expect_sym(",")?;
                        }
                    }
                    return Ok(self.resolve_call(&name, args));
                }
                // A bare tensor name denotes the whole matrix (stream/extern
                // argument position).
                if self.names.tensors.contains(&name) {
                    return Ok(Expr::ParamRef(name, Vec::new()));
                }
                Ok(Expr::Var(name))
            }
            other => Err(self.err(format!("expected expression, got {other:?}"))),
        }
    }

    fn resolve_call(&self, name: &str, args: Vec<Expr>) -> Expr {
        match name {
            "min" if args.len() == 2 => {
                let mut it = args.into_iter();
                return Expr::bin(BinOp::Min, it.next().unwrap(), it.next().unwrap());
            }
            "max" if args.len() == 2 => {
                let mut it = args.into_iter();
                return Expr::bin(BinOp::Max, it.next().unwrap(), it.next().unwrap());
            }
            "select" if args.len() == 3 => {
                let mut it = args.into_iter();
                return Expr::Select(
                    Box::new(it.next().unwrap()),
                    Box::new(it.next().unwrap()),
                    Box::new(it.next().unwrap()),
                );
            }
            _ => {}
        }
        if self.names.funcs.contains(name) {
            Expr::FuncRef(name.to_string(), args)
        } else if self.names.params.contains(name) {
            Expr::ParamRef(name.to_string(), args)
        } else {
            Expr::Call(name.to_string(), args)
        }
    }
}

fn ir_err(line: usize, e: IrError) -> ParseError {
    ParseError {
        line,
        col: 0,
        message: e.to_string(),
    }
}

/// Parse a textual spec into a program and schedule.
pub fn parse_spec(text: &str) -> Result<(Program, Schedule), ParseError> {
    let mut program = Program::new();
    let mut schedule = Schedule::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let toks = Lexer::new(raw, line).tokens()?;
        if toks.is_empty() {
            continue;
        }
        let mut p = LineParser {
            toks,
            pos: 0,
            line,
            names: NameTable::of(&program),
        };
        if let Some(Tok::Ident(word)) = p.peek().cloned() {
            match word.as_str() {
                "param" => {
                    p.pos += 1;
                    let name = p.expect_ident()?;
                    let mut elem = ElemType::Int;
                    let mut rank = 0usize;
                    if let Some(Tok::Ident(t)) = p.peek().cloned() {
                        match t.as_str() {
                            "int" => {
                                p.pos += 1;
                            }
                            "float" => {
                                elem = ElemType::Float;
                                p.pos += 1;
                            }
                            _ => return Err(p.err(format!("unknown type `{t}`"))),
                        }
                    }
                    if let Some(Tok::Int(r)) = p.peek().cloned() {
                        rank = r as usize;
                        p.pos += 1;
                    }
                    if !p.at_end() {
                        return Err(p.err("trailing tokens after param"));
                    }
                    let param = if rank == 0 {
                        let mut q = Parameter::scalar(&name);
                        q.elem_type = elem;
                        q
                    } else {
                        Parameter::matrix(&name, elem, rank)
                    };
                    program.add_parameter(param).map_err(|e| ir_err(line, e))?;
                    continue;
                }
                "var" => {
                    p.pos += 1;
                    while !p.at_end() {
                        let v = p.expect_ident()?;
                        program.add_var(&v).map_err(|e| ir_err(line, e))?;
                        p.eat_sym(",");
                    }
                    continue;
                }
                "func" => {
                    p.pos += 1;
                    let name = p.expect_ident()?;
                    let mut placement = Placement::Device;
                    if let Some(Tok::Ident(h)) = p.peek().cloned() {
                        if h == "host" {
                            placement = Placement::Host;
                            p.pos += 1;
                        }
                    }
                    if !p.at_end() {
                        return Err(p.err("trailing tokens after func"));
                    }
                    program
                        .add_func(&name, placement)
                        .map_err(|e| ir_err(line, e))?;
                    continue;
                }
                "assume" => {
                    p.pos += 1;
                    let a = parse_assumption(&mut p)?;
                    if !p.at_end() {
                        return Err(p.err("trailing tokens after assume"));
                    }
                    program.add_assumption(a).map_err(|e| ir_err(line, e))?;
                    continue;
                }
                "bounds" => {
                    p.pos += 1;
                    let func = p.expect_ident()?;
                    let var = p.expect_ident()?;
                    let lo = p.expr()?;
                    let hi = p.expr()?;
                    if !p.at_end() {
                        return Err(p.err("trailing tokens after bounds"));
                    }
                    program
                        .set_bounds(&func, &var, lo, hi)
                        .map_err(|e| ir_err(line, e))?;
                    continue;
                }
                "store" => {
                    p.pos += 1;
                    let func = p.expect_ident()?;
                    let mut region = Vec::new();
                    while !p.at_end() {
                        region.push(p.expr()?);
                        p.eat_sym(",");
                    }
                    program
                        .set_store_region(&func, region)
                        .map_err(|e| ir_err(line, e))?;
                    continue;
                }
                _ => {}
            }
        }
        let name = p.expect_ident()?;
        if p.eat_sym("(") {
            // Definition line.
            let mut lhs = Vec::new();
            if !p.eat_sym(")") {
                loop {
                    lhs.push(p.expr()?);
                    if p.eat_sym(")") {
                        break;
                    }
                    p.expect_sym(",")?;
                }
            }
            let is_update = if p.eat_sym("+=") {
                true
            } else if p.eat_sym("=") {
                false
            } else {
                return Err(p.err("expected `=` or `+=`"));
            };
            let rhs = p.expr()?;
            let mut when = None;
            if let Some(Tok::Ident(w)) = p.peek().cloned() {
                if w == "when" {
                    p.pos += 1;
                    when = Some(p.expr()?);
                }
            }
            if !p.at_end() {
                return Err(p.err("trailing tokens after definition"));
            }
            program
                .add_definition_when(&name, lhs, rhs, is_update, when)
                .map_err(|e| ir_err(line, e))?;
            continue;
        }
        if !p.names.funcs.contains(&name) {
            return Err(p.err(format!("unknown function `{name}`")));
        }
        if !matches!(p.peek(), Some(Tok::Sym("."))) {
            return Err(p.err("expected `.` directive chain or a definition"));
        }
        while p.eat_sym(".") {
            let method = p.expect_ident()?;
            p.expect_sym("(")?;
            let d = parse_directive(&mut p, &method)?;
            match d {
                ParsedDirective::SetBounds { var, lo, hi } => {
                    program
                        .set_bounds(&name, &var, lo, hi)
                        .map_err(|e| ir_err(line, e))?;
                }
                ParsedDirective::Store { region } => {
                    program
                        .set_store_region(&name, region)
                        .map_err(|e| ir_err(line, e))?;
                }
                ParsedDirective::DefineExtern { impl_name, params } => {
                    program
                        .set_extern(&name, crate::externs::ExternSig { impl_name, params })
                        .map_err(|e| ir_err(line, e))?;
                }
                ParsedDirective::Plain(d) => {
                    schedule.push(&name, d);
                }
            }
        }
        if !p.at_end() {
            return Err(p.err("trailing tokens after directive chain"));
        }
    }
    Ok((program, schedule))
}

fn parse_assumption(p: &mut LineParser) -> Result<Assumption, ParseError> {
    if let Some(Tok::Ident(kind)) = p.peek().cloned() {
        match kind.as_str() {
            "no_alias" | "symbolic_constant" | "symbolic_constants" => {
                p.pos += 1;
                p.expect_sym("(")?;
                let mut names = Vec::new();
                loop {
                    names.push(p.expect_ident()?);
                    if p.eat_sym(")") {
                        break;
                    }
                    p.expect_sym(",")?;
                }
                return Ok(if kind == "no_alias" {
                    Assumption::NoAlias(names)
                } else {
                    Assumption::SymbolicConstant(names)
                });
            }
            "divisible" | "divisble" => {
                p.pos += 1;
                p.expect_sym("(")?;
                let dividend = p.expect_ident()?;
                p.expect_sym(",")?;
                let divisor = p.expect_ident()?;
                p.expect_sym(")")?;
                return Ok(Assumption::Divisible { dividend, divisor });
            }
            _ => {}
        }
    }
    Ok(Assumption::BoolExpr(p.expr()?))
}

enum ParsedDirective {
    Plain(Directive),
    SetBounds {
        var: String,
        lo: Expr,
        hi: Expr,
    },
    Store {
        region: Vec<Expr>,
    },
    DefineExtern {
        impl_name: String,
        params: Vec<SigParam>,
    },
}

fn parse_directive(p: &mut LineParser, method: &str) -> Result<ParsedDirective, ParseError> {
    fn ident_list(p: &mut LineParser) -> Result<Vec<String>, ParseError> {
        let mut out = Vec::new();
        if p.eat_sym(")") {
            return Ok(out);
        }
        loop {
            out.push(p.expect_ident()?);
            if p.eat_sym(")") {
                break;
            }
            p.expect_sym(",")?;
        }
        Ok(out)
    }
    fn expr_list(p: &mut LineParser) -> Result<Vec<Expr>, ParseError> {
        let mut out = Vec::new();
        if p.eat_sym(")") {
            return Ok(out);
        }
        loop {
            out.push(p.expr()?);
            if p.eat_sym(")") {
                break;
            }
            p.expect_sym(",")?;
        }
        Ok(out)
    }
    match method {
        "tile" => Ok(ParsedDirective::Plain(Directive::Tile {
            args: expr_list(p)?,
        })),
        "reorder" => Ok(ParsedDirective::Plain(Directive::Reorder {
            vars: ident_list(p)?,
        })),
        "unroll" => Ok(ParsedDirective::Plain(Directive::Unroll {
            vars: ident_list(p)?,
        })),
        "remove" => Ok(ParsedDirective::Plain(Directive::Remove {
            vars: ident_list(p)?,
        })),
        "vectorize" => {
            let vars = ident_list(p)?;
            if vars.len() != 1 {
                return Err(p.err("vectorize takes exactly one loop"));
            }
            Ok(ParsedDirective::Plain(Directive::Vectorize {
                var: vars.into_iter().next().unwrap(),
            }))
        }
        "isolate_producer_chain" | "isolate_consumer_chain" => {
            let mut names = ident_list(p)?;
            if names.len() < 2 {
                return Err(p.err("isolation needs a value and at least one function"));
            }
            let value = names.remove(0);
            Ok(ParsedDirective::Plain(
                if method == "isolate_producer_chain" {
                    Directive::IsolateProducerChain {
                        value,
                        chain: names,
                    }
                } else {
                    Directive::IsolateConsumerChain {
                        value,
                        chain: names,
                    }
                },
            ))
        }
        "buffer" | "linebuffer" => {
            let names = ident_list(p)?;
            if names.is_empty() {
                return Err(p.err("buffer needs a value"));
            }
            let value = names[0].clone();
            let mut level = None;
            let mut attrs = Vec::new();
            for n in &names[1..] {
                match n.as_str() {
                    "DOUBLE" => attrs.push(BufferAttr::Double),
                    "REGISTER" => attrs.push(BufferAttr::Register),
                    other => {
                        if level.is_some() {
                            return Err(p.err(format!("unexpected buffer argument `{other}`")));
                        }
                        level = Some(other.to_string());
                    }
                }
            }
            Ok(ParsedDirective::Plain(if method == "buffer" {
                Directive::Buffer {
                    value,
                    level,
                    attrs,
                }
            } else {
                Directive::LineBuffer { value, level }
            }))
        }
        "relay" => {
            let value = p.expect_ident()?;
            p.expect_sym(",")?;
            p.expect_sym("<")?;
            let mut direction = Vec::new();
            loop {
                direction.push(p.arith_expr()?);
                if p.eat_sym(">") {
                    break;
                }
                p.expect_sym(",")?;
            }
            p.expect_sym(")")?;
            Ok(ParsedDirective::Plain(Directive::Relay {
                value,
                direction,
            }))
        }
        "set_min_depth" => {
            let value = p.expect_ident()?;
            p.expect_sym(",")?;
            let dest = p.expect_ident()?;
            p.expect_sym(",")?;
            let depth = match p.next() {
                Some(Tok::Int(v)) => v,
                other => return Err(p.err(format!("expected depth, got {other:?}"))),
            };
            p.expect_sym(")")?;
            Ok(ParsedDirective::Plain(Directive::SetMinDepth {
                value,
                dest,
                depth,
            }))
        }
        "set_bounds" => {
            let var = p.expect_ident()?;
            p.expect_sym(",")?;
            let lo = p.expr()?;
            let hi = if p.eat_sym("..") {
                p.expr()?
            } else {
                p.expect_sym(",")?;
                p.expr()?
            };
            p.expect_sym(")")?;
            Ok(ParsedDirective::SetBounds { var, lo, hi })
        }
        "store" => {
            let region = expr_list(p)?;
            Ok(ParsedDirective::Store { region })
        }
        "define_extern" => {
            let impl_name = match p.next() {
                Some(Tok::Str(s)) => s,
                other => return Err(p.err(format!("expected impl name string, got {other:?}"))),
            };
            p.expect_sym(",")?;
            if let Some(Tok::Ident(v)) = p.peek().cloned() {
                if v == "void" {
                    p.pos += 1;
                    p.expect_sym(",")?;
                }
            }
            p.expect_sym("{")?;
            let mut params = Vec::new();
            loop {
                if p.eat_sym("}") {
                    break;
                }
                let first = p.expect_ident()?;
                if first == "channel" {
                    let ty = p.expect_ident()?;
                    let elem = match ty.as_str() {
                        "int" => ElemType::Int,
                        "float" => ElemType::Float,
                        other => return Err(p.err(format!("unknown channel type `{other}`"))),
                    };
                    let name = p.expect_ident()?;
                    let mut array = false;
                    if p.eat_sym("[") {
                        p.expect_sym("]")?;
                        array = true;
                    }
                    params.push(SigParam::Channel { name, elem, array });
                } else {
                    // `int x` scalar or `float A[]` matrix.
                    let name = p.expect_ident()?;
                    if p.eat_sym("[") {
                        p.expect_sym("]")?;
                        params.push(SigParam::Matrix(name));
                    } else {
                        params.push(SigParam::Scalar(name));
                    }
                }
                if p.eat_sym("}") {
                    break;
                }
                p.expect_sym(",")?;
            }
            p.expect_sym(")")?;
            Ok(ParsedDirective::DefineExtern { impl_name, params })
        }
        other => Err(p.err(format!("unknown directive `{other}`"))),
    }
}

/// Regenerate a textual spec. `parse(dump(parse(x)))` equals `parse(x)`.
pub fn dump_spec(program: &Program, schedule: &Schedule) -> String {
    let mut out = String::new();
    for p in &program.parameters {
        if p.rank == 0 {
            out.push_str(&format!("param {} {}\n", p.name, p.elem_type));
        } else {
            out.push_str(&format!("param {} {} {}\n", p.name, p.elem_type, p.rank));
        }
    }
    for a in &program.assumptions {
        out.push_str(&format!("assume {a}\n"));
    }
    for v in &program.vars {
        out.push_str(&format!("var {v}\n"));
    }
    for f in &program.funcs {
        out.push_str(&format!(
            "func {}{}\n",
            f.name,
            if f.placement == Placement::Host {
                " host"
            } else {
                ""
            }
        ));
    }
    for f in &program.funcs {
        for d in &f.definitions {
            let idx = d
                .lhs_indices
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(", ");
            let op = if d.is_update { "+=" } else { "=" };
            let when = match &d.when {
                Some(w) => format!(" when {w}"),
                None => String::new(),
            };
            out.push_str(&format!("{}({}) {} {}{}\n", f.name, idx, op, d.rhs, when));
        }
    }
    for f in &program.funcs {
        for (v, lo, hi) in &f.bounds {
            out.push_str(&format!("bounds {} {} {} {}\n", f.name, v, lo, hi));
        }
        if let Some(region) = &f.store_region {
            let r = region
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!("store {} {}\n", f.name, r));
        }
    }
    for (func, sig) in &program.extern_sigs {
        let parts: Vec<String> = sig
            .params
            .iter()
            .map(|p| match p {
                SigParam::Scalar(n) => format!("int {n}"),
                SigParam::Matrix(n) => format!("float {n}[]"),
                SigParam::Channel { name, elem, array } => {
                    format!("channel {elem} {name}{}", if *array { "[]" } else { "" })
                }
            })
            .collect();
        out.push_str(&format!(
            "{func}.define_extern(\"{}\", void, {{{}}})\n",
            sig.impl_name,
            parts.join(", ")
        ));
    }
    for (func, d) in &schedule.items {
        out.push_str(&format!("{func}.{d}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG4: &str = r#"
param B float 1
param I
var i
func A
func B_provider
func A_consumer
A(i) = negate(B(i))
bounds A i 0 I
A.isolate_producer_chain(B, B_provider).isolate_consumer_chain(A, A_consumer)
"#;

    #[test]
    fn parse_small_pipeline() {
        let (p, s) = parse_spec(FIG4).unwrap();
        assert_eq!(p.funcs.len(), 3);
        assert_eq!(s.items.len(), 2);
        let f = p.func("A").unwrap();
        assert_eq!(f.definitions.len(), 1);
        assert_eq!(f.bounds.len(), 1);
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse_spec("param A float 2\nA.bogus(i)\n").unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn empty_file_is_empty_program() {
        let (p, s) = parse_spec("").unwrap();
        assert!(p.funcs.is_empty());
        assert!(s.items.is_empty());
        assert!(crate::ir::lower_to_loop_nest(&p, "A").is_err());
    }

    #[test]
    fn round_trip_fixpoint() {
        let (p1, s1) = parse_spec(FIG4).unwrap();
        let dumped = dump_spec(&p1, &s1);
        let (p2, s2) = parse_spec(&dumped).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn relay_vector_and_negative_indices() {
        let text = r#"
param T int 1
param I
assume symbolic_constant(II)
var i
var ii
func A
func driver
A(-1) = 0
A(i) = A(i - 1) + T(i - 1)
bounds A i 0 I
A.tile(i, ii, II)
A.isolate_producer_chain(A, driver).isolate_consumer_chain(A, driver)
A.unroll(ii).relay(A, <1>)
"#;
        let (p, s) = parse_spec(text).unwrap();
        assert_eq!(p.func("A").unwrap().definitions.len(), 2);
        let relay = s
            .items
            .iter()
            .find(|(_, d)| matches!(d, Directive::Relay { .. }))
            .unwrap();
        if let Directive::Relay { direction, .. } = &relay.1 {
            assert_eq!(direction.len(), 1);
        }
        let dumped = dump_spec(&p, &s);
        let (p2, s2) = parse_spec(&dumped).unwrap();
        assert_eq!(p, p2);
        assert_eq!(s, s2);
    }

    #[test]
    fn define_extern_signature() {
        let text = r#"
param input int 2
assume symbolic_constant(L, S)
var l
var m
func out
func input_loader
out(l, m) = merge(S, input(2 * m), input(2 * m + 1)) when l == 0
out(l, m) = merge(pow2(l) * S, out(l - 1, 2 * m), out(l - 1, 2 * m + 1)) when 0 < l
bounds out l 0 L
bounds out m 0 pow2(L - 1 - l)
out.define_extern("merge_impl", void, {int size, channel int input1, channel int input2, channel int output})
"#;
        let (p, _s) = parse_spec(text).unwrap();
        let sig = p.extern_sig("out").unwrap();
        assert_eq!(sig.impl_name, "merge_impl");
        assert_eq!(sig.explicit().len(), 1);
        assert_eq!(sig.channels().len(), 3);
    }
}
