//! Model formulas.
//!
//! ```text
//! formula := response "~" trafo ["|" "strata(" names ")"] ["+" "shift(" terms ")"] ["@" link]
//! trafo   := "linear()" | "bernstein(" M ")" ["+" "varying(" name ")"]
//!          | "tensor(bernstein(" M ")," name "," M ")"
//! terms   := term ("+" term)*
//! term    := name | name (":" name)+ | name ("*" name)+
//! link    := "probit" | "logit"
//! ```
//!
//! The link defaults to logit. Error positions are 1-based byte offsets;
//! an unexpected end of input is reported one past the last byte.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisError, BernsteinBasis, LinearBasis, Support, TensorBasis, TransformationBasis, VaryingCoefBasis};
use crate::data::{shift_columns, Column, DataError, Dataset, ShiftTerm};
use crate::model::{Link, ModelSpec, Strata};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {position}: {message}")]
pub struct ParseError {
    /// 1-based byte offset.
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum LowerError {
    #[error("response {formula} does not match the data response {data}")]
    Response { formula: String, data: String },
    #[error("strata variable {0} must be categorical")]
    NumericStratum(String),
    #[error("variable {0} must be numeric")]
    NotNumeric(String),
    #[error("variable {0} appears both as stratum and as shift main effect")]
    StratumInShift(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trafo {
    Linear,
    Bernstein(usize),
    Tensor { order: usize, var: String, covariate_order: usize },
    Varying { order: usize, var: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaAst {
    pub response: String,
    pub trafo: Trafo,
    pub strata: Vec<String>,
    pub shift: Vec<ShiftTerm>,
    pub link: Link,
}

impl fmt::Display for Trafo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trafo::Linear => write!(f, "linear()"),
            Trafo::Bernstein(m) => write!(f, "bernstein({m})"),
            Trafo::Tensor {
                order,
                var,
                covariate_order,
            } => write!(f, "tensor(bernstein({order}), {var}, {covariate_order})"),
            Trafo::Varying { order, var } => write!(f, "bernstein({order}) + varying({var})"),
        }
    }
}

fn term_text(t: &ShiftTerm) -> String {
    match t {
        ShiftTerm::Main(v) => v.clone(),
        ShiftTerm::Interaction(v) => v.join(":"),
        ShiftTerm::Crossed(v) => v.join("*"),
    }
}

impl fmt::Display for FormulaAst {
    /// Canonical form; parsing it gives back the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ {}", self.response, self.trafo)?;
        if !self.strata.is_empty() {
            write!(f, " | strata({})", self.strata.join(", "))?;
        }
        if !self.shift.is_empty() {
            let terms: Vec<String> = self.shift.iter().map(term_text).collect();
            write!(f, " + shift({})", terms.join(" + "))?;
        }
        write!(f, " @ {}", self.link.name())
    }
}

pub fn print(ast: &FormulaAst) -> String {
    ast.to_string()
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(usize),
    Sym(char),
    End,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    tok: Tok,
    tok_start: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Result<Self, ParseError> {
        let mut p = Parser {
            src,
            pos: 0,
            tok: Tok::End,
            tok_start: 0,
        };
        p.advance()?;
        Ok(p)
    }

    fn error<T>(&self, at: usize, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            position: at + 1,
            message: message.into(),
        })
    }

    fn advance(&mut self) -> Result<(), ParseError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        self.tok_start = self.pos;
        if self.pos >= bytes.len() {
            self.tok = Tok::End;
            return Ok(());
        }
        let c = self.src[self.pos..].chars().next().unwrap();
        if c.is_alphabetic() || c == '_' || c == '.' {
            let start = self.pos;
            while let Some(ch) = self.src[self.pos..].chars().next() {
                if ch.is_alphanumeric() || ch == '_' || ch == '.' {
                    self.pos += ch.len_utf8();
                } else {
                    break;
                }
            }
            self.tok = Tok::Ident(self.src[start..self.pos].to_string());
        } else if c.is_ascii_digit() {
            let start = self.pos;
            while self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            match self.src[start..self.pos].parse() {
                Ok(v) => self.tok = Tok::Int(v),
                Err(_) => return self.error(start, "integer out of range"),
            }
        } else if "~|+@(),:*".contains(c) {
            self.pos += 1;
            self.tok = Tok::Sym(c);
        } else {
            return self.error(self.pos, format!("unexpected character {c:?}"));
        }
        Ok(())
    }

    fn describe(&self) -> String {
        match &self.tok {
            Tok::Ident(s) => format!("{s:?}"),
            Tok::Int(v) => v.to_string(),
            Tok::Sym(c) => format!("{c:?}"),
            Tok::End => "end of input".to_string(),
        }
    }

    fn expect_sym(&mut self, c: char) -> Result<(), ParseError> {
        if self.tok == Tok::Sym(c) {
            self.advance()
        } else {
            self.error(self.tok_start, format!("expected {c:?}, found {}", self.describe()))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match &self.tok {
            Tok::Ident(s) => {
                let s = s.clone();
                self.advance()?;
                Ok(s)
            }
            _ => self.error(self.tok_start, format!("expected {what}, found {}", self.describe())),
        }
    }

    fn order(&mut self) -> Result<usize, ParseError> {
        match self.tok {
            Tok::Int(v) if v >= 1 => {
                self.advance()?;
                Ok(v)
            }
            Tok::Int(_) => self.error(self.tok_start, "order must be at least 1"),
            _ => self.error(self.tok_start, format!("expected an order, found {}", self.describe())),
        }
    }

    fn bernstein_call(&mut self) -> Result<usize, ParseError> {
        let at = self.tok_start;
        let name = self.ident("bernstein(M)")?;
        if name != "bernstein" {
            return self.error(at, format!("expected bernstein(M), found {name:?}"));
        }
        self.expect_sym('(')?;
        let m = self.order()?;
        self.expect_sym(')')?;
        Ok(m)
    }

    fn trafo(&mut self) -> Result<Trafo, ParseError> {
        let at = self.tok_start;
        if self.tok == Tok::End {
            return self.error(at, "missing transformation term");
        }
        let name = self.ident("a transformation term")?;
        match name.as_str() {
            "linear" => {
                self.expect_sym('(')?;
                self.expect_sym(')')?;
                Ok(Trafo::Linear)
            }
            "bernstein" => {
                self.expect_sym('(')?;
                let m = self.order()?;
                self.expect_sym(')')?;
                Ok(Trafo::Bernstein(m))
            }
            "tensor" => {
                self.expect_sym('(')?;
                let order = self.bernstein_call()?;
                self.expect_sym(',')?;
                let var = self.ident("a variable name")?;
                self.expect_sym(',')?;
                let covariate_order = self.order()?;
                self.expect_sym(')')?;
                Ok(Trafo::Tensor {
                    order,
                    var,
                    covariate_order,
                })
            }
            "varying" | "shift" | "strata" => self.error(at, format!("{name}() must follow a transformation term")),
            _ => self.error(at, format!("unknown function {name:?}")),
        }
    }

    fn names(&mut self) -> Result<Vec<String>, ParseError> {
        let mut out = vec![self.ident("a variable name")?];
        while self.tok == Tok::Sym(',') {
            self.advance()?;
            out.push(self.ident("a variable name")?);
        }
        Ok(out)
    }

    fn term(&mut self) -> Result<ShiftTerm, ParseError> {
        let first = self.ident("a shift term")?;
        let op = match self.tok {
            Tok::Sym(c @ (':' | '*')) => c,
            _ => return Ok(ShiftTerm::Main(first)),
        };
        let mut vars = vec![first];
        while self.tok == Tok::Sym(op) {
            self.advance()?;
            vars.push(self.ident("a variable name")?);
        }
        if let Tok::Sym(c @ (':' | '*')) = self.tok {
            return self.error(self.tok_start, format!("cannot mix ':' and '*' in one term (found {c:?})"));
        }
        Ok(if op == ':' {
            ShiftTerm::Interaction(vars)
        } else {
            ShiftTerm::Crossed(vars)
        })
    }

    fn call_open(&mut self, at: usize, name: &str) -> Result<(), ParseError> {
        if self.tok != Tok::Sym('(') {
            return self.error(at, format!("expected {name}(...)"));
        }
        self.advance()
    }

    fn formula(&mut self) -> Result<FormulaAst, ParseError> {
        let response = match &self.tok {
            Tok::Ident(_) => self.ident("a response")?,
            Tok::Sym('~') => return self.error(self.tok_start, "missing response"),
            _ => return self.error(self.tok_start, format!("expected a response, found {}", self.describe())),
        };
        self.expect_sym('~')?;
        let mut trafo = self.trafo()?;
        let mut strata: Option<Vec<String>> = None;
        let mut shift: Option<Vec<ShiftTerm>> = None;
        let mut link: Option<Link> = None;
        loop {
            let at = self.tok_start;
            match self.tok.clone() {
                Tok::End => break,
                Tok::Sym('|') => {
                    if strata.is_some() {
                        return self.error(at, "duplicate strata clause");
                    }
                    if shift.is_some() || link.is_some() {
                        return self.error(at, "strata clause must precede shift and link");
                    }
                    self.advance()?;
                    let kw_at = self.tok_start;
                    let kw = self.ident("strata(...)")?;
                    if kw != "strata" {
                        return self.error(kw_at, format!("unknown function {kw:?}"));
                    }
                    self.call_open(kw_at, "strata")?;
                    strata = Some(self.names()?);
                    self.expect_sym(')')?;
                }
                Tok::Sym('+') => {
                    if link.is_some() {
                        return self.error(at, "link must come last");
                    }
                    self.advance()?;
                    let kw_at = self.tok_start;
                    let kw = self.ident("shift(...) or varying(...)")?;
                    match kw.as_str() {
                        "varying" => {
                            let order = match &trafo {
                                Trafo::Bernstein(m) if strata.is_none() && shift.is_none() => *m,
                                Trafo::Varying { .. } => return self.error(kw_at, "duplicate varying term"),
                                _ => return self.error(kw_at, "varying(...) must directly follow bernstein(M)"),
                            };
                            self.call_open(kw_at, "varying")?;
                            let var = self.ident("a variable name")?;
                            self.expect_sym(')')?;
                            trafo = Trafo::Varying { order, var };
                        }
                        "shift" => {
                            if shift.is_some() {
                                return self.error(kw_at, "duplicate shift clause");
                            }
                            self.call_open(kw_at, "shift")?;
                            let mut terms = vec![self.term()?];
                            while self.tok == Tok::Sym('+') {
                                self.advance()?;
                                terms.push(self.term()?);
                            }
                            self.expect_sym(')')?;
                            shift = Some(terms);
                        }
                        _ => return self.error(kw_at, format!("unknown function {kw:?}")),
                    }
                }
                Tok::Sym('@') => {
                    if link.is_some() {
                        return self.error(at, "duplicate link");
                    }
                    self.advance()?;
                    let l_at = self.tok_start;
                    let name = self.ident("a link")?;
                    link = Some(match Link::parse(&name) {
                        Some(l) => l,
                        None => return self.error(l_at, format!("unknown link {name:?}")),
                    });
                }
                _ => return self.error(at, format!("unexpected {}", self.describe())),
            }
        }
        Ok(FormulaAst {
            response,
            trafo,
            strata: strata.unwrap_or_default(),
            shift: shift.unwrap_or_default(),
            link: link.unwrap_or(Link::Logit),
        })
    }
}

pub fn parse(text: &str) -> Result<FormulaAst, ParseError> {
    Parser::new(text)?.formula()
}

/// A model structure and its parameter names.
#[derive(Debug, Clone, PartialEq)]
pub struct Lowered {
    pub spec: ModelSpec,
    pub names: Vec<String>,
}

fn numeric<'a>(d: &'a Dataset, var: &str) -> Result<&'a [f64], LowerError> {
    match d.column(var)? {
        Column::Numeric(v) => Ok(v),
        Column::Categorical(_) => Err(LowerError::NotNumeric(var.to_string())),
    }
}

/// Builds the model for `d`. Bernstein response bases span the observed
/// response range widened by 10% on each side; covariate bases span the
/// observed covariate range.
pub fn lower(ast: &FormulaAst, d: &Dataset) -> Result<Lowered, LowerError> {
    if ast.response != d.response_name() {
        return Err(LowerError::Response {
            formula: ast.response.clone(),
            data: d.response_name().to_string(),
        });
    }
    let y = d.response();
    let response_basis = |m: usize| -> Result<BernsteinBasis, LowerError> { Ok(BernsteinBasis::new(m, Support::around(y)?)?) };
    let trafo: TransformationBasis = match &ast.trafo {
        Trafo::Linear => LinearBasis::new().into(),
        Trafo::Bernstein(m) => response_basis(*m)?.into(),
        Trafo::Tensor {
            order,
            var,
            covariate_order,
        } => {
            let x = numeric(d, var)?;
            let cov = BernsteinBasis::new(*covariate_order, Support::spanning(x)?)?;
            TensorBasis::new(response_basis(*order)?, var.clone(), cov).into()
        }
        Trafo::Varying { order, var } => {
            let x = numeric(d, var)?;
            let b = response_basis(*order)?;
            TransformationBasis::varying(b.clone(), VaryingCoefBasis::new(b, var.clone(), Support::spanning(x)?))
        }
    };
    for v in &ast.strata {
        if let Column::Numeric(_) = d.column(v)? {
            return Err(LowerError::NumericStratum(v.clone()));
        }
    }
    for t in &ast.shift {
        let conflict = match t {
            ShiftTerm::Main(v) => ast.strata.contains(v).then(|| v.clone()),
            ShiftTerm::Crossed(vs) => vs.iter().find(|v| ast.strata.contains(v)).cloned(),
            ShiftTerm::Interaction(_) => None,
        };
        if let Some(v) = conflict {
            return Err(LowerError::StratumInShift(v));
        }
    }
    let strata = if ast.strata.is_empty() {
        None
    } else {
        Some(Strata::from_data(d, &ast.strata)?)
    };
    let spec = ModelSpec {
        response: ast.response.clone(),
        link: ast.link,
        trafo,
        strata,
        shifts: shift_columns(d, &ast.shift)?,
        formula: Some(ast.to_string()),
    };
    let names = spec.param_names();
    Ok(Lowered { spec, names })
}

/// Parses and lowers; the spec keeps `text` verbatim.
pub fn compile(text: &str, d: &Dataset) -> Result<Lowered, CompileError> {
    let ast = parse(text)?;
    let mut lowered = lower(&ast, d)?;
    lowered.spec.formula = Some(text.to_string());
    Ok(lowered)
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Lower(#[from] LowerError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shs_like(n: usize) -> Dataset {
        let sexes = ["female", "male"];
        let smoking = ["never", "former", "light", "medium", "heavy"];
        let three = ["a", "b", "c"];
        let two = ["yes", "no"];
        let pick = |opts: &[&'static str], i: usize, k: usize| -> Vec<&'static str> {
            (0..n).map(|r| opts[(r * k + i) % opts.len()]).collect()
        };
        let y: Vec<f64> = (0..n).map(|i| 18.0 + (i % 17) as f64).collect();
        Dataset::new("bmi", y)
            .with_categorical("sex", &pick(&sexes, 0, 1))
            .unwrap()
            .with_categorical("smoking", &pick(&smoking, 0, 3))
            .unwrap()
            .with_numeric("age", (0..n).map(|i| 20.0 + (i % 50) as f64).collect())
            .unwrap()
            .with_numeric("alcohol", (0..n).map(|i| (i % 7) as f64).collect())
            .unwrap()
            .with_categorical("fv", &pick(&two, 1, 5))
            .unwrap()
            .with_categorical("activity", &pick(&three, 0, 7))
            .unwrap()
            .with_categorical("edu", &pick(&three, 1, 11))
            .unwrap()
            .with_categorical("nat", &pick(&two, 0, 13))
            .unwrap()
            .with_categorical("region", &pick(&three, 2, 17))
            .unwrap()
    }

    fn count(text: &str) -> usize {
        compile(text, &shs_like(600)).unwrap().spec.n_params()
    }

    const LIFESTYLE: &str = "alcohol + fv + activity + edu + nat + region";

    #[test]
    fn parameter_counts_of_the_named_models() {
        let ss1 = compile("bmi ~ linear() + shift(sex*smoking) @ probit", &shs_like(600)).unwrap();
        // Ten cell means plus the common scale.
        assert_eq!(ss1.spec.n_params(), 11);
        assert_eq!(ss1.spec.n_params() - 1, 10);
        assert_eq!(count("bmi ~ linear() | strata(sex, smoking) @ probit"), 20);
        assert_eq!(count("bmi ~ bernstein(5) | strata(sex,smoking) @ probit"), 60);
        assert_eq!(count("bmi ~ bernstein(5) | strata(sex) + shift(sex:smoking) @ logit"), 20);
        assert_eq!(count("bmi ~ bernstein(5) | strata(sex) + shift(smoking)"), 16);
        assert_eq!(
            count(&format!("bmi ~ tensor(bernstein(5), age, 5) | strata(sex) + shift(sex:smoking + {LIFESTYLE})")),
            89
        );
        assert_eq!(
            count(&format!("bmi ~ bernstein(5) + varying(age) | strata(sex) + shift(sex:smoking + {LIFESTYLE})")),
            41
        );
        assert_eq!(
            count(&format!("bmi ~ bernstein(5) | strata(sex) + shift(sex:smoking + sex:age + {LIFESTYLE})")),
            31
        );
    }

    #[test]
    fn parameter_names() {
        let l = compile("bmi ~ bernstein(5) | strata(sex) + shift(sex:smoking)", &shs_like(100)).unwrap();
        assert!(l.names.contains(&"theta[sex=male][3]".to_string()));
        assert!(l.names.contains(&"beta[sex=female:smoking=former]".to_string()));
        assert_eq!(l.names.len(), 20);
    }

    #[test]
    fn examples_parse() {
        let a = parse("bmi ~ bernstein(5) | strata(sex,smoking) @ probit").unwrap();
        assert_eq!(a.trafo, Trafo::Bernstein(5));
        assert_eq!(a.strata, vec!["sex", "smoking"]);
        assert_eq!(a.link, Link::Probit);
        let b = parse("bmi~linear()").unwrap();
        assert_eq!((b.trafo, b.link), (Trafo::Linear, Link::Logit));
        let c = parse("bmi ~ bernstein(5) + varying(age) | strata(sex) + shift(sex:smoking + alcohol)").unwrap();
        assert_eq!(
            c.trafo,
            Trafo::Varying {
                order: 5,
                var: "age".into()
            }
        );
        assert_eq!(
            c.shift,
            vec![
                ShiftTerm::Interaction(vec!["sex".into(), "smoking".into()]),
                ShiftTerm::Main("alcohol".into())
            ]
        );
        let d = parse("bmi ~ tensor(bernstein(5), age, 4) + shift(a*b*c)").unwrap();
        assert_eq!(d.shift, vec![ShiftTerm::Crossed(vec!["a".into(), "b".into(), "c".into()])]);
    }

    #[test]
    fn errors_carry_positions() {
        let e = parse("bmi ~").unwrap_err();
        assert_eq!(e.position, 6);
        assert_eq!(parse("~ linear()").unwrap_err().position, 1);
        let e = parse("bmi ~ spline(3)").unwrap_err();
        assert_eq!(e.position, 7);
        assert!(e.message.contains("unknown function"));
        let e = parse("bmi ~ linear() | strata(a) | strata(b)").unwrap_err();
        assert_eq!(e.position, 28);
        assert!(e.message.contains("duplicate"));
        let e = parse("bmi ~ linear() + shift(a) + shift(b)").unwrap_err();
        assert!(e.message.contains("duplicate"));
        assert!(parse("bmi ~ linear() @ probit @ logit").unwrap_err().message.contains("duplicate"));
        assert!(parse("bmi ~ bernstein(0)").is_err());
        assert!(parse("bmi ~ linear() @ cloglog").unwrap_err().message.contains("unknown link"));
        assert!(parse("bmi ~ linear() + shift(a:b*c)").is_err());
        assert!(parse("bmi ~ linear() $").is_err());
    }

    #[test]
    fn lowering_errors() {
        let d = shs_like(100);
        assert!(matches!(
            compile("bmi ~ linear() | strata(age)", &d),
            Err(CompileError::Lower(LowerError::NumericStratum(_)))
        ));
        assert!(matches!(
            compile("bmi ~ tensor(bernstein(3), sex, 3)", &d),
            Err(CompileError::Lower(LowerError::NotNumeric(_)))
        ));
        assert!(matches!(
            compile("weight ~ linear()", &d),
            Err(CompileError::Lower(LowerError::Response { .. }))
        ));
        assert!(matches!(
            compile("bmi ~ linear() | strata(sex) + shift(sex)", &d),
            Err(CompileError::Lower(LowerError::StratumInShift(_)))
        ));
        assert!(compile("bmi ~ linear() + shift(nothing)", &d).is_err());
    }

    #[test]
    fn print_is_canonical() {
        let text = "bmi ~ bernstein(5) + varying(age) | strata(sex, smoking) + shift(sex:smoking + a*b + c) @ logit";
        let ast = parse(text).unwrap();
        assert_eq!(print(&ast), text);
        assert_eq!(parse(&print(&ast)).unwrap(), ast);
    }

    fn name() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_]{0,6}".prop_filter("keywords", |s| {
            !matches!(s.as_str(), "strata" | "shift" | "varying" | "bernstein" | "linear" | "tensor")
        })
    }

    fn term() -> impl Strategy<Value = ShiftTerm> {
        prop_oneof![
            name().prop_map(ShiftTerm::Main),
            prop::collection::vec(name(), 2..4).prop_map(ShiftTerm::Interaction),
            prop::collection::vec(name(), 2..4).prop_map(ShiftTerm::Crossed),
        ]
    }

    fn trafo() -> impl Strategy<Value = Trafo> {
        prop_oneof![
            Just(Trafo::Linear),
            (1usize..12).prop_map(Trafo::Bernstein),
            (1usize..12, name(), 1usize..6).prop_map(|(order, var, covariate_order)| Trafo::Tensor {
                order,
                var,
                covariate_order
            }),
            (1usize..12, name()).prop_map(|(order, var)| Trafo::Varying { order, var }),
        ]
    }

    proptest! {
        #[test]
        fn parse_print_roundtrip(
            response in name(),
            trafo in trafo(),
            strata in prop::collection::vec(name(), 0..3),
            shift in prop::collection::vec(term(), 0..4),
            probit in any::<bool>(),
        ) {
            let ast = FormulaAst {
                response,
                trafo,
                strata,
                shift,
                link: if probit { Link::Probit } else { Link::Logit },
            };
            prop_assert_eq!(parse(&print(&ast)).unwrap(), ast);
        }
    }
}
