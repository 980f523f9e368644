//! Discrete-time quantitative STL over a glucose trace.
//!
//! Robustness of `G >= c` is `G(t) - c`, of `G <= c` is `c - G(t)`; negation flips
//! the sign, conjunction/disjunction take min/max, and `always[a,b]` /
//! `eventually[a,b]` take the min/max over the samples in `[t+a, t+b]`. A window
//! reaching past the end of the trace is an error, never a truncation.

use alloc::boxed::Box;
use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::model::GlucoseTrace;
use crate::text::{fmt_number, parse_number};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StlError {
    #[error("formula needs samples up to t={needed} min but the trace ends at {available} min")]
    InsufficientHorizon { needed: f64, available: f64 },
    #[error("t={t} min is not a sample time of the trace")]
    Misaligned { t: f64 },
    #[error("interval [{lo}, {hi}] contains no sample at dt={dt} min")]
    EmptyWindow { lo: f64, hi: f64, dt: f64 },
    #[error("invalid interval [{lo}, {hi}]: need 0 <= lo <= hi")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("formula parse error at token {token}: {message}")]
    Parse { token: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StlFormula {
    /// `G >= c`
    Ge(f64),
    /// `G <= c`
    Le(f64),
    Not(Box<StlFormula>),
    And(Box<StlFormula>, Box<StlFormula>),
    Or(Box<StlFormula>, Box<StlFormula>),
    Always {
        lo: f64,
        hi: f64,
        arg: Box<StlFormula>,
    },
    Eventually {
        lo: f64,
        hi: f64,
        arg: Box<StlFormula>,
    },
}

impl StlFormula {
    pub fn ge(c: f64) -> Self {
        Self::Ge(c)
    }

    pub fn le(c: f64) -> Self {
        Self::Le(c)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(arg: Self) -> Self {
        Self::Not(Box::new(arg))
    }

    pub fn and(a: Self, b: Self) -> Self {
        Self::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Self, b: Self) -> Self {
        Self::Or(Box::new(a), Box::new(b))
    }

    pub fn always(lo: f64, hi: f64, arg: Self) -> Self {
        Self::Always { lo, hi, arg: Box::new(arg) }
    }

    pub fn eventually(lo: f64, hi: f64, arg: Self) -> Self {
        Self::Eventually { lo, hi, arg: Box::new(arg) }
    }

    pub fn depth(&self) -> usize {
        match self {
            Self::Ge(_) | Self::Le(_) => 0,
            Self::Not(a) | Self::Always { arg: a, .. } | Self::Eventually { arg: a, .. } => 1 + a.depth(),
            Self::And(a, b) | Self::Or(a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    pub fn validate(&self) -> Result<(), StlError> {
        match self {
            Self::Ge(_) | Self::Le(_) => Ok(()),
            Self::Not(a) => a.validate(),
            Self::And(a, b) | Self::Or(a, b) => {
                a.validate()?;
                b.validate()
            }
            Self::Always { lo, hi, arg } | Self::Eventually { lo, hi, arg } => {
                if !(*lo >= 0.0 && lo <= hi && hi.is_finite()) {
                    return Err(StlError::InvalidInterval { lo: *lo, hi: *hi });
                }
                arg.validate()
            }
        }
    }

    /// How far past `t` (min) the formula reads.
    pub fn horizon(&self) -> f64 {
        match self {
            Self::Ge(_) | Self::Le(_) => 0.0,
            Self::Not(a) => a.horizon(),
            Self::And(a, b) | Self::Or(a, b) => a.horizon().max(b.horizon()),
            Self::Always { hi, arg, .. } | Self::Eventually { hi, arg, .. } => hi + arg.horizon(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, StlError> {
        let tokens = tokenize(text);
        let mut parser = Parser { tokens, pos: 0 };
        let f = parser.expr()?;
        if parser.pos != parser.tokens.len() {
            return Err(parser.error("trailing input"));
        }
        f.validate()?;
        Ok(f)
    }
}

/// Sample-index window `[lo, hi]` of an interval at spacing `dt`.
pub(crate) fn window(lo: f64, hi: f64, dt: f64) -> Result<(usize, usize), StlError> {
    if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
        return Err(StlError::InvalidInterval { lo, hi });
    }
    let a = libm::ceil(lo / dt - 1e-9) as usize;
    let b = libm::floor(hi / dt + 1e-9) as usize;
    if a > b {
        return Err(StlError::EmptyWindow { lo, hi, dt });
    }
    Ok((a, b))
}

fn lookahead(phi: &StlFormula, dt: f64) -> Result<usize, StlError> {
    Ok(match phi {
        StlFormula::Ge(_) | StlFormula::Le(_) => 0,
        StlFormula::Not(a) => lookahead(a, dt)?,
        StlFormula::And(a, b) | StlFormula::Or(a, b) => lookahead(a, dt)?.max(lookahead(b, dt)?),
        StlFormula::Always { lo, hi, arg } | StlFormula::Eventually { lo, hi, arg } => {
            window(*lo, *hi, dt)?.1 + lookahead(arg, dt)?
        }
    })
}

/// Sliding-window extremum over `w` consecutive values (monotone deque).
fn sliding<F: Fn(f64, f64) -> bool>(values: &[f64], offset: usize, w: usize, out_len: usize, keep: F) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_len);
    let mut dq: VecDeque<usize> = VecDeque::new();
    let mut next = offset;
    for i in 0..out_len {
        let (start, end) = (i + offset, i + offset + w);
        while next < end {
            while let Some(&back) = dq.back() {
                if keep(values[next], values[back]) {
                    dq.pop_back();
                } else {
                    break;
                }
            }
            dq.push_back(next);
            next += 1;
        }
        while dq.front().is_some_and(|&f| f < start) {
            dq.pop_front();
        }
        out.push(values[*dq.front().expect("window is non-empty")]);
    }
    out
}

fn eval_signal(phi: &StlFormula, samples: &[f64], dt: f64) -> Result<Vec<f64>, StlError> {
    Ok(match phi {
        StlFormula::Ge(c) => samples.iter().map(|g| g - c).collect(),
        StlFormula::Le(c) => samples.iter().map(|g| c - g).collect(),
        StlFormula::Not(a) => eval_signal(a, samples, dt)?.into_iter().map(|r| -r).collect(),
        StlFormula::And(a, b) | StlFormula::Or(a, b) => {
            let ra = eval_signal(a, samples, dt)?;
            let rb = eval_signal(b, samples, dt)?;
            let is_and = matches!(phi, StlFormula::And(..));
            ra.iter().zip(&rb).map(|(&x, &y)| if is_and { x.min(y) } else { x.max(y) }).collect()
        }
        StlFormula::Always { lo, hi, arg } | StlFormula::Eventually { lo, hi, arg } => {
            let (a, b) = window(*lo, *hi, dt)?;
            let child = eval_signal(arg, samples, dt)?;
            let out_len = child.len().saturating_sub(b);
            let w = b - a + 1;
            if matches!(phi, StlFormula::Always { .. }) {
                sliding(&child, a, w, out_len, |new, old| new <= old)
            } else {
                sliding(&child, a, w, out_len, |new, old| new >= old)
            }
        }
    })
}

/// Robustness signal at every sample index `i` for which the formula's window
/// stays inside the trace (the returned vector is that long).
pub fn robustness_signal(phi: &StlFormula, trace: &GlucoseTrace) -> Result<Vec<f64>, StlError> {
    phi.validate()?;
    let need = lookahead(phi, trace.dt)?;
    if need >= trace.len() {
        return Err(StlError::InsufficientHorizon { needed: trace.time_at(need), available: trace.end_time() });
    }
    eval_signal(phi, &trace.samples, trace.dt)
}

/// Robustness of `phi` on `trace` at time `t` (mg/dL).
pub fn robustness(phi: &StlFormula, trace: &GlucoseTrace, t: f64) -> Result<f64, StlError> {
    phi.validate()?;
    let idx = trace.index_of(t).ok_or(StlError::Misaligned { t })?;
    let need = lookahead(phi, trace.dt)?;
    if idx + need >= trace.len() {
        return Err(StlError::InsufficientHorizon { needed: trace.time_at(idx + need), available: trace.end_time() });
    }
    // evaluate on the suffix that starts at `idx`
    let sig = eval_signal(phi, &trace.samples[idx..], trace.dt)?;
    Ok(sig[0])
}

impl fmt::Display for StlFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn sub(f: &mut fmt::Formatter<'_>, phi: &StlFormula) -> fmt::Result {
            write!(f, "({phi})")
        }
        match self {
            Self::Ge(c) => write!(f, "ge {}", fmt_number(*c)),
            Self::Le(c) => write!(f, "le {}", fmt_number(*c)),
            Self::Not(a) => {
                f.write_str("not ")?;
                sub(f, a)
            }
            Self::And(a, b) | Self::Or(a, b) => {
                f.write_str(if matches!(self, Self::And(..)) { "and " } else { "or " })?;
                sub(f, a)?;
                f.write_str(" ")?;
                sub(f, b)
            }
            Self::Always { lo, hi, arg } | Self::Eventually { lo, hi, arg } => {
                let op = if matches!(self, Self::Always { .. }) { "always" } else { "ev" };
                write!(f, "{op} {} {} ", fmt_number(*lo), fmt_number(*hi))?;
                sub(f, arg)
            }
        }
    }
}

fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c == '(' || c == ')' || c.is_whitespace() {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

struct Parser {
    tokens: Vec<String>,
    pos: usize,
}

impl Parser {
    fn error(&self, message: &str) -> StlError {
        StlError::Parse { token: self.pos, message: message.to_string() }
    }

    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).map(String::as_str)
    }

    fn next(&mut self) -> Result<&str, StlError> {
        let tok = self.tokens.get(self.pos).ok_or_else(|| self.error("unexpected end of formula"))?;
        self.pos += 1;
        Ok(tok.as_str())
    }

    fn number(&mut self) -> Result<f64, StlError> {
        let tok = self.next()?.to_string();
        parse_number(&tok).map_err(|e| StlError::Parse { token: self.pos - 1, message: e })
    }

    fn at_arg_end(&self) -> bool {
        matches!(self.peek(), None | Some(")"))
    }

    fn expr(&mut self) -> Result<StlFormula, StlError> {
        let head = self.next()?.to_string();
        match head.as_str() {
            "(" => {
                let inner = self.expr()?;
                match self.next()? {
                    ")" => Ok(inner),
                    _ => {
                        self.pos -= 1;
                        Err(self.error("expected `)`"))
                    }
                }
            }
            "ge" => Ok(StlFormula::Ge(self.number()?)),
            "le" => Ok(StlFormula::Le(self.number()?)),
            "not" => Ok(StlFormula::not(self.expr()?)),
            "and" | "or" => {
                let mut acc = self.expr()?;
                let second = self.expr()?;
                let join = |a, b| if head == "and" { StlFormula::and(a, b) } else { StlFormula::or(a, b) };
                acc = join(acc, second);
                while !self.at_arg_end() {
                    let more = self.expr()?;
                    acc = join(acc, more);
                }
                Ok(acc)
            }
            "always" | "alw" => {
                let (lo, hi) = (self.number()?, self.number()?);
                Ok(StlFormula::always(lo, hi, self.expr()?))
            }
            "eventually" | "ev" => {
                let (lo, hi) = (self.number()?, self.number()?);
                Ok(StlFormula::eventually(lo, hi, self.expr()?))
            }
            other => {
                self.pos -= 1;
                Err(self.error(&format!("unknown operator `{other}`")))
            }
        }
    }
}
