//! Closed-form expressions in `t` and `x` for configuration files, e.g.
//! `"-5*t*cos(x)"` or `"exp(t)"`.

use evalexpr::{
    build_operator_tree, ContextWithMutableFunctions, ContextWithMutableVariables, DefaultNumericTypes, Function,
    HashMapContext, Node, Value,
};

use crate::error::{Error, Result};
use crate::field::{Field3, Grid};
use crate::vec3::Vec3;

type Num = DefaultNumericTypes;

/// A parsed scalar expression.
#[derive(Debug, Clone)]
pub struct Expr {
    source: String,
    tree: Node<Num>,
}

fn unary(f: fn(f64) -> f64) -> Function<Num> {
    Function::new(move |a: &Value<Num>| Ok(Value::Float(f(a.as_number()?))))
}

fn context() -> HashMapContext<Num> {
    let mut ctx = HashMapContext::<Num>::new();
    let fns: [(&str, fn(f64) -> f64); 11] = [
        ("sin", f64::sin),
        ("cos", f64::cos),
        ("tan", f64::tan),
        ("exp", f64::exp),
        ("ln", f64::ln),
        ("sqrt", f64::sqrt),
        ("abs", f64::abs),
        ("sinh", f64::sinh),
        ("cosh", f64::cosh),
        ("tanh", f64::tanh),
        ("atan", f64::atan),
    ];
    for (name, f) in fns {
        ctx.set_function(name.into(), unary(f)).expect("fresh context accepts functions");
    }
    ctx.set_value("pi".into(), Value::Float(std::f64::consts::PI))
        .expect("fresh context accepts values");
    ctx
}

/// Rewrites integer literals as floats so that `2/5` means 0.4.
fn promote_integers(src: &str) -> String {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len() + 8);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let starts_number = c.is_ascii_digit()
            && (i == 0 || !(chars[i - 1].is_alphanumeric() || chars[i - 1] == '_' || chars[i - 1] == '.'));
        if !starts_number {
            out.push(c);
            i += 1;
            continue;
        }
        while i < chars.len() && chars[i].is_ascii_digit() {
            out.push(chars[i]);
            i += 1;
        }
        if !matches!(chars.get(i), Some('.' | 'e' | 'E')) {
            out.push_str(".0");
        }
    }
    out
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let tree = build_operator_tree::<Num>(&promote_integers(source))
            .map_err(|e| Error::Config(format!("cannot parse expression `{source}`: {e}")))?;
        Ok(Expr {
            source: source.to_string(),
            tree,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    fn eval_in(&self, ctx: &mut HashMapContext<Num>, t: f64, x: f64) -> Result<f64> {
        ctx.set_value("t".into(), Value::Float(t))
            .and_then(|_| ctx.set_value("x".into(), Value::Float(x)))
            .and_then(|_| self.tree.eval_number_with_context(ctx))
            .map_err(|e| Error::Config(format!("cannot evaluate `{}`: {e}", self.source)))
            .and_then(|v| {
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Config(format!("`{}` is not finite at t={t}, x={x}", self.source)))
                }
            })
    }

    pub fn eval(&self, t: f64, x: f64) -> Result<f64> {
        self.eval_in(&mut context(), t, x)
    }
}

/// Three component expressions.
pub fn parse_vector(src: &[String; 3]) -> Result<[Expr; 3]> {
    Ok([Expr::parse(&src[0])?, Expr::parse(&src[1])?, Expr::parse(&src[2])?])
}

/// Samples a vector expression on the whole space-time grid.
pub fn sample_field(grid: Grid, src: &[String; 3]) -> Result<Field3> {
    let e = parse_vector(src)?;
    let mut ctx = context();
    let mut out = Field3::zeros(grid);
    for n in 0..grid.nt {
        for i in 0..grid.nx {
            let (t, x) = (grid.t(n), grid.x(i));
            let v = [
                e[0].eval_in(&mut ctx, t, x)?,
                e[1].eval_in(&mut ctx, t, x)?,
                e[2].eval_in(&mut ctx, t, x)?,
            ];
            out.set(n, i, v);
        }
    }
    Ok(out)
}

/// Samples a vector expression at `t = 0` on the space grid.
pub fn sample_slice(grid: Grid, src: &[String; 3]) -> Result<Vec<Vec3>> {
    let e = parse_vector(src)?;
    let mut ctx = context();
    (0..grid.nx)
        .map(|i| {
            let x = grid.x(i);
            Ok([
                e[0].eval_in(&mut ctx, 0.0, x)?,
                e[1].eval_in(&mut ctx, 0.0, x)?,
                e[2].eval_in(&mut ctx, 0.0, x)?,
            ])
        })
        .collect()
}

/// Samples a scalar expression in `t` on the time grid.
pub fn sample_time(grid: Grid, src: &str) -> Result<Vec<f64>> {
    let e = Expr::parse(src)?;
    let mut ctx = context();
    (0..grid.nt).map(|n| e.eval_in(&mut ctx, grid.t(n), 0.0)).collect()
}

/// Samples a scalar expression in `x` on the space grid.
pub fn sample_space(grid: Grid, src: &str) -> Result<Vec<f64>> {
    let e = Expr::parse(src)?;
    let mut ctx = context();
    (0..grid.nx).map(|i| e.eval_in(&mut ctx, 0.0, grid.x(i))).collect()
}
