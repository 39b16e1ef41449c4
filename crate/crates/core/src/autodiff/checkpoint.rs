//! Plain-text checkpoints.
//!
//! A checkpoint holds one or more networks. Each starts with a header line
//! `mlp <w0> <w1> ... <wk> <activation> <head>` followed by one parameter per
//! line in segment order, written with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::mlp::{Activation, Head, Mlp, MlpSpec, ParamVector};
use crate::error::{Error, Result};

pub fn checkpoint_to_string(models: &[&Mlp]) -> String {
    let mut out = String::new();
    for m in models {
        writeln!(out, "{}", m.spec).unwrap();
        for v in m.params.values() {
            writeln!(out, "{v:.16e}").unwrap();
        }
    }
    out
}

pub fn parse_checkpoint(text: &str, origin: &Path) -> Result<Vec<Mlp>> {
    let mut models = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((i, line)) = lines.next() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let spec = parse_header(line).map_err(|e| Error::parse(origin, line_no, e.to_string()))?;
        let n = spec.param_count();
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            let Some((j, l)) = lines.next() else {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!("network `{spec}` expects {n} parameters, file ends after {}", values.len()),
                ));
            };
            let v: f64 = l
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, j + 1, format!("not a number: `{l}`")))?;
            values.push(v);
        }
        let params = ParamVector::from_values(&spec, values)?;
        models.push(Mlp::new(spec, params)?);
    }
    if models.is_empty() {
        return Err(Error::parse(origin, 1, "checkpoint contains no network"));
    }
    Ok(models)
}

fn parse_header(line: &str) -> Result<MlpSpec> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() < 5 || tokens[0] != "mlp" {
        return Err(Error::InvalidArgument(format!("bad network header `{line}`")));
    }
    let head = Head::parse(tokens[tokens.len() - 1])?;
    let activation = Activation::parse(tokens[tokens.len() - 2])?;
    let widths = tokens[1..tokens.len() - 2]
        .iter()
        .map(|t| t.parse::<usize>().map_err(|_| Error::InvalidArgument(format!("bad width `{t}`"))))
        .collect::<Result<Vec<_>>>()?;
    MlpSpec::new(widths, activation, head)
}

pub fn write_checkpoint(path: &Path, models: &[&Mlp]) -> Result<()> {
    fs::write(path, checkpoint_to_string(models)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<Mlp>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, path)
}
