//! JSON file format for [`TabularMdp`] with line-precise diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{BrrlError, Result};
use crate::mdp::TabularMdp;

#[derive(Debug, Serialize, Deserialize)]
struct MdpFile {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    initial_dist: Vec<f64>,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<Vec<f64>>>,
}

enum Seg<'a> {
    Key(&'a str),
    Index(usize),
}

fn invalid(src: &str, path: &[Seg], message: String) -> BrrlError {
    BrrlError::Invalid { line: locate(src, path), message }
}

fn check_row(src: &str, path: &[Seg], row: &[f64], len: usize, name: &str) -> Result<()> {
    if row.len() != len {
        return Err(invalid(src, path, format!("{name} has {} entries, expected {len}", row.len())));
    }
    if let Some(x) = row.iter().find(|x| **x < 0.0) {
        return Err(invalid(src, path, format!("{name} has negative probability {x}")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(invalid(src, path, format!("{name} sums to {total}, expected 1")));
    }
    Ok(())
}

pub(crate) fn parse(src: &str) -> Result<TabularMdp> {
    let file: MdpFile = serde_json::from_str(src).map_err(|e| BrrlError::Invalid {
        line: Some(e.line()),
        message: e.to_string(),
    })?;
    let (n, k) = (file.n_states, file.n_actions);
    if n == 0 || k == 0 {
        return Err(invalid(src, &[Seg::Key("n_states")], "n_states and n_actions must be at least 1".into()));
    }
    if !(file.gamma > 0.0 && file.gamma < 1.0) {
        return Err(invalid(src, &[Seg::Key("gamma")], format!("gamma = {} must lie in (0, 1)", file.gamma)));
    }
    check_row(src, &[Seg::Key("initial_dist")], &file.initial_dist, n, "initial_dist")?;
    for (name, tensor) in [("transition", &file.transition), ("reward", &file.reward)] {
        if tensor.len() != n {
            return Err(invalid(src, &[Seg::Key(name)], format!("{name} has {} states, expected {n}", tensor.len())));
        }
        for (s, row) in tensor.iter().enumerate() {
            if row.len() != k {
                return Err(invalid(
                    src,
                    &[Seg::Key(name), Seg::Index(s)],
                    format!("{name}[{s}] has {} actions, expected {k}", row.len()),
                ));
            }
            for (a, next) in row.iter().enumerate() {
                let path = [Seg::Key(name), Seg::Index(s), Seg::Index(a)];
                let label = format!("{name}[{s}][{a}]");
                if name == "transition" {
                    check_row(src, &path, next, n, &label)?;
                } else if next.len() != n {
                    return Err(invalid(src, &path, format!("{label} has {} entries, expected {n}", next.len())));
                }
            }
        }
    }
    TabularMdp::from_nested(&file.transition, &file.reward, file.initial_dist, file.gamma)
        .map_err(|e| BrrlError::Invalid { line: None, message: e.to_string() })
}

pub(crate) fn render(mdp: &TabularMdp) -> String {
    let (n, k) = (mdp.n_states(), mdp.n_actions());
    let nest = |f: &dyn Fn(usize, usize) -> Vec<f64>| -> Vec<Vec<Vec<f64>>> {
        (0..n).map(|s| (0..k).map(|a| f(s, a)).collect()).collect()
    };
    let file = MdpFile {
        n_states: n,
        n_actions: k,
        gamma: mdp.gamma(),
        initial_dist: mdp.initial_dist().to_vec(),
        transition: nest(&|s, a| mdp.transition(s, a).to_vec()),
        reward: nest(&|s, a| mdp.reward(s, a).to_vec()),
    };
    serde_json::to_string_pretty(&file).expect("MDP serialization cannot fail")
}

/// Minimal JSON walker that finds the 1-based line where the value at `path` starts.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.pos += 1;
        if b == b'\n' {
            self.line += 1;
        }
        Some(b)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\r' | b'\n')) {
            self.bump();
        }
    }

    fn expect(&mut self, b: u8) -> Option<()> {
        self.skip_ws();
        (self.bump()? == b).then_some(())
    }

    fn string(&mut self) -> Option<String> {
        self.expect(b'"')?;
        let mut out = Vec::new();
        loop {
            match self.bump()? {
                b'"' => return String::from_utf8(out).ok(),
                b'\\' => {
                    out.push(b'\\');
                    out.push(self.bump()?);
                }
                b => out.push(b),
            }
        }
    }

    fn skip_value(&mut self) -> Option<()> {
        self.skip_ws();
        match self.peek()? {
            b'"' => {
                self.string()?;
            }
            open @ (b'[' | b'{') => {
                let close = if open == b'[' { b']' } else { b'}' };
                self.bump();
                self.skip_ws();
                if self.peek()? == close {
                    self.bump();
                    return Some(());
                }
                loop {
                    if open == b'{' {
                        self.string()?;
                        self.expect(b':')?;
                    }
                    self.skip_value()?;
                    self.skip_ws();
                    match self.bump()? {
                        b',' => continue,
                        b if b == close => break,
                        _ => return None,
                    }
                }
            }
            _ => {
                while !matches!(self.peek(), None | Some(b',' | b']' | b'}' | b' ' | b'\t' | b'\r' | b'\n')) {
                    self.bump();
                }
            }
        }
        Some(())
    }
}

fn locate(src: &str, path: &[Seg]) -> Option<usize> {
    let mut c = Cursor { bytes: src.as_bytes(), pos: 0, line: 1 };
    for seg in path {
        match seg {
            Seg::Key(key) => {
                c.expect(b'{')?;
                loop {
                    let k = c.string()?;
                    c.expect(b':')?;
                    if k == *key {
                        break;
                    }
                    c.skip_value()?;
                    c.expect(b',')?;
                }
            }
            Seg::Index(i) => {
                c.expect(b'[')?;
                for _ in 0..*i {
                    c.skip_value()?;
                    c.expect(b',')?;
                }
            }
        }
    }
    c.skip_ws();
    Some(c.line)
}
