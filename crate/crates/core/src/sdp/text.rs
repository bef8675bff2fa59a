//! Plain-text dump of a [`ConicProblem`], one record per line.
//!
//! ```text
//! free 1
//! nonneg 0
//! blocks 1 2
//! rows 2
//! obj_offset 0
//! c f 0 1
//! a 0 p 0 0 1 1
//! b 0 -0.5
//! ```
//!
//! `c <entry> <coef>` is an objective term, `a <row> <entry> <coef>` a row term and
//! `b <row> <rhs>` a right-hand side. An entry is `f k`, `n k` or `p block i j`.
//! Floats are written with round-trip precision; `#` starts a comment.

use std::fmt::Write as _;

use super::{ConicProblem, Entry, LinearRow, SdpError};

fn entry_text(e: Entry) -> String {
    match e {
        Entry::Free(k) => format!("f {k}"),
        Entry::NonNeg(k) => format!("n {k}"),
        Entry::Psd { block, row, col } => format!("p {block} {row} {col}"),
    }
}

pub fn write_problem(problem: &ConicProblem) -> String {
    let mut out = String::new();
    let blocks: Vec<String> = problem.blocks.iter().map(|b| b.to_string()).collect();
    let _ = writeln!(out, "free {}", problem.n_free);
    let _ = writeln!(out, "nonneg {}", problem.n_nonneg);
    let _ = writeln!(out, "blocks {} {}", problem.blocks.len(), blocks.join(" "));
    let _ = writeln!(out, "rows {}", problem.rows.len());
    let _ = writeln!(out, "obj_offset {:?}", problem.objective_offset);
    for &(e, c) in &problem.objective {
        let _ = writeln!(out, "c {} {c:?}", entry_text(e));
    }
    for (i, row) in problem.rows.iter().enumerate() {
        for &(e, c) in &row.terms {
            let _ = writeln!(out, "a {i} {} {c:?}", entry_text(e));
        }
        let _ = writeln!(out, "b {i} {:?}", row.rhs);
    }
    out
}

struct Tokens<'a> {
    line: usize,
    words: std::str::SplitWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    fn err(&self, message: impl Into<String>) -> SdpError {
        SdpError::Parse { line: self.line, message: message.into() }
    }

    fn word(&mut self) -> Result<&'a str, SdpError> {
        self.words.next().ok_or_else(|| self.err("unexpected end of line"))
    }

    fn usize(&mut self) -> Result<usize, SdpError> {
        let w = self.word()?;
        w.parse().map_err(|_| self.err(format!("expected a non-negative integer, found `{w}`")))
    }

    fn float(&mut self) -> Result<f64, SdpError> {
        let w = self.word()?;
        w.parse().map_err(|_| self.err(format!("expected a number, found `{w}`")))
    }

    fn entry(&mut self) -> Result<Entry, SdpError> {
        match self.word()? {
            "f" => Ok(Entry::Free(self.usize()?)),
            "n" => Ok(Entry::NonNeg(self.usize()?)),
            "p" => {
                let b = self.usize()?;
                let i = self.usize()?;
                let j = self.usize()?;
                Ok(Entry::psd(b, i, j))
            }
            other => Err(self.err(format!("unknown entry kind `{other}`"))),
        }
    }

    fn finish(&mut self) -> Result<(), SdpError> {
        match self.words.next() {
            None => Ok(()),
            Some(w) => Err(self.err(format!("trailing token `{w}`"))),
        }
    }
}

pub fn read_problem(text: &str) -> Result<ConicProblem, SdpError> {
    let mut p = ConicProblem::new();
    for (idx, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("");
        let mut t = Tokens { line: idx + 1, words: content.split_whitespace() };
        let Some(key) = t.words.next() else { continue };
        match key {
            "free" => p.n_free = t.usize()?,
            "nonneg" => p.n_nonneg = t.usize()?,
            "blocks" => {
                let k = t.usize()?;
                p.blocks = (0..k).map(|_| t.usize()).collect::<Result<_, _>>()?;
            }
            "rows" => {
                let m = t.usize()?;
                p.rows = vec![LinearRow::default(); m];
            }
            "obj_offset" => p.objective_offset = t.float()?,
            "c" => {
                let e = t.entry()?;
                let c = t.float()?;
                p.objective.push((e, c));
            }
            "a" | "b" => {
                let i = t.usize()?;
                if i >= p.rows.len() {
                    return Err(t.err(format!("row {i} exceeds declared row count {}", p.rows.len())));
                }
                if key == "a" {
                    let e = t.entry()?;
                    let c = t.float()?;
                    p.rows[i].terms.push((e, c));
                } else {
                    p.rows[i].rhs = t.float()?;
                }
            }
            other => return Err(t.err(format!("unknown record `{other}`"))),
        }
        t.finish()?;
    }
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut p = ConicProblem::new();
        let t = p.add_free();
        let s = p.add_nonneg();
        let b = p.add_block(3);
        p.add_row(vec![(Entry::psd(b, 2, 0), 0.1), (t, -1.0 / 3.0)], 1e-17);
        p.add_row(vec![(s, 2.5)], -7.0);
        p.add_objective(t, 1.0);
        p.objective_offset = 0.25;
        let text = write_problem(&p);
        assert_eq!(read_problem(&text).unwrap(), p);
    }

    #[test]
    fn reports_line_of_bad_record() {
        let text = "free 1\nrows 1\nb 0 1\na 3 f 0 1\n";
        match read_problem(text) {
            Err(SdpError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }
}
