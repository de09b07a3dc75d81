//! Accuracy matrices and the continual-learning metrics over them.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// `rows[t][i]`: accuracy in percent on test set `i` after stage `t`; row 0 is
/// the pretrained baseline. Test sets are in training order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub tasks: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: Vec<String>, baseline: Vec<f64>) -> Result<Self> {
        let mut m = Self { tasks, rows: Vec::new() };
        m.push(baseline)?;
        Ok(m)
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        ensure!(
            row.len() == self.tasks.len(),
            "row has {} entries for {} tasks",
            row.len(),
            self.tasks.len()
        );
        ensure!(
            row.iter().all(|a| (0.0..=100.0).contains(a)),
            "accuracies must lie in [0, 100]"
        );
        self.rows.push(row);
        Ok(())
    }

    /// Number of trained stages recorded.
    pub fn stages(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    fn row(&self, t: usize) -> Result<&[f64]> {
        self.rows
            .get(t)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::contract(format!("stage {t} has no accuracy row")))
    }

    /// Value at stage `t` (0 = baseline) on 1-based task `i`.
    fn at(&self, t: usize, i: usize) -> Result<f64> {
        let row = self.row(t)?;
        ensure!(i >= 1 && i <= row.len(), "task {i} out of range");
        Ok(row[i - 1])
    }

    pub fn average(&self, t: usize) -> Result<f64> {
        let row = self.row(t)?;
        ensure!(!row.is_empty(), "no test sets");
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Mean over `i < k` of the drop from the best of stages `1..k-1` to stage `k`.
    /// `None` at `k = 1`.
    pub fn forgetting(&self, k: usize) -> Result<Option<f64>> {
        if k < 2 {
            return Ok(None);
        }
        let mut total = 0.0;
        for i in 1..k {
            let mut best = f64::NEG_INFINITY;
            for l in 1..k {
                best = best.max(self.at(l, i)?);
            }
            total += best - self.at(k, i)?;
        }
        Ok(Some(total / (k - 1) as f64))
    }

    pub fn bwt(&self, k: usize) -> Result<Option<f64>> {
        if k < 2 {
            return Ok(None);
        }
        let mut total = 0.0;
        for i in 1..k {
            total += self.at(k, i)? - self.at(i, i)?;
        }
        Ok(Some(total / (k - 1) as f64))
    }

    /// Mean over `t = 2..k` of accuracy on task `t` before training on it,
    /// minus the baseline.
    pub fn fwt(&self, k: usize) -> Result<Option<f64>> {
        if k < 2 {
            return Ok(None);
        }
        let mut total = 0.0;
        for t in 2..=k {
            total += self.at(t - 1, t)? - self.at(0, t)?;
        }
        Ok(Some(total / (k - 1) as f64))
    }

    pub fn report(&self, method: &str) -> Result<Vec<MetricRow>> {
        let mut out = vec![MetricRow {
            label: "Vanilla".into(),
            accuracies: self.rows[0].clone(),
            average: self.average(0)?,
            forgetting: None,
            bwt: None,
            fwt: None,
        }];
        for k in 1..=self.stages() {
            out.push(MetricRow {
                label: format!("{method} stage {k}"),
                accuracies: self.rows[k].clone(),
                average: self.average(k)?,
                forgetting: self.forgetting(k)?,
                bwt: self.bwt(k)?,
                fwt: self.fwt(k)?,
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub label: String,
    pub accuracies: Vec<f64>,
    pub average: f64,
    pub forgetting: Option<f64>,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
}

/// Half-up rounding to two decimals. The small nudge keeps values such as
/// 73.935 from falling to the lower neighbour through representation error.
pub fn round2(x: f64) -> f64 {
    let scaled = x * 100.0;
    let nudged = scaled + scaled.signum() * 1e-9;
    (nudged.abs() + 0.5).floor().copysign(nudged) / 100.0
}

pub fn fmt2(x: f64) -> String {
    let r = round2(x);
    if r == 0.0 {
        "0.00".into()
    } else {
        format!("{r:.2}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "--".to_string(), fmt2)
}

/// Markdown table: per-task accuracies, Average, Forget, BWT, FWT.
pub fn markdown_table(tasks: &[String], rows: &[MetricRow]) -> String {
    let mut s = String::new();
    let _ = write!(s, "| Method |");
    for t in tasks {
        let _ = write!(s, " {t} |");
    }
    s.push_str(" Average | Forget | BWT | FWT |\n|---|");
    for _ in 0..tasks.len() + 4 {
        s.push_str("---|");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "| {} |", r.label);
        for a in &r.accuracies {
            let _ = write!(s, " {} |", fmt2(*a));
        }
        let _ = writeln!(
            s,
            " {} | {} | {} | {} |",
            fmt2(r.average),
            fmt_opt(r.forgetting),
            fmt_opt(r.bwt),
            fmt_opt(r.fwt)
        );
    }
    s
}

pub fn metrics_csv(tasks: &[String], rows: &[MetricRow]) -> String {
    let mut s = String::from("method");
    for t in tasks {
        let _ = write!(s, ",{t}");
    }
    s.push_str(",average,forget,bwt,fwt\n");
    for r in rows {
        s.push_str(&r.label);
        for a in &r.accuracies {
            let _ = write!(s, ",{}", fmt2(*a));
        }
        let _ = writeln!(
            s,
            ",{},{},{},{}",
            fmt2(r.average),
            fmt_opt(r.forgetting),
            fmt_opt(r.bwt),
            fmt_opt(r.fwt)
        );
    }
    s
}

/// One method's block of a grid file.
#[derive(Clone, Debug, PartialEq)]
pub struct GridBlock {
    pub method: String,
    pub matrix: AccuracyMatrix,
}

/// Parses an accuracy grid CSV.
///
/// Header: `method,stage,<task>...`. A row with method `Vanilla` and stage 0
/// supplies the baseline shared by every method; each other method lists
/// stages 1, 2, ... in order.
pub fn parse_grid(text: &str) -> Result<Vec<GridBlock>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::parse(format!("grid header: {e}")))?.clone();
    ensure!(
        headers.len() >= 3 && &headers[0] == "method" && &headers[1] == "stage",
        "grid header must start with method,stage and name at least one task"
    );
    let tasks: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let mut seen = std::collections::HashSet::new();
    ensure!(tasks.iter().all(|t| seen.insert(t.clone())), "duplicate task column");
    let mut baseline: Option<Vec<f64>> = None;
    let mut blocks: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let line = line + 2;
        let rec = rec.map_err(|e| Error::parse(format!("grid row {line}: {e}")))?;
        ensure_parse(rec.len() == tasks.len() + 2, line, "wrong number of fields")?;
        let method = rec[0].to_string();
        let stage: usize = rec[1]
            .parse()
            .map_err(|_| Error::parse(format!("grid row {line}: bad stage {:?}", &rec[1])))?;
        let mut row = Vec::with_capacity(tasks.len());
        for cell in rec.iter().skip(2) {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::parse(format!("grid row {line}: bad number {cell:?}")))?;
            ensure_parse((0.0..=100.0).contains(&v), line, "accuracy outside [0,100]")?;
            row.push(v);
        }
        if stage == 0 {
            if method != "Vanilla" || baseline.is_some() {
                return Err(Error::parse(format!("grid row {}: stage 0 must be a single Vanilla row", line)));
            }
            baseline = Some(row);
            continue;
        }
        match blocks.iter_mut().find(|(m, _)| *m == method) {
            Some((_, rows)) => {
                if stage != rows.len() + 1 {
                    return Err(Error::parse(format!("grid row {}: stages out of order", line)));
                }
                rows.push(row);
            }
            None => {
                if stage != 1 {
                    return Err(Error::parse(format!("grid row {}: method must start at stage 1", line)));
                }
                blocks.push((method, vec![row]));
            }
        }
    }
    let baseline = baseline.ok_or_else(|| Error::parse("grid has no Vanilla row"))?;
    blocks
        .into_iter()
        .map(|(method, rows)| {
            let mut matrix = AccuracyMatrix::new(tasks.clone(), baseline.clone())?;
            for r in rows {
                matrix.push(r)?;
            }
            Ok(GridBlock { method, matrix })
        })
        .collect()
}

pub fn read_grid(path: &Path) -> Result<Vec<GridBlock>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid(&text)
}

fn ensure_parse(ok: bool, line: usize, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::parse(format!("grid row {line}: {what}")))
    }
}

/// Renders every block as one table with a shared Vanilla row on top.
pub fn grid_report(blocks: &[GridBlock]) -> Result<(String, String)> {
    let Some(first) = blocks.first() else {
        return Err(Error::contract("no methods in grid"));
    };
    let tasks = &first.matrix.tasks;
    let mut rows = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        let r = b.matrix.report(&b.method)?;
        rows.extend(r.into_iter().skip(usize::from(i > 0)));
    }
    Ok((markdown_table(tasks, &rows), metrics_csv(tasks, &rows)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round2(73.935), 73.94);
        assert_eq!(round2(-2.505), -2.51);
        assert_eq!(round2(1.0 / 3.0), 0.33);
        assert_eq!(fmt2(-0.0), "0.00");
        assert_eq!(fmt2(-1e-12), "0.00");
    }

    #[test]
    fn stage_one_is_undefined() {
        let mut m = AccuracyMatrix::new(vec!["a".into(), "b".into()], vec![10.0, 20.0]).unwrap();
        m.push(vec![30.0, 20.0]).unwrap();
        assert_eq!(m.forgetting(1).unwrap(), None);
        assert_eq!(m.bwt(1).unwrap(), None);
        assert_eq!(m.fwt(1).unwrap(), None);
        assert!(m.push(vec![101.0, 0.0]).is_err());
        assert!(m.push(vec![1.0]).is_err());
    }

    #[test]
    fn grid_rejects_malformed_input() {
        assert!(parse_grid("method,stage,a\nX,1,10\n").is_err());
        assert!(parse_grid("method,stage,a\nVanilla,0,10\nX,2,10\n").is_err());
        assert!(parse_grid("method,stage,a\nVanilla,0,10\nX,1,abc\n").is_err());
        assert!(parse_grid("method,a\n").is_err());
        let b = parse_grid("method,stage,a\nVanilla,0,10\nX,1,20\nX,2,30\n").unwrap();
        assert_eq!(b[0].matrix.rows, vec![vec![10.0], vec![20.0], vec![30.0]]);
    }
}
