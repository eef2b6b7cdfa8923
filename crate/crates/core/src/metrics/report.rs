use std::fmt::Write as _;

use serde::Serialize;

use crate::datagen::ModalitySet;
use crate::metrics::{aggregate, best_eval_sets, performance, robustness, Aggregate, ScoreMatrix, Stratum};

#[derive(Clone, Debug, Serialize)]
pub struct TrainSetRow {
    pub train_set: String,
    pub p: Option<f64>,
    pub r: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StratumReport {
    pub stratum: String,
    pub per_train: Vec<TrainSetRow>,
    pub aggregate: Option<Aggregate>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BestEval {
    pub train_set: String,
    pub eval_set: String,
    pub score: f64,
}

/// Every requested stratum's per-training-set and aggregate values, plus the
/// best-evaluation-set table.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub strata: Vec<StratumReport>,
    pub best_eval: Vec<BestEval>,
    #[serde(skip)]
    kinds: Vec<Stratum>,
}

fn fmt_value(v: Option<f64>, percent: bool) -> String {
    match v {
        None => "n/a".into(),
        Some(x) if percent => format!("{:.1}", x * 100.0),
        Some(x) => format!("{x:.4}"),
    }
}

impl MetricsReport {
    pub fn build(m: &ScoreMatrix, strata: &[Stratum]) -> Self {
        let train_sets: Vec<ModalitySet> = m.train_sets();
        let reports = strata
            .iter()
            .map(|&s| StratumReport {
                stratum: s.to_string(),
                per_train: train_sets
                    .iter()
                    .map(|&t| TrainSetRow {
                        train_set: m.universe.format(t),
                        p: performance(m, t, s),
                        r: robustness(m, t, s),
                    })
                    .collect(),
                aggregate: aggregate(m, s),
            })
            .collect();
        let best = best_eval_sets(m);
        let best_eval = train_sets
            .iter()
            .filter_map(|t| {
                best.get(t).map(|&(e, score)| BestEval {
                    train_set: m.universe.format(*t),
                    eval_set: m.universe.format(e),
                    score,
                })
            })
            .collect();
        Self {
            strata: reports,
            best_eval,
            kinds: strata.to_vec(),
        }
    }

    pub fn get(&self, s: Stratum) -> Option<&StratumReport> {
        self.kinds.iter().position(|&k| k == s).map(|i| &self.strata[i])
    }

    /// `P_best | R_best | P | R` overall, then `P | R` for missing, added and
    /// transfer. Needs those four strata in the report.
    pub fn summary_row(&self, percent: bool) -> Option<String> {
        let agg = |s| self.get(s).map(|r| r.aggregate);
        let overall = agg(Stratum::Overall)?;
        let mut cells = vec![
            overall.map(|a| a.p_best),
            overall.map(|a| a.r_best),
            overall.map(|a| a.p),
            overall.map(|a| a.r),
        ];
        for s in [Stratum::Missing, Stratum::Added, Stratum::Transfer] {
            let a = agg(s)?;
            cells.push(a.map(|a| a.p));
            cells.push(a.map(|a| a.r));
        }
        Some(cells.into_iter().map(|c| fmt_value(c, percent)).collect::<Vec<_>>().join(" | "))
    }

    pub fn to_markdown(&self, percent: bool) -> String {
        let mut out = String::new();
        let unit = if percent { "percent" } else { "fraction" };
        if let Some(row) = self.summary_row(percent) {
            out.push_str("## Summary\n\n");
            out.push_str("| P_best | R_best | P | R | Missing P | Missing R | Added P | Added R | Transfer P | Transfer R |\n");
            out.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
            writeln!(out, "| {row} |\n").expect("string");
        }
        writeln!(out, "## Aggregates ({unit})\n").expect("string");
        out.push_str("| stratum | P_best | R_best | P | R | training sets |\n|---|---|---|---|---|---|\n");
        for s in &self.strata {
            let a = s.aggregate;
            writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                s.stratum,
                fmt_value(a.map(|a| a.p_best), percent),
                fmt_value(a.map(|a| a.r_best), percent),
                fmt_value(a.map(|a| a.p), percent),
                fmt_value(a.map(|a| a.r), percent),
                a.map_or(0, |a| a.count)
            )
            .expect("string");
        }
        out.push_str("\n## Per training set\n\n| train_set |");
        for s in &self.strata {
            write!(out, " {0} P | {0} R |", s.stratum).expect("string");
        }
        out.push_str("\n|---|");
        out.push_str(&"---|---|".repeat(self.strata.len()));
        out.push('\n');
        if let Some(first) = self.strata.first() {
            for (i, row) in first.per_train.iter().enumerate() {
                write!(out, "| {} |", row.train_set).expect("string");
                for s in &self.strata {
                    let r = &s.per_train[i];
                    write!(out, " {} | {} |", fmt_value(r.p, percent), fmt_value(r.r, percent)).expect("string");
                }
                out.push('\n');
            }
        }
        out.push_str("\n## Best evaluation set\n\n| train_set | eval_set | score |\n|---|---|---|\n");
        for b in &self.best_eval {
            writeln!(out, "| {} | {} | {} |", b.train_set, b.eval_set, fmt_value(Some(b.score), percent)).expect("string");
        }
        out
    }

    /// Long-format CSV: `stratum,train_set,statistic,value`. Aggregates use
    /// train_set `*`; absent values are left empty.
    pub fn to_csv(&self, percent: bool) -> String {
        let num = |v: Option<f64>| match v {
            None => String::new(),
            Some(x) if percent => format!("{:.1}", x * 100.0),
            Some(x) => format!("{x:.6}"),
        };
        let mut out = String::from("stratum,train_set,statistic,value\n");
        for s in &self.strata {
            for r in &s.per_train {
                writeln!(out, "{},{},P,{}", s.stratum, r.train_set, num(r.p)).expect("string");
                writeln!(out, "{},{},R,{}", s.stratum, r.train_set, num(r.r)).expect("string");
            }
            let a = s.aggregate;
            for (name, v) in [
                ("P_best", a.map(|a| a.p_best)),
                ("R_best", a.map(|a| a.r_best)),
                ("P", a.map(|a| a.p)),
                ("R", a.map(|a| a.r)),
            ] {
                writeln!(out, "{},*,{name},{}", s.stratum, num(v)).expect("string");
            }
        }
        for b in &self.best_eval {
            writeln!(out, "best_eval,{},eval_set,{}", b.train_set, b.eval_set).expect("string");
            writeln!(out, "best_eval,{},score,{}", b.train_set, num(Some(b.score))).expect("string");
        }
        out
    }
}
