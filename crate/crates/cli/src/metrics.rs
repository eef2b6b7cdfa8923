use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;

use modrobe::datagen::ModalityUniverse;
use modrobe::metrics::{MetricsReport, ScoreKind, ScoreMatrix, Stratum};

use crate::run::{runs_root, RunManifest, MANIFEST};
use crate::usage;

#[derive(Args)]
pub struct MetricsArgs {
    /// Score-matrix CSV with header `train_set,eval_set,score`.
    matrix: PathBuf,
    /// Comma-separated strata: overall, missing, added, transfer,
    /// overlap[-k], matched[-k], summary or all.
    #[arg(long, default_value = "summary")]
    strata: String,
    /// Print values as percentages with one decimal.
    #[arg(long)]
    percent: bool,
    /// Score type recorded in the matrix: `map` or `accuracy`.
    #[arg(long, default_value = "map", value_parser = parse_kind)]
    kind: ScoreKind,
    /// Modality names in display order; inferred (sorted) when omitted.
    #[arg(long, value_delimiter = ',')]
    universe: Option<Vec<String>>,
    /// Also write `<out>.md` and `<out>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Run directory, or a run id under the runs root.
    run: String,
    #[arg(long, default_value = "all")]
    strata: String,
    #[arg(long)]
    percent: bool,
}

fn parse_kind(s: &str) -> Result<ScoreKind, String> {
    match s {
        "map" => Ok(ScoreKind::Map),
        "accuracy" => Ok(ScoreKind::Accuracy),
        _ => Err(format!("expected `map` or `accuracy`, got `{s}`")),
    }
}

pub fn read_matrix(path: &Path, universe: Option<ModalityUniverse>, kind: ScoreKind) -> Result<ScoreMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    ScoreMatrix::from_csv(&text, universe, kind).with_context(|| format!("in {}", path.display()))
}

fn write_pair(prefix: &Path, md: &str, csv: &str) -> Result<()> {
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    for (ext, body) in [("md", md), ("csv", csv)] {
        let p = prefix.with_extension(ext);
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn metrics(a: &MetricsArgs) -> Result<()> {
    let universe = a
        .universe
        .as_ref()
        .map(ModalityUniverse::new)
        .transpose()
        .map_err(|e| usage(format!("--universe: {e}")))?;
    let m = read_matrix(&a.matrix, universe, a.kind)?;
    let strata = Stratum::parse_list(&a.strata, m.universe.len())?;
    let report = MetricsReport::build(&m, &strata);
    let md = report.to_markdown(a.percent);
    if let Some(out) = &a.out {
        write_pair(out, &md, &report.to_csv(a.percent))?;
    }
    print!("{md}");
    Ok(())
}

fn resolve_run(s: &str) -> PathBuf {
    let p = PathBuf::from(s);
    if p.join(MANIFEST).is_file() {
        p
    } else {
        runs_root().join(s)
    }
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let run_dir = resolve_run(&a.run);
    let manifest = RunManifest::read(&run_dir)?;
    let universe = ModalityUniverse::new(manifest.universe.clone())?;
    let strata = Stratum::parse_list(&a.strata, universe.len())?;
    let mut summary = format!("# Run {}\n\n", manifest.run_id);
    let status = serde_json::to_value(manifest.status)?;
    writeln!(summary, "bundle `{}`, status {}\n", manifest.bundle_hash, status.as_str().unwrap_or("?")).expect("string");
    summary.push_str("| method | P_best | R_best | P | R | Missing P | Missing R | Added P | Added R | Transfer P | Transfer R |\n");
    summary.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
    for m in &manifest.methods {
        let Some(rel) = manifest.matrices.get(m.name()) else {
            continue;
        };
        let path = run_dir.join(rel);
        if !path.is_file() {
            eprintln!("warning: {} has no matrix at {}", m.name(), path.display());
            continue;
        }
        let mat = read_matrix(&path, Some(universe.clone()), manifest.score_kind)?;
        let report = MetricsReport::build(&mat, &strata);
        write_pair(
            &run_dir.join("report").join(m.name()),
            &report.to_markdown(a.percent),
            &report.to_csv(a.percent),
        )?;
        if let Some(row) = MetricsReport::build(&mat, &Stratum::SUMMARY).summary_row(a.percent) {
            writeln!(summary, "| {} | {row} |", m.name()).expect("string");
        }
    }
    let p = run_dir.join("report").join("summary.md");
    std::fs::create_dir_all(run_dir.join("report")).context("creating report directory")?;
    std::fs::write(&p, &summary).with_context(|| format!("writing {}", p.display()))?;
    print!("{summary}");
    Ok(())
}
