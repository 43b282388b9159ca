//! CSV renderings of graphs, loss logs, reports and detections.

use std::fmt::Write as _;

use protodet_core::episode::{Phase, QueryImage};
use protodet_core::eval::{EvalReport, ImageResult};
use protodet_core::graph::{CategorySet, MetaGraph};
use protodet_core::pipeline::{CellResult, GraphKind, LossRecord};
use protodet_core::tensor::Tensor;

/// Square matrix with category names on both axes; values carry 17
/// significant digits so they parse back bit-exactly.
pub fn matrix_csv(names: &[String], m: &Tensor) -> String {
    let mut out = String::from("category");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (i, n) in names.iter().enumerate() {
        out.push_str(n);
        for v in m.row(i) {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn adjacency_csv(g: &MetaGraph) -> String {
    matrix_csv(g.categories(), g.adjacency())
}

pub fn propagation_csv(g: &MetaGraph) -> String {
    matrix_csv(g.categories(), g.propagation())
}

/// Parses a [`matrix_csv`] document back into names and values.
pub fn parse_matrix_csv(text: &str) -> Result<(Vec<String>, Tensor), String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty matrix file")?;
    let names: Vec<String> = header.split(',').skip(1).map(str::to_owned).collect();
    let mut rows = Vec::with_capacity(names.len());
    for (i, line) in lines.enumerate() {
        let mut parts = line.split(',');
        let name = parts.next().unwrap_or("");
        if names.get(i).map(String::as_str) != Some(name) {
            return Err(format!(
                "row {}: expected category {:?}, found {name:?}",
                i + 1,
                names.get(i)
            ));
        }
        let row = parts
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("row {}: bad value `{v}`", i + 1))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != names.len() {
            return Err(format!(
                "row {}: {} values for {} categories",
                i + 1,
                row.len(),
                names.len()
            ));
        }
        rows.push(row);
    }
    if rows.len() != names.len() {
        return Err(format!("{} rows for {} categories", rows.len(), names.len()));
    }
    let m = Tensor::from_rows(&rows).map_err(|e| e.to_string())?;
    Ok((names, m))
}

pub fn loss_log_header() -> &'static str {
    "step,l_cls,l_box,l_meta,total\n"
}

pub fn loss_log_line(r: &LossRecord) -> String {
    let v = &r.values;
    format!("{},{},{},{},{}\n", r.step, v.l_cls, v.l_box, v.l_meta, v.total)
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = String::from(loss_log_header());
    for r in log {
        out.push_str(&loss_log_line(r));
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

/// `novel=… base=… all=…` at four decimals; absent means are `NA`.
pub fn summary_line(r: &EvalReport) -> String {
    format!(
        "novel={} base={} all={}",
        fmt_opt(r.novel),
        fmt_opt(r.base),
        fmt_opt(r.all)
    )
}

/// One row per category followed by the summary line as a comment.
pub fn eval_report_csv(r: &EvalReport) -> String {
    let mut out = String::from("category,ap,group\n");
    for c in &r.categories {
        let group = if c.novel { "novel" } else { "base" };
        let ap = c.ap.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(out, "{},{ap},{group}", c.name);
    }
    let _ = writeln!(out, "# {}", summary_line(r));
    out
}

/// `image_id,category,confidence,xmin,ymin,xmax,ymax` for every kept detection.
pub fn detections_csv(images: &[QueryImage], results: &[ImageResult], cats: &CategorySet) -> String {
    let mut out = String::from("image_id,category,confidence,xmin,ymin,xmax,ymax\n");
    for (q, r) in images.iter().zip(results) {
        for d in &r.detections {
            let b = &d.bbox;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                q.image.id,
                cats.name(d.category),
                d.confidence,
                b.xmin,
                b.ymin,
                b.xmax,
                b.ymax
            );
        }
    }
    out
}

fn graph_name(g: GraphKind) -> &'static str {
    match g {
        GraphKind::Semantic => "semantic",
        GraphKind::Random => "random",
    }
}

pub fn ablation_csv(cells: &[CellResult]) -> String {
    let mut out = String::from("seed,skip,graph,novel,base,all\n");
    for c in cells {
        let skip = if c.skip { "on" } else { "off" };
        let _ = writeln!(
            out,
            "{},{skip},{},{:.4},{:.4},{:.4}",
            c.seed,
            graph_name(c.graph),
            c.novel,
            c.base,
            c.all
        );
    }
    out
}

/// Mean novel/base mAP per cell plus matched-seed win counts.
pub fn ablation_summary(cells: &[CellResult]) -> String {
    let find = |seed: u64, skip: bool, graph: GraphKind| {
        cells
            .iter()
            .find(|c| c.seed == seed && c.skip == skip && c.graph == graph)
    };
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut out = String::from("cell,novel,base\n");
    for skip in [true, false] {
        for graph in [GraphKind::Semantic, GraphKind::Random] {
            let sel: Vec<&CellResult> = seeds.iter().filter_map(|&s| find(s, skip, graph)).collect();
            if sel.is_empty() {
                continue;
            }
            let n = sel.len() as f64;
            let novel = sel.iter().map(|c| c.novel).sum::<f64>() / n;
            let base = sel.iter().map(|c| c.base).sum::<f64>() / n;
            let skip = if skip { "on" } else { "off" };
            let _ = writeln!(out, "skip={skip} graph={},{novel:.4},{base:.4}", graph_name(graph));
        }
    }
    let wins = |a: (bool, GraphKind), b: (bool, GraphKind), strict: bool| {
        let mut won = 0;
        let mut total = 0;
        for &s in &seeds {
            if let (Some(x), Some(y)) = (find(s, a.0, a.1), find(s, b.0, b.1)) {
                total += 1;
                if (strict && x.novel > y.novel) || (!strict && x.novel >= y.novel) {
                    won += 1;
                }
            }
        }
        (won, total)
    };
    let (g, gt) = wins((true, GraphKind::Semantic), (true, GraphKind::Random), true);
    let (k, kt) = wins((true, GraphKind::Semantic), (false, GraphKind::Semantic), false);
    let _ = writeln!(
        out,
        "# semantic>random novel wins {g}/{gt}; skip-on>=skip-off novel wins {k}/{kt}"
    );
    out
}

pub fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::BaseTraining => "base",
        Phase::FineTuning => "fine",
    }
}
