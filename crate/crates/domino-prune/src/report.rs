//! Trace files and summary statistics.
//!
//! A campaign trace is a CSV with `#`-prefixed metadata lines followed by
//! one row per iteration. The headline statistic of a trace is the largest
//! fraction of convolution weights removed while test accuracy stayed
//! within the stop bound of its initial value. Summaries aggregate
//! headlines per (variant, metric) condition across seeds; improvements
//! compare domino conditions against the channel baseline per metric
//! (average view) and best-against-best per network.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::pruner::{PruneRecord, PruneTrace, TraceMeta};

pub const TRACE_HEADER: &str = "# dpt-trace v1";
pub const TRACE_COLUMNS: &str = "iteration,seed_layer,seed_channel,set_size,weights_removed_cum,accuracy";

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("malformed trace at line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("trace has no records")]
    EmptyTrace,
    #[error("missing channel baseline for metric `{0}`")]
    MissingBaseline(String),
    #[error("traces are incomparable: {0}")]
    Incomparable(String),
}

/// Serialize a trace (metadata then records). Deterministic: equal traces
/// produce byte-equal text.
pub fn write_trace(trace: &PruneTrace) -> String {
    let m = &trace.meta;
    let mut out = String::new();
    out.push_str(TRACE_HEADER);
    out.push('\n');
    out.push_str(&format!("# model {}\n", m.model));
    out.push_str(&format!("# rng {}\n", m.rng));
    out.push_str(&format!("# run_seed {}\n", m.run_seed));
    out.push_str(&format!("# variant {}\n", m.variant));
    out.push_str(&format!("# metric {}\n", m.metric));
    out.push_str(&format!("# stop_drop {:.2}\n", m.stop_drop));
    out.push_str(&format!("# initial_accuracy {:.9}\n", m.initial_accuracy));
    out.push_str(&format!("# blob_checksum {}\n", m.blob_checksum));
    out.push_str(&format!("# excluded {}\n", m.excluded.join(",")));
    out.push_str(TRACE_COLUMNS);
    out.push('\n');
    for r in &trace.records {
        out.push_str(&format!(
            "{},{},{},{},{:.9},{:.9}\n",
            r.iteration, r.seed_layer, r.seed_channel, r.set_size, r.weights_removed_cum, r.accuracy
        ));
    }
    out
}

/// Parse a trace file. Malformed input yields [`ReportError::Malformed`]
/// with the offending line; never panics.
pub fn parse_trace(text: &str) -> Result<PruneTrace, ReportError> {
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, detail: &str| ReportError::Malformed {
        line: line + 1,
        detail: detail.to_string(),
    };
    match lines.next() {
        Some((_, l)) if l.trim_end() == TRACE_HEADER => {}
        Some((n, _)) => return Err(bad(n, "expected trace header")),
        None => return Err(bad(0, "empty file")),
    }

    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut saw_columns = false;
    let mut records = Vec::new();
    for (n, raw) in lines {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix("# ") {
            if saw_columns {
                return Err(bad(n, "metadata after column header"));
            }
            let (key, value) = meta.split_once(' ').unwrap_or((meta, ""));
            if fields.insert(key.to_string(), value.to_string()).is_some() {
                return Err(bad(n, "duplicate metadata key"));
            }
            continue;
        }
        if !saw_columns {
            if line != TRACE_COLUMNS {
                return Err(bad(n, "expected column header"));
            }
            saw_columns = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(bad(n, "expected 6 columns"));
        }
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| bad(n, "bad integer"));
        let parse_f64 = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(n, "bad float"))
        };
        records.push(PruneRecord {
            iteration: parse_usize(cols[0])?,
            seed_layer: cols[1].to_string(),
            seed_channel: parse_usize(cols[2])?,
            set_size: parse_usize(cols[3])?,
            weights_removed_cum: parse_f64(cols[4])?,
            accuracy: parse_f64(cols[5])?,
        });
    }
    if !saw_columns {
        return Err(bad(text.lines().count(), "missing column header"));
    }

    let get = |key: &str| -> Result<String, ReportError> {
        fields.get(key).cloned().ok_or(ReportError::Malformed {
            line: 0,
            detail: format!("missing metadata `{key}`"),
        })
    };
    let parse_f64_meta = |key: &str| -> Result<f64, ReportError> {
        get(key)?
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or(ReportError::Malformed {
                line: 0,
                detail: format!("bad metadata `{key}`"),
            })
    };
    let meta = TraceMeta {
        model: get("model")?,
        rng: get("rng")?,
        run_seed: get("run_seed")?.parse().map_err(|_| ReportError::Malformed {
            line: 0,
            detail: "bad metadata `run_seed`".into(),
        })?,
        variant: get("variant")?,
        metric: get("metric")?,
        stop_drop: parse_f64_meta("stop_drop")?,
        initial_accuracy: parse_f64_meta("initial_accuracy")?,
        blob_checksum: get("blob_checksum")?,
        excluded: get("excluded")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect(),
    };
    Ok(PruneTrace { meta, records })
}

/// Largest `weights_removed_cum` among records whose accuracy stays within
/// `stop_drop` percentage points of `initial_acc` (0.0 if none qualify).
pub fn headline(
    records: &[PruneRecord],
    initial_acc: f64,
    stop_drop: f64,
) -> Result<f64, ReportError> {
    if records.is_empty() {
        return Err(ReportError::EmptyTrace);
    }
    let floor = initial_acc - stop_drop / 100.0;
    Ok(records
        .iter()
        .filter(|r| r.accuracy >= floor)
        .map(|r| r.weights_removed_cum)
        .fold(0.0, f64::max))
}

/// Aggregated headlines for one (model, variant, metric) condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSummary {
    pub model: String,
    pub variant: String,
    pub metric: String,
    /// (run seed, headline fraction) per trace.
    pub headlines: Vec<(u64, f64)>,
    pub mean: f64,
    pub max: f64,
}

/// Group traces into per-condition summaries. All traces must share one
/// stop_drop value; a mixed directory is not comparable.
pub fn summarize(traces: &[PruneTrace]) -> Result<Vec<ConditionSummary>, ReportError> {
    if traces.is_empty() {
        return Err(ReportError::EmptyTrace);
    }
    let stop = traces[0].meta.stop_drop;
    if let Some(t) = traces.iter().find(|t| t.meta.stop_drop != stop) {
        return Err(ReportError::Incomparable(format!(
            "stop_drop {} and {} mixed in one report",
            stop, t.meta.stop_drop
        )));
    }
    let mut grouped: BTreeMap<(String, String, String), Vec<(u64, f64)>> = BTreeMap::new();
    for t in traces {
        let h = headline(&t.records, t.meta.initial_accuracy, t.meta.stop_drop)?;
        grouped
            .entry((
                t.meta.model.clone(),
                t.meta.variant.clone(),
                t.meta.metric.clone(),
            ))
            .or_default()
            .push((t.meta.run_seed, h));
    }
    Ok(grouped
        .into_iter()
        .map(|((model, variant, metric), mut headlines)| {
            headlines.sort_by_key(|&(seed, _)| seed);
            let mean = headlines.iter().map(|&(_, h)| h).sum::<f64>() / headlines.len() as f64;
            let max = headlines.iter().map(|&(_, h)| h).fold(0.0, f64::max);
            ConditionSummary {
                model,
                variant,
                metric,
                headlines,
                mean,
                max,
            }
        })
        .collect())
}

/// Improvement of domino variants over the channel baseline for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Improvement {
    pub model: String,
    /// variant -> mean over metrics of (domino mean headline - channel mean
    /// headline), as a fraction.
    pub avg_improvement: BTreeMap<String, f64>,
    /// Best domino condition mean minus best channel condition mean.
    pub best_vs_best: f64,
}

/// Per-model improvement statistics. Every metric that appears in a domino
/// condition needs a channel baseline under the same metric.
pub fn improvements(summaries: &[ConditionSummary]) -> Result<Vec<Improvement>, ReportError> {
    let mut models: BTreeMap<&str, Vec<&ConditionSummary>> = BTreeMap::new();
    for s in summaries {
        models.entry(&s.model).or_default().push(s);
    }
    let mut out = Vec::new();
    for (model, conds) in models {
        let channel: BTreeMap<&str, f64> = conds
            .iter()
            .filter(|c| c.variant == "channel")
            .map(|c| (c.metric.as_str(), c.mean))
            .collect();
        if channel.is_empty() {
            return Err(ReportError::MissingBaseline("<all>".into()));
        }
        let mut avg_improvement: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for c in conds.iter().filter(|c| c.variant != "channel") {
            let base = channel
                .get(c.metric.as_str())
                .ok_or_else(|| ReportError::MissingBaseline(c.metric.clone()))?;
            avg_improvement
                .entry(c.variant.clone())
                .or_default()
                .push(c.mean - base);
        }
        let avg_improvement: BTreeMap<String, f64> = avg_improvement
            .into_iter()
            .map(|(v, ds)| {
                let mean = ds.iter().sum::<f64>() / ds.len() as f64;
                (v, mean)
            })
            .collect();
        let best_channel = channel.values().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let best_domino = conds
            .iter()
            .filter(|c| c.variant != "channel")
            .map(|c| c.mean)
            .fold(f64::NEG_INFINITY, f64::max);
        let best_vs_best = if best_domino.is_finite() {
            best_domino - best_channel
        } else {
            0.0
        };
        out.push(Improvement {
            model: model.to_string(),
            avg_improvement,
            best_vs_best,
        });
    }
    Ok(out)
}

/// Summary CSV: one row per condition, percentages with 2 decimals.
pub fn write_summary_csv(summaries: &[ConditionSummary]) -> String {
    let mut out = String::from("model,variant,metric,seeds,mean_removed_pct,max_removed_pct\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{:.2},{:.2}\n",
            s.model,
            s.variant,
            s.metric,
            s.headlines.len(),
            s.mean * 100.0,
            s.max * 100.0
        ));
    }
    out
}

/// Improvement CSV mirroring the two summary views.
pub fn write_improvement_csv(improvements: &[Improvement]) -> String {
    let mut out = String::from("model,statistic,variant,value_pct\n");
    for imp in improvements {
        for (variant, value) in &imp.avg_improvement {
            out.push_str(&format!(
                "{},avg_improvement,{},{:.2}\n",
                imp.model,
                variant,
                value * 100.0
            ));
        }
        out.push_str(&format!(
            "{},best_vs_best,,{:.2}\n",
            imp.model,
            imp.best_vs_best * 100.0
        ));
    }
    out
}


#[cfg(test)]
mod improvement_symmetry {
    use super::*;
    use super::tests_support::trace_with;

    /// Swapping the baseline and domino roles negates the improvement.
    #[test]
    fn improvements_are_antisymmetric() {
        let forward = vec![
            trace_with("channel", "l1", 1, 0.20),
            trace_with("domino-io", "l1", 1, 0.32),
        ];
        // same headlines with the role labels exchanged
        let swapped = vec![
            trace_with("channel", "l1", 1, 0.32),
            trace_with("domino-io", "l1", 1, 0.20),
        ];
        let a = improvements(&summarize(&forward).unwrap()).unwrap();
        let b = improvements(&summarize(&swapped).unwrap()).unwrap();
        let ia = a[0].avg_improvement["domino-io"];
        let ib = b[0].avg_improvement["domino-io"];
        assert!((ia + ib).abs() < 1e-12);
        assert!((a[0].best_vs_best + b[0].best_vs_best).abs() < 1e-12);
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use crate::pruner::{PruneRecord, PruneTrace, TraceMeta};

    pub fn trace_with(variant: &str, metric: &str, seed: u64, removed: f64) -> PruneTrace {
        PruneTrace {
            meta: TraceMeta {
                model: "toy".into(),
                rng: "xoshiro256++".into(),
                run_seed: seed,
                variant: variant.into(),
                metric: metric.into(),
                stop_drop: 5.0,
                initial_accuracy: 0.9,
                blob_checksum: "fnv1a64:0".into(),
                excluded: vec![],
            },
            records: vec![PruneRecord {
                iteration: 1,
                seed_layer: "conv".into(),
                seed_channel: 0,
                set_size: 1,
                weights_removed_cum: removed,
                accuracy: 0.89,
            }],
        }
    }
}
