//! Evaluation reports: `key=value` lines for scripts and a text summary for people.

use std::fmt::Write;

use ridgematch_core::ScoreReport;

/// One `key=value` per line: pair counts, `eer`, per-FAR `tar_at_far_<f>`,
/// `threshold_at_far_<f>`, `far_at_far_<f>`, `resolution_warning_at_far_<f>`,
/// then `cmc_1` … `cmc_<max_rank>`. `context` lines come first.
pub fn key_values(report: &ScoreReport, context: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in context {
        let _ = writeln!(out, "{k}={v}");
    }
    let _ = writeln!(out, "genuine_pairs={}", report.genuine_count);
    let _ = writeln!(out, "impostor_pairs={}", report.impostor_count);
    let _ = writeln!(out, "eer={}", report.eer);
    for t in &report.tar_at_far {
        let f = t.far_target;
        let _ = writeln!(out, "tar_at_far_{f}={}", t.tar);
        let _ = writeln!(out, "threshold_at_far_{f}={}", t.threshold);
        let _ = writeln!(out, "far_at_far_{f}={}", t.far);
        let _ = writeln!(out, "resolution_warning_at_far_{f}={}", t.resolution_warning);
    }
    for (k, v) in report.cmc.iter().enumerate() {
        let _ = writeln!(out, "cmc_{}={v}", k + 1);
    }
    out
}

pub fn text(report: &ScoreReport, context: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in context {
        let _ = writeln!(out, "{k:<18}{v}");
    }
    let _ = writeln!(out, "{:<18}{}", "genuine pairs", report.genuine_count);
    let _ = writeln!(out, "{:<18}{}", "impostor pairs", report.impostor_count);
    let _ = writeln!(out, "{:<18}{:.6}", "EER", report.eer);
    for t in &report.tar_at_far {
        let _ = write!(
            out,
            "{:<18}{:.6}  (threshold {:.6}, FAR {:.6})",
            format!("TAR @ FAR {}", t.far_target),
            t.tar,
            t.threshold,
            t.far
        );
        if t.resolution_warning {
            out.push_str("  [fewer impostor pairs than 1/FAR]");
        }
        out.push('\n');
    }
    for (k, v) in report.cmc.iter().enumerate() {
        let _ = writeln!(out, "{:<18}{v:.6}", format!("CMC rank {}", k + 1));
    }
    out
}

/// Parses `key=value` report text back into pairs, in file order.
pub fn parse_key_values(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
