//! AUPRC evaluation: tie-grouped average precision per event type, macro
//! averages over evaluable types, occurrence ratios, and the gain report
//! comparing two models.
//!
//! CSV formats (floats printed with 6 decimals, "n/a" for undefined values):
//!   metrics.csv:            event,occurrence_ratio,auprc
//!                           final row: __macro__,,<macro auprc>
//!   gains.csv:              event,occurrence_ratio,base_auprc,challenger_auprc,gain_pct
//!                           final row: __macro__,,<base>,<challenger>,<gain>
//!   gain_vs_occurrence.csv: occurrence_ratio,gain_pct

use crate::data::{EventVocabulary, WindowedSequence};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no event type has a positive test label; AUPRC undefined")]
    NoEvaluableTypes,
    #[error("type-set mismatch between reports: {0}")]
    TypeSetMismatch(String),
    #[error("malformed metrics csv at line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

/// Tie-grouped average precision. Scores are sorted descending, equal scores
/// form one group, and AP = Σ_k (R_k − R_{k−1})·P_k over groups — no
/// interpolation. Returns None when there is no positive label.
pub fn average_precision(pairs: &[(f64, bool)]) -> Option<f64> {
    let total_pos = pairs.iter().filter(|(_, y)| *y).count();
    if total_pos == 0 {
        return None;
    }
    let mut sorted: Vec<(f64, bool)> = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores must not be NaN"));

    let mut ap = 0.0;
    let mut cum_tp = 0usize;
    let mut cum_n = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        let mut group_tp = 0usize;
        let mut group_n = 0usize;
        while i < sorted.len() && sorted[i].0 == score {
            group_n += 1;
            group_tp += sorted[i].1 as usize;
            i += 1;
        }
        cum_tp += group_tp;
        cum_n += group_n;
        let precision = cum_tp as f64 / cum_n as f64;
        let recall = cum_tp as f64 / total_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Pooled (score, label) pairs per target type over a whole test split:
/// every prediction step of every sequence contributes one pair per type.
pub fn score_dataset<F>(predict: F, test: &[WindowedSequence], vocab: &EventVocabulary) -> Vec<Vec<(f64, bool)>>
where
    F: Fn(&WindowedSequence) -> Vec<Vec<f64>>,
{
    let n_targets = vocab.n_targets();
    let mut pairs: Vec<Vec<(f64, bool)>> = vec![Vec::new(); n_targets];
    for seq in test {
        if seq.windows.len() < 2 {
            continue;
        }
        let preds = predict(seq);
        let targets = crate::data::targets_of(seq, vocab);
        assert_eq!(preds.len(), targets.len());
        for (pred, target) in preds.iter().zip(&targets) {
            for j in 0..n_targets {
                pairs[j].push((pred[j], target[j] == 1));
            }
        }
    }
    pairs
}

/// Fraction of all test windows in which each target event occurs.
pub fn occurrence_ratio(test: &[WindowedSequence], vocab: &EventVocabulary) -> Vec<f64> {
    let mut counts = vec![0usize; vocab.n_targets()];
    let mut total = 0usize;
    for seq in test {
        for w in &seq.windows {
            total += 1;
            for (slot, &j) in counts.iter_mut().zip(&vocab.target_indices) {
                *slot += w[j] as usize;
            }
        }
    }
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeMetrics {
    pub name: String,
    pub occurrence_ratio: f64,
    /// None when the type had no positive test label (excluded from macro).
    pub auprc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_type: Vec<TypeMetrics>,
    pub macro_auprc: f64,
    pub evaluated_types: usize,
    pub excluded_types: Vec<String>,
}

/// Unweighted mean over types with at least one positive label.
pub fn macro_auprc(per_type: &[TypeMetrics]) -> Result<f64, EvalError> {
    let vals: Vec<f64> = per_type.iter().filter_map(|t| t.auprc).collect();
    if vals.is_empty() {
        return Err(EvalError::NoEvaluableTypes);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Evaluate pooled scores into the full report.
pub fn build_report(
    pairs: &[Vec<(f64, bool)>],
    test: &[WindowedSequence],
    vocab: &EventVocabulary,
) -> Result<MetricsReport, EvalError> {
    let occ = occurrence_ratio(test, vocab);
    let names = vocab.target_names();
    let per_type: Vec<TypeMetrics> = names
        .iter()
        .enumerate()
        .map(|(j, name)| TypeMetrics {
            name: name.to_string(),
            occurrence_ratio: occ[j],
            auprc: average_precision(&pairs[j]),
        })
        .collect();
    let macro_v = macro_auprc(&per_type)?;
    let excluded: Vec<String> = per_type
        .iter()
        .filter(|t| t.auprc.is_none())
        .map(|t| t.name.clone())
        .collect();
    let evaluated = per_type.len() - excluded.len();
    Ok(MetricsReport {
        per_type,
        macro_auprc: macro_v,
        evaluated_types: evaluated,
        excluded_types: excluded,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "n/a".to_string(),
    }
}

pub fn metrics_to_csv(report: &MetricsReport) -> String {
    let mut out = String::from("event,occurrence_ratio,auprc\n");
    for t in &report.per_type {
        let _ = writeln!(
            out,
            "{},{:.6},{}",
            t.name,
            t.occurrence_ratio,
            fmt_opt(t.auprc)
        );
    }
    let _ = writeln!(out, "__macro__,,{:.6}", report.macro_auprc);
    out
}

/// Parse a metrics.csv back into a report (used by the report command).
pub fn parse_metrics_csv(text: &str) -> Result<MetricsReport, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "event,occurrence_ratio,auprc" => {}
        Some((_, other)) => {
            return Err(EvalError::Csv {
                line: 1,
                msg: format!("unexpected header {other:?}"),
            })
        }
        None => {
            return Err(EvalError::Csv {
                line: 1,
                msg: "empty file".into(),
            })
        }
    }
    let mut per_type = Vec::new();
    let mut macro_v: Option<f64> = None;
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 3 {
            return Err(EvalError::Csv {
                line: line_no,
                msg: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let bad = |msg: String| EvalError::Csv { line: line_no, msg };
        if fields[0] == "__macro__" {
            if macro_v.is_some() {
                return Err(bad("duplicate macro row".into()));
            }
            let v: f64 = fields[2]
                .parse()
                .map_err(|_| bad(format!("bad macro value {:?}", fields[2])))?;
            if !v.is_finite() {
                return Err(bad("non-finite macro value".into()));
            }
            macro_v = Some(v);
            continue;
        }
        if macro_v.is_some() {
            return Err(bad("rows after the macro row".into()));
        }
        let occ: f64 = fields[1]
            .parse()
            .map_err(|_| bad(format!("bad occurrence_ratio {:?}", fields[1])))?;
        if !occ.is_finite() {
            return Err(bad("non-finite occurrence_ratio".into()));
        }
        let auprc = if fields[2] == "n/a" {
            None
        } else {
            let v: f64 = fields[2]
                .parse()
                .map_err(|_| bad(format!("bad auprc {:?}", fields[2])))?;
            if !v.is_finite() {
                return Err(bad("non-finite auprc".into()));
            }
            Some(v)
        };
        per_type.push(TypeMetrics {
            name: fields[0].to_string(),
            occurrence_ratio: occ,
            auprc,
        });
    }
    let macro_auprc = macro_v.ok_or(EvalError::Csv {
        line: text.lines().count(),
        msg: "missing macro row".into(),
    })?;
    let excluded: Vec<String> = per_type
        .iter()
        .filter(|t| t.auprc.is_none())
        .map(|t| t.name.clone())
        .collect();
    let evaluated = per_type.len() - excluded.len();
    Ok(MetricsReport {
        per_type,
        macro_auprc,
        evaluated_types: evaluated,
        excluded_types: excluded,
    })
}

#[derive(Debug, Clone)]
pub struct GainRow {
    pub name: String,
    pub occurrence_ratio: f64,
    pub base_auprc: Option<f64>,
    pub challenger_auprc: Option<f64>,
    /// 100·(challenger − base)/base; None when base is 0 or either side is
    /// undefined.
    pub gain_pct: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GainReport {
    pub rows: Vec<GainRow>,
    pub macro_base: f64,
    pub macro_challenger: f64,
    pub macro_gain_pct: Option<f64>,
}

/// Per-type comparison of two reports over the same vocabulary.
pub fn gain_report(base: &MetricsReport, challenger: &MetricsReport) -> Result<GainReport, EvalError> {
    if base.per_type.len() != challenger.per_type.len() {
        return Err(EvalError::TypeSetMismatch(format!(
            "{} vs {} types",
            base.per_type.len(),
            challenger.per_type.len()
        )));
    }
    for (b, c) in base.per_type.iter().zip(&challenger.per_type) {
        if b.name != c.name {
            return Err(EvalError::TypeSetMismatch(format!(
                "{:?} vs {:?}",
                b.name, c.name
            )));
        }
        if b.auprc.is_some() != c.auprc.is_some() {
            return Err(EvalError::TypeSetMismatch(format!(
                "{:?} evaluated in one report only",
                b.name
            )));
        }
    }
    let gain = |b: Option<f64>, c: Option<f64>| -> Option<f64> {
        match (b, c) {
            (Some(bv), Some(cv)) if bv != 0.0 => Some(100.0 * (cv - bv) / bv),
            _ => None,
        }
    };
    let rows = base
        .per_type
        .iter()
        .zip(&challenger.per_type)
        .map(|(b, c)| GainRow {
            name: b.name.clone(),
            occurrence_ratio: b.occurrence_ratio,
            base_auprc: b.auprc,
            challenger_auprc: c.auprc,
            gain_pct: gain(b.auprc, c.auprc),
        })
        .collect();
    Ok(GainReport {
        rows,
        macro_base: base.macro_auprc,
        macro_challenger: challenger.macro_auprc,
        macro_gain_pct: gain(Some(base.macro_auprc), Some(challenger.macro_auprc)),
    })
}

pub fn gains_to_csv(report: &GainReport) -> String {
    let mut out = String::from("event,occurrence_ratio,base_auprc,challenger_auprc,gain_pct\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{:.6},{},{},{}",
            r.name,
            r.occurrence_ratio,
            fmt_opt(r.base_auprc),
            fmt_opt(r.challenger_auprc),
            fmt_opt(r.gain_pct)
        );
    }
    let _ = writeln!(
        out,
        "__macro__,,{:.6},{:.6},{}",
        report.macro_base,
        report.macro_challenger,
        fmt_opt(report.macro_gain_pct)
    );
    out
}

/// (occurrence_ratio, gain) pairs for plotting, one row per type with a
/// defined gain.
pub fn gain_vs_occurrence_csv(report: &GainReport) -> String {
    let mut out = String::from("occurrence_ratio,gain_pct\n");
    for r in &report.rows {
        if let Some(g) = r.gain_pct {
            let _ = writeln!(out, "{:.6},{:.6}", r.occurrence_ratio, g);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn ap_perfect_ranking() {
        let pairs = vec![(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        assert_eq!(average_precision(&pairs), Some(1.0));
    }

    #[test]
    fn ap_hand_enumerated_interleaved() {
        let pairs = vec![(0.9, true), (0.8, false), (0.7, true), (0.6, false)];
        let got = average_precision(&pairs).unwrap();
        let want = (1.0 + 2.0 / 3.0) / 2.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn ap_all_tied_equals_prevalence() {
        let pairs = vec![(0.4, true), (0.4, false), (0.4, false), (0.4, true), (0.4, false)];
        let got = average_precision(&pairs).unwrap();
        assert!((got - 2.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn ap_zero_positives_undefined() {
        assert_eq!(average_precision(&[(0.3, false), (0.9, false)]), None);
    }

    #[test]
    fn ap_invariant_under_monotone_transform_and_tie_permutation() {
        let mut rng = Rng::new(61);
        for _ in 0..20 {
            let n = 2 + rng.below(30);
            let mut pairs: Vec<(f64, bool)> = (0..n)
                .map(|_| {
                    // coarse grid of scores to force ties
                    let s = (rng.below(6) as f64) / 5.0;
                    (s, rng.bernoulli(0.4))
                })
                .collect();
            if !pairs.iter().any(|(_, y)| *y) {
                pairs[0].1 = true;
            }
            let base = average_precision(&pairs).unwrap();

            // strictly monotone transform of scores
            let transformed: Vec<(f64, bool)> =
                pairs.iter().map(|&(s, y)| (s.mul_add(3.0, 1.0).exp(), y)).collect();
            let t = average_precision(&transformed).unwrap();
            assert!((base - t).abs() < 1e-12);

            // permute items (ties shuffle within groups)
            let mut shuffled = pairs.clone();
            rng.shuffle(&mut shuffled);
            let s = average_precision(&shuffled).unwrap();
            assert!((base - s).abs() < 1e-12);

            assert!(base > 0.0 && base <= 1.0);
        }
    }

    #[test]
    fn ap_is_one_iff_positives_outrank_negatives() {
        let mut rng = Rng::new(62);
        for _ in 0..50 {
            let n = 3 + rng.below(20);
            let mut pairs: Vec<(f64, bool)> = (0..n)
                .map(|_| (rng.next_f64(), rng.bernoulli(0.5)))
                .collect();
            if !pairs.iter().any(|(_, y)| *y) {
                pairs[0].1 = true;
            }
            let ap = average_precision(&pairs).unwrap();
            let min_pos = pairs
                .iter()
                .filter(|(_, y)| *y)
                .map(|(s, _)| *s)
                .fold(f64::MAX, f64::min);
            let max_neg = pairs
                .iter()
                .filter(|(_, y)| !*y)
                .map(|(s, _)| *s)
                .fold(f64::MIN, f64::max);
            let separated = pairs.iter().all(|(_, y)| *y) || min_pos > max_neg;
            assert_eq!((ap - 1.0).abs() < 1e-12, separated, "ap={ap}");
        }
    }

    fn tm(name: &str, auprc: Option<f64>) -> TypeMetrics {
        TypeMetrics {
            name: name.into(),
            occurrence_ratio: 0.1,
            auprc,
        }
    }

    #[test]
    fn macro_mean_and_exclusion() {
        assert_eq!(macro_auprc(&[tm("a", Some(0.7))]).unwrap(), 0.7);
        let v = macro_auprc(&[tm("a", Some(1.0)), tm("b", Some(0.5))]).unwrap();
        assert!((v - 0.75).abs() < 1e-15);
        let v = macro_auprc(&[tm("a", Some(1.0)), tm("b", None), tm("c", Some(0.5))]).unwrap();
        assert!((v - 0.75).abs() < 1e-15);
        assert!(macro_auprc(&[tm("a", None)]).is_err());

        // permutation invariance over types
        let fwd = macro_auprc(&[tm("a", Some(0.2)), tm("b", Some(0.9)), tm("c", Some(0.4))]).unwrap();
        let rev = macro_auprc(&[tm("c", Some(0.4)), tm("b", Some(0.9)), tm("a", Some(0.2))]).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn occurrence_ratio_counts_windows() {
        let vocab = EventVocabulary::synthetic(2);
        let seqs = vec![
            WindowedSequence {
                id: "a".into(),
                windows: vec![vec![1, 1], vec![0, 1], vec![0, 1], vec![0, 1]],
            },
            WindowedSequence {
                id: "b".into(),
                windows: (0..8).map(|i| vec![u8::from(i < 2), 1]).collect(),
            },
        ];
        let occ = occurrence_ratio(&seqs, &vocab);
        assert!((occ[0] - 3.0 / 12.0).abs() < 1e-15);
        assert_eq!(occ[1], 1.0);

        let never = vec![WindowedSequence {
            id: "c".into(),
            windows: vec![vec![0, 1], vec![0, 1]],
        }];
        assert_eq!(occurrence_ratio(&never, &vocab)[0], 0.0);
    }

    fn report_from(auprcs: &[(&str, Option<f64>)], macro_v: f64) -> MetricsReport {
        let per_type: Vec<TypeMetrics> = auprcs.iter().map(|(n, a)| tm(n, *a)).collect();
        let excluded = per_type
            .iter()
            .filter(|t| t.auprc.is_none())
            .map(|t| t.name.clone())
            .collect::<Vec<_>>();
        let evaluated = per_type.len() - excluded.len();
        MetricsReport {
            per_type,
            macro_auprc: macro_v,
            evaluated_types: evaluated,
            excluded_types: excluded,
        }
    }

    #[test]
    fn gain_identical_reports_all_zero() {
        let r = report_from(&[("a", Some(0.5)), ("b", Some(0.25))], 0.375);
        let g = gain_report(&r, &r).unwrap();
        assert!(g.rows.iter().all(|row| row.gain_pct == Some(0.0)));
        assert_eq!(g.macro_gain_pct, Some(0.0));
    }

    #[test]
    fn gain_macro_matches_published_headline() {
        // Table of macro AUPRC values for the two models being compared:
        // 30.4383 vs 31.6883 is a 4.1% relative improvement.
        let base = report_from(&[("a", Some(30.4383))], 30.4383);
        let challenger = report_from(&[("a", Some(31.6883))], 31.6883);
        let g = gain_report(&base, &challenger).unwrap();
        let gain = g.macro_gain_pct.unwrap();
        let want = 100.0 * (31.6883 - 30.4383) / 30.4383;
        assert!((gain - want).abs() < 1e-12);
        assert!((gain - 4.11).abs() < 0.01, "gain {gain}");
    }

    #[test]
    fn gain_zero_base_is_na_not_error() {
        let base = report_from(&[("a", Some(0.0)), ("b", Some(0.5))], 0.25);
        let challenger = report_from(&[("a", Some(0.3)), ("b", Some(0.5))], 0.4);
        let g = gain_report(&base, &challenger).unwrap();
        assert_eq!(g.rows[0].gain_pct, None);
        let csv = gains_to_csv(&g);
        assert!(csv.contains("a,0.100000,0.000000,0.300000,n/a"));
    }

    #[test]
    fn gain_type_set_mismatch_is_hard_error() {
        let a = report_from(&[("a", Some(0.5))], 0.5);
        let b = report_from(&[("b", Some(0.5))], 0.5);
        assert!(gain_report(&a, &b).is_err());
        let c = report_from(&[("a", None)], 0.5);
        assert!(gain_report(&a, &c).is_err());
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let r = report_from(&[("alpha", Some(0.512345)), ("beta", None)], 0.512345);
        let csv = metrics_to_csv(&r);
        let back = parse_metrics_csv(&csv).unwrap();
        assert_eq!(back.per_type.len(), 2);
        assert_eq!(back.per_type[0].name, "alpha");
        assert_eq!(back.per_type[1].auprc, None);
        assert!((back.macro_auprc - 0.512345).abs() < 1e-9);
        assert_eq!(back.excluded_types, vec!["beta".to_string()]);
    }

    #[test]
    fn metrics_csv_rejects_garbage() {
        assert!(parse_metrics_csv("").is_err());
        assert!(parse_metrics_csv("not,a,header\n").is_err());
        assert!(parse_metrics_csv("event,occurrence_ratio,auprc\nx,oops,0.5\n").is_err());
        assert!(parse_metrics_csv("event,occurrence_ratio,auprc\nx,0.5\n").is_err());
        // missing macro row
        assert!(parse_metrics_csv("event,occurrence_ratio,auprc\nx,0.1,0.5\n").is_err());
    }
}
