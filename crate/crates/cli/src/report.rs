//! Report formatting: fixed 6-significant-digit CSV cells, full-precision
//! JSON, and byte-deterministic output for identical inputs.

use mdjive::McSummary;

/// Render a float to 6 significant digits; empty for non-finite values so a
/// NaN can never slip into a report unnoticed.
pub fn fmt_sig(v: f64) -> String {
    if !v.is_finite() {
        return String::new();
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("rounded float reparses");
    format!("{rounded}")
}

pub fn summary_to_csv(summary: &McSummary) -> String {
    let mut out = String::from(
        "estimator,used,failures,mean,median,mean_bias,median_bias,q1,q3,iqr\n",
    );
    for e in &summary.estimators {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            e.label,
            e.used,
            e.failures,
            fmt_sig(e.mean),
            fmt_sig(e.median),
            fmt_sig(e.mean_bias),
            fmt_sig(e.median_bias),
            fmt_sig(e.q1),
            fmt_sig(e.q3),
            fmt_sig(e.iqr),
        ));
    }
    out
}

pub fn summary_to_json(summary: &McSummary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig(0.0997123456), "0.0997123");
        assert_eq!(fmt_sig(-123456.789), "-123457");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(f64::NAN), "");
    }
}
