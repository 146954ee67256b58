//! CSV tables for experiment outputs.
//!
//! Reals are written with 17 significant digits so they parse back to the
//! same bits. A missing loss is `nan`; an undefined accuracy is `undefined`.

use crate::calibrate::{OptimHistory, SensitivityGrid};
use crate::gradcheck::{GradCheckReport, TimingRow};

/// 17 significant digits, round-trip exact.
pub fn real(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

fn table(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

/// `iter,loss,<metrics...>,grad_norm,alpha`
pub fn history_csv(h: &OptimHistory) -> String {
    let mut header = vec!["iter".to_string(), "loss".to_string()];
    header.extend(h.metric_names());
    header.extend(["grad_norm".to_string(), "alpha".to_string()]);
    table(
        &header,
        h.records.iter().map(|r| {
            let mut row = vec![r.iter.to_string(), real(r.loss)];
            row.extend(r.metrics.iter().map(|(_, v)| real(*v)));
            row.extend([real(r.grad_norm), real(r.alpha)]);
            row
        }),
    )
}

/// `n_steps,mode,eps,ad_value,fd_value,error,accuracy,seed`
pub fn gradcheck_csv(reports: &[GradCheckReport]) -> String {
    let header: Vec<String> = ["n_steps", "mode", "eps", "ad_value", "fd_value", "error", "accuracy", "seed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    table(
        &header,
        reports.iter().map(|r| {
            vec![
                r.n_steps.to_string(),
                r.mode.name().to_string(),
                real(r.eps),
                real(r.ad_value),
                real(r.fd_value),
                real(r.error),
                r.accuracy.map_or_else(|| "undefined".to_string(), real),
                r.seed.to_string(),
            ]
        }),
    )
}

/// `A_h,r_bot,loss,dL_dAh,dL_drbot`, one row per grid cell.
pub fn sensitivity_csv(g: &SensitivityGrid) -> String {
    let header: Vec<String> = ["A_h", "r_bot", "loss", "dL_dAh", "dL_drbot"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    table(
        &header,
        g.cells.iter().map(|c| {
            vec![
                real(c.a_h),
                real(c.r_bot),
                real(c.loss.unwrap_or(f64::NAN)),
                real(c.dl_da_h),
                real(c.dl_dr_bot),
            ]
        }),
    )
}

/// `n_steps,forward_ms,vjp_ms`
pub fn timing_csv(rows: &[TimingRow]) -> String {
    let header: Vec<String> = ["n_steps", "forward_ms", "vjp_ms"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    table(
        &header,
        rows.iter().map(|r| {
            vec![
                r.n_steps.to_string(),
                real(r.forward_ms),
                real(r.vjp_ms),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::{IterRecord, SensitivityCell};
    use crate::gradcheck::Mode;

    #[test]
    fn reals_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, f64::MAX, 5e-324, 3435.5036038313715] {
            assert_eq!(real(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
        assert_eq!(real(f64::NAN), "nan");
    }

    #[test]
    fn schemas() {
        let h = OptimHistory {
            records: vec![IterRecord {
                iter: 0,
                loss: 1.0,
                metrics: vec![("A_h".into(), 2.0), ("r_bot".into(), 3.0)],
                grad_norm: 4.0,
                alpha: 0.5,
            }],
        };
        let s = history_csv(&h);
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("iter,loss,A_h,r_bot,grad_norm,alpha"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 6);
        assert_eq!(row[2].parse::<f64>().unwrap(), 2.0);

        let r = GradCheckReport {
            n_steps: 3,
            mode: Mode::Vjp,
            eps: 1e-4,
            seed: 7,
            ad_value: 0.0,
            fd_value: 0.0,
            error: 0.0,
            accuracy: None,
        };
        let s = gradcheck_csv(&[r]);
        assert!(s.lines().nth(1).unwrap().ends_with(",undefined,7"));

        let g = SensitivityGrid {
            a_h: vec![1.0],
            r_bot: vec![2.0],
            cells: vec![SensitivityCell {
                a_h: 1.0,
                r_bot: 2.0,
                loss: None,
                dl_da_h: 0.0,
                dl_dr_bot: 0.0,
            }],
        };
        assert!(sensitivity_csv(&g).lines().nth(1).unwrap().contains(",nan,"));
        let t = timing_csv(&[TimingRow {
            n_steps: 8,
            forward_ms: 2.0,
            vjp_ms: 6.0,
        }]);
        assert!(t.lines().nth(1).unwrap().starts_with("8,"));
    }
}
