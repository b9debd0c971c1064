//! Text outputs of training, evaluation and ablation runs.

use calica_core::pipeline::{AblationRow, EpochRecord, EvalReport};

pub const LOSS_HEADER: &str = "epoch,train_total,val_total,val_f,val_xi,val_q,val_t";
pub const ABLATION_HEADER: &str = "experiment,f_loss,xi_loss,r_loss,t_loss";

fn opt(v: Option<f64>, missing: &str) -> String {
    v.map_or_else(|| missing.to_string(), |v| format!("{v:e}"))
}

/// Loss history CSV; absent values are empty fields.
pub fn loss_history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(LOSS_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&format!(
            "{},{:e},{},{},{},{},{}\n",
            r.epoch,
            r.train_total,
            opt(r.val_total, ""),
            opt(r.val_f, ""),
            opt(r.val_xi, ""),
            opt(r.val_q, ""),
            opt(r.val_t, "")
        ));
    }
    s
}

/// Terminal validation losses, one row per experiment, `-` for a term the
/// experiment does not train.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.experiment.name(),
            opt(r.f_loss, "-"),
            opt(r.xi_loss, "-"),
            opt(r.r_loss, "-"),
            opt(r.t_loss, "-")
        ));
    }
    s
}

pub fn eval_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use calica_core::pipeline::Experiment;

    #[test]
    fn ablation_dashes() {
        let rows = [AblationRow {
            experiment: Experiment::I,
            f_loss: None,
            xi_loss: None,
            r_loss: Some(0.5),
            t_loss: Some(0.25),
        }];
        assert_eq!(ablation_csv(&rows), "experiment,f_loss,xi_loss,r_loss,t_loss\nI,-,-,5e-1,2.5e-1\n");
    }

    #[test]
    fn loss_rows_have_seven_fields() {
        let rec = EpochRecord {
            epoch: 1,
            train_total: 2.0,
            val_total: None,
            val_f: None,
            val_xi: None,
            val_q: None,
            val_t: None,
        };
        let csv = loss_history_csv(&[rec]);
        assert_eq!(csv.lines().nth(1).unwrap(), "1,2e0,,,,,");
    }
}
