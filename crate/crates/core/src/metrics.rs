use crate::error::{Error, Result};
use crate::generators::QualityReport;
use crate::trainer::RunRecord;

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            left: vec![predictions.len()],
            right: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("accuracy inputs"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Sample Pearson correlation. A constant series has no defined
/// correlation and is reported as an error.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            left: vec![xs.len()],
            right: vec![ys.len()],
        });
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs at least 3 points, got {}",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("correlation undefined for a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationStudyRow {
    pub sampler: String,
    pub fid_analog: f64,
    pub pearson_r: f64,
}

/// Pairs each hint-only run with its sampler's quality report and correlates
/// the virtual and real hint-loss series. Rows come back sorted by
/// `fid_analog`, ties broken by sampler name.
pub fn correlation_study(records: &[RunRecord], reports: &[QualityReport]) -> Result<Vec<CorrelationStudyRow>> {
    if records.len() != reports.len() {
        return Err(Error::InvalidArgument(format!(
            "{} run records for {} quality reports",
            records.len(),
            reports.len()
        )));
    }
    let mut rows = records
        .iter()
        .zip(reports)
        .map(|(rec, rep)| {
            let virt: Vec<f64> = rec.rows.iter().map(|r| r.hint_loss_virtual).collect();
            let real: Vec<f64> = rec.rows.iter().map(|r| r.hint_loss_real).collect();
            Ok(CorrelationStudyRow {
                sampler: rep.sampler.clone(),
                fid_analog: rep.fid_analog,
                pearson_r: pearson(&virt, &real)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        a.fid_analog
            .total_cmp(&b.fid_analog)
            .then_with(|| a.sampler.cmp(&b.sampler))
    });
    Ok(rows)
}
