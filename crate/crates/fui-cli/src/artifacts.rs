//! File formats emitted by the pipeline: fit and inference CSVs, the
//! p-value table, and their readers.
//!
//! Floats are written in Rust's shortest round-trip decimal form, so every
//! artifact parses back to exactly the values that produced it and repeated
//! runs with the same inputs are byte-identical.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fui_core::lmm::PointwiseFitSeries;
use fui_core::smooth::CoefficientFunction;

/// Per-covariate inference curves ready for serialization.
#[derive(Debug, Clone)]
pub struct InferCurve {
    pub covariate: String,
    pub t_min: Vec<f64>,
    /// Bootstrap mean of the smoothed replicate curves.
    pub estimate_boot: Vec<f64>,
    /// Raw pointwise mixed-model estimate.
    pub estimate_raw: Vec<f64>,
    pub se_model: Vec<f64>,
    pub se_boot: Vec<f64>,
    pub pw_lower: Vec<f64>,
    pub pw_upper: Vec<f64>,
    /// One (alpha, lower, upper) triple per requested level.
    pub joint: Vec<(f64, Vec<f64>, Vec<f64>)>,
}

/// One row of the p-value table.
#[derive(Debug, Clone)]
pub struct PvalueRow {
    pub covariate: String,
    pub p_value: f64,
    pub max_standardized_deviation: f64,
    /// Average joint width over average pointwise width at the primary level.
    pub width_ratio: f64,
}

pub fn write_fit_csv<W: Write>(
    w: &mut W,
    series: &PointwiseFitSeries,
    smoothed: &[CoefficientFunction],
) -> Result<()> {
    writeln!(w, "covariate,k,t_min,estimate_raw,estimate_smooth,se_model")?;
    for (j, name) in series.coefficient_names.iter().enumerate() {
        for (k, &t) in series.grid.points().iter().enumerate() {
            writeln!(
                w,
                "{name},{k},{t},{},{},{}",
                series.fits[k].beta[j],
                smoothed[j].values[k],
                series.fits[k].se[j],
            )?;
        }
    }
    Ok(())
}

pub fn write_variance_csv<W: Write>(w: &mut W, series: &PointwiseFitSeries) -> Result<()> {
    writeln!(w, "k,t_min,sigma2_b,sigma2_eps,lambda,converged,reml")?;
    for (k, &t) in series.grid.points().iter().enumerate() {
        let f = &series.fits[k];
        writeln!(
            w,
            "{k},{t},{},{},{},{},{}",
            f.sigma2_b, f.sigma2_eps, f.lambda, f.converged, f.reml_value
        )?;
    }
    Ok(())
}

pub fn write_infer_csv<W: Write>(w: &mut W, curve: &InferCurve) -> Result<()> {
    write!(
        w,
        "k,t_min,estimate_boot,estimate_raw,se_model,se_boot,pw_lower,pw_upper"
    )?;
    for (alpha, _, _) in &curve.joint {
        write!(w, ",joint_lower_{alpha},joint_upper_{alpha}")?;
    }
    writeln!(w)?;
    for k in 0..curve.t_min.len() {
        write!(
            w,
            "{k},{},{},{},{},{},{},{}",
            curve.t_min[k],
            curve.estimate_boot[k],
            curve.estimate_raw[k],
            curve.se_model[k],
            curve.se_boot[k],
            curve.pw_lower[k],
            curve.pw_upper[k],
        )?;
        for (_, lower, upper) in &curve.joint {
            write!(w, ",{},{}", lower[k], upper[k])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_pvalues_csv<W: Write>(w: &mut W, rows: &[PvalueRow]) -> Result<()> {
    writeln!(
        w,
        "covariate,p_value,max_standardized_deviation,width_ratio_joint_vs_pointwise"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.covariate, r.p_value, r.max_standardized_deviation, r.width_ratio
        )?;
    }
    Ok(())
}

/// Human-readable table of global tests per covariate.
pub fn format_pvalue_table(rows: &[PvalueRow]) -> String {
    let name_width = rows
        .iter()
        .map(|r| r.covariate.len())
        .chain(["Covariate".len()])
        .max()
        .unwrap_or(9);
    let mut out = String::new();
    out.push_str(&format!(
        "{:<name_width$}  {:>8}  {:>8}  {:>12}\n",
        "Covariate", "p-value", "max-dev", "joint/pw"
    ));
    for r in rows {
        let p = if r.p_value < 0.001 {
            "<0.001".to_string()
        } else {
            format!("{:.3}", r.p_value)
        };
        out.push_str(&format!(
            "{:<name_width$}  {:>8}  {:>8.3}  {:>12.3}\n",
            r.covariate, p, r.max_standardized_deviation, r.width_ratio
        ));
    }
    out
}

fn parse_f64(field: &str, context: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .with_context(|| format!("bad number {field:?} in {context}"))
}

/// Read back an inference CSV written by [`write_infer_csv`].
pub fn read_infer_csv(path: &Path, covariate: &str) -> Result<InferCurve> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("open {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let mut alpha_cols: Vec<(f64, usize, usize)> = Vec::new();
    let mut col: BTreeMap<String, usize> = BTreeMap::new();
    for (i, h) in headers.iter().enumerate() {
        if let Some(a) = h.strip_prefix("joint_lower_") {
            let alpha = parse_f64(a, "header")?;
            let upper_name = format!("joint_upper_{a}");
            let upper = headers
                .iter()
                .position(|x| x == upper_name)
                .context("missing joint_upper column")?;
            alpha_cols.push((alpha, i, upper));
        } else {
            col.insert(h.to_string(), i);
        }
    }
    let need = |name: &str| -> Result<usize> {
        col.get(name)
            .copied()
            .with_context(|| format!("missing column {name}"))
    };
    let (it, ib, ir, ism, isb, ipl, ipu) = (
        need("t_min")?,
        need("estimate_boot")?,
        need("estimate_raw")?,
        need("se_model")?,
        need("se_boot")?,
        need("pw_lower")?,
        need("pw_upper")?,
    );

    let mut curve = InferCurve {
        covariate: covariate.to_string(),
        t_min: vec![],
        estimate_boot: vec![],
        estimate_raw: vec![],
        se_model: vec![],
        se_boot: vec![],
        pw_lower: vec![],
        pw_upper: vec![],
        joint: alpha_cols
            .iter()
            .map(|&(a, _, _)| (a, vec![], vec![]))
            .collect(),
    };
    for row in reader.records() {
        let row = row?;
        let get = |i: usize| parse_f64(row.get(i).unwrap_or(""), "infer csv");
        curve.t_min.push(get(it)?);
        curve.estimate_boot.push(get(ib)?);
        curve.estimate_raw.push(get(ir)?);
        curve.se_model.push(get(ism)?);
        curve.se_boot.push(get(isb)?);
        curve.pw_lower.push(get(ipl)?);
        curve.pw_upper.push(get(ipu)?);
        for (slot, &(_, lo, hi)) in curve.joint.iter_mut().zip(&alpha_cols) {
            slot.1.push(get(lo)?);
            slot.2.push(get(hi)?);
        }
    }
    if curve.t_min.is_empty() {
        bail!("{} has no data rows", path.display());
    }
    Ok(curve)
}

/// Read back the p-value table written by [`write_pvalues_csv`].
pub fn read_pvalues_csv(path: &Path) -> Result<Vec<PvalueRow>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("open {}", path.display()))?;
    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row?;
        rows.push(PvalueRow {
            covariate: row.get(0).unwrap_or("").to_string(),
            p_value: parse_f64(row.get(1).unwrap_or(""), "pvalues csv")?,
            max_standardized_deviation: parse_f64(row.get(2).unwrap_or(""), "pvalues csv")?,
            width_ratio: parse_f64(row.get(3).unwrap_or(""), "pvalues csv")?,
        });
    }
    Ok(rows)
}

/// Filesystem-safe name for per-covariate files.
pub fn sanitize_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}
