//! Experiment driver: per-case before/after metrics for every registration
//! method, per-method aggregation and report rendering.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_register, BaselineConfig};
use crate::deformation::{err_def, invert};
use crate::error::{Error, Result};
use crate::imaging::{warp, BorderPolicy, DeformationField, Image};
use crate::metrics::{dice, hd95, mad, mse, Mask};
use crate::networks::{generator_forward, NetworkParams};
use crate::synthdata::RegistrationCase;

/// Fixed-point iterations used to invert recovered fields for Err_Def.
pub const INVERT_ITERATIONS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Before,
    GanReg,
    GanRegNcyc,
    BaselineNmi,
}

impl Method {
    /// Report row order.
    pub const ALL: [Method; 4] = [
        Method::Before,
        Method::GanReg,
        Method::GanRegNcyc,
        Method::BaselineNmi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Before => "before",
            Method::GanReg => "gan_reg",
            Method::GanRegNcyc => "gan_reg_ncyc",
            Method::BaselineNmi => "baseline_nmi",
        }
    }

    /// Human-readable label used in text reports.
    pub fn label(self) -> &'static str {
        match self {
            Method::Before => "before registration",
            Method::GanReg => "GAN registration",
            Method::GanRegNcyc => "GAN registration, no cycle",
            Method::BaselineNmi => "NMI/B-spline baseline",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// A registration strategy: maps (reference, floating) to a field that
/// warps the floating image onto the reference.
pub trait Registrar {
    fn method(&self) -> Method;
    fn register(&self, reference: &Image, flt: &Image) -> Result<DeformationField>;
}

/// The identity registrar.
pub struct Before;

impl Registrar for Before {
    fn method(&self) -> Method {
        Method::Before
    }

    fn register(&self, reference: &Image, _flt: &Image) -> Result<DeformationField> {
        let (w, h) = reference.dims();
        Ok(DeformationField::zeros(w, h))
    }
}

/// A trained generator, with or without the cycle term.
pub struct GanRegistrar {
    pub method: Method,
    pub generator: NetworkParams,
}

impl Registrar for GanRegistrar {
    fn method(&self) -> Method {
        self.method
    }

    fn register(&self, reference: &Image, flt: &Image) -> Result<DeformationField> {
        Ok(generator_forward(&self.generator, reference, flt)?.field)
    }
}

pub struct BaselineRegistrar {
    pub config: BaselineConfig,
}

impl Registrar for BaselineRegistrar {
    fn method(&self) -> Method {
        Method::BaselineNmi
    }

    fn register(&self, reference: &Image, flt: &Image) -> Result<DeformationField> {
        Ok(baseline_register(reference, flt, &self.config)?.0)
    }
}

/// What the registrars may need: checkpoints and the baseline settings.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub gan_reg: Option<NetworkParams>,
    pub gan_reg_ncyc: Option<NetworkParams>,
    pub baseline: BaselineConfig,
}

/// Builds the registrar for `method`; learned methods need their checkpoint.
pub fn registrar(method: Method, artifacts: &Artifacts) -> Result<Box<dyn Registrar>> {
    let gan = |p: &Option<NetworkParams>| {
        p.clone().ok_or_else(|| {
            Error::InvalidArgument(format!("method {method} needs a generator checkpoint"))
        })
    };
    Ok(match method {
        Method::Before => Box::new(Before),
        Method::GanReg => Box::new(GanRegistrar {
            method,
            generator: gan(&artifacts.gan_reg)?,
        }),
        Method::GanRegNcyc => Box::new(GanRegistrar {
            method,
            generator: gan(&artifacts.gan_reg_ncyc)?,
        }),
        Method::BaselineNmi => Box::new(BaselineRegistrar {
            config: artifacts.baseline.clone(),
        }),
    })
}

/// Per-case, per-method metrics. `err_def` and `mse` are absent for
/// mask-only evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: String,
    pub method: Method,
    pub dice: f64,
    pub err_def: Option<f64>,
    pub hd95: f64,
    pub mad: f64,
    pub mse: Option<f64>,
    pub time_s: f64,
}

/// Field-dependent metrics of one case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldMetrics {
    pub dice: f64,
    pub err_def: f64,
    pub hd95: f64,
    pub mad: f64,
    pub mse: f64,
}

/// Warps a binary mask (zero outside the image) and re-thresholds it.
pub fn warp_mask(mask: &Mask, field: &DeformationField) -> Result<Mask> {
    Ok(Mask::from_threshold(
        &warp(&mask.to_image(), field, BorderPolicy::Zero)?,
        0.5,
    ))
}

/// Scores a recovered field on a case with known ground truth.
///
/// Err_Def compares the applied field with the inverse of the recovered one
/// (the recovered field maps reference coordinates into the floating frame,
/// the applied one the other way). MSE compares the registered image with
/// the aligned image of the same modality.
pub fn evaluate_field(case: &RegistrationCase, field: &DeformationField) -> Result<FieldMetrics> {
    let moved_mask = warp_mask(&case.mask_flt, field)?;
    let (dice, hd95, mad) = mask_metrics(&case.mask_ref, &moved_mask)?;
    let trans = warp(&case.flt, field, BorderPolicy::Clamp)?;
    let recovered = if field.max_magnitude() == 0.0 {
        field.clone()
    } else {
        invert(field, INVERT_ITERATIONS)
    };
    Ok(FieldMetrics {
        dice,
        err_def: err_def(&case.applied_field, &recovered)?,
        hd95,
        mad,
        mse: mse(&trans, &case.flt_aligned)?,
    })
}

fn mask_metrics(reference: &Mask, moved: &Mask) -> Result<(f64, f64, f64)> {
    Ok((
        dice(reference, moved)?,
        hd95(reference, moved)?,
        mad(reference, moved)?,
    ))
}

/// Runs one registrar on one case, timing only the registration call.
pub fn evaluate_case(case: &RegistrationCase, registrar: &dyn Registrar) -> Result<MetricsReport> {
    let t = Instant::now();
    let field = registrar.register(&case.reference, &case.flt)?;
    let time_s = t.elapsed().as_secs_f64();
    let m = evaluate_field(case, &field)?;
    Ok(MetricsReport {
        case_id: case.id.clone(),
        method: registrar.method(),
        dice: m.dice,
        err_def: Some(m.err_def),
        hd95: m.hd95,
        mad: m.mad,
        mse: Some(m.mse),
        time_s,
    })
}

/// Mask-only protocol: no ground-truth field, so Err_Def and MSE are absent.
pub fn evaluate_masks(
    case_id: &str,
    method: Method,
    mask_ref: &Mask,
    mask_flt: &Mask,
    field: &DeformationField,
    time_s: f64,
) -> Result<MetricsReport> {
    let (dice, hd95, mad) = mask_metrics(mask_ref, &warp_mask(mask_flt, field)?)?;
    Ok(MetricsReport {
        case_id: case_id.to_string(),
        method,
        dice,
        err_def: None,
        hd95,
        mad,
        mse: None,
        time_s,
    })
}

/// Per-method means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub dice: f64,
    pub err_def: Option<f64>,
    pub hd95: f64,
    pub mad: f64,
    pub mse: Option<f64>,
    pub time_s: f64,
    pub cases: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// Mean over the reports that carry the metric; `None` if none does.
fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        return None;
    }
    // Sorting makes the sum independent of input order.
    present.sort_by(f64::total_cmp);
    Some(present.iter().sum::<f64>() / present.len() as f64)
}

fn sorted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    mean(v.into_iter())
}

/// Arithmetic mean per (method, metric), rows in [`Method::ALL`] order.
pub fn aggregate(reports: &[MetricsReport]) -> Result<Vec<AggregateRow>> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot aggregate zero reports".into(),
        ));
    }
    Ok(Method::ALL
        .into_iter()
        .filter_map(|m| {
            let rs: Vec<&MetricsReport> = reports.iter().filter(|r| r.method == m).collect();
            (!rs.is_empty()).then(|| AggregateRow {
                method: m,
                dice: sorted_mean(rs.iter().map(|r| r.dice)),
                err_def: mean_opt(rs.iter().map(|r| r.err_def)),
                hd95: sorted_mean(rs.iter().map(|r| r.hd95)),
                mad: sorted_mean(rs.iter().map(|r| r.mad)),
                mse: mean_opt(rs.iter().map(|r| r.mse)),
                time_s: sorted_mean(rs.iter().map(|r| r.time_s)),
                cases: rs.len(),
            })
        })
        .collect())
}

/// A report serialization.
pub trait ReportRenderer {
    fn format(&self) -> &'static str;
    fn render(&self, rows: &[AggregateRow]) -> Result<Vec<u8>>;
}

pub const CSV_COLUMNS: [&str; 7] = ["method", "dice", "err_def", "hd95", "mad", "mse", "time_s"];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

pub struct CsvRenderer;

impl ReportRenderer for CsvRenderer {
    fn format(&self) -> &'static str {
        "csv"
    }

    fn render(&self, rows: &[AggregateRow]) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        for r in rows {
            w.write_record([
                r.method.name().to_string(),
                cell(Some(r.dice)),
                cell(r.err_def),
                cell(Some(r.hd95)),
                cell(Some(r.mad)),
                cell(r.mse),
                cell(Some(r.time_s)),
            ])?;
        }
        w.into_inner()
            .map_err(|e| Error::Serialization(e.to_string()))
    }
}

pub struct JsonRenderer;

impl ReportRenderer for JsonRenderer {
    fn format(&self) -> &'static str {
        "json"
    }

    fn render(&self, rows: &[AggregateRow]) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(rows)?;
        out.push(b'\n');
        Ok(out)
    }
}

pub struct TextRenderer;

impl ReportRenderer for TextRenderer {
    fn format(&self) -> &'static str {
        "text"
    }

    fn render(&self, rows: &[AggregateRow]) -> Result<Vec<u8>> {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "{:<28} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6}\n",
            "method", "dice", "err_def", "hd95", "mad", "mse", "time_s", "cases"
        );
        for r in rows {
            s.push_str(&format!(
                "{:<28} {:>8.4} {:>8} {:>8.4} {:>8.4} {:>8} {:>8.3} {:>6}\n",
                r.method.label(),
                r.dice,
                opt(r.err_def),
                r.hd95,
                r.mad,
                opt(r.mse),
                r.time_s,
                r.cases
            ));
        }
        s.push_str("dice is plain (unnormalized) Dice\n");
        Ok(s.into_bytes())
    }
}

pub const REPORT_FORMATS: [&str; 3] = ["csv", "json", "text"];

/// Looks up a renderer by format name.
pub fn renderer(format: &str) -> Result<Box<dyn ReportRenderer>> {
    match format {
        "csv" => Ok(Box::new(CsvRenderer)),
        "json" | "json-text" => Ok(Box::new(JsonRenderer)),
        "text" | "aligned-text" => Ok(Box::new(TextRenderer)),
        other => Err(Error::UnknownFormat(other.to_string())),
    }
}

pub fn render_report(rows: &[AggregateRow], format: &str) -> Result<Vec<u8>> {
    renderer(format)?.render(rows)
}

pub const CASE_COLUMNS: [&str; 8] = [
    "case_id", "method", "dice", "err_def", "hd95", "mad", "mse", "time_s",
];

/// Per-case CSV. With `with_timing = false` the time column is left empty,
/// so the output depends only on the data.
pub fn render_cases_csv(reports: &[MetricsReport], with_timing: bool) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CASE_COLUMNS)?;
    for r in reports {
        w.write_record([
            r.case_id.clone(),
            r.method.name().to_string(),
            cell(Some(r.dice)),
            cell(r.err_def),
            cell(Some(r.hd95)),
            cell(Some(r.mad)),
            cell(r.mse),
            if with_timing {
                cell(Some(r.time_s))
            } else {
                String::new()
            },
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::Serialization(e.to_string()))
}

/// Parses a per-case CSV written by [`render_cases_csv`].
pub fn parse_cases_csv(bytes: &[u8]) -> Result<Vec<MetricsReport>> {
    let mut r = csv::Reader::from_reader(bytes);
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| Error::Format(format!("bad number `{s}` in report")))
        }
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != CASE_COLUMNS.len() {
            return Err(Error::Format(format!(
                "report row has {} cells, expected {}",
                rec.len(),
                CASE_COLUMNS.len()
            )));
        }
        let req = |i: usize| {
            num(&rec[i])?.ok_or_else(|| Error::Format(format!("missing {}", CASE_COLUMNS[i])))
        };
        out.push(MetricsReport {
            case_id: rec[0].to_string(),
            method: rec[1].parse()?,
            dice: req(2)?,
            err_def: num(&rec[3])?,
            hd95: req(4)?,
            mad: req(5)?,
            mse: num(&rec[6])?,
            time_s: num(&rec[7])?.unwrap_or(0.0),
        });
    }
    Ok(out)
}
