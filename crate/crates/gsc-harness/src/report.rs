//! Metric export: CSV streams and self-contained SVG charts.
//!
//! The CSV schema is the product's external interface — fixed column order,
//! empty cells for not-applicable fields — and is written with `f64`'s
//! shortest-round-trip formatting so a re-parse reproduces the in-memory
//! records exactly.  Charts are emitted as hand-assembled SVG (axes, ticks,
//! one polyline per series, legend) so runs can be inspected without any
//! plotting toolchain.

use crate::error::{HarnessError, Result};
use gsc_core::metrics::MetricRecord;
use std::fmt::Write as _;
use std::path::Path;

pub const CSV_HEADER: &str = "run_id,stage,epoch,rate_index,snr_db,delay_spread_ns,metric,value,seed";

fn csv_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Render records to CSV text.  `rate_index = None` and NaN-valued
/// SNR/delay-spread fields (meaning "not applicable to this stage") become
/// empty cells.
pub fn csv_string(records: &[MetricRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        let rate = r.rate_index.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.stage,
            r.epoch,
            rate,
            csv_f64(r.snr_db),
            csv_f64(r.delay_spread_ns),
            r.metric,
            r.value,
            r.seed
        );
    }
    s
}

pub fn export_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    std::fs::write(path, csv_string(records))?;
    Ok(())
}

fn parse_cell_f64(cell: &str, line: usize) -> Result<f64> {
    if cell.is_empty() {
        return Ok(f64::NAN);
    }
    cell.parse()
        .map_err(|_| HarnessError::Invalid(format!("csv line {line}: bad number `{cell}`")))
}

/// Inverse of [`csv_string`]; used by round-trip checks and the plot
/// subcommand.
pub fn parse_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        Some((_, h)) => {
            return Err(HarnessError::Invalid(format!(
                "csv header mismatch: got `{h}`"
            )))
        }
        None => return Err(HarnessError::Invalid("empty csv".into())),
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        if raw.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let cells: Vec<&str> = raw.split(',').collect();
        if cells.len() != 9 {
            return Err(HarnessError::Invalid(format!(
                "csv line {lineno}: expected 9 cells, got {}",
                cells.len()
            )));
        }
        out.push(MetricRecord {
            run_id: cells[0].to_string(),
            stage: cells[1].to_string(),
            epoch: cells[2].parse().map_err(|_| {
                HarnessError::Invalid(format!("csv line {lineno}: bad epoch `{}`", cells[2]))
            })?,
            rate_index: if cells[3].is_empty() {
                None
            } else {
                Some(cells[3].parse().map_err(|_| {
                    HarnessError::Invalid(format!(
                        "csv line {lineno}: bad rate index `{}`",
                        cells[3]
                    ))
                })?)
            },
            snr_db: parse_cell_f64(cells[4], lineno)?,
            delay_spread_ns: parse_cell_f64(cells[5], lineno)?,
            metric: cells[6].to_string(),
            value: parse_cell_f64(cells[7], lineno)?,
            seed: cells[8].parse().map_err(|_| {
                HarnessError::Invalid(format!("csv line {lineno}: bad seed `{}`", cells[8]))
            })?,
        });
    }
    Ok(out)
}

/// Field-by-field equality that treats NaN cells as equal (NaN marks "not
/// applicable", and two not-applicables are the same thing).
pub fn records_equal(a: &[MetricRecord], b: &[MetricRecord]) -> bool {
    fn f64_eq(x: f64, y: f64) -> bool {
        (x.is_nan() && y.is_nan()) || x == y
    }
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.run_id == y.run_id
                && x.stage == y.stage
                && x.epoch == y.epoch
                && x.rate_index == y.rate_index
                && f64_eq(x.snr_db, y.snr_db)
                && f64_eq(x.delay_spread_ns, y.delay_spread_ns)
                && x.metric == y.metric
                && f64_eq(x.value, y.value)
                && x.seed == y.seed
        })
}

/// What to put on the x axis of a chart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XAxis {
    SnrDb,
    DelaySpreadNs,
    Epoch,
}

/// How records are split into polylines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKey {
    RateIndex,
    Stage,
}

/// Declarative chart description: which metric, what varies along x, and
/// what distinguishes the lines.
#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub title: String,
    pub metric: String,
    pub x: XAxis,
    pub series: SeriesKey,
    pub x_label: String,
    pub y_label: String,
}

impl PlotSpec {
    /// The standard received-quality chart: PSNR against SNR, one line per
    /// compression rate.
    pub fn psnr_vs_snr() -> PlotSpec {
        PlotSpec {
            title: "PSNR vs SNR".into(),
            metric: "psnr".into(),
            x: XAxis::SnrDb,
            series: SeriesKey::RateIndex,
            x_label: "SNR (dB)".into(),
            y_label: "PSNR (dB)".into(),
        }
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 46.0;
const MARGIN_B: f64 = 52.0;
const PALETTE: [&str; 8] = [
    "#1b6ca8", "#c0392b", "#27ae60", "#8e44ad", "#d35400", "#16a085", "#7f8c8d", "#2c3e50",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Render the selected metric as an SVG line chart and return the document
/// text.  Series are ordered by label; duplicate x values within a series
/// are averaged; a legend names each line.
pub fn svg_plot(records: &[MetricRecord], spec: &PlotSpec) -> Result<String> {
    let picked: Vec<&MetricRecord> = records.iter().filter(|r| r.metric == spec.metric).collect();
    if picked.is_empty() {
        return Err(HarnessError::Invalid(format!(
            "no records with metric `{}` to plot",
            spec.metric
        )));
    }

    // Group into labelled series.
    let mut series: std::collections::BTreeMap<String, Vec<(f64, f64)>> =
        std::collections::BTreeMap::new();
    for r in picked {
        let label = match spec.series {
            SeriesKey::RateIndex => match r.rate_index {
                Some(p) => format!("rate {p}"),
                None => "all rates".to_string(),
            },
            SeriesKey::Stage => r.stage.clone(),
        };
        let x = match spec.x {
            XAxis::SnrDb => r.snr_db,
            XAxis::DelaySpreadNs => r.delay_spread_ns,
            XAxis::Epoch => r.epoch as f64,
        };
        if x.is_nan() || r.value.is_nan() {
            continue;
        }
        series.entry(label).or_default().push((x, r.value));
    }
    if series.is_empty() {
        return Err(HarnessError::Invalid(
            "every candidate record lacks the chosen x value".into(),
        ));
    }

    // Average duplicates, sort by x.
    let mut lines: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (label, pts) in series {
        let mut acc: std::collections::BTreeMap<u64, (f64, f64, usize)> =
            std::collections::BTreeMap::new();
        for (x, y) in pts {
            let e = acc.entry(x.to_bits()).or_insert((x, 0.0, 0));
            e.1 += y;
            e.2 += 1;
        }
        let mut out: Vec<(f64, f64)> =
            acc.into_values().map(|(x, sy, n)| (x, sy / n as f64)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        lines.push((label, out));
    }

    let all: Vec<(f64, f64)> = lines.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let (mut x0, mut x1) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _)| {
            (lo.min(*x), hi.max(*x))
        });
    let (mut y0, mut y1) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, y)| {
            (lo.min(*y), hi.max(*y))
        });
    if x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y0 == y1 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(
        s,
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        s,
        "  <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"16\">{}</text>",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        xml_escape(&spec.title)
    );
    // Axes.
    let _ = writeln!(
        s,
        "  <line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    );
    let _ = writeln!(
        s,
        "  <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>",
        HEIGHT - MARGIN_B
    );
    // Ticks.
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let cx = px(fx);
        let _ = writeln!(
            s,
            "  <line x1=\"{cx}\" y1=\"{}\" x2=\"{cx}\" y2=\"{}\" stroke=\"black\"/>",
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 5.0
        );
        let _ = writeln!(
            s,
            "  <text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"11\">{}</text>",
            HEIGHT - MARGIN_B + 18.0,
            fmt_tick(fx)
        );
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let cy = py(fy);
        let _ = writeln!(
            s,
            "  <line x1=\"{}\" y1=\"{cy}\" x2=\"{MARGIN_L}\" y2=\"{cy}\" stroke=\"black\"/>",
            MARGIN_L - 5.0
        );
        let _ = writeln!(
            s,
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"11\">{}</text>",
            MARGIN_L - 8.0,
            cy + 4.0,
            fmt_tick(fy)
        );
    }
    // Axis labels.
    let _ = writeln!(
        s,
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\">{}</text>",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0,
        xml_escape(&spec.x_label)
    );
    let _ = writeln!(
        s,
        "  <text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\" transform=\"rotate(-90 16 {})\">{}</text>",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        xml_escape(&spec.y_label)
    );
    // Series polylines + legend.
    for (i, (label, pts)) in lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords = pts
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            s,
            "  <polyline points=\"{coords}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>"
        );
        for (x, y) in pts {
            let _ = writeln!(
                s,
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.4\" fill=\"{color}\"/>",
                px(*x),
                py(*y)
            );
        }
        let ly = MARGIN_T + 14.0 * i as f64;
        let _ = writeln!(
            s,
            "  <line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"1.8\"/>",
            WIDTH - MARGIN_R + 10.0,
            WIDTH - MARGIN_R + 34.0
        );
        let _ = writeln!(
            s,
            "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            WIDTH - MARGIN_R + 40.0,
            ly + 4.0,
            xml_escape(label)
        );
    }
    let _ = writeln!(s, "</svg>");
    Ok(s)
}

pub fn export_svg_plot(records: &[MetricRecord], spec: &PlotSpec, path: &Path) -> Result<()> {
    std::fs::write(path, svg_plot(records, spec)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(
        stage: &str,
        epoch: usize,
        rate: Option<usize>,
        snr: f64,
        metric: &str,
        value: f64,
    ) -> MetricRecord {
        MetricRecord {
            run_id: "t".into(),
            stage: stage.into(),
            epoch,
            rate_index: rate,
            snr_db: snr,
            delay_spread_ns: f64::NAN,
            metric: metric.into(),
            value,
            seed: 9,
        }
    }

    #[test]
    fn empty_stream_gives_header_only_csv() {
        let s = csv_string(&[]);
        assert_eq!(s, format!("{CSV_HEADER}\n"));
        assert!(parse_csv(&s).unwrap().is_empty());
    }

    #[test]
    fn csv_round_trips_including_empty_cells() {
        let records = vec![
            rec("rate_stage", 3, Some(2), f64::NAN, "loss", 0.12345678901234567),
            rec("eval", 0, None, 15.0, "psnr", 23.75),
        ];
        let s = csv_string(&records);
        // Not-applicable cells are empty, not NaN text.
        assert!(!s.contains("NaN"));
        let back = parse_csv(&s).unwrap();
        assert!(records_equal(&records, &back));
    }

    #[test]
    fn csv_parse_rejects_wrong_header_and_bad_cells() {
        assert!(parse_csv("run,stage\n").is_err());
        let bad = format!("{CSV_HEADER}\nr,eval,x,,,,psnr,1,2\n");
        assert!(parse_csv(&bad).is_err());
    }

    #[test]
    fn psnr_plot_has_one_polyline_per_rate() {
        let mut records = Vec::new();
        for p in 0..5 {
            for (i, snr) in [0.0, 5.0, 10.0].iter().enumerate() {
                records.push(rec("eval", i, Some(p), *snr, "psnr", 10.0 + p as f64 + snr / 5.0));
            }
        }
        let svg = svg_plot(&records, &PlotSpec::psnr_vs_snr()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 5);
        assert!(svg.contains("rate 4"));
        assert!(svg.contains("PSNR vs SNR"));
        assert!(svg.contains("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn duplicate_x_points_are_averaged() {
        let records = vec![
            rec("eval", 0, Some(0), 5.0, "psnr", 10.0),
            rec("eval", 1, Some(0), 5.0, "psnr", 20.0),
            rec("eval", 2, Some(0), 10.0, "psnr", 30.0),
        ];
        let svg = svg_plot(&records, &PlotSpec::psnr_vs_snr()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("<circle").count(), 2);
    }

    #[test]
    fn plotting_nothing_is_an_error() {
        let err = svg_plot(&[], &PlotSpec::psnr_vs_snr()).unwrap_err();
        assert!(err.to_string().contains("psnr"), "{err}");
    }
}
