//! SVG charts from metrics and bench CSV files.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::{now_unix, CliError};

/// A parsed CSV: header names and numeric rows. `#` lines are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Option<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next()?.split(',').map(|s| s.trim().to_string()).collect();
        let rows = lines
            .map(|l| l.split(',').map(|s| s.trim().to_string()).collect())
            .collect();
        Some(Self { header, rows })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn numbers(&self, col: usize) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.get(col).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN))
            .collect()
    }

    fn is_bench(&self) -> bool {
        self.header.first().map(String::as_str) == Some("mode")
    }
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |a: f64, b: f64| if b - a < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b + 0.05 * (b - a)) };
    (pad(x0, x1), pad(y0.min(0.0), y1))
}

fn draw_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("drawing failed: {e}"))
}

fn line_chart(title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> Result<String, CliError> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (800, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let ((x0, x1), (y0, y1)) = bounds(series);
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(draw_err)?;
        chart
            .configure_mesh()
            .x_desc(x_desc)
            .y_desc(y_desc)
            .draw()
            .map_err(draw_err)?;
        for (k, s) in series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                .map_err(draw_err)?
                .label(s.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
        root.present().map_err(draw_err)?;
    }
    Ok(svg)
}

fn stacked_chart(title: &str, layers: &[Series]) -> Result<String, CliError> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (800, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let n = layers.first().map_or(0, |l| l.points.len());
        let mut cum = vec![vec![0.0; n]; layers.len() + 1];
        for (k, l) in layers.iter().enumerate() {
            for (i, (_, y)) in l.points.iter().enumerate() {
                cum[k + 1][i] = cum[k][i] + if y.is_finite() { *y } else { 0.0 };
            }
        }
        let xs: Vec<f64> = layers.first().map(|l| l.points.iter().map(|p| p.0).collect()).unwrap_or_default();
        let x0 = xs.first().copied().unwrap_or(0.0);
        let x1 = xs.last().copied().unwrap_or(1.0).max(x0 + 1.0);
        let top = cum.last().map_or(1.0, |c| c.iter().copied().fold(1.0, f64::max));
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d(x0..x1, 0.0..top)
            .map_err(draw_err)?;
        chart
            .configure_mesh()
            .x_desc("episode")
            .y_desc("share of offered requests")
            .draw()
            .map_err(draw_err)?;
        for k in (0..layers.len()).rev() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<(f64, f64)> = xs.iter().copied().zip(cum[k + 1].iter().copied()).collect();
            chart
                .draw_series(AreaSeries::new(pts, 0.0, color.mix(0.85)).border_style(color))
                .map_err(draw_err)?
                .label(layers[k].label.clone())
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 14, y + 5)], color.filled()));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(draw_err)?;
        root.present().map_err(draw_err)?;
    }
    Ok(svg)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned())
}

fn write_svg(out: &Path, name: &str, mut svg: String, no_timestamp: bool) -> Result<PathBuf, CliError> {
    if !no_timestamp {
        let stamp = format!("<!-- created_unix: {} -->\n", now_unix());
        let at = svg.find("?>").map_or(0, |i| i + 2);
        let at = if at > 0 && svg[at..].starts_with('\n') { at + 1 } else { at };
        svg.insert_str(at, &stamp);
    }
    let p = out.join(name);
    fs::write(&p, svg).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    Ok(p)
}

/// Writes `reward.svg` and `throughput.svg` overlaying every metrics file,
/// one `shares_<stem>.svg` per metrics file and `runtime.svg` for bench
/// files.
pub fn cmd_plot(files: &[PathBuf], out: &Path, no_timestamp: bool) -> Result<(), CliError> {
    if files.is_empty() {
        return Err(CliError::Usage("plot needs at least one CSV file".into()));
    }
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let mut reward = Vec::new();
    let mut throughput = Vec::new();
    let mut runtime = Vec::new();
    let mut written = Vec::new();
    for f in files {
        let text = fs::read_to_string(f).map_err(|e| CliError::Io(format!("{}: {e}", f.display())))?;
        let table = Table::parse(&text).ok_or_else(|| CliError::NoRows(f.clone()))?;
        if table.rows.is_empty() {
            return Err(CliError::NoRows(f.clone()));
        }
        let name = stem(f);
        if table.is_bench() {
            runtime.extend(bench_series(&table, &name, f)?);
            continue;
        }
        let col = |c: &str| {
            table
                .col(c)
                .ok_or_else(|| CliError::Usage(format!("{}: missing column {c}", f.display())))
        };
        let ep = table.numbers(col("episode")?);
        let zip = |ys: Vec<f64>| ep.iter().copied().zip(ys).collect::<Vec<_>>();
        reward.push(Series {
            label: name.clone(),
            points: zip(table.numbers(col("reward_mean")?)),
        });
        throughput.push(Series {
            label: name.clone(),
            points: zip(table.numbers(col("throughput_rate")?)),
        });
        let layers: Vec<Series> = table
            .header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with("share_ch"))
            .map(|(i, h)| Series {
                label: h.trim_start_matches("share_").to_string(),
                points: zip(table.numbers(i)),
            })
            .collect();
        if !layers.is_empty() {
            let svg = stacked_chart(&format!("channel shares ({name})"), &layers)?;
            written.push(write_svg(out, &format!("shares_{name}.svg"), svg, no_timestamp)?);
        }
    }
    if !reward.is_empty() {
        let svg = line_chart("mean reward per episode", "episode", "reward", &reward)?;
        written.push(write_svg(out, "reward.svg", svg, no_timestamp)?);
        let svg = line_chart("throughput rate per episode", "episode", "served / offered", &throughput)?;
        written.push(write_svg(out, "throughput.svg", svg, no_timestamp)?);
    }
    if !runtime.is_empty() {
        let svg = line_chart("orchestration runtime", "nodes x services", "wall ms", &runtime)?;
        written.push(write_svg(out, "runtime.svg", svg, no_timestamp)?);
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn bench_series(table: &Table, name: &str, f: &Path) -> Result<Vec<Series>, CliError> {
    let col = |c: &str| {
        table
            .col(c)
            .ok_or_else(|| CliError::Usage(format!("{}: missing column {c}", f.display())))
    };
    let (mode, nodes, services, wall) = (col("mode")?, col("nodes")?, col("services")?, col("wall_ms")?);
    let mut by_mode: Vec<Series> = Vec::new();
    for r in &table.rows {
        let num = |c: usize| r.get(c).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN);
        let m = r.get(mode).cloned().unwrap_or_default();
        let label = format!("{m} ({name})");
        let point = (num(nodes) * num(services), num(wall));
        match by_mode.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push(point),
            None => by_mode.push(Series {
                label,
                points: vec![point],
            }),
        }
    }
    for s in &mut by_mode {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(by_mode)
}
