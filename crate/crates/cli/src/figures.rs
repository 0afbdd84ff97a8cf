//! Hand-written SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use fmwc::evalbench::experiments::ReportRow;

use crate::artifacts::ParsedTable;
use crate::error::CliError;

const VIRIDIS: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn ramp(u: f64) -> String {
    let u = u.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (u.floor() as usize).min(VIRIDIS.len() - 2);
    let f = u - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    let c = |x: f64, y: f64| (x + f * (y - x)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(a.0, b.0), c(a.1, b.1), c(a.2, b.2))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

/// Two heat maps of the `field` table: velocity std norm and |divergence|.
pub fn field_panels(t: &ParsedTable) -> Result<String, CliError> {
    let (cx, cy) = (t.column("x")?, t.column("y")?);
    let cols = [
        ("std norm of velocity", t.column("std_norm")?),
        ("|divergence|", t.column("abs_div")?),
    ];
    let time = if t.rows.is_empty() {
        0.0
    } else {
        t.float(0, t.column("t")?)?
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in 0..t.rows.len() {
        xs.push(t.float(r, cx)?);
        ys.push(t.float(r, cy)?);
    }
    let mut ux: Vec<f64> = xs.clone();
    ux.sort_by(f64::total_cmp);
    ux.dedup();
    let g = ux.len().max(1);
    let (lo, hi) = (ux.first().copied().unwrap_or(0.0), ux.last().copied().unwrap_or(1.0));
    let cell_w = if g > 1 { (hi - lo) / (g - 1) as f64 } else { 1.0 };
    let (lo, hi) = (lo - cell_w / 2.0, hi + cell_w / 2.0);
    let size = 300.0;
    let px = size / g as f64;
    let mut s = open(2.0 * size + 90.0, size + 60.0);
    for (p, (title, col)) in cols.iter().enumerate() {
        let vals: Vec<f64> = (0..t.rows.len()).map(|r| t.float(r, *col)).collect::<Result<_, _>>()?;
        let max = vals.iter().copied().fold(0.0, f64::max);
        let ox = 30.0 + p as f64 * (size + 30.0);
        writeln!(
            s,
            "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{} at t = {time}</text>",
            ox + size / 2.0,
            escape(title)
        )
        .unwrap();
        for (r, v) in vals.iter().enumerate() {
            let x = ox + (xs[r] - lo) / (hi - lo) * size - px / 2.0;
            let y = 35.0 + (hi - ys[r]) / (hi - lo) * size - px / 2.0;
            let u = if max > 0.0 { v / max } else { 0.0 };
            writeln!(
                s,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                px + 0.05,
                px + 0.05,
                ramp(u)
            )
            .unwrap();
        }
        writeln!(
            s,
            "<rect x=\"{ox}\" y=\"35\" width=\"{size}\" height=\"{size}\" fill=\"none\" stroke=\"black\"/>"
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// AUPRC per (method, readout) with the positive rate as a dashed floor.
pub fn auprc_bars(rows: &[ReportRow]) -> Option<String> {
    let bars: Vec<&ReportRow> = rows
        .iter()
        .filter(|r| r.table == "filtering" && r.metric == "auprc")
        .collect();
    if bars.is_empty() {
        return None;
    }
    let floor = rows
        .iter()
        .filter(|r| r.table == "filtering" && r.scoring == "positive_rate")
        .map(|r| r.value)
        .fold(f64::NAN, f64::max);
    let (bw, gap, h, top, left) = (36.0, 14.0, 260.0, 30.0, 50.0);
    let width = left + bars.len() as f64 * (bw + gap) + 20.0;
    let mut s = open(width, top + h + 120.0);
    writeln!(
        s,
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\">AUPRC by readout</text>",
        width / 2.0
    )
    .unwrap();
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + h * (1.0 - v);
        writeln!(
            s,
            "<line x1=\"{left}\" x2=\"{}\" y1=\"{y}\" y2=\"{y}\" stroke=\"#ddd\"/>",
            width - 20.0
        )
        .unwrap();
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.2}</text>",
            left - 6.0,
            y + 4.0
        )
        .unwrap();
    }
    let mut methods: Vec<&str> = bars.iter().map(|r| r.method.as_str()).collect();
    methods.dedup();
    for (i, r) in bars.iter().enumerate() {
        let x = left + gap / 2.0 + i as f64 * (bw + gap);
        let bh = h * r.value.clamp(0.0, 1.0);
        let colour = PALETTE[methods.iter().position(|m| *m == r.method).unwrap_or(0) % PALETTE.len()];
        writeln!(
            s,
            "<rect x=\"{x}\" y=\"{}\" width=\"{bw}\" height=\"{bh}\" fill=\"{colour}\"/>",
            top + h - bh
        )
        .unwrap();
        let lx = x + bw / 2.0;
        let ly = top + h + 10.0;
        writeln!(
            s,
            "<text x=\"{lx}\" y=\"{ly}\" transform=\"rotate(60 {lx} {ly})\">{} {}</text>",
            escape(&r.method),
            escape(&r.scoring)
        )
        .unwrap();
    }
    if floor.is_finite() {
        let y = top + h * (1.0 - floor);
        writeln!(
            s,
            "<line x1=\"{left}\" x2=\"{}\" y1=\"{y}\" y2=\"{y}\" stroke=\"black\" stroke-dasharray=\"4 3\"/>",
            width - 20.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Misplacement against the step budget, one line per controller.
pub fn quality_vs_steps(rows: &[ReportRow]) -> Option<String> {
    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.table == "adapt" && r.metric == "misplacement") {
        if let Some(n) = r.scoring.strip_prefix("N=").and_then(|n| n.parse::<f64>().ok()) {
            series.entry(r.method.as_str()).or_default().push((n, r.value));
        }
    }
    if series.is_empty() {
        return None;
    }
    let all: Vec<(f64, f64)> = series.values().flatten().copied().collect();
    let (nmin, nmax) = all
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let ymax = all.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-3) * 1.1;
    let (w, h, left, top) = (420.0, 260.0, 60.0, 30.0);
    let lx = |n: f64| {
        if nmax > nmin {
            left + (n.ln() - nmin.ln()) / (nmax.ln() - nmin.ln()) * w
        } else {
            left + w / 2.0
        }
    };
    let ly = |v: f64| top + h * (1.0 - v / ymax);
    let mut s = open(left + w + 150.0, top + h + 50.0);
    writeln!(
        s,
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\">misplacement vs steps</text>",
        left + w / 2.0
    )
    .unwrap();
    writeln!(
        s,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"black\"/>"
    )
    .unwrap();
    let mut ns: Vec<f64> = all.iter().map(|p| p.0).collect();
    ns.sort_by(f64::total_cmp);
    ns.dedup();
    for n in ns {
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{n}</text>",
            lx(n),
            top + h + 16.0
        )
        .unwrap();
    }
    for tick in 0..=4 {
        let v = ymax * tick as f64 / 4.0;
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.1}%</text>",
            left - 6.0,
            ly(v) + 4.0,
            100.0 * v
        )
        .unwrap();
    }
    for (i, (name, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let colour = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(n, v)| format!("{:.2},{:.2}", lx(n), ly(v))).collect();
        writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"/>",
            path.join(" ")
        )
        .unwrap();
        for &(n, v) in &pts {
            writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{colour}\"/>",
                lx(n),
                ly(v)
            )
            .unwrap();
        }
        let y = top + 14.0 + 18.0 * i as f64;
        writeln!(
            s,
            "<text x=\"{}\" y=\"{y}\" fill=\"{colour}\">{}</text>",
            left + w + 12.0,
            escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Some(s)
}
