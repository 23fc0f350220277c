//! Flat CSV rows for every report and minimal SVG figures.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{AnalysisError, MeanVocabDistribution, PcaResult, PruneReport};

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>, AnalysisError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<R>, _>>()?)
}

pub fn to_csv_string<R: Serialize>(rows: &[R]) -> Result<String, AnalysisError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| AnalysisError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn from_csv_str<R: DeserializeOwned>(text: &str) -> Result<Vec<R>, AnalysisError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<R>, _>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub token: usize,
    pub mean_prob: f64,
}

pub fn distribution_rows(d: &MeanVocabDistribution) -> Vec<DistributionRow> {
    d.mean
        .iter()
        .enumerate()
        .map(|(token, &mean_prob)| DistributionRow { token, mean_prob })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub condition: String,
    pub renormalize: bool,
    pub kept: usize,
    pub vocab: usize,
    pub mass: f64,
    pub full_accuracy: f64,
    pub pruned_accuracy: f64,
    pub delta_accuracy_points: f64,
    pub full_loss: f64,
    pub pruned_loss: f64,
    pub delta_loss: f64,
}

impl PruneRow {
    pub fn new(condition: &str, r: &PruneReport) -> Self {
        PruneRow {
            condition: condition.to_string(),
            renormalize: r.renormalize,
            kept: r.kept.len(),
            vocab: r.vocab,
            mass: r.mass,
            full_accuracy: r.full.token_accuracy,
            pruned_accuracy: r.pruned.token_accuracy,
            delta_accuracy_points: r.delta_accuracy_points,
            full_loss: r.full.mean_loss,
            pruned_loss: r.pruned.mean_loss,
            delta_loss: r.delta_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaRow {
    pub token: usize,
    pub x: f64,
    pub y: f64,
    pub highlight: bool,
}

pub fn pca_rows(p: &PcaResult) -> Vec<PcaRow> {
    p.coords
        .iter()
        .zip(&p.highlight)
        .enumerate()
        .map(|(token, (c, &highlight))| PcaRow {
            token,
            x: c[0],
            y: c[1],
            highlight,
        })
        .collect()
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

/// One `<rect class="bar">` per entry, labelled underneath. Negative values
/// hang below the zero line.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let hi = bars.iter().map(|b| b.1).fold(0.0f64, f64::max);
    let lo = bars.iter().map(|b| b.1).fold(0.0f64, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let plot_h = H - 2.0 * PAD;
    let y_of = |v: f64| PAD + (hi - v) / span * plot_h;
    let zero = y_of(0.0);
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    let _ = write!(
        out,
        r##"<line x1="{PAD}" y1="{zero:.2}" x2="{}" y2="{zero:.2}" stroke="#444"/>"##,
        W - PAD
    );
    let _ = write!(
        out,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = PAD + i as f64 * slot + slot * 0.15;
        let (top, h) = if *v >= 0.0 { (y_of(*v), zero - y_of(*v)) } else { (zero, y_of(*v) - zero) };
        let _ = write!(
            out,
            r##"<rect class="bar" data-label="{l}" x="{x:.2}" y="{top:.2}" width="{:.2}" height="{h:.2}" fill="#4a7fb5"><title>{l}: {v}</title></rect>"##,
            slot * 0.7,
            l = escape(label)
        );
        let _ = write!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            H - PAD + 16.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter plot; highlighted points are drawn last and in a second colour.
pub fn scatter(title: &str, points: &[(f64, f64, bool)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let bound = |f: fn(&(f64, f64, bool)) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, lo + 1.0)
        }
    };
    let (x0, x1) = bound(|p| p.0);
    let (y0, y1) = bound(|p| p.1);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let _ = write!(
        out,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#bbb"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    for pass in [false, true] {
        for &(x, y, h) in points.iter().filter(|p| p.2 == pass) {
            let (class, fill, r) = if h { ("point hl", "#d9480f", 3.0) } else { ("point", "#9aa5b1", 2.0) };
            let _ = write!(
                out,
                r#"<circle class="{class}" cx="{:.2}" cy="{:.2}" r="{r}" fill="{fill}"/>"#,
                sx(x),
                sy(y)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
