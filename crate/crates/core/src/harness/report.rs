//! Experiment report, its tables and its plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::privacy::{CostReport, PrivacyReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    /// Top-1 accuracy on the holdout set, in `[0, 1]`.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySummary {
    pub setting: String,
    /// Fourier perturbation strength, when one applies.
    pub lambda: Option<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub count: usize,
}

impl PrivacySummary {
    pub fn from_report(r: &PrivacyReport, lambda: Option<f64>) -> Self {
        Self::from_values(&r.setting, lambda, &r.psnr, &r.ssim)
    }

    pub fn from_values(setting: &str, lambda: Option<f64>, psnr: &[f64], ssim: &[f64]) -> Self {
        let n = psnr.len().max(1) as f64;
        Self {
            setting: setting.to_string(),
            lambda,
            mean_psnr: psnr.iter().sum::<f64>() / n,
            mean_ssim: ssim.iter().sum::<f64>() / n,
            count: psnr.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDiagnostics {
    pub client_id: usize,
    pub shard_size: usize,
    pub class_histogram: Vec<usize>,
    pub train_accuracy: Option<f64>,
    /// Local model accuracy on the shared holdout set.
    pub local_accuracy: Option<f64>,
    pub coreset_size: usize,
    pub covered_classes: Vec<usize>,
    pub payload_bytes: u64,
    pub synthesis_initial_loss: Option<f64>,
    pub synthesis_final_loss: Option<f64>,
    /// Batch-mean synthesis loss per iteration.
    pub synthesis_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub methods: Vec<MethodResult>,
    pub privacy: Vec<PrivacySummary>,
    pub comm: Option<CostReport>,
    pub autoencoder_recon_error: Option<f64>,
    pub stage_times: Vec<StageTime>,
    pub clients: Vec<ClientDiagnostics>,
}

impl ExperimentReport {
    pub fn accuracy(&self, method: &str) -> Option<f64> {
        self.methods.iter().find(|m| m.method == method).map(|m| m.accuracy)
    }

    pub fn privacy_for(&self, setting: &str) -> Option<&PrivacySummary> {
        self.privacy.iter().find(|p| p.setting == setting)
    }

    pub fn load(path: &Path) -> Result<Self> {
        super::stages::read_json(path)
    }

    pub fn methods_tsv(&self) -> String {
        let mut out = String::from("method\taccuracy\n");
        for m in &self.methods {
            let _ = writeln!(out, "{}\t{:.6}", m.method, m.accuracy);
        }
        out
    }

    pub fn privacy_tsv(&self) -> String {
        let mut out = String::from("setting\tlambda\tmean_psnr\tmean_ssim\tcount\n");
        for p in &self.privacy {
            let lambda = p.lambda.map_or("-".to_string(), |l| l.to_string());
            let _ = writeln!(out, "{}\t{lambda}\t{:.6}\t{:.6}\t{}", p.setting, p.mean_psnr, p.mean_ssim, p.count);
        }
        out
    }

    pub fn clients_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        let mut out = String::from(
            "client\tshard_size\ttrain_accuracy\tlocal_accuracy\tcoreset_size\tcovered_classes\tpayload_bytes\tsyn_initial\tsyn_final\n",
        );
        for c in &self.clients {
            let covered: Vec<String> = c.covered_classes.iter().map(|k| k.to_string()).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.client_id,
                c.shard_size,
                opt(c.train_accuracy),
                opt(c.local_accuracy),
                c.coreset_size,
                if covered.is_empty() { "-".to_string() } else { covered.join(",") },
                c.payload_bytes,
                opt(c.synthesis_initial_loss),
                opt(c.synthesis_final_loss),
            );
        }
        out
    }
}

/// What [`emit_report`] wrote, and what it skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Emitted {
    pub files: Vec<PathBuf>,
    pub notices: Vec<String>,
}

fn put(dir: &Path, name: &str, text: &str, done: &mut Emitted) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    done.files.push(path);
    Ok(())
}

/// Writes `report.json`, the config echo, TSV tables and SVG plots into
/// `dir`. Tables are a pure function of the report, so re-emitting is
/// byte-identical.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<Emitted> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut done = Emitted::default();
    let json = serde_json::to_string_pretty(report).expect("plain data serializes") + "\n";
    put(dir, "report.json", &json, &mut done)?;
    put(dir, "config.toml", &report.config.to_toml(), &mut done)?;
    put(dir, "methods.tsv", &report.methods_tsv(), &mut done)?;
    put(dir, "privacy.tsv", &report.privacy_tsv(), &mut done)?;
    put(dir, "clients.tsv", &report.clients_tsv(), &mut done)?;

    if report.methods.is_empty() {
        done.notices.push("no methods: accuracy plot skipped".into());
    } else {
        let bars: Vec<(String, f64)> = report.methods.iter().map(|m| (m.method.clone(), 100.0 * m.accuracy)).collect();
        put(dir, "accuracy.svg", &bar_chart("Global accuracy by method", "accuracy (%)", &bars, 100.0), &mut done)?;
    }
    let sweep: Vec<(f64, f64)> = report
        .privacy
        .iter()
        .filter(|p| p.setting.starts_with("sweep_"))
        .filter_map(|p| Some((p.lambda?, p.mean_psnr)))
        .collect();
    if sweep.is_empty() {
        done.notices.push("privacy section is empty: PSNR plot skipped".into());
    } else {
        put(dir, "psnr_vs_lambda.svg", &line_chart("Mean PSNR against perturbation strength", "lambda", "PSNR (dB)", &sweep), &mut done)?;
    }
    for n in &done.notices {
        warn!("{n}");
    }
    Ok(done)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="28" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(s: &mut String, y_label: &str, y_max: f64) {
    let (x0, y0, y1) = (MARGIN, H - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, W - MARGIN / 2.0);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.1}</text>"#, x0 - 6.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)], y_max: f64) -> String {
    let mut s = svg_open(title);
    axes(&mut s, y_label, y_max);
    let span = W - 1.5 * MARGIN;
    let slot = span / bars.len() as f64;
    let plot_h = H - 2.0 * MARGIN;
    for (i, (name, v)) in bars.iter().enumerate() {
        let h = plot_h * (v / y_max).clamp(0.0, 1.0);
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="#4878a8"/>"##,
            H - MARGIN - h,
            slot * 0.7
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.1}</text>"#, H - MARGIN - h - 4.0);
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#, H - MARGIN + 16.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn line_chart(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let y_max = (pts.iter().map(|p| p.1).fold(0.0, f64::max) * 1.1).max(1.0);
    let mut s = svg_open(title);
    axes(&mut s, y_label, y_max);
    let span = W - 1.5 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let xy = |(x, y): (f64, f64)| (MARGIN + span * x.clamp(0.0, 1.0), H - MARGIN - plot_h * (y / y_max).clamp(0.0, 1.0));
    let path: Vec<String> = pts.iter().map(|&p| xy(p)).map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#c04040" stroke-width="2"/>"##, path.join(" "));
    for &p in &pts {
        let (x, y) = xy(p);
        let _ = writeln!(s, r##"<circle cx="{x:.1}" cy="{y:.1}" r="4" fill="#c04040"/>"##);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#, H - MARGIN + 16.0, p.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, escape(x_label));
    s.push_str("</svg>\n");
    s
}
