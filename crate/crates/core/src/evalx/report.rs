use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;

use super::metrics::{ConfusionMatrix, MetricsReport};
use super::roc::RocReport;
use crate::dataset::{LesionClass, NUM_CLASSES};
use crate::error::{Error, Result};

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers a system TTF as plotters' `sans-serif` family. `DERMANET_FONT`
/// overrides the search list. Returns false when no font could be loaded, in
/// which case plots are drawn without text.
pub fn plot_font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let env = std::env::var("DERMANET_FONT").ok();
        let paths = env.iter().map(String::as_str).chain(FONT_CANDIDATES.iter().copied());
        for p in paths {
            if let Ok(bytes) = fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no TTF font found; plots will have no text labels");
        false
    })
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Image(format!("plot rendering failed: {e}"))
}

/// Renders into an RGB buffer and saves it as PNG.
pub(crate) fn render_png<F>(path: &Path, size: (u32, u32), draw: F) -> Result<()>
where
    F: FnOnce(DrawingArea<BitMapBackend<'_>, plotters::coord::Shift>) -> Result<()>,
{
    let mut buf = vec![0u8; (size.0 * size.1 * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, size).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        draw(root.clone())?;
        root.present().map_err(plot_err)?;
    }
    let img = image::RgbImage::from_raw(size.0, size.1, buf).expect("buffer sized to image");
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn class_palette(c: usize) -> RGBColor {
    const P: [RGBColor; NUM_CLASSES] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
        RGBColor(227, 119, 194),
    ];
    P[c % NUM_CLASSES]
}

pub fn write_confusion_csv(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let mut out = String::from("true\\pred");
    for c in LesionClass::ALL {
        out.push(',');
        out.push_str(c.code());
    }
    out.push('\n');
    for c in LesionClass::ALL {
        out.push_str(c.code());
        for v in cm.counts[c.index()] {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn plot_confusion(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let text = plot_font_available();
    render_png(path, (620, 600), |root| {
        let (left, top, cell) = (90i32, 60i32, 70i32);
        let row_max: Vec<u64> = (0..NUM_CLASSES).map(|r| cm.support(r).max(1)).collect();
        for r in 0..NUM_CLASSES {
            for c in 0..NUM_CLASSES {
                // Shade by row-normalized rate.
                let v = cm.counts[r][c] as f64 / row_max[r] as f64;
                let shade = (255.0 * (1.0 - 0.85 * v)) as u8;
                let (x, y) = (left + c as i32 * cell, top + r as i32 * cell);
                root.draw(&Rectangle::new([(x, y), (x + cell, y + cell)], RGBColor(shade, shade, 255).filled()))
                    .map_err(plot_err)?;
                root.draw(&Rectangle::new([(x, y), (x + cell, y + cell)], BLACK.stroke_width(1)))
                    .map_err(plot_err)?;
                if text {
                    let color = if v > 0.55 { WHITE } else { BLACK };
                    let style = ("sans-serif", 16).into_font().color(&color);
                    root.draw(&Text::new(cm.counts[r][c].to_string(), (x + 8, y + cell / 2 - 8), style))
                        .map_err(plot_err)?;
                }
            }
        }
        if text {
            let style = ("sans-serif", 16).into_font().color(&BLACK);
            for c in LesionClass::ALL {
                let i = c.index() as i32;
                root.draw(&Text::new(c.code(), (left + i * cell + 14, top - 24), style.clone()))
                    .map_err(plot_err)?;
                root.draw(&Text::new(c.code(), (20, top + i * cell + cell / 2 - 8), style.clone()))
                    .map_err(plot_err)?;
            }
            root.draw(&Text::new("predicted", (left + 3 * cell, 8), style.clone())).map_err(plot_err)?;
            root.draw(&Text::new("true", (20, top + 7 * cell + 8), style)).map_err(plot_err)?;
        }
        Ok(())
    })
}

pub fn write_roc_points(roc: &RocReport, path: &Path) -> Result<()> {
    let mut out = String::from("curve,threshold,fpr,tpr\n");
    let named = LesionClass::ALL
        .iter()
        .map(|c| c.code())
        .zip(&roc.per_class)
        .chain(std::iter::once(("micro", &roc.micro)));
    for (name, curve) in named {
        for i in 0..curve.fpr.len() {
            out.push_str(&format!("{name},{},{},{}\n", curve.thresholds[i], curve.fpr[i], curve.tpr[i]));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn plot_roc(roc: &RocReport, path: &Path) -> Result<()> {
    let text = plot_font_available();
    render_png(path, (700, 640), |root| {
        let mut builder = ChartBuilder::on(&root);
        builder.margin(20);
        if text {
            builder.caption("ROC (one-vs-rest)", ("sans-serif", 22)).x_label_area_size(40).y_label_area_size(50);
        }
        let mut chart = builder.build_cartesian_2d(0f64..1f64, 0f64..1f64).map_err(plot_err)?;
        if text {
            chart
                .configure_mesh()
                .x_desc("false positive rate")
                .y_desc("true positive rate")
                .draw()
                .map_err(plot_err)?;
        }
        chart
            .draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], RGBColor(180, 180, 180)))
            .map_err(plot_err)?;
        let named = LesionClass::ALL
            .iter()
            .map(|c| c.code())
            .zip(&roc.per_class)
            .enumerate()
            .map(|(i, (n, c))| (n.to_string(), c, class_palette(i)))
            .chain(std::iter::once(("micro".to_string(), &roc.micro, BLACK)));
        for (name, curve, color) in named {
            if curve.auc.is_none() {
                continue;
            }
            let label = format!("{name} (AUC {:.3})", curve.auc.unwrap_or(0.0));
            let pts: Vec<(f64, f64)> = curve.fpr.iter().copied().zip(curve.tpr.iter().copied()).collect();
            let width = if name == "micro" { 3 } else { 2 };
            let series = chart
                .draw_series(LineSeries::new(pts, color.stroke_width(width)))
                .map_err(plot_err)?;
            if text {
                series
                    .label(label)
                    .legend(move |(x, y)| PathElement::new([(x, y), (x + 18, y)], color.stroke_width(width)));
            }
        }
        if text {
            chart
                .configure_series_labels()
                .position(SeriesLabelPosition::LowerRight)
                .background_style(WHITE.mix(0.85))
                .border_style(BLACK)
                .draw()
                .map_err(plot_err)?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub metrics_json: PathBuf,
    pub confusion_csv: PathBuf,
    pub confusion_png: Option<PathBuf>,
    pub roc_png: Option<PathBuf>,
    pub roc_csv: Option<PathBuf>,
}

pub fn write_metrics_json(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_json(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `metrics.json`, `confusion.csv` and `confusion.png`, plus
/// `roc.png` / `roc_points.csv` when curves are available.
pub fn emit_report(
    report: &MetricsReport,
    roc: Option<&RocReport>,
    cm: &ConfusionMatrix,
    out_dir: &Path,
) -> Result<ReportFiles> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = ReportFiles {
        metrics_json: out_dir.join("metrics.json"),
        confusion_csv: out_dir.join("confusion.csv"),
        ..ReportFiles::default()
    };
    write_metrics_json(report, &files.metrics_json)?;
    write_confusion_csv(cm, &files.confusion_csv)?;
    if cm.total() > 0 {
        let p = out_dir.join("confusion.png");
        plot_confusion(cm, &p)?;
        files.confusion_png = Some(p);
    }
    match roc {
        Some(r) if r.per_class.iter().any(|c| c.auc.is_some()) => {
            let csv = out_dir.join("roc_points.csv");
            write_roc_points(r, &csv)?;
            files.roc_csv = Some(csv);
            let png = out_dir.join("roc.png");
            plot_roc(r, &png)?;
            files.roc_png = Some(png);
        }
        _ => log::warn!("no ROC curves to plot; skipping roc.png"),
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalx::{confusion_matrix, roc_auc_ovr};
    use ndarray::Array2;

    #[test]
    fn confusion_csv_layout() {
        let cm = confusion_matrix(&[0, 1, 1, 6], &[0, 1, 2, 6]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cm.csv");
        write_confusion_csv(&cm, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "true\\pred,akiec,bcc,bkl,df,mel,nv,vasc");
        assert_eq!(lines[3], "bkl,0,1,0,0,0,0,0");
        assert_eq!(lines.len(), 8);
    }

    #[test]
    fn roc_points_have_every_curve() {
        let labels: Vec<usize> = (0..14).map(|i| i % 7).collect();
        let scores = Array2::from_shape_fn((14, 7), |(i, c)| if c == labels[i] { 0.6 } else { 0.4 / 6.0 });
        let roc = roc_auc_ovr(&scores, &labels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roc.csv");
        write_roc_points(&roc, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("curve,threshold,fpr,tpr\n"));
        for name in ["akiec", "vasc", "micro"] {
            assert!(text.lines().any(|l| l.starts_with(&format!("{name},"))), "{name}");
        }
        plot_roc(&roc, &dir.path().join("roc.png")).unwrap();
        let img = image::open(dir.path().join("roc.png")).unwrap();
        assert!(img.width() > 0);
    }

    #[test]
    fn palette_is_distinct() {
        let colours: std::collections::HashSet<_> = (0..NUM_CLASSES).map(|c| {
            let p = class_palette(c);
            (p.0, p.1, p.2)
        }).collect();
        assert_eq!(colours.len(), NUM_CLASSES);
    }
}
