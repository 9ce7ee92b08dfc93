use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::roc::RocPoint;
use super::MetricsError;

/// One ROC curve with its bootstrap band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocSeries {
    pub name: String,
    pub auc: f64,
    pub auc_ci_95: (f64, f64),
    pub points: Vec<RocPoint>,
    /// `(fpr, tpr low, tpr high)` ascending in fpr.
    pub band: Vec<(f64, f64, f64)>,
}

const PALETTE: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
];

/// ROC curves, linearly interpolated between operating points, over
/// shaded 95% bands and the chance diagonal.
pub fn render_roc_svg(series: &[RocSeries], title: &str) -> Result<String, MetricsError> {
    let mut svg = String::new();
    {
        let err = |e: &dyn std::fmt::Display| MetricsError::Plot(e.to_string());
        let root = SVGBackend::with_string(&mut svg, (640, 600)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(16)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0f64..1.0, 0.0f64..1.0)
            .map_err(|e| err(&e))?;
        chart
            .configure_mesh()
            .x_desc("False positive rate")
            .y_desc("True positive rate")
            .draw()
            .map_err(|e| err(&e))?;
        chart
            .draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], BLACK.mix(0.3)))
            .map_err(|e| err(&e))?;
        for (k, s) in series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            if !s.band.is_empty() {
                let outline: Vec<(f64, f64)> = s
                    .band
                    .iter()
                    .map(|&(f, _, hi)| (f, hi))
                    .chain(s.band.iter().rev().map(|&(f, lo, _)| (f, lo)))
                    .collect();
                chart
                    .draw_series(std::iter::once(Polygon::new(outline, color.mix(0.15).filled())))
                    .map_err(|e| err(&e))?;
            }
            let label = format!(
                "{} AUC {:.3} ({:.3}-{:.3})",
                s.name, s.auc, s.auc_ci_95.0, s.auc_ci_95.1
            );
            chart
                .draw_series(LineSeries::new(
                    s.points.iter().map(|p| (p.fpr, p.tpr)),
                    color.stroke_width(2),
                ))
                .map_err(|e| err(&e))?
                .label(label)
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| err(&e))?;
        root.present().map_err(|e| err(&e))?;
    }
    Ok(svg)
}
